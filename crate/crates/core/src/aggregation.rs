//! Scale-weighted regional aggregation.
//!
//! For every scale `n` the patch grid is split into `n x n` non-overlapping
//! regions, each region is pooled and (optionally) L2-normalized, and the
//! region vectors are summed. The per-scale sums are weighted by `n^-alpha`,
//! added up, and the total is L2-normalized.
//!
//! The per-scale sums do not depend on `alpha`, so [`ScaleSums`] caches them
//! and [`ScaleSums::combine`] produces the descriptor for any decay factor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptor::{Descriptor, DescriptorSet};
use crate::error::{Error, Result};
use crate::feature_store::{Dataset, FeatureMap};
use crate::pooling::{pool_cls, pool_region, PoolingKind, PoolingSpec, Region};

pub const DEFAULT_SCALES: [usize; 3] = [1, 2, 3];
pub const DEFAULT_ALPHA: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationSpec {
    pub scales: Vec<usize>,
    pub alpha: f64,
    /// L2-normalize each region vector before the per-scale sum.
    pub region_norm: bool,
}

impl Default for AggregationSpec {
    fn default() -> Self {
        Self {
            scales: DEFAULT_SCALES.to_vec(),
            alpha: DEFAULT_ALPHA,
            region_norm: true,
        }
    }
}

impl AggregationSpec {
    pub fn single_scale() -> Self {
        Self {
            scales: vec![1],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::arg("scales must be non-empty"));
        }
        if self.scales[0] == 0 || self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::arg(format!(
                "scales must be positive and strictly increasing, got {:?}",
                self.scales
            )));
        }
        check_alpha(self.alpha)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::arg(format!(
            "alpha must be finite and >= 0, got {alpha}"
        )));
    }
    Ok(())
}

/// Boundaries of a uniform partition of `size` cells into `n` parts:
/// `round(i * size / n)` for `i = 0..=n`, halves rounded up.
pub fn partition_bounds(size: usize, n: usize) -> Vec<usize> {
    (0..=n).map(|i| (2 * i * size + n) / (2 * n)).collect()
}

/// The `n x n` regions of one scale in row-major order.
pub fn scale_regions(height: usize, width: usize, n: usize) -> Vec<Region> {
    let rb = partition_bounds(height, n);
    let cb = partition_bounds(width, n);
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(Region::new(
                rb[i],
                cb[j],
                rb[i + 1] - rb[i],
                cb[j + 1] - cb[j],
            ));
        }
    }
    out
}

fn l2_normalize_in_place(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// One scale's summed region vectors, before decay weighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleTerm {
    pub scale: usize,
    pub sum: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSums {
    pub terms: Vec<ScaleTerm>,
}

impl ScaleSums {
    pub fn compute(
        map: &FeatureMap,
        pooling: &PoolingSpec,
        spec: &AggregationSpec,
    ) -> Result<Self> {
        spec.validate()?;
        if pooling.kind == PoolingKind::Cls {
            if map.height() != 1 || map.width() != 1 || spec.scales != [1] {
                return Err(Error::arg(
                    "class-token pooling needs a 1x1 tensor and scales = [1]",
                ));
            }
            let mut v = pool_cls(map.data())?.values;
            if spec.region_norm {
                l2_normalize_in_place(&mut v);
            }
            return Ok(Self {
                terms: vec![ScaleTerm { scale: 1, sum: v }],
            });
        }
        let limit = map.height().min(map.width());
        let mut terms = Vec::with_capacity(spec.scales.len());
        for &n in &spec.scales {
            if n > limit {
                return Err(Error::arg(format!(
                    "scale {n} exceeds the {}x{} patch grid of {:?}",
                    map.height(),
                    map.width(),
                    map.meta.image_id
                )));
            }
            let mut sum = vec![0.0; map.channels()];
            for region in scale_regions(map.height(), map.width(), n) {
                let mut v = pool_region(map, region, pooling)?.values;
                if spec.region_norm {
                    l2_normalize_in_place(&mut v);
                }
                sum.iter_mut().zip(&v).for_each(|(s, x)| *s += x);
            }
            terms.push(ScaleTerm { scale: n, sum });
        }
        Ok(Self { terms })
    }

    /// Weighted total `sum_n n^-alpha * S_n`, L2-normalized.
    pub fn combine(&self, alpha: f64) -> Result<Vec<f64>> {
        check_alpha(alpha)?;
        let dim = self.terms.first().map_or(0, |t| t.sum.len());
        let mut total = vec![0.0; dim];
        for t in &self.terms {
            let w = (t.scale as f64).powf(-alpha);
            total
                .iter_mut()
                .zip(&t.sum)
                .for_each(|(acc, s)| *acc += w * s);
        }
        if l2_normalize_in_place(&mut total) == 0.0 {
            return Err(Error::Numerical(
                "aggregate descriptor is all zeros and cannot be normalized".into(),
            ));
        }
        Ok(total)
    }
}

pub fn aggregate(
    map: &FeatureMap,
    pooling: &PoolingSpec,
    spec: &AggregationSpec,
) -> Result<Descriptor> {
    let sums = ScaleSums::compute(map, pooling, spec)?;
    let values = sums.combine(spec.alpha)?;
    Ok(Descriptor::new(
        &map.meta,
        values.into_iter().map(|v| v as f32).collect(),
    ))
}

/// Like [`aggregate`], also returning the per-scale sums for inspection.
pub fn aggregate_traced(
    map: &FeatureMap,
    pooling: &PoolingSpec,
    spec: &AggregationSpec,
) -> Result<(Descriptor, ScaleSums)> {
    let sums = ScaleSums::compute(map, pooling, spec)?;
    let values = sums.combine(spec.alpha)?;
    Ok((
        Descriptor::new(&map.meta, values.into_iter().map(|v| v as f32).collect()),
        sums,
    ))
}

/// Loads every tensor of `dataset` and computes its scale sums, in parallel.
/// The result is in manifest order.
pub fn dataset_scale_sums(
    dataset: &Dataset,
    pooling: &PoolingSpec,
    spec: &AggregationSpec,
) -> Result<Vec<(crate::feature_store::ImageMeta, ScaleSums)>> {
    (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let map = dataset.load(i)?;
            let sums = ScaleSums::compute(&map, pooling, spec)?;
            Ok((map.meta, sums))
        })
        .collect()
}

pub fn aggregate_dataset(
    dataset: &Dataset,
    pooling: &PoolingSpec,
    spec: &AggregationSpec,
) -> Result<DescriptorSet> {
    let sums = dataset_scale_sums(dataset, pooling, spec)?;
    descriptors_for_alpha(&sums, spec.alpha)
}

fn descriptors_for_alpha(
    sums: &[(crate::feature_store::ImageMeta, ScaleSums)],
    alpha: f64,
) -> Result<DescriptorSet> {
    let entries = sums
        .iter()
        .map(|(meta, s)| {
            let v = s.combine(alpha)?;
            Ok(Descriptor::new(
                meta,
                v.into_iter().map(|x| x as f32).collect(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    DescriptorSet::new(entries)
}

/// One descriptor set per decay factor, pooling each region once.
pub fn sweep_alpha(
    dataset: &Dataset,
    pooling: &PoolingSpec,
    spec: &AggregationSpec,
    alphas: &[f64],
) -> Result<Vec<(f64, DescriptorSet)>> {
    if alphas.is_empty() {
        return Err(Error::arg("alpha sweep needs at least one alpha"));
    }
    alphas.iter().try_for_each(|&a| check_alpha(a))?;
    let sums = dataset_scale_sums(dataset, pooling, spec)?;
    sweep_alpha_from_sums(&sums, alphas)
}

pub fn sweep_alpha_from_sums(
    sums: &[(crate::feature_store::ImageMeta, ScaleSums)],
    alphas: &[f64],
) -> Result<Vec<(f64, DescriptorSet)>> {
    alphas
        .iter()
        .map(|&a| Ok((a, descriptors_for_alpha(sums, a)?)))
        .collect()
}
