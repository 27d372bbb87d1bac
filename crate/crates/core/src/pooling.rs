//! Spatial pooling operators: average, max, class-token pass-through and
//! generalized mean (GeM).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::FeatureMap;

pub const DEFAULT_GEM_P: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingKind {
    Avg,
    Max,
    Cls,
    Gem,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolingSpec {
    pub kind: PoolingKind,
    /// GeM exponent; ignored for other kinds.
    pub p: f64,
    /// Clamp negative activations to zero before GeM. When false, a negative
    /// activation is an error.
    pub clamp_negative: bool,
}

impl Default for PoolingSpec {
    fn default() -> Self {
        Self {
            kind: PoolingKind::Gem,
            p: DEFAULT_GEM_P,
            clamp_negative: true,
        }
    }
}

impl PoolingSpec {
    pub fn avg() -> Self {
        Self {
            kind: PoolingKind::Avg,
            ..Self::default()
        }
    }

    pub fn max() -> Self {
        Self {
            kind: PoolingKind::Max,
            ..Self::default()
        }
    }

    pub fn cls() -> Self {
        Self {
            kind: PoolingKind::Cls,
            ..Self::default()
        }
    }

    pub fn gem(p: f64) -> Self {
        Self {
            kind: PoolingKind::Gem,
            p,
            clamp_negative: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p.is_finite() && self.p >= 1.0) {
            return Err(Error::arg(format!(
                "GeM exponent p must be finite and >= 1, got {}",
                self.p
            )));
        }
        Ok(())
    }
}

/// Axis-aligned rectangle in patch coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Region {
    pub fn new(row0: usize, col0: usize, rows: usize, cols: usize) -> Self {
        Self {
            row0,
            col0,
            rows,
            cols,
        }
    }

    pub fn full(map: &FeatureMap) -> Self {
        Self::new(0, 0, map.height(), map.width())
    }

    pub fn area(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledVector {
    pub values: Vec<f64>,
    pub source_region: Region,
}

pub fn pool_region(map: &FeatureMap, region: Region, spec: &PoolingSpec) -> Result<PooledVector> {
    if region.rows == 0 || region.cols == 0 {
        return Err(Error::arg("empty pooling region"));
    }
    if region.row0 + region.rows > map.height() || region.col0 + region.cols > map.width() {
        return Err(Error::arg(format!(
            "region ({},{},{},{}) outside {}x{} grid",
            region.row0,
            region.col0,
            region.rows,
            region.cols,
            map.height(),
            map.width()
        )));
    }
    let pool: fn(&mut dyn Iterator<Item = f64>, usize, &PoolingSpec) -> Result<f64> =
        match spec.kind {
            PoolingKind::Avg => |it, n, _| Ok(it.sum::<f64>() / n as f64),
            PoolingKind::Max => |it, _, _| Ok(it.fold(f64::NEG_INFINITY, f64::max)),
            PoolingKind::Gem => {
                spec.validate()?;
                gem
            }
            PoolingKind::Cls => {
                return Err(Error::arg(
                    "class-token pooling is not spatial; export the token as a 1x1 tensor",
                ))
            }
        };

    let n = region.area();
    let mut values = Vec::with_capacity(map.channels());
    for k in 0..map.channels() {
        let plane = map.plane(k);
        let w = map.width();
        let mut it = (region.row0..region.row0 + region.rows)
            .flat_map(|i| plane[i * w + region.col0..i * w + region.col0 + region.cols].iter())
            .map(|&v| v as f64);
        values.push(pool(&mut it, n, spec)?);
    }
    Ok(PooledVector {
        values,
        source_region: region,
    })
}

// Computed as m * (mean((x/m)^p))^(1/p) with m the region max, which keeps
// large p from overflowing and guarantees the result never exceeds m.
fn gem(it: &mut dyn Iterator<Item = f64>, n: usize, spec: &PoolingSpec) -> Result<f64> {
    let mut xs = Vec::with_capacity(n);
    for x in it {
        if x < 0.0 {
            if !spec.clamp_negative {
                return Err(Error::invalid(format!(
                    "negative activation {x} under GeM with clamping disabled"
                )));
            }
            xs.push(0.0);
        } else {
            xs.push(x);
        }
    }
    let m = xs.iter().copied().fold(0.0, f64::max);
    if m == 0.0 {
        return Ok(0.0);
    }
    if spec.p == 1.0 {
        return Ok(xs.iter().sum::<f64>() / n as f64);
    }
    let mean = xs.iter().map(|x| (x / m).powf(spec.p)).sum::<f64>() / n as f64;
    Ok(m * mean.powf(1.0 / spec.p))
}

pub fn pool_cls(cls_vector: &[f32]) -> Result<PooledVector> {
    if let Some(i) = cls_vector.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    Ok(PooledVector {
        values: cls_vector.iter().map(|&v| v as f64).collect(),
        source_region: Region::new(0, 0, 1, 1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::{Domain, ImageMeta};
    use proptest::prelude::*;

    fn map(c: usize, h: usize, w: usize, data: Vec<f32>) -> FeatureMap {
        FeatureMap::new(ImageMeta::new("m", Domain::Drone, "l"), c, h, w, data).unwrap()
    }

    fn one_to_four() -> FeatureMap {
        map(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0])
    }

    #[test]
    fn gem_of_constant_is_constant() {
        let m = map(3, 4, 5, vec![5.0; 60]);
        let r = pool_region(&m, Region::new(1, 2, 2, 3), &PoolingSpec::gem(3.0)).unwrap();
        for v in r.values {
            assert!((v - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn avg_max_gem_on_one_to_four() {
        let m = one_to_four();
        let full = Region::full(&m);
        assert_eq!(
            pool_region(&m, full, &PoolingSpec::avg()).unwrap().values,
            vec![2.5]
        );
        assert_eq!(
            pool_region(&m, full, &PoolingSpec::max()).unwrap().values,
            vec![4.0]
        );
        let g = pool_region(&m, full, &PoolingSpec::gem(3.0))
            .unwrap()
            .values[0];
        // ((1 + 8 + 27 + 64) / 4)^(1/3) = 25^(1/3)
        assert!((g - 25f64.cbrt()).abs() < 1e-12);
        assert!((g - 2.9240).abs() < 1e-4);
    }

    #[test]
    fn cls_kind_rejected_for_regions() {
        let m = one_to_four();
        assert!(pool_region(&m, Region::full(&m), &PoolingSpec::cls()).is_err());
    }

    #[test]
    fn bad_regions() {
        let m = one_to_four();
        assert!(pool_region(&m, Region::new(0, 0, 0, 1), &PoolingSpec::avg()).is_err());
        assert!(pool_region(&m, Region::new(1, 1, 2, 1), &PoolingSpec::avg()).is_err());
    }

    #[test]
    fn negative_activation_policy() {
        let m = map(1, 1, 2, vec![-8.0, 8.0]);
        let full = Region::full(&m);
        let clamped = pool_region(&m, full, &PoolingSpec::gem(3.0))
            .unwrap()
            .values[0];
        assert!((clamped - (256f64).cbrt()).abs() < 1e-12);
        let strict = PoolingSpec {
            clamp_negative: false,
            ..PoolingSpec::gem(3.0)
        };
        assert!(pool_region(&m, full, &strict).is_err());
    }

    #[test]
    fn invalid_p() {
        let m = one_to_four();
        for p in [0.5, f64::NAN, f64::INFINITY] {
            assert!(pool_region(&m, Region::full(&m), &PoolingSpec::gem(p)).is_err());
        }
    }

    #[test]
    fn huge_p_does_not_overflow() {
        let m = map(1, 1, 3, vec![1e30, 5e29, 1.0]);
        let g = pool_region(&m, Region::full(&m), &PoolingSpec::gem(64.0))
            .unwrap()
            .values[0];
        assert!(g.is_finite() && g <= 1e30_f32 as f64);
    }

    #[test]
    fn cls_pass_through() {
        assert_eq!(
            pool_cls(&[1.0, 2.0, 3.0]).unwrap().values,
            vec![1.0, 2.0, 3.0]
        );
        assert_eq!(pool_cls(&[0.0, 0.0]).unwrap().values, vec![0.0, 0.0]);
        assert!(pool_cls(&[1.0, f32::INFINITY]).is_err());
    }

    fn nonneg_map() -> impl Strategy<Value = FeatureMap> {
        (1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(c, h, w)| {
            proptest::collection::vec(0f32..10.0, c * h * w).prop_map(move |d| map(c, h, w, d))
        })
    }

    proptest! {
        #[test]
        fn gem_p1_equals_avg(m in nonneg_map()) {
            let full = Region::full(&m);
            let a = pool_region(&m, full, &PoolingSpec::avg()).unwrap().values;
            let g = pool_region(&m, full, &PoolingSpec::gem(1.0)).unwrap().values;
            for (x, y) in a.iter().zip(&g) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn gem_is_monotone_in_p_and_approaches_max(m in nonneg_map()) {
            let full = Region::full(&m);
            let a = pool_region(&m, full, &PoolingSpec::avg()).unwrap().values;
            let mx = pool_region(&m, full, &PoolingSpec::max()).unwrap().values;
            let mut prev: Option<Vec<f64>> = None;
            for p in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0] {
                let g = pool_region(&m, full, &PoolingSpec::gem(p)).unwrap().values;
                for k in 0..g.len() {
                    prop_assert!(g[k] <= mx[k]);
                    prop_assert!(g[k] >= a[k] - 1e-12 * a[k].max(1.0));
                    if let Some(prev) = &prev {
                        prop_assert!(g[k] >= prev[k] - 1e-12 * g[k].max(1.0));
                    }
                    if p == 64.0 {
                        prop_assert!((g[k] - mx[k]).abs() <= 0.05 * mx[k]);
                    }
                }
                prev = Some(g);
            }
        }

        #[test]
        fn region_pool_equals_crop_pool(
            (m, r0, c0, rs, cs) in nonneg_map().prop_flat_map(|m| {
                let (h, w) = (m.height(), m.width());
                (Just(m), 0..h, 0..w).prop_flat_map(move |(m, r0, c0)| {
                    (Just(m), Just(r0), Just(c0), 1..=h - r0, 1..=w - c0)
                })
            }),
        ) {
            let crop = m.crop(r0, c0, rs, cs).unwrap();
            for spec in [PoolingSpec::avg(), PoolingSpec::max(), PoolingSpec::gem(3.0)] {
                let a = pool_region(&m, Region::new(r0, c0, rs, cs), &spec).unwrap().values;
                let b = pool_region(&crop, Region::full(&crop), &spec).unwrap().values;
                prop_assert_eq!(a, b);
            }
        }
    }
}
