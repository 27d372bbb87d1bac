//! Statistical manifold alignment.
//!
//! Each domain is centered and projected onto its own top-`d` principal axes,
//! then an orthogonal matrix fitted by Procrustes on paired rows rotates the
//! drone subspace onto the satellite subspace. Satellite descriptors are
//! never rotated.

mod model_io;
pub mod pairing;
pub mod pca;
pub mod procrustes;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::descriptor::{descriptor_sets_hash, DescriptorSet};
use crate::error::{Error, Result};
use crate::feature_store::Domain;

pub use model_io::{
    decode_model, encode_model, load_model, save_model, MODEL_MAGIC, MODEL_VERSION,
};
pub use pairing::{given_pairs, mutual_nn_pairs, PairingStrategy};
pub use pca::{fit_pca, project, project_vector, DomainStats, PcaSpectrum};
pub use procrustes::{fit_procrustes, procrustes_objective, ProcrustesFit};

/// Cap applied by [`DimSelection::Auto`].
pub const AUTO_DIM_CAP: usize = 256;

/// How the shared PCA target dimension `d` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimSelection {
    /// `min(256, N - 1, D)` with `N` the smaller domain's sample count.
    Auto,
    Fixed(usize),
    /// Smallest `d` retaining the given fraction of variance in both domains.
    Variance(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignParams {
    pub dim: DimSelection,
    pub pairing: PairingStrategy,
    pub strict_rotation: bool,
}

impl Default for AlignParams {
    fn default() -> Self {
        Self {
            dim: DimSelection::Auto,
            pairing: PairingStrategy::GivenPairs,
            strict_rotation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentModel {
    pub drone: DomainStats,
    pub satellite: DomainStats,
    /// `d x d`, orthogonal.
    pub rotation: DMatrix<f64>,
    pub pairing: PairingStrategy,
    pub strict_rotation: bool,
    /// Tied or vanishing singular values in the Procrustes fit.
    pub non_unique: bool,
    /// Mutual-NN pairing produced fewer than `d` pairs.
    pub degenerate_pairs: bool,
    pub dataset_name: String,
    /// [`descriptor_sets_hash`] of the sets the model was fitted on.
    pub fitted_on: u64,
}

/// Which parts of the transform to apply; the partial modes exist for
/// ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    Full,
    PcaOnly,
}

impl AlignmentModel {
    pub fn dim(&self) -> usize {
        self.rotation.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.drone.input_dim()
    }

    fn stats(&self, domain: Domain) -> &DomainStats {
        match domain {
            Domain::Drone => &self.drone,
            Domain::Satellite => &self.satellite,
        }
    }

    /// Drone: `((x - mu_D) P_D) R`. Satellite: `(x - mu_S) P_S`.
    pub fn apply(&self, x: &[f64], domain: Domain) -> Result<DVector<f64>> {
        self.apply_mode(x, domain, AlignMode::Full)
    }

    pub fn apply_mode(&self, x: &[f64], domain: Domain, mode: AlignMode) -> Result<DVector<f64>> {
        let projected = project_vector(self.stats(domain), x)?;
        Ok(match (domain, mode) {
            (Domain::Drone, AlignMode::Full) => self.rotation.tr_mul(&projected),
            _ => projected,
        })
    }

    pub fn apply_set(
        &self,
        set: &DescriptorSet,
        domain: Domain,
        mode: AlignMode,
    ) -> Result<AlignedSet> {
        let mut ids = Vec::with_capacity(set.len());
        let mut vectors = Vec::with_capacity(set.len());
        for d in set {
            let x: Vec<f64> = d.values.iter().map(|&v| v as f64).collect();
            vectors.push(self.apply_mode(&x, domain, mode)?.as_slice().to_vec());
            ids.push(d.image_id.clone());
        }
        Ok(AlignedSet { ids, vectors })
    }

    /// True when `sets` hash to the value recorded at fit time. A mismatch is
    /// logged, not rejected: applying a model to held-out data is normal.
    pub fn check_fitted_on(&self, sets: &[&DescriptorSet]) -> bool {
        let h = descriptor_sets_hash(sets);
        if h != self.fitted_on {
            log::warn!(
                "descriptor sets hash {h:016x} differs from the model's fitted-on hash {:016x}",
                self.fitted_on
            );
            return false;
        }
        true
    }
}

/// Vectors in the shared aligned space, ready for cosine search.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSet {
    pub ids: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

impl AlignedSet {
    /// Raw descriptors without any transform.
    pub fn raw(set: &DescriptorSet) -> Self {
        Self {
            ids: set.iter().map(|d| d.image_id.clone()).collect(),
            vectors: set
                .iter()
                .map(|d| d.values.iter().map(|&v| v as f64).collect())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.vectors.first().map(Vec::len)
    }
}

pub fn descriptor_matrix(set: &DescriptorSet) -> DMatrix<f64> {
    let dim = set.dim().unwrap_or(0);
    DMatrix::from_fn(set.len(), dim, |i, j| set.entries[i].values[j] as f64)
}

fn select_rows(x: &DMatrix<f64>, rows: impl Iterator<Item = usize>) -> DMatrix<f64> {
    let rows: Vec<usize> = rows.collect();
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

fn resolve_dim(sel: DimSelection, drone: &PcaSpectrum, sat: &PcaSpectrum) -> Result<usize> {
    let limit = drone.max_components().min(sat.max_components());
    let d = match sel {
        DimSelection::Auto => AUTO_DIM_CAP.min(limit),
        DimSelection::Fixed(d) => d,
        DimSelection::Variance(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::arg(format!(
                    "variance fraction must be in (0, 1], got {f}"
                )));
            }
            drone
                .components_for_variance(f)
                .max(sat.components_for_variance(f))
                .min(limit)
        }
    };
    if d == 0 || d > limit {
        return Err(Error::arg(format!(
            "target dimension {d} outside [1, {limit}] (N_drone = {}, N_satellite = {}, D = {})",
            drone.samples,
            sat.samples,
            drone.dim()
        )));
    }
    Ok(d)
}

/// Fits domain-wise PCA on each set, pairs rows, and solves Procrustes on
/// the paired projections.
pub fn fit_alignment(
    drone: &DescriptorSet,
    satellite: &DescriptorSet,
    params: &AlignParams,
    dataset_name: &str,
) -> Result<AlignmentModel> {
    drone.validate()?;
    satellite.validate()?;
    let (dd, sd) = (drone.dim(), satellite.dim());
    if dd.is_none() || sd.is_none() {
        return Err(Error::invalid(
            "alignment needs non-empty drone and satellite sets",
        ));
    }
    if dd != sd {
        return Err(Error::DimensionMismatch {
            expected: dd.unwrap(),
            got: sd.unwrap(),
        });
    }

    let xd = descriptor_matrix(drone);
    let xs = descriptor_matrix(satellite);
    let spec_d = PcaSpectrum::fit(&xd)?;
    let spec_s = PcaSpectrum::fit(&xs)?;
    let d = resolve_dim(params.dim, &spec_d, &spec_s)?;
    let stats_d = spec_d.truncate(d)?;
    let stats_s = spec_s.truncate(d)?;
    let pd = project(&stats_d, &xd)?;
    let ps = project(&stats_s, &xs)?;

    let pairs = match params.pairing {
        PairingStrategy::GivenPairs => given_pairs(drone, satellite)?,
        PairingStrategy::MutualNn => mutual_nn_pairs(&pd, &ps)?,
    };
    if pairs.is_empty() {
        return Err(Error::invalid("no mutual nearest-neighbour pairs found"));
    }
    let degenerate_pairs = params.pairing == PairingStrategy::MutualNn && pairs.len() < d;
    if degenerate_pairs {
        log::warn!(
            "mutual-NN pairing found {} pairs for d = {d}; the rotation is under-determined",
            pairs.len()
        );
    }

    let a = select_rows(&pd, pairs.iter().map(|p| p.0));
    let b = select_rows(&ps, pairs.iter().map(|p| p.1));
    let fit = fit_procrustes(&a, &b, params.strict_rotation)?;
    if fit.non_unique {
        log::warn!("Procrustes optimum is not unique (tied or vanishing singular values)");
    }

    Ok(AlignmentModel {
        drone: stats_d,
        satellite: stats_s,
        rotation: fit.rotation,
        pairing: params.pairing,
        strict_rotation: params.strict_rotation,
        non_unique: fit.non_unique,
        degenerate_pairs,
        dataset_name: dataset_name.to_string(),
        fitted_on: descriptor_sets_hash(&[drone, satellite]),
    })
}
