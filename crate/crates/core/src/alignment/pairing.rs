//! Row correspondences between the drone and satellite sets for Procrustes.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::descriptor::DescriptorSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingStrategy {
    /// Pair by equal `location_id`.
    GivenPairs,
    /// Label-free: mutual nearest neighbours under cosine similarity in the
    /// projected, centered spaces.
    MutualNn,
}

impl PairingStrategy {
    pub(crate) fn code(self) -> u8 {
        match self {
            PairingStrategy::GivenPairs => 0,
            PairingStrategy::MutualNn => 1,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(PairingStrategy::GivenPairs),
            1 => Some(PairingStrategy::MutualNn),
            _ => None,
        }
    }
}

/// Every drone view is paired with every satellite entry of its location, so
/// a location's satellite row repeats once per drone view.
pub fn given_pairs(
    drone: &DescriptorSet,
    satellite: &DescriptorSet,
) -> Result<Vec<(usize, usize)>> {
    if drone.is_empty() || satellite.is_empty() {
        return Err(Error::invalid(
            "pairing needs non-empty drone and satellite sets",
        ));
    }
    let mut by_location: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, s) in satellite.iter().enumerate() {
        by_location
            .entry(s.location_id.as_str())
            .or_default()
            .push(j);
    }
    let mut pairs = Vec::new();
    for (i, d) in drone.iter().enumerate() {
        if let Some(js) = by_location.get(d.location_id.as_str()) {
            pairs.extend(js.iter().map(|&j| (i, j)));
        }
    }
    if pairs.is_empty() {
        return Err(Error::invalid(
            "drone and satellite sets share no location_id",
        ));
    }
    Ok(pairs)
}

fn unit_rows(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

fn argmax_rows(sim: &DMatrix<f64>) -> Vec<usize> {
    sim.row_iter()
        .map(|row| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Pairs `(i, j)` where `j` is the most cosine-similar satellite row to drone
/// row `i` and vice versa. Ties go to the lower index.
pub fn mutual_nn_pairs(
    drone: &DMatrix<f64>,
    satellite: &DMatrix<f64>,
) -> Result<Vec<(usize, usize)>> {
    if drone.nrows() == 0 || satellite.nrows() == 0 {
        return Err(Error::invalid(
            "pairing needs non-empty drone and satellite sets",
        ));
    }
    if drone.ncols() != satellite.ncols() {
        return Err(Error::DimensionMismatch {
            expected: drone.ncols(),
            got: satellite.ncols(),
        });
    }
    let sim = unit_rows(drone) * unit_rows(satellite).transpose();
    let d2s = argmax_rows(&sim);
    let s2d = argmax_rows(&sim.transpose());
    Ok(d2s
        .iter()
        .enumerate()
        .filter(|&(i, &j)| s2d[j] == i)
        .map(|(i, &j)| (i, j))
        .collect())
}
