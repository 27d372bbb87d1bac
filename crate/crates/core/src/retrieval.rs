//! Exact cosine top-K search and patch-level similarity heatmaps.

use std::cmp::Ordering;
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{AlignedSet, AlignmentModel};
use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::feature_store::{Domain, FeatureMap};
use crate::io_util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query_id: String,
    pub hits: Vec<Hit>,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; zero if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(&unit(a), &unit(b))
}

fn hit_order(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Exact top-`k` gallery matches for every query, by cosine similarity.
/// Ties are broken by ascending gallery id. Returns `min(k, |gallery|)` hits
/// per query, in query order.
pub fn search(queries: &AlignedSet, gallery: &AlignedSet, k: usize) -> Result<Vec<RankedResult>> {
    if k == 0 {
        return Err(Error::arg("K must be at least 1"));
    }
    if gallery.is_empty() {
        return Err(Error::arg("gallery is empty"));
    }
    let dim = gallery.dim().unwrap();
    for v in queries.vectors.iter().chain(&gallery.vectors) {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
    }
    let gallery_unit: Vec<Vec<f64>> = gallery.vectors.iter().map(|v| unit(v)).collect();
    let keep = k.min(gallery.len());

    Ok(queries
        .ids
        .par_iter()
        .zip(queries.vectors.par_iter())
        .map(|(qid, q)| {
            let q = unit(q);
            let mut scored: Vec<(f64, &str)> = gallery_unit
                .iter()
                .zip(&gallery.ids)
                .map(|(g, id)| (dot(&q, g), id.as_str()))
                .collect();
            if keep < scored.len() {
                scored.select_nth_unstable_by(keep - 1, hit_order);
                scored.truncate(keep);
            }
            scored.sort_by(hit_order);
            RankedResult {
                query_id: qid.clone(),
                hits: scored
                    .into_iter()
                    .map(|(score, id)| Hit {
                        id: id.to_string(),
                        score,
                    })
                    .collect(),
            }
        })
        .collect())
}

pub fn results_to_jsonl(results: &[RankedResult]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&serde_json::to_string(r).expect("result serializes"));
        out.push('\n');
    }
    out
}

pub fn results_from_jsonl(text: &str) -> Result<Vec<RankedResult>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::invalid(format!("results line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn write_results(results: &[RankedResult], path: &Path) -> Result<()> {
    io_util::write_atomic(path, results_to_jsonl(results).as_bytes())
}

pub fn read_results(path: &Path) -> Result<Vec<RankedResult>> {
    let bytes = io_util::read_file(path)?;
    results_from_jsonl(&String::from_utf8_lossy(&bytes))
}

/// Per-patch similarity to a satellite descriptor, min-max normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub query_id: String,
    pub gallery_id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major, in `[0, 1]`.
    pub values: Vec<f64>,
    /// Raw cosines before normalization, row-major.
    pub cosines: Vec<f64>,
    /// All cosines were equal; `values` is uniformly 0.5.
    pub constant: bool,
}

/// Tolerance below which a cosine range counts as constant.
const CONSTANT_RANGE: f64 = 1e-12;

pub fn similarity_heatmap(
    drone_map: &FeatureMap,
    sat: &Descriptor,
    model: &AlignmentModel,
) -> Result<Heatmap> {
    if drone_map.channels() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            got: drone_map.channels(),
        });
    }
    let sat_x: Vec<f64> = sat.values.iter().map(|&v| v as f64).collect();
    let target = model.apply(&sat_x, Domain::Satellite)?;
    let (h, w) = (drone_map.height(), drone_map.width());
    let mut cosines = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let patch: Vec<f64> = drone_map
                .patch_vector(i, j)
                .into_iter()
                .map(f64::from)
                .collect();
            let aligned: DVector<f64> = model.apply(&patch, Domain::Drone)?;
            cosines.push(cosine(aligned.as_slice(), target.as_slice()));
        }
    }
    let (lo, hi) = cosines
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &c| {
            (lo.min(c), hi.max(c))
        });
    let constant = hi - lo <= CONSTANT_RANGE;
    let values = if constant {
        log::warn!(
            "heatmap for {:?} vs {:?} is constant; emitting uniform 0.5",
            drone_map.meta.image_id,
            sat.image_id
        );
        vec![0.5; cosines.len()]
    } else {
        cosines.iter().map(|c| (c - lo) / (hi - lo)).collect()
    };
    Ok(Heatmap {
        query_id: drone_map.meta.image_id.clone(),
        gallery_id: sat.image_id.clone(),
        height: h,
        width: w,
        values,
        cosines,
        constant,
    })
}

/// Bilinear resize with align-corners sampling: the corner cells of the
/// input land exactly on the corner pixels of the output.
pub fn upsample_bilinear(
    values: &[f64],
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f64>> {
    if values.len() != height * width || height == 0 || width == 0 {
        return Err(Error::arg("grid size does not match value count"));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg("upsample target must be non-empty"));
    }
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        if out == 1 || inp == 1 {
            return (0, 0, 0.0);
        }
        let x = o as f64 * (inp - 1) as f64 / (out - 1) as f64;
        let x0 = (x.floor() as usize).min(inp - 2);
        (x0, x0 + 1, x - x0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oi in 0..out_h {
        let (i0, i1, fy) = coord(oi, out_h, height);
        for oj in 0..out_w {
            let (j0, j1, fx) = coord(oj, out_w, width);
            let v = |i: usize, j: usize| values[i * width + j];
            let top = v(i0, j0) * (1.0 - fx) + v(i0, j1) * fx;
            let bottom = v(i1, j0) * (1.0 - fx) + v(i1, j1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(out)
}

/// Binary PGM (P5) with 16-bit big-endian samples, values clamped to `[0, 1]`.
pub fn encode_pgm16(values: &[f64], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in values {
        let s = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&s.to_be_bytes());
    }
    out
}

pub fn encode_csv(values: &[f64], width: usize) -> String {
    let mut out = String::new();
    for row in values.chunks(width) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}
