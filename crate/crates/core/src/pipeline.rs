//! End-to-end runs: descriptor sets in, metric reports out.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregation::{sweep_alpha_from_sums, ScaleSums};
use crate::alignment::{fit_alignment, save_model, AlignMode, AlignedSet, AlignmentModel};
use crate::config::PipelineConfig;
use crate::descriptor::{descriptor_sets_hash, DescriptorSet};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, format_table, EvalReport, GroundTruth};
use crate::feature_store::{Domain, ImageMeta};
use crate::io_util;
use crate::retrieval::{search, write_results, RankedResult};
use crate::synth::{generate, SynthSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    DroneToSatellite,
    SatelliteToDrone,
}

impl Direction {
    pub fn query_domain(self) -> Domain {
        match self {
            Direction::DroneToSatellite => Domain::Drone,
            Direction::SatelliteToDrone => Domain::Satellite,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Direction::DroneToSatellite => "D->S",
            Direction::SatelliteToDrone => "S->D",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::DroneToSatellite => "drone->satellite",
            Direction::SatelliteToDrone => "satellite->drone",
        })
    }
}

/// Which descriptors retrieval compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Raw,
    PcaOnly,
    Aligned,
}

/// Relevance by shared location id.
pub fn ground_truth(queries: &DescriptorSet, gallery: &DescriptorSet) -> Result<GroundTruth> {
    GroundTruth::from_labels(
        queries
            .iter()
            .map(|d| (d.image_id.as_str(), d.location_id.as_str())),
        gallery
            .iter()
            .map(|d| (d.image_id.as_str(), d.location_id.as_str())),
    )
}

fn embed(
    set: &DescriptorSet,
    domain: Domain,
    model: Option<&AlignmentModel>,
    variant: Variant,
) -> Result<AlignedSet> {
    match (variant, model) {
        (Variant::Raw, _) => Ok(AlignedSet::raw(set)),
        (Variant::PcaOnly, Some(m)) => m.apply_set(set, domain, AlignMode::PcaOnly),
        (Variant::Aligned, Some(m)) => m.apply_set(set, domain, AlignMode::Full),
        (_, None) => Err(Error::arg(
            "this retrieval variant needs an alignment model",
        )),
    }
}

/// Ranks the opposite domain for every query of `direction`.
pub fn retrieve(
    drone: &DescriptorSet,
    satellite: &DescriptorSet,
    model: Option<&AlignmentModel>,
    direction: Direction,
    variant: Variant,
    top_k: Option<usize>,
) -> Result<Vec<RankedResult>> {
    let (q, g) = match direction {
        Direction::DroneToSatellite => (drone, satellite),
        Direction::SatelliteToDrone => (satellite, drone),
    };
    let qd = direction.query_domain();
    let queries = embed(q, qd, model, variant)?;
    let gallery = embed(g, qd.other(), model, variant)?;
    search(&queries, &gallery, top_k.unwrap_or(g.len()))
}

/// Retrieval plus evaluation in one direction.
pub fn benchmark(
    drone: &DescriptorSet,
    satellite: &DescriptorSet,
    model: Option<&AlignmentModel>,
    direction: Direction,
    variant: Variant,
    config: &PipelineConfig,
) -> Result<EvalReport> {
    let results = retrieve(
        drone,
        satellite,
        model,
        direction,
        variant,
        config.retrieval.top_k,
    )?;
    let gt = match direction {
        Direction::DroneToSatellite => ground_truth(drone, satellite)?,
        Direction::SatelliteToDrone => ground_truth(satellite, drone)?,
    };
    let mut report = evaluate(&results, &gt, &config.retrieval.ks, config.snapshot())?;
    report.inputs_hash = Some(io_util::hex64(descriptor_sets_hash(&[drone, satellite])));
    Ok(report)
}

/// Parses `"1..9"` (inclusive, step 1), `"0.5..2:0.5"` (explicit step) or a
/// comma list `"1,6,9"`.
pub fn parse_alphas(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::arg(format!("cannot parse alpha list {text:?}"));
    let num = |s: &str| f64::from_str(s.trim()).map_err(|_| bad());
    let text = text.trim();
    let out = if let Some((lo, rest)) = text.split_once("..") {
        let (hi, step) = match rest.split_once(':') {
            Some((h, s)) => (num(h)?, num(s)?),
            None => (num(rest)?, 1.0),
        };
        let lo = num(lo)?;
        if step.is_nan() || step <= 0.0 || !lo.is_finite() || !hi.is_finite() || hi < lo {
            return Err(bad());
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        if n > 10_000 {
            return Err(Error::arg("alpha range has too many values"));
        }
        (0..n).map(|i| lo + i as f64 * step).collect()
    } else {
        text.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    if out.is_empty() || out.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(bad());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub drone_to_satellite: EvalReport,
    pub satellite_to_drone: EvalReport,
}

/// For every alpha: rebuild descriptors from cached scale sums, fit the
/// alignment, and evaluate both directions.
pub fn sweep_alpha_reports(
    sums: &[(ImageMeta, ScaleSums)],
    alphas: &[f64],
    config: &PipelineConfig,
    dataset_name: &str,
) -> Result<Vec<SweepRow>> {
    let params = config.alignment.params()?;
    let mut rows = Vec::with_capacity(alphas.len());
    for (alpha, set) in sweep_alpha_from_sums(sums, alphas)? {
        let drone = set.filter_domain(Domain::Drone);
        let satellite = set.filter_domain(Domain::Satellite);
        let model = fit_alignment(&drone, &satellite, &params, dataset_name)?;
        let mut cfg = config.clone();
        cfg.aggregation.alpha = alpha;
        let run = |dir| {
            benchmark(
                &drone,
                &satellite,
                Some(&model),
                dir,
                Variant::Aligned,
                &cfg,
            )
        };
        rows.push(SweepRow {
            alpha,
            drone_to_satellite: run(Direction::DroneToSatellite)?,
            satellite_to_drone: run(Direction::SatelliteToDrone)?,
        });
    }
    Ok(rows)
}

fn format_alpha(a: f64) -> String {
    if a.fract() == 0.0 && a.abs() < 1e15 {
        format!("{a:.0}")
    } else {
        format!("{a}")
    }
}

/// One row per alpha; drone->satellite metrics, then satellite->drone.
pub fn format_sweep_table(rows: &[SweepRow]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let mut columns = Vec::new();
    for dir in [Direction::DroneToSatellite, Direction::SatelliteToDrone] {
        columns.extend(
            first
                .drone_to_satellite
                .column_names()
                .into_iter()
                .map(|c| format!("{} {c}", dir.short())),
        );
    }
    let labels: Vec<String> = rows.iter().map(|r| format_alpha(r.alpha)).collect();
    let values: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let mut v = r.drone_to_satellite.row_values();
            v.extend(r.satellite_to_drone.row_values());
            v
        })
        .collect();
    format_table(&labels, &columns, &values, "alpha")
}

/// Files written by [`run_synthetic`].
#[derive(Debug, Clone)]
pub struct SyntheticRun {
    pub model: AlignmentModel,
    pub report: EvalReport,
    pub files: Vec<PathBuf>,
}

/// Generates a benchmark into `dir`, fits the alignment, retrieves
/// drone->satellite and writes the model, rankings and report.
pub fn run_synthetic(
    spec: &SynthSpec,
    config: &PipelineConfig,
    dir: &Path,
) -> Result<SyntheticRun> {
    let bench = generate(spec)?;
    bench.write_to(dir, "synthetic")?;
    let model = fit_alignment(
        &bench.drone,
        &bench.satellite,
        &config.alignment.params()?,
        "synthetic",
    )?;
    let model_path = dir.join("model.cvam");
    save_model(&model, &model_path)?;
    let results = retrieve(
        &bench.drone,
        &bench.satellite,
        Some(&model),
        Direction::DroneToSatellite,
        Variant::Aligned,
        config.retrieval.top_k,
    )?;
    let results_path = dir.join("results.jsonl");
    write_results(&results, &results_path)?;
    let gt = ground_truth(&bench.drone, &bench.satellite)?;
    let mut report = evaluate(&results, &gt, &config.retrieval.ks, config.snapshot())?;
    report.inputs_hash = Some(io_util::hex64(descriptor_sets_hash(&[
        &bench.drone,
        &bench.satellite,
    ])));
    let report_path = dir.join("report.json");
    io_util::write_atomic(&report_path, report.to_json().as_bytes())?;
    Ok(SyntheticRun {
        model,
        report,
        files: vec![model_path, results_path, report_path],
    })
}
