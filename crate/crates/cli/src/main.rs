use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use geoalign::aggregation::{aggregate_dataset, dataset_scale_sums};
use geoalign::alignment::{fit_alignment, load_model, save_model, AlignmentModel};
use geoalign::descriptor::{descriptor_sets_hash, DescriptorSet};
use geoalign::evaluation::{evaluate, GroundTruth};
use geoalign::feature_store::{load_dataset, read_feature_map, read_manifest, Domain, ImageMeta};
use geoalign::io_util::{hash_files, hex64, write_atomic};
use geoalign::pipeline::{
    format_sweep_table, parse_alphas, retrieve, sweep_alpha_reports, Direction, Variant,
};
use geoalign::retrieval::{
    encode_csv, encode_pgm16, read_results, similarity_heatmap, upsample_bilinear, write_results,
};
use geoalign::synth::{generate, SynthSpec};
use geoalign::{Error, PipelineConfig, Result};

#[derive(Parser)]
#[command(
    name = "geoalign",
    version,
    about = "Training-free cross-view geo-localization"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the seed of a synthetic spec.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print JSON instead of tables.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Feature maps listed in a manifest -> descriptor set (JSONL).
    Aggregate {
        manifest: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Also write the per-scale region sums of every image to this JSON file.
        #[arg(long)]
        debug_scales: Option<PathBuf>,
    },
    /// Fit and save an alignment model from drone and satellite descriptors.
    Align {
        /// Descriptor sets; entries are split by their domain field.
        #[arg(required = true)]
        sets: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value = "dataset")]
        dataset_name: String,
    },
    /// Rank gallery descriptors for every query.
    Search {
        #[arg(long)]
        model: Option<PathBuf>,
        queries: PathBuf,
        gallery: PathBuf,
        #[arg(short, default_value_t = 10)]
        k: usize,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = DirectionArg::DroneToSatellite)]
        direction: DirectionArg,
        #[arg(long, value_enum, default_value_t = VariantArg::Aligned)]
        variant: VariantArg,
    },
    /// Score rankings against the locations in a manifest.
    Evaluate {
        results: PathBuf,
        manifest: PathBuf,
        /// Comma-separated K values (default: from the config).
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic benchmark from a spec file.
    Synth { spec: PathBuf, out_dir: PathBuf },
    /// Patch-level similarity map of a drone tensor against a satellite descriptor.
    Heatmap {
        #[arg(long)]
        model: PathBuf,
        /// Drone feature tensor (.cvfm).
        drone_tensor: PathBuf,
        /// Descriptor set containing the satellite image.
        satellite_set: PathBuf,
        satellite_id: String,
        /// Output prefix; writes <prefix>.pgm and <prefix>.csv.
        #[arg(short, long)]
        out: PathBuf,
        /// Resize to HxW, e.g. 256x256.
        #[arg(long)]
        upsample: Option<String>,
    },
    /// Evaluate a range of decay factors in both directions.
    SweepAlpha {
        manifest: PathBuf,
        /// "1..9", "0.5..3:0.5" or "1,6,9".
        #[arg(long, default_value = "1..9")]
        alphas: String,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    DroneToSatellite,
    SatelliteToDrone,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Raw,
    PcaOnly,
    Aligned,
}

fn load_config(global: &Global) -> Result<PipelineConfig> {
    match &global.config {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Provenance record written next to outputs that cannot embed it.
fn write_sidecar(
    out: &Path,
    command: &str,
    config: serde_json::Value,
    inputs_hash: u64,
) -> Result<()> {
    let meta = json!({
        "command": command,
        "config": config,
        "inputs_hash": hex64(inputs_hash),
    });
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    write_atomic(&sidecar_path(out), text.as_bytes())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_sets(paths: &[PathBuf]) -> Result<DescriptorSet> {
    let mut entries = Vec::new();
    for p in paths {
        entries.extend(DescriptorSet::read(p)?.entries);
    }
    DescriptorSet::new(entries)
}

fn cmd_aggregate(
    cfg: &PipelineConfig,
    manifest: &Path,
    out: &Path,
    debug_scales: Option<&Path>,
) -> Result<()> {
    let dataset = load_dataset(manifest)?;
    let paths: Vec<&Path> = std::iter::once(manifest)
        .chain((0..dataset.len()).map(|i| dataset.tensor_path(i)))
        .collect();
    let hash = hash_files(&paths)?;
    let set = match debug_scales {
        None => aggregate_dataset(&dataset, &cfg.pooling, &cfg.aggregation)?,
        Some(trace) => {
            let sums = dataset_scale_sums(&dataset, &cfg.pooling, &cfg.aggregation)?;
            let images: Vec<serde_json::Value> = sums
                .iter()
                .map(|(meta, s)| {
                    json!({
                        "image_id": meta.image_id,
                        "scales": s.terms.iter().map(|t| json!({
                            "scale": t.scale,
                            "weight": (t.scale as f64).powf(-cfg.aggregation.alpha),
                            "sum": t.sum,
                        })).collect::<Vec<_>>(),
                    })
                })
                .collect();
            write_json(
                trace,
                &json!({ "alpha": cfg.aggregation.alpha, "images": images }),
            )?;
            let entries = sums
                .iter()
                .map(|(meta, s)| {
                    let v = s.combine(cfg.aggregation.alpha)?;
                    Ok(geoalign::Descriptor::new(
                        meta,
                        v.into_iter().map(|x| x as f32).collect(),
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            DescriptorSet::new(entries)?
        }
    };
    set.write(out)?;
    write_sidecar(out, "aggregate", cfg.snapshot(), hash)?;
    log::info!(
        "wrote {} descriptors of dimension {}",
        set.len(),
        set.dim().unwrap_or(0)
    );
    Ok(())
}

fn cmd_align(cfg: &PipelineConfig, sets: &[PathBuf], out: &Path, name: &str) -> Result<()> {
    let all = read_sets(sets)?;
    let drone = all.filter_domain(Domain::Drone);
    let satellite = all.filter_domain(Domain::Satellite);
    let model = fit_alignment(&drone, &satellite, &cfg.alignment.params()?, name)?;
    save_model(&model, out)?;
    write_sidecar(out, "align", cfg.snapshot(), model.fitted_on)?;
    log::info!(
        "fitted d = {} on {} drone / {} satellite descriptors",
        model.dim(),
        drone.len(),
        satellite.len()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_search(
    cfg: &PipelineConfig,
    model: Option<&Path>,
    queries: &Path,
    gallery: &Path,
    k: usize,
    out: &Path,
    direction: Direction,
    variant: Variant,
) -> Result<()> {
    if k == 0 {
        return Err(Error::arg("K must be at least 1"));
    }
    let qd = direction.query_domain();
    let q = DescriptorSet::read(queries)?.filter_domain(qd);
    let g = DescriptorSet::read(gallery)?.filter_domain(qd.other());
    if q.is_empty() || g.is_empty() {
        return Err(Error::invalid(format!(
            "need {qd} queries and {} gallery items, found {} and {}",
            qd.other(),
            q.len(),
            g.len()
        )));
    }
    let model: Option<AlignmentModel> = model.map(load_model).transpose()?;
    if let Some(m) = &model {
        m.check_fitted_on(&[&q, &g]);
    }
    let (drone, sat) = match direction {
        Direction::DroneToSatellite => (&q, &g),
        Direction::SatelliteToDrone => (&g, &q),
    };
    let results = retrieve(drone, sat, model.as_ref(), direction, variant, Some(k))?;
    write_results(&results, out)?;
    let mut snapshot = cfg.snapshot();
    snapshot["search"] = json!({ "k": k, "direction": direction, "variant": variant });
    write_sidecar(out, "search", snapshot, descriptor_sets_hash(&[&q, &g]))?;
    Ok(())
}

fn cmd_evaluate(
    cfg: &PipelineConfig,
    results_path: &Path,
    manifest_path: &Path,
    ks: Option<&[usize]>,
    out: Option<&Path>,
    as_json: bool,
) -> Result<()> {
    let results = read_results(results_path)?;
    let manifest = read_manifest(manifest_path)?;
    let mut by_id: HashMap<&str, (Domain, &str)> = HashMap::new();
    for e in &manifest.entries {
        by_id.insert(
            e.image_id.as_str(),
            (e.domain.parse()?, e.location_id.as_str()),
        );
    }
    let mut query_domain = None;
    let mut queries = Vec::with_capacity(results.len());
    for r in &results {
        let &(domain, loc) = by_id
            .get(r.query_id.as_str())
            .ok_or_else(|| Error::invalid(format!("unknown query_id {:?}", r.query_id)))?;
        if *query_domain.get_or_insert(domain) != domain {
            return Err(Error::invalid("results mix drone and satellite queries"));
        }
        queries.push((r.query_id.as_str(), loc));
    }
    let Some(qd) = query_domain else {
        return Err(Error::invalid("results file is empty"));
    };
    let gallery: Vec<(&str, &str)> = manifest
        .entries
        .iter()
        .filter(|e| e.domain == qd.other().as_str())
        .map(|e| (e.image_id.as_str(), e.location_id.as_str()))
        .collect();
    for r in &results {
        for h in &r.hits {
            if by_id
                .get(h.id.as_str())
                .is_none_or(|(d, _)| *d != qd.other())
            {
                return Err(Error::invalid(format!(
                    "hit {:?} is not a {} gallery item",
                    h.id,
                    qd.other()
                )));
            }
        }
    }
    let gt = GroundTruth::from_labels(queries, gallery)?;
    let ks = ks.unwrap_or(&cfg.retrieval.ks);
    let mut snapshot = cfg.snapshot();
    snapshot["retrieval"]["ks"] = json!(ks);
    let mut report = evaluate(&results, &gt, ks, snapshot)?;
    report.inputs_hash = Some(hex64(hash_files(&[results_path, manifest_path])?));
    if let Some(out) = out {
        write_atomic(out, report.to_json().as_bytes())?;
    }
    if as_json {
        print!("{}", report.to_json());
    } else {
        let label = match qd {
            Domain::Drone => "drone->satellite",
            Domain::Satellite => "satellite->drone",
        };
        print!("{}", report.to_table(label));
    }
    Ok(())
}

fn cmd_synth(global: &Global, spec_path: &Path, out_dir: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let mut spec = SynthSpec::from_toml(&text)?;
    if let Some(seed) = global.seed {
        spec.seed = seed;
    }
    let bench = generate(&spec)?;
    bench.write_to(out_dir, "synthetic")?;
    let snapshot = serde_json::to_value(&spec)?;
    let hash = descriptor_sets_hash(&[&bench.drone, &bench.satellite]);
    write_json(
        &out_dir.join("synth.meta.json"),
        &json!({ "command": "synth", "spec": snapshot, "descriptors_hash": hex64(hash) }),
    )?;
    log::info!(
        "wrote {} drone and {} satellite descriptors",
        bench.drone.len(),
        bench.satellite.len()
    );
    Ok(())
}

fn parse_size(text: &str) -> Result<(usize, usize)> {
    let bad = || Error::arg(format!("expected HxW, got {text:?}"));
    let (h, w) = text.split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

fn with_extension(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

#[allow(clippy::too_many_arguments)]
fn cmd_heatmap(
    cfg: &PipelineConfig,
    model_path: &Path,
    tensor: &Path,
    sat_set: &Path,
    sat_id: &str,
    out: &Path,
    upsample: Option<&str>,
    as_json: bool,
) -> Result<()> {
    let size = upsample.map(parse_size).transpose()?;
    let model = load_model(model_path)?;
    let stem = tensor
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let map = read_feature_map(tensor, ImageMeta::new(stem, Domain::Drone, ""))?;
    let sats = DescriptorSet::read(sat_set)?;
    let sat = sats
        .iter()
        .find(|d| d.image_id == sat_id && d.domain == Domain::Satellite)
        .ok_or_else(|| Error::invalid(format!("satellite descriptor {sat_id:?} not found")))?;
    let heat = similarity_heatmap(&map, sat, &model)?;
    let (h, w, values) = match size {
        Some((oh, ow)) => (
            oh,
            ow,
            upsample_bilinear(&heat.values, heat.height, heat.width, oh, ow)?,
        ),
        None => (heat.height, heat.width, heat.values.clone()),
    };
    let pgm = with_extension(out, "pgm");
    let csv = with_extension(out, "csv");
    write_atomic(&pgm, &encode_pgm16(&values, h, w))?;
    write_atomic(&csv, encode_csv(&values, w).as_bytes())?;
    let mut snapshot = cfg.snapshot();
    snapshot["heatmap"] =
        json!({ "satellite_id": sat_id, "height": h, "width": w, "constant": heat.constant });
    let hash = hash_files(&[model_path, tensor, sat_set])?;
    write_sidecar(&pgm, "heatmap", snapshot.clone(), hash)?;
    write_sidecar(&csv, "heatmap", snapshot, hash)?;
    if as_json {
        println!(
            "{}",
            json!({ "pgm": pgm, "csv": csv, "height": h, "width": w, "constant": heat.constant })
        );
    }
    Ok(())
}

fn cmd_sweep_alpha(
    cfg: &PipelineConfig,
    manifest: &Path,
    alphas: &str,
    out: Option<&Path>,
    as_json: bool,
) -> Result<()> {
    let alphas = parse_alphas(alphas)?;
    let dataset = load_dataset(manifest)?;
    dataset.require_both_domains()?;
    let sums = dataset_scale_sums(&dataset, &cfg.pooling, &cfg.aggregation)?;
    let rows = sweep_alpha_reports(&sums, &alphas, cfg, &dataset.name)?;
    let paths: Vec<&Path> = std::iter::once(manifest)
        .chain((0..dataset.len()).map(|i| dataset.tensor_path(i)))
        .collect();
    let doc = json!({
        "rows": rows,
        "config": cfg.snapshot(),
        "inputs_hash": hex64(hash_files(&paths)?),
    });
    if let Some(out) = out {
        write_json(out, &doc)?;
    }
    if as_json {
        println!("{}", serde_json::to_string_pretty(&doc)?);
    } else {
        print!("{}", format_sweep_table(&rows));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(Error::arg("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::arg(e.to_string()))?;
    }
    let cfg = load_config(&cli.global)?;
    let g = &cli.global;
    match &cli.command {
        Command::Aggregate {
            manifest,
            out,
            debug_scales,
        } => cmd_aggregate(&cfg, manifest, out, debug_scales.as_deref()),
        Command::Align {
            sets,
            out,
            dataset_name,
        } => cmd_align(&cfg, sets, out, dataset_name),
        Command::Search {
            model,
            queries,
            gallery,
            k,
            out,
            direction,
            variant,
        } => {
            let direction = match direction {
                DirectionArg::DroneToSatellite => Direction::DroneToSatellite,
                DirectionArg::SatelliteToDrone => Direction::SatelliteToDrone,
            };
            let variant = match variant {
                VariantArg::Raw => Variant::Raw,
                VariantArg::PcaOnly => Variant::PcaOnly,
                VariantArg::Aligned => Variant::Aligned,
            };
            cmd_search(
                &cfg,
                model.as_deref(),
                queries,
                gallery,
                *k,
                out,
                direction,
                variant,
            )
        }
        Command::Evaluate {
            results,
            manifest,
            ks,
            out,
        } => cmd_evaluate(
            &cfg,
            results,
            manifest,
            ks.as_deref(),
            out.as_deref(),
            g.json,
        ),
        Command::Synth { spec, out_dir } => cmd_synth(g, spec, out_dir),
        Command::Heatmap {
            model,
            drone_tensor,
            satellite_set,
            satellite_id,
            out,
            upsample,
        } => cmd_heatmap(
            &cfg,
            model,
            drone_tensor,
            satellite_set,
            satellite_id,
            out,
            upsample.as_deref(),
            g.json,
        ),
        Command::SweepAlpha {
            manifest,
            alphas,
            out,
        } => cmd_sweep_alpha(&cfg, manifest, alphas, out.as_deref(), g.json),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!(
                "error code={} kind={} msg={msg}",
                kind.exit_code(),
                kind.as_str()
            );
            ExitCode::from(kind.exit_code() as u8)
        }
    }
}
