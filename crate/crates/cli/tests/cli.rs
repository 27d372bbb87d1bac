use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use geoalign::feature_store::{write_feature_map, DatasetManifest, ManifestEntry};
use geoalign::{Domain, FeatureMap, ImageMeta};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_geoalign"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth_pipeline(dir: &Path, sigma: f64) {
    std::fs::write(
        dir.join("spec.toml"),
        format!("num_locations = 100\nambient_dim = 64\nlatent_dim = 16\nnoise_sigma = {sigma}\nseed = 3\n"),
    )
    .unwrap();
    ok(dir, &["synth", "spec.toml", "data"]);
    ok(
        dir,
        &[
            "align",
            "data/drone.jsonl",
            "data/satellite.jsonl",
            "-o",
            "model.cvam",
        ],
    );
    ok(
        dir,
        &[
            "search",
            "--model",
            "model.cvam",
            "data/drone.jsonl",
            "data/satellite.jsonl",
            "-k",
            "10",
            "-o",
            "results.jsonl",
        ],
    );
    ok(
        dir,
        &[
            "evaluate",
            "results.jsonl",
            "data/manifest.json",
            "-o",
            "report.json",
        ],
    );
}

fn report(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn synth_align_search_evaluate_recovers_every_location() {
    let dir = tempfile::tempdir().unwrap();
    synth_pipeline(dir.path(), 0.0);
    let r = report(&dir.path().join("report.json"));
    assert_eq!(r["recall"]["1"], 100.0);
    assert_eq!(r["n_queries"], 100);
    assert_eq!(r["gallery_size"], 100);
    assert!(r["config"]["pooling"].is_object());
    assert!(r["inputs_hash"].is_string());
    let meta = report(&dir.path().join("results.jsonl.meta.json"));
    assert_eq!(meta["command"], "search");
    assert_eq!(meta["inputs_hash"].as_str().unwrap().len(), 16);
    assert!(dir.path().join("model.cvam.meta.json").is_file());
}

#[test]
fn cli_outputs_are_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth_pipeline(a.path(), 0.1);
    synth_pipeline(b.path(), 0.1);
    for f in [
        "model.cvam",
        "results.jsonl",
        "results.jsonl.meta.json",
        "report.json",
        "data/drone.jsonl",
        "data/manifest.json",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn evaluate_unknown_query_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    synth_pipeline(dir.path(), 0.0);
    let text = std::fs::read_to_string(dir.path().join("results.jsonl")).unwrap();
    std::fs::write(
        dir.path().join("bad.jsonl"),
        text.replacen("d0000_00", "ghost", 1),
    )
    .unwrap();
    let out = run(dir.path(), &["evaluate", "bad.jsonl", "data/manifest.json"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().last().unwrap();
    assert!(line.starts_with("error code=3 kind=validation"), "{line}");
    assert!(line.contains("ghost"));
}

/// Small multi-patch dataset: every patch of an image is its location's base
/// vector plus a position-dependent perturbation, with a per-domain channel
/// permutation.
fn patch_dataset(dir: &Path, locations: usize) -> PathBuf {
    let (c, h, w) = (6, 3, 3);
    std::fs::create_dir_all(dir.join("t")).unwrap();
    let mut entries = Vec::new();
    for loc in 0..locations {
        for (domain, prefix) in [(Domain::Drone, "d"), (Domain::Satellite, "s")] {
            let id = format!("{prefix}{loc:03}");
            let mut data = vec![0f32; c * h * w];
            for k in 0..c {
                let src = if domain == Domain::Drone {
                    k
                } else {
                    (k + 2) % c
                };
                for p in 0..h * w {
                    let base = ((loc * 7 + src * 3) % 11) as f32 + 1.0;
                    data[k * h * w + p] = base + 0.1 * ((p * (src + 1)) % 5) as f32;
                }
            }
            let meta = ImageMeta::new(&id, domain, format!("L{loc}"));
            let rel = format!("t/{id}.cvfm");
            write_feature_map(
                &FeatureMap::new(meta, c, h, w, data).unwrap(),
                &dir.join(&rel),
            )
            .unwrap();
            entries.push(ManifestEntry {
                image_id: id,
                domain: domain.as_str().into(),
                location_id: format!("L{loc}"),
                tensor_path: rel,
            });
        }
    }
    let path = dir.join("manifest.json");
    let m = DatasetManifest {
        dataset_name: "patches".into(),
        entries,
    };
    std::fs::write(&path, m.to_json()).unwrap();
    path
}

#[test]
fn sweep_alpha_range_gives_nine_rows() {
    let dir = tempfile::tempdir().unwrap();
    patch_dataset(dir.path(), 12);
    let table = ok(
        dir.path(),
        &[
            "sweep-alpha",
            "manifest.json",
            "--alphas",
            "1..9",
            "-o",
            "sweep.json",
        ],
    );
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 2 + 9, "{table}");
    assert!(lines[0].starts_with("alpha"));
    assert!(lines[0].contains("D->S R@1") && lines[0].contains("S->D AP"));
    for (i, l) in lines[2..].iter().enumerate() {
        assert!(l.starts_with(&(i + 1).to_string()));
        assert_eq!(l.split('|').count(), 11);
    }
    let doc = report(&dir.path().join("sweep.json"));
    assert_eq!(doc["rows"].as_array().unwrap().len(), 9);
    let json = ok(
        dir.path(),
        &["--json", "sweep-alpha", "manifest.json", "--alphas", "1,6"],
    );
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn aggregate_writes_descriptors_and_scale_trace() {
    let dir = tempfile::tempdir().unwrap();
    patch_dataset(dir.path(), 4);
    ok(
        dir.path(),
        &[
            "aggregate",
            "manifest.json",
            "-o",
            "desc.jsonl",
            "--debug-scales",
            "scales.json",
        ],
    );
    let set = geoalign::DescriptorSet::read(&dir.path().join("desc.jsonl")).unwrap();
    assert_eq!(set.len(), 8);
    assert_eq!(set.dim(), Some(6));
    let trace = report(&dir.path().join("scales.json"));
    let scales = trace["images"][0]["scales"].as_array().unwrap();
    assert_eq!(scales.len(), 3);
    assert_eq!(scales[1]["weight"], 2f64.powf(-6.0));
    assert!(dir.path().join("desc.jsonl.meta.json").is_file());

    ok(
        dir.path(),
        &["aggregate", "manifest.json", "-o", "plain.jsonl"],
    );
    assert_eq!(
        std::fs::read(dir.path().join("plain.jsonl")).unwrap(),
        std::fs::read(dir.path().join("desc.jsonl")).unwrap()
    );
}

#[test]
fn heatmap_exports_pgm_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    patch_dataset(dir.path(), 10);
    ok(
        dir.path(),
        &["aggregate", "manifest.json", "-o", "desc.jsonl"],
    );
    ok(dir.path(), &["align", "desc.jsonl", "-o", "m.cvam"]);
    ok(
        dir.path(),
        &[
            "heatmap",
            "--model",
            "m.cvam",
            "t/d003.cvfm",
            "desc.jsonl",
            "s003",
            "-o",
            "hm",
            "--upsample",
            "6x5",
        ],
    );
    let pgm = std::fs::read(dir.path().join("hm.pgm")).unwrap();
    let header = b"P5\n5 6\n65535\n";
    assert_eq!(&pgm[..header.len()], header);
    assert_eq!(pgm.len(), header.len() + 2 * 30);
    let csv = std::fs::read_to_string(dir.path().join("hm.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().all(|l| l.split(',').count() == 5));
    let out = run(
        dir.path(),
        &[
            "heatmap",
            "--model",
            "m.cvam",
            "t/d003.cvfm",
            "desc.jsonl",
            "nope",
            "-o",
            "hm",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    let out = run(
        dir.path(),
        &[
            "heatmap",
            "--model",
            "m.cvam",
            "t/d003.cvfm",
            "desc.jsonl",
            "s003",
            "-o",
            "hm",
            "--upsample",
            "6by5",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[pooling]\nbogus = 1\n").unwrap();
    std::fs::write(dir.path().join("spec.toml"), "num_locations = 5\n").unwrap();
    assert_eq!(
        run(
            dir.path(),
            &["--config", "bad.toml", "synth", "spec.toml", "o"]
        )
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        run(dir.path(), &["synth", "missing.toml", "o"])
            .status
            .code(),
        Some(5)
    );
    assert_eq!(run(dir.path(), &["not-a-command"]).status.code(), Some(2));
    std::fs::write(dir.path().join("model.cvam"), b"junk").unwrap();
    ok(dir.path(), &["synth", "spec.toml", "o"]);
    let out = run(
        dir.path(),
        &[
            "search",
            "--model",
            "model.cvam",
            "o/drone.jsonl",
            "o/satellite.jsonl",
            "-o",
            "r.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(!dir.path().join("r.jsonl").exists());
}

#[test]
fn seed_flag_overrides_spec() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("spec.toml"),
        "num_locations = 5\nseed = 1\n",
    )
    .unwrap();
    ok(dir.path(), &["synth", "spec.toml", "a"]);
    ok(dir.path(), &["--seed", "1", "synth", "spec.toml", "b"]);
    ok(dir.path(), &["--seed", "2", "synth", "spec.toml", "c"]);
    let read = |d: &str| std::fs::read(dir.path().join(d).join("drone.jsonl")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}
