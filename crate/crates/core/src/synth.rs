//! Seeded synthetic cross-view benchmark.
//!
//! Every location gets a unit latent vector in `R^latent_dim`, zero-padded to
//! the ambient dimension `D`. Each domain applies its own fixed orthogonal map
//! `Q` and offset `b`, each view adds isotropic Gaussian noise, and the
//! result is L2-normalized:
//!
//! ```text
//! descriptor = normalize(Q * embed(latent) + b + noise)
//! ```
//!
//! The offset is drawn inside `Q`'s image of the padding coordinates, so
//! without noise `||Q e + b||` is the same for every location and the
//! normalized descriptors are an exact affine image of the latents. Domain-wise
//! centering plus an orthogonal rotation then inverts the distortion exactly.
//!
//! Randomness is split per (purpose, domain, location, view) so each part of
//! the benchmark can be regenerated independently.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptor::{Descriptor, DescriptorSet};
use crate::error::{Error, Result};
use crate::feature_store::{
    write_feature_map, DatasetManifest, Domain, FeatureMap, ImageMeta, ManifestEntry,
};
use crate::io_util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_locations: usize,
    pub views_per_location_drone: usize,
    pub latent_dim: usize,
    pub ambient_dim: usize,
    /// Typical rotation angle (radians) of each domain's orthogonal map.
    pub domain_rotation_angle_scale: f64,
    pub domain_offset_norm: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Draw both domains' orthogonal maps from the same stream (no domain
    /// rotation gap).
    pub shared_domain_map: bool,
    /// Typical angle of an extra random rotation of each drone view's latent
    /// vector. Zero disables it; nonzero values break exact recoverability.
    pub view_jitter: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_locations: 100,
            views_per_location_drone: 1,
            latent_dim: 16,
            ambient_dim: 64,
            domain_rotation_angle_scale: std::f64::consts::PI,
            domain_offset_norm: 0.5,
            noise_sigma: 0.0,
            seed: 0,
            shared_domain_map: false,
            view_jitter: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_locations == 0
            || self.views_per_location_drone == 0
            || self.latent_dim == 0
            || self.ambient_dim == 0
        {
            return Err(Error::arg("synthetic counts and dimensions must be >= 1"));
        }
        if self.latent_dim > self.ambient_dim {
            return Err(Error::arg(format!(
                "latent_dim {} exceeds ambient_dim {}",
                self.latent_dim, self.ambient_dim
            )));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("domain_offset_norm", self.domain_offset_norm),
            (
                "domain_rotation_angle_scale",
                self.domain_rotation_angle_scale,
            ),
            ("view_jitter", self.view_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::arg(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SynthSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

const STREAM_LATENT: u64 = 1;
const STREAM_MAP: u64 = 2;
const STREAM_OFFSET: u64 = 3;
const STREAM_NOISE: u64 = 4;
const STREAM_JITTER: u64 = 5;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for the stream identified by `path`.
pub fn stream_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let key = path
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)));
    ChaCha8Rng::seed_from_u64(key)
}

fn domain_code(d: Domain) -> u64 {
    match d {
        Domain::Drone => 0,
        Domain::Satellite => 1,
    }
}

fn gaussian_vec(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Haar-random orthogonal matrix via QR of a Gaussian matrix.
pub fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `exp(A)` for a random skew-symmetric `A` whose rotation angles are of
/// order `angle_scale`, projected back onto the orthogonal group.
pub fn random_rotation(d: usize, angle_scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    if d == 1 || angle_scale == 0.0 {
        return DMatrix::identity(d, d);
    }
    let g = DMatrix::from_fn(d, d, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        v
    });
    // spectral radius of (G - G^T) / sqrt(2) is about 2 sqrt(d)
    let skew = (&g - g.transpose()) * (angle_scale / (2.0 * (2.0 * d as f64).sqrt()));
    let e = skew.exp();
    let svd = e.svd(true, true);
    svd.u.unwrap() * svd.v_t.unwrap()
}

struct DomainMap {
    q: DMatrix<f64>,
    offset: DVector<f64>,
}

fn domain_map(spec: &SynthSpec, domain: Domain) -> DomainMap {
    let map_stream = if spec.shared_domain_map {
        0
    } else {
        domain_code(domain)
    };
    let mut rng = stream_rng(spec.seed, &[STREAM_MAP, map_stream]);
    let q = random_rotation(spec.ambient_dim, spec.domain_rotation_angle_scale, &mut rng);

    let mut rng = stream_rng(spec.seed, &[STREAM_OFFSET, domain_code(domain)]);
    let (d, l) = (spec.ambient_dim, spec.latent_dim);
    let raw = if l < d {
        let mut v = DVector::zeros(d);
        v.rows_mut(l, d - l)
            .copy_from(&gaussian_vec(d - l, &mut rng));
        &q * v
    } else {
        gaussian_vec(d, &mut rng)
    };
    let n = raw.norm();
    let offset = if n > 0.0 {
        raw * (spec.domain_offset_norm / n)
    } else {
        raw
    };
    DomainMap { q, offset }
}

fn latent(spec: &SynthSpec, loc: usize) -> DVector<f64> {
    let mut rng = stream_rng(spec.seed, &[STREAM_LATENT, loc as u64]);
    loop {
        let v = gaussian_vec(spec.latent_dim, &mut rng);
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthBenchmark {
    pub drone: DescriptorSet,
    pub satellite: DescriptorSet,
}

pub fn location_id(loc: usize) -> String {
    format!("L{loc:04}")
}

fn view(
    spec: &SynthSpec,
    map: &DomainMap,
    domain: Domain,
    loc: usize,
    view: usize,
    base: &DVector<f64>,
) -> Vec<f32> {
    let (d, l) = (spec.ambient_dim, spec.latent_dim);
    let mut lat = base.clone();
    if domain == Domain::Drone && spec.view_jitter > 0.0 {
        let mut rng = stream_rng(spec.seed, &[STREAM_JITTER, loc as u64, view as u64]);
        lat = random_rotation(l, spec.view_jitter, &mut rng) * lat;
    }
    let mut embedded = DVector::zeros(d);
    embedded.rows_mut(0, l).copy_from(&lat);
    let mut x = &map.q * embedded + &map.offset;
    if spec.noise_sigma > 0.0 {
        let mut rng = stream_rng(
            spec.seed,
            &[STREAM_NOISE, domain_code(domain), loc as u64, view as u64],
        );
        x += gaussian_vec(d, &mut rng) * spec.noise_sigma;
    }
    let n = x.norm();
    if n > 0.0 {
        x /= n;
    }
    x.iter().map(|&v| v as f32).collect()
}

pub fn generate(spec: &SynthSpec) -> Result<SynthBenchmark> {
    spec.validate()?;
    let drone_map = domain_map(spec, Domain::Drone);
    let sat_map = domain_map(spec, Domain::Satellite);

    let per_location: Vec<(Vec<Descriptor>, Descriptor)> = (0..spec.num_locations)
        .into_par_iter()
        .map(|loc| {
            let base = latent(spec, loc);
            let drones = (0..spec.views_per_location_drone)
                .map(|v| Descriptor {
                    image_id: format!("d{loc:04}_{v:02}"),
                    domain: Domain::Drone,
                    location_id: location_id(loc),
                    values: view(spec, &drone_map, Domain::Drone, loc, v, &base),
                })
                .collect();
            let sat = Descriptor {
                image_id: format!("s{loc:04}"),
                domain: Domain::Satellite,
                location_id: location_id(loc),
                values: view(spec, &sat_map, Domain::Satellite, loc, 0, &base),
            };
            (drones, sat)
        })
        .collect();

    let mut drone = Vec::new();
    let mut satellite = Vec::new();
    for (d, s) in per_location {
        drone.extend(d);
        satellite.push(s);
    }
    Ok(SynthBenchmark {
        drone: DescriptorSet::new(drone)?,
        satellite: DescriptorSet::new(satellite)?,
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DRONE_FILE: &str = "drone.jsonl";
pub const SATELLITE_FILE: &str = "satellite.jsonl";

impl SynthBenchmark {
    /// Writes descriptor sets, a manifest, and one `1 x 1` tensor per image
    /// (the descriptor as a single patch) so the tensor-based commands run on
    /// synthetic data unchanged.
    pub fn write_to(&self, dir: &Path, dataset_name: &str) -> Result<()> {
        let tensors = dir.join("tensors");
        std::fs::create_dir_all(&tensors).map_err(|e| Error::io(&tensors, e))?;
        let mut entries = Vec::new();
        for d in self.drone.iter().chain(self.satellite.iter()) {
            let rel = format!("tensors/{}.cvfm", d.image_id);
            let meta = ImageMeta::new(&d.image_id, d.domain, &d.location_id);
            let map = FeatureMap::new(meta, d.dim(), 1, 1, d.values.clone())?;
            write_feature_map(&map, &dir.join(&rel))?;
            entries.push(ManifestEntry {
                image_id: d.image_id.clone(),
                domain: d.domain.as_str().to_string(),
                location_id: d.location_id.clone(),
                tensor_path: rel,
            });
        }
        let manifest = DatasetManifest {
            dataset_name: dataset_name.to_string(),
            entries,
        };
        io_util::write_atomic(&dir.join(MANIFEST_FILE), manifest.to_json().as_bytes())?;
        self.drone.write(&dir.join(DRONE_FILE))?;
        self.satellite.write(&dir.join(SATELLITE_FILE))?;
        Ok(())
    }
}
