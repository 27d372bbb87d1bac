//! On-disk patch-feature tensors and manifest-driven dataset ingestion.
//!
//! Tensor file layout (little-endian):
//!
//! | bytes  | field                      |
//! |--------|----------------------------|
//! | 0..4   | magic `CVFM`               |
//! | 4..6   | version `u16` = 1          |
//! | 6..8   | dtype `u16` = 0 (f32)      |
//! | 8..12  | channels `u32`             |
//! | 12..16 | height `u32`               |
//! | 16..20 | width `u32`                |
//! | 20..28 | reserved, zero             |
//! | 28..   | `C*H*W` f32, channel-major |
//!
//! Element `(k, i, j)` lives at index `k*H*W + i*W + j`. Tensor files carry
//! geometry and payload only; image identity, domain and location label come
//! from the manifest.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util;

pub const MAGIC: [u8; 4] = *b"CVFM";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u16 = 0;
pub const HEADER_LEN: usize = 28;
/// Upper bound on `C*H*W`; larger headers are treated as corrupt.
pub const MAX_ELEMENTS: u64 = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Drone,
    Satellite,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Drone => "drone",
            Domain::Satellite => "satellite",
        }
    }

    pub fn other(self) -> Domain {
        match self {
            Domain::Drone => Domain::Satellite,
            Domain::Satellite => Domain::Drone,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drone" => Ok(Domain::Drone),
            "satellite" => Ok(Domain::Satellite),
            other => Err(Error::invalid(format!("unknown domain {other:?}"))),
        }
    }
}

/// Identity metadata attached to a tensor by the manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageMeta {
    pub image_id: String,
    pub domain: Domain,
    pub location_id: String,
}

impl ImageMeta {
    pub fn new(
        image_id: impl Into<String>,
        domain: Domain,
        location_id: impl Into<String>,
    ) -> Self {
        Self {
            image_id: image_id.into(),
            domain,
            location_id: location_id.into(),
        }
    }
}

/// A `C x H x W` grid of patch features for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub meta: ImageMeta,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        meta: ImageMeta,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        check_geometry(channels as u64, height as u64, width as u64)?;
        if data.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "payload has {} values, geometry {channels}x{height}x{width} needs {}",
                data.len(),
                channels * height * width
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            meta,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, k: usize, i: usize, j: usize) -> f32 {
        self.data[(k * self.height + i) * self.width + j]
    }

    /// Contiguous `H*W` plane of channel `k`.
    pub fn plane(&self, k: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[k * n..(k + 1) * n]
    }

    /// The `C`-dimensional feature vector of patch `(i, j)`.
    pub fn patch_vector(&self, i: usize, j: usize) -> Vec<f32> {
        (0..self.channels).map(|k| self.at(k, i, j)).collect()
    }

    /// Copy of the sub-grid `[row0, row0+rows) x [col0, col0+cols)`.
    pub fn crop(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> Result<FeatureMap> {
        if rows == 0 || cols == 0 || row0 + rows > self.height || col0 + cols > self.width {
            return Err(Error::arg(format!(
                "crop ({row0},{col0},{rows},{cols}) outside {}x{} grid",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * rows * cols);
        for k in 0..self.channels {
            for i in row0..row0 + rows {
                let start = (k * self.height + i) * self.width + col0;
                data.extend_from_slice(&self.data[start..start + cols]);
            }
        }
        FeatureMap::new(self.meta.clone(), self.channels, rows, cols, data)
    }
}

fn check_geometry(c: u64, h: u64, w: u64) -> Result<()> {
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!("zero dimension in {c}x{h}x{w}")));
    }
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .filter(|&n| n <= MAX_ELEMENTS);
    if n.is_none() {
        return Err(Error::invalid(format!(
            "dimension overflow: {c}x{h}x{w} exceeds {MAX_ELEMENTS} elements"
        )));
    }
    Ok(())
}

/// Serializes the geometry and payload of `map` into the tensor file layout.
pub fn encode_feature_map(map: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + map.data.len() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(map.channels as u32).to_le_bytes());
    out.extend_from_slice(&(map.height as u32).to_le_bytes());
    out.extend_from_slice(&(map.width as u32).to_le_bytes());
    out.extend_from_slice(&[0u8; 8]);
    for v in &map.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a tensor file image, attaching `meta`.
pub fn decode_feature_map(bytes: &[u8], meta: ImageMeta) -> Result<FeatureMap> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::UnrecognizedFormat(format!(
            "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::UnrecognizedFormat("bad magic".into()));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at =
        |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let version = u16_at(4);
    if version != VERSION {
        return Err(Error::UnrecognizedFormat(format!(
            "unsupported version {version}"
        )));
    }
    let dtype = u16_at(6);
    if dtype != DTYPE_F32 {
        return Err(Error::UnrecognizedFormat(format!(
            "unsupported dtype {dtype}"
        )));
    }
    if bytes[20..28].iter().any(|&b| b != 0) {
        return Err(Error::UnrecognizedFormat(
            "reserved header bytes are not zero".into(),
        ));
    }
    let (c, h, w) = (u32_at(8) as u64, u32_at(12) as u64, u32_at(16) as u64);
    check_geometry(c, h, w)?;
    let expected = (c * h * w) as usize * 4;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::TruncatedTensor {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::invalid(format!(
            "{} trailing bytes after tensor payload",
            payload.len() - expected
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    FeatureMap::new(meta, c as usize, h as usize, w as usize, data)
}

/// Writes `map` to `path`. Invalid maps cannot be constructed, so nothing
/// unvalidated ever reaches the disk.
pub fn write_feature_map(map: &FeatureMap, path: &Path) -> Result<()> {
    io_util::write_atomic(path, &encode_feature_map(map))
}

pub fn read_feature_map(path: &Path, meta: ImageMeta) -> Result<FeatureMap> {
    let bytes = io_util::read_file(path)?;
    decode_feature_map(&bytes, meta)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub domain: String,
    pub location_id: String,
    pub tensor_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_name: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// A validated manifest whose tensors are read on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    root: PathBuf,
    entries: Vec<(ImageMeta, PathBuf)>,
}

impl Dataset {
    /// Validates a parsed manifest against `root`, the directory that tensor
    /// paths are relative to.
    pub fn from_manifest(manifest: DatasetManifest, root: &Path) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(manifest.entries.len());
        for e in manifest.entries {
            if !seen.insert(e.image_id.clone()) {
                return Err(Error::invalid(format!(
                    "duplicate image_id {:?}",
                    e.image_id
                )));
            }
            let domain: Domain = e.domain.parse()?;
            let path = root.join(&e.tensor_path);
            if !path.is_file() {
                return Err(Error::invalid(format!(
                    "missing tensor file {} for image_id {:?}",
                    path.display(),
                    e.image_id
                )));
            }
            entries.push((ImageMeta::new(e.image_id, domain, e.location_id), path));
        }
        Ok(Self {
            name: manifest.dataset_name,
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn meta(&self, idx: usize) -> &ImageMeta {
        &self.entries[idx].0
    }

    pub fn metas(&self) -> impl Iterator<Item = &ImageMeta> {
        self.entries.iter().map(|(m, _)| m)
    }

    pub fn tensor_path(&self, idx: usize) -> &Path {
        &self.entries[idx].1
    }

    /// Indices of the entries belonging to `domain`, in manifest order.
    pub fn indices_of(&self, domain: Domain) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].0.domain == domain)
            .collect()
    }

    pub fn load(&self, idx: usize) -> Result<FeatureMap> {
        let (meta, path) = &self.entries[idx];
        read_feature_map(path, meta.clone())
    }

    /// Fails unless both domains have at least one entry.
    pub fn require_both_domains(&self) -> Result<()> {
        for d in [Domain::Drone, Domain::Satellite] {
            if self.indices_of(d).is_empty() {
                return Err(Error::invalid(format!(
                    "dataset {:?} has no {d} entries",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

pub fn read_manifest(manifest_path: &Path) -> Result<DatasetManifest> {
    let bytes = io_util::read_file(manifest_path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Parses and validates the manifest at `manifest_path`.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = read_manifest(manifest_path)?;
    let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    Dataset::from_manifest(manifest, root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta() -> ImageMeta {
        ImageMeta::new("img", Domain::Drone, "loc")
    }

    fn fixture() -> FeatureMap {
        let data: Vec<f32> = (0..18).map(|v| v as f32 * 0.25 - 1.0).collect();
        FeatureMap::new(meta(), 2, 3, 3, data).unwrap()
    }

    #[test]
    fn minimal_tensor_is_32_bytes() {
        let m = FeatureMap::new(meta(), 1, 1, 1, vec![0.0]).unwrap();
        let bytes = encode_feature_map(&m);
        assert_eq!(bytes.len(), 32);
        assert_eq!(decode_feature_map(&bytes, meta()).unwrap(), m);
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.cvfm");
        let m = fixture();
        write_feature_map(&m, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes, encode_feature_map(&m));
        let back = read_feature_map(&p, meta()).unwrap();
        assert_eq!(encode_feature_map(&back), bytes);
    }

    #[test]
    fn nan_rejected_before_write() {
        let err = FeatureMap::new(meta(), 1, 1, 2, vec![1.0, f32::NAN]).unwrap_err();
        assert!(err.to_string().contains("non-finite value"), "{err}");
    }

    #[test]
    fn nan_payload_rejected_on_read() {
        let mut bytes = encode_feature_map(&fixture());
        bytes[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&f32::INFINITY.to_le_bytes());
        let err = decode_feature_map(&bytes, meta()).unwrap_err();
        assert!(err.to_string().contains("non-finite value"), "{err}");
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = encode_feature_map(&fixture());
        bytes[0] = b'X';
        let err = decode_feature_map(&bytes, meta()).unwrap_err();
        assert!(err.to_string().contains("unrecognized format"), "{err}");
    }

    #[test]
    fn truncated_by_four_bytes() {
        let bytes = encode_feature_map(&fixture());
        let err = decode_feature_map(&bytes[..bytes.len() - 4], meta()).unwrap_err();
        assert!(err.to_string().contains("truncated tensor"), "{err}");
    }

    #[test]
    fn oversized_header_rejected_without_allocation() {
        let mut bytes = encode_feature_map(&fixture());
        bytes[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        bytes[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        let err = decode_feature_map(&bytes, meta()).unwrap_err();
        assert!(err.to_string().contains("dimension overflow"), "{err}");
    }

    #[test]
    fn every_single_byte_header_corruption_is_rejected() {
        let good = encode_feature_map(&fixture());
        // magic, version, dtype, dims and reserved bytes
        for pos in 0..HEADER_LEN {
            for delta in [1u8, 0x80, 0xff] {
                let mut bad = good.clone();
                bad[pos] = bad[pos].wrapping_add(delta);
                assert!(
                    decode_feature_map(&bad, meta()).is_err(),
                    "byte {pos} + {delta} accepted"
                );
            }
        }
    }

    #[test]
    fn crop_matches_indexing() {
        let m = fixture();
        let c = m.crop(1, 1, 2, 2).unwrap();
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(c.at(k, i, j), m.at(k, i + 1, j + 1));
                }
            }
        }
        assert!(m.crop(2, 2, 2, 1).is_err());
    }

    fn write_manifest(dir: &Path, entries: &[(&str, &str, &str, &str)]) -> PathBuf {
        let manifest = DatasetManifest {
            dataset_name: "tiny".into(),
            entries: entries
                .iter()
                .map(|(id, dom, loc, path)| ManifestEntry {
                    image_id: id.to_string(),
                    domain: dom.to_string(),
                    location_id: loc.to_string(),
                    tensor_path: path.to_string(),
                })
                .collect(),
        };
        let p = dir.join("manifest.json");
        std::fs::write(&p, manifest.to_json()).unwrap();
        p
    }

    fn write_tensors(dir: &Path, names: &[&str]) {
        for n in names {
            write_feature_map(&fixture(), &dir.join(n)).unwrap();
        }
    }

    #[test]
    fn manifest_partitions_domains() {
        let dir = tempfile::tempdir().unwrap();
        write_tensors(dir.path(), &["a", "b", "c", "d"]);
        let p = write_manifest(
            dir.path(),
            &[
                ("d1", "drone", "L1", "a"),
                ("d2", "drone", "L2", "b"),
                ("s1", "satellite", "L1", "c"),
                ("s2", "satellite", "L2", "d"),
            ],
        );
        let ds = load_dataset(&p).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.indices_of(Domain::Drone), vec![0, 1]);
        assert_eq!(ds.indices_of(Domain::Satellite), vec![2, 3]);
        ds.require_both_domains().unwrap();
        assert_eq!(ds.load(3).unwrap().meta.image_id, "s2");
    }

    #[test]
    fn manifest_duplicate_id_named() {
        let dir = tempfile::tempdir().unwrap();
        write_tensors(dir.path(), &["a", "b"]);
        let p = write_manifest(
            dir.path(),
            &[("dup", "drone", "L1", "a"), ("dup", "satellite", "L1", "b")],
        );
        let err = load_dataset(&p).unwrap_err();
        assert!(err.to_string().contains("\"dup\""), "{err}");
    }

    #[test]
    fn manifest_missing_file_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), &[("x", "drone", "L1", "nope.cvfm")]);
        let err = load_dataset(&p).unwrap_err();
        assert!(err.to_string().contains("nope.cvfm"), "{err}");
    }

    #[test]
    fn manifest_unknown_domain() {
        let dir = tempfile::tempdir().unwrap();
        write_tensors(dir.path(), &["a"]);
        let p = write_manifest(dir.path(), &[("x", "street", "L1", "a")]);
        let err = load_dataset(&p).unwrap_err();
        assert!(err.to_string().contains("unknown domain"), "{err}");
    }

    proptest! {
        #[test]
        fn round_trip_random_shapes(
            (c, h, w, data) in (1usize..=8, 1usize..=8, 1usize..=8).prop_flat_map(|(c, h, w)| {
                (Just(c), Just(h), Just(w), proptest::collection::vec(-1e6f32..1e6f32, c * h * w))
            })
        ) {
            let m = FeatureMap::new(meta(), c, h, w, data).unwrap();
            let bytes = encode_feature_map(&m);
            let back = decode_feature_map(&bytes, meta()).unwrap();
            prop_assert_eq!(encode_feature_map(&back), bytes);
            prop_assert_eq!(back, m);
        }
    }
}
