//! Unit-norm global descriptors and their JSON-lines set files.

use std::collections::HashSet;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{Domain, ImageMeta};
use crate::io_util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub image_id: String,
    pub domain: Domain,
    pub location_id: String,
    pub values: Vec<f32>,
}

impl Descriptor {
    pub fn new(meta: &ImageMeta, values: Vec<f32>) -> Self {
        Self {
            image_id: meta.image_id.clone(),
            domain: meta.domain,
            location_id: meta.location_id.clone(),
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

/// Ordered collection of descriptors sharing one dimension.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DescriptorSet {
    pub entries: Vec<Descriptor>,
}

impl DescriptorSet {
    pub fn new(entries: Vec<Descriptor>) -> Result<Self> {
        let set = Self { entries };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let dim = self.entries.first().map(Descriptor::dim);
        for d in &self.entries {
            if !seen.insert(&d.image_id) {
                return Err(Error::invalid(format!(
                    "duplicate image_id {:?} in descriptor set",
                    d.image_id
                )));
            }
            if Some(d.dim()) != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim.unwrap_or(0),
                    got: d.dim(),
                });
            }
            if d.values.is_empty() {
                return Err(Error::invalid(format!(
                    "descriptor {:?} is empty",
                    d.image_id
                )));
            }
            if let Some(i) = d.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(i));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(Descriptor::dim)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Descriptor> {
        self.entries.iter()
    }

    /// Entries of one domain, preserving order.
    pub fn filter_domain(&self, domain: Domain) -> DescriptorSet {
        DescriptorSet {
            entries: self
                .entries
                .iter()
                .filter(|d| d.domain == domain)
                .cloned()
                .collect(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for d in &self.entries {
            out.push_str(&serde_json::to_string(d).expect("descriptor serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let d: Descriptor = serde_json::from_str(line)
                .map_err(|e| Error::invalid(format!("descriptor line {}: {e}", lineno + 1)))?;
            entries.push(d);
        }
        Self::new(entries)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io_util::write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = io_util::read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::invalid(format!("{} is not UTF-8", path.display())))?;
        Self::from_jsonl(&text)
    }
}

impl<'a> IntoIterator for &'a DescriptorSet {
    type Item = &'a Descriptor;
    type IntoIter = std::slice::Iter<'a, Descriptor>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}

/// FNV-1a 64 over the image ids and value bytes of every descriptor in
/// `sets`, visited in (image_id, domain) order so the hash does not depend on
/// file order or on which set a descriptor came from.
pub fn descriptor_sets_hash(sets: &[&DescriptorSet]) -> u64 {
    let mut all: Vec<&Descriptor> = sets.iter().flat_map(|s| s.entries.iter()).collect();
    all.sort_by(|a, b| a.image_id.cmp(&b.image_id).then(a.domain.cmp(&b.domain)));
    let mut h = FnvHasher::default();
    for d in all {
        h.write(d.image_id.as_bytes());
        for v in &d.values {
            h.write(&v.to_le_bytes());
        }
    }
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(id: &str, dom: Domain, v: &[f32]) -> Descriptor {
        Descriptor {
            image_id: id.into(),
            domain: dom,
            location_id: "L".into(),
            values: v.to_vec(),
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let set = DescriptorSet::new(vec![
            d("a", Domain::Drone, &[0.6, 0.8]),
            d("b", Domain::Satellite, &[1.0, 0.1]),
        ])
        .unwrap();
        let text = set.to_jsonl();
        assert!(text.starts_with(
            r#"{"image_id":"a","domain":"drone","location_id":"L","values":[0.6,0.8]}"#
        ));
        assert_eq!(DescriptorSet::from_jsonl(&text).unwrap(), set);
    }

    #[test]
    fn rejects_mixed_dims_and_duplicates() {
        assert!(DescriptorSet::new(vec![
            d("a", Domain::Drone, &[1.0]),
            d("b", Domain::Drone, &[1.0, 0.0])
        ])
        .is_err());
        assert!(DescriptorSet::new(vec![
            d("a", Domain::Drone, &[1.0]),
            d("a", Domain::Drone, &[1.0])
        ])
        .is_err());
    }

    #[test]
    fn hash_is_order_independent_and_value_sensitive() {
        let a = DescriptorSet::new(vec![
            d("a", Domain::Drone, &[1.0, 0.0]),
            d("b", Domain::Drone, &[0.0, 1.0]),
        ])
        .unwrap();
        let mut b = a.clone();
        b.entries.reverse();
        assert_eq!(descriptor_sets_hash(&[&a]), descriptor_sets_hash(&[&b]));
        b.entries[0].values[1] = 0.5;
        assert_ne!(descriptor_sets_hash(&[&a]), descriptor_sets_hash(&[&b]));
    }
}
