//! Retrieval metrics: Recall@K, Recall@top1% and average precision.
//!
//! All values are percentages. AP uses the non-interpolated form
//! `(1/|rel|) * sum_i i / r_i` over the ranks `r_1 < r_2 < ...` at which the
//! relevant items appear; relevant items missing from a truncated ranking
//! contribute zero.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::RankedResult;

/// Relevant gallery ids per query.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    relevant: HashMap<String, HashSet<String>>,
    gallery_size: usize,
}

impl GroundTruth {
    /// Queries are relevant to every gallery item with the same label.
    /// Queries without any relevant item are rejected.
    pub fn from_labels<'a>(
        queries: impl IntoIterator<Item = (&'a str, &'a str)>,
        gallery: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let mut by_label: HashMap<&str, Vec<&str>> = HashMap::new();
        let mut gallery_size = 0;
        for (id, label) in gallery {
            by_label.entry(label).or_default().push(id);
            gallery_size += 1;
        }
        let mut relevant = HashMap::new();
        for (qid, label) in queries {
            let rel: HashSet<String> = by_label
                .get(label)
                .map(|ids| ids.iter().map(|s| s.to_string()).collect())
                .unwrap_or_default();
            if rel.is_empty() {
                return Err(Error::invalid(format!(
                    "query {qid:?} (location {label:?}) has no relevant gallery item"
                )));
            }
            relevant.insert(qid.to_string(), rel);
        }
        Ok(Self {
            relevant,
            gallery_size,
        })
    }

    pub fn from_sets(
        relevant: HashMap<String, HashSet<String>>,
        gallery_size: usize,
    ) -> Result<Self> {
        if let Some((q, _)) = relevant.iter().find(|(_, r)| r.is_empty()) {
            return Err(Error::invalid(format!(
                "query {q:?} has an empty relevant set"
            )));
        }
        Ok(Self {
            relevant,
            gallery_size,
        })
    }

    pub fn gallery_size(&self) -> usize {
        self.gallery_size
    }

    pub fn num_queries(&self) -> usize {
        self.relevant.len()
    }

    pub fn relevant(&self, query_id: &str) -> Result<&HashSet<String>> {
        self.relevant
            .get(query_id)
            .ok_or_else(|| Error::invalid(format!("query {query_id:?} is not in the ground truth")))
    }
}

/// 1-based ranks of the relevant hits of one query.
fn relevant_ranks(result: &RankedResult, gt: &GroundTruth) -> Result<Vec<usize>> {
    let rel = gt.relevant(&result.query_id)?;
    Ok(result
        .hits
        .iter()
        .enumerate()
        .filter(|(_, h)| rel.contains(&h.id))
        .map(|(i, _)| i + 1)
        .collect())
}

fn check_results(results: &[RankedResult]) -> Result<()> {
    if results.is_empty() {
        return Err(Error::invalid("no rankings to evaluate"));
    }
    let mut seen = HashSet::new();
    for r in results {
        if !seen.insert(r.query_id.as_str()) {
            return Err(Error::invalid(format!(
                "query {:?} ranked twice",
                r.query_id
            )));
        }
    }
    Ok(())
}

pub fn recall_at_k(results: &[RankedResult], gt: &GroundTruth, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::arg("K must be at least 1"));
    }
    check_results(results)?;
    let mut hits = 0usize;
    for r in results {
        let ranks = relevant_ranks(r, gt)?;
        if ranks.first().is_some_and(|&first| first <= k) {
            hits += 1;
        } else if r.hits.len() < k && r.hits.len() < gt.gallery_size() {
            return Err(Error::invalid(format!(
                "ranking for {:?} has depth {} < K = {k}",
                r.query_id,
                r.hits.len()
            )));
        }
    }
    Ok(hits as f64 * 100.0 / results.len() as f64)
}

/// `ceil(gallery_size / 100)`.
pub fn top1pct_threshold(gallery_size: usize) -> usize {
    gallery_size.div_ceil(100).max(1)
}

pub fn recall_top1pct(results: &[RankedResult], gt: &GroundTruth) -> Result<f64> {
    if gt.gallery_size() == 0 {
        return Err(Error::invalid("gallery is empty"));
    }
    recall_at_k(results, gt, top1pct_threshold(gt.gallery_size()))
}

pub fn average_precision(results: &[RankedResult], gt: &GroundTruth) -> Result<f64> {
    check_results(results)?;
    let mut total = 0.0;
    for r in results {
        let n_rel = gt.relevant(&r.query_id)?.len();
        let ranks = relevant_ranks(r, gt)?;
        let ap: f64 = ranks
            .iter()
            .enumerate()
            .map(|(i, &rank)| (i + 1) as f64 / rank as f64)
            .sum::<f64>()
            / n_rel as f64;
        total += ap;
    }
    Ok(total * 100.0 / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Keys are the requested K values as strings, then `"top1pct"`.
    pub recall: IndexMap<String, f64>,
    pub ap: f64,
    pub n_queries: usize,
    pub gallery_size: usize,
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub inputs_hash: Option<String>,
}

pub fn evaluate(
    results: &[RankedResult],
    gt: &GroundTruth,
    ks: &[usize],
    config: serde_json::Value,
) -> Result<EvalReport> {
    if ks.is_empty() {
        return Err(Error::arg("at least one K is required"));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut recall = IndexMap::new();
    for k in ks {
        recall.insert(k.to_string(), recall_at_k(results, gt, k)?);
    }
    recall.insert("top1pct".to_string(), recall_top1pct(results, gt)?);
    Ok(EvalReport {
        recall,
        ap: average_precision(results, gt)?,
        n_queries: results.len(),
        gallery_size: gt.gallery_size(),
        config,
        inputs_hash: None,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut cols: Vec<String> = self
            .recall
            .keys()
            .map(|k| {
                if k == "top1pct" {
                    "R@top1".to_string()
                } else {
                    format!("R@{k}")
                }
            })
            .collect();
        cols.push("AP".into());
        cols
    }

    pub fn row_values(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.recall.values().copied().collect();
        v.push(self.ap);
        v
    }

    /// Aligned text table with one row.
    pub fn to_table(&self, label: &str) -> String {
        format_table(
            &[label.to_string()],
            &self.column_names(),
            &[self.row_values()],
            "",
        )
    }
}

/// Aligned-column table: a label column followed by numeric columns printed
/// with two decimals.
pub fn format_table(
    labels: &[String],
    columns: &[String],
    rows: &[Vec<f64>],
    header_label: &str,
) -> String {
    let label_w = labels
        .iter()
        .map(String::len)
        .chain([header_label.len()])
        .max()
        .unwrap_or(0);
    let col_w = columns.iter().map(String::len).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = write!(out, "{header_label:<label_w$}");
    for c in columns {
        let _ = write!(out, " | {c:>col_w$}");
    }
    out.push('\n');
    out.push_str(&"-".repeat(label_w));
    for _ in columns {
        out.push_str("-+-");
        out.push_str(&"-".repeat(col_w));
    }
    out.push('\n');
    for (label, row) in labels.iter().zip(rows) {
        let _ = write!(out, "{label:<label_w$}");
        for v in row {
            let _ = write!(out, " | {v:>col_w$.2}");
        }
        out.push('\n');
    }
    out
}

/// Ranks of every relevant item per query, for export to external tools.
pub fn relevant_rank_table(
    results: &[RankedResult],
    gt: &GroundTruth,
) -> Result<BTreeMap<String, Vec<usize>>> {
    results
        .iter()
        .map(|r| Ok((r.query_id.clone(), relevant_ranks(r, gt)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::Hit;
    use proptest::prelude::*;

    fn ranking(q: &str, ids: &[&str]) -> RankedResult {
        RankedResult {
            query_id: q.into(),
            hits: ids
                .iter()
                .enumerate()
                .map(|(i, id)| Hit {
                    id: id.to_string(),
                    score: 1.0 - i as f64 * 0.01,
                })
                .collect(),
        }
    }

    fn gt(pairs: &[(&str, &[&str])], gallery: usize) -> GroundTruth {
        GroundTruth::from_sets(
            pairs
                .iter()
                .map(|(q, rel)| (q.to_string(), rel.iter().map(|s| s.to_string()).collect()))
                .collect(),
            gallery,
        )
        .unwrap()
    }

    fn gallery(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("g{i:04}")).collect()
    }

    /// Full ranking of an `n`-item gallery with the relevant item `rel` at
    /// 1-based position `rank`.
    fn planted(q: &str, n: usize, rel: usize, rank: usize) -> RankedResult {
        let g = gallery(n);
        let mut order: Vec<&str> = g
            .iter()
            .filter(|&id| *id != g[rel])
            .map(String::as_str)
            .collect();
        order.insert(rank - 1, &g[rel]);
        ranking(q, &order)
    }

    #[test]
    fn perfect_rankings() {
        let r = vec![ranking("q1", &["a", "b"]), ranking("q2", &["b", "a"])];
        let t = gt(&[("q1", &["a"]), ("q2", &["b"])], 2);
        let rep = evaluate(&r, &t, &[1, 5, 10], serde_json::json!({})).unwrap();
        assert!(rep.recall.values().all(|&v| v == 100.0));
        assert_eq!(rep.ap, 100.0);
    }

    #[test]
    fn second_rank() {
        let r = vec![ranking("q", &["x", "a", "y", "z", "w"])];
        let t = gt(&[("q", &["a"])], 5);
        assert_eq!(recall_at_k(&r, &t, 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&r, &t, 5).unwrap(), 100.0);
    }

    #[test]
    fn ap_examples() {
        let t = gt(&[("q", &["a"])], 5);
        assert_eq!(
            average_precision(&[ranking("q", &["a", "b", "c", "d"])], &t).unwrap(),
            100.0
        );
        assert_eq!(
            average_precision(&[ranking("q", &["b", "c", "d", "a"])], &t).unwrap(),
            25.0
        );
        let t3 = gt(&[("q", &["a", "b", "c"])], 6);
        let ap = average_precision(&[ranking("q", &["a", "x", "b", "y", "c", "z"])], &t3).unwrap();
        assert!((ap - 100.0 * (1.0 + 2.0 / 3.0 + 3.0 / 5.0) / 3.0).abs() < 1e-12);
        assert!((ap - 75.56).abs() < 0.005);
    }

    #[test]
    fn reversed_rankings() {
        let r = vec![planted("q", 10, 0, 10)];
        let t = gt(&[("q", &["g0000"])], 10);
        let rep = evaluate(&r, &t, &[1], serde_json::json!({})).unwrap();
        assert_eq!(rep.recall["1"], 0.0);
        assert!((rep.ap - 10.0).abs() < 1e-12);
    }

    #[test]
    fn top1pct_thresholds() {
        assert_eq!(top1pct_threshold(50), 1);
        assert_eq!(top1pct_threshold(100), 1);
        assert_eq!(top1pct_threshold(101), 2);
        assert_eq!(top1pct_threshold(200), 2);
        assert_eq!(top1pct_threshold(951), 10);
        let t = gt(&[("q", &["g0003"])], 200);
        assert_eq!(
            recall_top1pct(&[planted("q", 200, 3, 2)], &t).unwrap(),
            100.0
        );
        let t50 = gt(&[("q", &["g0003"])], 50);
        assert_eq!(
            recall_top1pct(&[planted("q", 50, 3, 2)], &t50).unwrap(),
            0.0
        );
    }

    #[test]
    fn unknown_query_and_empty_relevant() {
        let t = gt(&[("q", &["a"])], 2);
        assert!(recall_at_k(&[ranking("other", &["a"])], &t, 1).is_err());
        let mut m = HashMap::new();
        m.insert("q".to_string(), HashSet::new());
        assert!(GroundTruth::from_sets(m, 3).is_err());
        assert!(GroundTruth::from_labels([("q", "L9")], [("g", "L1")]).is_err());
    }

    #[test]
    fn shallow_ranking_rejected_only_when_needed() {
        let t = gt(&[("q", &["a"])], 10);
        let r = vec![ranking("q", &["x", "y"])];
        assert!(recall_at_k(&r, &t, 5).is_err());
        assert_eq!(recall_at_k(&r, &t, 2).unwrap(), 0.0);
        assert_eq!(recall_at_k(&[ranking("q", &["a"])], &t, 5).unwrap(), 100.0);
    }

    #[test]
    fn table_layout() {
        let t = gt(&[("q", &["a"])], 2);
        let rep = evaluate(
            &[ranking("q", &["a", "b"])],
            &t,
            &[10, 1, 5],
            serde_json::json!({}),
        )
        .unwrap();
        assert_eq!(
            rep.column_names(),
            vec!["R@1", "R@5", "R@10", "R@top1", "AP"]
        );
        let table = rep.to_table("run");
        assert!(table.contains("R@top1"));
        assert!(table.lines().nth(2).unwrap().contains("100.00"));
    }

    // Planted-rank oracle: count and sum by hand from the planted ranks.
    #[test]
    fn planted_rank_oracle() {
        let ranks = [1, 3, 2, 10, 1, 7, 5, 1, 4, 9];
        let n = 10;
        let results: Vec<_> = ranks
            .iter()
            .enumerate()
            .map(|(q, &r)| planted(&format!("q{q}"), n, q, r))
            .collect();
        let g = gallery(n);
        let t = GroundTruth::from_sets(
            (0..10)
                .map(|q| (format!("q{q}"), [g[q].clone()].into_iter().collect()))
                .collect(),
            n,
        )
        .unwrap();
        for k in 1..=10 {
            let want = ranks.iter().filter(|&&r| r <= k).count() as f64 * 100.0 / 10.0;
            assert_eq!(recall_at_k(&results, &t, k).unwrap(), want);
        }
        let want_ap = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / 10.0 * 100.0;
        assert!((average_precision(&results, &t).unwrap() - want_ap).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn recall_monotone_and_complete(ranks in proptest::collection::vec(1usize..30, 1..20)) {
            let n = 30;
            let g = gallery(n);
            let results: Vec<_> = ranks.iter().enumerate().map(|(q, &r)| planted(&format!("q{q}"), n, q % n, r)).collect();
            let t = GroundTruth::from_sets(
                (0..ranks.len()).map(|q| (format!("q{q}"), [g[q % n].clone()].into_iter().collect())).collect(),
                n,
            ).unwrap();
            let mut prev = 0.0;
            for k in 1..=n {
                let r = recall_at_k(&results, &t, k).unwrap();
                prop_assert!(r >= prev && (0.0..=100.0).contains(&r));
                prev = r;
            }
            prop_assert_eq!(prev, 100.0);
        }

        #[test]
        fn ap_ignores_order_of_trailing_irrelevant(seed in any::<u64>(), rel_count in 1usize..4) {
            use rand::seq::{IndexedRandom, SliceRandom};
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = gallery(12);
            let mut order: Vec<&str> = g.iter().map(String::as_str).collect();
            order.shuffle(&mut rng);
            let rel: Vec<&str> = order.iter().take(8).copied().collect::<Vec<_>>()
                .choose_multiple(&mut rng, rel_count).copied().collect();
            let t = gt(&[("q", &rel)], 12);
            let last = order.iter().rposition(|id| rel.contains(id)).unwrap();
            let a = average_precision(&[ranking("q", &order)], &t).unwrap();
            order[last + 1..].shuffle(&mut rng);
            let b = average_precision(&[ranking("q", &order)], &t).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
