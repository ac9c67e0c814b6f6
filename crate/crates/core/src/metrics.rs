//! Truncated ranking metrics and the predicted-versus-liked profile.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Truncation levels reported by default.
pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

fn hits(ranked: &[usize], relevant: &[usize], k: usize) -> usize {
    ranked
        .iter()
        .take(k)
        .filter(|i| relevant.contains(i))
        .count()
}

/// `|top-k ∩ relevant| / k`
pub fn precision_at(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    assert!(k >= 1, "k must be at least 1");
    hits(ranked, relevant, k) as f64 / k as f64
}

/// `|top-k ∩ relevant| / |relevant|`; undefined without relevant items.
pub fn recall_at(ranked: &[usize], relevant: &[usize], k: usize) -> Option<f64> {
    assert!(k >= 1, "k must be at least 1");
    (!relevant.is_empty()).then(|| hits(ranked, relevant, k) as f64 / relevant.len() as f64)
}

/// Reciprocal rank of the first relevant item within the top `k`, else 0.
pub fn mrr_at(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    assert!(k >= 1, "k must be at least 1");
    ranked
        .iter()
        .take(k)
        .position(|i| relevant.contains(i))
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

pub fn hit_at(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    assert!(k >= 1, "k must be at least 1");
    if hits(ranked, relevant, k) > 0 {
        1.0
    } else {
        0.0
    }
}

/// Average precision over the hit positions, normalized by `min(k, |relevant|)`.
pub fn map_at(ranked: &[usize], relevant: &[usize], k: usize) -> Option<f64> {
    assert!(k >= 1, "k must be at least 1");
    if relevant.is_empty() {
        return None;
    }
    let mut found = 0;
    let mut sum = 0.0;
    for (pos, item) in ranked.iter().take(k).enumerate() {
        if relevant.contains(item) {
            found += 1;
            sum += found as f64 / (pos + 1) as f64;
        }
    }
    Some(sum / k.min(relevant.len()) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "P")]
    Precision,
    #[serde(rename = "R")]
    Recall,
    #[serde(rename = "MRR")]
    Mrr,
    #[serde(rename = "HR")]
    HitRatio,
    #[serde(rename = "MAP")]
    Map,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Precision,
        Metric::Recall,
        Metric::Mrr,
        Metric::HitRatio,
        Metric::Map,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Precision => "P",
            Metric::Recall => "R",
            Metric::Mrr => "MRR",
            Metric::HitRatio => "HR",
            Metric::Map => "MAP",
        }
    }

    /// Value for one user with a non-empty relevant set.
    pub fn value(self, ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
        match self {
            Metric::Precision => precision_at(ranked, relevant, k),
            Metric::Recall => recall_at(ranked, relevant, k).unwrap_or(0.0),
            Metric::Mrr => mrr_at(ranked, relevant, k),
            Metric::HitRatio => hit_at(ranked, relevant, k),
            Metric::Map => map_at(ranked, relevant, k).unwrap_or(0.0),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One user's full ranking and relevant set, both as item indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRanking {
    pub ranked: Vec<usize>,
    pub relevant: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub metric: Metric,
    pub k: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub seed: u64,
    pub ks: Vec<usize>,
    pub users: Vec<UserRanking>,
    /// Macro means over users with at least one relevant item, ordered by
    /// `k` then metric.
    pub means: Vec<MetricValue>,
    pub evaluated_users: usize,
    pub excluded_users: usize,
}

impl EvalResult {
    pub fn from_rankings(users: Vec<UserRanking>, ks: &[usize], seed: u64) -> Self {
        let mut sums: BTreeMap<(Metric, usize), f64> = BTreeMap::new();
        let mut evaluated = 0;
        for u in users.iter().filter(|u| !u.relevant.is_empty()) {
            evaluated += 1;
            let p1 = precision_at(&u.ranked, &u.relevant, 1);
            assert!(
                p1 == mrr_at(&u.ranked, &u.relevant, 1) && p1 == hit_at(&u.ranked, &u.relevant, 1),
                "P@1, MRR@1 and HR@1 disagree"
            );
            for &k in ks {
                for m in Metric::ALL {
                    *sums.entry((m, k)).or_default() += m.value(&u.ranked, &u.relevant, k);
                }
            }
        }
        let means = ks
            .iter()
            .flat_map(|&k| Metric::ALL.map(|m| (m, k)))
            .map(|(metric, k)| {
                let sum = sums.get(&(metric, k)).copied().unwrap_or(0.0);
                let value = if evaluated == 0 {
                    0.0
                } else {
                    sum / evaluated as f64
                };
                MetricValue { metric, k, value }
            })
            .collect();
        let excluded = users.len() - evaluated;
        Self {
            seed,
            ks: ks.to_vec(),
            users,
            means,
            evaluated_users: evaluated,
            excluded_users: excluded,
        }
    }

    pub fn get(&self, metric: Metric, k: usize) -> Option<f64> {
        self.means
            .iter()
            .find(|v| v.metric == metric && v.k == k)
            .map(|v| v.value)
    }
}

/// Mean, sample standard deviation and count of one metric across seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub metric: Metric,
    pub k: usize,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn summarize(results: &[EvalResult]) -> Vec<Summary> {
    let Some(first) = results.first() else {
        return Vec::new();
    };
    first
        .means
        .iter()
        .map(|&MetricValue { metric, k, .. }| {
            let vals: Vec<f64> = results.iter().filter_map(|r| r.get(metric, k)).collect();
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            Summary {
                metric,
                k,
                mean,
                std,
                count: n,
            }
        })
        .collect()
}

/// Long-format CSV: one row per model × seed × metric × k.
pub fn write_metrics_csv<W: Write>(out: W, runs: &[(String, Vec<EvalResult>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["format_version", "model", "seed", "metric", "k", "value"])?;
    for (model, results) in runs {
        for r in results {
            for v in &r.means {
                w.write_record([
                    REPORT_FORMAT_VERSION.to_string(),
                    model.clone(),
                    r.seed.to_string(),
                    v.metric.label().to_string(),
                    v.k.to_string(),
                    format!("{:.6}", v.value),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryReport {
    pub format_version: u32,
    pub models: BTreeMap<String, ModelSummary>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSummary {
    pub seeds: Vec<u64>,
    pub excluded_users: usize,
    pub metrics: Vec<Summary>,
}

pub fn summary_report(runs: &[(String, Vec<EvalResult>)]) -> SummaryReport {
    SummaryReport {
        format_version: REPORT_FORMAT_VERSION,
        models: runs
            .iter()
            .map(|(name, results)| {
                (
                    name.clone(),
                    ModelSummary {
                        seeds: results.iter().map(|r| r.seed).collect(),
                        excluded_users: results.iter().map(|r| r.excluded_users).sum(),
                        metrics: summarize(results),
                    },
                )
            })
            .collect(),
    }
}

/// Recommendations and likes of every evaluation user for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedLikes {
    pub n_items: usize,
    pub recommended: Vec<Vec<usize>>,
    pub liked: Vec<Vec<usize>>,
}

/// Per like-rank difference between recommendations and likes, averaged over
/// seeds. Rank 0 is the most-liked item of each seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffProfile {
    pub values: Vec<f64>,
    pub seeds: usize,
}

pub fn diff_profile(per_seed: &[SeedLikes]) -> Result<DiffProfile> {
    let Some(first) = per_seed.first() else {
        return Err(Error::InvalidArgument(
            "diff profile needs at least one seed".into(),
        ));
    };
    let n = first.n_items;
    let mut acc = vec![0.0; n];
    for s in per_seed {
        if s.n_items != n || s.recommended.len() != s.liked.len() {
            return Err(Error::InvalidArgument(
                "seeds disagree on items or users".into(),
            ));
        }
        let mut likes = vec![0i64; n];
        let mut recs = vec![0i64; n];
        for (u, (rec, liked)) in s.recommended.iter().zip(&s.liked).enumerate() {
            if rec.len() != liked.len() {
                return Err(Error::InvalidArgument(format!(
                    "user {u}: {} recommendations for {} likes",
                    rec.len(),
                    liked.len()
                )));
            }
            for &i in liked {
                likes[i] += 1;
            }
            for &i in rec {
                recs[i] += 1;
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| likes[b].cmp(&likes[a]).then(a.cmp(&b)));
        for (r, &item) in order.iter().enumerate() {
            acc[r] += (recs[item] - likes[item]) as f64;
        }
    }
    let seeds = per_seed.len();
    Ok(DiffProfile {
        values: acc.into_iter().map(|v| v / seeds as f64).collect(),
        seeds,
    })
}

pub fn write_diff_profile_csv<W: Write>(out: W, profiles: &[(String, DiffProfile)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["format_version", "model", "rank", "recommended_minus_liked"])?;
    for (model, p) in profiles {
        for (r, v) in p.values.iter().enumerate() {
            w.write_record([
                REPORT_FORMAT_VERSION.to_string(),
                model.clone(),
                r.to_string(),
                format!("{v:.6}"),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}
