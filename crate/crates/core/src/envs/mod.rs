//! Interaction data: synthetic environments, CSV ingestion and the on-disk
//! dataset format.

pub mod csv_loader;
pub mod kmeans;
pub mod messaging;
pub mod spotify;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{FeatureKind, FeatureRow, FeatureSchema, FeatureValue};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// One training triple; `user` and `item` index into the set's tables.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub target: f64,
}

/// A held-out user with its candidate items and their relevance labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalUser {
    pub row: FeatureRow,
    pub candidates: Vec<usize>,
    pub relevance: Vec<bool>,
}

impl EvalUser {
    /// Positions in `candidates` that are relevant.
    pub fn relevant(&self) -> Vec<usize> {
        self.relevance
            .iter()
            .enumerate()
            .filter_map(|(i, &r)| r.then_some(i))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionSet {
    pub user_schema: FeatureSchema,
    pub content_schema: FeatureSchema,
    pub users: Vec<FeatureRow>,
    pub items: Vec<FeatureRow>,
    pub train: Vec<Interaction>,
    pub eval: Vec<EvalUser>,
}

impl InteractionSet {
    pub fn train_user(&self, i: usize) -> &FeatureRow {
        &self.users[self.train[i].user]
    }

    pub fn train_item(&self, i: usize) -> &FeatureRow {
        &self.items[self.train[i].item]
    }

    /// Validates every row against its schema and every index against its table.
    pub fn validate(&self) -> Result<()> {
        for r in &self.users {
            self.user_schema.check(r)?;
        }
        for r in &self.items {
            self.content_schema.check(r)?;
        }
        for t in &self.train {
            if t.user >= self.users.len() || t.item >= self.items.len() {
                return Err(Error::InvalidArgument(format!(
                    "interaction {t:?} out of range"
                )));
            }
        }
        for u in &self.eval {
            self.user_schema.check(&u.row)?;
            if u.candidates.len() != u.relevance.len()
                || u.candidates.iter().any(|&c| c >= self.items.len())
            {
                return Err(Error::InvalidArgument("malformed evaluation user".into()));
            }
        }
        Ok(())
    }

    /// Writes `train.csv` and `eval.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("train.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let header: Vec<String> = std::iter::once("format_version".to_string())
            .chain(
                self.user_schema
                    .features
                    .iter()
                    .map(|f| format!("user.{}", f.name)),
            )
            .chain(
                self.content_schema
                    .features
                    .iter()
                    .map(|f| format!("content.{}", f.name)),
            )
            .chain(std::iter::once("target".to_string()))
            .collect();
        w.write_record(&header)?;
        for t in &self.train {
            let record: Vec<String> = std::iter::once(DATASET_FORMAT_VERSION.to_string())
                .chain(
                    self.users[t.user]
                        .0
                        .iter()
                        .chain(&self.items[t.item].0)
                        .map(|v| format_value(*v)),
                )
                .chain(std::iter::once(t.target.to_string()))
                .collect();
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let eval = EvalFile {
            format_version: DATASET_FORMAT_VERSION,
            user_schema: self.user_schema.clone(),
            content_schema: self.content_schema.clone(),
            items: self.items.clone(),
            users: self.eval.clone(),
        };
        let path = dir.join("eval.json");
        std::fs::write(&path, serde_json::to_string(&eval)?).map_err(|e| Error::io(&path, e))
    }

    /// Reads a dataset written by [`InteractionSet::write`]. Identical
    /// training rows are shared in the user and item tables.
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("eval.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let eval: EvalFile = serde_json::from_str(&text)?;
        if eval.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: eval.format_version,
                expected: DATASET_FORMAT_VERSION,
            });
        }
        let mut set = InteractionSet {
            user_schema: eval.user_schema,
            content_schema: eval.content_schema,
            users: Vec::new(),
            items: eval.items,
            train: Vec::new(),
            eval: eval.users,
        };
        let mut item_index: HashMap<Vec<String>, usize> = HashMap::new();
        for (i, row) in set.items.iter().enumerate() {
            item_index
                .entry(row.0.iter().map(|v| format_value(*v)).collect())
                .or_insert(i);
        }
        let mut user_index: HashMap<Vec<String>, usize> = HashMap::new();

        let path = dir.join("train.csv");
        let mut r = csv::Reader::from_path(&path)?;
        let header = r.headers()?.clone();
        let nu = set.user_schema.len();
        let nc = set.content_schema.len();
        let expected: Vec<String> = std::iter::once("format_version".to_string())
            .chain(
                set.user_schema
                    .features
                    .iter()
                    .map(|f| format!("user.{}", f.name)),
            )
            .chain(
                set.content_schema
                    .features
                    .iter()
                    .map(|f| format!("content.{}", f.name)),
            )
            .chain(std::iter::once("target".to_string()))
            .collect();
        for name in &expected {
            if !header.iter().any(|h| h == name) {
                return Err(Error::UnknownColumn(name.clone()));
            }
        }
        if header.len() != expected.len() || header.iter().zip(&expected).any(|(a, b)| a != b) {
            return Err(Error::SchemaMismatch(
                "train.csv columns do not match eval.json schemas".into(),
            ));
        }
        for rec in r.records() {
            let rec = rec?;
            if rec[0].trim().parse::<u32>().ok() != Some(DATASET_FORMAT_VERSION) {
                return Err(Error::InvalidArgument(format!(
                    "train.csv format_version {:?}",
                    &rec[0]
                )));
            }
            let fields: Vec<String> = rec.iter().skip(1).map(str::to_string).collect();
            let user_key = fields[..nu].to_vec();
            let item_key = fields[nu..nu + nc].to_vec();
            let user = match user_index.get(&user_key) {
                Some(&i) => i,
                None => {
                    let row = parse_row(&set.user_schema, &user_key)?;
                    set.users.push(row);
                    user_index.insert(user_key, set.users.len() - 1);
                    set.users.len() - 1
                }
            };
            let item = match item_index.get(&item_key) {
                Some(&i) => i,
                None => {
                    let row = parse_row(&set.content_schema, &item_key)?;
                    set.items.push(row);
                    item_index.insert(item_key, set.items.len() - 1);
                    set.items.len() - 1
                }
            };
            let target = parse_f64(&fields[nu + nc])?;
            set.train.push(Interaction { user, item, target });
        }
        set.validate()?;
        Ok(set)
    }
}

#[derive(Serialize, Deserialize)]
struct EvalFile {
    format_version: u32,
    user_schema: FeatureSchema,
    content_schema: FeatureSchema,
    items: Vec<FeatureRow>,
    users: Vec<EvalUser>,
}

fn format_value(v: FeatureValue) -> String {
    match v {
        FeatureValue::Categorical(i) => i.to_string(),
        FeatureValue::Numeric(x) => x.to_string(),
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("not a number: {s:?}")))
}

fn parse_row(schema: &FeatureSchema, fields: &[String]) -> Result<FeatureRow> {
    schema
        .features
        .iter()
        .zip(fields)
        .map(|(f, s)| match f.kind {
            FeatureKind::Numeric => parse_f64(s).map(FeatureValue::Numeric),
            FeatureKind::Categorical { .. } => s
                .trim()
                .parse()
                .map(FeatureValue::Categorical)
                .map_err(|_| {
                    Error::InvalidArgument(format!(
                        "feature {}: not a category index: {s:?}",
                        f.name
                    ))
                }),
        })
        .collect::<Result<_>>()
        .map(FeatureRow)
}

/// Standardizes each column of a row-major `[rows, cols]` matrix to zero
/// mean and unit population variance.
pub(crate) fn standardize_columns(m: &mut [f64], cols: usize) {
    let rows = m.len() / cols;
    for c in 0..cols {
        let mean = (0..rows).map(|r| m[r * cols + c]).sum::<f64>() / rows as f64;
        let var = (0..rows)
            .map(|r| (m[r * cols + c] - mean).powi(2))
            .sum::<f64>()
            / rows as f64;
        let sd = var.sqrt().max(1e-12);
        for r in 0..rows {
            m[r * cols + c] = (m[r * cols + c] - mean) / sd;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Feature;

    fn tiny() -> InteractionSet {
        use FeatureValue::*;
        InteractionSet {
            user_schema: FeatureSchema::new(vec![
                Feature::numeric("age"),
                Feature::categorical("g", 2),
            ])
            .unwrap(),
            content_schema: FeatureSchema::new(vec![Feature::categorical("item", 3)]).unwrap(),
            users: vec![
                FeatureRow(vec![Numeric(0.1), Categorical(1)]),
                FeatureRow(vec![Numeric(-2.5e-7), Categorical(0)]),
            ],
            items: (0..3).map(|i| FeatureRow(vec![Categorical(i)])).collect(),
            train: vec![
                Interaction {
                    user: 0,
                    item: 2,
                    target: 1.0,
                },
                Interaction {
                    user: 1,
                    item: 0,
                    target: -1.0,
                },
                Interaction {
                    user: 0,
                    item: 1,
                    target: 0.0,
                },
            ],
            eval: vec![EvalUser {
                row: FeatureRow(vec![Numeric(1.0), Categorical(0)]),
                candidates: vec![0, 1, 2],
                relevance: vec![false, true, true],
            }],
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = tiny();
        set.write(dir.path()).unwrap();
        let back = InteractionSet::read(dir.path()).unwrap();
        assert_eq!(back, set);
        let text = std::fs::read_to_string(dir.path().join("train.csv")).unwrap();
        assert!(text.starts_with("format_version,user.age,user.g,content.item,target\n"));
        let eval = std::fs::read_to_string(dir.path().join("eval.json")).unwrap();
        assert!(eval.contains("\"format_version\":1"));
    }

    #[test]
    fn standardize_gives_zero_mean_unit_variance() {
        let mut m = vec![1.0, 10.0, 2.0, 20.0, 3.0, 60.0];
        standardize_columns(&mut m, 2);
        for c in 0..2 {
            let col: Vec<f64> = (0..3).map(|r| m[r * 2 + c]).collect();
            assert!(col.iter().sum::<f64>().abs() < 1e-12);
            assert!((col.iter().map(|v| v * v).sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        }
    }
}
