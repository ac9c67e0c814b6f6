//! Transaction CSV ingestion with sampled non-transactions.
//!
//! Every row is a purchase. Users with enough purchases are held out for
//! evaluation; for the rest, each purchase becomes a positive triple and
//! unseen items are sampled as zero-labelled non-transactions.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EvalUser, Interaction, InteractionSet};
use crate::error::{Error, Result};
use crate::tokenizer::{Feature, FeatureRow, FeatureSchema, FeatureValue};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub column: String,
    pub kind: ColumnKind,
}

impl ColumnSpec {
    pub fn numeric(column: impl Into<String>) -> Self {
        Self {
            column: column.into(),
            kind: ColumnKind::Numeric,
        }
    }

    pub fn categorical(column: impl Into<String>) -> Self {
        Self {
            column: column.into(),
            kind: ColumnKind::Categorical,
        }
    }
}

/// Which CSV columns feed which tower.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaMap {
    pub user_id: String,
    pub user_features: Vec<ColumnSpec>,
    pub item_id: String,
    pub item_features: Vec<ColumnSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvOptions {
    /// Non-transactions sampled per purchase.
    pub nontransaction_ratio: f64,
    pub min_test_positives: usize,
    pub n_test_users: usize,
    pub max_items: usize,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            nontransaction_ratio: 1.0,
            min_test_positives: 5,
            n_test_users: 100,
            max_items: 1_000_000,
        }
    }
}

struct Vocab(HashMap<String, usize>);

impl Vocab {
    fn id(&mut self, s: &str) -> usize {
        let n = self.0.len();
        *self.0.entry(s.to_string()).or_insert(n)
    }
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::UnknownColumn(name.to_string()))
}

struct Columns {
    index: Vec<usize>,
    vocabs: Vec<Option<Vocab>>,
}

impl Columns {
    fn new(headers: &csv::StringRecord, specs: &[ColumnSpec]) -> Result<Self> {
        Ok(Self {
            index: specs
                .iter()
                .map(|s| column_index(headers, &s.column))
                .collect::<Result<_>>()?,
            vocabs: specs
                .iter()
                .map(|s| (s.kind == ColumnKind::Categorical).then(|| Vocab(HashMap::new())))
                .collect(),
        })
    }

    fn row(&mut self, rec: &csv::StringRecord, specs: &[ColumnSpec]) -> Result<Vec<FeatureValue>> {
        self.index
            .iter()
            .zip(self.vocabs.iter_mut())
            .zip(specs)
            .map(|((&i, vocab), spec)| {
                let field = &rec[i];
                match vocab {
                    Some(v) => Ok(FeatureValue::Categorical(v.id(field))),
                    None => field
                        .trim()
                        .parse()
                        .map(FeatureValue::Numeric)
                        .map_err(|_| {
                            Error::InvalidArgument(format!(
                                "column {}: not a number: {field:?}",
                                spec.column
                            ))
                        }),
                }
            })
            .collect()
    }

    fn features(&self, specs: &[ColumnSpec]) -> Vec<Feature> {
        specs
            .iter()
            .zip(&self.vocabs)
            .map(|(s, v)| match v {
                Some(v) => Feature::categorical(s.column.clone(), v.0.len().max(1)),
                None => Feature::numeric(s.column.clone()),
            })
            .collect()
    }
}

/// Loads purchases from `path`. The content tower sees the item id as a
/// categorical feature followed by the mapped item features.
pub fn load_interactions(
    path: &Path,
    map: &SchemaMap,
    options: CsvOptions,
    seed: u64,
) -> Result<InteractionSet> {
    let reader = csv::Reader::from_path(path)?;
    load_from_reader(reader, map, options, seed)
}

pub fn load_from_reader<R: std::io::Read>(
    mut reader: csv::Reader<R>,
    map: &SchemaMap,
    options: CsvOptions,
    seed: u64,
) -> Result<InteractionSet> {
    let headers = reader.headers()?.clone();
    let user_col = column_index(&headers, &map.user_id)?;
    let item_col = column_index(&headers, &map.item_id)?;
    let mut user_cols = Columns::new(&headers, &map.user_features)?;
    let mut item_cols = Columns::new(&headers, &map.item_features)?;

    let mut user_ids = Vocab(HashMap::new());
    let mut item_ids = Vocab(HashMap::new());
    let mut user_names: Vec<String> = Vec::new();
    let mut users: Vec<Vec<FeatureValue>> = Vec::new();
    let mut items: Vec<Vec<FeatureValue>> = Vec::new();
    let mut purchases: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();

    for rec in reader.records() {
        let rec = rec?;
        let u = user_ids.id(&rec[user_col]);
        let urow = user_cols.row(&rec, &map.user_features)?;
        if u == users.len() {
            users.push(urow);
            user_names.push(rec[user_col].to_string());
        }
        let i = item_ids.id(&rec[item_col]);
        if i >= options.max_items {
            return Err(Error::VocabularyOverflow {
                limit: options.max_items,
            });
        }
        let irow = item_cols.row(&rec, &map.item_features)?;
        if i == items.len() {
            let mut row = vec![FeatureValue::Categorical(i)];
            row.extend(irow);
            items.push(row);
        }
        purchases.entry(u).or_default().insert(i);
    }
    let n_items = items.len();
    if n_items == 0 {
        return Err(Error::InvalidArgument("no transactions in csv".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eligible: Vec<usize> = purchases
        .iter()
        .filter(|(_, p)| p.len() >= options.min_test_positives)
        .map(|(&u, _)| u)
        .collect();
    eligible.shuffle(&mut rng);
    eligible.truncate(options.n_test_users);
    eligible.sort_unstable();
    let test: BTreeSet<usize> = eligible.into_iter().collect();

    let mut train = Vec::new();
    for (&u, bought) in &purchases {
        if test.contains(&u) {
            continue;
        }
        let unseen: Vec<usize> = (0..n_items).filter(|i| !bought.contains(i)).collect();
        let n_neg = (options.nontransaction_ratio * bought.len() as f64).round() as usize;
        if n_neg > 0 && unseen.is_empty() {
            return Err(Error::NoNegativeAvailable {
                user: user_names[u].clone(),
            });
        }
        train.extend(bought.iter().map(|&item| Interaction {
            user: u,
            item,
            target: 1.0,
        }));
        for _ in 0..n_neg {
            let item = unseen[rng.random_range(0..unseen.len())];
            train.push(Interaction {
                user: u,
                item,
                target: 0.0,
            });
        }
    }

    let eval = test
        .iter()
        .map(|&u| EvalUser {
            row: FeatureRow(users[u].clone()),
            candidates: (0..n_items).collect(),
            relevance: (0..n_items).map(|i| purchases[&u].contains(&i)).collect(),
        })
        .collect();

    let mut content = vec![Feature::categorical(map.item_id.clone(), n_items)];
    content.extend(item_cols.features(&map.item_features));
    Ok(InteractionSet {
        user_schema: FeatureSchema::new(user_cols.features(&map.user_features))?,
        content_schema: FeatureSchema::new(content)?,
        users: users.into_iter().map(FeatureRow).collect(),
        items: items.into_iter().map(FeatureRow).collect(),
        train,
        eval,
    })
}
