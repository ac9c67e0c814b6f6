//! Synthetic vaccine-messaging environment. Users and messages are clustered
//! independently with k-means; a user responds to a message (target 1) iff
//! both carry the same cluster label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::kmeans::kmeans;
use super::{standardize_columns, EvalUser, Interaction, InteractionSet};
use crate::error::{Error, Result};
use crate::tokenizer::{Feature, FeatureRow, FeatureSchema, FeatureValue};

/// Categorical demographics and their cardinalities.
pub const CATEGORICAL_FEATURES: [(&str, usize); 7] = [
    ("gender", 3),
    ("progression", 4),
    ("education", 5),
    ("insurance", 3),
    ("race", 6),
    ("language", 4),
    ("religion", 6),
];

pub const AGE_RANGE: (f64, f64) = (18.0, 90.0);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessagingConfig {
    pub clusters: usize,
    pub messages: usize,
    pub n_users: usize,
    pub n_train: usize,
    pub n_test_users: usize,
    pub message_dim: usize,
    /// Standard deviation of the latent message centers (noise is unit).
    pub center_scale: f64,
}

impl Default for MessagingConfig {
    fn default() -> Self {
        Self {
            clusters: 25,
            messages: 25,
            n_users: 50_000,
            n_train: 160_000,
            n_test_users: 100,
            message_dim: 32,
            center_scale: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MessagingEnv {
    pub config: MessagingConfig,
    pub users: Vec<FeatureRow>,
    pub user_cluster: Vec<usize>,
    pub message_vectors: Vec<Vec<f64>>,
    pub message_cluster: Vec<usize>,
}

impl MessagingEnv {
    pub fn new(config: MessagingConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.clusters == 0 || config.messages < 1 || config.n_users < config.clusters {
            return Err(Error::InvalidArgument(format!(
                "invalid messaging config {config:?}"
            )));
        }
        let mut ages: Vec<f64> = (0..config.n_users)
            .map(|_| rng.random_range(AGE_RANGE.0..AGE_RANGE.1))
            .collect();
        standardize_columns(&mut ages, 1);
        let users: Vec<FeatureRow> = ages
            .iter()
            .map(|&age| {
                let mut row = vec![FeatureValue::Numeric(age)];
                row.extend(
                    CATEGORICAL_FEATURES
                        .iter()
                        .map(|&(_, k)| FeatureValue::Categorical(rng.random_range(0..k))),
                );
                FeatureRow(row)
            })
            .collect();
        let encoded: Vec<Vec<f64>> = users.iter().map(one_hot).collect();
        let user_cluster = kmeans(&encoded, config.clusters, rng.random())?.assignments;

        let centers: Vec<Vec<f64>> = (0..config.clusters)
            .map(|_| {
                (0..config.message_dim)
                    .map(|_| config.center_scale * normal(rng))
                    .collect()
            })
            .collect();
        let message_vectors: Vec<Vec<f64>> = (0..config.messages)
            .map(|i| {
                centers[i % config.clusters]
                    .iter()
                    .map(|c| c + normal(rng))
                    .collect()
            })
            .collect();
        let message_cluster = if config.messages >= config.clusters {
            kmeans(&message_vectors, config.clusters, rng.random())?.assignments
        } else {
            // fewer messages than clusters: each message is its own cluster
            (0..config.messages).collect()
        };
        Ok(Self {
            config,
            users,
            user_cluster,
            message_vectors,
            message_cluster,
        })
    }

    pub fn user_schema(&self) -> FeatureSchema {
        let mut f = vec![Feature::numeric("age")];
        f.extend(
            CATEGORICAL_FEATURES
                .iter()
                .map(|&(n, k)| Feature::categorical(n, k)),
        );
        FeatureSchema { features: f }
    }

    pub fn content_schema(&self) -> FeatureSchema {
        FeatureSchema {
            features: vec![Feature::categorical("message", self.config.messages)],
        }
    }

    pub fn target(&self, user: usize, message: usize) -> f64 {
        if self.user_cluster[user] == self.message_cluster[message] {
            1.0
        } else {
            0.0
        }
    }

    /// Training pairs drawn with replacement; test users are redrawn until
    /// their cluster has at least one message.
    pub fn generate(&self, rng: &mut ChaCha8Rng) -> InteractionSet {
        let cfg = self.config;
        let train = (0..cfg.n_train)
            .map(|_| {
                let user = rng.random_range(0..cfg.n_users);
                let item = rng.random_range(0..cfg.messages);
                Interaction {
                    user,
                    item,
                    target: self.target(user, item),
                }
            })
            .collect();
        let mut eval = Vec::with_capacity(cfg.n_test_users);
        while eval.len() < cfg.n_test_users {
            let u = rng.random_range(0..cfg.n_users);
            let relevance: Vec<bool> = (0..cfg.messages)
                .map(|m| self.target(u, m) == 1.0)
                .collect();
            if relevance.iter().any(|&r| r) {
                eval.push(EvalUser {
                    row: self.users[u].clone(),
                    candidates: (0..cfg.messages).collect(),
                    relevance,
                });
            }
        }
        InteractionSet {
            user_schema: self.user_schema(),
            content_schema: self.content_schema(),
            users: self.users.clone(),
            items: (0..cfg.messages)
                .map(|i| FeatureRow(vec![FeatureValue::Categorical(i)]))
                .collect(),
            train,
            eval,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Standardized age followed by one-hot encodings of the categorical features.
fn one_hot(row: &FeatureRow) -> Vec<f64> {
    let mut v = vec![row.0[0].as_f64()];
    for (value, &(_, k)) in row.0[1..].iter().zip(&CATEGORICAL_FEATURES) {
        let idx = value.as_f64() as usize;
        v.extend((0..k).map(|i| if i == idx { 1.0 } else { 0.0 }));
    }
    v
}

pub fn generate(config: MessagingConfig, seed: u64) -> Result<(MessagingEnv, InteractionSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let env = MessagingEnv::new(config, &mut rng)?;
    let set = env.generate(&mut rng);
    Ok((env, set))
}
