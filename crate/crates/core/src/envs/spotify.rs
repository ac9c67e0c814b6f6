//! Synthetic music environment. Users are binary genre vectors `u`; song
//! preference is `p(u) = u·G·Sᵀ`, thresholded into dislike / neutral / like.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EvalUser, Interaction, InteractionSet};
use crate::error::{Error, Result};
use crate::tokenizer::{Feature, FeatureRow, FeatureSchema, FeatureValue};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpotifyConfig {
    pub genres: usize,
    pub songs: usize,
    pub attributes: usize,
    pub n_train: usize,
    pub n_test_users: usize,
    pub probe_users: usize,
    /// Percentiles of the probe preferences used as the dislike and like cut-offs.
    pub low_percentile: f64,
    pub high_percentile: f64,
}

impl Default for SpotifyConfig {
    fn default() -> Self {
        Self {
            genres: 20,
            songs: 50,
            attributes: 10,
            n_train: 160_000,
            n_test_users: 100,
            probe_users: 10_000,
            low_percentile: 0.5,
            high_percentile: 0.8,
        }
    }
}

/// Generated attribute matrices and thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct SpotifyEnv {
    pub config: SpotifyConfig,
    /// `[genres, attributes]`, row-major.
    pub g: Vec<f64>,
    /// `[songs, attributes]`, row-major.
    pub s: Vec<f64>,
    pub theta_lo: f64,
    pub theta_hi: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn random_user(genres: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..genres)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
        .collect()
}

impl SpotifyEnv {
    /// Draws `G` and `S` uniform(0, 1), then calibrates thresholds on a probe
    /// population.
    pub fn new(config: SpotifyConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if !(0.0 <= config.low_percentile
            && config.low_percentile < config.high_percentile
            && config.high_percentile <= 1.0)
        {
            return Err(Error::InvalidArgument(
                "percentiles must satisfy 0 <= low < high <= 1".into(),
            ));
        }
        if config.genres == 0
            || config.songs == 0
            || config.attributes == 0
            || config.probe_users == 0
        {
            return Err(Error::InvalidArgument(format!(
                "degenerate spotify config {config:?}"
            )));
        }
        let g: Vec<f64> = (0..config.genres * config.attributes)
            .map(|_| rng.random())
            .collect();
        let s: Vec<f64> = (0..config.songs * config.attributes)
            .map(|_| rng.random())
            .collect();
        Self::from_matrices(config, g, s, rng)
    }

    pub fn from_matrices(
        config: SpotifyConfig,
        g: Vec<f64>,
        s: Vec<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut env = Self {
            config,
            g,
            s,
            theta_lo: 0.0,
            theta_hi: 0.0,
        };
        let mut probe: Vec<f64> = (0..config.probe_users)
            .flat_map(|_| env.preferences(&random_user(config.genres, rng)))
            .collect();
        probe.sort_by(f64::total_cmp);
        env.theta_lo = percentile(&probe, config.low_percentile);
        env.theta_hi = percentile(&probe, config.high_percentile);
        Ok(env)
    }

    /// `p(u) = u·G·Sᵀ`, one value per song.
    pub fn preferences(&self, u: &[f64]) -> Vec<f64> {
        let a = self.config.attributes;
        let taste: Vec<f64> = (0..a)
            .map(|j| {
                u.iter()
                    .enumerate()
                    .map(|(gi, &ug)| ug * self.g[gi * a + j])
                    .sum()
            })
            .collect();
        self.s
            .chunks(a)
            .map(|song| song.iter().zip(&taste).map(|(x, t)| x * t).sum())
            .collect()
    }

    pub fn sentiment(&self, p: f64) -> f64 {
        if p > self.theta_hi {
            1.0
        } else if p < self.theta_lo {
            -1.0
        } else {
            0.0
        }
    }

    pub fn user_schema(&self) -> FeatureSchema {
        FeatureSchema {
            features: (0..self.config.genres)
                .map(|i| Feature::numeric(format!("genre{i}")))
                .collect(),
        }
    }

    pub fn content_schema(&self) -> FeatureSchema {
        FeatureSchema {
            features: vec![Feature::categorical("song", self.config.songs)],
        }
    }

    /// Training triples over fresh random users and uniformly chosen songs;
    /// evaluation users each have at least one liked song.
    pub fn generate(&self, rng: &mut ChaCha8Rng) -> InteractionSet {
        let cfg = self.config;
        let to_row = |u: &[f64]| FeatureRow(u.iter().map(|&v| FeatureValue::Numeric(v)).collect());
        let mut users = Vec::with_capacity(cfg.n_train);
        let mut train = Vec::with_capacity(cfg.n_train);
        for i in 0..cfg.n_train {
            let u = random_user(cfg.genres, rng);
            let song = rng.random_range(0..cfg.songs);
            let target = self.sentiment(self.preferences(&u)[song]);
            users.push(to_row(&u));
            train.push(Interaction {
                user: i,
                item: song,
                target,
            });
        }
        let mut eval = Vec::with_capacity(cfg.n_test_users);
        while eval.len() < cfg.n_test_users {
            let u = random_user(cfg.genres, rng);
            let relevance: Vec<bool> = self
                .preferences(&u)
                .iter()
                .map(|&p| self.sentiment(p) == 1.0)
                .collect();
            if relevance.iter().any(|&r| r) {
                eval.push(EvalUser {
                    row: to_row(&u),
                    candidates: (0..cfg.songs).collect(),
                    relevance,
                });
            }
        }
        InteractionSet {
            user_schema: self.user_schema(),
            content_schema: self.content_schema(),
            users,
            items: (0..cfg.songs)
                .map(|i| FeatureRow(vec![FeatureValue::Categorical(i)]))
                .collect(),
            train,
            eval,
        }
    }
}

/// Builds the environment and dataset from one seed.
pub fn generate(config: SpotifyConfig, seed: u64) -> Result<(SpotifyEnv, InteractionSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let env = SpotifyEnv::new(config, &mut rng)?;
    let set = env.generate(&mut rng);
    Ok((env, set))
}
