use std::path::PathBuf;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::csv_loader::{self, CsvOptions, SchemaMap};
use crate::envs::messaging::{self, MessagingConfig};
use crate::envs::spotify::{self, SpotifyConfig};
use crate::envs::InteractionSet;
use crate::error::{Error, Result};
use crate::layers::{EmbedderConfig, EmbedderKind, MambaConfig, TransformerConfig};
use crate::metrics::DEFAULT_KS;
use crate::tokenizer::FeatureSchema;
use crate::two_tower::{HeadConfig, TowerSpec};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Spotify(SpotifyConfig),
    Messaging(MessagingConfig),
    Csv {
        path: PathBuf,
        schema: SchemaMap,
        #[serde(default)]
        options: CsvOptions,
    },
    /// A directory written by `gen-data`.
    Dir {
        path: PathBuf,
    },
}

impl DatasetSpec {
    /// Builds the interaction set for one run seed.
    pub fn load(&self, seed: u64) -> Result<InteractionSet> {
        let data_seed = sub_seed(seed, Stream::Data);
        match self {
            DatasetSpec::Spotify(c) => Ok(spotify::generate(*c, data_seed)?.1),
            DatasetSpec::Messaging(c) => Ok(messaging::generate(*c, data_seed)?.1),
            DatasetSpec::Csv {
                path,
                schema,
                options,
            } => csv_loader::load_interactions(path, schema, *options, data_seed),
            DatasetSpec::Dir { path } => InteractionSet::read(path),
        }
    }

    /// Learning rate the experiments use for this kind of data.
    pub fn default_lr(&self) -> f64 {
        match self {
            DatasetSpec::Messaging(_) => 1e-5,
            _ => 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Token size 192, four Mamba / two Transformer layers, 5,000 steps.
    Full,
    /// Token size 64, two Mamba / one Transformer layer, 2,000 steps, 5 seeds.
    Desk,
    /// Seconds-scale smoke configuration.
    Tiny,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            "tiny" => Ok(Preset::Tiny),
            other => Err(Error::InvalidArgument(format!("unknown preset {other:?}"))),
        }
    }
}

/// Everything that determines a run. Serialized next to every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub format_version: u32,
    pub dataset: DatasetSpec,
    pub embedder: EmbedderKind,
    pub d: usize,
    pub mamba: MambaConfig,
    pub transformer: TransformerConfig,
    pub head: HeadConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub seeds: Vec<u64>,
    /// Steps between trajectory evaluations; 0 disables them.
    pub eval_cadence: usize,
    pub ks: Vec<usize>,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn preset(preset: Preset, dataset: DatasetSpec, embedder: EmbedderKind) -> Self {
        let lr = dataset.default_lr();
        let base = Self {
            format_version: CONFIG_FORMAT_VERSION,
            dataset,
            embedder,
            d: 192,
            mamba: MambaConfig::default(),
            transformer: TransformerConfig::default(),
            head: HeadConfig::default(),
            batch_size: 32,
            steps: 5000,
            lr,
            seeds: (0..100).collect(),
            eval_cadence: 250,
            ks: DEFAULT_KS.to_vec(),
            out_dir: PathBuf::from("out"),
        };
        match preset {
            Preset::Full => base,
            Preset::Desk => Self {
                d: 64,
                mamba: MambaConfig {
                    layers: 2,
                    ..base.mamba
                },
                transformer: TransformerConfig {
                    layers: 1,
                    ..base.transformer
                },
                steps: 2000,
                seeds: (0..5).collect(),
                ..base
            },
            Preset::Tiny => Self {
                d: 16,
                mamba: MambaConfig {
                    layers: 1,
                    conv_width: 4,
                    state_size: 4,
                    ..base.mamba
                },
                transformer: TransformerConfig {
                    layers: 1,
                    ffn_width: 32,
                    ..base.transformer
                },
                head: HeadConfig { hidden: 16, out: 8 },
                steps: 100,
                seeds: (0..2).collect(),
                eval_cadence: 50,
                ..base
            },
        }
    }

    pub fn embedder_config(&self) -> EmbedderConfig {
        match self.embedder {
            EmbedderKind::Mamba => EmbedderConfig::Mamba(self.mamba),
            EmbedderKind::Transformer => EmbedderConfig::Transformer(self.transformer),
        }
    }

    pub fn tower_spec(
        &self,
        user_schema: FeatureSchema,
        content_schema: FeatureSchema,
    ) -> TowerSpec {
        TowerSpec {
            user_schema,
            content_schema,
            d: self.d,
            embedder: self.embedder_config(),
            head: self.head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: self.format_version,
                expected: CONFIG_FORMAT_VERSION,
            });
        }
        if self.d == 0 || self.batch_size == 0 || self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::InvalidArgument(
                "d, batch size and every k must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "invalid learning rate {}",
                self.lr
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }
}

/// Independent random streams derived from one run seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Data = 0,
    Model = 1,
    Batches = 2,
}

pub fn sub_seed(seed: u64, stream: Stream) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64 + 1);
    rng.next_u64()
}
