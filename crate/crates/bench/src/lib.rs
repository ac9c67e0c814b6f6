//! Fixtures shared by the criterion benches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ftmamba::envs::spotify::{self, SpotifyConfig};
use ftmamba::envs::InteractionSet;
use ftmamba::layers::EmbedderStack;
use ftmamba::params::ParamStore;
use ftmamba::{EmbedderConfig, EmbedderKind, MambaConfig, Tensor, TransformerConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A single default-sized layer of either kind at width `d`.
pub fn layer(kind: EmbedderKind, d: usize) -> (ParamStore<f32>, EmbedderStack) {
    let config = match kind {
        EmbedderKind::Mamba => EmbedderConfig::Mamba(MambaConfig {
            layers: 1,
            ..MambaConfig::default()
        }),
        EmbedderKind::Transformer => EmbedderConfig::Transformer(TransformerConfig {
            layers: 1,
            ..TransformerConfig::default()
        }),
    };
    let mut store = ParamStore::new();
    let stack = EmbedderStack::new(&mut store, "bench", d, config, &mut rng(0))
        .expect("valid layer config");
    (store, stack)
}

pub fn tokens(len: usize, d: usize) -> Tensor<f32> {
    Tensor::uniform([len, d], -1.0, 1.0, &mut rng(1))
}

/// A small music dataset for tokenizer and training-step benches.
pub fn spotify_data() -> InteractionSet {
    let config = SpotifyConfig {
        n_train: 2_000,
        n_test_users: 20,
        probe_users: 1_000,
        ..SpotifyConfig::default()
    };
    spotify::generate(config, 0).expect("valid config").1
}
