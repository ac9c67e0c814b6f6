use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ftmamba::harness::train::batch_loss;
use ftmamba::params::ParamStore;
use ftmamba::tokenizer::{FeatureRow, FeatureTokenizer};
use ftmamba::two_tower::top_k;
use ftmamba::{DatasetSpec, EmbedderKind, Preset, RunConfig, TwoTowerModel};
use ftmamba_bench::{rng, spotify_data};

const BATCH: usize = 32;

fn tokenizer(c: &mut Criterion) {
    let data = spotify_data();
    let mut store = ParamStore::<f32>::new();
    let tok = FeatureTokenizer::new(
        &mut store,
        "user",
        data.user_schema.clone(),
        64,
        &mut rng(0),
    )
    .unwrap();
    let row = &data.users[0];
    c.bench_function("tokenize_row", |b| {
        b.iter(|| tok.tokenize(&store, black_box(row)).unwrap())
    });
}

fn training_step(c: &mut Criterion) {
    let data = spotify_data();
    let mut group = c.benchmark_group("batch_loss");
    for kind in [EmbedderKind::Mamba, EmbedderKind::Transformer] {
        let config =
            RunConfig::preset(Preset::Desk, DatasetSpec::Spotify(Default::default()), kind);
        let spec = config.tower_spec(data.user_schema.clone(), data.content_schema.clone());
        let model = TwoTowerModel::<f32>::new(spec, 0).unwrap();
        let users: Vec<&FeatureRow> = (0..BATCH).map(|i| data.train_user(i)).collect();
        let items: Vec<&FeatureRow> = (0..BATCH).map(|i| data.train_item(i)).collect();
        let targets: Vec<f64> = data.train[..BATCH].iter().map(|t| t.target).collect();
        group.bench_function(kind.label(), |b| {
            b.iter(|| batch_loss(&model, &users, &items, black_box(&targets)).unwrap())
        });
    }
    group.finish();
}

fn ranking(c: &mut Criterion) {
    let scores: Vec<f32> = (0..1000).map(|i| ((i * 7919) % 1000) as f32).collect();
    c.bench_function("top_k_10_of_1000", |b| {
        b.iter(|| top_k(black_box(&scores), 10).unwrap())
    });
}

criterion_group!(benches, tokenizer, training_step, ranking);
criterion_main!(benches);
