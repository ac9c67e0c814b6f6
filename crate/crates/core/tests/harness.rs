use ftmamba::envs::messaging::{self, MessagingConfig};
use ftmamba::envs::spotify::{self, SpotifyConfig};
use ftmamba::envs::InteractionSet;
use ftmamba::harness::evaluate::candidate_scores;
use ftmamba::harness::reproduce::{reproduce, ReproduceOptions, ReproduceOutput};
use ftmamba::harness::{evaluate, train};
use ftmamba::metrics::UserRanking;
use ftmamba::two_tower::top_k;
use ftmamba::{DatasetSpec, EmbedderKind, EvalResult, Metric, Preset, RunConfig};

fn small_spotify() -> SpotifyConfig {
    SpotifyConfig {
        n_train: 4000,
        n_test_users: 20,
        probe_users: 2000,
        ..Default::default()
    }
}

fn spotify_run(kind: EmbedderKind) -> (RunConfig, InteractionSet) {
    let c = RunConfig::preset(Preset::Tiny, DatasetSpec::Spotify(small_spotify()), kind);
    let data = c.dataset.load(0).unwrap();
    (c, data)
}

fn window_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn zero_learning_rate_leaves_model_and_trajectory_flat() {
    for kind in [EmbedderKind::Mamba, EmbedderKind::Transformer] {
        let (mut c, data) = spotify_run(kind);
        c.lr = 0.0;
        c.steps = 20;
        c.eval_cadence = 5;
        let out = train::<f64>(&c, &data, 4).unwrap();
        let fresh = train::<f64>(
            &RunConfig {
                steps: 0,
                ..c.clone()
            },
            &data,
            4,
        )
        .unwrap();
        assert!(out
            .model
            .params
            .tensors()
            .zip(fresh.model.params.tensors())
            .all(|(a, b)| a == b));
        assert_eq!(out.trajectory.len(), 5);
        let first = out.trajectory[0];
        assert!(out
            .trajectory
            .iter()
            .all(|p| (p.hr1, p.hr5, p.hr10) == (first.hr1, first.hr5, first.hr10)));
    }
}

#[test]
fn single_cluster_loss_vanishes() {
    let cfg = MessagingConfig {
        clusters: 1,
        messages: 5,
        n_users: 300,
        n_train: 2000,
        n_test_users: 10,
        ..Default::default()
    };
    let mut c = RunConfig::preset(
        Preset::Tiny,
        DatasetSpec::Messaging(cfg),
        EmbedderKind::Mamba,
    );
    c.lr = 1e-3;
    c.steps = 300;
    let data = c.dataset.load(0).unwrap();
    assert!(data.train.iter().all(|i| i.target == 1.0));
    let out = train::<f32>(&c, &data, 0).unwrap();
    let (head, tail) = (
        window_mean(&out.losses[..10]),
        window_mean(&out.losses[290..]),
    );
    assert!(tail < 1e-3 && tail < 0.01 * head, "{head} -> {tail}");
}

#[test]
fn tiny_spotify_loss_descends_on_every_seed() {
    let mut c = RunConfig::preset(
        Preset::Tiny,
        DatasetSpec::Spotify(small_spotify()),
        EmbedderKind::Mamba,
    );
    c.steps = 500;
    c.eval_cadence = 0;
    for seed in 0..5 {
        let data = c.dataset.load(seed).unwrap();
        let out = train::<f32>(&c, &data, seed).unwrap();
        let (head, tail) = (
            window_mean(&out.losses[..50]),
            window_mean(&out.losses[450..]),
        );
        assert!(tail < head, "seed {seed}: {head} -> {tail}");
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let (mut c, data) = spotify_run(EmbedderKind::Mamba);
    c.steps = 30;
    c.eval_cadence = 10;
    let a = train::<f32>(&c, &data, 7).unwrap();
    let b = train::<f32>(&c, &data, 7).unwrap();
    let other = train::<f32>(&c, &data, 8).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.trajectory, b.trajectory);
    assert!(a
        .model
        .params
        .tensors()
        .zip(b.model.params.tensors())
        .all(|(x, y)| x == y));
    assert_ne!(a.losses, other.losses);
}

#[test]
fn relevance_as_score_hits_at_one() {
    let data = spotify::generate(small_spotify(), 5).unwrap().1;
    let users: Vec<UserRanking> = data
        .eval
        .iter()
        .map(|u| {
            let scores: Vec<f64> = u
                .relevance
                .iter()
                .map(|&r| if r { 1.0 } else { 0.0 })
                .collect();
            UserRanking {
                ranked: top_k(&scores, scores.len()).unwrap(),
                relevant: u.relevant(),
            }
        })
        .collect();
    let r = EvalResult::from_rankings(users, &[1, 5], 0);
    assert_eq!(r.get(Metric::HitRatio, 1), Some(1.0));
    assert_eq!(r.get(Metric::Precision, 1), Some(1.0));
    assert_eq!(r.get(Metric::Mrr, 5), Some(1.0));
}

/// Metrics straight from their definitions on explicitly sorted candidates.
fn oracle(scores: &[f64], relevance: &[bool], metric: Metric, k: usize) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let top = &order[..k.min(order.len())];
    let hits = top.iter().filter(|&&i| relevance[i]).count() as f64;
    let n_rel = relevance.iter().filter(|&&r| r).count() as f64;
    match metric {
        Metric::Precision => Some(hits / k as f64),
        Metric::Recall => (n_rel > 0.0).then(|| hits / n_rel),
        Metric::HitRatio => Some(if hits > 0.0 { 1.0 } else { 0.0 }),
        Metric::Mrr => Some(
            top.iter()
                .position(|&i| relevance[i])
                .map_or(0.0, |p| 1.0 / (p + 1) as f64),
        ),
        _ => None,
    }
}

#[test]
fn five_user_evaluation_matches_definitions() {
    for kind in [EmbedderKind::Mamba, EmbedderKind::Transformer] {
        let (c, mut data) = spotify_run(kind);
        data.eval.truncate(5);
        let out = train::<f64>(
            &RunConfig {
                steps: 40,
                ..c.clone()
            },
            &data,
            1,
        )
        .unwrap();
        let ks = [1, 5, 10];
        let r = evaluate(&out.model, &data, &ks, 1).unwrap();
        let scores = candidate_scores(&out.model, &data).unwrap();
        for metric in [
            Metric::Precision,
            Metric::Recall,
            Metric::HitRatio,
            Metric::Mrr,
        ] {
            for k in ks {
                let vals: Vec<f64> = scores
                    .iter()
                    .zip(&data.eval)
                    .filter_map(|(s, u)| oracle(s, &u.relevance, metric, k))
                    .collect();
                let expected = window_mean(&vals);
                let got = r.get(metric, k).unwrap();
                assert!(
                    (got - expected).abs() < 1e-12,
                    "{metric:?}@{k}: {got} vs {expected}"
                );
            }
        }
    }
}

#[test]
fn evaluation_rejects_foreign_schema() {
    let (c, data) = spotify_run(EmbedderKind::Mamba);
    let model = train::<f32>(&RunConfig { steps: 1, ..c }, &data, 0)
        .unwrap()
        .model;
    let other = messaging::generate(
        MessagingConfig {
            n_users: 100,
            n_train: 10,
            n_test_users: 3,
            clusters: 2,
            messages: 4,
            ..Default::default()
        },
        0,
    )
    .unwrap()
    .1;
    assert!(evaluate(&model, &other, &[1], 0).is_err());
}

fn read_csv(path: &std::path::Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|x| x.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

#[test]
fn reproduce_writes_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let options = ReproduceOptions {
        preset: Preset::Tiny,
        seeds: Some(vec![0, 1]),
        steps: Some(10),
        out_dir: dir.path().to_path_buf(),
        ..Default::default()
    };
    for name in ["spotify", "messaging-25x25"] {
        let ReproduceOutput::Models(runs) = reproduce(name, &options).unwrap() else {
            panic!("{name} is not a model experiment")
        };
        assert_eq!(runs.len(), 2);
        let out = dir.path().join(name);
        let (header, rows) = read_csv(&out.join("table.csv"));
        assert_eq!(&header[..2], ["format_version", "model"]);
        assert_eq!(header.len() - 2, 9);
        assert_eq!(
            rows.iter().map(|r| r[1].as_str()).collect::<Vec<_>>(),
            ["Mamba", "Transformer"]
        );
        let (header, rows) = read_csv(&out.join("trajectory.csv"));
        assert_eq!(
            header,
            [
                "format_version",
                "model",
                "seed",
                "step",
                "HR@1",
                "HR@5",
                "HR@10"
            ]
        );
        assert!(!rows.is_empty());
        let (header, rows) = read_csv(&out.join("metrics.csv"));
        assert_eq!(
            header,
            ["format_version", "model", "seed", "metric", "k", "value"]
        );
        assert!(rows.iter().all(|r| r[0] == "1"));
        for file in [
            "summary.json",
            "diff_profile.csv",
            "config.Mamba.json",
            "config.Transformer.json",
        ] {
            assert!(out.join(file).is_file(), "{name}/{file}");
        }
        let summary: serde_json::Value =
            serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
        assert!(summary.get("format_version").is_some());
    }
}
