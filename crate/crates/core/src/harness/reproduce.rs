use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bench::{benchmark_all, write_benchmark_csv, BenchOptions, BenchmarkReport};
use super::config::{DatasetSpec, Preset, RunConfig};
use super::evaluate::{evaluate, seed_likes};
use super::train::{train, TrainOutcome, TrajectoryPoint};
use crate::envs::messaging::MessagingConfig;
use crate::envs::spotify::SpotifyConfig;
use crate::error::{Error, Result};
use crate::layers::EmbedderKind;
use crate::metrics::{
    diff_profile, summary_report, write_diff_profile_csv, write_metrics_csv, DiffProfile,
    EvalResult, Metric, SeedLikes, REPORT_FORMAT_VERSION,
};

pub const EXPERIMENTS: [&str; 8] = [
    "spotify",
    "messaging-25x25",
    "messaging-25x50",
    "messaging-25x100",
    "messaging-50x50",
    "messaging-50x100",
    "messaging-100x100",
    "scaling",
];

/// Columns of the results table, in order.
pub const TABLE_COLUMNS: [(Metric, usize); 9] = [
    (Metric::Precision, 5),
    (Metric::Precision, 10),
    (Metric::Recall, 5),
    (Metric::Recall, 10),
    (Metric::Mrr, 5),
    (Metric::Mrr, 10),
    (Metric::HitRatio, 1),
    (Metric::HitRatio, 5),
    (Metric::HitRatio, 10),
];

/// Dataset of a named experiment; `None` for the timing experiment.
pub fn experiment_dataset(name: &str) -> Result<Option<DatasetSpec>> {
    if name == "spotify" {
        return Ok(Some(DatasetSpec::Spotify(SpotifyConfig::default())));
    }
    if name == "scaling" {
        return Ok(None);
    }
    let parsed = name.strip_prefix("messaging-").and_then(|s| {
        let (k, m) = s.split_once('x')?;
        Some((k.parse::<usize>().ok()?, m.parse::<usize>().ok()?))
    });
    match parsed {
        Some((clusters, messages)) if EXPERIMENTS.contains(&name) => {
            Ok(Some(DatasetSpec::Messaging(MessagingConfig {
                clusters,
                messages,
                ..MessagingConfig::default()
            })))
        }
        _ => Err(Error::UnknownExperiment(name.to_string())),
    }
}

/// One trained and evaluated seed.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub outcome: TrainOutcome<f32>,
    pub result: EvalResult,
    pub likes: SeedLikes,
}

pub fn run_seed(config: &RunConfig, seed: u64) -> Result<SeedRun> {
    let data = config.dataset.load(seed)?;
    let outcome = train::<f32>(config, &data, seed)?;
    let result = evaluate(&outcome.model, &data, &config.ks, seed)?;
    let likes = seed_likes(&result, &data);
    Ok(SeedRun {
        outcome,
        result,
        likes,
    })
}

/// Every seed of one configuration, with the models dropped.
#[derive(Clone, Debug)]
pub struct ModelRun {
    pub name: String,
    pub config: RunConfig,
    pub results: Vec<EvalResult>,
    pub trajectories: Vec<(u64, Vec<TrajectoryPoint>)>,
    pub likes: Vec<SeedLikes>,
}

impl ModelRun {
    pub fn new(name: impl Into<String>, config: RunConfig) -> Self {
        Self {
            name: name.into(),
            config,
            results: Vec::new(),
            trajectories: Vec::new(),
            likes: Vec::new(),
        }
    }

    pub fn push(&mut self, seed: u64, run: SeedRun) {
        self.trajectories.push((seed, run.outcome.trajectory));
        self.results.push(run.result);
        self.likes.push(run.likes);
    }

    pub fn diff_profile(&self) -> Result<DiffProfile> {
        diff_profile(&self.likes)
    }

    /// Seed-mean of one metric.
    pub fn mean(&self, metric: Metric, k: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .results
            .iter()
            .filter_map(|r| r.get(metric, k))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn run_model(name: &str, config: &RunConfig) -> Result<ModelRun> {
    let mut run = ModelRun::new(name, config.clone());
    for &seed in &config.seeds {
        run.push(seed, run_seed(config, seed)?);
    }
    Ok(run)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(
        fs::File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_table_csv<W: std::io::Write>(out: W, runs: &[ModelRun]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["format_version".to_string(), "model".to_string()];
    header.extend(
        TABLE_COLUMNS
            .iter()
            .map(|(m, k)| format!("{}@{k}", m.label())),
    );
    w.write_record(&header)?;
    for r in runs {
        let mut row = vec![REPORT_FORMAT_VERSION.to_string(), r.name.clone()];
        row.extend(TABLE_COLUMNS.iter().map(|&(m, k)| {
            r.mean(m, k)
                .map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
        }));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn write_trajectory_csv<W: std::io::Write>(out: W, runs: &[ModelRun]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "format_version",
        "model",
        "seed",
        "step",
        "HR@1",
        "HR@5",
        "HR@10",
    ])?;
    for r in runs {
        for (seed, points) in &r.trajectories {
            for p in points {
                w.write_record([
                    REPORT_FORMAT_VERSION.to_string(),
                    r.name.clone(),
                    seed.to_string(),
                    p.step.to_string(),
                    format!("{:.6}", p.hr1),
                    format!("{:.6}", p.hr5),
                    format!("{:.6}", p.hr10),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

/// Writes `metrics.csv`, `table.csv`, `summary.json`, `trajectory.csv`,
/// `diff_profile.csv` and one `config.<model>.json` per run.
pub fn write_model_runs(dir: &Path, runs: &[ModelRun]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let results: Vec<(String, Vec<EvalResult>)> = runs
        .iter()
        .map(|r| (r.name.clone(), r.results.clone()))
        .collect();
    write_metrics_csv(create(&dir.join("metrics.csv"))?, &results)?;
    write_table_csv(create(&dir.join("table.csv"))?, runs)?;
    write_json(&dir.join("summary.json"), &summary_report(&results))?;
    write_trajectory_csv(create(&dir.join("trajectory.csv"))?, runs)?;
    let profiles = runs
        .iter()
        .filter(|r| !r.likes.is_empty())
        .map(|r| Ok((r.name.clone(), r.diff_profile()?)))
        .collect::<Result<Vec<_>>>()?;
    write_diff_profile_csv(create(&dir.join("diff_profile.csv"))?, &profiles)?;
    for r in runs {
        write_json(&dir.join(format!("config.{}.json", r.name)), &r.config)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproduceOptions {
    pub preset: Preset,
    /// Overrides the preset's seed list.
    pub seeds: Option<Vec<u64>>,
    /// Overrides the preset's step count.
    pub steps: Option<usize>,
    pub embedders: Vec<EmbedderKind>,
    /// Model and training settings used instead of the preset.
    pub base: Option<RunConfig>,
    pub bench: BenchOptions,
    pub out_dir: PathBuf,
}

impl Default for ReproduceOptions {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            seeds: None,
            steps: None,
            embedders: vec![EmbedderKind::Mamba, EmbedderKind::Transformer],
            base: None,
            bench: BenchOptions::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ReproduceOptions {
    pub fn run_config(
        &self,
        dataset: DatasetSpec,
        embedder: EmbedderKind,
        out_dir: &Path,
    ) -> RunConfig {
        let mut c = match &self.base {
            Some(b) => RunConfig {
                dataset,
                embedder,
                ..b.clone()
            },
            None => RunConfig::preset(self.preset, dataset, embedder),
        };
        if let Some(s) = &self.seeds {
            c.seeds = s.clone();
        }
        if let Some(s) = self.steps {
            c.steps = s;
        }
        c.out_dir = out_dir.to_path_buf();
        c
    }
}

#[derive(Clone, Debug)]
pub enum ReproduceOutput {
    Models(Vec<ModelRun>),
    Benchmark(BenchmarkReport),
}

/// Runs a named experiment and writes its outputs under `out_dir/<name>`.
pub fn reproduce(name: &str, options: &ReproduceOptions) -> Result<ReproduceOutput> {
    let dir = options.out_dir.join(name);
    match experiment_dataset(name)? {
        None => {
            let report = benchmark_all(&options.bench)?;
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_benchmark_csv(create(&dir.join("benchmark.csv"))?, &report)?;
            write_json(&dir.join("benchmark.json"), &report)?;
            Ok(ReproduceOutput::Benchmark(report))
        }
        Some(dataset) => {
            let runs = options
                .embedders
                .iter()
                .map(|&kind| {
                    run_model(
                        kind.label(),
                        &options.run_config(dataset.clone(), kind, &dir),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            write_model_runs(&dir, &runs)?;
            Ok(ReproduceOutput::Models(runs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_names() {
        for name in EXPERIMENTS {
            assert!(experiment_dataset(name).is_ok(), "{name}");
        }
        match experiment_dataset("messaging-50x100").unwrap() {
            Some(DatasetSpec::Messaging(c)) => assert_eq!((c.clusters, c.messages), (50, 100)),
            other => panic!("{other:?}"),
        }
        assert!(experiment_dataset("scaling").unwrap().is_none());
        assert!(matches!(
            experiment_dataset("messaging-7x7"),
            Err(Error::UnknownExperiment(_))
        ));
        assert!(experiment_dataset("cifar").is_err());
    }
}
