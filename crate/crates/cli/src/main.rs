use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ftmamba::harness::bench::{benchmark_all, write_benchmark_csv, BenchOptions, BenchmarkReport};
use ftmamba::harness::evaluate;
use ftmamba::harness::reproduce::{
    experiment_dataset, reproduce, run_seed, write_model_runs, ModelRun, ReproduceOptions,
    ReproduceOutput, EXPERIMENTS, TABLE_COLUMNS,
};
use ftmamba::metrics::write_metrics_csv;
use ftmamba::{DatasetSpec, EmbedderKind, EvalResult, Preset, RunConfig, TwoTowerModel};

const OUTPUT_FORMAT_VERSION: u32 = 1;

#[derive(Parser)]
#[command(
    name = "ftmamba",
    version,
    about = "Feature-tokenized Mamba two-tower recommender"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into a directory.
    GenData(GenDataArgs),
    /// Train one configuration over its seeds, saving checkpoints and reports.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint.
    Evaluate(EvaluateArgs),
    /// Time one Mamba and one Transformer layer across sequence lengths.
    Benchmark(BenchArgs),
    /// Run a named experiment, or `all`, comparing both embedders.
    Reproduce(ReproduceArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Named dataset: `spotify` or `messaging-<clusters>x<messages>`.
    #[arg(long)]
    dataset: Option<String>,
    /// Directory written by `gen-data`.
    #[arg(long, conflicts_with = "dataset")]
    data_dir: Option<PathBuf>,
    /// Training interactions for a synthetic dataset.
    #[arg(long)]
    n_train: Option<usize>,
    /// Evaluation users for a synthetic dataset.
    #[arg(long)]
    n_test_users: Option<usize>,
}

impl DataArgs {
    fn spec(&self) -> Result<Option<DatasetSpec>> {
        let mut spec = match (&self.dataset, &self.data_dir) {
            (Some(name), _) => match experiment_dataset(name)? {
                Some(s) => s,
                None => bail!("{name} has no dataset"),
            },
            (None, Some(path)) => DatasetSpec::Dir { path: path.clone() },
            (None, None) => return Ok(None),
        };
        self.apply_sizes(&mut spec)?;
        Ok(Some(spec))
    }

    fn apply_sizes(&self, spec: &mut DatasetSpec) -> Result<()> {
        if self.n_train.is_none() && self.n_test_users.is_none() {
            return Ok(());
        }
        let (n_train, n_test) = match spec {
            DatasetSpec::Spotify(c) => (&mut c.n_train, &mut c.n_test_users),
            DatasetSpec::Messaging(c) => (&mut c.n_train, &mut c.n_test_users),
            _ => bail!("--n-train and --n-test-users apply to synthetic datasets only"),
        };
        *n_train = self.n_train.unwrap_or(*n_train);
        *n_test = self.n_test_users.unwrap_or(*n_test);
        Ok(())
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Run configuration JSON whose dataset is generated.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Starting configuration: full, desk or tiny.
    #[arg(long, default_value = "desk")]
    preset: Preset,
    /// Run configuration JSON; replaces the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// mamba or transformer.
    #[arg(long)]
    embedder: Option<EmbedderKind>,
    /// Token size.
    #[arg(long)]
    d: Option<usize>,
    /// Layers of the selected embedder.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    state_size: Option<usize>,
    #[arg(long)]
    conv_width: Option<usize>,
    #[arg(long)]
    expand: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn_width: Option<usize>,
    #[arg(long)]
    head_hidden: Option<usize>,
    #[arg(long)]
    head_out: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eval_cadence: Option<usize>,
    /// Cut-offs, comma separated.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Seeds, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
    seeds: Option<Vec<u64>>,
    /// Single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl TrainArgs {
    /// Preset or JSON configuration with the explicit flags applied on top.
    fn resolve(&self) -> Result<RunConfig> {
        let dataset = self.data.spec()?;
        let mut c = match &self.config {
            Some(path) => {
                let mut c = read_config(path)?;
                if let Some(d) = dataset {
                    c.dataset = d;
                }
                c
            }
            None => {
                let d = match dataset {
                    Some(d) => d,
                    None => experiment_dataset("spotify")?.context("spotify dataset")?,
                };
                RunConfig::preset(self.preset, d, self.embedder.unwrap_or(EmbedderKind::Mamba))
            }
        };
        if self.config.is_some() && self.data.dataset.is_none() && self.data.data_dir.is_none() {
            self.data.apply_sizes(&mut c.dataset)?;
        }
        if let Some(e) = self.embedder {
            c.embedder = e;
        }
        set(&mut c.d, self.d);
        match c.embedder {
            EmbedderKind::Mamba => set(&mut c.mamba.layers, self.layers),
            EmbedderKind::Transformer => set(&mut c.transformer.layers, self.layers),
        }
        set(&mut c.mamba.state_size, self.state_size);
        set(&mut c.mamba.conv_width, self.conv_width);
        set(&mut c.mamba.expand, self.expand);
        set(&mut c.transformer.heads, self.heads);
        set(&mut c.transformer.ffn_width, self.ffn_width);
        set(&mut c.head.hidden, self.head_hidden);
        set(&mut c.head.out, self.head_out);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.steps, self.steps);
        set(&mut c.lr, self.lr);
        set(&mut c.eval_cadence, self.eval_cadence);
        set(&mut c.ks, self.ks.clone());
        set(
            &mut c.seeds,
            self.seeds.clone().or(self.seed.map(|s| vec![s])),
        );
        set(&mut c.out_dir, self.out_dir.clone());
        c.validate()?;
        Ok(c)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; defaults to regenerating the training data.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Data seed when regenerating; defaults to the training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 192)]
    d: usize,
    /// Sequence lengths, comma separated and increasing.
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out/scaling")]
    out_dir: PathBuf,
}

impl BenchArgs {
    fn options(&self) -> BenchOptions {
        let mut o = BenchOptions {
            d: self.d,
            trials: self.trials,
            warmup: self.warmup,
            seed: self.seed,
            ..BenchOptions::default()
        };
        set(&mut o.lengths, self.lengths.clone());
        o
    }
}

#[derive(Args)]
struct ReproduceArgs {
    /// Experiment name or `all`.
    experiment: String,
    #[arg(long, default_value = "desk")]
    preset: Preset,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    steps: Option<usize>,
    /// Embedders to compare, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "mamba,transformer")]
    embedders: Vec<EmbedderKind>,
    /// Run configuration JSON supplying the model and training settings;
    /// dataset and embedder still come from the experiment.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[command(flatten)]
    bench: BenchFlags,
}

/// Timing settings used by the `scaling` experiment.
#[derive(Args)]
struct BenchFlags {
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format_version: u32,
    seed: u64,
    dataset: DatasetSpec,
}

#[derive(Serialize, Deserialize)]
struct CheckpointInfo {
    run: RunConfig,
    seed: u64,
}

#[derive(Serialize)]
struct EvaluationReport<'a> {
    format_version: u32,
    checkpoint: &'a Path,
    data_seed: u64,
    result: &'a EvalResult,
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    RunConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let spec = match (&args.config, args.data.spec()?) {
        (_, Some(s)) => s,
        (Some(path), None) => {
            let mut s = read_config(path)?.dataset;
            args.data.apply_sizes(&mut s)?;
            s
        }
        (None, None) => bail!("pass --dataset or --config"),
    };
    let data = spec.load(args.seed)?;
    data.write(&args.out_dir)?;
    write_json(
        &args.out_dir.join("dataset.json"),
        &DatasetManifest {
            format_version: OUTPUT_FORMAT_VERSION,
            seed: args.seed,
            dataset: spec,
        },
    )?;
    println!(
        "wrote {} training interactions and {} evaluation users to {}",
        data.train.len(),
        data.eval.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn print_table(runs: &[ModelRun]) {
    let header: Vec<String> = TABLE_COLUMNS
        .iter()
        .map(|(m, k)| format!("{}@{k}", m.label()))
        .collect();
    println!(
        "{:<12} {}",
        "model",
        header.iter().map(|h| format!("{h:>7}")).collect::<String>()
    );
    for r in runs {
        let cells: String = TABLE_COLUMNS
            .iter()
            .map(|&(m, k)| {
                r.mean(m, k)
                    .map_or_else(|| format!("{:>7}", "NA"), |v| format!("{v:>7.3}"))
            })
            .collect();
        println!("{:<12} {cells}", r.name);
    }
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let config = args.resolve()?;
    let dir = config.out_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut run = ModelRun::new(config.embedder.label(), config.clone());
    for &seed in &config.seeds {
        let seed_run = run_seed(&config, seed)?;
        let info = CheckpointInfo {
            run: config.clone(),
            seed,
        };
        let path = dir.join(format!(
            "checkpoint.{}.seed{seed}.json",
            config.embedder.label()
        ));
        seed_run
            .outcome
            .model
            .save(&path, serde_json::to_value(&info)?)?;
        let losses = &seed_run.outcome.losses;
        println!(
            "seed {seed}: loss {:.4} -> {:.4}, checkpoint {}",
            losses.first().copied().unwrap_or(f64::NAN),
            losses.last().copied().unwrap_or(f64::NAN),
            path.display()
        );
        run.push(seed, seed_run);
    }
    let runs = [run];
    write_model_runs(&dir, &runs)?;
    print_table(&runs);
    Ok(())
}

fn evaluate_cmd(args: &EvaluateArgs) -> Result<()> {
    let (model, info) = TwoTowerModel::<f32>::load(&args.checkpoint)?;
    let info: CheckpointInfo =
        serde_json::from_value(info).context("checkpoint lacks its run configuration")?;
    let seed = args.seed.unwrap_or(info.seed);
    let data = match &args.data_dir {
        Some(path) => DatasetSpec::Dir { path: path.clone() }.load(seed)?,
        None => info.run.dataset.load(seed)?,
    };
    let ks = args.ks.clone().unwrap_or(info.run.ks.clone());
    let result = evaluate(&model, &data, &ks, seed)?;
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    write_json(
        &args.out_dir.join("evaluation.json"),
        &EvaluationReport {
            format_version: OUTPUT_FORMAT_VERSION,
            checkpoint: &args.checkpoint,
            data_seed: seed,
            result: &result,
        },
    )?;
    let path = args.out_dir.join("metrics.csv");
    let file = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
    write_metrics_csv(
        file,
        &[(info.run.embedder.label().to_string(), vec![result.clone()])],
    )?;
    for m in &result.means {
        println!("{}@{} = {:.4}", m.metric.label(), m.k, m.value);
    }
    Ok(())
}

fn print_slopes(report: &BenchmarkReport) {
    for c in &report.curves {
        println!("{:<12} log-log slope {:.3}", c.target.label(), c.slope);
    }
}

fn benchmark_cmd(args: &BenchArgs) -> Result<()> {
    let report = benchmark_all(&args.options())?;
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let path = args.out_dir.join("benchmark.csv");
    write_benchmark_csv(
        fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?,
        &report,
    )?;
    write_json(&args.out_dir.join("benchmark.json"), &report)?;
    print_slopes(&report);
    Ok(())
}

fn reproduce_cmd(args: &ReproduceArgs) -> Result<()> {
    let names: Vec<&str> = if args.experiment == "all" {
        EXPERIMENTS.to_vec()
    } else {
        vec![args.experiment.as_str()]
    };
    let mut options = ReproduceOptions {
        preset: args.preset,
        seeds: args.seeds.clone(),
        steps: args.steps,
        embedders: args.embedders.clone(),
        out_dir: args.out_dir.clone(),
        base: args.config.as_deref().map(read_config).transpose()?,
        ..ReproduceOptions::default()
    };
    set(&mut options.bench.lengths, args.bench.lengths.clone());
    set(&mut options.bench.trials, args.bench.trials);
    for name in names {
        println!("== {name}");
        match reproduce(name, &options)? {
            ReproduceOutput::Models(runs) => print_table(&runs),
            ReproduceOutput::Benchmark(report) => print_slopes(&report),
        }
        println!("reports in {}", args.out_dir.join(name).display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Evaluate(a) => evaluate_cmd(&a),
        Command::Benchmark(a) => benchmark_cmd(&a),
        Command::Reproduce(a) => reproduce_cmd(&a),
    }
}

fn main() -> Result<()> {
    run(Cli::parse())
}
