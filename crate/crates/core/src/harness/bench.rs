use std::io::Write;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    forward_sequence, EmbedderConfig, EmbedderStack, MambaConfig, TransformerConfig,
};
use crate::params::ParamStore;
use crate::ssm::ScanKernel;
use crate::tensor::Tensor;

pub const BENCHMARK_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_LENGTHS: [usize; 7] = [64, 128, 256, 512, 1024, 2048, 4096];
pub const MIN_LENGTHS: usize = 5;
pub const MIN_SPAN: usize = 16;
/// Each timed sample repeats the workload until it lasts at least this long.
const MIN_SAMPLE: Duration = Duration::from_millis(20);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchTarget {
    /// Memory copy of `L·d` floats; a linear reference.
    Copy,
    Mamba,
    Transformer,
}

impl BenchTarget {
    pub const ALL: [BenchTarget; 3] = [
        BenchTarget::Copy,
        BenchTarget::Mamba,
        BenchTarget::Transformer,
    ];

    pub fn label(self) -> &'static str {
        match self {
            BenchTarget::Copy => "copy",
            BenchTarget::Mamba => "mamba",
            BenchTarget::Transformer => "transformer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub d: usize,
    pub lengths: Vec<usize>,
    pub trials: usize,
    pub warmup: usize,
    pub mamba: MambaConfig,
    pub transformer: TransformerConfig,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            d: 192,
            lengths: DEFAULT_LENGTHS.to_vec(),
            trials: 5,
            warmup: 1,
            mamba: MambaConfig {
                layers: 1,
                ..MambaConfig::default()
            },
            transformer: TransformerConfig {
                layers: 1,
                ..TransformerConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub len: usize,
    /// Median seconds per forward pass.
    pub seconds: f64,
    pub repetitions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingCurve {
    pub target: BenchTarget,
    pub points: Vec<BenchPoint>,
    /// Least-squares slope of log time against log length.
    pub slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub format_version: u32,
    pub options: BenchOptions,
    pub curves: Vec<ScalingCurve>,
}

pub fn log_log_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return Err(Error::InvalidArgument(
            "slope needs two or more positive points".into(),
        ));
    }
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument(
            "slope needs two distinct lengths".into(),
        ));
    }
    Ok(sxy / sxx)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median per-call time of `f`, repeating calls inside each sample until it
/// exceeds [`MIN_SAMPLE`].
fn time_median(
    trials: usize,
    warmup: usize,
    mut f: impl FnMut() -> Result<()>,
) -> Result<(f64, usize)> {
    for _ in 0..warmup {
        f()?;
    }
    let start = Instant::now();
    f()?;
    let single = start.elapsed().max(Duration::from_nanos(1));
    let reps = (MIN_SAMPLE.as_secs_f64() / single.as_secs_f64())
        .ceil()
        .max(1.0) as usize;
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials.max(1) {
        let start = Instant::now();
        for _ in 0..reps {
            f()?;
        }
        samples.push(start.elapsed().as_secs_f64() / reps as f64);
    }
    Ok((median(samples), reps))
}

/// Forward-pass time of one layer against sequence length.
pub fn benchmark_scaling(target: BenchTarget, options: &BenchOptions) -> Result<ScalingCurve> {
    let ls = &options.lengths;
    if ls.len() < MIN_LENGTHS
        || ls.windows(2).any(|w| w[0] >= w[1])
        || ls[0] == 0
        || ls[ls.len() - 1] < MIN_SPAN * ls[0]
    {
        return Err(Error::InvalidArgument(format!(
            "lengths must be increasing, at least {MIN_LENGTHS} of them, spanning {MIN_SPAN}x: {ls:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let d = options.d;
    let config = match target {
        BenchTarget::Mamba => Some(EmbedderConfig::Mamba(MambaConfig {
            layers: 1,
            ..options.mamba
        })),
        BenchTarget::Transformer => Some(EmbedderConfig::Transformer(TransformerConfig {
            layers: 1,
            ..options.transformer
        })),
        BenchTarget::Copy => None,
    };
    let mut store = ParamStore::<f32>::new();
    let stack = config
        .map(|c| EmbedderStack::new(&mut store, "bench", d, c, &mut rng))
        .transpose()?;
    let mut points = Vec::with_capacity(options.lengths.len());
    for &len in &options.lengths {
        let x = Tensor::<f32>::uniform([len, d], -1.0, 1.0, &mut rng);
        let (seconds, repetitions) = match &stack {
            Some(s) => time_median(options.trials, options.warmup, || {
                std::hint::black_box(forward_sequence(s, &store, &x, ScanKernel::PARALLEL)?);
                Ok(())
            })?,
            None => {
                let mut dst = vec![0.0f32; len * d];
                time_median(options.trials, options.warmup, || {
                    dst.copy_from_slice(std::hint::black_box(x.data()));
                    std::hint::black_box(&mut dst);
                    Ok(())
                })?
            }
        };
        points.push(BenchPoint {
            len,
            seconds,
            repetitions,
        });
    }
    let slope = log_log_slope(
        &points
            .iter()
            .map(|p| (p.len as f64, p.seconds))
            .collect::<Vec<_>>(),
    )?;
    Ok(ScalingCurve {
        target,
        points,
        slope,
    })
}

pub fn benchmark_all(options: &BenchOptions) -> Result<BenchmarkReport> {
    Ok(BenchmarkReport {
        format_version: BENCHMARK_FORMAT_VERSION,
        options: options.clone(),
        curves: BenchTarget::ALL
            .iter()
            .map(|&t| benchmark_scaling(t, options))
            .collect::<Result<_>>()?,
    })
}

pub fn write_benchmark_csv<W: Write>(out: W, report: &BenchmarkReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "format_version",
        "target",
        "d",
        "len",
        "seconds",
        "repetitions",
        "slope",
    ])?;
    for c in &report.curves {
        for p in &c.points {
            w.write_record([
                report.format_version.to_string(),
                c.target.label().to_string(),
                report.options.d.to_string(),
                p.len.to_string(),
                format!("{:.9}", p.seconds),
                p.repetitions.to_string(),
                format!("{:.4}", c.slope),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}
