//! Central finite-difference checks of tape gradients at 64-bit.

use crate::autodiff::{Tape, Var};
use crate::harness::train::batch_loss;
use crate::layers::{EmbedderConfig, EmbedderStack, MambaConfig, TransformerConfig};
use crate::params::ParamStore;
use crate::ssm::{ScanInputs, ScanKernel};
use crate::tokenizer::{Feature, FeatureRow, FeatureSchema, FeatureValue};
use crate::two_tower::{HeadConfig, TowerSpec, TwoTowerModel};
use crate::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;
/// Denominator floor so near-zero gradients are compared absolutely.
const FLOOR: f64 = 1e-2;
const SAMPLES_PER_TENSOR: usize = 12;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

/// Values kept away from zero so ReLU kinks are not straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    rand_tensor(rng, shape).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

fn sample_indices(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    if n <= SAMPLES_PER_TENSOR {
        (0..n).collect()
    } else {
        (0..SAMPLES_PER_TENSOR)
            .map(|_| rng.random_range(0..n))
            .collect()
    }
}

/// Reduces `out` against a fixed random weighting so every output element
/// contributes to the scalar being differentiated.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Largest relative error between tape gradients and central differences
/// for every input of `f`.
pub fn check_op(
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let run = |inputs: &[Tensor<f64>],
               weights: Option<&Tensor<f64>>,
               grads: bool|
     -> Result<(f64, Tensor<f64>, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grads)).collect();
        let out = f(&mut tape, &vars)?;
        let shape = tape.shape(out).to_vec();
        let w = match weights {
            Some(w) => w.clone(),
            None => Tensor::full(shape, 1.0),
        };
        let loss = weighted_sum(&mut tape, out, &w)?;
        let value = tape.value(loss).item();
        if grads {
            tape.backward(loss)?;
        }
        let g = vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec()))
            })
            .collect();
        Ok((value, w, g))
    };
    let (_, probe, _) = run(inputs, None, false)?;
    let weights = rand_tensor(rng, probe.shape());
    let (_, _, analytic) = run(inputs, Some(&weights), true)?;
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in sample_indices(rng, input.len()) {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (run(&plus, Some(&weights), false)?.0
                - run(&minus, Some(&weights), false)?.0)
                / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Same comparison for every parameter tensor of a store.
pub fn check_params(
    rng: &mut ChaCha8Rng,
    store: &mut ParamStore<f64>,
    loss: impl Fn(&ParamStore<f64>) -> Result<(f64, Vec<Tensor<f64>>)>,
) -> Result<f64> {
    let (_, analytic) = loss(store)?;
    let ids: Vec<_> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for (k, &id) in ids.iter().enumerate() {
        for j in sample_indices(rng, store.get(id).len()) {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + STEP;
            let lp = loss(store)?.0;
            store.get_mut(id).data_mut()[j] = orig - STEP;
            let lm = loss(store)?.0;
            store.get_mut(id).data_mut()[j] = orig;
            worst = worst.max(rel_err(analytic[k].data()[j], (lp - lm) / (2.0 * STEP)));
        }
    }
    Ok(worst)
}

/// Every differentiable tape operation at shapes drawn from `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.random_range(1..=3);
    let l = rng.random_range(1..=5);
    let d = rng.random_range(2..=5);
    let n = rng.random_range(1..=3);
    let w = rng.random_range(1..=4);
    let mut out = Vec::new();
    let x = rand_tensor(&mut rng, &[b, l, d]);
    let y = rand_tensor(&mut rng, &[b, l, d]);
    let vec_d = rand_tensor(&mut rng, &[d]);
    let mat = rand_tensor(&mut rng, &[d, n]);
    let rr = &mut rng;

    out.push((
        "matmul",
        check_op(rr, &[x.clone(), mat.clone()], |tp, v| tp.matmul(v[0], v[1]))?,
    ));
    let bm = rand_tensor(rr, &[b, d, n]);
    out.push((
        "batch_matmul",
        check_op(rr, &[x.clone(), bm], |tp, v| {
            tp.batch_matmul(v[0], v[1], false, 0.7)
        })?,
    ));
    out.push((
        "batch_matmul_t",
        check_op(rr, &[x.clone(), y.clone()], |tp, v| {
            tp.batch_matmul(v[0], v[1], true, 1.3)
        })?,
    ));
    out.push((
        "add",
        check_op(rr, &[x.clone(), y.clone()], |tp, v| tp.add(v[0], v[1]))?,
    ));
    out.push((
        "add_broadcast",
        check_op(rr, &[x.clone(), vec_d.clone()], |tp, v| tp.add(v[0], v[1]))?,
    ));
    out.push((
        "sub_broadcast_lhs",
        check_op(rr, &[vec_d.clone(), x.clone()], |tp, v| tp.sub(v[0], v[1]))?,
    ));
    out.push((
        "mul",
        check_op(rr, &[x.clone(), y.clone()], |tp, v| tp.mul(v[0], v[1]))?,
    ));
    out.push((
        "mul_broadcast",
        check_op(rr, &[x.clone(), vec_d.clone()], |tp, v| tp.mul(v[0], v[1]))?,
    ));
    out.push((
        "silu",
        check_op(rr, std::slice::from_ref(&x), |tp, v| Ok(tp.silu(v[0])))?,
    ));
    let xa = away_from_zero(rr, &[b, l, d]);
    out.push(("relu", check_op(rr, &[xa], |tp, v| Ok(tp.relu(v[0])))?));
    out.push((
        "sigmoid",
        check_op(rr, std::slice::from_ref(&x), |tp, v| Ok(tp.sigmoid(v[0])))?,
    ));
    out.push((
        "exp",
        check_op(rr, std::slice::from_ref(&x), |tp, v| Ok(tp.exp(v[0])))?,
    ));
    out.push((
        "softplus",
        check_op(rr, std::slice::from_ref(&x), |tp, v| Ok(tp.softplus(v[0])))?,
    ));
    out.push((
        "square",
        check_op(rr, std::slice::from_ref(&x), |tp, v| Ok(tp.square(v[0])))?,
    ));
    out.push((
        "neg",
        check_op(rr, std::slice::from_ref(&x), |tp, v| Ok(tp.neg(v[0])))?,
    ));
    out.push((
        "scale",
        check_op(rr, std::slice::from_ref(&x), |tp, v| {
            Ok(tp.scale(v[0], -2.5))
        })?,
    ));
    out.push((
        "sum",
        check_op(rr, std::slice::from_ref(&x), |tp, v| Ok(tp.sum(v[0])))?,
    ));
    out.push((
        "mean",
        check_op(rr, std::slice::from_ref(&x), |tp, v| Ok(tp.mean(v[0])))?,
    ));
    out.push((
        "sum_last",
        check_op(rr, std::slice::from_ref(&x), |tp, v| tp.sum_last(v[0]))?,
    ));
    let col = rand_tensor(rr, &[l]);
    out.push((
        "outer",
        check_op(rr, &[col, vec_d.clone()], |tp, v| tp.outer(v[0], v[1]))?,
    ));
    let gain = rand_tensor(rr, &[d]);
    out.push((
        "layer_norm",
        check_op(rr, &[x.clone(), gain, vec_d.clone()], |tp, v| {
            tp.layer_norm(v[0], v[1], v[2], 1e-5)
        })?,
    ));
    out.push((
        "softmax",
        check_op(rr, std::slice::from_ref(&x), |tp, v| tp.softmax(v[0]))?,
    ));
    let kernels = rand_tensor(rr, &[d, w]);
    out.push((
        "causal_conv1d",
        check_op(rr, &[x.clone(), kernels, vec_d.clone()], |tp, v| {
            tp.causal_conv1d(v[0], v[1], v[2])
        })?,
    ));
    let scan_inputs = [
        x.clone(),
        rand_tensor(rr, &[b, l, d]),
        rand_tensor(rr, &[d, n]),
        rand_tensor(rr, &[b, l, n]),
        rand_tensor(rr, &[b, l, n]),
        rand_tensor(rr, &[d]),
    ];
    out.push((
        "selective_scan",
        check_op(rr, &scan_inputs, |tp, v| {
            let delta = tp.softplus(v[1]);
            tp.selective_scan(
                ScanInputs {
                    x: v[0],
                    delta,
                    a_log: v[2],
                    b: v[3],
                    c: v[4],
                    d: v[5],
                },
                ScanKernel::Sequential,
            )
        })?,
    ));
    out.push((
        "reshape",
        check_op(rr, std::slice::from_ref(&x), |tp, v| {
            tp.reshape(v[0], [b * l, d])
        })?,
    ));
    out.push((
        "permute",
        check_op(rr, std::slice::from_ref(&x), |tp, v| {
            tp.permute(v[0], &[2, 0, 1])
        })?,
    ));
    out.push((
        "concat",
        check_op(rr, &[x.clone(), y.clone()], |tp, v| {
            tp.concat(&[v[0], v[1]], 1)
        })?,
    ));
    out.push((
        "index_axis",
        check_op(rr, std::slice::from_ref(&x), |tp, v| {
            tp.index_axis(v[0], 1, l - 1)
        })?,
    ));
    let table = rand_tensor(rr, &[4, d]);
    let idx: Vec<usize> = (0..l + 2).map(|_| rr.random_range(0..4)).collect();
    out.push((
        "embedding",
        check_op(rr, &[table], move |tp, v| tp.embedding(v[0], &idx))?,
    ));
    Ok(out)
}

pub fn tiny_mamba(rng: &mut ChaCha8Rng) -> MambaConfig {
    MambaConfig {
        layers: rng.random_range(1..=2),
        expand: rng.random_range(1..=2),
        conv_width: rng.random_range(1..=3),
        state_size: rng.random_range(1..=3),
        dt_rank: None,
    }
}

pub fn tiny_transformer(rng: &mut ChaCha8Rng) -> TransformerConfig {
    TransformerConfig {
        layers: rng.random_range(1..=2),
        heads: 2,
        ffn_width: rng.random_range(2..=6),
        dropout: 0.0,
    }
}

fn stack_check(rng: &mut ChaCha8Rng, config: EmbedderConfig) -> Result<f64> {
    let d = 2 * rng.random_range(1..=3);
    let (b, l) = (rng.random_range(1..=2), rng.random_range(1..=4));
    let mut store = ParamStore::<f64>::new();
    let stack = EmbedderStack::new(&mut store, "s", d, config, rng)?;
    let x = rand_tensor(rng, &[b, l, d]);
    let weights = rand_tensor(rng, &[b, l, d]);
    let loss = |s: &ParamStore<f64>| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let y = stack.forward(&mut tape, &p, xv, ScanKernel::Sequential)?;
        let l = weighted_sum(&mut tape, y, &weights)?;
        tape.backward(l)?;
        Ok((tape.value(l).item(), s.grads(&tape, &p)))
    };
    let params = check_params(rng, &mut store, loss)?;
    let input = check_op(rng, std::slice::from_ref(&x), |tp, v| {
        let p = store.bind(tp, false);
        stack.forward(tp, &p, v[0], ScanKernel::Sequential)
    })?;
    Ok(params.max(input))
}

fn tiny_spec(rng: &mut ChaCha8Rng, embedder: EmbedderConfig) -> TowerSpec {
    TowerSpec {
        user_schema: FeatureSchema::new(vec![
            Feature::numeric("age"),
            Feature::categorical("group", 3),
            Feature::numeric("score"),
        ])
        .unwrap(),
        content_schema: FeatureSchema::new(vec![
            Feature::categorical("item", 4),
            Feature::numeric("price"),
        ])
        .unwrap(),
        d: 2 * rng.random_range(1..=2),
        embedder,
        head: HeadConfig { hidden: 5, out: 3 },
    }
}

fn two_tower_check(rng: &mut ChaCha8Rng, embedder: EmbedderConfig) -> Result<f64> {
    let spec = tiny_spec(rng, embedder);
    let mut model = TwoTowerModel::<f64>::new(spec, rng.random())?;
    let n = 4;
    let users: Vec<FeatureRow> = (0..n)
        .map(|_| {
            FeatureRow(vec![
                FeatureValue::Numeric(rng.random_range(-1.0..1.0)),
                FeatureValue::Categorical(rng.random_range(0..3)),
                FeatureValue::Numeric(rng.random_range(-1.0..1.0)),
            ])
        })
        .collect();
    let items: Vec<FeatureRow> = (0..n)
        .map(|_| {
            FeatureRow(vec![
                FeatureValue::Categorical(rng.random_range(0..4)),
                FeatureValue::Numeric(rng.random_range(-1.0..1.0)),
            ])
        })
        .collect();
    let targets: Vec<f64> = (0..n).map(|_| rng.random_range(-1..=1) as f64).collect();
    let ur: Vec<&FeatureRow> = users.iter().collect();
    let ir: Vec<&FeatureRow> = items.iter().collect();
    let frozen = model.clone();
    let mut store = std::mem::take(&mut model.params);
    check_params(rng, &mut store, |s| {
        let mut m = frozen.clone();
        m.params = s.clone();
        batch_loss(&m, &ur, &ir, &targets)
    })
}

/// Both layer stacks and the full two-tower MSE objective for one seed.
pub fn model_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mamba = tiny_mamba(&mut rng);
    let transformer = tiny_transformer(&mut rng);
    Ok(vec![
        (
            "mamba_stack",
            stack_check(&mut rng, EmbedderConfig::Mamba(mamba))?,
        ),
        (
            "transformer_stack",
            stack_check(&mut rng, EmbedderConfig::Transformer(transformer))?,
        ),
        (
            "two_tower_mamba",
            two_tower_check(&mut rng, EmbedderConfig::Mamba(mamba))?,
        ),
        (
            "two_tower_transformer",
            two_tower_check(&mut rng, EmbedderConfig::Transformer(transformer))?,
        ),
    ])
}
