//! Selective state space sequence transform.
//!
//! Per channel `ch` and state index `n`, with `A = -exp(A_log)`:
//!
//! ```text
//! Ā_t = exp(Δ_t · A),   B̄_t = Δ_t · B_t
//! h_t = Ā_t · h_{t-1} + B̄_t · x_t        (h_{-1} = 0)
//! y_t = Σ_n C_t[n] · h_t[n] + D · x_t
//! ```
//!
//! `Δ_t`, `B_t` and `C_t` are projections of `x_t`, which is what makes the
//! transform input-selective. Two kernels evaluate the recurrence: a
//! sequential loop (differentiable) and a chunked associative prefix scan
//! (forward only).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Which recurrence evaluator to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScanKernel {
    Sequential,
    /// Associative scan over chunks of the given length.
    Parallel {
        chunk: usize,
    },
}

impl ScanKernel {
    pub const PARALLEL: ScanKernel = ScanKernel::Parallel { chunk: 64 };
}

/// Zero-order hold on the state transition, Euler step on the input:
/// returns `(exp(Δ·A), Δ·B)`.
pub fn discretize<T: Scalar>(a: T, b: T, delta: T) -> Result<(T, T)> {
    if !(delta > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "discretization step must be positive, got {delta}"
        )));
    }
    Ok(((delta * a).exp(), delta * b))
}

/// Composition of two affine maps `h -> a·h + b`, applying `first` then
/// `second`.
pub fn combine<T: Scalar>(first: (T, T), second: (T, T)) -> (T, T) {
    (second.0 * first.0, second.0 * first.1 + second.1)
}

/// Inclusive scan of `elems` under an associative `op`, organised as
/// independent chunk scans, a scan over chunk totals, and a fix-up pass.
/// Chunks in the first and last phase are independent of one another.
pub fn associative_scan<E: Copy>(elems: &[E], chunk: usize, op: impl Fn(E, E) -> E) -> Vec<E> {
    let chunk = chunk.max(1);
    let mut out = elems.to_vec();
    // phase 1: local scans
    for c in out.chunks_mut(chunk) {
        for i in 1..c.len() {
            c[i] = op(c[i - 1], c[i]);
        }
    }
    // phase 2: exclusive scan over chunk totals
    let totals: Vec<E> = out.chunks(chunk).map(|c| c[c.len() - 1]).collect();
    let mut carries: Vec<Option<E>> = Vec::with_capacity(totals.len());
    let mut acc: Option<E> = None;
    for t in totals {
        carries.push(acc);
        acc = Some(match acc {
            Some(a) => op(a, t),
            None => t,
        });
    }
    // phase 3: fix-up
    for (c, carry) in out.chunks_mut(chunk).zip(carries) {
        if let Some(carry) = carry {
            for e in c.iter_mut() {
                *e = op(carry, *e);
            }
        }
    }
    out
}

/// Tape variables feeding one selective scan.
///
/// Shapes: `x`, `delta`: `[B, L, c]` (or `[L, c]`); `a_log`: `[c, N]`;
/// `b`, `c`: `[B, L, N]` (or `[L, N]`); `d`: `[c]`.
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs {
    pub x: Var,
    pub delta: Var,
    pub a_log: Var,
    pub b: Var,
    pub c: Var,
    pub d: Var,
}

impl ScanInputs {
    pub(crate) fn vars(&self) -> Vec<Var> {
        vec![self.x, self.delta, self.a_log, self.b, self.c, self.d]
    }

    pub(crate) fn view<'t, T: Scalar>(&self, tape: &'t Tape<T>) -> Result<ScanView<'t, T>> {
        let sx = tape.shape(self.x);
        let (batch, len, channels) = match *sx {
            [l, c] => (1, l, c),
            [b, l, c] => (b, l, c),
            _ => return Err(Error::shape("selective_scan", sx, &[])),
        };
        let sa = tape.shape(self.a_log);
        if sa.len() != 2 || sa[0] != channels {
            return Err(Error::shape("selective_scan", sx, sa));
        }
        let state = sa[1];
        if tape.shape(self.delta) != sx {
            return Err(Error::shape("selective_scan", sx, tape.shape(self.delta)));
        }
        let mut bc_shape = sx.to_vec();
        *bc_shape.last_mut().unwrap() = state;
        for v in [self.b, self.c] {
            if tape.shape(v) != bc_shape.as_slice() {
                return Err(Error::shape("selective_scan", &bc_shape, tape.shape(v)));
            }
        }
        if tape.shape(self.d) != [channels] {
            return Err(Error::shape(
                "selective_scan",
                &[channels],
                tape.shape(self.d),
            ));
        }
        Ok(ScanView {
            shape: sx.to_vec(),
            batch,
            len,
            channels,
            state,
            x: tape.value(self.x).data(),
            delta: tape.value(self.delta).data(),
            a_log: tape.value(self.a_log).data(),
            b: tape.value(self.b).data(),
            c: tape.value(self.c).data(),
            d: tape.value(self.d).data(),
        })
    }
}

pub(crate) struct ScanView<'t, T> {
    shape: Vec<usize>,
    batch: usize,
    len: usize,
    channels: usize,
    state: usize,
    x: &'t [T],
    delta: &'t [T],
    a_log: &'t [T],
    b: &'t [T],
    c: &'t [T],
    d: &'t [T],
}

impl<T: Scalar> ScanView<'_, T> {
    pub(crate) fn output_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }

    fn a(&self) -> Vec<T> {
        self.a_log.iter().map(|&v| -v.exp()).collect()
    }
}

/// Returns `y` and, when `save_states`, every hidden state `h[B, L, c, N]`.
pub(crate) fn scan_forward_sequential<T: Scalar>(
    v: &ScanView<'_, T>,
    save_states: bool,
) -> (Vec<T>, Vec<T>) {
    let (l, c, n) = (v.len, v.channels, v.state);
    let a = v.a();
    let mut y = vec![T::zero(); v.batch * l * c];
    let mut states = if save_states {
        Vec::with_capacity(v.batch * l * c * n)
    } else {
        Vec::new()
    };
    let mut h = vec![T::zero(); c * n];
    for b in 0..v.batch {
        h.iter_mut().for_each(|s| *s = T::zero());
        for t in 0..l {
            let row = (b * l + t) * c;
            let brow = &v.b[(b * l + t) * n..(b * l + t + 1) * n];
            let crow = &v.c[(b * l + t) * n..(b * l + t + 1) * n];
            for ch in 0..c {
                let xv = v.x[row + ch];
                let dv = v.delta[row + ch];
                let hs = &mut h[ch * n..(ch + 1) * n];
                let mut acc = T::zero();
                for s in 0..n {
                    let abar = (dv * a[ch * n + s]).exp();
                    hs[s] = abar * hs[s] + dv * brow[s] * xv;
                    acc += crow[s] * hs[s];
                }
                y[row + ch] = acc + v.d[ch] * xv;
            }
            if save_states {
                states.extend_from_slice(&h);
            }
        }
    }
    (y, states)
}

pub(crate) fn scan_forward_parallel<T: Scalar>(v: &ScanView<'_, T>, chunk: usize) -> Vec<T> {
    let (l, c, n) = (v.len, v.channels, v.state);
    let a = v.a();
    let mut y = vec![T::zero(); v.batch * l * c];
    let mut lane: Vec<(T, T)> = Vec::with_capacity(l);
    for b in 0..v.batch {
        for ch in 0..c {
            for s in 0..n {
                lane.clear();
                lane.extend((0..l).map(|t| {
                    let row = (b * l + t) * c + ch;
                    let dv = v.delta[row];
                    (
                        (dv * a[ch * n + s]).exp(),
                        dv * v.b[(b * l + t) * n + s] * v.x[row],
                    )
                }));
                let h = associative_scan(&lane, chunk, combine);
                for (t, &(_, ht)) in h.iter().enumerate() {
                    y[(b * l + t) * c + ch] += v.c[(b * l + t) * n + s] * ht;
                }
            }
            for t in 0..l {
                let row = (b * l + t) * c + ch;
                y[row] += v.d[ch] * v.x[row];
            }
        }
    }
    y
}

/// Gradients in [`ScanInputs::vars`] order: x, delta, a_log, b, c, d.
pub(crate) fn scan_backward<T: Scalar>(v: &ScanView<'_, T>, states: &[T], dy: &[T]) -> Vec<Vec<T>> {
    let (l, c, n) = (v.len, v.channels, v.state);
    let a = v.a();
    let mut dx = vec![T::zero(); v.x.len()];
    let mut ddelta = vec![T::zero(); v.delta.len()];
    let mut da = vec![T::zero(); a.len()];
    let mut db = vec![T::zero(); v.b.len()];
    let mut dc = vec![T::zero(); v.c.len()];
    let mut dd = vec![T::zero(); c];
    let mut dh = vec![T::zero(); c * n];
    let zeros = vec![T::zero(); c * n];
    for b in 0..v.batch {
        dh.iter_mut().for_each(|s| *s = T::zero());
        for t in (0..l).rev() {
            let row = (b * l + t) * c;
            let brow = (b * l + t) * n;
            let h_t = &states[(b * l + t) * c * n..(b * l + t + 1) * c * n];
            let h_prev = if t == 0 {
                &zeros[..]
            } else {
                &states[(b * l + t - 1) * c * n..(b * l + t) * c * n]
            };
            for ch in 0..c {
                let g = dy[row + ch];
                let xv = v.x[row + ch];
                let dv = v.delta[row + ch];
                dd[ch] += g * xv;
                dx[row + ch] += g * v.d[ch];
                for s in 0..n {
                    let k = ch * n + s;
                    let bv = v.b[brow + s];
                    dh[k] += g * v.c[brow + s];
                    dc[brow + s] += g * h_t[k];
                    let abar = (dv * a[k]).exp();
                    let g_h = dh[k];
                    let g_abar = g_h * h_prev[k];
                    ddelta[row + ch] += g_abar * abar * a[k] + g_h * bv * xv;
                    da[k] += g_abar * abar * dv;
                    db[brow + s] += g_h * dv * xv;
                    dx[row + ch] += g_h * dv * bv;
                    dh[k] = g_h * abar;
                }
            }
        }
    }
    // A = -exp(A_log)  =>  dA/dA_log = A
    let da_log = da.iter().zip(&a).map(|(&g, &av)| g * av).collect();
    vec![dx, ddelta, da_log, db, dc, dd]
}

/// Parameters of one selective SSM over `channels` inner channels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelectiveSsm {
    pub channels: usize,
    pub state_size: usize,
    pub dt_rank: usize,
    pub x_to_dt: Linear,
    pub x_to_b: Linear,
    pub x_to_c: Linear,
    pub dt_proj: Linear,
    pub a_log: ParamId,
    pub d: ParamId,
}

pub const DT_MIN: f64 = 1e-3;
pub const DT_MAX: f64 = 1e-1;

impl SelectiveSsm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        state_size: usize,
        dt_rank: usize,
        rng: &mut R,
    ) -> Self {
        let x_to_dt = Linear::new(
            store,
            &format!("{name}.x_to_dt"),
            channels,
            dt_rank,
            false,
            rng,
        );
        let x_to_b = Linear::new(
            store,
            &format!("{name}.x_to_b"),
            channels,
            state_size,
            false,
            rng,
        );
        let x_to_c = Linear::new(
            store,
            &format!("{name}.x_to_c"),
            channels,
            state_size,
            false,
            rng,
        );

        let std = 1.0 / (dt_rank as f64).sqrt();
        let w = store.add_uniform(
            format!("{name}.dt_proj.weight"),
            [dt_rank, channels],
            std,
            rng,
        );
        // bias = softplus^-1(dt), dt log-uniform in [DT_MIN, DT_MAX]
        let bias: Vec<f64> = (0..channels)
            .map(|_| {
                let dt = rng.random_range(DT_MIN.ln()..=DT_MAX.ln()).exp().max(1e-4);
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let b = store.add(
            format!("{name}.dt_proj.bias"),
            Tensor::from_f64([channels], &bias).expect("bias length matches"),
        );
        let dt_proj = Linear {
            weight: w,
            bias: Some(b),
            in_dim: dt_rank,
            out_dim: channels,
        };

        let a_log: Vec<f64> = (0..channels)
            .flat_map(|_| (1..=state_size).map(|s| (s as f64).ln()))
            .collect();
        let a_log = store.add(
            format!("{name}.a_log"),
            Tensor::from_f64([channels, state_size], &a_log).expect("a_log length matches"),
        );
        let d = store.add(format!("{name}.d"), Tensor::full([channels], T::one()));
        Self {
            channels,
            state_size,
            dt_rank,
            x_to_dt,
            x_to_b,
            x_to_c,
            dt_proj,
            a_log,
            d,
        }
    }

    pub fn param_count(&self) -> usize {
        self.x_to_dt.param_count()
            + self.x_to_b.param_count()
            + self.x_to_c.param_count()
            + self.dt_proj.param_count()
            + self.channels * self.state_size
            + self.channels
    }

    /// Step sizes `Δ = softplus(dt_proj(x_to_dt(x)))`, shape of `x`.
    pub fn delta<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let low = self.x_to_dt.forward(tape, p, x)?;
        let pre = self.dt_proj.forward(tape, p, low)?;
        Ok(tape.softplus(pre))
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        kernel: ScanKernel,
    ) -> Result<Var> {
        let delta = self.delta(tape, p, x)?;
        let b = self.x_to_b.forward(tape, p, x)?;
        let c = self.x_to_c.forward(tape, p, x)?;
        tape.selective_scan(
            ScanInputs {
                x,
                delta,
                a_log: p[self.a_log],
                b,
                c,
                d: p[self.d],
            },
            kernel,
        )
    }
}

/// Differentiable evaluation on a fresh tape; returns `y` for `x[L, c]` or `[B, L, c]`.
pub fn scan_sequential<T: Scalar>(
    ssm: &SelectiveSsm,
    store: &ParamStore<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    evaluate(ssm, store, x, ScanKernel::Sequential)
}

/// Forward-only evaluation through the associative prefix scan.
pub fn scan_parallel<T: Scalar>(
    ssm: &SelectiveSsm,
    store: &ParamStore<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    evaluate(ssm, store, x, ScanKernel::PARALLEL)
}

fn evaluate<T: Scalar>(
    ssm: &SelectiveSsm,
    store: &ParamStore<T>,
    x: &Tensor<T>,
    kernel: ScanKernel,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = ssm.forward(&mut tape, &p, xv, kernel)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    struct Raw {
        shape: [usize; 2],
        n: usize,
        x: Vec<f64>,
        delta: Vec<f64>,
        a_log: Vec<f64>,
        b: Vec<f64>,
        c: Vec<f64>,
        d: Vec<f64>,
    }

    fn random_raw(len: usize, ch: usize, n: usize, seed: u64) -> Raw {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |k: usize, lo: f64, hi: f64| {
            (0..k).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>()
        };
        Raw {
            shape: [len, ch],
            n,
            x: draw(len * ch, -1.0, 1.0),
            delta: draw(len * ch, 0.01, 0.5),
            a_log: draw(ch * n, -1.0, 1.5),
            b: draw(len * n, -1.0, 1.0),
            c: draw(len * n, -1.0, 1.0),
            d: draw(ch, -1.0, 1.0),
        }
    }

    fn run<T: Scalar>(raw: &Raw, kernel: ScanKernel) -> Vec<f64> {
        let [l, c] = raw.shape;
        let mut tape = Tape::<T>::new();
        let mut k = |shape: Vec<usize>, v: &[f64]| tape_const(&mut tape, shape, v);
        let inputs = ScanInputs {
            x: k(vec![l, c], &raw.x),
            delta: k(vec![l, c], &raw.delta),
            a_log: k(vec![c, raw.n], &raw.a_log),
            b: k(vec![l, raw.n], &raw.b),
            c: k(vec![l, raw.n], &raw.c),
            d: k(vec![c], &raw.d),
        };
        let y = tape.selective_scan(inputs, kernel).unwrap();
        tape.value(y).to_f64_vec()
    }

    fn tape_const<T: Scalar>(tape: &mut Tape<T>, shape: Vec<usize>, v: &[f64]) -> Var {
        tape.constant(Tensor::from_f64(shape, v).unwrap())
    }

    /// Independent per-timestep loop built on `discretize`.
    fn oracle(raw: &Raw) -> Vec<f64> {
        let [l, c] = raw.shape;
        let n = raw.n;
        let mut y = vec![0.0; l * c];
        for ch in 0..c {
            let mut h = vec![0.0; n];
            for t in 0..l {
                let xt = raw.x[t * c + ch];
                let mut out = raw.d[ch] * xt;
                for s in 0..n {
                    let a = -raw.a_log[ch * n + s].exp();
                    let (abar, bbar) =
                        discretize(a, raw.b[t * n + s], raw.delta[t * c + ch]).unwrap();
                    h[s] = abar * h[s] + bbar * xt;
                    out += raw.c[t * n + s] * h[s];
                }
                y[t * c + ch] = out;
            }
        }
        y
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn discretize_hand_cases() {
        let (abar, bbar) = discretize(-1.0, 3.0, 2f64.ln()).unwrap();
        assert!((abar - 0.5).abs() < 1e-15);
        assert!((bbar - 3.0 * 2f64.ln()).abs() < 1e-15);
        let (abar, bbar) = discretize(-4.0f64, 2.0, 1e-12).unwrap();
        assert!((abar - 1.0).abs() < 1e-10 && bbar.abs() < 1e-10);
        assert!(discretize(-1.0, 1.0, 0.0).is_err());
        assert!(discretize(-1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn cumulative_sum_case() {
        // A_log = -inf gives A = 0, so Ā = 1; Δ = 1 and B = 1 give B̄ = 1.
        let raw = Raw {
            shape: [3, 1],
            n: 2,
            x: vec![1.0; 3],
            delta: vec![1.0; 3],
            a_log: vec![f64::NEG_INFINITY; 2],
            b: vec![1.0; 6],
            c: vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
            d: vec![0.0],
        };
        assert_eq!(
            run::<f64>(&raw, ScanKernel::Sequential),
            vec![1.0, 2.0, 3.0]
        );
        assert_eq!(run::<f64>(&raw, ScanKernel::PARALLEL), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn memoryless_when_transition_vanishes() {
        // Huge A_log drives Ā = exp(-Δ·e^50) to exactly 0.
        let mut raw = random_raw(5, 2, 3, 1);
        raw.a_log.iter_mut().for_each(|v| *v = 50.0);
        let y = run::<f64>(&raw, ScanKernel::Sequential);
        let (l, c, n) = (5, 2, 3);
        for t in 0..l {
            for ch in 0..c {
                let dt = raw.delta[t * c + ch];
                let xt = raw.x[t * c + ch];
                let expect: f64 = (0..n)
                    .map(|s| raw.c[t * n + s] * dt * raw.b[t * n + s] * xt)
                    .sum::<f64>()
                    + raw.d[ch] * xt;
                assert!((y[t * c + ch] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn sequential_matches_step_oracle() {
        let raw = random_raw(7, 2, 4, 2);
        let y = run::<f64>(&raw, ScanKernel::Sequential);
        assert!(max_diff(&y, &oracle(&raw)) < 1e-10);
    }

    #[test]
    fn combine_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mut e = || {
                (
                    rng.random_range(-1.0f64..1.0),
                    rng.random_range(-2.0f64..2.0),
                )
            };
            let (p, q, r) = (e(), e(), e());
            let left = combine(combine(p, q), r);
            let right = combine(p, combine(q, r));
            assert!((left.0 - right.0).abs() < 1e-12 && (left.1 - right.1).abs() < 1e-12);
        }
    }

    #[test]
    fn associative_scan_matches_fold_for_every_chunk() {
        let xs: Vec<i64> = (1..=37).collect();
        let expect: Vec<i64> = xs
            .iter()
            .scan(0, |acc, &x| {
                *acc += x;
                Some(*acc)
            })
            .collect();
        for chunk in [1, 2, 5, 37, 100] {
            assert_eq!(associative_scan(&xs, chunk, |a, b| a + b), expect);
        }
    }

    #[test]
    fn parallel_matches_sequential() {
        let one = random_raw(1, 3, 4, 4);
        assert_eq!(
            run::<f64>(&one, ScanKernel::Sequential),
            run::<f64>(&one, ScanKernel::PARALLEL)
        );
        let raw = random_raw(64, 3, 4, 5);
        let seq = run::<f32>(&raw, ScanKernel::Sequential);
        let par = run::<f32>(&raw, ScanKernel::Parallel { chunk: 8 });
        assert!(max_diff(&seq, &par) < 1e-6);
    }

    #[test]
    fn parallel_rejects_gradient_tracking_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros([2, 1]));
        let delta = tape.constant(Tensor::full([2, 1], 0.1));
        let a_log = tape.constant(Tensor::zeros([1, 1]));
        let b = tape.constant(Tensor::zeros([2, 1]));
        let c = tape.constant(Tensor::zeros([2, 1]));
        let d = tape.constant(Tensor::zeros([1]));
        let err = tape.selective_scan(
            ScanInputs {
                x,
                delta,
                a_log,
                b,
                c,
                d,
            },
            ScanKernel::PARALLEL,
        );
        assert!(matches!(err, Err(Error::ForwardOnly(_))));
    }

    fn module(seed: u64) -> (ParamStore<f64>, SelectiveSsm) {
        let mut store = ParamStore::new();
        let ssm = SelectiveSsm::new(
            &mut store,
            "ssm",
            4,
            16,
            1,
            &mut ChaCha8Rng::seed_from_u64(seed),
        );
        (store, ssm)
    }

    #[test]
    fn init_matches_reference_defaults() {
        let (store, ssm) = module(6);
        let a_log = store.get(ssm.a_log).to_f64_vec();
        for ch in 0..4 {
            for s in 0..16 {
                assert!((-a_log[ch * 16 + s].exp() + (s + 1) as f64).abs() < 1e-12);
            }
        }
        let bias = store.get(ssm.dt_proj.bias.unwrap()).to_f64_vec();
        for b in bias {
            let dt = crate::autodiff::softplus(b);
            assert!((DT_MIN * 0.999..=DT_MAX * 1.001).contains(&dt), "dt {dt}");
        }
        assert_eq!(store.get(ssm.d).to_f64_vec(), vec![1.0; 4]);
        assert_eq!(ssm.param_count(), store.scalar_count());
    }

    #[test]
    fn module_is_causal_and_kernels_agree() {
        let (store, ssm) = module(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::uniform([6, 4], -1.0, 1.0, &mut rng);
        let y = scan_sequential(&ssm, &store, &x).unwrap();
        assert!(y.max_abs_diff(&scan_parallel(&ssm, &store, &x).unwrap()) < 1e-10);
        for t in 0..6 {
            let mut xp = x.clone();
            xp.data_mut()[t * 4 + 1] += 0.5;
            let yp = scan_sequential(&ssm, &store, &xp).unwrap();
            for s in 0..6 {
                let changed = y.row(s).iter().zip(yp.row(s)).any(|(a, b)| a != b);
                assert_eq!(changed, s >= t, "perturb {t}, position {s}");
            }
        }
    }

    #[test]
    fn step_sizes_depend_on_input() {
        let (store, ssm) = module(9);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(
            Tensor::from_f64([2, 4], &[0.1, -0.2, 0.3, 0.0, 2.0, 1.0, -1.5, 0.7]).unwrap(),
        );
        let delta = ssm.delta(&mut tape, &p, x).unwrap();
        let dv = tape.value(delta);
        assert!(dv.data().iter().all(|&v| v > 0.0));
        assert_ne!(dv.row(0), dv.row(1));
    }

    #[test]
    fn zero_input_decays_state_monotonically() {
        // Impulse at t=0 then zeros: |h| per channel and state shrinks each step.
        let mut raw = random_raw(12, 2, 3, 10);
        for t in 1..12 {
            raw.x[t * 2] = 0.0;
            raw.x[t * 2 + 1] = 0.0;
        }
        let (l, c, n) = (12, 2, 3);
        let mut h = vec![0.0; c * n];
        let mut prev = vec![f64::INFINITY; c * n];
        for t in 0..l {
            for ch in 0..c {
                for s in 0..n {
                    let a = -raw.a_log[ch * n + s].exp();
                    let (abar, bbar) =
                        discretize(a, raw.b[t * n + s], raw.delta[t * c + ch]).unwrap();
                    assert!(abar > 0.0 && abar < 1.0);
                    let k = ch * n + s;
                    h[k] = abar * h[k] + bbar * raw.x[t * c + ch];
                    if t > 0 {
                        assert!(h[k].abs() < prev[k]);
                    }
                    prev[k] = h[k].abs();
                }
            }
        }
    }
}
