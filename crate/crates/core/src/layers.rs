//! Sequence layers that turn a token sequence into an embedding: the Mamba
//! block and the post-norm Transformer encoder layer, plus stacking.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Bound, ParamId, ParamStore};
use crate::ssm::{ScanKernel, SelectiveSsm};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Mamba,
    Transformer,
}

impl EmbedderKind {
    pub fn label(self) -> &'static str {
        match self {
            EmbedderKind::Mamba => "Mamba",
            EmbedderKind::Transformer => "Transformer",
        }
    }
}

impl std::fmt::Display for EmbedderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for EmbedderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mamba" => Ok(EmbedderKind::Mamba),
            "transformer" => Ok(EmbedderKind::Transformer),
            other => Err(Error::InvalidArgument(format!(
                "unknown embedder kind {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MambaConfig {
    pub layers: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub state_size: usize,
    /// Rank of the step-size projection; `None` means `ceil(d / 16)`.
    pub dt_rank: Option<usize>,
}

impl Default for MambaConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            expand: 2,
            conv_width: 16,
            state_size: 16,
            dt_rank: None,
        }
    }
}

impl MambaConfig {
    pub fn dt_rank_for(&self, d: usize) -> usize {
        self.dt_rank.unwrap_or(d.div_ceil(16))
    }

    /// Closed-form parameter count of one layer at model width `d`.
    pub fn layer_param_count(&self, d: usize) -> usize {
        let c = self.expand * d;
        let (n, w, r) = (self.state_size, self.conv_width, self.dt_rank_for(d));
        2 * d * c           // gate + input expansion
            + c * w + c     // depthwise conv
            + c * (r + 2 * n) // x -> (dt, B, C)
            + r * c + c     // dt projection
            + c * n + c     // A_log, D
            + c * d         // contraction
            + 2 * d // LayerNorm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
    /// Attention dropout; only 0 is supported.
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            ffn_width: 2048,
            dropout: 0.0,
        }
    }
}

impl TransformerConfig {
    pub fn layer_param_count(&self, d: usize) -> usize {
        let f = self.ffn_width;
        4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderConfig {
    Mamba(MambaConfig),
    Transformer(TransformerConfig),
}

impl EmbedderConfig {
    pub fn kind(&self) -> EmbedderKind {
        match self {
            EmbedderConfig::Mamba(_) => EmbedderKind::Mamba,
            EmbedderConfig::Transformer(_) => EmbedderKind::Transformer,
        }
    }

    pub fn layers(&self) -> usize {
        match self {
            EmbedderConfig::Mamba(c) => c.layers,
            EmbedderConfig::Transformer(c) => c.layers,
        }
    }

    /// Closed-form trainable-parameter count of the stack at width `d`.
    pub fn param_count(&self, d: usize) -> usize {
        match self {
            EmbedderConfig::Mamba(c) => c.layers * c.layer_param_count(d),
            EmbedderConfig::Transformer(c) => c.layers * c.layer_param_count(d),
        }
    }
}

/// Gated SSM branch, contraction, then LayerNorm. No
/// residual connection.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MambaLayer {
    pub d: usize,
    pub conv_width: usize,
    pub gate_proj: Linear,
    pub in_proj: Linear,
    pub conv_kernels: ParamId,
    pub conv_bias: ParamId,
    pub ssm: SelectiveSsm,
    pub out_proj: Linear,
    pub norm: LayerNorm,
}

impl MambaLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        cfg: &MambaConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.expand == 0 || cfg.conv_width == 0 || cfg.state_size == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid mamba config {cfg:?}"
            )));
        }
        let c = cfg.expand * d;
        let gate_proj = Linear::new(store, &format!("{name}.gate_proj"), d, c, false, rng);
        let in_proj = Linear::new(store, &format!("{name}.in_proj"), d, c, false, rng);
        let bound = 1.0 / (cfg.conv_width as f64).sqrt();
        let conv_kernels = store.add_uniform(
            format!("{name}.conv.kernels"),
            [c, cfg.conv_width],
            bound,
            rng,
        );
        let conv_bias = store.add_uniform(format!("{name}.conv.bias"), [c], bound, rng);
        let ssm = SelectiveSsm::new(
            store,
            &format!("{name}.ssm"),
            c,
            cfg.state_size,
            cfg.dt_rank_for(d),
            rng,
        );
        let out_proj = Linear::new(store, &format!("{name}.out_proj"), c, d, false, rng);
        let norm = LayerNorm::new(store, &format!("{name}.norm"), d);
        Ok(Self {
            d,
            conv_width: cfg.conv_width,
            gate_proj,
            in_proj,
            conv_kernels,
            conv_bias,
            ssm,
            out_proj,
            norm,
        })
    }

    pub fn param_count(&self) -> usize {
        let c = self.in_proj.out_dim;
        self.gate_proj.param_count()
            + self.in_proj.param_count()
            + c * (self.conv_width + 1)
            + self.ssm.param_count()
            + self.out_proj.param_count()
            + self.norm.param_count()
    }

    /// `x[B, L, d] -> [B, L, d]`
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        kernel: ScanKernel,
    ) -> Result<Var> {
        let right = self.in_proj.forward(tape, p, x)?;
        let right = tape.causal_conv1d(right, p[self.conv_kernels], p[self.conv_bias])?;
        let right = tape.silu(right);
        let right = self.ssm.forward(tape, p, right, kernel)?;
        let left = self.gate_proj.forward(tape, p, x)?;
        let left = tape.silu(left);
        let gated = tape.mul(right, left)?;
        let out = self.out_proj.forward(tape, p, gated)?;
        self.norm.forward(tape, p, out)
    }
}

/// Post-norm encoder layer: `LN(x + MHA(x))`, then `LN(h + FFN(h))`.
/// Attention is bidirectional and there is no positional encoding.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformerLayer {
    pub d: usize,
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm1: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: LayerNorm,
}

impl TransformerLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        cfg: &TransformerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.heads == 0 || !d.is_multiple_of(cfg.heads) {
            return Err(Error::InvalidArgument(format!(
                "{} heads do not divide model width {d}",
                cfg.heads
            )));
        }
        if cfg.dropout != 0.0 {
            return Err(Error::InvalidArgument("attention dropout must be 0".into()));
        }
        Ok(Self {
            d,
            heads: cfg.heads,
            q: Linear::new(store, &format!("{name}.attn.q"), d, d, true, rng),
            k: Linear::new(store, &format!("{name}.attn.k"), d, d, true, rng),
            v: Linear::new(store, &format!("{name}.attn.v"), d, d, true, rng),
            o: Linear::new(store, &format!("{name}.attn.o"), d, d, true, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            ffn_in: Linear::new(
                store,
                &format!("{name}.ffn.in"),
                d,
                cfg.ffn_width,
                true,
                rng,
            ),
            ffn_out: Linear::new(
                store,
                &format!("{name}.ffn.out"),
                cfg.ffn_width,
                d,
                true,
                rng,
            ),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
        })
    }

    pub fn param_count(&self) -> usize {
        [
            &self.q,
            &self.k,
            &self.v,
            &self.o,
            &self.ffn_in,
            &self.ffn_out,
        ]
        .iter()
        .map(|l| l.param_count())
        .sum::<usize>()
            + self.norm1.param_count()
            + self.norm2.param_count()
    }

    fn split_heads<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        batch: usize,
        len: usize,
    ) -> Result<Var> {
        let dh = self.d / self.heads;
        let x = tape.reshape(x, [batch, len, self.heads, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, [batch * self.heads, len, dh])
    }

    /// Multi-head self-attention output `[B, L, d]` and the attention weights
    /// `[B * heads, L, L]`.
    pub fn attention<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
    ) -> Result<(Var, Var)> {
        let (batch, len) = batch_and_len(tape, x, self.d)?;
        let dh = self.d / self.heads;
        let q = self.q.forward(tape, p, x)?;
        let k = self.k.forward(tape, p, x)?;
        let v = self.v.forward(tape, p, x)?;
        let q = self.split_heads(tape, q, batch, len)?;
        let k = self.split_heads(tape, k, batch, len)?;
        let v = self.split_heads(tape, v, batch, len)?;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let scores = tape.batch_matmul(q, k, true, scale)?;
        let weights = tape.softmax(scores)?;
        let ctx = tape.batch_matmul(weights, v, false, T::one())?;
        let ctx = tape.reshape(ctx, [batch, self.heads, len, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, [batch, len, self.d])?;
        Ok((self.o.forward(tape, p, ctx)?, weights))
    }

    /// `x[B, L, d] -> [B, L, d]`
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let (attn, _) = self.attention(tape, p, x)?;
        let h = tape.add(x, attn)?;
        let h = self.norm1.forward(tape, p, h)?;
        let f = self.ffn_in.forward(tape, p, h)?;
        let f = tape.relu(f);
        let f = self.ffn_out.forward(tape, p, f)?;
        let out = tape.add(h, f)?;
        self.norm2.forward(tape, p, out)
    }
}

fn batch_and_len<T: Scalar>(tape: &Tape<T>, x: Var, d: usize) -> Result<(usize, usize)> {
    match *tape.shape(x) {
        [b, l, dd] if dd == d && l >= 1 => Ok((b, l)),
        _ => Err(Error::shape("sequence layer", tape.shape(x), &[d])),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Mamba(MambaLayer),
    Transformer(TransformerLayer),
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Mamba(l) => l.param_count(),
            Layer::Transformer(l) => l.param_count(),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        kernel: ScanKernel,
    ) -> Result<Var> {
        match self {
            Layer::Mamba(l) => {
                batch_and_len(tape, x, l.d)?;
                l.forward(tape, p, x, kernel)
            }
            Layer::Transformer(l) => l.forward(tape, p, x),
        }
    }
}

/// Ordered layers of one kind sharing model width `d`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbedderStack {
    pub config: EmbedderConfig,
    pub d: usize,
    pub layers: Vec<Layer>,
}

impl EmbedderStack {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        config: EmbedderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..config.layers())
            .map(|i| {
                let lname = format!("{name}.{i}");
                Ok(match &config {
                    EmbedderConfig::Mamba(c) => {
                        Layer::Mamba(MambaLayer::new(store, &lname, d, c, rng)?)
                    }
                    EmbedderConfig::Transformer(c) => {
                        Layer::Transformer(TransformerLayer::new(store, &lname, d, c, rng)?)
                    }
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, d, layers })
    }

    pub fn kind(&self) -> EmbedderKind {
        self.config.kind()
    }

    /// Runs every layer over `tokens[B, L, d]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tokens: Var,
        kernel: ScanKernel,
    ) -> Result<Var> {
        batch_and_len(tape, tokens, self.d)?;
        self.layers
            .iter()
            .try_fold(tokens, |x, layer| layer.forward(tape, p, x, kernel))
    }

    /// Final-position ([CLS]) output of the stack, `[B, d]`.
    pub fn embed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tokens: Var,
        kernel: ScanKernel,
    ) -> Result<Var> {
        let out = self.forward(tape, p, tokens, kernel)?;
        let last = tape.shape(out)[1] - 1;
        tape.index_axis(out, 1, last)
    }
}

/// Trainable parameters in the stack (tokenizer and head excluded).
pub fn stack_param_count(stack: &EmbedderStack) -> usize {
    stack.layers.iter().map(Layer::param_count).sum()
}

/// Runs a stack on a single sequence `[L, d]` without tracking gradients.
pub fn forward_sequence<T: Scalar>(
    stack: &EmbedderStack,
    store: &ParamStore<T>,
    tokens: &Tensor<T>,
    kernel: ScanKernel,
) -> Result<Tensor<T>> {
    let (len, d) = match *tokens.shape() {
        [l, d] => (l, d),
        _ => return Err(Error::shape("forward_sequence", tokens.shape(), &[stack.d])),
    };
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let x = tape.constant(tokens.clone().reshape([1, len, d])?);
    let y = stack.forward(&mut tape, &p, x, kernel)?;
    tape.value(y).clone().reshape([len, d])
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn closed_form_counts_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (d, cfg) in [
            (
                8,
                EmbedderConfig::Mamba(MambaConfig {
                    layers: 2,
                    expand: 2,
                    conv_width: 3,
                    state_size: 4,
                    dt_rank: None,
                }),
            ),
            (
                12,
                EmbedderConfig::Transformer(TransformerConfig {
                    layers: 3,
                    heads: 3,
                    ffn_width: 10,
                    dropout: 0.0,
                }),
            ),
        ] {
            let mut store = ParamStore::<f32>::new();
            let stack = EmbedderStack::new(&mut store, "s", d, cfg, &mut rng).unwrap();
            assert_eq!(stack_param_count(&stack), store.scalar_count());
            assert_eq!(cfg.param_count(d), store.scalar_count());
        }
    }

    #[test]
    fn zero_layers_has_no_parameters() {
        let mut store = ParamStore::<f32>::new();
        let cfg = EmbedderConfig::Mamba(MambaConfig {
            layers: 0,
            ..Default::default()
        });
        let stack =
            EmbedderStack::new(&mut store, "s", 4, cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(stack_param_count(&stack), 0);
    }

    #[test]
    fn one_transformer_layer_hand_count() {
        // d=4, h=2, f=8: q,k,v,o 4*(16+4)=80; ffn 4*8+8 + 8*4+4 = 76; norms 16
        let cfg = TransformerConfig {
            layers: 1,
            heads: 2,
            ffn_width: 8,
            dropout: 0.0,
        };
        let mut store = ParamStore::<f64>::new();
        TransformerLayer::new(&mut store, "t", 4, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(store.scalar_count(), 172);
        assert_eq!(cfg.layer_param_count(4), 172);
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = TransformerConfig {
            layers: 1,
            heads: 3,
            ffn_width: 8,
            dropout: 0.0,
        };
        let mut store = ParamStore::<f64>::new();
        assert!(
            TransformerLayer::new(&mut store, "t", 4, &cfg, &mut ChaCha8Rng::seed_from_u64(1))
                .is_err()
        );
    }

    #[test]
    fn kind_parses() {
        assert_eq!(
            "mamba".parse::<EmbedderKind>().unwrap(),
            EmbedderKind::Mamba
        );
        assert_eq!(
            "Transformer".parse::<EmbedderKind>().unwrap(),
            EmbedderKind::Transformer
        );
        assert!("rnn".parse::<EmbedderKind>().is_err());
    }

    fn mamba_cfg() -> MambaConfig {
        MambaConfig {
            layers: 2,
            expand: 2,
            conv_width: 3,
            state_size: 4,
            dt_rank: None,
        }
    }

    fn tf_cfg() -> TransformerConfig {
        TransformerConfig {
            layers: 1,
            heads: 2,
            ffn_width: 12,
            dropout: 0.0,
        }
    }

    fn stack(cfg: EmbedderConfig, d: usize, seed: u64) -> (ParamStore<f64>, EmbedderStack) {
        let mut store = ParamStore::new();
        let s = EmbedderStack::new(
            &mut store,
            "s",
            d,
            cfg,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        (store, s)
    }

    fn tokens(len: usize, d: usize, seed: u64) -> Tensor<f64> {
        Tensor::uniform([len, d], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn changed_rows(a: &Tensor<f64>, b: &Tensor<f64>, len: usize) -> Vec<bool> {
        (0..len)
            .map(|i| {
                a.row(i)
                    .iter()
                    .zip(b.row(i))
                    .any(|(x, y)| (x - y).abs() > 1e-12)
            })
            .collect()
    }

    #[test]
    fn stacks_preserve_shape() {
        for cfg in [
            EmbedderConfig::Mamba(mamba_cfg()),
            EmbedderConfig::Transformer(tf_cfg()),
        ] {
            let (store, s) = stack(cfg, 6, 1);
            let y = forward_sequence(&s, &store, &tokens(5, 6, 2), ScanKernel::Sequential).unwrap();
            assert_eq!(y.shape(), &[5, 6]);
        }
    }

    #[test]
    fn mamba_stack_is_causal() {
        let (store, s) = stack(EmbedderConfig::Mamba(mamba_cfg()), 6, 3);
        let x = tokens(5, 6, 4);
        let y = forward_sequence(&s, &store, &x, ScanKernel::Sequential).unwrap();
        for t in 0..5 {
            let mut xp = x.clone();
            xp.data_mut()[t * 6 + 2] += 0.3;
            let yp = forward_sequence(&s, &store, &xp, ScanKernel::Sequential).unwrap();
            let expect: Vec<bool> = (0..5).map(|i| i >= t).collect();
            assert_eq!(changed_rows(&y, &yp, 5), expect, "perturbed token {t}");
        }
    }

    #[test]
    fn transformer_sees_later_tokens() {
        let (store, s) = stack(EmbedderConfig::Transformer(tf_cfg()), 6, 5);
        let x = tokens(4, 6, 6);
        let y = forward_sequence(&s, &store, &x, ScanKernel::Sequential).unwrap();
        let mut xp = x.clone();
        xp.data_mut()[3 * 6] += 0.3;
        let yp = forward_sequence(&s, &store, &xp, ScanKernel::Sequential).unwrap();
        assert_eq!(changed_rows(&y, &yp, 4), vec![true; 4]);
    }

    #[test]
    fn kernels_agree_through_a_stack() {
        let (store, s) = stack(EmbedderConfig::Mamba(mamba_cfg()), 6, 7);
        let x = tokens(9, 6, 8);
        let a = forward_sequence(&s, &store, &x, ScanKernel::Sequential).unwrap();
        let b = forward_sequence(&s, &store, &x, ScanKernel::Parallel { chunk: 4 }).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn embedding_is_last_position_and_reflects_earlier_tokens() {
        for cfg in [
            EmbedderConfig::Mamba(mamba_cfg()),
            EmbedderConfig::Transformer(tf_cfg()),
        ] {
            let (store, s) = stack(cfg, 6, 9);
            let x = tokens(4, 6, 10);
            let full = forward_sequence(&s, &store, &x, ScanKernel::Sequential).unwrap();
            let embed = |x: &Tensor<f64>| {
                let mut tape = Tape::new();
                let p = store.bind(&mut tape, false);
                let v = tape.constant(x.clone().reshape([1, 4, 6]).unwrap());
                let e = s.embed(&mut tape, &p, v, ScanKernel::Sequential).unwrap();
                tape.value(e).clone()
            };
            let e = embed(&x);
            assert_eq!(e.shape(), &[1, 6]);
            assert_eq!(e.data(), full.row(3));
            let mut xp = x.clone();
            xp.data_mut()[1] += 0.5;
            assert!(embed(&xp).max_abs_diff(&e) > 1e-9);
        }
    }

    #[test]
    fn zero_contraction_yields_norm_bias() {
        let mut store = ParamStore::<f64>::new();
        let layer = MambaLayer::new(
            &mut store,
            "m",
            4,
            &mamba_cfg(),
            &mut ChaCha8Rng::seed_from_u64(11),
        )
        .unwrap();
        store.get_mut(layer.out_proj.weight).data_mut().fill(0.0);
        let bias = [0.5, -1.0, 2.0, 0.25];
        store
            .get_mut(layer.norm.bias)
            .data_mut()
            .copy_from_slice(&bias);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(tokens(3, 4, 12).reshape([1, 3, 4]).unwrap());
        let y = layer
            .forward(&mut tape, &p, x, ScanKernel::Sequential)
            .unwrap();
        for row in tape.value(y).data().chunks(4) {
            assert_eq!(row, bias);
        }
    }

    #[test]
    fn mamba_layer_matches_composed_oracle() {
        // Rebuilds the block from the primitive ops and the standalone SSM.
        let mut store = ParamStore::<f64>::new();
        let layer = MambaLayer::new(
            &mut store,
            "m",
            4,
            &mamba_cfg(),
            &mut ChaCha8Rng::seed_from_u64(13),
        )
        .unwrap();
        let x = tokens(5, 4, 14);
        let out = {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let y = layer
                .forward(&mut tape, &p, xv, ScanKernel::Sequential)
                .unwrap();
            tape.value(y).clone()
        };
        let silu = |v: f64| v / (1.0 + (-v).exp());
        let lin = |x: &Tensor<f64>, l: &Linear| x.matmul(store.get(l.weight)).unwrap();
        let right = lin(&x, &layer.in_proj);
        let (c, w) = (8, 3);
        let k = store.get(layer.conv_kernels).data();
        let cb = store.get(layer.conv_bias).data();
        let mut conv = vec![0.0; 5 * c];
        for t in 0..5 {
            for ch in 0..c {
                let mut acc = cb[ch];
                for j in 0..w {
                    let src = t as isize - (w - 1 - j) as isize;
                    if src >= 0 {
                        acc += k[ch * w + j] * right.data()[src as usize * c + ch];
                    }
                }
                conv[t * c + ch] = silu(acc);
            }
        }
        let ssm_out = scan_sequential_ref(&layer.ssm, &store, &Tensor::new([5, c], conv).unwrap());
        let left = lin(&x, &layer.gate_proj).map(silu);
        let gated: Vec<f64> = ssm_out
            .data()
            .iter()
            .zip(left.data())
            .map(|(a, b)| a * b)
            .collect();
        let contracted = lin(&Tensor::new([5, c], gated).unwrap(), &layer.out_proj);
        for (row, got) in contracted.data().chunks(4).zip(out.data().chunks(4)) {
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            for (v, g) in row.iter().zip(got) {
                assert!(((v - mean) / (var + 1e-5).sqrt() - g).abs() < 1e-10);
            }
        }
    }

    fn scan_sequential_ref(
        ssm: &SelectiveSsm,
        store: &ParamStore<f64>,
        x: &Tensor<f64>,
    ) -> Tensor<f64> {
        crate::ssm::scan_sequential(ssm, store, x).unwrap()
    }

    fn attention_of(
        layer: &TransformerLayer,
        store: &ParamStore<f64>,
        x: &Tensor<f64>,
    ) -> (Tensor<f64>, Tensor<f64>) {
        let [l, d] = [x.shape()[0], x.shape()[1]];
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone().reshape([1, l, d]).unwrap());
        let (out, weights) = layer.attention(&mut tape, &p, xv).unwrap();
        (
            tape.value(out).clone().reshape([l, d]).unwrap(),
            tape.value(weights).clone(),
        )
    }

    fn tf_layer(seed: u64) -> (ParamStore<f64>, TransformerLayer) {
        let mut store = ParamStore::new();
        let layer = TransformerLayer::new(
            &mut store,
            "t",
            6,
            &tf_cfg(),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        (store, layer)
    }

    fn affine(x: &Tensor<f64>, l: &Linear, store: &ParamStore<f64>) -> Tensor<f64> {
        let y = x.matmul(store.get(l.weight)).unwrap();
        let b = store.get(l.bias.unwrap()).data();
        let n = b.len();
        let data = y
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        Tensor::new(y.shape().to_vec(), data).unwrap()
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let (store, layer) = tf_layer(15);
        let x = tokens(1, 6, 16);
        let (out, weights) = attention_of(&layer, &store, &x);
        assert!(weights.data().iter().all(|&w| w == 1.0));
        let expect = affine(&affine(&x, &layer.v, &store), &layer.o, &store);
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn attention_matches_per_head_oracle() {
        let (store, layer) = tf_layer(17);
        let (l, d, h, dh) = (4, 6, 2, 3);
        let x = tokens(l, d, 18);
        let (out, weights) = attention_of(&layer, &store, &x);
        let q = affine(&x, &layer.q, &store);
        let k = affine(&x, &layer.k, &store);
        let v = affine(&x, &layer.v, &store);
        let mut ctx = vec![0.0; l * d];
        for head in 0..h {
            for i in 0..l {
                let scores: Vec<f64> = (0..l)
                    .map(|j| {
                        (0..dh)
                            .map(|e| q.row(i)[head * dh + e] * k.row(j)[head * dh + e])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                let probs: Vec<f64> = scores.iter().map(|s| (s - m).exp() / z).collect();
                let got = &weights.data()[(head * l + i) * l..(head * l + i + 1) * l];
                assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (a, b) in probs.iter().zip(got) {
                    assert!((a - b).abs() < 1e-12);
                }
                for j in 0..l {
                    for e in 0..dh {
                        ctx[i * d + head * dh + e] += probs[j] * v.row(j)[head * dh + e];
                    }
                }
            }
        }
        let expect = affine(&Tensor::new([l, d], ctx).unwrap(), &layer.o, &store);
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn transformer_layer_is_permutation_equivariant() {
        let (store, s) = stack(EmbedderConfig::Transformer(tf_cfg()), 6, 19);
        let x = tokens(4, 6, 20);
        let perm = [2, 0, 3, 1];
        let permuted: Vec<f64> = perm.iter().flat_map(|&i| x.row(i).to_vec()).collect();
        let y = forward_sequence(&s, &store, &x, ScanKernel::Sequential).unwrap();
        let yp = forward_sequence(
            &s,
            &store,
            &Tensor::new([4, 6], permuted).unwrap(),
            ScanKernel::Sequential,
        )
        .unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for (a, b) in yp.row(dst).iter().zip(y.row(src)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reference_width_counts() {
        let m = EmbedderConfig::Mamba(MambaConfig::default());
        let t = EmbedderConfig::Transformer(TransformerConfig::default());
        assert_eq!(m.param_count(128), 479_232);
        assert_eq!(t.param_count(128), 1_186_048);
        let ratio = m.param_count(128) as f64 / t.param_count(128) as f64;
        assert!((ratio - 0.404).abs() < 1e-3);
    }
}
