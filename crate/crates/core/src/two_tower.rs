//! Two-tower retrieval model: each tower is tokenizer, embedder stack and a
//! two-layer ReLU head; the score is the inner product of the head outputs.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{stack_param_count, EmbedderConfig, EmbedderStack};
use crate::nn::Linear;
use crate::params::{Bound, ParamStore};
use crate::ssm::ScanKernel;
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::{FeatureRow, FeatureSchema, FeatureTokenizer};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const EMBED_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: usize,
    pub out: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            out: 32,
        }
    }
}

impl HeadConfig {
    pub fn param_count(&self, d: usize) -> usize {
        d * self.hidden + self.hidden + self.hidden * self.out + self.out
    }
}

/// Architecture of both towers. The towers share every hyperparameter and
/// differ only in their feature schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TowerSpec {
    pub user_schema: FeatureSchema,
    pub content_schema: FeatureSchema,
    pub d: usize,
    pub embedder: EmbedderConfig,
    pub head: HeadConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Tower {
    pub tokenizer: FeatureTokenizer,
    pub stack: EmbedderStack,
    pub hidden: Linear,
    pub out: Linear,
}

impl Tower {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        schema: &FeatureSchema,
        spec: &TowerSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let tokenizer =
            FeatureTokenizer::new(store, &format!("{name}.tok"), schema.clone(), spec.d, rng)?;
        let stack =
            EmbedderStack::new(store, &format!("{name}.stack"), spec.d, spec.embedder, rng)?;
        let hidden = Linear::new(
            store,
            &format!("{name}.head.hidden"),
            spec.d,
            spec.head.hidden,
            true,
            rng,
        );
        let out = Linear::new(
            store,
            &format!("{name}.head.out"),
            spec.head.hidden,
            spec.head.out,
            true,
            rng,
        );
        Ok(Self {
            tokenizer,
            stack,
            hidden,
            out,
        })
    }

    /// Head outputs `[B, out]` for a batch of rows.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        rows: &[&FeatureRow],
    ) -> Result<Var> {
        let tokens = self.tokenizer.forward(tape, p, rows)?;
        let cls = self.stack.embed(tape, p, tokens, ScanKernel::Sequential)?;
        let h = self.hidden.forward(tape, p, cls)?;
        let h = tape.relu(h);
        let o = self.out.forward(tape, p, h)?;
        Ok(tape.relu(o))
    }

    pub fn counts(&self) -> TowerCounts {
        let tokenizer = self.tokenizer.param_count();
        let embedder = stack_param_count(&self.stack);
        let head = self.hidden.param_count() + self.out.param_count();
        TowerCounts {
            tokenizer,
            embedder,
            head,
            total: tokenizer + embedder + head,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TowerCounts {
    pub tokenizer: usize,
    pub embedder: usize,
    pub head: usize,
    pub total: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCounts {
    pub user: TowerCounts,
    pub content: TowerCounts,
}

#[derive(Clone, Debug)]
pub struct TwoTowerModel<T> {
    pub spec: TowerSpec,
    pub seed: u64,
    pub user: Tower,
    pub content: Tower,
    pub params: ParamStore<T>,
}

impl<T: Scalar> TwoTowerModel<T> {
    /// Initializes both towers from `seed` (user tower first).
    pub fn new(spec: TowerSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let user = Tower::new(&mut params, "user", &spec.user_schema, &spec, &mut rng)?;
        let content = Tower::new(
            &mut params,
            "content",
            &spec.content_schema,
            &spec,
            &mut rng,
        )?;
        Ok(Self {
            spec,
            seed,
            user,
            content,
            params,
        })
    }

    pub fn counts(&self) -> ModelCounts {
        ModelCounts {
            user: self.user.counts(),
            content: self.content.counts(),
        }
    }

    /// Per-pair scores `[B]` for aligned user and content batches.
    pub fn pair_scores(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        users: &[&FeatureRow],
        items: &[&FeatureRow],
    ) -> Result<Var> {
        if users.len() != items.len() {
            return Err(Error::InvalidArgument(format!(
                "{} users paired with {} items",
                users.len(),
                items.len()
            )));
        }
        let u = self.user.forward(tape, p, users)?;
        let c = self.content.forward(tape, p, items)?;
        let prod = tape.mul(u, c)?;
        tape.sum_last(prod)
    }

    fn embed(&self, tower: &Tower, rows: &[FeatureRow]) -> Result<Tensor<T>> {
        let out = self.spec.head.out;
        let mut data = Vec::with_capacity(rows.len() * out);
        for chunk in rows.chunks(EMBED_BATCH) {
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, false);
            let refs: Vec<&FeatureRow> = chunk.iter().collect();
            let e = tower.forward(&mut tape, &p, &refs)?;
            data.extend_from_slice(tape.value(e).data());
        }
        Tensor::new([rows.len(), out], data)
    }

    /// User-tower outputs `[n, out]`, no gradient tracking.
    pub fn embed_users(&self, rows: &[FeatureRow]) -> Result<Tensor<T>> {
        self.embed(&self.user, rows)
    }

    /// Content-tower outputs `[n, out]`, no gradient tracking.
    pub fn embed_items(&self, rows: &[FeatureRow]) -> Result<Tensor<T>> {
        self.embed(&self.content, rows)
    }

    pub fn score(&self, user: &FeatureRow, item: &FeatureRow) -> Result<T> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let s = self.pair_scores(&mut tape, &p, &[user], &[item])?;
        Ok(tape.value(s).data()[0])
    }

    /// Scores of one user against every item.
    pub fn score_items(&self, user: &FeatureRow, items: &[FeatureRow]) -> Result<Vec<T>> {
        let u = self.embed_users(std::slice::from_ref(user))?;
        let c = self.embed_items(items)?;
        Ok((0..items.len())
            .map(|i| u.row(0).iter().zip(c.row(i)).map(|(&a, &b)| a * b).sum())
            .collect())
    }

    /// Top-`k` item indices for one user, best first.
    pub fn rank_items(
        &self,
        user: &FeatureRow,
        items: &[FeatureRow],
        k: usize,
    ) -> Result<Vec<usize>> {
        let scores = self.score_items(user, items)?;
        top_k(&scores, k)
    }

    pub fn to_checkpoint(&self, config: serde_json::Value) -> Checkpoint<T> {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            precision: T::NAME.to_string(),
            seed: self.seed,
            spec: self.spec.clone(),
            config,
            params: self.params.clone(),
        }
    }

    /// Rebuilds the model structure from the checkpoint spec and installs the
    /// stored parameters.
    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: ck.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        if ck.precision != T::NAME {
            return Err(Error::SchemaMismatch(format!(
                "checkpoint precision {} loaded as {}",
                ck.precision,
                T::NAME
            )));
        }
        let mut model = Self::new(ck.spec, ck.seed)?;
        model.params.check_layout(&ck.params)?;
        model.params = ck.params;
        Ok(model)
    }

    pub fn save(&self, path: &Path, config: serde_json::Value) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint(config))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint<T> = serde_json::from_str(&text)?;
        let config = ck.config.clone();
        Ok((Self::from_checkpoint(ck)?, config))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub format_version: u32,
    pub precision: String,
    pub seed: u64,
    pub spec: TowerSpec,
    pub config: serde_json::Value,
    pub params: ParamStore<T>,
}

/// Indices of the `k` largest scores, descending; equal scores keep
/// ascending index order.
pub fn top_k<T: Scalar>(scores: &[T], k: usize) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot rank an empty item set".into(),
        ));
    }
    if k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds {} items",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::layers::{MambaConfig, TransformerConfig};
    use crate::tokenizer::{Feature, FeatureValue};

    fn spec(embedder: EmbedderConfig) -> TowerSpec {
        TowerSpec {
            user_schema: FeatureSchema::new(vec![
                Feature::numeric("a"),
                Feature::categorical("g", 3),
            ])
            .unwrap(),
            content_schema: FeatureSchema::new(vec![Feature::categorical("item", 5)]).unwrap(),
            d: 8,
            embedder,
            head: HeadConfig { hidden: 6, out: 4 },
        }
    }

    fn mamba() -> EmbedderConfig {
        EmbedderConfig::Mamba(MambaConfig {
            layers: 1,
            expand: 2,
            conv_width: 2,
            state_size: 2,
            dt_rank: None,
        })
    }

    fn user(a: f64, g: usize) -> FeatureRow {
        FeatureRow(vec![FeatureValue::Numeric(a), FeatureValue::Categorical(g)])
    }

    fn item(i: usize) -> FeatureRow {
        FeatureRow(vec![FeatureValue::Categorical(i)])
    }

    #[test]
    fn score_is_dot_of_tower_outputs() {
        let m = TwoTowerModel::<f64>::new(spec(mamba()), 3).unwrap();
        let u = user(0.7, 2);
        let items: Vec<FeatureRow> = (0..5).map(item).collect();
        let ue = m.embed_users(std::slice::from_ref(&u)).unwrap();
        let ie = m.embed_items(&items).unwrap();
        for (i, it) in items.iter().enumerate() {
            let dot: f64 = ue.row(0).iter().zip(ie.row(i)).map(|(a, b)| a * b).sum();
            assert!((m.score(&u, it).unwrap() - dot).abs() < 1e-12);
        }
        assert!(ie.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zeroed_content_head_scores_zero() {
        let mut m = TwoTowerModel::<f64>::new(spec(mamba()), 4).unwrap();
        m.params.get_mut(m.content.out.weight).data_mut().fill(0.0);
        m.params
            .get_mut(m.content.out.bias.unwrap())
            .data_mut()
            .fill(0.0);
        for g in 0..3 {
            assert_eq!(m.score(&user(1.5, g), &item(1)).unwrap(), 0.0);
        }
    }

    #[test]
    fn scaling_a_head_scales_the_score() {
        // ReLU is positively homogeneous, so scaling the last layer by α scales the score by α.
        let mut m = TwoTowerModel::<f64>::new(spec(mamba()), 5).unwrap();
        let before = m.score(&user(0.2, 1), &item(3)).unwrap();
        for t in [m.user.out.weight, m.user.out.bias.unwrap()] {
            m.params
                .get_mut(t)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v *= 2.5);
        }
        let after = m.score(&user(0.2, 1), &item(3)).unwrap();
        assert!((after - 2.5 * before).abs() < 1e-12);
    }

    #[test]
    fn top_k_tie_rule_and_sort_oracle() {
        assert_eq!(top_k(&[1.0f64; 6], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(top_k(&[0.0, 0.1, 5.0, 0.2], 1).unwrap(), vec![2]);
        assert!(top_k::<f64>(&[], 0).is_err());
        assert!(top_k(&[1.0f64], 2).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let scores: Vec<f64> = (0..10)
                .map(|_| (rng.random_range(0..6) as f64) * 0.5)
                .collect();
            let mut pairs: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
            // Descending score, ascending index: a lexicographic sort on (-s, i).
            pairs.sort_by(|a, b| (-a.0, a.1).partial_cmp(&(-b.0, b.1)).unwrap());
            let expect: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            assert_eq!(top_k(&scores, 10).unwrap(), expect);
        }
    }

    #[test]
    fn head_count_at_reference_width() {
        assert_eq!(HeadConfig::default().param_count(192), 14_432);
        let s = TowerSpec {
            d: 192,
            head: HeadConfig::default(),
            embedder: EmbedderConfig::Mamba(MambaConfig {
                layers: 0,
                ..Default::default()
            }),
            ..spec(mamba())
        };
        let m = TwoTowerModel::<f32>::new(s, 0).unwrap();
        let c = m.counts();
        assert_eq!(c.user.head, 14_432);
        assert_eq!(c.user.embedder, 0);
        assert_eq!(c.user.total + c.content.total, m.params.scalar_count());
        assert_eq!(
            c.user.tokenizer,
            m.params.scalar_count_with_prefix("user.tok")
        );
    }

    #[test]
    fn checkpoint_round_trip_reproduces_scores() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        for embedder in [
            mamba(),
            EmbedderConfig::Transformer(TransformerConfig {
                layers: 1,
                heads: 2,
                ffn_width: 8,
                dropout: 0.0,
            }),
        ] {
            let m = TwoTowerModel::<f32>::new(spec(embedder), 7).unwrap();
            m.save(&path, serde_json::json!({"lr": 1e-4})).unwrap();
            let (back, cfg) = TwoTowerModel::<f32>::load(&path).unwrap();
            assert_eq!(cfg["lr"], 1e-4);
            for i in 0..5 {
                assert_eq!(
                    m.score(&user(-0.3, 0), &item(i)).unwrap(),
                    back.score(&user(-0.3, 0), &item(i)).unwrap()
                );
            }
            assert!(matches!(
                TwoTowerModel::<f64>::load(&path),
                Err(Error::SchemaMismatch(_))
            ));
        }
    }

    #[test]
    fn wrong_schema_rows_rejected() {
        let m = TwoTowerModel::<f64>::new(spec(mamba()), 8).unwrap();
        assert!(m.score(&item(0), &item(0)).is_err());
        assert!(m.score(&user(0.0, 0), &item(5)).is_err());
    }
}
