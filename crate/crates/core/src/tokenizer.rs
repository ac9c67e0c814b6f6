//! Feature tokenizer: one `d`-dimensional token per tabular feature, plus a
//! trailing `[CLS]` token.
//!
//! A numeric value `x_j` becomes `x_j · w_j + b_j`; a categorical index `i`
//! becomes row `i` of the lookup table `W_j` plus `b_j`. The `[CLS]` token is
//! the token of a constant numeric input 1 with its own `(w, b)`, placed last
//! so that a causal sequence layer can aggregate every feature into it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    Categorical { cardinality: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

impl Feature {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Numeric,
        }
    }

    pub fn categorical(name: impl Into<String>, cardinality: usize) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Categorical { cardinality },
        }
    }
}

/// Ordered feature descriptors. The order is part of the model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<Feature>,
}

impl FeatureSchema {
    pub fn new(features: Vec<Feature>) -> Result<Self> {
        for f in &features {
            if let FeatureKind::Categorical { cardinality: 0 } = f.kind {
                return Err(Error::InvalidArgument(format!(
                    "categorical feature {} needs cardinality >= 1",
                    f.name
                )));
            }
        }
        Ok(Self { features })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Validates that `row` conforms: arity, kinds, and category ranges.
    pub fn check(&self, row: &FeatureRow) -> Result<()> {
        if row.0.len() != self.features.len() {
            return Err(Error::Arity {
                expected: self.features.len(),
                got: row.0.len(),
            });
        }
        for (f, v) in self.features.iter().zip(&row.0) {
            match (f.kind, v) {
                (FeatureKind::Numeric, FeatureValue::Numeric(_)) => {}
                (FeatureKind::Categorical { cardinality }, FeatureValue::Categorical(i)) => {
                    if *i >= cardinality {
                        return Err(Error::OutOfVocabulary {
                            feature: f.name.clone(),
                            index: *i,
                            cardinality,
                        });
                    }
                }
                (FeatureKind::Numeric, _) => {
                    return Err(Error::FeatureKind {
                        feature: f.name.clone(),
                        expected: "numeric",
                    })
                }
                (FeatureKind::Categorical { .. }, _) => {
                    return Err(Error::FeatureKind {
                        feature: f.name.clone(),
                        expected: "categorical",
                    })
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Categorical(usize),
    Numeric(f64),
}

impl FeatureValue {
    pub fn as_f64(self) -> f64 {
        match self {
            FeatureValue::Numeric(v) => v,
            FeatureValue::Categorical(i) => i as f64,
        }
    }
}

/// One user or content item.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow(pub Vec<FeatureValue>);

impl FeatureRow {
    pub fn values(&self) -> &[FeatureValue] {
        &self.0
    }
}

/// Trainable-parameter count of a tokenizer for `schema` with token size `d`.
pub fn param_count(schema: &FeatureSchema, d: usize) -> usize {
    let per_feature: usize = schema
        .features
        .iter()
        .map(|f| match f.kind {
            FeatureKind::Numeric => 2,
            FeatureKind::Categorical { cardinality } => cardinality + 1,
        })
        .sum();
    d * (per_feature + 2)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum TokenParams {
    Numeric { weight: ParamId, bias: ParamId },
    Categorical { table: ParamId, bias: ParamId },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureTokenizer {
    pub schema: FeatureSchema,
    pub d: usize,
    features: Vec<TokenParams>,
    cls_weight: ParamId,
    cls_bias: ParamId,
}

impl FeatureTokenizer {
    /// All parameters drawn from uniform(±1/√d).
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        schema: FeatureSchema,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument(
                "token dimension must be >= 1".into(),
            ));
        }
        let bound = 1.0 / (d as f64).sqrt();
        let features = schema
            .features
            .iter()
            .enumerate()
            .map(|(j, f)| {
                let base = format!("{name}.{j}.{}", f.name);
                match f.kind {
                    FeatureKind::Numeric => TokenParams::Numeric {
                        weight: store.add_uniform(format!("{base}.weight"), [d], bound, rng),
                        bias: store.add_uniform(format!("{base}.bias"), [d], bound, rng),
                    },
                    FeatureKind::Categorical { cardinality } => TokenParams::Categorical {
                        table: store.add_uniform(
                            format!("{base}.table"),
                            [cardinality, d],
                            bound,
                            rng,
                        ),
                        bias: store.add_uniform(format!("{base}.bias"), [d], bound, rng),
                    },
                }
            })
            .collect();
        let cls_weight = store.add_uniform(format!("{name}.cls.weight"), [d], bound, rng);
        let cls_bias = store.add_uniform(format!("{name}.cls.bias"), [d], bound, rng);
        Ok(Self {
            schema,
            d,
            features,
            cls_weight,
            cls_bias,
        })
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.schema, self.d)
    }

    /// Number of tokens per row (`features + 1`).
    pub fn seq_len(&self) -> usize {
        self.schema.len() + 1
    }

    /// Tokenizes a batch of rows into `[B, k + 1, d]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        rows: &[&FeatureRow],
    ) -> Result<Var> {
        for r in rows {
            self.schema.check(r)?;
        }
        let n = rows.len();
        let d = self.d;
        let mut tokens = Vec::with_capacity(self.seq_len());
        for (j, fp) in self.features.iter().enumerate() {
            let tok = match *fp {
                TokenParams::Numeric { weight, bias } => {
                    let col: Vec<T> = rows
                        .iter()
                        .map(|r| T::from_f64_lossy(r.0[j].as_f64()))
                        .collect();
                    let col = tape.constant(Tensor::new([n], col)?);
                    let scaled = tape.outer(col, p[weight])?;
                    tape.add(scaled, p[bias])?
                }
                TokenParams::Categorical { table, bias } => {
                    let idx: Vec<usize> = rows
                        .iter()
                        .map(|r| match r.0[j] {
                            FeatureValue::Categorical(i) => i,
                            FeatureValue::Numeric(_) => unreachable!("schema checked"),
                        })
                        .collect();
                    let looked = tape.embedding(p[table], &idx)?;
                    tape.add(looked, p[bias])?
                }
            };
            tokens.push(tape.reshape(tok, [n, 1, d])?);
        }
        let ones = tape.constant(Tensor::full([n], T::one()));
        let cls = tape.outer(ones, p[self.cls_weight])?;
        let cls = tape.add(cls, p[self.cls_bias])?;
        tokens.push(tape.reshape(cls, [n, 1, d])?);
        tape.concat(&tokens, 1)
    }

    /// Token sequence `[k + 1, d]` of a single row.
    pub fn tokenize<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        row: &FeatureRow,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let t = self.forward(&mut tape, &p, &[row])?;
        tape.value(t).clone().reshape([self.seq_len(), self.d])
    }
}
