use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{sub_seed, RunConfig, Stream};
use super::evaluate::evaluate;
use crate::autodiff::Tape;
use crate::envs::InteractionSet;
use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::FeatureRow;
use crate::two_tower::TwoTowerModel;

/// Hit ratios on the evaluation users at one training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub hr1: f64,
    pub hr5: f64,
    pub hr10: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: TwoTowerModel<T>,
    /// Loss of every step, before that step's update.
    pub losses: Vec<f64>,
    pub trajectory: Vec<TrajectoryPoint>,
}

fn trajectory_point<T: Scalar>(
    model: &TwoTowerModel<T>,
    data: &InteractionSet,
    step: usize,
) -> Result<TrajectoryPoint> {
    let r = evaluate(model, data, &[1, 5, 10], 0)?;
    let hr = |k| r.get(Metric::HitRatio, k).unwrap_or(0.0);
    Ok(TrajectoryPoint {
        step,
        hr1: hr(1),
        hr5: hr(5),
        hr10: hr(10),
    })
}

/// `½·mean((score − target)²)` on one batch; returns the loss and the
/// gradient of every parameter.
pub fn batch_loss<T: Scalar>(
    model: &TwoTowerModel<T>,
    users: &[&FeatureRow],
    items: &[&FeatureRow],
    targets: &[f64],
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, true);
    let scores = model.pair_scores(&mut tape, &p, users, items)?;
    let target = tape.constant(Tensor::from_f64([targets.len()], targets)?);
    let diff = tape.sub(scores, target)?;
    let sq = tape.square(diff);
    let mean = tape.mean(sq);
    let loss = tape.scale(mean, T::from_f64_lossy(0.5));
    tape.backward(loss)?;
    Ok((
        tape.value(loss).item().as_f64(),
        model.params.grads(&tape, &p),
    ))
}

/// Trains a fresh model for one seed on `data`.
pub fn train<T: Scalar>(
    config: &RunConfig,
    data: &InteractionSet,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidArgument("no training interactions".into()));
    }
    let spec = config.tower_spec(data.user_schema.clone(), data.content_schema.clone());
    let mut model = TwoTowerModel::<T>::new(spec, sub_seed(seed, Stream::Model))?;
    let mut adam = AdamState::new(&model.params, AdamConfig::with_lr(config.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, Stream::Batches));
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut cursor = order.len();

    let mut losses = Vec::with_capacity(config.steps);
    let mut trajectory = Vec::new();
    if config.eval_cadence > 0 && !data.eval.is_empty() {
        trajectory.push(trajectory_point(&model, data, 0)?);
    }
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let users: Vec<&FeatureRow> = batch.iter().map(|&i| data.train_user(i)).collect();
        let items: Vec<&FeatureRow> = batch.iter().map(|&i| data.train_item(i)).collect();
        let targets: Vec<f64> = batch.iter().map(|&i| data.train[i].target).collect();
        let (loss, grads) = batch_loss(&model, &users, &items, &targets)?;
        let grad_norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v.as_f64().powi(2))
            .sum::<f64>()
            .sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                loss,
                lr: config.lr,
                grad_norm,
            });
        }
        adam_step(&mut model.params, &grads, &mut adam)?;
        losses.push(loss);
        if config.eval_cadence > 0 && (step + 1) % config.eval_cadence == 0 && !data.eval.is_empty()
        {
            trajectory.push(trajectory_point(&model, data, step + 1)?);
        }
    }
    Ok(TrainOutcome {
        model,
        losses,
        trajectory,
    })
}
