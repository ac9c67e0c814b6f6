use crate::envs::InteractionSet;
use crate::error::{Error, Result};
use crate::metrics::{EvalResult, SeedLikes, UserRanking};
use crate::tensor::Scalar;
use crate::two_tower::{top_k, TwoTowerModel};

fn check_schemas<T: Scalar>(model: &TwoTowerModel<T>, data: &InteractionSet) -> Result<()> {
    if model.spec.user_schema != data.user_schema
        || model.spec.content_schema != data.content_schema
    {
        return Err(Error::SchemaMismatch(
            "model and evaluation data use different feature schemas".into(),
        ));
    }
    Ok(())
}

/// Candidate scores of every evaluation user. Users and items are embedded
/// once; scores are inner products of the embeddings.
pub fn candidate_scores<T: Scalar>(
    model: &TwoTowerModel<T>,
    data: &InteractionSet,
) -> Result<Vec<Vec<T>>> {
    check_schemas(model, data)?;
    let rows: Vec<_> = data.eval.iter().map(|u| u.row.clone()).collect();
    let users = model.embed_users(&rows)?;
    let items = model.embed_items(&data.items)?;
    Ok(data
        .eval
        .iter()
        .enumerate()
        .map(|(i, u)| {
            u.candidates
                .iter()
                .map(|&c| {
                    users
                        .row(i)
                        .iter()
                        .zip(items.row(c))
                        .map(|(&a, &b)| a * b)
                        .sum()
                })
                .collect()
        })
        .collect())
}

/// Full candidate ranking of every evaluation user, ties by ascending index.
pub fn rank_eval_users<T: Scalar>(
    model: &TwoTowerModel<T>,
    data: &InteractionSet,
) -> Result<Vec<UserRanking>> {
    candidate_scores(model, data)?
        .iter()
        .zip(&data.eval)
        .map(|(scores, u)| {
            Ok(UserRanking {
                ranked: top_k(scores, scores.len())?,
                relevant: u.relevant(),
            })
        })
        .collect()
}

/// Rankings with every tie resolved against the relevant items. Metrics on
/// these equal the ordinary ones when scores are distinct and drop when a
/// ranking owes its hits to tie order.
pub fn rank_eval_users_tie_pessimistic<T: Scalar>(
    model: &TwoTowerModel<T>,
    data: &InteractionSet,
) -> Result<Vec<UserRanking>> {
    Ok(candidate_scores(model, data)?
        .iter()
        .zip(&data.eval)
        .map(|(scores, u)| {
            let mut ranked: Vec<usize> = (0..scores.len()).collect();
            ranked.sort_by(|&a, &b| {
                scores[b]
                    .partial_cmp(&scores[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(u.relevance[a].cmp(&u.relevance[b]))
                    .then(a.cmp(&b))
            });
            UserRanking {
                ranked,
                relevant: u.relevant(),
            }
        })
        .collect())
}

pub fn evaluate<T: Scalar>(
    model: &TwoTowerModel<T>,
    data: &InteractionSet,
    ks: &[usize],
    seed: u64,
) -> Result<EvalResult> {
    Ok(EvalResult::from_rankings(
        rank_eval_users(model, data)?,
        ks,
        seed,
    ))
}

/// Each user's top-|liked| recommendations next to their likes, in item ids.
pub fn seed_likes(result: &EvalResult, data: &InteractionSet) -> SeedLikes {
    let to_items = |u: usize, pos: &[usize]| {
        pos.iter()
            .map(|&p| data.eval[u].candidates[p])
            .collect::<Vec<_>>()
    };
    SeedLikes {
        n_items: data.items.len(),
        recommended: result
            .users
            .iter()
            .enumerate()
            .map(|(u, r)| to_items(u, &r.ranked[..r.relevant.len()]))
            .collect(),
        liked: result
            .users
            .iter()
            .enumerate()
            .map(|(u, r)| to_items(u, &r.relevant))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::spotify::{self, SpotifyConfig};
    use crate::harness::config::{DatasetSpec, Preset, RunConfig};
    use crate::layers::EmbedderKind;
    use crate::metrics::Metric;

    fn tiny() -> (RunConfig, InteractionSet) {
        let cfg = SpotifyConfig {
            n_train: 64,
            n_test_users: 10,
            probe_users: 200,
            ..Default::default()
        };
        let c = RunConfig::preset(Preset::Tiny, DatasetSpec::Spotify(cfg), EmbedderKind::Mamba);
        let data = spotify::generate(cfg, 3).unwrap().1;
        (c, data)
    }

    #[test]
    fn distinct_scores_agree_with_pessimistic_order() {
        let (c, data) = tiny();
        let model = TwoTowerModel::<f64>::new(
            c.tower_spec(data.user_schema.clone(), data.content_schema.clone()),
            1,
        )
        .unwrap();
        let scores = candidate_scores(&model, &data).unwrap();
        let a = rank_eval_users(&model, &data).unwrap();
        let b = rank_eval_users_tie_pessimistic(&model, &data).unwrap();
        for ((s, x), y) in scores.iter().zip(&a).zip(&b) {
            let mut sorted = s.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted.windows(2).all(|w| w[0] != w[1]) {
                assert_eq!(x.ranked, y.ranked);
            }
        }
    }

    #[test]
    fn constant_scores_have_no_pessimistic_hits() {
        let (c, data) = tiny();
        let mut model = TwoTowerModel::<f64>::new(
            c.tower_spec(data.user_schema.clone(), data.content_schema.clone()),
            1,
        )
        .unwrap();
        for t in model.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let ties = EvalResult::from_rankings(
            rank_eval_users_tie_pessimistic(&model, &data).unwrap(),
            &[5],
            0,
        );
        let plain = evaluate(&model, &data, &[5], 0).unwrap();
        assert_eq!(ties.get(Metric::HitRatio, 5), Some(0.0));
        let first_five = data
            .eval
            .iter()
            .filter(|u| u.relevance[..5].iter().any(|&r| r))
            .count();
        assert_eq!(
            plain.get(Metric::HitRatio, 5),
            Some(first_five as f64 / data.eval.len() as f64)
        );
    }

    #[test]
    fn evaluation_leaves_model_unchanged() {
        let (c, data) = tiny();
        let model = TwoTowerModel::<f32>::new(
            c.tower_spec(data.user_schema.clone(), data.content_schema.clone()),
            2,
        )
        .unwrap();
        let before = candidate_scores(&model, &data).unwrap();
        let snapshot = model.params.clone();
        evaluate(&model, &data, &[1, 5], 0).unwrap();
        assert_eq!(candidate_scores(&model, &data).unwrap(), before);
        assert!(model
            .params
            .tensors()
            .zip(snapshot.tensors())
            .all(|(a, b)| a == b));
    }
}
