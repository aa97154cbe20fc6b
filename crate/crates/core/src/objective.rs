//! The scalar attack objective
//! `f(delta') = Dist(x, x0) + lambda * Loss(x, log F(x), t)` with
//! `x = clip(x0 + D(delta'))`.
//!
//! `Dist` is the squared L2 norm of the perturbation actually scored (after
//! clipping to the unit box), and `Loss` is a hinge on log-probabilities:
//! targeted attacks push the target class to the top, untargeted attacks
//! push the original class off the top. The log transform is monotonic, so
//! it never changes which class ranks first.

use serde::{Deserialize, Serialize};

use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{clip_unit_box, lp_distortion, Tensor};

/// Scores are floored at this value before taking logs, so saturated
/// probabilities never produce non-finite loss values.
pub const SCORE_FLOOR: f64 = 1e-30;

#[inline]
pub(crate) fn floored_ln(score: f64) -> f64 {
    score.max(SCORE_FLOOR).ln()
}

/// Attack goal: drive the top-1 prediction to `target`, or away from the
/// natural image's `original` class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Targeted { target: usize },
    Untargeted { original: usize },
}

/// Everything needed to score one candidate perturbation.
#[derive(Debug, Clone)]
pub struct AttackSpec {
    pub mode: AttackMode,
    /// Current regularization coefficient; the engine retunes it during a
    /// run.
    pub lambda: f64,
    pub x0: Tensor,
}

/// One evaluation of the attack objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    /// `dist_term + lambda * loss_term`.
    pub total: f64,
    /// Squared L2 distortion of the clipped adversarial image.
    pub dist_term: f64,
    /// Hinge loss on log scores, before the lambda weighting.
    pub loss_term: f64,
    /// The probability vector returned by the model.
    pub scores: Vec<f64>,
    /// Whether the top-1 prediction satisfies the attack goal.
    pub is_success: bool,
}

/// Index of the maximal score; ties break toward the lowest class index.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in scores.iter().enumerate() {
        if *v > best_val {
            best_val = *v;
            best = i;
        }
    }
    best
}

fn check_class(scores: &[f64], class: usize) -> Result<()> {
    if scores.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {}",
            scores.len()
        )));
    }
    if class >= scores.len() {
        return Err(Error::InvalidArgument(format!(
            "class index {class} out of range for {} classes",
            scores.len()
        )));
    }
    Ok(())
}

fn max_log_other(scores: &[f64], excluded: usize) -> f64 {
    scores
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != excluded)
        .map(|(_, s)| floored_ln(*s))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Targeted hinge: `max { max_{j != t} log s_j - log s_t , 0 }`.
pub fn targeted_loss(scores: &[f64], target: usize) -> Result<f64> {
    check_class(scores, target)?;
    Ok((max_log_other(scores, target) - floored_ln(scores[target])).max(0.0))
}

/// Untargeted hinge: `max { log s_t0 - max_{j != t0} log s_j , 0 }`.
pub fn untargeted_loss(scores: &[f64], original: usize) -> Result<f64> {
    check_class(scores, original)?;
    Ok((floored_ln(scores[original]) - max_log_other(scores, original)).max(0.0))
}

fn mode_loss(scores: &[f64], mode: &AttackMode) -> Result<f64> {
    match mode {
        AttackMode::Targeted { target } => targeted_loss(scores, *target),
        AttackMode::Untargeted { original } => untargeted_loss(scores, *original),
    }
}

fn mode_success(scores: &[f64], mode: &AttackMode) -> bool {
    let top = argmax_lowest(scores);
    match mode {
        AttackMode::Targeted { target } => top == *target,
        AttackMode::Untargeted { original } => top != *original,
    }
}

/// Evaluates the objective at `delta_prime`, consuming exactly one model
/// query. Also returns the adversarial image that was scored.
pub fn evaluate_with_image(
    spec: &AttackSpec,
    model: &Model,
    decoder: &Decoder,
    delta_prime: &[f64],
) -> Result<(ObjectiveValue, Tensor)> {
    let dp = Tensor::new(decoder.reduced_shape(), delta_prime.to_vec())?;
    let perturbation = decoder.decode(&dp)?;
    let x = clip_unit_box(&spec.x0.add(&perturbation)?);
    let scores = model.query(&x)?;
    let dist = lp_distortion(&x, &spec.x0, 2.0)?;
    let dist_term = dist * dist;
    let loss_term = mode_loss(&scores, &spec.mode)?;
    let is_success = mode_success(&scores, &spec.mode);
    let value = ObjectiveValue {
        total: dist_term + spec.lambda * loss_term,
        dist_term,
        loss_term,
        scores,
        is_success,
    };
    Ok((value, x))
}

/// Evaluates the objective at `delta_prime`, consuming exactly one model
/// query.
pub fn evaluate(
    spec: &AttackSpec,
    model: &Model,
    decoder: &Decoder,
    delta_prime: &[f64],
) -> Result<ObjectiveValue> {
    evaluate_with_image(spec, model, decoder, delta_prime).map(|(value, _)| value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelInfo, SyntheticKind};
    use crate::tensor::Shape;

    #[test]
    fn targeted_loss_inactive_when_target_dominates() {
        assert_eq!(targeted_loss(&[0.7, 0.2, 0.1], 0).unwrap(), 0.0);
    }

    #[test]
    fn targeted_loss_hand_value() {
        let loss = targeted_loss(&[0.7, 0.2, 0.1], 1).unwrap();
        assert!((loss - (0.7f64 / 0.2).ln()).abs() < 1e-12);
        assert!((loss - 1.25276).abs() < 1e-5);
    }

    #[test]
    fn targeted_loss_zero_on_uniform_ties() {
        for t in 0..3 {
            assert_eq!(targeted_loss(&[1.0 / 3.0; 3], t).unwrap(), 0.0);
        }
    }

    #[test]
    fn untargeted_loss_hand_value() {
        let loss = untargeted_loss(&[0.7, 0.2, 0.1], 0).unwrap();
        assert!((loss - (0.7f64 / 0.2).ln()).abs() < 1e-12);
    }

    #[test]
    fn untargeted_loss_zero_once_misclassified() {
        assert_eq!(untargeted_loss(&[0.2, 0.7, 0.1], 0).unwrap(), 0.0);
        assert_eq!(untargeted_loss(&[1.0 / 3.0; 3], 0).unwrap(), 0.0);
    }

    #[test]
    fn losses_reject_degenerate_score_vectors() {
        assert!(targeted_loss(&[1.0], 0).is_err());
        assert!(untargeted_loss(&[1.0], 0).is_err());
        assert!(targeted_loss(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn losses_survive_zero_scores() {
        let loss = targeted_loss(&[1.0, 0.0], 1).unwrap();
        assert!(loss.is_finite());
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax_lowest(&[0.4, 0.4, 0.2]), 0);
        assert_eq!(argmax_lowest(&[0.1, 0.5, 0.5]), 1);
    }

    fn test_setup() -> (AttackSpec, Model, Decoder) {
        let shape = Shape::new(2, 2, 1).unwrap();
        let model = Model::generate(21, shape, 3, SyntheticKind::LinearSoftmax).unwrap();
        let x0 = model.sample_image(4);
        let spec = AttackSpec {
            mode: AttackMode::Targeted { target: 1 },
            lambda: 2.5,
            x0,
        };
        (spec, model, Decoder::identity(shape))
    }

    #[test]
    fn evaluate_zero_perturbation() {
        let (spec, model, decoder) = test_setup();
        let value = evaluate(&spec, &model, &decoder, &[0.0; 4]).unwrap();
        assert_eq!(value.dist_term, 0.0);
        assert!((value.total - spec.lambda * value.loss_term).abs() < 1e-12);
        assert_eq!(model.queries(), 1);
    }

    #[test]
    fn evaluate_total_decomposition() {
        let (spec, model, decoder) = test_setup();
        let value = evaluate(&spec, &model, &decoder, &[0.05, -0.02, 0.2, 0.01]).unwrap();
        let expected = value.dist_term + spec.lambda * value.loss_term;
        assert!((value.total - expected).abs() <= 1e-9 * expected.abs().max(1.0));
        assert!(value.loss_term >= 0.0);
        assert!(value.dist_term >= 0.0);
    }

    #[test]
    fn evaluate_matches_hand_composition() {
        // Recompute total from the raw pieces: query, hinge, distortion.
        let (spec, model, decoder) = test_setup();
        let dp = [0.1, -0.3, 0.0, 0.25];
        let value = evaluate(&spec, &model, &decoder, &dp).unwrap();

        let perturbation = Tensor::new(spec.x0.shape(), dp.to_vec()).unwrap();
        let x = clip_unit_box(&spec.x0.add(&perturbation).unwrap());
        let scores = model.query(&x).unwrap();
        let dist = lp_distortion(&x, &spec.x0, 2.0).unwrap();
        let expected = dist * dist + spec.lambda * targeted_loss(&scores, 1).unwrap();
        assert!((value.total - expected).abs() < 1e-12);
    }

    #[test]
    fn evaluate_dist_term_ignores_lambda() {
        let (mut spec, model, decoder) = test_setup();
        let dp = [0.1, 0.1, 0.1, 0.1];
        let a = evaluate(&spec, &model, &decoder, &dp).unwrap();
        spec.lambda = 100.0;
        let b = evaluate(&spec, &model, &decoder, &dp).unwrap();
        assert_eq!(a.dist_term, b.dist_term);
        assert_eq!(a.loss_term, b.loss_term);
    }

    #[test]
    fn success_ranking_matches_raw_scores() {
        // The log transform must not change the winner.
        let (spec, model, decoder) = test_setup();
        let value = evaluate(&spec, &model, &decoder, &[0.3, 0.0, -0.2, 0.4]).unwrap();
        let top = argmax_lowest(&value.scores);
        assert_eq!(value.is_success, top == 1);
    }

    #[test]
    fn untargeted_success_flag() {
        let shape = Shape::new(1, 2, 1).unwrap();
        let model = Model::new(
            ModelInfo { input_shape: shape, num_classes: 2 },
            vec![
                crate::layers::LayerSpec::Dense {
                    weight: vec![vec![4.0, 0.0], vec![0.0, 4.0]],
                    bias: vec![0.0, 0.0],
                },
                crate::layers::LayerSpec::Softmax,
            ],
        )
        .unwrap();
        let x0 = Tensor::new(shape, vec![1.0, 0.0]).unwrap();
        let spec = AttackSpec {
            mode: AttackMode::Untargeted { original: 0 },
            lambda: 1.0,
            x0,
        };
        let decoder = Decoder::identity(shape);
        let stay = evaluate(&spec, &model, &decoder, &[0.0, 0.0]).unwrap();
        assert!(!stay.is_success);
        assert!(stay.loss_term > 0.0);
        let flip = evaluate(&spec, &model, &decoder, &[-1.0, 1.0]).unwrap();
        assert!(flip.is_success);
        assert_eq!(flip.loss_term, 0.0);
    }
}
