//! The opaque prediction oracle: a feed-forward classifier behind a
//! query-counting interface.
//!
//! A [`Model`] maps an image in `[0,1]^d` to a probability vector over `K`
//! classes. Every call to [`Model::query`] costs exactly one unit on the
//! attached [`QueryCounter`]; query counts are the primary efficiency metric
//! of every attack. Weights are read-only after construction, so queries are
//! safe under concurrent invocation and counts from parallel evaluations sum
//! exactly.
//!
//! Models are stored in the `MDL1` JSON format:
//!
//! ```json
//! {"format":"MDL1","input_shape":[h,w,c],"num_classes":K,"layers":[...]}
//! ```
//!
//! The layer chain must end in a softmax producing `K` probabilities.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{chain_output_shape, LayerSpec};
use crate::objective::{floored_ln, AttackMode};
use crate::tensor::{Shape, Tensor};

/// Input shape and class count of a classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub input_shape: Shape,
    pub num_classes: usize,
}

/// Monotone count of scalar model evaluations.
#[derive(Debug, Default)]
pub struct QueryCounter(AtomicU64);

impl QueryCounter {
    pub fn new() -> Self {
        QueryCounter(AtomicU64::new(0))
    }

    pub fn total(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }

    /// Adds one evaluation and returns the new total (the 1-based index of
    /// the query just made).
    fn increment(&self) -> u64 {
        self.0.fetch_add(1, Ordering::SeqCst) + 1
    }
}

/// A loaded classifier with its query counter.
#[derive(Debug)]
pub struct Model {
    info: ModelInfo,
    layers: Vec<LayerSpec>,
    counter: QueryCounter,
}

impl Clone for Model {
    /// Clones weights; the clone starts with a fresh counter at zero so
    /// independent attack runs can account queries separately.
    fn clone(&self) -> Self {
        Model {
            info: self.info,
            layers: self.layers.clone(),
            counter: QueryCounter::new(),
        }
    }
}

/// Families of synthetic models for self-contained experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    LinearSoftmax,
    Mlp,
}

const MLP_HIDDEN: usize = 32;

impl Model {
    /// Validates the layer chain (shape pass, final softmax, `K` outputs)
    /// and builds an inference-ready model.
    pub fn new(info: ModelInfo, layers: Vec<LayerSpec>) -> Result<Self> {
        if info.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "classifier needs at least 2 classes, got {}",
                info.num_classes
            )));
        }
        let out = chain_output_shape(&layers, info.input_shape)?;
        if out.len() != info.num_classes {
            return Err(Error::shape(
                "classifier output",
                info.num_classes,
                out.len(),
            ));
        }
        match layers.last() {
            Some(LayerSpec::Softmax) => {}
            _ => {
                return Err(Error::Format(
                    "classifier layer chain must end with a softmax layer".into(),
                ))
            }
        }
        Ok(Model {
            info,
            layers,
            counter: QueryCounter::new(),
        })
    }

    pub fn info(&self) -> ModelInfo {
        self.info
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Total scalar evaluations made through this model instance.
    pub fn queries(&self) -> u64 {
        self.counter.total()
    }

    /// Evaluates the classifier on `x`, counting one query.
    ///
    /// Returns a probability vector: entries positive, summing to 1 within
    /// 1e-6. Errors on shape mismatch or non-finite input.
    pub fn query(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.shape() != self.info.input_shape {
            return Err(Error::shape("model input", self.info.input_shape, x.shape()));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("model input contains non-finite values".into()));
        }
        self.counter.increment();
        let out = crate::layers::run_layers(&self.layers, x);
        Ok(out.into_data())
    }

    /// True when the model is the analytic family `softmax(Wx + b)`.
    pub fn is_linear_softmax(&self) -> bool {
        self.linear_softmax_parts().is_some()
    }

    fn linear_softmax_parts(&self) -> Option<(&[Vec<f64>], &[f64])> {
        let chain: Vec<&LayerSpec> = self
            .layers
            .iter()
            .filter(|l| !matches!(l, LayerSpec::Flatten))
            .collect();
        match chain.as_slice() {
            [LayerSpec::Dense { weight, bias }, LayerSpec::Softmax] => {
                Some((weight.as_slice(), bias.as_slice()))
            }
            _ => None,
        }
    }

    /// Exact gradient at `x` of the attack objective
    /// `||x - x0||_2^2 + lambda * Loss(log softmax(Wx + b))`, by closed-form
    /// differentiation. Only available for linear-softmax models.
    ///
    /// The hinge subgradient is zero where the loss is inactive; at the
    /// active branch the argmax ties break toward the lowest class index.
    /// Does not consume a query.
    pub fn analytic_gradient(
        &self,
        x: &Tensor,
        x0: &Tensor,
        mode: &AttackMode,
        lambda: f64,
    ) -> Result<Tensor> {
        let (weight, bias) = self.linear_softmax_parts().ok_or_else(|| {
            Error::InvalidArgument(
                "analytic gradient is only defined for linear-softmax models".into(),
            )
        })?;
        if x.shape() != self.info.input_shape {
            return Err(Error::shape("model input", self.info.input_shape, x.shape()));
        }
        if x0.shape() != x.shape() {
            return Err(Error::shape("natural image", x.shape(), x0.shape()));
        }

        // Distortion term: d/dx ||x - x0||^2 = 2 (x - x0).
        let mut grad: Vec<f64> = x
            .data()
            .iter()
            .zip(x0.data())
            .map(|(a, b)| 2.0 * (a - b))
            .collect();

        if lambda != 0.0 {
            let logits: Vec<f64> = weight
                .iter()
                .zip(bias)
                .map(|(row, b)| {
                    row.iter().zip(x.data()).map(|(w, v)| w * v).sum::<f64>() + b
                })
                .collect();
            let scores = crate::layers::softmax(&logits);
            let log_scores: Vec<f64> = scores.iter().map(|s| floored_ln(*s)).collect();

            // For linear-softmax models the log-score differences are linear
            // in x, so each active hinge branch contributes a constant
            // gradient W_j - W_t.
            let branch: Option<(usize, usize)> = match mode {
                AttackMode::Targeted { target } => {
                    let t = *target;
                    let j = best_other(&log_scores, t);
                    (log_scores[j] - log_scores[t] > 0.0).then_some((j, t))
                }
                AttackMode::Untargeted { original } => {
                    let t0 = *original;
                    let j = best_other(&log_scores, t0);
                    (log_scores[t0] - log_scores[j] > 0.0).then_some((t0, j))
                }
            };
            if let Some((pos, neg)) = branch {
                for (g, (wp, wn)) in grad
                    .iter_mut()
                    .zip(weight[pos].iter().zip(weight[neg].iter()))
                {
                    *g += lambda * (wp - wn);
                }
            }
        }

        Tensor::new(x.shape(), grad)
    }

    /// Deterministic synthetic classifier: weights uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` from a ChaCha stream.
    pub fn generate(
        seed: u64,
        input_shape: Shape,
        num_classes: usize,
        kind: SyntheticKind,
    ) -> Result<Model> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "classifier needs at least 2 classes, got {num_classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = input_shape.len();
        let layers = match kind {
            SyntheticKind::LinearSoftmax => vec![
                LayerSpec::Flatten,
                random_dense(&mut rng, num_classes, d),
                LayerSpec::Softmax,
            ],
            SyntheticKind::Mlp => vec![
                LayerSpec::Flatten,
                random_dense(&mut rng, MLP_HIDDEN, d),
                LayerSpec::Relu,
                random_dense(&mut rng, num_classes, MLP_HIDDEN),
                LayerSpec::Softmax,
            ],
        };
        Model::new(
            ModelInfo {
                input_shape,
                num_classes,
            },
            layers,
        )
    }

    /// Serializes to the MDL1 JSON format.
    pub fn to_mdl1(&self) -> String {
        let file = Mdl1Classifier {
            format: "MDL1".to_string(),
            input_shape: [
                self.info.input_shape.height,
                self.info.input_shape.width,
                self.info.input_shape.channels,
            ],
            num_classes: self.info.num_classes,
            layers: self.layers.clone(),
        };
        serde_json::to_string(&file).expect("model serialization cannot fail")
    }

    pub fn from_mdl1(text: &str) -> Result<Self> {
        let probe: Mdl1Probe = serde_json::from_str(text)?;
        if probe.format != "MDL1" {
            return Err(Error::Format(format!(
                "expected format MDL1, got {:?}",
                probe.format
            )));
        }
        if let Some(role) = &probe.role {
            if role != "classifier" {
                return Err(Error::Format(format!(
                    "expected a classifier model file, got role {role:?}"
                )));
            }
        }
        let file: Mdl1Classifier = serde_json::from_str(text)?;
        let shape = Shape::new(file.input_shape[0], file.input_shape[1], file.input_shape[2])?;
        Model::new(
            ModelInfo {
                input_shape: shape,
                num_classes: file.num_classes,
            },
            file.layers,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_mdl1())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_mdl1(&text)
    }

    /// Deterministic input image with entries uniform in `[0,1]`, matching
    /// this model's input shape. Useful for self-contained experiments.
    pub fn sample_image(&self, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..self.info.input_shape.len())
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        Tensor::new(self.info.input_shape, data).unwrap()
    }
}

/// Index of the best-scoring class other than `excluded`; ties toward the
/// lowest index.
fn best_other(log_scores: &[f64], excluded: usize) -> usize {
    let mut best = usize::MAX;
    let mut best_val = f64::NEG_INFINITY;
    for (j, v) in log_scores.iter().enumerate() {
        if j != excluded && *v > best_val {
            best_val = *v;
            best = j;
        }
    }
    best
}

fn random_dense(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> LayerSpec {
    let a = 1.0 / (cols as f64).sqrt();
    let weight = (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-a..=a)).collect())
        .collect();
    let bias = (0..rows).map(|_| rng.random_range(-a..=a)).collect();
    LayerSpec::Dense { weight, bias }
}

#[derive(Serialize, Deserialize)]
struct Mdl1Classifier {
    format: String,
    input_shape: [usize; 3],
    num_classes: usize,
    layers: Vec<LayerSpec>,
}

#[derive(Deserialize)]
struct Mdl1Probe {
    format: String,
    #[serde(default)]
    role: Option<String>,
}
