//! Attack-dimension reduction: decoders mapping a reduced optimization
//! variable `delta' in R^{d'}` to a full-dimension perturbation
//! `D(delta') in R^d`.
//!
//! Four modes:
//! - `Identity`: no reduction (`d' = d`), the full-dimension baseline.
//! - `Bilin`: channel-wise bilinear upscaling; needs no training.
//! - `Conv`: an offline-trained convolutional decoder, loaded from an MDL1
//!   file and run as a plain layer chain.
//! - `LinearAe`: the decoder half of a linear autoencoder trained here by
//!   full-batch gradient descent on reconstruction error.
//!
//! Decoders are immutable after construction; `decode` is a pure function
//! and safe to call concurrently. Only the decoder half ever participates
//! in an attack; the encoder of a linear AE exists solely for training and
//! is stored for reproducibility.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{bilinear_resize, chain_output_shape, run_layers, LayerSpec};
use crate::tensor::{Shape, Tensor};

/// A perturbation decoder `D: R^{d'} -> R^d`.
#[derive(Debug, Clone)]
pub enum Decoder {
    Identity {
        shape: Shape,
    },
    Bilin {
        reduced: Shape,
        full: Shape,
    },
    Conv {
        reduced: Shape,
        full: Shape,
        layers: Vec<LayerSpec>,
    },
    LinearAe {
        reduced: Shape,
        full: Shape,
        /// `d' x d` encoder matrix, kept for reproducibility of training.
        encode: Vec<Vec<f64>>,
        /// `d x d'` decoder matrix.
        decode: Vec<Vec<f64>>,
    },
}

impl Decoder {
    pub fn identity(shape: Shape) -> Decoder {
        Decoder::Identity { shape }
    }

    /// Bilinear upscaling decoder. Channel counts must match and the
    /// reduced dimension must not exceed the full one.
    pub fn bilin(reduced: Shape, full: Shape) -> Result<Decoder> {
        if reduced.channels != full.channels {
            return Err(Error::shape(
                "bilinear decoder channels",
                full.channels,
                reduced.channels,
            ));
        }
        if reduced.len() > full.len() {
            return Err(Error::InvalidArgument(format!(
                "reduced dimension {} exceeds full dimension {}",
                reduced.len(),
                full.len()
            )));
        }
        Ok(Decoder::Bilin { reduced, full })
    }

    /// Convolutional decoder from a validated layer chain.
    pub fn conv(reduced: Shape, full: Shape, layers: Vec<LayerSpec>) -> Result<Decoder> {
        let out = chain_output_shape(&layers, reduced)?;
        if out != full {
            return Err(Error::shape("conv decoder output", full, out));
        }
        if reduced.len() > full.len() {
            return Err(Error::InvalidArgument(format!(
                "reduced dimension {} exceeds full dimension {}",
                reduced.len(),
                full.len()
            )));
        }
        Ok(Decoder::Conv { reduced, full, layers })
    }

    pub fn reduced_shape(&self) -> Shape {
        match self {
            Decoder::Identity { shape } => *shape,
            Decoder::Bilin { reduced, .. }
            | Decoder::Conv { reduced, .. }
            | Decoder::LinearAe { reduced, .. } => *reduced,
        }
    }

    pub fn full_shape(&self) -> Shape {
        match self {
            Decoder::Identity { shape } => *shape,
            Decoder::Bilin { full, .. }
            | Decoder::Conv { full, .. }
            | Decoder::LinearAe { full, .. } => *full,
        }
    }

    /// `d' / d`, the attack-dimension reduction ratio.
    pub fn reduction_ratio(&self) -> f64 {
        self.reduced_shape().len() as f64 / self.full_shape().len() as f64
    }

    /// Short mode tag used in method labels and manifests.
    pub fn mode_name(&self) -> &'static str {
        match self {
            Decoder::Identity { .. } => "identity",
            Decoder::Bilin { .. } => "bilin",
            Decoder::Conv { .. } => "conv",
            Decoder::LinearAe { .. } => "linear_ae",
        }
    }

    /// Maps `delta'` to a full-dimension perturbation.
    pub fn decode(&self, delta_prime: &Tensor) -> Result<Tensor> {
        if delta_prime.shape() != self.reduced_shape() {
            return Err(Error::shape(
                "decoder input",
                self.reduced_shape(),
                delta_prime.shape(),
            ));
        }
        match self {
            Decoder::Identity { .. } => Ok(delta_prime.clone()),
            Decoder::Bilin { full, .. } => {
                Ok(bilinear_resize(delta_prime, full.height, full.width))
            }
            Decoder::Conv { layers, .. } => Ok(run_layers(layers, delta_prime)),
            Decoder::LinearAe { full, decode, .. } => {
                let z = delta_prime.data();
                let data = decode
                    .iter()
                    .map(|row| row.iter().zip(z).map(|(w, v)| w * v).sum())
                    .collect();
                Tensor::new(*full, data)
            }
        }
    }

    /// Serializes to an MDL1 container with `"role":"decoder"`.
    pub fn to_mdl1(&self) -> String {
        let reduced = self.reduced_shape();
        let full = self.full_shape();
        let file = Mdl1Decoder {
            format: "MDL1".into(),
            role: "decoder".into(),
            mode: self.mode_name().into(),
            reduced_shape: [reduced.height, reduced.width, reduced.channels],
            full_shape: [full.height, full.width, full.channels],
            layers: match self {
                Decoder::Conv { layers, .. } => Some(layers.clone()),
                _ => None,
            },
            encode: match self {
                Decoder::LinearAe { encode, .. } => Some(encode.clone()),
                _ => None,
            },
            decode: match self {
                Decoder::LinearAe { decode, .. } => Some(decode.clone()),
                _ => None,
            },
        };
        serde_json::to_string(&file).expect("decoder serialization cannot fail")
    }

    pub fn from_mdl1(text: &str) -> Result<Self> {
        let file: Mdl1Decoder = serde_json::from_str(text)?;
        if file.format != "MDL1" {
            return Err(Error::Format(format!(
                "expected format MDL1, got {:?}",
                file.format
            )));
        }
        if file.role != "decoder" {
            return Err(Error::Format(format!(
                "expected role \"decoder\", got {:?}",
                file.role
            )));
        }
        let reduced = Shape::new(
            file.reduced_shape[0],
            file.reduced_shape[1],
            file.reduced_shape[2],
        )?;
        let full = Shape::new(file.full_shape[0], file.full_shape[1], file.full_shape[2])?;
        match file.mode.as_str() {
            "identity" => {
                if reduced != full {
                    return Err(Error::shape("identity decoder", full, reduced));
                }
                Ok(Decoder::Identity { shape: full })
            }
            "bilin" => Decoder::bilin(reduced, full),
            "conv" => {
                let layers = file
                    .layers
                    .ok_or_else(|| Error::Format("conv decoder needs a layer chain".into()))?;
                Decoder::conv(reduced, full, layers)
            }
            "linear_ae" => {
                let encode = file
                    .encode
                    .ok_or_else(|| Error::Format("linear_ae decoder needs an encode matrix".into()))?;
                let decode = file
                    .decode
                    .ok_or_else(|| Error::Format("linear_ae decoder needs a decode matrix".into()))?;
                validate_linear_ae(&encode, &decode, reduced.len(), full.len())?;
                Ok(Decoder::LinearAe { reduced, full, encode, decode })
            }
            other => Err(Error::Format(format!("unknown decoder mode {other:?}"))),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_mdl1())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_mdl1(&text)
    }
}

fn validate_linear_ae(
    encode: &[Vec<f64>],
    decode: &[Vec<f64>],
    d_prime: usize,
    d: usize,
) -> Result<()> {
    if encode.len() != d_prime || encode.iter().any(|row| row.len() != d) {
        return Err(Error::shape("linear AE encode matrix", format!("{d_prime}x{d}"), ""));
    }
    if decode.len() != d || decode.iter().any(|row| row.len() != d_prime) {
        return Err(Error::shape("linear AE decode matrix", format!("{d}x{d_prime}"), ""));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Mdl1Decoder {
    format: String,
    role: String,
    mode: String,
    reduced_shape: [usize; 3],
    full_shape: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layers: Option<Vec<LayerSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    encode: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    decode: Option<Vec<Vec<f64>>>,
}

/// Result of linear autoencoder training.
#[derive(Debug, Clone)]
pub struct TrainedAe {
    pub decoder: Decoder,
    /// Final mean squared reconstruction error over the training set.
    pub mse: f64,
    /// MSE after each epoch (index 0 is after the first update).
    pub mse_history: Vec<f64>,
}

/// Mean squared reconstruction error of `x -> decode(encode(x))`.
pub fn reconstruction_mse(encode: &[Vec<f64>], decode: &[Vec<f64>], data: &[Tensor]) -> f64 {
    let mut total = 0.0;
    for x in data {
        let z = matvec(encode, x.data());
        let rec = matvec(decode, &z);
        total += rec
            .iter()
            .zip(x.data())
            .map(|(r, v)| (r - v) * (r - v))
            .sum::<f64>();
    }
    total / data.len() as f64
}

fn matvec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(w, x)| w * x).sum())
        .collect()
}

/// Trains a linear autoencoder `x ~ D(E(x))` by full-batch gradient descent
/// on the mean squared reconstruction error, and returns its decoder half.
///
/// Both maps are pure linear (no bias), so `decode(0) = 0` and the zero
/// perturbation stays zero. Initialization is uniform in
/// `[-1/sqrt(d), 1/sqrt(d)]` from the given seed; training is deterministic.
pub fn train_linear_ae(
    data: &[Tensor],
    d_prime: usize,
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<TrainedAe> {
    let first = data
        .first()
        .ok_or_else(|| Error::InvalidArgument("training set is empty".into()))?;
    let full = first.shape();
    let d = full.len();
    for t in data {
        if t.shape() != full {
            return Err(Error::shape("training tensor", full, t.shape()));
        }
    }
    if d_prime >= d {
        return Err(Error::InvalidArgument(format!(
            "reduced dimension {d_prime} must be smaller than {d}"
        )));
    }
    if d_prime == 0 {
        return Err(Error::InvalidArgument("reduced dimension must be >= 1".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = 1.0 / (d as f64).sqrt();
    let mut encode: Vec<Vec<f64>> = (0..d_prime)
        .map(|_| (0..d).map(|_| rng.random_range(-a..=a)).collect())
        .collect();
    let mut decode: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..d_prime).map(|_| rng.random_range(-a..=a)).collect())
        .collect();

    let n = data.len() as f64;
    let mut mse_history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut grad_e = vec![vec![0.0; d]; d_prime];
        let mut grad_d = vec![vec![0.0; d_prime]; d];
        for x in data {
            let z = matvec(&encode, x.data());
            let rec = matvec(&decode, &z);
            let residual: Vec<f64> = rec.iter().zip(x.data()).map(|(r, v)| r - v).collect();
            // dL/dD = (2/n) r z^T,  dL/dE = (2/n) D^T r x^T
            for (gd_row, r) in grad_d.iter_mut().zip(&residual) {
                for (g, zj) in gd_row.iter_mut().zip(&z) {
                    *g += 2.0 / n * r * zj;
                }
            }
            let back: Vec<f64> = (0..d_prime)
                .map(|k| {
                    decode
                        .iter()
                        .zip(&residual)
                        .map(|(row, r)| row[k] * r)
                        .sum::<f64>()
                })
                .collect();
            for (ge_row, bk) in grad_e.iter_mut().zip(&back) {
                for (g, xv) in ge_row.iter_mut().zip(x.data()) {
                    *g += 2.0 / n * bk * xv;
                }
            }
        }
        for (row, grow) in encode.iter_mut().zip(&grad_e) {
            for (w, g) in row.iter_mut().zip(grow) {
                *w -= learning_rate * g;
            }
        }
        for (row, grow) in decode.iter_mut().zip(&grad_d) {
            for (w, g) in row.iter_mut().zip(grow) {
                *w -= learning_rate * g;
            }
        }
        mse_history.push(reconstruction_mse(&encode, &decode, data));
    }

    let mse = mse_history
        .last()
        .copied()
        .unwrap_or_else(|| reconstruction_mse(&encode, &decode, data));
    let reduced = Shape::new(1, d_prime, 1)?;
    Ok(TrainedAe {
        decoder: Decoder::LinearAe { reduced, full, encode, decode },
        mse,
        mse_history,
    })
}
