//! Feed-forward layer primitives shared by classifier models and
//! convolutional decoders.
//!
//! The layer set is the smallest one that realizes the classifier and
//! decoder architectures this engine works with: dense, conv2d (stride
//! configurable, zero "same" or "valid" padding), 2x2 max-pooling, flatten,
//! ReLU, softmax, channel-wise bilinear resize, and pixel-replication
//! upsampling. All forward passes are pure functions of (weights, input).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// One layer of a feed-forward chain, as stored in MDL1 files.
///
/// Dense weights are row-major (`weight[row][col]`, `rows` outputs);
/// conv kernels are indexed `[out_channel][in_channel][ky][kx]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        weight: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
    Conv2d {
        kernel: Vec<Vec<Vec<Vec<f64>>>>,
        bias: Vec<f64>,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default = "default_same_padding")]
        same_padding: bool,
    },
    Maxpool2x2,
    Flatten,
    Relu,
    Softmax,
    BilinearResize {
        height: usize,
        width: usize,
    },
    ReplicateUpsample {
        factor: usize,
    },
}

fn default_stride() -> usize {
    1
}

fn default_same_padding() -> bool {
    true
}

impl LayerSpec {
    /// Validates this layer against the incoming shape and returns the
    /// outgoing shape. `index` is used in error messages.
    pub fn output_shape(&self, input: Shape, index: usize) -> Result<Shape> {
        let err = |message: String| Error::Layer { index, message };
        match self {
            LayerSpec::Dense { weight, bias } => {
                let rows = weight.len();
                if rows == 0 {
                    return Err(err("dense weight matrix has no rows".into()));
                }
                let cols = weight[0].len();
                if weight.iter().any(|row| row.len() != cols) {
                    return Err(err("dense weight rows have uneven lengths".into()));
                }
                if cols != input.len() {
                    return Err(err(format!(
                        "dense expects input length {cols}, got {} (shape {input})",
                        input.len()
                    )));
                }
                if bias.len() != rows {
                    return Err(err(format!(
                        "dense bias length {} does not match {} rows",
                        bias.len(),
                        rows
                    )));
                }
                Shape::new(1, 1, rows)
            }
            LayerSpec::Conv2d { kernel, bias, stride, same_padding } => {
                let out_c = kernel.len();
                if out_c == 0 {
                    return Err(err("conv2d kernel has no output channels".into()));
                }
                let in_c = kernel[0].len();
                let kh = kernel[0].first().map_or(0, |k| k.len());
                let kw = kernel[0]
                    .first()
                    .and_then(|k| k.first())
                    .map_or(0, |k| k.len());
                if in_c == 0 || kh == 0 || kw == 0 {
                    return Err(err("conv2d kernel has an empty dimension".into()));
                }
                for oc in kernel {
                    if oc.len() != in_c
                        || oc.iter().any(|ic| {
                            ic.len() != kh || ic.iter().any(|row| row.len() != kw)
                        })
                    {
                        return Err(err("conv2d kernel is ragged".into()));
                    }
                }
                if in_c != input.channels {
                    return Err(err(format!(
                        "conv2d expects {in_c} input channels, got {} (shape {input})",
                        input.channels
                    )));
                }
                if bias.len() != out_c {
                    return Err(err(format!(
                        "conv2d bias length {} does not match {out_c} filters",
                        bias.len()
                    )));
                }
                if *stride == 0 {
                    return Err(err("conv2d stride must be >= 1".into()));
                }
                let (out_h, out_w) = if *same_padding {
                    (input.height.div_ceil(*stride), input.width.div_ceil(*stride))
                } else {
                    if input.height < kh || input.width < kw {
                        return Err(err(format!(
                            "conv2d 'valid' kernel {kh}x{kw} larger than input {input}"
                        )));
                    }
                    ((input.height - kh) / stride + 1, (input.width - kw) / stride + 1)
                };
                Shape::new(out_h, out_w, out_c)
            }
            LayerSpec::Maxpool2x2 => {
                if input.height < 2 || input.width < 2 {
                    return Err(err(format!("maxpool2x2 needs spatial dims >= 2, got {input}")));
                }
                Shape::new(input.height / 2, input.width / 2, input.channels)
            }
            LayerSpec::Flatten => Shape::new(1, 1, input.len()),
            LayerSpec::Relu | LayerSpec::Softmax => Ok(input),
            LayerSpec::BilinearResize { height, width } => {
                if *height == 0 || *width == 0 {
                    return Err(err("bilinear_resize target dims must be >= 1".into()));
                }
                Shape::new(*height, *width, input.channels)
            }
            LayerSpec::ReplicateUpsample { factor } => {
                if *factor == 0 {
                    return Err(err("replicate_upsample factor must be >= 1".into()));
                }
                Shape::new(input.height * factor, input.width * factor, input.channels)
            }
        }
    }

    /// Runs this layer forward. The input shape must already be validated.
    pub fn forward(&self, input: &Tensor) -> Tensor {
        match self {
            LayerSpec::Dense { weight, bias } => {
                let x = input.data();
                let data = weight
                    .iter()
                    .zip(bias)
                    .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
                    .collect();
                Tensor::new(Shape::new(1, 1, weight.len()).unwrap(), data).unwrap()
            }
            LayerSpec::Conv2d { kernel, bias, stride, same_padding } => {
                conv2d(input, kernel, bias, *stride, *same_padding)
            }
            LayerSpec::Maxpool2x2 => maxpool2x2(input),
            LayerSpec::Flatten => {
                let shape = Shape::new(1, 1, input.len()).unwrap();
                Tensor::new(shape, input.data().to_vec()).unwrap()
            }
            LayerSpec::Relu => {
                let data = input.data().iter().map(|v| v.max(0.0)).collect();
                Tensor::new(input.shape(), data).unwrap()
            }
            LayerSpec::Softmax => {
                let data = softmax(input.data());
                Tensor::new(input.shape(), data).unwrap()
            }
            LayerSpec::BilinearResize { height, width } => bilinear_resize(input, *height, *width),
            LayerSpec::ReplicateUpsample { factor } => replicate_upsample(input, *factor),
        }
    }
}

/// Validates a chain of layers against `input`, returning the output shape.
pub fn chain_output_shape(layers: &[LayerSpec], input: Shape) -> Result<Shape> {
    let mut shape = input;
    for (index, layer) in layers.iter().enumerate() {
        shape = layer.output_shape(shape, index)?;
    }
    Ok(shape)
}

/// Runs the full chain forward.
pub fn run_layers(layers: &[LayerSpec], input: &Tensor) -> Tensor {
    let mut current = input.clone();
    for layer in layers {
        current = layer.forward(&current);
    }
    current
}

/// Numerically stable softmax: max-logit subtraction, outputs clamped to a
/// tiny positive floor so downstream code never sees an exact zero.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / sum).max(1e-300)).collect()
}

fn conv2d(
    input: &Tensor,
    kernel: &[Vec<Vec<Vec<f64>>>],
    bias: &[f64],
    stride: usize,
    same_padding: bool,
) -> Tensor {
    let in_shape = input.shape();
    let out_c = kernel.len();
    let kh = kernel[0][0].len();
    let kw = kernel[0][0][0].len();
    let (out_h, out_w, pad_top, pad_left) = if same_padding {
        let out_h = in_shape.height.div_ceil(stride);
        let out_w = in_shape.width.div_ceil(stride);
        // Zero padding split as evenly as possible, extra on the
        // bottom/right, matching the usual "same" convention.
        let pad_h = ((out_h - 1) * stride + kh).saturating_sub(in_shape.height);
        let pad_w = ((out_w - 1) * stride + kw).saturating_sub(in_shape.width);
        (out_h, out_w, pad_h / 2, pad_w / 2)
    } else {
        (
            (in_shape.height - kh) / stride + 1,
            (in_shape.width - kw) / stride + 1,
            0,
            0,
        )
    };
    let out_shape = Shape::new(out_h, out_w, out_c).unwrap();
    let mut data = vec![0.0; out_shape.len()];
    for oy in 0..out_h {
        for ox in 0..out_w {
            for (oc, filters) in kernel.iter().enumerate() {
                let mut acc = bias[oc];
                for (ic, plane) in filters.iter().enumerate() {
                    for (ky, krow) in plane.iter().enumerate() {
                        let iy = (oy * stride + ky) as isize - pad_top as isize;
                        if iy < 0 || iy >= in_shape.height as isize {
                            continue;
                        }
                        for (kx, kval) in krow.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad_left as isize;
                            if ix < 0 || ix >= in_shape.width as isize {
                                continue;
                            }
                            acc += kval * input.at(iy as usize, ix as usize, ic);
                        }
                    }
                }
                data[out_shape.index(oy, ox, oc)] = acc;
            }
        }
    }
    Tensor::new(out_shape, data).unwrap()
}

fn maxpool2x2(input: &Tensor) -> Tensor {
    let in_shape = input.shape();
    let out_shape = Shape::new(in_shape.height / 2, in_shape.width / 2, in_shape.channels).unwrap();
    let mut data = vec![0.0; out_shape.len()];
    for oy in 0..out_shape.height {
        for ox in 0..out_shape.width {
            for c in 0..out_shape.channels {
                let m = input
                    .at(2 * oy, 2 * ox, c)
                    .max(input.at(2 * oy, 2 * ox + 1, c))
                    .max(input.at(2 * oy + 1, 2 * ox, c))
                    .max(input.at(2 * oy + 1, 2 * ox + 1, c));
                data[out_shape.index(oy, ox, c)] = m;
            }
        }
    }
    Tensor::new(out_shape, data).unwrap()
}

/// Channel-wise bilinear resize with half-pixel-center sampling.
///
/// The source coordinate of output pixel `i` is `(i + 0.5) * in/out - 0.5`,
/// clamped to the valid range. Constant images and, in the interior, linear
/// ramps are reproduced exactly. Output values never leave the per-channel
/// input range (every sample is a convex combination).
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let in_shape = input.shape();
    let out_shape = Shape::new(out_h, out_w, in_shape.channels).unwrap();
    let scale_y = in_shape.height as f64 / out_h as f64;
    let scale_x = in_shape.width as f64 / out_w as f64;
    let mut data = vec![0.0; out_shape.len()];
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (in_shape.height - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(in_shape.height - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (in_shape.width - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(in_shape.width - 1);
            let fx = sx - x0 as f64;
            for c in 0..in_shape.channels {
                let top = input.at(y0, x0, c) * (1.0 - fx) + input.at(y0, x1, c) * fx;
                let bottom = input.at(y1, x0, c) * (1.0 - fx) + input.at(y1, x1, c) * fx;
                data[out_shape.index(oy, ox, c)] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(out_shape, data).unwrap()
}

/// Upsamples by replicating each pixel into a `factor x factor` block.
pub fn replicate_upsample(input: &Tensor, factor: usize) -> Tensor {
    let in_shape = input.shape();
    let out_shape = Shape::new(
        in_shape.height * factor,
        in_shape.width * factor,
        in_shape.channels,
    )
    .unwrap();
    let mut data = vec![0.0; out_shape.len()];
    for oy in 0..out_shape.height {
        for ox in 0..out_shape.width {
            for c in 0..in_shape.channels {
                data[out_shape.index(oy, ox, c)] = input.at(oy / factor, ox / factor, c);
            }
        }
    }
    Tensor::new(out_shape, data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, values: &[f64]) -> Tensor {
        Tensor::new(Shape::new(h, w, 1).unwrap(), values.to_vec()).unwrap()
    }

    #[test]
    fn dense_forward_matches_matvec() {
        let layer = LayerSpec::Dense {
            weight: vec![vec![1.0, 2.0], vec![-1.0, 0.5]],
            bias: vec![0.5, 0.0],
        };
        let x = grid(1, 2, &[3.0, 4.0]);
        let out = layer.forward(&x);
        assert_eq!(out.data(), &[3.0 + 8.0 + 0.5, -3.0 + 2.0]);
    }

    #[test]
    fn dense_shape_validation() {
        let layer = LayerSpec::Dense {
            weight: vec![vec![1.0, 2.0]],
            bias: vec![0.0, 0.0],
        };
        let err = layer.output_shape(Shape::new(1, 2, 1).unwrap(), 3).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("layer 3"), "{text}");
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let s = softmax(&[0.0, 0.0, 0.0]);
        for v in &s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_handles_large_logits() {
        let s = softmax(&[1000.0, 0.0]);
        assert!(s.iter().all(|v| *v > 0.0));
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn conv2d_zero_kernel_gives_bias() {
        let layer = LayerSpec::Conv2d {
            kernel: vec![vec![vec![vec![0.0; 3]; 3]]],
            bias: vec![0.7],
            stride: 1,
            same_padding: true,
        };
        let x = grid(4, 4, &[0.25; 16]);
        let out = layer.forward(&x);
        assert_eq!(out.shape(), Shape::new(4, 4, 1).unwrap());
        assert!(out.data().iter().all(|v| *v == 0.7));
    }

    #[test]
    fn conv2d_identity_kernel_same_padding() {
        // 1x1 kernel with weight 1 reproduces the input.
        let layer = LayerSpec::Conv2d {
            kernel: vec![vec![vec![vec![1.0]]]],
            bias: vec![0.0],
            stride: 1,
            same_padding: true,
        };
        let x = grid(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(layer.forward(&x), x);
    }

    #[test]
    fn conv2d_same_padding_sums_neighbourhood() {
        // All-ones 3x3 kernel on all-ones input: corners see 4 cells,
        // edges 6, interior 9.
        let layer = LayerSpec::Conv2d {
            kernel: vec![vec![vec![vec![1.0; 3]; 3]]],
            bias: vec![0.0],
            stride: 1,
            same_padding: true,
        };
        let x = grid(3, 3, &[1.0; 9]);
        let out = layer.forward(&x);
        assert_eq!(
            out.data(),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn maxpool_picks_block_max() {
        let x = grid(2, 4, &[1.0, 2.0, 5.0, 3.0, 4.0, 0.0, -1.0, 6.0]);
        let out = maxpool2x2(&x);
        assert_eq!(out.data(), &[4.0, 6.0]);
    }

    #[test]
    fn bilinear_constant_any_size() {
        let x = Tensor::filled(Shape::new(3, 5, 2).unwrap(), 0.42);
        let out = bilinear_resize(&x, 7, 2);
        assert!(out.data().iter().all(|v| (*v - 0.42).abs() < 1e-15));
    }

    #[test]
    fn bilinear_same_size_is_identity() {
        let x = grid(2, 3, &[0.1, 0.9, 0.3, 0.7, 0.2, 0.4]);
        let out = bilinear_resize(&x, 2, 3);
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_one_pixel_extends_constant() {
        let x = grid(1, 1, &[0.6]);
        let out = bilinear_resize(&x, 2, 2);
        assert_eq!(out.data(), &[0.6, 0.6, 0.6, 0.6]);
    }

    #[test]
    fn bilinear_two_by_two_hand_values() {
        // Half-pixel-center upscale of [[0,1],[2,3]] to 4x4, corners and
        // fractions computed by hand.
        let x = grid(2, 2, &[0.0, 1.0, 2.0, 3.0]);
        let out = bilinear_resize(&x, 4, 4);
        let expected = [
            0.0, 0.25, 0.75, 1.0,
            0.5, 0.75, 1.25, 1.5,
            1.5, 1.75, 2.25, 2.5,
            2.0, 2.25, 2.75, 3.0,
        ];
        for (a, b) in out.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{:?} vs {:?}", out.data(), expected);
        }
    }

    #[test]
    fn bilinear_reproduces_linear_ramp_at_original_points() {
        // Upscale a ramp 4 -> 8 and read back the original grid points,
        // which land in the interior of the upscaled image.
        let ramp = grid(1, 4, &[0.0, 1.0, 2.0, 3.0]);
        let up = bilinear_resize(&ramp, 1, 8);
        // Original x=i maps to output coordinate 2i + 0.5; sample the two
        // adjacent outputs and average, which equals the ramp value there.
        for i in 1..3 {
            let left = up.at(0, 2 * i, 0);
            let right = up.at(0, 2 * i + 1, 0);
            assert!(((left + right) / 2.0 - i as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn replicate_upsample_hand_values() {
        let x = grid(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let out = replicate_upsample(&x, 2);
        assert_eq!(
            out.data(),
            &[
                1.0, 1.0, 2.0, 2.0,
                1.0, 1.0, 2.0, 2.0,
                3.0, 3.0, 4.0, 4.0,
                3.0, 3.0, 4.0, 4.0,
            ]
        );
    }

    #[test]
    fn chain_shape_validation_reports_index() {
        let layers = vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { weight: vec![vec![1.0; 3]], bias: vec![0.0] },
        ];
        let err = chain_output_shape(&layers, Shape::new(2, 2, 1).unwrap()).unwrap_err();
        assert!(err.to_string().contains("layer 1"));
    }
}
