//! Layer kinds and their per-sample forward/backward kernels.
//!
//! Spatial tensors are `[height, width, channels]`. Convolution and pooling use VALID (no
//! padding) semantics. Dense weights are stored `[in, out]`, convolution weights
//! `[kh, kw, in_channels, out_channels]`, each followed by a bias vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::rng::StreamRng;
use crate::{Error, Result};

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    Conv2d {
        kh: usize,
        kw: usize,
        out_channels: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    Relu,
    MaxPool2d {
        ph: usize,
        pw: usize,
    },
    Dropout {
        p: f64,
    },
    /// Keeps or drops the whole input tensor at once.
    BranchDropout {
        p: f64,
    },
    Flatten,
    Softmax,
    /// Element-wise sum of two inputs; only used to combine cascaded branch logits.
    Add,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Values a layer's backward needs from its forward.
#[derive(Debug, Clone)]
pub(crate) enum LayerCache {
    Input(Tensor),
    Relu(Vec<bool>),
    MaxPool { argmax: Vec<usize>, input_shape: Vec<usize> },
    Mask(Vec<f64>),
    Scale(f64),
    Flatten(Vec<usize>),
    Softmax(Vec<f64>),
    None,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "Dense",
            LayerSpec::Conv2d { .. } => "Conv2D",
            LayerSpec::Relu => "ReLU",
            LayerSpec::MaxPool2d { .. } => "MaxPool2D",
            LayerSpec::Dropout { .. } => "Dropout",
            LayerSpec::BranchDropout { .. } => "BranchDropout",
            LayerSpec::Flatten => "Flatten",
            LayerSpec::Softmax => "Softmax",
            LayerSpec::Add => "Add",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Topology(msg));
        match *self {
            LayerSpec::Dense { units } if units == 0 => bad("Dense needs units > 0".into()),
            LayerSpec::Conv2d {
                kh,
                kw,
                out_channels,
                stride,
            } if kh == 0 || kw == 0 || out_channels == 0 || stride == 0 => {
                bad("Conv2D extents and stride must be positive".into())
            }
            LayerSpec::MaxPool2d { ph, pw } if ph == 0 || pw == 0 => {
                bad("MaxPool2D extents must be positive".into())
            }
            LayerSpec::Dropout { p } if !(0.0..1.0).contains(&p) => {
                bad(format!("Dropout p must be in [0, 1), got {p}"))
            }
            LayerSpec::BranchDropout { p } if !(0.0..=1.0).contains(&p) => {
                bad(format!("BranchDropout p must be in [0, 1], got {p}"))
            }
            _ => Ok(()),
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self, LayerSpec::Dropout { .. } | LayerSpec::BranchDropout { .. })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let spatial = |what: &str| -> Result<(usize, usize, usize)> {
            match *input {
                [h, w, c] => Ok((h, w, c)),
                _ => Err(Error::Shape(format!("{what} expects [h, w, c] input, got {input:?}"))),
            }
        };
        match *self {
            LayerSpec::Dense { units } => match input {
                [_] => Ok(vec![units]),
                _ => Err(Error::Shape(format!(
                    "Dense expects a flat input, got {input:?} (missing Flatten?)"
                ))),
            },
            LayerSpec::Conv2d {
                kh,
                kw,
                out_channels,
                stride,
            } => {
                let (h, w, _) = spatial("Conv2D")?;
                if h < kh || w < kw {
                    return Err(Error::Shape(format!(
                        "Conv2D kernel {kh}x{kw} larger than input {h}x{w}"
                    )));
                }
                Ok(vec![(h - kh) / stride + 1, (w - kw) / stride + 1, out_channels])
            }
            LayerSpec::MaxPool2d { ph, pw } => {
                let (h, w, c) = spatial("MaxPool2D")?;
                if h < ph || w < pw {
                    return Err(Error::Shape(format!(
                        "MaxPool2D window {ph}x{pw} larger than input {h}x{w}"
                    )));
                }
                Ok(vec![h / ph, w / pw, c])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Softmax => match input {
                [_] => Ok(input.to_vec()),
                _ => Err(Error::Shape(format!("Softmax expects a flat input, got {input:?}"))),
            },
            LayerSpec::Relu | LayerSpec::Dropout { .. } | LayerSpec::BranchDropout { .. } => {
                Ok(input.to_vec())
            }
            LayerSpec::Add => Err(Error::Topology(
                "Add only combines cascaded branch outputs and cannot appear in a layer chain".into(),
            )),
        }
    }

    /// Shapes of the trainable tensors (weights, then bias) for the given input shape.
    pub fn param_shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        self.output_shape(input)?;
        Ok(match *self {
            LayerSpec::Dense { units } => vec![vec![input[0], units], vec![units]],
            LayerSpec::Conv2d {
                kh,
                kw,
                out_channels,
                ..
            } => vec![vec![kh, kw, input[2], out_channels], vec![out_channels]],
            _ => Vec::new(),
        })
    }

    pub fn param_count(&self, input: &[usize]) -> Result<usize> {
        Ok(self
            .param_shapes(input)?
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum())
    }

    /// Multiply-accumulate estimate (plus one op per element for activations and pooling).
    pub fn operations(&self, input: &[usize]) -> Result<u64> {
        let out = self.output_shape(input)?;
        let out_len: usize = out.iter().product();
        let in_len: usize = input.iter().product();
        Ok(match *self {
            LayerSpec::Dense { units } => (input[0] * units) as u64,
            LayerSpec::Conv2d { kh, kw, .. } => (out_len * kh * kw * input[2]) as u64,
            LayerSpec::MaxPool2d { ph, pw } => (out_len * ph * pw) as u64,
            LayerSpec::Relu | LayerSpec::Softmax => in_len as u64,
            _ => 0,
        })
    }
}

pub(crate) fn forward(
    spec: &LayerSpec,
    input: &Tensor,
    params: &[f64],
    mode: Mode,
    rng: &mut StreamRng,
) -> Result<(Tensor, LayerCache)> {
    let out_shape = spec.output_shape(input.shape())?;
    let x = input.data();
    Ok(match *spec {
        LayerSpec::Dense { units } => {
            let n_in = x.len();
            let (w, b) = params.split_at(n_in * units);
            let mut y = b.to_vec();
            for (i, xi) in x.iter().enumerate() {
                let row = &w[i * units..(i + 1) * units];
                for (yo, wo) in y.iter_mut().zip(row) {
                    *yo += xi * wo;
                }
            }
            (Tensor::new(out_shape, y)?, LayerCache::Input(input.clone()))
        }
        LayerSpec::Conv2d {
            kh,
            kw,
            out_channels: oc,
            stride,
        } => {
            let (iw, ic) = (input.shape()[1], input.shape()[2]);
            let (oh, ow) = (out_shape[0], out_shape[1]);
            let (w, b) = params.split_at(kh * kw * ic * oc);
            let mut y = vec![0.0; oh * ow * oc];
            for oy in 0..oh {
                for ox in 0..ow {
                    let out = &mut y[(oy * ow + ox) * oc..(oy * ow + ox + 1) * oc];
                    out.copy_from_slice(b);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let base = ((oy * stride + ky) * iw + ox * stride + kx) * ic;
                            for c in 0..ic {
                                let xv = x[base + c];
                                let wrow = &w[((ky * kw + kx) * ic + c) * oc..][..oc];
                                for (o, wv) in out.iter_mut().zip(wrow) {
                                    *o += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
            (Tensor::new(out_shape, y)?, LayerCache::Input(input.clone()))
        }
        LayerSpec::Relu => {
            let mask: Vec<bool> = x.iter().map(|v| *v > 0.0).collect();
            let y = x.iter().map(|v| v.max(0.0)).collect();
            (Tensor::new(out_shape, y)?, LayerCache::Relu(mask))
        }
        LayerSpec::MaxPool2d { ph, pw } => {
            let (iw, c) = (input.shape()[1], input.shape()[2]);
            let (oh, ow) = (out_shape[0], out_shape[1]);
            let mut y = vec![0.0; oh * ow * c];
            let mut arg = vec![0usize; oh * ow * c];
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best_idx = ((oy * ph) * iw + ox * pw) * c + ch;
                        for dy in 0..ph {
                            for dx in 0..pw {
                                let idx = ((oy * ph + dy) * iw + ox * pw + dx) * c + ch;
                                if x[idx] > x[best_idx] {
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = (oy * ow + ox) * c + ch;
                        y[o] = x[best_idx];
                        arg[o] = best_idx;
                    }
                }
            }
            (
                Tensor::new(out_shape, y)?,
                LayerCache::MaxPool {
                    argmax: arg,
                    input_shape: input.shape().to_vec(),
                },
            )
        }
        LayerSpec::Dropout { p } => match mode {
            Mode::Eval => (input.clone(), LayerCache::None),
            Mode::Train => {
                let scale = 1.0 / (1.0 - p);
                let mask: Vec<f64> = x
                    .iter()
                    .map(|_| if rng.random::<f64>() >= p { scale } else { 0.0 })
                    .collect();
                let y = x.iter().zip(&mask).map(|(v, m)| v * m).collect();
                (Tensor::new(out_shape, y)?, LayerCache::Mask(mask))
            }
        },
        LayerSpec::BranchDropout { p } => {
            let factor = branch_dropout_factor(p, mode, rng);
            let y = x.iter().map(|v| v * factor).collect();
            (Tensor::new(out_shape, y)?, LayerCache::Scale(factor))
        }
        LayerSpec::Flatten => (
            Tensor::new(out_shape, x.to_vec())?,
            LayerCache::Flatten(input.shape().to_vec()),
        ),
        LayerSpec::Softmax => {
            let y = softmax(x);
            (Tensor::new(out_shape, y.clone())?, LayerCache::Softmax(y))
        }
        LayerSpec::Add => unreachable!("rejected by output_shape"),
    })
}

/// Draws the all-or-nothing multiplier: `1/(1-p)` when kept, `0` when dropped, `1` in eval.
pub(crate) fn branch_dropout_factor(p: f64, mode: Mode, rng: &mut StreamRng) -> f64 {
    match mode {
        Mode::Eval => 1.0,
        Mode::Train => {
            let keep = rng.random::<f64>() >= p;
            if keep && p < 1.0 {
                1.0 / (1.0 - p)
            } else {
                0.0
            }
        }
    }
}

/// Writes parameter gradients into `grad` (same layout as `params`) and returns the input gradient.
pub(crate) fn backward(
    spec: &LayerSpec,
    cache: &LayerCache,
    params: &[f64],
    upstream: &Tensor,
    grad: &mut [f64],
) -> Result<Tensor> {
    let g = upstream.data();
    match (spec, cache) {
        (LayerSpec::Dense { units }, LayerCache::Input(input)) => {
            let units = *units;
            let x = input.data();
            let n_in = x.len();
            let (w, _) = params.split_at(n_in * units);
            let (gw, gb) = grad.split_at_mut(n_in * units);
            let mut dx = vec![0.0; n_in];
            for (i, xi) in x.iter().enumerate() {
                let row = &w[i * units..(i + 1) * units];
                let grow = &mut gw[i * units..(i + 1) * units];
                let mut acc = 0.0;
                for ((gwo, wo), go) in grow.iter_mut().zip(row).zip(g) {
                    *gwo += xi * go;
                    acc += wo * go;
                }
                dx[i] = acc;
            }
            for (b, go) in gb.iter_mut().zip(g) {
                *b += go;
            }
            Tensor::new(input.shape().to_vec(), dx)
        }
        (
            LayerSpec::Conv2d {
                kh,
                kw,
                out_channels: oc,
                stride,
            },
            LayerCache::Input(input),
        ) => {
            let (kh, kw, oc, stride) = (*kh, *kw, *oc, *stride);
            let x = input.data();
            let (iw, ic) = (input.shape()[1], input.shape()[2]);
            let (oh, ow) = (upstream.shape()[0], upstream.shape()[1]);
            let (w, _) = params.split_at(kh * kw * ic * oc);
            let (gw, gb) = grad.split_at_mut(kh * kw * ic * oc);
            let mut dx = vec![0.0; x.len()];
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = &g[(oy * ow + ox) * oc..(oy * ow + ox + 1) * oc];
                    for (b, gv) in gb.iter_mut().zip(go) {
                        *b += gv;
                    }
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let base = ((oy * stride + ky) * iw + ox * stride + kx) * ic;
                            for c in 0..ic {
                                let xv = x[base + c];
                                let off = ((ky * kw + kx) * ic + c) * oc;
                                let wrow = &w[off..off + oc];
                                let gwrow = &mut gw[off..off + oc];
                                let mut acc = 0.0;
                                for ((gwv, wv), gv) in gwrow.iter_mut().zip(wrow).zip(go) {
                                    *gwv += xv * gv;
                                    acc += wv * gv;
                                }
                                dx[base + c] += acc;
                            }
                        }
                    }
                }
            }
            Tensor::new(input.shape().to_vec(), dx)
        }
        (LayerSpec::Relu, LayerCache::Relu(mask)) => {
            let dx = g
                .iter()
                .zip(mask)
                .map(|(v, m)| if *m { *v } else { 0.0 })
                .collect();
            Tensor::new(upstream.shape().to_vec(), dx)
        }
        (LayerSpec::MaxPool2d { .. }, LayerCache::MaxPool { argmax, input_shape }) => {
            let mut dx = vec![0.0; input_shape.iter().product()];
            for (gv, idx) in g.iter().zip(argmax) {
                dx[*idx] += gv;
            }
            Tensor::new(input_shape.clone(), dx)
        }
        (LayerSpec::Dropout { .. }, LayerCache::None) => Ok(upstream.clone()),
        (LayerSpec::Dropout { .. }, LayerCache::Mask(mask)) => {
            let dx = g.iter().zip(mask).map(|(v, m)| v * m).collect();
            Tensor::new(upstream.shape().to_vec(), dx)
        }
        (LayerSpec::BranchDropout { .. }, LayerCache::Scale(f)) => {
            let dx = g.iter().map(|v| v * f).collect();
            Tensor::new(upstream.shape().to_vec(), dx)
        }
        (LayerSpec::Flatten, LayerCache::Flatten(shape)) => Tensor::new(shape.clone(), g.to_vec()),
        (LayerSpec::Softmax, LayerCache::Softmax(y)) => {
            Tensor::new(upstream.shape().to_vec(), softmax_backward(y, g))
        }
        _ => Err(Error::Shape(format!(
            "cache does not belong to a {} layer",
            spec.name()
        ))),
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Vector-Jacobian product of softmax: `y * (g - <g, y>)`.
pub fn softmax_backward(y: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    y.iter().zip(g).map(|(yi, gi)| yi * (gi - dot)).collect()
}

pub fn add_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "Add operands differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let y = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), y)
}

/// Both operands receive the upstream gradient unchanged.
pub fn add_backward(upstream: &Tensor) -> (Tensor, Tensor) {
    (upstream.clone(), upstream.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> StreamRng {
        StreamRng::seed_from_u64(0)
    }

    #[test]
    fn dense_affine() {
        let spec = LayerSpec::Dense { units: 1 };
        let (y, _) = forward(&spec, &Tensor::vector(vec![3.0]), &[2.0, 1.0], Mode::Eval, &mut rng()).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn relu_forward_and_backward() {
        let spec = LayerSpec::Relu;
        let (y, _) = forward(&spec, &Tensor::vector(vec![-1.0, 0.0, 2.0]), &[], Mode::Eval, &mut rng()).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let (_, cache) = forward(&spec, &Tensor::vector(vec![-1.0, 2.0]), &[], Mode::Train, &mut rng()).unwrap();
        let dx = backward(&spec, &cache, &[], &Tensor::vector(vec![1.0, 1.0]), &mut []).unwrap();
        assert_eq!(dx.data(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_symmetric() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let s: f64 = softmax(&[3.0, -1.0, 0.5, 10.0]).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn valid_padding_shapes() {
        let conv = LayerSpec::Conv2d { kh: 8, kw: 8, out_channels: 32, stride: 4 };
        assert_eq!(conv.output_shape(&[84, 84, 4]).unwrap(), vec![20, 20, 32]);
        let pool = LayerSpec::MaxPool2d { ph: 2, pw: 2 };
        assert_eq!(pool.output_shape(&[28, 28, 32]).unwrap(), vec![14, 14, 32]);
        assert_eq!(conv.param_count(&[84, 84, 4]).unwrap(), 8 * 8 * 4 * 32 + 32);
    }

    #[test]
    fn dense_rejects_spatial_input() {
        assert!(matches!(
            LayerSpec::Dense { units: 4 }.output_shape(&[16, 16, 32]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn dropout_probabilities_validated() {
        assert!(LayerSpec::Dropout { p: 1.0 }.validate().is_err());
        assert!(LayerSpec::BranchDropout { p: 1.0 }.validate().is_ok());
        assert!(LayerSpec::BranchDropout { p: 1.5 }.validate().is_err());
    }

    #[test]
    fn eval_dropout_is_identity() {
        let x = Tensor::vector(vec![1.0, -2.0, 3.0]);
        for spec in [LayerSpec::Dropout { p: 0.5 }, LayerSpec::BranchDropout { p: 0.5 }] {
            let (y, _) = forward(&spec, &x, &[], Mode::Eval, &mut rng()).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn train_dropout_uses_inverted_scaling() {
        let x = Tensor::vector(vec![1.0; 1000]);
        let (y, _) = forward(&LayerSpec::Dropout { p: 0.25 }, &x, &[], Mode::Train, &mut rng()).unwrap();
        for v in y.data() {
            assert!(*v == 0.0 || (*v - 1.0 / 0.75).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_spec_json() {
        let spec: LayerSpec = serde_json::from_str(r#"{"type":"conv2d","kh":3,"kw":3,"out_channels":8}"#).unwrap();
        assert_eq!(spec, LayerSpec::Conv2d { kh: 3, kw: 3, out_channels: 8, stride: 1 });
        assert!(serde_json::from_str::<LayerSpec>(r#"{"type":"dense","units":3,"bogus":1}"#).is_err());
    }
}
