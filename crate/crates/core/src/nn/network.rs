//! Compiled layer chains and the per-device network built from them.

use std::sync::Arc;

use rand::{Rng, SeedableRng};

pub use super::layer::Mode;
use super::layer::{self, LayerCache, LayerSpec};
use super::params::{ParamLayout, ParamStore};
use super::tensor::Tensor;
use crate::rng::StreamRng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledLayer {
    pub id: usize,
    pub spec: LayerSpec,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

/// A shape-checked sequence of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    layers: Vec<CompiledLayer>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

impl Chain {
    pub fn compile(specs: &[LayerSpec], input_shape: &[usize], first_id: usize) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let out = spec.output_shape(&shape).map_err(|e| match e {
                Error::Shape(msg) => Error::Shape(format!("layer {i} ({}): {msg}", spec.name())),
                other => other,
            })?;
            layers.push(CompiledLayer {
                id: first_id + i,
                spec: spec.clone(),
                input_shape: shape,
                output_shape: out.clone(),
            });
            shape = out;
        }
        Ok(Chain {
            layers,
            input_shape: input_shape.to_vec(),
            output_shape: shape,
        })
    }

    pub fn layers(&self) -> &[CompiledLayer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.spec.param_count(&l.input_shape).unwrap_or(0))
            .sum()
    }

    fn ends_with_softmax(&self) -> bool {
        matches!(self.layers.last(), Some(l) if l.spec == LayerSpec::Softmax)
    }

    fn push_layout(&self, layout: &mut ParamLayout) {
        for l in &self.layers {
            let shapes = l.spec.param_shapes(&l.input_shape).expect("validated at compile");
            layout.push_layer(l.id, &shapes);
        }
    }

    fn forward(
        &self,
        params: &ParamStore,
        mut x: Tensor,
        mode: Mode,
        rng: &mut StreamRng,
        stop_before_softmax: bool,
    ) -> Result<(Tensor, Vec<LayerCache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            if stop_before_softmax && l.spec == LayerSpec::Softmax {
                break;
            }
            let (y, cache) = layer::forward(&l.spec, &x, params.layer_slice(l.id), mode, rng)?;
            y.ensure_finite(&format!("output of layer {} ({})", l.id, l.spec.name()))?;
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    fn backward(
        &self,
        params: &ParamStore,
        caches: &[LayerCache],
        mut g: Tensor,
        grad: &mut [f64],
    ) -> Result<Tensor> {
        let layout = params.layout();
        for (l, cache) in self.layers[..caches.len()].iter().zip(caches).rev() {
            let range = layout.layer_range(l.id);
            g = layer::backward(&l.spec, cache, &params.as_slice()[range.clone()], &g, &mut grad[range])?;
        }
        Ok(g)
    }

    fn operations(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| l.spec.operations(&l.input_shape).unwrap_or(0))
            .sum()
    }
}

/// What follows the shared stem.
#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    /// A plain chain; may end with Softmax.
    Single(Chain),
    /// `Softmax(Add(BranchDropout(complex(stem)), light(stem)))`; both chains produce logits.
    Cascade {
        light: Chain,
        complex: Chain,
        branch_dropout: f64,
    },
}

#[derive(Debug, Clone)]
enum HeadCache {
    Single(Vec<LayerCache>),
    Cascade {
        light: Vec<LayerCache>,
        complex: Option<Vec<LayerCache>>,
        factor: f64,
        probs: Vec<f64>,
    },
}

/// Everything backward needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stamp: u64,
    stem: Vec<LayerCache>,
    head: HeadCache,
    stopped_at_logits: bool,
}

impl ForwardCache {
    /// Whether the cascaded complex branch contributed (always true for non-cascaded heads).
    pub fn complex_branch_kept(&self) -> bool {
        match &self.head {
            HeadCache::Single(_) => true,
            HeadCache::Cascade { factor, .. } => *factor != 0.0,
        }
    }
}

/// Where backward starts.
#[derive(Debug, Clone, Copy)]
pub enum Upstream<'a> {
    /// Gradient with respect to the network output.
    Output(&'a Tensor),
    /// Gradient with respect to the pre-softmax logits (the softmax is skipped).
    Logits(&'a Tensor),
}

/// A runnable network: shared stem followed by a head, with a canonical parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    stem: Chain,
    head: Head,
    layout: Arc<ParamLayout>,
}

impl Network {
    /// Plain network with no stem/branch distinction.
    pub fn sequential(input_shape: &[usize], specs: &[LayerSpec]) -> Result<Self> {
        Network::with_single_head(input_shape, &[], specs)
    }

    pub fn with_single_head(
        input_shape: &[usize],
        stem: &[LayerSpec],
        head: &[LayerSpec],
    ) -> Result<Self> {
        let stem = Chain::compile(stem, input_shape, 0)?;
        let head = Chain::compile(head, stem.output_shape(), stem.layers.len())?;
        let all: Vec<&CompiledLayer> = stem.layers.iter().chain(&head.layers).collect();
        if let Some(pos) = all.iter().position(|l| l.spec == LayerSpec::Softmax) {
            if pos + 1 != all.len() {
                return Err(Error::Topology("Softmax is only allowed as the final layer".into()));
            }
        }
        Network::finish(stem, Head::Single(head))
    }

    pub fn with_cascade(
        input_shape: &[usize],
        stem: &[LayerSpec],
        light: &[LayerSpec],
        complex: &[LayerSpec],
        branch_dropout: f64,
    ) -> Result<Self> {
        LayerSpec::BranchDropout { p: branch_dropout }.validate()?;
        let stem = Chain::compile(stem, input_shape, 0)?;
        let light = Chain::compile(light, stem.output_shape(), stem.layers.len())?;
        let complex = Chain::compile(
            complex,
            stem.output_shape(),
            stem.layers.len() + light.layers.len(),
        )?;
        for chain in [&stem, &light, &complex] {
            if chain.layers.iter().any(|l| l.spec == LayerSpec::Softmax) {
                return Err(Error::Topology(
                    "cascaded chains produce logits; the combined Softmax is implicit".into(),
                ));
            }
        }
        if light.output_shape() != complex.output_shape() || light.output_shape().len() != 1 {
            return Err(Error::Shape(format!(
                "cascaded logits must be flat and equal: light {:?} vs complex {:?}",
                light.output_shape(),
                complex.output_shape()
            )));
        }
        Network::finish(
            stem,
            Head::Cascade {
                light,
                complex,
                branch_dropout,
            },
        )
    }

    fn finish(stem: Chain, head: Head) -> Result<Self> {
        let mut layout = ParamLayout::default();
        stem.push_layout(&mut layout);
        match &head {
            Head::Single(c) => c.push_layout(&mut layout),
            Head::Cascade { light, complex, .. } => {
                light.push_layout(&mut layout);
                complex.push_layout(&mut layout);
            }
        }
        Ok(Network {
            stem,
            head,
            layout: Arc::new(layout),
        })
    }

    pub fn stem(&self) -> &Chain {
        &self.stem
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn input_shape(&self) -> &[usize] {
        self.stem.input_shape()
    }

    pub fn output_shape(&self) -> &[usize] {
        match &self.head {
            Head::Single(c) => c.output_shape(),
            Head::Cascade { light, .. } => light.output_shape(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    pub fn stem_param_count(&self) -> usize {
        self.stem.param_count()
    }

    /// True when the output is a probability vector produced by a final Softmax.
    pub fn outputs_probabilities(&self) -> bool {
        match &self.head {
            Head::Single(c) if !c.is_empty() => c.ends_with_softmax(),
            Head::Single(_) => self.stem.ends_with_softmax(),
            Head::Cascade { .. } => true,
        }
    }

    pub fn has_stochastic_layers(&self) -> bool {
        let chains: Vec<&Chain> = match &self.head {
            Head::Single(c) => vec![&self.stem, c],
            Head::Cascade { light, complex, .. } => vec![&self.stem, light, complex],
        };
        matches!(self.head, Head::Cascade { branch_dropout, .. } if branch_dropout > 0.0)
            || chains
                .iter()
                .any(|c| c.layers.iter().any(|l| l.spec.is_stochastic()))
    }

    /// Glorot-uniform weights and zero biases.
    pub fn init_params(&self, rng: &mut impl Rng) -> ParamStore {
        let mut params = ParamStore::zeros(self.layout.clone());
        let data = params.as_mut_slice();
        for e in self.layout.entries() {
            if e.tensor != 0 {
                continue;
            }
            let (fan_in, fan_out) = match e.shape.as_slice() {
                [i, o] => (*i, *o),
                [kh, kw, ic, oc] => (kh * kw * ic, kh * kw * oc),
                _ => continue,
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut data[e.offset..e.offset + e.len()] {
                *v = rng.random_range(-limit..limit);
            }
        }
        params
    }

    pub fn forward(
        &self,
        params: &ParamStore,
        input: &Tensor,
        mode: Mode,
        rng: &mut StreamRng,
    ) -> Result<(Tensor, ForwardCache)> {
        self.forward_impl(params, input, mode, rng, false)
    }

    /// Forward pass that stops before the final Softmax (if any).
    pub fn forward_logits(
        &self,
        params: &ParamStore,
        input: &Tensor,
        mode: Mode,
        rng: &mut StreamRng,
    ) -> Result<(Tensor, ForwardCache)> {
        self.forward_impl(params, input, mode, rng, true)
    }

    /// Eval-mode output.
    pub fn predict(&self, params: &ParamStore, input: &Tensor) -> Result<Tensor> {
        let mut rng = StreamRng::seed_from_u64(0);
        Ok(self.forward(params, input, Mode::Eval, &mut rng)?.0)
    }

    fn forward_impl(
        &self,
        params: &ParamStore,
        input: &Tensor,
        mode: Mode,
        rng: &mut StreamRng,
        logits_only: bool,
    ) -> Result<(Tensor, ForwardCache)> {
        if params.layout() != &self.layout && **params.layout() != *self.layout {
            return Err(Error::Shape("parameters belong to a different network".into()));
        }
        if input.shape() != self.input_shape() {
            return Err(Error::Shape(format!(
                "network expects input {:?}, got {:?}",
                self.input_shape(),
                input.shape()
            )));
        }
        input.ensure_finite("network input")?;
        let stem_is_last = matches!(&self.head, Head::Single(c) if c.is_empty());
        let (h, stem_cache) =
            self.stem
                .forward(params, input.clone(), mode, rng, logits_only && stem_is_last)?;
        let (out, head) = match &self.head {
            Head::Single(chain) => {
                let (y, c) = chain.forward(params, h, mode, rng, logits_only)?;
                (y, HeadCache::Single(c))
            }
            Head::Cascade {
                light,
                complex,
                branch_dropout,
            } => {
                let (light_logits, light_cache) = light.forward(params, h.clone(), mode, rng, false)?;
                let factor = layer::branch_dropout_factor(*branch_dropout, mode, rng);
                let (logits, complex_cache) = if factor == 0.0 {
                    (light_logits, None)
                } else {
                    let (c, cc) = complex.forward(params, h, mode, rng, false)?;
                    let scaled = Tensor::new(
                        c.shape().to_vec(),
                        c.data().iter().map(|v| v * factor).collect(),
                    )?;
                    (layer::add_forward(&scaled, &light_logits)?, Some(cc))
                };
                logits.ensure_finite("cascaded logits")?;
                let probs = layer::softmax(logits.data());
                let out = if logits_only {
                    logits
                } else {
                    Tensor::new(logits.shape().to_vec(), probs.clone())?
                };
                (
                    out,
                    HeadCache::Cascade {
                        light: light_cache,
                        complex: complex_cache,
                        factor,
                        probs,
                    },
                )
            }
        };
        Ok((
            out,
            ForwardCache {
                stamp: params.stamp(),
                stem: stem_cache,
                head,
                stopped_at_logits: logits_only,
            },
        ))
    }

    /// Returns the parameter gradient and the input gradient.
    pub fn backward(
        &self,
        params: &ParamStore,
        cache: &ForwardCache,
        upstream: Upstream<'_>,
    ) -> Result<(ParamStore, Tensor)> {
        let mut grad = ParamStore::zeros(self.layout.clone());
        let dx = self.backward_into(params, cache, upstream, grad.as_mut_slice())?;
        Ok((grad, dx))
    }

    /// Adds the parameter gradient into `grad` and returns the input gradient.
    pub fn backward_into(
        &self,
        params: &ParamStore,
        cache: &ForwardCache,
        upstream: Upstream<'_>,
        grad: &mut [f64],
    ) -> Result<Tensor> {
        if cache.stamp != params.stamp() {
            return Err(Error::StaleCache);
        }
        if grad.len() != self.layout.len() {
            return Err(Error::Length {
                expected: self.layout.len(),
                actual: grad.len(),
            });
        }
        let (g, wrt_logits) = match upstream {
            Upstream::Output(g) => (g, cache.stopped_at_logits),
            Upstream::Logits(g) => (g, true),
        };
        if g.shape() != self.output_shape() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                g.shape(),
                self.output_shape()
            )));
        }
        let dh = match (&self.head, &cache.head) {
            (Head::Single(chain), HeadCache::Single(caches)) => {
                let n = trimmed_len(chain, caches, wrt_logits);
                let g = chain.backward(params, &caches[..n], g.clone(), grad)?;
                if chain.is_empty() {
                    let n = trimmed_len(&self.stem, &cache.stem, wrt_logits);
                    return self.stem.backward(params, &cache.stem[..n], g, grad);
                }
                g
            }
            (
                Head::Cascade { light, complex, .. },
                HeadCache::Cascade {
                    light: light_cache,
                    complex: complex_cache,
                    factor,
                    probs,
                },
            ) => {
                let dlogits = if wrt_logits {
                    g.clone()
                } else {
                    Tensor::new(g.shape().to_vec(), layer::softmax_backward(probs, g.data()))?
                };
                let (d_complex, d_light) = layer::add_backward(&dlogits);
                let mut dh = light.backward(params, light_cache, d_light, grad)?;
                if let Some(cc) = complex_cache {
                    let scaled = Tensor::new(
                        d_complex.shape().to_vec(),
                        d_complex.data().iter().map(|v| v * factor).collect(),
                    )?;
                    let dc = complex.backward(params, cc, scaled, grad)?;
                    for (a, b) in dh.data_mut().iter_mut().zip(dc.data()) {
                        *a += b;
                    }
                }
                dh
            }
            _ => return Err(Error::StaleCache),
        };
        self.stem.backward(params, &cache.stem, dh, grad)
    }

    pub fn operations(&self) -> u64 {
        self.stem.operations()
            + match &self.head {
                Head::Single(c) => c.operations(),
                Head::Cascade { light, complex, .. } => {
                    let n: usize = light.output_shape().iter().product();
                    light.operations() + complex.operations() + 2 * n as u64
                }
            }
    }
}

/// Number of cached layers backward walks through, dropping a trailing Softmax when the
/// gradient is given with respect to logits.
fn trimmed_len(chain: &Chain, caches: &[LayerCache], wrt_logits: bool) -> usize {
    if wrt_logits && chain.ends_with_softmax() && caches.len() == chain.layers.len() {
        caches.len() - 1
    } else {
        caches.len()
    }
}

/// Total trainable scalars of the network (stem plus head).
pub fn count_parameters(network: &Network) -> usize {
    network.param_count()
}

/// Multiply-accumulate based estimate of inference cost.
pub fn count_operations(network: &Network) -> u64 {
    network.operations()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> StreamRng {
        StreamRng::seed_from_u64(3)
    }

    #[test]
    fn squared_loss_through_single_weight() {
        // L = w^2 with w = 3 via Dense(1), zero bias, unit input, upstream dL/dy = 2y.
        let net = Network::sequential(&[1], &[LayerSpec::Dense { units: 1 }]).unwrap();
        let params = ParamStore::unflatten(net.layout().clone(), vec![3.0, 0.0]).unwrap();
        let (y, cache) = net.forward(&params, &Tensor::vector(vec![1.0]), Mode::Train, &mut rng()).unwrap();
        let up = Tensor::vector(vec![2.0 * y.data()[0]]);
        let (g, _) = net.backward(&params, &cache, Upstream::Output(&up)).unwrap();
        assert_eq!(g.as_slice()[0], 6.0);
    }

    #[test]
    fn stale_cache_rejected() {
        let net = Network::sequential(&[2], &[LayerSpec::Dense { units: 1 }]).unwrap();
        let mut params = net.init_params(&mut rng());
        let (_, cache) = net.forward(&params, &Tensor::vector(vec![1.0, 2.0]), Mode::Train, &mut rng()).unwrap();
        params.as_mut_slice()[0] += 1.0;
        let up = Tensor::vector(vec![1.0]);
        assert!(matches!(
            net.backward(&params, &cache, Upstream::Output(&up)),
            Err(Error::StaleCache)
        ));
    }

    #[test]
    fn softmax_must_be_last() {
        let r = Network::sequential(&[3], &[LayerSpec::Softmax, LayerSpec::Dense { units: 2 }]);
        assert!(r.is_err());
    }

    #[test]
    fn eval_forward_is_pure() {
        let net = Network::sequential(
            &[6, 6, 2],
            &[
                LayerSpec::Conv2d { kh: 3, kw: 3, out_channels: 4, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { ph: 2, pw: 2 },
                LayerSpec::Dropout { p: 0.5 },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 3 },
                LayerSpec::Softmax,
            ],
        )
        .unwrap();
        let params = net.init_params(&mut rng());
        let x = Tensor::new(vec![6, 6, 2], (0..72).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let a = net.predict(&params, &x).unwrap();
        let b = net.predict(&params, &x).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn input_shape_checked() {
        let net = Network::sequential(&[2], &[LayerSpec::Dense { units: 1 }]).unwrap();
        let params = net.init_params(&mut rng());
        assert!(net.predict(&params, &Tensor::vector(vec![1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn non_finite_activation_surfaces() {
        let net = Network::sequential(&[1], &[LayerSpec::Dense { units: 1 }]).unwrap();
        let params = ParamStore::unflatten(net.layout().clone(), vec![f64::MAX, f64::MAX]).unwrap();
        let r = net.predict(&params, &Tensor::vector(vec![10.0]));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
