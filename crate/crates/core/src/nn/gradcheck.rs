//! Central-difference gradient checks.

use rand::SeedableRng;

use super::layer::Mode;
use super::loss::loss_cross_entropy;
use super::network::{Network, Upstream};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::rng::StreamRng;
use crate::{Error, Result};

/// Scalar loss evaluated on the network output.
#[derive(Debug, Clone)]
pub enum CheckLoss {
    /// Cross-entropy; the network must end with Softmax.
    CrossEntropy(usize),
    /// `0.5 * sum((out - target)^2)`.
    HalfSquared(Tensor),
    /// `sum(weights * out)`.
    Linear(Tensor),
}

/// Stochastic layers are either disabled (`Eval`) or frozen by replaying the same seed for
/// every loss evaluation.
#[derive(Debug, Clone, Copy)]
pub enum CheckMode {
    Eval,
    TrainFrozen { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub param_rel_errors: Vec<f64>,
    pub input_analytic: Vec<f64>,
    pub input_numeric: Vec<f64>,
    pub input_rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn evaluate(
    network: &Network,
    params: &ParamStore,
    input: &Tensor,
    loss: &CheckLoss,
    mode: CheckMode,
) -> Result<(f64, Tensor, super::network::ForwardCache, bool)> {
    let (m, seed) = match mode {
        CheckMode::Eval => (Mode::Eval, 0),
        CheckMode::TrainFrozen { seed } => (Mode::Train, seed),
    };
    let mut rng = StreamRng::seed_from_u64(seed);
    let (out, cache) = network.forward(params, input, m, &mut rng)?;
    let y = out.data();
    Ok(match loss {
        CheckLoss::CrossEntropy(label) => {
            if !network.outputs_probabilities() {
                return Err(Error::Topology("cross-entropy check needs a Softmax output".into()));
            }
            let ce = loss_cross_entropy(y, *label)?;
            (ce.loss, Tensor::new(out.shape().to_vec(), ce.grad_logits)?, cache, true)
        }
        CheckLoss::HalfSquared(t) => {
            let diff: Vec<f64> = y.iter().zip(t.data()).map(|(a, b)| a - b).collect();
            let l = 0.5 * diff.iter().map(|d| d * d).sum::<f64>();
            (l, Tensor::new(out.shape().to_vec(), diff)?, cache, false)
        }
        CheckLoss::Linear(w) => {
            let l = y.iter().zip(w.data()).map(|(a, b)| a * b).sum();
            (l, w.clone(), cache, false)
        }
    })
}

/// Compares analytic parameter and input gradients against central differences
/// `(L(x + h) - L(x - h)) / 2h`.
pub fn finite_diff_check(
    network: &Network,
    params: &ParamStore,
    input: &Tensor,
    loss: &CheckLoss,
    h: f64,
    tol: f64,
    mode: CheckMode,
) -> Result<GradCheckReport> {
    let (_, upstream, cache, wrt_logits) = evaluate(network, params, input, loss, mode)?;
    let up = if wrt_logits {
        Upstream::Logits(&upstream)
    } else {
        Upstream::Output(&upstream)
    };
    let (grad, dx) = network.backward(params, &cache, up)?;
    let analytic = grad.flatten();
    let input_analytic = dx.into_data();

    let mut work = params.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..work.len() {
        let orig = work.as_slice()[i];
        work.as_mut_slice()[i] = orig + h;
        let plus = evaluate(network, &work, input, loss, mode)?.0;
        work.as_mut_slice()[i] = orig - h;
        let minus = evaluate(network, &work, input, loss, mode)?.0;
        work.as_mut_slice()[i] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }

    let mut x = input.clone();
    let mut input_numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let plus = evaluate(network, params, &x, loss, mode)?.0;
        x.data_mut()[i] = orig - h;
        let minus = evaluate(network, params, &x, loss, mode)?.0;
        x.data_mut()[i] = orig;
        input_numeric.push((plus - minus) / (2.0 * h));
    }

    let param_rel_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .collect();
    let input_rel_errors: Vec<f64> = input_analytic
        .iter()
        .zip(&input_numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .collect();
    let max_rel_error = param_rel_errors
        .iter()
        .chain(&input_rel_errors)
        .cloned()
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        analytic,
        numeric,
        param_rel_errors,
        input_analytic,
        input_numeric,
        input_rel_errors,
        max_rel_error,
        passed: max_rel_error < tol,
    })
}
