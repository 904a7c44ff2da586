//! Helpers shared by the integration tests.
#![allow(dead_code)]

use hetlearn::nn::network::Upstream;
use hetlearn::nn::{loss_cross_entropy, Mode, Network, ParamStore, Tensor};
use hetlearn::rng::StreamRng;
use hetlearn::worlds::Dataset;
use rand::SeedableRng;

/// Mean cross-entropy gradient over `indices` (eval mode, no stochastic layers expected).
pub fn mean_ce_gradient(net: &Network, params: &ParamStore, data: &Dataset, indices: &[usize]) -> Vec<f64> {
    let mut g = vec![0.0; params.len()];
    let mut rng = StreamRng::seed_from_u64(0);
    for &i in indices {
        let (x, y) = data.example(i);
        let (p, cache) = net.forward(params, &x, Mode::Eval, &mut rng).unwrap();
        let ce = loss_cross_entropy(p.data(), y).unwrap();
        let up = Tensor::new(p.shape().to_vec(), ce.grad_logits).unwrap();
        net.backward_into(params, &cache, Upstream::Logits(&up), &mut g).unwrap();
    }
    let n = indices.len() as f64;
    g.iter_mut().for_each(|v| *v /= n);
    g
}

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, 1e-12)`.
pub fn max_abs_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Optimal state values of a deterministic gridworld by value iteration. Transitions and
/// rewards are re-derived from the raw layout fields, not taken from the environment code.
pub fn gridworld_optimal_return(cfg: &hetlearn::worlds::GridConfig, gamma: f64) -> (f64, Vec<f64>) {
    let (w, h) = (cfg.width as i64, cfg.height as i64);
    let idx = |x: i64, y: i64| (y * w + x) as usize;
    let terminal = |x: i64, y: i64| {
        let c = (x as usize, y as usize);
        c == cfg.goal || cfg.pits.contains(&c)
    };
    let reward = |x: i64, y: i64| {
        let c = (x as usize, y as usize);
        if c == cfg.goal {
            cfg.goal_reward
        } else if cfg.pits.contains(&c) {
            cfg.pit_reward
        } else {
            cfg.step_penalty
        }
    };
    let mut v = vec![0.0; (w * h) as usize];
    for _ in 0..100_000 {
        let mut next = v.clone();
        for y in 0..h {
            for x in 0..w {
                if terminal(x, y) {
                    continue;
                }
                next[idx(x, y)] = [(0, -1), (0, 1), (-1, 0), (1, 0)]
                    .iter()
                    .map(|(dx, dy)| {
                        let nx = (x + dx).clamp(0, w - 1);
                        let ny = (y + dy).clamp(0, h - 1);
                        let cont = if terminal(nx, ny) { 0.0 } else { gamma * v[idx(nx, ny)] };
                        reward(nx, ny) + cont
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
            }
        }
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < 1e-15 {
            break;
        }
    }
    (v[idx(cfg.start.0 as i64, cfg.start.1 as i64)], v)
}
