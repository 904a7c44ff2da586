//! Data-parallel helpers with a sequential fallback.
//!
//! Work is split into fixed-size chunks and partial results are combined in chunk order, so the
//! parallel and sequential paths produce bit-identical floating-point results regardless of how
//! many worker threads are available.

use serde::{Deserialize, Serialize};

/// Number of items folded sequentially inside one parallel task.
pub const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Exec {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise runs sequentially.
    #[default]
    Parallel,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Order-preserving map.
pub fn map<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Maps every index in `0..n` to a vector of length `len` and returns the element-wise sum.
///
/// Items are folded in chunks of [`CHUNK`]; chunk sums are then added in ascending order.
pub fn sum_vectors<F, E>(exec: Exec, n: usize, len: usize, f: F) -> Result<Vec<f64>, E>
where
    F: Fn(usize, &mut [f64]) -> Result<(), E> + Sync + Send,
    E: Send,
{
    let chunks: Vec<usize> = (0..n.div_ceil(CHUNK)).collect();
    let fold_chunk = |&c: &usize| -> Result<Vec<f64>, E> {
        let mut acc = vec![0.0; len];
        let end = ((c + 1) * CHUNK).min(n);
        for i in c * CHUNK..end {
            f(i, &mut acc)?;
        }
        Ok(acc)
    };
    let partials = map(exec, &chunks, fold_chunk);
    let mut total = vec![0.0; len];
    for part in partials {
        let part = part?;
        for (t, p) in total.iter_mut().zip(&part) {
            *t += p;
        }
    }
    Ok(total)
}
