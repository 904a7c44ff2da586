use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightingSource {
    /// `alpha_k = |D_k| / |D|`; merged updates follow the whole-dataset gradient.
    DataProportional,
    /// `alpha_k = 1`; plain summation of device updates.
    UniformSum,
    /// `alpha_k = 1 / n`.
    UniformAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeWeights {
    pub alphas: Vec<f64>,
    pub source: WeightingSource,
}

pub fn compute_merge_weights(data_sizes: &[u64], source: WeightingSource) -> Result<MergeWeights> {
    let n = data_sizes.len();
    if n == 0 {
        return Err(Error::Protocol("no devices to weight".into()));
    }
    let alphas = match source {
        WeightingSource::UniformSum => vec![1.0; n],
        WeightingSource::UniformAverage => vec![1.0 / n as f64; n],
        WeightingSource::DataProportional => {
            if data_sizes.contains(&0) {
                return Err(Error::Protocol(
                    "data-proportional weighting needs every device to hold data".into(),
                ));
            }
            let total: u64 = data_sizes.iter().sum();
            data_sizes
                .iter()
                .map(|d| *d as f64 / total as f64)
                .collect()
        }
    };
    Ok(MergeWeights { alphas, source })
}

/// Element-wise `sum_k alpha_k * delta_k`, accumulated in device order.
pub fn merge_deltas(weights: &MergeWeights, deltas: &[&[f64]]) -> Result<Vec<f64>> {
    if deltas.len() != weights.alphas.len() {
        return Err(Error::Length {
            expected: weights.alphas.len(),
            actual: deltas.len(),
        });
    }
    let len = deltas.first().map_or(0, |d| d.len());
    let mut out = vec![0.0; len];
    for (alpha, delta) in weights.alphas.iter().zip(deltas) {
        if delta.len() != len {
            return Err(Error::Length {
                expected: len,
                actual: delta.len(),
            });
        }
        for (o, d) in out.iter_mut().zip(delta.iter()) {
            *o += alpha * d;
        }
    }
    Ok(out)
}
