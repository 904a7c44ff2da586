use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::rng;
use crate::{Error, Result};

/// One device's share of the training pool, as indices into it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPartition {
    pub fractions: Vec<f64>,
    pub shards: Vec<Shard>,
}

/// `train = floor(0.8 n)`, the remainder validates.
pub fn split_train_validation(indices: &[usize]) -> Shard {
    let train = indices.len() * 4 / 5;
    Shard {
        train: indices[..train].to_vec(),
        validation: indices[train..].to_vec(),
    }
}

/// Shard sizes by largest remainder; equal remainders favour the lower device index.
pub fn shard_sizes(n: usize, fractions: &[f64]) -> Result<Vec<usize>> {
    if fractions.is_empty() {
        return Err(Error::Config("no data fractions".into()));
    }
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::Config("fractions must be finite and non-negative".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("fractions sum to {total}, not 1")));
    }
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    if let Some(k) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Config(format!("fraction {} gives device {k} an empty shard", fractions[k])));
    }
    Ok(sizes)
}

/// Random disjoint shards covering the whole pool, each split 80/20.
pub fn partition_dataset(data: &Dataset, fractions: &[f64], seed: u64) -> Result<DataPartition> {
    let sizes = shard_sizes(data.len(), fractions)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng::stream(seed, "partition", 0));
    let mut start = 0;
    let shards = sizes
        .iter()
        .map(|&s| {
            let shard = split_train_validation(&order[start..start + s]);
            start += s;
            shard
        })
        .collect();
    Ok(DataPartition {
        fractions: fractions.to_vec(),
        shards,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worlds::{generate_synthetic_dataset, SyntheticSpec};
    use proptest::prelude::*;

    #[test]
    fn eighty_twenty_of_fifty_thousand() {
        assert_eq!(shard_sizes(50_000, &[0.8, 0.2]).unwrap(), vec![40_000, 10_000]);
        let s = split_train_validation(&(0..10_000).collect::<Vec<_>>());
        assert_eq!((s.train.len(), s.validation.len()), (8_000, 2_000));
        assert_eq!(shard_sizes(7, &[1.0]).unwrap(), vec![7]);
    }

    #[test]
    fn remainder_ties_go_low() {
        assert_eq!(shard_sizes(3, &[0.5, 0.5]).unwrap(), vec![2, 1]);
        assert_eq!(shard_sizes(10, &[1.0 / 3.0; 3]).unwrap(), vec![4, 3, 3]);
    }

    #[test]
    fn rejects_bad_fractions() {
        assert!(shard_sizes(10, &[0.5, 0.4]).is_err());
        assert!(shard_sizes(10, &[0.99, 0.01]).is_err());
        assert!(shard_sizes(10, &[]).is_err());
    }

    proptest! {
        #[test]
        fn shards_disjoint_and_exhaustive(n in 20usize..200, w in 0.05f64..0.5, seed in any::<u64>()) {
            let data = generate_synthetic_dataset(&SyntheticSpec::new(2, n / 2, 1, 1.0), 0, 0).unwrap();
            let p = partition_dataset(&data, &[1.0 - w, w], seed).unwrap();
            let mut seen: Vec<usize> = p.shards.iter()
                .flat_map(|s| s.train.iter().chain(&s.validation).copied())
                .collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..data.len()).collect::<Vec<_>>());
            for s in &p.shards {
                prop_assert_eq!(s.train.len(), s.len() * 4 / 5);
            }
        }
    }
}
