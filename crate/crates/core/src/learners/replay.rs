use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Tensor,
    pub action: usize,
    pub reward: f64,
    pub next_state: Tensor,
    pub terminal: bool,
}

/// Fixed-capacity ring of transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            items: Vec::new(),
            next: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Inserts, overwriting the oldest entry once full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Uniform sample of distinct entries.
    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> Result<Vec<&Transition>> {
        if batch > self.items.len() {
            return Err(Error::Config(format!(
                "batch of {batch} from a buffer holding {}",
                self.items.len()
            )));
        }
        Ok(rand::seq::index::sample(rng, self.items.len(), batch)
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }

    /// Entries from oldest to newest.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(&self.items[..split])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn t(r: f64) -> Transition {
        Transition {
            state: Tensor::vector(vec![r]),
            action: 0,
            reward: r,
            next_state: Tensor::vector(vec![r]),
            terminal: false,
        }
    }

    proptest! {
        #[test]
        fn ring_keeps_newest(cap in 1usize..20, extra in 0usize..40) {
            let mut b = ReplayBuffer::new(cap).unwrap();
            for i in 0..cap + extra {
                b.push(t(i as f64));
            }
            prop_assert_eq!(b.len(), cap);
            let kept: Vec<f64> = b.iter_oldest_first().map(|x| x.reward).collect();
            let want: Vec<f64> = (extra..cap + extra).map(|i| i as f64).collect();
            prop_assert_eq!(kept, want);
        }
    }

    #[test]
    fn sample_is_without_replacement() {
        let mut b = ReplayBuffer::new(10).unwrap();
        for i in 0..10 {
            b.push(t(i as f64));
        }
        let mut r = crate::rng::StreamRng::seed_from_u64(3);
        let mut got: Vec<f64> = b.sample(10, &mut r).unwrap().iter().map(|x| x.reward).collect();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, (0..10).map(f64::from).collect::<Vec<_>>());
        assert!(b.sample(11, &mut r).is_err());
    }
}
