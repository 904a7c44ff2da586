use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::tensor::Tensor;
use crate::{Error, Result};

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// One trainable tensor: `tensor` is 0 for weights and 1 for biases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub layer: usize,
    pub tensor: usize,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Canonical flattening order of a network's parameters: layers in network order, weights then
/// bias inside a layer.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    len: usize,
}

impl ParamLayout {
    pub(crate) fn push_layer(&mut self, layer: usize, shapes: &[Vec<usize>]) {
        for (tensor, shape) in shapes.iter().enumerate() {
            let entry = ParamEntry {
                layer,
                tensor,
                offset: self.len,
                shape: shape.clone(),
            };
            self.len += entry.len();
            self.entries.push(entry);
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn entry(&self, layer: usize, tensor: usize) -> Option<&ParamEntry> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.tensor == tensor)
    }

    /// Contiguous range holding all tensors of `layer`.
    pub fn layer_range(&self, layer: usize) -> std::ops::Range<usize> {
        let mut it = self.entries.iter().filter(|e| e.layer == layer);
        match it.next() {
            None => 0..0,
            Some(first) => {
                let end = it.fold(first.offset + first.len(), |_, e| e.offset + e.len());
                first.offset..end
            }
        }
    }
}

/// Flat parameter (or gradient) vector with its layout.
///
/// Every mutable access takes a new stamp, which lets `backward` detect caches recorded against
/// parameters that have since changed.
#[derive(Debug, Clone)]
pub struct ParamStore {
    layout: Arc<ParamLayout>,
    data: Vec<f64>,
    stamp: u64,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.layout == other.layout && self.data == other.data
    }
}

impl ParamStore {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let data = vec![0.0; layout.len()];
        ParamStore {
            layout,
            data,
            stamp: fresh_stamp(),
        }
    }

    /// Inverse of [`ParamStore::flatten`].
    pub fn unflatten(layout: Arc<ParamLayout>, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.len() {
            return Err(Error::Length {
                expected: layout.len(),
                actual: data.len(),
            });
        }
        Ok(ParamStore {
            layout,
            data,
            stamp: fresh_stamp(),
        })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.stamp = fresh_stamp();
        &mut self.data
    }

    pub fn set_from_slice(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.data.len() {
            return Err(Error::Length {
                expected: self.data.len(),
                actual: values.len(),
            });
        }
        self.as_mut_slice().copy_from_slice(values);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn stamp(&self) -> u64 {
        self.stamp
    }

    pub fn get(&self, layer: usize, tensor: usize) -> Option<Tensor> {
        let e = self.layout.entry(layer, tensor)?;
        Tensor::new(e.shape.clone(), self.data[e.offset..e.offset + e.len()].to_vec()).ok()
    }

    pub fn layer_slice(&self, layer: usize) -> &[f64] {
        &self.data[self.layout.layer_range(layer)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout() -> Arc<ParamLayout> {
        let mut l = ParamLayout::default();
        l.push_layer(0, &[vec![2, 3], vec![3]]);
        l.push_layer(2, &[vec![3, 1], vec![1]]);
        Arc::new(l)
    }

    #[test]
    fn canonical_order_is_weights_then_bias() {
        let l = layout();
        assert_eq!(l.len(), 6 + 3 + 3 + 1);
        assert_eq!(l.entry(0, 1).unwrap().offset, 6);
        assert_eq!(l.entry(2, 0).unwrap().offset, 9);
        assert_eq!(l.layer_range(2), 9..13);
        assert_eq!(l.layer_range(1), 0..0);
    }

    #[test]
    fn mutation_refreshes_stamp() {
        let mut p = ParamStore::zeros(layout());
        let s = p.stamp();
        p.as_mut_slice()[0] = 1.0;
        assert_ne!(s, p.stamp());
        assert_eq!(p.get(0, 0).unwrap().data()[0], 1.0);
    }

    #[test]
    fn wrong_length_rejected() {
        assert!(ParamStore::unflatten(layout(), vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trips(values in proptest::collection::vec(any::<f64>(), 13)) {
            let p = ParamStore::unflatten(layout(), values.clone()).unwrap();
            let back = p.flatten();
            prop_assert_eq!(
                back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
