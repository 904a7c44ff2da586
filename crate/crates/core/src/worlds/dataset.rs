use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::nn::Tensor;
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Synthetic,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    Real(Vec<f64>),
    /// Raw bytes, read back as `byte / 255`.
    Bytes(Vec<u8>),
}

/// Labelled examples with a common feature shape, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    feature_shape: Vec<usize>,
    storage: Storage,
    labels: Vec<usize>,
    num_classes: usize,
    provenance: Provenance,
}

impl Dataset {
    pub fn from_reals(
        feature_shape: Vec<usize>,
        features: Vec<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("non-finite feature".into()));
        }
        Self::checked(feature_shape, Storage::Real(features), labels, num_classes, provenance)
    }

    pub fn from_bytes(
        feature_shape: Vec<usize>,
        bytes: Vec<u8>,
        labels: Vec<usize>,
        num_classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        Self::checked(feature_shape, Storage::Bytes(bytes), labels, num_classes, provenance)
    }

    fn checked(
        feature_shape: Vec<usize>,
        storage: Storage,
        labels: Vec<usize>,
        num_classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        let width: usize = feature_shape.iter().product();
        let stored = match &storage {
            Storage::Real(v) => v.len(),
            Storage::Bytes(v) => v.len(),
        };
        if width == 0 || stored != width * labels.len() {
            return Err(Error::Data(format!(
                "{stored} feature values do not fit {} examples of shape {feature_shape:?}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Dataset {
            feature_shape,
            storage,
            labels,
            num_classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    pub fn feature_len(&self) -> usize {
        self.feature_shape.iter().product()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Raw bytes for byte-backed datasets.
    pub fn raw_bytes(&self, i: usize) -> Option<&[u8]> {
        let w = self.feature_len();
        match &self.storage {
            Storage::Bytes(b) => Some(&b[i * w..(i + 1) * w]),
            Storage::Real(_) => None,
        }
    }

    pub fn features(&self, i: usize) -> Vec<f64> {
        let w = self.feature_len();
        match &self.storage {
            Storage::Real(v) => v[i * w..(i + 1) * w].to_vec(),
            Storage::Bytes(b) => b[i * w..(i + 1) * w]
                .iter()
                .map(|&x| f64::from(x) / 255.0)
                .collect(),
        }
    }

    pub fn example(&self, i: usize) -> (Tensor, usize) {
        let t = Tensor::new(self.feature_shape.clone(), self.features(i)).expect("shape checked");
        (t, self.labels[i])
    }

    /// New dataset made of the given rows, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let w = self.feature_len();
        let storage = match &self.storage {
            Storage::Real(v) => Storage::Real(
                indices.iter().flat_map(|&i| v[i * w..(i + 1) * w].iter().copied()).collect(),
            ),
            Storage::Bytes(b) => Storage::Bytes(
                indices.iter().flat_map(|&i| b[i * w..(i + 1) * w].iter().copied()).collect(),
            ),
        };
        Dataset {
            feature_shape: self.feature_shape.clone(),
            storage,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            provenance: self.provenance,
        }
    }
}

/// Parameters of the Gaussian-mixture task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub dims: usize,
    pub class_separation: f64,
    /// Mixture components per class. With one component the class means sit on a regular
    /// simplex (or a circle when `dims < num_classes`). With more, every component centre is
    /// drawn from `N(0, separation^2 / 2 · I)`, which makes the classes non-linear.
    #[serde(default = "one")]
    pub modes_per_class: usize,
    #[serde(default = "unit")]
    pub noise: f64,
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, per_class: usize, dims: usize, class_separation: f64) -> Self {
        SyntheticSpec {
            num_classes,
            per_class,
            dims,
            class_separation,
            modes_per_class: 1,
            noise: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.per_class == 0 || self.dims == 0 || self.modes_per_class == 0 {
            return Err(Error::Config("synthetic dataset counts must be positive".into()));
        }
        if !(self.class_separation.is_finite() && self.class_separation >= 0.0) {
            return Err(Error::Config("class separation must be finite and non-negative".into()));
        }
        if !(self.noise.is_finite() && self.noise > 0.0) {
            return Err(Error::Config("noise must be positive".into()));
        }
        Ok(())
    }

    /// Centres indexed `[class][mode]`; a pure function of `seed`.
    pub fn centres(&self, seed: u64) -> Vec<Vec<Vec<f64>>> {
        let (k, d, s) = (self.num_classes, self.dims, self.class_separation);
        if self.modes_per_class > 1 {
            let mut r = rng::stream(seed, "synthetic-centres", 0);
            let scale = s / std::f64::consts::SQRT_2;
            return (0..k)
                .map(|_| {
                    (0..self.modes_per_class)
                        .map(|_| {
                            (0..d)
                                .map(|_| { let z: f64 = StandardNormal.sample(&mut r); scale * z })
                                .collect::<Vec<f64>>()
                        })
                        .collect()
                })
                .collect();
        }
        (0..k)
            .map(|c| {
                let mut m = vec![0.0; d];
                if d >= k {
                    // Scaled basis vectors: every pair is `s` apart.
                    m[c] = s / std::f64::consts::SQRT_2;
                } else if d >= 2 {
                    // Regular polygon with side `s`.
                    let r = if k > 1 { s / (2.0 * (std::f64::consts::PI / k as f64).sin()) } else { 0.0 };
                    let a = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
                    m[0] = r * a.cos();
                    m[1] = r * a.sin();
                } else {
                    m[0] = s * c as f64;
                }
                vec![m]
            })
            .collect()
    }
}

/// Gaussian class blobs, ordered class by class. Deterministic in `seed`; `stream` selects an
/// independent draw from the same mixture (e.g. 0 for training, 1 for test).
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, seed: u64, stream: u64) -> Result<Dataset> {
    spec.validate()?;
    let centres = spec.centres(seed);
    let mut r = rng::stream(seed, "synthetic-samples", stream);
    let n = spec.num_classes * spec.per_class;
    let mut features = Vec::with_capacity(n * spec.dims);
    let mut labels = Vec::with_capacity(n);
    for (c, modes) in centres.iter().enumerate() {
        for _ in 0..spec.per_class {
            let m = &modes[r.random_range(0..modes.len())];
            for mu in m {
                let z: f64 = StandardNormal.sample(&mut r);
                features.push(mu + spec.noise * z);
            }
            labels.push(c);
        }
    }
    Dataset::from_reals(vec![spec.dims], features, labels, spec.num_classes, Provenance::Synthetic)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let spec = SyntheticSpec::new(3, 20, 4, 2.0);
        let a = generate_synthetic_dataset(&spec, 9, 0).unwrap();
        let b = generate_synthetic_dataset(&spec, 9, 0).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&spec, 9, 1).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.len(), 60);
        assert_eq!(a.label(59), 2);
    }

    #[test]
    fn simplex_centres_equidistant() {
        let spec = SyntheticSpec::new(4, 1, 6, 3.0);
        let c = spec.centres(0);
        for i in 0..4 {
            for j in 0..i {
                let d: f64 = c[i][0].iter().zip(&c[j][0]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!((d.sqrt() - 3.0).abs() < 1e-12);
            }
        }
        let circle = SyntheticSpec::new(5, 1, 2, 3.0).centres(0);
        let d: f64 = circle[0][0].iter().zip(&circle[1][0]).map(|(a, b)| (a - b).powi(2)).sum();
        assert!((d.sqrt() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn subset_and_bytes() {
        let d = Dataset::from_bytes(vec![2], vec![0, 255, 51, 102], vec![1, 0], 2, Provenance::Cifar10).unwrap();
        assert_eq!(d.features(0), vec![0.0, 1.0]);
        let s = d.subset(&[1]);
        assert_eq!(s.features(0), vec![51.0 / 255.0, 102.0 / 255.0]);
        assert_eq!(s.labels(), &[0]);
        assert!(Dataset::from_bytes(vec![2], vec![0; 4], vec![2, 0], 2, Provenance::Cifar10).is_err());
    }
}
