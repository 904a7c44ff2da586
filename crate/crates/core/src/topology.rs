//! Shared-stem topologies and the split of each branch's parameters into shared and local parts.
//!
//! A device running branch `b` holds the stem parameters followed by the branch parameters, in
//! that order, so the shared slice is always a prefix of the device's flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::nn::{LayerSpec, Network};
use crate::{Error, Result};

/// Names the two branches of a cascaded topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cascade {
    pub complex: String,
    pub lightweight: String,
    pub branch_dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchedTopology {
    input_shape: Vec<usize>,
    stem: Vec<LayerSpec>,
    branches: Vec<(String, Vec<LayerSpec>)>,
    cascade: Option<Cascade>,
}

/// Lengths of the shared prefix and the local remainder of one branch's flat parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterPartition {
    pub shared_len: usize,
    pub local_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchSummary {
    pub branch: String,
    pub parameters: usize,
    pub operations: u64,
    pub shared_len: usize,
    pub local_len: usize,
}

fn strip_softmax(specs: &[LayerSpec]) -> &[LayerSpec] {
    match specs.split_last() {
        Some((LayerSpec::Softmax, rest)) => rest,
        _ => specs,
    }
}

fn with_softmax(specs: &[LayerSpec]) -> Vec<LayerSpec> {
    let mut v = strip_softmax(specs).to_vec();
    v.push(LayerSpec::Softmax);
    v
}

impl BranchedTopology {
    /// Independent branches after a common stem.
    pub fn build_share_first(
        input_shape: &[usize],
        stem: Vec<LayerSpec>,
        branches: Vec<(String, Vec<LayerSpec>)>,
    ) -> Result<Self> {
        if branches.is_empty() {
            return Err(Error::Topology("at least one branch is required".into()));
        }
        let topo = BranchedTopology {
            input_shape: input_shape.to_vec(),
            stem,
            branches,
            cascade: None,
        };
        topo.check_names()?;
        for (name, _) in &topo.branches {
            topo.network(name)?;
        }
        Ok(topo)
    }

    /// The lightweight network is contained in the complex one; the complex output is
    /// `Softmax(Add(BranchDropout(complex_logits), light_logits))`.
    pub fn build_cascaded(
        input_shape: &[usize],
        stem: Vec<LayerSpec>,
        complex: (String, Vec<LayerSpec>),
        lightweight: (String, Vec<LayerSpec>),
        branch_dropout: f64,
    ) -> Result<Self> {
        let cascade = Cascade {
            complex: complex.0.clone(),
            lightweight: lightweight.0.clone(),
            branch_dropout,
        };
        let topo = BranchedTopology {
            input_shape: input_shape.to_vec(),
            stem,
            branches: vec![lightweight, complex],
            cascade: Some(cascade),
        };
        topo.check_names()?;
        topo.network(&topo.cascade.as_ref().unwrap().complex)?;
        topo.network(&topo.cascade.as_ref().unwrap().lightweight)?;
        Ok(topo)
    }

    fn check_names(&self) -> Result<()> {
        for (i, (name, _)) in self.branches.iter().enumerate() {
            if self.branches[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::Topology(format!("duplicate branch name `{name}`")));
            }
        }
        Ok(())
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn stem(&self) -> &[LayerSpec] {
        &self.stem
    }

    pub fn cascade(&self) -> Option<&Cascade> {
        self.cascade.as_ref()
    }

    pub fn branch_names(&self) -> impl Iterator<Item = &str> {
        self.branches.iter().map(|(n, _)| n.as_str())
    }

    fn branch(&self, name: &str) -> Result<&[LayerSpec]> {
        self.branches
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
            .ok_or_else(|| Error::UnknownBranch(name.to_string()))
    }

    /// The runnable network of one branch, including the stem.
    pub fn network(&self, branch: &str) -> Result<Network> {
        let specs = self.branch(branch)?;
        match &self.cascade {
            None => Network::with_single_head(&self.input_shape, &self.stem, specs),
            Some(c) if c.lightweight == branch => {
                Network::with_single_head(&self.input_shape, &self.stem, &with_softmax(specs))
            }
            Some(c) => {
                let light = self.branch(&c.lightweight)?;
                Network::with_cascade(
                    &self.input_shape,
                    &self.stem,
                    strip_softmax(light),
                    strip_softmax(specs),
                    c.branch_dropout,
                )
            }
        }
    }

    pub fn count_parameters(&self, branch: &str) -> Result<usize> {
        Ok(self.network(branch)?.param_count())
    }

    /// Shared/local split for heterogeneous sharing. In a cascade the whole lightweight network
    /// is shared, so the complex device keeps only its complex-branch extension local.
    pub fn partition_parameters(&self, branch: &str) -> Result<ParameterPartition> {
        let net = self.network(branch)?;
        let shared_len = match &self.cascade {
            None => net.stem_param_count(),
            Some(c) => self.network(&c.lightweight)?.param_count(),
        };
        Ok(ParameterPartition {
            shared_len,
            local_len: net.param_count() - shared_len,
        })
    }

    /// Branch with the fewest parameters; the first one wins ties.
    pub fn lightest_branch(&self) -> Result<String> {
        let mut best: Option<(usize, &str)> = None;
        for (name, _) in &self.branches {
            let n = self.count_parameters(name)?;
            if best.is_none_or(|(b, _)| n < b) {
                best = Some((n, name));
            }
        }
        Ok(best.expect("at least one branch").1.to_string())
    }

    pub fn describe(&self) -> Result<Vec<BranchSummary>> {
        self.branches
            .iter()
            .map(|(name, _)| {
                let net = self.network(name)?;
                let part = self.partition_parameters(name)?;
                Ok(BranchSummary {
                    branch: name.clone(),
                    parameters: net.param_count(),
                    operations: net.operations(),
                    shared_len: part.shared_len,
                    local_len: part.local_len,
                })
            })
            .collect()
    }
}

impl ParameterPartition {
    pub fn new(shared_len: usize, local_len: usize) -> Self {
        ParameterPartition {
            shared_len,
            local_len,
        }
    }

    /// Everything is shared.
    pub fn full(total: usize) -> Self {
        ParameterPartition::new(total, 0)
    }

    /// Nothing is shared.
    pub fn isolated(total: usize) -> Self {
        ParameterPartition::new(0, total)
    }

    pub fn total(&self) -> usize {
        self.shared_len + self.local_len
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.total() {
            return Err(Error::Length {
                expected: self.total(),
                actual: len,
            });
        }
        Ok(())
    }

    /// `(shared, local)` views of a flat vector laid out stem first.
    pub fn split<'a>(&self, flat: &'a [f64]) -> Result<(&'a [f64], &'a [f64])> {
        self.check(flat.len())?;
        Ok(flat.split_at(self.shared_len))
    }

    pub fn split_mut<'a>(&self, flat: &'a mut [f64]) -> Result<(&'a mut [f64], &'a mut [f64])> {
        self.check(flat.len())?;
        Ok(flat.split_at_mut(self.shared_len))
    }

    pub fn split_gradient(&self, grad: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (s, l) = self.split(grad)?;
        Ok((s.to_vec(), l.to_vec()))
    }

    /// Inverse of [`ParameterPartition::split_gradient`]; the result is laid out shared first.
    pub fn concat_parameters(&self, local: &[f64], shared: &[f64]) -> Result<Vec<f64>> {
        if shared.len() != self.shared_len {
            return Err(Error::Length {
                expected: self.shared_len,
                actual: shared.len(),
            });
        }
        if local.len() != self.local_len {
            return Err(Error::Length {
                expected: self.local_len,
                actual: local.len(),
            });
        }
        let mut v = Vec::with_capacity(self.total());
        v.extend_from_slice(shared);
        v.extend_from_slice(local);
        Ok(v)
    }
}

/// Topologies of the reference experiments at full size.
pub mod presets {
    use super::*;

    fn conv(k: usize, out: usize, stride: usize) -> LayerSpec {
        LayerSpec::Conv2d {
            kh: k,
            kw: k,
            out_channels: out,
            stride,
        }
    }

    fn dense(units: usize) -> LayerSpec {
        LayerSpec::Dense { units }
    }

    /// 84x84x4 Atari input, two shared conv layers, complex and lightweight Q-heads.
    pub fn atari(actions: usize) -> BranchedTopology {
        let stem = vec![conv(8, 32, 4), LayerSpec::Relu, conv(4, 64, 2), LayerSpec::Relu];
        let complex = vec![
            conv(3, 64, 1),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            dense(512),
            LayerSpec::Relu,
            dense(actions),
        ];
        let light = vec![
            conv(3, 8, 1),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            dense(64),
            LayerSpec::Relu,
            dense(actions),
        ];
        BranchedTopology::build_share_first(
            &[84, 84, 4],
            stem,
            vec![("complex".into(), complex), ("lightweight".into(), light)],
        )
        .expect("preset is well formed")
    }

    fn cifar_stem() -> Vec<LayerSpec> {
        vec![
            conv(3, 32, 1),
            LayerSpec::Relu,
            conv(3, 32, 1),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { ph: 2, pw: 2 },
            LayerSpec::Dropout { p: 0.25 },
        ]
    }

    fn cifar_complex() -> Vec<LayerSpec> {
        vec![
            conv(3, 64, 1),
            LayerSpec::Relu,
            conv(3, 64, 1),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { ph: 2, pw: 2 },
            LayerSpec::Dropout { p: 0.25 },
            LayerSpec::Flatten,
            dense(512),
            LayerSpec::Relu,
            LayerSpec::Dropout { p: 0.25 },
            dense(10),
        ]
    }

    fn cifar_light() -> Vec<LayerSpec> {
        vec![
            LayerSpec::MaxPool2d { ph: 2, pw: 2 },
            LayerSpec::Dropout { p: 0.5 },
            LayerSpec::Flatten,
            dense(10),
            LayerSpec::Softmax,
        ]
    }

    /// 32x32x3 CIFAR input; the branches share the first six layers.
    pub fn cifar_share_first() -> BranchedTopology {
        let mut complex = cifar_complex();
        complex.push(LayerSpec::Softmax);
        BranchedTopology::build_share_first(
            &[32, 32, 3],
            cifar_stem(),
            vec![("complex".into(), complex), ("lightweight".into(), cifar_light())],
        )
        .expect("preset is well formed")
    }

    /// Cascaded CIFAR topology with branch dropout `p` on the complex logits.
    pub fn cifar_cascaded(p: f64) -> BranchedTopology {
        BranchedTopology::build_cascaded(
            &[32, 32, 3],
            cifar_stem(),
            ("complex".into(), cifar_complex()),
            ("lightweight".into(), cifar_light()),
            p,
        )
        .expect("preset is well formed")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn atari_counts() {
        let t = presets::atari(6);
        assert_eq!(t.count_parameters("complex").unwrap(), 1_687_206);
        assert_eq!(t.count_parameters("lightweight").unwrap(), 71_214);
        for b in ["complex", "lightweight"] {
            assert_eq!(t.network(b).unwrap().output_shape(), &[6]);
        }
    }

    #[test]
    fn cifar_light_count_and_share_first_partition() {
        let t = presets::cifar_share_first();
        assert_eq!(t.count_parameters("lightweight").unwrap(), 25_834);
        let p = t.partition_parameters("lightweight").unwrap();
        assert_eq!(p.shared_len, 896 + 9_248);
        assert_eq!(p.shared_len, 10_144);
        assert_eq!(p.total(), 25_834);
        assert_eq!(t.partition_parameters("complex").unwrap().shared_len, 10_144);
    }

    #[test]
    fn cascaded_partition_shares_whole_light_net() {
        let t = presets::cifar_cascaded(0.5);
        assert_eq!(t.count_parameters("lightweight").unwrap(), 25_834);
        for b in ["complex", "lightweight"] {
            assert_eq!(t.partition_parameters(b).unwrap().shared_len, 25_834);
        }
        assert_eq!(t.partition_parameters("lightweight").unwrap().local_len, 0);
        assert_eq!(t.lightest_branch().unwrap(), "lightweight");
    }

    #[test]
    fn empty_stem_degenerates() {
        let t = BranchedTopology::build_share_first(
            &[3],
            vec![],
            vec![("only".into(), vec![LayerSpec::Dense { units: 2 }])],
        )
        .unwrap();
        let p = t.partition_parameters("only").unwrap();
        assert_eq!(p, ParameterPartition::new(0, 8));
    }

    #[test]
    fn seam_shape_error() {
        let r = BranchedTopology::build_share_first(
            &[20, 20, 3],
            vec![LayerSpec::Conv2d { kh: 5, kw: 5, out_channels: 32, stride: 1 }],
            vec![("b".into(), vec![LayerSpec::Dense { units: 4 }])],
        );
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn cascade_logit_mismatch() {
        let r = BranchedTopology::build_cascaded(
            &[4],
            vec![LayerSpec::Dense { units: 4 }],
            ("c".into(), vec![LayerSpec::Dense { units: 3 }]),
            ("l".into(), vec![LayerSpec::Dense { units: 2 }]),
            0.5,
        );
        assert!(r.is_err());
    }

    #[test]
    fn duplicate_and_unknown_branches() {
        let b = vec![LayerSpec::Dense { units: 1 }];
        assert!(BranchedTopology::build_share_first(&[2], vec![], vec![("a".into(), b.clone()), ("a".into(), b.clone())]).is_err());
        let t = BranchedTopology::build_share_first(&[2], vec![], vec![("a".into(), b)]).unwrap();
        assert!(matches!(t.partition_parameters("z"), Err(Error::UnknownBranch(_))));
    }

    #[test]
    fn split_examples() {
        let p = ParameterPartition::new(2, 3);
        let (s, l) = p.split_gradient(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(s, vec![1.0, 2.0]);
        assert_eq!(l, vec![3.0, 4.0, 5.0]);
        assert!(p.split_gradient(&[1.0; 4]).is_err());
        assert!(p.concat_parameters(&[1.0; 2], &[1.0; 2]).is_err());
    }

    proptest! {
        #[test]
        fn split_concat_round_trip(shared in 0usize..20, v in proptest::collection::vec(-1e6f64..1e6, 0..40)) {
            let shared = shared.min(v.len());
            let p = ParameterPartition::new(shared, v.len() - shared);
            let (s, l) = p.split_gradient(&v).unwrap();
            prop_assert_eq!(p.concat_parameters(&l, &s).unwrap(), v);
        }
    }
}
