//! Learnable weights keyed by a stable layer-naming scheme.
//!
//! Keys look like `enc.l0.conv0.w`, `tenc.l2.norm1.gamma`, `dec.l1.up.b`,
//! `fuse.l3.w`, `head.w`. The key set is a pure function of the network
//! config, and every iteration over parameters runs in sorted key order, so
//! initialization, updates, and serialization are reproducible.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{Branch, NetworkConfig};

/// What a parameter array is, which determines its initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ParamKind {
    /// Convolution weights `(Cout, kh, kw, kd, Cin)`: fan-in-scaled uniform.
    ConvWeight,
    /// Bias vector: zeros.
    Bias,
    /// Normalization scale: ones.
    Gamma,
    /// Normalization shift: zeros.
    Beta,
}

/// Named parameter arrays in sorted key order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    arrays: BTreeMap<String, ArrayD<f64>>,
}

impl Parameters {
    pub(crate) fn from_arrays(arrays: BTreeMap<String, ArrayD<f64>>) -> Self {
        Self { arrays }
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.arrays
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.arrays.get(name)
    }

    pub(crate) fn slice(&self, name: &str) -> &[f64] {
        self.get(name).as_slice().expect("standard layout")
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.arrays.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_arrays(&self) -> usize {
        self.arrays.len()
    }

    /// Total number of scalars across all arrays.
    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(|a| a.len()).sum()
    }

    /// A same-shaped parameter set filled with zeros (gradient accumulator).
    pub fn zeros_like(&self) -> Parameters {
        let arrays = self
            .arrays
            .iter()
            .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
            .collect();
        Parameters { arrays }
    }

    /// Accumulates `delta` into the named array.
    pub fn add_assign(&mut self, name: &str, delta: &ArrayD<f64>) {
        let target = self
            .arrays
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"));
        debug_assert_eq!(target.shape(), delta.shape());
        let t = target.as_slice_mut().expect("standard layout");
        let d = delta.as_slice().expect("standard layout");
        for (a, b) in t.iter_mut().zip(d) {
            *a += b;
        }
    }

    pub(crate) fn add_assign_slice(&mut self, name: &str, delta: &[f64]) {
        let target = self
            .arrays
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"));
        let t = target.as_slice_mut().expect("standard layout");
        debug_assert_eq!(t.len(), delta.len());
        for (a, b) in t.iter_mut().zip(delta) {
            *a += b;
        }
    }

    /// Concatenation of all arrays in sorted key order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for a in self.arrays.values() {
            out.extend_from_slice(a.as_slice().expect("standard layout"));
        }
        out
    }

    /// Rebuilds a parameter set with this one's keys and shapes from a flat
    /// vector produced by [`Parameters::to_flat`].
    pub fn from_flat(&self, flat: &[f64]) -> Result<Parameters> {
        if flat.len() != self.num_scalars() {
            return Err(Error::ShapeMismatch(format!(
                "flat vector has {} scalars, parameters need {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut arrays = BTreeMap::new();
        let mut at = 0;
        for (k, v) in &self.arrays {
            let n = v.len();
            let arr = ArrayD::from_shape_vec(v.raw_dim(), flat[at..at + n].to_vec())
                .expect("shape matches length");
            arrays.insert(k.clone(), arr);
            at += n;
        }
        Ok(Parameters { arrays })
    }

    pub fn all_finite(&self) -> bool {
        self.arrays
            .values()
            .all(|a| a.iter().all(|v| v.is_finite()))
    }
}

/// Enumerates every parameter array the config implies: name, kind, shape.
pub(crate) fn parameter_specs(cfg: &NetworkConfig) -> Vec<(String, ParamKind, Vec<usize>)> {
    let kd = cfg.kernel_depth();
    let mut specs = Vec::new();
    let conv = |specs: &mut Vec<(String, ParamKind, Vec<usize>)>,
                    prefix: &str,
                    kernel: [usize; 3],
                    c_in: usize,
                    c_out: usize| {
        specs.push((
            format!("{prefix}.w"),
            ParamKind::ConvWeight,
            vec![c_out, kernel[0], kernel[1], kernel[2], c_in],
        ));
        specs.push((format!("{prefix}.b"), ParamKind::Bias, vec![c_out]));
    };
    let norm = |specs: &mut Vec<(String, ParamKind, Vec<usize>)>, prefix: &str, c: usize| {
        specs.push((format!("{prefix}.gamma"), ParamKind::Gamma, vec![c]));
        specs.push((format!("{prefix}.beta"), ParamKind::Beta, vec![c]));
    };

    let mut branches = vec![Branch::Image];
    if cfg.variant.has_template_encoder() {
        branches.push(Branch::Template);
    }
    for branch in branches {
        let prefix = branch.prefix();
        for l in 0..cfg.num_levels {
            let c_in = if l == 0 {
                cfg.branch_in_channels(branch)
            } else {
                cfg.level_channels(l - 1)
            };
            let c = cfg.level_channels(l);
            conv(&mut specs, &format!("{prefix}.l{l}.conv0"), [3, 3, kd], c_in, c);
            norm(&mut specs, &format!("{prefix}.l{l}.norm0"), c);
            conv(&mut specs, &format!("{prefix}.l{l}.conv1"), [3, 3, kd], c, c);
            norm(&mut specs, &format!("{prefix}.l{l}.norm1"), c);
        }
    }
    if cfg.variant == crate::network::Variant::DualEncoder {
        for l in 0..cfg.num_levels {
            let c = cfg.level_channels(l);
            conv(&mut specs, &format!("fuse.l{l}"), [1, 1, 1], 2 * c, c);
        }
    }
    for l in 0..cfg.num_levels - 1 {
        let c = cfg.level_channels(l);
        let c_deep = cfg.level_channels(l + 1);
        conv(&mut specs, &format!("dec.l{l}.up"), [3, 3, kd], c_deep, c);
        conv(&mut specs, &format!("dec.l{l}.conv0"), [3, 3, kd], 2 * c, c);
        norm(&mut specs, &format!("dec.l{l}.norm0"), c);
        conv(&mut specs, &format!("dec.l{l}.conv1"), [3, 3, kd], c, c);
        norm(&mut specs, &format!("dec.l{l}.norm1"), c);
    }
    conv(
        &mut specs,
        "head",
        [1, 1, 1],
        cfg.base_channels,
        cfg.out_channels(),
    );
    specs.sort_by(|a, b| a.0.cmp(&b.0));
    specs
}

/// Deterministic initialization from `cfg.seed`: convolution weights are
/// drawn from a fan-in-scaled uniform distribution, biases and norm shifts
/// start at zero, norm scales at one.
pub fn init_parameters(cfg: &NetworkConfig) -> Result<Parameters> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut arrays = BTreeMap::new();
    for (name, kind, shape) in parameter_specs(cfg) {
        let arr = match kind {
            ParamKind::ConvWeight => {
                let fan_in: usize = shape[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                ArrayD::from_shape_simple_fn(IxDyn(&shape), || rng.gen_range(-bound..bound))
            }
            ParamKind::Bias | ParamKind::Beta => ArrayD::zeros(IxDyn(&shape)),
            ParamKind::Gamma => ArrayD::from_elem(IxDyn(&shape), 1.0),
        };
        arrays.insert(name, arr);
    }
    Ok(Parameters { arrays })
}
