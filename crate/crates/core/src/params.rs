//! Named parameter storage with filter-granular addressing.

use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Role of a parameter tensor inside its layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    FcWeight,
    FcBias,
}

impl ParamKind {
    pub const ALL: [ParamKind; 6] = [
        ParamKind::ConvWeight,
        ParamKind::ConvBias,
        ParamKind::BnGamma,
        ParamKind::BnBeta,
        ParamKind::FcWeight,
        ParamKind::FcBias,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::ConvWeight => "conv_weight",
            ParamKind::ConvBias => "conv_bias",
            ParamKind::BnGamma => "bn_gamma",
            ParamKind::BnBeta => "bn_beta",
            ParamKind::FcWeight => "fc_weight",
            ParamKind::FcBias => "fc_bias",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn is_bn(self) -> bool {
        matches!(self, ParamKind::BnGamma | ParamKind::BnBeta)
    }

    pub fn is_conv(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::ConvBias)
    }
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub layer: usize,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

impl ParamEntry {
    /// Unique address of the entry, `"<layer>/<kind>"`.
    pub fn path(&self) -> String {
        format!("{}/{}", self.layer, self.kind)
    }
}

/// Per-channel affine parameters of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub epsilon: f64,
}

impl BnParams {
    pub fn new(gamma: Vec<f64>, beta: Vec<f64>, epsilon: f64) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(Error::Config(format!("bn gamma has {} channels, beta {}", gamma.len(), beta.len())));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("bn epsilon must be positive, got {epsilon}")));
        }
        Ok(Self { gamma, beta, epsilon })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Slice of a conv layer's weight and bias owned by one output filter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterSlice {
    pub weight: Range<usize>,
    pub bias: usize,
}

/// Ordered set of parameter tensors addressed by `(layer, kind)`.
///
/// Cloning is a deep copy.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamTree {
    entries: Vec<ParamEntry>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: usize, kind: ParamKind, tensor: Tensor) -> Result<()> {
        if self.get(layer, kind).is_some() {
            return Err(Error::Config(format!("duplicate parameter {layer}/{kind}")));
        }
        self.entries.push(ParamEntry { layer, kind, tensor });
        Ok(())
    }

    pub fn get(&self, layer: usize, kind: ParamKind) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.layer == layer && e.kind == kind).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, layer: usize, kind: ParamKind) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|e| e.layer == layer && e.kind == kind)
            .map(|e| &mut e.tensor)
    }

    pub fn require(&self, layer: usize, kind: ParamKind) -> Result<&Tensor> {
        self.get(layer, kind)
            .ok_or_else(|| Error::Config(format!("parameter {layer}/{kind} missing")))
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Layer ids that own a conv weight, ascending.
    pub fn conv_layers(&self) -> Vec<usize> {
        let mut layers: Vec<usize> = self
            .entries
            .iter()
            .filter(|e| e.kind == ParamKind::ConvWeight)
            .map(|e| e.layer)
            .collect();
        layers.sort_unstable();
        layers
    }

    /// Number of output filters of conv layer `layer`.
    pub fn filters(&self, layer: usize) -> Result<usize> {
        Ok(self.require(layer, ParamKind::ConvWeight)?.shape()[0])
    }

    /// Weight range and bias index of filter `j` in conv layer `layer`.
    pub fn filter_slice(&self, layer: usize, j: usize) -> Result<FilterSlice> {
        let w = self.require(layer, ParamKind::ConvWeight)?;
        let filters = w.shape()[0];
        if j >= filters {
            return Err(Error::Config(format!(
                "filter {j} out of range for layer {layer} with {filters} filters"
            )));
        }
        let row = w.numel() / filters;
        Ok(FilterSlice {
            weight: j * row..(j + 1) * row,
            bias: j,
        })
    }

    pub fn bn_params(&self, layer: usize, epsilon: f64) -> Result<BnParams> {
        BnParams::new(
            self.require(layer, ParamKind::BnGamma)?.data().to_vec(),
            self.require(layer, ParamKind::BnBeta)?.data().to_vec(),
            epsilon,
        )
    }

    /// Same layout, all values zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    layer: e.layer,
                    kind: e.kind,
                    tensor: Tensor::zeros(e.tensor.shape()),
                })
                .collect(),
        }
    }

    /// Whether `other` has the same entries in the same order with the same shapes.
    pub fn same_layout(&self, other: &ParamTree) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.layer == b.layer && a.kind == b.kind && a.tensor.shape() == b.tensor.shape())
    }

    fn check_layout(&self, other: &ParamTree) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Config("parameter trees have different layouts".into()))
        }
    }

    /// `self += alpha · other`, restricted to entries accepted by `filter`.
    pub fn axpy_where(&mut self, alpha: f64, other: &ParamTree, mut filter: impl FnMut(&ParamEntry) -> bool) -> Result<()> {
        self.check_layout(other)?;
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if filter(dst) {
                for (d, s) in dst.tensor.data_mut().iter_mut().zip(src.tensor.data()) {
                    *d += alpha * s;
                }
            }
        }
        Ok(())
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamTree) -> Result<()> {
        self.axpy_where(alpha, other, |_| true)
    }

    pub fn scale(&mut self, factor: f64) {
        for e in &mut self.entries {
            e.tensor.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn dot(&self, other: &ParamTree) -> f64 {
        self.entries.iter().zip(&other.entries).map(|(a, b)| a.tensor.dot(&b.tensor)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.is_finite())
    }

    pub fn max_abs_diff(&self, other: &ParamTree) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a.tensor.max_abs_diff(&b.tensor))
            .fold(0.0, f64::max)
    }

    /// All values concatenated in entry order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.tensor.data().iter().copied()).collect()
    }

    /// Overwrites all values from a flat vector produced by [`ParamTree::to_flat`].
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Config(format!(
                "flat vector has {} values, tree holds {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for e in &mut self.entries {
            let n = e.tensor.numel();
            e.tensor.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Registers every entry on `tape` as a trainable leaf.
    pub fn to_tape<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            vars: self.entries.iter().map(|e| tape.param(e.tensor.clone())).collect(),
            keys: self.entries.iter().map(|e| (e.layer, e.kind)).collect(),
        }
    }
}

/// Tape variables mirroring a [`ParamTree`] entry for entry.
pub struct ParamVars<'t> {
    vars: Vec<Var<'t>>,
    keys: Vec<(usize, ParamKind)>,
}

impl<'t> ParamVars<'t> {
    pub fn get(&self, layer: usize, kind: ParamKind) -> Result<Var<'t>> {
        self.keys
            .iter()
            .position(|&k| k == (layer, kind))
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("parameter {layer}/{kind} missing")))
    }

    /// Gradients after a backward pass, in the layout of `template`.
    pub fn grads(&self, tape: &Tape, template: &ParamTree) -> ParamTree {
        let mut out = template.zeros_like();
        for (entry, var) in out.entries.iter_mut().zip(&self.vars) {
            if let Some(g) = tape.grad(*var) {
                entry.tensor = g;
            }
        }
        out
    }
}
