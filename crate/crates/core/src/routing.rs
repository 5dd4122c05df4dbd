//! Per-task filter selection from batch-norm scale factors.
//!
//! Each conv layer's filters are scored (by their BN `γ`, `|γ|`, or mean
//! absolute activation), the top `ceil(p·C)` are selected into the mask Ω,
//! and only the selected filters' conv weights and biases receive updates.
//! BN parameters and the classifier are never masked.

use std::collections::BTreeSet;

use crate::backbone::text_enum;
use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamTree};
use crate::tensor::Tensor;

/// The per-layer selection schedule reported for both datasets.
pub const DEFAULT_SCHEDULE: [f64; 4] = [0.70, 0.60, 0.30, 0.20];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    GammaSigned,
    GammaAbs,
    ActivationAbs,
}

text_enum!(Criterion {
    GammaSigned => "gamma_signed",
    GammaAbs => "gamma_abs",
    ActivationAbs => "activation_abs",
});

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingConfig {
    pub enabled: bool,
    pub p_schedule: Vec<f64>,
    pub criterion: Criterion,
    pub apply_to_outer: bool,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            p_schedule: DEFAULT_SCHEDULE.to_vec(),
            criterion: Criterion::GammaSigned,
            apply_to_outer: true,
        }
    }
}

impl RoutingConfig {
    /// Plain MAML: every filter updates.
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn with_schedule(p_schedule: Vec<f64>) -> Self {
        Self {
            p_schedule,
            ..Self::default()
        }
    }

    pub fn validate(&self, conv_layers: usize) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if self.p_schedule.len() != conv_layers {
            return Err(Error::Config(format!(
                "p schedule has {} entries for {} conv layers",
                self.p_schedule.len(),
                conv_layers
            )));
        }
        if let Some(p) = self.p_schedule.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(Error::Config(format!("selection fraction {p} is outside (0, 1]")));
        }
        Ok(())
    }
}

/// Number of filters selected from `channels` at fraction `p`: `ceil(p·C)`.
///
/// A relative slack of 1e-9 absorbs binary rounding (0.7·10 is
/// 7.000000000000001 in `f64`).
pub fn selection_count(p: f64, channels: usize) -> usize {
    let exact = p * channels as f64;
    ((exact - exact * 1e-9).ceil() as usize).clamp(1, channels)
}

/// Selected filter indices per conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingMask {
    /// `(layer id, filter count, selected indices ascending)`.
    pub layers: Vec<LayerMask>,
    pub criterion: Criterion,
    pub p_schedule: Vec<f64>,
    pub task: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    pub layer: usize,
    pub channels: usize,
    pub selected: Vec<usize>,
}

impl LayerMask {
    pub fn contains(&self, filter: usize) -> bool {
        self.selected.binary_search(&filter).is_ok()
    }
}

impl RoutingMask {
    /// A mask selecting every filter of every conv layer in `params`.
    pub fn full(params: &ParamTree) -> Result<Self> {
        let layers = params
            .conv_layers()
            .into_iter()
            .map(|layer| {
                let channels = params.filters(layer)?;
                Ok(LayerMask {
                    layer,
                    channels,
                    selected: (0..channels).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let p_schedule = vec![1.0; layers.len()];
        Ok(Self {
            layers,
            criterion: Criterion::GammaSigned,
            p_schedule,
            task: None,
        })
    }

    pub fn selection_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.selected.len()).collect()
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerMask> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    /// Per-element update flags for every entry of a tree with `params`' layout.
    pub fn element_mask(&self, params: &ParamTree) -> Result<Vec<Vec<bool>>> {
        params
            .entries()
            .iter()
            .map(|e| {
                let n = e.tensor.numel();
                if !e.kind.is_conv() {
                    return Ok(vec![true; n]);
                }
                let lm = self
                    .layer(e.layer)
                    .ok_or_else(|| Error::Routing(format!("no mask for conv layer {}", e.layer)))?;
                let filters = e.tensor.shape()[0];
                if filters != lm.channels {
                    return Err(Error::Routing(format!(
                        "layer {} has {filters} filters, mask expects {}",
                        e.layer, lm.channels
                    )));
                }
                let row = n / filters;
                let mut flags = vec![false; n];
                for &j in &lm.selected {
                    flags[j * row..(j + 1) * row].fill(true);
                }
                Ok(flags)
            })
            .collect()
    }
}

/// Per-layer filter scores under `criterion`.
///
/// `activations` holds one `[B, C, H, W]` tensor per conv layer and is only
/// consulted by [`Criterion::ActivationAbs`].
pub fn extract_scores(params: &ParamTree, criterion: Criterion, activations: Option<&[Tensor]>) -> Result<Vec<Vec<f64>>> {
    let layers = params.conv_layers();
    match criterion {
        Criterion::GammaSigned | Criterion::GammaAbs => layers
            .iter()
            .map(|&l| {
                let gamma = params
                    .get(l, ParamKind::BnGamma)
                    .ok_or_else(|| Error::Routing(format!("conv layer {l} has no bn_gamma")))?;
                Ok(match criterion {
                    Criterion::GammaAbs => gamma.data().iter().map(|g| g.abs()).collect(),
                    _ => gamma.data().to_vec(),
                })
            })
            .collect(),
        Criterion::ActivationAbs => {
            let acts = activations.ok_or_else(|| Error::Routing("activation_abs scoring needs the task's activations".into()))?;
            if acts.len() != layers.len() {
                return Err(Error::Routing(format!(
                    "{} activation maps for {} conv layers",
                    acts.len(),
                    layers.len()
                )));
            }
            Ok(acts.iter().map(mean_abs_per_channel).collect())
        }
    }
}

fn mean_abs_per_channel(t: &Tensor) -> Vec<f64> {
    let s = t.shape();
    let (batch, channels) = (s[0], s[1]);
    let spatial: usize = s[2..].iter().product();
    let mut out = vec![0.0; channels];
    for n in 0..batch {
        for (c, acc) in out.iter_mut().enumerate() {
            let start = (n * channels + c) * spatial;
            *acc += t.data()[start..start + spatial].iter().map(|v| v.abs()).sum::<f64>();
        }
    }
    let count = (batch * spatial) as f64;
    out.iter_mut().for_each(|v| *v /= count);
    out
}

/// Element-wise mean of several score sets with identical layout.
pub fn mean_scores(sets: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let mut out = sets[0].clone();
    for set in &sets[1..] {
        for (o, s) in out.iter_mut().zip(set) {
            o.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        }
    }
    let n = sets.len() as f64;
    out.iter_mut().flatten().for_each(|v| *v /= n);
    out
}

/// Top-`ceil(p·C)` filters per layer; equal scores favour the lower index.
pub fn select_filters(scores: &[Vec<f64>], p_schedule: &[f64]) -> Result<Vec<Vec<usize>>> {
    if scores.len() != p_schedule.len() {
        return Err(Error::Routing(format!(
            "{} score vectors for a schedule of {}",
            scores.len(),
            p_schedule.len()
        )));
    }
    scores
        .iter()
        .zip(p_schedule)
        .map(|(s, &p)| {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Routing(format!("selection fraction {p} is outside (0, 1]")));
            }
            if s.is_empty() {
                return Err(Error::Routing("layer without filters".into()));
            }
            let k = selection_count(p, s.len());
            let mut order: Vec<usize> = (0..s.len()).collect();
            order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            let mut chosen = order[..k].to_vec();
            chosen.sort_unstable();
            Ok(chosen)
        })
        .collect()
}

/// Scores `params` and builds the mask in one go.
pub fn build_mask(params: &ParamTree, config: &RoutingConfig, activations: Option<&[Tensor]>, task: Option<usize>) -> Result<RoutingMask> {
    let scores = extract_scores(params, config.criterion, activations)?;
    mask_from_scores(params, config, &scores, task)
}

pub fn mask_from_scores(params: &ParamTree, config: &RoutingConfig, scores: &[Vec<f64>], task: Option<usize>) -> Result<RoutingMask> {
    let layers = params.conv_layers();
    config.validate(layers.len())?;
    let selected = select_filters(scores, &config.p_schedule)?;
    Ok(RoutingMask {
        layers: layers
            .iter()
            .zip(selected)
            .zip(scores)
            .map(|((&layer, selected), s)| LayerMask {
                layer,
                channels: s.len(),
                selected,
            })
            .collect(),
        criterion: config.criterion,
        p_schedule: config.p_schedule.clone(),
        task,
    })
}

/// Zeroes conv weight rows and bias entries of unselected filters.
pub fn mask_gradients(grads: &ParamTree, mask: &RoutingMask) -> Result<ParamTree> {
    let mut out = grads.clone();
    mask_gradients_in_place(&mut out, mask)?;
    Ok(out)
}

pub fn mask_gradients_in_place(grads: &mut ParamTree, mask: &RoutingMask) -> Result<()> {
    let conv_layers = grads.conv_layers();
    if conv_layers.len() != mask.layers.len() || conv_layers.iter().zip(&mask.layers).any(|(a, b)| *a != b.layer) {
        return Err(Error::Routing(format!(
            "mask covers layers {:?}, gradients have conv layers {:?}",
            mask.layers.iter().map(|l| l.layer).collect::<Vec<_>>(),
            conv_layers
        )));
    }
    let flags = mask.element_mask(grads)?;
    for (entry, flags) in grads.entries_mut().iter_mut().zip(flags) {
        if entry.kind.is_conv() {
            for (v, keep) in entry.tensor.data_mut().iter_mut().zip(flags) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
    }
    Ok(())
}

/// Jaccard index of two index sets; two empty sets count as identical.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<_> = a.iter().collect();
    let b: BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Reuse statistics of one conv layer over a mask history.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerReuse {
    pub layer: usize,
    pub channels: usize,
    /// Mean of `|Ω_l| / C_l` over the history.
    pub selection_fraction: f64,
    /// Jaccard overlap of each consecutive pair of masks.
    pub consecutive_jaccard: Vec<f64>,
    pub mean_jaccard: f64,
    /// Fraction of filters selected at least once after each mask.
    pub ever_selected: Vec<f64>,
}

impl LayerReuse {
    pub fn final_ever_selected(&self) -> f64 {
        self.ever_selected.last().copied().unwrap_or(0.0)
    }
}

/// Per-layer reuse report for a sequence of masks (at least two).
pub fn routing_stats(history: &[RoutingMask]) -> Result<Vec<LayerReuse>> {
    if history.len() < 2 {
        return Err(Error::Routing(format!(
            "reuse statistics need at least 2 masks, got {}",
            history.len()
        )));
    }
    let first = &history[0];
    for m in history {
        if m.layers.len() != first.layers.len()
            || m.layers
                .iter()
                .zip(&first.layers)
                .any(|(a, b)| a.layer != b.layer || a.channels != b.channels)
        {
            return Err(Error::Routing("masks in the history have different layouts".into()));
        }
    }
    Ok(first
        .layers
        .iter()
        .enumerate()
        .map(|(i, lm)| {
            let sets: Vec<&[usize]> = history.iter().map(|m| m.layers[i].selected.as_slice()).collect();
            let consecutive_jaccard: Vec<f64> = sets.windows(2).map(|w| jaccard(w[0], w[1])).collect();
            let mut seen = vec![false; lm.channels];
            let ever_selected = sets
                .iter()
                .map(|s| {
                    s.iter().for_each(|&j| seen[j] = true);
                    seen.iter().filter(|&&b| b).count() as f64 / lm.channels as f64
                })
                .collect();
            LayerReuse {
                layer: lm.layer,
                channels: lm.channels,
                selection_fraction: sets.iter().map(|s| s.len() as f64).sum::<f64>() / (sets.len() * lm.channels) as f64,
                mean_jaccard: consecutive_jaccard.iter().sum::<f64>() / consecutive_jaccard.len() as f64,
                consecutive_jaccard,
                ever_selected,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, BackboneConfig};

    #[test]
    fn schedule_counts_on_64_channels() {
        let counts: Vec<usize> = DEFAULT_SCHEDULE.iter().map(|&p| selection_count(p, 64)).collect();
        assert_eq!(counts, vec![45, 39, 20, 13]);
        assert_eq!(selection_count(0.7, 10), 7);
        assert_eq!(selection_count(0.3, 10), 3);
        assert_eq!(selection_count(0.01, 10), 1);
        assert_eq!(selection_count(1.0, 10), 10);
    }

    #[test]
    fn gamma_scores() {
        let mut tree = ParamTree::new();
        tree.insert(0, ParamKind::ConvWeight, Tensor::zeros([3, 1, 1, 1])).unwrap();
        tree.insert(0, ParamKind::BnGamma, Tensor::new([3], vec![0.9, -1.5, 0.1]).unwrap())
            .unwrap();
        assert_eq!(
            extract_scores(&tree, Criterion::GammaSigned, None).unwrap(),
            vec![vec![0.9, -1.5, 0.1]]
        );
        assert_eq!(extract_scores(&tree, Criterion::GammaAbs, None).unwrap(), vec![vec![0.9, 1.5, 0.1]]);
        assert!(extract_scores(&tree, Criterion::ActivationAbs, None).is_err());
        let zeros = [Tensor::zeros([2, 3, 2, 2])];
        assert_eq!(
            extract_scores(&tree, Criterion::ActivationAbs, Some(&zeros)).unwrap(),
            vec![vec![0.0; 3]]
        );
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_filters(&[vec![0.9, 0.1, 0.5, 0.7]], &[0.5]).unwrap(), vec![vec![0, 3]]);
        assert_eq!(select_filters(&[vec![1.0; 4]], &[0.5]).unwrap(), vec![vec![0, 1]]);
        assert_eq!(select_filters(&[vec![0.3, 0.2, 0.1]], &[1.0]).unwrap(), vec![vec![0, 1, 2]]);
        assert!(select_filters(&[vec![1.0]], &[0.0]).is_err());
        assert!(select_filters(&[vec![1.0]], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn full_mask_leaves_gradients_alone() {
        let tree = build_backbone(&BackboneConfig::omniglot(5), 0).unwrap();
        let mask = RoutingMask::full(&tree).unwrap();
        assert_eq!(mask_gradients(&tree, &mask).unwrap(), tree);
    }

    #[test]
    fn mismatched_mask_is_rejected() {
        let tree = build_backbone(&BackboneConfig::omniglot(5), 0).unwrap();
        let mut mask = RoutingMask::full(&tree).unwrap();
        mask.layers.pop();
        assert!(matches!(mask_gradients(&tree, &mask), Err(Error::Routing(_))));
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard(&[0, 1], &[1, 2]), 1.0 / 3.0);
        assert_eq!(jaccard(&[0, 1], &[0, 1]), 1.0);
        assert_eq!(jaccard(&[0, 1], &[2, 3]), 0.0);
    }

    #[test]
    fn stats_need_two_masks() {
        let tree = build_backbone(&BackboneConfig::omniglot(5), 0).unwrap();
        let mask = RoutingMask::full(&tree).unwrap();
        assert!(routing_stats(std::slice::from_ref(&mask)).is_err());
        let report = routing_stats(&[mask.clone(), mask]).unwrap();
        assert!(report.iter().all(|r| r.mean_jaccard == 1.0 && r.selection_fraction == 1.0));
    }
}
