//! Quadruple center triplet loss and the identity loss.
//!
//! All functions operate on graph variables so gradients flow through the
//! centers back into every member feature. Stream embeddings are `[B, D]`
//! each, in `vg, vc, tg, tc` order; visible streams share the visible ids
//! row for row, infrared streams the infrared ids.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DistanceMode {
    /// Euclidean distance.
    #[default]
    Norm,
    /// Squared Euclidean distance.
    Squared,
}

/// Centers used as negative-margin anchors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NmAnchors {
    /// Visible and infrared modality centers.
    #[default]
    Modality,
    /// The four stream centers.
    Stream,
}

impl std::str::FromStr for DistanceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "norm" => Ok(DistanceMode::Norm),
            "squared" => Ok(DistanceMode::Squared),
            _ => Err(Error::Config(format!("unknown distance mode `{s}` (norm|squared)"))),
        }
    }
}

impl std::fmt::Display for DistanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DistanceMode::Norm => "norm",
            DistanceMode::Squared => "squared",
        })
    }
}

impl std::str::FromStr for NmAnchors {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modality" => Ok(NmAnchors::Modality),
            "stream" => Ok(NmAnchors::Stream),
            _ => Err(Error::Config(format!("unknown anchor mode `{s}` (modality|stream)"))),
        }
    }
}

impl std::fmt::Display for NmAnchors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NmAnchors::Modality => "modality",
            NmAnchors::Stream => "stream",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub qc_alpha: f64,
    pub margin_rho: f64,
    pub distance: DistanceMode,
    pub id_loss_weight: f64,
    pub nm_anchors: NmAnchors,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            qc_alpha: 0.05,
            margin_rho: 0.3,
            distance: DistanceMode::Norm,
            id_loss_weight: 1.0,
            nm_anchors: NmAnchors::Modality,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.qc_alpha) {
            return Err(Error::Config(format!("qc_alpha must lie in [0, 1], got {}", self.qc_alpha)));
        }
        if !(self.margin_rho >= 0.0 && self.margin_rho.is_finite()) {
            return Err(Error::Config(format!("margin_rho must be finite and ≥ 0, got {}", self.margin_rho)));
        }
        if !(self.id_loss_weight >= 0.0 && self.id_loss_weight.is_finite()) {
            return Err(Error::Config(format!("id_loss_weight must be finite and ≥ 0, got {}", self.id_loss_weight)));
        }
        Ok(())
    }
}

/// Identity grouping of a batch: `ids` sorted ascending, and for every
/// visible / infrared row the index of its identity in `ids`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdGroups {
    pub ids: Vec<u32>,
    pub visible: Vec<usize>,
    pub infrared: Vec<usize>,
}

impl IdGroups {
    /// Every identity must appear in both modalities.
    pub fn new(v_ids: &[u32], t_ids: &[u32]) -> Result<Self> {
        let mut present: BTreeMap<u32, [bool; 2]> = BTreeMap::new();
        for &i in v_ids {
            present.entry(i).or_default()[0] = true;
        }
        for &i in t_ids {
            present.entry(i).or_default()[1] = true;
        }
        if let Some((id, m)) = present.iter().find(|(_, m)| !(m[0] && m[1])) {
            let missing = if m[0] { "infrared" } else { "visible" };
            return Err(Error::Usage(format!("identity {id} has no {missing} samples in the batch")));
        }
        let ids: Vec<u32> = present.keys().copied().collect();
        let pos = |i: &u32| ids.binary_search(i).expect("present");
        Ok(IdGroups {
            visible: v_ids.iter().map(pos).collect(),
            infrared: t_ids.iter().map(pos).collect(),
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Per-identity means of each stream, `[P, D]` each.
pub fn stream_centers<T: Scalar>(g: &mut Graph<T>, streams: &[Var; 4], groups: &IdGroups) -> Result<[Var; 4]> {
    let p = groups.len();
    let c0 = g.group_mean(streams[0], &groups.visible, p)?;
    let c1 = g.group_mean(streams[1], &groups.visible, p)?;
    let c2 = g.group_mean(streams[2], &groups.infrared, p)?;
    let c3 = g.group_mean(streams[3], &groups.infrared, p)?;
    Ok([c0, c1, c2, c3])
}

/// Per-identity means over both streams of each modality: `(c_V, c_T)`.
pub fn modality_centers<T: Scalar>(g: &mut Graph<T>, streams: &[Var; 4], groups: &IdGroups) -> Result<(Var, Var)> {
    let p = groups.len();
    let v = g.concat(&[streams[0], streams[1]])?;
    let t = g.concat(&[streams[2], streams[3]])?;
    let gv = [groups.visible.clone(), groups.visible.clone()].concat();
    let gt = [groups.infrared.clone(), groups.infrared.clone()].concat();
    Ok((g.group_mean(v, &gv, p)?, g.group_mean(t, &gt, p)?))
}

/// `sum_r d(features[r], anchors[r])`.
fn summed_distance<T: Scalar>(g: &mut Graph<T>, features: Var, anchors: Var, mode: DistanceMode) -> Result<Var> {
    let diff = g.sub(features, anchors)?;
    let d = g.row_norm(diff, mode == DistanceMode::Squared)?;
    Ok(g.sum(d))
}

/// Every visible feature against the infrared global center of its
/// identity, and every infrared feature against the visible global center.
pub fn quar_distance<T: Scalar>(
    g: &mut Graph<T>,
    streams: &[Var; 4],
    centers: &[Var; 4],
    groups: &IdGroups,
    mode: DistanceMode,
) -> Result<Var> {
    let a_v = g.gather_rows(centers[2], &groups.visible)?;
    let a_t = g.gather_rows(centers[0], &groups.infrared)?;
    let feats = g.concat(streams)?;
    let anchors = g.concat(&[a_v, a_v, a_t, a_t])?;
    summed_distance(g, feats, anchors, mode)
}

/// Every visible feature against the infrared modality center of its
/// identity, and every infrared feature against the visible modality center.
pub fn dual_distance<T: Scalar>(
    g: &mut Graph<T>,
    streams: &[Var; 4],
    centers: (Var, Var),
    groups: &IdGroups,
    mode: DistanceMode,
) -> Result<Var> {
    let a_v = g.gather_rows(centers.1, &groups.visible)?;
    let a_t = g.gather_rows(centers.0, &groups.infrared)?;
    let feats = g.concat(streams)?;
    let anchors = g.concat(&[a_v, a_v, a_t, a_t])?;
    summed_distance(g, feats, anchors, mode)
}

/// `sum max(0, rho - |f - c|)` over every (feature, center) pair whose
/// identities differ.
pub fn negative_margin_loss<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    feature_ids: &[u32],
    centers: Var,
    center_ids: &[u32],
    rho: f64,
) -> Result<Var> {
    if g.shape(features)[0] != feature_ids.len() || g.shape(centers)[0] != center_ids.len() {
        return Err(Error::Shape("negative_margin_loss id lists must match the row counts".into()));
    }
    if feature_ids.iter().chain(center_ids).all(|&i| i == feature_ids[0]) {
        return Err(Error::Usage("negative margin loss needs at least two distinct identities".into()));
    }
    let n = center_ids.len();
    let mask = Tensor::from_fn(&[feature_ids.len(), n], |i| {
        if feature_ids[i / n] != center_ids[i % n] {
            T::one()
        } else {
            T::zero()
        }
    });
    let d = g.pairwise_dist(features, centers)?;
    let neg = g.scale(d, -1.0);
    let slack = g.add_scalar(neg, rho);
    let hinge = g.relu(slack);
    let masked = g.mul_const(hinge, &mask)?;
    Ok(g.sum(masked))
}

/// Raw terms of the quadruple center triplet loss.
#[derive(Clone, Copy, Debug)]
pub struct QctTerms {
    pub d_quar: Var,
    pub d_dual: Var,
    pub l_nm: Var,
    /// `qc_alpha * d_quar + (1 - qc_alpha) * d_dual`.
    pub l_qc: Var,
    /// `l_qc + l_nm`.
    pub l_qct: Var,
}

pub fn qct_loss<T: Scalar>(g: &mut Graph<T>, streams: &[Var; 4], groups: &IdGroups, cfg: &LossConfig) -> Result<QctTerms> {
    cfg.validate()?;
    let sc = stream_centers(g, streams, groups)?;
    let mc = modality_centers(g, streams, groups)?;
    let d_quar = quar_distance(g, streams, &sc, groups, cfg.distance)?;
    let d_dual = dual_distance(g, streams, mc, groups, cfg.distance)?;

    let feats = g.concat(streams)?;
    let feat_ids: Vec<u32> = [&groups.visible, &groups.visible, &groups.infrared, &groups.infrared]
        .iter()
        .flat_map(|rows| rows.iter().map(|&r| groups.ids[r]))
        .collect();
    let (centers, reps) = match cfg.nm_anchors {
        NmAnchors::Modality => (g.concat(&[mc.0, mc.1])?, 2),
        NmAnchors::Stream => (g.concat(&sc)?, 4),
    };
    let center_ids: Vec<u32> = (0..reps).flat_map(|_| groups.ids.iter().copied()).collect();
    let l_nm = negative_margin_loss(g, feats, &feat_ids, centers, &center_ids, cfg.margin_rho)?;

    let a = g.scale(d_quar, cfg.qc_alpha);
    let b = g.scale(d_dual, 1.0 - cfg.qc_alpha);
    let l_qc = g.add(a, b)?;
    let l_qct = g.add(l_qc, l_nm)?;
    Ok(QctTerms {
        d_quar,
        d_dual,
        l_nm,
        l_qc,
        l_qct,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l_id: Var,
    pub qct: QctTerms,
    /// `id_loss_weight * l_id + l_qct`.
    pub total: Var,
}

/// Scalar values of a [`LossTerms`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub l_id: f64,
    pub d_quar: f64,
    pub d_dual: f64,
    pub l_nm: f64,
    pub l_qc: f64,
    pub l_qct: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> LossValues {
        let v = |x: Var| g.value(x).item().as_f64();
        LossValues {
            l_id: v(self.l_id),
            d_quar: v(self.qct.d_quar),
            d_dual: v(self.qct.d_dual),
            l_nm: v(self.qct.l_nm),
            l_qc: v(self.qct.l_qc),
            l_qct: v(self.qct.l_qct),
            total: v(self.total),
        }
    }
}

/// Cross-entropy summed over all `4B` logit rows plus the quadruple center
/// triplet loss.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    streams: &[Var; 4],
    logits: Var,
    labels: &[usize],
    groups: &IdGroups,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let qct = qct_loss(g, streams, groups, cfg)?;
    let mean_ce = g.softmax_cross_entropy(logits, labels)?;
    let l_id = g.scale(mean_ce, labels.len() as f64);
    let weighted = g.scale(l_id, cfg.id_loss_weight);
    let total = g.add(weighted, qct.l_qct)?;
    Ok(LossTerms { l_id, qct, total })
}
