//! Region-selection strategies for turning a fixed-size proposal set into a
//! final set of class-labelled regions.
//!
//! Seven strategies are supported, from keeping every object proposal to the
//! composition of per-class score thresholds followed by per-class top-k. A
//! proposal's score is its maximum probability over the real classes; the
//! no-object probability never scores. All outputs are binarized at the
//! configured threshold and empty binarized masks are dropped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{mask_iou, BinaryMask, ClassId};

const PROB_SUM_TOL: f64 = 1e-6;

/// Per-pixel probability grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    height: usize,
    width: usize,
    probs: Vec<f64>,
}

impl SoftMask {
    pub fn new(height: usize, width: usize, probs: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || probs.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "soft mask {}x{} with {} entries",
                height,
                width,
                probs.len()
            )));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidValue("soft mask entries must be in [0,1]".into()));
        }
        Ok(Self { height, width, probs })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Threshold at `tau`: probability >= tau becomes foreground.
    pub fn binarize(&self, tau: f64) -> BinaryMask {
        let bits = self.probs.iter().map(|&p| (p >= tau) as u8).collect();
        BinaryMask::new(self.height, self.width, bits).expect("dims validated at construction")
    }
}

/// One query's prediction: a class probability vector over the C real
/// classes plus the no-object slot, and a soft mask.
#[derive(Debug, Clone)]
pub struct RegionProposal {
    class_probs: Vec<f64>,
    soft_mask: SoftMask,
    score: f64,
    argmax_class: ClassId,
}

impl RegionProposal {
    /// `class_probs` holds the C real classes at indices `0..C` followed by
    /// the no-object probability at index `C`. Must sum to 1 within 1e-6.
    pub fn new(class_probs: Vec<f64>, soft_mask: SoftMask) -> Result<Self> {
        if class_probs.len() < 2 {
            return Err(Error::InvalidValue(
                "class_probs needs at least one real class plus no-object".into(),
            ));
        }
        if class_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidValue("class probabilities must be in [0,1]".into()));
        }
        let sum: f64 = class_probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidValue(format!(
                "class probabilities sum to {sum}, expected 1"
            )));
        }
        let real = &class_probs[..class_probs.len() - 1];
        // Ties break toward the lower class id.
        let (best_idx, &best) = real
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.partial_cmp(b).unwrap().then(ib.cmp(ia)))
            .expect("at least one real class");
        Ok(Self {
            class_probs,
            soft_mask,
            score: best,
            argmax_class: ClassId(best_idx as u32 + 1),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_probs.len() - 1
    }

    pub fn class_probs(&self) -> &[f64] {
        &self.class_probs
    }

    /// Probability of a real class (1-based id).
    pub fn prob(&self, class: ClassId) -> f64 {
        self.class_probs[(class.0 - 1) as usize]
    }

    pub fn no_object_prob(&self) -> f64 {
        *self.class_probs.last().unwrap()
    }

    /// Max probability over the real classes.
    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn argmax_class(&self) -> ClassId {
        self.argmax_class
    }

    /// Whether the overall argmax lands on a real class rather than
    /// no-object. Ties go to no-object.
    pub fn is_object(&self) -> bool {
        self.score > self.no_object_prob()
    }

    pub fn soft_mask(&self) -> &SoftMask {
        &self.soft_mask
    }
}

/// The fixed-size set of proposals predicted for one frame.
#[derive(Debug, Clone)]
pub struct ProposalSet {
    pub frame: String,
    pub proposals: Vec<RegionProposal>,
}

impl ProposalSet {
    pub fn new(frame: impl Into<String>, proposals: Vec<RegionProposal>) -> Self {
        Self { frame: frame.into(), proposals }
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }
}

/// Region-selection strategy. Per-class vectors are indexed by class id - 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Strategy {
    /// Every proposal whose argmax is a real class.
    AllMasks,
    /// `all` filtered by score >= tau.
    GlobalThreshold { tau: f64 },
    /// The k highest-scoring object proposals.
    TopKGlobal { k: usize },
    /// Greedy suppression of masks overlapping a kept mask at IoU >= iou_tau.
    Nms { iou_tau: f64 },
    /// Keep proposals with score >= tau of their argmax class.
    PerClassThreshold { taus: Vec<f64> },
    /// For each class, the k_c highest-scoring proposals argmaxing it.
    TopKPerClass { ks: Vec<usize> },
    /// Per-class thresholds first, then per-class top-k on the survivors.
    Composed { ks: Vec<usize>, taus: Vec<f64> },
}

impl Strategy {
    /// The row name used by the CLI `--strategy` flag and ablation tables.
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::AllMasks => "all",
            Strategy::GlobalThreshold { .. } => "thresh05",
            Strategy::TopKGlobal { .. } => "top4",
            Strategy::Nms { .. } => "nms",
            Strategy::PerClassThreshold { .. } => "per-class-thresh",
            Strategy::TopKPerClass { .. } => "top-k-per-class",
            Strategy::Composed { .. } => "composed",
        }
    }
}

/// Inference configuration: strategy plus the soft-mask binarization
/// threshold (default 0.5).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub strategy: Strategy,
    #[serde(default = "default_binarize_tau")]
    pub binarize_tau: f64,
}

fn default_binarize_tau() -> f64 {
    0.5
}

impl InferenceConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self { strategy, binarize_tau: default_binarize_tau() }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.binarize_tau) {
            return Err(Error::ConfigInvalid("binarize_tau must be in [0,1]".into()));
        }
        let check_taus = |taus: &Vec<f64>| -> Result<()> {
            if taus.len() != num_classes {
                return Err(Error::ConfigInvalid(format!(
                    "expected {num_classes} per-class thresholds, got {}",
                    taus.len()
                )));
            }
            if taus.iter().any(|t| !(0.0..=1.0).contains(t)) {
                return Err(Error::ConfigInvalid("thresholds must be in [0,1]".into()));
            }
            Ok(())
        };
        let check_ks = |ks: &Vec<usize>| -> Result<()> {
            if ks.len() != num_classes {
                return Err(Error::ConfigInvalid(format!(
                    "expected {num_classes} per-class k values, got {}",
                    ks.len()
                )));
            }
            if ks.iter().any(|&k| k == 0) {
                return Err(Error::ConfigInvalid("k values must be >= 1".into()));
            }
            Ok(())
        };
        match &self.strategy {
            Strategy::AllMasks => Ok(()),
            Strategy::GlobalThreshold { tau } | Strategy::Nms { iou_tau: tau } => {
                if (0.0..=1.0).contains(tau) {
                    Ok(())
                } else {
                    Err(Error::ConfigInvalid("threshold must be in [0,1]".into()))
                }
            }
            Strategy::TopKGlobal { k } => {
                if *k >= 1 {
                    Ok(())
                } else {
                    Err(Error::ConfigInvalid("k must be >= 1".into()))
                }
            }
            Strategy::PerClassThreshold { taus } => check_taus(taus),
            Strategy::TopKPerClass { ks } => check_ks(ks),
            Strategy::Composed { ks, taus } => {
                check_ks(ks)?;
                check_taus(taus)
            }
        }
    }
}

/// A selected, binarized region together with the query index it came from.
#[derive(Debug, Clone)]
pub struct SelectedRegion {
    pub class: ClassId,
    pub mask: BinaryMask,
    pub score: f64,
    pub query: usize,
}

/// Apply a selection strategy to one frame's proposal set.
///
/// Output regions are ordered by query index; empty output is valid.
pub fn select(set: &ProposalSet, cfg: &InferenceConfig) -> Result<Vec<SelectedRegion>> {
    let num_classes = match set.proposals.first() {
        Some(p) => p.num_classes(),
        None => return Ok(Vec::new()),
    };
    cfg.validate(num_classes)?;

    // Candidates: object proposals with binarized masks, empties dropped.
    let mut candidates: Vec<SelectedRegion> = Vec::new();
    for (query, prop) in set.proposals.iter().enumerate() {
        if !prop.is_object() {
            continue;
        }
        let mask = prop.soft_mask().binarize(cfg.binarize_tau);
        if mask.is_empty() {
            continue;
        }
        candidates.push(SelectedRegion {
            class: prop.argmax_class(),
            mask,
            score: prop.score(),
            query,
        });
    }

    let mut kept: Vec<SelectedRegion> = match &cfg.strategy {
        Strategy::AllMasks => candidates,
        Strategy::GlobalThreshold { tau } => {
            candidates.into_iter().filter(|r| r.score >= *tau).collect()
        }
        Strategy::TopKGlobal { k } => {
            let mut by_score = candidates;
            sort_by_score_desc(&mut by_score);
            by_score.truncate(*k);
            by_score
        }
        Strategy::Nms { iou_tau } => nms(candidates, *iou_tau),
        Strategy::PerClassThreshold { taus } => candidates
            .into_iter()
            .filter(|r| r.score >= taus[(r.class.0 - 1) as usize])
            .collect(),
        Strategy::TopKPerClass { ks } => top_k_per_class(candidates, ks, num_classes),
        Strategy::Composed { ks, taus } => {
            let survivors: Vec<SelectedRegion> = candidates
                .into_iter()
                .filter(|r| r.score >= taus[(r.class.0 - 1) as usize])
                .collect();
            top_k_per_class(survivors, ks, num_classes)
        }
    };

    kept.sort_by_key(|r| r.query);
    Ok(kept)
}

fn sort_by_score_desc(regions: &mut [SelectedRegion]) {
    // Stable sort: equal scores keep query order, so the lower index wins.
    regions.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
}

fn top_k_per_class(candidates: Vec<SelectedRegion>, ks: &[usize], num_classes: usize) -> Vec<SelectedRegion> {
    let mut per_class: Vec<Vec<SelectedRegion>> = (0..num_classes).map(|_| Vec::new()).collect();
    for region in candidates {
        per_class[(region.class.0 - 1) as usize].push(region);
    }
    let mut kept = Vec::new();
    for (class_idx, mut regions) in per_class.into_iter().enumerate() {
        sort_by_score_desc(&mut regions);
        regions.truncate(ks[class_idx]);
        kept.extend(regions);
    }
    kept
}

/// Greedy class-agnostic non-maximum suppression: walk regions by descending
/// score and keep one iff its mask IoU with every already-kept mask is below
/// `iou_tau`. Equal scores break toward the lower input index.
pub fn nms(regions: Vec<SelectedRegion>, iou_tau: f64) -> Vec<SelectedRegion> {
    let mut ordered = regions;
    sort_by_score_desc(&mut ordered);
    let mut kept: Vec<SelectedRegion> = Vec::new();
    for region in ordered {
        let overlaps = kept.iter().any(|k| {
            // Masks of differing dims never suppress each other; empty-empty
            // IoU is undefined and treated as no overlap.
            matches!(mask_iou(&k.mask, &region.mask), Ok(Some(v)) if v >= iou_tau)
        });
        if !overlaps {
            kept.push(region);
        }
    }
    kept
}

/// Sweep per-class score thresholds over labelled frames and keep, for each
/// class, the threshold maximizing that class's dataset IoU (mean over frames
/// where the class appears in ground truth or survives the threshold).
///
/// Exact per-class decomposition: a class's union only depends on its own
/// threshold, so each class is swept independently. Ties prefer the lower
/// threshold.
pub fn calibrate_per_class_thresholds(
    frames: &[(Vec<SelectedRegion>, std::collections::BTreeMap<ClassId, BinaryMask>)],
    num_classes: usize,
    grid: &[f64],
) -> Vec<f64> {
    let mut taus = vec![0.5; num_classes];
    for class_idx in 0..num_classes {
        let class = ClassId(class_idx as u32 + 1);
        let mut best = (f64::NEG_INFINITY, 0.5);
        for &tau in grid {
            let mut sum = 0.0;
            let mut count = 0usize;
            for (regions, gt_unions) in frames {
                let mut pred_union: Option<BinaryMask> = None;
                for r in regions {
                    if r.class == class && r.score >= tau {
                        match pred_union.as_mut() {
                            Some(u) => u.union_in_place(&r.mask).expect("same dims"),
                            None => pred_union = Some(r.mask.clone()),
                        }
                    }
                }
                let gt = gt_unions.get(&class);
                match (pred_union, gt) {
                    (None, None) => {}
                    (Some(p), Some(g)) => {
                        sum += mask_iou(&p, g).expect("same dims").unwrap_or(0.0);
                        count += 1;
                    }
                    (Some(_), None) | (None, Some(_)) => {
                        count += 1;
                    }
                }
            }
            let score = if count == 0 { 0.0 } else { sum / count as f64 };
            if score > best.0 {
                best = (score, tau);
            }
        }
        taus[class_idx] = best.1;
    }
    taus
}
