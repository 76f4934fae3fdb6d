//! Segmentation metrics (mIoU, IoU, mcIoU) and the oracle-relabelling upper
//! bounds that isolate mask quality from classification error.
//!
//! Contract, with `S_gt` the classes present in a frame's ground truth and
//! `S_pred` the classes with a non-empty predicted union:
//!
//! - mIoU: mean over frames (with non-empty `S_gt`) of the mean over
//!   `c in S_gt` of that class's frame IoU.
//! - IoU: mean over frames (with non-empty `S_gt | S_pred`) of the mean over
//!   `c in S_gt | S_pred`; false-positive classes contribute zeros.
//! - mcIoU: per class, the mean over frames where the class appears on
//!   either side; then the mean over classes that appear anywhere.
//!
//! Frames empty on both sides contribute to no metric, and class IoUs that
//! are undefined on both sides are excluded from every mean rather than
//! scored. IoU <= mIoU holds by construction (the extra terms are zeros).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{select, InferenceConfig, ProposalSet, SelectedRegion};
use crate::mask::{class_union, mask_iou, BinaryMask, ClassId};
use crate::matching::hungarian;
use crate::matching::CostMatrix;

/// Ground-truth instance masks with class labels for one frame.
#[derive(Debug, Clone)]
pub struct FrameAnnotation {
    pub frame: String,
    pub height: usize,
    pub width: usize,
    pub instances: Vec<(ClassId, BinaryMask)>,
}

impl FrameAnnotation {
    pub fn new(
        frame: impl Into<String>,
        height: usize,
        width: usize,
        instances: Vec<(ClassId, BinaryMask)>,
    ) -> Result<Self> {
        for (_, mask) in &instances {
            if mask.dims() != (height, width) {
                return Err(Error::DimensionMismatch(format!(
                    "instance mask {}x{} in a {height}x{width} frame",
                    mask.dims().0,
                    mask.dims().1
                )));
            }
        }
        Ok(Self { frame: frame.into(), height, width, instances })
    }

    /// Class ids with a non-empty ground-truth union.
    pub fn present_classes(&self) -> Vec<ClassId> {
        let unions = class_union(&self.instances).expect("dims validated at construction");
        unions.into_iter().filter(|(_, m)| !m.is_empty()).map(|(c, _)| c).collect()
    }
}

/// Predicted regions for one frame, as consumed by the evaluator.
#[derive(Debug, Clone)]
pub struct FramePredictions {
    pub frame: String,
    pub regions: Vec<(ClassId, BinaryMask, f64)>,
}

impl FramePredictions {
    pub fn from_selected(frame: impl Into<String>, regions: Vec<SelectedRegion>) -> Self {
        Self {
            frame: frame.into(),
            regions: regions.into_iter().map(|r| (r.class, r.mask, r.score)).collect(),
        }
    }
}

/// Per-frame metric components.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame: String,
    /// Mean IoU over ground-truth classes; absent when the frame has none.
    pub miou: Option<f64>,
    /// Mean IoU over the union of ground-truth and predicted classes.
    pub iou: Option<f64>,
}

/// Aggregated evaluation results over a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub iou: f64,
    pub mciou: f64,
    /// Dataset-level per-class IoU means (the mcIoU components); `None` for
    /// classes never appearing on either side.
    pub per_class: Vec<Option<f64>>,
    pub per_frame: Vec<FrameScore>,
    /// Sample standard deviation of fold-level mIoU, for k-fold reports.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stddev: Option<f64>,
}

/// Per-class IoU of one frame: predicted class union vs ground-truth class
/// union. `None` marks classes absent from both sides.
pub fn frame_class_ious(
    predictions: &[(ClassId, BinaryMask, f64)],
    gt: &FrameAnnotation,
) -> Result<BTreeMap<ClassId, Option<f64>>> {
    let pred_regions: Vec<(ClassId, BinaryMask)> =
        predictions.iter().map(|(c, m, _)| (*c, m.clone())).collect();
    for (_, mask) in &pred_regions {
        if mask.dims() != (gt.height, gt.width) {
            return Err(Error::DimensionMismatch(format!(
                "prediction mask {}x{} in a {}x{} frame",
                mask.dims().0,
                mask.dims().1,
                gt.height,
                gt.width
            )));
        }
    }
    let pred_unions = class_union(&pred_regions)?;
    let gt_unions = class_union(&gt.instances)?;

    let mut out = BTreeMap::new();
    let classes: std::collections::BTreeSet<ClassId> =
        pred_unions.keys().chain(gt_unions.keys()).copied().collect();
    for class in classes {
        let pred = pred_unions.get(&class).filter(|m| !m.is_empty());
        let gt_mask = gt_unions.get(&class).filter(|m| !m.is_empty());
        let value = match (pred, gt_mask) {
            (None, None) => None,
            (Some(_), None) | (None, Some(_)) => Some(0.0),
            (Some(p), Some(g)) => Some(mask_iou(p, g)?.unwrap_or(0.0)),
        };
        out.insert(class, value);
    }
    Ok(out)
}

/// Evaluate predictions against annotations and aggregate the three metrics.
/// Frames are joined by id; both sides must carry exactly the same ids.
pub fn evaluate(
    predictions: &[FramePredictions],
    annotations: &[FrameAnnotation],
    num_classes: usize,
) -> Result<EvalReport> {
    let mut preds_by_frame: BTreeMap<&str, &FramePredictions> = BTreeMap::new();
    for p in predictions {
        if preds_by_frame.insert(&p.frame, p).is_some() {
            return Err(Error::FrameIdMismatch(format!("duplicate prediction frame {}", p.frame)));
        }
    }
    if preds_by_frame.len() != annotations.len() {
        return Err(Error::FrameIdMismatch(format!(
            "{} prediction frames vs {} annotated frames",
            preds_by_frame.len(),
            annotations.len()
        )));
    }

    let mut per_frame = Vec::with_capacity(annotations.len());
    let mut miou_sum = 0.0;
    let mut miou_frames = 0usize;
    let mut iou_sum = 0.0;
    let mut iou_frames = 0usize;
    let mut class_sum = vec![0.0; num_classes];
    let mut class_count = vec![0usize; num_classes];

    for gt in annotations {
        let preds = preds_by_frame
            .get(gt.frame.as_str())
            .ok_or_else(|| Error::FrameIdMismatch(format!("no predictions for frame {}", gt.frame)))?;
        let ious = frame_class_ious(&preds.regions, gt)?;
        let gt_classes = gt.present_classes();

        let mut gt_vals = Vec::new();
        let mut union_vals = Vec::new();
        for (class, value) in &ious {
            if class.0 == 0 || class.0 as usize > num_classes {
                return Err(Error::InvalidValue(format!(
                    "class id {class} out of range 1..={num_classes}"
                )));
            }
            if let Some(v) = value {
                union_vals.push(*v);
                let idx = (class.0 - 1) as usize;
                class_sum[idx] += v;
                class_count[idx] += 1;
                if gt_classes.contains(class) {
                    gt_vals.push(*v);
                }
            }
        }

        let frame_miou = mean(&gt_vals);
        let frame_iou = mean(&union_vals);
        if let Some(v) = frame_miou {
            miou_sum += v;
            miou_frames += 1;
        }
        if let Some(v) = frame_iou {
            iou_sum += v;
            iou_frames += 1;
        }
        per_frame.push(FrameScore { frame: gt.frame.clone(), miou: frame_miou, iou: frame_iou });
    }

    let per_class: Vec<Option<f64>> = class_sum
        .iter()
        .zip(&class_count)
        .map(|(&s, &n)| if n == 0 { None } else { Some(s / n as f64) })
        .collect();
    let observed: Vec<f64> = per_class.iter().flatten().copied().collect();

    Ok(EvalReport {
        miou: if miou_frames == 0 { 0.0 } else { miou_sum / miou_frames as f64 },
        iou: if iou_frames == 0 { 0.0 } else { iou_sum / iou_frames as f64 },
        mciou: mean(&observed).unwrap_or(0.0),
        per_class,
        per_frame,
        stddev: None,
    })
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Candidate source for the upper bounds: the regions kept by an inference
/// configuration, or all N proposals binarized without any selection.
#[derive(Debug, Clone)]
pub enum UpperBoundSource {
    Inferred(InferenceConfig),
    Total { binarize_tau: f64 },
}

/// Matching mode between ground-truth instances and candidate masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpperBoundMatching {
    /// Each instance independently takes its best-IoU candidate; one
    /// candidate may serve several instances.
    PerInstanceBest,
    /// Globally optimal one-to-one matching maximizing total IoU.
    Injective,
}

/// Oracle upper bound: relabel, per frame, the best-IoU candidate mask for
/// each annotated instance with that instance's class, discard unmatched
/// candidates, then evaluate.
pub fn upper_bound(
    proposal_sets: &[ProposalSet],
    annotations: &[FrameAnnotation],
    source: &UpperBoundSource,
    matching: UpperBoundMatching,
    num_classes: usize,
) -> Result<EvalReport> {
    let mut anns_by_frame: BTreeMap<&str, &FrameAnnotation> = BTreeMap::new();
    for a in annotations {
        anns_by_frame.insert(&a.frame, a);
    }

    let mut relabeled = Vec::with_capacity(proposal_sets.len());
    for set in proposal_sets {
        let gt = anns_by_frame
            .get(set.frame.as_str())
            .ok_or_else(|| Error::FrameIdMismatch(format!("no annotations for frame {}", set.frame)))?;
        let candidates: Vec<(BinaryMask, f64)> = match source {
            UpperBoundSource::Inferred(cfg) => select(set, cfg)?
                .into_iter()
                .map(|r| (r.mask, r.score))
                .collect(),
            UpperBoundSource::Total { binarize_tau } => set
                .proposals
                .iter()
                .map(|p| (p.soft_mask().binarize(*binarize_tau), p.score()))
                .filter(|(m, _)| !m.is_empty())
                .collect(),
        };
        relabeled.push(FramePredictions {
            frame: set.frame.clone(),
            regions: relabel_frame(&candidates, gt, matching)?,
        });
    }
    evaluate(&relabeled, annotations, num_classes)
}

fn relabel_frame(
    candidates: &[(BinaryMask, f64)],
    gt: &FrameAnnotation,
    matching: UpperBoundMatching,
) -> Result<Vec<(ClassId, BinaryMask, f64)>> {
    if candidates.is_empty() || gt.instances.is_empty() {
        return Ok(Vec::new());
    }
    let mut ious = vec![vec![0.0; candidates.len()]; gt.instances.len()];
    for (gi, (_, gt_mask)) in gt.instances.iter().enumerate() {
        for (ci, (mask, _)) in candidates.iter().enumerate() {
            ious[gi][ci] = mask_iou(mask, gt_mask)?.unwrap_or(0.0);
        }
    }

    let mut picked: Vec<(ClassId, usize)> = Vec::new();
    match matching {
        UpperBoundMatching::PerInstanceBest => {
            for (gi, (class, _)) in gt.instances.iter().enumerate() {
                let best = (0..candidates.len())
                    .max_by(|&a, &b| ious[gi][a].partial_cmp(&ious[gi][b]).unwrap().then(b.cmp(&a)))
                    .expect("candidates non-empty");
                picked.push((*class, best));
            }
        }
        UpperBoundMatching::Injective => {
            // Maximize total IoU; pad with zero-gain virtual candidates when
            // there are fewer candidates than instances.
            let rows = candidates.len().max(gt.instances.len());
            let cols = gt.instances.len();
            let cost = CostMatrix::from_fn(rows, cols, |r, c| {
                if r < candidates.len() {
                    -ious[c][r]
                } else {
                    0.0
                }
            })?;
            let assignment = hungarian(&cost)?;
            for (gi, (class, _)) in gt.instances.iter().enumerate() {
                let row = assignment.row_for_col[gi];
                if row < candidates.len() {
                    picked.push((*class, row));
                }
            }
        }
    }

    Ok(picked
        .into_iter()
        .map(|(class, ci)| (class, candidates[ci].0.clone(), candidates[ci].1))
        .collect())
}

/// Aggregate fold-level reports into a mean report with the sample standard
/// deviation of the fold mIoU values.
pub fn aggregate_folds(folds: &[EvalReport]) -> Result<EvalReport> {
    if folds.is_empty() {
        return Err(Error::InvalidValue("no folds to aggregate".into()));
    }
    let n = folds.len() as f64;
    let num_classes = folds[0].per_class.len();
    let miou = folds.iter().map(|f| f.miou).sum::<f64>() / n;
    let iou = folds.iter().map(|f| f.iou).sum::<f64>() / n;
    let mciou = folds.iter().map(|f| f.mciou).sum::<f64>() / n;
    let stddev = if folds.len() > 1 {
        let var =
            folds.iter().map(|f| (f.miou - miou).powi(2)).sum::<f64>() / (n - 1.0);
        Some(var.sqrt())
    } else {
        Some(0.0)
    };
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let vals: Vec<f64> = folds.iter().filter_map(|f| f.per_class[c]).collect();
        per_class.push(mean(&vals));
    }
    Ok(EvalReport {
        miou,
        iou,
        mciou,
        per_class,
        per_frame: Vec::new(),
        stddev,
    })
}

/// Render a report as an aligned text table: overall metrics first, then the
/// per-class columns. Values are percentages. No timestamps; output is
/// byte-stable across reruns.
pub fn report_table(report: &EvalReport, class_names: &[String]) -> String {
    let mut header = format!("{:<12}{:>8}{:>8}{:>8}", "method", "mIoU", "IoU", "mcIoU");
    for name in class_names {
        header.push_str(&format!("{:>8}", truncate(name, 7)));
    }
    let fmt_pct = |v: Option<f64>| match v {
        Some(v) => format!("{:>8.2}", v * 100.0),
        None => format!("{:>8}", "-"),
    };
    let mut row = format!("{:<12}", "overall");
    row.push_str(&fmt_pct(Some(report.miou)));
    row.push_str(&fmt_pct(Some(report.iou)));
    row.push_str(&fmt_pct(Some(report.mciou)));
    for v in &report.per_class {
        row.push_str(&fmt_pct(*v));
    }
    if let Some(sd) = report.stddev {
        row.push_str(&format!("  (miou sd {:.2})", sd * 100.0));
    }
    format!("{header}\n{row}\n")
}

fn truncate(s: &str, max: usize) -> String {
    if s.len() <= max {
        s.to_string()
    } else {
        s[..max].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{RegionProposal, SoftMask, Strategy};

    fn mask(h: usize, w: usize, set_pixels: &[(usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::zeros(h, w).unwrap();
        for &(r, c) in set_pixels {
            m.set(r, c, true);
        }
        m
    }

    fn rect(h: usize, w: usize, r0: usize, c0: usize, r1: usize, c1: usize) -> BinaryMask {
        let mut m = BinaryMask::zeros(h, w).unwrap();
        for r in r0..r1 {
            for c in c0..c1 {
                m.set(r, c, true);
            }
        }
        m
    }

    #[test]
    fn frame_ious_perfect_and_missing() {
        let gt = FrameAnnotation::new(
            "f0",
            4,
            4,
            vec![(ClassId(1), rect(4, 4, 0, 0, 2, 2)), (ClassId(2), rect(4, 4, 2, 2, 4, 4))],
        )
        .unwrap();
        let preds = vec![
            (ClassId(1), rect(4, 4, 0, 0, 2, 2), 0.9),
            (ClassId(2), rect(4, 4, 2, 2, 4, 4), 0.8),
        ];
        let ious = frame_class_ious(&preds, &gt).unwrap();
        assert_eq!(ious[&ClassId(1)], Some(1.0));
        assert_eq!(ious[&ClassId(2)], Some(1.0));

        let missing = frame_class_ious(&[], &gt).unwrap();
        assert_eq!(missing[&ClassId(1)], Some(0.0));
        assert_eq!(missing[&ClassId(2)], Some(0.0));
    }

    #[test]
    fn frame_ious_hand_built_values() {
        // Class 1: gt = left 4x4 block (16 px), pred = its upper half plus the
        // mirrored lower area -> intersection 8, union 24? Use exact rects:
        // gt rows 0..4 cols 0..4; pred rows 0..4 cols 0..2 => IoU 8/16 = 0.5.
        // Class 2: gt rows 4..8 cols 0..4 (16 px); pred rows 4..8 cols 0..1
        // (4 px) => IoU 4/16 = 0.25.
        let gt = FrameAnnotation::new(
            "f0",
            8,
            8,
            vec![(ClassId(1), rect(8, 8, 0, 0, 4, 4)), (ClassId(2), rect(8, 8, 4, 0, 8, 4))],
        )
        .unwrap();
        let preds = vec![
            (ClassId(1), rect(8, 8, 0, 0, 4, 2), 0.9),
            (ClassId(2), rect(8, 8, 4, 0, 8, 1), 0.9),
        ];
        let ious = frame_class_ious(&preds, &gt).unwrap();
        assert_eq!(ious[&ClassId(1)], Some(0.5));
        assert_eq!(ious[&ClassId(2)], Some(0.25));
    }

    #[test]
    fn evaluate_identity_predictions() {
        let gt = vec![FrameAnnotation::new(
            "f0",
            4,
            4,
            vec![(ClassId(1), rect(4, 4, 0, 0, 2, 2))],
        )
        .unwrap()];
        let preds = vec![FramePredictions {
            frame: "f0".into(),
            regions: vec![(ClassId(1), rect(4, 4, 0, 0, 2, 2), 1.0)],
        }];
        let report = evaluate(&preds, &gt, 3).unwrap();
        assert_eq!(report.miou, 1.0);
        assert_eq!(report.iou, 1.0);
        assert_eq!(report.mciou, 1.0);
        assert_eq!(report.per_class, vec![Some(1.0), None, None]);
    }

    #[test]
    fn evaluate_no_predictions_scores_zero() {
        let gt = vec![FrameAnnotation::new(
            "f0",
            4,
            4,
            vec![(ClassId(1), rect(4, 4, 0, 0, 2, 2))],
        )
        .unwrap()];
        let preds = vec![FramePredictions { frame: "f0".into(), regions: vec![] }];
        let report = evaluate(&preds, &gt, 2).unwrap();
        assert_eq!((report.miou, report.iou, report.mciou), (0.0, 0.0, 0.0));
    }

    #[test]
    fn evaluate_two_frame_hand_arithmetic() {
        // Frame A: gt classes {1, 2} with per-class IoUs 0.5 and 0.25 and a
        // false-positive class 3 (IoU 0).
        // Frame B: gt class {1} with IoU 1.0.
        //
        // mIoU = mean(mean(.5, .25), mean(1.0)) = mean(.375, 1.0) = .6875
        // IoU  = mean(mean(.5, .25, 0), mean(1.0)) = mean(.25, 1.0) = .625
        // per-class: c1 = mean(.5, 1.0) = .75; c2 = .25; c3 = 0
        // mcIoU = mean(.75, .25, 0) = 1/3
        let gt = vec![
            FrameAnnotation::new(
                "a",
                8,
                8,
                vec![(ClassId(1), rect(8, 8, 0, 0, 4, 4)), (ClassId(2), rect(8, 8, 4, 0, 8, 4))],
            )
            .unwrap(),
            FrameAnnotation::new("b", 8, 8, vec![(ClassId(1), rect(8, 8, 0, 0, 2, 2))]).unwrap(),
        ];
        let preds = vec![
            FramePredictions {
                frame: "a".into(),
                regions: vec![
                    (ClassId(1), rect(8, 8, 0, 0, 4, 2), 0.9),
                    (ClassId(2), rect(8, 8, 4, 0, 8, 1), 0.9),
                    (ClassId(3), rect(8, 8, 0, 4, 2, 6), 0.9),
                ],
            },
            FramePredictions {
                frame: "b".into(),
                regions: vec![(ClassId(1), rect(8, 8, 0, 0, 2, 2), 0.9)],
            },
        ];
        let report = evaluate(&preds, &gt, 3).unwrap();
        assert!((report.miou - 0.6875).abs() < 1e-12);
        assert!((report.iou - 0.625).abs() < 1e-12);
        assert_eq!(report.per_class, vec![Some(0.75), Some(0.25), Some(0.0)]);
        assert!((report.mciou - (0.75 + 0.25 + 0.0) / 3.0).abs() < 1e-12);
        assert!(report.iou <= report.miou);
    }

    #[test]
    fn evaluate_rejects_mismatched_frames() {
        let gt = vec![FrameAnnotation::new("x", 2, 2, vec![]).unwrap()];
        let preds = vec![FramePredictions { frame: "y".into(), regions: vec![] }];
        assert!(matches!(evaluate(&preds, &gt, 2), Err(Error::FrameIdMismatch(_))));
    }

    fn proposal_with_mask(class: u32, score: f64, mask: &BinaryMask, c: usize) -> RegionProposal {
        let (h, w) = mask.dims();
        let probs: Vec<f64> =
            mask.bits().iter().map(|&b| if b == 1 { 0.95 } else { 0.05 }).collect();
        let soft = SoftMask::new(h, w, probs).unwrap();
        let mut class_probs = vec![0.0; c + 1];
        class_probs[(class - 1) as usize] = score;
        class_probs[c] = 1.0 - score;
        RegionProposal::new(class_probs, soft).unwrap()
    }

    #[test]
    fn upper_bound_fixes_wrong_labels() {
        // Perfect masks with wrong class labels: raw evaluation is poor while
        // the oracle relabelling reaches 1.0 and miou == iou.
        let m1 = rect(8, 8, 0, 0, 4, 4);
        let m2 = rect(8, 8, 4, 4, 8, 8);
        let gt = vec![FrameAnnotation::new(
            "f0",
            8,
            8,
            vec![(ClassId(1), m1.clone()), (ClassId(2), m2.clone())],
        )
        .unwrap()];
        let set = ProposalSet::new(
            "f0",
            vec![proposal_with_mask(2, 0.9, &m1, 3), proposal_with_mask(1, 0.8, &m2, 3)],
        );

        let raw = evaluate(
            &[FramePredictions {
                frame: "f0".into(),
                regions: vec![(ClassId(2), m1.clone(), 0.9), (ClassId(1), m2.clone(), 0.8)],
            }],
            &gt,
            3,
        )
        .unwrap();
        assert!(raw.miou < 1.0);

        for matching in [UpperBoundMatching::PerInstanceBest, UpperBoundMatching::Injective] {
            let report = upper_bound(
                std::slice::from_ref(&set),
                &gt,
                &UpperBoundSource::Inferred(InferenceConfig::new(Strategy::AllMasks)),
                matching,
                3,
            )
            .unwrap();
            assert_eq!(report.miou, 1.0);
            assert_eq!(report.mciou, 1.0);
            assert_eq!(report.miou, report.iou);
        }
    }

    #[test]
    fn total_bound_dominates_inferred_bound() {
        // A high-IoU candidate hidden behind the no-object argmax is only
        // reachable by the total bound.
        let gt_mask = rect(8, 8, 2, 2, 6, 6);
        let gt = vec![FrameAnnotation::new("f0", 8, 8, vec![(ClassId(1), gt_mask.clone())]).unwrap()];

        let good_hidden = {
            let probs: Vec<f64> =
                gt_mask.bits().iter().map(|&b| if b == 1 { 0.95 } else { 0.05 }).collect();
            let soft = SoftMask::new(8, 8, probs).unwrap();
            RegionProposal::new(vec![0.1, 0.1, 0.0, 0.8], soft).unwrap()
        };
        let bad_visible = proposal_with_mask(1, 0.9, &rect(8, 8, 2, 2, 4, 4), 3);
        let set = ProposalSet::new("f0", vec![good_hidden, bad_visible]);

        let inferred = upper_bound(
            std::slice::from_ref(&set),
            &gt,
            &UpperBoundSource::Inferred(InferenceConfig::new(Strategy::AllMasks)),
            UpperBoundMatching::PerInstanceBest,
            3,
        )
        .unwrap();
        let total = upper_bound(
            std::slice::from_ref(&set),
            &gt,
            &UpperBoundSource::Total { binarize_tau: 0.5 },
            UpperBoundMatching::PerInstanceBest,
            3,
        )
        .unwrap();
        assert!(total.miou >= inferred.miou);
        assert_eq!(total.miou, 1.0);
        assert!(inferred.miou < 1.0);
    }

    #[test]
    fn evaluate_order_invariant() {
        let gt = vec![
            FrameAnnotation::new("a", 4, 4, vec![(ClassId(1), rect(4, 4, 0, 0, 2, 2))]).unwrap(),
            FrameAnnotation::new("b", 4, 4, vec![(ClassId(2), rect(4, 4, 2, 2, 4, 4))]).unwrap(),
        ];
        let preds = vec![
            FramePredictions {
                frame: "a".into(),
                regions: vec![
                    (ClassId(1), rect(4, 4, 0, 0, 2, 1), 0.5),
                    (ClassId(1), rect(4, 4, 0, 1, 2, 2), 0.6),
                ],
            },
            FramePredictions {
                frame: "b".into(),
                regions: vec![(ClassId(2), rect(4, 4, 2, 2, 4, 4), 0.9)],
            },
        ];
        let r1 = evaluate(&preds, &gt, 2).unwrap();

        let mut preds_rev = preds.clone();
        preds_rev.reverse();
        preds_rev[1].regions.reverse();
        let mut gt_rev: Vec<FrameAnnotation> = gt.clone();
        gt_rev.reverse();
        let r2 = evaluate(&preds_rev, &gt_rev, 2).unwrap();
        assert_eq!(r1.miou, r2.miou);
        assert_eq!(r1.iou, r2.iou);
        assert_eq!(r1.mciou, r2.mciou);
    }

    #[test]
    fn fold_aggregation_stddev() {
        let mk = |miou: f64| EvalReport {
            miou,
            iou: miou,
            mciou: miou,
            per_class: vec![Some(miou)],
            per_frame: vec![],
            stddev: None,
        };
        let agg = aggregate_folds(&[mk(0.8), mk(0.9)]).unwrap();
        assert!((agg.miou - 0.85).abs() < 1e-12);
        // Sample std of {0.8, 0.9} is 0.0707106...
        assert!((agg.stddev.unwrap() - (0.005f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn table_is_stable() {
        let report = EvalReport {
            miou: 0.8426,
            iou: 0.7912,
            mciou: 0.5404,
            per_class: vec![Some(0.8352), None],
            per_frame: vec![],
            stddev: None,
        };
        let names = vec!["BF".to_string(), "PF".to_string()];
        let t1 = report_table(&report, &names);
        let t2 = report_table(&report, &names);
        assert_eq!(t1, t2);
        assert!(t1.contains("84.26"));
        assert!(t1.contains('-'));
    }
}
