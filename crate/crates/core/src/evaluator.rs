//! Detection metrics: greedy IoU matching, ratio of detected objects,
//! interpolated average precision, max recall and difficulty filtering.
//!
//! Curves are pooled over scenes: match every scene separately, then pass
//! all results in a fixed scene order. Predictions are ranked globally by
//! score, ties in input order.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::geometry::{iou_3d, Box3D, Detection};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("no ground truth objects; precision and recall are undefined")]
    NoGroundTruth,
    #[error("ground truth {0} lacks occlusion/truncation/height fields; use level=all")]
    MissingDifficultyFields(usize),
    #[error("ignore mask has {mask} entries for {gts} ground truth boxes")]
    MaskLength { mask: usize, gts: usize },
}

/// Outcome for one prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionMatch {
    pub score: f64,
    pub gt: Option<usize>,
    /// IoU with the matched ground truth, 0 when unmatched.
    pub iou: f64,
    /// Overlaps only an ignored ground truth; neither TP nor FP.
    pub ignored: bool,
}

impl PredictionMatch {
    pub fn is_true_positive(&self) -> bool {
        self.gt.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// In input order.
    pub predictions: Vec<PredictionMatch>,
    pub gt_detected: Vec<bool>,
    pub gt_ignored: Vec<bool>,
}

impl MatchResult {
    pub fn num_gt(&self) -> usize {
        self.gt_ignored.iter().filter(|i| !**i).count()
    }

    pub fn num_detected(&self) -> usize {
        self.gt_detected.iter().zip(&self.gt_ignored).filter(|(d, i)| **d && !**i).count()
    }
}

/// Greedy one-to-one matching with every ground truth counted.
pub fn match_detections(gts: &[Box3D], preds: &[Detection], iou_threshold: f64) -> MatchResult {
    match_with_ignore(gts, &vec![false; gts.len()], preds, iou_threshold).expect("mask sized to gts")
}

/// Greedy matching by descending score. Each prediction takes the
/// highest-IoU unmatched counted ground truth at or above the threshold;
/// failing that, a prediction overlapping an ignored ground truth is marked
/// ignored. Predictions without a box never match.
pub fn match_with_ignore(
    gts: &[Box3D],
    ignored: &[bool],
    preds: &[Detection],
    iou_threshold: f64,
) -> Result<MatchResult, EvalError> {
    if ignored.len() != gts.len() {
        return Err(EvalError::MaskLength { mask: ignored.len(), gts: gts.len() });
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let mut predictions: Vec<PredictionMatch> =
        preds.iter().map(|p| PredictionMatch { score: p.score, gt: None, iou: 0.0, ignored: false }).collect();
    let mut gt_detected = vec![false; gts.len()];
    for i in order {
        let Some(b) = preds[i].bbox else { continue };
        let mut best: Option<(usize, f64)> = None;
        let mut hits_ignored = false;
        for (j, g) in gts.iter().enumerate() {
            let iou = iou_3d(&b, g);
            if iou < iou_threshold {
                continue;
            }
            if ignored[j] {
                hits_ignored = true;
            } else if !gt_detected[j] && best.is_none_or(|(_, v)| iou > v) {
                best = Some((j, iou));
            }
        }
        let m = &mut predictions[i];
        if let Some((j, iou)) = best {
            gt_detected[j] = true;
            m.gt = Some(j);
            m.iou = iou;
        } else if hits_ignored {
            m.ignored = true;
        }
    }
    Ok(MatchResult { predictions, gt_detected, gt_ignored: ignored.to_vec() })
}

/// Detected over all counted ground truth, pooled; 0 when there is none.
pub fn ratio(results: &[MatchResult]) -> f64 {
    let total: usize = results.iter().map(MatchResult::num_gt).sum();
    if total == 0 {
        return 0.0;
    }
    results.iter().map(MatchResult::num_detected).sum::<usize>() as f64 / total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    #[default]
    FortyPoint,
    ElevenPoint,
}

impl Interpolation {
    /// Recall positions sampled by the interpolation.
    pub fn recall_points(self) -> Vec<f64> {
        match self {
            Interpolation::FortyPoint => (1..=40).map(|i| i as f64 / 40.0).collect(),
            Interpolation::ElevenPoint => (0..=10).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

/// Pooled precision/recall after each prediction, by descending score.
pub fn pr_curve(results: &[MatchResult]) -> Result<Vec<(f64, f64)>, EvalError> {
    let n_gt: usize = results.iter().map(MatchResult::num_gt).sum();
    if n_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let mut ranked: Vec<(f64, bool)> = results
        .iter()
        .flat_map(|r| r.predictions.iter())
        .filter(|m| !m.ignored)
        .map(|m| (m.score, m.is_true_positive()))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    Ok(ranked
        .iter()
        .enumerate()
        .map(|(k, &(_, hit))| {
            tp += hit as usize;
            (tp as f64 / (k + 1) as f64, tp as f64 / n_gt as f64)
        })
        .collect())
}

/// Mean over recall positions r of the best precision reached at recall of
/// at least r.
pub fn average_precision(results: &[MatchResult], interpolation: Interpolation) -> Result<f64, EvalError> {
    let curve = pr_curve(results)?;
    // best precision at or beyond each curve point
    let mut envelope = vec![0.0f64; curve.len()];
    let mut best = 0.0f64;
    for k in (0..curve.len()).rev() {
        best = best.max(curve[k].0);
        envelope[k] = best;
    }
    let points = interpolation.recall_points();
    let mut sum = 0.0;
    for &r in &points {
        // curve recall is nondecreasing; first index reaching r
        let idx = curve.partition_point(|&(_, rec)| rec < r - 1e-12);
        if idx < curve.len() {
            sum += envelope[idx];
        }
    }
    Ok(sum / points.len() as f64)
}

/// Detected over counted ground truth with every prediction kept.
pub fn max_recall(results: &[MatchResult]) -> Result<f64, EvalError> {
    let n_gt: usize = results.iter().map(MatchResult::num_gt).sum();
    if n_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    Ok(results.iter().map(MatchResult::num_detected).sum::<usize>() as f64 / n_gt as f64)
}

/// Recall rounded down to a multiple of 1/40.
pub fn quantized_recall(recall: f64) -> f64 {
    libm::floor(recall * 40.0 + 1e-9) / 40.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
    #[default]
    All,
}

impl Difficulty {
    pub const ALL: [Difficulty; 4] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard, Difficulty::All];

    /// `None` for [`Difficulty::All`].
    pub fn filter(self) -> Option<DifficultyFilter> {
        match self {
            Difficulty::Easy => Some(DifficultyFilter { min_height_px: 40.0, max_occlusion: 0, max_truncation: 0.15 }),
            Difficulty::Moderate => {
                Some(DifficultyFilter { min_height_px: 25.0, max_occlusion: 1, max_truncation: 0.30 })
            }
            Difficulty::Hard => Some(DifficultyFilter { min_height_px: 25.0, max_occlusion: 2, max_truncation: 0.50 }),
            Difficulty::All => None,
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
            Difficulty::All => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown difficulty level {0:?}")]
pub struct UnknownDifficulty(pub alloc::string::String);

impl FromStr for Difficulty {
    type Err = UnknownDifficulty;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "easy" => Ok(Difficulty::Easy),
            "moderate" => Ok(Difficulty::Moderate),
            "hard" => Ok(Difficulty::Hard),
            "all" => Ok(Difficulty::All),
            _ => Err(UnknownDifficulty(s.into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifficultyFilter {
    pub min_height_px: f64,
    pub max_occlusion: u8,
    pub max_truncation: f64,
}

/// Label fields that decide difficulty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtAttributes {
    pub occlusion: u8,
    pub truncation: f64,
    pub height_px: Option<f64>,
}

impl DifficultyFilter {
    pub fn admits(&self, a: &GtAttributes) -> Option<bool> {
        let h = a.height_px?;
        Some(h >= self.min_height_px && a.occlusion <= self.max_occlusion && a.truncation <= self.max_truncation)
    }
}

/// Ignore mask for a level: `true` marks ground truth outside it.
pub fn filter_difficulty(attributes: &[Option<GtAttributes>], level: Difficulty) -> Result<Vec<bool>, EvalError> {
    let Some(filter) = level.filter() else {
        return Ok(vec![false; attributes.len()]);
    };
    attributes
        .iter()
        .enumerate()
        .map(|(i, a)| {
            a.as_ref().and_then(|a| filter.admits(a)).map(|keep| !keep).ok_or(EvalError::MissingDifficultyFields(i))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Point3, Size3};

    fn car(x: f64) -> Box3D {
        Box3D::new(Point3::new(x, 0.0, 0.0), Size3::new(1.5, 1.6, 3.9), 0.0).unwrap()
    }

    fn det(b: Box3D, score: f64) -> Detection {
        Detection::new(b.center, score).unwrap().with_box(b)
    }

    #[test]
    fn identical_predictions_match_everything() {
        let gts = [car(0.0), car(10.0), car(20.0)];
        let preds: Vec<_> = gts.iter().zip([0.2, 0.9, 0.5]).map(|(b, s)| det(*b, s)).collect();
        let r = match_detections(&gts, &preds, 0.7);
        assert!(r.gt_detected.iter().all(|d| *d));
        for (i, m) in r.predictions.iter().enumerate() {
            assert_eq!(m.gt, Some(i));
            assert_eq!(m.iou, 1.0);
        }
        assert_eq!(ratio(&[r.clone()]), 1.0);
        assert_eq!(average_precision(&[r], Interpolation::FortyPoint).unwrap(), 1.0);
    }

    #[test]
    fn no_predictions() {
        let r = match_detections(&[car(0.0)], &[], 0.7);
        assert_eq!(r.gt_detected, vec![false]);
        assert_eq!(max_recall(&[r.clone()]).unwrap(), 0.0);
        assert_eq!(average_precision(&[r], Interpolation::FortyPoint).unwrap(), 0.0);
    }

    #[test]
    fn one_to_one() {
        let g = car(0.0);
        let preds = [det(car(0.05), 0.4), det(car(0.02), 0.8)];
        let r = match_detections(&[g], &preds, 0.7);
        assert_eq!(r.predictions[1].gt, Some(0));
        assert_eq!(r.predictions[0].gt, None);
        assert!(!r.predictions[0].ignored);
    }

    #[test]
    fn ties_follow_input_order() {
        let g = car(0.0);
        let preds = [det(car(0.05), 0.5), det(car(0.0), 0.5)];
        let r = match_detections(&[g], &preds, 0.7);
        assert_eq!(r.predictions[0].gt, Some(0));
        assert_eq!(r.predictions[1].gt, None);
    }

    #[test]
    fn ratio_fixtures() {
        let gts = [car(0.0), car(10.0), car(20.0)];
        let r = match_detections(&gts, &[det(car(0.0), 0.5), det(car(10.0), 0.6)], 0.7);
        assert_eq!(ratio(&[r]), 2.0 / 3.0);
        assert_eq!(ratio(&[]), 0.0);
        assert_eq!(ratio(&[match_detections(&[], &[det(car(0.0), 0.5)], 0.7)]), 0.0);
    }

    #[test]
    fn ap_half_fixture() {
        let r = match_detections(&[car(0.0)], &[det(car(30.0), 0.9), det(car(0.0), 0.8)], 0.7);
        assert_eq!(average_precision(&[r.clone()], Interpolation::FortyPoint).unwrap(), 0.5);
        assert_eq!(average_precision(&[r], Interpolation::ElevenPoint).unwrap(), 0.5);
    }

    #[test]
    fn all_false_positives_and_no_gt() {
        let r = match_detections(&[car(0.0)], &[det(car(30.0), 0.9)], 0.7);
        assert_eq!(average_precision(&[r], Interpolation::FortyPoint).unwrap(), 0.0);
        let empty = match_detections(&[], &[det(car(30.0), 0.9)], 0.7);
        assert_eq!(average_precision(&[empty.clone()], Interpolation::FortyPoint), Err(EvalError::NoGroundTruth));
        assert_eq!(max_recall(&[empty]), Err(EvalError::NoGroundTruth));
    }

    #[test]
    fn pooled_over_scenes() {
        let a = match_detections(&[car(0.0)], &[det(car(0.0), 0.9)], 0.7);
        let b = match_detections(&[car(0.0)], &[det(car(5.0), 0.95)], 0.7);
        // ranked: FP 0.95, TP 0.9; recall 1/2 reached at precision 1/2
        let ap = average_precision(&[a.clone(), b.clone()], Interpolation::FortyPoint).unwrap();
        assert!((ap - 0.25).abs() < 1e-12);
        assert_eq!(max_recall(&[a, b]).unwrap(), 0.5);
    }

    #[test]
    fn quantized() {
        assert_eq!(quantized_recall(0.83), 0.825);
        assert_eq!(quantized_recall(0.825), 0.825);
        assert_eq!(quantized_recall(1.0), 1.0);
    }

    #[test]
    fn difficulty_levels() {
        let a = |occ, trunc, h| Some(GtAttributes { occlusion: occ, truncation: trunc, height_px: Some(h) });
        let attrs = [a(0, 0.0, 50.0), a(2, 0.0, 50.0), a(1, 0.2, 30.0), a(0, 0.6, 50.0)];
        assert_eq!(filter_difficulty(&attrs, Difficulty::All).unwrap(), vec![false; 4]);
        assert_eq!(filter_difficulty(&attrs, Difficulty::Easy).unwrap(), vec![false, true, true, true]);
        assert_eq!(filter_difficulty(&attrs, Difficulty::Moderate).unwrap(), vec![false, true, false, true]);
        assert_eq!(filter_difficulty(&attrs, Difficulty::Hard).unwrap(), vec![false, false, false, true]);
        let missing = [None, a(0, 0.0, 50.0)];
        assert_eq!(filter_difficulty(&missing, Difficulty::Moderate), Err(EvalError::MissingDifficultyFields(0)));
        assert!(filter_difficulty(&missing, Difficulty::All).is_ok());
        for d in Difficulty::ALL {
            assert_eq!(alloc::format!("{d}").parse::<Difficulty>().unwrap(), d);
        }
    }

    #[test]
    fn ignored_gt_does_not_make_false_positives() {
        let gts = [car(0.0), car(10.0)];
        let preds = [det(car(0.0), 0.9), det(car(10.0), 0.8)];
        let r = match_with_ignore(&gts, &[true, false], &preds, 0.7).unwrap();
        assert!(r.predictions[0].ignored);
        assert_eq!(r.predictions[1].gt, Some(1));
        assert_eq!(r.num_gt(), 1);
        assert_eq!(average_precision(&[r], Interpolation::FortyPoint).unwrap(), 1.0);
        assert!(match_with_ignore(&gts, &[true], &preds, 0.7).is_err());
    }
}
