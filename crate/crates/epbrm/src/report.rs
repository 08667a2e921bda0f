//! Evaluation reports.
//!
//! Text form, one metric per line, space separated:
//!
//! ```text
//! <name> <class> <level> <iou threshold> <value>
//! ratio car all 0.70 0.912500
//! ```
//!
//! JSON form: `{"metrics": [{"name", "class", "level", "threshold", "value"}, ...]}`
//! with the same entries in the same order.

use serde::{Deserialize, Serialize};

use epbrm_core::evaluator::{
    average_precision, filter_difficulty, match_with_ignore, max_recall, quantized_recall, ratio, Difficulty,
    EvalError, GtAttributes, Interpolation, MatchResult,
};
use epbrm_core::{Detection, ObjectClass};

use crate::kitti::GroundTruth;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub class: String,
    pub level: String,
    pub threshold: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Report {
    pub metrics: Vec<Metric>,
}

impl Report {
    pub fn push(&mut self, name: &str, class: ObjectClass, level: Difficulty, threshold: f64, value: f64) {
        self.metrics.push(Metric {
            name: name.into(),
            class: class.to_string(),
            level: level.to_string(),
            threshold,
            value,
        });
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }

    pub fn to_text(&self) -> String {
        self.metrics
            .iter()
            .map(|m| format!("{} {} {} {:.2} {:.6}\n", m.name, m.class, m.level, m.threshold, m.value))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes") + "\n"
    }
}

/// Ground truth and predictions of one scene for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEval<'a> {
    pub ground_truths: Vec<&'a GroundTruth>,
    pub predictions: Vec<Detection>,
}

fn attributes(g: &GroundTruth) -> Option<GtAttributes> {
    g.height_px.map(|h| GtAttributes { occlusion: g.occlusion, truncation: g.truncation, height_px: Some(h) })
}

/// Ratio over every object regardless of difficulty, then AP and recall at
/// `level`. AP and recall are omitted when the level keeps no object.
pub fn evaluate(
    scenes: &[SceneEval<'_>],
    class: ObjectClass,
    level: Difficulty,
    threshold: f64,
    interpolation: Interpolation,
) -> Result<Report, EvalError> {
    let all: Vec<MatchResult> = scenes
        .iter()
        .map(|s| {
            let boxes: Vec<_> = s.ground_truths.iter().map(|g| g.bbox).collect();
            match_with_ignore(&boxes, &vec![false; boxes.len()], &s.predictions, threshold)
        })
        .collect::<Result<_, _>>()?;
    let mut report = Report::default();
    report.push("ratio", class, Difficulty::All, threshold, ratio(&all));

    let filtered: Vec<MatchResult> = if level == Difficulty::All {
        all
    } else {
        scenes
            .iter()
            .map(|s| {
                let attrs: Vec<_> = s.ground_truths.iter().map(|g| attributes(g)).collect();
                let ignored = filter_difficulty(&attrs, level)?;
                let boxes: Vec<_> = s.ground_truths.iter().map(|g| g.bbox).collect();
                match_with_ignore(&boxes, &ignored, &s.predictions, threshold)
            })
            .collect::<Result<_, _>>()?
    };
    let n_gt: usize = filtered.iter().map(|r| r.num_gt()).sum();
    if n_gt > 0 {
        report.push("ap", class, level, threshold, average_precision(&filtered, interpolation)?);
        let rec = max_recall(&filtered)?;
        report.push("max_recall", class, level, threshold, rec);
        report.push("max_recall_q40", class, level, threshold, quantized_recall(rec));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_lines() {
        let mut r = Report::default();
        r.push("ratio", ObjectClass::Car, Difficulty::All, 0.7, 2.0 / 3.0);
        assert_eq!(r.to_text(), "ratio car all 0.70 0.666667\n");
        let back: Report = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
