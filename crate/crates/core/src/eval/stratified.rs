//! Intersectional tables: AP, age MAE and gender accuracy per subgroup.
//!
//! Every marginal ("All") cell is recomputed from the pooled members of its
//! row or column, never averaged from other cells. Empty cells carry no value.

use std::collections::BTreeMap;

use serde::Serialize;

use super::detection::{ap_from_ranked, iou, match_detections, ScoredBox, AP_INTERPOLATION};
use super::{EvalError, EvalSample, SkinType};
use crate::numeric::exact_sum;
use crate::protocol::{age_group, AgeGroup, Gender};

/// Row attribute crossed with gender.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Strata {
    AgeGender,
    SkinGender,
}

impl Strata {
    pub fn row_labels(self) -> Vec<&'static str> {
        match self {
            Strata::AgeGender => AgeGroup::ALL.iter().map(|a| a.label()).collect(),
            Strata::SkinGender => SkinType::ALL.iter().map(|s| s.label()).collect(),
        }
    }

    pub fn n_rows(self) -> usize {
        match self {
            Strata::AgeGender => AgeGroup::ALL.len(),
            Strata::SkinGender => SkinType::ALL.len(),
        }
    }

    /// `(row, gender column)` of a sample.
    fn key_of(self, s: &EvalSample) -> Result<(usize, usize), EvalError> {
        let row = match self {
            Strata::AgeGender => age_group(s.gt_age)
                .map_err(|e| EvalError::InvalidSample {
                    image_id: s.image_id.clone(),
                    reason: e.to_string(),
                })?
                .index(),
            Strata::SkinGender => s
                .gt_skin_type
                .ok_or_else(|| EvalError::MissingSkinType(s.image_id.clone()))?
                .index(),
        };
        Ok((row, s.gt_gender.index()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cell {
    /// `None` when the cell has no members.
    pub value: Option<f64>,
    pub n: u64,
}

impl Cell {
    const EMPTY: Cell = Cell { value: None, n: 0 };
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratifiedTable {
    pub metric_name: String,
    pub strata: Strata,
    pub row_labels: Vec<String>,
    /// One row per stratum then All; columns Male, Female, All.
    pub cells: Vec<[Cell; 3]>,
}

pub const COLUMN_LABELS: [&str; 3] = ["Male", "Female", "All"];

impl StratifiedTable {
    fn build(metric_name: &str, strata: Strata, mut cell: impl FnMut(Option<usize>, Option<usize>) -> Cell) -> Self {
        let n = strata.n_rows();
        let cells = (0..=n)
            .map(|r| {
                let row = (r < n).then_some(r);
                [cell(row, Some(0)), cell(row, Some(1)), cell(row, None)]
            })
            .collect();
        let mut row_labels: Vec<String> = strata.row_labels().into_iter().map(String::from).collect();
        row_labels.push("All".into());
        Self {
            metric_name: metric_name.to_string(),
            strata,
            row_labels,
            cells,
        }
    }

    pub fn column_labels(&self) -> [&'static str; 3] {
        COLUMN_LABELS
    }

    /// Cell for a row index (`None` = All) and gender (`None` = All).
    pub fn get(&self, row: Option<usize>, gender: Option<Gender>) -> Cell {
        let r = row.unwrap_or(self.cells.len() - 1);
        let c = gender.map_or(2, Gender::index);
        self.cells[r][c]
    }

    pub fn all(&self) -> Cell {
        self.get(None, None)
    }
}

fn in_cell(key: (usize, usize), row: Option<usize>, col: Option<usize>) -> bool {
    row.map_or(true, |r| r == key.0) && col.map_or(true, |c| c == key.1)
}

fn sample_keys(samples: &[EvalSample], strata: Strata) -> Result<Vec<(usize, usize)>, EvalError> {
    samples
        .iter()
        .map(|s| {
            s.validate()?;
            strata.key_of(s)
        })
        .collect()
}

/// Mean absolute error of predicted apparent age, in years.
pub fn stratified_mae(
    preds: &BTreeMap<String, f64>,
    samples: &[EvalSample],
    strata: Strata,
) -> Result<StratifiedTable, EvalError> {
    let keys = sample_keys(samples, strata)?;
    let errors: Vec<f64> = samples
        .iter()
        .map(|s| {
            preds
                .get(&s.image_id)
                .map(|p| (p - s.gt_age).abs())
                .ok_or_else(|| EvalError::MissingPrediction(s.image_id.clone()))
        })
        .collect::<Result<_, _>>()?;
    Ok(StratifiedTable::build("age_mae_years", strata, |row, col| {
        let members: Vec<f64> = keys
            .iter()
            .zip(&errors)
            .filter(|(k, _)| in_cell(**k, row, col))
            .map(|(_, e)| *e)
            .collect();
        if members.is_empty() {
            return Cell::EMPTY;
        }
        Cell {
            value: Some(exact_sum(members.iter().copied()) / members.len() as f64),
            n: members.len() as u64,
        }
    }))
}

/// Binary gender classification accuracy, in percent.
pub fn stratified_accuracy(
    preds: &BTreeMap<String, Gender>,
    samples: &[EvalSample],
    strata: Strata,
) -> Result<StratifiedTable, EvalError> {
    let keys = sample_keys(samples, strata)?;
    let correct: Vec<bool> = samples
        .iter()
        .map(|s| {
            preds
                .get(&s.image_id)
                .map(|p| *p == s.gt_gender)
                .ok_or_else(|| EvalError::MissingPrediction(s.image_id.clone()))
        })
        .collect::<Result<_, _>>()?;
    Ok(StratifiedTable::build("gender_accuracy_pct", strata, |row, col| {
        let (mut n, mut hits) = (0u64, 0u64);
        for (k, ok) in keys.iter().zip(&correct) {
            if in_cell(*k, row, col) {
                n += 1;
                hits += u64::from(*ok);
            }
        }
        if n == 0 {
            return Cell::EMPTY;
        }
        Cell {
            value: Some(100.0 * hits as f64 / n as f64),
            n,
        }
    }))
}

struct LabeledDet {
    confidence: f64,
    sample: usize,
    det: usize,
    tp: bool,
    /// Strata the detection counts against.
    strata: Vec<(usize, usize)>,
}

/// Detection AP per subgroup, in percent. A true positive belongs to the
/// subgroup of its matched face. A false positive belongs to the subgroup of
/// the face it overlaps most, or to every subgroup in its image when it
/// overlaps none. The All/All cell is plain AP over everything.
pub fn stratified_ap(
    dets: &BTreeMap<String, Vec<ScoredBox>>,
    samples: &[EvalSample],
    strata: Strata,
    iou_threshold: f64,
) -> Result<StratifiedTable, EvalError> {
    let keys = sample_keys(samples, strata)?;
    let empty = Vec::new();
    let mut labeled = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let img_dets = dets.get(&s.image_id).unwrap_or(&empty);
        // Labels are per sample; every face in it shares the sample's subgroup.
        let gt_keys = vec![keys[i]; s.gt_boxes.len()];
        let m = match_detections(img_dets, &s.gt_boxes, iou_threshold);
        for (d, det) in img_dets.iter().enumerate() {
            let (tp, strata) = match m.gt_for(d) {
                Some(g) => (true, vec![gt_keys[g]]),
                None => {
                    let best = s
                        .gt_boxes
                        .iter()
                        .enumerate()
                        .map(|(g, b)| (g, iou(&det.bbox, b)))
                        .filter(|(_, o)| *o > 0.0)
                        .fold(None, |acc: Option<(usize, f64)>, (g, o)| match acc {
                            Some((_, bo)) if bo >= o => acc,
                            _ => Some((g, o)),
                        });
                    match best {
                        Some((g, _)) => (false, vec![gt_keys[g]]),
                        None => {
                            let mut present = gt_keys.clone();
                            present.sort_unstable();
                            present.dedup();
                            (false, present)
                        }
                    }
                }
            };
            labeled.push(LabeledDet {
                confidence: det.confidence,
                sample: i,
                det: d,
                tp,
                strata,
            });
        }
    }
    labeled.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.sample.cmp(&b.sample))
            .then(a.det.cmp(&b.det))
    });

    Ok(StratifiedTable::build("detection_ap_pct", strata, |row, col| {
        let n_gt: usize = samples
            .iter()
            .zip(&keys)
            .filter(|(_, k)| in_cell(**k, row, col))
            .map(|(s, _)| s.gt_boxes.len())
            .sum();
        if n_gt == 0 {
            return Cell::EMPTY;
        }
        let everything = row.is_none() && col.is_none();
        let ranked: Vec<bool> = labeled
            .iter()
            .filter(|l| everything || l.strata.iter().any(|k| in_cell(*k, row, col)))
            .map(|l| l.tp)
            .collect();
        Cell {
            value: Some(100.0 * ap_from_ranked(&ranked, n_gt, AP_INTERPOLATION)),
            n: n_gt as u64,
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::BoundingBox;

    fn sample(id: &str, age: f64, gender: Gender, skin: Option<SkinType>) -> EvalSample {
        EvalSample {
            image_id: id.into(),
            gt_boxes: vec![BoundingBox::new(10.0, 10.0, 20.0, 20.0)],
            gt_age: age,
            gt_gender: gender,
            gt_skin_type: skin,
        }
    }

    #[test]
    fn mae_examples() {
        let samples = [sample("a", 25.0, Gender::Male, None), sample("b", 25.0, Gender::Male, None)];
        let exact = BTreeMap::from([("a".to_string(), 25.0), ("b".to_string(), 25.0)]);
        let t = stratified_mae(&exact, &samples, Strata::AgeGender).unwrap();
        assert_eq!(t.all().value, Some(0.0));
        let off = BTreeMap::from([("a".to_string(), 20.0), ("b".to_string(), 30.0)]);
        let t = stratified_mae(&off, &samples, Strata::AgeGender).unwrap();
        let cell = t.get(Some(AgeGroup::Young.index()), Some(Gender::Male));
        assert_eq!(cell.value, Some(5.0));
        assert_eq!(cell.n, 2);
        assert_eq!(t.get(Some(0), Some(Gender::Female)).value, None);
        assert_eq!(
            stratified_mae(&BTreeMap::new(), &samples, Strata::AgeGender),
            Err(EvalError::MissingPrediction("a".into()))
        );
    }

    #[test]
    fn accuracy_examples() {
        let samples: Vec<EvalSample> = (0..4)
            .map(|i| sample(&format!("s{i}"), 40.0, Gender::Female, Some(SkinType::V)))
            .collect();
        let mut preds: BTreeMap<String, Gender> =
            samples.iter().map(|s| (s.image_id.clone(), Gender::Female)).collect();
        let t = stratified_accuracy(&preds, &samples, Strata::SkinGender).unwrap();
        assert_eq!(t.all().value, Some(100.0));
        preds.insert("s0".into(), Gender::Male);
        let t = stratified_accuracy(&preds, &samples, Strata::SkinGender).unwrap();
        assert_eq!(t.get(Some(SkinType::V.index()), Some(Gender::Female)).value, Some(75.0));
        assert_eq!(t.row_labels, ["I", "II", "III", "IV", "V", "VI", "All"]);
        assert_eq!(t.get(Some(0), None).value, None);
    }

    #[test]
    fn skin_strata_requires_labels() {
        let samples = [sample("a", 40.0, Gender::Male, None)];
        let preds = BTreeMap::from([("a".to_string(), Gender::Male)]);
        assert_eq!(
            stratified_accuracy(&preds, &samples, Strata::SkinGender),
            Err(EvalError::MissingSkinType("a".into()))
        );
    }

    #[test]
    fn perfect_detections_on_two_subgroups() {
        let samples = [sample("a", 20.0, Gender::Male, None), sample("b", 70.0, Gender::Female, None)];
        let dets: BTreeMap<String, Vec<ScoredBox>> = samples
            .iter()
            .map(|s| (s.image_id.clone(), vec![ScoredBox::new(10.0, 10.0, 20.0, 20.0, 0.99)]))
            .collect();
        let t = stratified_ap(&dets, &samples, Strata::AgeGender, 0.5).unwrap();
        assert_eq!(t.get(Some(1), Some(Gender::Male)).value, Some(100.0));
        assert_eq!(t.get(Some(4), Some(Gender::Female)).value, Some(100.0));
        assert_eq!(t.all().value, Some(100.0));
        assert_eq!(t.get(Some(0), Some(Gender::Male)), Cell::EMPTY);
        assert_eq!(t.row_labels, ["0-14", "15-29", "30-44", "45-59", "60+", "All"]);
    }

    #[test]
    fn false_positive_penalizes_only_its_subgroup() {
        let samples = [sample("a", 20.0, Gender::Male, None), sample("b", 70.0, Gender::Female, None)];
        let dets = BTreeMap::from([
            ("a".to_string(), vec![ScoredBox::new(10.0, 10.0, 20.0, 20.0, 0.5)]),
            (
                "b".to_string(),
                vec![
                    ScoredBox::new(10.0, 10.0, 20.0, 20.0, 0.6),
                    // High-confidence false positive far from any face.
                    ScoredBox::new(500.0, 500.0, 5.0, 5.0, 0.9),
                ],
            ),
        ]);
        let t = stratified_ap(&dets, &samples, Strata::AgeGender, 0.5).unwrap();
        assert_eq!(t.get(Some(1), Some(Gender::Male)).value, Some(100.0));
        assert_eq!(t.get(Some(4), Some(Gender::Female)).value, Some(50.0));
    }
}
