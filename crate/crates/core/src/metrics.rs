//! Accuracy, error sets and the error-overlap diagnostic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::orchestrator::{trainer_logits, Checkpoint, GuidanceMode, StageReport};
use crate::tensor::Tensor;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_rows(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    if logits.rank() != 2 || logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    Ok(logits.shape()[1])
}

/// Number of rows whose argmax equals the label.
pub fn correct_count(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    check_rows(logits, labels)?;
    Ok(labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(logits.row(i)) == l)
        .count())
}

pub fn top1_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    Ok(correct_count(logits, labels)? as f64 / labels.len() as f64)
}

/// Sorted indices of misclassified examples of one model on one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorSet {
    pub dataset_id: String,
    pub model_id: String,
    pub dataset_size: usize,
    indices: Vec<usize>,
}

impl ErrorSet {
    pub fn new(
        dataset_id: impl Into<String>,
        model_id: impl Into<String>,
        dataset_size: usize,
        mut indices: Vec<usize>,
    ) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&bad) = indices.last().filter(|&&i| i >= dataset_size) {
            return Err(Error::Parameter(format!(
                "error index {bad} outside dataset of {dataset_size}"
            )));
        }
        Ok(ErrorSet {
            dataset_id: dataset_id.into(),
            model_id: model_id.into(),
            dataset_size,
            indices,
        })
    }

    pub fn from_logits(
        dataset_id: impl Into<String>,
        model_id: impl Into<String>,
        logits: &Tensor,
        labels: &[usize],
    ) -> Result<Self> {
        check_rows(logits, labels)?;
        let wrong = labels
            .iter()
            .enumerate()
            .filter(|&(i, &l)| argmax(logits.row(i)) != l)
            .map(|(i, _)| i)
            .collect();
        Self::new(dataset_id, model_id, labels.len(), wrong)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn intersection_len(&self, other: &ErrorSet) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        let (a, b) = (&self.indices, &other.indices);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }
}

/// Test-split error set of a trained model.
pub fn error_set(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<ErrorSet> {
    let logits = trainer_logits(checkpoint, &dataset.test.inputs)?;
    ErrorSet::from_logits(
        &dataset.id,
        &checkpoint.meta.label,
        &logits,
        &dataset.test.labels,
    )
}

/// Normalizer of the overlap rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapDenominator {
    /// `|E_lower|`: share of the lower model's errors also made above.
    #[default]
    Lower,
    Upper,
    Union,
}

/// `|E_upper ∩ E_lower| / |E_lower|`, or 0 when `E_lower` is empty.
pub fn error_overlap_rate(upper: &ErrorSet, lower: &ErrorSet) -> Result<f64> {
    error_overlap_rate_with(upper, lower, OverlapDenominator::Lower)
}

pub fn error_overlap_rate_with(
    upper: &ErrorSet,
    lower: &ErrorSet,
    denom: OverlapDenominator,
) -> Result<f64> {
    if upper.dataset_id != lower.dataset_id {
        return Err(Error::Parameter(format!(
            "error sets come from different datasets: {} vs {}",
            upper.dataset_id, lower.dataset_id
        )));
    }
    let inter = upper.intersection_len(lower);
    let d = match denom {
        OverlapDenominator::Lower => lower.len(),
        OverlapDenominator::Upper => upper.len(),
        OverlapDenominator::Union => upper.len() + lower.len() - inter,
    };
    Ok(if d == 0 { 0.0 } else { inter as f64 / d as f64 })
}

/// `m[i][j]` = overlap with stage `i` as the upper and `j` as the lower model.
pub fn overlap_matrix(stages: &[StageReport], denom: OverlapDenominator) -> Result<Vec<Vec<f64>>> {
    stages
        .iter()
        .map(|upper| {
            stages
                .iter()
                .map(|lower| error_overlap_rate_with(&upper.errors, &lower.errors, denom))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDescriptor {
    pub name: String,
    /// e.g. `T8→A6→A4→S2`
    pub path: String,
    pub mode: GuidanceMode,
    /// Number of teacher assistants on the path.
    pub n: usize,
    pub seed: u64,
    pub drop_trials: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanReport {
    pub descriptor: PlanDescriptor,
    pub stages: Vec<StageReport>,
    pub overlap_denominator: OverlapDenominator,
    pub overlap: Vec<Vec<f64>>,
    /// Kept out of serialized reports so they stay byte-reproducible.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Equality ignores `wall_clock_secs`.
impl PartialEq for PlanReport {
    fn eq(&self, other: &Self) -> bool {
        self.descriptor == other.descriptor
            && self.stages == other.stages
            && self.overlap_denominator == other.overlap_denominator
            && self.overlap == other.overlap
    }
}

impl PlanReport {
    pub fn student(&self) -> Option<&StageReport> {
        self.stages.last()
    }

    /// Mean overlap between consecutive stages, upper → lower.
    pub fn mean_adjacent_overlap(&self) -> Option<f64> {
        let m = self.overlap.len();
        if m < 2 {
            return None;
        }
        Some((0..m - 1).map(|k| self.overlap[k][k + 1]).sum::<f64>() / (m - 1) as f64)
    }
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub plan: String,
    pub path: String,
    pub mode: GuidanceMode,
    pub n: usize,
    pub drop_trials: usize,
    /// A seed, or `mean` for aggregate rows.
    pub seed: String,
    pub runs: usize,
    pub student_top1: f64,
    pub student_top1_std: Option<f64>,
    pub mean_adjacent_overlap: Option<f64>,
    pub overlap_std: Option<f64>,
}

/// One row per report, echoing the final student accuracy and the mean
/// adjacent error overlap.
pub fn summarize_plans(reports: &[PlanReport]) -> Result<Vec<SummaryRow>> {
    if reports.is_empty() {
        return Err(Error::Parameter("no plan reports to summarize".into()));
    }
    reports
        .iter()
        .map(|r| {
            let student = r.student().ok_or_else(|| {
                Error::Parameter(format!("plan {} has no stages", r.descriptor.name))
            })?;
            Ok(SummaryRow {
                plan: r.descriptor.name.clone(),
                path: r.descriptor.path.clone(),
                mode: r.descriptor.mode,
                n: r.descriptor.n,
                drop_trials: r.descriptor.drop_trials,
                seed: r.descriptor.seed.to_string(),
                runs: 1,
                student_top1: student.final_top1,
                student_top1_std: None,
                mean_adjacent_overlap: r.mean_adjacent_overlap(),
                overlap_std: None,
            })
        })
        .collect()
}

/// Sample mean and standard deviation (`n − 1` denominator, 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Collapses per-seed rows into one `mean ± std` row per plan name, in
/// order of first appearance.
pub fn aggregate_rows(rows: &[SummaryRow]) -> Vec<SummaryRow> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&SummaryRow>> = BTreeMap::new();
    for row in rows {
        if !groups.contains_key(row.plan.as_str()) {
            order.push(&row.plan);
        }
        groups.entry(&row.plan).or_default().push(row);
    }
    order
        .into_iter()
        .map(|plan| {
            let group = &groups[plan];
            let acc: Vec<f64> = group.iter().map(|r| r.student_top1).collect();
            let ov: Vec<f64> = group
                .iter()
                .filter_map(|r| r.mean_adjacent_overlap)
                .collect();
            let (acc_mean, acc_std) = mean_std(&acc);
            let (ov_mean, ov_std) = if ov.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&ov);
                (Some(m), Some(s))
            };
            let first = group[0];
            SummaryRow {
                plan: plan.to_string(),
                path: first.path.clone(),
                mode: first.mode,
                n: first.n,
                drop_trials: first.drop_trials,
                seed: "mean".into(),
                runs: group.len(),
                student_top1: acc_mean,
                student_top1_std: Some(acc_std),
                mean_adjacent_overlap: ov_mean,
                overlap_std: ov_std,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(indices: &[usize]) -> ErrorSet {
        ErrorSet::new("d", "m", 64, indices.to_vec()).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        let logits = Tensor::from_rows(&[
            vec![0.9, 0.1],
            vec![0.2, 0.8],
            vec![0.5, 0.5],
            vec![0.7, 0.3],
            vec![0.1, 0.3],
        ])
        .unwrap();
        assert_eq!(top1_accuracy(&logits, &[0, 1, 0, 0, 1]).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&logits, &[1, 0, 1, 1, 0]).unwrap(), 0.0);
        assert_eq!(top1_accuracy(&logits, &[0, 1, 1, 1, 1]).unwrap(), 0.6);
    }

    #[test]
    fn ties_pick_lowest_class() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn overlap_examples() {
        let a = set(&[4, 9, 1]);
        assert_eq!(error_overlap_rate(&a, &a).unwrap(), 1.0);
        assert_eq!(
            error_overlap_rate(&set(&[1, 2]), &set(&[3, 4])).unwrap(),
            0.0
        );
        assert_eq!(
            error_overlap_rate(&set(&[1, 2, 3]), &set(&[2, 3, 4, 5])).unwrap(),
            0.5
        );
        assert_eq!(error_overlap_rate(&set(&[1]), &set(&[])).unwrap(), 0.0);
        let upper = set(&[1, 2, 3]);
        let lower = set(&[2, 3, 4, 5]);
        assert_eq!(
            error_overlap_rate_with(&upper, &lower, OverlapDenominator::Upper).unwrap(),
            2.0 / 3.0
        );
        assert_eq!(
            error_overlap_rate_with(&upper, &lower, OverlapDenominator::Union).unwrap(),
            2.0 / 5.0
        );
    }

    #[test]
    fn overlap_requires_same_dataset() {
        let other = ErrorSet::new("other", "m", 64, vec![1]).unwrap();
        assert!(error_overlap_rate(&set(&[1]), &other).is_err());
    }

    #[test]
    fn error_set_bounds() {
        assert!(ErrorSet::new("d", "m", 3, vec![3]).is_err());
        assert_eq!(
            ErrorSet::new("d", "m", 5, vec![3, 1, 3]).unwrap().indices(),
            &[1, 3]
        );
    }

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    fn brute_rate(upper: &[usize], lower: &[usize]) -> f64 {
        let u: std::collections::HashSet<_> = upper.iter().collect();
        let l: std::collections::HashSet<_> = lower.iter().collect();
        if l.is_empty() {
            0.0
        } else {
            u.intersection(&l).count() as f64 / l.len() as f64
        }
    }

    #[test]
    fn exhaustive_small_sets_match_brute_force() {
        // every pair of subsets of {0..5}
        for a in 0u32..64 {
            for b in 0u32..64 {
                let ua: Vec<usize> = (0..6).filter(|i| a >> i & 1 == 1).collect();
                let lb: Vec<usize> = (0..6).filter(|i| b >> i & 1 == 1).collect();
                let got = error_overlap_rate(&set(&ua), &set(&lb)).unwrap();
                assert_eq!(got, brute_rate(&ua, &lb));
                if b & !a == 0 && b != 0 {
                    assert_eq!(got, 1.0);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn insertion_order_does_not_matter(
            upper in prop::collection::vec(0usize..64, 0..30),
            lower in prop::collection::vec(0usize..64, 0..30),
        ) {
            let rev_u: Vec<usize> = upper.iter().rev().copied().collect();
            let rev_l: Vec<usize> = lower.iter().rev().copied().collect();
            let a = error_overlap_rate(&set(&upper), &set(&lower)).unwrap();
            let b = error_overlap_rate(&set(&rev_u), &set(&rev_l)).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert_eq!(a, brute_rate(&upper, &lower));
        }

        #[test]
        fn accuracy_matches_error_set_size(
            values in prop::collection::vec(-3.0f64..3.0, 4 * 20),
            labels in prop::collection::vec(0usize..4, 20),
        ) {
            let logits = Tensor::new(vec![20, 4], values).unwrap();
            let acc = top1_accuracy(&logits, &labels).unwrap();
            let errors = ErrorSet::from_logits("d", "m", &logits, &labels).unwrap();
            prop_assert_eq!(correct_count(&logits, &labels).unwrap() + errors.len(), 20);
            prop_assert_eq!(acc, (20 - errors.len()) as f64 / 20.0);
        }
    }
}
