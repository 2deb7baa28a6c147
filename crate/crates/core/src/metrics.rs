//! Class-imbalance-aware evaluation: per-class average precision, mAP,
//! per-class accuracy (recall), average class accuracy and overall accuracy.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::argmax;
use crate::tensor::Matrix;

/// All-points average precision: rank by descending score (ties keep input
/// order) and average precision@k over the ranks of the positives.
///
/// Returns `None` when there are no positives.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positives.len(), "scores/positives length");
    let total = positives.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps input order among equal scores
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub per_class_ap: Vec<Option<f64>>,
    pub overall_map: f64,
    pub per_class_acc: Vec<Option<f64>>,
    pub avg_class_acc: f64,
    pub overall_acc: f64,
    pub confusion: Vec<Vec<u64>>,
    pub n_eval: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn mean_defined(values: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

/// Scores are `N x C` (logits or probabilities; AP only needs the ranking).
pub fn evaluate(scores: &Matrix, labels: &[usize], class_names: &[String]) -> Result<MetricsReport> {
    let (n, c) = (scores.rows(), scores.cols());
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            field: "labels",
            expected: n,
            found: labels.len(),
        });
    }
    if class_names.len() != c {
        return Err(Error::DimensionMismatch {
            field: "class_names",
            expected: c,
            found: class_names.len(),
        });
    }
    if n == 0 {
        return Err(Error::invalid("labels", "evaluation needs at least one sample"));
    }
    if let Some((index, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= c) {
        return Err(Error::LabelOutOfRange {
            index,
            label: y as u64,
            classes: c,
        });
    }

    let mut confusion = vec![vec![0u64; c]; c];
    for (i, &y) in labels.iter().enumerate() {
        confusion[y][argmax(scores.row(i))] += 1;
    }

    let mut warnings = Vec::new();
    let mut per_class_ap = Vec::with_capacity(c);
    let mut per_class_acc = Vec::with_capacity(c);
    let mut column = vec![0.0; n];
    let mut positives = vec![false; n];
    for j in 0..c {
        for i in 0..n {
            column[i] = scores.get(i, j);
            positives[i] = labels[i] == j;
        }
        let ap = average_precision(&column, &positives);
        let support: u64 = confusion[j].iter().sum();
        let acc = (support > 0).then(|| confusion[j][j] as f64 / support as f64);
        if ap.is_none() {
            warnings.push(format!(
                "class {j} ({}) has no evaluation samples; excluded from mAP and Avg. C/A",
                class_names[j]
            ));
        }
        per_class_ap.push(ap);
        per_class_acc.push(acc);
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    let correct: u64 = (0..c).map(|j| confusion[j][j]).sum();
    Ok(MetricsReport {
        class_names: class_names.to_vec(),
        overall_map: mean_defined(&per_class_ap),
        avg_class_acc: mean_defined(&per_class_acc),
        overall_acc: correct as f64 / n as f64,
        per_class_ap,
        per_class_acc,
        confusion,
        n_eval: n as u64,
        warnings,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per class plus a summary row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,ap,accuracy,support,overall_acc\n");
        for (j, name) in self.class_names.iter().enumerate() {
            let support: u64 = self.confusion[j].iter().sum();
            let _ = writeln!(
                out,
                "{name},{},{},{support},",
                fmt_opt(self.per_class_ap[j]),
                fmt_opt(self.per_class_acc[j])
            );
        }
        // summary: ap column holds mAP, accuracy column holds Avg. C/A
        let _ = writeln!(
            out,
            "summary,{:.6},{:.6},{},{:.6}",
            self.overall_map, self.avg_class_acc, self.n_eval, self.overall_acc
        );
        out
    }

    /// Percentages laid out as: per-class AP, overall mAP, Avg. C/A, Overall Acc.
    pub fn table_row(&self, method: &str) -> String {
        let mut s = format!("{method:<14}");
        for ap in &self.per_class_ap {
            match ap {
                Some(v) => {
                    let _ = write!(s, " {:>6.1}", v * 100.0);
                }
                None => s.push_str("      -"),
            }
        }
        let _ = write!(
            s,
            " | {:>6.1} {:>6.1} {:>6.1}",
            self.overall_map * 100.0,
            self.avg_class_acc * 100.0,
            self.overall_acc * 100.0
        );
        s
    }

    pub fn table_header(class_names: &[String]) -> String {
        let mut s = format!("{:<14}", "method");
        for name in class_names {
            let short: String = name.chars().take(6).collect();
            let _ = write!(s, " {short:>6}");
        }
        s.push_str(" |    mAP  AvgCA   OAcc");
        s
    }
}
