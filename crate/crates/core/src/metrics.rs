//! Classification metrics: accuracy, F1 variants and binary AUC.

use log::warn;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub macro_f1: f64,
    /// F1 of class 1, for two-class problems.
    pub binary_f1: Option<f64>,
    pub auc: Option<f64>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

/// Row-major confusion counts indexed `[label][prediction]`.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    if predictions.len() != labels.len() {
        return Err(Error::dims("confusion_matrix", labels.len(), predictions.len()));
    }
    let mut cm = vec![vec![0usize; num_classes]; num_classes];
    for (i, (&p, &y)) in predictions.iter().zip(labels).enumerate() {
        if p >= num_classes || y >= num_classes {
            return Err(Error::invalid("labels", format!("row {i} has class outside [0, {num_classes})")));
        }
        cm[y][p] += 1;
    }
    Ok(cm)
}

/// Per-class F1 from a confusion matrix; a class with no support and no
/// predictions scores 0.
pub fn per_class_f1(cm: &[Vec<usize>]) -> Vec<f64> {
    let c = cm.len();
    (0..c)
        .map(|k| {
            let tp = cm[k][k] as f64;
            let support: usize = cm[k].iter().sum();
            let predicted: usize = (0..c).map(|r| cm[r][k]).sum();
            let denom = (support + predicted) as f64;
            if denom == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .collect()
}

/// Mann–Whitney estimate of the ROC AUC; tied scores earn half credit.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dims("auc", labels.len(), scores.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("auc scores".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks over tie groups.
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("labels", "AUC needs both classes present"));
    }
    let rank_sum: f64 = labels.iter().zip(&ranks).filter(|(&y, _)| y == 1).map(|(_, r)| r).sum();
    Ok((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64)
}

/// `scores` are positive-class scores and are only used when `num_classes == 2`.
pub fn evaluate(predictions: &[usize], labels: &[usize], num_classes: usize, scores: Option<&[f64]>) -> Result<EvalReport> {
    if labels.is_empty() {
        return Err(Error::InsufficientSamples { required: 1, actual: 0 });
    }
    let confusion = confusion_matrix(predictions, labels, num_classes)?;
    let n = labels.len() as f64;
    let correct: usize = (0..num_classes).map(|k| confusion[k][k]).sum();
    let f1 = per_class_f1(&confusion);
    let support: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
    for (k, s) in support.iter().enumerate() {
        if *s == 0 {
            warn!("class {k} is absent from the labels; its F1 is taken as 0");
        }
    }
    let macro_f1 = f1.iter().sum::<f64>() / num_classes as f64;
    let weighted_f1 = f1.iter().zip(&support).map(|(f, s)| f * *s as f64).sum::<f64>() / n;
    let (binary_f1, auc) = if num_classes == 2 {
        let a = match scores {
            Some(s) => Some(auc(s, labels)?),
            None => None,
        };
        (Some(f1[1]), a)
    } else {
        (None, None)
    };
    Ok(EvalReport {
        accuracy: correct as f64 / n,
        weighted_f1,
        macro_f1,
        binary_f1,
        auc,
        confusion,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "accuracy,weighted_f1,macro_f1,binary_f1,auc";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{},{}",
            self.accuracy,
            self.weighted_f1,
            self.macro_f1,
            opt(self.binary_f1),
            opt(self.auc)
        )
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "accuracy     {:.4}\nweighted F1  {:.4}\nmacro F1     {:.4}\n",
            self.accuracy, self.weighted_f1, self.macro_f1
        );
        if let Some(f) = self.binary_f1 {
            s.push_str(&format!("F1           {f:.4}\n"));
        }
        if let Some(a) = self.auc {
            s.push_str(&format!("AUC          {a:.4}\n"));
        }
        s.push_str("confusion (rows = true class)\n");
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:5}")).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_confusion(cm: &[[usize; 2]; 2]) -> (Vec<usize>, Vec<usize>) {
        let (mut p, mut y) = (vec![], vec![]);
        for (t, row) in cm.iter().enumerate() {
            for (q, &count) in row.iter().enumerate() {
                p.extend(std::iter::repeat_n(q, count));
                y.extend(std::iter::repeat_n(t, count));
            }
        }
        (p, y)
    }

    #[test]
    fn hand_confusion() {
        let (p, y) = from_confusion(&[[8, 2], [3, 7]]);
        let r = evaluate(&p, &y, 2, None).unwrap();
        assert!((r.accuracy - 0.75).abs() < 1e-12);
        let f0 = 16.0 / 21.0;
        let f1 = 14.0 / 19.0;
        assert!((r.macro_f1 - (f0 + f1) / 2.0).abs() < 1e-12);
        assert!((r.macro_f1 - 0.7494).abs() < 1e-4);
        assert!((r.weighted_f1 - r.macro_f1).abs() < 1e-12);
        assert_eq!(r.binary_f1, Some(f1));
        assert_eq!(r.confusion, vec![vec![8, 2], vec![3, 7]]);
    }

    #[test]
    fn perfect_predictions() {
        let y = vec![0, 1, 1, 0, 1];
        let scores = [0.1, 0.9, 0.8, 0.3, 0.7];
        let r = evaluate(&y, &y, 2, Some(&scores)).unwrap();
        assert_eq!((r.accuracy, r.weighted_f1, r.macro_f1), (1.0, 1.0, 1.0));
        assert_eq!(r.auc, Some(1.0));
    }

    #[test]
    fn absent_class_scores_zero() {
        let r = evaluate(&[0, 1, 0], &[0, 1, 0], 3, None).unwrap();
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.weighted_f1, 1.0);
    }

    #[test]
    fn auc_ties_and_inversion() {
        assert_eq!(auc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.1], &[0, 1]).unwrap(), 0.0);
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn csv_row_has_header_width() {
        let r = evaluate(&[0, 1, 2], &[0, 1, 1], 3, None).unwrap();
        assert_eq!(r.csv_row().split(',').count(), EvalReport::CSV_HEADER.split(',').count());
        assert!(r.table().contains("macro F1"));
    }
}
