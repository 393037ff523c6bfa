//! Top-k accuracy, per-class accuracy and confusion counts.

use std::fmt;

use ndarray::Array2;

use crate::error::{ensure, Error, Result};

/// Position of `label` when classes are ordered by descending score, lower
/// index first among equal scores. Rank 0 is the prediction.
pub fn rank_of(scores: &[f64], label: usize) -> usize {
    let s = scores[label];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < label))
        .count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub num_samples: usize,
    pub top1: f64,
    pub top5: f64,
    /// `None` for classes without samples.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_scores(scores: &Array2<f64>, labels: &[usize]) -> Result<EvalReport> {
        let (n, n_c) = scores.dim();
        ensure!(
            n == labels.len(),
            Error::Shape(format!("{n} score rows for {} labels", labels.len()))
        );
        ensure!(n > 0, Error::InvalidArgument("no samples to evaluate".into()));
        ensure!(
            labels.iter().all(|&l| l < n_c),
            Error::InvalidArgument(format!("label outside 0..{n_c}"))
        );
        let mut confusion = vec![vec![0usize; n_c]; n_c];
        let (mut top1, mut top5) = (0usize, 0usize);
        for (row, &label) in scores.rows().into_iter().zip(labels) {
            let row = row.to_vec();
            let rank = rank_of(&row, label);
            top1 += usize::from(rank == 0);
            top5 += usize::from(rank < 5);
            confusion[label][crate::ensemble::predict(&row)] += 1;
        }
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let total: usize = row.iter().sum();
                (total > 0).then(|| row[c] as f64 / total as f64)
            })
            .collect();
        Ok(EvalReport {
            num_samples: n,
            top1: top1 as f64 / n as f64,
            top5: top5 as f64 / n as f64,
            per_class,
            confusion,
        })
    }

    /// Off-diagonal `(true, predicted, count)` cells, largest first.
    pub fn most_confused(&self, k: usize) -> Vec<(usize, usize, usize)> {
        let mut cells: Vec<_> = self
            .confusion
            .iter()
            .enumerate()
            .flat_map(|(t, row)| row.iter().enumerate().map(move |(p, &c)| (t, p, c)))
            .filter(|&(t, p, c)| t != p && c > 0)
            .collect();
        cells.sort_by(|a, b| b.2.cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
        cells.truncate(k);
        cells
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "samples={} top1={:.6} top5={:.6}", self.num_samples, self.top1, self.top5)?;
        for (t, p, c) in self.most_confused(3) {
            write!(f, " confused[{t}->{p}]={c}")?;
        }
        Ok(())
    }
}
