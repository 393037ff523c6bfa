//! Weighted late fusion of pre-softmax scores and validation-driven weight
//! search.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;

use crate::error::{ensure, Error, Result};
use crate::streams::StreamKind;

/// Modality tags of the RGB track, in weight order.
pub const RGB_MODALITIES: [&str; 4] = ["skeleton", "rgb", "flow", "feature"];
pub const RGB_WEIGHTS: [f64; 4] = [1.0, 0.9, 0.4, 0.4];

/// Modality tags of the RGB-D track, in weight order.
pub const RGBD_MODALITIES: [&str; 6] = ["skeleton", "rgb", "flow", "feature", "hha", "depth_flow"];
pub const RGBD_WEIGHTS: [f64; 6] = [1.0, 0.9, 0.4, 0.4, 0.4, 0.1];

/// Largest grid enumerated exhaustively; bigger searches use a beam.
pub const EXHAUSTIVE_LIMIT: usize = 1_000_000;
pub const BEAM_WIDTH: usize = 64;

/// One sample's pre-softmax scores from one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub sample_id: String,
    pub modality: String,
    pub values: Vec<f64>,
}

impl ScoreVector {
    pub fn new(sample_id: impl Into<String>, modality: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        ensure!(!values.is_empty(), Error::InvalidArgument("empty score vector".into()));
        ensure!(
            values.iter().all(|v| v.is_finite()),
            Error::NonFinite("score vector".into())
        );
        Ok(ScoreVector {
            sample_id: sample_id.into(),
            modality: modality.into(),
            values,
        })
    }
}

/// Ordered `(modality, weight)` pairs; weights are non-negative and not all
/// zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleWeights {
    entries: Vec<(String, f64)>,
}

impl EnsembleWeights {
    pub fn new<S: Into<String>>(entries: impl IntoIterator<Item = (S, f64)>) -> Result<Self> {
        let entries: Vec<(String, f64)> = entries.into_iter().map(|(m, w)| (m.into(), w)).collect();
        ensure!(
            entries.iter().all(|(_, w)| w.is_finite() && *w >= 0.0),
            Error::InvalidArgument("ensemble weights must be finite and non-negative".into())
        );
        ensure!(
            entries.iter().any(|(_, w)| *w > 0.0),
            Error::InvalidArgument("at least one ensemble weight must be positive".into())
        );
        for (i, (m, _)) in entries.iter().enumerate() {
            ensure!(
                !entries[..i].iter().any(|(o, _)| o == m),
                Error::InvalidArgument(format!("modality {m} listed twice"))
            );
        }
        Ok(EnsembleWeights { entries })
    }

    pub fn rgb_track() -> Self {
        Self::new(RGB_MODALITIES.into_iter().zip(RGB_WEIGHTS)).expect("valid constants")
    }

    pub fn rgbd_track() -> Self {
        Self::new(RGBD_MODALITIES.into_iter().zip(RGBD_WEIGHTS)).expect("valid constants")
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn weight(&self, modality: &str) -> Option<f64> {
        self.entries.iter().find(|(m, _)| m == modality).map(|(_, w)| *w)
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|(_, w)| *w).collect()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.entries.iter().map(|(m, w)| (m.clone(), w * factor)))
    }
}

/// Weighted sum of one sample's modality scores, in weight order.
pub fn fuse(scores: &[ScoreVector], weights: &EnsembleWeights) -> Result<ScoreVector> {
    for s in scores {
        if weights.weight(&s.modality).is_none() {
            log::warn!("ignoring scores of unweighted modality {}", s.modality);
        }
    }
    let mut fused: Option<Vec<f64>> = None;
    let mut sample_id = None;
    for (modality, w) in &weights.entries {
        let Some(s) = scores.iter().find(|s| &s.modality == modality) else {
            ensure!(
                *w == 0.0,
                Error::InvalidArgument(format!("no scores for modality {modality} (weight {w})"))
            );
            continue;
        };
        match &sample_id {
            None => sample_id = Some(s.sample_id.clone()),
            Some(id) => ensure!(
                *id == s.sample_id,
                Error::InvalidArgument(format!("fusing scores of samples {id} and {}", s.sample_id))
            ),
        }
        let acc = fused.get_or_insert_with(|| vec![0.0; s.values.len()]);
        ensure!(
            acc.len() == s.values.len(),
            Error::Shape(format!(
                "modality {modality} has {} classes, expected {}",
                s.values.len(),
                acc.len()
            ))
        );
        for (a, v) in acc.iter_mut().zip(&s.values) {
            *a += w * v;
        }
    }
    let values = fused.ok_or_else(|| Error::InvalidArgument("nothing to fuse".into()))?;
    ScoreVector::new(sample_id.unwrap_or_default(), "fused", values)
}

/// Index of the largest score; the lowest index wins ties.
pub fn predict(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fuses per-stream SL-GCN scores with weights given in
/// [`StreamKind::ALL`] order.
pub fn fuse_streams(streams: &[ScoreVector], weights: &[f64; 4]) -> Result<ScoreVector> {
    let w = EnsembleWeights::new(StreamKind::ALL.iter().map(|k| k.name()).zip(weights.iter().copied()))?;
    fuse(streams, &w)
}

/// Scores of one modality over a split, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub modality: String,
    pub sample_ids: Vec<String>,
    pub scores: Array2<f64>,
}

impl ScoreTable {
    pub fn new(modality: impl Into<String>, sample_ids: Vec<String>, scores: Array2<f64>) -> Result<Self> {
        ensure!(
            sample_ids.len() == scores.nrows(),
            Error::Shape(format!("{} ids for {} score rows", sample_ids.len(), scores.nrows()))
        );
        ensure!(
            scores.iter().all(|v| v.is_finite()),
            Error::NonFinite("score table".into())
        );
        Ok(ScoreTable {
            modality: modality.into(),
            sample_ids,
            scores,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.scores.ncols()
    }

    pub fn row(&self, sample_id: &str) -> Option<ScoreVector> {
        let i = self.sample_ids.iter().position(|s| s == sample_id)?;
        Some(ScoreVector {
            sample_id: sample_id.to_string(),
            modality: self.modality.clone(),
            values: self.scores.row(i).to_vec(),
        })
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.scores
            .rows()
            .into_iter()
            .map(|r| predict(r.as_slice().expect("row-major")))
            .collect()
    }

    /// Reads a `sample_id,c0,...` CSV file.
    pub fn read_csv(path: impl AsRef<Path>, modality: impl Into<String>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
        ensure!(
            header.len() >= 2 && &header[0] == "sample_id",
            Error::format(path, "score header must start with sample_id")
        );
        for (k, name) in header.iter().skip(1).enumerate() {
            ensure!(
                name == format!("c{k}"),
                Error::format(path, format!("column {} should be c{k}, found {name}", k + 1))
            );
        }
        let n_c = header.len() - 1;
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            ensure!(
                rec.len() == n_c + 1,
                Error::Parse {
                    path: path.display().to_string(),
                    line: line + 2,
                    msg: format!("expected {} fields, found {}", n_c + 1, rec.len()),
                }
            );
            ids.push(rec[0].to_string());
            for field in rec.iter().skip(1) {
                let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                    path: path.display().to_string(),
                    line: line + 2,
                    msg: format!("bad score {field:?}"),
                })?;
                values.push(v);
            }
        }
        let rows = ids.len();
        let scores = Array2::from_shape_vec((rows, n_c), values).expect("counted fields");
        ScoreTable::new(modality, ids, scores)
    }

    /// Writes scores with Rust's shortest round-trip float formatting.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header = vec!["sample_id".to_string()];
        header.extend((0..self.num_classes()).map(|k| format!("c{k}")));
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for (id, row) in self.sample_ids.iter().zip(self.scores.rows()) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(path, e.to_string())
    }
}

/// Fuses whole tables, aligning rows by sample id to the first table.
pub fn fuse_tables(tables: &[ScoreTable], weights: &EnsembleWeights) -> Result<ScoreTable> {
    let first = tables
        .first()
        .ok_or_else(|| Error::InvalidArgument("no score tables".into()))?;
    let mut rows = Vec::with_capacity(first.sample_ids.len());
    for id in &first.sample_ids {
        let per: Vec<ScoreVector> = tables.iter().filter_map(|t| t.row(id)).collect();
        rows.push(fuse(&per, weights)?.values);
    }
    let n_c = rows.first().map_or(first.num_classes(), Vec::len);
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    ScoreTable::new(
        "fused",
        first.sample_ids.clone(),
        Array2::from_shape_vec((first.sample_ids.len(), n_c), flat).expect("rectangular"),
    )
}

/// `{0, 0.1, ..., 1.0}`.
pub fn default_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TunedWeights {
    pub weights: EnsembleWeights,
    pub accuracy: f64,
    pub evaluated: usize,
}

/// Searches the grid for the weights maximizing validation Top-1.
///
/// `labels` maps sample ids to classes; every labelled sample must have
/// scores in every table. Grid points are visited in lexicographic order and
/// only strict improvements replace the incumbent, so ties resolve to the
/// lexicographically smallest weights. The all-zero vector is skipped.
pub fn tune_weights(tables: &[ScoreTable], labels: &HashMap<String, usize>, grid: &[f64]) -> Result<TunedWeights> {
    ensure!(!grid.is_empty(), Error::InvalidArgument("empty weight grid".into()));
    ensure!(!tables.is_empty(), Error::InvalidArgument("no score tables".into()));
    ensure!(
        grid.iter().all(|g| g.is_finite() && *g >= 0.0),
        Error::InvalidArgument("grid values must be finite and non-negative".into())
    );
    ensure!(
        grid.iter().any(|g| *g > 0.0),
        Error::InvalidArgument("grid has no positive value".into())
    );
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let mut ids: Vec<&String> = labels.keys().collect();
    ids.sort();
    ensure!(!ids.is_empty(), Error::InvalidArgument("no labelled samples".into()));
    let n_c = tables[0].num_classes();
    let mut stacked = Vec::with_capacity(tables.len());
    for t in tables {
        ensure!(
            t.num_classes() == n_c,
            Error::Shape(format!("modality {} has {} classes, expected {n_c}", t.modality, t.num_classes()))
        );
        let index: HashMap<&str, usize> = t.sample_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut m = Array2::zeros((ids.len(), n_c));
        for (r, id) in ids.iter().enumerate() {
            let i = *index.get(id.as_str()).ok_or_else(|| {
                Error::InvalidArgument(format!("modality {} has no scores for {id}", t.modality))
            })?;
            m.row_mut(r).assign(&t.scores.row(i));
        }
        stacked.push(m);
    }
    let truth: Vec<usize> = ids.iter().map(|id| labels[*id]).collect();
    let search = Search {
        stacked: &stacked,
        truth: &truth,
    };

    let m = tables.len();
    let total = (grid.len() as f64).powi(m as i32);
    let (best, accuracy, evaluated) = if total <= EXHAUSTIVE_LIMIT as f64 {
        search.exhaustive(&grid)
    } else {
        search.beam(&grid)
    };
    let best = best.ok_or_else(|| Error::InvalidArgument("grid has no admissible point".into()))?;
    Ok(TunedWeights {
        weights: EnsembleWeights::new(tables.iter().map(|t| t.modality.clone()).zip(best))?,
        accuracy,
        evaluated,
    })
}

struct Search<'a> {
    stacked: &'a [Array2<f64>],
    truth: &'a [usize],
}

type Incumbent = (Option<Vec<f64>>, f64, usize);

impl Search<'_> {
    fn accuracy(&self, w: &[f64]) -> f64 {
        let n_c = self.stacked[0].ncols();
        let mut fused = vec![0.0; n_c];
        let mut correct = 0;
        for (r, &label) in self.truth.iter().enumerate() {
            fused.fill(0.0);
            for (m, &wm) in self.stacked.iter().zip(w) {
                if wm != 0.0 {
                    for (f, v) in fused.iter_mut().zip(m.row(r)) {
                        *f += wm * v;
                    }
                }
            }
            if predict(&fused) == label {
                correct += 1;
            }
        }
        correct as f64 / self.truth.len() as f64
    }

    fn offer(&self, w: &[f64], inc: &mut Incumbent) {
        if w.iter().all(|&x| x == 0.0) {
            return;
        }
        let acc = self.accuracy(w);
        inc.2 += 1;
        let better = match &inc.0 {
            None => true,
            Some(cur) => acc > inc.1 || (acc == inc.1 && lex_less(w, cur)),
        };
        if better {
            inc.0 = Some(w.to_vec());
            inc.1 = acc;
        }
    }

    fn exhaustive(&self, grid: &[f64]) -> Incumbent {
        let m = self.stacked.len();
        let mut inc = (None, f64::NEG_INFINITY, 0);
        let mut digits = vec![0usize; m];
        loop {
            let w: Vec<f64> = digits.iter().map(|&d| grid[d]).collect();
            self.offer(&w, &mut inc);
            let mut pos = m;
            loop {
                if pos == 0 {
                    return inc;
                }
                pos -= 1;
                digits[pos] += 1;
                if digits[pos] < grid.len() {
                    break;
                }
                digits[pos] = 0;
            }
        }
    }

    /// Assigns modalities one at a time, keeping the best partial vectors
    /// (remaining weights zero) plus the all-zero prefix, so every
    /// single-modality selector is always evaluated.
    fn beam(&self, grid: &[f64]) -> Incumbent {
        let m = self.stacked.len();
        let mut inc = (None, f64::NEG_INFINITY, 0);
        let mut beam: Vec<Vec<f64>> = vec![Vec::new()];
        for pos in 0..m {
            let mut scored: Vec<(f64, Vec<f64>)> = Vec::new();
            for prefix in &beam {
                for &g in grid {
                    let mut w = prefix.clone();
                    w.push(g);
                    let mut full = w.clone();
                    full.resize(m, 0.0);
                    self.offer(&full, &mut inc);
                    let acc = if full.iter().all(|&x| x == 0.0) {
                        f64::NEG_INFINITY
                    } else {
                        self.accuracy(&full)
                    };
                    scored.push((acc, w));
                }
            }
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| lex_cmp(&a.1, &b.1)));
            let zero = vec![0.0; pos + 1];
            let mut next: Vec<Vec<f64>> = scored.into_iter().map(|(_, w)| w).take(BEAM_WIDTH).collect();
            if !next.contains(&zero) {
                next.push(zero);
            }
            beam = next;
        }
        inc
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    lex_cmp(a, b) == std::cmp::Ordering::Less
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sv(m: &str, v: &[f64]) -> ScoreVector {
        ScoreVector::new("s", m, v.to_vec()).unwrap()
    }

    #[test]
    fn selector_weights_pass_scores_through() {
        let w = EnsembleWeights::new([("a", 1.0), ("b", 0.0)]).unwrap();
        let f = fuse(&[sv("a", &[1.0, 2.0]), sv("b", &[5.0, -1.0])], &w).unwrap();
        assert_eq!(f.values, vec![1.0, 2.0]);
    }

    #[test]
    fn missing_weighted_modality_is_rejected() {
        let w = EnsembleWeights::new([("a", 1.0), ("b", 0.5)]).unwrap();
        assert!(fuse(&[sv("a", &[1.0])], &w).is_err());
        let w = EnsembleWeights::new([("a", 1.0), ("b", 0.0)]).unwrap();
        assert!(fuse(&[sv("a", &[1.0]), sv("extra", &[3.0])], &w).is_ok());
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(predict(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(predict(&[2.0, 2.0, 2.0]), 0);
    }

    #[test]
    fn fixed_track_weights() {
        assert_eq!(EnsembleWeights::rgb_track().values(), vec![1.0, 0.9, 0.4, 0.4]);
        assert_eq!(EnsembleWeights::rgbd_track().values(), vec![1.0, 0.9, 0.4, 0.4, 0.4, 0.1]);
    }

    #[test]
    fn invalid_weights_are_rejected() {
        assert!(EnsembleWeights::new([("a", 0.0)]).is_err());
        assert!(EnsembleWeights::new([("a", -1.0), ("b", 2.0)]).is_err());
        assert!(EnsembleWeights::new([("a", 1.0), ("a", 2.0)]).is_err());
    }

    #[test]
    fn single_modality_tie_prefers_smaller_weight() {
        let t = ScoreTable::new("a", vec!["x".into(), "y".into()], array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let labels = HashMap::from([("x".to_string(), 0), ("y".to_string(), 1)]);
        let tuned = tune_weights(&[t], &labels, &[1.0, 0.5]).unwrap();
        assert_eq!(tuned.weights.values(), vec![0.5]);
        assert!(tune_weights(&[], &labels, &[1.0]).is_err());
    }

    #[test]
    fn dominant_modality_wins() {
        let good = ScoreTable::new("a", vec!["x".into(), "y".into()], array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let bad = ScoreTable::new("b", vec!["x".into(), "y".into()], array![[0.0, 3.0], [3.0, 0.0]]).unwrap();
        let labels = HashMap::from([("x".to_string(), 0), ("y".to_string(), 1)]);
        let tuned = tune_weights(&[good, bad], &labels, &[0.0, 1.0]).unwrap();
        assert_eq!(tuned.weights.values(), vec![1.0, 0.0]);
        assert_eq!(tuned.accuracy, 1.0);
    }

    #[test]
    fn csv_round_trip() {
        let dir = std::env::temp_dir().join(format!("samslr-scores-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("s.csv");
        let t = ScoreTable::new("m", vec!["a".into(), "b".into()], array![[0.1, -2.5e-9], [1.0 / 3.0, 7.0]]).unwrap();
        t.write_csv(&path).unwrap();
        let back = ScoreTable::read_csv(&path, "m").unwrap();
        assert_eq!(back, t);
        std::fs::remove_dir_all(dir).unwrap();
    }
}
