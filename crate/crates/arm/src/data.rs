//! Dataset ingestion, chronological splitting, sliding-window sampling,
//! train-statistics standardization, and the synthetic `multi` generator.

use crate::error::{Error, Result};
use crate::rng::{derive_rng, stream};
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;

/// A multivariate series: `T x C` values in original units.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub column_names: Vec<String>,
    /// Row-major `T x C`.
    values: Vec<f64>,
    rows: usize,
    cols: usize,
    /// Informational sampling-frequency tag.
    pub frequency: Option<String>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, column_names: Vec<String>, rows: usize, values: Vec<f64>) -> Result<Self> {
        let cols = column_names.len();
        if rows * cols != values.len() {
            return Err(Error::Data(format!(
                "{} x {} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                values.len()
            )));
        }
        Ok(Dataset {
            name: name.into(),
            column_names,
            values,
            rows,
            cols,
            frequency: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.cols + c]
    }

    pub fn set(&mut self, t: usize, c: usize, v: f64) {
        self.values[t * self.cols + c] = v;
    }

    pub fn row_slice(&self, t: usize) -> &[f64] {
        &self.values[t * self.cols..(t + 1) * self.cols]
    }

    /// Rows `[start, end)` as a flat row-major block.
    pub fn block(&self, start: usize, end: usize) -> Vec<f64> {
        self.values[start * self.cols..end * self.cols].to_vec()
    }
}

/// Train/validation/test fractions; splits are contiguous and chronological.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.7, val: 0.1, test: 0.2 }
    }
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        if train <= 0.0 || val < 0.0 || test < 0.0 || ((train + val + test) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be nonnegative and sum to 1, got {train}/{val}/{test}"
            )));
        }
        Ok(SplitSpec { train, val, test })
    }

    /// Chronological row ranges `[train, val, test)`; the validation split
    /// absorbs rounding so the three ranges tile the rows exactly.
    pub fn ranges(&self, rows: usize) -> [(usize, usize); 3] {
        let train_end = (rows as f64 * self.train).floor() as usize;
        let test_len = (rows as f64 * self.test).floor() as usize;
        let val_end = rows - test_len;
        [(0, train_end), (train_end, val_end), (val_end, rows)]
    }

    pub fn range_of(&self, rows: usize, split: Split) -> (usize, usize) {
        let [tr, va, te] = self.ranges(rows);
        match split {
            Split::Train => tr,
            Split::Val => va,
            Split::Test => te,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (expected train|val|test)"))),
        }
    }
}

/// One training sample: input block `L_I x C` and target block `L_P x C`.
#[derive(Debug, Clone)]
pub struct SeriesWindow {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub len_input: usize,
    pub len_pred: usize,
    pub channels: usize,
}

/// Start offsets of every window of a split, without materializing samples.
#[derive(Debug, Clone)]
pub struct WindowSet {
    pub starts: Vec<usize>,
    pub len_input: usize,
    pub len_pred: usize,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn window(&self, dataset: &Dataset, idx: usize) -> SeriesWindow {
        let t = self.starts[idx];
        SeriesWindow {
            input: dataset.block(t, t + self.len_input),
            target: dataset.block(t + self.len_input, t + self.len_input + self.len_pred),
            len_input: self.len_input,
            len_pred: self.len_pred,
            channels: dataset.cols(),
        }
    }
}

/// Sliding windows over rows `[start, end)` of a dataset.
///
/// Window `i` covers input `[t, t+L_I)` and target `[t+L_I, t+L_I+L_P)` with
/// `t = start + i*stride`; the count is `floor((rows - L_I - L_P)/stride) + 1`.
pub fn make_windows(range: (usize, usize), len_input: usize, len_pred: usize, stride: usize) -> Result<WindowSet> {
    if stride == 0 {
        return Err(Error::Config("window stride must be >= 1".into()));
    }
    let rows = range.1.saturating_sub(range.0);
    if rows < len_input + len_pred {
        return Err(Error::Data(format!(
            "{} rows cannot fit a window of {} + {}",
            rows, len_input, len_pred
        )));
    }
    let count = (rows - len_input - len_pred) / stride + 1;
    let starts = (0..count).map(|i| range.0 + i * stride).collect();
    Ok(WindowSet { starts, len_input, len_pred })
}

/// Per-column statistics of the train split; applied to the whole dataset.
#[derive(Debug, Clone)]
pub struct TrainStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl TrainStats {
    /// Column mean/std over rows `[range.0, range.1)`; errors on a constant column.
    pub fn fit(dataset: &Dataset, range: (usize, usize)) -> Result<Self> {
        let c = dataset.cols();
        let n = (range.1 - range.0) as f64;
        let mut mean = vec![0.0; c];
        for t in range.0..range.1 {
            for (m, v) in mean.iter_mut().zip(dataset.row_slice(t)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; c];
        for t in range.0..range.1 {
            for j in 0..c {
                let d = dataset.at(t, j) - mean[j];
                var[j] += d * d;
            }
        }
        let mut std = vec![0.0; c];
        for j in 0..c {
            std[j] = (var[j] / n).sqrt();
            if std[j] == 0.0 {
                return Err(Error::Data(format!(
                    "column `{}` is constant on the train split; cannot standardize",
                    dataset.column_names[j]
                )));
            }
        }
        Ok(TrainStats { mean, std })
    }

    pub fn apply(&self, dataset: &mut Dataset) {
        for t in 0..dataset.rows() {
            for j in 0..dataset.cols() {
                let v = (dataset.at(t, j) - self.mean[j]) / self.std[j];
                dataset.set(t, j, v);
            }
        }
    }

    pub fn invert(&self, dataset: &mut Dataset) {
        for t in 0..dataset.rows() {
            for j in 0..dataset.cols() {
                let v = dataset.at(t, j) * self.std[j] + self.mean[j];
                dataset.set(t, j, v);
            }
        }
    }
}

/// Loads a CSV dataset: header required, optional leading timestamp column
/// (ignored for modeling), remaining columns numeric.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if headers.is_empty() {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    }

    let mut records = reader.records();
    let first = match records.next() {
        Some(r) => r?,
        None => return Err(Error::Data(format!("{}: no data rows", path.display()))),
    };
    let head_is_time = matches!(headers[0].to_ascii_lowercase().as_str(), "date" | "timestamp" | "time");
    let first_cell_numeric = first.get(0).map(|s| s.trim().parse::<f64>().is_ok()).unwrap_or(false);
    let skip = usize::from(head_is_time || !first_cell_numeric);

    let column_names: Vec<String> = headers[skip..].to_vec();
    if column_names.is_empty() {
        return Err(Error::Data(format!("{}: no numeric columns", path.display())));
    }

    let mut values = Vec::new();
    let mut rows = 0usize;
    let mut parse_row = |record: &csv::StringRecord, line: usize| -> Result<()> {
        if record.len() != headers.len() {
            return Err(Error::Data(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                line,
                record.len(),
                headers.len()
            )));
        }
        for (j, cell) in record.iter().enumerate().skip(skip) {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Data(format!(
                    "{}: non-numeric cell at row {}, column `{}`: {:?}",
                    path.display(),
                    line,
                    headers[j],
                    cell
                ))
            })?;
            values.push(v);
        }
        rows += 1;
        Ok(())
    };

    parse_row(&first, 2)?;
    for (i, record) in records.enumerate() {
        let record = record?;
        parse_row(&record, i + 3)?;
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    Dataset::new(name, column_names, rows, values)
}

/// Writes a dataset as CSV with full float round-trip precision.
pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    writer.write_record(&dataset.column_names)?;
    for t in 0..dataset.rows() {
        let row: Vec<String> = dataset.row_slice(t).iter().map(|v| format!("{v}")).collect();
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Number of burn-in steps discarded from the head of the generative walk;
/// every shift must be covered by it.
pub const MULTI_BURN_IN: usize = 2000;
pub const MULTI_DEFAULT_SHIFTS: [usize; 4] = [96, 192, 336, 720];

/// Generates the 8-series `multi` dataset.
///
/// Series 1 is a `length`-step segment of a standard-normal random walk taken
/// after the burn-in; series 2-5 are series 1 shifted by `shifts`; series 6 is
/// the mean of series 2-3; series 7 the mean of series 2-5; series 8 the
/// product of series 2-3. Each series is long-term unpredictable on its own
/// but fully determined by the walk's past.
pub fn generate_multi(length: usize, shifts: &[usize], seed: u64) -> Result<Dataset> {
    if shifts.len() != 4 {
        return Err(Error::Config(format!("multi generator needs exactly 4 shifts, got {}", shifts.len())));
    }
    if let Some(&bad) = shifts.iter().find(|&&s| s == 0 || s >= MULTI_BURN_IN) {
        return Err(Error::Config(format!(
            "shift {bad} outside (0, {MULTI_BURN_IN}); the discarded prefix must cover all shifts"
        )));
    }
    if length == 0 {
        return Err(Error::Config("multi generator needs length >= 1".into()));
    }

    let mut rng = derive_rng(seed, &[stream::DATA]);
    let total = length + MULTI_BURN_IN;
    let mut walk = Vec::with_capacity(total);
    let mut level = 0.0;
    for _ in 0..total {
        let eps: f64 = StandardNormal.sample(&mut rng);
        level += eps;
        walk.push(level);
    }

    let cols = 8usize;
    let mut values = vec![0.0; length * cols];
    for t in 0..length {
        let base = MULTI_BURN_IN + t;
        let s1 = walk[base];
        let s2 = walk[base - shifts[0]];
        let s3 = walk[base - shifts[1]];
        let s4 = walk[base - shifts[2]];
        let s5 = walk[base - shifts[3]];
        let row = &mut values[t * cols..(t + 1) * cols];
        row[0] = s1;
        row[1] = s2;
        row[2] = s3;
        row[3] = s4;
        row[4] = s5;
        row[5] = 0.5 * s2 + 0.5 * s3;
        row[6] = 0.25 * s2 + 0.25 * s3 + 0.25 * s4 + 0.25 * s5;
        row[7] = s2 * s3;
    }

    let column_names = (1..=cols).map(|i| format!("x{i}")).collect();
    let mut ds = Dataset::new("multi", column_names, length, values)?;
    ds.frequency = Some("synthetic".to_string());
    Ok(ds)
}

/// Checks the seven construction identities of the `multi` dataset; used by
/// tests and the generator CLI. Returns the number of (t, identity) pairs
/// verified.
pub fn verify_multi_identities(ds: &Dataset, shifts: &[usize]) -> Result<usize> {
    let mut checked = 0usize;
    for t in 0..ds.rows() {
        for (k, &shift) in shifts.iter().enumerate() {
            if t >= shift {
                if ds.at(t, k + 1).to_bits() != ds.at(t - shift, 0).to_bits() {
                    return Err(Error::Data(format!("shift identity {k} broken at t={t}")));
                }
                checked += 1;
            }
        }
        let (s2, s3, s4, s5) = (ds.at(t, 1), ds.at(t, 2), ds.at(t, 3), ds.at(t, 4));
        if ds.at(t, 5).to_bits() != (0.5 * s2 + 0.5 * s3).to_bits() {
            return Err(Error::Data(format!("mean-of-two identity broken at t={t}")));
        }
        if ds.at(t, 6).to_bits() != (0.25 * s2 + 0.25 * s3 + 0.25 * s4 + 0.25 * s5).to_bits() {
            return Err(Error::Data(format!("mean-of-four identity broken at t={t}")));
        }
        if ds.at(t, 7).to_bits() != (s2 * s3).to_bits() {
            return Err(Error::Data(format!("product identity broken at t={t}")));
        }
        checked += 3;
    }
    Ok(checked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn toy_dataset() -> Dataset {
        // 3 rows x 2 series.
        Dataset::new(
            "toy",
            vec!["a".into(), "b".into()],
            3,
            vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0],
        )
        .unwrap()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("toy.csv");
        let mut ds = toy_dataset();
        ds.set(0, 0, 0.1 + 0.2); // a value without a short decimal form
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.rows(), 3);
        assert_eq!(back.cols(), 2);
        assert_eq!(back.column_names, ds.column_names);
        for t in 0..3 {
            for c in 0..2 {
                assert_eq!(back.at(t, c).to_bits(), ds.at(t, c).to_bits());
            }
        }
    }

    #[test]
    fn csv_timestamp_column_is_excluded() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("dated.csv");
        std::fs::write(&path, "date,a,b\n2020-01-01,1,10\n2020-01-02,2,20\n2020-01-03,3,30\n").unwrap();
        let ds = load_csv(&path).unwrap();
        assert_eq!(ds.cols(), 2);
        assert_eq!(ds.column_names, vec!["a", "b"]);
        assert_eq!(ds.at(2, 1), 30.0);
    }

    #[test]
    fn csv_non_numeric_cell_reports_row_and_column() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a,b\n1,2\n3,oops\n").unwrap();
        let err = load_csv(&path).unwrap_err().to_string();
        assert!(err.contains("row 3") && err.contains("`b`"), "{err}");
    }

    #[test]
    fn csv_empty_file_fails() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "").unwrap();
        assert!(load_csv(&path).is_err());
        std::fs::write(&path, "a,b\n").unwrap();
        assert!(load_csv(&path).is_err());
    }

    #[test]
    fn window_counts_and_boundaries() {
        // T == L_I + L_P with stride 1 -> exactly one window.
        let ws = make_windows((0, 10), 6, 4, 1).unwrap();
        assert_eq!(ws.len(), 1);

        // Boundary: last input index + 1 == first target index.
        let ds = generate_multi(50, &[1, 2, 3, 4], 0).unwrap();
        let ws = make_windows((0, 50), 8, 3, 1).unwrap();
        let w = ws.window(&ds, 5);
        assert_eq!(w.input[(w.len_input - 1) * w.channels], ds.at(5 + 7, 0));
        assert_eq!(w.target[0], ds.at(5 + 8, 0));
    }

    #[test]
    fn window_count_matches_enumeration_oracle() {
        let (t, l_i, l_p, stride) = (100usize, 24usize, 12usize, 3usize);
        let ws = make_windows((0, t), l_i, l_p, stride).unwrap();
        // Brute-force enumeration of valid starts.
        let mut expected = 0;
        let mut s = 0;
        while s + l_i + l_p <= t {
            expected += 1;
            s += stride;
        }
        assert_eq!(ws.len(), expected);
    }

    #[test]
    fn window_too_short_fails() {
        assert!(make_windows((0, 9), 6, 4, 1).is_err());
    }

    #[test]
    fn split_is_chronological() {
        let spec = SplitSpec::default();
        let [tr, va, te] = spec.ranges(1000);
        assert_eq!(tr, (0, 700));
        assert_eq!(va, (700, 800));
        assert_eq!(te, (800, 1000));
        assert!(tr.1 <= va.0 && va.1 <= te.0);
    }

    #[test]
    fn standardize_train_split_and_round_trip() {
        let mut ds = generate_multi(400, &[1, 2, 3, 4], 3).unwrap();
        let original = ds.clone();
        let range = SplitSpec::default().ranges(ds.rows())[0];
        let stats = TrainStats::fit(&ds, range).unwrap();
        stats.apply(&mut ds);

        for j in 0..ds.cols() {
            let n = (range.1 - range.0) as f64;
            let mean: f64 = (range.0..range.1).map(|t| ds.at(t, j)).sum::<f64>() / n;
            let var: f64 = (range.0..range.1).map(|t| ds.at(t, j).powi(2)).sum::<f64>() / n - mean * mean;
            assert!(mean.abs() <= 1e-10, "train mean {mean}");
            assert!((var.sqrt() - 1.0).abs() <= 1e-10, "train std {}", var.sqrt());
        }

        stats.invert(&mut ds);
        for t in 0..ds.rows() {
            for j in 0..ds.cols() {
                assert!((ds.at(t, j) - original.at(t, j)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn standardization_stats_come_from_train_only() {
        // A drifting series: recomputing stats on the val rows must disagree
        // with the train-fit stats, proving there is no leakage.
        let rows = 300usize;
        let values: Vec<f64> = (0..rows).flat_map(|t| vec![t as f64, (2 * t) as f64]).collect();
        let ds = Dataset::new("drift", vec!["a".into(), "b".into()], rows, values).unwrap();
        let [tr, va, _] = SplitSpec::default().ranges(rows);
        let train_stats = TrainStats::fit(&ds, tr).unwrap();
        let val_stats = TrainStats::fit(&ds, va).unwrap();
        assert!((train_stats.mean[0] - val_stats.mean[0]).abs() > 1.0);

        let mut standardized = ds.clone();
        train_stats.apply(&mut standardized);
        let val_mean: f64 =
            (va.0..va.1).map(|t| standardized.at(t, 0)).sum::<f64>() / (va.1 - va.0) as f64;
        assert!(val_mean.abs() > 0.5, "val columns should not be centered: {val_mean}");
    }

    #[test]
    fn constant_train_column_fails_with_name() {
        let ds = Dataset::new("c", vec!["flat".into()], 10, vec![5.0; 10]).unwrap();
        let err = TrainStats::fit(&ds, (0, 10)).unwrap_err().to_string();
        assert!(err.contains("flat"), "{err}");
    }

    #[test]
    fn multi_identities_hold_bitwise() {
        let shifts = [8, 16, 24, 48];
        let ds = generate_multi(2000, &shifts, 2024).unwrap();
        assert_eq!(ds.cols(), 8);
        assert_eq!(ds.rows(), 2000);
        verify_multi_identities(&ds, &shifts).unwrap();
    }

    #[test]
    fn multi_default_shift_identity() {
        let ds = generate_multi(1500, &MULTI_DEFAULT_SHIFTS, 7).unwrap();
        for t in 96..1500 {
            assert_eq!(ds.at(t, 1).to_bits(), ds.at(t - 96, 0).to_bits());
        }
    }

    #[test]
    fn multi_is_deterministic_per_seed() {
        let a = generate_multi(500, &[8, 16, 24, 48], 9).unwrap();
        let b = generate_multi(500, &[8, 16, 24, 48], 9).unwrap();
        let c = generate_multi(500, &[8, 16, 24, 48], 10).unwrap();
        for t in 0..500 {
            assert_eq!(a.at(t, 0).to_bits(), b.at(t, 0).to_bits());
        }
        assert!((0..500).any(|t| a.at(t, 0) != c.at(t, 0)));
    }

    #[test]
    fn multi_rejects_bad_shifts() {
        assert!(generate_multi(100, &[8, 16, 24], 0).is_err());
        assert!(generate_multi(100, &[8, 16, 24, 2000], 0).is_err());
        assert!(generate_multi(100, &[0, 16, 24, 48], 0).is_err());
    }
}
