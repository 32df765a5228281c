//! Dataset plumbing for the benchmark harness and the CLI: synthetic blob
//! generation, CSV ingest/export, feature standardization and stratified
//! fold splitting.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Dataset {
    pub points: Vec<DVector<f64>>,
    pub labels: Vec<i64>,
    pub feature_names: Vec<String>,
    pub label_name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.len())
    }

    pub fn classes(&self) -> Vec<i64> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// Gaussian class blobs with per-class anisotropic axis scales. Centers are
/// re-drawn until they are pairwise at least `separation` apart, axis
/// standard deviations are drawn from [0.5, 1.5]; both are seeded, so the
/// same spec always yields the same data. The anisotropy matters: it gives
/// per-cluster whitening metrics that genuinely differ, which is what makes
/// local-metric models non-trivial.
pub fn synthetic_blobs(
    classes: usize,
    dim: usize,
    n: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::input("need at least 2 classes"));
    }
    if dim == 0 || n < classes {
        return Err(Error::input("need a positive dimension and n >= classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;

    let mut centers: Vec<DVector<f64>> = Vec::new();
    let spread = separation.max(1e-6);
    'outer: for _attempt in 0..10_000 {
        let c = DVector::from_fn(dim, |_, _| {
            let v: f64 = normal.sample(&mut rng);
            v * spread
        });
        for existing in &centers {
            if (existing - &c).norm() < separation {
                continue 'outer;
            }
        }
        centers.push(c);
        if centers.len() == classes {
            break;
        }
    }
    if centers.len() < classes {
        return Err(Error::input(
            "could not place class centers at the requested separation",
        ));
    }

    let scales: Vec<DVector<f64>> = (0..classes)
        .map(|_| DVector::from_fn(dim, |_, _| 0.5 + rng.random::<f64>()))
        .collect();

    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let noise = DVector::from_fn(dim, |j, _| {
            let v: f64 = normal.sample(&mut rng);
            v * scales[class][j]
        });
        points.push(&centers[class] + noise);
        labels.push(class as i64);
    }

    Ok(Dataset {
        points,
        labels,
        feature_names: (0..dim).map(|j| format!("f{j}")).collect(),
        label_name: "label".to_string(),
    })
}

/// Read a rectangular numeric CSV with a header row. `label_column` names
/// the integer-coded label column; parse failures report the data row, the
/// file line and the column name.
pub fn ingest_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::parse(format!("{}: header: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| {
            Error::parse(format!(
                "{}: no column named \"{label_column}\" in header {:?}",
                path.display(),
                headers
            ))
        })?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_idx)
        .map(|(_, h)| h.clone())
        .collect();

    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let row = row_idx + 1; // 1-based data row
        let line = row_idx + 2; // header occupies line 1
        let record = record.map_err(|e| {
            Error::parse(format!("{}: row {row} (line {line}): {e}", path.display()))
        })?;
        if record.len() != headers.len() {
            return Err(Error::parse(format!(
                "{}: row {row} (line {line}): expected {} fields, got {}",
                path.display(),
                headers.len(),
                record.len()
            )));
        }
        let mut features = Vec::with_capacity(headers.len() - 1);
        let mut label = None;
        for (col, cell) in record.iter().enumerate() {
            if col == label_idx {
                let v: i64 = cell.parse().map_err(|_| {
                    Error::parse(format!(
                        "{}: row {row} (line {line}), column \"{}\": cannot parse \"{cell}\" as an integer label",
                        path.display(),
                        headers[col]
                    ))
                })?;
                label = Some(v);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::parse(format!(
                        "{}: row {row} (line {line}), column \"{}\": cannot parse \"{cell}\" as a number",
                        path.display(),
                        headers[col]
                    ))
                })?;
                if !v.is_finite() {
                    return Err(Error::parse(format!(
                        "{}: row {row} (line {line}), column \"{}\": non-finite value",
                        path.display(),
                        headers[col]
                    )));
                }
                features.push(v);
            }
        }
        points.push(DVector::from_vec(features));
        labels.push(label.expect("label column visited"));
    }
    if points.is_empty() {
        return Err(Error::parse(format!(
            "{}: no data rows",
            path.display()
        )));
    }

    Ok(Dataset {
        points,
        labels,
        feature_names,
        label_name: label_column.to_string(),
    })
}

/// Write a dataset back to CSV with round-trip-exact floats.
pub fn write_csv(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let mut out = String::new();
    out.push_str(&ds.feature_names.join(","));
    out.push(',');
    out.push_str(&ds.label_name);
    out.push('\n');
    for (p, l) in ds.points.iter().zip(&ds.labels) {
        let fields: Vec<String> = p.iter().map(|v| format!("{v}")).collect();
        out.push_str(&fields.join(","));
        out.push(',');
        out.push_str(&l.to_string());
        out.push('\n');
    }
    fs::write(path.as_ref(), out)?;
    Ok(())
}

/// Per-feature z-scoring fitted on an explicit index subset, so test folds
/// can never leak into the statistics.
#[derive(Clone, Debug)]
pub struct Standardizer {
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
}

impl Standardizer {
    pub fn fit(points: &[DVector<f64>], indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::input("cannot standardize on an empty index set"));
        }
        let dim = points[indices[0]].len();
        let mut mean = DVector::zeros(dim);
        for &i in indices {
            mean += &points[i];
        }
        mean /= indices.len() as f64;
        let mut var = DVector::zeros(dim);
        for &i in indices {
            let d = &points[i] - &mean;
            var += d.component_mul(&d);
        }
        var /= indices.len() as f64;
        let std = var.map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 });
        Ok(Standardizer { mean, std })
    }

    pub fn transform(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |j, _| (x[j] - self.mean[j]) / self.std[j])
    }

    pub fn transform_subset(&self, points: &[DVector<f64>], indices: &[usize]) -> Vec<DVector<f64>> {
        indices.iter().map(|&i| self.transform(&points[i])).collect()
    }
}

/// Stratified k-fold split: per class, shuffled indices are dealt
/// round-robin to the folds. Returns the test-index set of each fold.
pub fn stratified_folds(labels: &[i64], folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::input("need at least 2 folds"));
    }
    let mut classes: Vec<i64> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Vec::new(); folds];
    for class in classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < folds {
            return Err(Error::input(format!(
                "class {class} has {} points, fewer than {folds} folds",
                idx.len()
            )));
        }
        // Fisher-Yates.
        for i in (1..idx.len()).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        for (pos, i) in idx.into_iter().enumerate() {
            out[pos % folds].push(i);
        }
    }
    for fold in &mut out {
        fold.sort_unstable();
    }
    Ok(out)
}

/// Complement of a fold: all indices not in `test`.
pub fn train_indices(n: usize, test: &[usize]) -> Vec<usize> {
    let mut in_test = vec![false; n];
    for &i in test {
        in_test[i] = true;
    }
    (0..n).filter(|&i| !in_test[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn blobs_are_deterministic_and_separated() {
        let a = synthetic_blobs(3, 2, 60, 6.0, 9).unwrap();
        let b = synthetic_blobs(3, 2, 60, 6.0, 9).unwrap();
        assert_eq!(a.len(), 60);
        for (p, q) in a.points.iter().zip(&b.points) {
            assert_eq!(p, q);
        }
        assert_eq!(a.classes(), vec![0, 1, 2]);
    }

    #[test]
    fn csv_ingest_exact_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("three.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "a,b,label").unwrap();
        writeln!(f, "1.5,-2.25,0").unwrap();
        writeln!(f, "0.125,3.0,1").unwrap();
        writeln!(f, "7.0,0.0,0").unwrap();
        drop(f);
        let ds = ingest_csv(&path, "label").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.points[0], DVector::from_vec(vec![1.5, -2.25]));
        assert_eq!(ds.points[1], DVector::from_vec(vec![0.125, 3.0]));
        assert_eq!(ds.labels, vec![0, 1, 0]);
        assert_eq!(ds.feature_names, vec!["a", "b"]);
    }

    #[test]
    fn bad_cell_names_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "TotalBsmt,GrLivA,label").unwrap();
        writeln!(f, "1.0,2.0,0").unwrap();
        writeln!(f, "3.0,oops,1").unwrap();
        drop(f);
        let err = ingest_csv(&path, "label").unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
        assert!(err.contains("GrLivA"), "{err}");
    }

    #[test]
    fn missing_label_column_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nolabel.csv");
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        let err = ingest_csv(&path, "label").unwrap_err().to_string();
        assert!(err.contains("no column named"), "{err}");
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let ds = synthetic_blobs(2, 3, 40, 4.0, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roundtrip.csv");
        write_csv(&path, &ds).unwrap();
        let back = ingest_csv(&path, "label").unwrap();
        assert_eq!(ds.labels, back.labels);
        for (p, q) in ds.points.iter().zip(&back.points) {
            assert_eq!(p, q, "floats must survive the roundtrip bit-exactly");
        }
    }

    #[test]
    fn standardizer_uses_only_the_given_indices() {
        let points = vec![
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![3.0]),
            DVector::from_vec(vec![1000.0]), // excluded
        ];
        let s = Standardizer::fit(&points, &[0, 1]).unwrap();
        assert_eq!(s.mean[0], 2.0);
        assert_eq!(s.std[0], 1.0);
    }

    #[test]
    fn constant_feature_keeps_unit_scale() {
        let points = vec![DVector::from_vec(vec![5.0]), DVector::from_vec(vec![5.0])];
        let s = Standardizer::fit(&points, &[0, 1]).unwrap();
        assert_eq!(s.std[0], 1.0);
        assert_eq!(s.transform(&points[0])[0], 0.0);
    }

    #[test]
    fn folds_partition_and_balance_classes() {
        let ds = synthetic_blobs(3, 2, 90, 5.0, 11).unwrap();
        let folds = stratified_folds(&ds.labels, 4, 0).unwrap();
        let mut seen = vec![false; 90];
        for fold in &folds {
            for &i in fold {
                assert!(!seen[i], "index {i} in two folds");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        for class in 0..3_i64 {
            let counts: Vec<usize> = folds
                .iter()
                .map(|f| f.iter().filter(|&&i| ds.labels[i] == class).count())
                .collect();
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "class {class} unbalanced: {counts:?}");
        }
    }

    #[test]
    fn train_indices_complement_the_fold() {
        let t = train_indices(5, &[1, 3]);
        assert_eq!(t, vec![0, 2, 4]);
    }
}
