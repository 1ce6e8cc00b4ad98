//! Synthetic 2-d classification datasets and their CSV representation.
//!
//! `generate` writes two files: the requested path gets `n` points (callers
//! split those in half for train/validation, and the interleaved labels keep
//! both halves balanced), and a sibling `<stem>_test.csv` gets an extra
//! `ceil(n/2)` points from the same process for held-out evaluation.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use dnas_core::error::{Error, Result};
use dnas_core::supernet::Batch;
use dnas_core::tape::Tensor;
use dnas_core::util::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    /// Two interleaved half-circles; not linearly separable.
    Moons,
    /// `k` Gaussian clusters centered on a radius-4 circle.
    Blobs,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moons" => Ok(DatasetKind::Moons),
            "blobs" => Ok(DatasetKind::Blobs),
            other => Err(Error::InvalidArg {
                ctx: "dataset kind",
                msg: format!("unknown kind {other:?}; expected moons or blobs"),
            }),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetKind::Moons => write!(f, "moons"),
            DatasetKind::Blobs => write!(f, "blobs"),
        }
    }
}

pub struct GeneratedPaths {
    pub data: PathBuf,
    pub test: PathBuf,
}

/// Sibling held-out-split path for a dataset file: `foo.csv -> foo_test.csv`.
pub fn test_path_for(data: &Path) -> Result<PathBuf> {
    let stem = data
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or(Error::InvalidArg {
            ctx: "dataset path",
            msg: "path has no usable file stem".into(),
        })?;
    Ok(data.with_file_name(format!("{stem}_test.csv")))
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn raw_points(
    kind: DatasetKind,
    total: usize,
    classes: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<(f64, f64, usize)> {
    let mut out = Vec::with_capacity(total);
    match kind {
        DatasetKind::Moons => {
            for i in 0..total {
                let label = i % 2;
                // Random arc position, so any contiguous slice of the rows
                // covers the whole arc in distribution.
                let t = std::f64::consts::PI * rng.gen::<f64>();
                let (mut x, mut y) = if label == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                x += noise * gauss(rng);
                y += noise * gauss(rng);
                out.push((x, y, label));
            }
        }
        DatasetKind::Blobs => {
            for i in 0..total {
                let label = i % classes;
                let angle = 2.0 * std::f64::consts::PI * label as f64 / classes as f64;
                let x = 4.0 * angle.cos() + noise * gauss(rng);
                let y = 4.0 * angle.sin() + noise * gauss(rng);
                out.push((x, y, label));
            }
        }
    }
    out
}

fn write_csv(path: &Path, points: &[(f64, f64, usize)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["x1", "x2", "label"]).map_err(csv_err)?;
    for (x, y, label) in points {
        w.write_record([x.to_string(), y.to_string(), label.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArg {
            ctx: "csv",
            msg: format!("{other:?}"),
        },
    }
}

/// Generates a dataset and its held-out sibling. Labels are assigned
/// round-robin so any prefix split stays class-balanced.
pub fn generate(
    kind: DatasetKind,
    n: usize,
    classes: usize,
    noise: f64,
    seed: u64,
    out: &Path,
) -> Result<GeneratedPaths> {
    if n < 4 {
        return Err(Error::InvalidArg {
            ctx: "dataset",
            msg: format!("need at least 4 points, got {n}"),
        });
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::InvalidArg {
            ctx: "dataset",
            msg: format!("noise must be finite and non-negative, got {noise}"),
        });
    }
    match kind {
        DatasetKind::Moons if classes != 2 => {
            return Err(Error::InvalidArg {
                ctx: "dataset",
                msg: format!("moons is a 2-class problem, got {classes} classes"),
            });
        }
        DatasetKind::Blobs if classes < 2 => {
            return Err(Error::InvalidArg {
                ctx: "dataset",
                msg: format!("blobs needs at least 2 classes, got {classes}"),
            });
        }
        _ => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "dataset"));
    let extra = n.div_ceil(2);
    let points = raw_points(kind, n + extra, classes, noise, &mut rng);
    let test = test_path_for(out)?;
    write_csv(out, &points[..n])?;
    write_csv(&test, &points[n..])?;
    Ok(GeneratedPaths {
        data: out.to_path_buf(),
        test,
    })
}

/// Loads a dataset CSV into one batch. The class count is the largest label
/// plus one.
pub fn load(path: &Path) -> Result<Batch> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        if record.len() != 3 {
            return Err(Error::Parse {
                ctx: format!("{}: expected 3 columns, got {}", path.display(), record.len()),
            });
        }
        let x: f64 = record[0].parse().map_err(|_| Error::Parse {
            ctx: format!("{}: bad x1 value {:?}", path.display(), &record[0]),
        })?;
        let y: f64 = record[1].parse().map_err(|_| Error::Parse {
            ctx: format!("{}: bad x2 value {:?}", path.display(), &record[1]),
        })?;
        let label: usize = record[2].parse().map_err(|_| Error::Parse {
            ctx: format!("{}: bad label {:?}", path.display(), &record[2]),
        })?;
        inputs.push(x);
        inputs.push(y);
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::EmptyData { ctx: "dataset file" });
    }
    let classes = labels.iter().max().unwrap() + 1;
    if classes < 2 {
        return Err(Error::InvalidArg {
            ctx: "dataset",
            msg: "file contains a single class".into(),
        });
    }
    let rows = labels.len();
    Batch::new(Tensor::matrix(rows, 2, inputs)?, labels, classes)
}

/// First half for training, second half for validation; round-robin labels
/// keep both halves balanced.
pub fn split_half(batch: &Batch) -> Result<(Batch, Batch)> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::InvalidArg {
            ctx: "dataset split",
            msg: "need at least 2 rows to split".into(),
        });
    }
    let mid = n / 2;
    let train_rows: Vec<usize> = (0..mid).collect();
    let val_rows: Vec<usize> = (mid..n).collect();
    Ok((batch.subset(&train_rows)?, batch.subset(&val_rows)?))
}
