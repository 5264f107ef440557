//! Square similarity matrix storage plus CSV and heatmap serialization.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::SimilarityError;
use crate::scalar::{s, Scalar};

/// Row-major square matrix of pairwise scores in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<T: Scalar> {
    n: usize,
    values: Vec<T>,
}

impl<T: Scalar> SimilarityMatrix<T> {
    pub fn new(n: usize, values: Vec<T>) -> Result<Self, SimilarityError> {
        if values.len() != n * n {
            return Err(SimilarityError::SizeMismatch {
                width: n as u32,
                height: n as u32,
                len: values.len(),
            });
        }
        let m = SimilarityMatrix { n, values };
        m.validate()?;
        Ok(m)
    }

    pub fn zeros(n: usize) -> Self {
        SimilarityMatrix {
            n,
            values: vec![T::zero(); n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: T) {
        self.values[i * self.n + j] = value;
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    /// All entries must be finite and inside `[0, 1]`.
    pub fn validate(&self) -> Result<(), SimilarityError> {
        for i in 0..self.n {
            for j in 0..self.n {
                let v = self.get(i, j);
                if !(v.is_finite() && v >= T::zero() && v <= T::one()) {
                    return Err(SimilarityError::EntryOutOfRange {
                        i,
                        j,
                        value: v.to_f64_lossy(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Largest `|s(i, j) - s(j, i)|`. Overlap is directed, so asymmetry is
    /// expected; this reports its magnitude rather than enforcing a bound.
    pub fn symmetry_error(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }
}

/// Writes one row per line, comma separated, nine significant digits.
pub fn write_matrix_csv<T: Scalar>(
    out: &mut impl Write,
    m: &SimilarityMatrix<T>,
) -> std::io::Result<()> {
    for i in 0..m.len() {
        let row: Vec<String> = m
            .row(i)
            .iter()
            .map(|v| format!("{:.8e}", v.to_f64_lossy()))
            .collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_matrix_csv<T: Scalar>(
    input: impl BufRead,
    source_name: &str,
) -> Result<SimilarityMatrix<T>, SimilarityError> {
    let parse_err = |line: usize, reason: String| SimilarityError::Parse {
        source_name: source_name.to_string(),
        line,
        reason,
    };
    let mut rows: Vec<Vec<T>> = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let body = line.trim();
        if body.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for field in body.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|e| parse_err(line_no, format!("bad float {field:?}: {e}")))?;
            row.push(s::<T>(v));
        }
        rows.push(row);
    }
    let n = rows.len();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(SimilarityError::NotSquare {
                rows: n,
                row: i,
                cols: row.len(),
            });
        }
    }
    SimilarityMatrix::new(n, rows.concat())
}

pub fn save_matrix_csv<T: Scalar>(
    path: impl AsRef<Path>,
    m: &SimilarityMatrix<T>,
) -> Result<(), SimilarityError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_matrix_csv(&mut out, m)?;
    out.flush()?;
    Ok(())
}

pub fn load_matrix_csv<T: Scalar>(
    path: impl AsRef<Path>,
) -> Result<SimilarityMatrix<T>, SimilarityError> {
    let path = path.as_ref();
    let file = File::open(path)?;
    read_matrix_csv(BufReader::new(file), &path.display().to_string())
}

/// 8-bit grayscale heatmap: pixel = `round(255 * clamp(s, 0, 1))`.
pub fn write_matrix_pgm<T: Scalar>(
    out: &mut impl Write,
    m: &SimilarityMatrix<T>,
) -> std::io::Result<()> {
    write!(out, "P5\n{} {}\n255\n", m.len(), m.len())?;
    let bytes: Vec<u8> = m
        .values()
        .iter()
        .map(|&v| {
            let clamped = v.to_f64_lossy().clamp(0.0, 1.0);
            (clamped * 255.0).round() as u8
        })
        .collect();
    out.write_all(&bytes)
}

pub fn save_matrix_pgm<T: Scalar>(
    path: impl AsRef<Path>,
    m: &SimilarityMatrix<T>,
) -> Result<(), SimilarityError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_matrix_pgm(&mut out, m)?;
    out.flush()?;
    Ok(())
}
