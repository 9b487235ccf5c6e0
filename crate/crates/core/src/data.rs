use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major n x m matrix of observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMatrix {
    n: usize,
    m: usize,
    values: Vec<f64>,
}

impl DataMatrix {
    pub fn new(n: usize, m: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * m {
            return Err(Error::DimensionMismatch {
                expected: n * m,
                got: values.len(),
            });
        }
        Ok(DataMatrix { n, m, values })
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        DataMatrix {
            n,
            m,
            values: vec![0.0; n * m],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.first().map_or(0, |r| r.len());
        let mut values = Vec::with_capacity(rows.len() * m);
        for r in rows {
            if r.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    got: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        Ok(DataMatrix {
            n: rows.len(),
            m,
            values,
        })
    }

    pub fn from_columns(cols: &[Vec<f64>]) -> Result<Self> {
        let m = cols.len();
        let n = cols.first().map_or(0, |c| c.len());
        if cols.iter().any(|c| c.len() != n) {
            return Err(Error::param("columns of unequal length"));
        }
        let mut values = Vec::with_capacity(n * m);
        for i in 0..n {
            for c in cols {
                values.push(c[i]);
            }
        }
        Ok(DataMatrix { n, m, values })
    }

    /// Numeric CSV with a header row of column names.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let m = rdr
            .headers()
            .map_err(|e| csv_line_error(&e))?
            .len();
        if m == 0 {
            return Err(Error::Empty("no header row".into()));
        }
        let mut values = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| csv_line_error(&e))?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            for (j, f) in rec.iter().enumerate() {
                match f.parse::<f64>() {
                    Ok(v) if v.is_finite() => values.push(v),
                    _ => {
                        return Err(Error::Data {
                            line,
                            message: format!("column {}: '{f}' is not a finite number", j + 1),
                        })
                    }
                }
            }
        }
        if values.is_empty() {
            return Err(Error::Empty("no observations after the header".into()));
        }
        Ok(DataMatrix {
            n: values.len() / m,
            m,
            values,
        })
    }

    pub fn to_csv<W: Write>(&self, names: &[String], writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(names)?;
        for r in self.rows() {
            w.write_record(r.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.m
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.m..(i + 1) * self.m]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.m.max(1))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.values[i * self.m + j]).collect()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.m + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> DataMatrix {
        DataMatrix {
            n: end - start,
            m: self.m,
            values: self.values[start * self.m..end * self.m].to_vec(),
        }
    }

    /// Keep the listed columns, in order.
    pub fn select_columns(&self, cols: &[usize]) -> DataMatrix {
        let mut values = Vec::with_capacity(self.n * cols.len());
        for i in 0..self.n {
            for &c in cols {
                values.push(self.get(i, c));
            }
        }
        DataMatrix {
            n: self.n,
            m: cols.len(),
            values,
        }
    }
}

/// Average ranks (1-based) with ties sharing the mean rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Sample Spearman rank correlation.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

fn csv_line_error(e: &csv::Error) -> Error {
    Error::Data {
        line: e.position().map_or(0, |p| p.line() as usize),
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_with_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_monotone() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| v.powi(3)).collect();
        assert!((spearman(&x, &y) - 1.0).abs() < 1e-14);
        let z: Vec<f64> = x.iter().map(|v| -v.exp()).collect();
        assert!((spearman(&x, &z) + 1.0).abs() < 1e-14);
    }

    #[test]
    fn columns_and_rows_agree() {
        let d = DataMatrix::from_columns(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(d.row(1), &[2.0, 4.0]);
        assert_eq!(d.column(1), vec![3.0, 4.0]);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let d = DataMatrix::from_rows(&[vec![0.25, 1.5], vec![3.0, -0.1]]).unwrap();
        let mut buf = Vec::new();
        d.to_csv(&["a".into(), "b".into()], &mut buf).unwrap();
        assert_eq!(DataMatrix::from_csv(buf.as_slice()).unwrap(), d);
        assert!(matches!(
            DataMatrix::from_csv("a,b\n1,2\n3,x\n".as_bytes()),
            Err(Error::Data { line: 3, .. })
        ));
        assert!(matches!(
            DataMatrix::from_csv("a,b\n1,2\n3\n".as_bytes()),
            Err(Error::Data { line: 3, .. })
        ));
        assert!(matches!(DataMatrix::from_csv("a,b\n".as_bytes()), Err(Error::Empty(_))));
    }
}
