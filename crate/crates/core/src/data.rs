//! In-memory datasets and the dataset CSV format.
//!
//! CSV header: `id,y,a,x1,...,xp[,delta_star,prop_true]`.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Row-major `n × p` covariate matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    values: Vec<f64>,
    p: usize,
}

impl Covariates {
    pub fn new(values: Vec<f64>, p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::BadShape("covariate dimension must be at least 1".into()));
        }
        if values.len() % p != 0 {
            return Err(Error::BadShape(format!(
                "{} values do not fill rows of width {p}",
                values.len()
            )));
        }
        Ok(Self { values, p })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.first().map(Vec::len).ok_or(Error::EmptySample)?;
        if let Some(bad) = rows.iter().find(|r| r.len() != p) {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: bad.len(),
            });
        }
        Self::new(rows.concat(), p)
    }

    pub fn nrows(&self) -> usize {
        self.values.len() / self.p
    }

    pub fn ncols(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.p..(i + 1) * self.p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.p)
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.rows().map(move |r| r[j])
    }

    pub fn select(&self, indices: &[usize]) -> Covariates {
        let mut values = Vec::with_capacity(indices.len() * self.p);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Covariates { values, p: self.p }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Outcomes, binary treatments and covariates, optionally with known truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub covariates: Covariates,
    pub treatments: Vec<u8>,
    pub outcomes: Vec<f64>,
    pub true_cte: Option<Vec<f64>>,
    pub true_propensity: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(covariates: Covariates, treatments: Vec<u8>, outcomes: Vec<f64>) -> Result<Self> {
        let n = covariates.nrows();
        for len in [treatments.len(), outcomes.len()] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: len,
                });
            }
        }
        if treatments.iter().any(|&a| a > 1) {
            return Err(Error::BadShape("treatments must be 0 or 1".into()));
        }
        Ok(Self {
            covariates,
            treatments,
            outcomes,
            true_cte: None,
            true_propensity: None,
        })
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let pick = |v: &Vec<f64>| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Dataset {
            covariates: self.covariates.select(indices),
            treatments: indices.iter().map(|&i| self.treatments[i]).collect(),
            outcomes: pick(&self.outcomes),
            true_cte: self.true_cte.as_ref().map(pick),
            true_propensity: self.true_propensity.as_ref().map(pick),
        }
    }

    /// Writes the dataset CSV. Truth columns are written only when present and requested.
    pub fn write_csv<W: Write>(&self, out: W, with_truth: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let p = self.dim();
        let truth = match (&self.true_cte, &self.true_propensity) {
            (Some(c), Some(pr)) if with_truth => Some((c, pr)),
            _ => None,
        };
        let mut header = vec!["id".to_string(), "y".into(), "a".into()];
        header.extend((1..=p).map(|j| format!("x{j}")));
        if truth.is_some() {
            header.push("delta_star".into());
            header.push("prop_true".into());
        }
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for i in 0..self.len() {
            record.clear();
            record.push((i + 1).to_string());
            record.push(format_real(self.outcomes[i]));
            record.push(self.treatments[i].to_string());
            record.extend(self.covariates.row(i).iter().map(|&x| format_real(x)));
            if let Some((c, pr)) = truth {
                record.push(format_real(c[i]));
                record.push(format_real(pr[i]));
            }
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a dataset CSV; `delta_star` and `prop_true` are picked up when present.
    pub fn read_csv<R: Read>(input: R) -> Result<Dataset> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let header = r.headers()?.clone();
        let find = |name: &str| header.iter().position(|h| h == name);
        let y_col = find("y").ok_or_else(|| Error::BadShape("missing column `y`".into()))?;
        let a_col = find("a").ok_or_else(|| Error::BadShape("missing column `a`".into()))?;
        let mut x_cols = Vec::new();
        while let Some(c) = find(&format!("x{}", x_cols.len() + 1)) {
            x_cols.push(c);
        }
        if x_cols.is_empty() {
            return Err(Error::BadShape("no covariate columns x1..xp".into()));
        }
        let cte_col = find("delta_star");
        let prop_col = find("prop_true");

        let mut xs = Vec::new();
        let mut treatments = Vec::new();
        let mut outcomes = Vec::new();
        let mut cte = Vec::new();
        let mut prop = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let field = |c: usize| -> Result<f64> {
                let raw = rec.get(c).unwrap_or("");
                raw.parse::<f64>()
                    .map_err(|_| Error::BadShape(format!("row {}: cannot parse `{raw}` as a number", line + 1)))
            };
            outcomes.push(field(y_col)?);
            let a = field(a_col)?;
            if a != 0.0 && a != 1.0 {
                return Err(Error::BadShape(format!("row {}: treatment must be 0 or 1", line + 1)));
            }
            treatments.push(a as u8);
            for &c in &x_cols {
                xs.push(field(c)?);
            }
            if let Some(c) = cte_col {
                cte.push(field(c)?);
            }
            if let Some(c) = prop_col {
                prop.push(field(c)?);
            }
        }
        if outcomes.is_empty() {
            return Err(Error::EmptySample);
        }
        let mut ds = Dataset::new(Covariates::new(xs, x_cols.len())?, treatments, outcomes)?;
        if cte_col.is_some() {
            ds.true_cte = Some(cte);
        }
        if prop_col.is_some() {
            ds.true_propensity = Some(prop);
        }
        Ok(ds)
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_real(x: f64) -> String {
    format!("{x}")
}

/// Fixed 17-significant-digit rendering used in wire transcripts.
pub fn format_real17(x: f64) -> String {
    format!("{x:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let cov = Covariates::from_rows(&[vec![0.1, -0.2], vec![0.5, 0.25], vec![-0.75, 1.0 / 3.0]]).unwrap();
        let mut ds = Dataset::new(cov, vec![1, 0, 1], vec![2.5, -1.0, 0.125]).unwrap();
        ds.true_cte = Some(vec![0.3, -0.1, 0.0]);
        ds.true_propensity = Some(vec![0.5, 0.5, 0.5]);
        ds
    }

    #[test]
    fn csv_round_trip_preserves_values() {
        let ds = tiny();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf, true).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("id,y,a,x1,x2,delta_star,prop_true\n"));
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn truth_columns_are_optional() {
        let ds = tiny();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf, false).unwrap();
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        assert!(back.true_cte.is_none() && back.true_propensity.is_none());
        assert_eq!(back.outcomes, ds.outcomes);
    }

    #[test]
    fn rejects_bad_treatment() {
        let text = "id,y,a,x1\n1,0.5,2,0.1\n";
        assert!(matches!(Dataset::read_csv(text.as_bytes()), Err(Error::BadShape(_))));
    }

    #[test]
    fn shape_checks() {
        assert!(Covariates::new(vec![1.0, 2.0, 3.0], 2).is_err());
        let cov = Covariates::new(vec![1.0, 2.0], 1).unwrap();
        assert!(Dataset::new(cov, vec![0], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn seventeen_digit_rendering() {
        assert_eq!(format_real17(0.1), "1.0000000000000001e-1");
        assert_eq!(format_real17(-2.0), "-2.0000000000000000e0");
    }
}
