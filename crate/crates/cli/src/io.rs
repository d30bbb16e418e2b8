//! Delimited tables in, tables and JSON out.

use std::path::Path;

use mixlr::em::StepFlags;
use mixlr::netgraph::ExpressionMatrix;
use mixlr::{EmFit, MlrDataset, Responsibilities, ThetaParams};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// A numeric table with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    /// Row-major.
    pub values: Vec<f64>,
    pub rows: usize,
}

impl Table {
    pub fn cols(&self) -> usize {
        self.header.len()
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.rows).map(move |r| self.values[r * self.cols() + c])
    }
}

/// Tab when the header has tabs and no commas, comma otherwise.
fn sniff_delimiter(bytes: &[u8]) -> u8 {
    let first = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
    if first.contains(&b'\t') && !first.contains(&b',') {
        b'\t'
    } else {
        b','
    }
}

pub fn parse_table(bytes: &[u8], origin: &str) -> Result<Table, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(sniff_delimiter(bytes))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(bytes);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::input(format!("{origin}: line 1: {e}")))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(CliError::input(format!("{origin}: line 1: empty header")));
    }
    if let Some(c) = header.iter().position(String::is_empty) {
        return Err(CliError::input(format!("{origin}: line 1, column {}: empty column name", c + 1)));
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            CliError::input(format!("{origin}: line {line}: {e}"))
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != header.len() {
            return Err(CliError::input(format!(
                "{origin}: line {line}: dimension mismatch, {} fields but the header has {}",
                rec.len(),
                header.len()
            )));
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                CliError::input(format!("{origin}: line {line}, column {}: cannot parse {field:?} as a number", c + 1))
            })?;
            if !v.is_finite() {
                return Err(CliError::input(format!("{origin}: line {line}, column {}: non-finite value {field:?}", c + 1)));
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(CliError::input(format!("{origin}: no data rows")));
    }
    Ok(Table { header, values, rows })
}

/// Response column `y`, covariates in file order.
pub fn dataset_from_table(t: &Table, origin: &str) -> Result<(MlrDataset, Vec<String>), CliError> {
    let ys: Vec<usize> = (0..t.cols()).filter(|&c| t.header[c] == "y").collect();
    let yc = match ys.as_slice() {
        [c] => *c,
        [] => return Err(CliError::input(format!("{origin}: no column named y"))),
        _ => return Err(CliError::input(format!("{origin}: {} columns named y", ys.len()))),
    };
    let xcols: Vec<usize> = (0..t.cols()).filter(|&c| c != yc).collect();
    if xcols.is_empty() {
        return Err(CliError::input(format!("{origin}: no covariate columns")));
    }
    let x = DMatrix::from_fn(t.rows, xcols.len(), |r, c| t.values[r * t.cols() + xcols[c]]);
    let y = DVector::from_iterator(t.rows, t.column(yc));
    let names = xcols.iter().map(|&c| t.header[c].clone()).collect();
    Ok((MlrDataset::new(x, y)?, names))
}

pub fn expression_from_table(t: &Table) -> Result<ExpressionMatrix, CliError> {
    let m = DMatrix::from_fn(t.rows, t.cols(), |r, c| t.values[r * t.cols() + c]);
    Ok(ExpressionMatrix::new(m, t.header.clone())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaRecord {
    pub omega: f64,
    pub sigma2: f64,
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
}

impl ThetaRecord {
    pub fn of(t: &ThetaParams) -> Self {
        Self { omega: t.omega, sigma2: t.sigma2, beta1: t.beta1.as_slice().to_vec(), beta2: t.beta2.as_slice().to_vec() }
    }

    pub fn theta(&self) -> Result<ThetaParams, CliError> {
        Ok(ThetaParams::new(
            self.omega,
            DVector::from_column_slice(&self.beta1),
            DVector::from_column_slice(&self.beta2),
            self.sigma2,
        )?)
    }
}

/// Contents of `fit.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    /// Covariate names, in coefficient order.
    pub names: Vec<String>,
    pub n: usize,
    pub p: usize,
    #[serde(flatten)]
    pub theta: ThetaRecord,
    pub init: ThetaRecord,
    pub lambda_path: Vec<f64>,
    pub n_t: usize,
    pub subset_indices: Vec<Vec<usize>>,
    /// Final M-step weights on the working sample.
    pub gamma: Vec<f64>,
    pub flags: StepFlags,
}

impl FitRecord {
    pub fn new(names: Vec<String>, data: &MlrDataset, init: &ThetaParams, fit: &EmFit) -> Self {
        Self {
            names,
            n: data.n(),
            p: data.p(),
            theta: ThetaRecord::of(&fit.theta),
            init: ThetaRecord::of(init),
            lambda_path: fit.lambda_path.clone(),
            n_t: fit.n_t,
            subset_indices: fit.subset_indices.clone(),
            gamma: fit.gamma.gamma().as_slice().to_vec(),
            flags: fit.flags,
        }
    }

    pub fn parse(bytes: &[u8], origin: &str) -> Result<Self, CliError> {
        serde_json::from_slice(bytes).map_err(|e| CliError::input(format!("{origin}: {e}")))
    }

    /// The fit as the library sees it, checked against `data`.
    pub fn em_fit(&self, data: &MlrDataset, origin: &str) -> Result<EmFit, CliError> {
        let mismatch = |what: String| CliError::input(format!("{origin}: dimension mismatch, {what}"));
        if self.p != data.p() || self.theta.beta1.len() != self.p || self.theta.beta2.len() != self.p {
            return Err(mismatch(format!("fit has p = {} but the dataset has {} covariates", self.p, data.p())));
        }
        if self.n != data.n() {
            return Err(mismatch(format!("fit has n = {} but the dataset has {} rows", self.n, data.n())));
        }
        if self.gamma.len() != self.n_t {
            return Err(mismatch(format!("{} responsibilities for n_t = {}", self.gamma.len(), self.n_t)));
        }
        if let Some(last) = self.subset_indices.last() {
            if last.len() != self.n_t || last.iter().any(|&i| i >= data.n()) {
                return Err(mismatch("working subset does not fit the dataset".into()));
            }
        } else if self.n_t != data.n() {
            return Err(mismatch(format!("n_t = {} without a working subset", self.n_t)));
        }
        if self.lambda_path.is_empty() {
            return Err(CliError::input(format!("{origin}: empty lambda_path")));
        }
        Ok(EmFit {
            theta: self.theta.theta()?,
            gamma: Responsibilities::from_gamma(DVector::from_column_slice(&self.gamma))?,
            lambda_path: self.lambda_path.clone(),
            theta_path: Vec::new(),
            subset_indices: self.subset_indices.clone(),
            n_t: self.n_t,
            flags: self.flags,
        })
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let fail = |e: csv::Error| CliError::input(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(&r).map_err(fail)?;
    }
    w.flush().map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::numerical(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comma_and_tab() {
        let t = parse_table(b"y,a,b\n1,2,3\n4,5,6\n", "d").unwrap();
        assert_eq!((t.rows, t.cols()), (2, 3));
        assert_eq!(t.column(2).collect::<Vec<_>>(), vec![3.0, 6.0]);
        let t = parse_table(b"a\ty\n1\t2\n", "d").unwrap();
        assert_eq!(t.header, vec!["a", "y"]);
    }

    #[test]
    fn diagnostics_carry_positions() {
        let e = parse_table(b"y,a\n1,2\n3,x\n", "d.csv").unwrap_err();
        assert_eq!(e.message, "d.csv: line 3, column 2: cannot parse \"x\" as a number");
        let e = parse_table(b"y,a\n1,2\n3\n", "d.csv").unwrap_err();
        assert!(e.message.contains("line 3") && e.message.contains("mismatch"), "{}", e.message);
        let e = parse_table(b"y,a\n1,inf\n", "d.csv").unwrap_err();
        assert!(e.message.contains("line 2, column 2"));
    }

    #[test]
    fn response_column_is_required() {
        let t = parse_table(b"a,b\n1,2\n", "d").unwrap();
        assert!(dataset_from_table(&t, "d").is_err());
        let t = parse_table(b"a,y,b\n1,2,3\n4,5,7\n", "d").unwrap();
        let (d, names) = dataset_from_table(&t, "d").unwrap();
        assert_eq!(names, vec!["a", "b"]);
        assert_eq!(d.y().as_slice(), &[2.0, 5.0]);
        assert_eq!(d.x()[(1, 1)], 7.0);
    }

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -2.5e12, 0.0] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
    }
}
