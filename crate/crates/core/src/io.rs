//! Patient-level CSV input.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::RawData;

/// Which columns of the input file play which role.
#[derive(Debug, Clone)]
pub struct Columns<'a> {
    pub outcome: &'a str,
    pub hospital: &'a str,
    /// Covariate columns; `None` takes every other column.
    pub covariates: Option<&'a [String]>,
}

/// Read a header-first CSV file into raw columns.
pub fn read_csv(path: &Path, cols: &Columns<'_>) -> Result<RawData> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv_from(file, cols)
}

pub fn read_csv_from<R: std::io::Read>(reader: R, cols: &Columns<'_>) -> Result<RawData> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("column `{name}` not found (have: {})", headers.join(", "))))
    };
    let yi = find(cols.outcome)?;
    let hi = find(cols.hospital)?;
    if yi == hi {
        return Err(Error::Config("outcome and hospital columns must differ".into()));
    }
    let cov_idx: Vec<usize> = match cols.covariates {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&j| j != yi && j != hi).collect(),
    };
    if let Some(&j) = cov_idx.iter().find(|&&j| j == yi || j == hi) {
        return Err(Error::Config(format!("column `{}` cannot be both a covariate and outcome/hospital", headers[j])));
    }
    let mut outcome = Vec::new();
    let mut hospital = Vec::new();
    let mut covariates = vec![Vec::new(); cov_idx.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let number = |j: usize| -> Result<f64> {
            let s = rec.get(j).unwrap_or("");
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::InvalidData(format!("line {line}, column `{}`: `{s}` is not a finite number", headers[j])))
        };
        outcome.push(number(yi)?);
        let h = rec.get(hi).unwrap_or("");
        if h.is_empty() {
            return Err(Error::InvalidData(format!("line {line}: empty hospital label")));
        }
        hospital.push(h.to_string());
        for (c, &j) in cov_idx.iter().enumerate() {
            covariates[c].push(number(j)?);
        }
    }
    Ok(RawData {
        outcome,
        hospital,
        covariates,
        covariate_names: cov_idx.iter().map(|&j| headers[j].clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "y,site,age,sex\n1,A,0.5,0\n0,B,-1.0,1\n1, A ,2.0,1\n";

    fn cols<'a>(cov: Option<&'a [String]>) -> Columns<'a> {
        Columns {
            outcome: "y",
            hospital: "site",
            covariates: cov,
        }
    }

    #[test]
    fn reads_all_other_columns_as_covariates() {
        let raw = read_csv_from(TOY.as_bytes(), &cols(None)).unwrap();
        assert_eq!(raw.outcome, vec![1.0, 0.0, 1.0]);
        assert_eq!(raw.hospital, vec!["A", "B", "A"]);
        assert_eq!(raw.covariate_names, vec!["age", "sex"]);
        assert_eq!(raw.covariates[0], vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn explicit_covariate_subset() {
        let pick = vec!["sex".to_string()];
        let raw = read_csv_from(TOY.as_bytes(), &cols(Some(&pick))).unwrap();
        assert_eq!(raw.covariate_names, vec!["sex"]);
    }

    #[test]
    fn missing_column_is_config_error() {
        let c = Columns {
            outcome: "y",
            hospital: "hospital",
            covariates: None,
        };
        assert!(matches!(read_csv_from(TOY.as_bytes(), &c), Err(Error::Config(_))));
    }

    #[test]
    fn bad_number_is_data_error() {
        let text = "y,site,age\n1,A,old\n";
        assert!(matches!(read_csv_from(text.as_bytes(), &cols(None)), Err(Error::InvalidData(_))));
        let text = "y,site,age\n,A,1\n";
        assert!(matches!(read_csv_from(text.as_bytes(), &cols(None)), Err(Error::InvalidData(_))));
    }
}
