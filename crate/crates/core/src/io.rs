//! File formats: headerless CSV matrices, instance metadata and result documents.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instances::InstanceSpec;
use crate::linalg::{Permutation, SymMatrix};

/// Writes one row per line, fields in shortest round-trip decimal form.
pub fn format_matrix(m: &SymMatrix) -> String {
    let d = m.dim();
    let mut out = String::with_capacity(d * d * 20);
    for i in 0..d {
        for j in 0..d {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{}", m.get(i, j)).expect("write to String");
        }
        out.push('\n');
    }
    out
}

pub fn write_matrix(path: &Path, m: &SymMatrix) -> Result<()> {
    fs::write(path, format_matrix(m))?;
    Ok(())
}

pub fn parse_matrix(text: &str, origin: &str) -> Result<SymMatrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|field| {
                let field = field.trim();
                match field.parse::<f64>() {
                    Ok(x) if x.is_finite() => Ok(x),
                    _ => Err(Error::FileFormat(format!("{origin}:{}: cannot parse {field:?} as a finite real", lineno + 1))),
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let d = rows.len();
    if d == 0 {
        return Err(Error::FileFormat(format!("{origin}: empty matrix file")));
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
        return Err(Error::FileFormat(format!("{origin}: row {} has {} fields, expected {d}", i + 1, r.len())));
    }
    SymMatrix::from_rows(&rows).map_err(|e| match e {
        Error::Asymmetric { deviation } => {
            Error::FileFormat(format!("{origin}: matrix is not symmetric (relative deviation {deviation:.3e})"))
        }
        other => other,
    })
}

pub fn read_matrix(path: &Path) -> Result<SymMatrix> {
    let text = fs::read_to_string(path)?;
    parse_matrix(&text, &path.display().to_string())
}

/// Written next to simulated matrices; the only place `π*` is stored.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetaDocument {
    pub spec: InstanceSpec,
    pub pi_star: Permutation,
    pub version: String,
}

impl MetaDocument {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub frobenius_sq: f64,
    /// Absent when the ground-truth covariance is singular.
    pub nf_sq: Option<f64>,
    pub hamming: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub runtime_ms: f64,
}

/// Output of `covalign align`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub estimator: String,
    pub d: usize,
    pub permutation: Permutation,
    pub objective: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub losses: Option<Losses>,
    pub diagnostics: Diagnostics,
    pub version: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::robinson;

    #[test]
    fn robinson_row_format() {
        let text = format_matrix(&robinson(3, 1.0).unwrap());
        assert_eq!(text.lines().next().unwrap(), "1,0.5,0.3333333333333333");
    }

    #[test]
    fn parse_round_trips_bitwise() {
        let m = SymMatrix::from_upper_fn(4, |i, j| ((i * 7 + j) as f64).sin() / 3.0);
        assert_eq!(parse_matrix(&format_matrix(&m), "mem").unwrap(), m);
    }

    #[test]
    fn parse_rejects_bad_input() {
        assert!(matches!(parse_matrix("1,2\n3", "mem"), Err(Error::FileFormat(_))));
        assert!(matches!(parse_matrix("1,x\nx,1", "mem"), Err(Error::FileFormat(_))));
        assert!(matches!(parse_matrix("1,2\n2.5,1", "mem"), Err(Error::FileFormat(_))));
        assert!(matches!(parse_matrix("", "mem"), Err(Error::FileFormat(_))));
        assert!(matches!(parse_matrix("1,nan\nnan,1", "mem"), Err(Error::FileFormat(_))));
        assert!(parse_matrix("1,2\n2,1\n\n", "mem").is_ok());
    }

    #[test]
    fn result_document_omits_losses_without_truth() {
        let doc = ResultDocument {
            estimator: "gw".into(),
            d: 2,
            permutation: Permutation::identity(2),
            objective: 1.0,
            losses: None,
            diagnostics: Diagnostics { iterations: 3, converged: true, runtime_ms: 0.5 },
            version: crate::VERSION.into(),
        };
        let json = serde_json::to_value(&doc).unwrap();
        assert!(json.get("losses").is_none());
        assert_eq!(json["permutation"], serde_json::json!([0, 1]));
        let bad = r#"{"estimator":"gw","d":2,"permutation":[0,0],"objective":1,"diagnostics":{"iterations":1,"converged":true,"runtime_ms":0},"version":"x"}"#;
        assert!(serde_json::from_str::<ResultDocument>(bad).is_err());
    }
}
