//! JSON problem files for `certigrad solve`.

use std::collections::BTreeMap;

use certigrad::qcqp::{build_hom_qcqp, HomQcqp, ParamSymMatrix, Triplet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: &str = "1.0";

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{path}: unsupported schema_version {found:?} (expected major version {expected})")]
    Schema { path: String, found: String, expected: String },
    #[error("{path}: {field}: {message}")]
    Invalid { path: String, field: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintEntry {
    pub triplets: Vec<Triplet<f64>>,
    #[serde(default)]
    pub redundant: bool,
}

/// Directions in which one named parameter moves the cost and constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    #[serde(default)]
    pub value: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cost: Vec<Triplet<f64>>,
    /// Keyed by constraint index.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub constraints: BTreeMap<usize, Vec<Triplet<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub schema_version: String,
    pub n: usize,
    pub homog_index: usize,
    pub cost: Vec<Triplet<f64>>,
    #[serde(default)]
    pub constraints: Vec<ConstraintEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub params: Vec<ParamEntry>,
}

fn major(version: &str) -> &str {
    version.split('.').next().unwrap_or("")
}

/// Row-major upper triangle with duplicates summed, as stored in the library.
fn normalized(n: usize, t: &[Triplet<f64>]) -> Vec<Triplet<f64>> {
    ParamSymMatrix::new(n, t).map(|m| m.entries().to_vec()).unwrap_or_default()
}

impl ProblemFile {
    pub fn parse(text: &str, path: &str) -> Result<Self, ParseError> {
        let file: Self = serde_json::from_str(text).map_err(|source| ParseError::Json { path: path.into(), source })?;
        if major(&file.schema_version) != major(SCHEMA_VERSION) {
            return Err(ParseError::Schema {
                path: path.into(),
                found: file.schema_version.clone(),
                expected: major(SCHEMA_VERSION).into(),
            });
        }
        file.validate(path)?;
        Ok(file)
    }

    pub fn read(path: &str) -> Result<Self, ParseError> {
        let text = std::fs::read_to_string(path).map_err(|source| ParseError::Io { path: path.into(), source })?;
        Self::parse(&text, path)
    }

    fn validate(&self, path: &str) -> Result<(), ParseError> {
        let invalid = |field: String, message: String| ParseError::Invalid { path: path.into(), field, message };
        let n = self.n;
        if n == 0 {
            return Err(invalid("n".into(), "must be positive".into()));
        }
        if self.homog_index >= n {
            return Err(invalid("homog_index".into(), format!("{} is out of range for n = {n}", self.homog_index)));
        }
        let check = |field: &str, t: &[Triplet<f64>]| -> Result<(), ParseError> {
            for (k, &(r, c, v)) in t.iter().enumerate() {
                if r >= n || c >= n {
                    return Err(invalid(
                        format!("{field}[{k}]"),
                        format!("entry ({r}, {c}) is out of range for n = {n}"),
                    ));
                }
                if !v.is_finite() {
                    return Err(invalid(format!("{field}[{k}]"), format!("value {v} is not finite")));
                }
            }
            Ok(())
        };
        check("cost", &self.cost)?;
        for (i, c) in self.constraints.iter().enumerate() {
            check(&format!("constraints[{i}].triplets"), &c.triplets)?;
            let h = self.homog_index;
            if normalized(n, &c.triplets) == vec![(h, h, 1.0)] {
                return Err(invalid(
                    format!("constraints[{i}]"),
                    "duplicates the homogenizing constraint, which is added automatically".into(),
                ));
            }
        }
        for (p, param) in self.params.iter().enumerate() {
            check(&format!("params[{p}].cost"), &param.cost)?;
            for (&i, t) in &param.constraints {
                if i >= self.constraints.len() {
                    return Err(invalid(
                        format!("params[{p}].constraints.{i}"),
                        format!("no constraint with index {i}"),
                    ));
                }
                check(&format!("params[{p}].constraints.{i}"), t)?;
            }
        }
        Ok(())
    }

    pub fn to_qcqp(&self) -> Result<HomQcqp<f64>, certigrad::qcqp::QcqpError> {
        let n = self.n;
        let with_params = |m: ParamSymMatrix<f64>, pick: &dyn Fn(&ParamEntry) -> Option<&Vec<Triplet<f64>>>| {
            if self.params.iter().any(|p| pick(p).is_some_and(|t| !t.is_empty())) {
                let sens = self.params.iter().map(|p| pick(p).cloned().unwrap_or_default()).collect();
                m.with_sensitivity(sens)
            } else {
                Ok(m)
            }
        };
        let cost = with_params(ParamSymMatrix::new(n, &self.cost)?, &|p| Some(&p.cost))?;
        let constraints = self
            .constraints
            .iter()
            .enumerate()
            .map(|(i, c)| with_params(ParamSymMatrix::new(n, &c.triplets)?, &|p| p.constraints.get(&i)))
            .collect::<Result<Vec<_>, _>>()?;
        let flags = self.constraints.iter().map(|c| c.redundant).collect();
        build_hom_qcqp(cost, constraints, self.homog_index)?.with_redundant_flags(flags)
    }

    /// Writes a QCQP back out. Parameter names default to `p0, p1, …` and
    /// values to zero when `params` is shorter than the parameter count.
    pub fn from_qcqp(q: &HomQcqp<f64>, params: &[(String, f64)]) -> Self {
        let n_params = std::iter::once(q.cost()).chain(q.constraints()).map(|m| m.n_params()).max().unwrap_or(0);
        let params = (0..n_params)
            .map(|k| {
                let (name, value) = params.get(k).cloned().unwrap_or_else(|| (format!("p{k}"), 0.0));
                let sens = |m: &ParamSymMatrix<f64>| m.sensitivity().get(k).cloned().unwrap_or_default();
                let constraints = q
                    .constraints()
                    .iter()
                    .enumerate()
                    .filter_map(|(i, a)| Some((i, sens(a))).filter(|(_, t)| !t.is_empty()))
                    .collect();
                ParamEntry { name, value, cost: sens(q.cost()), constraints }
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION.into(),
            n: q.n(),
            homog_index: q.homog_index(),
            cost: q.cost().entries().to_vec(),
            constraints: q
                .constraints()
                .iter()
                .zip(q.redundant_flags())
                .map(|(a, &redundant)| ConstraintEntry { triplets: a.entries().to_vec(), redundant })
                .collect(),
            params,
        }
    }

    /// The same problem with every triplet list in library order.
    pub fn normalize(&self) -> Self {
        let n = self.n;
        let mut out = self.clone();
        out.cost = normalized(n, &self.cost);
        for c in &mut out.constraints {
            c.triplets = normalized(n, &c.triplets);
        }
        for p in &mut out.params {
            p.cost = normalized(n, &p.cost);
            for t in p.constraints.values_mut() {
                *t = normalized(n, t);
            }
            p.constraints.retain(|_, t| !t.is_empty());
        }
        out
    }

    pub fn param_names(&self) -> Vec<(String, f64)> {
        self.params.iter().map(|p| (p.name.clone(), p.value)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"{
        "schema_version": "1.0", "n": 3, "homog_index": 0,
        "cost": [[1, 1, 2.0], [0, 1, -1.0], [1, 0, -1.0]],
        "constraints": [{"triplets": [[2, 2, 1.0], [0, 0, -1.0]], "redundant": false}],
        "params": [{"name": "a", "value": 2.0, "cost": [[1, 1, 1.0]]}]
    }"#;

    #[test]
    fn parse_and_build() {
        let f = ProblemFile::parse(SMALL, "small.json").unwrap();
        let q = f.to_qcqp().unwrap();
        assert_eq!((q.n(), q.m()), (3, 1));
        assert_eq!(q.q()[(0, 1)], -2.0);
        assert_eq!(q.cost().n_params(), 1);
        assert_eq!(q.constraints()[0].n_params(), 0);
    }

    #[test]
    fn round_trip_is_lossless_after_normalization() {
        let f = ProblemFile::parse(SMALL, "small.json").unwrap();
        let back = ProblemFile::from_qcqp(&f.to_qcqp().unwrap(), &f.param_names());
        assert_eq!(back, f.normalize());
        assert_eq!(ProblemFile::from_qcqp(&back.to_qcqp().unwrap(), &back.param_names()), back);
    }

    #[test]
    fn out_of_range_entry_is_named() {
        let bad = SMALL.replace("[[2, 2, 1.0], [0, 0, -1.0]]", "[[2, 2, 1.0], [0, 7, -1.0]]");
        let err = ProblemFile::parse(&bad, "bad.json").unwrap_err().to_string();
        assert!(err.contains("constraints[0].triplets[1]"), "{err}");
        assert!(err.contains("(0, 7)"), "{err}");
    }

    #[test]
    fn unknown_major_version_is_rejected() {
        let bad = SMALL.replace("\"1.0\"", "\"2.0\"");
        assert!(matches!(ProblemFile::parse(&bad, "x"), Err(ParseError::Schema { .. })));
        let minor = SMALL.replace("\"1.0\"", "\"1.3\"");
        assert!(ProblemFile::parse(&minor, "x").is_ok());
    }

    #[test]
    fn json_errors_carry_position() {
        let err = ProblemFile::parse("{\"schema_version\": \"1.0\", \"n\": }", "x").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }
}
