//! Fields-of-Experts filter banks and their text format.
//!
//! ```text
//! FOE
//! <m> <K>
//! <alpha_1>
//! <m*m filter coefficients, row-major>
//! ...
//! ```
//!
//! After the two header lines the file is a whitespace-separated token stream,
//! so the line breaks between experts are a convention rather than a rule.

use std::fmt::Write as _;

use thiserror::Error;

use crate::image::SplitMix64;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("unknown builtin model {0:?} (available: diff2x2)")]
    UnknownBuiltin(String),
}

/// One expert: a positive weight and an `m x m` linear filter.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    pub alpha: f64,
    pub filter: Vec<f64>,
}

/// A validated filter bank with patch side `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct FoeModel {
    patch_size: usize,
    experts: Vec<Expert>,
}

impl FoeModel {
    pub fn new(patch_size: usize, experts: Vec<Expert>) -> Result<Self, ModelError> {
        if patch_size == 0 {
            return Err(ModelError::Invalid("patch size must be at least 1".into()));
        }
        let taps = patch_size * patch_size;
        for (k, e) in experts.iter().enumerate() {
            if !(e.alpha > 0.0 && e.alpha.is_finite()) {
                return Err(ModelError::Invalid(format!(
                    "expert {k}: alpha must be positive and finite, got {}",
                    e.alpha
                )));
            }
            if e.filter.len() != taps {
                return Err(ModelError::Invalid(format!(
                    "expert {k}: filter has {} coefficients, expected {taps}",
                    e.filter.len()
                )));
            }
            if e.filter.iter().any(|c| !c.is_finite()) {
                return Err(ModelError::Invalid(format!(
                    "expert {k}: filter has a non-finite coefficient"
                )));
            }
        }
        Ok(Self {
            patch_size,
            experts,
        })
    }

    /// A prior-free model: only the data term remains.
    pub fn empty(patch_size: usize) -> Result<Self, ModelError> {
        Self::new(patch_size, Vec::new())
    }

    /// Patch side length `m`.
    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Number of experts `K`.
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    /// Short identifier such as `m2k3`.
    pub fn id(&self) -> String {
        format!("m{}k{}", self.patch_size, self.experts.len())
    }
}

/// Tokens with the 1-based line they came from.
fn tokens(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .flat_map(|(i, line)| line.split_whitespace().map(move |t| (i + 1, t)))
}

pub fn parse_model(text: &str) -> Result<FoeModel, ModelError> {
    let mut lines = text.lines();
    let magic = lines.next().map(str::trim);
    if magic != Some("FOE") {
        return Err(ModelError::Parse {
            line: 1,
            message: "expected magic line `FOE`".into(),
        });
    }
    let header = lines.next().ok_or(ModelError::Parse {
        line: 2,
        message: "missing `<m> <K>` header line".into(),
    })?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let header_err = |message: String| ModelError::Parse { line: 2, message };
    if fields.len() != 2 {
        return Err(header_err(format!(
            "expected `<m> <K>`, found {} fields",
            fields.len()
        )));
    }
    let patch_size: usize = fields[0]
        .parse()
        .map_err(|_| header_err(format!("bad patch size {:?}", fields[0])))?;
    let count: usize = fields[1]
        .parse()
        .map_err(|_| header_err(format!("bad expert count {:?}", fields[1])))?;
    if patch_size == 0 {
        return Err(header_err("patch size must be at least 1".into()));
    }
    let taps = patch_size
        .checked_mul(patch_size)
        .ok_or_else(|| header_err("patch size too large".into()))?;

    let mut stream = tokens(text).filter(|&(line, _)| line > 2);
    let last_line = text.lines().count().max(2);

    let mut next_real = |what: &str| -> Result<(usize, f64), ModelError> {
        let (line, tok) = stream.next().ok_or_else(|| ModelError::Parse {
            line: last_line,
            message: format!("unexpected end of input, expected {what}"),
        })?;
        let value: f64 = tok.parse().map_err(|_| ModelError::Parse {
            line,
            message: format!("cannot parse {what} from {tok:?}"),
        })?;
        if !value.is_finite() {
            return Err(ModelError::Parse {
                line,
                message: format!("{what} is not finite"),
            });
        }
        Ok((line, value))
    };

    let mut experts = Vec::with_capacity(count.min(4096));
    for k in 0..count {
        let (line, alpha) = next_real("alpha")?;
        if alpha <= 0.0 {
            return Err(ModelError::Parse {
                line,
                message: format!("expert {k}: alpha must be positive, got {alpha}"),
            });
        }
        let filter = (0..taps)
            .map(|_| next_real("filter coefficient").map(|(_, v)| v))
            .collect::<Result<Vec<_>, _>>()?;
        experts.push(Expert { alpha, filter });
    }
    if let Some((line, tok)) = stream.next() {
        return Err(ModelError::Parse {
            line,
            message: format!("trailing token {tok:?} after {count} experts"),
        });
    }
    FoeModel::new(patch_size, experts)
}

/// Shortest decimal text that parses back to the same `f64`.
fn format_coefficient(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// Canonical text form. Values are written with the shortest round-trip
/// representation, so parsing the output yields bit-identical coefficients.
pub fn serialize_model(model: &FoeModel) -> String {
    let mut out = format!("FOE\n{} {}\n", model.patch_size, model.experts.len());
    for e in &model.experts {
        // Debug formatting keeps a decimal point on integral weights ("1.0").
        let _ = writeln!(out, "{:?}", e.alpha);
        let line = e
            .filter
            .iter()
            .map(|&c| format_coefficient(c))
            .collect::<Vec<_>>()
            .join(" ");
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Built-in stand-in filter banks for testing and demos.
///
/// `diff2x2` is three unit-weight 2x2 difference filters (horizontal
/// `(1,-1,0,0)`, vertical `(1,0,-1,0)`, diagonal `(1,0,0,-1)`). It has the
/// shape of a trained 2x2, K=3 model but is not one.
pub fn builtin_model(name: &str) -> Result<FoeModel, ModelError> {
    match name {
        "diff2x2" => FoeModel::new(
            2,
            vec![
                Expert {
                    alpha: 1.0,
                    filter: vec![1.0, -1.0, 0.0, 0.0],
                },
                Expert {
                    alpha: 1.0,
                    filter: vec![1.0, 0.0, -1.0, 0.0],
                },
                Expert {
                    alpha: 1.0,
                    filter: vec![1.0, 0.0, 0.0, -1.0],
                },
            ],
        ),
        other => Err(ModelError::UnknownBuiltin(other.to_string())),
    }
}

pub const BUILTIN_NAMES: &[&str] = &["diff2x2"];

/// Random filter bank for tests and feasibility runs: zero-mean filters with
/// coefficients drawn from U(-1, 1) before centering, weights from U(0.2, 1.2).
/// Deterministic in `seed`.
pub fn random_model(patch_size: usize, experts: usize, seed: u64) -> Result<FoeModel, ModelError> {
    let mut rng = SplitMix64::new(seed);
    let taps = patch_size * patch_size;
    let experts = (0..experts)
        .map(|_| {
            let alpha = 0.2 + rng.next_f64();
            let mut filter: Vec<f64> = (0..taps).map(|_| 2.0 * rng.next_f64() - 1.0).collect();
            if taps > 1 {
                let mean = filter.iter().sum::<f64>() / taps as f64;
                filter.iter_mut().for_each(|c| *c -= mean);
            }
            Expert { alpha, filter }
        })
        .collect();
    FoeModel::new(patch_size, experts)
}
