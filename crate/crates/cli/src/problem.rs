//! Plain-text matrix files for transport problems.
//!
//! A file is a sequence of blocks `name rows cols` followed by `rows·cols`
//! whitespace-separated numbers in row-major order. `#` comments run to the
//! end of the line. Blocks `x` and `e` are required; `mu`, `nu`, `mu_f` and
//! `nu_f` are optional `1 × len` marginals and default to uniform.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use driftbench_core::ascoot::TransportProblem;
use driftbench_core::linalg::Matrix;

use crate::error::CliError;

pub const ZERO_COST_DEMO: &str = include_str!("../data/zero_cost.txt");
pub const DEMO_5X4: &str = include_str!("../data/demo_5x4.txt");

const BLOCKS: &[&str] = &["x", "e", "mu", "nu", "mu_f", "nu_f"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

impl std::fmt::Display for ParseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "byte {}: {}", self.offset, self.message)
    }
}

impl std::error::Error for ParseError {}

struct Tokens<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn next(&mut self) -> Option<(usize, &'a str)> {
        let bytes = self.text.as_bytes();
        loop {
            while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < bytes.len() && bytes[self.pos] == b'#' {
                while self.pos < bytes.len() && bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        if self.pos >= bytes.len() {
            return None;
        }
        let start = self.pos;
        while self.pos < bytes.len() && !bytes[self.pos].is_ascii_whitespace() && bytes[self.pos] != b'#' {
            self.pos += 1;
        }
        Some((start, &self.text[start..self.pos]))
    }
}

fn err(offset: usize, message: impl Into<String>) -> ParseError {
    ParseError {
        offset,
        message: message.into(),
    }
}

fn dim(tok: Option<(usize, &str)>, end: usize, what: &str) -> Result<usize, ParseError> {
    let (off, s) = tok.ok_or_else(|| err(end, format!("missing {what}")))?;
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(err(off, format!("{what} must be a positive integer, got {s:?}"))),
    }
}

/// Parses every block into a named matrix. Names are free-form here;
/// problem files restrict them.
pub fn parse_blocks(text: &str) -> Result<BTreeMap<String, Matrix>, ParseError> {
    parse_named(text, None)
}

fn parse_named(text: &str, allowed: Option<&[&str]>) -> Result<BTreeMap<String, Matrix>, ParseError> {
    let mut toks = Tokens { text, pos: 0 };
    let end = text.len();
    let mut out = BTreeMap::new();
    while let Some((off, name)) = toks.next() {
        if let Some(allowed) = allowed {
            if !allowed.contains(&name) {
                return Err(err(off, format!("unknown block {name:?} (expected one of {})", allowed.join(", "))));
            }
        } else if !name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_') {
            return Err(err(off, format!("expected a block name, got {name:?}")));
        }
        if out.contains_key(name) {
            return Err(err(off, format!("block {name:?} appears twice")));
        }
        let rows = dim(toks.next(), end, "row count")?;
        let cols = dim(toks.next(), end, "column count")?;
        let mut data = Vec::with_capacity(rows * cols);
        for k in 0..rows * cols {
            let (voff, s) = toks
                .next()
                .ok_or_else(|| err(end, format!("block {name:?} ends after {k} of {} values", rows * cols)))?;
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => data.push(v),
                _ => return Err(err(voff, format!("expected a finite number, got {s:?}"))),
            }
        }
        let m = Matrix::from_vec(rows, cols, data).map_err(|e| err(off, e.to_string()))?;
        out.insert(name.to_string(), m);
    }
    Ok(out)
}

/// Parses a problem with `λ₁` and `ε` supplied by the caller.
pub fn parse_problem(text: &str, lambda1: f64, epsilon: f64) -> Result<TransportProblem, ParseError> {
    let mut blocks = parse_named(text, Some(BLOCKS))?;
    let x = blocks.remove("x").ok_or_else(|| err(text.len(), "missing block \"x\""))?;
    let e = blocks.remove("e").ok_or_else(|| err(text.len(), "missing block \"e\""))?;
    let mut p = TransportProblem::uniform(x, e);
    p.lambda1 = lambda1;
    p.epsilon = epsilon;
    for (name, m) in blocks {
        if m.rows() != 1 {
            return Err(err(text.len(), format!("marginal {name:?} must have one row")));
        }
        let v = m.into_vec();
        match name.as_str() {
            "mu" => p.mu = v,
            "nu" => p.nu = v,
            "mu_f" => p.mu_f = v,
            _ => p.nu_f = v,
        }
    }
    Ok(p)
}

pub fn load_problem(path: &Path, lambda1: f64, epsilon: f64) -> Result<TransportProblem, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_problem(&text, lambda1, epsilon).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Renders a matrix as a block in the same format.
pub fn format_matrix(name: &str, m: &Matrix) -> String {
    let mut s = format!("{name} {} {}\n", m.rows(), m.cols());
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}
