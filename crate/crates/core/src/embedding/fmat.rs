//! Plain-text feature matrices: a `T F` header line followed by `T` lines of
//! `F` space-separated decimals.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum FmatError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("cannot read or write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("feature matrix contains a non-finite value")]
    NonFinite,
}

fn parse_err(line: usize, msg: impl Into<String>) -> FmatError {
    FmatError::Parse { line, msg: msg.into() }
}

/// Parses fmat text into a `[T, F]` tensor.
pub fn parse_fmat(text: &str) -> Result<Tensor, FmatError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(1, "missing header"))?;
    let dims: Vec<&str> = header.split(' ').collect();
    let [t, f] = dims[..] else {
        return Err(parse_err(1, format!("header must be `T F`, got {header:?}")));
    };
    let t: usize = t.parse().map_err(|_| parse_err(1, format!("bad frame count {t:?}")))?;
    let f: usize = f.parse().map_err(|_| parse_err(1, format!("bad feature width {f:?}")))?;
    if t == 0 || f == 0 {
        return Err(parse_err(1, "frame count and feature width must be positive"));
    }

    // Grow with the input rather than trusting the header for the allocation.
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if rows == t {
            if line.is_empty() {
                continue;
            }
            return Err(parse_err(lineno, format!("more than {t} rows")));
        }
        let before = data.len();
        for tok in line.split(' ') {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad number {tok:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(lineno, format!("non-finite value {tok:?}")));
            }
            data.push(v);
        }
        if data.len() - before != f {
            return Err(parse_err(
                lineno,
                format!("expected {f} values, found {}", data.len() - before),
            ));
        }
        rows += 1;
    }
    if rows != t {
        return Err(parse_err(rows + 2, format!("expected {t} rows, found {rows}")));
    }
    Ok(Tensor::new(vec![t, f], data).expect("dimensions checked"))
}

/// Serializes a `[T, F]` tensor with shortest round-trip decimals.
pub fn format_fmat(frames: &Tensor) -> Result<String, FmatError> {
    if !frames.is_finite() {
        return Err(FmatError::NonFinite);
    }
    let (t, f) = (frames.rows(), frames.cols());
    let mut out = format!("{t} {f}\n");
    for row in frames.row_iter() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            write!(out, "{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn read_fmat(path: &Path) -> Result<Tensor, FmatError> {
    let text = fs::read_to_string(path).map_err(|source| FmatError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_fmat(&text)
}

pub fn write_fmat(path: &Path, frames: &Tensor) -> Result<(), FmatError> {
    let text = format_fmat(frames)?;
    fs::write(path, text).map_err(|source| FmatError::Io {
        path: path.to_path_buf(),
        source,
    })
}
