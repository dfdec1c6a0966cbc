//! Plain-text dump of a cone program, one constraint row per line:
//!
//! ```text
//! vars 3
//! obj 0 | 1:1 2:-0.5
//! cone soc 3
//! row 1 | 0:-1
//! ```
//!
//! The `obj` line holds the constant then the linear terms; each `row` line
//! holds `b_i` then the nonzeros of row `i` of `A`.

use std::fmt::Write as _;

use crate::cones::Cone;
use crate::program::{ConeProgram, ProgramError};
use crate::sparse::CscMatrix;

#[derive(Debug, thiserror::Error)]
pub enum DumpError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Program(#[from] ProgramError),
}

fn terms(out: &mut String, items: impl Iterator<Item = (usize, f64)>) {
    for (i, v) in items {
        let _ = write!(out, " {i}:{v:e}");
    }
}

pub fn dump(prog: &ConeProgram) -> String {
    let at = prog.a.transpose();
    let mut out = String::new();
    let _ = writeln!(out, "vars {}", prog.num_vars());
    let _ = write!(out, "obj {:e} |", prog.c0);
    terms(&mut out, prog.c.iter().copied().enumerate().filter(|(_, v)| *v != 0.0));
    out.push('\n');
    let mut row = 0;
    for cone in &prog.cones {
        let (kind, d) = match *cone {
            Cone::Zero(d) => ("zero", d),
            Cone::NonNeg(d) => ("nonneg", d),
            Cone::Soc(d) => ("soc", d),
        };
        let _ = writeln!(out, "cone {kind} {d}");
        for _ in 0..d {
            let _ = write!(out, "row {:e} |", prog.b[row]);
            let range = at.colptr[row]..at.colptr[row + 1];
            terms(&mut out, range.map(|k| (at.rowval[k], at.nzval[k])));
            out.push('\n');
            row += 1;
        }
    }
    out
}

fn parse_terms(s: &str, line: usize) -> Result<Vec<(usize, f64)>, DumpError> {
    let err = |msg: String| DumpError::Parse { line, msg };
    s.split_whitespace()
        .map(|t| {
            let (i, v) = t.split_once(':').ok_or_else(|| err(format!("bad term {t:?}")))?;
            Ok((
                i.parse().map_err(|_| err(format!("bad index {i:?}")))?,
                v.parse().map_err(|_| err(format!("bad value {v:?}")))?,
            ))
        })
        .collect()
}

fn split_bar(rest: &str, line: usize) -> Result<(f64, &str), DumpError> {
    let (head, tail) = rest
        .split_once('|')
        .ok_or_else(|| DumpError::Parse { line, msg: "missing '|'".into() })?;
    let v = head.trim().parse().map_err(|_| DumpError::Parse {
        line,
        msg: format!("bad constant {head:?}"),
    })?;
    Ok((v, tail))
}

pub fn parse(text: &str) -> Result<ConeProgram, DumpError> {
    let mut n = None;
    let mut c = Vec::new();
    let mut c0 = 0.0;
    let mut cones = Vec::new();
    let mut b = Vec::new();
    let mut trip = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let (tag, rest) = raw.split_once(' ').unwrap_or((raw, ""));
        let err = |msg: &str| DumpError::Parse { line, msg: msg.into() };
        match tag {
            "vars" => {
                let v: usize = rest.trim().parse().map_err(|_| err("bad variable count"))?;
                n = Some(v);
                c = vec![0.0; v];
            }
            "obj" => {
                let (k0, tail) = split_bar(rest, line)?;
                c0 = k0;
                for (i, v) in parse_terms(tail, line)? {
                    *c.get_mut(i).ok_or_else(|| err("objective index out of range"))? += v;
                }
            }
            "cone" => {
                let mut it = rest.split_whitespace();
                let kind = it.next().ok_or_else(|| err("missing cone kind"))?;
                let d: usize = it
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| err("bad cone dimension"))?;
                cones.push(match kind {
                    "zero" => Cone::Zero(d),
                    "nonneg" => Cone::NonNeg(d),
                    "soc" => Cone::Soc(d),
                    _ => return Err(err("unknown cone kind")),
                });
            }
            "row" => {
                let (bi, tail) = split_bar(rest, line)?;
                let r = b.len();
                b.push(bi);
                for (j, v) in parse_terms(tail, line)? {
                    if n.is_none_or(|n| j >= n) {
                        return Err(err("column index out of range"));
                    }
                    trip.push((r, j, v));
                }
            }
            _ => return Err(err("unknown record")),
        }
    }
    let n = n.ok_or(DumpError::Parse { line: 0, msg: "missing vars line".into() })?;
    let a = CscMatrix::from_triplets(b.len(), n, &trip);
    Ok(ConeProgram::new(c, c0, a, b, cones)?)
}
