//! The `.pts` landmark annotation format.
//!
//! ```text
//! version: 1
//! n_points: 2
//! {
//! 10.5 20.25
//! 30 40
//! }
//! ```
//!
//! File coordinates are 1-based (the top-left pixel center is `(1, 1)`);
//! parsed landmarks are 0-based pixel coordinates, so parsing subtracts one
//! and writing adds it back.

use std::fmt::Write as _;

use thiserror::Error;

use crate::geometry::{LandmarkSet, Point, Scheme};

#[derive(Debug, Error, PartialEq)]
pub enum PtsError {
    #[error("line {line}: malformed header: {detail}")]
    MalformedHeader { line: usize, detail: String },
    #[error("n_points is {expected} but the block holds {found} points")]
    PointCountMismatch { expected: usize, found: usize },
    #[error("line {line}: non-numeric coordinate {token:?}")]
    NonNumeric { line: usize, token: String },
    #[error("line {line}: {detail}")]
    MalformedBody { line: usize, detail: String },
}

/// Parses the points of a pts file, in file order and 0-based.
pub fn parse_points(text: &str) -> Result<Vec<Point>, PtsError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    let header = |line: usize, detail: &str| PtsError::MalformedHeader { line, detail: detail.into() };

    let (ln, version) = lines.next().ok_or_else(|| header(1, "empty file"))?;
    match version.split_once(':') {
        Some((k, _)) if k.trim() == "version" => {}
        _ => return Err(header(ln, "expected `version:` line")),
    }
    let (ln, count) = lines.next().ok_or_else(|| header(ln + 1, "missing `n_points:` line"))?;
    let expected = match count.split_once(':') {
        Some((k, v)) if k.trim() == "n_points" => {
            v.trim().parse::<usize>().map_err(|_| header(ln, "n_points is not a count"))?
        }
        _ => return Err(header(ln, "expected `n_points:` line")),
    };
    let (ln, open) = lines.next().ok_or_else(|| header(ln + 1, "missing `{`"))?;
    if open != "{" {
        return Err(header(ln, "expected `{`"));
    }

    let mut points = Vec::with_capacity(expected);
    let mut closed = false;
    let mut last = ln;
    for (ln, l) in lines.by_ref() {
        last = ln;
        if l == "}" {
            closed = true;
            break;
        }
        let mut coords = [0.0; 2];
        let mut toks = l.split_whitespace();
        for c in &mut coords {
            let tok = toks.next().ok_or_else(|| PtsError::MalformedBody { line: ln, detail: "expected two coordinates".into() })?;
            *c = tok
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| PtsError::NonNumeric { line: ln, token: tok.into() })?;
        }
        if let Some(tok) = toks.next() {
            return Err(PtsError::MalformedBody { line: ln, detail: format!("unexpected token {tok:?}") });
        }
        points.push(Point::new(coords[0] - 1.0, coords[1] - 1.0));
    }
    if !closed {
        return Err(PtsError::MalformedBody { line: last, detail: "missing closing `}`".into() });
    }
    if let Some((ln, _)) = lines.next() {
        return Err(PtsError::MalformedBody { line: ln, detail: "content after `}`".into() });
    }
    if points.len() != expected {
        return Err(PtsError::PointCountMismatch { expected, found: points.len() });
    }
    Ok(points)
}

/// Parses a pts file; the scheme follows from the point count (68 and 10
/// map to the named schemes, anything else is generic).
pub fn parse_pts(text: &str) -> crate::Result<LandmarkSet> {
    let points = parse_points(text)?;
    LandmarkSet::new(Scheme::for_count(points.len()), points)
}

/// Writes landmarks as a pts file with 6 decimals.
pub fn write_pts(landmarks: &LandmarkSet) -> String {
    let mut s = format!("version: 1\nn_points: {}\n{{\n", landmarks.len());
    for p in landmarks.points() {
        let _ = writeln!(s, "{:.6} {:.6}", p.x + 1.0, p.y + 1.0);
    }
    s.push_str("}\n");
    s
}
