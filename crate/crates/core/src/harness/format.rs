//! Plain-text dataset formats.
//!
//! Classification: `AUTOCL-CLS 1 <n> <T> <c>`, then per instance a
//! `label <k>` line followed by `T` lines of `c` values.
//! Series: `AUTOCL-SER 1 <T> <c> <has_labels>`, then `T` lines of `c`
//! values plus a trailing `0|1` column when labelled.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Dataset contents exactly as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum RawDataset {
    /// `x` is `n x T x c`.
    Classification { x: Tensor, labels: Vec<usize> },
    /// `x` is `T x c`.
    Series { x: Tensor, labels: Option<Vec<bool>> },
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn parse_usize(tok: Option<&str>, line: usize, what: &str) -> Result<usize> {
    tok.ok_or_else(|| parse_err(line, format!("missing {what}")))?
        .parse()
        .map_err(|_| parse_err(line, format!("invalid {what}")))
}

fn parse_row(text: &str, line: usize, c: usize, out: &mut Vec<f64>) -> Result<Vec<String>> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    if toks.len() < c {
        return Err(parse_err(line, format!("expected {c} values, found {}", toks.len())));
    }
    for tok in &toks[..c] {
        let v: f64 = tok.parse().map_err(|_| parse_err(line, format!("invalid number {tok:?}")))?;
        if !v.is_finite() {
            return Err(parse_err(line, format!("non-finite value {tok:?}")));
        }
        out.push(v);
    }
    Ok(toks[c..].iter().map(|s| s.to_string()).collect())
}

/// Parse either format, detected from the header.
pub fn parse_dataset(text: &str) -> Result<RawDataset> {
    let eof_line = text.lines().count() + 1;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (hl, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let mut toks = header.split_whitespace();
    let magic = toks.next().unwrap_or("");
    let version = toks.next();
    if version != Some("1") {
        return Err(parse_err(hl, "unsupported format version"));
    }
    let mut next_line = |what: &str| lines.next().ok_or_else(|| parse_err(eof_line, format!("unexpected end of file, expected {what}")));
    match magic {
        "AUTOCL-CLS" => {
            let n = parse_usize(toks.next(), hl, "instance count")?;
            let t = parse_usize(toks.next(), hl, "length")?;
            let c = parse_usize(toks.next(), hl, "channel count")?;
            if t == 0 || c == 0 {
                return Err(parse_err(hl, "length and channel count must be >= 1"));
            }
            let mut data = Vec::with_capacity(n * t * c);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let (ln, l) = next_line("label line")?;
                let mut lt = l.split_whitespace();
                if lt.next() != Some("label") {
                    return Err(parse_err(ln, "expected `label <int>`"));
                }
                labels.push(parse_usize(lt.next(), ln, "label")?);
                for _ in 0..t {
                    let (ln, l) = next_line("value row")?;
                    let rest = parse_row(l, ln, c, &mut data)?;
                    if !rest.is_empty() {
                        return Err(parse_err(ln, format!("expected {c} values, found {}", c + rest.len())));
                    }
                }
            }
            if let Some((ln, l)) = lines.find(|(_, l)| !l.trim().is_empty()) {
                return Err(parse_err(ln, format!("trailing content {l:?}")));
            }
            let mut classes = labels.clone();
            classes.sort_unstable();
            classes.dedup();
            if classes.iter().enumerate().any(|(i, &k)| i != k) {
                return Err(Error::Validation(format!("labels must cover 0..k without gaps, found {classes:?}")));
            }
            Ok(RawDataset::Classification { x: Tensor::new(vec![n, t, c], data)?, labels })
        }
        "AUTOCL-SER" => {
            let t = parse_usize(toks.next(), hl, "length")?;
            let c = parse_usize(toks.next(), hl, "channel count")?;
            let has = parse_usize(toks.next(), hl, "label flag")?;
            if has > 1 || c == 0 {
                return Err(parse_err(hl, "invalid header"));
            }
            let mut data = Vec::with_capacity(t * c);
            let mut labels = Vec::new();
            for _ in 0..t {
                let (ln, l) = next_line("value row")?;
                let rest = parse_row(l, ln, c, &mut data)?;
                match (has, rest.as_slice()) {
                    (0, []) => {}
                    (1, [flag]) if flag == "0" || flag == "1" => labels.push(flag == "1"),
                    _ => return Err(parse_err(ln, "malformed row")),
                }
            }
            if let Some((ln, l)) = lines.find(|(_, l)| !l.trim().is_empty()) {
                return Err(parse_err(ln, format!("trailing content {l:?}")));
            }
            Ok(RawDataset::Series { x: Tensor::new(vec![t, c], data)?, labels: (has == 1).then_some(labels) })
        }
        _ => Err(parse_err(hl, format!("unknown header {magic:?}"))),
    }
}

fn push_row(out: &mut String, row: &[f64]) {
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{v}").expect("write to string");
    }
}

/// Serialize in the on-disk text format.
pub fn write_dataset(raw: &RawDataset) -> String {
    let mut out = String::new();
    match raw {
        RawDataset::Classification { x, labels } => {
            let (n, t, c) = (x.dim(0), x.dim(1), x.dim(2));
            writeln!(out, "AUTOCL-CLS 1 {n} {t} {c}").expect("write to string");
            for (i, label) in labels.iter().enumerate() {
                writeln!(out, "label {label}").expect("write to string");
                for row in x.data()[i * t * c..(i + 1) * t * c].chunks(c) {
                    push_row(&mut out, row);
                    out.push('\n');
                }
            }
        }
        RawDataset::Series { x, labels } => {
            let (t, c) = (x.dim(0), x.dim(1));
            writeln!(out, "AUTOCL-SER 1 {t} {c} {}", u8::from(labels.is_some())).expect("write to string");
            for (i, row) in x.data().chunks(c).enumerate() {
                push_row(&mut out, row);
                if let Some(l) = labels {
                    write!(out, " {}", u8::from(l[i])).expect("write to string");
                }
                out.push('\n');
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_round_trip() {
        let text = "AUTOCL-CLS 1 2 2 1\nlabel 1\n0.5\n-1.25\nlabel 0\n3\n0.1\n";
        let raw = parse_dataset(text).unwrap();
        assert_eq!(write_dataset(&raw), text);
    }

    #[test]
    fn series_round_trip() {
        let text = "AUTOCL-SER 1 3 2 1\n1 2 0\n0.25 -3 1\n7 8 0\n";
        let raw = parse_dataset(text).unwrap();
        assert_eq!(write_dataset(&raw), text);
        let unlabeled = "AUTOCL-SER 1 2 1 0\n1\n2\n";
        assert_eq!(write_dataset(&parse_dataset(unlabeled).unwrap()), unlabeled);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = "AUTOCL-CLS 1 1 2 1\nlabel 0\n0.5\nabc\n";
        match parse_dataset(bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_dataset("NOPE 1\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_dataset("AUTOCL-SER 1 2 1 1\n1 0\n2 7\n"), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn label_gap_is_validation_error() {
        let gap = "AUTOCL-CLS 1 2 1 1\nlabel 0\n1\nlabel 2\n1\n";
        assert!(matches!(parse_dataset(gap), Err(Error::Validation(_))));
    }
}
