//! `# kind=transfer|interaction n=<n> k=<k>` followed by `i,j,value` rows.

use std::io::{BufRead, Write};

use crate::interaction::{InteractionMatrix, TransferMatrix};
use crate::numerics::CsrMatrix;
use crate::{Error, Result};

fn header(kind: &str, n: usize, k: usize) -> String {
    format!("# kind={} n={} k={}", kind, n, k)
}

fn parse_header(line: &str, kind: &str) -> Result<(usize, usize)> {
    let bad = || Error::Parse { line: 1, msg: format!("bad matrix header {:?}", line) };
    let rest = line.strip_prefix("# ").ok_or_else(bad)?;
    let mut n = None;
    let mut k = None;
    let mut seen_kind = false;
    for tok in rest.split_whitespace() {
        let (key, val) = tok.split_once('=').ok_or_else(bad)?;
        match key {
            "kind" if val == kind => seen_kind = true,
            "kind" => {
                return Err(Error::Parse { line: 1, msg: format!("expected kind={}, got kind={}", kind, val) })
            }
            "n" => n = val.parse().ok(),
            "k" => k = val.parse().ok(),
            _ => return Err(bad()),
        }
    }
    match (seen_kind, n, k) {
        (true, Some(n), Some(k)) => Ok((n, k)),
        _ => Err(bad()),
    }
}

pub fn write_transfer_matrix<W: Write>(mut out: W, p: &TransferMatrix) -> Result<()> {
    writeln!(out, "{}", header("transfer", p.n(), p.k()))?;
    for (i, j, v) in p.iter() {
        writeln!(out, "{},{},{}", i, j, v)?;
    }
    Ok(())
}

pub fn write_interaction_matrix<W: Write>(mut out: W, s: &InteractionMatrix) -> Result<()> {
    writeln!(out, "{}", header("interaction", s.n(), s.k()))?;
    for &(i, j) in s.edges() {
        writeln!(out, "{},{},1", i, j)?;
    }
    Ok(())
}

fn read_rows<R: BufRead>(input: R, kind: &str) -> Result<(usize, usize, Vec<(usize, usize, f64)>)> {
    let mut lines = input.lines();
    let first = lines.next().ok_or_else(|| Error::Parse { line: 1, msg: "empty matrix file".into() })??;
    let (n, k) = parse_header(first.trim_end(), kind)?;
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let lineno = idx + 2;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Parse { line: lineno, msg: format!("expected i,j,value, got {:?}", line) });
        }
        let perr = |e: String| Error::Parse { line: lineno, msg: e };
        let i: usize = parts[0].trim().parse().map_err(|e: std::num::ParseIntError| perr(e.to_string()))?;
        let j: usize = parts[1].trim().parse().map_err(|e: std::num::ParseIntError| perr(e.to_string()))?;
        let v: f64 = parts[2].trim().parse().map_err(|e: std::num::ParseFloatError| perr(e.to_string()))?;
        if i >= n || j >= n {
            return Err(perr(format!("index ({}, {}) out of range for n = {}", i, j, n)));
        }
        rows.push((i, j, v));
    }
    Ok((n, k, rows))
}

pub fn read_transfer_matrix<R: BufRead>(input: R) -> Result<TransferMatrix> {
    let (n, k, entries) = read_rows(input, "transfer")?;
    let mut rows = vec![Vec::new(); n];
    for (i, j, v) in entries {
        rows[i].push((j, v));
    }
    TransferMatrix::from_csr(k, CsrMatrix::from_rows(n, rows)?)
}

pub fn read_interaction_matrix<R: BufRead>(input: R) -> Result<InteractionMatrix> {
    let (n, k, entries) = read_rows(input, "interaction")?;
    InteractionMatrix::new(k, n, entries.into_iter().map(|(i, j, _)| (i, j)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transfer_file_round_trip() {
        let csr = CsrMatrix::from_rows(3, vec![vec![(1, 0.75), (2, 0.25)], vec![(2, 1.0)], vec![]]).unwrap();
        let p = TransferMatrix::from_csr(2, csr).unwrap();
        let mut buf = Vec::new();
        write_transfer_matrix(&mut buf, &p).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "# kind=transfer n=3 k=2\n0,1,0.75\n0,2,0.25\n1,2,1\n");
        assert_eq!(read_transfer_matrix(&buf[..]).unwrap(), p);
    }

    #[test]
    fn interaction_file_round_trip() {
        let s = InteractionMatrix::new(5, 4, vec![(0, 1), (3, 2)]).unwrap();
        let mut buf = Vec::new();
        write_interaction_matrix(&mut buf, &s).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "# kind=interaction n=4 k=5\n0,1,1\n2,3,1\n");
        assert_eq!(read_interaction_matrix(&buf[..]).unwrap(), s);
    }

    #[test]
    fn kind_mismatch_rejected() {
        let text = "# kind=interaction n=2 k=1\n0,1,1\n";
        assert!(read_transfer_matrix(text.as_bytes()).is_err());
    }
}
