//! Matrix CSV files.
//!
//! Layout: a `#shape rows cols` pragma on the first line, an optional header
//! row, then one line per matrix row holding a leading row index followed by
//! `cols` values. Further lines starting with `#` are ignored.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::DMatrix;
use nlsdof::sim::format_real;

fn parse_pragma(line: &str) -> Result<(usize, usize)> {
    let rest = line
        .trim()
        .strip_prefix("#shape")
        .ok_or_else(|| anyhow!("first line must be a `#shape rows cols` pragma, found {line:?}"))?;
    let dims: Vec<&str> = rest.split_whitespace().collect();
    if dims.len() != 2 {
        bail!("shape pragma needs exactly two dimensions, found {line:?}");
    }
    let rows = dims[0]
        .parse::<usize>()
        .with_context(|| format!("bad row count {:?}", dims[0]))?;
    let cols = dims[1]
        .parse::<usize>()
        .with_context(|| format!("bad column count {:?}", dims[1]))?;
    if rows == 0 || cols == 0 {
        bail!("shape pragma declares an empty matrix");
    }
    Ok((rows, cols))
}

pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>> {
    let first = text.lines().next().ok_or_else(|| anyhow!("empty file"))?;
    let (rows, cols) = parse_pragma(first)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = DMatrix::zeros(rows, cols);
    let mut seen = vec![false; rows];
    let mut first_record = true;
    for record in reader.records() {
        let record = record.context("malformed CSV")?;
        if record.iter().all(str::is_empty) || record.get(0).is_some_and(|f| f.starts_with('#')) {
            continue;
        }
        let is_header = first_record && record.get(0).is_some_and(|f| f.parse::<f64>().is_err());
        first_record = false;
        if is_header {
            continue;
        }
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != cols + 1 {
            bail!(
                "line {line}: expected an index and {cols} values, found {} fields",
                record.len()
            );
        }
        let idx: usize = record[0]
            .parse()
            .with_context(|| format!("line {line}: bad row index {:?}", &record[0]))?;
        if idx >= rows {
            bail!("line {line}: row index {idx} out of range for {rows} rows");
        }
        if seen[idx] {
            bail!("line {line}: row {idx} appears twice");
        }
        seen[idx] = true;
        for c in 0..cols {
            let field = &record[c + 1];
            let v: f64 = field
                .parse()
                .with_context(|| format!("line {line}: bad value {field:?}"))?;
            if !v.is_finite() {
                bail!("line {line}: non-finite value {field:?}");
            }
            out[(idx, c)] = v;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        bail!("row {missing} is missing");
    }
    Ok(out)
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    parse_matrix(&text).with_context(|| format!("in {}", path.display()))
}

pub fn write_matrix<W: Write>(out: &mut W, m: &DMatrix<f64>) -> std::io::Result<()> {
    writeln!(out, "#shape {} {}", m.nrows(), m.ncols())?;
    let header: Vec<String> = (0..m.ncols()).map(|c| format!("c{c}")).collect();
    writeln!(out, "row,{}", header.join(","))?;
    for r in 0..m.nrows() {
        let fields: Vec<String> = m.row(r).iter().map(|v| format_real(*v)).collect();
        writeln!(out, "{r},{}", fields.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, -2.5, 3.0, 0.1, 1e-300, -7.0]);
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        let back = parse_matrix(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rows_may_come_in_any_order_without_header() {
        let m = parse_matrix("#shape 2 2\n1,3,4\n0,1,2\n").unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse_matrix("0,1,2\n").is_err());
        assert!(parse_matrix("#shape 2 2\n0,1,2\n").is_err());
        assert!(parse_matrix("#shape 1 2\n0,1\n").is_err());
        assert!(parse_matrix("#shape 1 2\n0,1,x\n").is_err());
        assert!(parse_matrix("#shape 1 2\n0,1,2\n0,1,2\n").is_err());
        assert!(parse_matrix("#shape 1 2\n3,1,2\n").is_err());
    }
}
