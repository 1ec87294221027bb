//! CSV input and output. Numbers are written with Rust's shortest round-trip
//! formatting, so output is locale-independent and parses back bit-exactly.

use std::io::Write;
use std::path::Path;

use gamem::design::Table;

use crate::error::{input, CliError, Result};

const ROW_COLUMN: &str = "__row";

/// Reads the named numeric columns of a headed CSV file, in the given order.
pub fn read_table(path: &Path, columns: &[String]) -> Result<Table> {
    let file = std::fs::File::open(path).map_err(|e| input(format!("cannot read {}: {e}", path.display())))?;
    read_table_from(file, columns).map_err(|e| input(format!("{}: {e}", path.display())))
}

pub fn read_table_from<R: std::io::Read>(source: R, columns: &[String]) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let header = reader.headers().map_err(|e| input(format!("bad header: {e}")))?.clone();
    let mut index = Vec::with_capacity(columns.len());
    for c in columns {
        let mut hits = header.iter().enumerate().filter(|(_, h)| h == c).map(|(i, _)| i);
        match (hits.next(), hits.next()) {
            (Some(i), None) => index.push(i),
            (None, _) => return Err(input(format!("missing column `{c}`"))),
            (Some(_), Some(_)) => return Err(input(format!("column `{c}` appears twice in the header"))),
        }
    }
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); columns.len()];
    let mut rows = 0;
    for record in reader.records() {
        rows += 1;
        let record = record.map_err(|e| match e.position() {
            Some(p) => input(format!("line {}: {e}", p.line())),
            None => input(e.to_string()),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        for ((col, &i), out) in columns.iter().zip(&index).zip(values.iter_mut()) {
            let field = record.get(i).unwrap_or("");
            let v: f64 = field.parse().map_err(|_| {
                input(format!(
                    "line {line}, column `{col}`: cannot parse `{field}` as a number"
                ))
            })?;
            out.push(v);
        }
    }
    let mut table = Table::new();
    if columns.is_empty() {
        // intercept-only models still need the row count
        return Ok(table.with(ROW_COLUMN, (0..rows).map(|i| i as f64).collect()));
    }
    for (c, v) in columns.iter().zip(values) {
        table.push(c.clone(), v)?;
    }
    Ok(table)
}

pub fn number(v: f64) -> String {
    format!("{v}")
}

/// CSV writer on a file, or stdout when `path` is `None`.
pub fn writer(path: Option<&Path>) -> Result<csv::Writer<Box<dyn Write>>> {
    let sink: Box<dyn Write> = match path {
        Some(p) => Box::new(std::io::BufWriter::new(
            std::fs::File::create(p).map_err(|e| input(format!("cannot write {}: {e}", p.display())))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    };
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(sink))
}

fn write_error(e: std::io::Error) -> CliError {
    if e.kind() == std::io::ErrorKind::BrokenPipe {
        CliError::ClosedOutput
    } else {
        input(format!("write failed: {e}"))
    }
}

pub fn write_row<W: Write>(w: &mut csv::Writer<W>, fields: &[String]) -> Result<()> {
    w.write_record(fields).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => write_error(io),
        other => input(format!("write failed: {other:?}")),
    })
}

pub fn finish<W: Write>(mut w: csv::Writer<W>) -> Result<()> {
    w.flush().map_err(write_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cols(c: &[&str]) -> Vec<String> {
        c.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn reads_selected_columns() {
        let t = read_table_from("a, b,c\n1,2,x\n3, 4.5e1,y\n".as_bytes(), &cols(&["b", "a"])).unwrap();
        assert_eq!(t.column("a").unwrap(), &[1.0, 3.0]);
        assert_eq!(t.column("b").unwrap(), &[2.0, 45.0]);
    }

    #[test]
    fn reports_missing_columns_and_bad_lines() {
        let e = read_table_from("a,b\n1,2\n".as_bytes(), &cols(&["c"])).unwrap_err();
        assert!(e.to_string().contains("`c`"));
        let e = read_table_from("a,b\n1,2\n3,oops\n".as_bytes(), &cols(&["b"])).unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
        let e = read_table_from("a,b\n1,2\n3\n".as_bytes(), &cols(&["a"])).unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
    }

    #[test]
    fn empty_selection_keeps_the_row_count() {
        let t = read_table_from("a\n1\n2\n3\n".as_bytes(), &[]).unwrap();
        assert_eq!(t.nrows(), 3);
    }

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 123456789.125] {
            assert_eq!(number(v).parse::<f64>().unwrap(), v);
        }
    }
}
