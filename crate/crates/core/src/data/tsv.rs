use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};

use super::example::{Example, Schema};

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.into(),
        line,
        msg: msg.into(),
    }
}

/// Reads a headed, tab-separated file. Quoted cells may contain tabs.
///
/// Malformed rows abort the load in strict mode; otherwise they are logged
/// with their line number and skipped.
pub fn load_tsv(path: &Path, schema: Schema, strict: bool) -> Result<Vec<Example>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .flexible(true)
        .from_reader(file);

    let header = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != schema.columns() {
        return Err(parse_err(
            path,
            1,
            format!("header {got:?} does not match {schema} columns {:?}", schema.columns()),
        ));
    }

    let want = schema.columns().len();
    let mut out = Vec::new();
    for record in reader.records() {
        let row = record.map(|r| (r.position().map_or(0, |p| p.line() as usize), r));
        let (line, record) = match row {
            Ok(x) => x,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line() as usize);
                if strict {
                    return Err(parse_err(path, line, e.to_string()));
                }
                log::warn!("{}:{line}: skipping unreadable row: {e}", path.display());
                continue;
            }
        };
        let parsed = if record.len() != want {
            Err(Error::Dataset(format!("expected {want} columns, found {}", record.len())))
        } else {
            let cells: Vec<&str> = record.iter().collect();
            Example::from_record(schema, &cells)
        };
        match parsed {
            Ok(ex) => out.push(ex),
            Err(e) if strict => return Err(parse_err(path, line, e.to_string())),
            Err(e) => log::warn!("{}:{line}: skipping row: {e}", path.display()),
        }
    }
    Ok(out)
}

/// Writes examples under the header of their schema.
pub fn write_tsv(path: &Path, examples: &[Example]) -> Result<()> {
    let schema = examples
        .first()
        .map(Example::schema)
        .ok_or_else(|| Error::invalid("cannot infer a schema from zero examples"))?;
    super::example::expect_schema(examples, schema, "write_tsv")?;
    write_tsv_as(path, schema, examples)
}

pub fn write_tsv_as(path: &Path, schema: Schema, examples: &[Example]) -> Result<()> {
    let to_io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(to_io)?;
    w.write_record(schema.columns()).map_err(to_io)?;
    for ex in examples {
        if ex.schema() != schema {
            return Err(Error::Dataset(format!("cannot write a {} row into a {schema} file", ex.schema())));
        }
        w.write_record(ex.to_record()).map_err(to_io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
