//! Line-delimited JSON record helpers shared by every file format.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Key of the provenance record that may open an artifact file.
pub const HEADER_KEY: &str = "header";

fn is_header(line: &str) -> bool {
    line.trim_start().starts_with("{\"header\":")
}

/// Parses one record per non-blank line, returning each with its 1-based
/// line number. A leading header record is skipped.
pub fn read_records<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() || (out.is_empty() && is_header(&line)) {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: lineno,
            reason: e.to_string(),
        })?;
        out.push((lineno, record));
    }
    Ok(out)
}

pub fn write_record<T: Serialize, W: Write>(writer: &mut W, record: &T) -> Result<()> {
    serde_json::to_writer(&mut *writer, record)?;
    writer.write_all(b"\n")?;
    Ok(())
}

pub fn write_records<'a, T, W, I>(writer: &mut W, records: I) -> Result<()>
where
    T: Serialize + 'a,
    W: Write,
    I: IntoIterator<Item = &'a T>,
{
    for record in records {
        write_record(writer, record)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Rec {
        a: u32,
    }

    #[test]
    fn skips_blank_lines_and_reports_line_numbers() {
        let src = "{\"a\":1}\n\n{\"a\":2}\n{oops}\n";
        let err = read_records::<Rec, _>(src.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::MalformedRecord { line: 4, .. }));

        let ok = read_records::<Rec, _>("{\"a\":1}\n\n{\"a\":2}\n".as_bytes()).unwrap();
        assert_eq!(ok, vec![(1, Rec { a: 1 }), (3, Rec { a: 2 })]);
    }
}
