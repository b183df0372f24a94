use std::io::{BufRead, Write};

use super::{DataError, InteractionRecord};

/// Parses `user<TAB>item<TAB>timestamp` lines. A first line whose timestamp
/// field is not an integer is taken as a header and skipped; blank lines are
/// ignored.
pub fn parse_interactions<R: BufRead>(input: R) -> Result<Vec<InteractionRecord>, DataError> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(DataError::Parse {
                line: lineno,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let timestamp = match fields[2].trim().parse::<i64>() {
            Ok(t) => t,
            Err(_) if lineno == 1 => continue,
            Err(_) => {
                return Err(DataError::Parse {
                    line: lineno,
                    msg: format!("timestamp {:?} is not an integer", fields[2]),
                })
            }
        };
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(DataError::Parse { line: lineno, msg: "empty user or item id".into() });
        }
        records.push(InteractionRecord::new(fields[0], fields[1], timestamp));
    }
    Ok(records)
}

pub fn write_interactions<W: Write>(records: &[InteractionRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}\t{}\t{}", r.user, r.item, r.timestamp)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_line() {
        let recs = parse_interactions("u1\ti9\t100".as_bytes()).unwrap();
        assert_eq!(recs, vec![InteractionRecord::new("u1", "i9", 100)]);
    }

    #[test]
    fn empty_input() {
        assert!(parse_interactions("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn missing_field_reports_line() {
        match parse_interactions("u1\ti9".as_bytes()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn header_is_optional_but_only_first() {
        let recs = parse_interactions("user\titem\tts\nu1\ti1\t5\n".as_bytes()).unwrap();
        assert_eq!(recs.len(), 1);
        assert!(parse_interactions("u1\ti1\t5\nuser\titem\tts\n".as_bytes()).is_err());
    }

    #[test]
    fn write_then_parse() {
        let recs = vec![InteractionRecord::new("a", "x", 3), InteractionRecord::new("b", "y", -1)];
        let mut buf = Vec::new();
        write_interactions(&recs, &mut buf).unwrap();
        assert_eq!(parse_interactions(&buf[..]).unwrap(), recs);
    }
}
