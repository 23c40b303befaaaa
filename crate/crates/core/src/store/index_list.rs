use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::format::write_atomic;

/// Writes newline-delimited decimal sample ids.
pub fn write_index_list(path: &Path, ids: &[u64]) -> Result<()> {
    let mut text = String::with_capacity(ids.len() * 8);
    for id in ids {
        text.push_str(&id.to_string());
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_index_list(path: &Path) -> Result<Vec<u64>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_index_list(&text).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_index_list(text: &str) -> Result<Vec<u64>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim()
                .parse::<u64>()
                .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("subset.idx");
        write_index_list(&p, &[3, 0, 18446744073709551615]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "3\n0\n18446744073709551615\n");
        assert_eq!(read_index_list(&p).unwrap(), vec![3, 0, u64::MAX]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_index_list("1\nx\n").is_err());
    }
}
