use std::fs;
use std::io::Write;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// A source/target pair, e.g. a misspelled word and its correction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub source: String,
    pub target: String,
}

impl Example {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Result<Self> {
        let (source, target) = (source.into(), target.into());
        if source.is_empty() || target.is_empty() {
            return Err(Error::Data(format!(
                "example {source:?} -> {target:?} has an empty side"
            )));
        }
        Ok(Example { source, target })
    }
}

/// NFC normalisation, optionally lowercased.
pub fn normalize(s: &str, lowercase: bool) -> String {
    let nfc: String = s.nfc().collect();
    if lowercase {
        nfc.to_lowercase()
    } else {
        nfc
    }
}

/// Parses `source<TAB>target` lines. Line numbers in errors are 1-based.
pub fn parse_tsv(text: &str, lowercase: bool) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        let mut parts = line.split('\t');
        let (Some(src), Some(tgt), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::DataLine {
                line: i + 1,
                msg: "expected exactly one TAB".into(),
            });
        };
        let (src, tgt) = (normalize(src, lowercase), normalize(tgt, lowercase));
        if src.is_empty() || tgt.is_empty() {
            return Err(Error::DataLine {
                line: i + 1,
                msg: "empty source or target".into(),
            });
        }
        out.push(Example {
            source: src,
            target: tgt,
        });
    }
    Ok(out)
}

pub fn load_tsv(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    load_tsv_with(path, false)
}

pub fn load_tsv_with(path: impl AsRef<Path>, lowercase: bool) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&text, lowercase)
}

pub fn write_tsv(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for ex in examples {
        writeln!(buf, "{}\t{}", ex.source, ex.target).expect("write to Vec");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_line() {
        let ex = parse_tsv("abc\tabd\n", false).unwrap();
        assert_eq!(ex, vec![Example::new("abc", "abd").unwrap()]);
    }

    #[test]
    fn empty_file_is_empty_list() {
        assert!(parse_tsv("", false).unwrap().is_empty());
    }

    #[test]
    fn crlf_and_order_preserved() {
        let ex = parse_tsv("b\tc\r\na\td\r\n", false).unwrap();
        assert_eq!(ex[0].target, "c");
        assert_eq!(ex[1].source, "a");
    }

    #[test]
    fn two_tabs_report_the_line() {
        let err = parse_tsv("a\tb\nx\ty\tz\n", false).unwrap_err();
        assert!(matches!(err, Error::DataLine { line: 2, .. }), "{err}");
    }

    #[test]
    fn nfc_and_lowercase() {
        let decomposed = "Cafe\u{301}\tcafé";
        let ex = parse_tsv(decomposed, true).unwrap();
        assert_eq!(ex[0].source, "café");
        assert_eq!(ex[0].source, ex[0].target);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tsv");
        let ex = vec![Example::new("teh", "the").unwrap(), Example::new("a", "a").unwrap()];
        write_tsv(&p, &ex).unwrap();
        assert_eq!(load_tsv(&p).unwrap(), ex);
        assert!(matches!(load_tsv(dir.path().join("missing.tsv")), Err(Error::Io { .. })));
    }
}
