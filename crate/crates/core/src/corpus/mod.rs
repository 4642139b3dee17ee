//! One-to-many corpora: synthetic generation, JSONL files, vocabulary and batching.

mod batch;
mod synth;
mod vocab;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{batchify, flatten, Batch, Padded, Pair};
pub use synth::{num_templates, synth_generate};
pub use vocab::{Vocab, BOS, EOS, PAD, RESERVED, UNK};

/// One tokenized source with all of its tokenized targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OneToManyExample {
    pub source: Vec<String>,
    pub targets: Vec<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct JsonLine {
    source: String,
    targets: Vec<String>,
}

fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

impl OneToManyExample {
    /// Whitespace-tokenized, lowercased example. Rejects empty sequences.
    pub fn from_text<S: AsRef<str>>(source: &str, targets: &[S]) -> std::result::Result<Self, String> {
        if targets.is_empty() {
            return Err("example has no targets".into());
        }
        let source = tokenize(source);
        if source.is_empty() {
            return Err("empty source".into());
        }
        let targets = targets
            .iter()
            .map(|t| {
                let toks = tokenize(t.as_ref());
                if toks.is_empty() {
                    Err("empty target".to_string())
                } else {
                    Ok(toks)
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { source, targets })
    }
}

/// Reads `{"source": ..., "targets": [...]}` lines. Blank lines are skipped.
pub fn load_jsonl(path: &Path) -> Result<Vec<OneToManyExample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let data_err = |msg: String| Error::Data {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let parsed: JsonLine = serde_json::from_str(&line).map_err(|e| data_err(e.to_string()))?;
        let ex = OneToManyExample::from_text(&parsed.source, &parsed.targets).map_err(data_err)?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[OneToManyExample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in examples {
        let line = JsonLine {
            source: ex.source.join(" "),
            targets: ex.targets.iter().map(|t| t.join(" ")).collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Deterministic split of examples into (train, validation), holding out
/// `valid_fraction` of the items (at least one when there are two or more).
pub fn split_items(
    examples: &[OneToManyExample],
    valid_fraction: f64,
) -> (Vec<OneToManyExample>, Vec<OneToManyExample>) {
    let n = examples.len();
    let mut n_valid = (n as f64 * valid_fraction).round() as usize;
    if n >= 2 {
        n_valid = n_valid.clamp(1, n - 1);
    } else {
        n_valid = 0;
    }
    let cut = n - n_valid;
    (examples[..cut].to_vec(), examples[cut..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_empty_list() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(load_jsonl(f.path()).unwrap().is_empty());
    }

    #[test]
    fn single_line() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), "{\"source\":\"a B\",\"targets\":[\"c\"]}\n").unwrap();
        let ex = load_jsonl(f.path()).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].source, vec!["a", "b"]);
        assert_eq!(ex[0].targets, vec![vec!["c"]]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), "{\"source\":\"a\",\"targets\":[\"c\"]}\n{oops\n").unwrap();
        match load_jsonl(f.path()) {
            Err(Error::Data { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_targets_rejected() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), "{\"source\":\"a\",\"targets\":[]}\n").unwrap();
        assert!(matches!(load_jsonl(f.path()), Err(Error::Data { line: 1, .. })));
    }

    #[test]
    fn synthetic_round_trip() {
        let corpus = synth_generate(30, 4, 2);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_jsonl(f.path(), &corpus).unwrap();
        assert_eq!(load_jsonl(f.path()).unwrap(), corpus);
    }

    #[test]
    fn flatten_preserves_pair_count() {
        let corpus = synth_generate(25, 3, 4);
        let vocab = Vocab::build(&corpus, 1);
        assert_eq!(flatten(&corpus, &vocab).len(), 75);
    }

    #[test]
    fn split_holds_out_tail() {
        let corpus = synth_generate(10, 1, 0);
        let (tr, va) = split_items(&corpus, 0.1);
        assert_eq!((tr.len(), va.len()), (9, 1));
        assert_eq!(va[0], corpus[9]);
    }
}
