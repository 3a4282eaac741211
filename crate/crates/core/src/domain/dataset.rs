use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::domain::Sample;
use crate::error::{Error, Result};

/// A broken dataset invariant. Violations are data, not faults.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub sample_id: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sample #{} ({:?}): {}", self.index, self.sample_id, self.message)
    }
}

pub fn validate_dataset(samples: &[Sample]) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut first_seen: HashMap<&str, usize> = HashMap::new();
    for (index, s) in samples.iter().enumerate() {
        let mut push = |message: String| {
            out.push(Violation {
                index,
                sample_id: s.id.clone(),
                message,
            })
        };
        if s.id.is_empty() {
            push("empty id".into());
        }
        if let Some(&prev) = first_seen.get(s.id.as_str()) {
            push(format!("duplicate id {:?} (first at #{prev})", s.id));
        } else {
            first_seen.insert(&s.id, index);
        }
        if s.question.trim().is_empty() {
            push("empty question".into());
        }
        if let Some(opts) = &s.options {
            if opts.len() < 2 {
                push(format!("{} option(s); at least 2 required", opts.len()));
            }
        }
        if let Some(gold) = &s.gold {
            if let Err(e) = gold.check() {
                push(e.into());
            }
        }
    }
    out
}

/// Reads one JSON sample per line; blank lines are skipped.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line).map_err(|e| Error::Dataset {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
