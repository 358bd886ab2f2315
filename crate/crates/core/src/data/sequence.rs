use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One event sequence: strictly increasing timestamps and, when labeled,
/// one marker class per event.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkedSequence {
    id: String,
    times: Vec<f64>,
    markers: Option<Vec<usize>>,
}

impl MarkedSequence {
    pub fn new(id: impl Into<String>, times: Vec<f64>, markers: Option<Vec<usize>>) -> Result<Self> {
        let id = id.into();
        let invalid = |msg: String| Error::InvalidRecord { index: 0, msg: format!("sequence `{id}`: {msg}") };
        if times.len() < 2 {
            return Err(invalid(format!("needs at least 2 events, got {}", times.len())));
        }
        if let Some(t) = times.iter().find(|t| !t.is_finite()) {
            return Err(invalid(format!("non-finite time {t}")));
        }
        if let Some(k) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(invalid(format!(
                "non-monotone time at event {}: {} after {}",
                k + 1,
                times[k + 1],
                times[k]
            )));
        }
        if let Some(m) = &markers {
            if m.len() != times.len() {
                return Err(invalid(format!("{} markers for {} events", m.len(), times.len())));
            }
        }
        Ok(MarkedSequence { id, times, markers })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn markers(&self) -> Option<&[usize]> {
        self.markers.as_deref()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.markers.is_some()
    }

    /// Inter-event gaps; the first event gets a gap of 0.
    pub fn gaps(&self) -> Vec<f64> {
        std::iter::once(0.0).chain(self.times.windows(2).map(|w| w[1] - w[0])).collect()
    }

    /// Copy with the marker labels removed.
    pub fn without_markers(&self) -> Self {
        MarkedSequence { id: self.id.clone(), times: self.times.clone(), markers: None }
    }
}

/// A collection of sequences sharing one marker vocabulary of `num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequencePool {
    sequences: Vec<MarkedSequence>,
    num_classes: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    times: Vec<f64>,
    markers: Option<Vec<usize>>,
}

impl SequencePool {
    pub fn new(sequences: Vec<MarkedSequence>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 marker classes, got {num_classes}")));
        }
        let mut seen = std::collections::HashSet::new();
        for (index, s) in sequences.iter().enumerate() {
            if !seen.insert(s.id()) {
                return Err(Error::InvalidRecord { index, msg: format!("duplicate id `{}`", s.id()) });
            }
            if let Some(m) = s.markers().and_then(|m| m.iter().find(|&&c| c >= num_classes)) {
                return Err(Error::InvalidRecord {
                    index,
                    msg: format!("marker {m} out of range [0, {num_classes})"),
                });
            }
        }
        Ok(SequencePool { sequences, num_classes })
    }

    pub fn sequences(&self) -> &[MarkedSequence] {
        &self.sequences
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn events(&self) -> usize {
        self.sequences.iter().map(MarkedSequence::len).sum()
    }

    pub fn get(&self, id: &str) -> Option<&MarkedSequence> {
        self.sequences.iter().find(|s| s.id() == id)
    }

    /// Per-class event counts over labeled sequences.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for m in self.sequences.iter().filter_map(MarkedSequence::markers) {
            for &c in m {
                counts[c] += 1;
            }
        }
        counts
    }

    /// Parses newline-delimited JSON records
    /// `{"id": ..., "times": [...], "markers": [...] | null}`.
    pub fn from_reader(reader: impl BufRead, num_classes: usize) -> Result<Self> {
        let mut sequences = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record =
                serde_json::from_str(&line).map_err(|e| Error::Parse { line: n + 1, msg: e.to_string() })?;
            let index = sequences.len();
            let seq = MarkedSequence::new(rec.id, rec.times, rec.markers).map_err(|e| match e {
                Error::InvalidRecord { msg, .. } => Error::InvalidRecord { index, msg },
                other => other,
            })?;
            sequences.push(seq);
        }
        Self::new(sequences, num_classes)
    }

    pub fn load(path: impl AsRef<Path>, num_classes: usize) -> Result<Self> {
        Self::from_reader(BufReader::new(File::open(path)?), num_classes)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for s in &self.sequences {
            let rec = Record { id: s.id.clone(), times: s.times.clone(), markers: s.markers.clone() };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Loads a Retweet-style pool (three marker classes).
pub fn load_retweet_format(path: impl AsRef<Path>) -> Result<SequencePool> {
    SequencePool::load(path, 3)
}
