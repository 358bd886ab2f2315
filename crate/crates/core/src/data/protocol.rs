use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sequence::{MarkedSequence, SequencePool};
use crate::error::{Error, Result};

/// Labeled-event budgets of the six evaluation protocols P-1 .. P-6.
pub const DEFAULT_BUDGETS: [usize; 6] = [10_000, 20_000, 30_000, 50_000, 140_000, 700_000];

/// On-disk split manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub protocol: String,
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl SplitManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidSplit(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidSplit(format!("manifest {}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Checks that the three id lists are pairwise disjoint and free of duplicates.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.labeled.iter().chain(&self.unlabeled).chain(&self.test) {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidSplit(format!("sequence `{id}` appears more than once")));
            }
        }
        Ok(())
    }
}

/// One protocol: a labeled-event budget and the resulting partition.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolSplit {
    pub budget: usize,
    pub manifest: SplitManifest,
    pub labeled_events: usize,
    pub unlabeled_events: usize,
    pub test_events: usize,
}

impl ProtocolSplit {
    pub fn name(&self) -> &str {
        &self.manifest.protocol
    }
}

/// Holds out a test set of at least `test_events` events, then for each
/// budget marks the shortest prefix of a seeded ordering of the remaining
/// sequences whose event total reaches the budget as labeled. Prefixes make
/// labeled sets nested across budgets.
pub fn make_protocol_splits(
    pool: &SequencePool,
    budgets: &[usize],
    test_events: usize,
    seed: u64,
) -> Result<Vec<ProtocolSplit>> {
    if budgets.is_empty() {
        return Err(Error::InvalidConfig("no labeled budgets given".into()));
    }
    if let Some(b) = budgets.iter().find(|&&b| b == 0) {
        return Err(Error::InvalidConfig(format!("labeled budget must be positive, got {b}")));
    }
    let seqs = pool.sequences();
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut test_count = 0;
    let mut test_len = 0;
    while test_len < test_events && test_count < order.len() {
        test_len += seqs[order[test_count]].len();
        test_count += 1;
    }
    let max_budget = *budgets.iter().max().unwrap();
    let train = &order[test_count..];
    let train_events: usize = train.iter().map(|&i| seqs[i].len()).sum();
    if test_len < test_events || train_events < max_budget {
        return Err(Error::InsufficientPool { available: pool.events(), required: max_budget + test_events });
    }
    let ids = |idx: &[usize]| idx.iter().map(|&i| seqs[i].id().to_string()).collect::<Vec<_>>();
    let test = ids(&order[..test_count]);

    let mut splits = Vec::with_capacity(budgets.len());
    for (k, &budget) in budgets.iter().enumerate() {
        let mut n = 0;
        let mut labeled_events = 0;
        while labeled_events < budget {
            labeled_events += seqs[train[n]].len();
            n += 1;
        }
        splits.push(ProtocolSplit {
            budget,
            manifest: SplitManifest {
                protocol: format!("P-{}", k + 1),
                labeled: ids(&train[..n]),
                unlabeled: ids(&train[n..]),
                test: test.clone(),
                seed,
            },
            labeled_events,
            unlabeled_events: train_events - labeled_events,
            test_events: test_len,
        });
    }
    Ok(splits)
}

/// Sequences of one split, with markers stripped from the unlabeled part.
#[derive(Clone, Debug)]
pub struct SplitView {
    pub protocol: String,
    pub num_classes: usize,
    pub labeled: Vec<MarkedSequence>,
    pub unlabeled: Vec<MarkedSequence>,
    pub test: Vec<MarkedSequence>,
}

impl SplitView {
    pub fn new(pool: &SequencePool, manifest: &SplitManifest) -> Result<Self> {
        manifest.check_disjoint()?;
        let index: HashMap<&str, &MarkedSequence> = pool.sequences().iter().map(|s| (s.id(), s)).collect();
        let fetch = |ids: &[String]| -> Result<Vec<&MarkedSequence>> {
            ids.iter()
                .map(|id| index.get(id.as_str()).copied().ok_or_else(|| Error::UnknownSequence(id.clone())))
                .collect()
        };
        let labeled = fetch(&manifest.labeled)?;
        if let Some(s) = labeled.iter().find(|s| !s.is_labeled()) {
            return Err(Error::MissingMarkers(format!("labeled sequence `{}` has no markers", s.id())));
        }
        Ok(SplitView {
            protocol: manifest.protocol.clone(),
            num_classes: pool.num_classes(),
            labeled: labeled.into_iter().cloned().collect(),
            unlabeled: fetch(&manifest.unlabeled)?.into_iter().map(MarkedSequence::without_markers).collect(),
            test: fetch(&manifest.test)?.into_iter().cloned().collect(),
        })
    }

    /// Labeled and unlabeled training sequences together.
    pub fn training(&self) -> impl Iterator<Item = &MarkedSequence> {
        self.labeled.iter().chain(&self.unlabeled)
    }
}
