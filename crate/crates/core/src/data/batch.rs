use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sequence::MarkedSequence;
use crate::error::{Error, Result};

/// Standardizes `ln(1 + gap)` with statistics fitted on training data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: f64,
    pub std: f64,
}

impl Default for FeatureScaler {
    fn default() -> Self {
        FeatureScaler { mean: 0.0, std: 1.0 }
    }
}

impl FeatureScaler {
    /// Fits on every gap (first event included) of the given sequences.
    pub fn fit<'a>(sequences: impl IntoIterator<Item = &'a MarkedSequence>) -> Self {
        let logs: Vec<f64> = sequences.into_iter().flat_map(|s| s.gaps()).map(f64::ln_1p).collect();
        if logs.is_empty() {
            return Self::default();
        }
        let n = logs.len() as f64;
        let mean = logs.iter().sum::<f64>() / n;
        let var = logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        FeatureScaler { mean, std }
    }

    pub fn transform(&self, gap: f64) -> f64 {
        (gap.ln_1p() - self.mean) / self.std
    }

    /// Maps a standardized value back to a raw gap (clamped at 0).
    pub fn inverse(&self, z: f64) -> f64 {
        (z * self.std + self.mean).exp_m1().max(0.0)
    }
}

/// Padded, masked batch in row-major `[B x T]` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
    /// Standardized gap feature; 0 at padded positions.
    pub features: Vec<f64>,
    pub raw_gaps: Vec<f64>,
    /// `None` where the marker is unknown or the position is padding.
    pub markers: Vec<Option<usize>>,
    pub mask: Vec<bool>,
    pub labeled: Vec<bool>,
}

impl Batch {
    pub fn from_sequences(sequences: &[&MarkedSequence], scaler: &FeatureScaler) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::EmptyMask);
        }
        let max_len = sequences.iter().map(|s| s.len()).max().unwrap_or(0);
        let n = sequences.len() * max_len;
        let mut batch = Batch {
            ids: Vec::with_capacity(sequences.len()),
            lengths: Vec::with_capacity(sequences.len()),
            max_len,
            features: vec![0.0; n],
            raw_gaps: vec![0.0; n],
            markers: vec![None; n],
            mask: vec![false; n],
            labeled: Vec::with_capacity(sequences.len()),
        };
        for (b, s) in sequences.iter().enumerate() {
            batch.ids.push(s.id().to_string());
            batch.lengths.push(s.len());
            batch.labeled.push(s.is_labeled());
            for (t, gap) in s.gaps().into_iter().enumerate() {
                let k = b * max_len + t;
                batch.features[k] = scaler.transform(gap);
                batch.raw_gaps[k] = gap;
                batch.mask[k] = true;
                batch.markers[k] = s.markers().map(|m| m[t]);
            }
        }
        Ok(batch)
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn index(&self, b: usize, t: usize) -> usize {
        b * self.max_len + t
    }

    /// Gap features of step `t` across the batch.
    pub fn step_features(&self, t: usize) -> Vec<f64> {
        (0..self.batch_size()).map(|b| self.features[self.index(b, t)]).collect()
    }

    pub fn step_markers(&self, t: usize) -> Vec<Option<usize>> {
        (0..self.batch_size()).map(|b| self.markers[self.index(b, t)]).collect()
    }

    pub fn step_mask(&self, t: usize) -> Vec<bool> {
        (0..self.batch_size()).map(|b| self.mask[self.index(b, t)]).collect()
    }

    pub fn real_events(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Marker array with `-1` at unknown or padded positions.
    pub fn marker_codes(&self) -> Vec<i64> {
        self.markers.iter().map(|m| m.map_or(-1, |c| c as i64)).collect()
    }
}

/// Shuffles `sequences` with `rng` and yields padded batches of at most
/// `batch_size` sequences.
pub fn batch_iter<'a>(
    sequences: &'a [MarkedSequence],
    scaler: &'a FeatureScaler,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<impl Iterator<Item = Batch> + 'a> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.shuffle(rng);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |idx| {
        let seqs: Vec<&MarkedSequence> = idx.iter().map(|&i| &sequences[i]).collect();
        Batch::from_sequences(&seqs, scaler).expect("chunks are non-empty")
    }))
}

/// Unshuffled batches in input order, for evaluation.
pub fn ordered_batches<'a>(
    sequences: &'a [MarkedSequence],
    scaler: &'a FeatureScaler,
    batch_size: usize,
) -> impl Iterator<Item = Batch> + 'a {
    sequences.chunks(batch_size.max(1)).map(move |chunk| {
        let seqs: Vec<&MarkedSequence> = chunk.iter().collect();
        Batch::from_sequences(&seqs, scaler).expect("chunks are non-empty")
    })
}
