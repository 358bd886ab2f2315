use rand::distr::{Distribution, weighted::WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, Poisson};
use serde::{Deserialize, Serialize};

use super::sequence::{MarkedSequence, SequencePool};
use crate::error::{Error, Result};

/// Settings for [`generate_synthetic`].
///
/// Event times follow a self-exciting process with exponential kernel,
/// `intensity(t) = base_intensity + excitation * decay * sum_i exp(-decay (t - t_i))`,
/// so `excitation` is the branching ratio. Each event's marker is drawn, with
/// probability `coupling`, from the class whose quantile band contains the
/// mean of the `window` most recent inter-event gaps before it, and otherwise
/// from `priors`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub sequences: usize,
    pub num_classes: usize,
    pub priors: Vec<f64>,
    pub base_intensity: f64,
    pub excitation: f64,
    pub decay: f64,
    pub mean_length: f64,
    pub coupling: f64,
    pub window: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            sequences: 1000,
            num_classes: 3,
            priors: vec![0.506, 0.45, 0.044],
            base_intensity: 1.0,
            excitation: 0.5,
            decay: 1.0,
            mean_length: 50.0,
            coupling: 0.8,
            window: 3,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.sequences == 0 {
            return bad("sequences must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.priors.len() != self.num_classes {
            return bad(format!("{} priors for {} classes", self.priors.len(), self.num_classes));
        }
        if self.priors.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return bad("priors must be non-negative".into());
        }
        let sum: f64 = self.priors.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("priors sum to {sum}, expected 1"));
        }
        if !self.base_intensity.is_finite() || self.base_intensity <= 0.0 {
            return bad("base intensity must be positive".into());
        }
        if !(0.0..1.0).contains(&self.excitation) {
            return bad(format!("excitation {} must lie in [0, 1)", self.excitation));
        }
        if !self.decay.is_finite() || self.decay <= 0.0 {
            return bad("decay must be positive".into());
        }
        if !self.mean_length.is_finite() || self.mean_length < 2.0 {
            return bad("mean length must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return bad(format!("coupling {} must lie in [0, 1]", self.coupling));
        }
        if self.window == 0 {
            return bad("window must be positive".into());
        }
        Ok(())
    }
}

/// Ogata thinning for an exponential-kernel self-exciting process. The first
/// event sits at time 0; returns exactly `count` strictly increasing times.
pub fn simulate_hawkes(
    base: f64,
    excitation: f64,
    decay: f64,
    count: usize,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let mut times = Vec::with_capacity(count);
    times.push(0.0);
    let mut t = 0.0;
    // sum_i exp(-decay (t - t_i)) at the current time
    let mut excite = 1.0;
    while times.len() < count {
        let bound = base + excitation * decay * excite;
        let wait = Exp::new(bound).expect("positive rate").sample(rng);
        let next = t + wait;
        excite *= (-decay * wait).exp();
        t = next;
        let intensity = base + excitation * decay * excite;
        if rng.random::<f64>() * bound <= intensity && next > *times.last().unwrap() {
            times.push(next);
            excite += 1.0;
        }
    }
    times
}

/// Mean of the `window` most recent completed gaps before each event;
/// `None` when no gap precedes it yet.
fn recent_gaps(times: &[f64], window: usize) -> Vec<Option<f64>> {
    (0..times.len())
        .map(|j| {
            // gaps g_i = t_i - t_{i-1} for i in [max(1, j - window), j - 1]
            if j < 2 {
                return None;
            }
            let lo = j.saturating_sub(window).max(1);
            let n = (j - lo) as f64;
            Some((lo..j).map(|i| times[i] - times[i - 1]).sum::<f64>() / n)
        })
        .collect()
}

/// Draws a synthetic pool. Deterministic for a given `(config, seed)`.
pub fn generate_synthetic(config: &GeneratorConfig, seed: u64) -> Result<SequencePool> {
    config.validate()?;
    let mut time_rng = ChaCha8Rng::seed_from_u64(seed);
    time_rng.set_stream(1);
    let mut marker_rng = ChaCha8Rng::seed_from_u64(seed);
    marker_rng.set_stream(2);

    let extra = config.mean_length - 2.0;
    let lengths = Poisson::new(extra.max(f64::MIN_POSITIVE)).expect("valid Poisson mean");
    let all_times: Vec<Vec<f64>> = (0..config.sequences)
        .map(|_| {
            let k = if extra > 0.0 { 2 + lengths.sample(&mut time_rng) as usize } else { 2 };
            simulate_hawkes(config.base_intensity, config.excitation, config.decay, k, &mut time_rng)
        })
        .collect();

    // Quantile bands of the recent-gap statistic, cut at the cumulative priors.
    let recents: Vec<Vec<Option<f64>>> = all_times.iter().map(|t| recent_gaps(t, config.window)).collect();
    let mut pooled: Vec<f64> = recents.iter().flatten().flatten().copied().collect();
    pooled.sort_by(f64::total_cmp);
    let mut thresholds = Vec::with_capacity(config.num_classes - 1);
    let mut cum = 0.0;
    for p in &config.priors[..config.num_classes - 1] {
        cum += p;
        let idx = ((cum * pooled.len() as f64) as usize).min(pooled.len().saturating_sub(1));
        thresholds.push(pooled.get(idx).copied().unwrap_or(f64::INFINITY));
    }

    let prior_dist = WeightedIndex::new(&config.priors)
        .map_err(|e| Error::InvalidConfig(format!("priors: {e}")))?;
    let mut sequences = Vec::with_capacity(config.sequences);
    for (i, (times, recent)) in all_times.into_iter().zip(recents).enumerate() {
        let markers = recent
            .iter()
            .map(|r| {
                let coupled = marker_rng.random::<f64>() < config.coupling;
                let fallback = prior_dist.sample(&mut marker_rng);
                match r {
                    Some(r) if coupled => thresholds.iter().filter(|&&t| *r >= t).count(),
                    _ => fallback,
                }
            })
            .collect();
        sequences.push(MarkedSequence::new(format!("seq-{i:06}"), times, Some(markers))?);
    }
    SequencePool::new(sequences, config.num_classes)
}
