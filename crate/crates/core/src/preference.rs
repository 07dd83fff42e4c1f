//! Relative preference tracking and the per-modality regularisation
//! schedule: the task mask that switches on prototype distillation for
//! neglected modalities, and the epoch-level coefficient on pixel
//! distillation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::presence::MissingRateVector;

/// Lower bound on the pixel-distillation coefficient.
pub const BETA_FLOOR: f64 = 0.1;

/// Preference measurements of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePreference {
    pub d: BTreeMap<usize, f64>,
    pub d_bar: f64,
    /// Relative preference for all `M` modalities; 0 where unavailable.
    pub rp: Vec<f64>,
    pub delta: Vec<u8>,
}

impl SamplePreference {
    pub fn available(&self) -> impl Iterator<Item = usize> + '_ {
        self.d.keys().copied()
    }
}

/// `RP^m = 1 - D^m / mean(D)` over the available modalities.
///
/// When every distance is zero the sample sits at the balancing point and
/// all preferences are 0.
pub fn relative_preference(d: &BTreeMap<usize, f64>, n_modalities: usize) -> Result<SamplePreference> {
    if d.is_empty() {
        return Err(Error::InvalidArgument("no available modality".into()));
    }
    if let Some((m, v)) = d.iter().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "distance {v} of modality {m} is negative or NaN"
        )));
    }
    if let Some(&m) = d.keys().find(|&&m| m >= n_modalities) {
        return Err(Error::OutOfRange {
            index: m,
            len: n_modalities,
        });
    }
    let d_bar = d.values().sum::<f64>() / d.len() as f64;
    let mut rp = vec![0.0; n_modalities];
    if d_bar > 0.0 {
        for (&m, &v) in d {
            rp[m] = 1.0 - v / d_bar;
        }
    }
    let mut pref = SamplePreference {
        d: d.clone(),
        d_bar,
        rp,
        delta: vec![0; n_modalities],
    };
    pref.delta = task_mask(&pref);
    Ok(pref)
}

/// `delta^m = 1` exactly when `RP^m < 0`.
pub fn task_mask(pref: &SamplePreference) -> Vec<u8> {
    pref.rp.iter().map(|&r| u8::from(r < 0.0)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceState {
    pub beta: Vec<f64>,
    pub epoch_rp_sum: Vec<f64>,
    pub epoch_count: Vec<usize>,
    pub samples_seen: usize,
    pub gamma: f64,
    pub epoch: usize,
    pub beta_floor: f64,
}

/// Closed epoch: per-modality mean relative preference and the coefficient
/// in force after the update.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_rp: Vec<f64>,
    pub counts: Vec<usize>,
    pub beta: Vec<f64>,
}

/// Initial coefficient `1 / (1 - MR^m)`.
pub fn initial_beta(rates: &MissingRateVector) -> Vec<f64> {
    rates.rates().iter().map(|&r| 1.0 / (1.0 - r)).collect()
}

impl PreferenceState {
    pub fn new(rates: &MissingRateVector, gamma: f64) -> Self {
        let m = rates.len();
        Self {
            beta: initial_beta(rates)
                .into_iter()
                .map(|b| b.max(BETA_FLOOR))
                .collect(),
            epoch_rp_sum: vec![0.0; m],
            epoch_count: vec![0; m],
            samples_seen: 0,
            gamma,
            epoch: 0,
            beta_floor: BETA_FLOOR,
        }
    }

    pub fn n_modalities(&self) -> usize {
        self.beta.len()
    }

    /// Adds one sample's preferences to the epoch totals of its available
    /// modalities.
    pub fn accumulate(&mut self, pref: &SamplePreference) {
        for m in pref.available() {
            self.epoch_rp_sum[m] += pref.rp[m];
            self.epoch_count[m] += 1;
        }
        self.samples_seen += 1;
    }

    /// Per-modality `sum RP / count` for the epoch so far; 0 when unseen.
    pub fn epoch_mean_rp(&self) -> Vec<f64> {
        self.epoch_rp_sum
            .iter()
            .zip(&self.epoch_count)
            .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    }

    fn close(&mut self, apply: bool) -> EpochSummary {
        let mean_rp = self.epoch_mean_rp();
        if apply {
            for m in 0..self.beta.len() {
                // A modality unseen this epoch keeps its coefficient.
                if self.epoch_count[m] > 0 {
                    self.beta[m] = (self.beta[m] - self.gamma * mean_rp[m]).max(self.beta_floor);
                }
            }
        }
        let summary = EpochSummary {
            epoch: self.epoch,
            mean_rp,
            counts: self.epoch_count.clone(),
            beta: self.beta.clone(),
        };
        self.epoch_rp_sum.iter_mut().for_each(|v| *v = 0.0);
        self.epoch_count.iter_mut().for_each(|v| *v = 0);
        self.samples_seen = 0;
        self.epoch += 1;
        summary
    }

    /// End of epoch: `beta <- max(beta - gamma * mean RP, floor)`, then
    /// reset the accumulators.
    pub fn update_beta(&mut self) -> EpochSummary {
        self.close(true)
    }

    /// End of epoch without touching the coefficients (passive measurement).
    pub fn close_epoch_frozen(&mut self) -> EpochSummary {
        self.close(false)
    }
}

/// Assembles `seg + sum_m (lambda1 beta^m pixel^m + lambda2 delta^m proto^m)`.
///
/// `pixel` must cover exactly the available modalities. `proto` may omit a
/// modality only where its mask entry is 0.
pub fn total_loss(
    seg: f64,
    pixel: &BTreeMap<usize, f64>,
    proto: &BTreeMap<usize, f64>,
    delta: &[u8],
    beta: &[f64],
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    let mut total = seg;
    for (&m, &p) in pixel {
        let b = *beta.get(m).ok_or(Error::OutOfRange {
            index: m,
            len: beta.len(),
        })?;
        total += lambda1 * b * p;
    }
    for (m, &d) in delta.iter().enumerate() {
        if d == 0 {
            continue;
        }
        if !pixel.contains_key(&m) {
            return Err(Error::InvalidArgument(format!(
                "mask set for modality {m} which has no distillation terms"
            )));
        }
        let p = proto.get(&m).ok_or_else(|| {
            Error::InvalidArgument(format!("no prototype term for masked modality {m}"))
        })?;
        total += lambda2 * p;
    }
    if let Some(m) = proto.keys().find(|m| !pixel.contains_key(m)) {
        return Err(Error::InvalidArgument(format!(
            "prototype term for unavailable modality {m}"
        )));
    }
    Ok(total)
}
