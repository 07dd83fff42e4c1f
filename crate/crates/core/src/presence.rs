//! Modality-presence matrices for imperfect-data training.
//!
//! A presence matrix is drawn once per experiment, before training, and
//! never re-drawn. Entry `(n, m)` is 1 when sample `n` has modality `m`.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PresenceMatrix {
    entries: Vec<u8>,
    n_samples: usize,
    n_modalities: usize,
}

/// Per-modality missing rates, each in `[0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingRateVector(Vec<f64>);

impl MissingRateVector {
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::InvalidArgument("empty missing-rate vector".into()));
        }
        for (m, &r) in rates.iter().enumerate() {
            if !(0.0..1.0).contains(&r) || r.is_nan() {
                return Err(Error::InvalidArgument(format!(
                    "missing rate {r} of modality {m} outside [0, 1)"
                )));
            }
        }
        Ok(Self(rates))
    }

    pub fn rates(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl PresenceMatrix {
    /// Builds a matrix from row-major entries, rejecting invariant violations.
    pub fn new(entries: Vec<u8>, n_samples: usize, n_modalities: usize) -> Result<Self> {
        let c = Self {
            entries,
            n_samples,
            n_modalities,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::InvalidMatrix("ragged rows".into()));
        }
        Self::new(rows.concat(), n, m)
    }

    pub fn full(n_samples: usize, n_modalities: usize) -> Result<Self> {
        Self::new(
            vec![1; n_samples * n_modalities],
            n_samples,
            n_modalities,
        )
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_modalities(&self) -> usize {
        self.n_modalities
    }

    pub fn get(&self, n: usize, m: usize) -> u8 {
        self.entries[n * self.n_modalities + m]
    }

    pub fn row(&self, n: usize) -> &[u8] {
        &self.entries[n * self.n_modalities..(n + 1) * self.n_modalities]
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.n_modalities == 0 {
            return Err(Error::InvalidMatrix("N and M must be positive".into()));
        }
        if self.entries.len() != self.n_samples * self.n_modalities {
            return Err(Error::InvalidMatrix(format!(
                "{} entries for a {}x{} matrix",
                self.entries.len(),
                self.n_samples,
                self.n_modalities
            )));
        }
        if let Some(v) = self.entries.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidMatrix(format!("entry {v} is not binary")));
        }
        for n in 0..self.n_samples {
            if self.row(n).iter().all(|&v| v == 0) {
                return Err(Error::InvalidMatrix(format!("row {n} has no modality")));
            }
        }
        for m in 0..self.n_modalities {
            if self.column_sum(m) == 0 {
                return Err(Error::InvalidMatrix(format!("modality {m} never present")));
            }
        }
        Ok(())
    }

    fn column_sum(&self, m: usize) -> usize {
        (0..self.n_samples)
            .filter(|&n| self.get(n, m) == 1)
            .count()
    }

    /// `MR^m = (N - sum_n C[n][m]) / N` for every column.
    pub fn missing_rates(&self) -> Result<MissingRateVector> {
        self.validate()?;
        let n = self.n_samples as f64;
        MissingRateVector::new(
            (0..self.n_modalities)
                .map(|m| (n - self.column_sum(m) as f64) / n)
                .collect(),
        )
    }

    /// Indices of the modalities available for sample `n`, ascending.
    pub fn available_modalities(&self, n: usize) -> Result<Vec<usize>> {
        if n >= self.n_samples {
            return Err(Error::OutOfRange {
                index: n,
                len: self.n_samples,
            });
        }
        let avail: Vec<usize> = self
            .row(n)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(m, _)| m)
            .collect();
        if avail.is_empty() {
            return Err(Error::InvalidMatrix(format!("row {n} has no modality")));
        }
        Ok(avail)
    }
}

/// Number of zeros for a column: `round_half_up(n * rate)`, capped at `n - 1`.
pub fn zero_quota(n: usize, rate: f64) -> usize {
    let q = (n as f64 * rate + 0.5).floor() as usize;
    q.min(n.saturating_sub(1))
}

/// Result of [`sample_presence`]: the matrix plus how many all-zero rows
/// were repaired and how far each column ended up from its quota.
#[derive(Debug, Clone)]
pub struct PresenceDraw {
    pub matrix: PresenceMatrix,
    pub repairs: usize,
    pub quota_deviation: Vec<i64>,
}

/// Draws a presence matrix whose per-column zero count equals the rounded
/// quota, then repairs all-zero rows.
///
/// A repaired row gets one uniformly chosen modality back. The column it
/// re-enabled then drops one surplus 1 from another row that keeps at least
/// one other modality, so column counts stay on quota whenever possible.
pub fn sample_presence(targets: &MissingRateVector, n: usize, seed: u64) -> Result<PresenceDraw> {
    if n < 1 {
        return Err(Error::InvalidArgument("N must be at least 1".into()));
    }
    let m_count = targets.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = vec![1u8; n * m_count];
    let quotas: Vec<usize> = targets.rates().iter().map(|&t| zero_quota(n, t)).collect();

    let mut order: Vec<usize> = (0..n).collect();
    for (m, &q) in quotas.iter().enumerate() {
        order.shuffle(&mut rng);
        for &row in &order[..q] {
            entries[row * m_count + m] = 0;
        }
    }

    let row_sum = |e: &[u8], r: usize| -> usize {
        e[r * m_count..(r + 1) * m_count]
            .iter()
            .map(|&v| v as usize)
            .sum()
    };

    let mut repairs = 0;
    for row in 0..n {
        if row_sum(&entries, row) != 0 {
            continue;
        }
        repairs += 1;
        let m = rng.gen_range(0..m_count);
        entries[row * m_count + m] = 1;

        let donors: Vec<usize> = (0..n)
            .filter(|&r| r != row && entries[r * m_count + m] == 1 && row_sum(&entries, r) >= 2)
            .collect();
        if let Some(&donor) = donors.as_slice().choose(&mut rng) {
            entries[donor * m_count + m] = 0;
        }
    }

    let matrix = PresenceMatrix::new(entries, n, m_count)?;
    let quota_deviation = quotas
        .iter()
        .enumerate()
        .map(|(m, &q)| (n - matrix.column_sum(m)) as i64 - q as i64)
        .collect();
    Ok(PresenceDraw {
        matrix,
        repairs,
        quota_deviation,
    })
}

/// A presence matrix persisted together with the targets and seed it was
/// drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct PresenceManifest {
    pub seed: u64,
    pub targets: Vec<f64>,
    pub matrix: PresenceMatrix,
}

impl PresenceManifest {
    /// Text form: `N M seed`, the targets line, then one row of 0/1 digits
    /// per sample.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} {} {}",
            self.matrix.n_samples, self.matrix.n_modalities, self.seed
        );
        let targets: Vec<String> = self.targets.iter().map(|t| t.to_string()).collect();
        out.push_str(&targets.join(" "));
        out.push('\n');
        for n in 0..self.matrix.n_samples {
            let row: Vec<&str> = self
                .matrix
                .row(n)
                .iter()
                .map(|&v| if v == 1 { "1" } else { "0" })
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("missing header line".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse(format!("header `{header}` is not `N M seed`")));
        }
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::Parse(format!("`{s}`: {e}")))
        };
        let n = parse_usize(fields[0])?;
        let m = parse_usize(fields[1])?;
        let seed = fields[2]
            .parse::<u64>()
            .map_err(|e| Error::Parse(format!("seed `{}`: {e}", fields[2])))?;

        let targets_line = lines
            .next()
            .ok_or_else(|| Error::Parse("missing targets line".into()))?;
        let targets = targets_line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("target `{t}`: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if targets.len() != m {
            return Err(Error::Parse(format!(
                "{} targets for {} modalities",
                targets.len(),
                m
            )));
        }

        let mut entries = Vec::with_capacity(n * m);
        for row in 0..n {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("missing row {row}")))?;
            let before = entries.len();
            for tok in line.split_whitespace() {
                match tok {
                    "0" => entries.push(0),
                    "1" => entries.push(1),
                    other => return Err(Error::Parse(format!("row {row}: `{other}`"))),
                }
            }
            if entries.len() - before != m {
                return Err(Error::Parse(format!("row {row} has wrong length")));
            }
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(Error::Parse("trailing rows after N rows".into()));
        }
        Ok(Self {
            seed,
            targets,
            matrix: PresenceMatrix::new(entries, n, m)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rates(v: &[f64]) -> MissingRateVector {
        MissingRateVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn missing_rates_direct_count() {
        let c = PresenceMatrix::from_rows(&[vec![1, 1], vec![1, 0], vec![1, 1], vec![1, 0]]).unwrap();
        assert_eq!(c.missing_rates().unwrap().rates(), &[0.0, 0.5]);
    }

    #[test]
    fn missing_rates_full_availability() {
        let c = PresenceMatrix::full(7, 4).unwrap();
        assert_eq!(c.missing_rates().unwrap().rates(), &[0.0; 4]);
    }

    #[test]
    fn zero_column_rejected() {
        let err = PresenceMatrix::from_rows(&[vec![1, 0], vec![1, 0]]).unwrap_err();
        assert!(matches!(err, Error::InvalidMatrix(_)));
    }

    #[test]
    fn zero_row_and_non_binary_rejected() {
        assert!(PresenceMatrix::from_rows(&[vec![0, 0], vec![1, 1]]).is_err());
        assert!(PresenceMatrix::from_rows(&[vec![2, 1], vec![1, 1]]).is_err());
    }

    #[test]
    fn sampled_rates_close_to_targets() {
        let draw = sample_presence(&rates(&[0.2, 0.5, 0.8]), 1000, 11).unwrap();
        let mr = draw.matrix.missing_rates().unwrap();
        for (got, want) in mr.rates().iter().zip([0.2, 0.5, 0.8]) {
            assert!((got - want).abs() <= 0.05, "{got} vs {want}");
        }
    }

    #[test]
    fn zero_targets_give_all_ones() {
        let draw = sample_presence(&rates(&[0.0, 0.0, 0.0]), 10, 3).unwrap();
        assert_eq!(draw.matrix, PresenceMatrix::full(10, 3).unwrap());
    }

    #[test]
    fn single_column_quota() {
        // The quota is 2 zeros, but with one modality every zero is an empty
        // row, so both are repaired back to 1.
        assert_eq!(zero_quota(4, 0.5), 2);
        let draw = sample_presence(&rates(&[0.5]), 4, 99).unwrap();
        assert_eq!(draw.repairs, 2);
        assert_eq!(draw.quota_deviation, vec![-2]);
        assert_eq!(draw.matrix, PresenceMatrix::full(4, 1).unwrap());

        let draw = sample_presence(&rates(&[0.5, 0.0]), 4, 99).unwrap();
        let zeros = (0..4).filter(|&n| draw.matrix.get(n, 0) == 0).count();
        assert_eq!(zeros, 2);
        assert_eq!(draw.repairs, 0);
    }

    #[test]
    fn extreme_rates_stay_valid() {
        for seed in 0..50 {
            let draw = sample_presence(&rates(&[0.9, 0.9]), 10, seed).unwrap();
            draw.matrix.validate().unwrap();
            for n in 0..10 {
                assert!(draw.matrix.row(n).contains(&1));
            }
        }
    }

    #[test]
    fn bad_targets_rejected() {
        assert!(MissingRateVector::new(vec![1.0]).is_err());
        assert!(MissingRateVector::new(vec![-0.1]).is_err());
        assert!(sample_presence(&rates(&[0.5]), 0, 0).is_err());
    }

    #[test]
    fn available_modalities_rows() {
        let c = PresenceMatrix::from_rows(&[vec![1, 0, 1], vec![1, 1, 1], vec![0, 1, 0]]).unwrap();
        assert_eq!(c.available_modalities(0).unwrap(), vec![0, 2]);
        assert_eq!(c.available_modalities(1).unwrap(), vec![0, 1, 2]);
        assert!(matches!(
            c.available_modalities(3),
            Err(Error::OutOfRange { index: 3, len: 3 })
        ));
    }

    #[test]
    fn quota_rounds_half_up() {
        assert_eq!(zero_quota(4, 0.5), 2);
        assert_eq!(zero_quota(5, 0.5), 3);
        assert_eq!(zero_quota(10, 0.25), 3);
        assert_eq!(zero_quota(10, 0.96), 9);
    }

    #[test]
    fn manifest_roundtrip_bit_exact() {
        let draw = sample_presence(&rates(&[0.1, 0.3333333333333333, 0.7]), 25, 5).unwrap();
        let manifest = PresenceManifest {
            seed: 5,
            targets: vec![0.1, 0.3333333333333333, 0.7],
            matrix: draw.matrix,
        };
        let text = manifest.to_text();
        let back = PresenceManifest::parse(&text).unwrap();
        assert_eq!(back, manifest);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn manifest_rejects_malformed() {
        assert!(PresenceManifest::parse("").is_err());
        assert!(PresenceManifest::parse("2 2 0\n0.1 0.1\n1 1\n").is_err());
        assert!(PresenceManifest::parse("1 2 0\n0.1 0.1\n1 x\n").is_err());
        assert!(PresenceManifest::parse("1 2 0\n0.1\n1 1\n").is_err());
    }

    proptest! {
        #[test]
        fn sampler_quota_bound_and_purity(
            t in proptest::collection::vec(0.0f64..0.95, 1..5),
            n in 1usize..200,
            seed in any::<u64>(),
        ) {
            let targets = MissingRateVector::new(t.clone()).unwrap();
            let a = sample_presence(&targets, n, seed).unwrap();
            let b = sample_presence(&targets, n, seed).unwrap();
            prop_assert_eq!(&a.matrix, &b.matrix);
            let mr = a.matrix.missing_rates().unwrap();
            for (got, want) in mr.rates().iter().zip(&t) {
                let bound = (1.0 + a.repairs as f64) / n as f64 + 1e-12;
                prop_assert!((got - want).abs() <= bound, "{} vs {} bound {}", got, want, bound);
            }
        }

        #[test]
        fn validate_matches_invariants(
            bits in proptest::collection::vec(0u8..2, 1..30),
            m in 1usize..4,
        ) {
            let n = bits.len() / m;
            prop_assume!(n > 0);
            let entries = bits[..n * m].to_vec();
            let rows_ok = (0..n).all(|r| entries[r * m..(r + 1) * m].contains(&1));
            let cols_ok = (0..m).all(|c| (0..n).any(|r| entries[r * m + c] == 1));
            prop_assert_eq!(PresenceMatrix::new(entries, n, m).is_ok(), rows_ok && cols_ok);
        }
    }
}
