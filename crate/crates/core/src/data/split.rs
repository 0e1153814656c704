use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Entry, Label, Manifest, Sample, Split};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub test: f64,
    pub validation: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.7,
            test: 0.2,
            validation: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, test: f64, validation: f64) -> Result<Self> {
        let r = SplitRatios {
            train,
            test,
            validation,
        };
        r.validate()?;
        Ok(r)
    }

    /// Ratios produced by holding out `holdout` of the data and then sending
    /// `validation_share` of the held-out part to validation. With
    /// `(0.3, 0.3)` this gives 0.7 / 0.21 / 0.09.
    pub fn nested_holdout(holdout: f64, validation_share: f64) -> Result<Self> {
        Self::new(
            1.0 - holdout,
            holdout * (1.0 - validation_share),
            holdout * validation_share,
        )
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.test, self.validation]
    }

    pub fn validate(&self) -> Result<()> {
        let parts = self.as_array();
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Config(format!(
                "split ratios must be non-negative, got {parts:?}"
            )));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must sum to 1, got {total}"
            )));
        }
        Ok(())
    }
}

/// Per-split counts for a class of `n` samples: floors of `ratio * n`, with
/// the remainder handed to the splits with the largest fractional parts
/// (earlier splits win ties).
pub fn allocate_counts(n: usize, ratios: &SplitRatios) -> [usize; 3] {
    let quotas = ratios.as_array().map(|r| r * n as f64);
    let mut counts = quotas.map(|q| (q + 1e-9).floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - counts[a] as f64;
        let fb = quotas[b] - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Shuffles each class with a seed-derived RNG and assigns the first
/// `train` samples to training, the next `test` to testing, the rest to
/// validation. Samples keep their input order in the manifest.
pub fn stratified_split(entries: &[Entry], ratios: SplitRatios, seed: u64) -> Result<Manifest> {
    ratios.validate()?;
    let mut splits = vec![Split::Train; entries.len()];
    for label in Label::ALL {
        let mut members: Vec<usize> = entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == label)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            return Err(Error::Empty(format!("class {label}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, label.index() as u64]));
        members.shuffle(&mut rng);
        let [train, test, _] = allocate_counts(members.len(), &ratios);
        for (rank, &i) in members.iter().enumerate() {
            splits[i] = if rank < train {
                Split::Train
            } else if rank < train + test {
                Split::Test
            } else {
                Split::Validation
            };
        }
    }
    let samples = entries
        .iter()
        .zip(splits)
        .map(|(e, split)| Sample {
            id: e.id.clone(),
            path: e.path.clone(),
            label: e.label,
            split,
        })
        .collect();
    Ok(Manifest {
        samples,
        seed: Some(seed),
        ratios: Some(ratios),
    })
}
