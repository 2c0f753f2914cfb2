//! Synthetic intent-like corpus with per-class signature vocabularies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::episodes::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub vocab_size: usize,
    /// Probability that a token is drawn from the shared distractor pool.
    pub noise: f64,
    pub seed: u64,
    pub signature_size: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl SynthConfig {
    pub fn new(classes: usize, per_class: usize, vocab_size: usize, noise: f64, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            vocab_size,
            noise,
            seed,
            signature_size: 10,
            min_len: 6,
            max_len: 12,
        }
    }

    pub fn distractors(&self) -> usize {
        self.vocab_size.saturating_sub(self.classes * self.signature_size)
    }

    /// Probability that a random token of one class equals a random token of
    /// another: only distractors can coincide.
    pub fn expected_cross_overlap(&self) -> f64 {
        match self.distractors() {
            0 => 0.0,
            d => self.noise * self.noise / d as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.per_class == 0 || self.signature_size == 0 {
            return Err(Error::Config("synthetic corpus needs classes, per_class and signature_size ≥ 1".into()));
        }
        if self.vocab_size < self.classes * self.signature_size {
            return Err(Error::Config(format!(
                "vocab_size {} is below classes × signature_size = {}",
                self.vocab_size,
                self.classes * self.signature_size
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 1]", self.noise)));
        }
        if self.noise > 0.0 && self.distractors() == 0 {
            return Err(Error::Config("noise > 0 needs at least one distractor token".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!("bad length range {}..={}", self.min_len, self.max_len)));
        }
        Ok(())
    }
}

pub fn token_name(id: usize) -> String {
    format!("t{id}")
}

pub fn class_name(c: usize) -> String {
    format!("class_{c:02}")
}

/// Class `c` owns tokens `c·sig .. (c+1)·sig`; the rest of the vocabulary is
/// shared noise. Instances are listed class by class.
pub fn gen_synth(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sig = cfg.signature_size;
    let pool_start = cfg.classes * sig;
    let mut pairs = Vec::with_capacity(cfg.classes * cfg.per_class);
    for c in 0..cfg.classes {
        for _ in 0..cfg.per_class {
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let words: Vec<String> = (0..len)
                .map(|_| {
                    let id = if rng.random_bool(cfg.noise) {
                        rng.random_range(pool_start..cfg.vocab_size)
                    } else {
                        c * sig + rng.random_range(0..sig)
                    };
                    token_name(id)
                })
                .collect();
            pairs.push((words.join(" "), class_name(c)));
        }
    }
    Ok(Dataset::from_pairs(pairs))
}
