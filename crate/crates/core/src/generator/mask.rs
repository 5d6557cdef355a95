use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Truncated normal over the fraction of token rows to drop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Standard deviation of the parent normal before truncation.
    pub std: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            min: 0.5,
            max: 1.0,
            mean: 0.75,
            std: 0.25,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.min && self.min < self.max && self.max <= 1.0) {
            return Err(Error::invalid(format!(
                "mask range [{}, {}]",
                self.min, self.max
            )));
        }
        if !(self.std >= 0.0) || !(self.min..=self.max).contains(&self.mean) {
            return Err(Error::invalid("mask mean/std"));
        }
        Ok(())
    }
}

/// Rejection sample from `Normal(mean, std)` restricted to `[min, max]`.
pub fn sample_mask_ratio<R: Rng + ?Sized>(cfg: &MaskConfig, rng: &mut R) -> f64 {
    if cfg.std == 0.0 {
        return cfg.mean;
    }
    loop {
        let x = cfg.mean + cfg.std * rng.sample::<f64, _>(StandardNormal);
        if x >= cfg.min && x <= cfg.max {
            return x;
        }
    }
}

fn drop_count(ratio: f64, tokens: usize) -> usize {
    // tolerance keeps e.g. 0.3·10 from rounding up to 4
    let count = ((ratio * tokens as f64) - 1e-9).ceil().max(0.0) as usize;
    count.min(tokens)
}

/// Which token rows are dropped before encoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowMask {
    tokens: usize,
    dropped: Vec<usize>,
}

impl RowMask {
    pub fn none(tokens: usize) -> Self {
        RowMask {
            tokens,
            dropped: Vec::new(),
        }
    }

    pub fn from_dropped(tokens: usize, mut dropped: Vec<usize>) -> Result<Self> {
        dropped.sort_unstable();
        dropped.dedup();
        if dropped.iter().any(|&d| d >= tokens) {
            return Err(Error::invalid("masked row out of range"));
        }
        Ok(RowMask { tokens, dropped })
    }

    /// Drop `⌈ratio·tokens⌉` rows chosen uniformly without replacement.
    pub fn sample<R: Rng + ?Sized>(ratio: f64, tokens: usize, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1]")));
        }
        let count = drop_count(ratio, tokens);
        let dropped = rand::seq::index::sample(rng, tokens, count).into_vec();
        RowMask::from_dropped(tokens, dropped)
    }

    /// Drop the first `⌈ratio·tokens⌉` rows. Fixed masks for inference.
    pub fn leading(ratio: f64, tokens: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1]")));
        }
        RowMask::from_dropped(tokens, (0..drop_count(ratio, tokens)).collect())
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    pub fn is_empty(&self) -> bool {
        self.dropped.is_empty()
    }

    /// 1 for kept rows, 0 for dropped, broadcast across `channels`.
    pub fn keep_matrix(&self, channels: usize) -> Vec<f64> {
        let mut m = vec![1.0; self.tokens * channels];
        for &d in &self.dropped {
            m[d * channels..(d + 1) * channels].fill(0.0);
        }
        m
    }

    /// Column indicator `[tokens, 1]` of dropped rows.
    pub fn drop_column(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.tokens];
        for &d in &self.dropped {
            m[d] = 1.0;
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_std_returns_mean() {
        let cfg = MaskConfig {
            std: 0.0,
            ..MaskConfig::default()
        };
        let mut r = rng::stream(0, "mask", 0);
        assert!((0..100).all(|_| sample_mask_ratio(&cfg, &mut r) == 0.75));
    }

    #[test]
    fn row_counts_follow_ceiling() {
        let mut r = rng::stream(0, "rows", 0);
        assert_eq!(RowMask::sample(0.0, 8, &mut r).unwrap().dropped().len(), 0);
        assert_eq!(RowMask::sample(0.5, 8, &mut r).unwrap().dropped().len(), 4);
        assert_eq!(RowMask::sample(0.51, 8, &mut r).unwrap().dropped().len(), 5);
        assert_eq!(RowMask::sample(1.0, 8, &mut r).unwrap().dropped().len(), 8);
        assert_eq!(RowMask::sample(0.3, 10, &mut r).unwrap().dropped().len(), 3);
        assert!(RowMask::sample(1.5, 8, &mut r).is_err());
    }

    #[test]
    fn leading_mask_is_fixed() {
        assert_eq!(RowMask::leading(0.5, 8).unwrap().dropped(), &[0, 1, 2, 3]);
        assert!(RowMask::leading(0.0, 8).unwrap().is_empty());
        assert_eq!(RowMask::leading(1.0, 8).unwrap().dropped().len(), 8);
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = MaskConfig {
            min: 0.9,
            max: 0.5,
            ..MaskConfig::default()
        };
        assert!(bad.validate().is_err());
        MaskConfig::default().validate().unwrap();
    }
}
