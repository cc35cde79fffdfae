use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Waveform classification: class `c` is a sinusoid at DFT bin
/// `planted_channels[c]` with random phase, buried in white noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub num_classes: usize,
    pub seq_len: usize,
    pub planted_channels: Vec<usize>,
    pub noise_std: f64,
    #[serde(default = "unit")]
    pub amplitude: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask { num_classes: 4, seq_len: 100, planted_channels: vec![6, 17, 31, 45], noise_std: 1.0, amplitude: 1.0 }
    }
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("task.num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.planted_channels.len() != self.num_classes {
            return bad(format!(
                "task.planted_channels has {} entries for {} classes",
                self.planted_channels.len(),
                self.num_classes
            ));
        }
        let mut sorted = self.planted_channels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.planted_channels.len() {
            return bad("task.planted_channels must be distinct".into());
        }
        if self.planted_channels.iter().any(|&k| k == 0 || 2 * k >= self.seq_len) {
            return bad(format!("task.planted_channels must lie in 1..{}", self.seq_len.div_ceil(2)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("task.noise_std must be non-negative, got {}", self.noise_std));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return bad(format!("task.amplitude must be positive, got {}", self.amplitude));
        }
        Ok(())
    }

    /// Power at each planted DFT bin, one row per example of `inputs [B, T]`.
    pub fn planted_power(&self, inputs: &Tensor) -> Vec<Vec<f64>> {
        let t = self.seq_len;
        inputs
            .data()
            .chunks(t)
            .map(|row| {
                self.planted_channels
                    .iter()
                    .map(|&k| {
                        let (mut re, mut im) = (0.0, 0.0);
                        for (n, &x) in row.iter().enumerate() {
                            let w = TAU * (k * n % t) as f64 / t as f64;
                            re += x * w.cos();
                            im -= x * w.sin();
                        }
                        re * re + im * im
                    })
                    .collect()
            })
            .collect()
    }
}

/// Balanced labels in random order, then one waveform per label.
pub fn generate_batch(task: &SyntheticTask, rng: &mut Rng, batch: usize) -> (Tensor, Vec<usize>) {
    let c = task.num_classes;
    let offset = rng.random_range(0..c);
    let mut labels: Vec<usize> = (0..batch).map(|i| (i + offset) % c).collect();
    labels.shuffle(rng);
    let t = task.seq_len;
    let mut data = Vec::with_capacity(batch * t);
    for &y in &labels {
        let k = task.planted_channels[y];
        let phase = rng.random::<f64>() * TAU;
        for n in 0..t {
            let noise: f64 = StandardNormal.sample(rng);
            let w = TAU * (k * n % t) as f64 / t as f64;
            data.push(task.amplitude * (w + phase).sin() + task.noise_std * noise);
        }
    }
    (Tensor::new(&[batch, t], data).expect("batch shape"), labels)
}

/// Argmax over planted-bin power: a linear read-out of the planted features.
pub fn probe_predict(task: &SyntheticTask, inputs: &Tensor) -> Vec<usize> {
    task.planted_power(inputs)
        .iter()
        .map(|p| (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn noiseless_probe_is_perfect() {
        let task = SyntheticTask { noise_std: 0.0, ..Default::default() };
        let (x, y) = generate_batch(&task, &mut seeded(0, 2), 256);
        assert_eq!(probe_predict(&task, &x), y);
    }

    #[test]
    fn same_seed_same_batch() {
        let task = SyntheticTask::default();
        let (a, la) = generate_batch(&task, &mut seeded(5, 2), 16);
        let (b, lb) = generate_batch(&task, &mut seeded(5, 2), 16);
        assert_eq!(la, lb);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn labels_are_balanced() {
        let task = SyntheticTask::default();
        for b in [16, 30, 101] {
            let (_, y) = generate_batch(&task, &mut seeded(b as u64, 2), b);
            let mut counts = vec![0usize; 4];
            y.iter().for_each(|&l| counts[l] += 1);
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{counts:?}");
        }
    }

    #[test]
    fn invalid_tasks_rejected() {
        let ok = SyntheticTask::default();
        assert!(ok.validate().is_ok());
        assert!(SyntheticTask { planted_channels: vec![1, 2, 3], ..ok.clone() }.validate().is_err());
        assert!(SyntheticTask { planted_channels: vec![1, 2, 3, 100], ..ok.clone() }.validate().is_err());
        assert!(SyntheticTask { planted_channels: vec![1, 2, 2, 3], ..ok.clone() }.validate().is_err());
        assert!(SyntheticTask { noise_std: -1.0, ..ok }.validate().is_err());
    }
}
