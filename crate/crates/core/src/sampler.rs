//! Batch-index sampling strategies for the training loop.

use crate::error::{Error, Result};
use crate::loss::class_indices;
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampler {
    /// one shuffled pass over the dataset per epoch
    Uniform,
    /// draws with replacement, each sample weighted by 1 / count(its class)
    InverseFrequency,
}

impl Sampler {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Sampler::Uniform),
            "inverse-frequency" => Ok(Sampler::InverseFrequency),
            other => Err(Error::Config(format!("unknown sampler {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Sampler::Uniform => "uniform",
            Sampler::InverseFrequency => "inverse-frequency",
        }
    }
}

/// Index order for one epoch: a permutation for `Uniform`, `labels.len()`
/// weighted draws with replacement for `InverseFrequency`.
pub fn epoch_indices(sampler: Sampler, labels: &[u8], rng: &mut RngStream) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::Input("cannot sample from an empty dataset".into()));
    }
    match sampler {
        Sampler::Uniform => {
            let mut idx: Vec<usize> = (0..labels.len()).collect();
            // Fisher-Yates
            for i in (1..idx.len()).rev() {
                let j = rng.below(i as u32 + 1) as usize;
                idx.swap(i, j);
            }
            Ok(idx)
        }
        Sampler::InverseFrequency => {
            let classes = class_indices(labels)?;
            let mut counts = [0usize; 3];
            for &c in &classes {
                counts[c as usize] += 1;
            }
            let weights: Vec<f64> = classes
                .iter()
                .map(|&c| 1.0 / counts[c as usize] as f64)
                .collect();
            let mut cumulative = Vec::with_capacity(weights.len());
            let mut acc = 0.0;
            for w in &weights {
                acc += w;
                cumulative.push(acc);
            }
            let total = acc;
            let draws = (0..labels.len())
                .map(|_| {
                    let u = rng.uniform() * total;
                    cumulative.partition_point(|&c| c <= u).min(labels.len() - 1)
                })
                .collect();
            Ok(draws)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_id, Domain};

    fn rng(a: u32) -> RngStream {
        RngStream::new(77, stream_id(Domain::Sampler, a, 0))
    }

    #[test]
    fn uniform_is_a_permutation() {
        let labels = vec![1u8; 100];
        let idx = epoch_indices(Sampler::Uniform, &labels, &mut rng(0)).unwrap();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        // and not the identity for this stream
        assert_ne!(idx, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn same_stream_reproduces() {
        let labels: Vec<u8> = (0..50).map(|i| (i % 3) as u8 + 1).collect();
        for sampler in [Sampler::Uniform, Sampler::InverseFrequency] {
            let a = epoch_indices(sampler, &labels, &mut rng(1)).unwrap();
            let b = epoch_indices(sampler, &labels, &mut rng(1)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn inverse_frequency_rebalances_classes() {
        // 900 of class 1, 90 of class 2, 10 of class 3
        let mut labels = vec![1u8; 900];
        labels.extend(vec![2u8; 90]);
        labels.extend(vec![3u8; 10]);
        let mut r = rng(2);
        let mut counts = [0usize; 3];
        for _ in 0..30 {
            for i in epoch_indices(Sampler::InverseFrequency, &labels, &mut r).unwrap() {
                counts[(labels[i] - 1) as usize] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        for c in counts {
            let frac = c as f64 / total as f64;
            assert!((frac - 1.0 / 3.0).abs() < 0.02, "class fraction {frac}");
        }
    }

    #[test]
    fn inverse_frequency_draws_valid_indices_with_replacement() {
        let labels = vec![1u8, 2, 3, 1, 2, 3];
        let idx = epoch_indices(Sampler::InverseFrequency, &labels, &mut rng(3)).unwrap();
        assert_eq!(idx.len(), labels.len());
        assert!(idx.iter().all(|&i| i < labels.len()));
    }

    #[test]
    fn empty_and_invalid_labels_rejected() {
        assert!(epoch_indices(Sampler::Uniform, &[], &mut rng(4)).is_err());
        assert!(epoch_indices(Sampler::InverseFrequency, &[5], &mut rng(4)).is_err());
    }

    #[test]
    fn names_round_trip() {
        for s in [Sampler::Uniform, Sampler::InverseFrequency] {
            assert_eq!(Sampler::parse(s.name()).unwrap(), s);
        }
        assert!(Sampler::parse("other").is_err());
    }
}
