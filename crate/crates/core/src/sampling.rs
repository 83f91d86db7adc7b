//! Selected sampling: from every support feature, walk with isotropic
//! Gaussian steps and keep a step only if it strictly raises the predicted
//! probability of the point's own class. A chain ends at its first rejected
//! proposal (or at the length cap). Accepted points are appended to the
//! support set to re-estimate the class prototypes.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, ClassifierHead, Provenance, Prototypes};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    /// Standard deviation of each proposal coordinate.
    pub sigma_walk: f64,
    pub max_chain_len: usize,
    pub seed: u64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            sigma_walk: 0.1,
            max_chain_len: 20,
            seed: 0,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_walk > 0.0 && self.sigma_walk.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_walk must be positive, got {}",
                self.sigma_walk
            )));
        }
        if self.max_chain_len == 0 {
            return Err(Error::Config("max_chain_len must be at least 1".into()));
        }
        Ok(())
    }

    /// RNG for the chain started from support example `origin`.
    pub fn chain_rng(&self, origin: usize) -> ChaCha8Rng {
        let mut rng = seed::rng(self.seed);
        rng.set_stream(origin as u64);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainResult {
    pub origin: usize,
    pub label: usize,
    pub origin_probability: f64,
    pub accepted: Vec<Vec<f64>>,
    /// `p(y|f)` of each accepted point, aligned with `accepted`.
    pub accepted_probabilities: Vec<f64>,
    pub terminal_probability: f64,
    /// 1 if the chain ended on a rejection, 0 if it hit the cap.
    pub rejected_count: usize,
}

impl ChainResult {
    pub fn len(&self) -> usize {
        self.accepted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accepted.is_empty()
    }

    /// True when the probabilities along the chain, origin included, are
    /// strictly increasing.
    pub fn is_strictly_increasing(&self) -> bool {
        std::iter::once(&self.origin_probability)
            .chain(&self.accepted_probabilities)
            .collect::<Vec<_>>()
            .windows(2)
            .all(|w| w[0] < w[1])
    }
}

/// `current + sigma_walk * z` with `z` standard normal.
pub fn propose(current: &[f64], sigma_walk: f64, rng: &mut impl Rng) -> Vec<f64> {
    current
        .iter()
        .map(|v| v + sigma_walk * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// `p(label | feature)` under the cosine head, or `None` for a degenerate
/// (zero-norm) feature.
pub fn class_probability(
    feature: &[f64],
    label: usize,
    prototypes: &Prototypes,
    head: &ClassifierHead,
) -> Option<f64> {
    let f = Matrix::from_rows(&[feature]).ok()?;
    let scores = classifier::logits(&f, prototypes, head).ok()?;
    classifier::probabilities(scores.row(0)).ok().map(|p| p[label])
}

/// Accepts iff the candidate's true-class probability strictly exceeds the
/// current point's. Degenerate points are never accepted.
pub fn accept(
    candidate: &[f64],
    current: &[f64],
    label: usize,
    prototypes: &Prototypes,
    head: &ClassifierHead,
) -> bool {
    match (
        class_probability(candidate, label, prototypes, head),
        class_probability(current, label, prototypes, head),
    ) {
        (Some(c), Some(p)) => c > p,
        _ => false,
    }
}

pub fn run_chain(
    origin: usize,
    feature: &[f64],
    label: usize,
    prototypes: &Prototypes,
    head: &ClassifierHead,
    config: &ProposalConfig,
    rng: &mut impl Rng,
) -> ChainResult {
    let origin_probability = class_probability(feature, label, prototypes, head).unwrap_or(f64::NAN);
    let mut current = feature.to_vec();
    let mut current_p = origin_probability;
    let mut accepted = Vec::new();
    let mut accepted_probabilities = Vec::new();
    let mut rejected_count = 0;
    for _ in 0..config.max_chain_len {
        let candidate = propose(&current, config.sigma_walk, rng);
        // NaN current_p (degenerate origin) compares false and stops the chain
        match class_probability(&candidate, label, prototypes, head) {
            Some(p) if p > current_p => {
                accepted.push(candidate.clone());
                accepted_probabilities.push(p);
                current = candidate;
                current_p = p;
            }
            _ => {
                rejected_count = 1;
                break;
            }
        }
    }
    ChainResult {
        origin,
        label,
        origin_probability,
        accepted,
        accepted_probabilities,
        terminal_probability: current_p,
        rejected_count,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSupport {
    /// Original support features first, in order, then every accepted sample
    /// in origin order.
    pub features: Matrix,
    pub labels: Vec<usize>,
    /// Accepted samples per class.
    pub per_class_counts: Vec<usize>,
    pub chains: Vec<ChainResult>,
}

impl AugmentedSupport {
    pub fn mean_chain_length(&self) -> f64 {
        if self.chains.is_empty() {
            return 0.0;
        }
        self.chains.iter().map(ChainResult::len).sum::<usize>() as f64 / self.chains.len() as f64
    }

    pub fn prototypes(&self, num_ways: usize) -> Result<Prototypes> {
        let mut p = classifier::compute_prototypes(&self.features, &self.labels, num_ways)?;
        p.provenance = Provenance::Augmented;
        Ok(p)
    }
}

/// One chain per support example, all scored against the same fixed
/// prototypes and head.
pub fn augment_support(
    features: &Matrix,
    labels: &[usize],
    prototypes: &Prototypes,
    head: &ClassifierHead,
    config: &ProposalConfig,
) -> Result<AugmentedSupport> {
    config.validate()?;
    if features.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} features but {} labels",
            features.rows(),
            labels.len()
        )));
    }
    let chains: Vec<ChainResult> = features
        .iter_rows()
        .zip(labels)
        .enumerate()
        .map(|(i, (f, &y))| {
            let mut rng = config.chain_rng(i);
            run_chain(i, f, y, prototypes, head, config, &mut rng)
        })
        .collect();

    let mut out = features.clone();
    let mut out_labels = labels.to_vec();
    let mut per_class_counts = vec![0; prototypes.num_ways()];
    for chain in &chains {
        for sample in &chain.accepted {
            out.push_row(sample)?;
            out_labels.push(chain.label);
            per_class_counts[chain.label] += 1;
        }
    }
    Ok(AugmentedSupport {
        features: out,
        labels: out_labels,
        per_class_counts,
        chains,
    })
}

/// Header: `epoch,kind,index,value`. One `chain` line per chain (value =
/// accepted length) and one `class` line per class (value = accepted count).
pub fn write_augmentation_log<W: Write>(
    epoch: usize,
    augmented: &AugmentedSupport,
    mut out: W,
) -> std::io::Result<()> {
    for c in &augmented.chains {
        writeln!(out, "{epoch},chain,{},{}", c.origin, c.len())?;
    }
    for (k, n) in augmented.per_class_counts.iter().enumerate() {
        writeln!(out, "{epoch},class,{k},{n}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;

    fn protos(rows: &[&[f64]]) -> Prototypes {
        Prototypes {
            rows: Matrix::from_rows(rows).unwrap(),
            provenance: Provenance::Support,
        }
    }

    #[test]
    fn tiny_steps_stay_close() {
        let mut rng = seed::rng(1);
        let f = vec![1.0, -2.0, 0.5, 3.0];
        let sigma = 1e-9;
        for _ in 0..1000 {
            let g = propose(&f, sigma, &mut rng);
            let dist = linalg::norm(&linalg::sub(&g, &f));
            assert!(dist <= 10.0 * sigma * 2.0);
        }
    }

    #[test]
    fn proposals_are_reproducible() {
        let f = [0.0, 1.0];
        let a: Vec<_> = {
            let mut r = seed::rng(9);
            (0..5).map(|_| propose(&f, 0.1, &mut r)).collect()
        };
        let b: Vec<_> = {
            let mut r = seed::rng(9);
            (0..5).map(|_| propose(&f, 0.1, &mut r)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn proposal_mean_is_the_current_point() {
        let mut rng = seed::rng(2);
        let f = [0.3, -1.2, 4.0];
        let sigma = 0.1;
        let n = 100_000;
        let mut mean = [0.0; 3];
        for _ in 0..n {
            let g = propose(&f, sigma, &mut rng);
            for k in 0..3 {
                mean[k] += g[k] / n as f64;
            }
        }
        for k in 0..3 {
            // sd of the mean is sigma/sqrt(n) ~ 3.2e-4; bound is ~3 sd
            assert!((mean[k] - f[k]).abs() < 0.01 * sigma);
        }
    }

    #[test]
    fn acceptance_rules() {
        let head = ClassifierHead::default();
        let p = protos(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let f = [0.6, 0.4];
        assert!(!accept(&f, &f, 0, &p, &head));
        assert!(accept(&[1.0, 0.0], &f, 0, &p, &head));
        assert!(!accept(&[2.0, 0.0], &[1.0, 0.0], 0, &p, &head));
        assert!(!accept(&[0.0, 0.0], &f, 0, &p, &head));
    }

    #[test]
    fn identical_prototypes_reject_everything() {
        let head = ClassifierHead::default();
        let p = protos(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let cfg = ProposalConfig::default();
        let mut rng = cfg.chain_rng(0);
        let c = run_chain(0, &[0.2, 0.9], 1, &p, &head, &cfg, &mut rng);
        assert!(c.is_empty());
        assert_eq!(c.rejected_count, 1);
    }

    #[test]
    fn chains_respect_the_cap() {
        let head = ClassifierHead::default();
        let p = protos(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let cfg = ProposalConfig {
            sigma_walk: 0.05,
            max_chain_len: 3,
            seed: 4,
        };
        let mut capped = 0;
        for origin in 0..200 {
            let mut rng = cfg.chain_rng(origin);
            let c = run_chain(origin, &[0.1, 1.0], 0, &p, &head, &cfg, &mut rng);
            assert!(c.len() <= 3);
            assert!(c.is_strictly_increasing());
            if c.rejected_count == 0 {
                assert_eq!(c.len(), 3);
                capped += 1;
            }
        }
        assert!(capped > 0);
    }

    #[test]
    fn no_acceptances_leave_prototypes_unchanged() {
        let head = ClassifierHead::default();
        let f = Matrix::from_rows(&[[1.0, 1.0], [2.0, 2.0], [1.0, 1.0]]).unwrap();
        let labels = [0, 1, 2];
        let p = classifier::compute_prototypes(&f, &labels, 3).unwrap();
        let aug = augment_support(&f, &labels, &p, &head, &ProposalConfig::default()).unwrap();
        assert_eq!(aug.features, f);
        assert_eq!(aug.per_class_counts, vec![0, 0, 0]);
        assert_eq!(aug.prototypes(3).unwrap().rows, p.rows);
    }

    #[test]
    fn augmented_prototype_is_mean_of_union() {
        let head = ClassifierHead::default();
        let f = Matrix::from_rows(&[[1.0, 0.2], [0.9, -0.1], [0.1, 1.0], [-0.2, 0.8]]).unwrap();
        let labels = [0, 0, 1, 1];
        let p = classifier::compute_prototypes(&f, &labels, 2).unwrap();
        let cfg = ProposalConfig {
            seed: 77,
            ..ProposalConfig::default()
        };
        let aug = augment_support(&f, &labels, &p, &head, &cfg).unwrap();
        assert_eq!(&aug.features.as_slice()[..8], f.as_slice());
        let augmented = aug.prototypes(2).unwrap();
        for c in 0..2 {
            let mut members: Vec<Vec<f64>> = (0..4)
                .filter(|&i| labels[i] == c)
                .map(|i| f.row(i).to_vec())
                .collect();
            for chain in aug.chains.iter().filter(|ch| ch.label == c) {
                members.extend(chain.accepted.iter().cloned());
            }
            assert_eq!(members.len(), 2 + aug.per_class_counts[c]);
            for k in 0..2 {
                let mean = members.iter().map(|m| m[k]).sum::<f64>() / members.len() as f64;
                assert!((augmented.rows[(c, k)] - mean).abs() < 1e-12);
            }
        }
        let again = augment_support(&f, &labels, &p, &head, &cfg).unwrap();
        assert_eq!(aug, again);
    }

    #[test]
    fn log_lines() {
        let aug = AugmentedSupport {
            features: Matrix::zeros(0, 0),
            labels: vec![],
            per_class_counts: vec![2],
            chains: vec![ChainResult {
                origin: 0,
                label: 0,
                origin_probability: 0.4,
                accepted: vec![vec![0.0], vec![1.0]],
                accepted_probabilities: vec![0.5, 0.6],
                terminal_probability: 0.6,
                rejected_count: 1,
            }],
        };
        let mut buf = Vec::new();
        write_augmentation_log(2, &aug, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "2,chain,0,2\n2,class,0,2\n");
    }
}
