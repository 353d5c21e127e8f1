use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{RcuError, Result};

/// Synthetic domain layout and split sizes.
///
/// Token ids `0..pool_tokens` form a pool shared by every domain. Each domain
/// then owns `num_labels * tokens_per_class` home tokens; home token `j` of a
/// domain belongs to class `j / tokens_per_class`. A sequence's label is the
/// class holding a strict majority of its home tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub num_requests: usize,
    pub samples_per_request: usize,
    pub test_samples: usize,
    pub retained_samples: usize,
    pub utility_samples: usize,
    /// Pretraining samples per labelled domain; must be at least `samples_per_request`.
    pub pretrain_samples_per_domain: usize,
    /// Pool-only sequences labelled REFUSE during pretraining.
    pub noise_samples: usize,
    pub seq_len: usize,
    pub pool_tokens: usize,
    pub tokens_per_class: usize,
    /// Probability that a position holds a home token rather than a pool token.
    pub home_prob: f64,
    /// Probability that a home token is drawn from the sequence's intended class.
    pub dominant_prob: f64,
}

/// Role of a synthetic domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainRole {
    Unlearn(usize),
    Retained,
    Utility(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    pub pretrain: Dataset,
    pub unlearn_train: Vec<Dataset>,
    pub unlearn_test: Vec<Dataset>,
    pub retained: Dataset,
    pub utility: [Dataset; 2],
    pub num_labels: usize,
    pub vocab_size: usize,
}

impl TaskConfig {
    pub fn home_block(&self, num_labels: usize) -> usize {
        num_labels * self.tokens_per_class
    }

    pub fn domain_slots(&self, vocab_size: usize, num_labels: usize) -> usize {
        vocab_size.saturating_sub(self.pool_tokens) / self.home_block(num_labels).max(1)
    }

    /// Smallest vocabulary holding every domain this config needs.
    pub fn required_vocab(&self, num_labels: usize) -> usize {
        self.pool_tokens + (self.num_requests + 3) * self.home_block(num_labels)
    }

    pub fn validate(&self, vocab_size: usize, num_labels: usize) -> Result<()> {
        let positive = [
            ("num_requests", self.num_requests),
            ("samples_per_request", self.samples_per_request),
            ("test_samples", self.test_samples),
            ("retained_samples", self.retained_samples),
            ("utility_samples", self.utility_samples),
            ("seq_len", self.seq_len),
            ("pool_tokens", self.pool_tokens),
            ("tokens_per_class", self.tokens_per_class),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(RcuError::Config(format!("tasks.{name} must be positive")));
            }
        }
        if self.pretrain_samples_per_domain < self.samples_per_request {
            return Err(RcuError::Config("tasks.pretrain_samples_per_domain must cover samples_per_request".into()));
        }
        if !(self.home_prob > 0.0 && self.home_prob <= 1.0 && self.dominant_prob > 0.0 && self.dominant_prob <= 1.0) {
            return Err(RcuError::Config("tasks.home_prob and tasks.dominant_prob must be in (0, 1]".into()));
        }
        let slots = self.domain_slots(vocab_size, num_labels);
        if slots < self.num_requests + 3 {
            return Err(RcuError::Config(format!(
                "vocabulary {vocab_size} holds {slots} synthetic domains but {} requests need {}",
                self.num_requests,
                self.num_requests + 3
            )));
        }
        Ok(())
    }

    fn domain_index(&self, role: DomainRole) -> usize {
        match role {
            DomainRole::Unlearn(t) => t,
            DomainRole::Retained => self.num_requests,
            DomainRole::Utility(k) => self.num_requests + 1 + k,
        }
    }

    /// One labelled sequence from `role`'s domain.
    pub fn sample_domain<R: Rng + ?Sized>(&self, role: DomainRole, num_labels: usize, rng: &mut R) -> Sample {
        let offset = self.pool_tokens + self.domain_index(role) * self.home_block(num_labels);
        loop {
            let intended = rng.random_range(0..num_labels);
            let mut counts = vec![0usize; num_labels];
            let tokens: Vec<usize> = (0..self.seq_len)
                .map(|_| {
                    if rng.random_bool(self.home_prob) {
                        let class = if rng.random_bool(self.dominant_prob) { intended } else { rng.random_range(0..num_labels) };
                        counts[class] += 1;
                        offset + class * self.tokens_per_class + rng.random_range(0..self.tokens_per_class)
                    } else {
                        rng.random_range(0..self.pool_tokens)
                    }
                })
                .collect();
            let max = *counts.iter().max().unwrap_or(&0);
            let winners: Vec<usize> = (0..num_labels).filter(|&c| counts[c] == max).collect();
            if max > 0 && winners.len() == 1 {
                return Sample { tokens, label: winners[0] };
            }
        }
    }

    fn noise_sample<R: Rng + ?Sized>(&self, refuse: usize, rng: &mut R) -> Sample {
        Sample { tokens: (0..self.seq_len).map(|_| rng.random_range(0..self.pool_tokens)).collect(), label: refuse }
    }
}

fn draw(cfg: &TaskConfig, role: DomainRole, n: usize, num_labels: usize, name: String, rng: &mut ChaCha8Rng) -> Dataset {
    Dataset::new(name, (0..n).map(|_| cfg.sample_domain(role, num_labels, rng)).collect())
}

/// Generates every dataset of an experiment. Unlearning training sets are
/// subsets of the pretraining data; all evaluation sets are fresh draws.
pub fn gen_tasks(seed: u64, cfg: &TaskConfig, vocab_size: usize, num_labels: usize) -> Result<TaskSuite> {
    cfg.validate(vocab_size, num_labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.pretrain_samples_per_domain;
    let mut pretrain = Vec::new();
    let mut unlearn_train = Vec::new();
    for t in 0..cfg.num_requests {
        let ds = draw(cfg, DomainRole::Unlearn(t), n, num_labels, format!("unlearn{}", t + 1), &mut rng);
        let mut picked = sample(&mut rng, n, cfg.samples_per_request).into_vec();
        picked.sort_unstable();
        unlearn_train.push(Dataset::new(
            format!("unlearn{}_train", t + 1),
            picked.iter().map(|&i| ds.samples[i].clone()).collect(),
        ));
        pretrain.extend(ds.samples);
    }
    for role in [DomainRole::Retained, DomainRole::Utility(0), DomainRole::Utility(1)] {
        pretrain.extend(draw(cfg, role, n, num_labels, String::new(), &mut rng).samples);
    }
    pretrain.extend((0..cfg.noise_samples).map(|_| cfg.noise_sample(num_labels, &mut rng)));
    let unlearn_test = (0..cfg.num_requests)
        .map(|t| draw(cfg, DomainRole::Unlearn(t), cfg.test_samples, num_labels, format!("unlearn{}_test", t + 1), &mut rng))
        .collect();
    let retained = draw(cfg, DomainRole::Retained, cfg.retained_samples, num_labels, "retained".into(), &mut rng);
    let utility = [
        draw(cfg, DomainRole::Utility(0), cfg.utility_samples, num_labels, "utility1".into(), &mut rng),
        draw(cfg, DomainRole::Utility(1), cfg.utility_samples, num_labels, "utility2".into(), &mut rng),
    ];
    Ok(TaskSuite {
        pretrain: Dataset::new("pretrain", pretrain),
        unlearn_train,
        unlearn_test,
        retained,
        utility,
        num_labels,
        vocab_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    pub(crate) fn cfg(t: usize) -> TaskConfig {
        TaskConfig {
            num_requests: t,
            samples_per_request: 16,
            test_samples: 8,
            retained_samples: 8,
            utility_samples: 8,
            pretrain_samples_per_domain: 20,
            noise_samples: 4,
            seq_len: 10,
            pool_tokens: 8,
            tokens_per_class: 2,
            home_prob: 0.6,
            dominant_prob: 0.7,
        }
    }

    #[test]
    fn suite_shapes_and_determinism() {
        let c = cfg(3);
        let v = c.required_vocab(4);
        assert_eq!(v, 8 + 6 * 8);
        let a = gen_tasks(7, &c, v, 4).unwrap();
        let b = gen_tasks(7, &c, v, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_tasks(8, &c, v, 4).unwrap());
        assert_eq!(a.unlearn_train.len(), 3);
        assert_eq!(a.pretrain.len(), 6 * 20 + 4);
        for t in 0..3 {
            let pre: HashSet<_> = a.pretrain.samples.iter().collect();
            assert!(a.unlearn_train[t].iter().all(|s| pre.contains(s)));
        }
    }

    #[test]
    fn domains_use_disjoint_home_tokens() {
        let c = cfg(3);
        let s = gen_tasks(1, &c, c.required_vocab(4), 4).unwrap();
        let homes = |ds: &Dataset| -> HashSet<usize> { ds.iter().flat_map(|x| x.tokens.iter().copied()).filter(|&t| t >= 8).collect() };
        let sets = [homes(&s.unlearn_test[0]), homes(&s.unlearn_test[1]), homes(&s.unlearn_test[2]), homes(&s.retained), homes(&s.utility[0]), homes(&s.utility[1])];
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                assert!(sets[i].is_disjoint(&sets[j]), "{i} {j}");
            }
        }
    }

    #[test]
    fn labels_are_strict_majorities() {
        let c = cfg(1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let s = c.sample_domain(DomainRole::Retained, 4, &mut rng);
            let mut counts = [0; 4];
            for &t in &s.tokens {
                if t >= c.pool_tokens {
                    counts[((t - c.pool_tokens) % 8) / 2] += 1;
                }
            }
            let max = counts[s.label];
            assert!(counts.iter().enumerate().all(|(k, &n)| k == s.label || n < max));
        }
    }

    #[test]
    fn too_many_requests_for_vocabulary() {
        let c = cfg(5);
        assert!(matches!(gen_tasks(0, &c, cfg(3).required_vocab(4), 4), Err(RcuError::Config(_))));
    }
}
