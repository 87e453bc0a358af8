//! Decentralized collaborative training: agents merge models received from
//! neighbors, take local SGD steps, and forward their model to one neighbor.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::neural::{Example, Mlp};
use crate::rng::{derive_rng, SimRng};
use crate::topology::{sample_gossip_pair, Graph};

/// `(1 − μ)·W_i + μ·W_r`.
pub fn merge_model(local: &Mlp, received: &Mlp, mu: f64) -> Result<Mlp> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(invalid("mu", "must lie in [0, 1]"));
    }
    let mut out = local.clone();
    out.blend(received, mu)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationMode {
    /// Every agent acts once per round in id order; models sent during a
    /// round become visible at the start of the next one.
    Synchronous,
    /// `n` activations of uniformly drawn agents per round; sends are
    /// visible immediately.
    Asynchronous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GossipConfig {
    pub mu: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mode: ActivationMode,
}

impl Default for GossipConfig {
    fn default() -> Self {
        Self {
            mu: 0.5,
            learning_rate: 0.01,
            batch_size: 32,
            mode: ActivationMode::Synchronous,
        }
    }
}

impl GossipConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(invalid("mu", "must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(invalid("learning_rate", "must be non-negative"));
        }
        Ok(())
    }
}

/// One participating agent.
#[derive(Debug, Clone)]
pub struct LearnerState {
    pub agent: usize,
    pub model: Mlp,
    pub data: Vec<Example>,
    /// Latest received model; a newer arrival replaces an unmerged one.
    pub inbox: Option<Mlp>,
    order: Vec<usize>,
    cursor: usize,
    rng: SimRng,
}

impl LearnerState {
    /// `seed` drives this learner's batch shuffling.
    pub fn new(agent: usize, model: Mlp, data: Vec<Example>, seed: u64) -> Self {
        Self {
            agent,
            model,
            data,
            inbox: None,
            order: Vec::new(),
            cursor: 0,
            rng: derive_rng(seed, agent as u64),
        }
    }

    /// Next mini-batch from a reshuffled pass over the local data. Indices are
    /// sorted within the batch so the gradient sum is order-independent.
    fn next_batch(&mut self, size: usize) -> Vec<Example> {
        let want = size.min(self.data.len());
        let mut picked = Vec::with_capacity(want);
        while picked.len() < want {
            if self.cursor >= self.order.len() {
                self.order = (0..self.data.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            picked.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        picked.sort_unstable();
        picked.into_iter().map(|i| self.data[i].clone()).collect()
    }

    /// Merge the pending model (if any), then one SGD step (if data exists).
    /// Returns the batch loss when a step was taken.
    fn merge_and_train(&mut self, config: &GossipConfig) -> Result<Option<f64>> {
        if let Some(received) = self.inbox.take() {
            self.model.blend(&received, config.mu)?;
        }
        if self.data.is_empty() {
            return Ok(None);
        }
        let batch = self.next_batch(config.batch_size);
        self.model.sgd_step(&batch, config.learning_rate).map(Some)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Mean batch loss over agents that trained this round (NaN if none).
    pub mean_loss: f64,
    /// `max_ij ‖W_i − W_j‖∞`.
    pub dispersion: f64,
}

pub fn dispersion(learners: &[LearnerState]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (a, la) in learners.iter().enumerate() {
        for lb in &learners[a + 1..] {
            worst = worst.max(la.model.max_abs_diff(&lb.model)?);
        }
    }
    Ok(worst)
}

fn check_learners(learners: &[LearnerState], graph: Option<&Graph>) -> Result<()> {
    if let Some(g) = graph {
        if g.n() != learners.len() {
            return Err(Error::DimensionMismatch {
                expected: g.n(),
                actual: learners.len(),
            });
        }
    }
    if let Some(first) = learners.first() {
        for (i, l) in learners.iter().enumerate() {
            if l.agent != i {
                return Err(invalid("learners", "learner i must represent agent i"));
            }
            if !l.model.same_shape(&first.model) {
                return Err(invalid("learners", "all models must share one architecture"));
            }
        }
    }
    Ok(())
}

/// One round of gossip training. With `graph == None` no models are
/// exchanged and every agent only trains locally.
pub fn gossip_round<R: Rng + ?Sized>(
    learners: &mut [LearnerState],
    graph: Option<&Graph>,
    config: &GossipConfig,
    round: usize,
    rng: &mut R,
) -> Result<RoundMetrics> {
    config.validate()?;
    check_learners(learners, graph)?;
    let mut losses = Vec::new();
    match config.mode {
        ActivationMode::Synchronous => {
            for learner in learners.iter_mut() {
                losses.extend(learner.merge_and_train(config)?);
            }
            if let Some(g) = graph {
                for i in 0..learners.len() {
                    let nbrs = g.neighbors(i);
                    let j = nbrs[rng.gen_range(0..nbrs.len())];
                    learners[j].inbox = Some(learners[i].model.clone());
                }
            }
        }
        ActivationMode::Asynchronous => {
            let n = learners.len();
            for _ in 0..n {
                let (i, j) = match graph {
                    Some(g) => {
                        let (i, j) = sample_gossip_pair(g, rng);
                        (i, Some(j))
                    }
                    None => (rng.gen_range(0..n), None),
                };
                losses.extend(learners[i].merge_and_train(config)?);
                if let Some(j) = j {
                    learners[j].inbox = Some(learners[i].model.clone());
                }
            }
        }
    }
    let mean_loss = if losses.is_empty() {
        f64::NAN
    } else {
        losses.iter().sum::<f64>() / losses.len() as f64
    };
    Ok(RoundMetrics {
        round,
        mean_loss,
        dispersion: dispersion(learners)?,
    })
}

pub fn run_gossip_training<R: Rng + ?Sized>(
    learners: &mut [LearnerState],
    graph: Option<&Graph>,
    rounds: usize,
    config: &GossipConfig,
    rng: &mut R,
) -> Result<Vec<RoundMetrics>> {
    (0..rounds)
        .map(|r| gossip_round(learners, graph, config, r, rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::init;
    use crate::rng::rng_from_seed;
    use crate::topology::{manhattan_grid, GraphKind};
    use alloc::vec;

    fn toy_data() -> Vec<Example> {
        vec![
            Example::new(vec![0.2, 0.1], vec![1.0]),
            Example::new(vec![-0.3, 0.4], vec![0.0]),
            Example::new(vec![0.5, -0.5], vec![1.0]),
        ]
    }

    #[test]
    fn merge_endpoints_and_midpoint() {
        let a = init(&[2, 3, 1], 1).unwrap();
        let b = init(&[2, 3, 1], 2).unwrap();
        assert_eq!(merge_model(&a, &b, 0.0).unwrap(), a);
        assert_eq!(merge_model(&a, &b, 1.0).unwrap().flat_params(), b.flat_params());
        let mut x = a.clone();
        let mut y = a.clone();
        x.set_flat_params(&vec![2.0; a.num_params()]).unwrap();
        y.set_flat_params(&vec![4.0; a.num_params()]).unwrap();
        let mid = merge_model(&x, &y, 0.5).unwrap();
        assert!(mid.params().all(|&p| p == 3.0));
        assert!(merge_model(&a, &b, 1.5).is_err());
    }

    #[test]
    fn no_exchange_is_plain_sgd() {
        let model = init(&[2, 3, 1], 1).unwrap();
        let config = GossipConfig {
            batch_size: 3,
            learning_rate: 0.1,
            ..GossipConfig::default()
        };
        let mut learners = vec![LearnerState::new(0, model.clone(), toy_data(), 7)];
        gossip_round(&mut learners, None, &config, 0, &mut rng_from_seed(0)).unwrap();
        let mut reference = model;
        reference.sgd_step(&toy_data(), 0.1).unwrap();
        assert!(learners[0].model.max_abs_diff(&reference).unwrap() < 1e-15);
    }

    #[test]
    fn two_agents_swap_models() {
        let g = Graph::from_edges(2, &[(0, 1)], GraphKind::Custom).unwrap();
        let a = init(&[2, 3, 1], 1).unwrap();
        let b = init(&[2, 3, 1], 2).unwrap();
        let mut learners = vec![
            LearnerState::new(0, a.clone(), vec![], 0),
            LearnerState::new(1, b.clone(), vec![], 0),
        ];
        let config = GossipConfig {
            mu: 1.0,
            ..GossipConfig::default()
        };
        let mut rng = rng_from_seed(0);
        gossip_round(&mut learners, Some(&g), &config, 0, &mut rng).unwrap();
        assert_eq!(learners[1].inbox.as_ref(), Some(&a));
        assert_eq!(learners[0].inbox.as_ref(), Some(&b));
        gossip_round(&mut learners, Some(&g), &config, 1, &mut rng).unwrap();
        assert_eq!(learners[0].model.flat_params(), b.flat_params());
        assert_eq!(learners[1].model.flat_params(), a.flat_params());
    }

    #[test]
    fn identical_start_stays_identical() {
        let g = manhattan_grid(3, 3).unwrap();
        let model = init(&[2, 4, 1], 3).unwrap();
        let mut learners: Vec<LearnerState> = (0..9)
            .map(|i| LearnerState::new(i, model.clone(), toy_data(), 11))
            .collect();
        let config = GossipConfig {
            batch_size: 8,
            learning_rate: 0.05,
            ..GossipConfig::default()
        };
        let metrics =
            run_gossip_training(&mut learners, Some(&g), 5, &config, &mut rng_from_seed(1)).unwrap();
        assert!(metrics.iter().all(|m| m.dispersion == 0.0));
    }

    #[test]
    fn zero_rounds_changes_nothing() {
        let model = init(&[2, 3, 1], 1).unwrap();
        let mut learners = vec![LearnerState::new(0, model.clone(), toy_data(), 0)];
        let m = run_gossip_training(&mut learners, None, 0, &GossipConfig::default(), &mut rng_from_seed(0))
            .unwrap();
        assert!(m.is_empty());
        assert_eq!(learners[0].model, model);
    }

    #[test]
    fn learner_indexing_is_checked() {
        let model = init(&[2, 3, 1], 1).unwrap();
        let mut learners = vec![LearnerState::new(1, model, vec![], 0)];
        assert!(gossip_round(&mut learners, None, &GossipConfig::default(), 0, &mut rng_from_seed(0)).is_err());
    }
}
