//! Episode storage and contiguous-sequence replay sampling.

use std::collections::VecDeque;

use rand::Rng;

use crate::env::Observation;
use crate::error::{Error, Result};

/// One complete episode: T+1 observations bracket T actions and rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub observations: Vec<Observation>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    /// Seed the episode's environment was reset with.
    pub seed: u64,
}

impl Episode {
    /// Number of transitions (actions) in the episode.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.actions.is_empty() {
            return Err(Error::contract("episode: no transitions"));
        }
        if self.observations.len() != self.actions.len() + 1 {
            return Err(Error::contract(format!(
                "episode: {} observations for {} actions",
                self.observations.len(),
                self.actions.len()
            )));
        }
        if self.rewards.len() != self.actions.len() {
            return Err(Error::contract(format!(
                "episode: {} rewards for {} actions",
                self.rewards.len(),
                self.actions.len()
            )));
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::non_finite("episode rewards"));
        }
        Ok(())
    }
}

/// Bounded FIFO of complete episodes; eviction is strictly oldest-first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    episodes: VecDeque<Episode>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::contract("ReplayBuffer: capacity must be >= 1"));
        }
        Ok(ReplayBuffer {
            episodes: VecDeque::new(),
            capacity,
        })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn episode(&self, i: usize) -> &Episode {
        &self.episodes[i]
    }

    pub fn add(&mut self, episode: Episode) -> Result<()> {
        episode.validate()?;
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
        Ok(())
    }
}

/// N contiguous sequences of L transitions each, never crossing an episode
/// boundary. Each sequence carries L+1 observations.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub observations: Vec<Vec<Observation>>,
    pub actions: Vec<Vec<Vec<f64>>>,
    pub rewards: Vec<Vec<f64>>,
}

impl SequenceBatch {
    pub fn batch_size(&self) -> usize {
        self.observations.len()
    }

    pub fn seq_len(&self) -> usize {
        self.actions.first().map_or(0, |a| a.len())
    }
}

/// Samples N (episode, start offset) pairs uniformly; `start` ranges over
/// `[0, episode_len - L]` so every slice stays inside one episode.
pub fn sample_sequences<R: Rng>(
    buffer: &ReplayBuffer,
    n: usize,
    l: usize,
    rng: &mut R,
) -> Result<SequenceBatch> {
    if n == 0 || l == 0 {
        return Err(Error::contract("sample_sequences: n and l must be >= 1"));
    }
    let eligible: Vec<usize> = (0..buffer.len())
        .filter(|&i| buffer.episode(i).len() >= l)
        .collect();
    if eligible.is_empty() {
        return Err(Error::contract(format!(
            "sample_sequences: no episode of length >= {} in the buffer; collect more warmup experience",
            l
        )));
    }
    let mut observations = Vec::with_capacity(n);
    let mut actions = Vec::with_capacity(n);
    let mut rewards = Vec::with_capacity(n);
    for _ in 0..n {
        let ep = buffer.episode(eligible[rng.gen_range(0..eligible.len())]);
        let start = rng.gen_range(0..=ep.len() - l);
        observations.push(ep.observations[start..=start + l].to_vec());
        actions.push(ep.actions[start..start + l].to_vec());
        rewards.push(ep.rewards[start..start + l].to_vec());
    }
    Ok(SequenceBatch {
        observations,
        actions,
        rewards,
    })
}
