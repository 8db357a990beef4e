use std::collections::VecDeque;

use super::{Dataset, Transition, TransitionSource};
use crate::error::{Error, Result};

pub const DEFAULT_CAPACITY: usize = 1_000_000;

/// Fixed-capacity FIFO store of transitions for online fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("replay buffer capacity must be positive"));
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, transition: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(transition);
    }

    /// Appends the final `last_k` transitions of `dataset`, oldest first.
    pub fn seed_from(&mut self, dataset: &Dataset, last_k: usize) -> Result<()> {
        if last_k > dataset.len() {
            return Err(Error::config(format!(
                "cannot seed {last_k} transitions from a dataset of {}",
                dataset.len()
            )));
        }
        for t in &dataset.transitions[dataset.len() - last_k..] {
            self.push(t.clone());
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }
}

/// Seeds `buffer` with the tail of `dataset` and hands it back.
pub fn seed_buffer(mut buffer: ReplayBuffer, dataset: &Dataset, last_k: usize) -> Result<ReplayBuffer> {
    buffer.seed_from(dataset, last_k)?;
    Ok(buffer)
}

impl TransitionSource for ReplayBuffer {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn get(&self, index: usize) -> &Transition {
        &self.items[index]
    }
}
