//! Bounded FIFO experience replay with uniform sampling.

use std::collections::VecDeque;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: VecDeque<T>,
}

impl<T: Clone> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Validation("replay capacity must be >= 1".into()));
        }
        Ok(Self { capacity, items: VecDeque::with_capacity(capacity) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends `item`, evicting the oldest entry when full.
    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    /// `batch_size` items drawn uniformly with replacement.
    pub fn sample(&self, batch_size: usize, rng: &mut Rng) -> Result<Vec<T>> {
        if self.items.is_empty() {
            return Err(Error::State("cannot sample from an empty replay buffer".into()));
        }
        let n = self.items.len();
        Ok((0..batch_size).map(|_| self.items[rng.gen_range(0..n)].clone()).collect())
    }
}
