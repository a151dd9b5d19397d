use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};

/// One environment transition. Observations are shared so that consecutive
/// transitions do not store the same vector twice.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: Arc<[f64]>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Arc<[f64]>,
    pub done: bool,
}

/// Fixed-capacity ring of transitions with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: Vec::new(),
            next: 0,
        })
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

    /// Inserts, overwriting the oldest transition once full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// `n` slot indices drawn uniformly with replacement.
    pub fn sample_indices(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if self.items.len() < n {
            return Err(Error::Shape(format!(
                "cannot sample {n} transitions from a buffer holding {}",
                self.items.len()
            )));
        }
        Ok((0..n)
            .map(|_| rng.random_range(0..self.items.len()))
            .collect())
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<&Transition>> {
        Ok(self
            .sample_indices(n, rng)?
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }
}
