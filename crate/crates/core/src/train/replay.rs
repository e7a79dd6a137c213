use alloc::vec::Vec;

use crate::env::Trajectory;
use crate::error::{Error, Result};

/// Bounded trajectory store. When full, inserting evicts the trajectory
/// with the lowest return (the oldest among ties); a newcomer that would
/// itself be the lowest is dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Trajectory>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("replay capacity must be positive".into()));
        }
        Ok(Self { capacity, items: Vec::with_capacity(capacity) })
    }

    pub fn from_items(capacity: usize, items: Vec<Trajectory>) -> Result<Self> {
        let mut b = Self::new(capacity)?;
        for t in items {
            b.insert(t)?;
        }
        Ok(b)
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

    pub fn is_full(&self) -> bool {
        self.items.len() == self.capacity
    }

    pub fn items(&self) -> &[Trajectory] {
        &self.items
    }

    pub fn min_return(&self) -> Option<f64> {
        self.items.iter().map(|t| t.total_return()).reduce(f64::min)
    }

    /// Insert, returning whatever was evicted (possibly `tr` itself).
    pub fn insert(&mut self, tr: Trajectory) -> Result<Option<Trajectory>> {
        if tr.is_empty() {
            return Err(Error::MalformedTrajectory("no steps".into()));
        }
        if !tr.total_return().is_finite() {
            return Err(Error::NonFinite { op: "replay insert" });
        }
        if self.items.len() < self.capacity {
            self.items.push(tr);
            return Ok(None);
        }
        let mut lowest = 0;
        for (i, t) in self.items.iter().enumerate() {
            if t.total_return() < self.items[lowest].total_return() {
                lowest = i;
            }
        }
        if tr.total_return() <= self.items[lowest].total_return() {
            return Ok(Some(tr));
        }
        let old = self.items.remove(lowest);
        self.items.push(tr);
        Ok(Some(old))
    }
}
