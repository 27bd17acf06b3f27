//! Bounded sliding window over the most recent measurements.

use std::collections::VecDeque;

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Chronologically ordered window of the `m` most recent measurement vectors.
/// Pushing past capacity evicts the oldest entry.
#[derive(Debug, Clone)]
pub struct MeasurementWindow {
    entries: VecDeque<DVector<f64>>,
    capacity: usize,
}

impl MeasurementWindow {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("window capacity must be at least 1".into()));
        }
        Ok(Self {
            entries: VecDeque::with_capacity(capacity),
            capacity,
        })
    }

    /// Appends a measurement, evicting the oldest entry when full.
    pub fn push(&mut self, z: DVector<f64>) -> Result<()> {
        if let Some(first) = self.entries.front() {
            if first.len() != z.len() {
                return Err(Error::Dimension(format!(
                    "measurement dim {} does not match window dim {}",
                    z.len(),
                    first.len()
                )));
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(z);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Dimension of the stored measurements, or `None` while empty.
    pub fn dim(&self) -> Option<usize> {
        self.entries.front().map(|z| z.len())
    }

    /// Oldest-to-newest iteration.
    pub fn iter(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.entries.iter()
    }

    /// Most recent measurement.
    pub fn latest(&self) -> Option<&DVector<f64>> {
        self.entries.back()
    }

    /// Copies the entries oldest-to-newest.
    pub fn to_vec(&self) -> Vec<DVector<f64>> {
        self.entries.iter().cloned().collect()
    }
}
