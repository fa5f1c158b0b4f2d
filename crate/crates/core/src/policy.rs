//! Stationary, non-idling, 0-1 scheduling policies.

use alloc::vec;
use alloc::vec::Vec;

use crate::network::NetworkSpec;
use crate::{Error, Result};

/// Which classes receive their station's full effort in the current state.
///
/// The pooled exogenous arrival stream is always active and is not stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    active: Vec<bool>,
}

impl Allocation {
    pub fn idle(classes: usize) -> Self {
        Self {
            active: vec![false; classes],
        }
    }

    pub fn from_active(active: Vec<bool>) -> Self {
        Self { active }
    }

    #[inline]
    pub fn is_active(&self, class: usize) -> bool {
        self.active[class]
    }

    /// `w_i` as 0.0 or 1.0.
    #[inline]
    pub fn weight(&self, class: usize) -> f64 {
        if self.active[class] {
            1.0
        } else {
            0.0
        }
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.active
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn exogenous(&self) -> bool {
        true
    }

    fn clear(&mut self) {
        self.active.iter_mut().for_each(|a| *a = false);
    }
}

/// A deterministic state-feedback rule. Implementations must be non-idling
/// and serve at most one class per station.
pub trait Policy {
    fn allocate(&self, y: &[u32], w: &mut Allocation);

    fn allocation(&self, y: &[u32]) -> Allocation {
        let mut w = Allocation::idle(y.len());
        self.allocate(y, &mut w);
        w
    }
}

/// Preemptive priority: each station serves its highest-priority nonempty
/// class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PriorityPolicy {
    /// Per station, classes from highest to lowest priority.
    order: Vec<Vec<usize>>,
}

impl PriorityPolicy {
    pub fn new(spec: &NetworkSpec, order: Vec<Vec<usize>>) -> Result<Self> {
        verify_policy(&order, spec)?;
        Ok(Self { order })
    }

    /// First buffer, first served: lower class index wins.
    pub fn fbfs(spec: &NetworkSpec) -> Self {
        let order = (0..spec.num_stations())
            .map(|s| spec.classes_at(s).collect())
            .collect();
        Self { order }
    }

    /// Last buffer, first served: higher class index wins.
    pub fn lbfs(spec: &NetworkSpec) -> Self {
        let order = (0..spec.num_stations())
            .map(|s| {
                let mut v: Vec<usize> = spec.classes_at(s).collect();
                v.reverse();
                v
            })
            .collect();
        Self { order }
    }

    pub fn order(&self) -> &[Vec<usize>] {
        &self.order
    }

    pub fn station_order(&self, station: usize) -> &[usize] {
        &self.order[station]
    }

    /// Priority rank of `class` at its station (0 is highest).
    pub fn rank(&self, class: usize) -> Option<usize> {
        self.order.iter().find_map(|o| o.iter().position(|c| *c == class))
    }
}

impl Policy for PriorityPolicy {
    fn allocate(&self, y: &[u32], w: &mut Allocation) {
        w.clear();
        for station in &self.order {
            if let Some(&c) = station.iter().find(|&&c| y[c] > 0) {
                w.active[c] = true;
            }
        }
    }
}

/// Checks that `order` lists every class exactly once, at its own station.
pub fn verify_policy(order: &[Vec<usize>], spec: &NetworkSpec) -> Result<()> {
    let classes = spec.num_classes();
    if order.len() > spec.num_stations() {
        return Err(Error::BadStationMap("priority order names a nonexistent station"));
    }
    let mut seen = vec![false; classes];
    for (station, list) in order.iter().enumerate() {
        for &c in list {
            if c >= classes {
                return Err(Error::Dimension("priority order names a nonexistent class"));
            }
            if seen[c] {
                return Err(Error::DuplicateClass { class: c });
            }
            seen[c] = true;
            if spec.station_of(c) != station {
                return Err(Error::WrongStation { class: c, station });
            }
        }
    }
    match seen.iter().position(|s| !s) {
        Some(class) => Err(Error::IncompleteOrder { class }),
        None => Ok(()),
    }
}
