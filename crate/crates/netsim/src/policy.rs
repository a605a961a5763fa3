use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::{EndpointAddr, NetError, SimTime};

/// Link behaviour applied to every datagram scheduled on the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkPolicy {
    pub loss_prob: f64,
    #[serde(rename = "delay_min_ms")]
    pub delay_min: SimTime,
    #[serde(rename = "delay_max_ms")]
    pub delay_max: SimTime,
    pub duplicate_prob: f64,
    /// When false, deliveries on each (src, dst) link keep send order.
    pub reorder: bool,
    /// Disjoint endpoint groups. Endpoints not named in any group share one
    /// implicit group of their own.
    #[serde(skip)]
    pub partition: Vec<BTreeSet<EndpointAddr>>,
}

impl Default for LinkPolicy {
    fn default() -> Self {
        Self {
            loss_prob: 0.0,
            delay_min: 1,
            delay_max: 10,
            duplicate_prob: 0.0,
            reorder: true,
            partition: Vec::new(),
        }
    }
}

impl LinkPolicy {
    pub fn lossless(delay_min: SimTime, delay_max: SimTime) -> Self {
        Self {
            delay_min,
            delay_max,
            ..Self::default()
        }
    }

    pub fn with_loss(mut self, p: f64) -> Self {
        self.loss_prob = p;
        self
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if !(0.0..=1.0).contains(&self.loss_prob) {
            return Err(NetError::InvalidPolicy("loss_prob"));
        }
        if !(0.0..=1.0).contains(&self.duplicate_prob) {
            return Err(NetError::InvalidPolicy("duplicate_prob"));
        }
        if self.delay_min > self.delay_max {
            return Err(NetError::InvalidPolicy("delay_min"));
        }
        check_disjoint(&self.partition)
    }

    fn group_of(&self, addr: &EndpointAddr) -> Option<usize> {
        self.partition.iter().position(|g| g.contains(addr))
    }

    /// True when `a` and `b` sit on the same side of the current partition.
    pub fn connected(&self, a: &EndpointAddr, b: &EndpointAddr) -> bool {
        self.group_of(a) == self.group_of(b)
    }
}

pub(crate) fn check_disjoint(groups: &[BTreeSet<EndpointAddr>]) -> Result<(), NetError> {
    let mut seen = BTreeSet::new();
    for g in groups {
        for a in g {
            if !seen.insert(*a) {
                return Err(NetError::OverlappingPartition(*a));
            }
        }
    }
    Ok(())
}

/// Runtime fault injected into a live network.
#[derive(Debug, Clone, PartialEq)]
pub enum Fault {
    Partition(Vec<BTreeSet<EndpointAddr>>),
    Heal,
    SetLoss(f64),
}
