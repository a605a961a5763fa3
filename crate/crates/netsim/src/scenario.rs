//! Scenario files: seed, link policy, a timed fault script and an optional
//! workload description.
//!
//! ```json
//! {
//!   "seed": 7,
//!   "policy": {"loss_prob": 0.1, "delay_min_ms": 1, "delay_max_ms": 20, "duplicate_prob": 0.0},
//!   "faults": [
//!     {"at_ms": 4000, "kind": "partition", "args": {"groups": [[0, 1, 2], [3, 4]]}},
//!     {"at_ms": 9000, "kind": "heal"},
//!     {"at_ms": 9500, "kind": "set_loss", "args": {"p": 0.05}}
//!   ]
//! }
//! ```
//!
//! Partition groups name peers by index; the runner maps indices to
//! endpoint addresses.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{EndpointAddr, Fault, LinkPolicy, NetError, SimTime};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("fault #{index}: {reason}")]
    BadFault { index: usize, reason: String },
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub at_ms: SimTime,
    pub kind: String,
    #[serde(default)]
    pub args: serde_json::Value,
}

/// Traffic the runner generates. All fields have defaults so a bare
/// `{seed, policy, faults}` file is valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Workload {
    pub peers: usize,
    pub senders: usize,
    pub messages: usize,
    /// "agreed" or "fifo".
    pub mode: String,
    pub start_ms: SimTime,
    pub interval_ms: SimTime,
    pub duration_ms: SimTime,
}

impl Default for Workload {
    fn default() -> Self {
        Self {
            peers: 5,
            senders: 3,
            messages: 60,
            mode: "agreed".into(),
            start_ms: 3_000,
            interval_ms: 20,
            duration_ms: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    #[serde(default)]
    pub policy: LinkPolicy,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub workload: Workload,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let sc: Scenario = serde_json::from_str(text)?;
        sc.policy.validate()?;
        // Resolve every fault once up front so errors surface before running.
        let dummy: Vec<EndpointAddr> = (0..sc.workload.peers as u64)
            .map(|i| EndpointAddr::sim(i, 1))
            .collect();
        for i in 0..sc.faults.len() {
            sc.fault(i, &dummy)?;
        }
        Ok(sc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Resolves fault `index` against the peers' addresses.
    pub fn fault(&self, index: usize, peers: &[EndpointAddr]) -> Result<Fault, ScenarioError> {
        let spec = &self.faults[index];
        let bad = |reason: &str| ScenarioError::BadFault {
            index,
            reason: reason.to_string(),
        };
        match spec.kind.as_str() {
            "heal" => Ok(Fault::Heal),
            "set_loss" => {
                let p = spec
                    .args
                    .get("p")
                    .and_then(|v| v.as_f64())
                    .ok_or_else(|| bad("set_loss needs args.p"))?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(bad("loss probability out of range"));
                }
                Ok(Fault::SetLoss(p))
            }
            "partition" => {
                let groups = spec
                    .args
                    .get("groups")
                    .and_then(|g| g.as_array())
                    .ok_or_else(|| bad("partition needs args.groups"))?;
                let mut out = Vec::new();
                let mut seen = BTreeSet::new();
                for g in groups {
                    let mut set = BTreeSet::new();
                    for idx in g.as_array().ok_or_else(|| bad("group must be an array"))? {
                        let i = idx
                            .as_u64()
                            .ok_or_else(|| bad("peer index must be an integer"))?
                            as usize;
                        let addr = *peers.get(i).ok_or_else(|| bad("peer index out of range"))?;
                        if !seen.insert(i) {
                            return Err(bad("groups overlap"));
                        }
                        set.insert(addr);
                    }
                    out.push(set);
                }
                Ok(Fault::Partition(out))
            }
            other => Err(bad(&format!("unknown fault kind `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_file() {
        let sc = Scenario::from_json(r#"{"seed": 7, "policy": {"loss_prob": 0.1, "delay_min_ms": 1, "delay_max_ms": 9, "duplicate_prob": 0}, "faults": []}"#).unwrap();
        assert_eq!(sc.seed, 7);
        assert_eq!(sc.policy.loss_prob, 0.1);
        assert_eq!(sc.policy.delay_max, 9);
        assert_eq!(sc.workload, Workload::default());
    }

    #[test]
    fn rejects_overlapping_groups() {
        let text = r#"{"seed": 1, "faults": [{"at_ms": 5, "kind": "partition", "args": {"groups": [[0,1],[1,2]]}}]}"#;
        assert!(matches!(
            Scenario::from_json(text),
            Err(ScenarioError::BadFault { index: 0, .. })
        ));
    }

    #[test]
    fn rejects_invalid_policy() {
        let text = r#"{"seed": 1, "policy": {"loss_prob": 3}}"#;
        assert!(matches!(
            Scenario::from_json(text),
            Err(ScenarioError::Net(NetError::InvalidPolicy("loss_prob")))
        ));
    }

    #[test]
    fn resolves_faults() {
        let text = r#"{"seed": 1, "faults": [
            {"at_ms": 5, "kind": "partition", "args": {"groups": [[0],[1,2]]}},
            {"at_ms": 6, "kind": "heal"},
            {"at_ms": 7, "kind": "set_loss", "args": {"p": 0.5}}]}"#;
        let sc = Scenario::from_json(text).unwrap();
        let peers: Vec<_> = (0..3).map(|i| EndpointAddr::sim(i, 1)).collect();
        assert!(matches!(sc.fault(0, &peers).unwrap(), Fault::Partition(g) if g.len() == 2));
        assert_eq!(sc.fault(1, &peers).unwrap(), Fault::Heal);
        assert_eq!(sc.fault(2, &peers).unwrap(), Fault::SetLoss(0.5));
    }
}
