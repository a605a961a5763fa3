//! Chained upflow/downflow group Diffie-Hellman.
//!
//! Members are ordered by `ProcessId`. Member 0 starts the upflow with
//! `[g, g^x0]`. Member k raises every entry it received to `x_k`, inserts
//! the unraised last entry (which lacks only `x_k`) before the new last
//! entry, and forwards. The last member computes the shared value from the
//! final entry and broadcasts the downflow: n entries, entry i lacking
//! exactly `x_i`.

use std::sync::Arc;

use crate::identity::{verify_signature, Identity, IdentityCert};
use crate::membership::{ProcessId, View, ViewId};
use crate::wire::{Reader, WireError, Writer};

use super::algebra::{Element, GroupAlgebra, Scalar};
use super::SglError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Upflow,
    Downflow,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowKind {
    Upflow = 1,
    Downflow = 2,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowMessage {
    pub kind: FlowKind,
    pub view_id: ViewId,
    pub sender: ProcessId,
    pub elements: Vec<Element>,
    pub signature: [u8; 64],
}

impl FlowMessage {
    fn body(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(b"GDH1").u8(self.kind as u8);
        self.view_id.encode(&mut w);
        self.sender.encode(&mut w);
        w.u16(self.elements.len() as u16);
        for e in &self.elements {
            w.bytes16(&e.0);
        }
        w.finish()
    }

    pub fn sign(mut self, identity: &Identity) -> Self {
        self.signature = identity.sign(&self.body());
        self
    }

    pub fn verify(&self, cert: &IdentityCert) -> bool {
        cert.fingerprint() == self.sender.fingerprint
            && verify_signature(cert, &self.body(), &self.signature)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.body();
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != b"GDH1" {
            return Err(WireError::BadMagic);
        }
        let kind = match r.u8()? {
            1 => FlowKind::Upflow,
            2 => FlowKind::Downflow,
            k => return Err(WireError::UnknownKind(k)),
        };
        let view_id = ViewId::decode(&mut r)?;
        let sender = ProcessId::decode(&mut r)?;
        let n = r.u16()? as usize;
        let mut elements = Vec::with_capacity(n);
        for _ in 0..n {
            elements.push(Element(r.bytes16()?.to_vec()));
        }
        let signature = r.array()?;
        r.finish()?;
        Ok(Self {
            kind,
            view_id,
            sender,
            elements,
            signature,
        })
    }
}

/// Outcome of one state-machine step.
#[derive(Debug, Default)]
pub struct Step {
    /// Unsigned flow to multicast, if any.
    pub send: Option<FlowMessage>,
    /// The shared element, once known.
    pub shared: Option<Element>,
}

pub struct KeyAgreementState {
    algebra: Arc<dyn GroupAlgebra>,
    view_id: ViewId,
    members: Vec<ProcessId>,
    my_index: usize,
    secret: Scalar,
    phase: Phase,
    partials: Vec<Element>,
}

impl std::fmt::Debug for KeyAgreementState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyAgreementState")
            .field("view_id", &self.view_id)
            .field("my_index", &self.my_index)
            .field("phase", &self.phase)
            .finish_non_exhaustive()
    }
}

impl KeyAgreementState {
    pub fn new(
        algebra: Arc<dyn GroupAlgebra>,
        view: &View,
        me: &ProcessId,
        secret: Scalar,
    ) -> Result<Self, SglError> {
        let my_index = view.index_of(me).ok_or(SglError::NotMember)?;
        Ok(Self {
            algebra,
            view_id: view.id,
            members: view.members().to_vec(),
            my_index,
            secret,
            phase: Phase::Upflow,
            partials: Vec::new(),
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn view_id(&self) -> ViewId {
        self.view_id
    }

    pub fn my_index(&self) -> usize {
        self.my_index
    }

    fn flow(&self, kind: FlowKind, elements: Vec<Element>) -> FlowMessage {
        FlowMessage {
            kind,
            view_id: self.view_id,
            sender: self.members[self.my_index],
            elements,
            signature: [0; 64],
        }
    }

    /// Kicks off the protocol. Only member 0 (or a singleton) does anything.
    pub fn start(&mut self) -> Result<Step, SglError> {
        if self.my_index != 0 || self.phase != Phase::Upflow {
            return Ok(Step::default());
        }
        let g = self.algebra.generator();
        let gx = self.algebra.exp(&g, &self.secret)?;
        if self.members.len() == 1 {
            self.phase = Phase::Done;
            return Ok(Step {
                send: None,
                shared: Some(gx),
            });
        }
        self.partials = vec![g, gx];
        self.phase = Phase::Downflow;
        Ok(Step {
            send: Some(self.flow(FlowKind::Upflow, self.partials.clone())),
            shared: None,
        })
    }

    /// Processes a flow whose signature the caller has already checked.
    pub fn handle(&mut self, msg: &FlowMessage) -> Result<Step, SglError> {
        if msg.view_id != self.view_id {
            return Err(SglError::WrongView);
        }
        let n = self.members.len();
        let sender_index = self
            .members
            .iter()
            .position(|m| *m == msg.sender)
            .ok_or(SglError::NotMember)?;
        match msg.kind {
            FlowKind::Upflow => {
                if sender_index + 1 != self.my_index || self.phase != Phase::Upflow {
                    return Ok(Step::default());
                }
                let k = self.my_index;
                if msg.elements.len() != k + 1 {
                    return Err(SglError::MissingPartial);
                }
                let (full, rest) = msg.elements.split_last().expect("k + 1 >= 2");
                let mut out = Vec::with_capacity(k + 2);
                for e in rest {
                    out.push(self.algebra.exp(e, &self.secret)?);
                }
                out.push(full.clone());
                let raised_full = self.algebra.exp(full, &self.secret)?;
                if k == n - 1 {
                    self.phase = Phase::Done;
                    self.partials = out.clone();
                    Ok(Step {
                        send: Some(self.flow(FlowKind::Downflow, out)),
                        shared: Some(raised_full),
                    })
                } else {
                    out.push(raised_full);
                    self.phase = Phase::Downflow;
                    self.partials = out.clone();
                    Ok(Step {
                        send: Some(self.flow(FlowKind::Upflow, out)),
                        shared: None,
                    })
                }
            }
            FlowKind::Downflow => {
                if self.phase == Phase::Done {
                    return Ok(Step::default());
                }
                if sender_index != n - 1 {
                    return Err(SglError::MissingPartial);
                }
                let mine = msg
                    .elements
                    .get(self.my_index)
                    .ok_or(SglError::MissingPartial)?;
                if msg.elements.len() != n {
                    return Err(SglError::MissingPartial);
                }
                let shared = self.algebra.exp(mine, &self.secret)?;
                self.phase = Phase::Done;
                Ok(Step {
                    send: None,
                    shared: Some(shared),
                })
            }
        }
    }
}
