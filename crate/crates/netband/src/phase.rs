//! Server-side barrier bookkeeping over the party upload sequence.

use crate::error::{NetError, NetResult};
use crate::message::PhaseTag;

/// Party uploads in the order the server accepts them.
pub const UPLOAD_STAGES: [PhaseTag; 6] = [
    PhaseTag::Hello,
    PhaseTag::QcCounts,
    PhaseTag::Moments,
    PhaseTag::ProjUpload,
    PhaseTag::L0Payload,
    PhaseTag::AssocUpload,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Accept {
    /// Stored; the barrier is still waiting on others.
    Stored,
    /// This message completed the barrier of `PhaseTag`.
    Completed(PhaseTag),
    Abort,
}

#[derive(Clone, Debug)]
pub struct PhaseMachine {
    parties: usize,
    blocks: usize,
    stage: usize,
    received: Vec<usize>,
}

impl PhaseMachine {
    pub fn new(parties: usize, blocks: usize) -> Self {
        PhaseMachine {
            parties,
            blocks,
            stage: 0,
            received: vec![0; parties],
        }
    }

    /// Messages each party sends in `tag`'s phase.
    pub fn quota(&self, tag: PhaseTag) -> usize {
        match tag {
            PhaseTag::L0Payload | PhaseTag::AssocUpload => self.blocks,
            _ => 1,
        }
    }

    pub fn current(&self) -> Option<PhaseTag> {
        UPLOAD_STAGES.get(self.stage).copied()
    }

    pub fn is_done(&self) -> bool {
        self.stage >= UPLOAD_STAGES.len()
    }

    /// How many messages `party` (0-based) has contributed to the current phase.
    pub fn received(&self, party: usize) -> usize {
        self.received[party]
    }

    pub fn accept(&mut self, party: usize, tag: PhaseTag) -> NetResult<Accept> {
        if tag == PhaseTag::Abort {
            return Ok(Accept::Abort);
        }
        if party >= self.parties {
            return Err(NetError::Protocol(format!("unknown party index {party}")));
        }
        let Some(expected) = self.current() else {
            return Err(NetError::Protocol(format!(
                "{tag} from party {} after the session finished",
                party + 1
            )));
        };
        if tag != expected {
            return Err(NetError::Protocol(format!(
                "{tag} from party {} while in phase {expected}",
                party + 1
            )));
        }
        let quota = self.quota(tag);
        if self.received[party] >= quota {
            return Err(NetError::Protocol(format!(
                "party {} sent more than {quota} {tag} messages",
                party + 1
            )));
        }
        self.received[party] += 1;
        if self.received.iter().all(|&n| n == quota) {
            self.stage += 1;
            self.received.iter_mut().for_each(|n| *n = 0);
            Ok(Accept::Completed(tag))
        } else {
            Ok(Accept::Stored)
        }
    }
}
