//! Ordered in-process message channels with a complete trace.

use std::collections::{HashMap, VecDeque};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Guest,
    Host,
    Arbiter,
    /// horizontal participant `k`
    Party(u32),
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Role::Guest => f.write_str("guest"),
            Role::Host => f.write_str("host"),
            Role::Arbiter => f.write_str("arbiter"),
            Role::Party(k) => write!(f, "party{k}"),
        }
    }
}

/// What a payload holds. Ciphertext kinds carry batch wire bytes; the rest
/// carry JSON.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    PublicKey,
    BatchPlan,
    /// `[[θ_hᵀx]]`
    EncryptedLogits,
    /// `[[(θ_hᵀx)²]]`
    EncryptedSquaredLogits,
    EncryptedForeGradient,
    EncryptedLoss,
    /// `[[gradient + mask]]`
    MaskedEncryptedGradient,
    /// decrypted `gradient + mask` residues
    MaskedGradient,
    EncryptedLocalGradient,
    SampleCount,
    Model,
}

impl MessageKind {
    pub fn is_ciphertext(self) -> bool {
        matches!(
            self,
            MessageKind::EncryptedLogits
                | MessageKind::EncryptedSquaredLogits
                | MessageKind::EncryptedForeGradient
                | MessageKind::EncryptedLoss
                | MessageKind::MaskedEncryptedGradient
                | MessageKind::EncryptedLocalGradient
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Message {
    pub seq: u64,
    pub from: Role,
    pub to: Role,
    pub kind: MessageKind,
    #[serde(skip)]
    pub payload: Vec<u8>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChannelError {
    #[error("{to} has no pending message")]
    Empty { to: Role },
    #[error("{to} expected {expected:?} from {from}, received {found:?} from {sender}")]
    Unexpected {
        to: Role,
        from: Role,
        expected: MessageKind,
        sender: Role,
        found: MessageKind,
    },
}

/// FIFO mailbox per recipient. Every send is appended to the trace.
#[derive(Debug, Default)]
pub struct Network {
    mailboxes: HashMap<Role, VecDeque<Message>>,
    trace: Vec<Message>,
    next_seq: u64,
}

impl Network {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn send(&mut self, from: Role, to: Role, kind: MessageKind, payload: Vec<u8>) {
        let msg = Message {
            seq: self.next_seq,
            from,
            to,
            kind,
            payload,
        };
        self.next_seq += 1;
        self.trace.push(msg.clone());
        self.mailboxes.entry(to).or_default().push_back(msg);
    }

    /// Takes the oldest message for `to`, which must be `kind` from `from`.
    pub fn recv(&mut self, to: Role, from: Role, kind: MessageKind) -> Result<Vec<u8>, ChannelError> {
        let queue = self.mailboxes.entry(to).or_default();
        let front = queue.front().ok_or(ChannelError::Empty { to })?;
        if front.kind != kind || front.from != from {
            return Err(ChannelError::Unexpected {
                to,
                from,
                expected: kind,
                sender: front.from,
                found: front.kind,
            });
        }
        Ok(queue.pop_front().expect("front exists").payload)
    }

    pub fn pending(&self, to: Role) -> usize {
        self.mailboxes.get(&to).map_or(0, VecDeque::len)
    }

    pub fn trace(&self) -> &[Message] {
        &self.trace
    }

    pub fn into_trace(self) -> Vec<Message> {
        self.trace
    }
}
