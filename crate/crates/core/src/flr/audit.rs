//! Inspects a vertical training transcript for plaintext leaks.

use num_bigint::BigUint;
use num_traits::Num;

use super::channel::{MessageKind, Role};
use super::hetero::HeteroReport;
use super::MaskedResidues;
use crate::batch::{Exponents, PlaintextBatch, Shape};
use crate::paillier::{KeyFile, PublicKey};
use crate::storage::wire;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub messages: usize,
    pub host_bound: usize,
    pub decryptions: usize,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Kinds the host may receive. Everything else it could see would be guest
/// plaintext.
const HOST_INBOUND: [MessageKind; 4] = [
    MessageKind::PublicKey,
    MessageKind::BatchPlan,
    MessageKind::EncryptedForeGradient,
    MessageKind::MaskedGradient,
];

/// A masked residue counts as revealing when it decodes to within this of
/// the true gradient sum.
const REVEAL_TOLERANCE: f64 = 1e-3;

fn decode_residue(pk: &PublicKey, exponent: i32, hex: &str) -> Option<f64> {
    let m = BigUint::from_str_radix(hex, 16).ok()?;
    PlaintextBatch::new(pk, Shape::Vector(1), Exponents::Shared(exponent), vec![m]).ok()?.decode(pk).ok().map(|v| v[0])
}

/// Checks that
/// - the host only receives public keys, the batch plan, ciphertexts and
///   masked residues;
/// - every ciphertext payload is a well-formed batch under the session key;
/// - no public key message carries private factors;
/// - no masked residue returned to a party equals its plaintext gradient;
/// - only the arbiter decrypts.
pub fn audit_hetero(report: &HeteroReport) -> AuditReport {
    let pk = &report.public_key;
    let mut out = AuditReport {
        messages: report.trace.len(),
        decryptions: report.decrypt_events.len(),
        ..AuditReport::default()
    };
    let mut masked_seen = [0usize; 2];
    for msg in &report.trace {
        let at = format!("message {} ({:?} {} → {})", msg.seq, msg.kind, msg.from, msg.to);
        if msg.to == Role::Host {
            out.host_bound += 1;
            if !HOST_INBOUND.contains(&msg.kind) {
                out.violations.push(format!("{at}: kind not allowed for the host"));
            }
        }
        if msg.to == Role::Guest && msg.from == Role::Host && !msg.kind.is_ciphertext() {
            out.violations.push(format!("{at}: host sent the guest a plaintext payload"));
        }
        if msg.kind.is_ciphertext() {
            if let Err(e) = wire::from_bytes(pk, &msg.payload) {
                out.violations.push(format!("{at}: not a ciphertext batch: {e}"));
            }
            continue;
        }
        match msg.kind {
            MessageKind::PublicKey => {
                let parsed = std::str::from_utf8(&msg.payload).ok().and_then(|t| KeyFile::parse(t).ok());
                match parsed {
                    Some(kf) if kf.p.is_none() && kf.q.is_none() => {}
                    _ => out.violations.push(format!("{at}: not a public-only key file")),
                }
            }
            MessageKind::BatchPlan => {
                if serde_json::from_slice::<Vec<Vec<u64>>>(&msg.payload).is_err() {
                    out.violations.push(format!("{at}: batch plan carries more than ids"));
                }
            }
            MessageKind::MaskedGradient => {
                let slot = match msg.to {
                    Role::Guest => 0,
                    Role::Host => 1,
                    _ => {
                        out.violations.push(format!("{at}: unexpected recipient"));
                        continue;
                    }
                };
                if msg.from != Role::Arbiter {
                    out.violations.push(format!("{at}: only the arbiter may return residues"));
                }
                let Some(step) = report.steps.get(masked_seen[slot]) else {
                    out.violations.push(format!("{at}: no matching training step"));
                    continue;
                };
                masked_seen[slot] += 1;
                let truth = if slot == 0 { &step.guest_gradient } else { &step.host_gradient };
                let Ok(masked) = serde_json::from_slice::<MaskedResidues>(&msg.payload) else {
                    out.violations.push(format!("{at}: malformed residues"));
                    continue;
                };
                for (hex, g) in masked.residues.iter().zip(truth) {
                    let sum = g * step.size as f64;
                    if decode_residue(pk, masked.exponent, hex).is_some_and(|v| (v - sum).abs() <= REVEAL_TOLERANCE) {
                        out.violations.push(format!("{at}: residue reveals the plaintext gradient"));
                    }
                }
            }
            _ => out.violations.push(format!("{at}: unexpected plaintext kind")),
        }
    }
    for e in &report.decrypt_events {
        if e.role != Role::Arbiter {
            out.violations.push(format!("step {}: decryption by {}", e.step, e.role));
        }
    }
    out
}
