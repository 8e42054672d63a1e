use rand::RngCore;

use super::{Arena, ArenaHandle, Input, Op, Output, Result};
use crate::batch::PlaintextBatch;

/// Number of operators in the fore-gradient pipeline, counting the two
/// constant encodings.
pub const PIPELINE_OPS: usize = 8;

/// The constants `0.25` and `−0.5` at their natural exponents.
pub fn fore_gradient_constants(arena: &Arena) -> Result<(PlaintextBatch, PlaintextBatch)> {
    let pk = arena.public_key();
    Ok((PlaintextBatch::scalar(pk, 0.25)?, PlaintextBatch::scalar(pk, -0.5)?))
}

/// Computes `[[0.25·(logits_host + logits_guest) − 0.5·label]]`.
///
/// Steps: encode 0.25, encode −0.5, `logits_guest·0.25`, encrypt,
/// `[[logits_host]]·0.25`, add, `label·(−0.5)`, add plain.
///
/// `logits_guest` must share the exponent of `[[logits_host]]`, and `label`
/// must not be finer than it; the result carries that exponent minus one.
/// With `cache` every intermediate stays in the arena and is released at the
/// end, and the result comes back as a handle. Without it each step's result
/// goes back to the host and is uploaded again for the next step.
pub fn run_fore_gradient_pipeline(
    arena: &Arena,
    h_logits_host: &ArenaHandle,
    logits_guest: &PlaintextBatch,
    label: &PlaintextBatch,
    cache: bool,
    rng: &mut dyn RngCore,
) -> Result<Output> {
    let (quarter, neg_half) = fore_gradient_constants(arena)?;
    let mut scratch: Vec<Output> = Vec::new();
    let result = (|| {
        let guest_q = arena.exec_op(Op::PlainMul, &[Input::Plain(logits_guest), Input::Plain(&quarter)], cache, rng)?;
        scratch.push(guest_q);
        let enc = arena.exec_op(Op::Encrypt, &[scratch[0].as_input()], cache, rng)?;
        scratch.push(enc);
        let host_q = arena.exec_op(Op::MulPlain, &[Input::Handle(h_logits_host), Input::Plain(&quarter)], cache, rng)?;
        scratch.push(host_q);
        let sum = arena.exec_op(Op::Add, &[scratch[2].as_input(), scratch[1].as_input()], cache, rng)?;
        scratch.push(sum);
        let lab = arena.exec_op(Op::PlainMul, &[Input::Plain(label), Input::Plain(&neg_half)], cache, rng)?;
        scratch.push(lab);
        arena.exec_op(Op::AddPlain, &[scratch[3].as_input(), scratch[4].as_input()], cache, rng)
    })();
    for out in &scratch {
        if let Some(h) = out.handle() {
            arena.release(h)?;
        }
    }
    result
}
