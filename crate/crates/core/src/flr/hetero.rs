//! Vertically partitioned training: the guest holds labels and some feature
//! columns, the host holds the rest, and the arbiter holds the private key.
//!
//! Per mini-batch:
//! 1. host → guest: `[[lh]]`, `[[lh²]]` where `lh = X_h·θ_h`
//! 2. guest: fore-gradient `[[fg]]` from the arena pipeline; → host
//! 3. guest → arbiter: `[[Σ loss terms]]`, `[[fgᵀX_g + R_g]]`
//! 4. host → arbiter: `[[fgᵀX_h + R_h]]`
//! 5. arbiter → each party: decrypted masked residues
//! 6. each party removes its mask, divides by the batch size and steps.
//!
//! Neither feature-holding party ever sees a plaintext value derived from the
//! other's data; the arbiter only sees uniformly masked gradients and the
//! batch loss.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;

use rand_chacha::ChaCha20Rng;

use super::channel::{Message, MessageKind, Network, Role};
use super::dataset::{BatchPlan, Dataset};
use super::{
    draw_mask, encode_vec, into_cipher, math, release, unmask, Arbiter, DecryptEvent, EpochRecord, FlrError,
    MaskedResidues, Result, TrainConfig,
};
use crate::arena::{run_fore_gradient_pipeline, Arena, Input, Op, Output, TransferLedger};
use crate::batch::{CiphertextBatch, PlaintextBatch};
use crate::paillier::{keygen, seeded_rng, KeyFile, PublicKey};
use crate::storage::{wire, MinibatchAggregator, Row};

/// Plaintext view of one training step, recorded by the harness for checks.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub batch: usize,
    pub size: usize,
    /// mean gradient over the batch
    pub guest_gradient: Vec<f64>,
    pub host_gradient: Vec<f64>,
    /// sum of the batch's loss terms
    pub loss_sum: f64,
}

#[derive(Debug)]
pub struct HeteroReport {
    pub epochs: Vec<EpochRecord>,
    /// guest weights, bias last
    pub theta_guest: Vec<f64>,
    pub theta_host: Vec<f64>,
    pub plan: BatchPlan,
    pub steps: Vec<StepRecord>,
    pub trace: Vec<Message>,
    pub decrypt_events: Vec<DecryptEvent>,
    pub ledgers: BTreeMap<String, TransferLedger>,
    pub public_key: PublicKey,
    /// the guest's labels in plan order, for auditing
    pub labels: Vec<f64>,
}

impl HeteroReport {
    /// Guest weights followed by host weights, the layout of
    /// `join_vertical(&[guest.with_bias(), host])`.
    pub fn theta(&self) -> Vec<f64> {
        self.theta_guest.iter().chain(&self.theta_host).copied().collect()
    }
}

struct Party {
    role: Role,
    pk: PublicKey,
    data: Dataset,
    theta: Vec<f64>,
    arena: Arena,
    aggregator: MinibatchAggregator,
    rng: ChaCha20Rng,
    batches: Vec<Vec<usize>>,
    cache: bool,
    precision: i32,
    pending_mask: Option<PlaintextBatch>,
    last_gradient: Vec<f64>,
}

impl Party {
    fn new(role: Role, pk: PublicKey, data: Dataset, cfg: &TrainConfig, rng_seed: u64) -> Self {
        Self {
            role,
            theta: vec![0.0; data.width()],
            arena: cfg.arena(&pk),
            aggregator: MinibatchAggregator::new(pk.clone(), cfg.precision),
            rng: seeded_rng(rng_seed),
            batches: Vec::new(),
            cache: cfg.cache,
            precision: cfg.precision,
            pending_mask: None,
            last_gradient: Vec::new(),
            data,
            pk,
        }
    }

    fn set_plan(&mut self, plan: &BatchPlan) -> Result<()> {
        self.batches = plan.indices_in(&self.data)?;
        Ok(())
    }

    fn rows(&self, b: usize) -> Vec<Row> {
        let labels = self.data.labels.as_ref();
        self.batches[b]
            .iter()
            .map(|&i| Row {
                id: self.data.ids[i],
                features: self.data.features[i].clone(),
                label: labels.map_or(0.0, |l| l[i]),
            })
            .collect()
    }

    fn logits(&self, b: usize) -> Vec<f64> {
        self.batches[b].iter().map(|&i| math::dot(&self.theta, &self.data.features[i])).collect()
    }

    fn exec(&mut self, op: Op, inputs: &[Input<'_>], cache: bool) -> Result<Output> {
        Ok(self.arena.exec_op(op, inputs, cache, &mut self.rng)?)
    }

    /// `[[fgᵀX + R]]` for this party's batch features; keeps `R`.
    fn masked_gradient(&mut self, fore: Input<'_>, b: usize) -> Result<CiphertextBatch> {
        let packed = self.aggregator.aggregate(b as u64, &self.rows(b))?;
        let grad = self.exec(Op::MatMul, &[fore, Input::Plain(&packed.features)], self.cache)?;
        let exponent = match &grad {
            Output::Handle(h) => h.exponents().uniform(),
            Output::Cipher(c) => c.exponents().uniform(),
            Output::Plain(_) => None,
        }
        .ok_or_else(|| FlrError::Payload("gradient has mixed exponents".into()))?;
        let mask = draw_mask(&self.pk, self.data.width(), exponent, &mut self.rng)?;
        let masked = self.exec(Op::AddPlain, &[grad.as_input(), Input::Plain(&mask)], false);
        release(&self.arena, &grad)?;
        self.pending_mask = Some(mask);
        into_cipher(&self.arena, masked?)
    }

    fn apply_gradient(&mut self, net: &mut Network, size: usize, lr: f64) -> Result<()> {
        let payload = net.recv(self.role, Role::Arbiter, MessageKind::MaskedGradient)?;
        let masked: MaskedResidues = serde_json::from_slice(&payload)?;
        let mask = self
            .pending_mask
            .take()
            .ok_or_else(|| FlrError::Payload("masked gradient without a pending mask".into()))?;
        let sums = unmask(&self.pk, &masked, &mask)?;
        let grad: Vec<f64> = sums.iter().map(|s| s / size as f64).collect();
        for (t, g) in self.theta.iter_mut().zip(&grad) {
            *t -= lr * g;
        }
        self.last_gradient = grad;
        Ok(())
    }
}

fn send_cipher(net: &mut Network, from: Role, to: Role, kind: MessageKind, c: &CiphertextBatch) -> Result<()> {
    net.send(from, to, kind, wire::to_bytes(c)?);
    Ok(())
}

fn recv_cipher(net: &mut Network, pk: &PublicKey, to: Role, from: Role, kind: MessageKind) -> Result<CiphertextBatch> {
    let bytes = net.recv(to, from, kind)?;
    Ok(wire::from_bytes(pk, &bytes)?)
}

fn host_send_logits(host: &mut Party, net: &mut Network, b: usize) -> Result<()> {
    let lh = host.logits(b);
    let lh2: Vec<f64> = lh.iter().map(|v| v * v).collect();
    for (values, kind) in [(lh, MessageKind::EncryptedLogits), (lh2, MessageKind::EncryptedSquaredLogits)] {
        let plain = encode_vec(&host.pk, &values, host.precision)?;
        let enc = host.exec(Op::Encrypt, &[Input::Plain(&plain)], false)?;
        let c = into_cipher(&host.arena, enc)?;
        send_cipher(net, Role::Host, Role::Guest, kind, &c)?;
    }
    Ok(())
}

fn guest_step(guest: &mut Party, net: &mut Network, b: usize) -> Result<()> {
    let pk = guest.pk.clone();
    let p = guest.precision;
    let lh = recv_cipher(net, &pk, Role::Guest, Role::Host, MessageKind::EncryptedLogits)?;
    let lh2 = recv_cipher(net, &pk, Role::Guest, Role::Host, MessageKind::EncryptedSquaredLogits)?;
    let lg = guest.logits(b);
    let packed = guest.aggregator.aggregate(b as u64, &guest.rows(b))?;
    let y: Vec<f64> = guest.batches[b].iter().map(|&i| guest.data.labels.as_ref().expect("guest has labels")[i]).collect();

    let h_lh = guest.arena.upload_cipher(&lh)?;
    let lg_plain = encode_vec(&pk, &lg, p)?;
    let fore = run_fore_gradient_pipeline(&guest.arena, &h_lh, &lg_plain, &packed.labels, guest.cache, &mut guest.rng)?;
    let fore_host = match &fore {
        Output::Handle(h) => guest.arena.download_cipher(h)?,
        Output::Cipher(c) => c.clone(),
        Output::Plain(_) => return Err(FlrError::Payload("fore-gradient came back as plaintext".into())),
    };
    send_cipher(net, Role::Guest, Role::Host, MessageKind::EncryptedForeGradient, &fore_host)?;

    // Σ ln2 − ½·y·z + ⅛·z² with z = lg + lh, expanded so that only terms
    // linear in [[lh]] and [[lh²]] are encrypted.
    let coef: Vec<f64> = lg.iter().zip(&y).map(|(g, y)| 0.25 * g - 0.5 * y).collect();
    let constant: Vec<f64> = lg.iter().zip(&y).map(|(g, y)| LN_2 - 0.5 * y * g + 0.125 * g * g).collect();
    let coef = encode_vec(&pk, &coef, p)?;
    let eighth = encode_vec(&pk, &[0.125], p)?;
    let constant = encode_vec(&pk, &constant, 2 * p)?;
    let cache = guest.cache;
    let linear = guest.exec(Op::MulPlain, &[Input::Handle(&h_lh), Input::Plain(&coef)], cache)?;
    let quad = guest.exec(Op::MulPlain, &[Input::Cipher(&lh2), Input::Plain(&eighth)], cache)?;
    let terms = guest.exec(Op::Add, &[linear.as_input(), quad.as_input()], cache)?;
    let shifted = guest.exec(Op::AddPlain, &[terms.as_input(), Input::Plain(&constant)], cache)?;
    let loss = guest.exec(Op::Sum { axis: None }, &[shifted.as_input()], false)?;
    for out in [&linear, &quad, &terms, &shifted] {
        release(&guest.arena, out)?;
    }
    let loss = into_cipher(&guest.arena, loss)?;
    send_cipher(net, Role::Guest, Role::Arbiter, MessageKind::EncryptedLoss, &loss)?;

    let masked = guest.masked_gradient(fore.as_input(), b);
    release(&guest.arena, &fore)?;
    guest.arena.release(&h_lh)?;
    send_cipher(net, Role::Guest, Role::Arbiter, MessageKind::MaskedEncryptedGradient, &masked?)
}

fn host_step(host: &mut Party, net: &mut Network, b: usize) -> Result<()> {
    let pk = host.pk.clone();
    let fore = recv_cipher(net, &pk, Role::Host, Role::Guest, MessageKind::EncryptedForeGradient)?;
    let h = host.arena.upload_cipher(&fore)?;
    let masked = host.masked_gradient(Input::Handle(&h), b);
    host.arena.release(&h)?;
    send_cipher(net, Role::Host, Role::Arbiter, MessageKind::MaskedEncryptedGradient, &masked?)
}

/// Returns the decrypted batch loss sum.
fn arbiter_step(arbiter: &mut Arbiter, net: &mut Network, step: usize) -> Result<f64> {
    let pk = arbiter.public_key().clone();
    let loss = recv_cipher(net, &pk, Role::Arbiter, Role::Guest, MessageKind::EncryptedLoss)?;
    let loss = arbiter.decrypt(&loss, step)?.decode(&pk)?;
    for role in [Role::Guest, Role::Host] {
        let c = recv_cipher(net, &pk, Role::Arbiter, role, MessageKind::MaskedEncryptedGradient)?;
        let residues = MaskedResidues::from_plain(&arbiter.decrypt(&c, step)?)?;
        net.send(Role::Arbiter, role, MessageKind::MaskedGradient, serde_json::to_vec(&residues)?);
    }
    Ok(loss[0])
}

/// Ids present in both parties, in guest order.
fn aligned_ids(guest: &Dataset, host: &Dataset) -> Vec<u64> {
    let host_ids = host.id_index();
    guest.ids.iter().copied().filter(|id| host_ids.contains_key(id)).collect()
}

/// The plan both the federated run and its centralized reference replay.
pub fn batch_plan(guest: &Dataset, host: &Dataset, cfg: &TrainConfig) -> Result<BatchPlan> {
    Ok(BatchPlan::new(&aligned_ids(guest, host), cfg.batch_size, cfg.seed)?)
}

/// Trains on the instances shared by `guest` (labelled) and `host`.
/// `on_epoch` sees each epoch's record as soon as it is complete.
pub fn train(guest: &Dataset, host: &Dataset, cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<HeteroReport> {
    cfg.validate()?;
    if guest.labels.is_none() {
        return Err(FlrError::Config("the guest dataset needs labels".into()));
    }
    let plan = batch_plan(guest, host, cfg)?;

    let keys = keygen(cfg.key_bits, &mut seeded_rng(cfg.seed ^ 0x6b65_7967))?;
    let mut arbiter = Arbiter::new(keys, cfg.backend);
    let mut net = Network::new();
    let key_json = KeyFile::from_public(arbiter.public_key()).to_json()?;
    for role in [Role::Guest, Role::Host] {
        net.send(Role::Arbiter, role, MessageKind::PublicKey, key_json.clone().into_bytes());
    }
    let mut load_key = |role: Role| -> Result<PublicKey> {
        let bytes = net.recv(role, Role::Arbiter, MessageKind::PublicKey)?;
        let text = String::from_utf8(bytes).map_err(|e| FlrError::Payload(e.to_string()))?;
        Ok(KeyFile::parse(&text)?.load()?.public_key().clone())
    };
    let guest_pk = load_key(Role::Guest)?;
    let host_pk = load_key(Role::Host)?;

    let mut g = Party::new(Role::Guest, guest_pk, guest.clone().with_bias(), cfg, cfg.seed.wrapping_add(1));
    let mut h = Party::new(Role::Host, host_pk, host.clone(), cfg, cfg.seed.wrapping_add(2));
    g.set_plan(&plan)?;
    net.send(Role::Guest, Role::Host, MessageKind::BatchPlan, serde_json::to_vec(&plan.batches)?);
    let received: Vec<Vec<u64>> = serde_json::from_slice(&net.recv(Role::Host, Role::Guest, MessageKind::BatchPlan)?)?;
    h.set_plan(&BatchPlan { batches: received })?;

    let labels: Vec<f64> = {
        let all = g.data.labels.as_ref().expect("checked above");
        g.batches.iter().flatten().map(|&i| all[i]).collect()
    };
    let total = plan.instance_count() as f64;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        for (b, ids) in plan.batches.iter().enumerate() {
            host_send_logits(&mut h, &mut net, b)?;
            guest_step(&mut g, &mut net, b)?;
            host_step(&mut h, &mut net, b)?;
            let batch_loss = arbiter_step(&mut arbiter, &mut net, step)?;
            g.apply_gradient(&mut net, ids.len(), cfg.learning_rate)?;
            h.apply_gradient(&mut net, ids.len(), cfg.learning_rate)?;
            loss_sum += batch_loss;
            steps.push(StepRecord {
                epoch,
                batch: b,
                size: ids.len(),
                guest_gradient: g.last_gradient.clone(),
                host_gradient: h.last_gradient.clone(),
                loss_sum: batch_loss,
            });
            step += 1;
        }
        let last = steps.last().expect("plan is non-empty");
        let full: Vec<f64> = last.guest_gradient.iter().chain(&last.host_gradient).copied().collect();
        let record = EpochRecord {
            epoch,
            loss: loss_sum / total,
            grad_norm: math::norm(&full),
            ledger: ledgers(&g, &h),
        };
        on_epoch(&record);
        epochs.push(record);
    }

    Ok(HeteroReport {
        epochs,
        ledgers: ledgers(&g, &h),
        theta_guest: g.theta,
        theta_host: h.theta,
        plan,
        steps,
        trace: net.into_trace(),
        decrypt_events: arbiter.decrypt_events().to_vec(),
        public_key: arbiter.public_key().clone(),
        labels,
    })
}

fn ledgers(g: &Party, h: &Party) -> BTreeMap<String, TransferLedger> {
    [(Role::Guest.to_string(), g.arena.ledger()), (Role::Host.to_string(), h.arena.ledger())].into()
}

