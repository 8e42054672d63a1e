//! Horizontally partitioned training: every party holds full rows and
//! labels; the arbiter aggregates encrypted local gradients.
//!
//! Per step, each party with a batch left sends `[[ḡ_k]]` (its local mean
//! gradient), `[[L_k]]` (its local loss sum) and `s_k`. The arbiter forms
//! `Σ s_k·[[ḡ_k]]` inside its arena, decrypts, divides by `Σ s_k`, steps and
//! broadcasts the new weights. Every party trains with a constant bias
//! feature.

use std::collections::BTreeMap;

use rand_chacha::ChaCha20Rng;

use super::channel::{Message, MessageKind, Network, Role};
use super::dataset::{BatchPlan, Dataset, DatasetError};
use super::{encode_vec, into_cipher, math, release, Arbiter, DecryptEvent, EpochRecord, FlrError, Result, TrainConfig};
use crate::arena::{Arena, Input, Op, Output, TransferLedger};
use crate::batch::{CiphertextBatch, PlaintextBatch, Shape};
use crate::paillier::{keygen, seeded_rng, KeyFile, PublicKey};
use crate::storage::wire;

#[derive(Debug, Clone, PartialEq)]
pub struct HomoStep {
    pub epoch: usize,
    pub step: usize,
    /// instances contributing to the step
    pub size: usize,
    /// decrypted weighted mean gradient
    pub gradient: Vec<f64>,
    pub loss_sum: f64,
}

#[derive(Debug)]
pub struct HomoReport {
    pub epochs: Vec<EpochRecord>,
    /// weights, bias last
    pub theta: Vec<f64>,
    pub plans: Vec<BatchPlan>,
    pub steps: Vec<HomoStep>,
    pub trace: Vec<Message>,
    pub decrypt_events: Vec<DecryptEvent>,
    pub ledgers: BTreeMap<String, TransferLedger>,
}

/// Ids of every party's `t`-th batch, concatenated: the instances a
/// centralized trainer must see at step `t`.
pub fn merged_steps(plans: &[BatchPlan]) -> Vec<Vec<u64>> {
    let steps = plans.iter().map(|p| p.batches.len()).max().unwrap_or(0);
    (0..steps)
        .map(|t| plans.iter().filter_map(|p| p.batches.get(t)).flatten().copied().collect())
        .collect()
}

/// Per-party plans; party `k` shuffles with `seed + k`.
pub fn batch_plans(parties: &[Dataset], cfg: &TrainConfig) -> Result<Vec<BatchPlan>> {
    parties
        .iter()
        .enumerate()
        .map(|(k, d)| Ok(BatchPlan::new(&d.ids, cfg.batch_size, cfg.seed.wrapping_add(k as u64))?))
        .collect()
}

struct Party {
    role: Role,
    pk: PublicKey,
    data: Dataset,
    theta: Vec<f64>,
    arena: Arena,
    rng: ChaCha20Rng,
    batches: Vec<Vec<usize>>,
    precision: i32,
}

impl Party {
    fn encrypt(&mut self, values: &[f64]) -> Result<CiphertextBatch> {
        let plain = encode_vec(&self.pk, values, self.precision)?;
        let out = self.arena.exec_op(Op::Encrypt, &[Input::Plain(&plain)], false, &mut self.rng)?;
        into_cipher(&self.arena, out)
    }

    /// Sends this party's contribution for step `t`; false when it has none.
    fn contribute(&mut self, net: &mut Network, t: usize) -> Result<bool> {
        let Some(batch) = self.batches.get(t) else {
            return Ok(false);
        };
        let labels = self.data.labels.as_ref().expect("checked at setup");
        let rows: Vec<&[f64]> = batch.iter().map(|&i| self.data.features[i].as_slice()).collect();
        let y: Vec<f64> = batch.iter().map(|&i| labels[i]).collect();
        let gradient = math::taylor_gradient(&self.theta, &rows, &y);
        let loss_sum: f64 = rows.iter().zip(&y).map(|(x, &y)| math::taylor_loss_term(math::dot(&self.theta, x), y)).sum();
        let size = rows.len();
        let g = self.encrypt(&gradient)?;
        let l = self.encrypt(&[loss_sum])?;
        net.send(self.role, Role::Arbiter, MessageKind::EncryptedLocalGradient, wire::to_bytes(&g)?);
        net.send(self.role, Role::Arbiter, MessageKind::EncryptedLoss, wire::to_bytes(&l)?);
        net.send(self.role, Role::Arbiter, MessageKind::SampleCount, serde_json::to_vec(&size)?);
        Ok(true)
    }

    fn receive_model(&mut self, net: &mut Network) -> Result<()> {
        let theta: Vec<f64> = serde_json::from_slice(&net.recv(self.role, Role::Arbiter, MessageKind::Model)?)?;
        if theta.len() != self.theta.len() {
            return Err(FlrError::Payload("model width does not match local features".into()));
        }
        self.theta = theta;
        Ok(())
    }
}

struct Aggregator {
    arbiter: Arbiter,
    arena: Arena,
    rng: ChaCha20Rng,
    cache: bool,
    theta: Vec<f64>,
}

impl Aggregator {
    /// Folds `[[x]]·weight` into `acc`, keeping everything in the arena when
    /// caching.
    fn accumulate(&mut self, acc: Option<Output>, c: &CiphertextBatch, weight: Option<&PlaintextBatch>) -> Result<Output> {
        let term = match weight {
            Some(w) => self.arena.exec_op(Op::MulPlain, &[Input::Cipher(c), Input::Plain(w)], self.cache, &mut self.rng)?,
            None => Output::Cipher(c.clone()),
        };
        let Some(acc) = acc else {
            return Ok(term);
        };
        let sum = self.arena.exec_op(Op::Add, &[acc.as_input(), term.as_input()], self.cache, &mut self.rng);
        release(&self.arena, &acc)?;
        release(&self.arena, &term)?;
        Ok(sum?)
    }

    /// Aggregates one step; returns `(mean gradient, loss sum, instances)`.
    fn step(&mut self, net: &mut Network, senders: &[Role], step: usize) -> Result<(Vec<f64>, f64, usize)> {
        let pk = self.arbiter.public_key().clone();
        let (mut grad, mut loss, mut total) = (None, None, 0usize);
        for &role in senders {
            let g = wire::from_bytes(&pk, &net.recv(Role::Arbiter, role, MessageKind::EncryptedLocalGradient)?)?;
            let l = wire::from_bytes(&pk, &net.recv(Role::Arbiter, role, MessageKind::EncryptedLoss)?)?;
            let size: usize = serde_json::from_slice(&net.recv(Role::Arbiter, role, MessageKind::SampleCount)?)?;
            let weight = PlaintextBatch::encode(&pk, &[size as f64], Shape::Vector(1), Some(0))?;
            grad = Some(self.accumulate(grad, &g, Some(&weight))?);
            loss = Some(self.accumulate(loss, &l, None)?);
            total += size;
        }
        let (Some(grad), Some(loss)) = (grad, loss) else {
            return Err(FlrError::Config("a step with no participants".into()));
        };
        let grad = into_cipher(&self.arena, grad)?;
        let loss = into_cipher(&self.arena, loss)?;
        let sums = self.arbiter.decrypt(&grad, step)?.decode(&pk)?;
        let loss = self.arbiter.decrypt(&loss, step)?.decode(&pk)?[0];
        Ok((sums.iter().map(|s| s / total as f64).collect(), loss, total))
    }
}

/// Trains one model over parties that share a feature schema and all carry
/// labels.
pub fn train(parties: &[Dataset], cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<HomoReport> {
    cfg.validate()?;
    let first = parties.first().ok_or(FlrError::Config("no parties".into()))?;
    if parties.iter().any(|p| p.feature_names != first.feature_names) {
        return Err(DatasetError::SchemaMismatch.into());
    }
    if parties.iter().any(|p| p.labels.is_none()) {
        return Err(FlrError::Config("every party needs labels".into()));
    }
    let plans = batch_plans(parties, cfg)?;

    let keys = keygen(cfg.key_bits, &mut seeded_rng(cfg.seed ^ 0x6b65_7967))?;
    let arbiter = Arbiter::new(keys, cfg.backend);
    let mut net = Network::new();
    let key_json = KeyFile::from_public(arbiter.public_key()).to_json()?;
    let width = first.width() + 1;
    let mut agg = Aggregator {
        arena: cfg.arena(arbiter.public_key()),
        arbiter,
        rng: seeded_rng(cfg.seed.wrapping_add(0x61)),
        cache: cfg.cache,
        theta: vec![0.0; width],
    };

    let mut members = Vec::with_capacity(parties.len());
    for (k, (data, plan)) in parties.iter().zip(&plans).enumerate() {
        let role = Role::Party(k as u32);
        net.send(Role::Arbiter, role, MessageKind::PublicKey, key_json.clone().into_bytes());
        let text = String::from_utf8(net.recv(role, Role::Arbiter, MessageKind::PublicKey)?)
            .map_err(|e| FlrError::Payload(e.to_string()))?;
        let pk = KeyFile::parse(&text)?.load()?.public_key().clone();
        let data = data.clone().with_bias();
        members.push(Party {
            role,
            theta: vec![0.0; width],
            arena: cfg.arena(&pk),
            rng: seeded_rng(cfg.seed.wrapping_add(1 + k as u64)),
            batches: plan.indices_in(&data)?,
            precision: cfg.precision,
            data,
            pk,
        });
    }

    let steps_per_epoch = plans.iter().map(|p| p.batches.len()).max().unwrap_or(0);
    let total_rows: usize = plans.iter().map(BatchPlan::instance_count).sum();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        for t in 0..steps_per_epoch {
            let mut senders = Vec::new();
            for m in members.iter_mut() {
                if m.contribute(&mut net, t)? {
                    senders.push(m.role);
                }
            }
            let (gradient, loss, size) = agg.step(&mut net, &senders, step)?;
            for (th, g) in agg.theta.iter_mut().zip(&gradient) {
                *th -= cfg.learning_rate * g;
            }
            let model = serde_json::to_vec(&agg.theta)?;
            for m in members.iter_mut() {
                net.send(Role::Arbiter, m.role, MessageKind::Model, model.clone());
                m.receive_model(&mut net)?;
            }
            loss_sum += loss;
            steps.push(HomoStep {
                epoch,
                step: t,
                size,
                gradient,
                loss_sum: loss,
            });
            step += 1;
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / total_rows as f64,
            grad_norm: steps.last().map_or(0.0, |s| math::norm(&s.gradient)),
            ledger: ledgers(&agg, &members),
        };
        on_epoch(&record);
        epochs.push(record);
    }

    Ok(HomoReport {
        epochs,
        ledgers: ledgers(&agg, &members),
        theta: agg.theta.clone(),
        plans,
        steps,
        trace: net.into_trace(),
        decrypt_events: agg.arbiter.decrypt_events().to_vec(),
    })
}

fn ledgers(agg: &Aggregator, members: &[Party]) -> BTreeMap<String, TransferLedger> {
    let mut out: BTreeMap<String, TransferLedger> =
        members.iter().map(|m| (m.role.to_string(), m.arena.ledger())).collect();
    out.insert(Role::Arbiter.to_string(), agg.arena.ledger());
    out
}
