//! Federated averaging over noisy links.
//!
//! One round: the server binarizes `w_m` and broadcasts it (optionally through
//! a bit-error channel), every client trains locally from what it received,
//! binarizes its payload (the update `w_tau - w_0`, or the trained weights) and
//! uploads it (optionally through the channel), and the server aggregates. The
//! server model itself stays in full precision; quantization happens only at
//! transmission boundaries, so even error-free links quantize.
//!
//! Clients run through [`crate::par`]; the aggregation is a fixed
//! ascending-client-index reduction, so results do not depend on the number of
//! worker threads.

use serde::{Deserialize, Serialize};

use crate::channel::{derive_rng, stream_key, transmit, FlipMode, Link, StreamTag, SERVER};
use crate::codec::{range_of, QuantSpec};
use crate::data::{partition_fixed_shards, partition_iid, Dataset};
use crate::error::{ensure_len, Error, Result};
use crate::nn::{self, init_model, local_train, BatchSampler, MlpSpec, OptimState, ParamVector};

/// What clients upload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadMode {
    /// Model updates `w_tau - w_0`; the server adds their weighted sum to `w_m`.
    #[default]
    Updates,
    /// Trained weights; the server replaces `w_m` by their weighted mean.
    Weights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisyLinks {
    #[default]
    None,
    DownlinkOnly,
    UplinkOnly,
    Both,
}

impl NoisyLinks {
    pub fn is_noisy(self, link: Link) -> bool {
        matches!(
            (self, link),
            (NoisyLinks::Both, _)
                | (NoisyLinks::DownlinkOnly, Link::Downlink)
                | (NoisyLinks::UplinkOnly, Link::Uplink)
        )
    }
}

/// Whether all clients see one downlink error realization per round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownlinkSharing {
    #[default]
    Shared,
    PerClient,
}

/// Unit of the local-training length `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalUnit {
    /// `tau` mini-batch SGD steps.
    #[default]
    Steps,
    /// `tau` passes over the client's shard.
    Epochs,
}

/// BER of one link, constant or given per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BerSchedule {
    Constant(f64),
    PerRound(Vec<f64>),
}

impl Default for BerSchedule {
    fn default() -> Self {
        BerSchedule::Constant(0.0)
    }
}

impl BerSchedule {
    pub fn at(&self, round: usize) -> f64 {
        match self {
            BerSchedule::Constant(b) => *b,
            BerSchedule::PerRound(v) => v[round],
        }
    }

    fn validate(&self, rounds: usize, name: &str) -> Result<()> {
        let values: &[f64] = match self {
            BerSchedule::Constant(b) => std::slice::from_ref(b),
            BerSchedule::PerRound(v) => {
                if v.len() < rounds {
                    return Err(Error::Config(format!(
                        "{name} BER schedule has {} entries for {rounds} rounds",
                        v.len()
                    )));
                }
                v
            }
        };
        for &b in values {
            crate::channel::validate_ber(b).map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkSettings {
    pub ber: BerSchedule,
    pub flip_mode: FlipMode,
}

/// Full description of one federated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlConfig {
    /// Number of clients `n`.
    pub clients: usize,
    /// Communication rounds `K`.
    pub rounds: usize,
    /// Local training length `tau`, in `local_unit`s.
    pub local_steps: usize,
    pub local_unit: LocalUnit,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub payload_mode: PayloadMode,
    pub noisy_links: NoisyLinks,
    pub downlink_sharing: DownlinkSharing,
    pub downlink: LinkSettings,
    pub uplink: LinkSettings,
    pub quant: QuantSpec,
    /// Aggregation weights `p_i`; data-share ratios when absent.
    pub weights: Option<Vec<f64>>,
    /// Fixed per-client shard size; otherwise the data is split `n` ways.
    pub shard_size: Option<usize>,
    pub master_seed: u64,
    /// Record the full-data gradient norm at each round's starting point.
    pub track_grad_norm: bool,
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            clients: 5,
            rounds: 30,
            local_steps: 5,
            local_unit: LocalUnit::Steps,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.0,
            payload_mode: PayloadMode::Updates,
            noisy_links: NoisyLinks::None,
            downlink_sharing: DownlinkSharing::Shared,
            downlink: LinkSettings::default(),
            uplink: LinkSettings::default(),
            quant: QuantSpec::default(),
            weights: None,
            shard_size: None,
            master_seed: 0,
            track_grad_norm: false,
        }
    }
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("clients", self.clients),
            ("rounds", self.rounds),
            ("local_steps", self.local_steps),
            ("batch_size", self.batch_size),
        ] {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        OptimState::new(self.learning_rate, self.momentum, 0)?;
        self.downlink.ber.validate(self.rounds, "downlink")?;
        self.uplink.ber.validate(self.rounds, "uplink")?;
        if let Some(p) = &self.weights {
            validate_weights(p, self.clients)?;
        }
        Ok(())
    }

    fn ber(&self, link: Link, round: usize) -> f64 {
        if !self.noisy_links.is_noisy(link) {
            return 0.0;
        }
        match link {
            Link::Downlink => self.downlink.ber.at(round),
            Link::Uplink => self.uplink.ber.at(round),
        }
    }

    fn flip_mode(&self, link: Link) -> FlipMode {
        match link {
            Link::Downlink => self.downlink.flip_mode,
            Link::Uplink => self.uplink.flip_mode,
        }
    }
}

/// Checks `p_i > 0` and `sum p_i = 1` (to 1e-9).
pub fn validate_weights(p: &[f64], n: usize) -> Result<()> {
    if p.len() != n {
        return Err(Error::Config(format!(
            "{} aggregation weights for {n} clients",
            p.len()
        )));
    }
    if p.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::Config(format!(
            "aggregation weights must be positive, got {p:?}"
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "aggregation weights must sum to 1, got {total}"
        )));
    }
    Ok(())
}

/// Per-round metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// `p`-weighted mean of the clients' mini-batch losses during the round.
    pub train_loss: f64,
    /// Test accuracy of the aggregated model `w_{m+1}`.
    pub test_accuracy: f64,
    /// `range(w_m)` before encoding.
    pub range_w: f64,
    /// Range of each client's payload before encoding.
    pub range_dw: Vec<f64>,
    pub ber_down: f64,
    pub ber_up: Vec<f64>,
    /// `||grad f(w_bar_{m,0})||^2` on the full training set.
    pub grad_norm_sq: Option<f64>,
}

impl RoundRecord {
    pub fn mean_range_dw(&self) -> f64 {
        self.range_dw.iter().sum::<f64>() / self.range_dw.len() as f64
    }

    pub fn max_range_dw(&self) -> f64 {
        self.range_dw.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean_ber_up(&self) -> f64 {
        self.ber_up.iter().sum::<f64>() / self.ber_up.len() as f64
    }
}

/// Server-side aggregation with a fixed ascending-index reduction order.
///
/// Updates mode: `base + sum_i p_i * received_i`. Weights mode:
/// `sum_i p_i * received_i`.
pub fn aggregate(received: &[ParamVector], p: &[f64], base: &ParamVector, mode: PayloadMode) -> Result<ParamVector> {
    ensure_len("aggregation weights", received.len(), p.len())?;
    let mut sum = ParamVector::zeros(base.len());
    for (r, &pi) in received.iter().zip(p) {
        ensure_len("received payload", base.len(), r.len())?;
        for (o, x) in sum.iter_mut().zip(r.iter()) {
            *o += pi * x;
        }
    }
    if mode == PayloadMode::Updates {
        for (o, b) in sum.iter_mut().zip(base.iter()) {
            *o += b;
        }
    }
    Ok(sum)
}

/// Squared norm of the full-dataset gradient at `w`.
pub fn grad_norm_metric(w: &ParamVector, spec: &MlpSpec, data: &Dataset) -> Result<f64> {
    Ok(nn::full_gradient(w, spec, data)?.1.norm_sq())
}

struct ClientOutcome {
    start: ParamVector,
    received: ParamVector,
    payload_range: f64,
    ber_up: f64,
    loss: f64,
}

/// A configured federation: model, client shards and aggregation weights.
pub struct Federation {
    spec: MlpSpec,
    cfg: FlConfig,
    shards: Vec<Dataset>,
    p: Vec<f64>,
    train: Dataset,
}

impl Federation {
    /// Partitions `data` among the clients. Everything is checked before any
    /// training happens.
    pub fn new(cfg: FlConfig, spec: MlpSpec, data: &Dataset) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if data.dim() != spec.input_dim() {
            return Err(Error::Config(format!(
                "model expects {} input features, data has {}",
                spec.input_dim(),
                data.dim()
            )));
        }
        if data.num_classes() > spec.num_classes() {
            return Err(Error::Config(format!(
                "model has {} outputs, data has {} classes",
                spec.num_classes(),
                data.num_classes()
            )));
        }
        let seed = stream_key(cfg.master_seed, 0, SERVER, StreamTag::Partition);
        let plan = match cfg.shard_size {
            Some(size) => partition_fixed_shards(data.len(), cfg.clients, size, seed)?,
            None => partition_iid(data.len(), cfg.clients, seed)?,
        };
        let p = cfg.weights.clone().unwrap_or_else(|| plan.p.clone());
        let shards: Vec<Dataset> = plan.assignment.iter().map(|idx| data.subset(idx)).collect();
        let train = data.subset(&plan.assignment.concat());
        Ok(Self {
            spec,
            cfg,
            shards,
            p,
            train,
        })
    }

    pub fn config(&self) -> &FlConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn shards(&self) -> &[Dataset] {
        &self.shards
    }

    pub fn weights(&self) -> &[f64] {
        &self.p
    }

    pub fn initial_params(&self) -> ParamVector {
        init_model(
            &self.spec,
            stream_key(self.cfg.master_seed, 0, SERVER, StreamTag::Init),
        )
    }

    /// SGD steps client `i` performs per round.
    pub fn local_step_count(&self, client: usize) -> usize {
        match self.cfg.local_unit {
            LocalUnit::Steps => self.cfg.local_steps,
            LocalUnit::Epochs => {
                let per_epoch = BatchSampler::new(self.shards[client].len(), self.cfg.batch_size)
                    .map_or(1, |s| s.steps_per_epoch());
                self.cfg.local_steps * per_epoch
            }
        }
    }

    fn send(&self, v: &[f64], link: Link, round: usize, client: u64) -> Result<ParamVector> {
        let ber = self.cfg.ber(link, round);
        let mut rng = derive_rng(self.cfg.master_seed, round as u64, client, link);
        transmit(v, self.cfg.quant, ber, self.cfg.flip_mode(link), &mut rng)
    }

    /// Models the clients start round `m` from.
    fn broadcast(&self, w: &ParamVector, round: usize) -> Result<Vec<ParamVector>> {
        match self.cfg.downlink_sharing {
            DownlinkSharing::Shared => {
                let received = self.send(w, Link::Downlink, round, SERVER)?;
                Ok(vec![received; self.cfg.clients])
            }
            DownlinkSharing::PerClient => crate::par::map_indexed(self.cfg.clients, |i| {
                self.send(w, Link::Downlink, round, i as u64)
            })
            .into_iter()
            .collect(),
        }
    }

    fn client_round(&self, i: usize, start: ParamVector, round: usize) -> Result<ClientOutcome> {
        let mut optim = OptimState::new(self.cfg.learning_rate, self.cfg.momentum, start.len())?;
        let mut rng = derive_rng(self.cfg.master_seed, round as u64, i as u64, StreamTag::Sampling);
        let local = local_train(
            &start,
            &self.spec,
            &self.shards[i],
            self.local_step_count(i),
            self.cfg.batch_size,
            &mut optim,
            &mut rng,
        )?;
        let payload = match self.cfg.payload_mode {
            PayloadMode::Updates => local.update,
            PayloadMode::Weights => local.params,
        };
        if !payload.is_finite() {
            return Err(Error::Data(format!(
                "client {i} produced non-finite parameters in round {round}"
            )));
        }
        let received = self.send(&payload, Link::Uplink, round, i as u64)?;
        Ok(ClientOutcome {
            start,
            received,
            payload_range: range_of(&payload),
            ber_up: self.cfg.ber(Link::Uplink, round),
            loss: local.mean_loss,
        })
    }

    /// Executes round `m` from the global model `w` and returns `w_{m+1}`.
    pub fn run_round(&self, w: &ParamVector, round: usize, testset: &Dataset) -> Result<(ParamVector, RoundRecord)> {
        let range_w = range_of(w);
        let starts = self.broadcast(w, round)?;
        let outcomes: Vec<ClientOutcome> =
            crate::par::map_indexed(self.cfg.clients, |i| self.client_round(i, starts[i].clone(), round))
                .into_iter()
                .collect::<Result<_>>()?;

        let received: Vec<ParamVector> = outcomes.iter().map(|o| o.received.clone()).collect();
        let next = aggregate(&received, &self.p, w, self.cfg.payload_mode)?;

        let grad_norm_sq = if self.cfg.track_grad_norm {
            let mean_start = aggregate(
                &outcomes.iter().map(|o| o.start.clone()).collect::<Vec<_>>(),
                &vec![1.0 / self.cfg.clients as f64; self.cfg.clients],
                w,
                PayloadMode::Weights,
            )?;
            Some(grad_norm_metric(&mean_start, &self.spec, &self.train)?)
        } else {
            None
        };

        let record = RoundRecord {
            round,
            train_loss: outcomes.iter().zip(&self.p).map(|(o, p)| p * o.loss).sum(),
            test_accuracy: nn::evaluate(&next, &self.spec, testset)?,
            range_w,
            range_dw: outcomes.iter().map(|o| o.payload_range).collect(),
            ber_down: self.cfg.ber(Link::Downlink, round),
            ber_up: outcomes.iter().map(|o| o.ber_up).collect(),
            grad_norm_sq,
        };
        Ok((next, record))
    }

    /// Runs all `K` rounds from the seeded initial model.
    pub fn run(&self, testset: &Dataset) -> Result<ExperimentOutput> {
        if testset.is_empty() {
            return Err(Error::Data("test set is empty".into()));
        }
        let initial = self.initial_params();
        let mut w = initial.clone();
        let mut records = Vec::with_capacity(self.cfg.rounds);
        for m in 0..self.cfg.rounds {
            let (next, record) = self.run_round(&w, m, testset)?;
            log::debug!(
                "round {m}: loss {:.4} acc {:.4} range_w {:.4}",
                record.train_loss,
                record.test_accuracy,
                record.range_w
            );
            records.push(record);
            w = next;
        }
        Ok(ExperimentOutput {
            records,
            initial,
            final_params: w,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub records: Vec<RoundRecord>,
    pub initial: ParamVector,
    pub final_params: ParamVector,
}

impl ExperimentOutput {
    pub fn final_accuracy(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.test_accuracy)
    }
}

/// Configures and runs a full experiment.
pub fn run_experiment(cfg: &FlConfig, spec: &MlpSpec, data: &Dataset, testset: &Dataset) -> Result<ExperimentOutput> {
    Federation::new(cfg.clone(), spec.clone(), data)?.run(testset)
}
