//! Deep ensembles of emulator networks: training, the uniform-mixture
//! posterior predictive, and per-member synthetic log-likelihoods with
//! gradients with respect to the simulator parameters.

use std::io::{BufRead, Write};

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{Covariance, HeadKind, Moments};
use crate::rng::{self, Stream};
use crate::simulators::BoxPrior;
use crate::tensor::{adam_step, log_sum_exp, Activation, AdamConfig, AdamState, Dense, Mlp};

/// Ensemble architecture and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub members: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    /// Epochs for the first fit on the initial dataset.
    pub initial_epochs: usize,
    /// Epochs after each acquisition.
    pub round_epochs: usize,
    /// Minibatch size; 0 means full batch.
    pub batch_size: usize,
    /// Continue from the previous weights instead of re-initializing.
    pub warm_start: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            members: 50,
            hidden: vec![10],
            activation: Activation::Tanh,
            learning_rate: 0.01,
            initial_epochs: 500,
            round_epochs: 100,
            batch_size: 0,
            warm_start: true,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members == 0 {
            return Err(Error::Config("ensemble needs at least one member".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden layers must have positive width".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One simulated pair plus the round that produced it (0 = initial draw).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub round: usize,
    pub theta: Vec<f64>,
    pub x: Vec<f64>,
}

impl Record {
    pub fn is_initial(&self) -> bool {
        self.round == 0
    }
}

/// Ordered training pairs, persisted as JSON lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    records: Vec<Record>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: Vec<Record>) -> Self {
        Self { records }
    }

    pub fn push(&mut self, record: Record) {
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    /// Records acquired up to and including `round`.
    pub fn truncated(&self, round: usize) -> Dataset {
        Dataset {
            records: self.records.iter().filter(|r| r.round <= round).cloned().collect(),
        }
    }

    pub fn validate(&self, prior: &BoxPrior, head: &HeadKind) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if !prior.contains(&r.theta) {
                return Err(Error::Domain(format!("record {i}: theta {:?} outside prior", r.theta)));
            }
            head.check_support(&r.x)?;
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut records = Vec::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(Self { records })
    }
}

/// A network feeding a distribution head. Parameters are mapped from the
/// prior box onto `[-1, 1]` before entering the network.
#[derive(Debug, Clone, PartialEq)]
pub struct EmulatorNet {
    pub mlp: Mlp,
    pub head: HeadKind,
    input_scale: Vec<f64>,
    input_shift: Vec<f64>,
}

impl EmulatorNet {
    pub fn new(mlp: Mlp, head: HeadKind, prior: &BoxPrior) -> Result<Self> {
        if mlp.output_dim() != head.param_count() {
            return Err(Error::dim("network output width", head.param_count(), mlp.output_dim()));
        }
        if mlp.input_dim() != prior.dim() {
            return Err(Error::dim("network input width", prior.dim(), mlp.input_dim()));
        }
        let input_scale: Vec<f64> = prior.widths().iter().map(|w| 2.0 / w).collect();
        let input_shift = prior
            .lower()
            .iter()
            .zip(&input_scale)
            .map(|(l, s)| -l * s - 1.0)
            .collect();
        Ok(Self {
            mlp,
            head,
            input_scale,
            input_shift,
        })
    }

    pub fn theta_dim(&self) -> usize {
        self.input_scale.len()
    }

    fn standardize(&self, thetas: &[Vec<f64>]) -> Result<Array2<f64>> {
        let d = self.theta_dim();
        let mut x = Array2::zeros((thetas.len(), d));
        for (i, theta) in thetas.iter().enumerate() {
            if theta.len() != d {
                return Err(Error::dim("theta", d, theta.len()));
            }
            for j in 0..d {
                x[[i, j]] = theta[j] * self.input_scale[j] + self.input_shift[j];
            }
        }
        Ok(x)
    }

    /// Raw head parameters for each `θ`, one row per input.
    pub fn raw_outputs(&self, thetas: &[Vec<f64>]) -> Result<Array2<f64>> {
        self.mlp.predict(self.standardize(thetas)?.view())
    }

    pub fn forward(&self, thetas: &[Vec<f64>]) -> Result<(Array2<f64>, crate::tensor::Tape)> {
        self.mlp.forward(self.standardize(thetas)?.view())
    }

    /// Pulls adjoints of the raw outputs back to `θ`.
    pub fn theta_gradient(&self, tape: &crate::tensor::Tape, raw_adjoint: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut g = self.mlp.input_gradient(tape, raw_adjoint)?;
        for mut row in g.rows_mut() {
            for (v, s) in row.iter_mut().zip(&self.input_scale) {
                *v *= s;
            }
        }
        Ok(g)
    }

    pub fn log_prob(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        let raw = self.raw_outputs(&[theta.to_vec()])?;
        self.head.log_prob(raw.row(0).as_slice().expect("contiguous"), x)
    }

    /// `log q(x | θ)` and its gradient with respect to `θ`.
    pub fn log_prob_theta_grad(&self, theta: &[f64], x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (raw, tape) = self.forward(&[theta.to_vec()])?;
        let (lp, g_raw) = self.head.log_prob_grad(raw.row(0).as_slice().expect("contiguous"), x)?;
        let adj = Array2::from_shape_vec((1, g_raw.len()), g_raw).expect("shape");
        let g = self.theta_gradient(&tape, adj.view())?;
        Ok((lp, g.into_raw_vec_and_offset().0))
    }

    /// Mean negative log-likelihood over `indices` and its weight gradient.
    pub fn loss_and_grad(&self, data: &Dataset, indices: &[usize]) -> Result<(f64, Vec<f64>)> {
        let records = data.records();
        let thetas: Vec<Vec<f64>> = indices.iter().map(|&i| records[i].theta.clone()).collect();
        let (raw, tape) = self.forward(&thetas)?;
        let n = indices.len() as f64;
        let mut adj = Array2::zeros(raw.dim());
        let mut loss = 0.0;
        for (row, &i) in indices.iter().enumerate() {
            let (lp, g) = self
                .head
                .log_prob_grad(raw.row(row).as_slice().expect("contiguous"), &records[i].x)?;
            loss -= lp / n;
            for (k, gk) in g.into_iter().enumerate() {
                adj[[row, k]] = -gk / n;
            }
        }
        let (grads, _) = self.mlp.backward(&tape, adj.view())?;
        Ok((loss, grads.flatten()))
    }
}

/// Loss trajectory of one member.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberTrace {
    pub epoch_losses: Vec<f64>,
    /// Set when training stopped on a non-finite loss or gradient.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub members: Vec<MemberTrace>,
}

impl TrainReport {
    pub fn final_losses(&self) -> Vec<f64> {
        self.members
            .iter()
            .map(|m| m.epoch_losses.last().copied().unwrap_or(f64::NAN))
            .collect()
    }
}

/// Serialized network weights: layer shapes `[out, in]` and the
/// concatenated row-major weights followed by biases, layer by layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetWeights {
    pub shapes: Vec<[usize; 2]>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub round: usize,
    pub members: Vec<NetWeights>,
}

/// `M` emulator networks sharing one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<EmulatorNet>,
    pub config: EnsembleConfig,
    seed: u64,
}

impl Ensemble {
    /// Initializes every member from its own seed stream.
    pub fn new(config: EnsembleConfig, head: HeadKind, prior: &BoxPrior, seed: u64) -> Result<Self> {
        config.validate()?;
        let members = (0..config.members)
            .map(|m| Self::fresh_member(&config, head, prior, seed, m))
            .collect::<Result<_>>()?;
        Ok(Self { members, config, seed })
    }

    /// Wraps explicit member networks (all must share an architecture).
    pub fn from_members(members: Vec<EmulatorNet>, config: EnsembleConfig, seed: u64) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Config("ensemble needs at least one member".into()))?;
        let sizes = first.mlp.sizes();
        if members.iter().any(|m| m.mlp.sizes() != sizes || m.head != first.head) {
            return Err(Error::Config("ensemble members must share an architecture".into()));
        }
        Ok(Self { members, config, seed })
    }

    fn fresh_member(
        config: &EnsembleConfig,
        head: HeadKind,
        prior: &BoxPrior,
        seed: u64,
        m: usize,
    ) -> Result<EmulatorNet> {
        let mut sizes = vec![prior.dim()];
        sizes.extend(&config.hidden);
        sizes.push(head.param_count());
        let mut rng = rng::stream(seed, Stream::MemberInit, m as u64);
        EmulatorNet::new(Mlp::new(&sizes, config.activation, &mut rng), head, prior)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn head(&self) -> HeadKind {
        self.members[0].head
    }

    pub fn theta_dim(&self) -> usize {
        self.members[0].theta_dim()
    }

    /// Fits every member on `data` for `epochs` epochs with Adam.
    ///
    /// `round` keys the shuffling streams, so members see different orders
    /// and a repeated call with the same arguments is bit-identical. When
    /// `warm_start` is off, members are re-initialized from their seeds.
    pub fn train(&mut self, data: &Dataset, epochs: usize, round: usize, prior: &BoxPrior) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(Error::Config("cannot train on an empty dataset".into()));
        }
        let head = self.head();
        let config = self.config.clone();
        let mut traces = Vec::with_capacity(self.members.len());
        for (m, member) in self.members.iter_mut().enumerate() {
            if !config.warm_start {
                *member = Self::fresh_member(&config, head, prior, self.seed, m)?;
            }
            let stream_index = ((round as u64) << 24) | m as u64;
            let mut shuffle = rng::stream(self.seed, Stream::Shuffle, stream_index);
            traces.push(train_member(member, data, epochs, &config, &mut shuffle));
        }
        if traces.iter().all(|t| t.failure.is_some()) {
            return Err(Error::Numerical(format!(
                "all ensemble members failed: {}",
                traces[0].failure.as_deref().unwrap_or_default()
            )));
        }
        for (m, t) in traces.iter().enumerate() {
            if let Some(f) = &t.failure {
                log::warn!("member {m} stopped early: {f}");
            }
        }
        Ok(TrainReport { members: traces })
    }

    /// Per-member `log q(x | θ)`.
    pub fn member_log_probs(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.members.iter().map(|m| m.log_prob(theta, x)).collect()
    }

    /// Log of the uniform mixture `(1/M) Σ_m q(x | θ; φ_m)`.
    pub fn predictive_logprob(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        let lps = self.member_log_probs(theta, x)?;
        Ok(log_sum_exp(&lps) - (lps.len() as f64).ln())
    }

    /// Predictive log-probabilities for many `(θ, x)` pairs, batched per member.
    pub fn predictive_logprob_batch(&self, thetas: &[Vec<f64>], xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let per_member = self.member_log_probs_batch(thetas, xs)?;
        let m = self.members.len() as f64;
        Ok((0..thetas.len())
            .map(|i| {
                let lps: Vec<f64> = per_member.iter().map(|v| v[i]).collect();
                log_sum_exp(&lps) - m.ln()
            })
            .collect())
    }

    /// `[member][pair]` log-probabilities; `xs` may hold a single shared
    /// observation.
    pub fn member_log_probs_batch(&self, thetas: &[Vec<f64>], xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if xs.len() != thetas.len() && xs.len() != 1 {
            return Err(Error::dim("observations", thetas.len(), xs.len()));
        }
        self.members
            .iter()
            .map(|net| {
                let raw = net.raw_outputs(thetas)?;
                (0..thetas.len())
                    .map(|i| {
                        let x = if xs.len() == 1 { &xs[0] } else { &xs[i] };
                        net.head.log_prob(raw.row(i).as_slice().expect("contiguous"), x)
                    })
                    .collect()
            })
            .collect()
    }

    /// Moments of the uniform mixture at `θ`: the mean of member means and
    /// the total covariance, mean of covariances plus covariance of means.
    /// Categorical heads report indicator (one-hot) moments.
    pub fn predictive_moments(&self, theta: &[f64]) -> Result<Moments> {
        let m = self.members.len() as f64;
        let member: Vec<Moments> = self
            .members
            .iter()
            .map(|net| {
                let raw = net.raw_outputs(&[theta.to_vec()])?;
                net.head.moments(raw.row(0).as_slice().expect("contiguous"))
            })
            .collect::<Result<_>>()?;
        let d = member[0].mean.len();
        let mean: Vec<f64> = (0..d).map(|i| member.iter().map(|mm| mm.mean[i]).sum::<f64>() / m).collect();
        let mut total = Array2::<f64>::zeros((d, d));
        for mm in &member {
            total += &(mm.covariance.to_dense() / m);
            for i in 0..d {
                for j in 0..d {
                    total[[i, j]] += (mm.mean[i] - mean[i]) * (mm.mean[j] - mean[j]) / m;
                }
            }
        }
        Ok(Moments {
            mean,
            covariance: Covariance::Full(total),
        })
    }

    /// Synthetic log-likelihood `log q(x_o | θ; φ_m)` of each member with
    /// its gradient in `θ`.
    pub fn synthetic_loglik_per_member(&self, theta: &[f64], x_o: &[f64]) -> Result<Vec<(f64, Vec<f64>)>> {
        self.members
            .iter()
            .map(|m| m.log_prob_theta_grad(theta, x_o))
            .collect()
    }

    pub fn to_weights(&self, round: usize) -> EnsembleWeights {
        EnsembleWeights {
            round,
            members: self
                .members
                .iter()
                .map(|m| NetWeights {
                    shapes: m.mlp.layers.iter().map(|l| [l.outputs(), l.inputs()]).collect(),
                    values: m.mlp.flatten(),
                })
                .collect(),
        }
    }

    pub fn load_weights(&mut self, weights: &EnsembleWeights) -> Result<()> {
        if weights.members.len() != self.members.len() {
            return Err(Error::dim("ensemble members", self.members.len(), weights.members.len()));
        }
        for (net, w) in self.members.iter_mut().zip(&weights.members) {
            let shapes: Vec<[usize; 2]> = net.mlp.layers.iter().map(|l| [l.outputs(), l.inputs()]).collect();
            if shapes != w.shapes {
                return Err(Error::Archive(format!(
                    "layer shapes {:?} do not match architecture {:?}",
                    w.shapes, shapes
                )));
            }
            net.mlp.set_flat(&w.values)?;
        }
        Ok(())
    }
}

fn train_member(
    net: &mut EmulatorNet,
    data: &Dataset,
    epochs: usize,
    config: &EnsembleConfig,
    shuffle: &mut rand_chacha::ChaCha8Rng,
) -> MemberTrace {
    let adam = AdamConfig::with_learning_rate(config.learning_rate);
    let mut params = net.mlp.flatten();
    let mut state = AdamState::new(params.len());
    let n = data.len();
    let batch = if config.batch_size == 0 { n } else { config.batch_size.min(n) };
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(shuffle);
        let snapshot = params.clone();
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let step = net
                .loss_and_grad(data, chunk)
                .and_then(|(loss, grad)| {
                    if !loss.is_finite() {
                        return Err(Error::NonFinite(format!("loss = {loss}")));
                    }
                    adam_step(&mut params, &grad, &mut state, &adam)?;
                    net.mlp.set_flat(&params)?;
                    Ok(loss)
                });
            match step {
                Ok(loss) => epoch_loss += loss * chunk.len() as f64 / n as f64,
                Err(e) => {
                    net.mlp.set_flat(&snapshot).expect("snapshot has matching length");
                    return MemberTrace {
                        epoch_losses,
                        failure: Some(format!("epoch {epoch}: {e}")),
                    };
                }
            }
        }
        epoch_losses.push(epoch_loss);
    }
    MemberTrace {
        epoch_losses,
        failure: None,
    }
}

/// Builds a member from explicit layers (used to rig emulators in tests
/// and tools).
pub fn emulator_from_layers(
    layers: Vec<Dense>,
    activation: Activation,
    head: HeadKind,
    prior: &BoxPrior,
) -> Result<EmulatorNet> {
    EmulatorNet::new(Mlp::from_layers(layers, activation)?, head, prior)
}
