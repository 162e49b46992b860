//! Losses and the alternating optimization schedule.
//!
//! Step `i` (1-indexed) always minimizes the autoencoder loss over the
//! encoder and decoder. When `i % disc_training_ratio == 0` it then updates
//! the generator against the critic, followed by the encoder against the
//! critic; on every other step it updates the critic instead.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::countmodel::{gaussian_kl_rows, zinb_log_likelihood_rows, CountError, GaussPair};
use crate::model::{BoundModel, ModelConfig, ModelError, Part, ScraeModel};
use crate::ndgrad::{grad, DiffArray, GradError, Matrix, Tape};
use crate::neuralnet::{AdamConfig, AdamState, Checkpoint, GradMap, NetError};
use crate::seeding::{indexed_rng, Stream};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("invalid training data: {0}")]
    Data(String),
    #[error("non-finite loss at step {step}: {report}")]
    Diverged { step: u64, report: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Count(#[from] CountError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// What the encoder sees. The likelihood always targets raw counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderInput {
    /// `log1p` of size-normalized counts over the selected genes.
    Log1pNormalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Weight of the library-size KL term.
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    /// Gradient-penalty weight.
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_ratio")]
    pub disc_training_ratio: u64,
    #[serde(default = "d_lr_ae")]
    pub lr_ae: f64,
    #[serde(default = "d_lr_adv")]
    pub lr_critic: f64,
    #[serde(default = "d_lr_adv")]
    pub lr_gen: f64,
    #[serde(default = "d_lr_adv")]
    pub lr_enc: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_steps")]
    pub steps: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_model")]
    pub model: ModelConfig,
    /// Emit a loss report every this many steps (and on the last step).
    #[serde(default = "d_report")]
    pub report_every: u64,
    /// Checkpoint cadence in steps; 0 disables periodic checkpoints.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "d_input")]
    pub encoder_input: EncoderInput,
}

fn d_lambda() -> f64 {
    1.0
}
fn d_beta() -> f64 {
    10.0
}
fn d_ratio() -> u64 {
    5
}
fn d_lr_ae() -> f64 {
    1e-3
}
fn d_lr_adv() -> f64 {
    1e-4
}
fn d_batch() -> usize {
    128
}
fn d_steps() -> u64 {
    10_000
}
fn d_model() -> ModelConfig {
    ModelConfig::new(10)
}
fn d_report() -> u64 {
    10
}
fn d_input() -> EncoderInput {
    EncoderInput::Log1pNormalized
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a finite value >= 0");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be a finite value >= 0");
        }
        if self.disc_training_ratio < 1 {
            return bad("disc_training_ratio must be >= 1");
        }
        for (name, lr) in [
            ("lr_ae", self.lr_ae),
            ("lr_critic", self.lr_critic),
            ("lr_gen", self.lr_gen),
            ("lr_enc", self.lr_enc),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.report_every == 0 {
            return bad("report_every must be >= 1");
        }
        self.model.validate()?;
        Ok(())
    }

    /// Whether step `i` (1-indexed) is a generator/encoder step.
    pub fn is_adversarial_step(&self, i: u64) -> bool {
        i.is_multiple_of(self.disc_training_ratio)
    }
}

/// Losses recorded at one step; adversarial entries are present only on the
/// steps that evaluate them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_ae: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_critic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_gen: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_enc: Option<f64>,
    /// `β · mean_i (‖∇C(z_avg_i)‖ − 1)²`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub penalty: Option<f64>,
    /// `mean C(z) − mean C(ẑ)`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wasserstein: Option<f64>,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        std::iter::once(self.l_ae)
            .chain(self.l_critic)
            .chain(self.l_gen)
            .chain(self.l_enc)
            .chain(self.penalty)
            .chain(self.wasserstein)
            .all(f64::is_finite)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

/// Encoder input rows and their raw counts over the same genes.
#[derive(Debug, Clone)]
pub struct Batch {
    pub input: Matrix,
    pub counts: Matrix,
}

impl Batch {
    pub fn new(input: Matrix, counts: Matrix) -> Result<Self, TrainError> {
        if input.shape() != counts.shape() {
            return Err(TrainError::Data(format!(
                "input {:?} and counts {:?} differ in shape",
                input.shape(),
                counts.shape()
            )));
        }
        if input.rows() == 0 {
            return Err(TrainError::Data("no cells".into()));
        }
        Ok(Self { input, counts })
    }

    pub fn rows(&self) -> usize {
        self.input.rows()
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            input: self.input.select_rows(idx),
            counts: self.counts.select_rows(idx),
        }
    }
}

/// `mean_c(−log p_ZINB(x_c) + λ KL_c)`.
pub fn loss_ae(bound: &BoundModel, batch: &Batch, rng: &mut impl Rng, lambda: f64) -> Result<DiffArray, TrainError> {
    let enc = bound.encode(&DiffArray::constant(batch.input.clone()))?;
    let s = bound.sample_s(&enc, rng, true)?;
    let params = bound.decode(&enc.z, &s)?;
    let nll = zinb_log_likelihood_rows(&batch.counts, &params)?.neg()?;
    let lib = bound.library();
    let kl = gaussian_kl_rows(&GaussPair::new(enc.mu_s, enc.log_sigma_s, lib.mu_g, lib.sigma_g)?)?;
    Ok(nll.add(&kl.mul_scalar(lambda)?)?.mean()?)
}

/// `α z + (1 − α) ẑ` with one `α` per row.
pub fn interpolate_with(z: &Matrix, z_hat: &Matrix, mix: &[f64]) -> Result<Matrix, TrainError> {
    if z.shape() != z_hat.shape() || mix.len() != z.rows() {
        return Err(GradError::ShapeMismatch {
            op: "interpolate",
            lhs: z.shape(),
            rhs: z_hat.shape(),
        }
        .into());
    }
    Ok(Matrix::from_fn(z.shape(), |r, c| {
        mix[r] * z.get(r, c) + (1.0 - mix[r]) * z_hat.get(r, c)
    }))
}

/// Interpolates with `α ~ U[0, 1]` per row.
pub fn interpolate(z: &Matrix, z_hat: &Matrix, rng: &mut impl Rng) -> Result<Matrix, TrainError> {
    let mix: Vec<f64> = (0..z.rows()).map(|_| rng.random::<f64>()).collect();
    interpolate_with(z, z_hat, &mix)
}

#[derive(Clone, Debug)]
pub struct CriticLoss {
    pub loss: DiffArray,
    pub penalty: f64,
    pub wasserstein: f64,
}

/// `mean C(ẑ) − mean C(z) + β mean_i (‖∇_{z_avg} C(z_avg_i)‖ − 1)²`.
///
/// `z` and `ẑ` enter as constants; `z_avg` becomes a leaf on `tape` so that
/// the penalty can be differentiated through the input gradient.
pub fn loss_critic(
    tape: &Tape,
    bound: &BoundModel,
    z: &Matrix,
    z_hat: &Matrix,
    rng: &mut impl Rng,
    beta: f64,
) -> Result<CriticLoss, TrainError> {
    let z_avg = tape.var(&interpolate(z, z_hat, rng)?);
    let real = bound.critic_score(&DiffArray::constant(z.clone()))?.mean()?;
    let fake = bound.critic_score(&DiffArray::constant(z_hat.clone()))?.mean()?;
    let at_avg = bound.critic_score(&z_avg)?.sum()?;
    let input_grad = grad(&at_avg, &[&z_avg], true)?.remove(0);
    let penalty = input_grad.row_norm()?.add_scalar(-1.0)?.square()?.mean()?.mul_scalar(beta)?;
    let loss = fake.sub(&real)?.add(&penalty)?;
    Ok(CriticLoss {
        wasserstein: real.item() - fake.item(),
        penalty: penalty.item(),
        loss,
    })
}

/// `−mean C(ẑ)`.
pub fn loss_gen(bound: &BoundModel, z_hat: &DiffArray) -> Result<DiffArray, TrainError> {
    Ok(bound.critic_score(z_hat)?.mean()?.neg()?)
}

/// `mean C(z)`.
pub fn loss_enc(bound: &BoundModel, z: &DiffArray) -> Result<DiffArray, TrainError> {
    Ok(bound.critic_score(z)?.mean()?)
}

/// Autoencoder loss and its gradients over encoder and decoder.
pub fn ae_objective(model: &ScraeModel, batch: &Batch, rng: &mut impl Rng, lambda: f64) -> Result<(f64, GradMap), TrainError> {
    let tape = Tape::new();
    let bound = model.bind(&tape, &[Part::Encoder, Part::Decoder]);
    let loss = loss_ae(&bound, batch, rng, lambda)?;
    Ok((loss.item(), bound.gradients(&loss.backward()?)))
}

/// Critic loss (with penalty) and its gradients over the critic.
pub fn critic_objective(
    model: &ScraeModel,
    z: &Matrix,
    z_hat: &Matrix,
    rng: &mut impl Rng,
    beta: f64,
) -> Result<(CriticLoss, GradMap), TrainError> {
    let tape = Tape::new();
    let bound = model.bind(&tape, &[Part::Critic]);
    let out = loss_critic(&tape, &bound, z, z_hat, rng, beta)?;
    let grads = bound.gradients(&out.loss.backward()?);
    Ok((out, grads))
}

/// Generator loss on prior samples from `noise`, with gradients over the
/// generator (empty for the identity prior).
pub fn gen_objective(model: &ScraeModel, noise: &Matrix) -> Result<(f64, GradMap), TrainError> {
    let tape = Tape::new();
    let bound = model.bind(&tape, &[Part::Generator]);
    let z_hat = bound.generate(&DiffArray::constant(noise.clone()))?;
    let loss = loss_gen(&bound, &z_hat)?;
    Ok((loss.item(), bound.gradients(&loss.backward()?)))
}

/// Encoder adversarial loss with gradients over the encoder.
pub fn enc_objective(model: &ScraeModel, input: &Matrix) -> Result<(f64, GradMap), TrainError> {
    let tape = Tape::new();
    let bound = model.bind(&tape, &[Part::Encoder]);
    let z = bound.encode(&DiffArray::constant(input.clone()))?.z;
    let loss = loss_enc(&bound, &z)?;
    Ok((loss.item(), bound.gradients(&loss.backward()?)))
}

fn is_numeric_breakdown(e: &TrainError) -> bool {
    let grad = |g: &GradError| matches!(g, GradError::NegativeInput { .. });
    let count = |c: &CountError| match c {
        CountError::NonPositiveMean(_) | CountError::NonPositiveDispersion(_) | CountError::NonPositiveSigma(_) => true,
        CountError::Grad(g) => grad(g),
        _ => false,
    };
    match e {
        TrainError::Grad(g) | TrainError::Model(ModelError::Grad(g)) => grad(g),
        TrainError::Count(c) | TrainError::Model(ModelError::Count(c)) => count(c),
        _ => false,
    }
}

/// The update a step performs, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Ae,
    Gen,
    Enc,
    Critic,
}

pub struct Trainer {
    pub model: ScraeModel,
    pub config: RunConfig,
    opt_ae: AdamState,
    opt_critic: AdamState,
    opt_gen: AdamState,
    opt_enc: AdamState,
    step: u64,
}

const OPTIMIZERS: [&str; 4] = ["ae", "critic", "gen", "enc"];

impl Trainer {
    pub fn new(model: ScraeModel, config: RunConfig) -> Result<Self, TrainError> {
        config.validate()?;
        if model.config != config.model {
            return Err(TrainError::Config("model does not match the run configuration".into()));
        }
        Ok(Self {
            opt_ae: AdamState::new(AdamConfig::new(config.lr_ae, 0.9, 0.999)),
            opt_critic: AdamState::new(AdamConfig::new(config.lr_critic, 0.0, 0.9)),
            opt_gen: AdamState::new(AdamConfig::new(config.lr_gen, 0.0, 0.9)),
            opt_enc: AdamState::new(AdamConfig::new(config.lr_enc, 0.0, 0.9)),
            model,
            config,
            step: 0,
        })
    }

    /// Steps completed so far.
    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, data: &Batch) -> Result<LossReport, TrainError> {
        self.step_with_observer(data, |_, _| {})
    }

    /// Runs one step, calling `observe` after each parameter update.
    pub fn step_with_observer(
        &mut self,
        data: &Batch,
        mut observe: impl FnMut(Phase, &ScraeModel),
    ) -> Result<LossReport, TrainError> {
        if data.input.cols() != self.model.genes() {
            return Err(TrainError::Data(format!(
                "data has {} genes, model has {}",
                data.input.cols(),
                self.model.genes()
            )));
        }
        let i = self.step + 1;
        let cfg = &self.config;
        let mut rng = indexed_rng(cfg.seed, Stream::Training, i);
        let n = data.rows();
        let mut idx = index::sample(&mut rng, n, cfg.batch_size.min(n)).into_vec();
        idx.sort_unstable();
        let batch = data.select(&idx);

        let mut report = LossReport {
            step: i,
            l_ae: f64::NAN,
            l_critic: None,
            l_gen: None,
            l_enc: None,
            penalty: None,
            wasserstein: None,
        };
        let diverged = |report: &LossReport| TrainError::Diverged {
            step: i,
            report: report.to_json_line(),
        };
        // Domain errors inside a loss mean the parameters have blown up.
        let breakdown = |e: TrainError, report: &LossReport| if is_numeric_breakdown(&e) { diverged(report) } else { e };

        let (l_ae, g) = ae_objective(&self.model, &batch, &mut rng, cfg.lambda).map_err(|e| breakdown(e, &report))?;
        report.l_ae = l_ae;
        if !l_ae.is_finite() {
            return Err(diverged(&report));
        }
        self.opt_ae.step(&mut self.model.view(&[Part::Encoder, Part::Decoder]), &g)?;
        observe(Phase::Ae, &self.model);

        if cfg.is_adversarial_step(i) {
            let noise = Matrix::from_fn([batch.rows(), cfg.model.n_z], |_, _| rng.sample(StandardNormal));
            let (l_gen, g) = gen_objective(&self.model, &noise).map_err(|e| breakdown(e, &report))?;
            report.l_gen = Some(l_gen);
            if !l_gen.is_finite() {
                return Err(diverged(&report));
            }
            if self.model.generator.is_some() {
                self.opt_gen.step(&mut self.model.view(&[Part::Generator]), &g)?;
            }
            observe(Phase::Gen, &self.model);

            let (l_enc, g) = enc_objective(&self.model, &batch.input).map_err(|e| breakdown(e, &report))?;
            report.l_enc = Some(l_enc);
            if !l_enc.is_finite() {
                return Err(diverged(&report));
            }
            self.opt_enc.step(&mut self.model.view(&[Part::Encoder]), &g)?;
            observe(Phase::Enc, &self.model);
        } else {
            let frozen = self.model.frozen();
            let z = frozen.encode(&DiffArray::constant(batch.input.clone()))?.z.value().clone();
            let z_hat = frozen.sample_prior(batch.rows(), &mut rng)?.value().clone();
            let (out, g) = critic_objective(&self.model, &z, &z_hat, &mut rng, cfg.beta).map_err(|e| breakdown(e, &report))?;
            report.l_critic = Some(out.loss.item());
            report.penalty = Some(out.penalty);
            report.wasserstein = Some(out.wasserstein);
            if !report.all_finite() {
                return Err(diverged(&report));
            }
            self.opt_critic.step(&mut self.model.view(&[Part::Critic]), &g)?;
            observe(Phase::Critic, &self.model);
        }
        self.step = i;
        Ok(report)
    }

    /// Runs until `config.steps`, passing every `report_every`-th report
    /// (and the last) to `sink`.
    pub fn train(&mut self, data: &Batch, mut sink: impl FnMut(&Trainer, &LossReport)) -> Result<(), TrainError> {
        while self.step < self.config.steps {
            let report = self.step(data)?;
            if report.step % self.config.report_every == 0 || report.step == self.config.steps {
                sink(self, &report);
            }
        }
        Ok(())
    }

    fn optimizers(&self) -> [&AdamState; 4] {
        [&self.opt_ae, &self.opt_critic, &self.opt_gen, &self.opt_enc]
    }

    /// Model, optimizer moments, step count and run configuration.
    pub fn checkpoint(&self) -> Result<Checkpoint, TrainError> {
        let steps: Vec<u64> = self.optimizers().iter().map(|o| o.steps()).collect();
        let mut ck = self.model.to_checkpoint(serde_json::json!({
            "step": self.step,
            "run": self.config,
            "optimizer_steps": steps,
        }));
        let shapes = self.model.parameter_shapes();
        for (name, opt) in OPTIMIZERS.iter().zip(self.optimizers()) {
            for (k, m) in opt.export(&shapes)? {
                ck.insert(format!("opt.{name}.{k}"), m);
            }
        }
        Ok(ck)
    }

    /// Continues a run from [`checkpoint`](Self::checkpoint). Later steps
    /// are identical to those of an uninterrupted run.
    pub fn resume(ck: &Checkpoint) -> Result<Self, TrainError> {
        let missing = |what: &str| TrainError::Net(NetError::Checkpoint(format!("header lacks {what}")));
        let config: RunConfig = serde_json::from_value(ck.header.get("run").cloned().ok_or_else(|| missing("run"))?)?;
        let step = ck.header.get("step").and_then(|s| s.as_u64()).ok_or_else(|| missing("step"))?;
        let opt_steps: Vec<u64> = serde_json::from_value(
            ck.header
                .get("optimizer_steps")
                .cloned()
                .ok_or_else(|| missing("optimizer_steps"))?,
        )?;
        if opt_steps.len() != OPTIMIZERS.len() {
            return Err(missing("four optimizer step counts"));
        }
        let model = ScraeModel::from_checkpoint(ck)?;
        let mut t = Trainer::new(model, config)?;
        let configs: Vec<AdamConfig> = t.optimizers().iter().map(|o| o.config).collect();
        let mut restored = Vec::new();
        for ((name, cfg), n) in OPTIMIZERS.iter().zip(configs).zip(opt_steps) {
            restored.push(AdamState::restore(cfg, n, &ck.with_prefix(&format!("opt.{name}.")))?);
        }
        let mut it = restored.into_iter();
        t.opt_ae = it.next().expect("four");
        t.opt_critic = it.next().expect("four");
        t.opt_gen = it.next().expect("four");
        t.opt_enc = it.next().expect("four");
        t.step = step;
        Ok(t)
    }
}
