//! The four networks of the model and their forward paths.
//!
//! * encoder `E_φ`: expression → `n_z` latent columns plus two library-size
//!   columns (`μ_s`, `log σ_s`)
//! * decoder `D_θ`: trunk `h_θ`, mean head `W_μ`, logit head `W_l`, and a
//!   per-gene dispersion vector `v` with `α = exp(−v)`
//! * generator `G_ψ`: standard normal noise → prior latent samples
//! * critic `C_κ`: latent → unconstrained score
//!
//! Parameters are named `encoder.*`, `decoder.trunk.*`, `decoder.mean.*`,
//! `decoder.logit.*`, `decoder.dispersion`, `generator.*` and `critic.*`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::countmodel::{CountError, ZinbParams};
use crate::ndgrad::{DiffArray, GradError, Gradients, Matrix, Tape};
use crate::neuralnet::{
    Activation, BoundLayer, BoundMlp, Checkpoint, DenseLayer, GradMap, Mlp, NetError, Parameters,
};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("input has {got} columns, model expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("latent has {got} columns, model expects {expected}")]
    LatentWidth { expected: usize, got: usize },
    #[error("prior sample count must be at least 1")]
    EmptySample,
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Count(#[from] CountError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How prior latents are produced from noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// A trained generator network.
    Learned,
    /// `ẑ = n`: a fixed standard normal prior, with nothing to train.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_z: usize,
    #[serde(default = "default_encoder_hidden")]
    pub encoder_hidden: Vec<usize>,
    #[serde(default = "default_decoder_hidden")]
    pub decoder_hidden: Vec<usize>,
    #[serde(default = "default_prior_hidden")]
    pub generator_hidden: Vec<usize>,
    #[serde(default = "default_prior_hidden")]
    pub critic_hidden: Vec<usize>,
    #[serde(default = "default_prior")]
    pub prior: PriorKind,
}

fn default_encoder_hidden() -> Vec<usize> {
    vec![256, 128]
}

fn default_decoder_hidden() -> Vec<usize> {
    vec![128, 256]
}

fn default_prior_hidden() -> Vec<usize> {
    vec![128, 128]
}

fn default_prior() -> PriorKind {
    PriorKind::Learned
}

impl ModelConfig {
    pub fn new(n_z: usize) -> Self {
        Self {
            n_z,
            encoder_hidden: default_encoder_hidden(),
            decoder_hidden: default_decoder_hidden(),
            generator_hidden: default_prior_hidden(),
            critic_hidden: default_prior_hidden(),
            prior: default_prior(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_z == 0 {
            return Err(ModelError::Config("n_z must be at least 1".into()));
        }
        if self.decoder_hidden.is_empty() {
            return Err(ModelError::Config("decoder needs at least one hidden layer".into()));
        }
        let all = [&self.encoder_hidden, &self.decoder_hidden, &self.generator_hidden, &self.critic_hidden];
        if all.iter().any(|h| h.contains(&0)) {
            return Err(ModelError::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Dataset-level Gaussian over log library sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LibraryPrior {
    pub mu_g: f64,
    pub sigma_g: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Part {
    Encoder,
    Decoder,
    Generator,
    Critic,
}

impl Part {
    pub const ALL: [Part; 4] = [Part::Encoder, Part::Decoder, Part::Generator, Part::Critic];

    fn of(name: &str) -> Option<Part> {
        let head = name.split('.').next()?;
        match head {
            "encoder" => Some(Part::Encoder),
            "decoder" => Some(Part::Decoder),
            "generator" => Some(Part::Generator),
            "critic" => Some(Part::Critic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScraeModel {
    pub config: ModelConfig,
    pub library: LibraryPrior,
    pub encoder: Mlp,
    pub trunk: Mlp,
    pub mean_head: DenseLayer,
    pub logit_head: DenseLayer,
    /// `v`, `1 × genes`; `α⁻¹ = exp(v)`.
    pub dispersion: Matrix,
    pub generator: Option<Mlp>,
    pub critic: Mlp,
}

fn chain(first: usize, hidden: &[usize], last: usize) -> Vec<usize> {
    let mut dims = vec![first];
    dims.extend_from_slice(hidden);
    dims.push(last);
    dims
}

impl ScraeModel {
    /// Fresh parameters. The encoder's library-size outputs start at the
    /// dataset prior (`μ_s = μ_G`, `σ_s = σ_G` before the weights act).
    pub fn init(genes: usize, config: &ModelConfig, library: LibraryPrior, rng: &mut impl Rng) -> Result<Self, ModelError> {
        config.validate()?;
        if genes == 0 {
            return Err(ModelError::Config("model needs at least one gene".into()));
        }
        if !(library.sigma_g > 0.0 && library.mu_g.is_finite()) {
            return Err(ModelError::Config(format!("invalid library prior {library:?}")));
        }
        let n_z = config.n_z;
        let enc_dims = chain(genes, &config.encoder_hidden, n_z + 2);
        let mut encoder = Mlp::init(&enc_dims, &Mlp::hidden_plan(enc_dims.len() - 1, Activation::Linear), rng)?;
        let last = format!("{}.bias", enc_dims.len() - 2);
        let mut bias = vec![0.0; n_z + 2];
        bias[n_z] = library.mu_g;
        bias[n_z + 1] = library.sigma_g.ln();
        encoder.set_parameter(&last, Matrix::row(bias))?;

        let mut trunk_dims = vec![n_z];
        trunk_dims.extend_from_slice(&config.decoder_hidden);
        let trunk = Mlp::init(&trunk_dims, &vec![Activation::LeakyRelu; trunk_dims.len() - 1], rng)?;
        let width = *trunk_dims.last().expect("non-empty");
        let mean_head = DenseLayer::init(width, genes, Activation::Linear, rng);
        let logit_head = DenseLayer::init(width, genes, Activation::Linear, rng);

        let generator = match config.prior {
            PriorKind::Learned => {
                let dims = chain(n_z, &config.generator_hidden, n_z);
                Some(Mlp::init(&dims, &Mlp::hidden_plan(dims.len() - 1, Activation::Linear), rng)?)
            }
            PriorKind::Identity => None,
        };
        let critic_dims = chain(n_z, &config.critic_hidden, 1);
        let critic = Mlp::init(&critic_dims, &Mlp::hidden_plan(critic_dims.len() - 1, Activation::Linear), rng)?;
        Ok(Self {
            config: config.clone(),
            library,
            encoder,
            trunk,
            mean_head,
            logit_head,
            dispersion: Matrix::zeros([1, genes]),
            generator,
            critic,
        })
    }

    pub fn genes(&self) -> usize {
        self.dispersion.cols()
    }

    pub fn n_z(&self) -> usize {
        self.config.n_z
    }

    /// Binds `parts` to `tape` as differentiable leaves; every other
    /// parameter is a constant.
    pub fn bind(&self, tape: &Tape, parts: &[Part]) -> BoundModel {
        let on = |p: Part| parts.contains(&p);
        let mlp = |m: &Mlp, p: Part| if on(p) { m.bind(tape) } else { m.bind_constant() };
        let layer = |l: &DenseLayer| {
            if on(Part::Decoder) {
                BoundLayer::on_tape(l, tape)
            } else {
                BoundLayer::constant(l)
            }
        };
        BoundModel {
            n_z: self.config.n_z,
            genes: self.genes(),
            encoder: mlp(&self.encoder, Part::Encoder),
            trunk: mlp(&self.trunk, Part::Decoder),
            mean_head: layer(&self.mean_head),
            logit_head: layer(&self.logit_head),
            dispersion: if on(Part::Decoder) {
                tape.var(&self.dispersion)
            } else {
                DiffArray::constant(self.dispersion.clone())
            },
            generator: self.generator.as_ref().map(|g| mlp(g, Part::Generator)),
            critic: mlp(&self.critic, Part::Critic),
            parts: parts.to_vec(),
            library: self.library,
        }
    }

    /// Every parameter held as a constant.
    pub fn frozen(&self) -> BoundModel {
        self.bind(&Tape::new(), &[])
    }

    /// Deterministic latent codes for preprocessed input rows.
    pub fn embed(&self, x_input: &Matrix) -> Result<Matrix, ModelError> {
        let enc = self.frozen().encode(&DiffArray::constant(x_input.clone()))?;
        Ok(enc.z.value().clone())
    }

    /// Parameters restricted to `parts`, for one optimizer.
    pub fn view(&mut self, parts: &[Part]) -> PartView<'_> {
        PartView {
            model: self,
            parts: parts.to_vec(),
        }
    }

    pub fn parameter_shapes(&self) -> std::collections::BTreeMap<String, [usize; 2]> {
        self.parameters().into_iter().map(|(k, v)| (k, v.shape())).collect()
    }

    fn header(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "model",
            "genes": self.genes(),
            "config": self.config,
            "library": self.library,
        })
    }

    /// Parameters as checkpoint tensors under `prefix`.
    pub fn to_checkpoint(&self, header_extra: serde_json::Value) -> Checkpoint {
        let mut header = self.header();
        if let (Some(h), serde_json::Value::Object(extra)) = (header.as_object_mut(), header_extra) {
            h.extend(extra);
        }
        let mut ck = Checkpoint::new(header);
        for (name, m) in self.parameters() {
            ck.insert(format!("model.{name}"), m);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let bad = |what: &str| ModelError::Net(NetError::Checkpoint(format!("header lacks {what}")));
        let genes = ck.header.get("genes").and_then(|g| g.as_u64()).ok_or_else(|| bad("genes"))? as usize;
        let config: ModelConfig = serde_json::from_value(ck.header.get("config").cloned().ok_or_else(|| bad("config"))?)?;
        let library: LibraryPrior =
            serde_json::from_value(ck.header.get("library").cloned().ok_or_else(|| bad("library"))?)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::init(genes, &config, library, &mut rng)?;
        let stored = ck.with_prefix("model.");
        let expected = model.parameter_shapes();
        if stored.len() != expected.len() {
            return Err(NetError::Checkpoint(format!(
                "expected {} model tensors, found {}",
                expected.len(),
                stored.len()
            ))
            .into());
        }
        for (name, m) in stored {
            model.set_parameter(&name, m)?;
        }
        Ok(model)
    }

    /// Writes the checkpoint and a JSON sidecar next to it.
    pub fn save(&self, path: &Path, gene_names: &[String]) -> Result<(), ModelError> {
        if gene_names.len() != self.genes() {
            return Err(ModelError::Config(format!(
                "{} gene names for a {}-gene model",
                gene_names.len(),
                self.genes()
            )));
        }
        self.to_checkpoint(serde_json::json!({})).save(path)?;
        let sidecar = Sidecar {
            genes: gene_names.to_vec(),
            mu_g: self.library.mu_g,
            sigma_g: self.library.sigma_g,
            n_z: self.n_z(),
        };
        crate::io::write_atomic(&sidecar_path(path), serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
        Ok(())
    }

    /// Reads a model saved by [`save`](Self::save), with its gene names.
    pub fn load(path: &Path) -> Result<(Self, Sidecar), ModelError> {
        let model = Self::from_checkpoint(&Checkpoint::load(path)?)?;
        let sidecar: Sidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
        if sidecar.genes.len() != model.genes() {
            return Err(ModelError::Config("sidecar gene list does not match checkpoint".into()));
        }
        Ok((model, sidecar))
    }
}

/// Selected genes and library statistics stored beside a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub genes: Vec<String>,
    pub mu_g: f64,
    pub sigma_g: f64,
    pub n_z: usize,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".json");
    checkpoint.with_file_name(name)
}

fn layer_params(prefix: &str, layer: &DenseLayer, out: &mut Vec<(String, Matrix)>) {
    out.push((format!("{prefix}weight"), layer.weight.clone()));
    out.push((format!("{prefix}bias"), layer.bias.clone()));
}

impl Parameters for ScraeModel {
    fn parameters(&self) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        let mlp = |prefix: &str, m: &Mlp, out: &mut Vec<(String, Matrix)>| {
            out.extend(m.parameters().into_iter().map(|(k, v)| (format!("{prefix}{k}"), v)));
        };
        mlp("encoder.", &self.encoder, &mut out);
        mlp("decoder.trunk.", &self.trunk, &mut out);
        layer_params("decoder.mean.", &self.mean_head, &mut out);
        layer_params("decoder.logit.", &self.logit_head, &mut out);
        out.push(("decoder.dispersion".to_string(), self.dispersion.clone()));
        if let Some(g) = &self.generator {
            mlp("generator.", g, &mut out);
        }
        mlp("critic.", &self.critic, &mut out);
        out
    }

    fn set_parameter(&mut self, name: &str, value: Matrix) -> Result<(), NetError> {
        let unknown = || NetError::UnknownParameter(name.to_string());
        if let Some(rest) = name.strip_prefix("encoder.") {
            self.encoder.set_parameter(rest, value)
        } else if let Some(rest) = name.strip_prefix("decoder.trunk.") {
            self.trunk.set_parameter(rest, value)
        } else if let Some(rest) = name.strip_prefix("decoder.mean.") {
            self.mean_head.set(rest, name, value)
        } else if let Some(rest) = name.strip_prefix("decoder.logit.") {
            self.logit_head.set(rest, name, value)
        } else if name == "decoder.dispersion" {
            if value.shape() != self.dispersion.shape() {
                return Err(NetError::ParamShape {
                    name: name.to_string(),
                    expected: self.dispersion.shape(),
                    got: value.shape(),
                });
            }
            self.dispersion = value;
            Ok(())
        } else if let Some(rest) = name.strip_prefix("generator.") {
            self.generator.as_mut().ok_or_else(unknown)?.set_parameter(rest, value)
        } else if let Some(rest) = name.strip_prefix("critic.") {
            self.critic.set_parameter(rest, value)
        } else {
            Err(unknown())
        }
    }
}

/// A subset of the model's parameters, as seen by one optimizer.
pub struct PartView<'a> {
    model: &'a mut ScraeModel,
    parts: Vec<Part>,
}

impl Parameters for PartView<'_> {
    fn parameters(&self) -> Vec<(String, Matrix)> {
        self.model
            .parameters()
            .into_iter()
            .filter(|(k, _)| Part::of(k).is_some_and(|p| self.parts.contains(&p)))
            .collect()
    }

    fn set_parameter(&mut self, name: &str, value: Matrix) -> Result<(), NetError> {
        match Part::of(name) {
            Some(p) if self.parts.contains(&p) => self.model.set_parameter(name, value),
            _ => Err(NetError::UnknownParameter(name.to_string())),
        }
    }
}

/// Encoder outputs for a batch.
#[derive(Clone, Debug)]
pub struct EncodeOut {
    /// `cells × n_z`
    pub z: DiffArray,
    /// `cells × 1`
    pub mu_s: DiffArray,
    /// `cells × 1`
    pub log_sigma_s: DiffArray,
}

/// A model whose parameters are bound to a tape (or held constant).
#[derive(Clone)]
pub struct BoundModel {
    n_z: usize,
    genes: usize,
    encoder: BoundMlp,
    trunk: BoundMlp,
    mean_head: BoundLayer,
    logit_head: BoundLayer,
    dispersion: DiffArray,
    generator: Option<BoundMlp>,
    critic: BoundMlp,
    parts: Vec<Part>,
    library: LibraryPrior,
}

impl BoundModel {
    pub fn library(&self) -> LibraryPrior {
        self.library
    }

    pub fn encode(&self, x_input: &DiffArray) -> Result<EncodeOut, ModelError> {
        let got = x_input.shape()[1];
        if got != self.genes {
            return Err(ModelError::InputWidth {
                expected: self.genes,
                got,
            });
        }
        let h = self.encoder.forward(x_input)?;
        let n_z = self.n_z;
        Ok(EncodeOut {
            z: h.slice_cols(0, n_z)?,
            mu_s: h.slice_cols(n_z, n_z + 1)?,
            log_sigma_s: h.slice_cols(n_z + 1, n_z + 2)?,
        })
    }

    /// `log μ = s + log softmax(W_μ h)`, `log θ = v`, `l = W_l h`.
    pub fn decode(&self, z: &DiffArray, s: &DiffArray) -> Result<ZinbParams, ModelError> {
        self.check_latent(z)?;
        if s.shape() != [z.shape()[0], 1] {
            return Err(ModelError::Grad(GradError::ShapeMismatch {
                op: "decode",
                lhs: z.shape(),
                rhs: s.shape(),
            }));
        }
        let h = self.trunk.forward(z)?;
        let log_mu = self.mean_head.forward(&h)?.log_softmax()?.add(s)?;
        let logit = self.logit_head.forward(&h)?;
        Ok(ZinbParams::from_log_parts(log_mu, self.dispersion.clone(), logit)?)
    }

    /// `s = μ_s + σ_s ε` in training mode, `s = μ_s` otherwise.
    pub fn sample_s(&self, enc: &EncodeOut, rng: &mut impl Rng, train_mode: bool) -> Result<DiffArray, ModelError> {
        if !train_mode {
            return Ok(enc.mu_s.clone());
        }
        let eps = Matrix::from_fn(enc.mu_s.shape(), |_, _| rng.sample(StandardNormal));
        Ok(enc.mu_s.add(&enc.log_sigma_s.exp()?.mul(&DiffArray::constant(eps))?)?)
    }

    /// Maps noise rows through the generator (or passes them through for
    /// the identity prior).
    pub fn generate(&self, noise: &DiffArray) -> Result<DiffArray, ModelError> {
        self.check_latent(noise)?;
        Ok(match &self.generator {
            Some(g) => g.forward(noise)?,
            None => noise.clone(),
        })
    }

    /// `count` prior latents `ẑ = G_ψ(n)`, `n ~ N(0, I)`.
    pub fn sample_prior(&self, count: usize, rng: &mut impl Rng) -> Result<DiffArray, ModelError> {
        if count == 0 {
            return Err(ModelError::EmptySample);
        }
        let noise = Matrix::from_fn([count, self.n_z], |_, _| rng.sample(StandardNormal));
        self.generate(&DiffArray::constant(noise))
    }

    /// One unconstrained score per row, `n × 1`.
    pub fn critic_score(&self, z: &DiffArray) -> Result<DiffArray, ModelError> {
        self.check_latent(z)?;
        Ok(self.critic.forward(z)?)
    }

    fn check_latent(&self, z: &DiffArray) -> Result<(), ModelError> {
        let got = z.shape()[1];
        if got != self.n_z {
            return Err(ModelError::LatentWidth {
                expected: self.n_z,
                got,
            });
        }
        Ok(())
    }

    pub fn has_generator(&self) -> bool {
        self.generator.is_some()
    }

    /// Gradients of every bound part, keyed by model parameter name.
    pub fn gradients(&self, grads: &Gradients) -> GradMap {
        let mut out = GradMap::new();
        for part in &self.parts {
            match part {
                Part::Encoder => self.encoder.collect_grads(grads, "encoder.", &mut out),
                Part::Decoder => {
                    self.trunk.collect_grads(grads, "decoder.trunk.", &mut out);
                    for (prefix, l) in [("decoder.mean.", &self.mean_head), ("decoder.logit.", &self.logit_head)] {
                        out.insert(format!("{prefix}weight"), grads.get(&l.weight));
                        out.insert(format!("{prefix}bias"), grads.get(&l.bias));
                    }
                    out.insert("decoder.dispersion".to_string(), grads.get(&self.dispersion));
                }
                Part::Generator => {
                    if let Some(g) = &self.generator {
                        g.collect_grads(grads, "generator.", &mut out);
                    }
                }
                Part::Critic => self.critic.collect_grads(grads, "critic.", &mut out),
            }
        }
        out
    }
}
