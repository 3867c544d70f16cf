//! Versioned checkpoint documents.
//!
//! A checkpoint is a JSON object holding every parameter array by name with
//! its shape and row-major values, plus the training configuration, seed,
//! loss trace and a metrics snapshot. Floats are written in shortest
//! round-trip form and parsed exactly, so save, load and save again gives
//! the same bytes.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::Standardizer;
use crate::diffmath::{AdamState, Matrix, Trainable};
use crate::error::{GdmError, Result};
use crate::inference::{PosteriorFamily, PosteriorParams, TraceRow, TrainConfig, TrainState};
use crate::mixture3::Mixture3Params;
use crate::model::{Fnn, GdmParams, GruCell, TransitionFamily, Variant};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointModel {
    Gdm(GdmParams),
    Mixture3(Mixture3Params),
}

impl CheckpointModel {
    pub fn kind(&self) -> &'static str {
        match self {
            CheckpointModel::Gdm(_) => "gdm2",
            CheckpointModel::Mixture3(_) => "mixture3",
        }
    }

    fn transition(&self) -> &TransitionFamily {
        match self {
            CheckpointModel::Gdm(m) => &m.transition,
            CheckpointModel::Mixture3(m) => &m.transition,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: CheckpointModel,
    pub posterior: Option<PosteriorParams>,
    /// Optimizer moments over the model arrays followed by the posterior
    /// arrays.
    pub adam: Option<AdamState>,
    pub step: usize,
    pub seed: u64,
    pub config: Option<TrainConfig>,
    pub trace: Vec<TraceRow>,
    pub metrics: BTreeMap<String, f64>,
    /// Per-coordinate scaling applied to the data before training.
    pub standardizer: Option<Standardizer>,
}

#[derive(Serialize, Deserialize)]
struct ArrayDoc {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ConfigDoc {
    steps: usize,
    learning_rate: f64,
    seed: u64,
    temperature: f64,
    gradient_clip: f64,
    elbo_samples: usize,
    checkpoint_every: usize,
    decay_every: usize,
    decay_factor: f64,
}

#[derive(Serialize, Deserialize)]
struct TraceDoc {
    step: usize,
    elbo: f64,
    grad_norm: f64,
}

#[derive(Serialize, Deserialize)]
struct Document {
    format_version: u32,
    kind: String,
    variant: String,
    k: usize,
    d: usize,
    n: usize,
    temperature: f64,
    stickiness: Option<f64>,
    posterior_temperature: Option<f64>,
    step: usize,
    seed: u64,
    adam_step: Option<u64>,
    training: Option<ConfigDoc>,
    metrics: BTreeMap<String, f64>,
    trace: Vec<TraceDoc>,
    arrays: Vec<ArrayDoc>,
}

fn push(arrays: &mut Vec<ArrayDoc>, name: String, m: &Matrix) {
    arrays.push(ArrayDoc {
        name,
        shape: [m.rows(), m.cols()],
        data: m.data().to_vec(),
    });
}

fn gdm_named(m: &GdmParams) -> Vec<(String, Matrix)> {
    let mut v = vec![
        ("model.prior_logits".to_string(), m.prior_logits.clone()),
        ("model.obs_prior".to_string(), m.obs_prior.clone()),
        ("model.proj".to_string(), m.proj.clone()),
    ];
    v.extend(m.dynamics.iter().enumerate().map(|(k, s)| (format!("model.dynamics.{k}"), s.clone())));
    v.push(("model.offsets".to_string(), m.offsets.clone()));
    v.push(("model.obs_noise".to_string(), m.obs_noise.clone()));
    v.extend(m.transition.named("model.transition"));
    v
}

fn mixture3_named(m: &Mixture3Params) -> Vec<(String, Matrix)> {
    let mut v = vec![
        ("model.prior_logits".to_string(), m.prior_logits.clone()),
        ("model.latent_prior".to_string(), m.latent_prior.clone()),
    ];
    v.extend(m.dynamics.iter().enumerate().map(|(k, a)| (format!("model.dynamics.{k}"), a.clone())));
    v.push(("model.offsets".to_string(), m.offsets.clone()));
    v.push(("model.emission".to_string(), m.emission.clone()));
    v.push(("model.emission_noise".to_string(), m.emission_noise.clone()));
    v.push(("model.latent_noise".to_string(), m.latent_noise.clone()));
    v.extend(m.transition.named("model.transition"));
    v
}

/// Named arrays handed out once each.
struct Store {
    arrays: HashMap<String, Matrix>,
}

impl Store {
    fn get(&mut self, name: &str) -> Result<Matrix> {
        self.arrays
            .remove(name)
            .ok_or_else(|| GdmError::Checkpoint(format!("missing array '{name}'")))
    }

    fn finish(self) -> Result<()> {
        let mut left: Vec<&String> = self.arrays.keys().collect();
        left.sort();
        match left.first() {
            None => Ok(()),
            Some(name) => Err(GdmError::Checkpoint(format!("unexpected array '{name}'"))),
        }
    }
}

fn posterior_from(store: &mut Store, variant: Variant, temperature: f64) -> Result<PosteriorParams> {
    let mut get = |n: &str| store.get(n);
    let prior_logits = get("posterior.prior_logits")?;
    let family = match variant {
        Variant::Linear => PosteriorFamily::Linear {
            weights: get("posterior.weights")?,
            bias: get("posterior.bias")?,
        },
        Variant::StickyLinear => PosteriorFamily::StickyLinear {
            weights: get("posterior.weights")?,
            bias: get("posterior.bias")?,
            recurrence: get("posterior.recurrence")?,
        },
        Variant::Recurrent => PosteriorFamily::BiRecurrent {
            forward: GruCell::from_named(&mut get, "posterior.forward")?,
            backward: GruCell::from_named(&mut get, "posterior.backward")?,
            fnn: Fnn::from_named(&mut get, "posterior.fnn")?,
        },
    };
    let p = PosteriorParams {
        prior_logits,
        family,
        temperature,
    };
    p.validate()?;
    Ok(p)
}

impl Checkpoint {
    pub fn from_train_state(state: &TrainState, cfg: &TrainConfig) -> Self {
        Self {
            model: CheckpointModel::Gdm(state.model.clone()),
            posterior: Some(state.posterior.clone()),
            adam: Some(state.adam.clone()),
            step: state.step,
            seed: cfg.seed,
            config: Some(cfg.clone()),
            trace: state.trace.clone(),
            metrics: BTreeMap::new(),
            standardizer: None,
        }
    }

    pub fn gdm(&self) -> Result<&GdmParams> {
        match &self.model {
            CheckpointModel::Gdm(m) => Ok(m),
            other => Err(GdmError::Checkpoint(format!("expected a gdm2 checkpoint, found {}", other.kind()))),
        }
    }

    pub fn posterior(&self) -> Result<&PosteriorParams> {
        self.posterior
            .as_ref()
            .ok_or_else(|| GdmError::Checkpoint("checkpoint has no posterior".into()))
    }

    /// State for resuming training.
    pub fn train_state(&self) -> Result<TrainState> {
        let model = self.gdm()?.clone();
        let posterior = self.posterior()?.clone();
        let adam = match &self.adam {
            Some(a) => a.clone(),
            None => {
                let mut arrays = model.arrays();
                arrays.extend(posterior.arrays());
                AdamState::new(&arrays)
            }
        };
        Ok(TrainState {
            model,
            posterior,
            adam,
            step: self.step,
            trace: self.trace.clone(),
        })
    }

    fn dims(&self) -> (usize, usize, usize) {
        match &self.model {
            CheckpointModel::Gdm(m) => (m.k(), m.d(), m.n()),
            CheckpointModel::Mixture3(m) => (m.k(), m.d(), m.n()),
        }
    }

    fn document(&self) -> Result<Document> {
        let mut arrays = Vec::new();
        let (named, temperature) = match &self.model {
            CheckpointModel::Gdm(m) => {
                m.validate()?;
                (gdm_named(m), m.temperature)
            }
            CheckpointModel::Mixture3(m) => {
                m.validate()?;
                (mixture3_named(m), m.temperature)
            }
        };
        for (name, m) in &named {
            push(&mut arrays, name.clone(), m);
        }
        if let Some(p) = &self.posterior {
            if matches!(self.model, CheckpointModel::Mixture3(_)) {
                return Err(GdmError::Checkpoint("a mixture3 checkpoint carries no posterior".into()));
            }
            for (name, m) in p.named("posterior") {
                push(&mut arrays, name, &m);
            }
        }
        if let Some(st) = &self.standardizer {
            push(&mut arrays, "data.mean".into(), &Matrix::row_vector(&st.mean));
            push(&mut arrays, "data.scale".into(), &Matrix::row_vector(&st.scale));
        }
        if let Some(a) = &self.adam {
            for (i, m) in a.m.iter().enumerate() {
                push(&mut arrays, format!("adam.m.{i}"), m);
            }
            for (i, v) in a.v.iter().enumerate() {
                push(&mut arrays, format!("adam.v.{i}"), v);
            }
        }
        if let Some(a) = arrays.iter().find(|a| a.data.iter().any(|v| !v.is_finite())) {
            return Err(GdmError::Checkpoint(format!("array '{}' has non-finite values", a.name)));
        }
        let scalars = self
            .metrics
            .iter()
            .map(|(k, v)| (k.as_str(), *v))
            .chain(self.trace.iter().flat_map(|r| [("trace", r.elbo), ("trace", r.grad_norm)]));
        for (name, v) in scalars {
            if !v.is_finite() {
                return Err(GdmError::Checkpoint(format!("'{name}' is not finite")));
            }
        }
        let (k, d, n) = self.dims();
        let transition = self.model.transition();
        Ok(Document {
            format_version: FORMAT_VERSION,
            kind: self.model.kind().into(),
            variant: transition.variant().as_str().into(),
            k,
            d,
            n,
            temperature,
            stickiness: transition.stickiness(),
            posterior_temperature: self.posterior.as_ref().map(|p| p.temperature),
            step: self.step,
            seed: self.seed,
            adam_step: self.adam.as_ref().map(|a| a.step),
            training: self.config.as_ref().map(|c| ConfigDoc {
                steps: c.steps,
                learning_rate: c.learning_rate,
                seed: c.seed,
                temperature: c.temperature,
                gradient_clip: c.gradient_clip,
                elbo_samples: c.elbo_samples,
                checkpoint_every: c.checkpoint_every,
                decay_every: c.decay_every,
                decay_factor: c.decay_factor,
            }),
            metrics: self.metrics.clone(),
            trace: self
                .trace
                .iter()
                .map(|r| TraceDoc {
                    step: r.step,
                    elbo: r.elbo,
                    grad_norm: r.grad_norm,
                })
                .collect(),
            arrays,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&self.document()?)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let version: serde_json::Value = serde_json::from_str(text)?;
        match version.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(GdmError::Checkpoint(format!(
                    "unsupported format version {v} (this build reads {FORMAT_VERSION})"
                )))
            }
            None => return Err(GdmError::Checkpoint("missing format_version".into())),
        }
        let doc: Document = serde_json::from_value(version)?;
        let variant: Variant = doc.variant.parse()?;
        let mut store = Store {
            arrays: HashMap::new(),
        };
        let mut order = Vec::new();
        for a in doc.arrays {
            let [r, c] = a.shape;
            if r * c != a.data.len() {
                return Err(GdmError::Checkpoint(format!(
                    "array '{}' has {} values for shape {r}x{c}",
                    a.name,
                    a.data.len()
                )));
            }
            let m = Matrix::from_vec(r, c, a.data)?;
            order.push(a.name.clone());
            if store.arrays.insert(a.name.clone(), m).is_some() {
                return Err(GdmError::Checkpoint(format!("duplicate array '{}'", a.name)));
            }
        }
        let dynamics = |store: &mut Store| -> Result<Vec<Matrix>> {
            (0..doc.k).map(|k| store.get(&format!("model.dynamics.{k}"))).collect()
        };
        let model = match doc.kind.as_str() {
            "gdm2" => {
                let prior_logits = store.get("model.prior_logits")?;
                let obs_prior = store.get("model.obs_prior")?;
                let proj = store.get("model.proj")?;
                let dynamics = dynamics(&mut store)?;
                let offsets = store.get("model.offsets")?;
                let obs_noise = store.get("model.obs_noise")?;
                let transition =
                    TransitionFamily::from_named(variant, doc.stickiness, |n| store.get(n), "model.transition")?;
                let m = GdmParams {
                    prior_logits,
                    obs_prior,
                    proj,
                    dynamics,
                    offsets,
                    obs_noise,
                    transition,
                    temperature: doc.temperature,
                };
                m.validate()?;
                CheckpointModel::Gdm(m)
            }
            "mixture3" => {
                let prior_logits = store.get("model.prior_logits")?;
                let latent_prior = store.get("model.latent_prior")?;
                let dynamics = dynamics(&mut store)?;
                let offsets = store.get("model.offsets")?;
                let emission = store.get("model.emission")?;
                let emission_noise = store.get("model.emission_noise")?;
                let latent_noise = store.get("model.latent_noise")?;
                let transition =
                    TransitionFamily::from_named(variant, doc.stickiness, |n| store.get(n), "model.transition")?;
                let m = Mixture3Params {
                    prior_logits,
                    latent_prior,
                    dynamics,
                    offsets,
                    emission,
                    emission_noise,
                    latent_noise,
                    transition,
                    temperature: doc.temperature,
                };
                m.validate()?;
                CheckpointModel::Mixture3(m)
            }
            other => return Err(GdmError::Checkpoint(format!("unknown model kind '{other}'"))),
        };
        let posterior = match doc.posterior_temperature {
            Some(t) => Some(posterior_from(&mut store, variant, t)?),
            None => None,
        };
        let adam = match doc.adam_step {
            None => None,
            Some(step) => {
                let count = order.iter().filter(|n| n.starts_with("adam.m.")).count();
                let mut m = Vec::with_capacity(count);
                let mut v = Vec::with_capacity(count);
                for i in 0..count {
                    m.push(store.get(&format!("adam.m.{i}"))?);
                    v.push(store.get(&format!("adam.v.{i}"))?);
                }
                Some(AdamState { m, v, step })
            }
        };
        let standardizer = if order.iter().any(|n| n == "data.mean") {
            let mean = store.get("data.mean")?.data().to_vec();
            let scale = store.get("data.scale")?.data().to_vec();
            if mean.len() != doc.n || scale.len() != doc.n || scale.iter().any(|s| !(*s > 0.0)) {
                return Err(GdmError::Checkpoint("malformed data standardizer".into()));
            }
            Some(Standardizer { mean, scale })
        } else {
            None
        };
        store.finish()?;
        let ck = Checkpoint {
            model,
            posterior,
            adam,
            step: doc.step,
            seed: doc.seed,
            config: doc.training.map(|c| TrainConfig {
                steps: c.steps,
                learning_rate: c.learning_rate,
                seed: c.seed,
                temperature: c.temperature,
                gradient_clip: c.gradient_clip,
                elbo_samples: c.elbo_samples,
                checkpoint_every: c.checkpoint_every,
                decay_every: c.decay_every,
                decay_factor: c.decay_factor,
            }),
            trace: doc
                .trace
                .into_iter()
                .map(|r| TraceRow {
                    step: r.step,
                    elbo: r.elbo,
                    grad_norm: r.grad_norm,
                })
                .collect(),
            metrics: doc.metrics,
            standardizer,
        };
        ck.check_adam()?;
        Ok(ck)
    }

    /// Optimizer moments must line up with the trainable arrays.
    fn check_adam(&self) -> Result<()> {
        let Some(adam) = &self.adam else {
            return Ok(());
        };
        let mut arrays = self.gdm()?.arrays();
        arrays.extend(self.posterior()?.arrays());
        let shapes_match = |ms: &[Matrix]| {
            ms.len() == arrays.len() && ms.iter().zip(&arrays).all(|(a, b)| a.shape() == b.shape())
        };
        if !shapes_match(&adam.m) || !shapes_match(&adam.v) {
            return Err(GdmError::Checkpoint(
                "optimizer moments do not match the parameter arrays".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        std::fs::write(path, text).map_err(|e| GdmError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GdmError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            GdmError::Checkpoint(m) => GdmError::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
