//! Adam training on the soft Dice loss, and dataset evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{batch, SynthSample};
use super::model::{BlockKind, MiniNet, NetConfig};
use crate::autodiff::{Mode, ParamSet, Tape};
use crate::conform::SampleSource;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_pair, MetricsReport, DEFAULT_THRESHOLD};
use crate::tensor::Tensor;
use crate::tpg::TpgConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    /// Seeds initialization and batch order.
    pub seed: u64,
    pub bottleneck: BlockKind,
    pub conform_layers: Option<usize>,
    pub sample_source: SampleSource,
    pub dice_smooth: f64,
    pub tpg: TpgConfig,
    /// Split sizes for experiments that generate their own data.
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 8,
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            seed: 0,
            bottleneck: BlockKind::Conform,
            conform_layers: None,
            sample_source: SampleSource::Input,
            dice_smooth: 1.0,
            tpg: TpgConfig::default(),
            n_train: 80,
            n_test: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam betas must lie in [0,1) and eps be positive".into());
        }
        if !(self.dice_smooth > 0.0) {
            return bad("dice_smooth must be positive".into());
        }
        if self.n_train == 0 || self.n_test == 0 {
            return bad("n_train and n_test must be positive".into());
        }
        self.tpg.validate()?;
        self.net_config().block_kinds()?;
        Ok(())
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            bottleneck: self.bottleneck,
            conform_layers: self.conform_layers,
            sample_source: self.sample_source,
            tpg: self.tpg,
        }
    }
}

/// A network with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: MiniNet,
    pub params: ParamSet,
}

impl Model {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = MiniNet::new(cfg.net_config(), &mut params, &mut rng)?;
        Ok(Model { net, params })
    }

    /// Probabilities `[N,1,H,W]` in eval mode.
    pub fn predict(&mut self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let y = self.net.forward(&mut tape, &self.params, x, Mode::Eval)?;
        Ok(tape.value(y).clone())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, cfg: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Adam {
            cfg,
            lr,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update from the accumulated gradients.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let g = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                value[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.epoch_losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.epoch_losses.last().expect("at least one epoch")
    }
}

/// Mini-batch Adam on the soft Dice loss. Batch order is reshuffled every
/// epoch from `cfg.seed`. A non-finite loss aborts with the epoch and step.
pub fn train(cfg: &TrainConfig, model: &mut Model, data: &[SynthSample]) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut adam = Adam::new(&model.params, cfg.learning_rate, cfg.adam);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0b5e_55ed);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&SynthSample> = chunk.iter().map(|i| &data[*i]).collect();
            let (x, y) = batch(&samples)?;
            if !x.all_finite() {
                return Err(Error::NonFinite(format!(
                    "training images at epoch {epoch}, step {steps}"
                )));
            }
            model.params.zero_grad();
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let pred = model.net.forward(&mut tape, &model.params, xv, Mode::Train)?;
            let loss = tape.dice_loss(pred, &y, cfg.dice_smooth)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss {value} at epoch {epoch}, step {steps}"
                )));
            }
            tape.backward(loss, &mut model.params)?;
            adam.step(&mut model.params);
            total += value;
            batches += 1;
            steps += 1;
        }
        let mean = total / batches as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(TrainReport {
        epoch_losses,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean: MetricsReport,
    pub per_image: Vec<MetricsReport>,
}

/// Metrics of every sample's eval-mode prediction, and their mean.
pub fn evaluate(model: &mut Model, data: &[SynthSample], threshold: f64) -> Result<EvalReport> {
    let mut per_image = Vec::with_capacity(data.len());
    for s in data {
        let (x, _) = batch(&[s])?;
        let p = model.predict(&x)?;
        per_image.push(evaluate_pair(&p, &s.mask, threshold)?);
    }
    let mean = MetricsReport::mean(&per_image).ok_or_else(|| Error::invalid("empty dataset"))?;
    Ok(EvalReport { mean, per_image })
}

/// Evaluate with the default 0.5 threshold.
pub fn evaluate_default(model: &mut Model, data: &[SynthSample]) -> Result<EvalReport> {
    evaluate(model, data, DEFAULT_THRESHOLD)
}
