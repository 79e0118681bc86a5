//! Topological posterior generation.
//!
//! `φ_in [N,C,H,W]` is pooled over channels, each pooled map goes through
//! 0-dimensional persistence, the generators of persistent pairs are
//! rasterized into a binary prior, the prior is blurred with a normalized
//! 3×3 Gaussian, and the result reweights the input:
//! `φ_post = φ_dil ⊙ φ_in + φ_in`.
//!
//! The prior is piecewise constant in `φ_in` and is recorded on the tape as
//! a constant, so gradients reach `φ_in` only through the two explicit
//! occurrences in the aggregation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ph::{
    compute_ph0, filter_generators, min_max_normalize, pairs_to_generators, Connectivity,
    GeneratorSet, PersistenceDiagram, ScalarMap,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Max,
    Mean,
}

fn default_tau0() -> f64 {
    0.05
}

fn default_sigma() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

/// Configuration of the posterior generator. The three switches exist for
/// ablations; all default to on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TpgConfig {
    /// Persistence threshold on the normalized pooled map.
    #[serde(default = "default_tau0")]
    pub tau0: f64,
    #[serde(default)]
    pub pool_mode: PoolMode,
    #[serde(default = "default_sigma")]
    pub gaussian_sigma: f64,
    #[serde(default)]
    pub connectivity: Connectivity,
    /// When off, every generator is kept regardless of persistence.
    #[serde(default = "yes")]
    pub filtering: bool,
    /// When off, the binary prior is used directly.
    #[serde(default = "yes")]
    pub dilation: bool,
    /// When off, `φ_post = φ_dil ⊙ φ_in`.
    #[serde(default = "yes")]
    pub aggregation: bool,
    /// Always true: no gradient flows through persistence.
    #[serde(default = "yes")]
    pub stop_gradient_prior: bool,
}

impl Default for TpgConfig {
    fn default() -> Self {
        TpgConfig {
            tau0: default_tau0(),
            pool_mode: PoolMode::Max,
            gaussian_sigma: default_sigma(),
            connectivity: Connectivity::Four,
            filtering: true,
            dilation: true,
            aggregation: true,
            stop_gradient_prior: true,
        }
    }
}

impl TpgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau0 >= 0.0) || !self.tau0.is_finite() {
            return Err(Error::Config(format!("tau0 must be >= 0, got {}", self.tau0)));
        }
        if !(self.gaussian_sigma > 0.0) || !self.gaussian_sigma.is_finite() {
            return Err(Error::Config(format!(
                "gaussian_sigma must be > 0, got {}",
                self.gaussian_sigma
            )));
        }
        if !self.stop_gradient_prior {
            return Err(Error::Config(
                "stop_gradient_prior must be true: persistence is not differentiated".into(),
            ));
        }
        Ok(())
    }
}

/// A per-sample `[N,H,W]` map in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMap(Tensor);

impl PriorMap {
    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        PriorMap(Tensor::zeros(&[n, h, w]))
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::shape(format!("prior must be [N,H,W], got {:?}", t.shape())));
        }
        if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("prior values must lie in [0,1]"));
        }
        Ok(PriorMap(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        (s[0], s[1], s[2])
    }

    /// The `H × W` plane of sample `n`.
    pub fn plane(&self, n: usize) -> &[f64] {
        let (_, h, w) = self.dims();
        &self.0.data()[n * h * w..(n + 1) * h * w]
    }

    pub fn count_nonzero(&self) -> usize {
        self.0.data().iter().filter(|v| **v != 0.0).count()
    }
}

/// Per-pixel channel reduction, then min-max normalization per sample.
pub fn channel_pool(input: &Tensor, mode: PoolMode) -> Result<Tensor> {
    if input.rank() != 4 {
        return Err(Error::shape(format!(
            "channel_pool expects [N,C,H,W], got {:?}",
            input.shape()
        )));
    }
    let [n, c, h, w] = input.dims4();
    let hw = h * w;
    let d = input.data();
    let mut out = Vec::with_capacity(n * hw);
    for s in 0..n {
        let mut pooled = vec![0.0; hw];
        for (p, slot) in pooled.iter_mut().enumerate() {
            let vals = (0..c).map(|ch| d[(s * c + ch) * hw + p]);
            *slot = match mode {
                PoolMode::Max => vals.fold(f64::NEG_INFINITY, f64::max),
                PoolMode::Mean => vals.sum::<f64>() / c as f64,
            };
        }
        out.extend(min_max_normalize(&pooled));
    }
    Tensor::new(&[n, h, w], out)
}

/// Binary prior with ones at the birth and death pixel of every generator.
pub fn rasterize_prior(
    generators: &[GeneratorSet],
    n: usize,
    h: usize,
    w: usize,
) -> Result<PriorMap> {
    if generators.len() != n {
        return Err(Error::shape(format!(
            "{} generator sets for a batch of {n}",
            generators.len()
        )));
    }
    let mut t = Tensor::zeros(&[n, h, w]);
    let d = t.data_mut();
    for (s, set) in generators.iter().enumerate() {
        for g in set.iter() {
            for c in [g.birth, g.death] {
                if c.x >= w || c.y >= h {
                    return Err(Error::Internal(format!(
                        "generator coordinate ({}, {}) outside {h}×{w} map",
                        c.x, c.y
                    )));
                }
                d[s * h * w + c.y * w + c.x] = 1.0;
            }
        }
    }
    Ok(PriorMap(t))
}

/// Normalized 3×3 Gaussian, row-major, entries `exp(−(dx²+dy²)/(2σ²))/Z`.
pub fn gaussian_kernel(sigma: f64) -> [f64; 9] {
    let mut k = [0.0; 9];
    for (i, slot) in k.iter_mut().enumerate() {
        let dy = (i / 3) as f64 - 1.0;
        let dx = (i % 3) as f64 - 1.0;
        *slot = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
    }
    let z: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= z);
    k
}

/// Zero-padded convolution with [`gaussian_kernel`], clamped to `[0,1]`.
pub fn gaussian_dilate(prior: &PriorMap, sigma: f64) -> Result<PriorMap> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let k = gaussian_kernel(sigma);
    let (n, h, w) = prior.dims();
    let mut out = Tensor::zeros(&[n, h, w]);
    for s in 0..n {
        let src = prior.plane(s);
        let dst = &mut out.data_mut()[s * h * w..(s + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let sy = y as isize + (i / 3) as isize - 1;
                    let sx = x as isize + (i % 3) as isize - 1;
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        acc += kv * src[sy as usize * w + sx as usize];
                    }
                }
                dst[y * w + x] = acc.clamp(0.0, 1.0);
            }
        }
    }
    Ok(PriorMap(out))
}

/// Every intermediate of one prior computation, kept for inspection.
#[derive(Debug, Clone)]
pub struct PriorTrace {
    pub pooled: Tensor,
    pub diagrams: Vec<PersistenceDiagram>,
    pub generators: Vec<GeneratorSet>,
    pub binary: PriorMap,
    pub dilated: PriorMap,
}

/// Pool → persistence → generators → filter → rasterize → dilate.
pub fn compute_prior(phi_in: &Tensor, cfg: &TpgConfig) -> Result<PriorTrace> {
    cfg.validate()?;
    if !phi_in.all_finite() {
        return Err(Error::NonFinite("TPG input".into()));
    }
    let pooled = channel_pool(phi_in, cfg.pool_mode)?;
    let [_, n, h, w] = pooled.dims4();
    let mut diagrams = Vec::with_capacity(n);
    let mut generators = Vec::with_capacity(n);
    for s in 0..n {
        let map = ScalarMap::new(h, w, pooled.data()[s * h * w..(s + 1) * h * w].to_vec())?;
        let pd = compute_ph0(&map, cfg.connectivity);
        let all = pairs_to_generators(&pd);
        let kept = if cfg.filtering {
            filter_generators(&pd, &all, cfg.tau0)?
        } else {
            all
        };
        diagrams.push(pd);
        generators.push(kept);
    }
    let binary = rasterize_prior(&generators, n, h, w)?;
    let dilated = if cfg.dilation {
        gaussian_dilate(&binary, cfg.gaussian_sigma)?
    } else {
        binary.clone()
    };
    Ok(PriorTrace {
        pooled,
        diagrams,
        generators,
        binary,
        dilated,
    })
}

/// Record `φ_dil ⊙ φ_in (+ φ_in)` on the tape with `prior` held constant.
pub fn record_posterior(
    tape: &mut Tape,
    phi_in: Var,
    prior: &PriorMap,
    aggregation: bool,
) -> Result<Var> {
    let [n, _, h, w] = tape.value(phi_in).dims4();
    if prior.dims() != (n, h, w) {
        return Err(Error::shape(format!(
            "prior {:?} does not match input {:?}",
            prior.tensor().shape(),
            tape.value(phi_in).shape()
        )));
    }
    let p = tape.constant(prior.tensor().clone());
    let weighted = tape.mul(phi_in, p)?;
    if aggregation {
        tape.add(weighted, phi_in)
    } else {
        Ok(weighted)
    }
}

/// `φ_post = φ_dil ⊙ φ_in + φ_in`.
pub fn tpg_forward(phi_in: &Tensor, cfg: &TpgConfig) -> Result<Tensor> {
    posterior(phi_in, cfg, true)
}

/// Ablation variant without the skip term: `φ_post = φ_dil ⊙ φ_in`.
pub fn tpg_forward_no_aggregation(phi_in: &Tensor, cfg: &TpgConfig) -> Result<Tensor> {
    posterior(phi_in, cfg, false)
}

fn posterior(phi_in: &Tensor, cfg: &TpgConfig, aggregation: bool) -> Result<Tensor> {
    let trace = compute_prior(phi_in, cfg)?;
    let mut tape = Tape::new();
    let x = tape.constant(phi_in.clone());
    let y = record_posterior(&mut tape, x, &trace.dilated, aggregation)?;
    Ok(tape.value(y).clone())
}
