//! A two-level encoder–decoder with a configurable bottleneck.
//!
//! ```text
//! x[1] ─ enc1(1→8) ─┬─ pool ─ enc2(8→16) ─ bottleneck(16→16) ─ up ─┐
//!                   └───────────────── skip ──────────────────── concat(24)
//!                                        dec1(24→8) ─ dec2(8→8) ─ head(1×1) ─ σ
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, ParamId, ParamSet, RunningStats, Tape, Var};
use crate::conform::{he_conv, ConformLayer, SampleSource, TpgTrace};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tpg::TpgConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Conv,
    Deform,
    #[default]
    Conform,
}

/// Block names in construction order.
pub const BLOCK_NAMES: [&str; 5] = ["enc1", "enc2", "bottleneck", "dec1", "dec2"];

/// Positions that become conformable when a layer count is requested,
/// filled in this order.
const CONFORM_ORDER: [usize; 3] = [2, 1, 0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub bottleneck: BlockKind,
    /// When set, the first `k` of bottleneck, enc2, enc1 are conformable
    /// and every other block is a plain convolution.
    pub conform_layers: Option<usize>,
    pub sample_source: SampleSource,
    pub tpg: TpgConfig,
}

impl NetConfig {
    pub fn block_kinds(&self) -> Result<[BlockKind; 5]> {
        let mut kinds = [BlockKind::Conv; 5];
        match self.conform_layers {
            Some(k) if k > CONFORM_ORDER.len() => {
                return Err(Error::Config(format!(
                    "conform_layers must be at most {}, got {k}",
                    CONFORM_ORDER.len()
                )))
            }
            Some(k) => CONFORM_ORDER[..k]
                .iter()
                .for_each(|p| kinds[*p] = BlockKind::Conform),
            None => kinds[2] = self.bottleneck,
        }
        Ok(kinds)
    }
}

#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: RunningStats,
}

impl ConvBlock {
    fn new(params: &mut ParamSet, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let (weight, bias) = he_conv(params, name, cin, cout, 3, rng);
        let gamma = params.add(format!("{name}.bn.gamma"), Tensor::ones(&[cout]));
        let beta = params.add(format!("{name}.bn.beta"), Tensor::zeros(&[cout]));
        ConvBlock {
            weight,
            bias,
            gamma,
            beta,
            stats: RunningStats::new(cout),
        }
    }

    fn forward(&mut self, tape: &mut Tape, params: &ParamSet, x: Var, mode: Mode) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        let y = tape.conv2d(x, w, b, 1)?;
        let g = tape.param(params, self.gamma);
        let be = tape.param(params, self.beta);
        let y = tape.batch_norm(y, g, be, &mut self.stats, mode)?;
        Ok(tape.relu(y))
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    Conv(ConvBlock),
    Deform(ConformLayer),
    Conform(ConformLayer),
}

impl Block {
    fn new(
        kind: BlockKind,
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        cfg: &NetConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(match kind {
            BlockKind::Conv => Block::Conv(ConvBlock::new(params, name, cin, cout, rng)),
            BlockKind::Deform | BlockKind::Conform => {
                let mut layer = ConformLayer::new(params, name, cin, cout, cfg.tpg, rng)?;
                layer.source = cfg.sample_source;
                if kind == BlockKind::Deform {
                    Block::Deform(layer)
                } else {
                    Block::Conform(layer)
                }
            }
        })
    }

    pub fn kind(&self) -> BlockKind {
        match self {
            Block::Conv(_) => BlockKind::Conv,
            Block::Deform(_) => BlockKind::Deform,
            Block::Conform(_) => BlockKind::Conform,
        }
    }

    pub fn stats(&self) -> &RunningStats {
        match self {
            Block::Conv(b) => &b.stats,
            Block::Deform(l) | Block::Conform(l) => &l.stats,
        }
    }

    pub fn stats_mut(&mut self) -> &mut RunningStats {
        match self {
            Block::Conv(b) => &mut b.stats,
            Block::Deform(l) | Block::Conform(l) => &mut l.stats,
        }
    }

    fn forward(&mut self, tape: &mut Tape, params: &ParamSet, x: Var, mode: Mode) -> Result<Var> {
        match self {
            Block::Conv(b) => b.forward(tape, params, x, mode),
            Block::Deform(l) => l.deformable_forward(tape, params, x, mode),
            Block::Conform(l) => l.conformable_forward(tape, params, x, mode),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MiniNet {
    pub config: NetConfig,
    pub blocks: Vec<Block>,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

impl MiniNet {
    pub const INPUT_CHANNELS: usize = 1;
    const WIDTHS: [(usize, usize); 5] = [(1, 8), (8, 16), (16, 16), (24, 8), (8, 8)];

    /// He-initialized blocks; the 1×1 head starts at zero so a fresh
    /// network predicts 0.5 everywhere.
    pub fn new(config: NetConfig, params: &mut ParamSet, rng: &mut impl Rng) -> Result<Self> {
        config.tpg.validate()?;
        let kinds = config.block_kinds()?;
        let mut blocks = Vec::with_capacity(5);
        for ((name, kind), (cin, cout)) in BLOCK_NAMES.iter().zip(kinds).zip(Self::WIDTHS) {
            blocks.push(Block::new(kind, params, name, cin, cout, &config, rng)?);
        }
        let head_weight = params.add("head.weight", Tensor::zeros(&[1, 8, 1, 1]));
        let head_bias = params.add("head.bias", Tensor::zeros(&[1]));
        Ok(MiniNet {
            config,
            blocks,
            head_weight,
            head_bias,
        })
    }

    /// Probabilities `[N,1,H,W]` for images `[N,1,H,W]` with even sides.
    pub fn forward(&mut self, tape: &mut Tape, params: &ParamSet, x: Var, mode: Mode) -> Result<Var> {
        let s = tape.value(x).shape();
        if s.len() != 4 || s[1] != Self::INPUT_CHANNELS || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::shape(format!(
                "network expects [N,1,H,W] with even H and W, got {s:?}"
            )));
        }
        let [enc1, enc2, bottleneck, dec1, dec2] = &mut self.blocks[..] else {
            return Err(Error::Internal("network must have five blocks".into()));
        };
        let e1 = enc1.forward(tape, params, x, mode)?;
        let p = tape.avg_pool2(e1)?;
        let e2 = enc2.forward(tape, params, p, mode)?;
        let b = bottleneck.forward(tape, params, e2, mode)?;
        let u = tape.upsample2(b)?;
        let cat = tape.concat(u, e1)?;
        let d1 = dec1.forward(tape, params, cat, mode)?;
        let d2 = dec2.forward(tape, params, d1, mode)?;
        let hw = tape.param(params, self.head_weight);
        let hb = tape.param(params, self.head_bias);
        let logits = tape.conv2d(d2, hw, hb, 0)?;
        Ok(tape.sigmoid(logits))
    }

    /// Posterior-generator counters of every conformable block.
    pub fn tpg_traces(&self) -> Vec<(&'static str, TpgTrace)> {
        BLOCK_NAMES
            .iter()
            .zip(&self.blocks)
            .filter_map(|(name, b)| match b {
                Block::Conform(l) => Some((*name, l.trace)),
                _ => None,
            })
            .collect()
    }

    pub fn block_kinds(&self) -> Vec<BlockKind> {
        self.blocks.iter().map(Block::kind).collect()
    }
}
