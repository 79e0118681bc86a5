//! Conformable convolution.
//!
//! An offset convolution reads the topological posterior `φ_post` and
//! predicts a `(Δy, Δx)` displacement per kernel tap and pixel; the main
//! 3×3 convolution then samples its source at `p + p_c + Δp_c` with
//! bilinear interpolation. Batch norm and ReLU follow. The offset
//! convolution starts at zero, so a fresh layer is an ordinary convolution.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{bilinear, Mode, ParamId, ParamSet, RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tpg::{compute_prior, record_posterior, PriorMap, TpgConfig};

pub const KERNEL: usize = 3;
pub const TAPS: usize = KERNEL * KERNEL;
pub const OFFSET_CHANNELS: usize = 2 * TAPS;

/// Which tensor the main convolution samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    #[default]
    Input,
    Posterior,
}

/// Bilinear read of `input[n, c]` at fractional `(y, x)`; zero outside.
pub fn bilinear_sample(input: &Tensor, y: f64, x: f64, n: usize, c: usize) -> f64 {
    let [_, cc, h, w] = input.dims4();
    let base = (n * cc + c) * h * w;
    bilinear(&input.data()[base..base + h * w], h, w, y, x)
}

/// Counts of posterior variants evaluated by a layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TpgTrace {
    pub aggregated: u64,
    pub unaggregated: u64,
    /// Nonzero pixels of the last binary prior.
    pub last_prior_pixels: usize,
}

/// He-normal weights `[cout, cin, k, k]` and zero bias.
pub fn he_conv(
    params: &mut ParamSet,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut impl Rng,
) -> (ParamId, ParamId) {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = cout * cin * k * k;
    let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    let w = Tensor::new(&[cout, cin, k, k], data).expect("sized");
    let wid = params.add(format!("{name}.weight"), w);
    let bid = params.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
    (wid, bid)
}

/// Pre-norm conformable convolution from explicit vars: offsets come from
/// `guide`, samples from `source`.
pub fn record_deform(
    tape: &mut Tape,
    guide: Var,
    source: Var,
    weight: Var,
    bias: Var,
    offset_weight: Var,
    offset_bias: Var,
) -> Result<Var> {
    let offsets = tape.conv2d(guide, offset_weight, offset_bias, KERNEL / 2)?;
    tape.deform_conv2d(source, offsets, weight, bias)
}

#[derive(Debug, Clone)]
pub struct ConformLayer {
    pub cin: usize,
    pub cout: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    pub offset_weight: ParamId,
    pub offset_bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: RunningStats,
    pub tpg: TpgConfig,
    pub source: SampleSource,
    pub trace: TpgTrace,
}

impl ConformLayer {
    /// Registers parameters `{name}.weight`, `.bias`, `.offset.weight`,
    /// `.offset.bias`, `.bn.gamma`, `.bn.beta`.
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        tpg: TpgConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        tpg.validate()?;
        if cin == 0 || cout == 0 {
            return Err(Error::invalid("layer channels must be positive"));
        }
        let (weight, bias) = he_conv(params, name, cin, cout, KERNEL, rng);
        let offset_weight = params.add(
            format!("{name}.offset.weight"),
            Tensor::zeros(&[OFFSET_CHANNELS, cin, KERNEL, KERNEL]),
        );
        let offset_bias =
            params.add(format!("{name}.offset.bias"), Tensor::zeros(&[OFFSET_CHANNELS]));
        let gamma = params.add(format!("{name}.bn.gamma"), Tensor::ones(&[cout]));
        let beta = params.add(format!("{name}.bn.beta"), Tensor::zeros(&[cout]));
        Ok(ConformLayer {
            cin,
            cout,
            weight,
            bias,
            offset_weight,
            offset_bias,
            gamma,
            beta,
            stats: RunningStats::new(cout),
            tpg,
            source: SampleSource::Input,
            trace: TpgTrace::default(),
        })
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let s = tape.value(x).shape();
        if s.len() != 4 || s[1] != self.cin {
            return Err(Error::shape(format!(
                "layer expects [N,{},H,W], got {s:?}",
                self.cin
            )));
        }
        Ok(())
    }

    fn sampled(&self, tape: &mut Tape, params: &ParamSet, guide: Var, source: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        let ow = tape.param(params, self.offset_weight);
        let ob = tape.param(params, self.offset_bias);
        let out = record_deform(tape, guide, source, w, b, ow, ob)?;
        Ok(out)
    }

    fn norm_relu(&mut self, tape: &mut Tape, params: &ParamSet, x: Var, mode: Mode) -> Result<Var> {
        let g = tape.param(params, self.gamma);
        let b = tape.param(params, self.beta);
        let y = tape.batch_norm(x, g, b, &mut self.stats, mode)?;
        Ok(tape.relu(y))
    }

    /// Conformable convolution before batch norm, with a given prior.
    pub fn pre_norm_with_prior(
        &mut self,
        tape: &mut Tape,
        params: &ParamSet,
        phi_in: Var,
        prior: &PriorMap,
    ) -> Result<Var> {
        self.check_input(tape, phi_in)?;
        let post = record_posterior(tape, phi_in, prior, self.tpg.aggregation)?;
        if self.tpg.aggregation {
            self.trace.aggregated += 1;
        } else {
            self.trace.unaggregated += 1;
        }
        let source = match self.source {
            SampleSource::Input => phi_in,
            SampleSource::Posterior => post,
        };
        self.sampled(tape, params, post, source)
    }

    /// Conformable convolution before batch norm.
    pub fn pre_norm(&mut self, tape: &mut Tape, params: &ParamSet, phi_in: Var) -> Result<Var> {
        self.check_input(tape, phi_in)?;
        let trace = compute_prior(tape.value(phi_in), &self.tpg)?;
        self.trace.last_prior_pixels = trace.binary.count_nonzero();
        self.pre_norm_with_prior(tape, params, phi_in, &trace.dilated)
    }

    /// Posterior, offsets, bilinear sampling, batch norm, ReLU.
    pub fn conformable_forward(
        &mut self,
        tape: &mut Tape,
        params: &ParamSet,
        phi_in: Var,
        mode: Mode,
    ) -> Result<Var> {
        let x = self.pre_norm(tape, params, phi_in)?;
        self.norm_relu(tape, params, x, mode)
    }

    /// As [`Self::conformable_forward`] with the prior supplied.
    pub fn forward_with_prior(
        &mut self,
        tape: &mut Tape,
        params: &ParamSet,
        phi_in: Var,
        prior: &PriorMap,
        mode: Mode,
    ) -> Result<Var> {
        let x = self.pre_norm_with_prior(tape, params, phi_in, prior)?;
        self.norm_relu(tape, params, x, mode)
    }

    /// Deformable baseline: offsets are predicted from `φ_in` directly.
    pub fn deformable_forward(
        &mut self,
        tape: &mut Tape,
        params: &ParamSet,
        phi_in: Var,
        mode: Mode,
    ) -> Result<Var> {
        self.check_input(tape, phi_in)?;
        let x = self.sampled(tape, params, phi_in, phi_in)?;
        self.norm_relu(tape, params, x, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, grad_check_params};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn layer(cin: usize, cout: usize, seed: u64) -> (ParamSet, ConformLayer) {
        let mut ps = ParamSet::new();
        let l = ConformLayer::new(&mut ps, "c", cin, cout, TpgConfig::default(), &mut rng(seed))
            .unwrap();
        (ps, l)
    }

    /// Direct zero-padded 3×3 convolution.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let [n, cin, h, wd] = x.dims4();
        let cout = w.shape()[0];
        Tensor::from_fn(&[n, cout, h, wd], |i| {
            let (s, o, y, xx) = (i / (cout * h * wd), i / (h * wd) % cout, i / wd % h, i % wd);
            let mut acc = b.data()[o];
            for c in 0..cin {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        let sx = xx as isize + kx as isize - 1;
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                            acc += w.at4(o, c, ky, kx) * x.at4(s, c, sy as usize, sx as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn bilinear_sample_values() {
        let t = Tensor::new(&[1, 2, 2, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        assert_eq!(bilinear_sample(&t, 1.0, 0.0, 0, 1), 7.0);
        assert_eq!(bilinear_sample(&t, 0.5, 0.5, 0, 0), 2.5);
        assert_eq!(bilinear_sample(&t, -3.0, 7.5, 0, 0), 0.0);
        // Half a pixel outside sees half of the edge value.
        assert_eq!(bilinear_sample(&t, -0.5, 0.0, 0, 0), 0.5);
    }

    #[test]
    fn fresh_layer_is_a_plain_convolution() {
        let (ps, mut l) = layer(3, 4, 1);
        let x = Tensor::randn(&[2, 3, 7, 7], 1.0, &mut rng(2));
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let pre = l.pre_norm(&mut tape, &ps, xv).unwrap();
        let reference = naive_conv(&x, &ps.get(l.weight).value, &ps.get(l.bias).value);
        assert!(tape.value(pre).max_abs_diff(&reference) < 1e-10);

        let w = tape.param(&ps, l.weight);
        let b = tape.param(&ps, l.bias);
        let conv = tape.conv2d(xv, w, b, 1).unwrap();
        assert_eq!(tape.value(pre), tape.value(conv));

        let mut plain_stats = l.stats.clone();
        let out = l.conformable_forward(&mut tape, &ps, xv, Mode::Train).unwrap();
        let g = tape.param(&ps, l.gamma);
        let be = tape.param(&ps, l.beta);
        let bn = tape.batch_norm(conv, g, be, &mut plain_stats, Mode::Train).unwrap();
        let plain = tape.relu(bn);
        assert!(tape.value(out).max_abs_diff(tape.value(plain)) < 1e-10);
        assert_eq!(plain_stats, l.stats);
    }

    #[test]
    fn integer_offset_shifts_the_convolution() {
        let (mut ps, mut l) = layer(1, 1, 3);
        let mut bias = Tensor::zeros(&[OFFSET_CHANNELS]);
        for tap in 0..TAPS {
            bias.data_mut()[2 * tap] = 1.0;
        }
        ps.get_mut(l.offset_bias).value = bias;
        let x = Tensor::uniform(&[1, 1, 6, 6], 0.0, 1.0, &mut rng(4));
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let out = l.pre_norm(&mut tape, &ps, xv).unwrap();
        let reference = naive_conv(&x, &ps.get(l.weight).value, &ps.get(l.bias).value);
        for y in 0..5 {
            for xx in 0..6 {
                let got = tape.value(out).at4(0, 0, y, xx);
                let want = reference.at4(0, 0, y + 1, xx);
                assert!((got - want).abs() < 1e-12, "({y},{xx}) {got} vs {want}");
            }
        }
    }

    #[test]
    fn deformable_equals_conformable_for_empty_prior() {
        let mut ps = ParamSet::new();
        let tpg = TpgConfig {
            tau0: 5.0,
            ..TpgConfig::default()
        };
        let mut l = ConformLayer::new(&mut ps, "c", 2, 3, tpg, &mut rng(5)).unwrap();
        ps.get_mut(l.offset_weight).value =
            Tensor::randn(&[OFFSET_CHANNELS, 2, 3, 3], 0.3, &mut rng(6));
        let x = Tensor::randn(&[1, 2, 6, 6], 1.0, &mut rng(7));
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let mut l2 = l.clone();
        let a = l.conformable_forward(&mut tape, &ps, xv, Mode::Train).unwrap();
        let b = l2.deformable_forward(&mut tape, &ps, xv, Mode::Train).unwrap();
        assert_eq!(l.trace.last_prior_pixels, 0);
        assert_eq!(tape.value(a), tape.value(b));
    }

    fn small_offsets(ps: &mut ParamSet, l: &ConformLayer, seed: u64) {
        let mut r = rng(seed);
        ps.get_mut(l.offset_weight).value =
            Tensor::randn(&[OFFSET_CHANNELS, l.cin, 3, 3], 0.01, &mut r);
        ps.get_mut(l.offset_bias).value = Tensor::uniform(&[OFFSET_CHANNELS], 0.3, 0.7, &mut r);
    }

    #[test]
    fn pre_norm_gradients_match_finite_differences() {
        let (mut ps, l) = layer(2, 2, 8);
        small_offsets(&mut ps, &l, 9);
        let x = Tensor::uniform(&[1, 2, 5, 5], 0.0, 1.0, &mut rng(10));
        let prior = compute_prior(&x, &l.tpg).unwrap().dilated;
        assert!(prior.count_nonzero() > 0);
        let inputs = [
            x,
            ps.get(l.weight).value.clone(),
            ps.get(l.bias).value.clone(),
            ps.get(l.offset_weight).value.clone(),
            ps.get(l.offset_bias).value.clone(),
        ];
        for source in [SampleSource::Input, SampleSource::Posterior] {
            let rep = grad_check(
                "conform",
                |t, v| {
                    let post = record_posterior(t, v[0], &prior, true)?;
                    let src = if source == SampleSource::Input { v[0] } else { post };
                    record_deform(t, post, src, v[1], v[2], v[3], v[4])
                },
                &inputs,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(rep.passed(), "{rep:?}");
        }
    }

    #[test]
    fn layer_parameter_gradients_match_finite_differences() {
        let (mut ps, l) = layer(2, 3, 11);
        small_offsets(&mut ps, &l, 12);
        let x = Tensor::uniform(&[2, 2, 5, 5], 0.0, 1.0, &mut rng(13));
        let prior = compute_prior(&x, &l.tpg).unwrap().dilated;
        let proj = Tensor::uniform(&[2, 3, 5, 5], -1.0, 1.0, &mut rng(14));
        for deformable in [false, true] {
            let rep = grad_check_params(
                "layer",
                &ps,
                |t, p| {
                    let mut layer = l.clone();
                    let xv = t.constant(x.clone());
                    let y = if deformable {
                        layer.deformable_forward(t, p, xv, Mode::Train)?
                    } else {
                        layer.forward_with_prior(t, p, xv, &prior, Mode::Train)?
                    };
                    let pv = t.constant(proj.clone());
                    let m = t.mul(y, pv)?;
                    Ok(t.sum(m))
                },
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(rep.passed(), "{rep:?}");
        }
    }

    #[test]
    fn zero_offset_input_gradient_is_the_convolution_gradient() {
        let (ps, mut l) = layer(2, 2, 15);
        let x = Tensor::randn(&[1, 2, 6, 6], 1.0, &mut rng(16));
        let grad_of = |conform: bool, l: &mut ConformLayer| {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            let y = if conform {
                l.pre_norm(&mut tape, &ps, xv).unwrap()
            } else {
                let w = tape.param(&ps, l.weight);
                let b = tape.param(&ps, l.bias);
                tape.conv2d(xv, w, b, 1).unwrap()
            };
            let loss = tape.sum(y);
            let mut scratch = ps.clone();
            tape.backward(loss, &mut scratch).unwrap().get(xv).unwrap().clone()
        };
        let a = grad_of(true, &mut l);
        let b = grad_of(false, &mut l);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn output_is_bounded_under_large_offsets() {
        let (mut ps, mut l) = layer(2, 2, 17);
        ps.get_mut(l.offset_weight).value =
            Tensor::randn(&[OFFSET_CHANNELS, 2, 3, 3], 5.0, &mut rng(18));
        ps.get_mut(l.offset_bias).value = Tensor::randn(&[OFFSET_CHANNELS], 20.0, &mut rng(19));
        let m = 1.0;
        let x = Tensor::uniform(&[1, 2, 8, 8], -m, m, &mut rng(20));
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let out = l.pre_norm(&mut tape, &ps, xv).unwrap();
        let wmax = ps.get(l.weight).value.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let bound = (2 * TAPS) as f64 * wmax * m;
        assert!(tape.value(out).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn records_which_posterior_ran() {
        let mut ps = ParamSet::new();
        let cfg = TpgConfig {
            aggregation: false,
            ..TpgConfig::default()
        };
        let mut l = ConformLayer::new(&mut ps, "c", 1, 1, cfg, &mut rng(21)).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(Tensor::randn(&[1, 1, 4, 4], 1.0, &mut rng(22)));
        l.conformable_forward(&mut tape, &ps, xv, Mode::Train).unwrap();
        assert_eq!(l.trace.unaggregated, 1);
        assert_eq!(l.trace.aggregated, 0);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let (ps, mut l) = layer(3, 2, 23);
        let mut tape = Tape::new();
        let xv = tape.input(Tensor::zeros(&[1, 2, 4, 4]));
        assert!(matches!(
            l.conformable_forward(&mut tape, &ps, xv, Mode::Train),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn fresh_offset_conv_is_zero() {
        let (ps, l) = layer(4, 4, 24);
        assert!(ps.get(l.offset_weight).value.data().iter().all(|v| *v == 0.0));
        assert!(ps.get(l.offset_bias).value.data().iter().all(|v| *v == 0.0));
        assert_eq!(ps.find("c.offset.weight"), Some(l.offset_weight));
    }
}
