//! Central finite-difference verification of tape gradients.
//!
//! Errors are measured per checked tensor as
//! `max|a − n| / max(1e-8, max(|a| + |n|))` over its coordinates, where `a`
//! is the analytic and `n` the numeric derivative; the report keeps the
//! worst tensor. A coordinate whose ±step evaluations take a different
//! discrete branch than the base point (see [`Tape::kink_signature`]) is
//! retried with a ten-times smaller step down to `1e-7` and skipped if the
//! kink persists. A tensor whose analytic and numeric derivatives all lie
//! below the rounding noise `1e3 · ε · max(1, |f|) / h` of the difference
//! quotient has a true gradient of zero to working precision and is
//! counted as matching.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_STEP: f64 = 1e-7;
pub const MAX_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.checked > 0
    }
}

#[derive(Default)]
struct ErrorAccum {
    max_rel: f64,
    max_abs: f64,
    checked: usize,
    skipped: usize,
}

impl ErrorAccum {
    fn add_tensor(&mut self, pairs: &[(f64, f64)], noise: f64) {
        if pairs.is_empty() {
            return;
        }
        let abs = pairs
            .iter()
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        let scale = pairs
            .iter()
            .map(|(a, n)| a.abs() + n.abs())
            .fold(0.0, f64::max);
        self.checked += pairs.len();
        if scale <= noise {
            self.max_abs = self.max_abs.max(abs);
            return;
        }
        self.max_abs = self.max_abs.max(abs);
        self.max_rel = self.max_rel.max(abs / scale.max(1e-8));
    }

    fn report(self, name: &str, tolerance: f64) -> GradCheckReport {
        GradCheckReport {
            name: name.to_string(),
            max_rel_error: self.max_rel,
            max_abs_error: self.max_abs,
            checked: self.checked,
            skipped: self.skipped,
            tolerance,
        }
    }
}

fn rounding_noise(f: f64, step: f64) -> f64 {
    1e3 * f64::EPSILON * f.abs().max(1.0) / step
}

fn check_step(step: f64) -> Result<()> {
    if !(MIN_STEP..=MAX_STEP).contains(&step) {
        return Err(Error::invalid(format!(
            "finite-difference step {step} outside [{MIN_STEP}, {MAX_STEP}]"
        )));
    }
    Ok(())
}

/// Central difference at one coordinate, shrinking the step while the
/// perturbed evaluations cross a kink. `eval` returns `(value, signature)`.
fn central_difference(
    base_sig: u64,
    step: f64,
    mut eval: impl FnMut(f64) -> Result<(f64, u64)>,
) -> Result<Option<f64>> {
    let mut h = step;
    loop {
        let (fp, sp) = eval(h)?;
        let (fm, sm) = eval(-h)?;
        if sp == base_sig && sm == base_sig {
            return Ok(Some((fp - fm) / (2.0 * h)));
        }
        if h / 10.0 < MIN_STEP * 0.999 {
            return Ok(None);
        }
        h /= 10.0;
    }
}

/// Projection weights turning an arbitrary output into a scalar.
fn projection(shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

/// Check the gradient of `op` with respect to every input tensor.
///
/// `op` records a computation on the tape from the given input vars; its
/// output is reduced to a scalar by a fixed random projection.
pub fn grad_check<F>(
    name: &str,
    op: F,
    inputs: &[Tensor],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_step(step)?;
    let run = |values: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.input(t.clone())).collect();
        let out = op(&mut tape, &vars)?;
        let proj = tape.constant(projection(tape.value(out).shape()));
        let prod = tape.mul(out, proj)?;
        let loss = tape.sum(prod);
        Ok((tape, vars, loss))
    };

    let (tape, vars, loss) = run(inputs)?;
    let base_sig = tape.kink_signature();
    let noise = rounding_noise(tape.value(loss).data()[0], step);
    let grads = tape.backward(loss, &mut ParamSet::new())?;

    let mut acc = ErrorAccum::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut pairs = Vec::with_capacity(inputs[k].numel());
        for j in 0..inputs[k].numel() {
            let orig = inputs[k].data()[j];
            let numeric = central_difference(base_sig, step, |h| {
                work[k].data_mut()[j] = orig + h;
                let (t, _, l) = run(&work)?;
                Ok((t.value(l).data()[0], t.kink_signature()))
            })?;
            work[k].data_mut()[j] = orig;
            match numeric {
                Some(n) => pairs.push((analytic.data()[j], n)),
                None => acc.skipped += 1,
            }
        }
        acc.add_tensor(&pairs, noise);
    }
    Ok(acc.report(name, tolerance))
}

/// Check parameter gradients of a scalar-valued `forward` built from
/// `params`, perturbing every coordinate of every parameter.
pub fn grad_check_params<F>(
    name: &str,
    params: &ParamSet,
    forward: F,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    check_step(step)?;
    let mut base = params.clone();
    base.zero_grad();
    let mut tape = Tape::new();
    let loss = forward(&mut tape, &base)?;
    let base_sig = tape.kink_signature();
    let noise = rounding_noise(tape.value(loss).data()[0], step);
    tape.backward(loss, &mut base)?;

    let mut acc = ErrorAccum::default();
    let mut work = params.clone();
    for id in params.ids() {
        let analytic = base.get(id).grad.clone();
        let mut pairs = Vec::with_capacity(analytic.numel());
        for j in 0..analytic.numel() {
            let orig = params.get(id).value.data()[j];
            let numeric = central_difference(base_sig, step, |h| {
                work.get_mut(id).value.data_mut()[j] = orig + h;
                let mut t = Tape::new();
                let l = forward(&mut t, &work)?;
                Ok((t.value(l).data()[0], t.kink_signature()))
            })?;
            work.get_mut(id).value.data_mut()[j] = orig;
            match numeric {
                Some(n) => pairs.push((analytic.data()[j], n)),
                None => acc.skipped += 1,
            }
        }
        acc.add_tensor(&pairs, noise);
    }
    Ok(acc.report(name, tolerance))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Offsets whose sample positions sit well inside a pixel cell.
fn fractional_offsets(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    Tensor::from_fn(shape, |_| r.gen_range(-1..=1) as f64 + r.gen_range(0.2..0.8))
}

fn projected_sum(t: &mut Tape, y: Var, proj: &Tensor) -> Result<Var> {
    let p = t.constant(proj.clone());
    let m = t.mul(y, p)?;
    Ok(t.sum(m))
}

/// Every differentiable operation and layer, each at its own tolerance:
/// `1e-6` for piecewise-linear and smooth elementwise operations, `1e-4`
/// where batch statistics or bilinear sampling enter.
pub fn standard_suite() -> Result<Vec<GradCheckReport>> {
    use crate::autodiff::{Mode, RunningStats};
    use crate::conform::{record_deform, ConformLayer, OFFSET_CHANNELS};
    use crate::tpg::{compute_prior, record_posterior, TpgConfig};

    const STEP: f64 = 1e-5;
    let mut out = Vec::new();
    let mut r = rng(0x5eed);

    let conv_in = [
        Tensor::randn(&[1, 2, 4, 4], 1.0, &mut r),
        Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r),
        Tensor::randn(&[3], 1.0, &mut r),
    ];
    out.push(grad_check("conv2d", |t, v| t.conv2d(v[0], v[1], v[2], 1), &conv_in, STEP, 1e-6)?);

    let x = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut r);
    out.push(grad_check("relu", |t, v| Ok(t.relu(v[0])), &[x.clone()], STEP, 1e-6)?);
    out.push(grad_check("sigmoid", |t, v| Ok(t.sigmoid(v[0])), &[x], STEP, 1e-6)?);

    let target = Tensor::from_fn(&[1, 1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
    let p = Tensor::uniform(&[1, 1, 4, 4], 0.05, 0.95, &mut r);
    out.push(grad_check("dice_loss", |t, v| t.dice_loss(v[0], &target, 1.0), &[p], STEP, 1e-6)?);

    let bn_in = [
        Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r),
        Tensor::uniform(&[3], 0.5, 1.5, &mut r),
        Tensor::randn(&[3], 1.0, &mut r),
    ];
    out.push(grad_check(
        "batch_norm/train",
        |t, v| t.batch_norm(v[0], v[1], v[2], &mut RunningStats::new(3), Mode::Train),
        &bn_in,
        STEP,
        1e-4,
    )?);
    out.push(grad_check(
        "batch_norm/eval",
        |t, v| {
            let mut stats = RunningStats::new(3);
            stats.mean = vec![0.1, -0.2, 0.3];
            stats.var = vec![0.5, 1.5, 2.0];
            stats.updates = 1;
            t.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Eval)
        },
        &bn_in,
        STEP,
        1e-6,
    )?);

    let ew = [
        Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r),
        Tensor::randn(&[2, 3, 3], 1.0, &mut r),
        Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r),
    ];
    out.push(grad_check(
        "add/mul/scale",
        |t, v| {
            let m = t.mul(v[0], v[1])?;
            let s = t.add(m, v[2])?;
            let p = t.mul(s, v[2])?;
            Ok(t.scale(p, 0.7))
        },
        &ew,
        STEP,
        1e-6,
    )?);

    let layout = [
        Tensor::randn(&[1, 2, 4, 4], 1.0, &mut r),
        Tensor::randn(&[1, 1, 4, 4], 1.0, &mut r),
    ];
    out.push(grad_check(
        "pool/upsample/concat",
        |t, v| {
            let p = t.avg_pool2(v[0])?;
            let u = t.upsample2(p)?;
            t.concat(u, v[1])
        },
        &layout,
        STEP,
        1e-6,
    )?);

    let deform_in = [
        Tensor::randn(&[1, 2, 5, 5], 1.0, &mut r),
        fractional_offsets(&[1, 18, 5, 5], &mut r),
        Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r),
        Tensor::randn(&[3], 1.0, &mut r),
    ];
    out.push(grad_check(
        "deform_conv2d",
        |t, v| t.deform_conv2d(v[0], v[1], v[2], v[3]),
        &deform_in,
        STEP,
        1e-4,
    )?);

    let phi = Tensor::randn(&[1, 2, 6, 6], 1.0, &mut r);
    let prior = compute_prior(&phi, &TpgConfig::default())?.dilated;
    for (name, agg) in [("tpg/aggregated", true), ("tpg/unaggregated", false)] {
        out.push(grad_check(
            name,
            |t, v| record_posterior(t, v[0], &prior, agg),
            &[phi.clone()],
            STEP,
            1e-6,
        )?);
    }

    let mut params = ParamSet::new();
    let layer = ConformLayer::new(&mut params, "c", 2, 3, TpgConfig::default(), &mut r)?;
    params.get_mut(layer.offset_weight).value =
        Tensor::randn(&[OFFSET_CHANNELS, 2, 3, 3], 0.01, &mut r);
    params.get_mut(layer.offset_bias).value = Tensor::uniform(&[OFFSET_CHANNELS], 0.3, 0.7, &mut r);
    let x = Tensor::uniform(&[2, 2, 5, 5], 0.0, 1.0, &mut r);
    let prior = compute_prior(&x, &layer.tpg)?.dilated;
    let pre_in = [
        x.clone(),
        params.get(layer.weight).value.clone(),
        params.get(layer.bias).value.clone(),
        params.get(layer.offset_weight).value.clone(),
        params.get(layer.offset_bias).value.clone(),
    ];
    out.push(grad_check(
        "conformable/pre_norm",
        |t, v| {
            let post = record_posterior(t, v[0], &prior, true)?;
            record_deform(t, post, v[0], v[1], v[2], v[3], v[4])
        },
        &pre_in,
        STEP,
        1e-4,
    )?);
    let proj = Tensor::uniform(&[2, 3, 5, 5], -1.0, 1.0, &mut r);
    for (name, deformable) in [("conformable/layer", false), ("deformable/layer", true)] {
        out.push(grad_check_params(
            name,
            &params,
            |t, p| {
                let mut l = layer.clone();
                let xv = t.constant(x.clone());
                let y = if deformable {
                    l.deformable_forward(t, p, xv, Mode::Train)?
                } else {
                    l.forward_with_prior(t, p, xv, &prior, Mode::Train)?
                };
                projected_sum(t, y, &proj)
            },
            STEP,
            1e-4,
        )?);
    }
    Ok(out)
}
