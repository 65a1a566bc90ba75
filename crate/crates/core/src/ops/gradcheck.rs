//! Central finite-difference gradient checking in f64.

use std::fmt;

use crate::data::Prng;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{
    conv2d, conv2d_vjp, maxpool2x2, maxpool2x2_vjp, nearest_upsample2x, nearest_upsample2x_vjp, relu, relu_vjp,
    softmax_channels, softmax_channels_vjp, transposed_conv2d, transposed_conv2d_vjp, Conv2dParams,
};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Upper bound on coordinates probed per input; `None` probes all.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, tolerance: 1e-6, max_coords: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputError {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub per_input: Vec<InputError>,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} max_rel_err={:.3e} tol={:.0e} {}",
            self.op,
            self.max_rel_error,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" }
        )?;
        for e in &self.per_input {
            write!(f, "\n    {:<24} {:.3e} ({} coords)", e.name, e.max_rel_error, e.checked)?;
        }
        Ok(())
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn probe_indices(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < len => (0..k).map(|i| i * len / k).collect(),
        _ => (0..len).collect(),
    }
}

/// Compares `analytic[i]` (the gradient of `objective` with respect to
/// `inputs[i]`) against central differences.
pub fn grad_check<F>(
    op: &str,
    inputs: &[(&str, Tensor<f64>)],
    analytic: &[Tensor<f64>],
    objective: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    if inputs.len() != analytic.len() {
        return Err(Error::InvalidArgument(format!(
            "{op}: {} inputs but {} analytic gradients",
            inputs.len(),
            analytic.len()
        )));
    }
    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut per_input = Vec::with_capacity(inputs.len());
    for (slot, ((name, _), grad)) in inputs.iter().zip(analytic).enumerate() {
        if grad.shape() != values[slot].shape() {
            return Err(Error::shape(format!(
                "{op}/{name}: gradient shape {} vs input {}",
                grad.shape(),
                values[slot].shape()
            )));
        }
        if !grad.all_finite() {
            return Err(Error::NonFinite { location: format!("{op}/{name} analytic gradient") });
        }
        let coords = probe_indices(grad.len(), cfg.max_coords);
        let mut worst = 0.0f64;
        for &i in &coords {
            let original = values[slot].data()[i];
            values[slot].data_mut()[i] = original + cfg.step;
            let plus = objective(&values)?;
            values[slot].data_mut()[i] = original - cfg.step;
            let minus = objective(&values)?;
            values[slot].data_mut()[i] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite { location: format!("{op}/{name}[{i}] objective") });
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
        per_input.push(InputError { name: name.to_string(), max_rel_error: worst, checked: coords.len() });
    }
    let max_rel_error = per_input.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        op: op.to_string(),
        max_rel_error,
        tolerance: cfg.tolerance,
        pass: max_rel_error <= cfg.tolerance,
        per_input,
    })
}

fn random(dims: &[usize], rng: &mut Prng) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    Tensor::from_values(dims, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).expect("valid dims")
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Runs the finite-difference check over every layer primitive. With
/// `perturb` set, the analytic conv weight gradient is scaled by 1.1 so the
/// conv checks must fail.
pub fn op_suite(tolerance: f64, perturb: bool) -> Result<Vec<GradCheckReport>> {
    let cfg = GradCheckConfig { tolerance, ..GradCheckConfig::default() };
    let mut rng = Prng::new(0x5eed);
    let mut reports = Vec::new();

    for &(k, s, pad) in &[(3usize, 2usize, 1usize), (3, 1, 1), (1, 1, 0)] {
        let x = random(&[1, 2, 5, 5], &mut rng);
        let w = random(&[3, 2, k, k], &mut rng);
        let b = random(&[3], &mut rng);
        let p = Conv2dParams::new(w.clone(), b.clone(), s, pad)?;
        let up = random(conv2d(&x, &p)?.dims(), &mut rng);
        let (dx, mut dw, db) = conv2d_vjp(&x, &p, &up)?;
        if perturb {
            dw = dw.map(|v| v * 1.1);
        }
        reports.push(grad_check(
            &format!("conv2d k{k} s{s} p{pad}"),
            &[("x", x), ("weight", w), ("bias", b)],
            &[dx, dw, db],
            |v| Ok(dot(&conv2d(&v[0], &Conv2dParams::new(v[1].clone(), v[2].clone(), s, pad)?)?, &up)),
            &cfg,
        )?);
    }

    {
        let x = random(&[1, 3, 3, 3], &mut rng);
        let w = random(&[3, 2, 2, 2], &mut rng);
        let b = random(&[2], &mut rng);
        let p = Conv2dParams::new(w.clone(), b.clone(), 2, 0)?;
        let up = random(&[1, 2, 6, 6], &mut rng);
        let (dx, dw, db) = transposed_conv2d_vjp(&x, &p, &up)?;
        reports.push(grad_check(
            "transposed_conv2d k2 s2",
            &[("x", x), ("weight", w), ("bias", b)],
            &[dx, dw, db],
            |v| Ok(dot(&transposed_conv2d(&v[0], &Conv2dParams::new(v[1].clone(), v[2].clone(), 2, 0)?)?, &up)),
            &cfg,
        )?);
    }

    {
        let x = random(&[1, 2, 4, 4], &mut rng);
        let up = random(&[1, 2, 2, 2], &mut rng);
        let (_, idx) = maxpool2x2(&x)?;
        let dx = maxpool2x2_vjp(&idx, &up)?;
        reports.push(grad_check("maxpool2x2", &[("x", x)], &[dx], |v| Ok(dot(&maxpool2x2(&v[0])?.0, &up)), &cfg)?);
    }

    {
        // Magnitudes bounded away from the kink at zero.
        let x = random(&[1, 2, 4, 4], &mut rng).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 });
        let up = random(&[1, 2, 4, 4], &mut rng);
        let dx = relu_vjp(&x, &up)?;
        reports.push(grad_check("relu", &[("x", x)], &[dx], |v| Ok(dot(&relu(&v[0]), &up)), &cfg)?);
    }

    {
        let x = random(&[1, 2, 3, 3], &mut rng);
        let up = random(&[1, 2, 6, 6], &mut rng);
        let dx = nearest_upsample2x_vjp(&up)?;
        reports.push(grad_check(
            "nearest_upsample2x",
            &[("x", x)],
            &[dx],
            |v| Ok(dot(&nearest_upsample2x(&v[0])?, &up)),
            &cfg,
        )?);
    }

    {
        let x = random(&[1, 2, 3, 3], &mut rng);
        let up = random(&[1, 2, 3, 3], &mut rng);
        let dx = softmax_channels_vjp(&softmax_channels(&x)?, &up)?;
        reports.push(grad_check(
            "softmax_channels",
            &[("x", x)],
            &[dx],
            |v| Ok(dot(&softmax_channels(&v[0])?, &up)),
            &cfg,
        )?);
    }

    Ok(reports)
}
