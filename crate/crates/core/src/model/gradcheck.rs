use crate::data::Prng;
use crate::error::Result;
use crate::ops::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::tensor::Tensor;

use super::arch::ArchitectureSpec;
use super::exec::{backward, forward, predict};
use super::params::{init_params, ParameterStore};

/// Finite-difference check of [`backward`] over the whole network in f64.
///
/// The objective is `sum(u ⊙ forward(x))` with a fixed random `u`. Every
/// parameter tensor and the input are probed; `cfg.max_coords` bounds the
/// coordinates per tensor.
pub fn network_grad_check(
    spec: &ArchitectureSpec,
    input_dims: &[usize],
    seed: u64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut params = init_params::<f64>(spec, seed);
    // Nonzero biases so every bias path is exercised.
    let mut rng = Prng::new(seed ^ 0xb1a5);
    for (name, t) in params.iter_mut() {
        if name.ends_with(".bias") {
            let values = (0..t.len()).map(|_| rng.uniform(-0.1, 0.1)).collect();
            *t = Tensor::from_values(t.dims(), values)?;
        }
    }
    let numel: usize = input_dims.iter().product();
    let x = Tensor::from_values(input_dims, (0..numel).map(|_| rng.next_f64()).collect())?;
    let (y, tape) = forward(spec, &params, &x, true)?;
    let u = Tensor::from_values(y.dims(), (0..y.len()).map(|_| rng.uniform(-1.0, 1.0)).collect())?;
    let grads = backward(&tape, &u)?;

    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut inputs = vec![("input".to_string(), x)];
    let mut analytic = vec![grads.input];
    for ((name, t), (_, g)) in params.iter().zip(grads.params.iter()) {
        inputs.push((name.to_string(), t.clone()));
        analytic.push(g.clone());
    }
    let named: Vec<(&str, Tensor<f64>)> = inputs.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
    grad_check(
        &format!("network {}", spec.id()),
        &named,
        &analytic,
        |v| {
            let mut p = ParameterStore::new();
            for (name, t) in names.iter().zip(&v[1..]) {
                p.insert(name.clone(), t.clone())?;
            }
            let y = predict(spec, &p, &v[0])?;
            Ok(y.data().iter().zip(u.data()).map(|(a, b)| a * b).sum())
        },
        cfg,
    )
}
