//! Soft Dice loss, Adam and the epoch loop.

use std::fmt::Write as _;
use std::time::Instant;

use crate::data::{batch_indices, stack_samples, Dataset, Prng, Split};
use crate::error::{Error, Result};
use crate::metrics::{argmax_mask, confusion, dice};
use crate::model::{backward, forward, init_params, predict, ArchitectureSpec, ParameterStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Expected square image extent; samples of another size are rejected.
    pub input_size: usize,
    pub initial_lr: f64,
    pub lr_decay: f64,
    /// Optimizer steps between learning-rate decays.
    pub decay_every: u64,
    pub epochs: usize,
    pub seed: u64,
    /// Soft Dice smoothing ε.
    pub dice_eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            input_size: 256,
            initial_lr: 1e-4,
            lr_decay: 0.9,
            decay_every: 2000,
            epochs: 100,
            seed: 42,
            dice_eps: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

/// Epoch count used by the command-line front end.
pub const DESK_EPOCHS: usize = 15;

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if !(self.dice_eps > 0.0) {
            return bad("dice_eps must be > 0");
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad("initial_lr must be positive");
        }
        if self.decay_every == 0 {
            return bad("decay_every must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must be in [0, 1) and eps > 0");
        }
        Ok(())
    }
}

/// `initial_lr · decay^⌊step / decay_every⌋`
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let k = (step / cfg.decay_every) as i32;
    cfg.initial_lr * cfg.lr_decay.powi(k)
}

/// Batch-mean soft Dice loss on the foreground channel of `prob`
/// `(N, 2, H, W)` against binary `target` `(N, H, W)`.
///
/// Returns the loss and its gradient with respect to `prob` (zero on the
/// background channel).
pub fn soft_dice_loss<T: Element>(prob: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<(f64, Tensor<T>)> {
    let (n, c, h, w) = prob.shape().nchw()?;
    if c != 2 || target.dims() != [n, h, w] {
        return Err(Error::shape(format!(
            "soft Dice needs prob (N, 2, H, W) and target (N, H, W), got {} and {}",
            prob.shape(),
            target.shape()
        )));
    }
    let plane = h * w;
    let mut grad = vec![T::zero(); prob.len()];
    let mut total = 0.0;
    for i in 0..n {
        let p = &prob.data()[(2 * i + 1) * plane..(2 * i + 2) * plane];
        let g = &target.data()[i * plane..(i + 1) * plane];
        let (mut inter, mut sp, mut sg) = (0.0f64, 0.0f64, 0.0f64);
        for (&pv, &gv) in p.iter().zip(g) {
            let (pv, gv) = (pv.as_f64(), gv.as_f64());
            inter += pv * gv;
            sp += pv;
            sg += gv;
        }
        let num = 2.0 * inter + eps;
        let den = sp + sg + eps;
        total += 1.0 - num / den;
        let dst = &mut grad[(2 * i + 1) * plane..(2 * i + 2) * plane];
        for (d, &gv) in dst.iter_mut().zip(g) {
            let dl = -(2.0 * gv.as_f64() * den - num) / (den * den) / n as f64;
            *d = T::of_f64(dl);
        }
    }
    Ok((total / n as f64, Tensor::from_values(prob.dims(), grad)?))
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T: Element = f32> {
    pub m: ParameterStore<T>,
    pub v: ParameterStore<T>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParameterStore<T>) -> Self {
        AdamState { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }
}

/// One bias-corrected Adam update in parameter order.
pub fn adam_step<T: Element>(
    params: &mut ParameterStore<T>,
    grads: &ParameterStore<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for (name, g) in grads.iter() {
        if !g.all_finite() {
            return Err(Error::NonFinite { location: format!("gradient of {name}") });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((name, p), (_, g)) in params.iter_mut().zip(grads.iter()) {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!("gradient of {name} is {}, parameter is {}", g.shape(), p.shape())));
        }
        let m = state.m.get_mut(name).expect("state mirrors params").data_mut();
        let v = state.v.get_mut(name).expect("state mirrors params").data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            let gv = gv.as_f64();
            let m1 = b1 * mv.as_f64() + (1.0 - b1) * gv;
            let v1 = b2 * vv.as_f64() + (1.0 - b2) * gv * gv;
            *mv = T::of_f64(m1);
            *vv = T::of_f64(v1);
            let update = lr * (m1 / c1) / ((v1 / c2).sqrt() + cfg.adam_eps);
            *pv = T::of_f64(pv.as_f64() - update);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// Zero-based optimizer step; the learning rate is `lr_at(step)`.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean per-image Dice on the validation split, if it is non-empty.
    pub val_dice: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were retained.
    pub best_epoch: usize,
}

impl TrainLog {
    /// `step\tlr\tloss` rows, then `epoch\ttrain_loss\tval_dice` rows.
    /// Wall-clock times are left out so identical runs give identical logs.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("step\tlr\tloss\n");
        for r in &self.steps {
            let _ = writeln!(s, "{}\t{:e}\t{:.9}", r.step, r.lr, r.loss);
        }
        s.push_str("epoch\ttrain_loss\tval_dice\n");
        for e in &self.epochs {
            match e.val_dice {
                Some(d) => writeln!(s, "{}\t{:.9}\t{:.6}", e.epoch, e.train_loss, d),
                None => writeln!(s, "{}\t{:.9}\t-", e.epoch, e.train_loss),
            }
            .expect("writing to a String");
        }
        s
    }

    pub fn best_val_dice(&self) -> Option<f64> {
        self.epochs.get(self.best_epoch.checked_sub(1)?).and_then(|e| e.val_dice)
    }
}

/// Mean per-image Dice of argmax predictions over `indices`.
pub fn evaluate_dice(
    spec: &ArchitectureSpec,
    params: &ParameterStore<f32>,
    data: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = stack_samples(data, chunk)?;
        let prob = predict(spec, params, &batch.images)?;
        let pred = argmax_mask(&prob, 1)?;
        let (_, h, w) = (pred.dims()[0], pred.dims()[1], pred.dims()[2]);
        for i in 0..chunk.len() {
            let p = Tensor::from_values(&[h, w], pred.data()[i * h * w..(i + 1) * h * w].to_vec())?;
            let r = Tensor::from_values(&[h, w], batch.masks.data()[i * h * w..(i + 1) * h * w].to_vec())?;
            sum += dice(&confusion(&p, &r)?);
        }
    }
    Ok(sum / indices.len() as f64)
}

/// Shuffling seed of an epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    Prng::derive(seed, 0x5348_5546_0000_0000 | epoch as u64)
}

/// Trains from `init_params(spec, cfg.seed)` and returns the parameters of
/// the epoch with the best validation Dice (the last epoch if there is no
/// validation split). `on_epoch` is called after every epoch.
pub fn train(
    spec: &ArchitectureSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ParameterStore<f32>, TrainLog)> {
    cfg.validate()?;
    let train_idx = data.indices(Split::Train);
    let val_idx = data.indices(Split::Val);
    if train_idx.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    if let Some(s) = data.samples().iter().find(|s| s.height() != cfg.input_size || s.width() != cfg.input_size) {
        return Err(Error::shape(format!(
            "sample {} is {}x{}, expected input size {}",
            s.id,
            s.height(),
            s.width(),
            cfg.input_size
        )));
    }

    let mut params = init_params::<f32>(spec, cfg.seed);
    let mut adam = AdamState::new(&params);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ParameterStore<f32>)> = None;
    let mut step = 0u64;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let groups = batch_indices(&train_idx, cfg.batch_size, epoch_seed(cfg.seed, epoch))?;
        let mut loss_sum = 0.0;
        for (b, group) in groups.iter().enumerate() {
            let context = |e: Error| Error::InvalidArgument(format!("epoch {epoch} batch {b}: {e}"));
            let batch = stack_samples(data, group)?;
            let (prob, tape) = forward(spec, &params, &batch.images, true).map_err(|e| match e {
                e @ Error::NonFinite { .. } => e,
                e => context(e),
            })?;
            let (loss, grad) = soft_dice_loss(&prob, &batch.masks, cfg.dice_eps).map_err(context)?;
            let grads = backward(&tape, &grad)?;
            drop(tape);
            let lr = lr_at(step, cfg);
            adam_step(&mut params, &grads.params, &mut adam, lr, cfg)?;
            log.steps.push(StepRecord { step, lr, loss });
            loss_sum += loss;
            step += 1;
        }
        let val_dice =
            if val_idx.is_empty() { None } else { Some(evaluate_dice(spec, &params, data, &val_idx, cfg.batch_size)?) };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / groups.len() as f64,
            val_dice,
            seconds: started.elapsed().as_secs_f64(),
        };
        let improved = match (val_dice, &best) {
            (None, _) | (_, None) => true,
            (Some(d), Some((b, _))) => d > *b,
        };
        if improved {
            best = Some((val_dice.unwrap_or(f64::NEG_INFINITY), params.clone()));
            log.best_epoch = epoch;
        }
        log.epochs.push(record);
        on_epoch(&record);
    }
    let (_, best_params) = best.expect("at least one epoch ran");
    Ok((best_params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantoms, split};
    use crate::model::build_rfbsnet_desk;
    use crate::ops::{grad_check, GradCheckConfig};

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-4);
        assert_eq!(lr_at(1999, &cfg), 1e-4);
        assert!((lr_at(2000, &cfg) - 9e-5).abs() < 1e-20);
        assert!((lr_at(4000, &cfg) - 8.1e-5).abs() < 1e-20);
        assert_eq!(lr_at(6000, &cfg), 1e-4 * 0.9f64.powi(3));
        let mut prev = f64::INFINITY;
        for s in (0..20_000).step_by(500) {
            assert!(lr_at(s, &cfg) <= prev);
            prev = lr_at(s, &cfg);
        }
    }

    fn maps(p: &[f64], g: &[f64]) -> (Tensor<f64>, Tensor<f64>) {
        let n = p.len();
        let mut data: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
        data.extend_from_slice(p);
        (Tensor::from_values(&[1, 2, 1, n], data).unwrap(), Tensor::from_values(&[1, 1, n], g.to_vec()).unwrap())
    }

    #[test]
    fn dice_loss_closed_forms() {
        let (p, g) = maps(&[1.0, 0.0, 1.0, 0.0], &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(soft_dice_loss(&p, &g, 1.0).unwrap().0, 0.0);
        let (p, g) = maps(&[0.0; 4], &[0.0; 4]);
        assert_eq!(soft_dice_loss(&p, &g, 1.0).unwrap().0, 0.0);
        // 2·(0.5·N/2) / (0.5·N + N/2) = 0.5 as ε → 0
        let (p, g) = maps(&[0.5; 1000], &[[1.0, 0.0]; 500].concat());
        let (loss, _) = soft_dice_loss(&p, &g, 1e-12).unwrap();
        assert!((loss - 0.5).abs() < 1e-12);
        assert!(soft_dice_loss(&p, &Tensor::<f64>::zeros(&[1, 1, 3]).unwrap(), 1.0).is_err());
    }

    #[test]
    fn dice_loss_gradient_matches_finite_differences() {
        let mut rng = Prng::new(11);
        let n = 2 * 2 * 3 * 3;
        let prob = Tensor::from_values(&[2, 2, 3, 3], (0..n).map(|_| rng.uniform(0.05, 0.95)).collect()).unwrap();
        let target =
            Tensor::from_values(&[2, 3, 3], (0..18).map(|_| (rng.next_f64() < 0.5) as u8 as f64).collect()).unwrap();
        let (_, grad) = soft_dice_loss(&prob, &target, 1.0).unwrap();
        let report = grad_check(
            "soft_dice_loss",
            &[("prob", prob)],
            &[grad],
            |v| soft_dice_loss(&v[0], &target, 1.0).map(|(l, _)| l),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let cfg = TrainConfig::default();
        let mut params = ParameterStore::<f64>::new();
        params.insert("w", Tensor::from_values(&[1], vec![1.0]).unwrap()).unwrap();
        let mut grads = ParameterStore::new();
        grads.insert("w", Tensor::from_values(&[1], vec![0.1]).unwrap()).unwrap();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 1e-4, &cfg).unwrap();
        let expected = 1.0 - 1e-4 * 0.1 / (0.1 + 1e-8);
        assert!((params.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
        assert_eq!(state.t, 1);

        let zero = grads.zeros_like();
        let mut fresh = AdamState::new(&params);
        let before = params.clone();
        adam_step(&mut params, &zero, &mut fresh, 1e-4, &cfg).unwrap();
        assert_eq!(params, before);

        let mut nan = grads.clone();
        *nan.get_mut("w").unwrap() = Tensor::from_values(&[1], vec![f64::NAN]).unwrap();
        assert!(matches!(adam_step(&mut params, &nan, &mut fresh, 1e-4, &cfg), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn epoch_of_sixteen_images_is_two_steps_and_deterministic() {
        let spec = build_rfbsnet_desk(1, 2).unwrap();
        let data = split(generate_phantoms(20, 64, 42).unwrap(), 0.8, 42).unwrap();
        let cfg = TrainConfig { input_size: 64, epochs: 1, ..TrainConfig::default() };
        let (pa, la) = train(&spec, &data, &cfg, |_| {}).unwrap();
        let (pb, lb) = train(&spec, &data, &cfg, |_| {}).unwrap();
        assert_eq!(la.steps.len(), 2);
        assert_eq!(la.to_tsv(), lb.to_tsv());
        assert_eq!(pa, pb);
        assert!(la.epochs[0].val_dice.is_some());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr_decay: 1.5, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { dice_eps: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
