//! SGD with momentum under a cosine schedule, per-epoch rotation learning,
//! evaluation and bootstrap ensembles.

mod eval;

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::binary::clip_latent_in_place;
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::model::{build, ArchSpec, Engine, Model, ModelVariant, ParamKind};
use crate::nn::softmax_xent;
use crate::rng::{derive, stream};
use crate::rotation::{cos_phi, flip_fraction, learn_rotation};
use crate::tensor::Tensor;

pub use eval::{argmax, evaluate_with, EvalReport, SnrAccuracy};

const SHUFFLE_STREAM: u64 = 0x5348;
const DROPOUT_STREAM: u64 = 0x4452;
const BAG_STREAM: u64 = 0x4241;
const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Cosine period in epochs; `None` anneals once over all epochs.
    pub restart_period: Option<usize>,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            lr_min: 0.0,
            momentum: 0.9,
            epochs: 200,
            batch_size: 256,
            restart_period: None,
            dropout: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(format!(
                "learning rate {} must be positive",
                self.lr0
            )));
        }
        if !(0.0..=self.lr0).contains(&self.lr_min) {
            return Err(Error::config("minimum learning rate must lie in [0, lr0]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.restart_period == Some(0) {
            return Err(Error::config("restart period must be at least 1 epoch"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// `lr_min + (lr0 - lr_min) (1 + cos(pi t / period)) / 2`.
pub fn cosine_anneal(t: f64, period: f64, lr0: f64, lr_min: f64) -> f64 {
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * t / period).cos())
}

/// Learning rate after `progress` epochs (fractional, so the rate anneals
/// within an epoch too); `t` restarts at every period boundary.
pub fn cosine_lr(progress: f64, cfg: &TrainConfig) -> f64 {
    let period = cfg.restart_period.unwrap_or(cfg.epochs).max(1) as f64;
    cosine_anneal(progress % period, period, cfg.lr0, cfg.lr_min)
}

/// `v <- momentum * v + g; p <- p - lr * v`, then clipping to `[-1, 1]` when
/// `clip` is set.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    clip: bool,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(format!(
            "sgd step: {} params, {} grads, {} velocity entries",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    if clip {
        clip_latent_in_place(params);
    }
    Ok(())
}

/// Momentum buffers for every parameter slice of a model.
#[derive(Debug, Clone)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &mut Model) -> Self {
        Self {
            velocity: model
                .param_sizes()
                .into_iter()
                .map(|n| vec![0.0; n])
                .collect(),
        }
    }

    pub fn step(
        &mut self,
        model: &mut Model,
        grads: &[Vec<f64>],
        lr: f64,
        momentum: f64,
    ) -> Result<()> {
        let params = model.params_mut();
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(Error::shape(
                "gradient list does not match the model parameters",
            ));
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            sgd_momentum_step(
                p.values,
                g,
                v,
                lr,
                momentum,
                p.kind == ParamKind::LatentBinary,
            )?;
        }
        Ok(())
    }
}

/// Rotation diagnostics after an epoch-start solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationStats {
    /// Mean over binarized layers of the post-solve cosine.
    pub mean_cos_phi: f64,
    /// Fraction of all binarized weights whose sign the rotation flips.
    pub flip_fraction: f64,
}

/// Re-learns every layer rotation (warm-started) and reports diagnostics.
/// For unrotated binary models, reports the identity-rotation cosine.
pub fn learn_rotations(model: &mut Model) -> Result<Option<RotationStats>> {
    let mut cos_sum = 0.0;
    let mut layers = 0usize;
    let mut flips = 0.0;
    let mut weights = 0usize;
    for unit in model.units_mut() {
        if !unit.binary {
            continue;
        }
        let (cos, rotated) = match &mut unit.rotation {
            Some(rot) => {
                let out = learn_rotation(&unit.weights, rot)?;
                *rot = out.state;
                (out.cos_phi_end, rot.rotate(&unit.weights)?)
            }
            None => (cos_phi(&unit.weights, &unit.weights)?, unit.weights.clone()),
        };
        cos_sum += cos;
        layers += 1;
        flips += flip_fraction(&unit.weights, &rotated) * unit.weights.len() as f64;
        weights += unit.weights.len();
    }
    Ok((layers > 0).then(|| RotationStats {
        mean_cos_phi: cos_sum / layers as f64,
        flip_fraction: flips / weights as f64,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Rate at the start of the epoch; it anneals further within the epoch.
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub rotation: Option<RotationStats>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str =
        "epoch,lr,loss,train_acc,test_acc,mean_cos_phi,flip_fraction";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.epoch,
                e.lr,
                e.loss,
                e.train_acc,
                opt(e.test_acc),
                opt(e.rotation.map(|r| r.mean_cos_phi)),
                opt(e.rotation.map(|r| r.flip_fraction)),
            ));
        }
        s
    }
}

fn check_dataset(model: &Model, ds: &Dataset) -> Result<()> {
    if ds.num_classes() != model.num_classes() {
        return Err(Error::config(format!(
            "dataset has {} classes but the model predicts {}",
            ds.num_classes(),
            model.num_classes()
        )));
    }
    Ok(())
}

/// Trains `model` in place and returns the per-epoch log. `on_epoch` sees
/// each record as soon as it is complete.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainLog> {
    cfg.validate()?;
    check_dataset(model, train_set)?;
    if let Some(t) = test_set {
        check_dataset(model, t)?;
    }
    if train_set.is_empty() {
        return Err(Error::config("cannot train on an empty dataset"));
    }
    let mut sgd = Sgd::new(model);
    let mut log = TrainLog::default();
    let n = train_set.len();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch as f64, cfg);
        let rotation = if model.variant.binarizes_blocks() {
            learn_rotations(model)?
        } else {
            None
        };

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(cfg.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let mut drop_rng = stream(cfg.seed, &[DROPOUT_STREAM, epoch as u64]);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        let batches = n.div_ceil(cfg.batch_size);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            // Batch statistics of a single sample are degenerate.
            if batch.len() < 2 && n > 1 {
                continue;
            }
            let (x, labels) = train_set.batch(batch);
            let (logits, trace) =
                model.forward_train(&x, cfg.dropout, &mut drop_rng, Engine::Packed)?;
            let (loss, d_logits) = softmax_xent(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Domain(format!(
                    "training loss became {loss} in epoch {epoch}"
                )));
            }
            let grads = model.backward(&trace, &d_logits)?;
            let step_lr = cosine_lr(epoch as f64 + b as f64 / batches as f64, cfg);
            sgd.step(model, &grads.0, step_lr, cfg.momentum)?;
            let k = logits.shape()[1];
            correct += logits
                .data()
                .chunks(k)
                .zip(&labels)
                .filter(|(row, &t)| argmax(row) == t)
                .count();
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let test_acc = match test_set {
            Some(t) => Some(evaluate(model, t)?.accuracy),
            None => None,
        };
        let record = EpochLog {
            epoch,
            lr,
            loss: loss_sum / seen.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            test_acc,
            rotation,
        };
        on_epoch(&record);
        log.epochs.push(record);
    }
    Ok(log)
}

pub fn evaluate(model: &Model, ds: &Dataset) -> Result<EvalReport> {
    check_dataset(model, ds)?;
    evaluate_with(ds, EVAL_BATCH, |x| model.forward(x, Engine::Packed))
}

/// Members sharing one architecture; predictions average their logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<Model>,
}

impl Ensemble {
    pub fn new(members: Vec<Model>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::config("an ensemble needs at least one member"))?;
        for (i, m) in members.iter().enumerate().skip(1) {
            if m.arch != first.arch {
                return Err(Error::config(format!(
                    "ensemble member {i} has a different architecture from member 0"
                )));
            }
        }
        Ok(Self { members })
    }

    pub fn num_classes(&self) -> usize {
        self.members[0].num_classes()
    }

    /// Mean of the members' pre-softmax outputs.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut acc = self.members[0].forward(x, Engine::Packed)?;
        for m in &self.members[1..] {
            let l = m.forward(x, Engine::Packed)?;
            acc = acc.zip_map(&l, |a, b| a + b)?;
        }
        let b = self.members.len() as f64;
        Ok(acc.map(|v| v / b))
    }

    pub fn evaluate(&self, ds: &Dataset) -> Result<EvalReport> {
        if ds.num_classes() != self.num_classes() {
            return Err(Error::config("dataset and ensemble class counts differ"));
        }
        evaluate_with(ds, EVAL_BATCH, |x| self.predict(x))
    }
}

/// Bootstrap resample (with replacement, same size) for bagging member `member`.
pub fn bootstrap_indices(n: usize, seed: u64, member: usize) -> Vec<usize> {
    let mut rng = stream(seed, &[BAG_STREAM, member as u64]);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Trains `members` models on independent bootstrap resamples, each with its
/// own derived seed.
pub fn bag_train(
    members: usize,
    variant: ModelVariant,
    arch: &ArchSpec,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &EpochLog),
) -> Result<(Ensemble, Vec<TrainLog>)> {
    if members < 1 {
        return Err(Error::config("bagging needs at least one member"));
    }
    if train_set.is_empty() {
        return Err(Error::config("cannot train on an empty dataset"));
    }
    let mut models = Vec::with_capacity(members);
    let mut logs = Vec::with_capacity(members);
    for b in 0..members {
        let sample = train_set.select(&bootstrap_indices(train_set.len(), cfg.seed, b));
        let member_cfg = TrainConfig {
            seed: derive(cfg.seed, &[BAG_STREAM, b as u64, 1]),
            ..cfg.clone()
        };
        let mut model = build(variant, arch, member_cfg.seed)?;
        let log = train(&mut model, &sample, test_set, &member_cfg, |e| {
            on_epoch(b, e)
        })?;
        models.push(model);
        logs.push(log);
    }
    Ok((Ensemble::new(models)?, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GenConfig, ModClass};

    #[test]
    fn cosine_schedule_points() {
        let cfg = TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        };
        assert_eq!(cosine_lr(0.0, &cfg), 0.01);
        assert!((cosine_lr(5.0, &cfg) - 0.005).abs() < 1e-15);
        assert!(cosine_lr(5.5, &cfg) < cosine_lr(5.0, &cfg));
        assert!(cosine_anneal(10.0, 10.0, 0.01, 0.0).abs() < 1e-15);
        let restart = TrainConfig {
            restart_period: Some(4),
            ..cfg
        };
        assert_eq!(cosine_lr(4.0, &restart), 0.01);
        assert_eq!(cosine_lr(9.0, &restart), cosine_lr(1.0, &restart));
        assert_eq!(cosine_lr(9.5, &restart), cosine_lr(1.5, &restart));
    }

    #[test]
    fn sgd_cases() {
        let mut p = vec![0.5, -0.2];
        let mut v = vec![0.0; 2];
        sgd_momentum_step(&mut p, &[1.0, -2.0], &mut v, 0.1, 0.0, false).unwrap();
        assert_eq!(p, vec![0.4, 0.0]);

        let mut p = vec![0.3, 0.7];
        let mut v = vec![0.0; 2];
        sgd_momentum_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9, false).unwrap();
        assert_eq!(p, vec![0.3, 0.7]);

        // Hand-unrolled: v1 = g1, p1 = p0 - lr g1; v2 = m g1 + g2, p2 = p1 - lr v2.
        let (p0, g1, g2, lr, m) = (0.25, 0.5, -1.5, 0.01, 0.9);
        let mut p = vec![p0];
        let mut v = vec![0.0];
        sgd_momentum_step(&mut p, &[g1], &mut v, lr, m, false).unwrap();
        sgd_momentum_step(&mut p, &[g2], &mut v, lr, m, false).unwrap();
        let want = p0 - lr * g1 - lr * (m * g1 + g2);
        assert!((p[0] - want).abs() < 1e-12);

        let mut p = vec![0.95];
        sgd_momentum_step(&mut p, &[-10.0], &mut [0.0], 0.1, 0.0, true).unwrap();
        assert_eq!(p, vec![1.0]);
        assert!(sgd_momentum_step(&mut [0.0], &[1.0, 2.0], &mut [0.0], 0.1, 0.0, false).is_err());
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig {
                lr0: 0.0,
                ..ok.clone()
            },
            TrainConfig {
                momentum: 1.0,
                ..ok.clone()
            },
            TrainConfig {
                batch_size: 0,
                ..ok.clone()
            },
            TrainConfig {
                restart_period: Some(0),
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    fn tiny() -> (ArchSpec, Dataset) {
        let mut arch = ArchSpec::with_base_width(2, 2);
        arch.blocks.truncate(3);
        let ds = generate(&GenConfig {
            classes: vec![ModClass::Bpsk, ModClass::Ook],
            snrs: vec![20],
            frames_per_cell: 6,
            seed: 4,
            ..GenConfig::default()
        })
        .unwrap();
        (arch, ds)
    }

    #[test]
    fn class_mismatch_and_empty_data_are_rejected() {
        let (arch, ds) = tiny();
        let mut m = build(
            ModelVariant::Real,
            &ArchSpec {
                num_classes: 3,
                ..arch.clone()
            },
            0,
        )
        .unwrap();
        assert!(train(&mut m, &ds, None, &TrainConfig::default(), |_| {}).is_err());
        let mut m = build(ModelVariant::Real, &arch, 0).unwrap();
        let empty = ds.select(&[]);
        assert!(train(&mut m, &empty, None, &TrainConfig::default(), |_| {}).is_err());
        assert!(evaluate(&m, &empty).is_err());
        assert!(bag_train(
            0,
            ModelVariant::Real,
            &arch,
            &ds,
            None,
            &TrainConfig::default(),
            |_, _| {}
        )
        .is_err());
    }

    #[test]
    fn zero_learning_rate_only_moves_batch_norm_statistics() {
        let (arch, ds) = tiny();
        let mut m = build(ModelVariant::Rbnn, &arch, 1).unwrap();
        let before = m.clone();
        let cfg = TrainConfig {
            lr0: f64::MIN_POSITIVE,
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        // lr0 must be positive; the smallest normal value leaves every weight unchanged.
        train(&mut m, &ds, None, &cfg, |_| {}).unwrap();
        for (a, b) in m.units().zip(before.units()) {
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.bn.gamma, b.bn.gamma);
        }
        assert_eq!(m.head.weights, before.head.weights);
    }

    #[test]
    fn latent_weights_stay_clipped() {
        let (arch, ds) = tiny();
        for v in [ModelVariant::Bnn, ModelVariant::Rbnn] {
            let mut m = build(v, &arch, 2).unwrap();
            let cfg = TrainConfig {
                lr0: 5.0,
                epochs: 2,
                batch_size: 4,
                ..TrainConfig::default()
            };
            train(&mut m, &ds, None, &cfg, |_| {}).unwrap();
            for p in m.params_mut() {
                if p.kind == ParamKind::LatentBinary {
                    assert!(p.values.iter().all(|x| x.abs() <= 1.0));
                }
            }
        }
    }

    #[test]
    fn ensemble_of_copies_matches_member() {
        let (arch, ds) = tiny();
        let m = build(ModelVariant::Real, &arch, 3).unwrap();
        let (x, _) = ds.batch(&[0, 1, 2]);
        let one = Ensemble::new(vec![m.clone()]).unwrap();
        assert_eq!(
            one.predict(&x).unwrap(),
            m.forward(&x, Engine::Packed).unwrap()
        );
        let four = Ensemble::new(vec![m.clone(); 4]).unwrap();
        let a = four.predict(&x).unwrap();
        let b = m.forward(&x, Engine::Packed).unwrap();
        // Sums of four equal values divided by four are exact in binary floating point.
        assert_eq!(a, b);
        let other = build(
            ModelVariant::Real,
            &ArchSpec {
                num_classes: 3,
                ..arch
            },
            0,
        )
        .unwrap();
        assert!(Ensemble::new(vec![m, other]).is_err());
        assert!(Ensemble::new(vec![]).is_err());
    }

    #[test]
    fn bootstrap_is_with_replacement_and_seeded() {
        let a = bootstrap_indices(1000, 5, 0);
        assert_eq!(a, bootstrap_indices(1000, 5, 0));
        assert_ne!(a, bootstrap_indices(1000, 5, 1));
        let mut u = a.clone();
        u.sort();
        u.dedup();
        // Expected distinct fraction is 1 - 1/e.
        assert!((u.len() as f64 / 1000.0 - 0.632).abs() < 0.05);
    }
}
