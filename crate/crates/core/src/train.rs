//! Losses, optimizers, staged training with early stopping, the rejection
//! rule and evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::TinyNet;
use crate::data::{argmax, augment, softmax, tta_aggregate, AugmentConfig, Samples, TtaPlan};
use crate::error::{Error, Result};
use crate::seed::stream;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Mean cross-entropy of `[B, K]` logits.
pub fn crossentropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let loss = tape.softmax_cross_entropy(z, labels)?;
    tape.value(loss).item()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        lr: f64,
    },
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-7;

/// `p ← p − lr·g`.
pub fn sgd_step(param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
    *param = param.zip_map(grad, |p, g| p - lr * g)?;
    Ok(())
}

/// Moment estimates of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u32,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }
}

/// Bias-corrected Adam update with β₁ = 0.9, β₂ = 0.999, ε = 1e-7.
pub fn adam_step(state: &mut AdamState, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
    state.t += 1;
    state.m = state.m.zip_map(grad, |m, g| ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g)?;
    state.v = state.v.zip_map(grad, |v, g| ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g)?;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    let step = state.m.zip_map(&state.v, |m, v| lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS))?;
    *param = param.zip_map(&step, |p, s| p - s)?;
    Ok(())
}

/// Optimizer state over a flat parameter list.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64, momentum: f64, velocity: Vec<Tensor> },
    Adam { lr: f64, states: Vec<AdamState> },
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig, shapes: &[Vec<usize>]) -> Self {
        match *cfg {
            OptimizerConfig::Sgd { lr, momentum } => Optimizer::Sgd {
                lr,
                momentum,
                velocity: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            },
            OptimizerConfig::Adam { lr } => Optimizer::Adam {
                lr,
                states: shapes.iter().map(|s| AdamState::new(s)).collect(),
            },
        }
    }

    /// Updates every parameter whose `mask` entry is true.
    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut Tensor>,
        grads: &[Tensor],
        mask: &[bool],
    ) -> Result<()> {
        for (i, p) in params.enumerate() {
            if !mask[i] {
                continue;
            }
            match self {
                Optimizer::Sgd { lr, momentum, velocity } => {
                    if *momentum == 0.0 {
                        sgd_step(p, &grads[i], *lr)?;
                    } else {
                        let (lr, mu) = (*lr, *momentum);
                        velocity[i] = velocity[i].zip_map(&grads[i], |v, g| mu * v - lr * g)?;
                        *p = p.zip_map(&velocity[i], |a, v| a + v)?;
                    }
                }
                Optimizer::Adam { lr, states } => adam_step(&mut states[i], p, &grads[i], *lr)?,
            }
        }
        Ok(())
    }
}

pub const DEFAULT_MAX_EPOCHS: usize = 500;

fn default_max_epochs() -> usize {
    DEFAULT_MAX_EPOCHS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub name: String,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub patience: usize,
    pub augment: AugmentConfig,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Whether the LHC blocks take part in this stage.
    #[serde(default)]
    pub lhc: bool,
    /// Train only LHC blocks and gates.
    #[serde(default)]
    pub freeze_backbone: bool,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::config(format!(
                "stage {}: batch size, patience and max epochs must be positive",
                self.name
            )));
        }
        let lr = match self.optimizer {
            OptimizerConfig::Sgd { lr, momentum } if (0.0..1.0).contains(&momentum) => lr,
            OptimizerConfig::Adam { lr } => lr,
            OptimizerConfig::Sgd { .. } => {
                return Err(Error::config(format!("stage {}: momentum must be in [0, 1)", self.name)))
            }
        };
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::config(format!("stage {}: learning rate must be positive", self.name)));
        }
        self.augment.validate()
    }
}

/// The three backbone stages followed by LHC training.
pub fn default_stages() -> Vec<StageConfig> {
    let sgd = OptimizerConfig::Sgd { lr: 0.01, momentum: 0.0 };
    let stage = |name: &str, optimizer, batch_size, patience, augment, lhc| StageConfig {
        name: name.into(),
        optimizer,
        batch_size,
        patience,
        augment,
        max_epochs: DEFAULT_MAX_EPOCHS,
        lhc,
        freeze_backbone: false,
    };
    vec![
        stage(
            "stage1",
            OptimizerConfig::Adam { lr: 1e-4 },
            48,
            30,
            AugmentConfig { rotation_deg: 30.0, ..AugmentConfig::NONE },
            false,
        ),
        stage(
            "stage2",
            sgd,
            64,
            10,
            AugmentConfig {
                rotation_deg: 10.0,
                shift_frac: 0.1,
                zoom_frac: 0.1,
                flip: false,
            },
            false,
        ),
        stage("stage3", sgd, 64, 5, AugmentConfig::NONE, false),
        stage("stage4", sgd, 64, 3, AugmentConfig::NONE, true),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `NaN` for epoch 0, which only evaluates the starting weights.
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageHistory {
    pub name: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub stopped_early: bool,
}

impl StageHistory {
    /// Columns: `epoch,train_loss,val_accuracy`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        for r in &self.epochs {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Parameters trained in a stage, in [`crate::backbone::NetParams::named`] order.
pub fn trainable_mask(net: &TinyNet, cfg: &StageConfig) -> Vec<bool> {
    net.params
        .named()
        .into_iter()
        .map(|(name, _)| {
            let attention = name.starts_with("block") || name.starts_with("gate");
            if attention {
                cfg.lhc
            } else {
                !cfg.freeze_backbone
            }
        })
        .collect()
}

/// Loss and gradients over a batch.
pub fn batch_gradients(net: &TinyNet, xs: &[Tensor], labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = net.bind(&mut tape);
    let logits = net.forward_batch(&mut tape, xs, &p)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let grads = tape.backward(loss)?;
    let g = p.iter().map(|&v| grads.get(v)).collect();
    Ok((tape.value(loss).item()?, g))
}

/// Mean loss over a sample set, without augmentation.
pub fn dataset_loss(net: &TinyNet, data: &Samples) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    crossentropy(&net.logits(&data.images)?, &data.labels)
}

pub fn accuracy(net: &TinyNet, data: &Samples) -> Result<f64> {
    Ok(evaluate(net, data, None)?.accuracy)
}

/// One stage: epochs of shuffled, augmented minibatch updates, validation
/// accuracy after each epoch, early stopping with best-weights restore.
///
/// Epoch 0 only records the starting accuracy; the restored weights always
/// come from a trained epoch, the first one if accuracy never improves.
pub fn run_stage(
    net: &mut TinyNet,
    train: &Samples,
    val: &Samples,
    cfg: &StageConfig,
    seed: u64,
) -> Result<StageHistory> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("training or validation set"));
    }
    let enabled_before = net.enabled.clone();
    net.enabled.iter_mut().for_each(|e| *e = cfg.lhc);
    let mask = trainable_mask(net, cfg);
    let shapes: Vec<Vec<usize>> = net.params.iter().map(|t| t.shape().to_vec()).collect();
    let mut opt = Optimizer::new(&cfg.optimizer, &shapes);

    let start_acc = accuracy(net, val)?;
    let mut history = StageHistory {
        name: cfg.name.clone(),
        epochs: vec![EpochRecord {
            epoch: 0,
            train_loss: f64::NAN,
            val_accuracy: start_acc,
        }],
        best_epoch: 0,
        best_val_accuracy: f64::NEG_INFINITY,
        stopped_early: false,
    };
    let mut best = net.params.clone();
    let mut since = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(seed, &[epoch as u64]));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut xs = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut rng = stream(seed, &[epoch as u64, i as u64]);
                xs.push(augment(&train.images[i], &cfg.augment, &mut rng)?);
            }
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let (loss, grads) = batch_gradients(net, &xs, &labels)?;
            total += loss * batch.len() as f64;
            opt.step(net.params.iter_mut(), &grads, &mask)?;
        }
        let val_accuracy = accuracy(net, val)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            val_accuracy,
        });
        if val_accuracy > history.best_val_accuracy {
            history.best_val_accuracy = val_accuracy;
            history.best_epoch = epoch;
            best = net.params.clone();
            since = 0;
        } else {
            since += 1;
            if since >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    net.params = best;
    net.enabled = enabled_before;
    Ok(history)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub epochs: usize,
    /// Full-set loss after each epoch.
    pub losses: Vec<f64>,
    pub accuracy: f64,
}

/// Plain full-set training without validation: stops once the loss falls
/// below `target_loss` or after `max_epochs`.
pub fn fit(
    net: &mut TinyNet,
    data: &Samples,
    optimizer: &OptimizerConfig,
    batch_size: usize,
    max_epochs: usize,
    target_loss: f64,
    seed: u64,
) -> Result<FitReport> {
    if data.is_empty() || batch_size == 0 {
        return Err(Error::Empty("training set or batch"));
    }
    let mask = vec![true; net.params.iter().count()];
    let shapes: Vec<Vec<usize>> = net.params.iter().map(|t| t.shape().to_vec()).collect();
    let mut opt = Optimizer::new(optimizer, &shapes);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::new();
    for epoch in 1..=max_epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(seed, &[epoch as u64]));
        for batch in order.chunks(batch_size) {
            let xs: Vec<Tensor> = batch.iter().map(|&i| data.images[i].clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let (_, grads) = batch_gradients(net, &xs, &labels)?;
            opt.step(net.params.iter_mut(), &grads, &mask)?;
        }
        let loss = dataset_loss(net, data)?;
        losses.push(loss);
        if loss < target_loss {
            break;
        }
    }
    Ok(FitReport {
        epochs: losses.len(),
        losses,
        accuracy: accuracy(net, data)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject,
    /// The trained loss is not finite.
    Divergent,
}

/// Accepts iff `trained_loss < 1.10 · base_loss`.
pub fn rejection_check(trained_loss: f64, base_loss: f64) -> Result<Verdict> {
    if !base_loss.is_finite() {
        return Err(Error::Value(format!("base loss {base_loss} is not finite")));
    }
    Ok(if !trained_loss.is_finite() {
        Verdict::Divergent
    } else if trained_loss < base_loss * 1.10 {
        Verdict::Accept
    } else {
        Verdict::Reject
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolReport {
    pub stages: Vec<StageHistory>,
    /// Training loss of the backbone alone before the first LHC stage.
    pub base_loss: f64,
    pub final_loss: f64,
    pub verdict: Verdict,
}

/// Runs stages in order with per-stage seeds. The rejection rule compares
/// the final training loss with the backbone-only loss taken right before
/// the first stage that trains LHC blocks.
pub fn run_protocol(
    net: &mut TinyNet,
    train: &Samples,
    val: &Samples,
    stages: &[StageConfig],
    seed: u64,
) -> Result<ProtocolReport> {
    let mut histories = Vec::with_capacity(stages.len());
    let mut base_loss = None;
    for (i, stage) in stages.iter().enumerate() {
        if stage.lhc && base_loss.is_none() {
            let mut plain = net.clone();
            plain.enabled.iter_mut().for_each(|e| *e = false);
            base_loss = Some(dataset_loss(&plain, train)?);
        }
        histories.push(run_stage(net, train, val, stage, crate::seed::derive_seed(seed, &[i as u64]))?);
    }
    let final_loss = dataset_loss(net, train)?;
    let base_loss = base_loss.unwrap_or(final_loss);
    Ok(ProtocolReport {
        stages: histories,
        base_loss,
        final_loss,
        verdict: rejection_check(final_loss, base_loss)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Per-sample class probabilities.
    pub probabilities: Vec<Vec<f64>>,
}

/// Accuracy and confusion matrix, optionally through a TTA plan.
pub fn evaluate(net: &TinyNet, data: &Samples, tta: Option<&TtaPlan>) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let k = net.classes();
    let probabilities: Vec<Vec<f64>> = match tta {
        None => {
            let logits = net.logits(&data.images)?;
            logits.data().chunks(k).map(softmax).collect()
        }
        Some(plan) => {
            plan.validate()?;
            let mut out = Vec::with_capacity(data.len());
            for img in &data.images {
                let views = plan
                    .transforms
                    .iter()
                    .map(|t| t.apply(img))
                    .collect::<Result<Vec<_>>>()?;
                let logits = net.logits(&views)?;
                let sets: Vec<Vec<f64>> = logits.data().chunks(k).map(<[f64]>::to_vec).collect();
                out.push(tta_aggregate(&sets, plan)?.probabilities);
            }
            out
        }
    };
    let mut confusion = vec![vec![0; k]; k];
    let mut correct = 0;
    for (p, &label) in probabilities.iter().zip(&data.labels) {
        if label >= k {
            return Err(Error::Label { label, classes: k });
        }
        let pred = argmax(p);
        confusion[label][pred] += 1;
        correct += usize::from(pred == label);
    }
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        confusion,
        probabilities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneSpec;
    use crate::data::synthetic_samples;

    #[test]
    fn crossentropy_examples() {
        let one_hot = Tensor::matrix(&[&[1000.0, 0.0, 0.0]]);
        assert!(crossentropy(&one_hot, &[0]).unwrap().abs() < 1e-12);
        let uniform = Tensor::zeros([2, 7]);
        assert!((crossentropy(&uniform, &[0, 6]).unwrap() - 7f64.ln()).abs() < 1e-12);
        assert!((crossentropy(&uniform, &[0, 6]).unwrap() - 1.945_910_149_055_313).abs() < 1e-12);
        let up = Tensor::matrix(&[&[1.0, 0.5, 0.0]]);
        assert!(crossentropy(&up, &[0]).unwrap() < crossentropy(&Tensor::matrix(&[&[0.5, 0.5, 0.0]]), &[0]).unwrap());
        assert!(matches!(crossentropy(&uniform, &[7, 0]), Err(Error::Label { .. })));
    }

    #[test]
    fn optimizer_examples() {
        let mut p = Tensor::scalar(1.0);
        sgd_step(&mut p, &Tensor::scalar(0.5), 0.01).unwrap();
        assert!((p.item().unwrap() - 0.995).abs() < 1e-15);
        let before = p.clone();
        sgd_step(&mut p, &Tensor::scalar(0.0), 0.01).unwrap();
        assert!(p.bit_eq(&before));

        for g in [1e-3, 0.5, 40.0] {
            let mut q = Tensor::vector(vec![2.0, -1.0]);
            let mut st = AdamState::new(&[2]);
            adam_step(&mut st, &mut q, &Tensor::vector(vec![g, -g]), 1e-4).unwrap();
            // closed form: lr·g / (|g| + ε)
            let expected = 1e-4 * g / (g + ADAM_EPS);
            assert!((2.0 - q.data()[0] - expected).abs() < 1e-15, "{g}");
            assert!((q.data()[1] + 1.0 - expected).abs() < 1e-15);
            assert!((expected - 1e-4).abs() < 1e-4 * 1e-3);
        }
        let mut z = Tensor::scalar(3.0);
        let mut st = AdamState::new(&[]);
        adam_step(&mut st, &mut z, &Tensor::scalar(0.0), 0.1).unwrap();
        assert_eq!(z.item().unwrap(), 3.0);
    }

    #[test]
    fn sgd_descends_a_quadratic_bowl() {
        // f(p) = 2p², curvature 4: any lr < 0.5 decreases f
        let f = |p: f64| 2.0 * p * p;
        for lr in [0.01, 0.1, 0.4] {
            let mut p = Tensor::scalar(1.5);
            let g = Tensor::scalar(4.0 * 1.5);
            sgd_step(&mut p, &g, lr).unwrap();
            assert!(f(p.item().unwrap()) < f(1.5));
        }
        let mut opt = Optimizer::new(&OptimizerConfig::Sgd { lr: 0.1, momentum: 0.9 }, &[vec![]]);
        let mut p = Tensor::scalar(1.0);
        for _ in 0..3 {
            let g = Tensor::scalar(4.0 * p.item().unwrap());
            opt.step(std::iter::once(&mut p), &[g], &[true]).unwrap();
        }
        assert!(f(p.item().unwrap()) < f(1.0));
    }

    #[test]
    fn rejection_boundary() {
        assert_eq!(rejection_check(1.0, 1.0).unwrap(), Verdict::Accept);
        assert_eq!(rejection_check(1.11, 1.0).unwrap(), Verdict::Reject);
        assert_eq!(rejection_check(1.1, 1.0).unwrap(), Verdict::Reject);
        assert_eq!(rejection_check(1.0999999, 1.0).unwrap(), Verdict::Accept);
        assert_eq!(rejection_check(f64::NAN, 1.0).unwrap(), Verdict::Divergent);
        assert!(rejection_check(1.0, f64::NAN).is_err());
    }

    #[test]
    fn default_stage_table() {
        let s = default_stages();
        let summary: Vec<(OptimizerConfig, usize, usize)> =
            s.iter().map(|c| (c.optimizer, c.batch_size, c.patience)).collect();
        let sgd = OptimizerConfig::Sgd { lr: 0.01, momentum: 0.0 };
        assert_eq!(
            summary,
            vec![(OptimizerConfig::Adam { lr: 1e-4 }, 48, 30), (sgd, 64, 10), (sgd, 64, 5), (sgd, 64, 3)]
        );
        assert_eq!(s[0].augment.rotation_deg, 30.0);
        assert_eq!((s[1].augment.rotation_deg, s[1].augment.shift_frac, s[1].augment.zoom_frac), (10.0, 0.1, 0.1));
        assert!(s[2].augment.is_none() && s[3].augment.is_none());
        assert_eq!(s.iter().map(|c| c.lhc).collect::<Vec<_>>(), vec![false, false, false, true]);
        s.iter().for_each(|c| c.validate().unwrap());
    }

    fn small_net(seed: u64) -> TinyNet {
        TinyNet::new(BackboneSpec::tiny([8, 8, 1], 7, seed)).unwrap()
    }

    #[test]
    fn never_improving_stage_keeps_first_epoch() {
        let mut net = small_net(1);
        let data = synthetic_samples(14, [8, 8, 1], 7, 0.05, 2);
        // lr tiny enough that validation accuracy cannot move
        let cfg = StageConfig {
            name: "flat".into(),
            optimizer: OptimizerConfig::Sgd { lr: 1e-12, momentum: 0.0 },
            batch_size: 7,
            patience: 1,
            augment: AugmentConfig::NONE,
            max_epochs: 50,
            lhc: true,
            freeze_backbone: false,
        };
        let h = run_stage(&mut net, &data, &data, &cfg, 3).unwrap();
        assert!(h.stopped_early);
        assert_eq!(h.epochs.len(), 3);
        assert_eq!(h.best_epoch, 1);
        assert_eq!(h.best_val_accuracy, h.epochs[1].val_accuracy);
    }

    #[test]
    fn frozen_backbone_only_moves_attention() {
        let mut net = small_net(4);
        let start = net.params.clone();
        let data = synthetic_samples(14, [8, 8, 1], 7, 0.05, 2);
        let cfg = StageConfig {
            name: "frozen".into(),
            optimizer: OptimizerConfig::Sgd { lr: 0.1, momentum: 0.0 },
            batch_size: 14,
            patience: 1,
            augment: AugmentConfig::NONE,
            max_epochs: 1,
            lhc: true,
            freeze_backbone: true,
        };
        let mask = trainable_mask(&net, &cfg);
        let mut trained = net.clone();
        let (_, grads) = batch_gradients(&trained, &data.images, &data.labels).unwrap();
        let mut opt = Optimizer::new(&cfg.optimizer, &net.params.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>());
        opt.step(trained.params.iter_mut(), &grads, &mask).unwrap();
        assert_eq!(trained.params.stem, start.stem);
        assert_ne!(trained.params.lhc, start.lhc);
        run_stage(&mut net, &data, &data, &cfg, 1).unwrap();
        assert_eq!(net.params.head, start.head);
    }

    #[test]
    fn training_is_reproducible_and_converges() {
        let data = synthetic_samples(28, [8, 8, 1], 7, 0.1, 5);
        let cfg = StageConfig {
            name: "fit".into(),
            optimizer: OptimizerConfig::Adam { lr: 0.01 },
            batch_size: 8,
            patience: 200,
            augment: AugmentConfig::NONE,
            max_epochs: 30,
            lhc: true,
            freeze_backbone: false,
        };
        let mut a = small_net(6);
        let initial = dataset_loss(&a, &data).unwrap();
        let ha = run_stage(&mut a, &data, &data, &cfg, 9).unwrap();
        let mut b = small_net(6);
        let hb = run_stage(&mut b, &data, &data, &cfg, 9).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(format!("{ha:?}"), format!("{hb:?}"));
        assert!(dataset_loss(&a, &data).unwrap() < 0.5 * initial);
        let mut buf = Vec::new();
        ha.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("epoch,train_loss,val_accuracy\n0,NaN,"));
    }

    #[test]
    fn evaluation_bookkeeping() {
        let net = small_net(2);
        let data = synthetic_samples(21, [8, 8, 1], 7, 0.1, 3);
        let e = evaluate(&net, &data, None).unwrap();
        for (k, row) in e.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), data.labels.iter().filter(|&&l| l == k).count());
        }
        // constant prediction on balanced data
        let mut constant = net.clone();
        constant.params.head.weight = Tensor::zeros(constant.params.head.weight.shape());
        constant.params.head.bias = Tensor::vector(vec![0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0]);
        let c = evaluate(&constant, &data, None).unwrap();
        assert!((c.accuracy - 1.0 / 7.0).abs() < 1e-15);

        let plan = TtaPlan::identity();
        let t = evaluate(&net, &data, Some(&plan)).unwrap();
        assert_eq!(t.probabilities, e.probabilities);
        let tiny_plan = crate::data::tta_enumerate(&crate::data::TtaConfig { shift_px: 1.0, ..Default::default() });
        let x = evaluate(&net, &data.subset(&[0, 1]), Some(&tiny_plan)).unwrap();
        let y = evaluate(&net, &data.subset(&[0, 1]), Some(&tiny_plan)).unwrap();
        assert_eq!(x, y);
    }
}
