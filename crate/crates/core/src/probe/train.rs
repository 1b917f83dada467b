//! Mini-batch SGD for the sigmoid heads and the distillation projector.
//!
//! Plain SGD (no momentum, no weight decay), zero initialization, per-batch
//! mean loss, linear warmup over the first `warmup_iters` iterations and a
//! step decay at each listed epoch. Shuffling comes from a ChaCha8 stream
//! seeded by `SgdSchedule::seed`; within a batch gradients accumulate in batch
//! order, so results are bitwise reproducible.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::focal::{focal_term, FocalLossParams};
use super::head::{ClassifierHead, DistillationProjector};
use crate::datastore::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Class(u32),
    /// All-zero target vector.
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSample {
    pub proposal: usize,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdSchedule {
    pub lr: f64,
    pub epochs: usize,
    /// 0-based epochs from which the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub warmup_iters: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SgdSchedule {
    fn default() -> Self {
        Self::base()
    }
}

impl SgdSchedule {
    /// Base-class pretraining: lr 0.02, 20 epochs, x0.1 at 16 and 19, 500 warmup iterations.
    pub fn base() -> Self {
        Self {
            lr: 0.02,
            epochs: 20,
            decay_epochs: vec![16, 19],
            decay_factor: 0.1,
            warmup_iters: 500,
            batch_size: 64,
            seed: 0,
        }
    }

    /// Distillation projector; trained jointly with the base head, so it
    /// shares the base schedule.
    pub fn distill() -> Self {
        Self::base()
    }

    /// Novel probe: lr 0.01, 12 epochs, x0.1 at 8 and 11, no warmup.
    pub fn probe() -> Self {
        Self {
            lr: 0.01,
            epochs: 12,
            decay_epochs: vec![8, 11],
            decay_factor: 0.1,
            warmup_iters: 0,
            batch_size: 64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::range("lr", format!("{} must be positive", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::range("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::range("batch_size", "must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(Error::range("decay_factor", format!("{} must be positive", self.decay_factor)));
        }
        if self.decay_epochs.iter().any(|&e| e == 0 || e >= self.epochs)
            || self.decay_epochs.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::range(
                "decay_epochs",
                format!("{:?} must be strictly increasing within (0, {})", self.decay_epochs, self.epochs),
            ));
        }
        Ok(())
    }

    /// Learning rate for global iteration `iter` inside `epoch`.
    pub fn lr_at(&self, epoch: usize, iter: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        let mut lr = self.lr * self.decay_factor.powi(decays as i32);
        if iter < self.warmup_iters {
            lr *= (iter + 1) as f64 / self.warmup_iters as f64;
        }
        lr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedHead {
    pub head: ClassifierHead,
    /// Mean focal loss over all samples at the end of each epoch.
    pub epoch_losses: Vec<f64>,
    pub initial_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedProjector {
    pub projector: DistillationProjector,
    /// Mean per-sample L1 distance at the end of each epoch.
    pub epoch_losses: Vec<f64>,
    pub initial_loss: f64,
}

pub fn train_classifier_head(
    dataset: &Dataset,
    samples: &[TrainSample],
    class_ids: &[u32],
    params: FocalLossParams,
    schedule: &SgdSchedule,
) -> Result<ClassifierHead> {
    train_classifier_head_with_history(dataset, samples, class_ids, params, schedule).map(|t| t.head)
}

struct LinearParams {
    rows: usize,
    cols: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl LinearParams {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            w: vec![0.0; rows * cols],
            b: vec![0.0; rows],
        }
    }

    fn forward(&self, f: &[f32], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            *o = row.iter().zip(f).map(|(&w, &x)| w * x as f64).sum::<f64>() + self.b[r];
        }
    }

    fn to_f32(&self) -> (Vec<f32>, Vec<f32>) {
        (
            self.w.iter().map(|&v| v as f32).collect(),
            self.b.iter().map(|&v| v as f32).collect(),
        )
    }
}

/// Accumulates `g ⊗ f` into the gradient buffers.
fn accumulate(gw: &mut [f64], gb: &mut [f64], g: &[f64], f: &[f32], cols: usize) {
    for (r, &gr) in g.iter().enumerate() {
        if gr == 0.0 {
            continue;
        }
        gb[r] += gr;
        for (acc, &x) in gw[r * cols..(r + 1) * cols].iter_mut().zip(f) {
            *acc += gr * x as f64;
        }
    }
}

fn sgd_step(p: &mut LinearParams, gw: &[f64], gb: &[f64], scale: f64) {
    for (w, g) in p.w.iter_mut().zip(gw) {
        *w -= scale * g;
    }
    for (b, g) in p.b.iter_mut().zip(gb) {
        *b -= scale * g;
    }
}

/// Runs the shared epoch/batch loop. `grad` adds one sample's gradient with
/// respect to the outputs into its buffer and returns that sample's loss.
fn run_sgd<'a, Fe, F>(
    p: &mut LinearParams,
    n: usize,
    schedule: &SgdSchedule,
    feature: Fe,
    loss_grad: F,
) -> (f64, Vec<f64>)
where
    Fe: Fn(usize) -> &'a [f32],
    F: Fn(usize, &[f64], &mut [f64]) -> f64,
{
    let rows = p.rows;
    let cols = p.cols;
    let mut out = vec![0.0; rows];
    let mut g = vec![0.0; rows];
    let mean_loss = |p: &LinearParams, out: &mut [f64], g: &mut [f64]| {
        let mut total = 0.0;
        for i in 0..n {
            p.forward(feature(i), out);
            total += loss_grad(i, out, g);
        }
        total / n as f64
    };

    let initial = mean_loss(p, &mut out, &mut g);
    let mut history = Vec::with_capacity(schedule.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut gw = vec![0.0; rows * cols];
    let mut gb = vec![0.0; rows];
    let mut iter = 0usize;

    for epoch in 0..schedule.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(schedule.batch_size) {
            gw.iter_mut().for_each(|v| *v = 0.0);
            gb.iter_mut().for_each(|v| *v = 0.0);
            for &i in batch {
                let f = feature(i);
                p.forward(f, &mut out);
                loss_grad(i, &out, &mut g);
                accumulate(&mut gw, &mut gb, &g, f, cols);
            }
            let scale = schedule.lr_at(epoch, iter) / batch.len() as f64;
            sgd_step(p, &gw, &gb, scale);
            iter += 1;
        }
        history.push(mean_loss(p, &mut out, &mut g));
    }
    (initial, history)
}

/// Trains a zero-initialized sigmoid head over exactly `class_ids`.
pub fn train_classifier_head_with_history(
    dataset: &Dataset,
    samples: &[TrainSample],
    class_ids: &[u32],
    params: FocalLossParams,
    schedule: &SgdSchedule,
) -> Result<TrainedHead> {
    if samples.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    params.validate()?;
    schedule.validate()?;

    // Target column per sample; None for negatives.
    let mut columns = Vec::with_capacity(samples.len());
    for s in samples {
        if s.proposal >= dataset.proposals.len() {
            return Err(Error::DanglingReference(format!("sample references proposal {}", s.proposal)));
        }
        columns.push(match s.target {
            Target::Negative => None,
            Target::Class(c) => Some(
                class_ids
                    .iter()
                    .position(|&id| id == c)
                    .ok_or(Error::UnknownClassInTargets(c))?,
            ),
        });
    }

    let d_cls = dataset.d_cls;
    let mut p = LinearParams::zeros(class_ids.len(), d_cls);
    let feature = |i: usize| dataset.proposals[samples[i].proposal].f_cls.as_slice();
    let loss_grad = |i: usize, logits: &[f64], g: &mut [f64]| {
        let mut loss = 0.0;
        for (c, (&x, gc)) in logits.iter().zip(g.iter_mut()).enumerate() {
            let (l, d) = focal_term(x, columns[i] == Some(c), params);
            loss += l;
            *gc = d;
        }
        loss
    };
    let (initial_loss, epoch_losses) = run_sgd(&mut p, samples.len(), schedule, feature, loss_grad);

    let (w, b) = p.to_f32();
    Ok(TrainedHead {
        head: ClassifierHead::new(class_ids.to_vec(), d_cls, w, b)?,
        epoch_losses,
        initial_loss,
    })
}

pub fn train_distillation_head(
    dataset: &Dataset,
    proposal_indices: &[usize],
    schedule: &SgdSchedule,
) -> Result<DistillationProjector> {
    train_distillation_head_with_history(dataset, proposal_indices, schedule).map(|t| t.projector)
}

/// Fits `f_dis = P f_cls + b` to `e_img` under the L1 loss. The subgradient of
/// `|r|` at `r = 0` is taken as 0.
pub fn train_distillation_head_with_history(
    dataset: &Dataset,
    proposal_indices: &[usize],
    schedule: &SgdSchedule,
) -> Result<TrainedProjector> {
    if proposal_indices.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    schedule.validate()?;
    if let Some(&bad) = proposal_indices.iter().find(|&&i| i >= dataset.proposals.len()) {
        return Err(Error::DanglingReference(format!("projector sample references proposal {bad}")));
    }

    let (d_cls, d_emb) = (dataset.d_cls, dataset.d_emb);
    let mut p = LinearParams::zeros(d_emb, d_cls);
    let feature = |i: usize| dataset.proposals[proposal_indices[i]].f_cls.as_slice();
    let loss_grad = |i: usize, out: &[f64], g: &mut [f64]| l1_loss_grad(out, &dataset.proposals[proposal_indices[i]].e_img, g);
    let (initial_loss, epoch_losses) = run_sgd(&mut p, proposal_indices.len(), schedule, feature, loss_grad);

    let (w, b) = p.to_f32();
    Ok(TrainedProjector {
        projector: DistillationProjector::new(d_cls, d_emb, w, b)?,
        epoch_losses,
        initial_loss,
    })
}

/// Summed absolute residual and its subgradient (0 at a zero residual).
fn l1_loss_grad(out: &[f64], target: &[f32], g: &mut [f64]) -> f64 {
    let mut loss = 0.0;
    for ((&o, &t), gc) in out.iter().zip(target).zip(g.iter_mut()) {
        let r = o - t as f64;
        loss += r.abs();
        *gc = if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{generate_synthetic_with_truth, ClassKind, Split, SynthConfig};
    use crate::probe::sigmoid_scores;
    use crate::testutil::{bx, Fixture};
    use rand::SeedableRng;

    /// Two base classes from the generator; samples are the well-localized
    /// proposals of each class.
    fn separable() -> (Dataset, Vec<TrainSample>) {
        let config = SynthConfig {
            n_base: 2,
            n_novel: 1,
            train_images: 600,
            test_images: 1,
            low_quality_fraction: 0.0,
            feature_scale: 8.0,
            ..SynthConfig::default()
        };
        let (ds, truth) = generate_synthetic_with_truth(&config, 5).unwrap();
        let samples = (0..ds.proposals.len())
            .filter_map(|i| match truth.source_class[i] {
                Some(c) if c < 2 && truth.quality[i] > 0.5 => Some(TrainSample {
                    proposal: i,
                    target: Target::Class(c),
                }),
                _ => None,
            })
            .collect();
        (ds, samples)
    }

    #[test]
    fn separable_classes_are_fit() {
        let (ds, samples) = separable();
        let trained = train_classifier_head_with_history(&ds, &samples, &[0, 1], FocalLossParams::default(), &SgdSchedule::base()).unwrap();
        assert!(*trained.epoch_losses.last().unwrap() < 1e-2);
        for s in &samples {
            let scores = sigmoid_scores(&trained.head, &ds.proposals[s.proposal].f_cls).unwrap();
            let predicted = if scores[0] > scores[1] { 0 } else { 1 };
            assert_eq!(Target::Class(predicted), s.target);
        }
    }

    #[test]
    fn loss_does_not_rise_after_warmup() {
        let (ds, samples) = separable();
        let schedule = SgdSchedule::base();
        let trained = train_classifier_head_with_history(&ds, &samples, &[0, 1], FocalLossParams::default(), &schedule).unwrap();
        let per_epoch = samples.len().div_ceil(schedule.batch_size);
        let first = schedule.warmup_iters.div_ceil(per_epoch);
        assert!(first < schedule.epochs - 1);
        for e in first.max(1)..trained.epoch_losses.len() {
            assert!(
                trained.epoch_losses[e] <= trained.epoch_losses[e - 1] + 1e-6,
                "epoch {e}: {:?}",
                trained.epoch_losses
            );
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, samples) = separable();
        let samples = &samples[..500];
        let schedule = SgdSchedule::probe();
        let a = train_classifier_head(&ds, samples, &[0, 1], FocalLossParams::default(), &schedule).unwrap();
        let b = train_classifier_head(&ds, samples, &[0, 1], FocalLossParams::default(), &schedule).unwrap();
        assert_eq!(a, b);
        let other = SgdSchedule {
            seed: 9,
            ..schedule.clone()
        };
        let c = train_classifier_head(&ds, samples, &[0, 1], FocalLossParams::default(), &other).unwrap();
        assert_ne!(a, c);

        let indices: Vec<usize> = samples.iter().map(|s| s.proposal).collect();
        let p = train_distillation_head(&ds, &indices, &schedule).unwrap();
        assert_eq!(p, train_distillation_head(&ds, &indices, &schedule).unwrap());
    }

    #[test]
    fn guards() {
        let (ds, samples) = separable();
        let params = FocalLossParams::default();
        let schedule = SgdSchedule::probe();
        assert!(matches!(
            train_classifier_head(&ds, &[], &[0, 1], params, &schedule),
            Err(Error::EmptySampleSet)
        ));
        assert!(matches!(
            train_classifier_head(&ds, &samples, &[0], params, &schedule),
            Err(Error::UnknownClassInTargets(1))
        ));
        assert!(matches!(
            train_distillation_head(&ds, &[], &schedule),
            Err(Error::EmptySampleSet)
        ));
        let bad = SgdSchedule {
            decay_epochs: vec![8, 8],
            ..schedule
        };
        assert!(matches!(
            train_classifier_head(&ds, &samples, &[0, 1], params, &bad),
            Err(Error::Range { .. })
        ));
    }

    #[test]
    fn negatives_only_push_scores_down() {
        let (ds, samples) = separable();
        let negatives: Vec<TrainSample> = samples[..300]
            .iter()
            .map(|s| TrainSample {
                proposal: s.proposal,
                target: Target::Negative,
            })
            .collect();
        let head = train_classifier_head(&ds, &negatives, &[7], FocalLossParams::default(), &SgdSchedule::probe()).unwrap();
        for s in &negatives {
            assert!(sigmoid_scores(&head, &ds.proposals[s.proposal].f_cls).unwrap()[0] < 0.5);
        }
    }

    #[test]
    fn schedule_rates() {
        let s = SgdSchedule::base();
        assert!((s.lr_at(0, 0) - 0.02 / 500.0).abs() < 1e-15);
        assert!((s.lr_at(0, 249) - 0.01).abs() < 1e-15);
        assert_eq!(s.lr_at(3, 500), 0.02);
        assert!((s.lr_at(16, 9000) - 0.002).abs() < 1e-15);
        assert!((s.lr_at(19, 9000) - 0.0002).abs() < 1e-15);
        let p = SgdSchedule::probe();
        assert_eq!(p.lr_at(0, 0), 0.01);
        assert!((p.lr_at(8, 0) - 0.001).abs() < 1e-15);
        assert!(p.validate().is_ok() && s.validate().is_ok());
        for bad in [vec![0], vec![12], vec![9, 8]] {
            let sched = SgdSchedule {
                decay_epochs: bad,
                ..SgdSchedule::probe()
            };
            assert!(sched.validate().is_err());
        }
    }

    /// `e_img = A f_cls + b` with a planted `A` and `b`.
    fn planted(n: usize, zero: bool) -> (Dataset, [[f64; 4]; 3], [f64; 3]) {
        use rand::Rng;
        let a = [[0.5, -0.25, 0.0, 0.125], [0.0, 0.75, -0.5, 0.25], [-0.375, 0.0, 0.25, 0.5]];
        let b = [0.25, -0.125, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut fx = Fixture::new(4, 3).class(0, ClassKind::Base, vec![1.0, 0.0, 0.0]).image(1, Split::Train);
        for _ in 0..n {
            let f: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let e: Vec<f32> = (0..3)
                .map(|r| {
                    if zero {
                        0.0
                    } else {
                        ((0..4).map(|j| a[r][j] * f[j] as f64).sum::<f64>() + b[r]) as f32
                    }
                })
                .collect();
            fx = fx.proposal(1, bx(0.0, 0.0, 1.0, 1.0), 1.0, f, e);
        }
        (fx.build(), a, b)
    }

    #[test]
    fn planted_projector_is_recovered() {
        let (ds, a, b) = planted(4000, false);
        let indices: Vec<usize> = (0..ds.proposals.len()).collect();
        let trained = train_distillation_head_with_history(&ds, &indices, &SgdSchedule::distill()).unwrap();
        let last = *trained.epoch_losses.last().unwrap();
        assert!(last < 1e-3, "final mean L1 {last}");
        let p = &trained.projector;
        for r in 0..3 {
            for j in 0..4 {
                assert!((p.weights()[r * 4 + j] as f64 - a[r][j]).abs() < 1e-2);
            }
            assert!((p.biases()[r] as f64 - b[r]).abs() < 1e-2);
        }
    }

    #[test]
    fn zero_targets_contract() {
        let (ds, _, _) = planted(4000, true);
        let indices: Vec<usize> = (0..ds.proposals.len()).collect();
        let from_zero = train_distillation_head_with_history(&ds, &indices, &SgdSchedule::distill()).unwrap();
        assert_eq!(from_zero.initial_loss, 0.0);
        assert!(from_zero.epoch_losses.iter().all(|&l| l == 0.0));
        assert!(from_zero.projector.weights().iter().all(|&w| w == 0.0));

        let mut p = LinearParams::zeros(3, 4);
        p.w.iter_mut().enumerate().for_each(|(i, w)| *w = 0.4 - 0.1 * i as f64);
        p.b = vec![0.3, -0.2, 0.1];
        let start: f64 = p.w.iter().chain(&p.b).map(|v| v.abs()).sum();
        let zeros = [0.0f32; 3];
        let (initial, history) = run_sgd(
            &mut p,
            indices.len(),
            &SgdSchedule::distill(),
            |i| ds.proposals[i].f_cls.as_slice(),
            |_, out, g| l1_loss_grad(out, &zeros, g),
        );
        let end: f64 = p.w.iter().chain(&p.b).map(|v| v.abs()).sum();
        assert!(*history.last().unwrap() < initial);
        assert!(end < 0.1 * start, "{start} -> {end}");
    }
}
