//! Optimizer, learning-rate schedule, seeded random streams and the epoch loop.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::heads::{class_accuracy, rnd_label_accuracy, ForwardRngs, MetricMode, MultiHeadModel};
use crate::losses::{backward_routed, composite_objectives, LossBundle};
use crate::network::Mode;
use crate::params::{Owner, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `η_t = ½·η_base·(1 + cos(π·t/T))`; `t` is clamped to `T`.
pub fn cosine_lr(t: usize, total: usize, base: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = t.min(total) as f64 / total as f64;
    0.5 * base * (1.0 + (PI * frac).cos())
}

/// Cosine annealing over optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_steps: usize,
}

impl Schedule {
    pub fn lr(&self, step: usize) -> f64 {
        cosine_lr(step, self.total_steps, self.base_lr)
    }
}

/// Momentum buffers for every parameter in a store, indexed by [`ParamId`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    velocity: Vec<Tensor>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptState {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config("training.momentum", format!("μ = {momentum} must be in [0, 1)")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::config("training.weight_decay", format!("wd = {weight_decay} must be ≥ 0")));
        }
        let velocity = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Ok(Self { velocity, momentum, weight_decay })
    }

    pub fn velocity(&self, id: ParamId) -> &Tensor {
        &self.velocity[id.index()]
    }

    pub(crate) fn set_velocity(&mut self, id: ParamId, v: Tensor) -> Result<()> {
        let slot = &mut self.velocity[id.index()];
        if slot.shape() != v.shape() {
            return Err(Error::dim("set_velocity", format!("{:?} vs {:?}", slot.shape(), v.shape())));
        }
        *slot = v;
        Ok(())
    }
}

/// One momentum-SGD step over the parameters of `owner`:
/// `g = ∇ + wd·θ` (weights only), `v = μ·v + g`, `θ -= η·v`.
///
/// Parameters without a gradient entry are treated as having zero gradient.
/// Nothing in the group is modified if any gradient is non-finite.
pub fn sgd_step(store: &mut ParamStore, grads: &Gradients, state: &mut OptState, owner: Owner, lr: f64) -> Result<()> {
    let ids = store.ids_owned_by(owner);
    for &id in &ids {
        if let Some(g) = grads.get(id) {
            if g.shape() != store.get(id).value.shape() {
                return Err(Error::dim("sgd_step", format!("gradient {:?} for {}", g.shape(), store.get(id).name)));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient { param: store.get(id).name.clone() });
            }
        }
    }
    let (mu, wd) = (state.momentum, state.weight_decay);
    for id in ids {
        let param = store.get_mut(id);
        let decay = if param.decay { wd } else { 0.0 };
        let v = &mut state.velocity[id.index()];
        let grad = grads.get(id);
        for (k, (w, vel)) in param.value.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
            let g = grad.map_or(0.0, |g| g.data()[k]) + decay * *w;
            *vel = mu * *vel + g;
            *w -= lr * *vel;
        }
    }
    Ok(())
}

/// Seeds for each named stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSeeds {
    pub init_base: u64,
    pub init_heads: u64,
    pub data_order: u64,
    pub dropout: u64,
    pub head_dropout: u64,
    pub rnd_labels: u64,
    pub augment: u64,
}

impl StreamSeeds {
    /// Derives all stream seeds from one master seed.
    pub fn from_master(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            init_base: rng.random(),
            init_heads: rng.random(),
            data_order: rng.random(),
            dropout: rng.random(),
            head_dropout: rng.random(),
            rnd_labels: rng.random(),
            augment: rng.random(),
        }
    }
}

/// Position of a named stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamPosition {
    pub name: String,
    pub seed: u64,
    pub word_pos: u128,
}

/// Independent ChaCha streams; drawing from one never advances another.
#[derive(Clone, Debug)]
pub struct RngStreams {
    seeds: StreamSeeds,
    pub init_base: ChaCha8Rng,
    pub init_heads: ChaCha8Rng,
    pub data_order: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
    pub head_dropout: ChaCha8Rng,
    pub rnd_labels: ChaCha8Rng,
    pub augment: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seeds: StreamSeeds) -> Self {
        let s = ChaCha8Rng::seed_from_u64;
        Self {
            seeds,
            init_base: s(seeds.init_base),
            init_heads: s(seeds.init_heads),
            data_order: s(seeds.data_order),
            dropout: s(seeds.dropout),
            head_dropout: s(seeds.head_dropout),
            rnd_labels: s(seeds.rnd_labels),
            augment: s(seeds.augment),
        }
    }

    pub fn seeds(&self) -> StreamSeeds {
        self.seeds
    }

    fn named(&self) -> [(&'static str, u64, &ChaCha8Rng); 7] {
        let s = &self.seeds;
        [
            ("init_base", s.init_base, &self.init_base),
            ("init_heads", s.init_heads, &self.init_heads),
            ("data_order", s.data_order, &self.data_order),
            ("dropout", s.dropout, &self.dropout),
            ("head_dropout", s.head_dropout, &self.head_dropout),
            ("rnd_labels", s.rnd_labels, &self.rnd_labels),
            ("augment", s.augment, &self.augment),
        ]
    }

    pub fn positions(&self) -> Vec<StreamPosition> {
        self.named()
            .iter()
            .map(|(name, seed, rng)| StreamPosition { name: (*name).into(), seed: *seed, word_pos: rng.get_word_pos() })
            .collect()
    }

    pub fn restore(positions: &[StreamPosition]) -> Result<Self> {
        let find = |name: &str| {
            positions
                .iter()
                .find(|p| p.name == name)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks stream {name}")))
        };
        let seeds = StreamSeeds {
            init_base: find("init_base")?.seed,
            init_heads: find("init_heads")?.seed,
            data_order: find("data_order")?.seed,
            dropout: find("dropout")?.seed,
            head_dropout: find("head_dropout")?.seed,
            rnd_labels: find("rnd_labels")?.seed,
            augment: find("augment")?.seed,
        };
        let mut streams = Self::new(seeds);
        for (name, rng) in [
            ("init_base", &mut streams.init_base),
            ("init_heads", &mut streams.init_heads),
            ("data_order", &mut streams.data_order),
            ("dropout", &mut streams.dropout),
            ("head_dropout", &mut streams.head_dropout),
            ("rnd_labels", &mut streams.rnd_labels),
            ("augment", &mut streams.augment),
        ] {
            rng.set_word_pos(find(name)?.word_pos);
        }
        Ok(streams)
    }
}

/// Mirrors sample `i` of a `[B×C×H×W]` batch left to right.
pub fn flip_sample(x: &mut Tensor, i: usize) -> Result<()> {
    let [_, c, h, w] = image_dims(x)?;
    let per = c * h * w;
    for row in x.data_mut()[i * per..(i + 1) * per].chunks_mut(w) {
        row.reverse();
    }
    Ok(())
}

/// Flips each sample independently with probability `prob`; returns how many were flipped.
/// One draw is consumed per sample regardless of `prob`.
pub fn augment_flip<R: Rng + ?Sized>(x: &mut Tensor, rng: &mut R, prob: f64) -> Result<usize> {
    let [b, ..] = image_dims(x)?;
    let mut flipped = 0;
    for i in 0..b {
        if rng.random::<f64>() < prob {
            flip_sample(x, i)?;
            flipped += 1;
        }
    }
    Ok(flipped)
}

fn image_dims(x: &Tensor) -> Result<[usize; 4]> {
    match *x.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref s => Err(Error::dim("augment_flip", format!("expected [B, C, H, W] images, got {s:?}"))),
    }
}

/// Hyperparameters of the training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub lambda: f64,
    pub label_smoothing: f64,
    pub momentum: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub augment_flip: bool,
    pub metric_mode: MetricMode,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            label_smoothing: 0.0,
            momentum: 0.9,
            lr: 0.1,
            weight_decay: 0.0,
            batch_size: 16,
            epochs: 200,
            augment_flip: false,
            metric_mode: MetricMode::TrueClassHead,
        }
    }
}

/// One row of `metrics.jsonl`. Fields a variant cannot produce are omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_class_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_class_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rnd_label_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rnd_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reg_loss: Option<f64>,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    pub clamp_count: usize,
}

/// Eval-mode accuracies on one dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub class_acc: f64,
    /// Only on data carrying random labels.
    pub rnd_acc: Option<f64>,
}

const EVAL_CHUNK: usize = 512;

pub fn evaluate(model: &MultiHeadModel, data: &Dataset, mode: MetricMode) -> Result<Evaluation> {
    if data.is_empty() {
        return Ok(Evaluation { class_acc: 0.0, rnd_acc: None });
    }
    let mut class_hits = 0.0;
    let mut rnd_hits = 0.0;
    let mut has_rnd = false;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let (x, y, s) = data.batch(chunk);
        let pred = model.predict(&x)?;
        class_hits += class_accuracy(&model.class_scores(&pred)?, &y) * chunk.len() as f64;
        if let (Some(p_hat), Some(s)) = (&pred.p_hat, &s) {
            rnd_hits += rnd_label_accuracy(p_hat, &y, s, mode)? * chunk.len() as f64;
            has_rnd = true;
        }
    }
    let total = data.len() as f64;
    Ok(Evaluation { class_acc: class_hits / total, rnd_acc: has_rnd.then_some(rnd_hits / total) })
}

/// Owns the model, optimizer state and random streams of a run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: MultiHeadModel,
    pub opt: OptState,
    pub schedule: Schedule,
    pub streams: RngStreams,
    pub settings: TrainSettings,
    step: usize,
    epoch: usize,
    group_steps: [usize; 3],
}

impl Trainer {
    /// `train_len` fixes the schedule horizon at `epochs · ⌈train_len / batch_size⌉` steps.
    pub fn new(model: MultiHeadModel, settings: TrainSettings, streams: RngStreams, train_len: usize) -> Result<Self> {
        if settings.batch_size == 0 {
            return Err(Error::config("training.batch_size", "batch size must be at least 1"));
        }
        if !(settings.lr > 0.0) {
            return Err(Error::config("training.lr", format!("learning rate {} must be > 0", settings.lr)));
        }
        let opt = OptState::new(&model.store, settings.momentum, settings.weight_decay)?;
        let per_epoch = train_len.div_ceil(settings.batch_size);
        let schedule = Schedule { base_lr: settings.lr, total_steps: settings.epochs * per_epoch };
        Ok(Self { model, opt, schedule, streams, settings, step: 0, epoch: 0, group_steps: [0; 3] })
    }

    /// Global optimizer step counter.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn group_steps(&self, owner: Owner) -> usize {
        self.group_steps[owner.code() as usize]
    }

    pub(crate) fn set_progress(&mut self, epoch: usize, step: usize) {
        self.epoch = epoch;
        self.step = step;
    }

    /// One pass over `train` followed by evaluation on `train` and `test`.
    pub fn train_epoch(&mut self, train: &Dataset, test: Option<&Dataset>) -> Result<MetricsRecord> {
        let variant = self.model.variant();
        if variant.has_rnd_heads() && train.rnd_labels.is_none() {
            return Err(Error::Usage("training data carries no random labels".into()));
        }
        let order = batches(train.len(), self.settings.batch_size, &mut self.streams.data_order)?;
        let epoch = self.epoch + 1;
        let mut sums = [0.0f64; 3];
        let mut clamp_count = 0;
        let mut lr = self.schedule.lr(self.step);
        for idx in &order {
            let (mut x, y, s) = train.batch(idx);
            if self.settings.augment_flip && train.shape.is_image() {
                augment_flip(&mut x, &mut self.streams.augment, 0.5)?;
            }
            lr = self.schedule.lr(self.step);
            let grads = {
                let mut tape = Tape::new(&self.model.store);
                let xv = tape.input(x);
                let rngs = ForwardRngs { base: &mut self.streams.dropout, heads: &mut self.streams.head_dropout };
                let out = self.model.forward_graph(&mut tape, xv, Mode::Train, rngs)?;
                let losses = LossBundle::build(&mut tape, &out, &y, s.as_deref(), self.settings.label_smoothing)?;
                for (sum, loss) in sums.iter_mut().zip([losses.class, losses.rnd, losses.reg]) {
                    if let Some(l) = loss {
                        let v = tape.value(l.node).item()?;
                        if !v.is_finite() {
                            return Err(Error::Diverged { epoch, last_good: None });
                        }
                        *sum += v;
                    }
                }
                clamp_count += losses.clamped();
                let passes = composite_objectives(&mut tape, variant, &out, &losses, self.settings.lambda)?;
                backward_routed(&mut tape, &passes)?
            };
            for owner in Owner::ALL {
                if self.model.store.count(Some(owner)) > 0 {
                    sgd_step(&mut self.model.store, &grads, &mut self.opt, owner, lr)?;
                    self.group_steps[owner.code() as usize] += 1;
                }
            }
            self.step += 1;
        }
        self.epoch = epoch;

        let n_batches = order.len().max(1) as f64;
        let mean = |i: usize, present: bool| present.then_some(sums[i] / n_batches);
        let train_eval = evaluate(&self.model, train, self.settings.metric_mode)?;
        let test_acc = match test {
            Some(t) if !t.is_empty() => Some(evaluate(&self.model, t, self.settings.metric_mode)?.class_acc),
            _ => None,
        };
        Ok(MetricsRecord {
            epoch,
            train_class_acc: train_eval.class_acc,
            test_class_acc: test_acc,
            rnd_label_acc: train_eval.rnd_acc,
            class_loss: mean(0, variant.has_class_head()),
            rnd_loss: mean(1, variant.has_rnd_heads()),
            reg_loss: mean(2, variant.has_rnd_heads()),
            lr,
            clamp_count,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Gradients;

    fn scalar_store(w: f64, decay: bool) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.insert("w", Owner::FeatureExtractor, Tensor::scalar(w), decay);
        (store, id)
    }

    #[test]
    fn plain_gradient_descent() {
        let (mut store, id) = scalar_store(1.0, true);
        let mut opt = OptState::new(&store, 0.0, 0.0).unwrap();
        let grads = Gradients::from_pairs(vec![(id, Tensor::scalar(0.5))]);
        sgd_step(&mut store, &grads, &mut opt, Owner::FeatureExtractor, 0.2).unwrap();
        assert_eq!(store.get(id).value.data()[0], 1.0 - 0.2 * 0.5);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut store, id) = scalar_store(0.7, false);
        let mut opt = OptState::new(&store, 0.9, 0.1).unwrap();
        let grads = Gradients::from_pairs(vec![(id, Tensor::scalar(0.0))]);
        sgd_step(&mut store, &grads, &mut opt, Owner::FeatureExtractor, 0.5).unwrap();
        assert_eq!(store.get(id).value.data()[0], 0.7);
    }

    #[test]
    fn quadratic_matches_heavy_ball_recurrence() {
        // f(w) = w², so w_{t+1} = (1 + μ - 2η)·w_t - μ·w_{t-1}, with w_1 = (1 - 2η)·w_0.
        let (mut store, id) = scalar_store(1.0, false);
        let mut opt = OptState::new(&store, 0.9, 0.0).unwrap();
        let mut closed = vec![1.0, 0.8];
        let mut traj = vec![1.0];
        for _ in 0..200 {
            let w = store.get(id).value.data()[0];
            let grads = Gradients::from_pairs(vec![(id, Tensor::scalar(2.0 * w))]);
            sgd_step(&mut store, &grads, &mut opt, Owner::FeatureExtractor, 0.1).unwrap();
            traj.push(store.get(id).value.data()[0]);
            let n = closed.len();
            closed.push(1.7 * closed[n - 1] - 0.9 * closed[n - 2]);
        }
        for (a, b) in traj.iter().zip(&closed) {
            assert!((a - b).abs() < 1e-12);
        }
        // The contraction rate is √μ per step, so 100 steps leave |w| ≈ 2.85e-3.
        assert!((traj[100] + 0.002851411121182685).abs() < 1e-12);
        assert!(traj[150..].iter().all(|w| w.abs() < 1e-3));
    }

    #[test]
    fn decay_skips_biases() {
        let (mut store, id) = scalar_store(1.0, false);
        let mut opt = OptState::new(&store, 0.0, 0.5).unwrap();
        sgd_step(&mut store, &Gradients::from_pairs(vec![]), &mut opt, Owner::FeatureExtractor, 1.0).unwrap();
        assert_eq!(store.get(id).value.data()[0], 1.0);
        let (mut store, id) = scalar_store(1.0, true);
        let mut opt = OptState::new(&store, 0.0, 0.5).unwrap();
        sgd_step(&mut store, &Gradients::from_pairs(vec![]), &mut opt, Owner::FeatureExtractor, 1.0).unwrap();
        assert_eq!(store.get(id).value.data()[0], 0.5);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let (mut store, id) = scalar_store(1.0, true);
        let mut opt = OptState::new(&store, 0.9, 0.0).unwrap();
        let grads = Gradients::from_pairs(vec![(id, Tensor::scalar(f64::NAN))]);
        let err = sgd_step(&mut store, &grads, &mut opt, Owner::FeatureExtractor, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref param } if param == "w"));
        assert_eq!(store.get(id).value.data()[0], 1.0);
        assert_eq!(opt.velocity(id).data()[0], 0.0);
    }

    #[test]
    fn cosine_endpoints_and_monotone() {
        assert_eq!(cosine_lr(0, 100, 0.1), 0.1);
        assert!(cosine_lr(100, 100, 0.1).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.1) - 0.05).abs() < 1e-15);
        for t in 0..100 {
            assert!(cosine_lr(t + 1, 100, 0.1) <= cosine_lr(t, 100, 0.1));
        }
    }

    #[test]
    fn streams_are_independent() {
        let seeds = StreamSeeds::from_master(5);
        let mut a = RngStreams::new(seeds);
        let b = RngStreams::new(seeds);
        for _ in 0..100 {
            let _: u64 = a.dropout.random();
        }
        assert_eq!(a.init_heads.get_word_pos(), b.init_heads.get_word_pos());
        let mut ah = a.init_heads.clone();
        let mut bh = b.init_heads.clone();
        assert_eq!(ah.random::<u64>(), bh.random::<u64>());
        assert_ne!(a.dropout.get_word_pos(), b.dropout.get_word_pos());
    }

    #[test]
    fn streams_restore_positions() {
        let mut a = RngStreams::new(StreamSeeds::from_master(8));
        for _ in 0..37 {
            let _: u32 = a.augment.random();
        }
        let mut b = RngStreams::restore(&a.positions()).unwrap();
        assert_eq!(a.augment.random::<u64>(), b.augment.random::<u64>());
        assert_eq!(a.seeds(), b.seeds());
    }

    #[test]
    fn flip_twice_is_identity() {
        let x = Tensor::from_fn(&[2, 2, 3, 4], |i| i as f64);
        let mut y = x.clone();
        flip_sample(&mut y, 1).unwrap();
        assert_ne!(x, y);
        assert_eq!(y.data()[24..28], [3.0, 2.0, 1.0, 0.0].map(|v| v + 24.0));
        flip_sample(&mut y, 1).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn flip_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[4, 1, 2, 2], |i| i as f64);
        let mut y = x.clone();
        assert_eq!(augment_flip(&mut y, &mut rng, 0.0).unwrap(), 0);
        assert_eq!(x, y);
        let mut z = Tensor::zeros(&[10_000, 1, 1, 2]);
        let rate = augment_flip(&mut z, &mut rng, 0.5).unwrap() as f64 / 1e4;
        assert!((rate - 0.5).abs() < 0.02, "{rate}");
        assert!(augment_flip(&mut Tensor::zeros(&[2, 3]), &mut rng, 0.5).is_err());
    }
}
