//! The multi-head random-label architecture.
//!
//! A base network is cut at copy depth `d`. The prefix becomes the shared
//! feature extractor, the suffix is the class head, and every class gets its
//! own freshly initialized copy of the suffix whose final dense layer predicts
//! one of `n` random labels. The stacked head outputs form `p̂ ∈ ℝ^{N×n}` per sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::network::{LayerSpec, Mode, ModelSpec, Sequential};
use crate::params::{Owner, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Class head plus per-class random heads.
    #[default]
    Multihead,
    /// Random heads only; class scores come from summing each head's probabilities.
    SingleOutput,
    /// Plain classifier, no random heads.
    Baseline,
}

/// How the random-head logits are normalized into `p̂`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadNormalization {
    /// An `n`-way softmax per head.
    PerHead,
    /// One softmax across all `N·n` logits, so head mass carries class information.
    Joint,
}

impl Variant {
    pub fn normalization(self) -> HeadNormalization {
        match self {
            Variant::SingleOutput => HeadNormalization::Joint,
            _ => HeadNormalization::PerHead,
        }
    }

    pub fn has_class_head(self) -> bool {
        !matches!(self, Variant::SingleOutput)
    }

    pub fn has_rnd_heads(self) -> bool {
        !matches!(self, Variant::Baseline)
    }
}

/// How random-label predictions are scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    /// argmax within the head of the true class.
    #[default]
    TrueClassHead,
    /// argmax over the whole `N×n` grid; correct only when both class and random label match.
    JointArgmax,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadConfig {
    pub variant: Variant,
    pub copy_depth: usize,
    pub rnd_labels: usize,
    /// Width multiplier for the hidden layers of each random head (1 = plain copy).
    pub head_width_factor: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { variant: Variant::Multihead, copy_depth: 1, rnd_labels: 10, head_width_factor: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadModel {
    pub store: ParamStore,
    feature_extractor: Sequential,
    class_head: Option<Sequential>,
    rnd_heads: Vec<Sequential>,
    classes: usize,
    rnd_labels: usize,
    copy_depth: usize,
    variant: Variant,
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub features: Var,
    /// `[batch×N]` class log-probabilities.
    pub class_logp: Option<Var>,
    /// `[batch×N×n]` random-label log-probabilities.
    pub rnd_logp: Option<Var>,
}

/// Probability-space outputs of [`MultiHeadModel::forward_all`].
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub p: Option<Tensor>,
    pub p_hat: Option<Tensor>,
    pub features: Tensor,
}

/// Random streams consumed by a train-mode forward pass.
pub struct ForwardRngs<'a, R: Rng + ?Sized> {
    /// Dropout in the feature extractor and class head.
    pub base: &'a mut R,
    /// Dropout inside the random heads.
    pub heads: &'a mut R,
}

impl MultiHeadModel {
    /// Builds the model. `base_rng` initializes the feature extractor and class
    /// head; `head_rng` initializes the random heads, so attaching heads never
    /// perturbs the base network's initialization.
    pub fn build<R: Rng + ?Sized, H: Rng + ?Sized>(
        spec: &ModelSpec,
        heads: HeadConfig,
        base_rng: &mut R,
        head_rng: &mut H,
    ) -> Result<Self> {
        let classes = spec.output_dim()?;
        if classes < 2 {
            return Err(Error::config("classes", format!("classifier needs at least 2 classes, spec outputs {classes}")));
        }
        let n = heads.rnd_labels;
        if heads.variant.has_rnd_heads() && n < 2 {
            return Err(Error::config("rnd_labels", format!("need at least 2 random labels, got {n}")));
        }
        let (prefix, suffix) = spec.split_at_depth(heads.copy_depth)?;
        let last = suffix.layers.last().expect("split_at_depth yields a non-empty suffix");
        let &LayerSpec::Dense { d_in, .. } = last else {
            return Err(Error::config("model.layers", "the final layer must be dense"));
        };

        let mut store = ParamStore::new();
        let feature_extractor = Sequential::build(&prefix, &mut store, Owner::FeatureExtractor, "fe", base_rng)?;
        let class_head = if heads.variant.has_class_head() {
            Some(Sequential::build(&suffix, &mut store, Owner::ClassHead, "class", base_rng)?)
        } else {
            None
        };

        let mut rnd_heads = Vec::new();
        if heads.variant.has_rnd_heads() {
            let mut head_spec = suffix.clone();
            *head_spec.layers.last_mut().expect("non-empty") = LayerSpec::Dense { d_in, d_out: n };
            if heads.head_width_factor != 1.0 {
                head_spec = head_spec.widen_suffix(head_spec.depth(), heads.head_width_factor)?;
            }
            for j in 0..classes {
                rnd_heads.push(Sequential::build(&head_spec, &mut store, Owner::RndHeads, &format!("rnd.{j}"), head_rng)?);
            }
        }
        Ok(Self {
            store,
            feature_extractor,
            class_head,
            rnd_heads,
            classes,
            rnd_labels: n,
            copy_depth: heads.copy_depth,
            variant: heads.variant,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn rnd_labels(&self) -> usize {
        self.rnd_labels
    }

    pub fn copy_depth(&self) -> usize {
        self.copy_depth
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn feature_extractor(&self) -> &Sequential {
        &self.feature_extractor
    }

    pub fn class_head(&self) -> Option<&Sequential> {
        self.class_head.as_ref()
    }

    pub fn rnd_heads(&self) -> &[Sequential] {
        &self.rnd_heads
    }

    /// Records one forward pass. Features are computed once and fanned out to every head.
    pub fn forward_graph<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        mode: Mode,
        rngs: ForwardRngs<'_, R>,
    ) -> Result<HeadOutputs> {
        let features = self.feature_extractor.forward(tape, x, mode, rngs.base)?;
        let class_logp = match &self.class_head {
            Some(head) => {
                let logits = head.forward(tape, features, mode, rngs.base)?;
                Some(tape.log_softmax(logits)?)
            }
            None => None,
        };
        let rnd_logp = if self.rnd_heads.is_empty() {
            None
        } else {
            let mut outs = Vec::with_capacity(self.rnd_heads.len());
            for head in &self.rnd_heads {
                outs.push(head.forward(tape, features, mode, rngs.heads)?);
            }
            let stacked = tape.concat_cols(&outs)?;
            let batch = tape.shape(stacked)[0];
            let grid = [batch, self.classes, self.rnd_labels];
            Some(match self.variant.normalization() {
                HeadNormalization::PerHead => {
                    let r = tape.reshape(stacked, &grid)?;
                    tape.log_softmax(r)?
                }
                HeadNormalization::Joint => {
                    let l = tape.log_softmax(stacked)?;
                    tape.reshape(l, &grid)?
                }
            })
        };
        Ok(HeadOutputs { features, class_logp, rnd_logp })
    }

    /// Probabilities `p` (`[batch×N]`) and `p̂` (`[batch×N×n]`) plus the shared features.
    pub fn forward_all<R: Rng + ?Sized>(&self, x: &Tensor, mode: Mode, rngs: ForwardRngs<'_, R>) -> Result<Predictions> {
        let mut tape = Tape::new(&self.store);
        let xv = tape.input(x.clone());
        let out = self.forward_graph(&mut tape, xv, mode, rngs)?;
        Ok(Predictions {
            p: out.class_logp.map(|v| tape.value(v).map(f64::exp)),
            p_hat: out.rnd_logp.map(|v| tape.value(v).map(f64::exp)),
            features: tape.value(out.features).clone(),
        })
    }

    /// Deterministic eval-mode forward.
    pub fn predict(&self, x: &Tensor) -> Result<Predictions> {
        // Eval mode never draws from these.
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let mut unused_heads = ChaCha8Rng::seed_from_u64(0);
        self.forward_all(x, Mode::Eval, ForwardRngs { base: &mut unused, heads: &mut unused_heads })
    }

    /// Class scores: `p` when a class head exists, otherwise the random-head sums.
    pub fn class_scores(&self, predictions: &Predictions) -> Result<Tensor> {
        match (&predictions.p, &predictions.p_hat) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(p_hat)) => class_from_rnd(p_hat),
            (None, None) => Err(Error::Usage("model produced neither class nor random-label outputs".into())),
        }
    }
}

/// `score[b, j] = Σ_i p̂[b, j, i]`.
pub fn class_from_rnd(p_hat: &Tensor) -> Result<Tensor> {
    let (b, classes, n) = grid_dims(p_hat)?;
    let scores = p_hat.data().chunks(n).map(|head| head.iter().sum()).collect();
    Tensor::new(vec![b, classes], scores)
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let width = *t.shape().last().unwrap_or(&1);
    t.data()
        .chunks(width)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
        .collect()
}

pub fn class_accuracy(scores: &Tensor, y: &[usize]) -> f64 {
    let preds = argmax_rows(scores);
    if y.is_empty() {
        return 0.0;
    }
    preds.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64
}

/// Fraction of samples whose random label is predicted correctly.
pub fn rnd_label_accuracy(p_hat: &Tensor, y: &[usize], s: &[usize], mode: MetricMode) -> Result<f64> {
    let (b, classes, n) = grid_dims(p_hat)?;
    if y.len() != b || s.len() != b {
        return Err(Error::dim("rnd_label_accuracy", format!("{} samples, {} class labels, {} random labels", b, y.len(), s.len())));
    }
    if y.iter().any(|&c| c >= classes) || s.iter().any(|&r| r >= n) {
        return Err(Error::Validation("label out of range in rnd_label_accuracy".into()));
    }
    if b == 0 {
        return Ok(0.0);
    }
    let correct = (0..b)
        .filter(|&i| {
            let sample = p_hat.row(i);
            match mode {
                MetricMode::TrueClassHead => {
                    let head = &sample[y[i] * n..(y[i] + 1) * n];
                    argmax(head) == s[i]
                }
                MetricMode::JointArgmax => argmax(sample) == y[i] * n + s[i],
            }
        })
        .count();
    Ok(correct as f64 / b as f64)
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

fn grid_dims(p_hat: &Tensor) -> Result<(usize, usize, usize)> {
    match p_hat.shape()[..] {
        [b, c, n] => Ok((b, c, n)),
        _ => Err(Error::dim("p_hat", format!("expected [batch×N×n], got {:?}", p_hat.shape()))),
    }
}
