//! Empirical Rademacher estimates for binary hypothesis classes.
//!
//! For sign vectors σ ∈ {±1}^m the quantity averaged is
//! `sup_h (1/m)·Σ σ_i·h(x_i)`. For neural networks the supremum is replaced by
//! an SGD fit to σ, so reported values are empirical estimates only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::heads::{argmax_rows, HeadConfig, MultiHeadModel, Variant};
use crate::network::ModelSpec;
use crate::tensor::Tensor;
use crate::training::{RngStreams, StreamSeeds, TrainSettings, Trainer};

/// Something that can (approximately) maximize correlation with a sign vector.
pub trait HypothesisClass {
    /// Number of points `m` the hypotheses are evaluated on.
    fn sample_size(&self) -> usize;

    /// `sup_h (1/m)·Σ σ_i·h(x_i)`, exactly or approximately.
    fn sup_correlation(&mut self, sigma: &[i8]) -> Result<f64>;
}

/// Largest class enumerated exactly.
pub const MAX_EXACT_CLASS: usize = 1 << 16;
/// Largest sample size whose sign patterns are enumerated exactly.
pub const MAX_EXACT_POINTS: usize = 20;

/// A finite class given by each hypothesis's ±1 outputs on the sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteClass {
    outputs: Vec<Vec<i8>>,
    m: usize,
}

impl FiniteClass {
    pub fn new(outputs: Vec<Vec<i8>>) -> Result<Self> {
        let m = outputs.first().map_or(0, Vec::len);
        if outputs.is_empty() || m == 0 {
            return Err(Error::Validation("hypothesis class must be non-empty and evaluated on at least one point".into()));
        }
        if outputs.iter().any(|h| h.len() != m || h.iter().any(|&v| v != 1 && v != -1)) {
            return Err(Error::Validation("every hypothesis must return ±1 on each of the m points".into()));
        }
        Ok(Self { outputs, m })
    }

    /// `{h ≡ +1, h ≡ −1}`.
    pub fn constants(m: usize) -> Result<Self> {
        Self::new(vec![vec![1; m], vec![-1; m]])
    }

    /// Every labeling `x ↦ s·sign(x − t)` realizable by a threshold `t` and orientation `s`.
    pub fn thresholds(points: &[f64]) -> Result<Self> {
        let mut cuts: Vec<f64> = points.to_vec();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut ts = vec![cuts.first().copied().unwrap_or(0.0) - 1.0];
        ts.extend(cuts.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        ts.push(cuts.last().copied().unwrap_or(0.0) + 1.0);
        let mut outputs = Vec::new();
        for &t in &ts {
            for s in [1i8, -1] {
                let h: Vec<i8> = points.iter().map(|&x| if x > t { s } else { -s }).collect();
                if !outputs.contains(&h) {
                    outputs.push(h);
                }
            }
        }
        Self::new(outputs)
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

impl HypothesisClass for FiniteClass {
    fn sample_size(&self) -> usize {
        self.m
    }

    fn sup_correlation(&mut self, sigma: &[i8]) -> Result<f64> {
        if sigma.len() != self.m {
            return Err(Error::dim("sup_correlation", format!("{} signs for {} points", sigma.len(), self.m)));
        }
        let best = self
            .outputs
            .iter()
            .map(|h| h.iter().zip(sigma).map(|(&a, &b)| i64::from(a) * i64::from(b)).sum::<i64>())
            .max()
            .expect("non-empty class");
        Ok(best as f64 / self.m as f64)
    }
}

/// Exact expectation over all `2^m` sign vectors.
pub fn rademacher_exact(class: &mut FiniteClass) -> Result<f64> {
    let m = class.sample_size();
    if m > MAX_EXACT_POINTS || class.len() > MAX_EXACT_CLASS {
        return Err(Error::config(
            "rademacher",
            format!("exact enumeration limited to m ≤ {MAX_EXACT_POINTS} and |H| ≤ {MAX_EXACT_CLASS}; got m = {m}, |H| = {}", class.len()),
        ));
    }
    let mut total = 0.0;
    let patterns = 1u64 << m;
    for bits in 0..patterns {
        let sigma: Vec<i8> = (0..m).map(|i| if bits >> i & 1 == 1 { 1 } else { -1 }).collect();
        total += class.sup_correlation(&sigma)?;
    }
    Ok(total / patterns as f64)
}

/// Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub trials: usize,
}

/// Averages the class's supremum over `trials` uniformly drawn sign vectors.
pub fn rademacher_sampled<H: HypothesisClass + ?Sized, R: Rng + ?Sized>(class: &mut H, trials: usize, rng: &mut R) -> Result<Estimate> {
    if trials == 0 {
        return Err(Error::config("rademacher.trials", "must be at least 1"));
    }
    let m = class.sample_size();
    let mut values = Vec::with_capacity(trials);
    for _ in 0..trials {
        let sigma: Vec<i8> = (0..m).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
        values.push(class.sup_correlation(&sigma)?);
    }
    let n = trials as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if trials > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok(Estimate { mean, std_error: (var / n).sqrt(), trials })
}

/// `R̂ + 𝕽 + sqrt(ln(1/δ) / (2m))`.
pub fn bound_eval(empirical_risk: f64, rademacher: f64, m: usize, delta_conf: f64) -> Result<f64> {
    if !(delta_conf > 0.0 && delta_conf < 1.0) {
        return Err(Error::config("rademacher.delta_conf", format!("δ = {delta_conf} must be in (0, 1)")));
    }
    if m == 0 {
        return Err(Error::Validation("bound needs at least one sample".into()));
    }
    Ok(empirical_risk + rademacher + ((1.0 / delta_conf).ln() / (2.0 * m as f64)).sqrt())
}

/// Neural-network class whose supremum is approximated by training a fresh
/// binary classifier on the labels `(σ + 1) / 2` with the trainer's optimizer.
pub struct NetworkErm {
    spec: ModelSpec,
    inputs: Dataset,
    settings: TrainSettings,
    rng: ChaCha8Rng,
}

impl NetworkErm {
    /// `spec` must output two logits; `inputs` supplies the `m` points (its labels are ignored).
    pub fn new(spec: ModelSpec, inputs: &Dataset, settings: TrainSettings, seed: u64) -> Result<Self> {
        if spec.output_dim()? != 2 {
            return Err(Error::config("model", "Rademacher fits need a network with exactly two outputs"));
        }
        let inputs = Dataset::new(inputs.inputs.clone(), vec![0; inputs.len()], 2, inputs.shape, Split::Train)?;
        Ok(Self { spec, inputs, settings, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    /// Trains on `labels ∈ {0, 1}` and returns the fitted ±1 predictions on the sample.
    pub fn fit(&mut self, labels: &[usize]) -> Result<Vec<i8>> {
        let mut data = self.inputs.clone();
        data.labels = labels.to_vec();
        let mut streams = RngStreams::new(StreamSeeds::from_master(self.rng.random()));
        let heads = HeadConfig { variant: Variant::Baseline, ..HeadConfig::default() };
        let model = MultiHeadModel::build(&self.spec, heads, &mut streams.init_base, &mut streams.init_heads)?;
        let mut trainer = Trainer::new(model, self.settings.clone(), streams, data.len())?;
        for _ in 0..self.settings.epochs {
            trainer.train_epoch(&data, None)?;
        }
        predict_signs(&trainer.model, &data.inputs)
    }
}

/// `+1` where the model predicts class 1, `−1` otherwise.
pub fn predict_signs(model: &MultiHeadModel, x: &Tensor) -> Result<Vec<i8>> {
    let scores = model.class_scores(&model.predict(x)?)?;
    Ok(argmax_rows(&scores).into_iter().map(|c| if c == 1 { 1 } else { -1 }).collect())
}

impl HypothesisClass for NetworkErm {
    fn sample_size(&self) -> usize {
        self.inputs.len()
    }

    fn sup_correlation(&mut self, sigma: &[i8]) -> Result<f64> {
        if sigma.len() != self.inputs.len() {
            return Err(Error::dim("sup_correlation", format!("{} signs for {} points", sigma.len(), self.inputs.len())));
        }
        let labels: Vec<usize> = sigma.iter().map(|&s| usize::from(s > 0)).collect();
        let h = self.fit(&labels)?;
        let corr: i64 = h.iter().zip(sigma).map(|(&a, &b)| i64::from(a) * i64::from(b)).sum();
        Ok(corr as f64 / sigma.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_on_two_points() {
        let mut c = FiniteClass::constants(2).unwrap();
        assert_eq!(rademacher_exact(&mut c).unwrap(), 0.5);
    }

    #[test]
    fn singleton_class_is_zero_in_expectation() {
        let mut c = FiniteClass::new(vec![vec![1; 5]]).unwrap();
        assert_eq!(rademacher_exact(&mut c).unwrap(), 0.0);
        let est = rademacher_sampled(&mut c, 10_000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(est.mean.abs() < 3.0 * est.std_error + 1e-12, "{est:?}");
    }

    #[test]
    fn thresholds_on_three_points() {
        // Brute-force oracle: all 6 realizable labelings of 3 sorted points, maximized per σ.
        let points = [0.3, -1.0, 2.0];
        let mut c = FiniteClass::thresholds(&points).unwrap();
        assert_eq!(c.len(), 6);
        let exact = rademacher_exact(&mut c).unwrap();
        let mut brute = 0.0;
        for bits in 0..8u32 {
            let sigma: Vec<i8> = (0..3).map(|i| if bits >> i & 1 == 1 { 1 } else { -1 }).collect();
            let mut best = f64::MIN;
            for t in [-2.0, -0.5, 1.0, 3.0] {
                for s in [1.0, -1.0] {
                    let v: f64 = points.iter().zip(&sigma).map(|(&x, &g)| if x > t { s } else { -s } * g as f64).sum();
                    best = best.max(v / 3.0);
                }
            }
            brute += best / 8.0;
        }
        assert!((exact - brute).abs() < 1e-15);
        let est = rademacher_sampled(&mut c, 10_000, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!((est.mean - exact).abs() < 3.0 * est.std_error, "{est:?} vs {exact}");
    }

    #[test]
    fn rejects_bad_classes() {
        assert!(FiniteClass::new(vec![]).is_err());
        assert!(FiniteClass::new(vec![vec![1, 0]]).is_err());
        assert!(FiniteClass::new(vec![vec![1, 1], vec![1]]).is_err());
        let mut big = FiniteClass::constants(21).unwrap();
        assert!(rademacher_exact(&mut big).is_err());
    }

    #[test]
    fn bound_plug_in() {
        let b = bound_eval(0.0, 0.0, 2, (-1.0f64).exp()).unwrap();
        assert!((b - 0.5).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for m in 1..100 {
            let v = bound_eval(0.1, 0.2, m, 0.05).unwrap();
            assert!(v < last);
            last = v;
        }
        assert!(bound_eval(0.0, 0.0, 2, 1.0).is_err());
    }
}
