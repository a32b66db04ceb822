//! Classification, random-label and regularization losses, label smoothing, and gradient routing.
//!
//! Every loss is a batch mean. Two evaluation paths exist: probability-space
//! functions over plain tensors (used for metrics and as independent oracles)
//! and tape versions over log-probabilities (used in training).
//!
//! Routing contract:
//!
//! | loss      | trains                           | blocked                         |
//! |-----------|----------------------------------|---------------------------------|
//! | `class`   | feature extractor + class head | –                               |
//! | `rnd`     | random heads                   | severed at the features         |
//! | `reg`     | feature extractor              | random heads frozen (constants) |

use crate::autodiff::{Gradients, Routing, Tape, Var};
use crate::error::{Error, Result};
use crate::heads::{HeadOutputs, Variant};
use crate::params::Owner;
use crate::tensor::Tensor;

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// A loss value plus how many probabilities hit [`PROB_FLOOR`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub clamped: usize,
}

fn clamped_ln(p: f64, clamped: &mut usize) -> f64 {
    if p < PROB_FLOOR {
        *clamped += 1;
        PROB_FLOOR.ln()
    } else {
        p.ln()
    }
}

fn check_labels(what: &str, labels: &[usize], batch: usize, bound: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::dim("loss", format!("{} {what} for batch of {batch}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= bound) {
        return Err(Error::Validation(format!("{what} {bad} out of range 0..{bound}")));
    }
    Ok(())
}

fn grid(p_hat: &Tensor) -> Result<(usize, usize, usize)> {
    match p_hat.shape()[..] {
        [b, c, n] => Ok((b, c, n)),
        _ => Err(Error::dim("loss", format!("expected [batch×N×n], got {:?}", p_hat.shape()))),
    }
}

/// `mean_b −log p[b, y_b]`.
pub fn class_loss(p: &Tensor, y: &[usize]) -> Result<LossValue> {
    let (b, classes) = p.dims2("class_loss")?;
    check_labels("class label", y, b, classes)?;
    let mut clamped = 0;
    let total: f64 = (0..b).map(|i| -clamped_ln(p.row(i)[y[i]], &mut clamped)).sum();
    Ok(LossValue { value: total / b as f64, clamped })
}

/// `mean_b −log p̂[b, y_b, s_b]`.
pub fn rnd_loss(p_hat: &Tensor, y: &[usize], s: &[usize]) -> Result<LossValue> {
    let (b, classes, n) = grid(p_hat)?;
    check_labels("class label", y, b, classes)?;
    check_labels("random label", s, b, n)?;
    let mut clamped = 0;
    let total: f64 = (0..b).map(|i| -clamped_ln(p_hat.row(i)[y[i] * n + s[i]], &mut clamped)).sum();
    Ok(LossValue { value: total / b as f64, clamped })
}

/// Cross-entropy between the uniform distribution and the true-class head: `mean_b −(1/n)·Σ_i log p̂[b, y_b, i]`.
pub fn reg_loss(p_hat: &Tensor, y: &[usize]) -> Result<LossValue> {
    let (b, classes, n) = grid(p_hat)?;
    check_labels("class label", y, b, classes)?;
    let mut clamped = 0;
    let total: f64 = (0..b)
        .map(|i| {
            let head = &p_hat.row(i)[y[i] * n..(y[i] + 1) * n];
            -head.iter().map(|&q| clamped_ln(q, &mut clamped)).sum::<f64>() / n as f64
        })
        .sum();
    Ok(LossValue { value: total / b as f64, clamped })
}

fn check_smoothing(delta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::config("label_smoothing", format!("δ = {delta} outside [0, 1)")));
    }
    Ok(())
}

/// Soft-target cross-entropy: weight `1−δ` on the true class and `δ/(N−1)` on every other class.
pub fn label_smoothing_soft_targets(p: &Tensor, y: &[usize], delta: f64) -> Result<LossValue> {
    check_smoothing(delta)?;
    let (b, classes) = p.dims2("label_smoothing")?;
    check_labels("class label", y, b, classes)?;
    let off = delta / (classes - 1) as f64;
    let mut clamped = 0;
    let total: f64 = (0..b)
        .map(|i| {
            let row = p.row(i);
            let mut acc = (1.0 - delta) * clamped_ln(row[y[i]], &mut clamped);
            for (c, &q) in row.iter().enumerate() {
                if c != y[i] {
                    acc += off * clamped_ln(q, &mut clamped);
                }
            }
            -acc
        })
        .sum();
    Ok(LossValue { value: total / b as f64, clamped })
}

/// The same loss rewritten as a rescaled cross-entropy plus a uniform-target term:
/// `−(1−δ−δ/(N−1))·log p_y − Σ_i δ/(N−1)·log p_i`.
pub fn label_smoothing_uniform_form(p: &Tensor, y: &[usize], delta: f64) -> Result<LossValue> {
    check_smoothing(delta)?;
    let (b, classes) = p.dims2("label_smoothing")?;
    check_labels("class label", y, b, classes)?;
    let off = delta / (classes - 1) as f64;
    let mut clamped = 0;
    let total: f64 = (0..b)
        .map(|i| {
            let row = p.row(i);
            let target = -(1.0 - delta - off) * clamped_ln(row[y[i]], &mut clamped);
            let uniform: f64 = row.iter().map(|&q| off * clamped_ln(q, &mut clamped)).sum();
            target - uniform
        })
        .sum();
    Ok(LossValue { value: total / b as f64, clamped })
}

/// A loss node on a tape plus the number of clamped log-probabilities it read.
#[derive(Clone, Copy, Debug)]
pub struct GraphLoss {
    pub node: Var,
    pub clamped: usize,
}

fn clamp_logp(tape: &mut Tape<'_>, logp: Var) -> Var {
    tape.clamp_min(logp, PROB_FLOOR.ln())
}

/// Class loss on `[batch×N]` log-probabilities, label-smoothed when `delta > 0`.
pub fn class_loss_graph(tape: &mut Tape<'_>, class_logp: Var, y: &[usize], delta: f64) -> Result<GraphLoss> {
    check_smoothing(delta)?;
    let (b, classes) = tape.value(class_logp).dims2("class_loss")?;
    check_labels("class label", y, b, classes)?;
    let lp = clamp_logp(tape, class_logp);
    let floor = PROB_FLOOR.ln();
    if delta == 0.0 {
        let clamped = y.iter().enumerate().filter(|&(i, &c)| tape.value(class_logp).row(i)[c] < floor).count();
        let picked = tape.gather(lp, y)?;
        let m = tape.mean(picked);
        return Ok(GraphLoss { node: tape.scale(m, -1.0), clamped });
    }
    let off = delta / (classes - 1) as f64;
    let mut targets = Tensor::full(&[b, classes], off);
    for (i, &c) in y.iter().enumerate() {
        targets.data_mut()[i * classes + c] = 1.0 - delta;
    }
    let clamped = tape.value(class_logp).data().iter().filter(|&&v| v < floor).count();
    let weighted = tape.mul_const(lp, targets)?;
    let total = tape.sum(weighted);
    Ok(GraphLoss { node: tape.scale(total, -1.0 / b as f64), clamped })
}

/// Random-label loss on `[batch×N×n]` log-probabilities.
pub fn rnd_loss_graph(tape: &mut Tape<'_>, rnd_logp: Var, y: &[usize], s: &[usize]) -> Result<GraphLoss> {
    let shape = tape.shape(rnd_logp).to_vec();
    let [b, classes, n] = shape[..] else {
        return Err(Error::dim("rnd_loss", format!("expected [batch×N×n], got {shape:?}")));
    };
    check_labels("class label", y, b, classes)?;
    check_labels("random label", s, b, n)?;
    let index: Vec<usize> = y.iter().zip(s).map(|(&c, &r)| c * n + r).collect();
    let floor = PROB_FLOOR.ln();
    let clamped = index.iter().enumerate().filter(|&(i, &k)| tape.value(rnd_logp).row(i)[k] < floor).count();
    let lp = clamp_logp(tape, rnd_logp);
    let flat = tape.reshape(lp, &[b, classes * n])?;
    let picked = tape.gather(flat, &index)?;
    let m = tape.mean(picked);
    Ok(GraphLoss { node: tape.scale(m, -1.0), clamped })
}

/// Regularization loss on `[batch×N×n]` log-probabilities.
pub fn reg_loss_graph(tape: &mut Tape<'_>, rnd_logp: Var, y: &[usize]) -> Result<GraphLoss> {
    let shape = tape.shape(rnd_logp).to_vec();
    let [b, classes, _] = shape[..] else {
        return Err(Error::dim("reg_loss", format!("expected [batch×N×n], got {shape:?}")));
    };
    check_labels("class label", y, b, classes)?;
    let lp = clamp_logp(tape, rnd_logp);
    let head = tape.gather_group(lp, y)?;
    let floor = PROB_FLOOR.ln();
    let clamped = tape.value(head).data().iter().filter(|&&v| v <= floor).count();
    let m = tape.mean(head);
    Ok(GraphLoss { node: tape.scale(m, -1.0), clamped })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Class,
    Rnd,
    Reg,
}

/// The routing that implements the training contract for one loss.
pub fn loss_routing(kind: LossKind, outputs: &HeadOutputs) -> Routing {
    match kind {
        LossKind::Class => Routing::all(),
        LossKind::Rnd => Routing::all().sever(outputs.features),
        LossKind::Reg => Routing::all().freeze(Owner::RndHeads),
    }
}

/// Loss nodes from one forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBundle {
    pub class: Option<GraphLoss>,
    pub rnd: Option<GraphLoss>,
    pub reg: Option<GraphLoss>,
}

impl LossBundle {
    /// Builds every loss the outputs support.
    pub fn build(
        tape: &mut Tape<'_>,
        outputs: &HeadOutputs,
        y: &[usize],
        s: Option<&[usize]>,
        label_smoothing: f64,
    ) -> Result<Self> {
        let class = outputs.class_logp.map(|lp| class_loss_graph(tape, lp, y, label_smoothing)).transpose()?;
        let (rnd, reg) = match outputs.rnd_logp {
            Some(lp) => {
                let s = s.ok_or_else(|| Error::Usage("random heads present but no random labels supplied".into()))?;
                (Some(rnd_loss_graph(tape, lp, y, s)?), Some(reg_loss_graph(tape, lp, y)?))
            }
            None => (None, None),
        };
        Ok(Self { class, rnd, reg })
    }

    pub fn clamped(&self) -> usize {
        [self.class, self.rnd, self.reg].iter().flatten().map(|l| l.clamped).sum()
    }
}

/// One backward pass: its root, routing, and the parameter groups it updates.
#[derive(Clone, Debug)]
pub struct RoutedPass {
    pub root: Var,
    pub routing: Routing,
    pub trains: Vec<Owner>,
}

/// Composes the per-group objectives.
///
/// * multi-head: feature extractor and class head on `class + λ·reg` (heads
///   frozen), random heads on `rnd` (severed at the features);
/// * single-output: feature extractor on `reg` alone, random heads on `rnd`;
/// * baseline: everything on `class`.
///
/// With `λ = 0` the regularizer is left off the graph entirely, so the first
/// pass performs exactly the arithmetic of baseline training.
pub fn composite_objectives(
    tape: &mut Tape<'_>,
    variant: Variant,
    outputs: &HeadOutputs,
    losses: &LossBundle,
    lambda: f64,
) -> Result<Vec<RoutedPass>> {
    if !(lambda >= 0.0) {
        return Err(Error::config("lambda", format!("λ = {lambda} must be ≥ 0")));
    }
    let missing = |what: &str| Error::Usage(format!("{what} loss missing for variant {variant:?}"));
    let mut passes = Vec::new();
    match variant {
        Variant::Baseline | Variant::Multihead => {
            let class = losses.class.ok_or_else(|| missing("class"))?;
            let mut root = class.node;
            if variant == Variant::Multihead && lambda > 0.0 {
                let reg = losses.reg.ok_or_else(|| missing("reg"))?;
                let scaled = tape.scale(reg.node, lambda);
                root = tape.add(root, scaled)?;
            }
            passes.push(RoutedPass {
                root,
                routing: Routing::all().freeze(Owner::RndHeads),
                trains: vec![Owner::FeatureExtractor, Owner::ClassHead],
            });
        }
        Variant::SingleOutput => {
            let reg = losses.reg.ok_or_else(|| missing("reg"))?;
            passes.push(RoutedPass {
                root: reg.node,
                routing: loss_routing(LossKind::Reg, outputs),
                trains: vec![Owner::FeatureExtractor],
            });
        }
    }
    if variant.has_rnd_heads() {
        let rnd = losses.rnd.ok_or_else(|| missing("rnd"))?;
        passes.push(RoutedPass {
            root: rnd.node,
            routing: loss_routing(LossKind::Rnd, outputs),
            trains: vec![Owner::RndHeads],
        });
    }
    Ok(passes)
}

/// Runs every routed pass and merges the gradients, keeping only each pass's own groups.
pub fn backward_routed(tape: &mut Tape<'_>, passes: &[RoutedPass]) -> Result<Gradients> {
    let mut merged = Vec::new();
    for pass in passes {
        let grads = tape.backward(pass.root, &pass.routing)?;
        for (id, g) in grads.iter() {
            if pass.trains.contains(&tape.store().get(id).owner) {
                merged.push((id, g.clone()));
            }
        }
    }
    Ok(Gradients::from_pairs(merged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_probs(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let logits = Tensor::from_fn(shape, |_| rng.random_range(-3.0..3.0));
        logits.softmax().unwrap()
    }

    #[test]
    fn class_loss_values() {
        let uniform = Tensor::full(&[3, 4], 0.25);
        assert!((class_loss(&uniform, &[0, 1, 3]).unwrap().value - 4f64.ln()).abs() < 1e-12);
        let onehot = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let v = class_loss(&onehot, &[1]).unwrap();
        assert_eq!(v.value, 0.0);
        let p = Tensor::new(vec![1, 2], vec![0.3, 0.7]).unwrap();
        assert!((class_loss(&p, &[1]).unwrap().value - 0.356_674_943_938_732_4).abs() < 1e-12);
    }

    #[test]
    fn clamping_is_counted() {
        let p = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let v = class_loss(&p, &[0]).unwrap();
        assert_eq!(v.clamped, 1);
        assert!((v.value + PROB_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn rnd_loss_values() {
        let uniform = Tensor::full(&[2, 3, 10], 0.1);
        assert!((rnd_loss(&uniform, &[0, 2], &[4, 9]).unwrap().value - 10f64.ln()).abs() < 1e-12);
        let mut p = Tensor::zeros(&[2, 1, 4]);
        p.data_mut()[..4].copy_from_slice(&[0.5, 0.5, 0.0, 0.0]);
        p.data_mut()[4..].copy_from_slice(&[0.25, 0.25, 0.25, 0.25]);
        let v = rnd_loss(&p, &[0, 0], &[1, 3]).unwrap().value;
        assert!((v - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-12);
        assert!((v - 1.0397).abs() < 1e-4);
        assert!(rnd_loss(&p, &[0, 0], &[1, 4]).is_err());
    }

    #[test]
    fn reg_loss_values() {
        let uniform = Tensor::full(&[3, 2, 5], 0.2);
        assert!((reg_loss(&uniform, &[0, 1, 1]).unwrap().value - 5f64.ln()).abs() < 1e-12);
        let p = Tensor::new(vec![1, 1, 2], vec![0.9, 0.1]).unwrap();
        let v = reg_loss(&p, &[0]).unwrap().value;
        assert!((v - 1.203_972_804_325_936).abs() < 1e-12);
        assert!(v > 2f64.ln());
    }

    #[test]
    fn label_smoothing_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_probs(&mut rng, &[8, 6]);
        let y = [0, 5, 2, 2, 1, 3, 4, 0];
        assert_eq!(label_smoothing_soft_targets(&p, &y, 0.0).unwrap().value, class_loss(&p, &y).unwrap().value);
        let a = label_smoothing_soft_targets(&p, &y, 0.3).unwrap().value;
        let b = label_smoothing_uniform_form(&p, &y, 0.3).unwrap().value;
        assert!((a - b).abs() < 1e-12);

        let p2 = Tensor::new(vec![1, 2], vec![0.2, 0.8]).unwrap();
        let v = label_smoothing_soft_targets(&p2, &[1], 0.5).unwrap().value;
        assert!((v + 0.5 * (0.8f64.ln() + 0.2f64.ln())).abs() < 1e-15);
        assert!(label_smoothing_soft_targets(&p2, &[1], 1.0).is_err());
    }

    #[test]
    fn graph_losses_match_probability_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let store = crate::params::ParamStore::new();
        let mut tape = Tape::new(&store);
        let logits = Tensor::from_fn(&[5, 3, 4], |_| rng.random_range(-2.0..2.0));
        let class_logits = Tensor::from_fn(&[5, 3], |_| rng.random_range(-2.0..2.0));
        let y = [0, 2, 1, 1, 0];
        let s = [3, 0, 1, 2, 2];
        let lp = tape.input(logits.log_softmax().unwrap());
        let clp = tape.input(class_logits.log_softmax().unwrap());
        let p_hat = logits.softmax().unwrap();
        let p = class_logits.softmax().unwrap();

        let r = rnd_loss_graph(&mut tape, lp, &y, &s).unwrap();
        assert!((tape.value(r.node).item().unwrap() - rnd_loss(&p_hat, &y, &s).unwrap().value).abs() < 1e-12);
        let g = reg_loss_graph(&mut tape, lp, &y).unwrap();
        assert!((tape.value(g.node).item().unwrap() - reg_loss(&p_hat, &y).unwrap().value).abs() < 1e-12);
        let c = class_loss_graph(&mut tape, clp, &y, 0.0).unwrap();
        assert!((tape.value(c.node).item().unwrap() - class_loss(&p, &y).unwrap().value).abs() < 1e-12);
        let ls = class_loss_graph(&mut tape, clp, &y, 0.2).unwrap();
        let expect = label_smoothing_soft_targets(&p, &y, 0.2).unwrap().value;
        assert!((tape.value(ls.node).item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn batch_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p_hat = random_probs(&mut rng, &[4, 2, 3]);
        let y = [0, 1, 1, 0];
        let s = [2, 0, 1, 1];
        let perm = [2, 0, 3, 1];
        let pp = p_hat.select_rows(&perm);
        let yp: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
        let sp: Vec<usize> = perm.iter().map(|&i| s[i]).collect();
        let a = rnd_loss(&p_hat, &y, &s).unwrap().value;
        let b = rnd_loss(&pp, &yp, &sp).unwrap().value;
        assert!((a - b).abs() < 1e-14);
        let a = reg_loss(&p_hat, &y).unwrap().value;
        let b = reg_loss(&pp, &yp).unwrap().value;
        assert!((a - b).abs() < 1e-14);
    }
}
