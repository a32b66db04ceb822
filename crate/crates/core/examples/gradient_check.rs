//! Finite-difference check of a multi-head toy_mlp's full training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use randlabel::gradcheck::check;
use randlabel::heads::{ForwardRngs, HeadConfig, MultiHeadModel};
use randlabel::losses::LossBundle;
use randlabel::network::{InputShape, Mode, ModelSpec};
use randlabel::tensor::Tensor;

fn main() -> randlabel::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let spec = ModelSpec::toy_mlp(InputShape::Features(5), [6, 4], 3, 0.0);
    let heads = HeadConfig { rnd_labels: 4, copy_depth: 2, ..HeadConfig::default() };
    let mut head_rng = ChaCha8Rng::seed_from_u64(1);
    let model = MultiHeadModel::build(&spec, heads, &mut rng, &mut head_rng)?;

    let x = Tensor::from_fn(&[4, 5], |_| rng.random_range(-1.0..1.0));
    let (y, s) = (vec![0, 2, 1, 2], vec![3, 0, 1, 1]);
    let (lambda, delta) = (0.5, 0.1);
    let report = check(
        &model.store,
        |t| {
            let xv = t.input(x.clone());
            let (mut a, mut b) = (ChaCha8Rng::seed_from_u64(0), ChaCha8Rng::seed_from_u64(0));
            let out = model.forward_graph(t, xv, Mode::Eval, ForwardRngs { base: &mut a, heads: &mut b })?;
            let l = LossBundle::build(t, &out, &y, Some(&s), delta)?;
            let reg = t.scale(l.reg.unwrap().node, lambda);
            let total = t.add(l.class.unwrap().node, reg)?;
            t.add(total, l.rnd.unwrap().node)
        },
        1e-5,
    )?;
    println!("parameters      {}", model.store.len());
    println!("coordinates     {}", report.checked);
    println!("kinks skipped   {}", report.kinks);
    println!("max rel error   {:.3e}", report.max_rel_error);
    Ok(())
}
