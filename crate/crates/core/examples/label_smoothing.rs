//! The two algebraic forms of the label-smoothed loss agree; δ = 0 is plain cross-entropy.

use randlabel::losses::{class_loss, label_smoothing_soft_targets, label_smoothing_uniform_form};
use randlabel::tensor::Tensor;

fn main() -> randlabel::Result<()> {
    let p = Tensor::new(vec![2, 3], vec![0.7, 0.2, 0.1, 0.05, 0.15, 0.8])?;
    let y = [0, 2];
    println!("cross-entropy {:.6}", class_loss(&p, &y)?.value);
    for delta in [0.0, 0.1, 0.3, 0.6] {
        let a = label_smoothing_soft_targets(&p, &y, delta)?.value;
        let b = label_smoothing_uniform_form(&p, &y, delta)?.value;
        println!("δ={delta:.1}  soft targets {a:.6}  uniform form {b:.6}  |diff| {:.1e}", (a - b).abs());
    }
    Ok(())
}
