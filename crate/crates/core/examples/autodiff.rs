//! Differentiate a small network loss, check it against central finite
//! differences, and take a second-order gradient through `grad_norm_sq`.

use netinv::{seed, Tape, Tensor};
use rand::Rng;

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn loss(tape: &Tape, w: &Tensor, x: &Tensor) -> netinv::Result<f64> {
    let w = tape.constant(w.clone());
    let x = tape.constant(x.clone());
    let logits = tape.matmul(x, w)?;
    let lp = tape.log_softmax(logits)?;
    tape.item(tape.neg(tape.mean(lp)))
}

fn main() -> netinv::Result<()> {
    let mut rng = seed::from_seed(0);
    let x = Tensor::from_fn(&[4, 5], |_| rng.random_range(-1.0..1.0));
    let w = Tensor::from_fn(&[5, 3], |_| rng.random_range(-1.0..1.0));

    let tape = Tape::new();
    let wv = tape.param(w.clone());
    let xv = tape.constant(x.clone());
    let logits = tape.matmul(xv, tape.sigmoid(wv))?;
    let lp = tape.log_softmax(logits)?;
    let out = tape.neg(tape.mean(lp));
    let grads = tape.backward(out)?;
    let analytic = grads.get(wv).expect("w reaches the loss");

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..w.len() {
        let (mut plus, mut minus) = (w.clone(), w.clone());
        plus.data_mut()[i] += h;
        minus.data_mut()[i] -= h;
        let numeric = (loss(&tape, &plus.map(sigmoid), &x)? - loss(&tape, &minus.map(sigmoid), &x)?) / (2.0 * h);
        worst = worst.max((numeric - analytic.data()[i]).abs());
    }
    println!("loss {:.6}, largest |analytic - finite difference| {worst:.2e}", tape.item(out)?);

    let penalty = tape.grad_norm_sq(out, &[wv])?;
    let second = tape.gradients(penalty, &[wv], false)?;
    let g2 = second[0].map(|g| tape.value(g)).expect("penalty depends on w");
    println!("grad_norm_sq {:.6}, its gradient has norm {:.6}", tape.item(penalty)?, g2.data().iter().map(|v| v * v).sum::<f64>().sqrt());
    Ok(())
}
