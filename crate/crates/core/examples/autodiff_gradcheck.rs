//! Differentiates a small expression on the tape and compares every entry
//! of the gradient with central differences.

use ndarray::array;
use neural_sl::autodiff::{Mat, Tape};

fn loss(x: &Mat, w: &Mat) -> neural_sl::Result<(f64, Mat)> {
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let wv = tape.constant(w.clone());
    let h = tape.matmul(xv, wv)?;
    let h = tape.softplus(h, 10.0);
    let s = tape.sin(h);
    let sq = tape.square(s);
    let l = tape.mean(sq);
    let grads = tape.backward(l)?;
    Ok((tape.scalar(l), grads.wrt(xv)))
}

fn main() -> neural_sl::Result<()> {
    let x = array![[0.3, -0.7, 1.1], [0.05, 0.4, -0.2]];
    let w = array![[0.5, -1.0], [0.25, 0.8], [-0.6, 0.1]];
    let (value, grad) = loss(&x, &w)?;
    println!("loss {value:.9}");

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for ((r, c), g) in grad.indexed_iter() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[[r, c]] += h;
        minus[[r, c]] -= h;
        let fd = (loss(&plus, &w)?.0 - loss(&minus, &w)?.0) / (2.0 * h);
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
        println!("d/dx[{r},{c}]  tape {g:+.9}  fd {fd:+.9}  rel {rel:.1e}");
    }
    println!("worst relative error {worst:.2e}");
    Ok(())
}
