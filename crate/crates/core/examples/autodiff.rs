//! Builds a tiny expression graph and reads gradients back.
//!
//! `cargo run --example autodiff`

use melseg::tensor::{Graph, PadMode, Tensor};

fn main() -> anyhow::Result<()> {
    let g = Graph::<f64>::new();

    // loss = sum(tanh(W x)) for a 2x3 W and 3x1 x
    let w = g.param(Tensor::from_rows(&[vec![0.1, -0.2, 0.3], vec![0.5, 0.4, -0.6]])?);
    let x = g.constant(Tensor::new(vec![3, 1], vec![1.0, 2.0, -1.0])?);
    let y = g.tanh(g.matmul(w, x)?);
    let loss = g.sum(y);
    let grads = g.backward(loss)?;
    println!("loss      {:.6}", g.value(loss).item());
    println!("dloss/dW  {:?}", grads.get(w).map(|t| t.data().to_vec()));

    // a causal convolution: output t only sees inputs 0..=t
    // (backward consumes a graph, so record a fresh one)
    let g = Graph::<f64>::new();
    let signal = g.param(Tensor::new(vec![1, 6], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0])?);
    let kernel = g.param(Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0])?);
    let bias = g.param(Tensor::zeros(&[1]));
    let out = g.conv1d(signal, kernel, bias, PadMode::Causal)?;
    println!("causal conv of an impulse at t=3: {:?}", g.value(out).data());

    let probe = g.slice(out, 1, 2..3)?;
    let grads = g.backward(g.sum(probe))?;
    println!("d out[2] / d signal: {:?}", grads.get(signal).map(|t| t.data().to_vec()));
    Ok(())
}
