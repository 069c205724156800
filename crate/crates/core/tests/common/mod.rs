//! Oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use lgn::unfolded::{training_loss, LossConfig, UnfoldedNetwork};
use lgn_tensor::{Tape, Tensor};

/// Dense matrix of stride-1 zero-padded "same" cross-correlation, mapping
/// `vec(x)` (row-major `[C, H, W]`) to row-major `[P, H, W]` codes, built
/// directly from the index formula
/// `out[p, i, j] = sum x[c, i + a - (kh-1)/2, j + b - (kw-1)/2] w[p, c, a, b]`.
pub fn dense_correlation(bank: &Tensor, h: usize, w: usize) -> Tensor {
    let [p, c, kh, kw] = bank.shape()[..] else {
        panic!("bank must be rank 4")
    };
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut d = Tensor::zeros([p * h * w, c * h * w]);
    for o in 0..p {
        for i in 0..h {
            for j in 0..w {
                let row = (o * h + i) * w + j;
                for ci in 0..c {
                    for a in 0..kh {
                        for b in 0..kw {
                            let (r, s) = (i + a, j + b);
                            if r < ph || s < pw || r - ph >= h || s - pw >= w {
                                continue;
                            }
                            let col = (ci * h + r - ph) * w + s - pw;
                            let v = d.get(&[row, col]) + bank.get(&[o, ci, a, b]);
                            d.set(&[row, col], v);
                        }
                    }
                }
            }
        }
    }
    d
}

pub fn soft(u: f64, lambda: f64, one_sided: bool) -> f64 {
    if one_sided {
        (u - lambda).max(0.0)
    } else {
        u.signum() * (u.abs() - lambda).max(0.0)
    }
}

/// `S_λ((I - α D Dᵀ) z + α D x)` evaluated with dense matrices, for a single
/// image; `lambda` holds one threshold per code channel.
pub fn residual_form(d: &Tensor, x: &[f64], z: &[f64], step: f64, lambda: &[f64], one_sided: bool) -> Vec<f64> {
    let dt = d.transpose().unwrap();
    let ddt = d.matmul(&dt).unwrap();
    let n = z.len();
    let wz = Tensor::eye(n).sub(&ddt.scale(step)).unwrap();
    let wx = d.scale(step);
    let zt = Tensor::new([n, 1], z.to_vec()).unwrap();
    let xt = Tensor::new([x.len(), 1], x.to_vec()).unwrap();
    let pre = wz.matmul(&zt).unwrap().add(&wx.matmul(&xt).unwrap()).unwrap();
    let per_channel = n / lambda.len();
    pre.data()
        .iter()
        .enumerate()
        .map(|(i, &u)| soft(u, lambda[i / per_channel], one_sided))
        .collect()
}

/// `½‖x − Dᵀz‖² + λ‖z‖₁`.
pub fn lasso_objective(d: &Tensor, x: &[f64], z: &[f64], lambda: f64) -> f64 {
    let zt = Tensor::new([z.len(), 1], z.to_vec()).unwrap();
    let synth = d.transpose().unwrap().matmul(&zt).unwrap();
    let fit: f64 = synth.data().iter().zip(x).map(|(s, x)| (x - s).powi(2)).sum();
    0.5 * fit + lambda * z.iter().map(|v| v.abs()).sum::<f64>()
}

/// Per-parameter relative error `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖, 1e-8)` between
/// tape gradients of the training loss and central differences.
pub fn network_gradcheck(net: &UnfoldedNetwork, x: &Tensor, labels: &[usize], loss: LossConfig, step: f64) -> Vec<(String, f64)> {
    let value = |n: &UnfoldedNetwork| -> f64 {
        let mut tape = Tape::new();
        let l = training_loss(n, &mut tape, x, labels, loss).unwrap();
        tape.value(l.total).item().unwrap()
    };
    let mut tape = Tape::new();
    let l = training_loss(net, &mut tape, x, labels, loss).unwrap();
    let grads = tape.backward(l.total).unwrap();
    let names: Vec<(String, Vec<usize>)> = net
        .parameters()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let mut out = Vec::new();
    for (p, (name, shape)) in names.iter().enumerate() {
        let analytic = grads.get_or_zeros(l.forward.params.all[p], shape);
        let mut numeric = Vec::with_capacity(analytic.len());
        for e in 0..analytic.len() {
            let mut plus = net.clone();
            plus.parameters_mut()[p].data_mut()[e] += step;
            let mut minus = net.clone();
            minus.parameters_mut()[p].data_mut()[e] -= step;
            numeric.push((value(&plus) - value(&minus)) / (2.0 * step));
        }
        let numeric = Tensor::new(shape.clone(), numeric).unwrap();
        let err = analytic.sub(&numeric).unwrap().norm() / analytic.norm().max(numeric.norm()).max(1e-8);
        out.push((name.clone(), err));
    }
    out
}
