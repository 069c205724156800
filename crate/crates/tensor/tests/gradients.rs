//! Central finite-difference checks (step 1e-5) for every differentiable op,
//! 20 random points each.

use lgn_tensor::{check_gradients, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const POINTS: u64 = 20;

/// Reduces any tensor to a scalar through a fixed random weighting so every
/// output element contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> lgn_tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(Tensor::randn(tape.shape(v).to_vec(), &mut rng));
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

fn check<F>(name: &str, shapes: &[Vec<usize>], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> lgn_tensor::Result<Var>,
{
    for seed in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s.clone(), &mut rng)).collect();
        let report = check_gradients(|t, v| f(t, v), &inputs, STEP).unwrap();
        assert!(
            report.max_relative_error() < TOL,
            "{name} seed {seed}: relative errors {:?}",
            report.relative_errors
        );
    }
}

#[test]
fn elementwise_and_matrix_ops() {
    check("add/sub/mul", &[vec![3, 4], vec![3, 4]], |t, v| {
        let a = t.add(v[0], v[1])?;
        let s = t.sub(a, v[1])?;
        let m = t.mul(s, v[1])?;
        weighted_sum(t, m, 1)
    });
    check("matmul/transpose", &[vec![3, 5], vec![5, 2]], |t, v| {
        let m = t.matmul(v[0], v[1])?;
        let tr = t.transpose(m)?;
        weighted_sum(t, tr, 2)
    });
    check("reshape/mean/scale", &[vec![2, 6]], |t, v| {
        let r = t.reshape(v[0], &[3, 4])?;
        let sq = t.mul(r, r)?;
        let m = t.mean(sq);
        Ok(t.scale(m, 3.0))
    });
    check("frobenius", &[vec![4, 4]], |t, v| t.frobenius(v[0]));
    check("log/sqrt/clamp", &[vec![6]], |t, v| {
        let sq = t.mul(v[0], v[0])?;
        let c = t.clamp_min(sq, 0.05);
        let l = t.log(c)?;
        let s = t.sqrt(c)?;
        let both = t.add(l, s)?;
        weighted_sum(t, both, 3)
    });
}

#[test]
fn soft_threshold_both_variants() {
    for one_sided in [false, true] {
        check("soft_threshold", &[vec![2, 3, 4, 4], vec![3]], |t, v| {
            // lambda = 0.1 + lambda_raw^2 / 4
            let sq = t.mul(v[1], v[1])?;
            let scaled = t.scale(sq, 0.25);
            let off = t.constant(Tensor::full([3], 0.1));
            let lam = t.add(scaled, off)?;
            let y = t.soft_threshold(v[0], lam, one_sided)?;
            weighted_sum(t, y, 4)
        });
    }
}

#[test]
fn convolutions() {
    for k in [3, 6] {
        check("conv2d", &[vec![2, 2, 7, 7], vec![3, 2, k, k]], |t, v| {
            let y = t.conv2d(v[0], v[1])?;
            weighted_sum(t, y, 5)
        });
        check("conv2d_adjoint", &[vec![2, 3, 7, 7], vec![3, 2, k, k]], |t, v| {
            let y = t.conv2d_adjoint(v[0], v[1])?;
            weighted_sum(t, y, 6)
        });
    }
}

#[test]
fn normalisation_pooling_and_heads() {
    check("batch_norm", &[vec![3, 2, 4, 4], vec![2], vec![2]], |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y, 7)
    });
    check("batch_norm_eval", &[vec![3, 2, 4, 4], vec![2], vec![2]], |t, v| {
        let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.3, -0.2], &[1.5, 0.7], 1e-5)?;
        weighted_sum(t, y, 8)
    });
    check("adaptive_avg_pool", &[vec![2, 3, 7, 6]], |t, v| {
        let y = t.adaptive_avg_pool(v[0], 4, 4)?;
        weighted_sum(t, y, 9)
    });
    check("add_bias/cross_entropy", &[vec![4, 5], vec![5]], |t, v| {
        let z = t.add_bias(v[0], v[1])?;
        t.cross_entropy(z, &[0, 4, 2, 2])
    });
}

#[test]
fn singular_values() {
    check("sum of singular values", &[vec![6, 6]], |t, v| {
        let s = t.singular_values(v[0])?;
        Ok(t.sum(s))
    });
    check("log of singular values", &[vec![5, 5]], |t, v| {
        let s = t.singular_values(v[0])?;
        let c = t.clamp_min(s, 1e-12);
        let l = t.log(c)?;
        weighted_sum(t, l, 10)
    });
}

#[test]
fn vectorisation_ops() {
    check("vec_columns/assemble_bank", &[vec![3, 2, 4], vec![8, 8]], |t, v| {
        let cols = t.vec_columns(v[0])?;
        let next = t.matmul(v[1], cols)?;
        let bank = t.assemble_bank(&[cols, next], 2, 4)?;
        weighted_sum(t, bank, 11)
    });
}

#[test]
fn gradients_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x = Tensor::randn([4, 2, 8, 8], &mut rng);
    let w = Tensor::randn([5, 2, 6, 6], &mut rng);
    let run = || {
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone()), t.leaf(w.clone()));
        let y = t.conv2d(xv, wv).unwrap();
        let r = t.conv2d_adjoint(y, wv).unwrap();
        let sq = t.mul(r, r).unwrap();
        let l = t.sum(sq);
        t.backward(l).unwrap().get(wv).unwrap().clone()
    };
    let a = run();
    let b = run();
    assert_eq!(a.data(), b.data());
}
