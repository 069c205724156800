use lgn::group::{best_left_multiplier, corner_swap, linear_map_to_matrix, GroupAction};
use lgn::tensor::Tensor;
use lgn::vectorize::{vec, vec_inv, vec_inv_kronecker};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn inverse(a: &Tensor) -> Tensor {
    let (r, c) = a.dims2().unwrap();
    let m = DMatrix::from_row_slice(r, c, a.data());
    let inv = m.try_inverse().expect("invertible");
    Tensor::from_fn2(r, c, |i, j| inv[(i, j)])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn action_is_linear(seed in any::<u64>(), n in 1usize..7, m in 1usize..7, a in -4.0f64..4.0, b in -4.0f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = GroupAction::from_generator(Tensor::randn([n * m, n * m], &mut rng), 3, n, m).unwrap();
        let (x, y) = (Tensor::randn([n, m], &mut rng), Tensor::randn([n, m], &mut rng));
        let lhs = g.apply(&x.scale(a).add(&y.scale(b)).unwrap()).unwrap();
        let rhs = g.apply(&x).unwrap().scale(a).add(&g.apply(&y).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().norm() <= 1e-12 * rhs.norm().max(1e-300));
    }

    #[test]
    fn probing_recovers_the_generator(seed in any::<u64>(), n in 1usize..6, m in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Tensor::randn([n * m, n * m], &mut rng);
        let g = GroupAction::from_generator(b.clone(), 2, n, m).unwrap();
        prop_assert_eq!(linear_map_to_matrix(|x| g.apply(x), n, m).unwrap(), b);
    }

    #[test]
    fn vec_inv_matches_kronecker_form(seed in any::<u64>(), n in 1usize..6, m in 1usize..6) {
        let a = Tensor::randn([n * m], &mut ChaCha8Rng::seed_from_u64(seed));
        let direct = vec_inv(&a, n, m).unwrap();
        prop_assert_eq!(&direct, &vec_inv_kronecker(&a, n, m).unwrap());
        prop_assert_eq!(vec(&direct).unwrap(), a);
    }

    #[test]
    fn orbit_unwinds_through_the_inverse(seed in any::<u64>(), order in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = GroupAction::near_identity(order, 4, 3, 0.05, &mut rng).unwrap();
        let orbit = g.expand_orbit(&Tensor::randn([4, 3], &mut rng)).unwrap();
        let back = GroupAction::from_generator(inverse(&g.generator), order, 4, 3).unwrap();
        let mut x = orbit.expanded[order - 1].clone();
        for j in (0..order - 1).rev() {
            x = back.apply(&x).unwrap();
            prop_assert!(x.max_abs_diff(&orbit.expanded[j]) < 1e-8);
        }
    }
}

#[test]
fn corner_swap_is_linear_but_not_a_left_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for m in [2, 3, 6] {
        let a = linear_map_to_matrix(corner_swap, 6, m).unwrap();
        assert_eq!(a.shape(), &[6 * m, 6 * m]);
        let xs: Vec<Tensor> = (0..20 * m).map(|_| Tensor::randn([6, m], &mut rng)).collect();
        let ys: Vec<Tensor> = xs.iter().map(|x| corner_swap(x).unwrap()).collect();
        let (_, residual) = best_left_multiplier(&xs, &ys).unwrap();
        assert!(residual > 0.1, "m = {m}: residual {residual}");
    }
}

#[test]
fn nonlinear_maps_are_rejected() {
    let err = linear_map_to_matrix(|x| Ok(x.map(|v| v * v)), 3, 3).unwrap_err();
    assert!(err.to_string().contains("linear"), "{err}");
}
