mod common;

use common::uniform;
use proptest::prelude::*;
use snnet_core::tensor::linalg::{matmul, softmax_rows};
use snnet_core::tensor::{Graph, Tensor};

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// The reverse pass of a linear op is its adjoint: <A x, y> = <x, A^T y>.
    #[test]
    fn conv_backward_is_adjoint(
        t in 1usize..7, f in 1usize..9, cin in 1usize..4, cout in 1usize..4,
        kh in prop::sample::select(vec![1usize, 3, 5]), kw in prop::sample::select(vec![1usize, 3, 5, 7]),
        st in 1usize..3, sf in 1usize..3, seed in 0u64..10_000,
    ) {
        let x = uniform(&[2, t, f, cin], -1.0, 1.0, seed);
        let w = uniform(&[kh, kw, cin, cout], -1.0, 1.0, seed + 1);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let wv = g.constant(w);
        let bv = g.constant(Tensor::zeros(&[cout]));
        let out = g.conv2d(xv, wv, bv, (st, sf)).unwrap();
        let shape = g.value(out).shape().to_vec();
        prop_assert_eq!(&shape, &vec![2, t.div_ceil(st), f.div_ceil(sf), cout]);
        let y = uniform(&shape, -1.0, 1.0, seed + 2);
        let lhs = dot(g.value(out), &y);
        let grads = g.backward_with(out, y).unwrap();
        let rhs = dot(&x, grads.get(xv).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn deconv_backward_is_adjoint(
        t in 1usize..6, f in 1usize..6, cin in 1usize..4, cout in 1usize..4,
        sf in 1usize..3, seed in 0u64..10_000,
    ) {
        let x = uniform(&[1, t, f, cin], -1.0, 1.0, seed);
        let w = uniform(&[3, 3, cout, cin], -1.0, 1.0, seed + 1);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let wv = g.constant(w);
        let bv = g.constant(Tensor::zeros(&[cout]));
        let out = g.conv_transpose2d(xv, wv, bv, (1, sf)).unwrap();
        let shape = g.value(out).shape().to_vec();
        prop_assert_eq!(&shape, &vec![1, t, f * sf, cout]);
        let y = uniform(&shape, -1.0, 1.0, seed + 2);
        let lhs = dot(g.value(out), &y);
        let grads = g.backward_with(out, y).unwrap();
        let rhs = dot(&x, grads.get(xv).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in 0u64..10_000) {
        let a = uniform(&[2, m, k], -1.0, 1.0, seed);
        let b = uniform(&[2, k, n], -1.0, 1.0, seed + 1);
        let c = matmul(&a, &b, false, false).unwrap();
        for p in 0..2 {
            for i in 0..m {
                for j in 0..n {
                    let want: f64 = (0..k).map(|l| a.data()[p * m * k + i * k + l] * b.data()[p * k * n + l * n + j]).sum();
                    prop_assert!((c.data()[p * m * n + i * n + j] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, scale in 0.1f64..500.0, seed in 0u64..10_000) {
        let x = uniform(&[rows, cols], -scale, scale, seed);
        let y = softmax_rows(&x);
        for r in y.data().chunks(cols) {
            prop_assert!(r.iter().all(|v| v.is_finite() && *v >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn f32_and_f64_forward_agree() {
    let x = uniform(&[1, 4, 6, 2], -1.0, 1.0, 3);
    let w = uniform(&[3, 5, 2, 3], -1.0, 1.0, 4);
    let b = uniform(&[3], -1.0, 1.0, 5);
    let run = |g: &mut Graph<f32>| {
        let (xv, wv, bv) = (g.constant(x.cast()), g.constant(w.cast()), g.constant(b.cast()));
        g.conv2d(xv, wv, bv, (1, 2)).unwrap()
    };
    let mut g32 = Graph::<f32>::new();
    let o32 = run(&mut g32);
    let mut g64 = Graph::<f64>::new();
    let (xv, wv, bv) = (g64.constant(x.clone()), g64.constant(w.clone()), g64.constant(b.clone()));
    let o64 = g64.conv2d(xv, wv, bv, (1, 2)).unwrap();
    assert!(g32.value(o32).cast::<f64>().max_abs_diff(g64.value(o64)) < 1e-5);
}
