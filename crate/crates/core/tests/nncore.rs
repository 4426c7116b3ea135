use mixtts_core::nn::{dropout, grad_check, linear, lstm_step, Graph, LstmParams, LstmVars, NnError, NormStats, Tensor};
use mixtts_core::verify::{check_block, check_primitive, BLOCKS, PRIMITIVES};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn every_primitive_passes_gradient_check_over_twenty_seeds() {
    for &name in PRIMITIVES {
        let worst = (0..20).map(|s| check_primitive(name, s).unwrap()).fold(0.0, f64::max);
        assert!(worst < 1e-4, "{name}: {worst:e}");
    }
}

#[test]
fn model_blocks_pass_gradient_check() {
    for &name in BLOCKS {
        for seed in 0..3 {
            let err = check_block(name, seed, 4).unwrap();
            assert!(err < 1e-4, "{name} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn softplus_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 40.0, -40.0, 700.0]));
    let y = g.softplus(x);
    let v = g.value(y).data();
    assert!((v[0] - std::f64::consts::LN_2).abs() < 1e-15);
    // ln(1 + e^-40) ≈ 4.25e-18 beyond 40
    assert!((v[1] - 40.0).abs() < 1e-12);
    assert!(v[2] > 0.0 && (v[2] - (-40f64).exp()).abs() < 1e-30);
    assert_eq!(v[3], 700.0);
}

#[test]
fn mse_and_sum_basics() {
    let mut g = Graph::new();
    let x = g.param(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
    let m = g.mse(x, &t(&[2, 2], &[1.0, -2.0, 3.0, 0.5])).unwrap();
    assert_eq!(g.value(m).item(), 0.0);
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get_or_zeros(x, 4), vec![1.0; 4]);
}

#[test]
fn grad_check_of_linear_mse_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut rand = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen::<f64>() - 0.5);
    let y = rand(&[3, 2]);
    let inputs = [rand(&[3, 4]), rand(&[4, 2]), rand(&[2])];
    let err = grad_check(
        |g, v| {
            let p = linear(g, v[0], v[1], v[2])?;
            g.mse(p, &y)
        },
        &inputs,
        1e-5,
        None,
        0,
    )
    .unwrap();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn batch_norm_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ones = Tensor::from_fn(&[3], |_| 1.0);
    let zeros = Tensor::zeros(&[3]);

    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[4, 3], |_| 2.5));
    let (ga, be) = (g.constant(ones.clone()), g.constant(zeros.clone()));
    let y = g.batch_norm(x, ga, be, NormStats::Batch { eps: 1e-5 }).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let data = Tensor::from_fn(&[64, 3], |i| (i % 3) as f64 * 3.0 + rng.gen::<f64>() * (1 + i % 3) as f64);
    let x = g.constant(data.clone());
    let y = g.batch_norm(x, ga, be, NormStats::Batch { eps: 1e-5 }).unwrap();
    let out = g.value(y);
    for c in 0..3 {
        let col: Vec<f64> = (0..64).map(|r| out.data()[r * 3 + c]).collect();
        let mean = col.iter().sum::<f64>() / 64.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-6);
        let raw: Vec<f64> = (0..64).map(|r| data.data()[r * 3 + c]).collect();
        let rm = raw.iter().sum::<f64>() / 64.0;
        let rv = raw.iter().map(|v| (v - rm).powi(2)).sum::<f64>() / 64.0;
        // the epsilon shifts the variance by eps / (var + eps)
        assert!((var - rv / (rv + 1e-5)).abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
    }

    let stats = NormStats::Fixed {
        mean: &[0.0; 3],
        var: &[1.0; 3],
        eps: 0.0,
    };
    let gamma = g.constant(t(&[3], &[2.0, -1.0, 0.5]));
    let beta = g.constant(t(&[3], &[0.1, 0.2, 0.3]));
    let x = g.constant(data.clone());
    let y = g.batch_norm(x, gamma, beta, stats).unwrap();
    for (i, v) in g.value(y).data().iter().enumerate() {
        let (gm, bt) = ([2.0, -1.0, 0.5][i % 3], [0.1, 0.2, 0.3][i % 3]);
        assert!((v - (gm * data.data()[i] + bt)).abs() < 1e-12);
    }

    let one = g.constant(Tensor::zeros(&[1, 3]));
    assert_eq!(
        g.batch_norm(one, ga, be, NormStats::Batch { eps: 1e-5 }).unwrap_err(),
        NnError::DegenerateBatch
    );
}

#[test]
fn lstm_zero_fixed_point() {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = LstmParams {
        wx: g.constant(Tensor::zeros(&[3, 8])),
        wh: g.constant(Tensor::zeros(&[2, 8])),
        b: g.constant(Tensor::zeros(&[8])),
    };
    let x = g.constant(Tensor::from_fn(&[1, 3], |i| i as f64));
    let s = LstmVars {
        h: g.constant(Tensor::zeros(&[1, 2])),
        c: g.constant(Tensor::zeros(&[1, 2])),
    };
    let out = lstm_step(&mut g, x, s, &p, 0.5, &mut rng, true).unwrap();
    assert_eq!(g.value(out.h).data(), &[0.0, 0.0]);
    assert_eq!(g.value(out.c).data(), &[0.0, 0.0]);
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn lstm_two_unit_hand_oracle() {
    // one input feature, two hidden units; gate columns are [i0 i1 f0 f1 g0 g1 o0 o1]
    let wx = [0.5, -0.3, 0.8, 0.1, -0.6, 0.9, 0.2, -0.4];
    let wh = [
        0.1, 0.2, -0.1, 0.3, 0.05, -0.2, 0.4, 0.0, //
        -0.3, 0.1, 0.2, -0.2, 0.3, 0.1, -0.1, 0.25,
    ];
    let b = [0.0, 0.1, 1.0, 1.0, -0.1, 0.0, 0.2, -0.2];
    let (x, h0, c0) = (0.7, [0.2, -0.5], [0.3, 0.1]);

    let mut want_h = [0.0; 2];
    let mut want_c = [0.0; 2];
    for u in 0..2 {
        let z = |gate: usize| {
            let col = gate * 2 + u;
            x * wx[col] + h0[0] * wh[col] + h0[1] * wh[8 + col] + b[col]
        };
        let (i, f, gg, o) = (sig(z(0)), sig(z(1)), z(2).tanh(), sig(z(3)));
        want_c[u] = f * c0[u] + i * gg;
        want_h[u] = o * want_c[u].tanh();
    }

    let mut g = Graph::new();
    let p = LstmParams {
        wx: g.constant(t(&[1, 8], &wx)),
        wh: g.constant(t(&[2, 8], &wh)),
        b: g.constant(t(&[8], &b)),
    };
    let s = LstmVars {
        h: g.constant(t(&[1, 2], &h0)),
        c: g.constant(t(&[1, 2], &c0)),
    };
    let xv = g.constant(t(&[1, 1], &[x]));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = lstm_step(&mut g, xv, s, &p, 1.0, &mut rng, true).unwrap();
    for u in 0..2 {
        assert!((g.value(out.h).data()[u] - want_h[u]).abs() < 1e-12);
        assert!((g.value(out.c).data()[u] - want_c[u]).abs() < 1e-12);
    }
}

#[test]
fn lstm_keep_one_ignores_seed() {
    let mut outs = Vec::new();
    for seed in [0, 1, 99] {
        let mut g = Graph::new();
        let mut init = ChaCha8Rng::seed_from_u64(5);
        let mut rand = |shape: &[usize]| Tensor::from_fn(shape, |_| init.gen::<f64>() - 0.5);
        let p = LstmParams {
            wx: g.constant(rand(&[3, 8])),
            wh: g.constant(rand(&[2, 8])),
            b: g.constant(rand(&[8])),
        };
        let s = LstmVars {
            h: g.constant(rand(&[2, 2])),
            c: g.constant(rand(&[2, 2])),
        };
        let x = g.constant(rand(&[2, 3]));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let active = lstm_step(&mut g, x, s, &p, 1.0, &mut rng, true).unwrap();
        let inactive = lstm_step(&mut g, x, s, &p, 1.0, &mut rng, false).unwrap();
        assert_eq!(g.value(active.c), g.value(inactive.c));
        outs.push(g.value(active.h).clone());
    }
    assert!(outs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn conv_kernel_one_is_per_position_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rand = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen::<f64>() - 0.5);
    let (x, w, b) = (rand(&[6, 4]), rand(&[1, 4, 3]), rand(&[3]));
    let mut g = Graph::new();
    let xv = g.constant(x);
    let wv = g.constant(w.clone());
    let bv = g.constant(b);
    let conv = g.conv1d(xv, wv, bv, &[(0, 2), (2, 4)]).unwrap();
    let w2 = g.constant(w.reshape(&[4, 3]).unwrap());
    let lin = linear(&mut g, xv, w2, bv).unwrap();
    for (a, b) in g.value(conv).data().iter().zip(g.value(lin).data()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn dropout_identity_and_expectation() {
    let x = Tensor::from_fn(&[1, 8], |i| (i as f64 - 3.5) * 0.7);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let same = dropout(&mut g, xv, 1.0, &mut rng, true).unwrap();
    assert_eq!(g.value(same), &x);
    let off = dropout(&mut g, xv, 0.3, &mut rng, false).unwrap();
    assert_eq!(g.value(off), &x);

    let mut sum = vec![0.0; 8];
    let n = 10_000;
    for seed in 0..n {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = dropout(&mut g, xv, 0.5, &mut rng, true).unwrap();
        sum.iter_mut().zip(g.value(y).data()).for_each(|(s, v)| *s += v);
    }
    for (s, v) in sum.iter().zip(x.data()) {
        let mean = s / n as f64;
        assert!((mean - v).abs() <= 0.02 * v.abs(), "{mean} vs {v}");
    }
}

#[test]
fn shape_errors() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(NnError::ShapeMismatch(_))));
    let w = g.constant(Tensor::zeros(&[2, 3, 1]));
    let bias = g.constant(Tensor::zeros(&[1]));
    assert!(g.conv1d(a, w, bias, &[(0, 2)]).is_err());
}

proptest! {
    #[test]
    fn conv_preserves_length(t1 in 1usize..9, t2 in 1usize..9, k in prop::sample::select(vec![1usize, 3, 5, 7])) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[t1 + t2, 2], |i| i as f64));
        let w = g.constant(Tensor::from_fn(&[k, 2, 3], |i| (i % 5) as f64 - 2.0));
        let b = g.constant(Tensor::zeros(&[3]));
        let y = g.conv1d(x, w, b, &[(0, t1), (t1, t2)]).unwrap();
        prop_assert_eq!(g.value(y).shape(), &[t1 + t2, 3]);
    }

    #[test]
    fn softplus_positive_and_above_identity(x in -700.0f64..700.0) {
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(vec![x]));
        let y = g.softplus(v);
        let s = g.value(y).item();
        prop_assert!(s > 0.0 || x < -700.0);
        prop_assert!(s >= x);
    }
}
