use cbm_autograd::{AutogradError, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Compares tape gradients of the scalar `f` against central differences.
fn check<F>(f: F, inputs: &[Tensor], tol: f64)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.grad(out, &vars).unwrap();

    let eps = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads[k].value();
        for i in 0..input.numel() {
            let eval = |delta: f64| {
                let mut perturbed = inputs.to_vec();
                perturbed[k].data_mut()[i] += delta;
                let t = Tape::new();
                let vs: Vec<Var> = perturbed.into_iter().map(|p| t.leaf(p)).collect();
                f(&t, &vs).item()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (1.0 + numeric.abs());
            assert!(err < tol, "input {k} entry {i}: analytic {a} vs numeric {numeric}");
        }
    }
}

fn sq_sum<'t>(v: Var<'t>) -> Var<'t> {
    v.square().sum()
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    check(|_, v| v[0].mul(v[1]).add(v[0].sub(v[1]).neg()).sum(), &[a.clone(), b.clone()], 1e-7);
    check(|_, v| v[0].sigmoid().mul(v[1].tanh()).sum(), &[a.clone(), b.clone()], 1e-7);
    check(|_, v| v[0].softplus().ln().add(v[1].exp()).sum(), &[a.clone(), b.clone()], 1e-7);
    check(|_, v| v[0].mish().scale(3.0).add_scalar(1.0).powf(2.0).sum(), &[a.clone()], 1e-6);
    check(|_, v| v[0].square().add_scalar(0.5).powf(-0.5).sum(), &[a], 1e-6);
}

#[test]
fn broadcast_and_reduce_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[4, 3], &mut rng);
    let r = random(&[3], &mut rng);
    check(|_, v| sq_sum(v[0].add_row(v[1]).mul_row(v[1])), &[a.clone(), r.clone()], 1e-6);
    check(|_, v| sq_sum(v[0].sum_rows().broadcast_rows(2)), &[a.clone()], 1e-6);
    check(|_, v| sq_sum(v[0].sum_cols().broadcast_cols(5)), &[a.clone()], 1e-6);
    check(|_, v| sq_sum(v[0].sum().expand(&[2, 2])).add(v[0].mean()), &[a.clone()], 1e-6);
    check(|_, v| sq_sum(v[0].reshape(&[2, 6]).slice_cols(1, 3)), &[a.clone()], 1e-6);
    check(|_, v| sq_sum(v[0].slice_cols(1, 2).pad_cols(2, 6)), &[a.clone()], 1e-6);
    check(
        |t, v| sq_sum(t.concat_cols(&[v[0], v[0].slice_cols(0, 1)]).gather_rows(&[3, 0, 3])),
        &[a],
        1e-6,
    );
}

#[test]
fn matmul_with_all_transposes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let at = random(&[4, 3], &mut rng);
    let bt = random(&[2, 4], &mut rng);
    check(|_, v| sq_sum(v[0].matmul(v[1])), &[a.clone(), b.clone()], 1e-6);
    check(|_, v| sq_sum(v[0].matmul_t(v[1], true, false)), &[at.clone(), b], 1e-6);
    check(|_, v| sq_sum(v[0].matmul_t(v[1], false, true)), &[a, bt.clone()], 1e-6);
    check(|_, v| sq_sum(v[0].matmul_t(v[1], true, true)), &[at, bt], 1e-6);
}

#[test]
fn convolution_pooling_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 2, 6, 6], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    check(
        |_, v| sq_sum(v[0].conv2d(v[1], 1).add_channel_bias(v[2]).tanh().max_pool2()),
        &[x.clone(), w.clone(), b],
        1e-6,
    );
    check(|_, v| sq_sum(v[0].conv2d(v[1], 0).global_avg_pool()), &[x, w], 1e-6);
}

#[test]
fn conv_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[1, 2, 4, 5], &mut rng);
    let w = random(&[2, 2, 3, 3], &mut rng);
    let tape = Tape::new();
    let y = tape.leaf(x.clone()).conv2d(tape.leaf(w.clone()), 1).value();
    for o in 0..2 {
        for i in 0..4 {
            for j in 0..5 {
                let mut acc = 0.0;
                for c in 0..2 {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let (yy, xx) = (i as isize + ki as isize - 1, j as isize + kj as isize - 1);
                            if (0..4).contains(&yy) && (0..5).contains(&xx) {
                                acc += x.data()[(c * 4 + yy as usize) * 5 + xx as usize]
                                    * w.data()[((o * 2 + c) * 3 + ki) * 3 + kj];
                            }
                        }
                    }
                }
                let got = y.data()[(o * 4 + i) * 5 + j];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn second_order_through_mlp() {
    // Penalty on the input-gradient of a small tanh/mish network, as a
    // function of the weights: exercises gradient-of-gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[3, 4], &mut rng);
    let w1 = random(&[4, 5], &mut rng);
    let b1 = random(&[5], &mut rng);
    let w2 = random(&[5, 2], &mut rng);
    check(
        |t, v| {
            let h = v[0].matmul(v[1]).add_row(v[2]).mish();
            let s = h.matmul(v[3]).sigmoid().mul(h.slice_cols(0, 2)).sum();
            let gx = t.grad(s, &[v[0]]).unwrap()[0];
            gx.square().sum()
        },
        &[x, w1, b1, w2],
        1e-5,
    );
}

#[test]
fn second_order_through_batch_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[4, 3], &mut rng);
    let gamma = random(&[3], &mut rng);
    let w = random(&[3, 2], &mut rng);
    check(
        |t, v| {
            let n = 4.0;
            let mean = v[0].sum_rows().scale(1.0 / n);
            let centered = v[0].sub(mean.broadcast_rows(4));
            let var = centered.square().sum_rows().scale(1.0 / n);
            let inv = var.add_scalar(1e-5).powf(-0.5);
            let y = centered.mul_row(inv).mul_row(v[1]).mish().matmul(v[2]);
            let cot = y.tanh();
            let gx = t.vjp(y, cot, &[v[0]]).unwrap()[0];
            gx.square().sum()
        },
        &[x, gamma, w],
        1e-5,
    );
}

#[test]
fn vjp_cotangent_is_differentiable() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[2, 3], &mut rng);
    let w = random(&[3, 3], &mut rng);
    check(
        |t, v| {
            let y = v[0].matmul(v[1]).sigmoid();
            let g = t.vjp(y, v[0].scale(2.0), &[v[0]]).unwrap()[0];
            g.sum()
        },
        &[x, w],
        1e-6,
    );
}

#[test]
fn unrelated_wrt_gets_zero() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]));
    let b = tape.leaf(Tensor::from_rows(&[vec![3.0]]));
    let g = tape.grad(a.sum(), &[a, b]).unwrap();
    assert_eq!(g[0].value().data(), &[1.0, 1.0]);
    assert_eq!(g[1].value().data(), &[0.0]);
}

#[test]
fn non_scalar_output_rejected() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]));
    assert!(matches!(tape.grad(a, &[a]), Err(AutogradError::NonScalarOutput(_))));
}

#[test]
fn conv_gradient_is_not_twice_differentiable() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tape = Tape::new();
    let x = tape.leaf(random(&[1, 1, 4, 4], &mut rng));
    let w = tape.leaf(random(&[1, 1, 3, 3], &mut rng));
    let y = x.conv2d(w, 1).square().sum();
    let gx = tape.grad(y, &[x]).unwrap()[0];
    let err = tape.grad(gx.sum(), &[w]).unwrap_err();
    assert!(matches!(err, AutogradError::NotDifferentiable(_)));
}
