use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn positive_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap()
}

/// Contract every output with a fixed random weight so that the checked
/// scalar depends on each output element differently.
fn probe(g: &Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(rand_tensor(&mut rng, &g.shape(y)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check<F>(params: &[Tensor<f64>], f: F)
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let report = gradcheck(params, DEFAULT_STEP, f).unwrap();
    assert!(
        report.passes(1e-4),
        "gradcheck failed: {report:?}"
    );
}

#[test]
fn matmul_identity_and_hand_case() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
    let i = g.constant(Tensor::eye(2));
    let y = g.matmul(i, x).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());

    let a = g.constant(Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
    let b = g.constant(Tensor::from_f64(&[2, 1], &[1., 1.]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), vec![2, 1]);
    assert_eq!(g.value(c).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_mismatch_names_both_shapes() {
    let g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    check(&[a, b], |g, v| {
        let c = g.matmul(v[0], v[1])?;
        Ok(g.sum(c))
    });
}

#[test]
fn matmul_variants_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let shared = rand_tensor(&mut rng, &[4, 5]);
    let batched = rand_tensor(&mut rng, &[2, 4, 5]);
    let batched_t = rand_tensor(&mut rng, &[2, 5, 4]);
    let shared_t = rand_tensor(&mut rng, &[5, 4]);
    check(&[a.clone(), shared], |g, v| probe(g, g.matmul(v[0], v[1])?, 10));
    check(&[a.clone(), batched], |g, v| probe(g, g.matmul(v[0], v[1])?, 11));
    check(&[a.clone(), batched_t], |g, v| probe(g, g.matmul_t(v[0], v[1])?, 12));
    check(&[a, shared_t], |g, v| probe(g, g.matmul_t(v[0], v[1])?, 13));
}

#[test]
fn softmax_examples() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap());
    assert_eq!(g.value(g.softmax(x, 0).unwrap()).data(), &[0.5, 0.5]);

    let x = g.constant(Tensor::from_f64(&[2], &[2f64.ln(), 0.0]).unwrap());
    let y = g.value(g.softmax(x, 0).unwrap());
    assert!((y.data()[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((y.data()[1] - 1.0 / 3.0).abs() < 1e-12);

    let x = g.constant(Tensor::from_f64(&[2], &[1000.0, 0.0]).unwrap());
    let y = g.value(g.softmax(x, 0).unwrap());
    assert!(y.all_finite());
    assert!((y.data()[0] - 1.0).abs() < 1e-12 && y.data()[1] < 1e-12);

    let x = g.constant(Tensor::from_f64(&[2], &[f64::NAN, 0.0]).unwrap());
    assert!(matches!(g.softmax(x, 0), Err(Error::Numeric(_))));
    assert!(matches!(g.softmax(x, 3), Err(Error::Dimension(_))));
}

#[test]
fn softmax_rows_sum_to_one_on_any_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = Graph::<f32>::new();
    let x = g.constant(rand_tensor(&mut rng, &[3, 4, 5]).cast());
    for axis in 0..3 {
        let y = g.value(g.softmax(x, axis).unwrap());
        let s = g.value(g.sum_axis(g.constant((*y).clone()), axis).unwrap());
        assert!(s.data().iter().all(|v| (v - 1.0).abs() < 1e-6));
        assert!(y.data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn masked_softmax_zeroes_excluded_entries() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
    let keep = Tensor::from_f64(&[1, 3], &[1., 1., 0.]).unwrap();
    let y = g.value(g.masked_softmax(x, 1, Some(&keep)).unwrap());
    assert_eq!(y.data()[2], 0.0);
    assert_eq!(y.data()[5], 0.0);
    assert!((y.data()[0] + y.data()[1] - 1.0).abs() < 1e-12);

    let none = Tensor::zeros(&[1, 3]);
    let y = g.value(g.masked_softmax(x, 1, Some(&none)).unwrap());
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn elementwise_examples() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[2, 2], &[1., -2., 3., 4.]).unwrap());
    let ones = g.constant(Tensor::ones(&[2, 2]));
    assert_eq!(g.value(g.mul(x, ones).unwrap()).data(), g.value(x).data());

    let row = g.constant(Tensor::from_f64(&[1, 2], &[1., 2.]).unwrap());
    let y = g.mul(row, ones).unwrap();
    assert_eq!(g.value(y).data(), &[1., 2., 1., 2.]);

    let bad = g.constant(Tensor::zeros(&[3]));
    assert!(matches!(g.add(x, bad), Err(Error::Dimension(_))));
}

#[test]
fn hadamard_square_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let w = rand_tensor(&mut rng, &[3, 4]);
    check(&[x, w], |g, v| {
        let p = g.mul(v[0], v[1])?;
        Ok(g.sum(g.square(p)))
    });
}

#[test]
fn broadcast_binary_ops_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let row = rand_tensor(&mut rng, &[4]);
    let col = positive_tensor(&mut rng, &[2, 3, 1]);
    check(&[a.clone(), row.clone()], |g, v| probe(g, g.add(v[0], v[1])?, 20));
    check(&[a.clone(), row.clone()], |g, v| probe(g, g.sub(v[1], v[0])?, 21));
    check(&[a.clone(), col.clone()], |g, v| probe(g, g.mul(v[0], v[1])?, 22));
    check(&[a, col], |g, v| probe(g, g.div(v[0], v[1])?, 23));
}

#[test]
fn broadcast_gradient_shape_equals_parameter_shape() {
    let g = Graph::<f32>::new();
    let x = g.param(Tensor::ones(&[4, 3]));
    let b = g.param(Tensor::ones(&[3]));
    let y = g.add(x, b).unwrap();
    let grads = g.backward(g.sum(y)).unwrap();
    assert_eq!(grads.wrt(b).shape(), &[3]);
    assert_eq!(grads.wrt(b).data(), &[4.0, 4.0, 4.0]);
    assert_eq!(grads.wrt(x).shape(), &[4, 3]);
}

#[test]
fn unary_ops_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[3, 5]);
    let p = positive_tensor(&mut rng, &[3, 5]);
    check(std::slice::from_ref(&x), |g, v| probe(g, g.relu(v[0]), 30));
    check(std::slice::from_ref(&x), |g, v| probe(g, g.square(v[0]), 31));
    check(std::slice::from_ref(&x), |g, v| probe(g, g.exp(v[0]), 32));
    check(std::slice::from_ref(&x), |g, v| probe(g, g.sigmoid(v[0]), 33));
    check(std::slice::from_ref(&x), |g, v| probe(g, g.softplus(g.scale(v[0], 4.0)), 34));
    check(std::slice::from_ref(&x), |g, v| probe(g, g.add_scalar(g.scale(v[0], -3.0), 2.0), 35));
    check(std::slice::from_ref(&p), |g, v| probe(g, g.sqrt(v[0]), 36));
    check(&[p], |g, v| probe(g, g.log(v[0]), 37));
    check(&[x], |g, v| Ok(g.mean(g.square(v[0]))));
}

#[test]
fn reductions_and_softmax_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let keep = Tensor::from_f64(&[2, 1, 4], &[1., 1., 0., 1., 0., 1., 1., 1.]).unwrap();
    for axis in 0..3 {
        check(std::slice::from_ref(&x), |g, v| probe(g, g.softmax(v[0], axis)?, 40));
        check(std::slice::from_ref(&x), |g, v| probe(g, g.log_softmax(v[0], axis)?, 41));
        check(std::slice::from_ref(&x), |g, v| probe(g, g.sum_axis(v[0], axis)?, 42));
        check(std::slice::from_ref(&x), |g, v| probe(g, g.max_axis(v[0], axis)?, 43));
    }
    check(&[x], |g, v| probe(g, g.masked_softmax(v[0], 2, Some(&keep))?, 44));
}

#[test]
fn shape_ops_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let y = rand_tensor(&mut rng, &[2, 2, 4]);
    let table = rand_tensor(&mut rng, &[5, 3]);
    check(std::slice::from_ref(&x), |g, v| probe(g, g.permute(v[0], &[2, 0, 1])?, 50));
    check(std::slice::from_ref(&x), |g, v| probe(g, g.reshape(v[0], &[6, 4])?, 51));
    check(&[x.clone(), y], |g, v| probe(g, g.concat(&[v[0], v[1]], 1)?, 52));
    check(std::slice::from_ref(&x), |g, v| probe(g, g.narrow(v[0], 2, 1, 2)?, 53));
    check(&[x], |g, v| probe(g, g.transpose(v[0])?, 54));
    check(&[table], |g, v| probe(g, g.gather_rows(v[0], &[4, 0, 4, 2])?, 55));
}

#[test]
fn conv_upsample_layernorm_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[2, 5, 6, 3]);
    let w = rand_tensor(&mut rng, &[27, 4]);
    check(&[x.clone(), w.clone()], |g, v| probe(g, g.conv2d(v[0], v[1], 3, 1, 1)?, 60));
    check(&[x.clone(), w], |g, v| probe(g, g.conv2d(v[0], v[1], 3, 2, 1)?, 61));
    check(std::slice::from_ref(&x), |g, v| probe(g, g.upsample2x(v[0])?, 62));
    check(&[x], |g, v| probe(g, g.layer_norm(v[0], 1e-5)?, 63));
}

#[test]
fn conv_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (h, w, c, co) = (5, 4, 2, 3);
    let x = rand_tensor(&mut rng, &[1, h, w, c]);
    let k = rand_tensor(&mut rng, &[9 * c, co]);
    let g = Graph::<f64>::new();
    let y = g.value(g.conv2d(g.constant(x.clone()), g.constant(k.clone()), 3, 2, 1).unwrap());
    let (ho, wo) = (3, 2);
    assert_eq!(y.shape(), &[1, ho, wo, co]);
    for oy in 0..ho {
        for ox in 0..wo {
            for o in 0..co {
                let mut s = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = ((oy * 2 + ky) as isize - 1, (ox * 2 + kx) as isize - 1);
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..c {
                            s += x.at(&[0, iy as usize, ix as usize, ci])
                                * k.at(&[(ky * 3 + kx) * c + ci, o]);
                        }
                    }
                }
                assert!((y.at(&[0, oy, ox, o]) - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn polynomial_and_constant_functions() {
    let r = gradcheck(&[Tensor::scalar(3.0)], DEFAULT_STEP, |g, v| Ok(g.square(v[0]))).unwrap();
    assert!((r.analytic_at_worst - 6.0).abs() < 1e-12 || r.max_rel_error == 0.0);
    let g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(3.0));
    let grads = g.backward(g.square(x)).unwrap();
    assert_eq!(grads.wrt(x).item(), 6.0);
    let fd = (3.00001f64.powi(2) - 2.99999f64.powi(2)) / 2e-5;
    assert!((fd - 6.0).abs() < 1e-7);

    let g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(3.0));
    let c = g.constant(Tensor::scalar(5.0));
    let zero = g.mul(x, g.constant(Tensor::scalar(0.0))).unwrap();
    let f = g.add(zero, c).unwrap();
    assert_eq!(g.backward(f).unwrap().wrt(x).item(), 0.0);
}

#[test]
fn gradcheck_rejects_non_finite_function() {
    let r = gradcheck(&[Tensor::scalar(-1.0)], DEFAULT_STEP, |g, v| Ok(g.log(v[0])));
    assert!(matches!(r, Err(Error::Numeric(_))));
}

#[test]
fn backward_is_replayable_and_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = Graph::<f32>::new();
    let a = g.param(rand_tensor(&mut rng, &[4, 6]).cast());
    let b = g.param(rand_tensor(&mut rng, &[6, 3]).cast());
    let c = g.matmul(a, b).unwrap();
    let s = g.softmax(c, 1).unwrap();
    let l = g.sum(g.square(s));
    let g1 = g.backward(l).unwrap();
    let g2 = g.backward(l).unwrap();
    assert_eq!(g1.wrt(a).data(), g2.wrt(a).data());
    assert_eq!(g1.wrt(b).data(), g2.wrt(b).data());
    assert!(g1.get(c).is_none());
}

#[test]
fn record_is_topologically_ordered() {
    let g = Graph::<f32>::new();
    let a = g.param(Tensor::ones(&[2, 2]));
    let b = g.relu(a);
    let c = g.add(a, b).unwrap();
    let rec = g.record();
    assert_eq!(rec.len(), 3);
    assert_eq!(rec[2].op, "add");
    assert_eq!(rec[2].inputs, vec![a.id(), b.id()]);
    for e in &rec {
        assert!(e.inputs.iter().all(|&i| i < e.output));
    }
    assert_eq!(c.id(), 2);
}

#[test]
fn detach_blocks_gradient() {
    let g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(2.0));
    let d = g.detach(x);
    let y = g.mul(x, d).unwrap();
    assert_eq!(g.backward(y).unwrap().wrt(x).item(), 2.0);
}

#[test]
fn unreached_parameter_has_zero_gradient() {
    let g = Graph::<f64>::new();
    let x = g.param(Tensor::ones(&[3]));
    let unused = g.param(Tensor::ones(&[2]));
    let grads = g.backward(g.sum(x)).unwrap();
    assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0]);
}
