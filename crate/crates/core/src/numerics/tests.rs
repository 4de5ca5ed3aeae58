use rand::Rng;

use super::*;
use crate::rng::seeded;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, dilation: usize) -> Vec<f64> {
    let (bn, t, cin) = (x.dim(0), x.dim(1), x.dim(2));
    let (k, cout) = (w.dim(0), w.dim(2));
    let mut out = vec![0.0; bn * t * cout];
    for bi in 0..bn {
        for ti in 0..t {
            for o in 0..cout {
                let mut acc = b.data()[o];
                for ki in 0..k {
                    let s = ti as i64 + (ki as i64 - (k / 2) as i64) * dilation as i64;
                    if s < 0 || s >= t as i64 {
                        continue;
                    }
                    for i in 0..cin {
                        acc += x.at(&[bi, s as usize, i]) * w.at(&[ki, i, o]);
                    }
                }
                out[(bi * t + ti) * cout + o] = acc;
            }
        }
    }
    out
}

fn pool_oracle(x: &Tensor, kernel: usize, op: PoolOp) -> Vec<f64> {
    let (b, t, d) = (x.dim(0), x.dim(1), x.dim(2));
    let mut out = Vec::new();
    for bi in 0..b {
        let mut start = 0;
        while start < t {
            let end = (start + kernel).min(t);
            for c in 0..d {
                let vals: Vec<f64> = (start..end).map(|ti| x.at(&[bi, ti, c])).collect();
                out.push(match op {
                    PoolOp::Avg => vals.iter().sum::<f64>() / vals.len() as f64,
                    PoolOp::Max => vals.iter().cloned().fold(f64::MIN, f64::max),
                });
            }
            start = end;
        }
    }
    // oracle emits (b, window, c) ordering
    out
}

#[test]
fn conv_of_zeros_is_zero() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 5, 3]));
    let w = tape.constant(random(&[3, 3, 4], 1));
    let b = tape.constant(Tensor::zeros(&[4]));
    let y = tape.conv1d_dilated(x, w, b, 2).unwrap();
    assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn pointwise_conv_is_affine() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap());
    let w = tape.constant(Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap());
    let b = tape.constant(Tensor::vector(vec![1.0]));
    let y = tape.conv1d_dilated(x, w, b, 1).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 5.0, 7.0]);
}

#[test]
fn dilated_conv_matches_loop_oracle() {
    let x = random(&[1, 4, 2], 7);
    let w = random(&[3, 2, 3], 8);
    let b = random(&[3], 9);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.conv1d_dilated(xv, wv, bv, 2).unwrap();
    let expected = conv_oracle(&x, &w, &b, 2);
    for (a, e) in tape.value(y).data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn conv_rejects_bad_shapes_and_dilation() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 4, 2]));
    let w = tape.constant(Tensor::zeros(&[3, 3, 1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(matches!(tape.conv1d_dilated(x, w, b, 1), Err(crate::Error::Dimension(_))));
    let w = tape.constant(Tensor::zeros(&[3, 2, 1]));
    assert!(matches!(tape.conv1d_dilated(x, w, b, 0), Err(crate::Error::Parameter(_))));
}

#[test]
fn pool_hand_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.pool1d(x, 2, PoolOp::Avg).unwrap();
    assert_eq!(tape.value(y).data(), &[1.5, 3.5]);

    let x = tape.constant(Tensor::new(vec![1, 5, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
    let y = tape.pool1d(x, 2, PoolOp::Max).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, 4.0, 5.0]);

    assert!(matches!(tape.pool1d(x, 1, PoolOp::Avg), Err(crate::Error::Parameter(_))));
}

#[test]
fn pool_matches_loop_oracle() {
    let x = random(&[2, 7, 3], 3);
    for op in [PoolOp::Avg, PoolOp::Max] {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.pool1d(xv, 3, op).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3, 3]);
        let expected = pool_oracle(&x, 3, op);
        assert!(tape.value(y).data().iter().zip(&expected).all(|(a, e)| (a - e).abs() < 1e-12));
    }
}

#[test]
fn max_pool_gradient_goes_to_first_argmax() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![1, 4, 1], vec![3.0, 3.0, 1.0, 2.0]).unwrap());
    let y = tape.pool1d(x, 2, PoolOp::Max).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
}

fn layer_norm_of(v: Vec<f64>, eps: f64) -> Vec<f64> {
    let d = v.len();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(v));
    let g = tape.constant(Tensor::full(&[d], 1.0));
    let o = tape.constant(Tensor::zeros(&[d]));
    let y = tape.layer_norm(x, g, o, eps).unwrap();
    tape.value(y).data().to_vec()
}

#[test]
fn layer_norm_examples() {
    assert!(layer_norm_of(vec![5.0, 5.0, 5.0], 1e-5).iter().all(|v| *v == 0.0));
    let y = layer_norm_of(vec![1.0, 3.0], 1e-15);
    assert!((y[0] + 1.0).abs() < 1e-9 && (y[1] - 1.0).abs() < 1e-9);

    let x = random(&[16], 11).into_data();
    let n = x.len() as f64;
    let m0 = x.iter().sum::<f64>() / n;
    let var0 = x.iter().map(|v| (v - m0).powi(2)).sum::<f64>() / n;
    let y = layer_norm_of(x, 1e-5);
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 1e-9);
    assert!((var - 1.0 / (1.0 + 1e-5 / var0)).abs() < 1e-6);
}

#[test]
fn backward_linear_and_quadratic() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![0.3, -1.0, 2.0]));
    let s = tape.sum(x).unwrap();
    assert_eq!(tape.backward(s).unwrap().wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, -2.0, 0.5]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    assert_eq!(tape.backward(s).unwrap().wrt(x).unwrap().data(), &[2.0, -4.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar_and_zeroes_unused() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let unused = tape.param(Tensor::zeros(&[3]));
    assert!(matches!(tape.backward(x), Err(crate::Error::Usage(_))));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_is_deterministic() {
    let x0 = random(&[2, 6, 3], 5);
    let run = || {
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let p = tape.pool1d(x, 2, PoolOp::Avg).unwrap();
        let t = tape.tanh(p).unwrap();
        let s = tape.sum(t).unwrap();
        tape.backward(s).unwrap().take(x).unwrap()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn non_finite_outputs_are_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![-1.0]));
    assert!(matches!(tape.log(x), Err(crate::Error::Numeric(_))));
}

#[test]
fn grad_check_examples() {
    let p = random(&[5], 21);
    let sq = |t: &mut Tape, x: Var| {
        let y = t.mul(x, x)?;
        t.sum(y)
    };
    assert!(grad_check(sq, &p, 1e-6).unwrap() < 1e-7);

    let ln = |t: &mut Tape, x: Var| {
        let g = t.constant(Tensor::full(&[5], 1.0));
        let o = t.constant(Tensor::zeros(&[5]));
        let y = t.layer_norm(x, g, o, 1e-5)?;
        let w = t.constant(random(&[5], 99));
        let z = t.mul(y, w)?;
        t.sum(z)
    };
    assert!(grad_check(ln, &p, 1e-6).unwrap() < 1e-5);

    let constant = |t: &mut Tape, _x: Var| Ok(t.constant(Tensor::scalar(3.0)));
    assert_eq!(grad_check(constant, &p, 1e-6).unwrap(), 0.0);

    assert!(grad_check(sq, &p, 0.0).is_err());
}

#[test]
fn permute_round_trip_and_concat_slice() {
    let x0 = random(&[2, 3, 4], 2);
    let mut tape = Tape::new();
    let x = tape.constant(x0.clone());
    let y = tape.transpose(x, 0, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[3, 2, 4]);
    assert_eq!(tape.value(y).at(&[2, 1, 3]), x0.at(&[1, 2, 3]));
    let z = tape.transpose(y, 0, 1).unwrap();
    assert_eq!(tape.value(z), &x0);

    let c = tape.concat(&[x, x], 1).unwrap();
    assert_eq!(tape.value(c).shape(), &[2, 6, 4]);
    let s = tape.slice(c, 1, 3, 3).unwrap();
    assert_eq!(tape.value(s), &x0);
}

#[test]
fn masked_infonce_two_by_one_case() {
    // Rows: view1 instance 0, view1 instance 1, view2 instance 0, view2 instance 1.
    let z = Tensor::new(vec![1, 4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let mut mask = PairMask::new(4, 4);
    for a in 0..4 {
        for c in 0..4 {
            if c == (a + 2) % 4 {
                mask.set_pos(a, c);
            } else if c % 2 != a % 2 {
                mask.set_neg(a, c);
            }
        }
    }
    let mut tape = Tape::new();
    let zv = tape.constant(z);
    let s = tape.pairwise_sim(zv, zv, SimKind::Dot).unwrap();
    let l = tape.masked_infonce(s, mask, 1.0).unwrap();
    let e = 1f64.exp();
    let expected = -(e / (e + 2.0)).ln();
    assert!((tape.value(l).item().unwrap() - expected).abs() < 1e-12);
}

/// Contract a tensor of any shape to a scalar with fixed random weights so
/// every output coordinate contributes a distinct gradient.
fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> crate::Result<Var> {
    let w = t.constant(random(t.value(y).shape(), seed));
    let z = t.mul(y, w)?;
    t.sum(z)
}

type Primitive = fn(&mut Tape, Var, &Tensor) -> crate::Result<Var>;

#[test]
fn every_primitive_matches_finite_differences() {
    let cases: Vec<(&str, Vec<usize>, Primitive)> = vec![
        ("add", vec![2, 3], |t, x, o| {
            let c = t.constant(o.clone());
            t.add(x, c)
        }),
        ("sub", vec![2, 3], |t, x, o| {
            let c = t.constant(o.clone());
            t.sub(c, x)
        }),
        ("mul", vec![2, 3], |t, x, o| {
            let c = t.constant(o.clone());
            t.mul(x, c)
        }),
        ("matmul", vec![2, 3], |t, x, o| {
            let c = t.constant(o.clone().reshape(vec![3, 2])?);
            t.matmul(x, c)
        }),
        ("conv1d", vec![1, 5, 2], |t, x, o| {
            let w = t.constant(o.narrow(1, 0, 3)?.reshape(vec![3, 2, 1])?);
            let b = t.constant(Tensor::vector(vec![0.3]));
            t.conv1d_dilated(x, w, b, 2)
        }),
        ("pool_avg", vec![2, 5, 3], |t, x, _| t.pool1d(x, 2, PoolOp::Avg)),
        ("pool_max", vec![2, 5, 3], |t, x, _| t.pool1d(x, 2, PoolOp::Max)),
        ("layer_norm", vec![3, 4], |t, x, _| {
            let g = t.constant(Tensor::vector(vec![1.0, 0.5, 2.0, -1.0]));
            let b = t.constant(Tensor::vector(vec![0.1, 0.0, -0.2, 0.3]));
            t.layer_norm(x, g, b, 1e-5)
        }),
        ("l2_normalize", vec![3, 4], |t, x, _| t.l2_normalize(x)),
        ("tanh", vec![2, 3], |t, x, _| t.tanh(x)),
        ("relu", vec![2, 3], |t, x, _| t.relu(x)),
        ("exp", vec![2, 3], |t, x, _| t.exp(x)),
        ("log", vec![2, 3], |t, x, _| {
            let e = t.exp(x)?;
            t.log(e)
        }),
        ("softmax", vec![2, 4], |t, x, _| t.softmax(x)),
        ("sum", vec![2, 3], |t, x, _| t.sum(x)),
        ("mean", vec![2, 3], |t, x, _| t.mean(x)),
        ("concat", vec![2, 3], |t, x, _| t.concat(&[x, x], 1)),
        ("slice", vec![2, 5], |t, x, _| t.slice(x, 1, 1, 3)),
        ("transpose", vec![2, 3, 2], |t, x, _| t.transpose(x, 0, 2)),
    ];
    for (name, shape, f) in cases {
        for seed in 0..100u64 {
            let point = random(&shape, seed);
            let other = random(&shape, seed + 1000);
            let err = grad_check(
                |t, x| {
                    let y = f(t, x, &other)?;
                    weighted_sum(t, y, seed + 2000)
                },
                &point,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{name} seed {seed}: {err}");
        }
    }
}
