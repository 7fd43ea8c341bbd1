use mtrans::autodiff::{grad_check, GradCheckOptions, Probe};
use mtrans::rng::{rng_from_seed, uniform, SeededRng};
use mtrans::{ParamStore, Result, Tape, Tensor, Var};
use proptest::prelude::*;

fn random(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| uniform(rng, -1.0, 1.0))
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn eval1(x: Tensor<f64>, op: impl FnOnce(&mut Tape<f64>, Var) -> Result<Var>) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let out = op(&mut tape, v)?;
    Ok(tape.value(out).clone())
}

fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                out[i * n + j] += a[i * k + l] * b[l * n + j];
            }
        }
    }
    out
}

fn sliding_window(x: &Tensor<f64>, k: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, ks) = (k.shape()[0], k.shape()[2]);
    let p = (ks / 2) as isize;
    let mut out = vec![0.0; co * h * w];
    for o in 0..co {
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut s = b[o];
                for c in 0..ci {
                    for dy in 0..ks as isize {
                        for dx in 0..ks as isize {
                            let (sy, sx) = (y + dy - p, xx + dx - p);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let kv = k.data()[((o * ci + c) * ks + dy as usize) * ks + dx as usize];
                            s += kv * x.data()[(c * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(o * h + y as usize) * w + xx as usize] = s;
            }
        }
    }
    out
}

/// Finite-difference check of `Σ weights ⊙ op(inputs)` with respect to
/// every input.
fn op_gradcheck(inputs: Vec<Tensor<f64>>, op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    let mut store = ParamStore::new();
    for (i, t) in inputs.into_iter().enumerate() {
        store.insert(format!("x{i}"), t).unwrap();
    }
    let mut rng = rng_from_seed(99);
    let mut record = |tape: &mut Tape<f64>, vars: &[Var], weights: &mut Option<Tensor<f64>>| -> Result<Var> {
        let out = op(tape, vars)?;
        let w = weights.get_or_insert_with(|| random(&mut rng, tape.shape(out))).clone();
        let w = tape.constant(w);
        let prod = tape.mul(out, w)?;
        Ok(tape.sum(prod))
    };
    let mut weights = None;
    let mut tape = Tape::new();
    let pv = tape.register_params(&store);
    let loss = record(&mut tape, pv.vars(), &mut weights).unwrap();
    let analytic = pv.gradients(&tape.backward(loss).unwrap());
    let weights = std::cell::RefCell::new(weights);
    let f = |p: &ParamStore<f64>| -> Result<Probe> {
        let mut tape = Tape::new();
        let pv = tape.register_frozen(p);
        let out = op(&mut tape, pv.vars())?;
        let w = tape.constant(weights.borrow().clone().unwrap());
        let prod = tape.mul(out, w)?;
        let s = tape.sum(prod);
        Ok(Probe {
            value: tape.value(s).item(),
            kink_signature: tape.kink_signature(),
        })
    };
    let report = grad_check(f, &store, &analytic, GradCheckOptions::default()).unwrap();
    assert!(report.checked() > 0);
    report.max_rel_err()
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::<f64>::new();
    let i = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = tape.constant(Tensor::from_f64(&[2, 2], &[3.0, 4.0, 5.0, 6.0]).unwrap());
    let c = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
    let r = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
    let col = tape.constant(Tensor::from_f64(&[2, 1], &[3.0, 4.0]).unwrap());
    let d = tape.matmul(r, col).unwrap();
    assert_eq!(tape.value(d).data(), &[11.0]);
    let err = tape.matmul(r, r).unwrap_err().to_string();
    assert!(err.contains("[1, 2]"), "{err}");
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = rng_from_seed(1);
    let (a, b) = (random(&mut rng, &[4, 5]), random(&mut rng, &[5, 3]));
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    assert_eq!(tape.shape(c), &[4, 3]);
    assert!(close(tape.value(c).data(), &triple_loop(a.data(), b.data(), 4, 5, 3), 1e-12));
}

#[test]
fn softmax_examples() {
    let s = |row: &[f64]| eval1(Tensor::from_f64(&[1, row.len()], row).unwrap(), |t, v| t.softmax_rows(v)).unwrap();
    assert!(close(s(&[0.0, 0.0, 0.0]).data(), &[1.0 / 3.0; 3], 1e-15));
    assert!(close(s(&[1000.0, 1000.0]).data(), &[0.5, 0.5], 1e-15));
    // Direct evaluation without the max shift.
    let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
    let total: f64 = e.iter().sum();
    let oracle: Vec<f64> = e.iter().map(|v| v / total).collect();
    assert!(close(s(&[1.0, 2.0, 3.0]).data(), &oracle, 1e-12));
}

#[test]
fn layer_norm_examples() {
    let ln = |row: &[f64], eps: f64| {
        let d = row.len();
        eval1(Tensor::from_f64(&[1, d], row).unwrap(), |t, v| {
            let g = t.constant(Tensor::ones(&[d]));
            let b = t.constant(Tensor::zeros(&[d]));
            t.layer_norm(v, g, b, eps)
        })
        .unwrap()
    };
    assert!(close(ln(&[5.0; 4], 1e-5).data(), &[0.0; 4], 0.0));
    assert!(close(ln(&[1.0, -1.0], 1e-14).data(), &[1.0, -1.0], 1e-12));

    let mut rng = rng_from_seed(2);
    let x = random(&mut rng, &[3, 6]);
    let (gain, bias) = (random(&mut rng, &[6]), random(&mut rng, &[6]));
    let mut tape = Tape::new();
    let (vx, vg, vb) = (tape.constant(x.clone()), tape.constant(gain.clone()), tape.constant(bias.clone()));
    let y = tape.layer_norm(vx, vg, vb, 1e-5).unwrap();
    let mut oracle = Vec::new();
    for row in x.data().chunks(6) {
        let mean = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        for (j, v) in row.iter().enumerate() {
            oracle.push((v - mean) / (var + 1e-5).sqrt() * gain.data()[j] + bias.data()[j]);
        }
    }
    assert!(close(tape.value(y).data(), &oracle, 1e-12));
}

#[test]
fn linear_examples_and_composition() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
    let eye = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let zero = tape.constant(Tensor::zeros(&[2]));
    let y = tape.linear(x, eye, zero).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    let ones = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap());
    let w = tape.constant(Tensor::from_f64(&[2, 1], &[2.0, 3.0]).unwrap());
    let b = tape.constant(Tensor::from_f64(&[1], &[1.0]).unwrap());
    let y = tape.linear(ones, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[6.0]);
    assert!(tape.linear(ones, eye, b).is_err());

    let mut rng = rng_from_seed(3);
    let x = tape.constant(random(&mut rng, &[4, 5]));
    let w = tape.constant(random(&mut rng, &[5, 3]));
    let b = tape.constant(random(&mut rng, &[3]));
    let fused = tape.linear(x, w, b).unwrap();
    let m = tape.matmul(x, w).unwrap();
    let composed = tape.add_row_bias(m, b).unwrap();
    assert_eq!(tape.value(fused).data(), tape.value(composed).data());
}

#[test]
fn conv2d_examples() {
    let mut rng = rng_from_seed(4);
    let x = random(&mut rng, &[1, 5, 5]);
    let mut tape = Tape::new();
    let vx = tape.constant(x.clone());
    let k1 = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
    let b0 = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(vx, k1, b0).unwrap();
    assert_eq!(tape.value(y), &x);
    let k0 = tape.constant(Tensor::zeros(&[2, 1, 3, 3]));
    let beta = tape.constant(Tensor::from_f64(&[2], &[0.7, 0.7]).unwrap());
    let y = tape.conv2d(vx, k0, beta).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.7));
    let even = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
    assert!(tape.conv2d(vx, even, b0).is_err());

    let k = random(&mut rng, &[2, 1, 3, 3]);
    let b = random(&mut rng, &[2]);
    let (vk, vb) = (tape.constant(k.clone()), tape.constant(b.clone()));
    let y = tape.conv2d(vx, vk, vb).unwrap();
    assert_eq!(tape.shape(y), &[2, 5, 5]);
    assert!(close(tape.value(y).data(), &sliding_window(&x, &k, b.data()), 1e-12));
}

#[test]
fn pixel_shuffle_examples() {
    let x = Tensor::from_f64(&[4, 1, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = eval1(x.clone(), |t, v| t.pixel_shuffle(v, 2)).unwrap();
    assert_eq!(y.shape(), &[1, 2, 2]);
    assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(eval1(x.clone(), |t, v| t.pixel_shuffle(v, 1)).unwrap(), x);
    assert!(eval1(Tensor::zeros(&[3, 2, 2]), |t, v| t.pixel_shuffle(v, 2)).is_err());
}

#[test]
fn concat_rows_examples() {
    let mut tape = Tape::<f64>::new();
    let empty = tape.constant(Tensor::zeros(&[0, 2]));
    let b = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let c = tape.concat_rows(empty, b).unwrap();
    assert_eq!(tape.value(c), tape.value(b));
    let one = tape.constant(Tensor::from_f64(&[1, 1], &[1.0]).unwrap());
    let two = tape.constant(Tensor::from_f64(&[1, 1], &[2.0]).unwrap());
    let c = tape.concat_rows(one, two).unwrap();
    assert_eq!(tape.shape(c), &[2, 1]);
    assert_eq!(tape.value(c).data(), &[1.0, 2.0]);
    assert!(tape.concat_rows(one, b).is_err());

    let mut tape = Tape::<f64>::new();
    let a = tape.param(Tensor::zeros(&[2, 3]));
    let b = tape.param(Tensor::zeros(&[1, 3]));
    let c = tape.concat_rows(a, b).unwrap();
    let s = tape.sum(c);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(a), Tensor::ones(&[2, 3]));
    assert_eq!(g.wrt(b), Tensor::ones(&[1, 3]));
}

#[test]
fn backward_examples() {
    let mut rng = rng_from_seed(5);
    let p0 = random(&mut rng, &[3, 4]);
    let mut tape = Tape::new();
    let p = tape.param(p0.clone());
    let unused = tape.param(Tensor::ones(&[2]));
    let s = tape.sum(p);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(p), Tensor::ones(&[3, 4]));
    assert_eq!(g.wrt(unused), Tensor::zeros(&[2]));

    let sq = tape.mul(p, p).unwrap();
    let half = tape.scale(sq, 0.5);
    let l = tape.sum(half);
    assert!(close(tape.backward(l).unwrap().wrt(p).data(), p0.data(), 1e-15));
    assert!(tape.backward(p).is_err());
}

#[test]
fn l1_subgradient_at_zero_is_zero() {
    let t = Tensor::<f64>::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap();
    let mut tape = Tape::new();
    let x = tape.param(t.clone());
    let l = tape.sum_abs_error(x, &t).unwrap();
    assert_eq!(tape.backward(l).unwrap().wrt(x), Tensor::zeros(&[3]));
}

#[test]
fn gradcheck_on_quadratic() {
    let mut rng = rng_from_seed(6);
    let mut store = ParamStore::new();
    store.insert("p", random(&mut rng, &[5, 5])).unwrap();
    let analytic = vec![store.tensors()[0].map(|v| 3.0 * v)];
    let f = |p: &ParamStore<f64>| Ok(Probe::smooth(1.5 * p.tensors()[0].data().iter().map(|v| v * v).sum::<f64>()));
    // Central differences are exact on a quadratic, so a wide step only
    // reduces rounding noise.
    let opts = GradCheckOptions {
        eps: 1e-3,
        ..GradCheckOptions::default()
    };
    let r = grad_check(f, &store, &analytic, opts).unwrap();
    assert_eq!(r.checked(), 25);
    assert!(r.max_rel_err() < 1e-9, "{}", r.max_rel_err());
}

#[test]
fn gradcheck_on_linear_l1_away_from_kinks() {
    let mut rng = rng_from_seed(7);
    let x = random(&mut rng, &[6, 4]);
    let target = random(&mut rng, &[6, 3]);
    let mut store = ParamStore::new();
    store.insert("w", random(&mut rng, &[4, 3])).unwrap();
    store.insert("b", random(&mut rng, &[3])).unwrap();
    let run = |p: &ParamStore<f64>, frozen: bool| {
        let mut tape = Tape::new();
        let pv = if frozen { tape.register_frozen(p) } else { tape.register_params(p) };
        let vx = tape.constant(x.clone());
        let y = tape.linear(vx, pv.vars()[0], pv.vars()[1]).unwrap();
        let l = tape.sum_abs_error(y, &target).unwrap();
        (tape, pv, y, l)
    };
    let (tape, pv, _, l) = run(&store, false);
    let analytic = pv.gradients(&tape.backward(l).unwrap());
    // Residuals within 1e-3 of a kink mark the coordinate as excluded.
    let f = |p: &ParamStore<f64>| {
        let (tape, _, y, l) = run(p, true);
        let mut sig = 0u64;
        for (i, (&v, &t)) in tape.value(y).data().iter().zip(target.data()).enumerate() {
            let d = v - t;
            sig ^= (((d.abs() < 1e-3) as u64) << 1 | (d > 0.0) as u64).wrapping_mul(0x9E37_79B9 + i as u64 * 7919);
            if d.abs() < 1e-3 {
                sig = sig.rotate_left(17) ^ 0xDEAD_BEEF;
            }
        }
        Ok(Probe {
            value: tape.value(l).item(),
            kink_signature: sig,
        })
    };
    let r = grad_check(f, &store, &analytic, GradCheckOptions::default()).unwrap();
    assert_eq!(r.checked() + r.params.iter().map(|p| p.excluded).sum::<usize>(), 15);
    assert!(r.checked() > 0);
    assert!(r.max_rel_err() < 1e-6, "{}", r.max_rel_err());
}

#[test]
fn per_op_gradients_match_finite_differences() {
    let mut rng = rng_from_seed(8);
    let mut r = |s: &[usize]| random(&mut rng, s);
    let checks: Vec<(&str, f64)> = vec![
        ("matmul", op_gradcheck(vec![r(&[3, 4]), r(&[4, 2])], |t, v| t.matmul(v[0], v[1]))),
        ("transpose", op_gradcheck(vec![r(&[3, 4])], |t, v| t.transpose(v[0]))),
        ("add", op_gradcheck(vec![r(&[3, 4]), r(&[3, 4])], |t, v| t.add(v[0], v[1]))),
        ("mul", op_gradcheck(vec![r(&[3, 4]), r(&[3, 4])], |t, v| t.mul(v[0], v[1]))),
        ("add_row_bias", op_gradcheck(vec![r(&[3, 4]), r(&[4])], |t, v| t.add_row_bias(v[0], v[1]))),
        ("linear", op_gradcheck(vec![r(&[3, 4]), r(&[4, 2]), r(&[2])], |t, v| t.linear(v[0], v[1], v[2]))),
        ("relu", op_gradcheck(vec![r(&[4, 4])], |t, v| Ok(t.relu(v[0])))),
        ("softmax_rows", op_gradcheck(vec![r(&[3, 5])], |t, v| t.softmax_rows(v[0]))),
        (
            "layer_norm",
            op_gradcheck(vec![r(&[3, 5]), r(&[5]), r(&[5])], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        (
            "conv2d",
            op_gradcheck(vec![r(&[2, 5, 5]), r(&[3, 2, 3, 3]), r(&[3])], |t, v| t.conv2d(v[0], v[1], v[2])),
        ),
        ("pixel_shuffle", op_gradcheck(vec![r(&[8, 2, 3])], |t, v| t.pixel_shuffle(v[0], 2))),
        ("slice_cols", op_gradcheck(vec![r(&[3, 6])], |t, v| t.slice_cols(v[0], 2, 3))),
        ("concat_rows", op_gradcheck(vec![r(&[2, 3]), r(&[4, 3])], |t, v| t.concat_rows(v[0], v[1]))),
        ("concat_cols", op_gradcheck(vec![r(&[2, 3]), r(&[2, 1])], |t, v| t.concat_cols(&[v[0], v[1]]))),
        ("scale", op_gradcheck(vec![r(&[2, 3])], |t, v| Ok(t.scale(v[0], -1.7)))),
    ];
    for (name, err) in checks {
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = rng_from_seed(9);
        let mut tape = Tape::new();
        let x = tape.constant(random(&mut rng, &[2, 6, 6]));
        let k = tape.constant(random(&mut rng, &[4, 2, 3, 3]));
        let b = tape.constant(random(&mut rng, &[4]));
        let y = tape.conv2d(x, k, b).unwrap();
        let y = tape.reshape(y, &[4, 36]).unwrap();
        let y = tape.softmax_rows(y).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(seed in any::<u64>(), r in 1usize..5, c in 1usize..8, shift in -50.0f64..50.0) {
        let mut rng = rng_from_seed(seed);
        let x = Tensor::from_fn(&[r, c], |_| uniform(&mut rng, -20.0, 20.0));
        let y = eval1(x.clone(), |t, v| t.softmax_rows(v)).unwrap();
        for row in y.data().chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted = eval1(x.map(|v| v + shift), |t, v| t.softmax_rows(v)).unwrap();
        prop_assert!(close(y.data(), shifted.data(), 1e-12));
    }

    #[test]
    fn layer_norm_standardizes_rows(seed in any::<u64>(), t in 1usize..5, d in 2usize..10) {
        let mut rng = rng_from_seed(seed);
        let x = Tensor::from_fn(&[t, d], |_| uniform(&mut rng, -5.0, 5.0));
        let y = eval1(x.clone(), |tape, v| {
            let g = tape.constant(Tensor::ones(&[d]));
            let b = tape.constant(Tensor::zeros(&[d]));
            tape.layer_norm(v, g, b, 1e-5)
        }).unwrap();
        for (row, src) in y.data().chunks(d).zip(x.data().chunks(d)) {
            let m = src.iter().sum::<f64>() / d as f64;
            let src_var = src.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d as f64;
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-10);
            if src_var > 1e-6 {
                // eps = 1e-5 shrinks the variance by var/(var+eps).
                prop_assert!((var - src_var / (src_var + 1e-5)).abs() < 1e-6);
                prop_assert!((var - 1.0).abs() < 1e-5 / src_var + 1e-6);
            }
        }
    }

    #[test]
    fn conv2d_matches_sliding_window(seed in any::<u64>(), ci in 1usize..3, co in 1usize..3, h in 1usize..9, w in 1usize..9, k3 in any::<bool>()) {
        let mut rng = rng_from_seed(seed);
        let ks = if k3 { 3 } else { 1 };
        let x = random(&mut rng, &[ci, h, w]);
        let k = random(&mut rng, &[co, ci, ks, ks]);
        let b = random(&mut rng, &[co]);
        let mut tape = Tape::new();
        let (vx, vk, vb) = (tape.constant(x.clone()), tape.constant(k.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(vx, vk, vb).unwrap();
        prop_assert!(close(tape.value(y).data(), &sliding_window(&x, &k, b.data()), 1e-12));
    }

    #[test]
    fn pixel_shuffle_inverse_is_exact(seed in any::<u64>(), c in 1usize..3, r in 1usize..4, h in 1usize..4, w in 1usize..4) {
        let mut rng = rng_from_seed(seed);
        let x = random(&mut rng, &[c * r * r, h, w]);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let s = tape.pixel_shuffle(v, r).unwrap();
        prop_assert_eq!(tape.shape(s), &[c, r * h, r * w]);
        let mut sorted_in = x.data().to_vec();
        let mut sorted_out = tape.value(s).data().to_vec();
        sorted_in.sort_by(f64::total_cmp);
        sorted_out.sort_by(f64::total_cmp);
        prop_assert_eq!(sorted_in, sorted_out);
        let back = tape.pixel_unshuffle(s, r).unwrap();
        prop_assert_eq!(tape.value(back), &x);
    }
}
