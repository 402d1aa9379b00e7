//! Layer examples and finite-difference gradient checks.

use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::flow::FlowFieldSpec;
use crate::geom::Vec2;
use crate::rng;

/// Central-difference gradient of `f` with respect to every entry of `x`.
fn fd_grad(x: &Mat, h: f64, mut f: impl FnMut(&Mat) -> f64) -> Mat {
    let mut g = Mat::zeros(x.rows(), x.cols());
    for i in 0..x.data().len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        g.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    g
}

fn assert_close(analytic: &Mat, numeric: &Mat, tol: f64, what: &str) {
    let scale = numeric.data().iter().fold(1e-3f64, |m, v| m.max(v.abs()));
    for (i, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let err = (a - n).abs() / scale;
        assert!(err < tol, "{what}[{i}]: analytic {a} vs numeric {n} (rel {err:e})");
    }
}

/// Checks d(loss)/d(every parameter) against central differences.
fn check_params(store: &ParamStore, loss: impl Fn(&mut Tape, &Bound) -> Var, what: &str) {
    let mut tape = Tape::new();
    let bound = tape.bind(store, true);
    let l = loss(&mut tape, &bound);
    let grads = tape.backward(l).unwrap();
    let mut analytic = store.clone();
    analytic.zero_grads();
    bound.accumulate_grads(&grads, &mut analytic);
    for (k, p) in store.iter().enumerate() {
        let numeric = fd_grad(&p.value, 1e-5, |v| {
            let mut s = store.clone();
            *s.value_mut(ParamId(k)) = v.clone();
            let mut t = Tape::new();
            let b = t.bind(&s, true);
            let l = loss(&mut t, &b);
            t.value(l).item()
        });
        assert_close(analytic.grad(ParamId(k)), &numeric, 1e-4, &alloc::format!("{what}:{}", p.name));
    }
}

fn random(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut s = rng::substream(seed, 0, 0);
    Mat::from_fn(rows, cols, |_, _| rng::uniform(&mut s, -1.0, 1.0))
}

#[test]
fn gelu_examples() {
    assert_eq!(gelu(0.0), 0.0);
    assert!((gelu(10.0) - 10.0).abs() < 1e-12);
    // Φ(1) from the erf series, independent of libm
    let mut erf = 0.0;
    let x = 1.0 / core::f64::consts::SQRT_2;
    let mut term = x;
    for n in 0..40 {
        erf += term / (2 * n + 1) as f64;
        term *= -x * x / (n + 1) as f64;
    }
    let phi1 = 0.5 * (1.0 + 2.0 / core::f64::consts::PI.sqrt() * erf);
    assert!((gelu(1.0) - phi1).abs() < 1e-14);
    assert!((gelu(1.0) - 0.841345).abs() < 1e-6);
}

#[test]
fn fourier_examples() {
    assert_eq!(fourier_embed(0.0, 3), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    let e = fourier_embed(1.0, 1);
    assert!(e[0].abs() < 1e-15 && (e[1] + 1.0).abs() < 1e-15);
    let e = fourier_embed(0.25, 2);
    let h = core::f64::consts::FRAC_1_SQRT_2;
    for (a, b) in e.iter().zip([h, h, 1.0, 0.0]) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn fourier_tape_matches_scalar_version() {
    let mut tape = Tape::new();
    let t = tape.constant(Mat::from_vec(2, 1, vec![0.3, 0.8]));
    let e = fourier_embed_var(&mut tape, t, 3);
    assert_eq!(tape.value(e).row(0), fourier_embed(0.3, 3).as_slice());
    assert_eq!(tape.value(e).row(1), fourier_embed(0.8, 3).as_slice());
}

#[test]
fn mlp_examples() {
    let mut store = ParamStore::new();
    let mut s = rng::substream(1, 1, 1);
    let mlp = Mlp::new(&mut store, "m", &[3, 4, 2], &mut s);
    for p in store.iter_mut() {
        p.value.data_mut().fill(0.0);
    }
    let mut tape = Tape::new();
    let b = tape.bind(&store, false);
    let x = tape.constant(random(5, 3, 2));
    let y = mlp.forward(&mut tape, &b, x).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    // single affine layer set to the identity
    let mut store = ParamStore::new();
    let lin = Mlp::new(&mut store, "id", &[2, 2], &mut s);
    *store.value_mut(lin.layers()[0].weight) = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
    let mut tape = Tape::new();
    let b = tape.bind(&store, false);
    let xm = random(3, 2, 3);
    let x = tape.constant(xm.clone());
    let y = lin.forward(&mut tape, &b, x).unwrap();
    assert_eq!(tape.value(y), &xm);

    // 1 → 2 → 1 with hand-set weights:
    // h = [0.5x + 0.1, -x], y = 2 gelu(h0) - gelu(h1) + 0.3, at x = 1
    let mut store = ParamStore::new();
    let net = Mlp::new(&mut store, "n", &[1, 2, 1], &mut s);
    *store.value_mut(net.layers()[0].weight) = Mat::from_vec(1, 2, vec![0.5, -1.0]);
    *store.value_mut(net.layers()[0].bias) = Mat::from_vec(1, 2, vec![0.1, 0.0]);
    *store.value_mut(net.layers()[1].weight) = Mat::from_vec(2, 1, vec![2.0, -1.0]);
    *store.value_mut(net.layers()[1].bias) = Mat::scalar(0.3);
    let mut tape = Tape::new();
    let b = tape.bind(&store, false);
    let x = tape.constant(Mat::scalar(1.0));
    let y = net.forward(&mut tape, &b, x).unwrap();
    // gelu(0.6) = 0.6 Φ(0.6) = 0.6 · 0.7257468822499265; gelu(-1) = -0.15865525393145707
    let expected = 2.0 * 0.6 * 0.725_746_882_249_926_5 + 0.158_655_253_931_457_07 + 0.3;
    assert!((tape.value(y).item() - expected).abs() < 1e-12);

    let bad = tape.constant(Mat::zeros(1, 3));
    assert!(matches!(net.forward(&mut tape, &b, bad), Err(crate::Error::ShapeMismatch(_))));
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar GRU recurrence written out component by component.
fn gru_oracle(store: &ParamStore, gru: &Gru, seq: &[Vec<f64>]) -> Vec<f64> {
    let hd = gru.hidden;
    let wx = store.value(gru.w_x);
    let wh = store.value(gru.w_h);
    let bx = store.value(gru.b_x);
    let bh = store.value(gru.b_h);
    let mut h = vec![0.0; hd];
    for x in seq {
        let pre = |gate: usize, j: usize, with_h: bool| {
            let col = gate * hd + j;
            let mut a = bx.get(0, col);
            for (i, xi) in x.iter().enumerate() {
                a += xi * wx.get(i, col);
            }
            let mut b = bh.get(0, col);
            for (i, hi) in h.iter().enumerate() {
                b += hi * wh.get(i, col);
            }
            if with_h {
                a + b
            } else {
                a
            }
        };
        let mut next = vec![0.0; hd];
        for j in 0..hd {
            let r = sigmoid(pre(0, j, true));
            let u = sigmoid(pre(1, j, true));
            let col = 2 * hd + j;
            let mut hn = bh.get(0, col);
            for (i, hi) in h.iter().enumerate() {
                hn += hi * wh.get(i, col);
            }
            let n = (pre(2, j, false) + r * hn).tanh();
            next[j] = (1.0 - u) * h[j] + u * n;
        }
        h = next;
    }
    h
}

#[test]
fn gru_examples() {
    let mut store = ParamStore::new();
    let mut s = rng::substream(5, 5, 5);
    let gru = Gru::new(&mut store, "g", 3, 2, &mut s);

    // zero parameters keep the state at zero
    let mut zero = store.clone();
    for p in zero.iter_mut() {
        p.value.data_mut().fill(0.0);
    }
    let mut tape = Tape::new();
    let b = tape.bind(&zero, false);
    let seq: Vec<Var> = (0..4).map(|k| tape.constant(random(1, 3, 10 + k))).collect();
    let h = gru.encode(&mut tape, &b, &seq).unwrap();
    assert!(tape.value(h).data().iter().all(|&v| v == 0.0));

    // tiny weights, length-2 sequence, against the scalar oracle
    for p in store.iter_mut() {
        let n = p.value.data().len();
        for (i, v) in p.value.data_mut().iter_mut().enumerate() {
            *v = 0.05 * ((i * 7 + n) % 11) as f64 - 0.25;
        }
    }
    let xs = [vec![0.2, -0.1, 0.4], vec![-0.3, 0.5, 0.1]];
    let mut tape = Tape::new();
    let b = tape.bind(&store, false);
    let seq: Vec<Var> = xs.iter().map(|x| tape.constant(Mat::row_vector(x))).collect();
    let h = gru.encode(&mut tape, &b, &seq).unwrap();
    let oracle = gru_oracle(&store, &gru, &xs);
    for (a, o) in tape.value(h).data().iter().zip(&oracle) {
        assert!((a - o).abs() < 1e-14);
    }

    // length-1 sequence is a single cell application
    let mut tape = Tape::new();
    let b = tape.bind(&store, false);
    let x = tape.constant(Mat::row_vector(&xs[0]));
    let enc = gru.encode(&mut tape, &b, &[x]).unwrap();
    let h0 = tape.constant(Mat::zeros(1, 2));
    let cell = gru.cell(&mut tape, &b, x, h0);
    assert_eq!(tape.value(enc), tape.value(cell));

    assert!(matches!(gru.encode(&mut tape, &b, &[]), Err(crate::Error::EmptySequence)));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let w = tape.input(Mat::scalar(0.7));
    let x = tape.constant(Mat::scalar(3.0));
    let l = tape.mul(w, x);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(w).unwrap().item(), 3.0);

    let mut tape = Tape::new();
    let w = tape.input(Mat::scalar(0.0));
    let l = tape.gelu(w);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(w).unwrap().item(), 0.5);

    // a parameter that does not feed the loss gets zero
    let mut store = ParamStore::new();
    store.add("used", Mat::scalar(2.0));
    store.add("unused", Mat::scalar(5.0));
    let mut tape = Tape::new();
    let b = tape.bind(&store, true);
    let l = tape.square(b.var(ParamId(0)));
    let g = tape.backward(l).unwrap();
    b.accumulate_grads(&g, &mut store);
    assert_eq!(store.grad(ParamId(0)).item(), 4.0);
    assert_eq!(store.grad(ParamId(1)).item(), 0.0);
}

#[test]
fn backward_before_forward_is_an_error() {
    let mut other = Tape::new();
    let v = other.input(Mat::scalar(1.0));
    let empty = Tape::new();
    assert!(matches!(empty.backward(v), Err(crate::Error::NoForward)));
}

#[test]
fn dense_gelu_gradients() {
    let mut store = ParamStore::new();
    let mut s = rng::substream(7, 7, 7);
    let mlp = Mlp::new(&mut store, "m", &[3, 5, 4, 2], &mut s);
    let x = random(4, 3, 8);
    check_params(&store, |t, b| {
        let xv = t.constant(x.clone());
        let y = mlp.forward(t, b, xv).unwrap();
        let sq = t.square(y);
        t.sum_all(sq)
    }, "mlp");
}

#[test]
fn gru_gradients() {
    let mut store = ParamStore::new();
    let mut s = rng::substream(9, 9, 9);
    let gru = Gru::new(&mut store, "g", 3, 4, &mut s);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += 0.1;
        }
    }
    let xs: Vec<Mat> = (0..3).map(|k| random(2, 3, 20 + k)).collect();
    check_params(&store, |t, b| {
        let seq: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let h = gru.encode(t, b, &seq).unwrap();
        let w = t.constant(random(2, 4, 99));
        let y = t.mul(h, w);
        t.sum_all(y)
    }, "gru");
}

#[test]
fn fourier_embedding_gradient_in_time() {
    let tm = Mat::from_vec(3, 1, vec![0.1, 0.45, 0.9]);
    let weights = random(3, 8, 4);
    let loss = |t: &mut Tape, tv: Var| {
        let e = fourier_embed_var(t, tv, 4);
        let w = t.constant(weights.clone());
        let y = t.mul(e, w);
        t.sum_all(y)
    };
    let mut tape = Tape::new();
    let tv = tape.input(tm.clone());
    let l = loss(&mut tape, tv);
    let g = tape.backward(l).unwrap();
    let numeric = fd_grad(&tm, 1e-6, |v| {
        let mut t = Tape::new();
        let tv = t.input(v.clone());
        let l = loss(&mut t, tv);
        t.value(l).item()
    });
    assert_close(g.get(tv).unwrap(), &numeric, 1e-4, "fourier");
}

#[test]
fn tangent_path_is_differentiable() {
    // second-order: d/dθ of the input-Jacobian trace
    let mut store = ParamStore::new();
    let mut s = rng::substream(3, 3, 3);
    let mlp = Mlp::new(&mut store, "m", &[4, 6, 6, 2], &mut s);
    let x = random(3, 4, 30);
    check_params(&store, |t, b| {
        let xv = t.constant(x.clone());
        let (_, tan) = mlp.forward_with_tangents(t, b, xv, &[0, 1]).unwrap();
        let a = t.slice(tan[0], 0, 1);
        let c = t.slice(tan[1], 1, 1);
        let tr = t.add(a, c);
        let sq = t.square(tr);
        t.sum_all(sq)
    }, "trace");
}

#[test]
fn tangents_match_finite_differences() {
    let mut store = ParamStore::new();
    let mut s = rng::substream(4, 4, 4);
    let mlp = Mlp::new(&mut store, "m", &[3, 8, 8, 2], &mut s);
    let x = random(2, 3, 31);
    let mut tape = Tape::new();
    let b = tape.bind(&store, false);
    let xv = tape.constant(x.clone());
    let (_, tan) = mlp.forward_with_tangents(&mut tape, &b, xv, &[0, 2]).unwrap();
    for (k, &axis) in [0usize, 2].iter().enumerate() {
        for out in 0..2 {
            for row in 0..2 {
                let h = 1e-6;
                let eval = |d: f64| {
                    let mut xm = x.clone();
                    let v = xm.get(row, axis) + d;
                    xm.set(row, axis, v);
                    let mut t = Tape::new();
                    let bb = t.bind(&store, false);
                    let xv = t.constant(xm);
                    let y = mlp.forward(&mut t, &bb, xv).unwrap();
                    t.value(y).get(row, out)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((tape.value(tan[k]).get(row, out) - fd).abs() < 1e-7);
            }
        }
    }
}

#[test]
fn every_elementwise_and_structural_op() {
    type Op = fn(&mut Tape, Var) -> Var;
    let xm = random(4, 2, 40);
    let ops: Vec<(&str, Op)> = vec![
        ("sigmoid", |t, x| t.sigmoid(x)),
        ("tanh", |t, x| t.tanh(x)),
        ("exp", |t, x| t.exp(x)),
        ("softplus", |t, x| t.softplus(x)),
        ("gelu_deriv", |t, x| t.gelu_deriv(x)),
        ("cos", |t, x| t.cos(x)),
        ("clamp", |t, x| t.clamp(x, -0.5, 0.5)),
        ("recip", |t, x| { let y = t.offset(x, 3.0); t.recip(y) }),
        ("row_sum", |t, x| t.row_sum(x)),
        ("repeat_group", |t, x| { let r = t.repeat_rows(x, 3); let s = t.square(r); t.group_sum(s, 2) }),
        ("mul_col", |t, x| { let c = t.slice(x, 1, 1); t.mul_col(x, c) }),
        ("mul_scalar", |t, x| { let s = t.slice(x, 0, 1); let s = t.sum_all(s); t.mul_scalar(x, s) }),
        ("guardrail", |t, x| { let y = t.scale(x, 2.0); t.guardrail(y, 0.8, 1.5) }),
        ("broadcast", |t, x| { let y = t.broadcast_row(x, 2, 5); t.square(y) }),
        ("field", |t, x| {
            let f = FlowFieldSpec::LambOseenVortex { circulation: 1.3, core_radius: 0.7, center: Vec2::new(0.1, 0.0) };
            t.field_velocity(x, &f)
        }),
    ];
    for (name, op) in ops {
        let weights = |rows: usize, cols: usize| random(rows, cols, 77);
        let loss = |t: &mut Tape, x: Var| {
            let y = op(t, x);
            let (r, c) = t.shape(y);
            let w = t.constant(weights(r, c));
            let p = t.mul(y, w);
            t.sum_all(p)
        };
        let mut tape = Tape::new();
        let x = tape.input(xm.clone());
        let l = loss(&mut tape, x);
        let g = tape.backward(l).unwrap();
        let numeric = fd_grad(&xm, 1e-6, |v| {
            let mut t = Tape::new();
            let x = t.input(v.clone());
            let l = loss(&mut t, x);
            t.value(l).item()
        });
        assert_close(g.get(x).unwrap(), &numeric, 1e-5, name);
    }
}

#[test]
fn param_checksum_tracks_values() {
    let mut a = ParamStore::new();
    a.add("w", Mat::scalar(1.0));
    let b = a.clone();
    assert_eq!(a.checksum(), b.checksum());
    *a.value_mut(ParamId(0)) = Mat::scalar(1.0 + f64::EPSILON);
    assert_ne!(a.checksum(), b.checksum());
}
