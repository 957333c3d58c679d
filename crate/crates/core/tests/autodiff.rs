//! Forward primitives against direct loop oracles, and reverse-mode
//! gradients against central finite differences.

use discond::tensor::Container;
use discond::{Error, Graph, RandomSource, Tensor, Var};

/// Direct nested-loop cross-correlation, kept independent of the im2col path.
fn conv2d_oracle(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0f32; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0f64;
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * c + ic) * k + ky) * k + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xo] = acc as f32;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out).unwrap()
}

/// Scatter form of the transposed correlation, straight from its definition.
fn conv_transpose2d_oracle(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[1], w.shape()[2]);
    let oh = (h - 1) * stride + k - 2 * pad;
    let ow = (wd - 1) * stride + k - 2 * pad;
    let mut out = vec![0.0f64; n * co * oh * ow];
    for b in 0..n {
        for ic in 0..ci {
            for y in 0..h {
                for xi in 0..wd {
                    let xv = x.data()[((b * ci + ic) * h + y) * wd + xi] as f64;
                    for oc in 0..co {
                        for ky in 0..k {
                            for kx in 0..k {
                                let oy = (y * stride + ky) as isize - pad as isize;
                                let ox = (xi * stride + kx) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                let wv = w.data()[((ic * co + oc) * k + ky) * k + kx] as f64;
                                out[((b * co + oc) * oh + oy as usize) * ow + ox as usize] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, co, oh, ow], out.into_iter().map(|v| v as f32).collect()).unwrap()
}

fn assert_close(a: &Tensor, b: &Tensor, tol: f32) {
    assert_eq!(a.shape(), b.shape());
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "element {i}: {x} vs {y}");
    }
}

#[test]
fn conv2d_with_centred_delta_kernel_reproduces_input() {
    // A 3x3 delta kernel with padding 1 keeps the 4x4 extent.
    let x = Tensor::ones(&[1, 1, 4, 4]);
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(k));
    let y = g.conv2d(xv, kv, None, 1, 1).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    let mut rng = RandomSource::new(42);
    let x = rng.uniform_tensor(&[1, 1, 6, 6], -1.0, 1.0);
    let w = rng.uniform_tensor(&[1, 1, 4, 4], -1.0, 1.0);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv2d(xv, wv, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 3, 3]);
    assert_close(g.value(y), &conv2d_oracle(&x, &w, 2, 1), 1e-6);

    let x = rng.uniform_tensor(&[2, 3, 8, 8], -1.0, 1.0);
    let w = rng.uniform_tensor(&[5, 3, 4, 4], -1.0, 1.0);
    let b = rng.uniform_tensor(&[5], -1.0, 1.0);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(xv, wv, Some(bv), 2, 1).unwrap();
    let mut want = conv2d_oracle(&x, &w, 2, 1);
    let plane = 16;
    for (i, v) in want.data_mut().iter_mut().enumerate() {
        *v += b.data()[(i / plane) % 5];
    }
    assert_close(g.value(y), &want, 1e-5);
}

#[test]
fn conv_transpose2d_matches_scatter_oracle_and_doubles_extent() {
    let mut rng = RandomSource::new(5);
    let x = rng.uniform_tensor(&[2, 3, 4, 4], -1.0, 1.0);
    let w = rng.uniform_tensor(&[3, 2, 4, 4], -1.0, 1.0);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv_transpose2d(xv, wv, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[2, 2, 8, 8]);
    assert_close(g.value(y), &conv_transpose2d_oracle(&x, &w, 2, 1), 1e-5);
}

#[test]
fn stride_two_chain_halves_extent() {
    let mut g = Graph::new();
    let mut v = g.constant(Tensor::zeros(&[1, 1, 32, 32]));
    let mut extents = Vec::new();
    for cin in [1, 32, 64] {
        let w = g.constant(Tensor::zeros(&[64, cin, 4, 4]));
        v = g.conv2d(v, w, None, 2, 1).unwrap();
        extents.push(g.shape(v)[2]);
        // keep channel count consistent with the next weight
        if cin == 1 {
            v = g.narrow(v, 1, 0, 32).unwrap();
        }
    }
    assert_eq!(extents, vec![16, 8, 4]);
}

#[test]
fn relu_of_negative_tensor_is_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[3, 4], -0.5));
    let y = g.relu(x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn shape_errors_name_the_op_and_extents() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4]));
    let err = g.add(a, b).unwrap_err().to_string();
    assert!(
        err.contains("add") && err.contains("[2, 3]") && err.contains("[4]"),
        "{err}"
    );
    let w = g.constant(Tensor::zeros(&[5, 4]));
    let err = g.linear(a, w, None).unwrap_err().to_string();
    assert!(err.contains("linear") && err.contains("[5, 4]"), "{err}");
    let x = g.constant(Tensor::zeros(&[1, 2, 8, 8]));
    let k = g.constant(Tensor::zeros(&[4, 3, 4, 4]));
    let err = g.conv2d(x, k, None, 2, 1).unwrap_err().to_string();
    assert!(err.contains("conv2d") && err.contains("2 channels"), "{err}");
}

#[test]
fn square_gradient_at_three_is_six() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(3.0));
    let y = g.square(x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn sum_gradient_is_ones() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::from_fn(&[2, 3, 2], |i| i as f32));
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &Tensor::ones(&[2, 3, 2]));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::zeros(&[2]));
    let y = g.exp(x).unwrap();
    assert!(matches!(g.backward(y), Err(Error::Shape { op: "backward", .. })));
}

#[test]
fn non_finite_values_name_the_producing_op() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::new(&[1], vec![-1.0]).unwrap());
    assert!(matches!(g.log(x), Err(Error::NonFinite { op: "log" })));

    // Finite forward value whose derivative overflows.
    let mut g = Graph::new();
    let x = g.variable(Tensor::new(&[1], vec![1e-40]).unwrap());
    let y = g.log(x).unwrap();
    let s = g.sum(y).unwrap();
    assert!(matches!(g.backward(s), Err(Error::NonFinite { op: "log" })));
}

#[test]
fn unreachable_parameters_get_zero_gradient() {
    let mut params = discond::ParameterSet::new();
    params.insert("used", Tensor::ones(&[2])).unwrap();
    params.insert("unused", Tensor::ones(&[3])).unwrap();
    params.get_mut("unused").unwrap().grad = Tensor::ones(&[3]);
    let mut g = Graph::new();
    let u = g.param(&params, "used").unwrap();
    let _ = g.param(&params, "unused").unwrap();
    let s = g.sum(u).unwrap();
    let grads = g.backward(s).unwrap();
    params.load_grads(&g, &grads);
    assert_eq!(params.get("used").unwrap().grad, Tensor::ones(&[2]));
    assert_eq!(params.get("unused").unwrap().grad, Tensor::zeros(&[3]));
}

// ---------------------------------------------------------------- finite differences

/// Largest relative error between autodiff and central differences of
/// `sum(f(inputs))`, perturbing every element of every input by `h`.
///
/// The finite-difference side sums the forward output in f64 so that
/// untouched elements cancel exactly, and divides by the step actually
/// representable in f32. Errors are relative to the largest gradient
/// magnitude of the input, since f32 forward rounding puts an absolute noise
/// floor under every finite difference.
fn max_fd_error(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var, h: f32) -> f64 {
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars);
        g.value(y).data().iter().map(|&v| v as f64).sum()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let y = f(&mut g, &vars);
    let loss = g.sum(y).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        let auto = grads
            .get(vars[k])
            .map(|t| t.data().to_vec())
            .unwrap_or(vec![0.0; t.len()]);
        let mut fds = Vec::with_capacity(t.len());
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let step = plus[k].data()[i] as f64 - minus[k].data()[i] as f64;
            fds.push((eval(&plus) - eval(&minus)) / step);
        }
        let scale = auto
            .iter()
            .map(|a| (*a as f64).abs())
            .chain(fds.iter().map(|f| f.abs()))
            .fold(1e-6, f64::max);
        for (a, fd) in auto.iter().zip(&fds) {
            worst = worst.max((*a as f64 - fd).abs() / scale);
        }
    }
    worst
}

fn bounded(rng: &mut RandomSource, shape: &[usize]) -> Tensor {
    rng.uniform_tensor(shape, -2.0, 2.0)
}

/// Keeps values away from kinks so a step of `h` cannot cross them.
fn away_from_zero(rng: &mut RandomSource, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = 0.1 + 1.9 * rng.uniform() as f32;
        if rng.uniform() < 0.5 {
            -m
        } else {
            m
        }
    })
}

const H: f32 = 1e-3;
const TOL: f64 = 1e-3;

#[test]
fn elementwise_primitives_match_finite_differences() {
    let mut rng = RandomSource::new(1);
    for trial in 0..5 {
        let a = bounded(&mut rng, &[3, 4]);
        let b = bounded(&mut rng, &[3, 4]);
        let row = bounded(&mut rng, &[4]);
        let cases: Vec<(&str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Var>)> = vec![
            (
                "add",
                vec![a.clone(), b.clone()],
                Box::new(|g, v| g.add(v[0], v[1]).unwrap()),
            ),
            (
                "sub",
                vec![a.clone(), b.clone()],
                Box::new(|g, v| g.sub(v[0], v[1]).unwrap()),
            ),
            (
                "mul",
                vec![a.clone(), b.clone()],
                Box::new(|g, v| g.mul(v[0], v[1]).unwrap()),
            ),
            (
                "mul_bcast",
                vec![a.clone(), row.clone()],
                Box::new(|g, v| g.mul(v[0], v[1]).unwrap()),
            ),
            (
                "sub_bcast",
                vec![a.clone(), row.clone()],
                Box::new(|g, v| g.sub(v[0], v[1]).unwrap()),
            ),
            ("exp", vec![a.clone()], Box::new(|g, v| g.exp(v[0]).unwrap())),
            ("square", vec![a.clone()], Box::new(|g, v| g.square(v[0]).unwrap())),
            ("sigmoid", vec![a.clone()], Box::new(|g, v| g.sigmoid(v[0]).unwrap())),
            (
                "scalar",
                vec![a.clone()],
                Box::new(|g, v| {
                    let t = g.mul_scalar(v[0], -1.5).unwrap();
                    g.add_scalar(t, 0.25).unwrap()
                }),
            ),
            (
                "log",
                vec![Tensor::from_fn(&[3, 4], |i| 0.2 + (i as f32) * 0.15)],
                Box::new(|g, v| g.log(v[0]).unwrap()),
            ),
            (
                "abs",
                vec![away_from_zero(&mut rng, &[3, 4])],
                Box::new(|g, v| g.abs(v[0]).unwrap()),
            ),
            (
                "relu",
                vec![away_from_zero(&mut rng, &[3, 4])],
                Box::new(|g, v| g.relu(v[0]).unwrap()),
            ),
        ];
        for (name, inputs, f) in cases {
            let err = max_fd_error(&inputs, f.as_ref(), H);
            assert!(err < TOL, "trial {trial} {name}: relative error {err}");
        }
    }
}

/// Weighted sum so that softmax-type ops (whose plain sum is constant) get a
/// non-trivial gradient.
fn weighted(g: &mut Graph, y: Var, seed: u64) -> Var {
    let mut rng = RandomSource::new(seed);
    let w = rng.uniform_tensor(g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    g.mul(y, w).unwrap()
}

#[test]
fn reductions_and_normalisers_match_finite_differences() {
    let mut rng = RandomSource::new(2);
    for trial in 0..5 {
        let a = bounded(&mut rng, &[3, 5]);
        let t = rng.uniform_tensor(&[3, 5], 0.0, 1.0);
        let cases: Vec<(&str, Box<dyn Fn(&mut Graph, &[Var]) -> Var>)> = vec![
            (
                "softmax",
                Box::new(|g, v| {
                    let y = g.softmax(v[0]).unwrap();
                    weighted(g, y, 10)
                }),
            ),
            (
                "log_softmax",
                Box::new(|g, v| {
                    let y = g.log_softmax(v[0]).unwrap();
                    weighted(g, y, 11)
                }),
            ),
            (
                "sum_last",
                Box::new(|g, v| {
                    let s = g.square(v[0]).unwrap();
                    g.sum_last(s).unwrap()
                }),
            ),
            (
                "mean",
                Box::new(|g, v| {
                    let s = g.exp(v[0]).unwrap();
                    g.mean(s).unwrap()
                }),
            ),
            ("bce", Box::new(move |g, v| g.bce_with_logits(v[0], &t).unwrap())),
            (
                "reshape_concat_narrow",
                Box::new(|g, v| {
                    let r = g.reshape(v[0], &[5, 3]).unwrap();
                    let e = g.exp(r).unwrap();
                    let c = g.concat(&[r, e], 1).unwrap();
                    let n = g.narrow(c, 1, 2, 3).unwrap();
                    weighted(g, n, 12)
                }),
            ),
        ];
        for (name, f) in cases {
            let err = max_fd_error(std::slice::from_ref(&a), f.as_ref(), H);
            assert!(err < TOL, "trial {trial} {name}: relative error {err}");
        }
    }
}

#[test]
fn layer_primitives_match_finite_differences() {
    let mut rng = RandomSource::new(3);
    for trial in 0..3 {
        let x = bounded(&mut rng, &[2, 5]);
        let w = bounded(&mut rng, &[3, 5]);
        let b = bounded(&mut rng, &[3]);
        let err = max_fd_error(
            &[x, w, b],
            &|g, v| {
                let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
                weighted(g, y, 20)
            },
            H,
        );
        assert!(err < TOL, "trial {trial} linear: {err}");

        let x = bounded(&mut rng, &[2, 2, 6, 6]);
        let w = bounded(&mut rng, &[3, 2, 4, 4]);
        let b = bounded(&mut rng, &[3]);
        let err = max_fd_error(
            &[x, w, b],
            &|g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
                weighted(g, y, 21)
            },
            H,
        );
        assert!(err < TOL, "trial {trial} conv2d: {err}");

        let x = bounded(&mut rng, &[2, 3, 3, 3]);
        let w = bounded(&mut rng, &[3, 2, 4, 4]);
        let b = bounded(&mut rng, &[2]);
        let err = max_fd_error(
            &[x, w, b],
            &|g, v| {
                let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
                weighted(g, y, 22)
            },
            H,
        );
        assert!(err < TOL, "trial {trial} conv_transpose2d: {err}");
    }
}

#[test]
fn conv_gradients_at_edge_extents() {
    let mut rng = RandomSource::new(4);
    // 1x1 needs padding 2 for a 4x4 kernel to fit; 4x4 maps to 2x2.
    for (extent, pad) in [(1usize, 2usize), (4, 1)] {
        let x = bounded(&mut rng, &[1, 2, extent, extent]);
        let w = bounded(&mut rng, &[2, 2, 4, 4]);
        let err = max_fd_error(
            &[x.clone(), w.clone()],
            &|g, v| {
                let y = g.conv2d(v[0], v[1], None, 2, pad).unwrap();
                weighted(g, y, 30)
            },
            H,
        );
        assert!(err < TOL, "conv2d {extent}x{extent}: {err}");
        let err = max_fd_error(
            &[x, w],
            &|g, v| {
                let y = g.conv_transpose2d(v[0], v[1], None, 2, 1).unwrap();
                weighted(g, y, 31)
            },
            H,
        );
        assert!(err < TOL, "conv_transpose2d {extent}x{extent}: {err}");
    }
}

#[test]
fn adam_trajectories_are_bit_identical_for_equal_seeds() {
    use discond::tensor::{Adam, AdamConfig};
    let run = |seed: u64| -> Container {
        let mut rng = RandomSource::new(seed);
        let mut params = discond::ParameterSet::new();
        params.insert("w", rng.uniform_tensor(&[4, 6], -0.5, 0.5)).unwrap();
        params.insert("b", Tensor::zeros(&[4])).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(1e-2), &params);
        for step in 0..120 {
            let mut data_rng = RandomSource::new(seed).derive(step);
            let x = data_rng.normal_tensor(&[8, 6]);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let w = g.param(&params, "w").unwrap();
            let b = g.param(&params, "b").unwrap();
            let y = g.linear(xv, w, Some(b)).unwrap();
            let s = g.sigmoid(y).unwrap();
            let l = g.mean(s).unwrap();
            let grads = g.backward(l).unwrap();
            params.load_grads(&g, &grads);
            adam.step(&mut params);
        }
        let mut c = params.to_container("");
        c.extend(adam.to_container());
        c
    };
    let (a, b) = (run(9), run(9));
    let bits = |c: &Container| -> Vec<u32> {
        c.iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&run(10)));
}
