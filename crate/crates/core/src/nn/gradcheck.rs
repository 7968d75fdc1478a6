//! Central-difference checks for every differentiable op.

use super::*;

/// Max relative error between the tape gradient and central differences of
/// `f` at `x0`.
pub fn check_input<Fun>(x0: &Tensor<f64>, f: Fun) -> f64
where
    Fun: for<'g> Fn(Var<'g, f64>) -> Var<'g, f64>,
{
    let g = Graph::<f64>::inference();
    let x = g.input(x0.clone());
    let loss = f(x);
    let grads = g.backward(loss);
    let analytic = grads
        .of(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x0.shape()));
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..x0.len() {
        let eval = |delta: f64| {
            let mut xp = x0.clone();
            xp.data_mut()[i] += delta;
            let g = Graph::<f64>::inference();
            let v = f(g.constant(xp)).value().item();
            v
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (1e-6 + a.abs().max(numeric.abs()));
        worst = worst.max(err);
    }
    worst
}

fn wavy(shape: &[usize], seed: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|i| ((i as f64 + 1.0) * 0.37 + seed).sin() * 0.9 + 0.05)
            .collect(),
    )
}

/// Weighted sum so that every output element gets a distinct cotangent.
fn probe<'g>(y: Var<'g, f64>) -> Var<'g, f64> {
    let w = wavy(&y.shape(), 4.2);
    y.mul(y.graph().constant(w)).sum()
}

const TOL: f64 = 1e-5;

#[test]
fn elementwise_and_unary_ops() {
    let x0 = wavy(&[2, 3, 5], 0.3);
    let cases: Vec<(&str, Box<dyn for<'g> Fn(Var<'g, f64>) -> Var<'g, f64>>)> = vec![
        (
            "add",
            Box::new(|x| probe(x.add(x.graph().constant(wavy(&[2, 3, 5], 1.9))))),
        ),
        (
            "sub",
            Box::new(|x| probe(x.graph().constant(wavy(&[2, 3, 5], 1.9)).sub(x))),
        ),
        ("mul", Box::new(|x| probe(x.mul(x)))),
        ("scale", Box::new(|x| probe(x.scale(-2.5).add_scalar(3.0)))),
        ("leaky", Box::new(|x| probe(x.leaky_relu(0.1)))),
        ("relu", Box::new(|x| probe(x.relu()))),
        ("tanh", Box::new(|x| probe(x.tanh()))),
        ("sigmoid", Box::new(|x| probe(x.sigmoid()))),
        ("abs", Box::new(|x| probe(x.abs()))),
        ("square", Box::new(|x| probe(x.square()))),
        (
            "sqrt",
            Box::new(|x| probe(x.square().add_scalar(0.1).sqrt())),
        ),
        ("ln", Box::new(|x| probe(x.square().add_scalar(0.2).ln()))),
        ("exp", Box::new(|x| probe(x.exp()))),
        ("clamp", Box::new(|x| probe(x.clamp_min(0.31)))),
        ("mean", Box::new(|x| x.square().mean())),
    ];
    for (name, f) in cases {
        let err = check_input(&x0, |x| f(x));
        assert!(err < TOL, "{name}: rel err {err}");
    }
}

#[test]
fn shape_ops() {
    let x0 = wavy(&[2, 4, 6], 0.7);
    let cases: Vec<(&str, Box<dyn for<'g> Fn(Var<'g, f64>) -> Var<'g, f64>>)> = vec![
        ("reshape", Box::new(|x| probe(x.reshape(&[8, 6])))),
        ("transpose", Box::new(|x| probe(x.transpose12()))),
        ("slice", Box::new(|x| probe(x.slice(1, 1, 2)))),
        (
            "concat",
            Box::new(|x| probe(Var::concat(&[x, x.slice(1, 0, 3).scale(2.0)], 1))),
        ),
        ("repeat", Box::new(|x| probe(x.repeat_last(2)))),
        ("pool", Box::new(|x| probe(x.slice(2, 0, 5).avg_pool2()))),
        ("select", Box::new(|x| probe(x.select_time(2)))),
        (
            "stack",
            Box::new(|x| {
                let a = x.select_time(1);
                let b = x.select_time(3);
                probe(Var::stack_time(&[a, b, a]))
            }),
        ),
        (
            "bias",
            Box::new(|x| {
                let b = x.slice(2, 0, 1).reshape(&[2, 4]);
                probe(x.broadcast_add(b, 1))
            }),
        ),
        (
            "bias_channel",
            Box::new(|x| {
                let b = x.slice(0, 0, 1).slice(2, 0, 1).reshape(&[4]);
                probe(x.broadcast_add(b, 1))
            }),
        ),
        (
            "fold",
            Box::new(|x| probe(x.reshape(&[2, 1, 24]).fold_periods(5))),
        ),
        (
            "frames",
            Box::new(|x| probe(x.reshape(&[2, 24]).frames(7, 4, -3, 6))),
        ),
    ];
    for (name, f) in cases {
        let err = check_input(&x0, |x| f(x));
        assert!(err < TOL, "{name}: rel err {err}");
    }
}

#[test]
fn matmul_and_convolutions() {
    let x0 = wavy(&[2, 4, 9], 0.2);
    let w_conv = wavy(&[6, 2, 3], 2.2);
    let w_t = wavy(&[4, 3, 8], 0.6);
    let w_mm = wavy(&[9, 5], 1.4);
    let err = check_input(&x0, |x| {
        let w = x.graph().constant(w_conv.clone());
        let geom = ConvGeom {
            kernel: 3,
            stride: 2,
            padding: 2,
            dilation: 2,
        };
        probe(x.conv1d(w, geom, 2))
    });
    assert!(err < TOL, "conv input grad {err}");
    let err = check_input(&w_conv, |w| {
        let x = w.graph().constant(x0.clone());
        let geom = ConvGeom {
            kernel: 3,
            stride: 1,
            padding: 1,
            dilation: 1,
        };
        probe(x.conv1d(w, geom, 2))
    });
    assert!(err < TOL, "conv weight grad {err}");
    let err = check_input(&x0, |x| {
        let w = x.graph().constant(w_t.clone());
        probe(x.conv_transpose1d(
            w,
            ConvGeom {
                kernel: 8,
                stride: 4,
                padding: 2,
                dilation: 1,
            },
        ))
    });
    assert!(err < TOL, "convT input grad {err}");
    let err = check_input(&w_t, |w| {
        let x = w.graph().constant(x0.clone());
        probe(x.conv_transpose1d(
            w,
            ConvGeom {
                kernel: 8,
                stride: 4,
                padding: 2,
                dilation: 1,
            },
        ))
    });
    assert!(err < TOL, "convT weight grad {err}");
    let err = check_input(&w_mm, |w| {
        let x = w.graph().constant(x0.clone()).reshape(&[8, 9]);
        probe(x.matmul(w).tanh())
    });
    assert!(err < TOL, "matmul grad {err}");
}

#[test]
fn shared_subexpressions_accumulate() {
    let x0 = wavy(&[3, 3], 0.1);
    let err = check_input(&x0, |x| {
        let y = x.matmul(x).add(x.mul(x));
        probe(y.tanh().add(y))
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn frozen_branches_get_no_gradient() {
    let mut ps = ParamStore::<f64>::new();
    let a = ps.add("a", wavy(&[3], 0.0));
    let b = ps.add("b", wavy(&[3], 1.0));
    let g = Graph::with_trainable([a].into_iter().collect());
    let loss = g.param(&ps, a).mul(g.param(&ps, b)).sum();
    let grads = g.backward(loss);
    assert!(grads.param(a).is_some());
    assert!(grads.param(b).is_none());
    assert_eq!(grads.param(a).unwrap(), ps.value(b));
}

#[test]
fn straight_through_passes_gradient_and_replaces_value() {
    let x0 = wavy(&[2, 3], 0.4);
    let q = Tensor::full(&[2, 3], 0.5);
    let g = Graph::<f64>::inference();
    let x = g.input(x0.clone());
    let st = x.straight_through(q.clone());
    assert_eq!(*st.value(), q);
    let grads = g.backward(probe(st));
    let g2 = Graph::<f64>::inference();
    let x2 = g2.input(x0);
    let grads2 = g2.backward(probe(x2));
    assert_eq!(grads.of(x).unwrap(), grads2.of(x2).unwrap());
}

#[test]
fn intermediate_gradients_are_kept_only_when_retained() {
    let g = Graph::<f64>::inference();
    let x = g.input(wavy(&[4], 0.2));
    let h = x.tanh();
    let y = x.square();
    g.retain_grad(h);
    let grads = g.backward(h.sum().add(y.sum()));
    assert_eq!(grads.of(h).unwrap().data(), &[1.0; 4]);
    assert!(grads.of(y).is_none());
    assert!(grads.of(x).is_some());
}
