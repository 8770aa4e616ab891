use super::*;
use crate::rng::Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.normal(0.0, 1.0)).collect::<Vec<_>>())
}

/// Contracts `out` with fixed pseudo-random weights so every output
/// coordinate carries a distinct upstream gradient.
fn probe(g: &mut Graph, out: Var) -> Result<Var> {
    let n = g.value(out).numel();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
    let w = Tensor::new(g.shape(out).to_vec(), w)?;
    let weighted = g.mul_const(out, &w)?;
    Ok(g.sum(weighted))
}

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

#[test]
fn matmul_identity_and_hand_examples() {
    let mut g = Graph::new();
    let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 5]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = Rng::new(1);
    let inputs = [randn(&mut rng, &[4, 5]), randn(&mut rng, &[5, 3])];
    let err = check_gradients(
        &inputs,
        |g, v| {
            let c = g.matmul(v[0], v[1])?;
            probe(g, c)
        },
        H,
    )
    .unwrap();
    assert!(err < TOL, "rel error {err}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = g.softmax(x);
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(t(&[2], &[1000.0, 0.0]));
    let y = g.softmax(x);
    let d = g.value(y).data();
    assert!(d.iter().all(|v| v.is_finite()));
    assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-12);
}

#[test]
fn softmax_gradient_and_normalization() {
    let mut rng = Rng::new(2);
    for _ in 0..10 {
        let x = randn(&mut rng, &[6]);
        let err = check_gradients(
            std::slice::from_ref(&x),
            |g, v| {
                let y = g.softmax(v[0]);
                probe(g, y)
            },
            H,
        )
        .unwrap();
        assert!(err < TOL, "rel error {err}");

        let mut g = Graph::new();
        let xv = g.constant(randn(&mut rng, &[3, 5]));
        let y = g.softmax(xv);
        for row in g.value(y).rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gamma = g.constant(Tensor::ones(&[4]));
    let beta = g.constant(Tensor::zeros(&[4]));
    let x = g.constant(t(&[1, 4], &[5.0; 4]));
    let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-12));

    // [1, -1]: mean 0, variance 1, so y = x / sqrt(1 + eps)
    let eps = 1e-5;
    let gamma = g.constant(Tensor::ones(&[2]));
    let beta = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(t(&[1, 2], &[1.0, -1.0]));
    let y = g.layer_norm(x, gamma, beta, eps).unwrap();
    let expect = 1.0 / (1.0_f64 + eps).sqrt();
    let d = g.value(y).data();
    assert!((d[0] - expect).abs() < 1e-15 && (d[1] + expect).abs() < 1e-15);
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = Rng::new(3);
    let inputs = [
        randn(&mut rng, &[3, 8]),
        randn(&mut rng, &[8]),
        randn(&mut rng, &[8]),
    ];
    let err = check_gradients(
        &inputs,
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            probe(g, y)
        },
        H,
    )
    .unwrap();
    assert!(err < TOL, "rel error {err}");
}

#[test]
fn gelu_examples() {
    assert_eq!(gelu_scalar(0.0), 0.0);
    assert!((gelu_scalar(20.0) - 20.0).abs() < 1e-12);
    assert!(gelu_scalar(-20.0).abs() < 1e-12);
    // independent scalar evaluation at x = 1
    let inner = (2.0 / std::f64::consts::PI).sqrt() * (1.0 + 0.044715);
    let expect = 0.5 * (1.0 + inner.tanh());
    assert!((gelu_scalar(1.0) - expect).abs() < 1e-15);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

    let mut g = Graph::new();
    let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.param(Tensor::ones(&[2]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn two_consumers_accumulate() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.5, -0.5]));
    let a = g.scale(x, 3.0);
    let b = g.tanh(x);
    let sa = g.sum(a);
    let sb = g.sum(b);
    let total = g.add(sa, sb).unwrap();
    g.backward(total).unwrap();
    let gx = g.grad(x).unwrap();
    for (i, &xv) in [1.5_f64, -0.5].iter().enumerate() {
        let expect = 3.0 + (1.0 - xv.tanh().powi(2));
        assert!((gx[i] - expect).abs() < 1e-14);
    }
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::ones(&[2]));
    let c = g.constant(Tensor::ones(&[2]));
    let y = g.mul(x, c).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert!(g.grad(x).is_some());
}

#[test]
fn finite_diff_examples() {
    let x = t(&[2, 2], &[0.3, -1.0, 2.0, 4.0]);
    let fd = finite_diff_grad(|v| v.data().iter().sum(), &x, 1e-5);
    assert!(fd.data().iter().all(|g| (g - 1.0).abs() < 1e-9));

    let x = Tensor::scalar(3.0);
    let fd = finite_diff_grad(|v| v.item() * v.item(), &x, 1e-5);
    assert!((fd.item() - 6.0).abs() < 1e-8);

    // d softmax(x)_0 / dx = [s0(1 - s0), -s0 s1]
    let x = t(&[2], &[1.0, 2.0]);
    let fd = finite_diff_grad(
        |v| {
            let mut row = v.data().to_vec();
            softmax_in_place(&mut row);
            row[0]
        },
        &x,
        1e-5,
    );
    let e1 = 1.0_f64.exp();
    let e2 = 2.0_f64.exp();
    let (s0, s1) = (e1 / (e1 + e2), e2 / (e1 + e2));
    assert!((fd.data()[0] - s0 * (1.0 - s0)).abs() < 1e-9);
    assert!((fd.data()[1] + s0 * s1).abs() < 1e-9);
}

#[test]
fn elementwise_and_structural_ops_gradients() {
    let mut rng = Rng::new(4);
    let x = randn(&mut rng, &[2, 3, 4]);
    let y = randn(&mut rng, &[2, 3, 4]);
    let bias = randn(&mut rng, &[4]);
    let s = randn(&mut rng, &[1]);
    let w = randn(&mut rng, &[4, 2]);
    let cases: Vec<(&str, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>)> = vec![
        ("add", Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", Box::new(|g, v| g.mul(v[0], v[1]))),
        ("add_bias", Box::new(|g, v| g.add_bias(v[0], v[2]))),
        ("mul_scalar", Box::new(|g, v| g.mul_scalar(v[0], v[3]))),
        ("add_scalar", Box::new(|g, v| g.add_scalar(v[0], v[3]))),
        ("gelu", Box::new(|g, v| Ok(g.gelu(v[0])))),
        ("tanh", Box::new(|g, v| Ok(g.tanh(v[0])))),
        ("sigmoid", Box::new(|g, v| Ok(g.sigmoid(v[0])))),
        ("abs", Box::new(|g, v| Ok(g.abs(v[0])))),
        ("scale", Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        ("transpose", Box::new(|g, v| g.transpose_last(v[0]))),
        ("reshape", Box::new(|g, v| g.reshape(v[0], vec![6, 4]))),
        ("matmul3d", Box::new(|g, v| g.matmul(v[0], v[4]))),
        ("sum_last", Box::new(|g, v| Ok(g.sum_last(v[0])))),
        ("mean", Box::new(|g, v| Ok(g.mean(v[0])))),
        ("split_heads", Box::new(|g, v| g.split_heads(v[0], 2))),
        (
            "merge_heads",
            Box::new(|g, v| {
                let s = g.split_heads(v[0], 2)?;
                let t = g.tanh(s);
                g.merge_heads(t, 2)
            }),
        ),
        ("select_token", Box::new(|g, v| g.select_token(v[0], 1))),
        (
            "masked_mean",
            Box::new(|g, v| g.masked_mean(v[0], &[1.0, 1.0, 0.0, 1.0, 0.0, 0.0])),
        ),
        ("concat", Box::new(|g, v| g.concat_last(&[v[0], v[1], v[0]]))),
        ("l2_normalize", Box::new(|g, v| g.l2_normalize(v[0]))),
        (
            "bmm",
            Box::new(|g, v| {
                let yt = g.transpose_last(v[1])?;
                g.bmm(v[0], yt)
            }),
        ),
        ("softmax3d", Box::new(|g, v| Ok(g.softmax(v[0])))),
        (
            "embedding",
            Box::new(|g, v| {
                let table = g.reshape(v[0], vec![6, 4])?;
                g.embedding(table, &[0, 5, 5, 2], &[2, 2])
            }),
        ),
    ];
    let inputs = [x, y, bias, s, w];
    for (name, build) in &cases {
        let err = check_gradients(
            &inputs,
            |g, v| {
                let out = build(g, v)?;
                probe(g, out)
            },
            H,
        )
        .unwrap();
        assert!(err < TOL, "{name}: rel error {err}");
    }
}

#[test]
fn fused_losses_gradients() {
    let mut rng = Rng::new(5);
    let logits = randn(&mut rng, &[4, 3]);
    let err = check_gradients(
        std::slice::from_ref(&logits),
        |g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]),
        H,
    )
    .unwrap();
    assert!(err < TOL, "cross_entropy {err}");

    let err = check_gradients(
        std::slice::from_ref(&logits),
        |g, v| g.bce_with_logits(v[0], &[0.0, 1.0, 0.5, 1.0, 0.0, 0.0, 1.0, 0.2, 0.9, 0.0, 1.0, 1.0]),
        H,
    )
    .unwrap();
    assert!(err < TOL, "bce {err}");
}

#[test]
fn masked_positions_get_zero_softmax_mass() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 3], &[0.2, 5.0, -1.0]));
    let y = g
        .add_const(x, &t(&[1, 3], &[0.0, f64::NEG_INFINITY, 0.0]))
        .unwrap();
    let p = g.softmax(y);
    assert_eq!(g.value(p).data()[1], 0.0);
    let l = probe(&mut g, p).unwrap();
    g.backward(l).unwrap();
    let gx = g.grad(x).unwrap();
    assert!(gx.iter().all(|v| v.is_finite()));
    assert_eq!(gx[1], 0.0);
}

#[test]
fn l2_normalize_rejects_zero_rows() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.l2_normalize(x), Err(Error::ZeroNorm(_))));
}

#[test]
fn ops_are_deterministic() {
    let build = || {
        let mut rng = Rng::new(11);
        let mut g = Graph::new();
        let a = g.param(randn(&mut rng, &[3, 4]));
        let b = g.param(randn(&mut rng, &[4, 4]));
        let c = g.matmul(a, b).unwrap();
        let d = g.softmax(c);
        let l = probe(&mut g, d).unwrap();
        g.backward(l).unwrap();
        (g.value(l).item().to_bits(), g.grad(a).unwrap().to_vec())
    };
    assert_eq!(build(), build());
}
