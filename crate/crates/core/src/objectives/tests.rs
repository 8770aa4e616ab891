use super::*;
use crate::autograd::check_gradients;
use crate::encoder::ParaFeatures;

const H: f64 = 1e-5;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn brute_cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Double loop straight from the loss definition.
fn brute_unsup(h: &[Vec<f64>], hp: &[Vec<f64>], tau: f64) -> f64 {
    let n = h.len();
    let mut total = 0.0;
    for i in 0..n {
        let num = (brute_cos(&h[i], &hp[i]) / tau).exp();
        let mut den = 0.0;
        for j in 0..n {
            den += (brute_cos(&h[i], &hp[j]) / tau).exp();
        }
        total += -(num / den).ln();
    }
    total / n as f64
}

fn brute_sup(h: &[Vec<f64>], hp: &[Vec<f64>], hm: &[Vec<f64>], tau: f64) -> f64 {
    let n = h.len();
    let mut total = 0.0;
    for i in 0..n {
        let num = (brute_cos(&h[i], &hp[i]) / tau).exp();
        let mut den = 0.0;
        for j in 0..n {
            den += (brute_cos(&h[i], &hp[j]) / tau).exp();
            den += (brute_cos(&h[i], &hm[j]) / tau).exp();
        }
        total += -(num / den).ln();
    }
    total / n as f64
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.rows().map(<[f64]>::to_vec).collect()
}

fn eval_unsup(h: &Tensor, hp: &Tensor, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(h.clone());
    let b = g.constant(hp.clone());
    let l = unsup_simcse_loss(&mut g, a, b, tau)?;
    Ok(g.value(l).item())
}

fn eval_sup(h: &Tensor, hp: &Tensor, hm: &Tensor, tau: f64) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(h.clone());
    let b = g.constant(hp.clone());
    let c = g.constant(hm.clone());
    let l = sup_simcse_loss(&mut g, a, b, c, tau).unwrap();
    g.value(l).item()
}

fn empty_bound() -> Bound {
    Bound::from_vars(Vec::<(String, Var)>::new())
}

fn score(kind: SimilarityHeadKind, a: &[f64], b: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let d = a.len();
    let va = g.constant(t(&[1, d], a));
    let vb = g.constant(t(&[1, d], b));
    let s = sts_score(&mut g, va, vb, kind, &empty_bound())?;
    Ok(g.value(s).data()[0])
}

#[test]
fn sst_logits_zero_head_gives_zero_logits() {
    let mut g = Graph::new();
    let w = g.param(Tensor::zeros(&[3, 5]));
    let b = g.param(Tensor::zeros(&[5]));
    let p = Bound::from_vars([("head.sst.weight", w), ("head.sst.bias", b)]);
    let x = g.constant(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.5, 0.5]));
    let y = sst_logits(&mut g, x, &p).unwrap();
    assert_eq!(g.shape(y), &[2, 5]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn sst_logits_hand_example() {
    let mut g = Graph::new();
    // d = 2: logits_k = x0·w0k + x1·w1k + b_k
    let w = g.param(t(&[2, 5], &[1.0, 0.0, 2.0, -1.0, 0.5, 0.0, 1.0, 1.0, 3.0, 0.5]));
    let b = g.param(t(&[5], &[0.1, 0.2, 0.3, 0.4, 0.5]));
    let p = Bound::from_vars([("head.sst.weight", w), ("head.sst.bias", b)]);
    let x = g.constant(t(&[1, 2], &[2.0, -1.0]));
    let y = sst_logits(&mut g, x, &p).unwrap();
    let want = [2.1, -0.8, 3.3, -4.6, 1.0];
    for (a, e) in g.value(y).data().iter().zip(want) {
        assert!((a - e).abs() < 1e-12, "{a} vs {e}");
    }
}

#[test]
fn sst_head_gradients_match_finite_differences() {
    let mut rng = Rng::new(3);
    let inputs = [randn(&mut rng, &[3, 4]), randn(&mut rng, &[4, 5]), randn(&mut rng, &[5])];
    let err = check_gradients(
        &inputs,
        |g, v| {
            let p = Bound::from_vars([("head.sst.weight", v[1]), ("head.sst.bias", v[2])]);
            let logits = sst_logits(g, v[0], &p)?;
            g.cross_entropy(logits, &[0, 3, 4])
        },
        H,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

fn para_bound(g: &mut Graph, weight: Tensor) -> Bound {
    let w = g.param(weight);
    let b = g.param(Tensor::zeros(&[1]));
    Bound::from_vars([("head.para.weight", w), ("head.para.bias", b)])
}

#[test]
fn paraphrase_equal_inputs_zero_out_the_difference_block() {
    let d = 3;
    let mut g = Graph::new();
    let a = g.constant(t(&[1, d], &[0.5, -1.0, 2.0]));
    let feats = paraphrase_features(&mut g, a, a, ParaFeatures::Full).unwrap();
    assert_eq!(g.shape(feats), &[1, 4 * d]);
    assert!(g.value(feats).data()[2 * d..3 * d].iter().all(|&v| v == 0.0));

    // With only the |a − b| block weighted, the logit is exactly the bias.
    let mut w = vec![0.0; 4 * d];
    w[2 * d..3 * d].fill(1.7);
    let p = para_bound(&mut g, t(&[4 * d, 1], &w));
    let logit = paraphrase_logit(&mut g, a, a, &p, ParaFeatures::Full).unwrap();
    assert_eq!(g.value(logit).data(), &[0.0]);
}

#[test]
fn paraphrase_logit_is_symmetric_when_a_and_b_blocks_share_weights() {
    let d = 4;
    let mut rng = Rng::new(9);
    let half: Vec<f64> = (0..d).map(|_| rng.normal(0.0, 1.0)).collect();
    let tail: Vec<f64> = (0..2 * d).map(|_| rng.normal(0.0, 1.0)).collect();
    let w: Vec<f64> = half.iter().chain(&half).chain(&tail).copied().collect();
    let a = randn(&mut rng, &[2, d]);
    let b = randn(&mut rng, &[2, d]);
    let mut g = Graph::new();
    let p = para_bound(&mut g, t(&[4 * d, 1], &w));
    let va = g.constant(a);
    let vb = g.constant(b);
    let ab = paraphrase_logit(&mut g, va, vb, &p, ParaFeatures::Full).unwrap();
    let ba = paraphrase_logit(&mut g, vb, va, &p, ParaFeatures::Full).unwrap();
    assert_eq!(g.shape(ab), &[2]);
    for (x, y) in g.value(ab).data().iter().zip(g.value(ba).data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn paraphrase_gradients_match_finite_differences() {
    let mut rng = Rng::new(4);
    for layout in [ParaFeatures::Full, ParaFeatures::Concat] {
        let d = 3;
        let inputs = [
            randn(&mut rng, &[2, d]),
            randn(&mut rng, &[2, d]),
            randn(&mut rng, &[layout.width(d), 1]),
            randn(&mut rng, &[1]),
        ];
        let err = check_gradients(
            &inputs,
            |g, v| {
                let p = Bound::from_vars([("head.para.weight", v[2]), ("head.para.bias", v[3])]);
                let logit = paraphrase_logit(g, v[0], v[1], &p, layout)?;
                bce_loss(g, logit, &[1.0, 0.0])
            },
            H,
        )
        .unwrap();
        assert!(err < 1e-4, "{layout:?}: {err}");
    }
}

#[test]
fn cos_scale_identical_inputs_reach_five() {
    let a = [0.3, -1.2, 2.0];
    assert!((score(SimilarityHeadKind::CosScale, &a, &a).unwrap() - 5.0).abs() < 1e-12);
}

#[test]
fn cos_sigmoid_orthogonal_is_half_scale() {
    let s = score(SimilarityHeadKind::CosSigmoid, &[1.0, 0.0], &[0.0, 2.0]).unwrap();
    assert!((s - 2.5).abs() < 1e-12);
}

#[test]
fn cos_sigmoid_identical_inputs_cap_below_five() {
    let a = [1.0, 2.0, -0.5];
    let s = score(SimilarityHeadKind::CosSigmoid, &a, &a).unwrap();
    let oracle = 5.0 / (1.0 + (-1.0f64).exp());
    assert!((s - oracle).abs() < 1e-12);
    assert!((s - 3.6552).abs() < 1e-4);
}

#[test]
fn cos_sigmoid_is_increasing_in_cosine_and_bounded() {
    let lo = 5.0 / (1.0 + 1f64.exp());
    let hi = 5.0 / (1.0 + (-1f64).exp());
    let mut prev = f64::NEG_INFINITY;
    for k in 0..=40 {
        let theta = std::f64::consts::PI * f64::from(k) / 40.0;
        let s = score(SimilarityHeadKind::CosSigmoid, &[1.0, 0.0], &[theta.cos(), theta.sin()]).unwrap();
        assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
        if k > 0 {
            assert!(s < prev, "score must fall as the angle opens");
        }
        prev = s;
    }
}

#[test]
fn cos_sigmoid_scaled_matches_scalar_formula() {
    let a = [1.0, 1.0];
    let b = [1.0, 0.0];
    let c = brute_cos(&a, &b);
    let oracle = 5.0 / (1.0 + (-5.0 * c).exp());
    let s = score(SimilarityHeadKind::CosSigmoidScaled, &a, &b).unwrap();
    assert!((s - oracle).abs() < 1e-12);
}

#[test]
fn cosine_heads_reject_zero_embeddings() {
    for kind in [
        SimilarityHeadKind::CosScale,
        SimilarityHeadKind::CosSigmoid,
        SimilarityHeadKind::CosSigmoidScaled,
    ] {
        let err = score(kind, &[0.0, 0.0], &[1.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::ZeroNorm(_)), "{kind}: {err}");
    }
}

#[test]
fn parametric_heads_match_hand_formulas_and_gradients() {
    let d = 3;
    let mut rng = Rng::new(12);
    let a = randn(&mut rng, &[2, d]);
    let b = randn(&mut rng, &[2, d]);
    let lin_w = randn(&mut rng, &[2 * d, 1]);
    let lin_b = randn(&mut rng, &[1]);
    let cross = randn(&mut rng, &[d, d]);

    let mut g = Graph::new();
    let va = g.constant(a.clone());
    let vb = g.constant(b.clone());
    let p = Bound::from_vars([
        ("head.sts.linear.weight", g.constant(lin_w.clone())),
        ("head.sts.linear.bias", g.constant(lin_b.clone())),
        ("head.sts.cross_attn", g.constant(cross.clone())),
    ]);
    let sum = sts_score(&mut g, va, vb, SimilarityHeadKind::SumLinear, &p).unwrap();
    let xattn = sts_score(&mut g, va, vb, SimilarityHeadKind::CrossAttention, &p).unwrap();
    for (r, (ra, rb)) in a.rows().zip(b.rows()).enumerate() {
        let joined: Vec<f64> = ra.iter().chain(rb).copied().collect();
        let lin = dot(&joined, lin_w.data()) + lin_b.data()[0];
        assert!((g.value(sum).data()[r] - lin).abs() < 1e-12);

        let mut bil = 0.0;
        for i in 0..d {
            for j in 0..d {
                bil += ra[i] * cross.data()[i * d + j] * rb[j];
            }
        }
        let want = 5.0 / (1.0 + (-bil / (d as f64).sqrt()).exp());
        assert!((g.value(xattn).data()[r] - want).abs() < 1e-12);
    }

    for kind in SimilarityHeadKind::ALL {
        let inputs = [a.clone(), b.clone(), lin_w.clone(), lin_b.clone(), cross.clone()];
        let err = check_gradients(
            &inputs,
            |g, v| {
                let p = Bound::from_vars([
                    ("head.sts.linear.weight", v[2]),
                    ("head.sts.linear.bias", v[3]),
                    ("head.sts.cross_attn", v[4]),
                ]);
                let s = sts_score(g, v[0], v[1], kind, &p)?;
                mse_loss(g, s, &[1.5, 4.0])
            },
            H,
        )
        .unwrap();
        assert!(err < 1e-4, "{kind}: {err}");
    }
}

#[test]
fn registry_names_and_lookup() {
    let reg = SimilarityRegistry::default();
    let names: Vec<_> = reg.names().collect();
    assert_eq!(
        names,
        ["sum_linear", "cos_scale", "cos_sigmoid", "cos_sigmoid_scaled", "cross_attention"]
    );
    for kind in SimilarityHeadKind::ALL {
        assert_eq!(reg.build(kind).unwrap().kind(), kind);
        assert_eq!(kind.name().parse::<SimilarityHeadKind>().unwrap(), kind);
    }
    assert!(reg.build_named("dot").is_err());
    assert!("cosine".parse::<SimilarityHeadKind>().is_err());
}

#[test]
fn bce_examples_and_gradient() {
    let mut g = Graph::new();
    let z = g.param(t(&[2], &[0.0, 30.0]));
    let l = bce_loss(&mut g, z, &[0.5, 1.0]).unwrap();
    let want = (2f64.ln() + (1.0 + (-30f64).exp()).ln()) / 2.0;
    assert!((g.value(l).item() - want).abs() < 1e-12);
    g.backward(l).unwrap();
    let grad = g.grad(z).unwrap();
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    assert!((grad[0] - (sig(0.0) - 0.5) / 2.0).abs() < 1e-12);
    assert!((grad[1] - (sig(30.0) - 1.0) / 2.0).abs() < 1e-12);

    let mut g = Graph::new();
    let z = g.param(t(&[1], &[0.0]));
    assert!(bce_loss(&mut g, z, &[1.5]).is_err());
}

#[test]
fn mse_examples_and_gradient() {
    let mut g = Graph::new();
    let p = g.param(t(&[2], &[0.0, 0.0]));
    let l = mse_loss(&mut g, p, &[3.0, 4.0]).unwrap();
    assert!((g.value(l).item() - 12.5).abs() < 1e-12);
    g.backward(l).unwrap();
    assert_eq!(g.grad(p).unwrap(), &[-3.0, -4.0]);

    let mut g = Graph::new();
    let p = g.param(t(&[2], &[1.0, 2.0]));
    let l = mse_loss(&mut g, p, &[1.0, 2.0]).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    assert!(mse_loss(&mut g, p, &[1.0]).is_err());
}

#[test]
fn cosine_examples() {
    let a = [1.0, 2.0, 3.0];
    assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    let b = [-0.5, 4.0, 1.0];
    let a3: Vec<f64> = a.iter().map(|v| 3.0 * v).collect();
    assert!((cosine(&a3, &b).unwrap() - cosine(&a, &b).unwrap()).abs() < 1e-12);
    assert!(matches!(cosine(&[0.0, 0.0], &a[..2]), Err(Error::ZeroNorm(_))));
}

#[test]
fn unsup_identical_rows_give_log_n() {
    for n in 2..=6 {
        let row = [0.4, -1.0, 2.0];
        let data: Vec<f64> = (0..n).flat_map(|_| row).collect();
        let h = t(&[n, 3], &data);
        let loss = eval_unsup(&h, &h, DEFAULT_TAU).unwrap();
        assert!((loss - (n as f64).ln()).abs() < 1e-9, "n={n}");
    }
}

#[test]
fn unsup_orthogonal_positives_nearly_zero() {
    let n = 4;
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0 + i as f64;
    }
    let h = t(&[n, n], &data);
    let loss = eval_unsup(&h, &h, 0.05).unwrap();
    let oracle = -(20f64.exp() / (20f64.exp() + (n as f64 - 1.0))).ln();
    assert!((loss - oracle).abs() < 1e-15);
    assert!((loss - 3.0 * (-20f64).exp()).abs() < 1e-15);
}

#[test]
fn unsup_rejects_single_row_and_bad_tau() {
    let h = t(&[1, 2], &[1.0, 0.0]);
    assert!(eval_unsup(&h, &h, 0.05).is_err());
    let h = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    assert!(eval_unsup(&h, &h, 0.0).is_err());
}

#[test]
fn simcse_losses_match_brute_force() {
    let mut rng = Rng::new(21);
    for n in 2..=8 {
        for d in [2, 4, 16] {
            let h = randn(&mut rng, &[n, d]);
            let hp = randn(&mut rng, &[n, d]);
            let hm = randn(&mut rng, &[n, d]);
            let tau = 0.05 + rng.uniform();
            let u = eval_unsup(&h, &hp, tau).unwrap();
            assert!((u - brute_unsup(&rows(&h), &rows(&hp), tau)).abs() < 1e-10);
            let s = eval_sup(&h, &hp, &hm, tau);
            assert!((s - brute_sup(&rows(&h), &rows(&hp), &rows(&hm), tau)).abs() < 1e-10);
        }
    }
}

#[test]
fn unsup_is_invariant_to_row_rescaling() {
    let mut rng = Rng::new(5);
    let h = randn(&mut rng, &[4, 3]);
    let hp = randn(&mut rng, &[4, 3]);
    let rescale = |x: &Tensor, rng: &mut Rng| {
        let mut y = x.clone();
        for row in y.data_mut().chunks_mut(3) {
            let c = 0.1 + 5.0 * rng.uniform();
            row.iter_mut().for_each(|v| *v *= c);
        }
        y
    };
    let base = eval_unsup(&h, &hp, 0.1).unwrap();
    let scaled = eval_unsup(&rescale(&h, &mut rng), &rescale(&hp, &mut rng), 0.1).unwrap();
    assert!((base - scaled).abs() < 1e-12);
}

#[test]
fn sup_single_example_scalar_value() {
    let h = t(&[1, 2], &[1.0, 0.0]);
    let hm = t(&[1, 2], &[0.0, 1.0]);
    let loss = eval_sup(&h, &h, &hm, 1.0);
    let e = 1f64.exp();
    assert!((loss - (-(e / (e + 1.0)).ln())).abs() < 1e-12);
    assert!((loss - 0.3133).abs() < 1e-4);
}

#[test]
fn sup_exceeds_unsup_when_hard_negatives_are_orthogonal() {
    // Anchors and positives live in the first 3 coordinates; negatives in the last.
    let mut rng = Rng::new(8);
    let n = 3;
    let mut h = vec![0.0; n * 4];
    let mut hp = vec![0.0; n * 4];
    let mut hm = vec![0.0; n * 4];
    for i in 0..n {
        for k in 0..3 {
            h[i * 4 + k] = rng.normal(0.0, 1.0);
            hp[i * 4 + k] = rng.normal(0.0, 1.0);
        }
        hm[i * 4 + 3] = 1.0 + rng.uniform();
    }
    let (h, hp, hm) = (t(&[n, 4], &h), t(&[n, 4], &hp), t(&[n, 4], &hm));
    assert!(eval_sup(&h, &hp, &hm, 0.1) > eval_unsup(&h, &hp, 0.1).unwrap());
}

#[test]
fn simcse_gradients_match_finite_differences() {
    let mut rng = Rng::new(31);
    let inputs = [randn(&mut rng, &[4, 3]), randn(&mut rng, &[4, 3]), randn(&mut rng, &[4, 3])];
    let err = check_gradients(&inputs, |g, v| unsup_simcse_loss(g, v[0], v[1], 0.5), H).unwrap();
    assert!(err < 1e-4, "unsup {err}");
    let err = check_gradients(&inputs, |g, v| sup_simcse_loss(g, v[0], v[1], v[2], 0.5), H).unwrap();
    assert!(err < 1e-4, "sup {err}");
}

#[test]
fn one_step_on_free_embeddings_raises_positive_alignment() {
    let n = 4;
    let mut rng = Rng::new(2);
    // Orthogonal negatives: each positive sits near its own basis direction.
    let mut h = vec![0.0; n * n];
    let mut hp = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            h[i * n + k] = if i == k { 1.0 } else { 0.3 * rng.normal(0.0, 1.0) };
        }
        hp[i * n + i] = 1.0;
    }
    let (h, hp) = (t(&[n, n], &h), t(&[n, n], &hp));
    let align = |h: &Tensor| -> Vec<f64> {
        h.rows().zip(hp.rows()).map(|(a, b)| brute_cos(a, b)).collect()
    };
    let before = align(&h);

    let mut g = Graph::new();
    let vh = g.param(h.clone());
    let vp = g.constant(hp.clone());
    let l = unsup_simcse_loss(&mut g, vh, vp, 0.05).unwrap();
    g.backward(l).unwrap();
    let lr = 1e-3;
    let stepped: Vec<f64> = h.data().iter().zip(g.grad(vh).unwrap()).map(|(x, gr)| x - lr * gr).collect();
    let after = align(&t(&[n, n], &stepped));
    for (b, a) in before.iter().zip(&after) {
        assert!(a > b, "{a} <= {b}");
    }
}

#[test]
fn task_names_round_trip() {
    for task in Task::ALL {
        assert_eq!(task.name().parse::<Task>().unwrap(), task);
        assert!(task.head_prefix().starts_with(HEAD_PREFIX));
    }
    assert!("nli".parse::<Task>().is_err());
}
