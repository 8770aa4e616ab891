use crate::tensor::Tensor;

/// Central-difference gradient `(f(x + h·e) − f(x − h·e)) / 2h` per coordinate.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape as x")
}

/// Largest per-coordinate `|a − f| / max(1, |f|)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, f)| (a - f).abs() / f.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compares [`super::Graph::backward`] against [`finite_diff_grad`] for every
/// input of a scalar-valued graph builder. Returns the worst relative error.
pub fn check_gradients(
    inputs: &[Tensor],
    build: impl Fn(&mut super::Graph, &[super::Var]) -> crate::Result<super::Var>,
    h: f64,
) -> crate::Result<f64> {
    let mut g = super::Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let numeric = finite_diff_grad(
            |probe| {
                let mut g2 = super::Graph::new();
                let vs: Vec<_> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g2.param(if j == k { probe.clone() } else { t.clone() }))
                    .collect();
                let l = build(&mut g2, &vs).expect("builder succeeded once already");
                g2.value(l).item()
            },
            input,
            h,
        );
        worst = worst.max(max_rel_error(&analytic, numeric.data()));
    }
    Ok(worst)
}
