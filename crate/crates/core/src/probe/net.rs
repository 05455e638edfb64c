use super::{Backbone, Mode, ProbeParams};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `z·σ(z)`.
pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

/// `σ(z)·(1 + z·(1 − σ(z)))`.
pub fn silu_grad(z: f64) -> f64 {
    silu_grad_cached(z, sigmoid(z))
}

/// Intermediate values of one forward call, needed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x: Matrix,
    /// Gate pre-activations (gated backbone only).
    g: Option<Matrix>,
    /// Up pre-activations.
    u: Matrix,
    /// SiLU of the gate (gated) or of `u` (standard).
    s: Matrix,
    /// σ of the same pre-activation, reused for SiLU'.
    sig: Matrix,
    /// Input to the down projection.
    m: Matrix,
    logits: Matrix,
    backbone: Backbone,
    stamp: u64,
}

impl ForwardCache {
    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn batch_size(&self) -> usize {
        self.x.rows()
    }
}

/// `(SiLU(z), σ(z))` elementwise.
fn silu_parts(z: &Matrix) -> (Matrix, Matrix) {
    let sig = z.map(sigmoid);
    let s = z.hadamard(&sig);
    (s, sig)
}

/// SiLU' from a pre-activation and its cached sigmoid; equals [`silu_grad`].
fn silu_grad_cached(z: f64, s: f64) -> f64 {
    s * (1.0 + z * (1.0 - s))
}

pub fn forward(params: &ProbeParams, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
    if x.cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} columns, probe expects d = {}",
            x.cols(),
            params.input_dim()
        )));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("probe input".into()));
    }
    let u = x.matmul_transposed(params.up());
    let (g, s, sig, m) = match params.gate() {
        Some(gate) => {
            let g = x.matmul_transposed(gate);
            let (s, sig) = silu_parts(&g);
            let m = u.hadamard(&s);
            (Some(g), s, sig, m)
        }
        None => {
            let (s, sig) = silu_parts(&u);
            let m = s.clone();
            (None, s, sig, m)
        }
    };
    let logits = m.matmul_transposed(params.down());
    let cache = ForwardCache {
        x: x.clone(),
        g,
        u,
        s,
        sig,
        m,
        logits: logits.clone(),
        backbone: params.backbone(),
        stamp: params.stamp(),
    };
    Ok((logits, cache))
}

#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Classes(&'a [u8]),
    Values(&'a [f64]),
}

impl Targets<'_> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(t) => t.len(),
            Targets::Values(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode(&self) -> Mode {
        match self {
            Targets::Classes(_) => Mode::Classification,
            Targets::Values(_) => Mode::Regression,
        }
    }
}

/// Mean softmax cross-entropy (classes) or mean squared error (values),
/// with its gradient with respect to the logits.
pub fn loss(logits: &Matrix, targets: Targets<'_>) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    if targets.len() != n {
        return Err(Error::Shape(format!("{n} logit rows against {} targets", targets.len())));
    }
    if n == 0 {
        return Err(Error::invalid("loss over an empty batch"));
    }
    let want = targets.mode().output_dim();
    if logits.cols() != want {
        return Err(Error::Shape(format!(
            "{:?} needs {want} logits per row, got {}",
            targets.mode(),
            logits.cols()
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, want);
    let mut total = 0.0;
    match targets {
        Targets::Classes(t) => {
            for (i, &y) in t.iter().enumerate() {
                let y = y as usize;
                if y >= want {
                    return Err(Error::invalid(format!("class target {y} out of range")));
                }
                let row = logits.row(i);
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                let lse = mx + z.ln();
                total += lse - row[y];
                let g = grad.row_mut(i);
                for (k, gk) in g.iter_mut().enumerate() {
                    let p = (row[k] - lse).exp();
                    *gk = (p - if k == y { 1.0 } else { 0.0 }) * inv_n;
                }
            }
        }
        Targets::Values(t) => {
            for (i, &v) in t.iter().enumerate() {
                let r = logits.get(i, 0) - v;
                total += r * r;
                grad.set(i, 0, 2.0 * r * inv_n);
            }
        }
    }
    Ok((total * inv_n, grad))
}

/// Gradients of the loss for every weight matrix; `gate` is `None` for the
/// standard backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub gate: Option<Matrix>,
    pub up: Matrix,
    pub down: Matrix,
}

impl Gradients {
    pub fn iter(&self) -> impl Iterator<Item = (super::Weight, &Matrix)> {
        self.gate
            .as_ref()
            .map(|g| (super::Weight::Gate, g))
            .into_iter()
            .chain([(super::Weight::Up, &self.up), (super::Weight::Down, &self.down)])
    }
}

pub fn backward(params: &ProbeParams, cache: &ForwardCache, dlogits: &Matrix) -> Result<Gradients> {
    if cache.stamp != params.stamp() || cache.backbone != params.backbone() {
        return Err(Error::invalid(
            "forward cache does not belong to these parameters (stale or mismatched)",
        ));
    }
    if dlogits.shape() != cache.logits.shape() {
        return Err(Error::Shape(format!(
            "logit gradient is {}x{}, forward produced {}x{}",
            dlogits.rows(),
            dlogits.cols(),
            cache.logits.rows(),
            cache.logits.cols()
        )));
    }
    let down = dlogits.transposed_matmul(&cache.m);
    let dm = dlogits.matmul(params.down());
    match &cache.g {
        Some(g) => {
            let du = dm.hadamard(&cache.s);
            let mut dg = dm.hadamard(&cache.u);
            for ((v, &z), &sg) in dg.as_mut_slice().iter_mut().zip(g.as_slice()).zip(cache.sig.as_slice()) {
                *v *= silu_grad_cached(z, sg);
            }
            Ok(Gradients {
                gate: Some(dg.transposed_matmul(&cache.x)),
                up: du.transposed_matmul(&cache.x),
                down,
            })
        }
        None => {
            let mut du = dm;
            for ((v, &z), &sg) in du.as_mut_slice().iter_mut().zip(cache.u.as_slice()).zip(cache.sig.as_slice()) {
                *v *= silu_grad_cached(z, sg);
            }
            Ok(Gradients {
                gate: None,
                up: du.transposed_matmul(&cache.x),
                down,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Classes(Vec<u8>),
    Scores(Vec<f64>),
}

/// Argmax over the two class logits (ties go to class 0), or the raw
/// regression output.
pub fn predict(logits: &Matrix, mode: Mode) -> Result<Prediction> {
    if logits.cols() != mode.output_dim() {
        return Err(Error::Shape(format!(
            "{mode:?} needs {} logits per row, got {}",
            mode.output_dim(),
            logits.cols()
        )));
    }
    Ok(match mode {
        Mode::Classification => Prediction::Classes(
            logits
                .iter_rows()
                .map(|r| u8::from(r[1] > r[0]))
                .collect(),
        ),
        Mode::Regression => Prediction::Scores(logits.iter_rows().map(|r| r[0]).collect()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::{random_params, Weight};
    use approx::assert_abs_diff_eq;

    fn ones(backbone: Backbone) -> ProbeParams {
        let one = || Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let gate = (backbone == Backbone::Gated).then(one);
        ProbeParams::from_matrices(backbone, gate, one(), one()).unwrap()
    }

    #[test]
    fn silu_and_derivative() {
        assert_eq!(silu(0.0), 0.0);
        assert_abs_diff_eq!(silu(1.0), 1.0 / (1.0 + (-1.0f64).exp()), epsilon = 1e-15);
        assert_eq!(silu_grad(0.0), 0.5);
        for &z in &[-3.0, -0.5, 0.7, 4.0] {
            let fd = (silu(z + 1e-6) - silu(z - 1e-6)) / 2e-6;
            assert_abs_diff_eq!(silu_grad(z), fd, epsilon = 1e-8);
        }
        assert!(silu(-800.0).is_finite() && silu(800.0) == 800.0);
    }

    #[test]
    fn zero_input_gives_zero_logits() {
        let p = random_params(6, 10, 2, Backbone::Gated, 1).unwrap();
        let (logits, _) = forward(&p, &Matrix::zeros(3, 6)).unwrap();
        assert!(logits.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_weights_scalar_forward() {
        let x = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let (logits, _) = forward(&ones(Backbone::Gated), &x).unwrap();
        assert_abs_diff_eq!(logits.get(0, 0), 0.731_058_578_630_004_9, epsilon = 1e-12);
        let (logits, _) = forward(&ones(Backbone::Standard), &x).unwrap();
        assert_abs_diff_eq!(logits.get(0, 0), 0.731_058_578_630_004_9, epsilon = 1e-12);
    }

    #[test]
    fn doubling_down_doubles_logits() {
        let mut p = random_params(5, 7, 2, Backbone::Gated, 2).unwrap();
        let x = Matrix::from_vec(2, 5, (0..10).map(|i| i as f64 * 0.1 - 0.4).collect()).unwrap();
        let (a, _) = forward(&p, &x).unwrap();
        p.matrix_mut(Weight::Down).unwrap().scale(2.0);
        let (b, _) = forward(&p, &x).unwrap();
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            assert_eq!(2.0 * u, *v);
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let p = random_params(4, 3, 2, Backbone::Gated, 0).unwrap();
        assert!(matches!(forward(&p, &Matrix::zeros(2, 5)), Err(Error::Shape(_))));
        let x = Matrix::from_vec(1, 4, vec![0.0, f64::NAN, 0.0, 0.0]).unwrap();
        assert!(matches!(forward(&p, &x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn loss_examples() {
        let l = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        for y in [0u8, 1] {
            let (v, _) = loss(&l, Targets::Classes(&[y])).unwrap();
            assert_abs_diff_eq!(v, std::f64::consts::LN_2, epsilon = 1e-15);
        }
        let l = Matrix::from_vec(1, 2, vec![3.0f64.ln(), 0.0]).unwrap();
        let (v, _) = loss(&l, Targets::Classes(&[0])).unwrap();
        assert_abs_diff_eq!(v, (4.0f64 / 3.0).ln(), epsilon = 1e-15);
        let l = Matrix::from_vec(2, 1, vec![0.3, -1.0]).unwrap();
        let (v, g) = loss(&l, Targets::Values(&[0.3, -1.0])).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn loss_rejects_mode_mismatch() {
        let l = Matrix::zeros(2, 2);
        assert!(loss(&l, Targets::Values(&[0.0, 0.0])).is_err());
        assert!(loss(&l, Targets::Classes(&[0])).is_err());
        assert!(loss(&l, Targets::Classes(&[0, 2])).is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let p = random_params(4, 6, 2, Backbone::Gated, 5).unwrap();
        let x = Matrix::from_vec(3, 4, (0..12).map(|i| (i as f64).cos()).collect()).unwrap();
        let (l, cache) = forward(&p, &x).unwrap();
        let g = backward(&p, &cache, &Matrix::zeros(l.rows(), l.cols())).unwrap();
        for (_, m) in g.iter() {
            assert!(m.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn standard_backbone_has_no_gate_gradient() {
        let p = random_params(4, 6, 1, Backbone::Standard, 5).unwrap();
        let x = Matrix::zeros(2, 4);
        let (l, cache) = forward(&p, &x).unwrap();
        let g = backward(&p, &cache, &l).unwrap();
        assert!(g.gate.is_none());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut p = random_params(4, 6, 2, Backbone::Gated, 5).unwrap();
        let (l, cache) = forward(&p, &Matrix::zeros(2, 4)).unwrap();
        p.matrix_mut(Weight::Up).unwrap().scale(0.5);
        assert!(backward(&p, &cache, &l).is_err());
        let other = random_params(4, 6, 2, Backbone::Gated, 5).unwrap();
        assert!(backward(&other, &cache, &l).is_err());
    }

    #[test]
    fn predict_rules() {
        let l = Matrix::from_rows(&[[2.0, -1.0], [0.5, 0.5], [-1.0, 3.0]]).unwrap();
        assert_eq!(
            predict(&l, Mode::Classification).unwrap(),
            Prediction::Classes(vec![0, 0, 1])
        );
        let l = Matrix::from_rows(&[[0.25], [-2.0]]).unwrap();
        assert_eq!(
            predict(&l, Mode::Regression).unwrap(),
            Prediction::Scores(vec![0.25, -2.0])
        );
    }

    #[test]
    fn row_permutation_permutes_logits() {
        let p = random_params(5, 9, 2, Backbone::Gated, 8).unwrap();
        let x = Matrix::from_vec(4, 5, (0..20).map(|i| ((i * 7) as f64).sin()).collect()).unwrap();
        let perm = [2, 0, 3, 1];
        let (a, _) = forward(&p, &x).unwrap();
        let (b, _) = forward(&p, &x.select_rows(&perm)).unwrap();
        assert_eq!(a.select_rows(&perm), b);
    }
}
