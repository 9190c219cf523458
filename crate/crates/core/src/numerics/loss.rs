//! Differentiable loss primitives with hand-derived gradients.

use super::matrix::{dot, norm, Matrix};
use crate::error::{Error, Result};

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// `log Σ exp(row)` computed stably.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (batch, classes) = logits.shape();
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{} labels for {batch} logit rows",
            labels.len()
        )));
    }
    if batch == 0 {
        return Err(Error::Shape("cross-entropy over an empty batch".into()));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidLabel {
            label,
            num_classes: classes,
        });
    }
    logits.ensure_finite("logits")?;

    let inv_b = 1.0 / batch as f64;
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss += log_sum_exp(logits.row(i)) - logits[(i, y)];
        let g = grad.row_mut(i);
        g[y] -= 1.0;
        for x in g.iter_mut() {
            *x *= inv_b;
        }
    }
    Ok((loss * inv_b, grad))
}

/// Cosine similarity, or a degenerate-input error when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput(
            "cosine similarity of a zero vector".into(),
        ));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Pairwise cosine matrix of the rows of `a`, symmetric with unit diagonal.
pub fn cosine_similarity_matrix(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let norms: Vec<f64> = a.row_iter().map(norm).collect();
    if let Some(i) = norms.iter().position(|&x| x == 0.0) {
        return Err(Error::DegenerateInput(format!("row {i} is a zero vector")));
    }
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let c = (dot(a.row(i), a.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            out[(i, j)] = c;
            out[(j, i)] = c;
        }
        // Self-cosine can land one ulp off 1 before clamping.
        out[(i, i)] = 1.0;
    }
    Ok(out)
}

/// Output of the temperature-scaled cosine contrastive loss.
#[derive(Clone, Debug)]
pub struct Alignment {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    /// Zero rows for excluded targets; empty (0×d) when target gradients were not requested.
    pub grad_targets: Matrix,
}

/// `−log softmax(cos(anchor, targets_c)/τ)[positive]` over all target rows.
pub fn contrastive_alignment(
    anchor: &[f64],
    targets: &Matrix,
    positive: usize,
    tau: f64,
) -> Result<Alignment> {
    contrastive_core(anchor, targets, positive, tau, None, true)
}

/// Like [`contrastive_alignment`] with the softmax denominator restricted to `mask`.
pub fn contrastive_alignment_masked(
    anchor: &[f64],
    targets: &Matrix,
    positive: usize,
    tau: f64,
    mask: &[bool],
) -> Result<Alignment> {
    contrastive_core(anchor, targets, positive, tau, Some(mask), true)
}

/// Anchor-only variant for callers that treat the targets as constants.
pub fn contrastive_anchor_grad(
    anchor: &[f64],
    targets: &Matrix,
    positive: usize,
    tau: f64,
    mask: Option<&[bool]>,
) -> Result<(f64, Vec<f64>)> {
    let out = contrastive_core(anchor, targets, positive, tau, mask, false)?;
    Ok((out.loss, out.grad_anchor))
}

fn contrastive_core(
    anchor: &[f64],
    targets: &Matrix,
    positive: usize,
    tau: f64,
    mask: Option<&[bool]>,
    with_targets: bool,
) -> Result<Alignment> {
    let (classes, dim) = targets.shape();
    if anchor.len() != dim {
        return Err(Error::Shape(format!(
            "anchor of length {} against {dim}-dimensional targets",
            anchor.len()
        )));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Numeric(format!("temperature must be positive, got {tau}")));
    }
    if positive >= classes {
        return Err(Error::InvalidLabel {
            label: positive,
            num_classes: classes,
        });
    }
    if let Some(m) = mask {
        if m.len() != classes {
            return Err(Error::Shape(format!(
                "mask of length {} for {classes} targets",
                m.len()
            )));
        }
        if !m[positive] {
            return Err(Error::Protocol(format!(
                "positive class {positive} is masked out"
            )));
        }
    }
    let included = |c: usize| mask.is_none_or(|m| m[c]);

    let anchor_norm = norm(anchor);
    if anchor_norm == 0.0 {
        return Err(Error::DegenerateInput("anchor is a zero vector".into()));
    }
    let mut target_norms = vec![0.0; classes];
    let mut cos = vec![0.0; classes];
    let mut logits = Vec::with_capacity(classes);
    for c in (0..classes).filter(|&c| included(c)) {
        let t = targets.row(c);
        let tn = norm(t);
        if tn == 0.0 {
            return Err(Error::DegenerateInput(format!("target row {c} is a zero vector")));
        }
        target_norms[c] = tn;
        cos[c] = dot(anchor, t) / (anchor_norm * tn);
        logits.push(cos[c] / tau);
    }

    let lse = log_sum_exp(&logits);
    let loss = lse - cos[positive] / tau;
    if !loss.is_finite() {
        return Err(Error::Numeric("contrastive loss is not finite".into()));
    }

    // dL/dcos_c = (p_c − [c = positive]) / τ, then chain through each cosine.
    let mut grad_anchor = vec![0.0; dim];
    let mut grad_targets = if with_targets {
        Matrix::zeros(classes, dim)
    } else {
        Matrix::zeros(0, dim)
    };
    for c in (0..classes).filter(|&c| included(c)) {
        let p = (cos[c] / tau - lse).exp();
        let g = (p - if c == positive { 1.0 } else { 0.0 }) / tau;
        if g == 0.0 {
            continue;
        }
        let t = targets.row(c);
        let inv = 1.0 / (anchor_norm * target_norms[c]);
        let a_scale = cos[c] / (anchor_norm * anchor_norm);
        for (ga, (&a, &tv)) in grad_anchor.iter_mut().zip(anchor.iter().zip(t)) {
            *ga += g * (tv * inv - a_scale * a);
        }
        if with_targets {
            let t_scale = cos[c] / (target_norms[c] * target_norms[c]);
            for (gt, (&a, &tv)) in grad_targets
                .row_mut(c)
                .iter_mut()
                .zip(anchor.iter().zip(t))
            {
                *gt = g * (a * inv - t_scale * tv);
            }
        }
    }

    Ok(Alignment {
        loss,
        grad_anchor,
        grad_targets,
    })
}

/// `‖a − b‖²` and its gradient w.r.t. `a`.
pub fn squared_distance(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let grad = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            loss += d * d;
            2.0 * d
        })
        .collect();
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{finite_difference_check, DEFAULT_STEP};
    use crate::numerics::RngStream;

    #[test]
    fn symmetric_two_class_cross_entropy() {
        let logits = Matrix::zeros(2, 2);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        for i in 0..2 {
            assert!((grad[(i, 0)] + 0.25).abs() < 1e-15);
            assert!((grad[(i, 1)] - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_logits_do_not_overflow() {
        let logits = Matrix::from_rows(&[[1000.0, 0.0]]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.is_finite());
    }

    #[test]
    fn cross_entropy_errors() {
        let logits = Matrix::zeros(1, 3);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(Error::InvalidLabel { label: 3, num_classes: 3 })
        ));
        let bad = Matrix::from_rows(&[[f64::NAN, 0.0, 0.0]]).unwrap();
        assert!(matches!(softmax_cross_entropy(&bad, &[0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn cross_entropy_matches_finite_differences() {
        let mut rng = RngStream::for_stream(11, "ce-test", 0, 0);
        let logits = rng.normal_matrix(3, 4, 1.0);
        let labels = [2, 0, 3];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let err = finite_difference_check(
            |x| softmax_cross_entropy(x, &labels).map(|r| r.0),
            &logits,
            &grad,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ce_rows_to_zero() {
        let mut rng = RngStream::for_stream(5, "softmax", 0, 0);
        let logits = rng.normal_matrix(6, 5, 10.0);
        let p = softmax_rows(&logits);
        for r in p.row_iter() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let (_, g) = softmax_cross_entropy(&logits, &[0, 1, 2, 3, 4, 0]).unwrap();
        for r in g.row_iter() {
            assert!(r.iter().sum::<f64>().abs() < 1e-9);
        }
    }

    #[test]
    fn contrastive_closed_form_orthonormal() {
        let targets = Matrix::identity(2);
        let out = contrastive_alignment(&[1.0, 0.0], &targets, 0, 1.0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((out.loss - expected).abs() < 1e-12);
        assert!((out.loss - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn identical_targets_give_log_c() {
        let targets = Matrix::from_rows(&[[1.0, 2.0, -1.0]; 5]).unwrap();
        for anchor in [[0.3, -2.0, 1.0], [5.0, 0.0, 0.1]] {
            let out = contrastive_alignment(&anchor, &targets, 3, 0.07).unwrap();
            assert!((out.loss - 5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_vectors_are_degenerate() {
        let targets = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(
            contrastive_alignment(&[1.0, 1.0], &targets, 0, 1.0),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            contrastive_alignment(&[0.0, 0.0], &Matrix::identity(2), 0, 1.0),
            Err(Error::DegenerateInput(_))
        ));
        // A masked-out zero row is never touched.
        let ok = contrastive_alignment_masked(&[1.0, 1.0], &targets, 0, 1.0, &[true, false]);
        assert!(ok.unwrap().loss.abs() < 1e-15);
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let mut rng = RngStream::for_stream(3, "contrastive-test", 0, 0);
        let anchor = rng.normal_matrix(1, 8, 1.0);
        let targets = rng.normal_matrix(4, 8, 1.0);
        let tau = 0.07;
        let out = contrastive_alignment(anchor.as_slice(), &targets, 1, tau).unwrap();
        let ga = Matrix::from_vec(1, 8, out.grad_anchor.clone()).unwrap();
        let e1 = finite_difference_check(
            |a| contrastive_alignment(a.as_slice(), &targets, 1, tau).map(|o| o.loss),
            &anchor,
            &ga,
            DEFAULT_STEP,
        )
        .unwrap();
        let e2 = finite_difference_check(
            |t| contrastive_alignment(anchor.as_slice(), t, 1, tau).map(|o| o.loss),
            &targets,
            &out.grad_targets,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(e1 <= 1e-4 && e2 <= 1e-4, "{e1} {e2}");
    }

    #[test]
    fn masked_targets_get_zero_gradient() {
        let mut rng = RngStream::for_stream(3, "mask-test", 0, 0);
        let anchor = rng.normal_matrix(1, 5, 1.0);
        let targets = rng.normal_matrix(4, 5, 1.0);
        let mask = [true, false, true, true];
        let out = contrastive_alignment_masked(anchor.as_slice(), &targets, 2, 0.5, &mask).unwrap();
        assert!(out.grad_targets.row(1).iter().all(|&g| g == 0.0));
        // Equivalent to dropping the masked row entirely.
        let reduced = targets.select_rows(&[0, 2, 3]);
        let direct = contrastive_alignment(anchor.as_slice(), &reduced, 1, 0.5).unwrap();
        assert!((direct.loss - out.loss).abs() < 1e-12);
    }

    #[test]
    fn cosine_matrix_basics() {
        let id = cosine_similarity_matrix(&Matrix::identity(3)).unwrap();
        assert_eq!(id, Matrix::identity(3));
        let twins = Matrix::from_rows(&[[0.3, -1.2, 4.0], [0.3, -1.2, 4.0]]).unwrap();
        let s = cosine_similarity_matrix(&twins).unwrap();
        assert!(s.as_slice().iter().all(|&x| (x - 1.0).abs() < 1e-15));
        let zero = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(cosine_similarity_matrix(&zero), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn cosine_matrix_matches_per_pair_oracle() {
        let mut rng = RngStream::for_stream(9, "cosmat", 0, 0);
        let a = rng.normal_matrix(5, 8, 1.0);
        let s = cosine_similarity_matrix(&a).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let (ri, rj) = (a.row(i), a.row(j));
                let mut d = 0.0;
                let mut ni = 0.0;
                let mut nj = 0.0;
                for k in 0..8 {
                    d += ri[k] * rj[k];
                    ni += ri[k] * ri[k];
                    nj += rj[k] * rj[k];
                }
                assert!((s[(i, j)] - d / (ni.sqrt() * nj.sqrt())).abs() < 1e-12);
                assert_eq!(s[(i, j)], s[(j, i)]);
            }
        }
    }
}
