//! Prototype classifier over features.
//!
//! Production scoring is temperature-scaled cosine similarity between a
//! feature and each class prototype. A plain dot-product head is kept for
//! diagnostics: the closed-form feature gradient and its split into a
//! prototype-bias part and a true-mean part are stated for that head.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Floor applied to `p(y|x)` inside the log.
pub const PROB_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Support,
    Augmented,
}

/// One row per class. Rows are stored as raw means and normalized only when
/// scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    pub rows: Matrix,
    pub provenance: Provenance,
}

impl Prototypes {
    pub fn num_ways(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub temperature: f64,
}

impl Default for ClassifierHead {
    fn default() -> Self {
        Self { temperature: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadMode {
    /// `tau * cos(f, w_c)`
    Cosine,
    /// `<w_c, f>`, no temperature
    Dot,
}

/// Per-class mean of the features carrying that label.
pub fn compute_prototypes(features: &Matrix, labels: &[usize], num_ways: usize) -> Result<Prototypes> {
    if features.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} features but {} labels",
            features.rows(),
            labels.len()
        )));
    }
    let mut sums = Matrix::zeros(num_ways, features.cols());
    let mut counts = vec![0usize; num_ways];
    for (row, &y) in features.iter_rows().zip(labels) {
        if y >= num_ways {
            return Err(Error::Shape(format!("label {y} outside [0, {num_ways})")));
        }
        linalg::axpy(1.0, row, sums.row_mut(y));
        counts[y] += 1;
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::EmptyClass { class: c });
        }
        sums.row_mut(c).iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(Prototypes {
        rows: sums,
        provenance: Provenance::Support,
    })
}

fn unit(v: &[f64], what: &str, index: usize) -> Result<(Vec<f64>, f64)> {
    let n = linalg::norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Degenerate(format!("{what} {index} has norm {n}")));
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

fn unit_rows(m: &Matrix, what: &str) -> Result<Matrix> {
    let mut out = m.clone();
    for (i, row) in m.iter_rows().enumerate() {
        out.row_mut(i).copy_from_slice(&unit(row, what, i)?.0);
    }
    Ok(out)
}

/// `score(i, c) = tau * cos(f_i, w_c)`.
pub fn logits(features: &Matrix, prototypes: &Prototypes, head: &ClassifierHead) -> Result<Matrix> {
    let cos = cosine_matrix(features, prototypes)?;
    let mut out = cos;
    out.as_mut_slice()
        .iter_mut()
        .for_each(|v| *v *= head.temperature);
    Ok(out)
}

fn cosine_matrix(features: &Matrix, prototypes: &Prototypes) -> Result<Matrix> {
    if features.cols() != prototypes.dim() {
        return Err(Error::Shape(format!(
            "features have dimension {}, prototypes {}",
            features.cols(),
            prototypes.dim()
        )));
    }
    let f = unit_rows(features, "feature")?;
    let w = unit_rows(&prototypes.rows, "prototype")?;
    f.matmul_transposed(&w)
}

/// `score(i, c) = <w_c, f_i>`.
pub fn dot_logits(features: &Matrix, prototypes: &Prototypes) -> Result<Matrix> {
    features.matmul_transposed(&prototypes.rows)
}

pub fn logits_with(
    features: &Matrix,
    prototypes: &Prototypes,
    head: &ClassifierHead,
    mode: HeadMode,
) -> Result<Matrix> {
    match mode {
        HeadMode::Cosine => logits(features, prototypes, head),
        HeadMode::Dot => dot_logits(features, prototypes),
    }
}

/// Softmax of one logit row, shifted by its maximum.
pub fn probabilities(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    let mut out = logits.clone();
    for (i, row) in logits.iter_rows().enumerate() {
        out.row_mut(i).copy_from_slice(&probabilities(row)?);
    }
    Ok(out)
}

/// Argmax per row; ties go to the lowest class index.
pub fn predict(features: &Matrix, prototypes: &Prototypes, head: &ClassifierHead) -> Result<Vec<usize>> {
    Ok(predict_from_logits(&logits(features, prototypes, head)?))
}

pub fn predict_from_logits(logits: &Matrix) -> Vec<usize> {
    logits.iter_rows().map(linalg::argmax).collect()
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    /// `(p - onehot(y)) / N`
    pub logit_grad: Matrix,
    /// Rows whose `p(y|x)` fell below `PROB_FLOOR`.
    pub clamped: usize,
}

pub fn cross_entropy(probabilities: &Matrix, labels: &[usize]) -> Result<CrossEntropy> {
    let n = probabilities.rows();
    if n != labels.len() || n == 0 {
        return Err(Error::Shape(format!(
            "{n} probability rows but {} labels",
            labels.len()
        )));
    }
    let classes = probabilities.cols();
    let mut loss = 0.0;
    let mut clamped = 0;
    let mut grad = probabilities.clone();
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Shape(format!("label {y} outside [0, {classes})")));
        }
        let p = probabilities[(i, y)];
        if p < PROB_FLOOR {
            clamped += 1;
        }
        loss -= p.max(PROB_FLOOR).ln();
        grad[(i, y)] -= 1.0;
    }
    grad.as_mut_slice().iter_mut().for_each(|v| *v /= n as f64);
    Ok(CrossEntropy {
        loss: loss / n as f64,
        logit_grad: grad,
        clamped,
    })
}

/// Gradient of `-log p(y|f)` with respect to a single feature.
///
/// `Dot` gives `(p(y|f) - 1) w_y + sum_{j != y} p(j|f) w_j`. `Cosine` runs the
/// chain rule through both normalizations and the temperature.
pub fn feature_gradient(
    feature: &[f64],
    label: usize,
    prototypes: &Prototypes,
    head: &ClassifierHead,
    mode: HeadMode,
) -> Result<Vec<f64>> {
    if label >= prototypes.num_ways() {
        return Err(Error::Shape(format!(
            "label {label} outside [0, {})",
            prototypes.num_ways()
        )));
    }
    let f = Matrix::from_rows(&[feature])?;
    let scores = logits_with(&f, prototypes, head, mode)?;
    let mut g = probabilities(scores.row(0))?;
    g[label] -= 1.0;
    match mode {
        HeadMode::Dot => {
            let mut out = vec![0.0; feature.len()];
            for (c, &gc) in g.iter().enumerate() {
                linalg::axpy(gc, prototypes.rows.row(c), &mut out);
            }
            Ok(out)
        }
        HeadMode::Cosine => {
            let g = Matrix::from_vec(1, g.len(), g)?;
            let back = cosine_backward(&f, prototypes, head.temperature, &g)?;
            Ok(back.feature_grad.into_vec())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosineBackward {
    pub feature_grad: Matrix,
    pub temperature_grad: f64,
}

/// Backward pass of the cosine head with prototypes held fixed.
///
/// For `s_ic = tau * <f_i/|f_i|, w_c/|w_c|>` and upstream `g_ic = dL/ds_ic`:
/// `dL/df_i = tau/|f_i| * sum_c g_ic (w^_c - cos_ic f^_i)` and
/// `dL/dtau = sum_ic g_ic cos_ic`.
pub fn cosine_backward(
    features: &Matrix,
    prototypes: &Prototypes,
    temperature: f64,
    logit_grad: &Matrix,
) -> Result<CosineBackward> {
    if logit_grad.shape() != (features.rows(), prototypes.num_ways()) {
        return Err(Error::Shape("logit gradient shape mismatch".into()));
    }
    let w = unit_rows(&prototypes.rows, "prototype")?;
    let mut feature_grad = Matrix::zeros(features.rows(), features.cols());
    let mut temperature_grad = 0.0;
    for (i, row) in features.iter_rows().enumerate() {
        let (fhat, fnorm) = unit(row, "feature", i)?;
        let out = feature_grad.row_mut(i);
        let mut radial = 0.0;
        for c in 0..w.rows() {
            let gc = logit_grad[(i, c)];
            let cos = linalg::dot(&fhat, w.row(c));
            temperature_grad += gc * cos;
            radial += gc * cos;
            linalg::axpy(gc, w.row(c), out);
        }
        linalg::axpy(-radial, &fhat, out);
        let scale = temperature / fnorm;
        out.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(CosineBackward {
        feature_grad,
        temperature_grad,
    })
}

/// Per-class gap between estimated prototype and population mean.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasDiagnostics {
    /// `delta_c = w_c - m_c`
    pub deltas: Matrix,
    pub norms: Vec<f64>,
    pub true_means: Matrix,
}

pub fn bias_diagnostics(prototypes: &Prototypes, true_means: Option<&Matrix>) -> Result<BiasDiagnostics> {
    let means = true_means.ok_or_else(|| {
        Error::DiagnosticsUnavailable("true class means are unknown for this data".into())
    })?;
    if means.shape() != prototypes.rows.shape() {
        return Err(Error::Shape("true means do not match prototype shape".into()));
    }
    let mut deltas = prototypes.rows.clone();
    for (d, m) in deltas.as_mut_slice().iter_mut().zip(means.as_slice()) {
        *d -= m;
    }
    let norms = deltas.iter_rows().map(linalg::norm).collect();
    Ok(BiasDiagnostics {
        deltas,
        norms,
        true_means: means.clone(),
    })
}

/// Split of the dot-head feature gradient into the part driven by the
/// prototype bias `delta_y` and the part driven by the true mean `m_y`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasDecomposition {
    /// `(p(y|f) - 1) delta_y`
    pub bias_component: Vec<f64>,
    /// `(p(y|f) - 1) m_y + sum_{j != y} p(j|f) w_j`
    pub mean_component: Vec<f64>,
}

pub fn bias_decomposition(
    feature: &[f64],
    label: usize,
    prototypes: &Prototypes,
    true_means: Option<&Matrix>,
) -> Result<BiasDecomposition> {
    let diag = bias_diagnostics(prototypes, true_means)?;
    let f = Matrix::from_rows(&[feature])?;
    let p = probabilities(dot_logits(&f, prototypes)?.row(0))?;
    let py = p[label] - 1.0;
    let bias_component = diag.deltas.row(label).iter().map(|d| py * d).collect();
    let mut mean_component: Vec<f64> = diag.true_means.row(label).iter().map(|m| py * m).collect();
    for (j, &pj) in p.iter().enumerate() {
        if j != label {
            linalg::axpy(pj, prototypes.rows.row(j), &mut mean_component);
        }
    }
    Ok(BiasDecomposition {
        bias_component,
        mean_component,
    })
}

/// One line per query: label, predicted class, then the logits.
pub fn write_logits_text<W: Write>(logits: &Matrix, labels: &[usize], mut out: W) -> std::io::Result<()> {
    writeln!(out, "label,predicted,{}", (0..logits.cols()).map(|c| format!("logit_{c}")).collect::<Vec<_>>().join(","))?;
    for (row, y) in logits.iter_rows().zip(labels) {
        write!(out, "{y},{}", linalg::argmax(row))?;
        for v in row {
            write!(out, ",{v:?}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn protos(rows: &[&[f64]]) -> Prototypes {
        Prototypes {
            rows: Matrix::from_rows(rows).unwrap(),
            provenance: Provenance::Support,
        }
    }

    fn randn(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn prototype_is_class_mean() {
        let f = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]]).unwrap();
        let p = compute_prototypes(&f, &[0, 0, 1], 2).unwrap();
        assert_eq!(p.rows.row(0), &[0.5, 0.5]);
        assert_eq!(p.rows.row(1), &[5.0, 5.0]);
    }

    #[test]
    fn prototypes_match_accumulate_and_divide() {
        let mut rng = seed::rng(4);
        let labels: Vec<usize> = (0..35).map(|i| i % 5).collect();
        let rows: Vec<Vec<f64>> = (0..35).map(|_| randn(&mut rng, 3)).collect();
        let f = Matrix::from_rows(&rows).unwrap();
        let p = compute_prototypes(&f, &labels, 5).unwrap();
        for c in 0..5 {
            for k in 0..3 {
                let mut acc = 0.0;
                let mut n = 0.0;
                for (r, &y) in rows.iter().zip(&labels) {
                    if y == c {
                        acc += r[k];
                        n += 1.0;
                    }
                }
                assert!((p.rows[(c, k)] - acc / n).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_class_is_named() {
        let f = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(matches!(
            compute_prototypes(&f, &[0], 3),
            Err(Error::EmptyClass { class: 1 })
        ));
    }

    #[test]
    fn cosine_logit_examples() {
        let head = ClassifierHead::default();
        let p = protos(&[&[2.0, 0.0], &[0.0, 1.0], &[4.0, 3.0]]);
        let f = Matrix::from_rows(&[[3.0, 0.0], [3.0, 4.0]]).unwrap();
        let s = logits(&f, &p, &head).unwrap();
        assert!((s[(0, 0)] - 10.0).abs() < 1e-12);
        assert!(s[(0, 1)].abs() < 1e-12);
        assert!((s[(1, 2)] - 9.6).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_vectors_are_rejected() {
        let head = ClassifierHead::default();
        let p = protos(&[&[1.0, 0.0]]);
        let f = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        assert!(matches!(logits(&f, &p, &head), Err(Error::Degenerate(_))));
        let zero = protos(&[&[0.0, 0.0]]);
        let g = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(matches!(logits(&g, &zero, &head), Err(Error::Degenerate(_))));
    }

    #[test]
    fn softmax_examples() {
        let p = probabilities(&[1.5; 4]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = probabilities(&[10.0, 0.0]).unwrap();
        let e = (-10.0f64).exp();
        assert!((p[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p[1] - e / (1.0 + e)).abs() < 1e-18);
        assert!((p[0] - 0.9999546).abs() < 1e-7);
        assert!((p[1] - 4.54e-5).abs() < 1e-7);
        assert!(probabilities(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn prediction_rules() {
        let head = ClassifierHead::default();
        let p = protos(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let q = Matrix::from_rows(&[[0.0, 0.0, 2.0], [1.0, 1.0, 0.0]]).unwrap();
        assert_eq!(predict(&q, &p, &head).unwrap(), vec![2, 0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let perfect = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let ce = cross_entropy(&perfect, &[0]).unwrap();
        assert_eq!(ce.loss, 0.0);
        let uniform = Matrix::from_rows(&[[0.2; 5]]).unwrap();
        let ce = cross_entropy(&uniform, &[3]).unwrap();
        assert!((ce.loss - 5f64.ln()).abs() < 1e-12);
        let zero = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let ce = cross_entropy(&zero, &[1]).unwrap();
        assert_eq!(ce.clamped, 1);
        assert!((ce.loss - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let mut rng = seed::rng(12);
        let h = 1e-5;
        for _ in 0..20 {
            let n = 4;
            let c = 3;
            let z = Matrix::from_vec(n, c, randn(&mut rng, n * c)).unwrap();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let loss = |z: &Matrix| cross_entropy(&softmax_rows(z).unwrap(), &labels).unwrap().loss;
            let ce = cross_entropy(&softmax_rows(&z).unwrap(), &labels).unwrap();
            for k in 0..n * c {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp.as_mut_slice()[k] += h;
                zm.as_mut_slice()[k] -= h;
                let num = (loss(&zp) - loss(&zm)) / (2.0 * h);
                let ana = ce.logit_grad.as_slice()[k];
                assert!((num - ana).abs() <= 1e-5 * ana.abs().max(1e-3), "{num} vs {ana}");
            }
        }
    }

    #[test]
    fn dot_gradient_vanishes_at_certainty() {
        // p(y|f) = 1 to machine precision
        let p = protos(&[&[100.0, 0.0], &[-100.0, 0.0]]);
        let g = feature_gradient(&[10.0, 0.0], 0, &p, &ClassifierHead::default(), HeadMode::Dot).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-300));
    }

    #[test]
    fn dot_gradient_two_way_expansion() {
        let mut rng = seed::rng(5);
        for _ in 0..50 {
            let w0 = randn(&mut rng, 4);
            let w1 = randn(&mut rng, 4);
            let f = randn(&mut rng, 4);
            let p = protos(&[&w0, &w1]);
            let g = feature_gradient(&f, 1, &p, &ClassifierHead::default(), HeadMode::Dot).unwrap();
            let a0 = linalg::dot(&w0, &f);
            let a1 = linalg::dot(&w1, &f);
            let p1 = 1.0 / (1.0 + (a0 - a1).exp());
            let p0 = 1.0 - p1;
            for k in 0..4 {
                let expected = (p1 - 1.0) * w1[k] + p0 * w0[k];
                assert!((g[k] - expected).abs() < 1e-12);
            }
        }
    }

    fn per_example_loss(f: &[f64], y: usize, p: &Prototypes, head: &ClassifierHead, mode: HeadMode) -> f64 {
        let s = logits_with(&Matrix::from_rows(&[f]).unwrap(), p, head, mode).unwrap();
        -probabilities(s.row(0)).unwrap()[y].ln()
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let mut rng = seed::rng(6);
        let h = 1e-4;
        let head = ClassifierHead { temperature: 7.5 };
        for _ in 0..100 {
            let rows: Vec<Vec<f64>> = (0..4).map(|_| randn(&mut rng, 5)).collect();
            let p = Prototypes {
                rows: Matrix::from_rows(&rows).unwrap(),
                provenance: Provenance::Support,
            };
            let f = randn(&mut rng, 5);
            let y = rng.random_range(0..4);
            let g = feature_gradient(&f, y, &p, &head, HeadMode::Cosine).unwrap();
            for k in 0..5 {
                let mut fp = f.clone();
                let mut fm = f.clone();
                fp[k] += h;
                fm[k] -= h;
                let num = (per_example_loss(&fp, y, &p, &head, HeadMode::Cosine)
                    - per_example_loss(&fm, y, &p, &head, HeadMode::Cosine))
                    / (2.0 * h);
                let scale = num.abs().max(g[k].abs());
                assert!((num - g[k]).abs() <= 1e-4 * scale.max(1e-4), "{num} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn decomposition_examples() {
        let p = protos(&[&[1.0, 2.0], &[-1.0, 0.5]]);
        let means = p.rows.clone();
        let d = bias_decomposition(&[0.3, 0.1], 0, &p, Some(&means)).unwrap();
        assert!(d.bias_component.iter().all(|&v| v == 0.0));

        let p = protos(&[&[200.0, 0.0], &[-200.0, 0.0]]);
        let means = Matrix::from_rows(&[[1.0, 1.0], [2.0, 2.0]]).unwrap();
        let d = bias_decomposition(&[1.0, 0.0], 0, &p, Some(&means)).unwrap();
        assert!(d.bias_component.iter().all(|v| v.abs() < 1e-300));
        assert!(d.mean_component.iter().all(|v| v.abs() < 1e-150));

        assert!(matches!(
            bias_decomposition(&[1.0, 0.0], 0, &p, None),
            Err(Error::DiagnosticsUnavailable(_))
        ));
    }

    #[test]
    fn logit_dump_has_header_and_rows() {
        let z = Matrix::from_rows(&[[0.5, 2.0], [1.0, -1.0]]).unwrap();
        let mut buf = Vec::new();
        write_logits_text(&z, &[1, 0], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "label,predicted,logit_0,logit_1\n1,1,0.5,2.0\n0,0,1.0,-1.0\n");
    }
}
