//! Distribution calibration: normalize features with support-set statistics,
//! then rescale each dimension by a learnable scale vector,
//! `out = (f - mu) / sigma * s`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcmStats {
    pub mu: Vec<f64>,
    /// Per-dimension population standard deviation, floored at epsilon.
    pub sigma: Vec<f64>,
}

impl DcmStats {
    /// `mu = 0, sigma = 1`: calibration reduces to the bare scale vector.
    pub fn identity(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            sigma: vec![1.0; dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcmState {
    pub stats: Option<DcmStats>,
    pub scale: Vec<f64>,
    pub epsilon: f64,
}

impl DcmState {
    /// Unfitted state with the scale vector at all ones.
    pub fn new(dim: usize) -> Self {
        Self {
            stats: None,
            scale: vec![1.0; dim],
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    /// Refits `mu`/`sigma` from support features. Query features must never
    /// be passed here.
    pub fn fit(&mut self, support: &Matrix) -> Result<()> {
        if support.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "support features have dimension {}, state has {}",
                support.cols(),
                self.dim()
            )));
        }
        self.stats = Some(fit_stats(support, self.epsilon)?);
        Ok(())
    }

    fn stats(&self) -> Result<&DcmStats> {
        self.stats
            .as_ref()
            .ok_or_else(|| Error::Contract("calibration statistics have not been fitted".into()))
    }
}

pub fn fit_stats(support: &Matrix, epsilon: f64) -> Result<DcmStats> {
    let n = support.rows();
    if n == 0 {
        return Err(Error::Shape("cannot fit statistics on an empty support set".into()));
    }
    let d = support.cols();
    let mut mu = vec![0.0; d];
    for row in support.iter_rows() {
        for (m, v) in mu.iter_mut().zip(row) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    // second pass removes the rounding left in the first mean, so a
    // constant column maps to exactly zero even when sigma is floored
    let mut correction = vec![0.0; d];
    for row in support.iter_rows() {
        for ((c, v), m) in correction.iter_mut().zip(row).zip(&mu) {
            *c += v - m;
        }
    }
    for (m, c) in mu.iter_mut().zip(correction) {
        *m += c / n as f64;
    }
    let mut var = vec![0.0; d];
    for row in support.iter_rows() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mu) {
            *s += (v - m) * (v - m);
        }
    }
    let sigma = var
        .into_iter()
        .map(|s| (s / n as f64).sqrt().max(epsilon))
        .collect();
    Ok(DcmStats { mu, sigma })
}

/// Calibrated output together with the pre-scale normalized features, which
/// the scale gradient needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibrated {
    pub output: Matrix,
    pub normalized: Matrix,
}

pub fn calibrate(features: &Matrix, state: &DcmState) -> Result<Matrix> {
    Ok(calibrate_with_cache(features, state)?.output)
}

pub fn calibrate_with_cache(features: &Matrix, state: &DcmState) -> Result<Calibrated> {
    let stats = state.stats()?;
    if features.cols() != state.dim() {
        return Err(Error::Shape(format!(
            "features have dimension {}, state has {}",
            features.cols(),
            state.dim()
        )));
    }
    let mut normalized = features.clone();
    let mut output = features.clone();
    for i in 0..features.rows() {
        let n_row = normalized.row_mut(i);
        for (k, v) in n_row.iter_mut().enumerate() {
            *v = (*v - stats.mu[k]) / stats.sigma[k];
        }
        let o_row = output.row_mut(i);
        for (k, v) in o_row.iter_mut().enumerate() {
            *v = normalized[(i, k)] * state.scale[k];
        }
    }
    Ok(Calibrated { output, normalized })
}

/// `dL/ds_k = sum_i upstream(i, k) * normalized(i, k)`.
pub fn scale_gradient(upstream: &Matrix, normalized: &Matrix) -> Result<Vec<f64>> {
    if upstream.shape() != normalized.shape() {
        return Err(Error::Shape("upstream and normalized features differ in shape".into()));
    }
    let mut grad = vec![0.0; upstream.cols()];
    for (g_row, n_row) in upstream.iter_rows().zip(normalized.iter_rows()) {
        for ((acc, g), n) in grad.iter_mut().zip(g_row).zip(n_row) {
            *acc += g * n;
        }
    }
    Ok(grad)
}

/// Gradient of `calibrate` with respect to its input, holding `mu` and
/// `sigma` fixed: `upstream * s / sigma`.
pub fn stats_gradient_passthrough(upstream: &Matrix, state: &DcmState) -> Result<Matrix> {
    let stats = state.stats()?;
    if upstream.cols() != state.dim() {
        return Err(Error::Shape("upstream dimension differs from state".into()));
    }
    let mut out = upstream.clone();
    for i in 0..out.rows() {
        for (k, v) in out.row_mut(i).iter_mut().enumerate() {
            *v *= state.scale[k] / stats.sigma[k];
        }
    }
    Ok(out)
}

/// Gradient of `calibrate` with respect to the support features when `mu`
/// and `sigma` are themselves functions of those same features.
///
/// With `g = upstream * s` and `n` the normalized features this is the usual
/// batch-normalization backward, `(g - mean(g) - n * mean(g * n)) / sigma`,
/// per dimension. Dimensions whose sigma sits on the epsilon floor have a
/// constant sigma, so only the mean term flows there.
pub fn stats_gradient_full(
    upstream: &Matrix,
    normalized: &Matrix,
    state: &DcmState,
) -> Result<Matrix> {
    let stats = state.stats()?;
    if upstream.shape() != normalized.shape() || upstream.cols() != state.dim() {
        return Err(Error::Shape("upstream and normalized features differ in shape".into()));
    }
    let n = upstream.rows() as f64;
    let d = upstream.cols();
    let mut mean_g = vec![0.0; d];
    let mut mean_gn = vec![0.0; d];
    for (g_row, n_row) in upstream.iter_rows().zip(normalized.iter_rows()) {
        for k in 0..d {
            let g = g_row[k] * state.scale[k];
            mean_g[k] += g / n;
            mean_gn[k] += g * n_row[k] / n;
        }
    }
    let mut out = upstream.clone();
    for i in 0..out.rows() {
        for k in 0..d {
            let g = upstream[(i, k)] * state.scale[k];
            let floored = stats.sigma[k] <= state.epsilon;
            let radial = if floored { 0.0 } else { normalized[(i, k)] * mean_gn[k] };
            out[(i, k)] = (g - mean_g[k] - radial) / stats.sigma[k];
        }
    }
    Ok(out)
}

/// Appends one CSV line per dimension: epoch, dim, mu, sigma, scale.
pub fn write_state_text<W: Write>(epoch: usize, state: &DcmState, mut out: W) -> std::io::Result<()> {
    let identity = DcmStats::identity(state.dim());
    let stats = state.stats.as_ref().unwrap_or(&identity);
    for k in 0..state.dim() {
        writeln!(
            out,
            "{epoch},{k},{:?},{:?},{:?}",
            stats.mu[k], stats.sigma[k], state.scale[k]
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn fitted(features: &Matrix) -> DcmState {
        let mut s = DcmState::new(features.cols());
        s.fit(features).unwrap();
        s
    }

    #[test]
    fn fit_on_two_points() {
        let f = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let st = fit_stats(&f, DEFAULT_EPSILON).unwrap();
        assert_eq!(st.mu, vec![2.0, 3.0]);
        assert_eq!(st.sigma, vec![1.0, 1.0]);
        let out = calibrate(&f, &fitted(&f)).unwrap();
        assert_eq!(out.as_slice(), &[-1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn degenerate_statistics_hit_the_floor() {
        let single = Matrix::from_rows(&[[0.3, -7.0]]).unwrap();
        let st = fit_stats(&single, DEFAULT_EPSILON).unwrap();
        assert_eq!(st.mu, vec![0.3, -7.0]);
        assert_eq!(st.sigma, vec![DEFAULT_EPSILON; 2]);
        let f = Matrix::from_rows(&[[1.0, 5.0], [2.0, 5.0], [4.0, 5.0]]).unwrap();
        assert_eq!(fit_stats(&f, DEFAULT_EPSILON).unwrap().sigma[1], DEFAULT_EPSILON);
        assert!(fit_stats(&Matrix::zeros(0, 2), DEFAULT_EPSILON).is_err());
    }

    #[test]
    fn calibration_edge_cases() {
        let f = Matrix::from_rows(&[[1.0, 2.0], [3.0, 6.0]]).unwrap();
        let mut st = fitted(&f);
        let mean = Matrix::from_rows(&[[2.0, 4.0]]).unwrap();
        st.scale = vec![3.0, -2.0];
        assert!(calibrate(&mean, &st).unwrap().as_slice().iter().all(|&v| v == 0.0));
        st.scale = vec![0.0, 0.0];
        assert!(calibrate(&f, &st).unwrap().as_slice().iter().all(|&v| v == 0.0));
        assert!(matches!(
            calibrate(&f, &DcmState::new(2)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn scale_gradient_single_feature() {
        let g = Matrix::from_rows(&[[0.5, -2.0]]).unwrap();
        let n = Matrix::from_rows(&[[4.0, 3.0]]).unwrap();
        assert_eq!(scale_gradient(&g, &n).unwrap(), vec![2.0, -6.0]);
        assert_eq!(scale_gradient(&Matrix::zeros(1, 2), &n).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn passthrough_cancels_when_scale_equals_sigma() {
        let f = Matrix::from_rows(&[[1.0, 2.0], [3.0, 8.0]]).unwrap();
        let mut st = fitted(&f);
        st.scale = st.stats.as_ref().unwrap().sigma.clone();
        let up = Matrix::from_rows(&[[0.1, -0.2], [0.3, 0.4]]).unwrap();
        assert_eq!(stats_gradient_passthrough(&up, &st).unwrap(), up);
        let zero = stats_gradient_passthrough(&Matrix::zeros(2, 2), &st).unwrap();
        assert!(zero.as_slice().iter().all(|&v| v == 0.0));
    }

    fn random(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| 2.0 + 3.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn full_stats_gradient_matches_finite_differences() {
        let mut rng = seed::rng(31);
        let h = 1e-5;
        for _ in 0..30 {
            let f = random(&mut rng, 6, 3);
            let up = random(&mut rng, 6, 3);
            let mut st = fitted(&f);
            st.scale = vec![0.7, -1.3, 2.0];
            let cal = calibrate_with_cache(&f, &st).unwrap();
            let analytic = stats_gradient_full(&up, &cal.normalized, &st).unwrap();
            let probe = |x: &Matrix| {
                let mut s = st.clone();
                s.fit(x).unwrap();
                crate::linalg::dot(calibrate(x, &s).unwrap().as_slice(), up.as_slice())
            };
            for k in 0..f.as_slice().len() {
                let mut plus = f.clone();
                let mut minus = f.clone();
                plus.as_mut_slice()[k] += h;
                minus.as_mut_slice()[k] -= h;
                let num = (probe(&plus) - probe(&minus)) / (2.0 * h);
                let ana = analytic.as_slice()[k];
                assert!((num - ana).abs() <= 1e-5 * num.abs().max(ana.abs()).max(1e-3), "{num} vs {ana}");
            }
        }
    }

    #[test]
    fn state_dump_lists_every_dimension() {
        let f = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let mut buf = Vec::new();
        write_state_text(3, &fitted(&f), &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "3,0,2.0,1.0,1.0\n3,1,3.0,1.0,1.0\n");
    }
}
