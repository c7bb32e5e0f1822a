//! Categorical distributions over codebook indices induced by a Gaussian
//! in embedding space, and the rate quantities computed from them.
//!
//! Every anchor `e_k` is scored by its squared Mahalanobis distance to the
//! predicted mean; the probabilities are the softmax of `−½ d²`. In the
//! isotropic case `Σ = σ²I` this is `−‖e_k − μ‖² / 2σ²`.
//!
//! All probabilities leave this module floored at [`P_FLOOR`] and
//! renormalized, so the rate used for training equals the rate the coder
//! can actually realize (up to integer quantization).

use crate::codebook::{Codebook, IndexGrid};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound on the predicted standard deviation.
pub const SIGMA_MIN: f64 = 1e-3;

/// Probability floor applied before renormalization (`2⁻¹⁶`).
pub const P_FLOOR: f64 = 1.0 / 65536.0;

const SYMMETRY_TOL: f64 = 1e-9;

/// Predicted Gaussian parameters per location.
#[derive(Clone, Debug)]
pub struct GaussianField {
    mu: Tensor,
    sigma: Vec<f64>,
    covariance: Option<Vec<f64>>,
}

impl GaussianField {
    /// Isotropic field: `mu` is `[D, H, W]`, `sigma` has `H·W` entries.
    pub fn isotropic(mu: Tensor, sigma: Vec<f64>) -> Result<Self> {
        let (_, h, w) = rank3(&mu)?;
        if sigma.len() != h * w {
            return Err(Error::Shape(format!("sigma has {} entries for {}x{} grid", sigma.len(), h, w)));
        }
        if let Some((location, &s)) = sigma.iter().enumerate().find(|(_, &s)| !(s >= SIGMA_MIN)) {
            return Err(Error::SigmaBelowFloor {
                sigma: s,
                floor: SIGMA_MIN,
                location,
            });
        }
        Ok(Self {
            mu,
            sigma,
            covariance: None,
        })
    }

    /// Full-covariance field: `covariance` holds one row-major `D × D`
    /// matrix per location.
    pub fn general(mu: Tensor, covariance: Vec<f64>) -> Result<Self> {
        let (d, h, w) = rank3(&mu)?;
        if covariance.len() != h * w * d * d {
            return Err(Error::Shape(format!(
                "covariance has {} entries, expected {}",
                covariance.len(),
                h * w * d * d
            )));
        }
        for (location, m) in covariance.chunks_exact(d * d).enumerate() {
            for r in 0..d {
                for c in 0..r {
                    if (m[r * d + c] - m[c * d + r]).abs() > SYMMETRY_TOL || !m[r * d + c].is_finite() {
                        return Err(Error::NotPositiveDefinite { location });
                    }
                }
            }
            cholesky(m, d).ok_or(Error::NotPositiveDefinite { location })?;
        }
        Ok(Self {
            mu,
            sigma: Vec::new(),
            covariance: Some(covariance),
        })
    }

    pub fn depth(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.mu.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.mu.shape()[2]
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn covariance(&self) -> Option<&[f64]> {
        self.covariance.as_deref()
    }

    fn mu_at(&self, loc: usize, out: &mut [f64]) {
        let plane = self.height() * self.width();
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.mu.data()[c * plane + loc];
        }
    }
}

fn rank3(t: &Tensor) -> Result<(usize, usize, usize)> {
    if t.shape().len() != 3 {
        return Err(Error::Shape(format!("expected [D, H, W], got {:?}", t.shape())));
    }
    Ok(t.dims3())
}

/// Per-location probability vectors over `K` symbols, stored
/// location-major (`probs[loc * K + k]`).
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalField {
    k: usize,
    height: usize,
    width: usize,
    probs: Vec<f64>,
}

impl CategoricalField {
    /// Wraps raw probabilities, checking positivity and normalization.
    pub fn new(k: usize, height: usize, width: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != k * height * width {
            return Err(Error::Shape(format!("{} probabilities for K={} on {}x{}", probs.len(), k, height, width)));
        }
        for (loc, p) in probs.chunks_exact(k).enumerate() {
            if p.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
                return Err(Error::InvalidPmf(format!("probability outside (0, 1] at location {loc}")));
            }
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidPmf(format!("location {loc} sums to {s}")));
            }
        }
        Ok(Self { k, height, width, probs })
    }

    /// The same distribution at every location.
    pub fn uniform(k: usize, height: usize, width: usize) -> Self {
        Self {
            k,
            height,
            width,
            probs: vec![1.0 / k as f64; k * height * width],
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn locations(&self) -> usize {
        self.height * self.width
    }

    pub fn at(&self, loc: usize) -> &[f64] {
        &self.probs[loc * self.k..(loc + 1) * self.k]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Most probable symbol at `loc`, smallest index on ties.
    pub fn argmax(&self, loc: usize) -> usize {
        let p = self.at(loc);
        let mut best = 0;
        for (k, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = k;
            }
        }
        best
    }
}

/// Lower-triangular Cholesky factor of a row-major SPD matrix.
fn cholesky(m: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = m[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// `‖L⁻¹ v‖²` by forward substitution.
fn solve_norm_sq(l: &[f64], d: usize, v: &[f64]) -> f64 {
    let mut z = vec![0.0; d];
    let mut acc = 0.0;
    for i in 0..d {
        let mut s = v[i];
        for k in 0..i {
            s -= l[i * d + k] * z[k];
        }
        z[i] = s / l[i * d + i];
        acc += z[i] * z[i];
    }
    acc
}

/// Squared Mahalanobis distance `(e − μ)ᵀ Σ⁻¹ (e − μ)` via a Cholesky solve.
pub fn mahalanobis_sq(anchor: &[f64], mu: &[f64], cov: &[f64]) -> Result<f64> {
    let d = anchor.len();
    if mu.len() != d || cov.len() != d * d {
        return Err(Error::Shape(format!(
            "anchor {} / mean {} / covariance {} entries",
            d,
            mu.len(),
            cov.len()
        )));
    }
    let l = cholesky(cov, d).ok_or(Error::NotPositiveDefinite { location: 0 })?;
    let diff: Vec<f64> = anchor.iter().zip(mu).map(|(e, m)| e - m).collect();
    Ok(solve_norm_sq(&l, d, &diff))
}

/// Softmax with max subtraction, then floor and renormalize, in place.
/// `buf` holds logits on entry and probabilities on exit.
pub fn floored_softmax(buf: &mut [f64]) {
    let max = buf.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in buf.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    let mut s = 0.0;
    for v in buf.iter_mut() {
        *v = (*v / z).max(P_FLOOR);
        s += *v;
    }
    for v in buf.iter_mut() {
        *v /= s;
    }
}

fn squared_distance(anchor: &[f32], mu: &[f64]) -> f64 {
    anchor
        .iter()
        .zip(mu)
        .map(|(&e, &m)| {
            let diff = m - e as f64;
            diff * diff
        })
        .sum()
}

/// Full-covariance model: `p_k ∝ exp(−½ d²_M(e_k, μ))`.
pub fn categorical_general(cb: &Codebook, field: &GaussianField) -> Result<CategoricalField> {
    let cov = field
        .covariance()
        .ok_or_else(|| Error::InvalidParam("field has no covariance".into()))?;
    let d = check_depth(cb, field)?;
    let (k, n) = (cb.k(), field.height() * field.width());
    let mut probs = vec![0.0; k * n];
    let mut mu = vec![0.0; d];
    let mut diff = vec![0.0; d];
    for loc in 0..n {
        field.mu_at(loc, &mut mu);
        let l = cholesky(&cov[loc * d * d..(loc + 1) * d * d], d).ok_or(Error::NotPositiveDefinite { location: loc })?;
        let out = &mut probs[loc * k..(loc + 1) * k];
        for (j, o) in out.iter_mut().enumerate() {
            for ((df, &e), &m) in diff.iter_mut().zip(cb.row(j)).zip(&mu) {
                *df = e as f64 - m;
            }
            *o = -0.5 * solve_norm_sq(&l, d, &diff);
        }
        floored_softmax(out);
    }
    Ok(CategoricalField {
        k,
        height: field.height(),
        width: field.width(),
        probs,
    })
}

/// Isotropic model: `p_k ∝ exp(−‖e_k − μ‖² / 2σ²)`.
pub fn categorical_isotropic(cb: &Codebook, field: &GaussianField) -> Result<CategoricalField> {
    if field.covariance().is_some() {
        return Err(Error::InvalidParam("expected an isotropic field".into()));
    }
    let d = check_depth(cb, field)?;
    let (k, n) = (cb.k(), field.height() * field.width());
    let mut probs = vec![0.0; k * n];
    let mut mu = vec![0.0; d];
    for loc in 0..n {
        field.mu_at(loc, &mut mu);
        let sigma = field.sigma()[loc];
        if !(sigma >= SIGMA_MIN) {
            return Err(Error::SigmaBelowFloor {
                sigma,
                floor: SIGMA_MIN,
                location: loc,
            });
        }
        let inv = 1.0 / (2.0 * sigma * sigma);
        let out = &mut probs[loc * k..(loc + 1) * k];
        for (j, o) in out.iter_mut().enumerate() {
            *o = -squared_distance(cb.row(j), &mu) * inv;
        }
        floored_softmax(out);
    }
    Ok(CategoricalField {
        k,
        height: field.height(),
        width: field.width(),
        probs,
    })
}

fn check_depth(cb: &Codebook, field: &GaussianField) -> Result<usize> {
    if field.depth() != cb.d() {
        return Err(Error::Dimension {
            expected: cb.d(),
            got: field.depth(),
        });
    }
    Ok(cb.d())
}

/// `Σ −log₂ p(selected)` over the grid, in bits.
pub fn cross_entropy_rate(indices: &IndexGrid, cat: &CategoricalField) -> Result<f64> {
    if indices.height() != cat.height() || indices.width() != cat.width() {
        return Err(Error::Shape(format!(
            "index grid {}x{} vs model {}x{}",
            indices.height(),
            indices.width(),
            cat.height(),
            cat.width()
        )));
    }
    indices.validate(cat.k())?;
    let mut bits = 0.0;
    for (loc, &s) in indices.indices().iter().enumerate() {
        let p = cat.at(loc)[s as usize];
        if !(p > 0.0) {
            return Err(Error::ZeroProbability { location: loc });
        }
        bits -= p.log2();
    }
    Ok(bits)
}

/// `Σ_loc H(P_loc)` in bits.
pub fn shannon_entropy(cat: &CategoricalField) -> f64 {
    (0..cat.locations())
        .map(|loc| {
            cat.at(loc)
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.log2())
                .sum::<f64>()
        })
        .sum()
}

/// Inputs to the differentiable index rate.
pub struct IndexRateInputs<'a> {
    /// `[K, D]` anchors.
    pub anchors: &'a Tensor,
    /// `[D, H, W]` predicted means.
    pub mu: &'a Tensor,
    /// `[1, H, W]` predicted standard deviations.
    pub sigma: &'a Tensor,
    pub indices: &'a [u32],
    /// Optional per-location weights (routing masks).
    pub weights: Option<&'a [f64]>,
    /// Optional `[D, H, W]` stand-in for the selected anchor. Its value
    /// replaces `e_selected` and it receives that anchor's gradient
    /// (straight-through path into the encoder).
    pub target: Option<&'a Tensor>,
}

pub struct IndexRateGrads {
    pub anchors: Tensor,
    pub mu: Tensor,
    pub sigma: Tensor,
    pub target: Option<Tensor>,
    /// Per (location, symbol): whether the probability sits above the floor.
    pub floored: Vec<bool>,
}

/// Cross-entropy in bits of the floored isotropic model, with gradients
/// with respect to anchors, means, deviations and the optional target.
pub fn index_rate_with_grads(inp: &IndexRateInputs<'_>) -> (f64, IndexRateGrads) {
    let (d, h, w) = inp.mu.dims3();
    let k = inp.anchors.shape()[0];
    let n = h * w;
    let a = inp.anchors.data();
    let mut g_anchor = Tensor::zeros(inp.anchors.shape());
    let mut g_mu = Tensor::zeros(inp.mu.shape());
    let mut g_sigma = Tensor::zeros(inp.sigma.shape());
    let mut g_target = inp.target.map(|t| Tensor::zeros(t.shape()));

    let mut logits = vec![0.0; k];
    let mut dist = vec![0.0; k];
    let mut mu = vec![0.0; d];
    let mut tgt = vec![0.0; d];
    let mut gmu = vec![0.0; d];
    let mut total = 0.0;
    let ln2 = std::f64::consts::LN_2;
    let mut floored = Vec::with_capacity(n * k);

    for loc in 0..n {
        let weight = inp.weights.map_or(1.0, |wt| wt[loc]);
        if weight == 0.0 {
            continue;
        }
        for c in 0..d {
            mu[c] = inp.mu.data()[c * n + loc];
        }
        let sel = inp.indices[loc] as usize;
        let sigma = inp.sigma.data()[loc];
        let inv = 1.0 / (2.0 * sigma * sigma);
        for (dj, row) in dist.iter_mut().zip(a.chunks_exact(d)) {
            *dj = row.iter().zip(&mu).map(|(e, m)| (e - m) * (e - m)).sum();
        }
        if let Some(t) = inp.target {
            for c in 0..d {
                tgt[c] = t.data()[c * n + loc];
            }
            dist[sel] = tgt.iter().zip(&mu).map(|(e, m)| (e - m) * (e - m)).sum();
        }
        // p = softmax(−dist·inv); q = max(p, floor) / S
        let min_d = dist.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut z = 0.0;
        for (l, &dj) in logits.iter_mut().zip(&dist) {
            *l = ((min_d - dj) * inv).exp();
            z += *l;
        }
        let inv_z = 1.0 / z;
        let mut s = 0.0;
        let mut above_mass = 0.0;
        for v in logits.iter_mut() {
            *v *= inv_z;
            if *v >= P_FLOOR {
                s += *v;
                above_mass += *v;
            } else {
                s += P_FLOOR;
            }
        }
        let p = &logits;
        floored.extend(p.iter().map(|&v| v >= P_FLOOR));
        let p_sel = p[sel];
        let sel_above = p_sel >= P_FLOOR;
        total += weight * (-(p_sel.max(P_FLOOR) / s).ln() / ln2);

        // dL/dp_j = [p_j ≥ f]/S − δ_{j,sel}[p_sel ≥ f]/p_sel
        // dL/dlogit_i = p_i (g_i − Σ_j g_j p_j)
        let inv_s = 1.0 / s;
        let mean_g = above_mass * inv_s - if sel_above { 1.0 } else { 0.0 };
        let scale = weight / ln2;
        let inv_var = 1.0 / (sigma * sigma);
        let inv_cube = inv_var / sigma;
        gmu.iter_mut().for_each(|v| *v = 0.0);
        let mut gs = 0.0;
        let rows = a.chunks_exact(d).zip(g_anchor.data_mut().chunks_exact_mut(d));
        for (j, ((&pj, &dj), (row, ga))) in p.iter().zip(&dist).zip(rows).enumerate() {
            let mut gj = if pj >= P_FLOOR { inv_s } else { 0.0 };
            if j == sel && sel_above {
                gj -= 1.0 / p_sel;
            }
            let dl = scale * pj * (gj - mean_g);
            // logit = −‖e − μ‖² / 2σ²
            gs += dl * dj * inv_cube;
            let f = inv_var * dl;
            if j == sel && inp.target.is_some() {
                let gt = g_target.as_mut().unwrap().data_mut();
                for c in 0..d {
                    let v = -(tgt[c] - mu[c]) * f;
                    gmu[c] -= v;
                    gt[c * n + loc] += v;
                }
            } else {
                for ((g, e), (m, gm)) in ga.iter_mut().zip(row).zip(mu.iter().zip(gmu.iter_mut())) {
                    let v = -(e - m) * f;
                    *gm -= v;
                    *g += v;
                }
            }
        }
        g_sigma.data_mut()[loc] += gs;
        for c in 0..d {
            g_mu.data_mut()[c * n + loc] += gmu[c];
        }
    }
    (
        total,
        IndexRateGrads {
            anchors: g_anchor,
            mu: g_mu,
            sigma: g_sigma,
            target: g_target,
            floored,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{quantize, FeatureGrid, Granularity};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn iso(mu: Vec<f64>, d: usize, sigma: f64) -> GaussianField {
        GaussianField::isotropic(Tensor::from_vec(&[d, 1, 1], mu).unwrap(), vec![sigma]).unwrap()
    }

    fn explicit_inverse(m: &[f64], d: usize) -> Vec<f64> {
        // Gauss-Jordan with partial pivoting.
        let mut a = m.to_vec();
        let mut inv = vec![0.0; d * d];
        for i in 0..d {
            inv[i * d + i] = 1.0;
        }
        for col in 0..d {
            let piv = (col..d).max_by(|&x, &y| a[x * d + col].abs().total_cmp(&a[y * d + col].abs())).unwrap();
            for j in 0..d {
                a.swap(col * d + j, piv * d + j);
                inv.swap(col * d + j, piv * d + j);
            }
            let p = a[col * d + col];
            for j in 0..d {
                a[col * d + j] /= p;
                inv[col * d + j] /= p;
            }
            for r in 0..d {
                if r != col {
                    let f = a[r * d + col];
                    for j in 0..d {
                        a[r * d + j] -= f * a[col * d + j];
                        inv[r * d + j] -= f * inv[col * d + j];
                    }
                }
            }
        }
        inv
    }

    fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let b: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                m[i * d + j] = (0..d).map(|k| b[i * d + k] * b[j * d + k]).sum::<f64>();
            }
            m[i * d + i] += 0.5;
        }
        m
    }

    #[test]
    fn mahalanobis_reduces_to_euclidean() {
        let v = mahalanobis_sq(&[3.0, 4.0], &[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((v - 25.0).abs() < 1e-12);
        let v = mahalanobis_sq(&[2.0, 0.0], &[0.0, 0.0], &[4.0, 0.0, 0.0, 4.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mahalanobis_matches_explicit_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let cov = random_spd(&mut rng, 4);
            let e: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mu: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let inv = explicit_inverse(&cov, 4);
            let diff: Vec<f64> = e.iter().zip(&mu).map(|(a, b)| a - b).collect();
            let mut want = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    want += diff[i] * inv[i * 4 + j] * diff[j];
                }
            }
            let got = mahalanobis_sq(&e, &mu, &cov).unwrap();
            assert!((got - want).abs() <= 1e-10 * want.abs().max(1e-300), "{got} vs {want}");
        }
    }

    #[test]
    fn mahalanobis_rejects_non_spd() {
        let err = mahalanobis_sq(&[1.0, 0.0], &[0.0, 0.0], &[1.0, 2.0, 2.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { .. }));
    }

    #[test]
    fn general_rejects_non_spd_location() {
        let mu = Tensor::zeros(&[2, 1, 2]);
        let cov = vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, -1.0];
        assert!(matches!(
            GaussianField::general(mu, cov),
            Err(Error::NotPositiveDefinite { location: 1 })
        ));
    }

    #[test]
    fn equidistant_anchors_are_uniform() {
        let cb = Codebook::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]).unwrap();
        let field = GaussianField::general(Tensor::zeros(&[2, 1, 1]), vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let cat = categorical_general(&cb, &field).unwrap();
        for &p in cat.at(0) {
            assert_eq!(p, 0.25);
        }
    }

    #[test]
    fn two_anchor_hand_evaluation() {
        // d² = 0 and 2 under identity covariance.
        let cb = Codebook::from_rows(&[vec![0.0], vec![2f64.sqrt()]]).unwrap();
        let field = GaussianField::general(Tensor::zeros(&[1, 1, 1]), vec![1.0]).unwrap();
        let cat = categorical_general(&cb, &field).unwrap();
        let e = (-1.0f64).exp();
        // sqrt(2) stored as f32, so the distance is only f32-exact.
        assert!((cat.at(0)[0] - 1.0 / (1.0 + e)).abs() < 1e-7);
        assert!((cat.at(0)[1] - e / (1.0 + e)).abs() < 1e-7);
    }

    #[test]
    fn midpoint_is_even_split() {
        let cb = Codebook::from_rows(&[vec![-1.0, 0.5], vec![1.0, 0.5]]).unwrap();
        let cat = categorical_isotropic(&cb, &iso(vec![0.0, 0.5], 2, 0.7)).unwrap();
        assert_eq!(cat.at(0), &[0.5, 0.5]);
    }

    #[test]
    fn huge_sigma_is_nearly_uniform() {
        let cb = Codebook::random_normal(64, 4, 1.0, 2).unwrap();
        let cat = categorical_isotropic(&cb, &iso(vec![0.3, -0.2, 0.1, 0.0], 4, 1e6)).unwrap();
        let dev = cat.at(0).iter().map(|p| (p - 1.0 / 64.0).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-5);
    }

    #[test]
    fn isotropic_matches_scalar_loop() {
        let cb = Codebook::random_normal(1024, 4, 1.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mu: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cat = categorical_isotropic(&cb, &iso(mu.clone(), 4, 0.3)).unwrap();
        // Oracle: naive double loop, log-sum-exp normalisation, floor, renormalise.
        let mut logit = Vec::new();
        for k in 0..1024 {
            let mut d2 = 0.0;
            for c in 0..4 {
                let diff = cb.entries()[k * 4 + c] as f64 - mu[c];
                d2 += diff * diff;
            }
            logit.push(-d2 / (2.0 * 0.09));
        }
        let m = logit.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + logit.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        let raw: Vec<f64> = logit.iter().map(|l| (l - lse).exp().max(P_FLOOR)).collect();
        let s: f64 = raw.iter().sum();
        for k in 0..1024 {
            assert!((cat.at(0)[k] - raw[k] / s).abs() < 1e-9);
        }
    }

    #[test]
    fn sigma_below_floor_is_an_error() {
        let err = GaussianField::isotropic(Tensor::zeros(&[1, 1, 1]), vec![1e-4]).unwrap_err();
        assert!(matches!(err, Error::SigmaBelowFloor { .. }));
    }

    #[test]
    fn uniform_model_costs_log2k_bits() {
        let cat = CategoricalField::uniform(1024, 1, 1);
        let idx = IndexGrid::new(Granularity::Fine, 1, 1, vec![517]).unwrap();
        assert_eq!(cross_entropy_rate(&idx, &cat).unwrap(), 10.0);
        assert!((shannon_entropy(&cat) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn certain_symbol_costs_nothing() {
        let cat = CategoricalField::new(1, 2, 2, vec![1.0; 4]).unwrap();
        let idx = IndexGrid::new(Granularity::Fine, 2, 2, vec![0; 4]).unwrap();
        assert_eq!(cross_entropy_rate(&idx, &cat).unwrap(), 0.0);
        assert_eq!(shannon_entropy(&cat), 0.0);
    }

    #[test]
    fn near_one_hot_entropy_is_floor_limited() {
        let cb = Codebook::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let cat = categorical_isotropic(&cb, &iso(vec![1.0], 1, SIGMA_MIN)).unwrap();
        assert!(shannon_entropy(&cat) < 1e-3);
    }

    fn random_field(rng: &mut ChaCha8Rng, k: usize, n: usize) -> CategoricalField {
        let mut probs = Vec::new();
        for _ in 0..n {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|v| v / s));
        }
        CategoricalField::new(k, 1, n, probs).unwrap()
    }

    #[test]
    fn cross_entropy_matches_independent_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cat = random_field(&mut rng, 8, 100);
        let idx: Vec<u32> = (0..100).map(|_| rng.gen_range(0..8)).collect();
        let grid = IndexGrid::new(Granularity::Fine, 1, 100, idx.clone()).unwrap();
        // reverse order, natural log
        let mut nats = 0.0;
        for loc in (0..100).rev() {
            nats -= cat.probs()[loc * 8 + idx[loc] as usize].ln();
        }
        let want = nats / std::f64::consts::LN_2;
        assert!((cross_entropy_rate(&grid, &cat).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn entropy_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cat = random_field(&mut rng, 16, 30);
        let mut want = 0.0;
        for &p in cat.probs() {
            want -= p * p.ln() / std::f64::consts::LN_2;
        }
        assert!((shannon_entropy(&cat) - want).abs() < 1e-9);
    }

    #[test]
    fn argmax_agrees_with_quantize() {
        let cb = Codebook::random_normal(32, 4, 1.0, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mu: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let sigma = 10f64.powf(rng.gen_range(-2.0..1.0));
            let cat = categorical_isotropic(&cb, &iso(mu.clone(), 4, sigma)).unwrap();
            let f = FeatureGrid::new(Granularity::Fine, Tensor::from_vec(&[4, 1, 1], mu).unwrap()).unwrap();
            assert_eq!(cat.argmax(0) as u32, quantize(&f, &cb).unwrap().indices()[0]);
        }
    }

    #[test]
    fn rate_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (k, d, h, w) = (6, 2, 2, 2);
        let anchors = Tensor::from_vec(&[k, d], (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mu = Tensor::from_vec(&[d, h, w], (0..d * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let sigma = Tensor::from_vec(&[1, h, w], (0..h * w).map(|_| rng.gen_range(0.4..1.2)).collect()).unwrap();
        let indices = vec![0, 3, 5, 2];
        let weights = vec![1.0, 0.5, 0.0, 2.0];
        let eval = |a: &Tensor, m: &Tensor, s: &Tensor| {
            index_rate_with_grads(&IndexRateInputs {
                anchors: a,
                mu: m,
                sigma: s,
                indices: &indices,
                weights: Some(&weights),
                target: None,
            })
        };
        let (_, g) = eval(&anchors, &mu, &sigma);
        let eps = 1e-6;
        let fd = |t: &Tensor, i: usize, f: &dyn Fn(&Tensor) -> f64| {
            let (mut p, mut m) = (t.clone(), t.clone());
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            (f(&p) - f(&m)) / (2.0 * eps)
        };
        for i in 0..mu.len() {
            let n = fd(&mu, i, &|t| eval(&anchors, t, &sigma).0);
            assert!((n - g.mu.data()[i]).abs() < 1e-6, "mu {i}: {n} vs {}", g.mu.data()[i]);
        }
        for i in 0..sigma.len() {
            let n = fd(&sigma, i, &|t| eval(&anchors, &mu, t).0);
            assert!((n - g.sigma.data()[i]).abs() < 1e-6);
        }
        for i in 0..anchors.len() {
            let n = fd(&anchors, i, &|t| eval(t, &mu, &sigma).0);
            assert!((n - g.anchors.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn rate_value_matches_categorical_cross_entropy() {
        let cb = Codebook::random_normal(50, 3, 1.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mu = Tensor::from_vec(&[3, 2, 3], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let sig: Vec<f64> = (0..6).map(|_| rng.gen_range(0.05..1.0)).collect();
        let idx: Vec<u32> = (0..6).map(|_| rng.gen_range(0..50)).collect();
        let field = GaussianField::isotropic(mu.clone(), sig.clone()).unwrap();
        let cat = categorical_isotropic(&cb, &field).unwrap();
        let grid = IndexGrid::new(Granularity::Fine, 2, 3, idx.clone()).unwrap();
        let want = cross_entropy_rate(&grid, &cat).unwrap();
        let (got, _) = index_rate_with_grads(&IndexRateInputs {
            anchors: &cb.to_tensor(),
            mu: &mu,
            sigma: &Tensor::from_vec(&[1, 2, 3], sig).unwrap(),
            indices: &idx,
            weights: None,
            target: None,
        });
        assert!((got - want).abs() < 1e-9);
    }
}
