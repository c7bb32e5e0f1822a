//! Shared codebook, nearest-neighbour quantization and the commitment loss.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CODEBOOK_MAGIC: [u8; 4] = *b"VQCB";

/// Spatial resolution an index grid lives at, relative to the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Granularity {
    Coarse,
    Medium,
    Fine,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Coarse, Granularity::Medium, Granularity::Fine];

    /// Image-to-grid downsampling factor.
    pub const fn stride(self) -> usize {
        match self {
            Granularity::Coarse => 16,
            Granularity::Medium => 8,
            Granularity::Fine => 4,
        }
    }

    /// Upsampling factor from this grid to the fine grid.
    pub const fn upsample_to_fine(self) -> usize {
        self.stride() / Granularity::Fine.stride()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Granularity::Coarse => "coarse",
            Granularity::Medium => "medium",
            Granularity::Fine => "fine",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `K × D` table of embedding anchors. Stored in single precision so the
/// in-memory table is exactly what the file format carries.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    k: usize,
    d: usize,
    entries: Vec<f32>,
}

impl Codebook {
    pub fn new(k: usize, d: usize, entries: Vec<f32>) -> Result<Self> {
        if k < 2 || d < 1 {
            return Err(Error::InvalidCodebook(format!("need K >= 2 and D >= 1, got K={k} D={d}")));
        }
        if entries.len() != k * d {
            return Err(Error::InvalidCodebook(format!(
                "expected {} entries, got {}",
                k * d,
                entries.len()
            )));
        }
        if let Some(pos) = entries.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidCodebook(format!("non-finite coordinate at {pos}")));
        }
        Ok(Self { k, d, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidCodebook("ragged rows".into()));
        }
        Self::new(rows.len(), d, rows.iter().flatten().map(|&v| v as f32).collect())
    }

    /// Anchors drawn i.i.d. from `N(0, scale²)`.
    pub fn random_normal(k: usize, d: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = (0..k * d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * scale) as f32
            })
            .collect();
        Self::new(k, d, entries)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.entries[index * self.d..(index + 1) * self.d]
    }

    /// Entries widened to `f64`, as a `[K, D]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.k, self.d], self.entries.iter().map(|&v| v as f64).collect())
            .expect("codebook shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::InvalidCodebook(format!("expected [K, D], got {:?}", t.shape())));
        }
        Self::new(t.shape()[0], t.shape()[1], t.data().iter().map(|&v| v as f32).collect())
    }

    /// Index of the anchor nearest to `v`; ties go to the smallest index.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for k in 0..self.k {
            let dist: f64 = self
                .row(k)
                .iter()
                .zip(v)
                .map(|(&e, &x)| {
                    let diff = x - e as f64;
                    diff * diff
                })
                .sum();
            if dist < best_dist {
                best_dist = dist;
                best = k;
            }
        }
        best
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.entries.len());
        out.extend_from_slice(&CODEBOOK_MAGIC);
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        for v in &self.entries {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = bytes.get(..12).ok_or(Error::TruncatedData {
            offset: 0,
            needed: 12,
            available: bytes.len(),
        })?;
        let magic: [u8; 4] = header[..4].try_into().unwrap();
        if magic != CODEBOOK_MAGIC {
            return Err(Error::BadMagic {
                expected: CODEBOOK_MAGIC,
                found: magic,
            });
        }
        let k = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let needed = k.checked_mul(d).and_then(|n| n.checked_mul(4)).ok_or_else(|| {
            Error::InvalidCodebook(format!("K={k} D={d} overflows"))
        })?;
        let body = &bytes[12..];
        if body.len() != needed {
            return Err(Error::TruncatedData {
                offset: 12,
                needed,
                available: body.len(),
            });
        }
        let entries = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(k, d, entries)
    }
}

/// `D × H × W` continuous features at one granularity.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub granularity: Granularity,
    values: Tensor,
}

impl FeatureGrid {
    pub fn new(granularity: Granularity, values: Tensor) -> Result<Self> {
        if values.shape().len() != 3 || values.shape().iter().any(|&n| n == 0) {
            return Err(Error::Shape(format!("feature grid must be [D, H, W] with positive dims, got {:?}", values.shape())));
        }
        if !values.is_finite() {
            return Err(Error::InvalidParam("feature grid contains non-finite values".into()));
        }
        Ok(Self { granularity, values })
    }

    pub fn depth(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }

    /// Feature vector at flat location `loc = y * W + x`.
    pub fn vector_at(&self, loc: usize, out: &mut [f64]) {
        let plane = self.height() * self.width();
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.values.data()[c * plane + loc];
        }
    }
}

/// `H × W` grid of codebook indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexGrid {
    pub granularity: Granularity,
    height: usize,
    width: usize,
    indices: Vec<u32>,
}

impl IndexGrid {
    pub fn new(granularity: Granularity, height: usize, width: usize, indices: Vec<u32>) -> Result<Self> {
        if indices.len() != height * width {
            return Err(Error::Shape(format!(
                "{}x{} grid needs {} indices, got {}",
                height,
                width,
                height * width,
                indices.len()
            )));
        }
        Ok(Self {
            granularity,
            height,
            width,
            indices,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.indices[y * self.width + x]
    }

    /// Checks every index against a codebook size.
    pub fn validate(&self, k: usize) -> Result<()> {
        match self.indices.iter().find(|&&i| i as usize >= k) {
            Some(&index) => Err(Error::IndexOutOfRange { index, k }),
            None => Ok(()),
        }
    }
}

/// Nearest-anchor index per location (squared Euclidean, `f64` accumulation,
/// smallest index on ties).
pub fn quantize(features: &FeatureGrid, cb: &Codebook) -> Result<IndexGrid> {
    if features.depth() != cb.d() {
        return Err(Error::Dimension {
            expected: cb.d(),
            got: features.depth(),
        });
    }
    let n = features.height() * features.width();
    let mut v = vec![0.0; cb.d()];
    let indices = (0..n)
        .map(|loc| {
            features.vector_at(loc, &mut v);
            cb.nearest(&v) as u32
        })
        .collect();
    IndexGrid::new(features.granularity, features.height(), features.width(), indices)
}

/// Codebook lookup: row `indices[y, x]` placed at `(y, x)`.
pub fn dequantize(indices: &IndexGrid, cb: &Codebook) -> Result<FeatureGrid> {
    indices.validate(cb.k())?;
    let (h, w, d) = (indices.height(), indices.width(), cb.d());
    let mut t = Tensor::zeros(&[d, h, w]);
    let data = t.data_mut();
    for (loc, &idx) in indices.indices().iter().enumerate() {
        for (c, &e) in cb.row(idx as usize).iter().enumerate() {
            data[c * h * w + loc] = e as f64;
        }
    }
    FeatureGrid::new(indices.granularity, t)
}

pub const COMMITMENT_BETA: f64 = 0.25;

/// `‖sg[y] − e‖² + β‖sg[e] − y‖²` summed over all locations. The value is
/// `(1 + β)‖y − e‖²`; the stop-gradients only shape [`commitment_grads`].
pub fn commitment_loss(features: &FeatureGrid, quantized: &FeatureGrid, beta: f64) -> Result<f64> {
    check_same_shape(features, quantized)?;
    let sq: f64 = features
        .values()
        .data()
        .iter()
        .zip(quantized.values().data())
        .map(|(y, e)| (y - e) * (y - e))
        .sum();
    Ok(sq + beta * sq)
}

/// Gradients of [`commitment_loss`]: `(d/d features, d/d quantized)`.
/// The codebook term only reaches `quantized`, the β term only `features`.
pub fn commitment_grads(features: &Tensor, quantized: &Tensor, beta: f64) -> (Tensor, Tensor) {
    let mut gy = Tensor::zeros(features.shape());
    let mut ge = Tensor::zeros(quantized.shape());
    for ((y, e), (gy, ge)) in features
        .data()
        .iter()
        .zip(quantized.data())
        .zip(gy.data_mut().iter_mut().zip(ge.data_mut()))
    {
        *ge = 2.0 * (e - y);
        *gy = 2.0 * beta * (y - e);
    }
    (gy, ge)
}

fn check_same_shape(a: &FeatureGrid, b: &FeatureGrid) -> Result<()> {
    if a.values().shape() != b.values().shape() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            a.values().shape(),
            b.values().shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn grid(d: usize, h: usize, w: usize, data: Vec<f64>) -> FeatureGrid {
        FeatureGrid::new(Granularity::Fine, Tensor::from_vec(&[d, h, w], data).unwrap()).unwrap()
    }

    fn unit_cb() -> Codebook {
        Codebook::from_rows(&[vec![0.0], vec![1.0]]).unwrap()
    }

    #[test]
    fn nearer_anchor_wins() {
        let q = quantize(&grid(1, 1, 1, vec![0.2]), &unit_cb()).unwrap();
        assert_eq!(q.indices(), &[0]);
    }

    #[test]
    fn exact_tie_goes_to_lowest_index() {
        let q = quantize(&grid(1, 1, 1, vec![0.5]), &unit_cb()).unwrap();
        assert_eq!(q.indices(), &[0]);
        let dup = Codebook::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let q = quantize(&grid(2, 1, 1, vec![0.1, 0.0]), &dup).unwrap();
        assert_eq!(q.indices(), &[1]);
    }

    #[test]
    fn matches_exhaustive_scan() {
        let cb = Codebook::random_normal(8, 4, 1.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..4 * 16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let f = grid(4, 4, 4, data.clone());
        let q = quantize(&f, &cb).unwrap();
        for loc in 0..16 {
            let v: Vec<f64> = (0..4).map(|c| data[c * 16 + loc]).collect();
            let dists: Vec<f64> = (0..8)
                .map(|k| (0..4).map(|c| (v[c] - cb.row(k)[c] as f64).powi(2)).sum())
                .collect();
            let chosen = q.indices()[loc] as usize;
            for (k, &dk) in dists.iter().enumerate() {
                assert!(dists[chosen] <= dk);
                if dk == dists[chosen] {
                    assert!(chosen <= k);
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let err = quantize(&grid(2, 1, 1, vec![0.0, 0.0]), &unit_cb()).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 1, got: 2 }));
    }

    #[test]
    fn dequantize_all_zero() {
        let idx = IndexGrid::new(Granularity::Coarse, 2, 3, vec![0; 6]).unwrap();
        let f = dequantize(&idx, &unit_cb()).unwrap();
        assert!(f.values().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dequantize_rejects_out_of_range() {
        let idx = IndexGrid::new(Granularity::Coarse, 1, 2, vec![0, 2]).unwrap();
        assert!(matches!(dequantize(&idx, &unit_cb()), Err(Error::IndexOutOfRange { index: 2, k: 2 })));
    }

    #[test]
    fn dequantize_matches_naive_lookup() {
        let cb = Codebook::random_normal(16, 3, 1.0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx: Vec<u32> = (0..20).map(|_| rng.gen_range(0..16)).collect();
        let grid = IndexGrid::new(Granularity::Medium, 4, 5, idx.clone()).unwrap();
        let f = dequantize(&grid, &cb).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                for c in 0..3 {
                    let want = cb.entries()[idx[y * 5 + x] as usize * 3 + c] as f64;
                    assert_eq!(f.values().data()[c * 20 + y * 5 + x], want);
                }
            }
        }
    }

    #[test]
    fn fixed_point_through_codebook_rows() {
        let cb = Codebook::random_normal(32, 4, 1.0, 9).unwrap();
        let idx = IndexGrid::new(Granularity::Fine, 2, 4, vec![3, 1, 31, 0, 7, 7, 12, 30]).unwrap();
        let f = dequantize(&idx, &cb).unwrap();
        assert_eq!(dequantize(&quantize(&f, &cb).unwrap(), &cb).unwrap(), f);
    }

    #[test]
    fn commitment_loss_values() {
        let a = grid(1, 1, 1, vec![0.0]);
        assert_eq!(commitment_loss(&a, &a, 0.25).unwrap(), 0.0);
        let e = grid(1, 1, 1, vec![1.0]);
        assert_eq!(commitment_loss(&a, &e, COMMITMENT_BETA).unwrap(), 1.25);
    }

    #[test]
    fn commitment_loss_matches_two_term_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y: Vec<f64> = (0..3 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e: Vec<f64> = (0..3 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (fy, fe) = (grid(3, 2, 3, y.clone()), grid(3, 2, 3, e.clone()));
        let mut codebook_term = 0.0;
        for loc in 0..6 {
            codebook_term += (0..3).map(|c| (y[c * 6 + loc] - e[c * 6 + loc]).powi(2)).sum::<f64>();
        }
        let mut encoder_term = 0.0;
        for (a, b) in e.iter().zip(&y) {
            encoder_term += (a - b).powi(2);
        }
        let want = codebook_term + 0.25 * encoder_term;
        assert!((commitment_loss(&fy, &fe, 0.25).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn commitment_shape_mismatch() {
        let a = grid(1, 1, 2, vec![0.0, 0.0]);
        let b = grid(1, 2, 1, vec![0.0, 0.0]);
        assert!(matches!(commitment_loss(&a, &b, 0.25), Err(Error::Shape(_))));
    }

    #[test]
    fn codebook_file_roundtrip_and_magic() {
        let cb = Codebook::random_normal(5, 3, 1.0, 2).unwrap();
        let bytes = cb.to_bytes();
        assert_eq!(&bytes[..4], b"VQCB");
        assert_eq!(Codebook::from_bytes(&bytes).unwrap(), cb);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Codebook::from_bytes(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(Codebook::from_bytes(&bytes[..20]), Err(Error::TruncatedData { .. })));
    }
}
