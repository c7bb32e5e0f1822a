//! Baseline entropy coders for index grids: a static global table,
//! adaptive order-0..3 context models, and the hyperprior-driven coder.
//!
//! Context neighbours are taken in raster order from already-coded cells:
//! order 1 uses the left neighbour, order 2 adds the top neighbour, order 3
//! adds the top-left one. Cells outside the grid map to a boundary token
//! equal to `K`.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use crate::codebook::{Granularity, IndexGrid};
use crate::error::{Error, Result};
use crate::probability::CategoricalField;
use crate::range_coder::{quantize_pmf, QuantizedCdf, RangeDecoder, RangeEncoder};

pub const MAX_ORDER: usize = 3;

/// Laplace smoothing constant added to every count.
pub const ALPHA: f64 = 1.0;

/// A coded grid and its cost, excluding any side tables.
#[derive(Clone, Debug, PartialEq)]
pub struct CodedGrid {
    pub bytes: Vec<u8>,
    pub symbols: usize,
    pub bits_per_index: f64,
}

impl CodedGrid {
    fn new(bytes: Vec<u8>, symbols: usize) -> Self {
        let bits_per_index = if symbols == 0 {
            0.0
        } else {
            8.0 * bytes.len() as f64 / symbols as f64
        };
        Self {
            bytes,
            symbols,
            bits_per_index,
        }
    }
}

type Context = [u32; MAX_ORDER];

/// Adaptive count tables keyed by neighbour context. Unseen contexts fall
/// back to the uniform table, which is what zero counts smooth to.
pub struct ContextModel {
    order: usize,
    k: usize,
    counts: HashMap<Context, (Vec<u32>, u32)>,
    uniform: QuantizedCdf,
}

impl ContextModel {
    pub fn new(k: usize, order: usize) -> Result<Self> {
        if order > MAX_ORDER {
            return Err(Error::InvalidParam(format!("context order {order} exceeds {MAX_ORDER}")));
        }
        if k < 2 {
            return Err(Error::InvalidParam(format!("alphabet of {k} symbols")));
        }
        Ok(Self {
            order,
            k,
            counts: HashMap::new(),
            uniform: QuantizedCdf::uniform(k)?,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Context of cell `(y, x)` given the cells decoded so far.
    pub fn context(&self, decoded: &[u32], width: usize, y: usize, x: usize) -> Context {
        let boundary = self.k as u32;
        let at = |yy: Option<usize>, xx: Option<usize>| match (yy, xx) {
            (Some(yy), Some(xx)) => decoded[yy * width + xx],
            _ => boundary,
        };
        let left = at(Some(y), x.checked_sub(1));
        let top = at(y.checked_sub(1), Some(x));
        let top_left = at(y.checked_sub(1), x.checked_sub(1));
        let mut ctx = [0u32; MAX_ORDER];
        ctx[..self.order].copy_from_slice(&[left, top, top_left][..self.order]);
        ctx
    }

    pub fn table(&self, ctx: &Context) -> Result<QuantizedCdf> {
        match self.counts.get(ctx) {
            None => Ok(self.uniform.clone()),
            Some((counts, total)) => {
                let denom = *total as f64 + self.k as f64 * ALPHA;
                let probs: Vec<f64> = counts.iter().map(|&c| (c as f64 + ALPHA) / denom).collect();
                quantize_pmf(&probs)
            }
        }
    }

    pub fn update(&mut self, ctx: Context, symbol: usize) {
        let k = self.k;
        let (counts, total) = self.counts.entry(ctx).or_insert_with(|| (vec![0; k], 0));
        counts[symbol] += 1;
        *total += 1;
    }

    pub fn contexts_seen(&self) -> usize {
        self.counts.len()
    }
}

fn step_hash(loc: usize, ctx: &Context, cdf: &QuantizedCdf) -> u64 {
    let mut h = DefaultHasher::new();
    loc.hash(&mut h);
    ctx.hash(&mut h);
    cdf.hash(&mut h);
    h.finish()
}

/// Adaptive context coding in raster order.
pub fn code_indices_context(grid: &IndexGrid, k: usize, order: usize) -> Result<CodedGrid> {
    encode_context_traced(grid, k, order, false).map(|(c, _)| c)
}

/// Like [`code_indices_context`], also returning one hash of the coder
/// state (position, context, table) per coded cell.
pub fn encode_context_traced(grid: &IndexGrid, k: usize, order: usize, trace: bool) -> Result<(CodedGrid, Vec<u64>)> {
    if grid.is_empty() {
        return Err(Error::InvalidParam("empty index grid".into()));
    }
    grid.validate(k)?;
    let mut model = ContextModel::new(k, order)?;
    let mut enc = RangeEncoder::new();
    let mut hashes = Vec::new();
    let w = grid.width();
    for y in 0..grid.height() {
        for x in 0..w {
            let ctx = model.context(grid.indices(), w, y, x);
            let cdf = model.table(&ctx)?;
            if trace {
                hashes.push(step_hash(y * w + x, &ctx, &cdf));
            }
            let s = grid.get(y, x) as usize;
            enc.encode(&cdf, s);
            model.update(ctx, s);
        }
    }
    Ok((CodedGrid::new(enc.finish(), grid.len()), hashes))
}

pub fn decode_indices_context(
    bytes: &[u8],
    k: usize,
    order: usize,
    granularity: Granularity,
    height: usize,
    width: usize,
) -> Result<IndexGrid> {
    decode_context_traced(bytes, k, order, granularity, height, width, false).map(|(g, _)| g)
}

pub fn decode_context_traced(
    bytes: &[u8],
    k: usize,
    order: usize,
    granularity: Granularity,
    height: usize,
    width: usize,
    trace: bool,
) -> Result<(IndexGrid, Vec<u64>)> {
    let mut model = ContextModel::new(k, order)?;
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = vec![0u32; height * width];
    let mut hashes = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let ctx = model.context(&out, width, y, x);
            let cdf = model.table(&ctx)?;
            if trace {
                hashes.push(step_hash(y * width + x, &ctx, &cdf));
            }
            let s = dec.decode(&cdf)?;
            out[y * width + x] = s as u32;
            model.update(ctx, s);
        }
    }
    dec.finish()?;
    Ok((IndexGrid::new(granularity, height, width, out)?, hashes))
}

/// Grid coded with one global table. The quantized table travels alongside
/// as `K` little-endian `u16` frequencies.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticCoded {
    pub table: Vec<u8>,
    pub coded: CodedGrid,
}

/// Normalizes positive global frequencies and quantizes them.
pub fn static_table(frequencies: &[f64]) -> Result<QuantizedCdf> {
    if frequencies.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::InvalidPmf("static table frequencies must be positive".into()));
    }
    let s: f64 = frequencies.iter().sum();
    quantize_pmf(&frequencies.iter().map(|f| f / s).collect::<Vec<_>>())
}

pub fn code_indices_static(grid: &IndexGrid, frequencies: &[f64]) -> Result<StaticCoded> {
    let cdf = static_table(frequencies)?;
    grid.validate(cdf.k())?;
    let mut enc = RangeEncoder::new();
    for &s in grid.indices() {
        enc.encode(&cdf, s as usize);
    }
    let mut table = Vec::with_capacity(2 * cdf.k());
    for f in cdf.frequencies() {
        let f = u16::try_from(f).map_err(|_| Error::InvalidPmf("frequency does not fit u16".into()))?;
        table.extend_from_slice(&f.to_le_bytes());
    }
    Ok(StaticCoded {
        table,
        coded: CodedGrid::new(enc.finish(), grid.len()),
    })
}

pub fn decode_indices_static(
    table: &[u8],
    bytes: &[u8],
    granularity: Granularity,
    height: usize,
    width: usize,
) -> Result<IndexGrid> {
    if table.len() % 2 != 0 {
        return Err(Error::CorruptStream("odd-length frequency table".into()));
    }
    let freqs: Vec<u32> = table
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
        .collect();
    let cdf = QuantizedCdf::from_frequencies(&freqs)?;
    let mut dec = RangeDecoder::new(bytes)?;
    let out = (0..height * width)
        .map(|_| dec.decode(&cdf).map(|s| s as u32))
        .collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    IndexGrid::new(granularity, height, width, out)
}

/// Codes the cells selected by `mask` (all cells when `None`) with the
/// per-location model probabilities.
pub fn code_indices_hyper(grid: &IndexGrid, cat: &CategoricalField, mask: Option<&[bool]>) -> Result<CodedGrid> {
    check_hyper_shape(grid.height(), grid.width(), cat, mask)?;
    grid.validate(cat.k())?;
    let mut enc = RangeEncoder::new();
    let mut n = 0;
    for (loc, &s) in grid.indices().iter().enumerate() {
        if mask.map_or(true, |m| m[loc]) {
            enc.encode(&quantize_pmf(cat.at(loc))?, s as usize);
            n += 1;
        }
    }
    Ok(CodedGrid::new(enc.finish(), n))
}

/// Inverse of [`code_indices_hyper`]. Cells outside the mask decode as 0.
pub fn decode_indices_hyper(
    bytes: &[u8],
    cat: &CategoricalField,
    mask: Option<&[bool]>,
    granularity: Granularity,
) -> Result<IndexGrid> {
    let (h, w) = (cat.height(), cat.width());
    check_hyper_shape(h, w, cat, mask)?;
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = vec![0u32; h * w];
    for (loc, o) in out.iter_mut().enumerate() {
        if mask.map_or(true, |m| m[loc]) {
            *o = dec.decode(&quantize_pmf(cat.at(loc))?)? as u32;
        }
    }
    dec.finish()?;
    IndexGrid::new(granularity, h, w, out)
}

/// `Σ −log₂(freq/2¹⁶)` over the coded cells: the cost the coder is handed.
pub fn hyper_quantized_bits(grid: &IndexGrid, cat: &CategoricalField, mask: Option<&[bool]>) -> Result<f64> {
    check_hyper_shape(grid.height(), grid.width(), cat, mask)?;
    let mut bits = 0.0;
    for (loc, &s) in grid.indices().iter().enumerate() {
        if mask.map_or(true, |m| m[loc]) {
            bits += quantize_pmf(cat.at(loc))?.cost_bits(s as usize);
        }
    }
    Ok(bits)
}

fn check_hyper_shape(h: usize, w: usize, cat: &CategoricalField, mask: Option<&[bool]>) -> Result<()> {
    if cat.height() != h || cat.width() != w {
        return Err(Error::Shape(format!("grid {}x{} vs model {}x{}", h, w, cat.height(), cat.width())));
    }
    if let Some(m) = mask {
        if m.len() != h * w {
            return Err(Error::Shape(format!("mask of {} cells for {}x{} grid", m.len(), h, w)));
        }
    }
    Ok(())
}
