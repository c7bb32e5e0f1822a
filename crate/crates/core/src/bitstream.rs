//! Routing masks and the `.hvqc` container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "HVQC" | version u16 | flags u16
//! height u32 | width u32 | padded_height u32 | padded_width u32 | K u32 | D u32
//! hyper_channels u16 | hyper_stride u8 | z_max u8
//! mask_len u32 | mask bytes
//! for g in coarse, medium, fine:
//!     z_count u32 | z_len u32 | z bytes | y_count u32 | y_len u32 | y bytes
//! crc32 u32          (over every preceding byte)
//! ```

use crate::codebook::{FeatureGrid, Granularity, IndexGrid};
use crate::context::{code_indices_context, decode_indices_context};
use crate::error::{Error, Result};
use crate::hyperprior::{HYPER_STRIDE, Z_MAX};
use crate::wire::{Reader, Writer};

pub const MAGIC: [u8; 4] = *b"HVQC";
pub const VERSION: u16 = 1;

/// Fine cells per coarse block along each axis.
pub const BLOCK: usize = Granularity::Coarse.upsample_to_fine();

/// Default for inference.
pub const DEFAULT_RATIOS: Ratios = Ratios {
    coarse: 0.3,
    medium: 0.3,
    fine: 0.4,
};

/// Schedule used while training the reconstruction stage.
pub const TRAINING_RATIOS: Ratios = Ratios {
    coarse: 0.1,
    medium: 0.3,
    fine: 0.6,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ratios {
    pub coarse: f64,
    pub medium: f64,
    pub fine: f64,
}

impl Ratios {
    pub fn new(coarse: f64, medium: f64, fine: f64) -> Result<Self> {
        let r = Self { coarse, medium, fine };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let v = [self.coarse, self.medium, self.fine];
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidRatios(format!("{v:?} must be finite and non-negative")));
        }
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidRatios(format!("{v:?} sums to {sum}, not 1")));
        }
        Ok(())
    }
}

impl std::str::FromStr for Ratios {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidRatios(format!("{s:?}: {e}")))?;
        match parts[..] {
            [c, m, f] => Ratios::new(c, m, f),
            _ => Err(Error::InvalidRatios(format!("{s:?}: expected three comma-separated values"))),
        }
    }
}

/// Binary selection grids for the three granularities. Every coarse block
/// is assigned to exactly one granularity, so the upsampled masks
/// partition the fine grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingMask {
    blocks_h: usize,
    blocks_w: usize,
    assignment: Vec<Granularity>,
}

impl RoutingMask {
    pub fn new(blocks_h: usize, blocks_w: usize, assignment: Vec<Granularity>) -> Result<Self> {
        if blocks_h == 0 || blocks_w == 0 || assignment.len() != blocks_h * blocks_w {
            return Err(Error::Shape(format!(
                "{} block assignments for a {blocks_h}x{blocks_w} block grid",
                assignment.len()
            )));
        }
        Ok(Self {
            blocks_h,
            blocks_w,
            assignment,
        })
    }

    pub fn uniform(blocks_h: usize, blocks_w: usize, g: Granularity) -> Self {
        Self::new(blocks_h, blocks_w, vec![g; blocks_h * blocks_w]).unwrap()
    }

    /// Rebuilds a mask from its three binary grids, checking the partition
    /// property and that each coarse block carries a single granularity.
    pub fn from_grids(blocks_h: usize, blocks_w: usize, grids: [&[bool]; 3]) -> Result<Self> {
        let mut assignment = Vec::with_capacity(blocks_h * blocks_w);
        for by in 0..blocks_h {
            for bx in 0..blocks_w {
                let mut owner = None;
                for fy in by * BLOCK..(by + 1) * BLOCK {
                    for fx in bx * BLOCK..(bx + 1) * BLOCK {
                        let on: Vec<Granularity> = Granularity::ALL
                            .into_iter()
                            .filter(|g| {
                                let s = g.upsample_to_fine();
                                let w = blocks_w * BLOCK / s;
                                grids[g.index()].get((fy / s) * w + fx / s).copied().unwrap_or(false)
                            })
                            .collect();
                        if on.len() != 1 {
                            return Err(Error::InvalidParam(format!(
                                "fine cell ({fy}, {fx}) is covered by {} granularities",
                                on.len()
                            )));
                        }
                        if owner.is_some_and(|o| o != on[0]) {
                            return Err(Error::InvalidParam(format!("block ({by}, {bx}) mixes granularities")));
                        }
                        owner = Some(on[0]);
                    }
                }
                assignment.push(owner.unwrap());
            }
        }
        Self::new(blocks_h, blocks_w, assignment)
    }

    pub fn blocks_h(&self) -> usize {
        self.blocks_h
    }

    pub fn blocks_w(&self) -> usize {
        self.blocks_w
    }

    pub fn assignment(&self) -> &[Granularity] {
        &self.assignment
    }

    /// Grid dims of granularity `g`.
    pub fn dims(&self, g: Granularity) -> (usize, usize) {
        let f = BLOCK / g.upsample_to_fine();
        (self.blocks_h * f, self.blocks_w * f)
    }

    /// Binary grid `m_g` in raster order.
    pub fn grid(&self, g: Granularity) -> Vec<bool> {
        let f = BLOCK / g.upsample_to_fine();
        let (h, w) = self.dims(g);
        let mut out = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = self.assignment[(y / f) * self.blocks_w + x / f] == g;
            }
        }
        out
    }

    /// Number of cells coded at granularity `g`.
    pub fn count(&self, g: Granularity) -> usize {
        let f = BLOCK / g.upsample_to_fine();
        self.assignment.iter().filter(|&&a| a == g).count() * f * f
    }

    pub fn is_partition(&self) -> bool {
        let grids: Vec<Vec<bool>> = Granularity::ALL.iter().map(|&g| self.grid(g)).collect();
        let (fh, fw) = self.dims(Granularity::Fine);
        (0..fh).all(|y| {
            (0..fw).all(|x| {
                Granularity::ALL
                    .iter()
                    .filter(|g| {
                        let s = g.upsample_to_fine();
                        grids[g.index()][(y / s) * (fw / s) + x / s]
                    })
                    .count()
                    == 1
            })
        })
    }
}

/// Sum of per-channel variances over each coarse block's fine cells.
pub fn block_variances(features: &FeatureGrid) -> Result<Vec<f64>> {
    let (d, h, w) = features.values().dims3();
    if h % BLOCK != 0 || w % BLOCK != 0 {
        return Err(Error::Shape(format!("fine grid {h}x{w} is not a whole number of {BLOCK}x{BLOCK} blocks")));
    }
    let (bh, bw) = (h / BLOCK, w / BLOCK);
    let v = features.values().data();
    let n = (BLOCK * BLOCK) as f64;
    let mut out = Vec::with_capacity(bh * bw);
    for by in 0..bh {
        for bx in 0..bw {
            let mut total = 0.0;
            for c in 0..d {
                let cells = (0..BLOCK).flat_map(|dy| (0..BLOCK).map(move |dx| (by * BLOCK + dy, bx * BLOCK + dx)));
                let (mut s, mut s2) = (0.0, 0.0);
                for (y, x) in cells {
                    let a = v[(c * h + y) * w + x];
                    s += a;
                    s2 += a * a;
                }
                let mean = s / n;
                total += (s2 / n - mean * mean).max(0.0);
            }
            out.push(total);
        }
    }
    Ok(out)
}

/// Routes the flattest blocks to the coarse grid and the busiest to the
/// fine grid, in the requested proportions.
pub fn allocate_masks(features: &FeatureGrid, ratios: Ratios) -> Result<RoutingMask> {
    ratios.validate()?;
    let var = block_variances(features)?;
    let (bh, bw) = (features.height() / BLOCK, features.width() / BLOCK);
    let n = var.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| var[a].total_cmp(&var[b]).then(a.cmp(&b)));
    let n_c = ((ratios.coarse * n as f64 + 1e-9).floor() as usize).min(n);
    let n_cm = (((ratios.coarse + ratios.medium) * n as f64 + 1e-9).floor() as usize).clamp(n_c, n);
    let n_m = n_cm - n_c;
    let mut assignment = vec![Granularity::Fine; n];
    for (rank, &b) in order.iter().enumerate() {
        if rank < n_c {
            assignment[b] = Granularity::Coarse;
        } else if rank < n_c + n_m {
            assignment[b] = Granularity::Medium;
        }
    }
    RoutingMask::new(bh, bw, assignment)
}

/// One ternary symbol per coarse block, adaptive order-0 coded.
pub fn pack_masks(m: &RoutingMask) -> Result<Vec<u8>> {
    let symbols = m.assignment.iter().map(|g| g.index() as u32).collect();
    let grid = IndexGrid::new(Granularity::Coarse, m.blocks_h, m.blocks_w, symbols)?;
    Ok(code_indices_context(&grid, 3, 0)?.bytes)
}

pub fn unpack_masks(bytes: &[u8], blocks_h: usize, blocks_w: usize) -> Result<RoutingMask> {
    let grid = decode_indices_context(bytes, 3, 0, Granularity::Coarse, blocks_h, blocks_w)?;
    let assignment = grid.indices().iter().map(|&s| Granularity::ALL[s as usize]).collect();
    RoutingMask::new(blocks_h, blocks_w, assignment)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContainerHeader {
    pub height: u32,
    pub width: u32,
    pub padded_height: u32,
    pub padded_width: u32,
    pub k: u32,
    pub d: u32,
    pub hyper_channels: u16,
    pub flags: u16,
}

impl ContainerHeader {
    pub fn blocks(&self) -> (usize, usize) {
        let s = Granularity::Coarse.stride() as u32;
        ((self.padded_height / s) as usize, (self.padded_width / s) as usize)
    }

    fn check(&self) -> Result<()> {
        let s = Granularity::Coarse.stride() as u32;
        let bad = |msg: String| Err(Error::InconsistentDims(msg));
        if self.height == 0 || self.width == 0 {
            return bad(format!("empty image {}x{}", self.height, self.width));
        }
        for (orig, padded) in [(self.height, self.padded_height), (self.width, self.padded_width)] {
            if padded % s != 0 || padded < orig || padded - orig >= s {
                return bad(format!("padded side {padded} does not match side {orig}"));
            }
        }
        if self.k < 2 || self.k > 1 << 16 || self.d == 0 || self.hyper_channels == 0 {
            return bad(format!("K={}, D={}, C={}", self.k, self.d, self.hyper_channels));
        }
        Ok(())
    }
}

/// Streams of one granularity. Empty streams have a zero count.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GranularityStreams {
    pub z_count: u32,
    pub z: Vec<u8>,
    pub y_count: u32,
    pub y: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub header: ContainerHeader,
    pub masks: Vec<u8>,
    pub streams: [GranularityStreams; 3],
}

/// Named byte range of a serialized container.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub size: usize,
}

fn fixed_header_len() -> usize {
    4 + 2 + 2 + 6 * 4 + 2 + 1 + 1
}

impl Container {
    fn write(&self, layout: &mut Vec<Segment>) -> Vec<u8> {
        let mut w = Writer::new();
        let mut mark = |w: &Writer, name: &str, start: usize| {
            layout.push(Segment {
                name: name.to_string(),
                offset: start,
                size: w.len() - start,
            })
        };
        let h = &self.header;
        w.bytes(&MAGIC);
        w.u16(VERSION);
        w.u16(h.flags);
        for v in [h.height, h.width, h.padded_height, h.padded_width, h.k, h.d] {
            w.u32(v);
        }
        w.u16(h.hyper_channels);
        w.u8(HYPER_STRIDE as u8);
        w.u8(Z_MAX as u8);
        mark(&w, "header", 0);
        let start = w.len();
        w.u32(self.masks.len() as u32);
        w.bytes(&self.masks);
        mark(&w, "masks", start);
        for g in Granularity::ALL {
            let s = &self.streams[g.index()];
            let start = w.len();
            w.u32(s.z_count);
            w.u32(s.z.len() as u32);
            w.bytes(&s.z);
            mark(&w, &format!("z.{}", g.name()), start);
            let start = w.len();
            w.u32(s.y_count);
            w.u32(s.y.len() as u32);
            w.bytes(&s.y);
            mark(&w, &format!("y.{}", g.name()), start);
        }
        let start = w.len();
        let crc = crc32fast::hash(w.as_slice());
        w.u32(crc);
        mark(&w, "crc32", start);
        w.into_bytes()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.write(&mut Vec::new())
    }

    /// Segment offsets and sizes of the serialized form.
    pub fn layout(&self) -> Vec<Segment> {
        let mut layout = Vec::new();
        self.write(&mut layout);
        layout
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.array4()?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        let flags = r.u16()?;
        let mut dims = [0u32; 6];
        for v in &mut dims {
            *v = r.u32()?;
        }
        let hyper_channels = r.u16()?;
        let stride = r.u8()?;
        let z_max = r.u8()?;
        debug_assert_eq!(r.position(), fixed_header_len());
        let mask_len = r.u32()? as usize;
        let masks = r.take(mask_len)?.to_vec();
        let mut streams: [GranularityStreams; 3] = Default::default();
        for s in &mut streams {
            s.z_count = r.u32()?;
            let n = r.u32()? as usize;
            s.z = r.take(n)?.to_vec();
            s.y_count = r.u32()?;
            let n = r.u32()? as usize;
            s.y = r.take(n)?.to_vec();
        }
        let body = r.position();
        let stored = r.u32()?;
        if r.remaining() != 0 {
            return Err(Error::CorruptStream(format!("{} bytes after the checksum", r.remaining())));
        }
        let computed = crc32fast::hash(&bytes[..body]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        if stride as usize != HYPER_STRIDE || z_max as i32 != Z_MAX {
            return Err(Error::InconsistentDims(format!(
                "hyper stride {stride} / z_max {z_max} differ from this build's {HYPER_STRIDE} / {Z_MAX}"
            )));
        }
        let [height, width, padded_height, padded_width, k, d] = dims;
        let header = ContainerHeader {
            height,
            width,
            padded_height,
            padded_width,
            k,
            d,
            hyper_channels,
            flags,
        };
        header.check()?;
        Ok(Self { header, masks, streams })
    }

    pub fn byte_len(&self) -> usize {
        fixed_header_len()
            + 4
            + self.masks.len()
            + self.streams.iter().map(|s| 16 + s.z.len() + s.y.len()).sum::<usize>()
            + 4
    }

    /// `8 · bytes / (H · W)` on the original image dims.
    pub fn bpp(&self) -> f64 {
        bpp(self.byte_len(), self.header.height as usize, self.header.width as usize)
    }
}

pub fn bpp(bytes: usize, height: usize, width: usize) -> f64 {
    8.0 * bytes as f64 / (height * width) as f64
}
