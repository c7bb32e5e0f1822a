//! End-to-end image coding with the toy multi-granularity autoencoder and
//! its three-stage training schedule.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::bitstream::{
    allocate_masks, pack_masks, unpack_masks, Container, ContainerHeader, GranularityStreams, Ratios, RoutingMask,
    DEFAULT_RATIOS, TRAINING_RATIOS,
};
use crate::codebook::{dequantize, quantize, Codebook, FeatureGrid, Granularity, IndexGrid, COMMITMENT_BETA};
use crate::context::{code_indices_hyper, decode_indices_hyper, hyper_quantized_bits};
use crate::error::{Error, Result};
use crate::hyperprior::{
    analysis_on_tape, decode_z, encode_z, hyper_analysis, hyper_synthesis, latent_dims, quantize_infer,
    synthesis_on_tape, uniform_noise, z_tables, DivergenceDetector, HyperConfig, HyperLatent, HyperParams,
    HYPER_STRIDE, PRIOR_LR_SCALE,
};
use crate::params::{init_conv, Adam, ParamSet, ParamVars};
use crate::probability::categorical_isotropic;
use crate::tensor::{self, Tensor};

/// Image sides are padded to a multiple of the coarsest stride.
pub const PAD_MULTIPLE: usize = 16;

/// PSNR reported for a lossless reconstruction.
pub const PSNR_CAP: f64 = 99.0;

pub const TRAIN_CSV_VERSION_LINE: &str = "# hvqc-train-csv v1";
pub const REPORT_CSV_VERSION_LINE: &str = "# hvqc-report-csv v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub k: usize,
    pub d: usize,
    /// Channel width of the toy encoder and decoder.
    pub hidden: usize,
    pub hyper: HyperConfig,
}

impl ModelConfig {
    pub fn new(k: usize, d: usize) -> Self {
        Self {
            k,
            d,
            hidden: 16,
            hyper: HyperConfig::new(d),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(1024, 4)
    }
}

/// Rate-distortion weights. Rates enter the loss in bits per pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdWeights {
    pub lambda_y: [f64; 3],
    pub lambda_z: [f64; 3],
    pub lambda_vq: f64,
}

impl RdWeights {
    pub fn uniform(lambda: f64) -> Self {
        Self {
            lambda_y: [lambda; 3],
            lambda_z: [lambda; 3],
            lambda_vq: 1.0,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            lambda_y: self.lambda_y.map(|l| l * factor),
            lambda_z: self.lambda_z.map(|l| l * factor),
            lambda_vq: self.lambda_vq,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.lambda_y.iter().chain(&self.lambda_z).chain([&self.lambda_vq]);
        if all.clone().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::InvalidParam("RD weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

impl Default for RdWeights {
    fn default() -> Self {
        Self::uniform(1.5e-3)
    }
}

/// Encoder and decoder convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCoderParams {
    params: ParamSet,
}

impl ToyCoderParams {
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (h, d) = (config.hidden, config.d);
        let mut p = ParamSet::new();
        init_conv(&mut p, "enc1", h, 3, 3, rng);
        init_conv(&mut p, "enc2", h, h, 3, rng);
        init_conv(&mut p, "enc3", h, h, 3, rng);
        init_conv(&mut p, "enc4", h, h, 3, rng);
        init_conv(&mut p, "head_c", d, h, 1, rng);
        init_conv(&mut p, "head_m", d, h, 1, rng);
        init_conv(&mut p, "head_f", d, h, 1, rng);
        init_conv(&mut p, "dec1", h, d, 3, rng);
        init_conv(&mut p, "dec2", h, h, 3, rng);
        init_conv(&mut p, "dec3", 3, h, 3, rng);
        let w = p.get_mut("dec3.w").unwrap();
        *w = w.map(|v| 0.1 * v);
        p.insert("dec3.b", Tensor::full(&[3], 0.5));
        Self { params: p }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }
}

/// Everything both ends of the channel share.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub coder: ToyCoderParams,
    pub codebook: Codebook,
    pub hyper: [HyperParams; 3],
}

fn hyper_prefix(g: Granularity) -> String {
    format!("hyper.{}.", g.name())
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coder = ToyCoderParams::init(&config, &mut rng);
        let codebook = Codebook::random_normal(config.k, config.d, 1.0, rng.gen())?;
        let hyper = Granularity::ALL.map(|_| HyperParams::init(config.hyper, rng.gen()));
        let mut m = Self {
            config,
            coder,
            codebook,
            hyper,
        };
        m.coder.params.round_to_f32();
        Ok(m)
    }

    /// Flat parameter set: coder layers, `codebook`, `hyper.<g>.*`.
    pub fn to_params(&self) -> ParamSet {
        let mut p = self.coder.params.clone();
        p.insert("codebook", self.codebook.to_tensor());
        for g in Granularity::ALL {
            p.merge(&hyper_prefix(g), self.hyper[g.index()].params());
        }
        p
    }

    pub fn from_params(params: &ParamSet) -> Result<Self> {
        let codebook = Codebook::from_tensor(params.get("codebook")?)?;
        let hyper = [
            HyperParams::from_params(params.subset(&hyper_prefix(Granularity::Coarse)))?,
            HyperParams::from_params(params.subset(&hyper_prefix(Granularity::Medium)))?,
            HyperParams::from_params(params.subset(&hyper_prefix(Granularity::Fine)))?,
        ];
        let enc1 = params.get("enc1.w")?.shape().to_vec();
        let config = ModelConfig {
            k: codebook.k(),
            d: codebook.d(),
            hidden: enc1[0],
            hyper: hyper[0].config(),
        };
        if hyper.iter().any(|h| h.config().d != config.d) {
            return Err(Error::ModelMismatch("hyperprior depth differs from codebook depth".into()));
        }
        let mut coder = ParamSet::new();
        for (name, t) in ToyCoderParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0)).params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::ModelMismatch(format!("{name}: expected {:?}, found {:?}", t.shape(), got.shape())));
            }
            coder.insert(name, got.clone());
        }
        if !coder.is_finite() {
            return Err(Error::InvalidParam("non-finite coder parameter".into()));
        }
        Ok(Self {
            config,
            coder: ToyCoderParams { params: coder },
            codebook,
            hyper,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_params().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_params(&ParamSet::from_bytes(bytes)?)
    }

    /// Network weights without the codebook, which is stored on its own.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut p = self.coder.params.clone();
        for g in Granularity::ALL {
            p.merge(&hyper_prefix(g), self.hyper[g.index()].params());
        }
        p.to_bytes()
    }

    pub fn from_checkpoint(checkpoint: &[u8], codebook: &Codebook) -> Result<Self> {
        let mut p = ParamSet::from_bytes(checkpoint)?;
        if p.get("codebook").is_ok() {
            return Err(Error::InvalidParam("checkpoint already carries a codebook".into()));
        }
        p.insert("codebook", codebook.to_tensor());
        Self::from_params(&p)
    }
}

/// Reflect-pads a `[3, H, W]` image up to multiples of [`PAD_MULTIPLE`].
pub fn pad_image(x: &Tensor) -> Tensor {
    let (_, h, w) = x.dims3();
    tensor::reflect_pad(x, h.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE, w.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE)
}

fn check_image(x: &Tensor) -> Result<()> {
    if x.shape().len() != 3 || x.shape()[0] != 3 || x.shape()[1] == 0 || x.shape()[2] == 0 {
        return Err(Error::Shape(format!("expected a [3, H, W] image, got {:?}", x.shape())));
    }
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidParam("image values must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Encoder on a tape: `[coarse, medium, fine]` feature maps.
pub fn encoder_on_tape(tape: &mut Tape, pv: &ParamVars, x: Var) -> [Var; 3] {
    let centre = Tensor::full(tape.value(x).shape(), -0.5);
    let x = tape.add_const(x, &centre);
    let conv = |tape: &mut Tape, x, name: &str, stride, pad| {
        tape.conv2d(x, pv.var(&format!("{name}.w")), pv.var(&format!("{name}.b")), stride, pad)
    };
    let h1 = conv(tape, x, "enc1", 2, 1);
    let h1 = tape.relu(h1);
    let h2 = conv(tape, h1, "enc2", 2, 1);
    let h2 = tape.relu(h2);
    let y_f = conv(tape, h2, "head_f", 1, 0);
    let h3 = conv(tape, h2, "enc3", 2, 1);
    let h3 = tape.relu(h3);
    let y_m = conv(tape, h3, "head_m", 1, 0);
    let h4 = conv(tape, h3, "enc4", 2, 1);
    let h4 = tape.relu(h4);
    let y_c = conv(tape, h4, "head_c", 1, 0);
    [y_c, y_m, y_f]
}

/// Decoder on a tape: fused fine-resolution map to a `[3, 4h, 4w]` image.
pub fn decoder_on_tape(tape: &mut Tape, pv: &ParamVars, fused: Var) -> Var {
    let conv = |tape: &mut Tape, x, name: &str| tape.conv2d(x, pv.var(&format!("{name}.w")), pv.var(&format!("{name}.b")), 1, 1);
    let x = conv(tape, fused, "dec1");
    let x = tape.relu(x);
    let x = tape.upsample(x, 2);
    let x = conv(tape, x, "dec2");
    let x = tape.relu(x);
    let x = tape.upsample(x, 2);
    conv(tape, x, "dec3")
}

fn mask_tensor(m: &RoutingMask, g: Granularity) -> Tensor {
    let (h, w) = m.dims(g);
    Tensor::from_vec(&[1, h, w], m.grid(g).iter().map(|&b| b as u8 as f64).collect()).unwrap()
}

/// Mask-gated fusion on a tape.
pub fn fuse_on_tape(tape: &mut Tape, embeddings: [Var; 3], m: &RoutingMask) -> Var {
    let mut acc: Option<Var> = None;
    for g in Granularity::ALL {
        let e = embeddings[g.index()];
        let gated = tape.mul_const(e, mask_tensor(m, g));
        let up = if g.upsample_to_fine() > 1 {
            tape.upsample(gated, g.upsample_to_fine())
        } else {
            gated
        };
        acc = Some(match acc {
            None => up,
            Some(a) => tape.add(a, up),
        });
    }
    acc.unwrap()
}

/// `Σ_g up(m_g ⊙ e_g)` at fine resolution.
pub fn fuse(embeddings: &[FeatureGrid; 3], m: &RoutingMask) -> Result<FeatureGrid> {
    for g in Granularity::ALL {
        let e = &embeddings[g.index()];
        if (e.height(), e.width()) != m.dims(g) {
            return Err(Error::Shape(format!(
                "{g} embedding is {}x{}, mask expects {:?}",
                e.height(),
                e.width(),
                m.dims(g)
            )));
        }
    }
    let mut tape = Tape::new();
    let vars = embeddings.each_ref().map(|e| tape.leaf(e.values().clone()));
    let out = fuse_on_tape(&mut tape, vars, m);
    FeatureGrid::new(Granularity::Fine, tape.value(out).clone())
}

/// Features of an image (padded internally).
pub fn analyze(model: &Model, x: &Tensor) -> Result<[FeatureGrid; 3]> {
    check_image(x)?;
    let mut tape = Tape::new();
    let pv = model.coder.params.to_tape(&mut tape);
    let xv = tape.leaf(pad_image(x));
    let ys = encoder_on_tape(&mut tape, &pv, xv);
    let [c, m, f] = ys.map(|y| tape.value(y).clone());
    Ok([
        FeatureGrid::new(Granularity::Coarse, c)?,
        FeatureGrid::new(Granularity::Medium, m)?,
        FeatureGrid::new(Granularity::Fine, f)?,
    ])
}

/// Decoder applied to a fused map, cropped to `h × w` and clamped to `[0, 1]`.
pub fn synthesize_image(model: &Model, fused: &FeatureGrid, h: usize, w: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = model.coder.params.to_tape(&mut tape);
    let f = tape.leaf(fused.values().clone());
    let out = decoder_on_tape(&mut tape, &pv, f);
    let (_, ho, wo) = tape.value(out).dims3();
    if ho < h || wo < w {
        return Err(Error::Shape(format!("decoder produced {ho}x{wo} for a {h}x{w} image")));
    }
    Ok(tensor::crop(tape.value(out), h, w).map(|v| v.clamp(0.0, 1.0)))
}

/// Hyper cells whose footprint touches an active index cell.
pub fn active_hyper_cells(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let (hz, wz) = latent_dims(h, w);
    let mut out = vec![false; hz * wz];
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                out[(y / HYPER_STRIDE) * wz + x / HYPER_STRIDE] = true;
            }
        }
    }
    out
}

fn zero_inactive(z: &mut HyperLatent, active: &[bool]) {
    let (c, h, w) = z.values().dims3();
    let mut t = z.values().clone();
    for ch in 0..c {
        for (loc, &a) in active.iter().enumerate() {
            if !a {
                t.data_mut()[ch * h * w + loc] = 0.0;
            }
        }
    }
    *z = HyperLatent::new(t);
}

/// Runs `f` for each granularity, on up to three threads.
fn per_granularity<T: Send>(threads: usize, f: impl Fn(Granularity) -> T + Sync) -> [T; 3] {
    if threads <= 1 {
        return Granularity::ALL.map(&f);
    }
    std::thread::scope(|s| {
        let handles = Granularity::ALL.map(|g| {
            let f = &f;
            s.spawn(move || f(g))
        });
        handles.map(|h| h.join().expect("granularity worker panicked"))
    })
}

#[derive(Clone, Copy, Debug)]
pub struct CodecOptions {
    pub ratios: Ratios,
    pub threads: usize,
}

impl Default for CodecOptions {
    fn default() -> Self {
        Self {
            ratios: DEFAULT_RATIOS,
            threads: 1,
        }
    }
}

/// Encoder output with the side information tests and reports need.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub container: Container,
    /// Transmitted indices; cells outside a granularity's mask are 0.
    pub indices: [IndexGrid; 3],
    pub mask: RoutingMask,
    /// Hyper-latent elements clamped to `±Z_MAX`.
    pub saturated: usize,
    /// `Σ −log₂(freq/2¹⁶)` of the coded indices per granularity.
    pub model_bits: [f64; 3],
}

struct GranularityEncoding {
    streams: GranularityStreams,
    indices: IndexGrid,
    saturated: usize,
    model_bits: f64,
}

fn encode_granularity(model: &Model, y: &FeatureGrid, mask: &[bool], tables_g: Granularity) -> Result<GranularityEncoding> {
    let hp = &model.hyper[tables_g.index()];
    let idx = quantize(y, &model.codebook)?;
    let (h, w) = (idx.height(), idx.width());
    let kept = idx
        .indices()
        .iter()
        .zip(mask)
        .map(|(&i, &m)| if m { i } else { 0 })
        .collect();
    let indices = IndexGrid::new(tables_g, h, w, kept)?;
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(GranularityEncoding {
            streams: GranularityStreams::default(),
            indices,
            saturated: 0,
            model_bits: 0.0,
        });
    }
    let active = active_hyper_cells(mask, h, w);
    let (mut z_hat, saturated) = quantize_infer(&hyper_analysis(y, hp)?);
    zero_inactive(&mut z_hat, &active);
    let (z, z_count) = encode_z(&z_hat, &z_tables(hp)?, &active)?;
    let cat = categorical_isotropic(&model.codebook, &hyper_synthesis(&z_hat, hp, h, w)?)?;
    let coded = code_indices_hyper(&indices, &cat, Some(mask))?;
    let model_bits = hyper_quantized_bits(&indices, &cat, Some(mask))?;
    debug_assert_eq!(coded.symbols, count);
    Ok(GranularityEncoding {
        streams: GranularityStreams {
            z_count: z_count as u32,
            z,
            y_count: count as u32,
            y: coded.bytes,
        },
        indices,
        saturated,
        model_bits,
    })
}

pub fn encode_image(x: &Tensor, model: &Model, opts: &CodecOptions) -> Result<Encoded> {
    let ys = analyze(model, x)?;
    let mask = allocate_masks(&ys[Granularity::Fine.index()], opts.ratios)?;
    let grids = Granularity::ALL.map(|g| mask.grid(g));
    let parts = per_granularity(opts.threads, |g| encode_granularity(model, &ys[g.index()], &grids[g.index()], g));
    let [c, m, f] = parts;
    let parts = [c?, m?, f?];
    let (_, h, w) = x.dims3();
    let (_, hp, wp) = pad_image(x).dims3();
    let container = Container {
        header: ContainerHeader {
            height: h as u32,
            width: w as u32,
            padded_height: hp as u32,
            padded_width: wp as u32,
            k: model.config.k as u32,
            d: model.config.d as u32,
            hyper_channels: model.config.hyper.channels as u16,
            flags: 0,
        },
        masks: pack_masks(&mask)?,
        streams: parts.each_ref().map(|p| p.streams.clone()),
    };
    Ok(Encoded {
        container,
        saturated: parts.iter().map(|p| p.saturated).sum(),
        model_bits: parts.each_ref().map(|p| p.model_bits),
        indices: parts.map(|p| p.indices),
        mask,
    })
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub image: Tensor,
    pub indices: [IndexGrid; 3],
    pub mask: RoutingMask,
}

fn decode_granularity(model: &Model, s: &GranularityStreams, mask: &[bool], g: Granularity, h: usize, w: usize) -> Result<IndexGrid> {
    let count = mask.iter().filter(|&&m| m).count();
    if s.y_count as usize != count {
        return Err(Error::InconsistentDims(format!("{g}: {} coded indices for {count} active cells", s.y_count)));
    }
    if count == 0 {
        if s.z_count != 0 || !s.z.is_empty() || !s.y.is_empty() {
            return Err(Error::InconsistentDims(format!("{g}: streams present for an empty mask")));
        }
        return IndexGrid::new(g, h, w, vec![0; h * w]);
    }
    let hp = &model.hyper[g.index()];
    let active = active_hyper_cells(mask, h, w);
    let n_active = active.iter().filter(|&&a| a).count();
    if s.z_count as usize != n_active * hp.config().channels {
        return Err(Error::InconsistentDims(format!("{g}: {} hyper symbols for {n_active} active cells", s.z_count)));
    }
    let (hz, wz) = latent_dims(h, w);
    let z_hat = decode_z(&s.z, &z_tables(hp)?, &active, hz, wz).map_err(|e| stream_error(g, "z", e))?;
    let cat = categorical_isotropic(&model.codebook, &hyper_synthesis(&z_hat, hp, h, w)?)?;
    decode_indices_hyper(&s.y, &cat, Some(mask), g).map_err(|e| stream_error(g, "y", e))
}

fn stream_error(g: Granularity, which: &str, e: Error) -> Error {
    match e {
        Error::Truncated { symbols, expected } => {
            Error::CorruptStream(format!("{which}.{g} stream truncated after {symbols} of {expected} symbols"))
        }
        Error::CorruptStream(msg) => Error::CorruptStream(format!("{which}.{g} stream: {msg}")),
        other => other,
    }
}

pub fn decode_image(container: &Container, model: &Model, threads: usize) -> Result<Decoded> {
    let hd = &container.header;
    if hd.k as usize != model.config.k || hd.d as usize != model.config.d || hd.hyper_channels as usize != model.config.hyper.channels {
        return Err(Error::ModelMismatch(format!(
            "container expects K={}, D={}, C={}; model has K={}, D={}, C={}",
            hd.k, hd.d, hd.hyper_channels, model.config.k, model.config.d, model.config.hyper.channels
        )));
    }
    let (bh, bw) = hd.blocks();
    let mask = unpack_masks(&container.masks, bh, bw).map_err(|e| stream_error(Granularity::Coarse, "mask", e))?;
    let grids = Granularity::ALL.map(|g| mask.grid(g));
    let decoded = per_granularity(threads, |g| {
        let (h, w) = mask.dims(g);
        decode_granularity(model, &container.streams[g.index()], &grids[g.index()], g, h, w)
    });
    let [c, m, f] = decoded;
    let indices = [c?, m?, f?];
    let embeddings = [
        dequantize(&indices[0], &model.codebook)?,
        dequantize(&indices[1], &model.codebook)?,
        dequantize(&indices[2], &model.codebook)?,
    ];
    let fused = fuse(&embeddings, &mask)?;
    let image = synthesize_image(model, &fused, hd.height as usize, hd.width as usize)?;
    Ok(Decoded { image, indices, mask })
}

pub fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// PSNR in dB for signals in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> f64 {
    let m = mse(a, b);
    if m == 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * m.log10()).min(PSNR_CAP)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentRate {
    pub name: String,
    pub bytes: usize,
    pub bpp: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateReport {
    pub height: usize,
    pub width: usize,
    pub bytes: usize,
    pub bpp: f64,
    pub segments: Vec<SegmentRate>,
    pub psnr: f64,
    pub symbols: [u32; 3],
}

impl RateReport {
    pub fn segment(&self, name: &str) -> Option<&SegmentRate> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_CSV_VERSION_LINE}\nsegment,bytes,bpp\n");
        for s in &self.segments {
            out.push_str(&format!("{},{},{:.6}\n", s.name, s.bytes, s.bpp));
        }
        out.push_str(&format!("total,{},{:.6}\n", self.bytes, self.bpp));
        out
    }
}

pub fn rate_report(container: &Container, x: &Tensor, x_hat: &Tensor) -> Result<RateReport> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.shape(), x_hat.shape())));
    }
    let (h, w) = (container.header.height as usize, container.header.width as usize);
    let layout = container.layout();
    let segments = layout
        .iter()
        .map(|s| SegmentRate {
            name: s.name.clone(),
            bytes: s.size,
            bpp: crate::bitstream::bpp(s.size, h, w),
        })
        .collect();
    let bytes = layout.iter().map(|s| s.size).sum();
    Ok(RateReport {
        height: h,
        width: w,
        bytes,
        bpp: crate::bitstream::bpp(bytes, h, w),
        segments,
        psnr: psnr(x, x_hat),
        symbols: container.streams.each_ref().map(|s| s.y_count),
    })
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps_a: usize,
    pub steps_b: usize,
    pub steps_c: usize,
    pub lr_a: f64,
    pub lr_b: f64,
    pub lr_c: f64,
    pub batch: usize,
    pub seed: u64,
    pub rd: RdWeights,
    /// Ratios while training reconstruction.
    pub train_ratios: Ratios,
    /// Ratios for rate training and inference.
    pub ratios: Ratios,
    /// Stage A replaces codes unused over this many steps (0 disables).
    pub dead_code_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            steps_a: 400,
            steps_b: 300,
            steps_c: 200,
            lr_a: 3e-3,
            lr_b: 3e-3,
            lr_c: 1e-3,
            batch: 4,
            seed: 0,
            rd: RdWeights::default(),
            train_ratios: TRAINING_RATIOS,
            ratios: DEFAULT_RATIOS,
            dead_code_interval: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    A,
    B,
    C,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::A => "A",
            Stage::B => "B",
            Stage::C => "C",
        }
    }

    fn distortion(self) -> bool {
        self != Stage::B
    }

    fn rate(self) -> bool {
        self != Stage::A
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub stage: Stage,
    pub step: usize,
    pub loss: f64,
    pub mse: f64,
    /// Model rate estimate (ŷ + ẑ) in bits per pixel; 0 in Stage A.
    pub bpp: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{TRAIN_CSV_VERSION_LINE}\nstage,step,loss,mse,bpp\n");
        for p in &self.curve {
            out.push_str(&format!("{},{},{:.8},{:.8},{:.6}\n", p.stage.name(), p.step, p.loss, p.mse, p.bpp));
        }
        out
    }

    pub fn stage(&self, s: Stage) -> impl Iterator<Item = &CurvePoint> {
        self.curve.iter().filter(move |p| p.stage == s)
    }
}

struct StepOutput {
    loss: Var,
    mse: f64,
    rate_bits: f64,
    /// Fine, medium and coarse indices chosen at this step.
    used: Vec<u32>,
    features: Vec<f64>,
}

/// Builds one image's objective for `stage`.
fn step_loss(tape: &mut Tape, pv: &ParamVars, x: &Tensor, stage: Stage, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<StepOutput> {
    let d = cfg.model.d;
    let xv = tape.leaf(x.clone());
    let ys = encoder_on_tape(tape, pv, xv);
    let cb_var = pv.var("codebook");
    let cb = Codebook::from_tensor(tape.value(cb_var))?;
    let grids: Vec<FeatureGrid> = Granularity::ALL
        .iter()
        .map(|&g| FeatureGrid::new(g, tape.value(ys[g.index()]).clone()))
        .collect::<Result<_>>()?;
    let idx: Vec<IndexGrid> = grids.iter().map(|f| quantize(f, &cb)).collect::<Result<_>>()?;
    let ratios = if stage == Stage::A { cfg.train_ratios } else { cfg.ratios };
    let mask = allocate_masks(&grids[Granularity::Fine.index()], ratios)?;
    let (_, h, w) = x.dims3();
    let pixels = (h * w) as f64;
    let mut terms = Vec::new();
    let mut mse_value = 0.0;
    let mut quantized = Vec::new();
    for g in Granularity::ALL {
        let (gh, gw) = (idx[g.index()].height(), idx[g.index()].width());
        let e = tape.gather(cb_var, idx[g.index()].indices(), gh, gw);
        let ev = tape.value(e).clone();
        let q = tape.straight_through(ys[g.index()], ev);
        if stage.distortion() {
            let c = tape.commitment(ys[g.index()], e, COMMITMENT_BETA);
            terms.push((c, cfg.rd.lambda_vq / (d * gh * gw) as f64));
        }
        quantized.push(q);
    }
    if stage.distortion() {
        let fused = fuse_on_tape(tape, [quantized[0], quantized[1], quantized[2]], &mask);
        let x_hat = decoder_on_tape(tape, pv, fused);
        let m = tape.mse(x_hat, x);
        mse_value = tape.value(m).item();
        terms.push((m, 1.0));
    }
    let mut rate_bits = 0.0;
    if stage.rate() {
        for g in Granularity::ALL {
            let gi = g.index();
            let m = mask.grid(g);
            if !m.iter().any(|&b| b) {
                continue;
            }
            let prefix = hyper_prefix(g);
            let (gh, gw) = (idx[gi].height(), idx[gi].width());
            let y_in = if stage == Stage::B {
                tape.leaf(grids[gi].values().clone())
            } else {
                ys[gi]
            };
            let z = analysis_on_tape(tape, pv, &prefix, y_in);
            let (hz, wz) = latent_dims(gh, gw);
            let noise = uniform_noise(&[cfg.model.hyper.channels, hz, wz], rng);
            let z = tape.add_const(z, &noise);
            let active = active_hyper_cells(&m, gh, gw);
            let act_t = Tensor::from_vec(&[1, hz, wz], active.iter().map(|&a| a as u8 as f64).collect())?;
            let z = tape.mul_const(z, act_t);
            let (mu, sigma) = synthesis_on_tape(tape, pv, &prefix, z, gh, gw);
            let weights: Vec<f64> = m.iter().map(|&b| b as u8 as f64).collect();
            let target = (stage == Stage::C).then_some(quantized[gi]);
            let ry = tape.index_rate(cb_var, mu, sigma, idx[gi].indices(), Some(&weights), target);
            let means = pv.var(&format!("{prefix}prior.mean"));
            let scales = pv.var(&format!("{prefix}prior.log_scale"));
            let rz = tape.z_rate(z, means, scales, Some(&active));
            rate_bits += tape.value(ry).item() + tape.value(rz).item();
            terms.push((ry, cfg.rd.lambda_y[gi] / pixels));
            terms.push((rz, cfg.rd.lambda_z[gi] / pixels));
        }
    }
    let loss = tape.weighted_sum(&terms);
    let used = idx.iter().flat_map(|i| i.indices().iter().copied()).collect();
    Ok(StepOutput {
        loss,
        mse: mse_value,
        rate_bits: rate_bits / pixels,
        used,
        features: grids.iter().flat_map(|f| transpose_features(f)).collect(),
    })
}

/// `[D, H, W]` to location-major rows of length `D`.
fn transpose_features(f: &FeatureGrid) -> Vec<f64> {
    let (d, h, w) = f.values().dims3();
    let n = h * w;
    let mut out = vec![0.0; d * n];
    for c in 0..d {
        for loc in 0..n {
            out[loc * d + c] = f.values().data()[c * n + loc];
        }
    }
    out
}

fn trainable(stage: Stage, name: &str) -> bool {
    let hyper = name.starts_with("hyper.");
    match stage {
        Stage::A => !hyper,
        Stage::B => hyper,
        Stage::C => true,
    }
}

/// Runs `steps` optimizer steps of `stage`, appending to `report`.
pub fn run_stage(model: &mut Model, dataset: &[Tensor], cfg: &TrainConfig, stage: Stage, report: &mut TrainReport) -> Result<()> {
    let (steps, lr) = match stage {
        Stage::A => (cfg.steps_a, cfg.lr_a),
        Stage::B => (cfg.steps_b, cfg.lr_b),
        Stage::C => (cfg.steps_c, cfg.lr_c),
    };
    if steps == 0 {
        return Ok(());
    }
    if dataset.is_empty() {
        return Err(Error::InvalidParam("empty training set".into()));
    }
    cfg.rd.validate()?;
    let padded: Vec<Tensor> = dataset
        .iter()
        .map(|x| {
            check_image(x)?;
            Ok(pad_image(x))
        })
        .collect::<Result<_>>()?;
    let mut params = model.to_params();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x5eed_0000 + stage as u64));
    let mut opt = Adam::new(lr).with_group("prior.", PRIOR_LR_SCALE);
    let mut detector = DivergenceDetector::default();
    let batch = cfg.batch.max(1);
    let k = cfg.model.k;
    let mut usage = vec![0usize; k];
    let mut recent_features: Vec<f64> = Vec::new();
    for step in 0..steps {
        let mut grads: Option<Vec<Tensor>> = None;
        let (mut loss, mut mse, mut bpp) = (0.0, 0.0, 0.0);
        for _ in 0..batch {
            let x = padded.choose(&mut rng).unwrap();
            let mut tape = Tape::new();
            let pv = params.to_tape(&mut tape);
            let out = step_loss(&mut tape, &pv, x, stage, cfg, &mut rng)?;
            loss += tape.value(out.loss).item() / batch as f64;
            mse += out.mse / batch as f64;
            bpp += out.rate_bits / batch as f64;
            for &i in &out.used {
                usage[i as usize] += 1;
            }
            recent_features = out.features;
            let g = pv.grads(&tape.backward(out.loss), &params);
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
            }
        }
        let grads: Vec<Tensor> = grads.unwrap().into_iter().map(|g| g.map(|v| v / batch as f64)).collect();
        detector.observe(step, loss)?;
        report.curve.push(CurvePoint {
            stage,
            step,
            loss,
            mse,
            bpp,
        });
        opt.step(&mut params, &grads, &|n| !trainable(stage, n));
        if stage == Stage::A && cfg.dead_code_interval > 0 && (step + 1) % cfg.dead_code_interval == 0 {
            restart_dead_codes(&mut params, &usage, &recent_features, cfg.model.d, &mut rng);
            usage.iter_mut().for_each(|u| *u = 0);
        }
    }
    params.round_to_f32();
    if !params.is_finite() {
        return Err(Error::Diverged {
            step: steps,
            loss: f64::NAN,
            initial: report.curve.first().map_or(f64::NAN, |p| p.loss),
        });
    }
    *model = Model::from_params(&params)?;
    Ok(())
}

/// Moves codes that went unused onto recently seen feature vectors.
fn restart_dead_codes(params: &mut ParamSet, usage: &[usize], features: &[f64], d: usize, rng: &mut impl Rng) {
    let n = features.len() / d;
    if n == 0 {
        return;
    }
    let cb = params.get_mut("codebook").expect("codebook");
    for (k, &u) in usage.iter().enumerate() {
        if u == 0 {
            let src = rng.gen_range(0..n);
            for c in 0..d {
                cb.data_mut()[k * d + c] = features[src * d + c] + rng.gen_range(-1e-2..1e-2);
            }
        }
    }
}

/// Seeds the codebook with feature vectors drawn from the untrained
/// encoder's outputs on the dataset.
pub fn init_codebook_from_data(model: &mut Model, dataset: &[Tensor], seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.config.d;
    let mut pool = Vec::new();
    for x in dataset.iter().take(64) {
        for f in analyze(model, x)? {
            pool.extend(transpose_features(&f));
        }
    }
    let n = pool.len() / d;
    if n == 0 {
        return Err(Error::InvalidParam("empty training set".into()));
    }
    let mut entries = Vec::with_capacity(model.config.k * d);
    for _ in 0..model.config.k {
        let src = rng.gen_range(0..n);
        for c in 0..d {
            entries.push((pool[src * d + c] + rng.gen_range(-1e-3..1e-3)) as f32);
        }
    }
    model.codebook = Codebook::new(model.config.k, d, entries)?;
    Ok(())
}

/// Full schedule: codebook seeding, Stage A, Stage B, Stage C.
pub fn train_stages(dataset: &[Tensor], cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    let mut model = Model::init(cfg.model, cfg.seed)?;
    init_codebook_from_data(&mut model, dataset, cfg.seed)?;
    let mut report = TrainReport::default();
    for stage in [Stage::A, Stage::B, Stage::C] {
        run_stage(&mut model, dataset, cfg, stage, &mut report)?;
    }
    Ok((model, report))
}

/// Held-out statistics from real containers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub bpp: f64,
    pub mse: f64,
    pub psnr: f64,
    /// Model cost of the coded indices, bits per index.
    pub y_bits_per_index: f64,
}

pub fn evaluate(model: &Model, images: &[Tensor], opts: &CodecOptions) -> Result<Evaluation> {
    let mut e = Evaluation::default();
    let (mut y_bits, mut symbols) = (0.0, 0.0);
    for x in images {
        let enc = encode_image(x, model, opts)?;
        let dec = decode_image(&enc.container, model, opts.threads)?;
        e.bpp += enc.container.bpp() / images.len() as f64;
        e.mse += mse(x, &dec.image) / images.len() as f64;
        e.psnr += psnr(x, &dec.image) / images.len() as f64;
        y_bits += enc.model_bits.iter().sum::<f64>();
        symbols += enc.container.streams.iter().map(|s| s.y_count as f64).sum::<f64>();
    }
    e.y_bits_per_index = if symbols > 0.0 { y_bits / symbols } else { 0.0 };
    Ok(e)
}

/// Objective `MSE + Σ_g λ·R` on held-out images, from real containers.
pub fn rd_objective(model: &Model, images: &[Tensor], rd: &RdWeights, opts: &CodecOptions) -> Result<f64> {
    let mut total = 0.0;
    for x in images {
        let enc = encode_image(x, model, opts)?;
        let dec = decode_image(&enc.container, model, opts.threads)?;
        let (_, h, w) = x.dims3();
        let mut rate = 0.0;
        for g in Granularity::ALL {
            let s = &enc.container.streams[g.index()];
            rate += rd.lambda_y[g.index()] * 8.0 * s.y.len() as f64 + rd.lambda_z[g.index()] * 8.0 * s.z.len() as f64;
        }
        total += (mse(x, &dec.image) + rate / (h * w) as f64) / images.len() as f64;
    }
    Ok(total)
}
