//! Hyper-analysis / hyper-synthesis networks, hyper-latent quantization,
//! the factorized rate model for `ẑ`, rate-only training and gradient
//! checking.
//!
//! Analysis: `conv(D→32, k3 s2) → ReLU → conv(32→C, k3 s2)`.
//! Synthesis: `up×2 → conv(C→32, k3) → ReLU → up×2 → conv(32→16, k3) → ReLU`
//! followed by 1×1 heads for `μ` (D channels) and raw `σ` (1 channel).
//! `σ = max(softplus(raw), σ_min)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::{LN_2, SQRT_2};

use crate::autodiff::{Tape, Var};
use crate::codebook::{quantize, Codebook, FeatureGrid, IndexGrid};
use crate::error::{Error, Result};
use crate::params::{init_conv, Adam, ParamSet, ParamVars};
use crate::probability::{GaussianField, P_FLOOR, SIGMA_MIN};
use crate::range_coder::{quantize_pmf, QuantizedCdf, RangeDecoder, RangeEncoder};
use crate::tensor::Tensor;

/// Largest magnitude of a quantized hyper-latent (`ẑ` fits in `i8`).
/// Learning-rate multiplier for the per-channel ẑ prior parameters.
pub const PRIOR_LR_SCALE: f64 = 10.0;

pub const Z_MAX: i32 = 127;

/// Spatial downsampling of the hyper-latent relative to its index grid.
pub const HYPER_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HyperConfig {
    pub d: usize,
    pub channels: usize,
    pub hidden: usize,
    pub synth_hidden: usize,
}

impl HyperConfig {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            channels: 8,
            hidden: 32,
            synth_hidden: 16,
        }
    }
}

/// Parameters of one hyperprior branch.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperParams {
    config: HyperConfig,
    params: ParamSet,
}

impl HyperParams {
    pub fn init(config: HyperConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let HyperConfig {
            d,
            channels,
            hidden,
            synth_hidden,
        } = config;
        let mut p = ParamSet::new();
        init_conv(&mut p, "ana1", hidden, d, 3, &mut rng);
        init_conv(&mut p, "ana2", channels, hidden, 3, &mut rng);
        init_conv(&mut p, "syn1", hidden, channels, 3, &mut rng);
        init_conv(&mut p, "syn2", synth_hidden, hidden, 3, &mut rng);
        init_conv(&mut p, "mu", d, synth_hidden, 1, &mut rng);
        init_conv(&mut p, "sigma", 1, synth_hidden, 1, &mut rng);
        // softplus(0.5413) = 1
        p.insert("sigma.b", Tensor::full(&[1], 0.5413));
        p.insert("prior.mean", Tensor::zeros(&[channels]));
        p.insert("prior.log_scale", Tensor::zeros(&[channels]));
        p.round_to_f32();
        Self { config, params: p }
    }

    /// Rebuilds a branch from stored tensors, deriving sizes from shapes.
    pub fn from_params(params: ParamSet) -> Result<Self> {
        let shape = |n: &str| params.get(n).map(|t| t.shape().to_vec());
        let ana1 = shape("ana1.w")?;
        let ana2 = shape("ana2.w")?;
        let syn2 = shape("syn2.w")?;
        let config = HyperConfig {
            d: ana1[1],
            hidden: ana1[0],
            channels: ana2[0],
            synth_hidden: syn2[0],
        };
        let expected = HyperParams::init(config, 0);
        for (name, t) in expected.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::ModelMismatch(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    t.shape(),
                    got.shape()
                )));
            }
        }
        if !params.is_finite() {
            return Err(Error::InvalidParam("non-finite hyperprior parameter".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> HyperConfig {
        self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn prior(&self) -> (&Tensor, &Tensor) {
        (
            self.params.get("prior.mean").expect("prior.mean"),
            self.params.get("prior.log_scale").expect("prior.log_scale"),
        )
    }
}

/// Hyper-latent `C × h × w`, continuous or integer-valued.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperLatent {
    values: Tensor,
}

impl HyperLatent {
    pub fn new(values: Tensor) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn is_integer(&self) -> bool {
        self.values.data().iter().all(|v| v.fract() == 0.0)
    }
}

/// Spatial dims after reflect-padding up to a multiple of the hyper stride.
pub fn padded_dims(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(HYPER_STRIDE) * HYPER_STRIDE, w.div_ceil(HYPER_STRIDE) * HYPER_STRIDE)
}

/// Hyper-latent grid dims for an `h × w` index grid.
pub fn latent_dims(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(HYPER_STRIDE), w.div_ceil(HYPER_STRIDE))
}

/// Analysis network on a tape; `y` is `[D, H, W]`.
pub fn analysis_on_tape(tape: &mut Tape, pv: &ParamVars, prefix: &str, y: Var) -> Var {
    let (_, h, w) = tape.value(y).dims3();
    let (hp, wp) = padded_dims(h, w);
    let p = |n: &str| pv.var(&format!("{prefix}{n}"));
    let x = tape.reflect_pad(y, hp, wp);
    let x = tape.conv2d(x, p("ana1.w"), p("ana1.b"), 2, 1);
    let x = tape.relu(x);
    tape.conv2d(x, p("ana2.w"), p("ana2.b"), 2, 1)
}

/// Synthesis network on a tape, returning `(μ [D,h,w], σ [1,h,w])`.
pub fn synthesis_on_tape(tape: &mut Tape, pv: &ParamVars, prefix: &str, z: Var, h: usize, w: usize) -> (Var, Var) {
    let p = |n: &str| pv.var(&format!("{prefix}{n}"));
    let x = tape.upsample(z, 2);
    let x = tape.conv2d(x, p("syn1.w"), p("syn1.b"), 1, 1);
    let x = tape.relu(x);
    let x = tape.upsample(x, 2);
    let x = tape.conv2d(x, p("syn2.w"), p("syn2.b"), 1, 1);
    let x = tape.relu(x);
    let x = tape.crop(x, h, w);
    let mu = tape.conv2d(x, p("mu.w"), p("mu.b"), 1, 0);
    let raw = tape.conv2d(x, p("sigma.w"), p("sigma.b"), 1, 0);
    let sigma = tape.softplus_floor(raw, SIGMA_MIN);
    (mu, sigma)
}

/// `z = H_a(y)`. Inputs whose sides are not multiples of the stride are
/// reflect-padded first.
pub fn hyper_analysis(y: &FeatureGrid, p: &HyperParams) -> Result<HyperLatent> {
    if y.depth() != p.config.d {
        return Err(Error::Dimension {
            expected: p.config.d,
            got: y.depth(),
        });
    }
    let mut tape = Tape::new();
    let pv = p.params.to_tape(&mut tape);
    let yv = tape.leaf(y.values().clone());
    let z = analysis_on_tape(&mut tape, &pv, "", yv);
    Ok(HyperLatent::new(tape.value(z).clone()))
}

/// Training-time quantization proxy: `z + u`, `u ~ U(−½, ½)` i.i.d.
pub fn quantize_train(z: &HyperLatent, rng: &mut impl Rng) -> HyperLatent {
    let noise = uniform_noise(z.values.shape(), rng);
    let mut values = z.values.clone();
    values.add_assign(&noise);
    HyperLatent::new(values)
}

/// Noise tensor for [`quantize_train`] on a tape.
pub fn uniform_noise(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap()
}

/// Rounds half away from zero and clamps to `±Z_MAX`. Returns the number
/// of elements that had to be clamped.
pub fn quantize_infer(z: &HyperLatent) -> (HyperLatent, usize) {
    let mut saturated = 0;
    let values = z.values.map(|v| {
        let r = v.round();
        if r.abs() > Z_MAX as f64 {
            r.signum() * Z_MAX as f64
        } else {
            r
        }
    });
    for (a, b) in z.values.data().iter().zip(values.data()) {
        if a.round() != *b {
            saturated += 1;
        }
    }
    (HyperLatent::new(values), saturated)
}

/// `(μ, σ) = H_s(ẑ)` at the resolution of an `h × w` index grid.
pub fn hyper_synthesis(z_hat: &HyperLatent, p: &HyperParams, h: usize, w: usize) -> Result<GaussianField> {
    if !z_hat.is_integer() {
        return Err(Error::InvalidParam("hyper-synthesis expects an integer-valued latent".into()));
    }
    synthesize(z_hat, p, h, w)
}

/// Synthesis without the integer check (training uses noisy latents).
pub fn synthesize(z: &HyperLatent, p: &HyperParams, h: usize, w: usize) -> Result<GaussianField> {
    if z.channels() != p.config.channels {
        return Err(Error::Shape(format!("latent has {} channels, model expects {}", z.channels(), p.config.channels)));
    }
    if latent_dims(h, w) != (z.height(), z.width()) {
        return Err(Error::Shape(format!(
            "latent {}x{} cannot produce a {}x{} grid",
            z.height(),
            z.width(),
            h,
            w
        )));
    }
    let mut tape = Tape::new();
    let pv = p.params.to_tape(&mut tape);
    let zv = tape.leaf(z.values.clone());
    let (mu, sigma) = synthesis_on_tape(&mut tape, &pv, "", zv, h, w);
    GaussianField::isotropic(tape.value(mu).clone(), tape.value(sigma).data().to_vec())
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

fn std_normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Mass of `N(mean, scale²)` on `[v − ½, v + ½]`, computed on the tail that
/// keeps the subtraction well conditioned.
pub fn bin_probability(v: f64, mean: f64, scale: f64) -> f64 {
    let lo = (v - 0.5 - mean) / scale;
    let hi = (v + 0.5 - mean) / scale;
    if v > mean {
        std_normal_sf(lo) - std_normal_sf(hi)
    } else {
        std_normal_cdf(hi) - std_normal_cdf(lo)
    }
}

pub struct ZRate {
    pub bits: f64,
    pub grad_z: Tensor,
    pub grad_means: Tensor,
    pub grad_log_scales: Tensor,
    pub floored: Vec<bool>,
}

/// `Σ −log₂ max(P_c(z), 2⁻¹⁶)` with `P_c` the per-channel discretized
/// Gaussian, `scale = exp(log_scale)`. `active` selects spatial cells.
pub fn z_rate_with_grads(z: &Tensor, means: &Tensor, log_scales: &Tensor, active: Option<&[bool]>) -> ZRate {
    let (c, h, w) = z.dims3();
    let n = h * w;
    let mut grad_z = Tensor::zeros(z.shape());
    let mut grad_means = Tensor::zeros(means.shape());
    let mut grad_log_scales = Tensor::zeros(log_scales.shape());
    let mut floored = Vec::new();
    let mut bits = 0.0;
    for ch in 0..c {
        let m = means.data()[ch];
        let s = log_scales.data()[ch].exp();
        for loc in 0..n {
            if active.is_some_and(|a| !a[loc]) {
                continue;
            }
            let v = z.data()[ch * n + loc];
            let p = bin_probability(v, m, s);
            let lo = (v - 0.5 - m) / s;
            let hi = (v + 0.5 - m) / s;
            let above = p >= P_FLOOR;
            floored.push(above);
            if !above {
                bits -= P_FLOOR.log2();
                continue;
            }
            bits -= p.log2();
            let (phi_lo, phi_hi) = (std_normal_pdf(lo), std_normal_pdf(hi));
            let dp_dz = (phi_hi - phi_lo) / s;
            let dp_dls = -(phi_hi * hi - phi_lo * lo);
            let k = -1.0 / (p * LN_2);
            grad_z.data_mut()[ch * n + loc] = k * dp_dz;
            grad_means.data_mut()[ch] -= k * dp_dz;
            grad_log_scales.data_mut()[ch] += k * dp_dls;
        }
    }
    ZRate {
        bits,
        grad_z,
        grad_means,
        grad_log_scales,
        floored,
    }
}

/// Rate of `ẑ` under the branch's factorized prior, in bits.
pub fn z_rate(z_hat: &HyperLatent, p: &HyperParams) -> f64 {
    let (m, ls) = p.prior();
    z_rate_with_grads(z_hat.values(), m, ls, None).bits
}

/// Per-channel coding tables over `[−Z_MAX, Z_MAX]`.
pub fn z_tables(p: &HyperParams) -> Result<Vec<QuantizedCdf>> {
    let (m, ls) = p.prior();
    (0..p.config.channels)
        .map(|c| {
            let (mean, scale) = (m.data()[c], ls.data()[c].exp());
            let raw: Vec<f64> = (-Z_MAX..=Z_MAX)
                .map(|v| bin_probability(v as f64, mean, scale).max(P_FLOOR))
                .collect();
            let s: f64 = raw.iter().sum();
            quantize_pmf(&raw.iter().map(|v| v / s).collect::<Vec<_>>())
        })
        .collect()
}

/// Range-codes the active spatial cells of `ẑ`, channel by channel.
pub fn encode_z(z_hat: &HyperLatent, tables: &[QuantizedCdf], active: &[bool]) -> Result<(Vec<u8>, usize)> {
    let (c, h, w) = z_hat.values().dims3();
    if active.len() != h * w || tables.len() != c {
        return Err(Error::Shape("hyper-latent, tables and active map disagree".into()));
    }
    let mut enc = RangeEncoder::new();
    let mut count = 0;
    for ch in 0..c {
        for (loc, _) in active.iter().enumerate().filter(|(_, &a)| a) {
            let v = z_hat.values().data()[ch * h * w + loc];
            if v.fract() != 0.0 || v.abs() > Z_MAX as f64 {
                return Err(Error::InvalidParam(format!("hyper-latent value {v} is not a coded integer")));
            }
            enc.encode(&tables[ch], (v as i32 + Z_MAX) as usize);
            count += 1;
        }
    }
    Ok((enc.finish(), count))
}

/// Inverse of [`encode_z`]; inactive cells come back as 0.
pub fn decode_z(bytes: &[u8], tables: &[QuantizedCdf], active: &[bool], h: usize, w: usize) -> Result<HyperLatent> {
    let c = tables.len();
    let mut dec = RangeDecoder::new(bytes)?;
    let mut t = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for (loc, _) in active.iter().enumerate().filter(|(_, &a)| a) {
            let s = dec.decode(&tables[ch])?;
            t.data_mut()[ch * h * w + loc] = s as f64 - Z_MAX as f64;
        }
    }
    dec.finish()?;
    Ok(HyperLatent::new(t))
}

/// One Stage-B training sample: features and their frozen indices.
pub struct RateSample {
    pub features: FeatureGrid,
    pub indices: IndexGrid,
}

impl RateSample {
    pub fn new(features: FeatureGrid, cb: &Codebook) -> Result<Self> {
        let indices = quantize(&features, cb)?;
        Ok(Self { features, indices })
    }
}

/// Builds the rate loss of one sample on `tape`; returns
/// `(loss, index bits, latent bits)` nodes. `noise` is added to `z`.
pub fn rate_loss_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    prefix: &str,
    anchors: Var,
    sample: &RateSample,
    noise: &Tensor,
    lambda_y: f64,
    lambda_z: f64,
) -> (Var, Var, Var) {
    let y = tape.leaf(sample.features.values().clone());
    let z = analysis_on_tape(tape, pv, prefix, y);
    let z_tilde = tape.add_const(z, noise);
    let (h, w) = (sample.indices.height(), sample.indices.width());
    let (mu, sigma) = synthesis_on_tape(tape, pv, prefix, z_tilde, h, w);
    let ry = tape.index_rate(anchors, mu, sigma, sample.indices.indices(), None, None);
    let means = pv.var(&format!("{prefix}prior.mean"));
    let log_scales = pv.var(&format!("{prefix}prior.log_scale"));
    let rz = tape.z_rate(z_tilde, means, log_scales, None);
    let n = sample.indices.len() as f64;
    let loss = tape.weighted_sum(&[(ry, lambda_y / n), (rz, lambda_z / n)]);
    (loss, ry, rz)
}

#[derive(Clone, Debug)]
pub struct StageBConfig {
    pub steps: usize,
    pub lr: f64,
    pub lambda_y: f64,
    pub lambda_z: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for StageBConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            lr: 3e-3,
            lambda_y: 1.5e-3,
            lambda_z: 1.5e-3,
            batch: 4,
            seed: 0,
        }
    }
}

/// Per-step training record.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    /// Objective value per step.
    pub loss: Vec<f64>,
    /// Index bits per index per step.
    pub y_bits: Vec<f64>,
    /// Latent bits per index per step.
    pub z_bits: Vec<f64>,
}

impl TrainLog {
    fn decile_mean(v: &[f64], last: bool) -> f64 {
        let n = (v.len() / 10).max(1);
        let s = if last { &v[v.len() - n..] } else { &v[..n] };
        s.iter().sum::<f64>() / s.len() as f64
    }

    pub fn first_decile_loss(&self) -> f64 {
        Self::decile_mean(&self.loss, false)
    }

    pub fn last_decile_loss(&self) -> f64 {
        Self::decile_mean(&self.loss, true)
    }
}

/// Aborts when the loss has stayed above 10× its initial value for 100
/// consecutive steps.
#[derive(Default)]
pub struct DivergenceDetector {
    initial: Option<f64>,
    run: usize,
}

impl DivergenceDetector {
    pub fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        let initial = *self.initial.get_or_insert(loss);
        if !loss.is_finite() || loss > 10.0 * initial.abs() {
            self.run += 1;
        } else {
            self.run = 0;
        }
        if self.run >= 100 || !loss.is_finite() {
            return Err(Error::Diverged { step, loss, initial });
        }
        Ok(())
    }
}

/// Stage B: minimizes `λ_y R_ŷ + λ_z R_ẑ` (per index) over the branch
/// parameters with the codebook and features frozen.
pub fn train_stage_b(
    dataset: &[RateSample],
    cb: &Codebook,
    p0: &HyperParams,
    cfg: &StageBConfig,
) -> Result<(HyperParams, TrainLog)> {
    if dataset.is_empty() {
        return Err(Error::InvalidParam("empty training set".into()));
    }
    let mut params = p0.params.clone();
    let mut opt = Adam::new(cfg.lr).with_group("prior.", PRIOR_LR_SCALE);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let anchors_t = cb.to_tensor();
    let mut log = TrainLog::default();
    let mut detector = DivergenceDetector::default();
    let batch = cfg.batch.max(1);
    for step in 0..cfg.steps {
        let mut grads: Option<Vec<Tensor>> = None;
        let (mut loss, mut yb, mut zb) = (0.0, 0.0, 0.0);
        for _ in 0..batch {
            let sample = &dataset[rng.gen_range(0..dataset.len())];
            let mut tape = Tape::new();
            let pv = params.to_tape(&mut tape);
            let anchors = tape.leaf(anchors_t.clone());
            let (hz, wz) = latent_dims(sample.indices.height(), sample.indices.width());
            let noise = uniform_noise(&[p0.config.channels, hz, wz], &mut rng);
            let (l, ry, rz) = rate_loss_on_tape(&mut tape, &pv, "", anchors, sample, &noise, cfg.lambda_y, cfg.lambda_z);
            let n = sample.indices.len() as f64;
            loss += tape.value(l).item() / batch as f64;
            yb += tape.value(ry).item() / n / batch as f64;
            zb += tape.value(rz).item() / n / batch as f64;
            let g = pv.grads(&tape.backward(l), &params);
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
            }
        }
        let mut grads = grads.unwrap();
        for g in &mut grads {
            *g = g.map(|v| v / batch as f64);
        }
        detector.observe(step, loss)?;
        log.loss.push(loss);
        log.y_bits.push(yb);
        log.z_bits.push(zb);
        opt.step(&mut params, &grads, &|_| false);
    }
    params.round_to_f32();
    Ok((HyperParams::from_params(params)?, log))
}

/// Model rates of one sample on the inference path (rounded `ẑ`).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RateEstimate {
    pub y_bits: f64,
    pub z_bits: f64,
    pub indices: usize,
}

impl RateEstimate {
    pub fn bits_per_index(&self) -> f64 {
        (self.y_bits + self.z_bits) / self.indices as f64
    }

    pub fn y_bits_per_index(&self) -> f64 {
        self.y_bits / self.indices as f64
    }
}

pub fn estimate_rate(sample: &RateSample, cb: &Codebook, p: &HyperParams) -> Result<RateEstimate> {
    let z = hyper_analysis(&sample.features, p)?;
    let (z_hat, _) = quantize_infer(&z);
    let field = hyper_synthesis(&z_hat, p, sample.indices.height(), sample.indices.width())?;
    let cat = crate::probability::categorical_isotropic(cb, &field)?;
    Ok(RateEstimate {
        y_bits: crate::probability::cross_entropy_rate(&sample.indices, &cat)?,
        z_bits: z_rate(&z_hat, p),
        indices: sample.indices.len(),
    })
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates redrawn because the probe straddled a ReLU or floor.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub failures: Vec<String>,
}

pub const GRAD_CHECK_STEP: f64 = 1e-4;
pub const GRAD_CHECK_REL_TOL: f64 = 1e-4;
pub const GRAD_CHECK_ABS_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients of the full rate loss (fixed noise)
/// against central finite differences on `coords` random parameters.
pub fn grad_check(p: &HyperParams, cb: &Codebook, sample: &RateSample, coords: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hz, wz) = latent_dims(sample.indices.height(), sample.indices.width());
    let noise = uniform_noise(&[p.config.channels, hz, wz], &mut rng);
    let anchors_t = cb.to_tensor();
    let eval = |params: &ParamSet, want_grads: bool| -> (f64, u64, Option<Vec<Tensor>>) {
        let mut tape = Tape::with_kink_recording();
        let pv = params.to_tape(&mut tape);
        let anchors = tape.leaf(anchors_t.clone());
        let (l, _, _) = rate_loss_on_tape(&mut tape, &pv, "", anchors, sample, &noise, 1.0, 1.0);
        let grads = want_grads.then(|| pv.grads(&tape.backward(l), params));
        (tape.value(l).item(), tape.kink_signature(), grads)
    };
    let (_, sig0, grads) = eval(&p.params, true);
    let grads = grads.unwrap();
    let names: Vec<String> = p.params.names().map(String::from).collect();
    let sizes: Vec<usize> = p.params.iter().map(|(_, t)| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut report = GradCheckReport::default();
    let max_attempts = coords * 20;
    let mut attempts = 0;
    while report.checked < coords && attempts < max_attempts {
        attempts += 1;
        let mut flat = rng.gen_range(0..total);
        let mut t = 0;
        while flat >= sizes[t] {
            flat -= sizes[t];
            t += 1;
        }
        let mut plus = p.params.clone();
        let mut minus = p.params.clone();
        plus.get_mut(&names[t]).unwrap().data_mut()[flat] += GRAD_CHECK_STEP;
        minus.get_mut(&names[t]).unwrap().data_mut()[flat] -= GRAD_CHECK_STEP;
        let (fp, sp, _) = eval(&plus, false);
        let (fm, sm, _) = eval(&minus, false);
        if sp != sig0 || sm != sig0 {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * GRAD_CHECK_STEP);
        let analytic = grads[t].data()[flat];
        let err = (numeric - analytic).abs();
        let scale = numeric.abs().max(analytic.abs());
        let rel = if scale > 0.0 { err / scale } else { 0.0 };
        report.max_abs_error = report.max_abs_error.max(err);
        if err > GRAD_CHECK_ABS_FLOOR {
            report.max_rel_error = report.max_rel_error.max(rel);
        }
        if err > (GRAD_CHECK_REL_TOL * scale).max(GRAD_CHECK_ABS_FLOOR) {
            report.failures.push(format!("{}[{}]: analytic {analytic:e} numeric {numeric:e}", names[t], flat));
        }
        report.checked += 1;
    }
    if report.checked < coords {
        report.failures.push(format!("only {} of {coords} coordinates were checkable", report.checked));
    }
    if !report.failures.is_empty() {
        return Err(Error::GradCheck(report.failures));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::Granularity;
    use crate::synth;

    fn features(h: usize, w: usize, seed: u64) -> FeatureGrid {
        synth::gauss_markov_features(4, h, w, 4.0, 1.0, seed)
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_latent() {
        let mut p = HyperParams::init(HyperConfig::new(4), 1);
        for name in ["ana1.b", "ana2.b"] {
            let t = p.params_mut().get_mut(name).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let y = FeatureGrid::new(Granularity::Fine, Tensor::zeros(&[4, 8, 8])).unwrap();
        let z = hyper_analysis(&y, &p).unwrap();
        assert_eq!(z.values().shape(), &[8, 2, 2]);
        assert!(z.values().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_affine_chain() {
        // 1x1 input, only the centre taps are live; with identity-like
        // weights the chain is relu(a·x + b1)·c + b2.
        let config = HyperConfig {
            d: 1,
            channels: 1,
            hidden: 1,
            synth_hidden: 1,
        };
        let mut p = HyperParams::init(config, 0);
        let set = |p: &mut HyperParams, n: &str, v: Vec<f64>| {
            let t = p.params_mut().get_mut(n).unwrap();
            let shape = t.shape().to_vec();
            *t = Tensor::from_vec(&shape, v).unwrap();
        };
        let mut w1 = vec![0.0; 9];
        w1[4] = 2.0;
        let mut w2 = vec![0.0; 9];
        w2[4] = -0.5;
        set(&mut p, "ana1.w", w1);
        set(&mut p, "ana1.b", vec![0.25]);
        set(&mut p, "ana2.w", w2);
        set(&mut p, "ana2.b", vec![0.1]);
        let y = FeatureGrid::new(Granularity::Fine, Tensor::from_vec(&[1, 1, 1], vec![1.5]).unwrap()).unwrap();
        // 1x1 reflect-padded to 4x4 (constant); stride-2 convs see the centre tap.
        let z = hyper_analysis(&y, &p).unwrap();
        let want = (2.0f64 * 1.5 + 0.25).max(0.0) * -0.5 + 0.1;
        assert_eq!(z.values().shape(), &[1, 1, 1]);
        assert!((z.values().item() - want).abs() < 1e-12);
    }

    #[test]
    fn analysis_golden_values() {
        let p = HyperParams::init(HyperConfig::new(4), 42);
        let y = features(8, 8, 7);
        let z = hyper_analysis(&y, &p).unwrap();
        let got: Vec<f64> = z.values().data()[..6].to_vec();
        let golden = GOLDEN_ANALYSIS;
        for (g, w) in got.iter().zip(golden) {
            assert!((g - w).abs() < 1e-6, "{got:?}");
        }
    }

    #[test]
    fn synthesis_golden_values() {
        let p = HyperParams::init(HyperConfig::new(4), 42);
        let z = HyperLatent::new(Tensor::from_vec(&[8, 1, 1], vec![1.0, -2.0, 0.0, 3.0, 0.0, -1.0, 2.0, 1.0]).unwrap());
        let f = hyper_synthesis(&z, &p, 4, 4).unwrap();
        let got = [f.mu().data()[0], f.mu().data()[5], f.sigma()[0], f.sigma()[15]];
        for (g, w) in got.iter().zip(GOLDEN_SYNTHESIS) {
            assert!((g - w).abs() < 1e-6, "{got:?}");
        }
    }

    // Recorded from the first verified run of the fixed-seed networks.
    const GOLDEN_ANALYSIS: [f64; 6] = [
        0.029087657498957482,
        0.8849277512154885,
        0.28012231691592393,
        -0.8102020624484217,
        1.1500994415199735,
        0.8369119605990226,
    ];
    const GOLDEN_SYNTHESIS: [f64; 4] = [
        -0.37636326862694947,
        -1.2422028933098692,
        1.2670487197957123,
        0.9897341591807829,
    ];

    /// Direct-loop convolution with zero padding, `x[c][i][j]`.
    fn naive_conv(x: &[Vec<Vec<f64>>], w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Vec<Vec<Vec<f64>>> {
        let (co, ci, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        let (h, wd) = (x[0].len(), x[0][0].len());
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![vec![vec![0.0; wo]; ho]; co];
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for di in 0..k {
                            for dj in 0..k {
                                let (r, q) = ((i * stride + di) as isize - pad as isize, (j * stride + dj) as isize - pad as isize);
                                if r < 0 || q < 0 || r >= h as isize || q >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((o * ci + c) * k + di) * k + dj] * x[c][r as usize][q as usize];
                            }
                        }
                    }
                    out[o][i][j] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn analysis_matches_direct_loops() {
        let p = HyperParams::init(HyperConfig::new(4), 11);
        let y = features(6, 7, 12);
        // reflect-pad 6x7 to 8x8 by hand: index n+k maps to n-2-k
        let refl = |i: usize, n: usize| if i < n { i } else { 2 * n - 2 - i };
        let x: Vec<Vec<Vec<f64>>> = (0..4)
            .map(|c| (0..8).map(|i| (0..8).map(|j| y.values().data()[(c * 6 + refl(i, 6)) * 7 + refl(j, 7)]).collect()).collect())
            .collect();
        let g = |n: &str| p.params().get(n).unwrap();
        let mut a = naive_conv(&x, g("ana1.w"), g("ana1.b"), 2, 1);
        a.iter_mut().flatten().flatten().for_each(|v| *v = v.max(0.0));
        let z = naive_conv(&a, g("ana2.w"), g("ana2.b"), 2, 1);
        let got = hyper_analysis(&y, &p).unwrap();
        assert_eq!(got.values().shape(), &[8, 2, 2]);
        for c in 0..8 {
            for i in 0..2 {
                for j in 0..2 {
                    assert!((got.values().data()[(c * 2 + i) * 2 + j] - z[c][i][j]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn training_noise_stays_within_half() {
        let z = HyperLatent::new(Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.5, -3.2, 10.0]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = quantize_train(&z, &mut rng);
        for (x, y) in a.values().data().iter().zip(z.values().data()) {
            assert!((x - y).abs() <= 0.5);
        }
        let b = quantize_train(&z, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
    }

    #[test]
    fn training_noise_is_zero_mean() {
        let z = HyperLatent::new(Tensor::zeros(&[1, 1000, 1000]));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noisy = quantize_train(&z, &mut rng);
        let n = 1e6;
        let mean = noisy.values().data().iter().sum::<f64>() / n;
        // std of U(−½, ½) is 1/√12
        let se = (1.0 / 12.0f64).sqrt() / n.sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn rounding_is_half_away_from_zero_and_clamped() {
        let z = HyperLatent::new(Tensor::from_vec(&[1, 1, 6], vec![0.5, -0.5, 0.49, 200.0, -127.4, -130.0]).unwrap());
        let (q, saturated) = quantize_infer(&z);
        assert_eq!(q.values().data(), &[1.0, -1.0, 0.0, 127.0, -127.0, -127.0]);
        assert_eq!(saturated, 2);
    }

    #[test]
    fn sigma_head_activation() {
        let mut p = HyperParams::init(HyperConfig::new(4), 3);
        let w = p.params_mut().get_mut("sigma.w").unwrap();
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        p.params_mut().insert("sigma.b", Tensor::full(&[1], 0.0));
        let z = HyperLatent::new(Tensor::zeros(&[8, 1, 1]));
        let f = hyper_synthesis(&z, &p, 4, 4).unwrap();
        assert!(f.sigma().iter().all(|&s| (s - std::f64::consts::LN_2).abs() < 1e-15));
        p.params_mut().insert("sigma.b", Tensor::full(&[1], -1e4));
        let f = hyper_synthesis(&z, &p, 4, 4).unwrap();
        assert!(f.sigma().iter().all(|&s| s == SIGMA_MIN));
    }

    #[test]
    fn synthesis_rejects_wrong_grid() {
        let p = HyperParams::init(HyperConfig::new(4), 3);
        let z = HyperLatent::new(Tensor::zeros(&[8, 2, 2]));
        assert!(matches!(hyper_synthesis(&z, &p, 16, 16), Err(Error::Shape(_))));
        assert!(hyper_synthesis(&z, &p, 5, 8).is_ok());
    }

    #[test]
    fn collapsed_prior_costs_nothing_at_its_mean() {
        let zero = Tensor::zeros(&[1, 1, 1]);
        let r = z_rate_with_grads(&zero, &Tensor::zeros(&[1]), &Tensor::full(&[1], (1e-3f64).ln()), None);
        assert!(r.bits < 1e-12);
    }

    #[test]
    fn symmetric_latents_cost_the_same() {
        let z = Tensor::from_vec(&[1, 1, 2], vec![3.0, -3.0]).unwrap();
        let m = Tensor::zeros(&[1]);
        let ls = Tensor::full(&[1], 5.0f64.ln());
        let a = z_rate_with_grads(&Tensor::from_vec(&[1, 1, 1], vec![3.0]).unwrap(), &m, &ls, None).bits;
        let b = z_rate_with_grads(&Tensor::from_vec(&[1, 1, 1], vec![-3.0]).unwrap(), &m, &ls, None).bits;
        assert!((a - b).abs() < 1e-12);
        assert!((z_rate_with_grads(&z, &m, &ls, None).bits - 2.0 * a).abs() < 1e-12);
    }

    /// Composite Simpson integration of the Gaussian density.
    fn simpson_mass(lo: f64, hi: f64, mean: f64, scale: f64) -> f64 {
        let n = 2000;
        let h = (hi - lo) / n as f64;
        let f = |x: f64| (-0.5 * ((x - mean) / scale).powi(2)).exp() / (scale * (2.0 * std::f64::consts::PI).sqrt());
        let mut acc = f(lo) + f(hi);
        for i in 1..n {
            acc += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn rate_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let mean = rng.gen_range(-3.0..3.0);
            let scale: f64 = rng.gen_range(0.3..4.0);
            let v = rng.gen_range(-6..=6) as f64;
            let mass = simpson_mass(v - 0.5, v + 0.5, mean, scale).max(P_FLOOR);
            let want = -mass.log2();
            let got = z_rate_with_grads(
                &Tensor::from_vec(&[1, 1, 1], vec![v]).unwrap(),
                &Tensor::full(&[1], mean),
                &Tensor::full(&[1], scale.ln()),
                None,
            )
            .bits;
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn z_stream_roundtrip_with_inactive_cells() {
        let p = HyperParams::init(HyperConfig::new(4), 5);
        let tables = z_tables(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vals: Vec<f64> = (0..8 * 6).map(|_| rng.gen_range(-4..=4) as f64).collect();
        let z = HyperLatent::new(Tensor::from_vec(&[8, 2, 3], vals).unwrap());
        let active = [true, false, true, true, false, true];
        let (bytes, n) = encode_z(&z, &tables, &active).unwrap();
        assert_eq!(n, 8 * 4);
        let back = decode_z(&bytes, &tables, &active, 2, 3).unwrap();
        for ch in 0..8 {
            for loc in 0..6 {
                let want = if active[loc] { z.values().data()[ch * 6 + loc] } else { 0.0 };
                assert_eq!(back.values().data()[ch * 6 + loc], want);
            }
        }
        let (empty, n) = encode_z(&z, &tables, &[false; 6]).unwrap();
        assert_eq!(n, 0);
        assert!(empty.len() <= 8);
    }

    #[test]
    fn shape_contract_over_odd_sizes() {
        let p = HyperParams::init(HyperConfig::new(4), 9);
        for (h, w) in [(4, 4), (5, 7), (1, 1), (9, 12), (16, 3)] {
            let y = features(h, w, (h * 31 + w) as u64);
            let (z_hat, _) = quantize_infer(&hyper_analysis(&y, &p).unwrap());
            let f = hyper_synthesis(&z_hat, &p, h, w).unwrap();
            assert_eq!(f.mu().shape(), &[4, h, w]);
            assert_eq!(f.sigma().len(), h * w);
        }
    }

    #[test]
    fn grad_check_small_model() {
        let cb = Codebook::random_normal(64, 4, 1.0, 1).unwrap();
        let p = HyperParams::init(HyperConfig::new(4), 2);
        let sample = RateSample::new(features(8, 8, 3), &cb).unwrap();
        let report = grad_check(&p, &cb, &sample, 60, 1).unwrap();
        assert_eq!(report.checked, 60);
    }

    #[test]
    fn divergence_detector_trips_after_100_steps() {
        let mut d = DivergenceDetector::default();
        d.observe(0, 1.0).unwrap();
        for step in 1..100 {
            d.observe(step, 11.0).unwrap();
        }
        assert!(matches!(d.observe(100, 11.0), Err(Error::Diverged { .. })));
        let mut d = DivergenceDetector::default();
        d.observe(0, 1.0).unwrap();
        for step in 1..300 {
            d.observe(step, if step % 50 == 0 { 1.0 } else { 20.0 }).unwrap();
        }
    }
}
