use std::fs;
use std::path::Path;

use hvqc::bitstream::{bpp, Container};
use hvqc::codebook::{Codebook, FeatureGrid, Granularity, IndexGrid};
use hvqc::harness::{self, BenchModels, Strategy};
use hvqc::hyperprior::{train_stage_b, HyperConfig, HyperParams, RateSample, StageBConfig};
use hvqc::pipeline::{
    analyze, decode_image, encode_image, rate_report, train_stages, CodecOptions, ModelConfig, RdWeights, Stage, TrainConfig,
};
use hvqc::synth;
use hvqc::tensor::Tensor;

use crate::error::CliError;
use crate::io::{self, par_map};
use crate::{BenchArgs, CliConfig, Command, CompressArgs, DecompressArgs, ReportArgs, Source, SynthArgs, TrainArgs};

pub fn run(cfg: CliConfig) -> Result<(), CliError> {
    let threads = io::threads()?;
    match cfg.command {
        Command::Compress(a) => compress(&a, threads),
        Command::Decompress(a) => decompress(&a, threads),
        Command::Bench(a) => bench(&a),
        Command::Train(a) => train(&a, threads),
        Command::SynthData(a) => synth_data(&a, threads),
        Command::Report(a) => report(&a, threads),
    }
}

/// Independent per-item seed for stream `stream`.
fn derive_seed(seed: u64, stream: u64, i: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (stream << 40) ^ i
}

fn compress(a: &CompressArgs, threads: usize) -> Result<(), CliError> {
    let x = io::load_image(&a.input)?;
    let model = io::load_model(&a.model.model, &a.model.codebook)?;
    let opts = CodecOptions {
        ratios: a.ratios,
        threads: threads.min(3),
    };
    let enc = encode_image(&x, &model, &opts).map_err(|e| CliError::from(e).at(&a.input))?;
    let bytes = enc.container.to_bytes();
    io::write_atomic(&a.output, &bytes)?;
    let (h, w) = (x.shape()[1], x.shape()[2]);
    println!("{}: {}x{} -> {} bytes, {:.4} bpp", a.output.display(), w, h, bytes.len(), bpp(bytes.len(), h, w));
    for s in enc.container.layout() {
        if a.dump_layout {
            println!("  {:<10} offset {:>8}  {:>8} bytes  {:.4} bpp", s.name, s.offset, s.size, bpp(s.size, h, w));
        } else {
            println!("  {:<10} {:>8} bytes  {:.4} bpp", s.name, s.size, bpp(s.size, h, w));
        }
    }
    if enc.saturated > 0 {
        eprintln!("hvqc: warning: {} hyper-latent values clamped", enc.saturated);
    }
    Ok(())
}

fn decode_file(path: &Path, model: &hvqc::pipeline::Model, threads: usize) -> Result<hvqc::pipeline::Decoded, CliError> {
    let container = Container::from_bytes(&io::read(path)?).map_err(|e| CliError::from(e).at(path))?;
    decode_image(&container, model, threads.min(3)).map_err(|e| CliError::from(e).at(path))
}

fn decompress(a: &DecompressArgs, threads: usize) -> Result<(), CliError> {
    let model = io::load_model(&a.model.model, &a.model.codebook)?;
    let dec = decode_file(&a.input, &model, threads)?;
    io::write_atomic(&a.output, &io::encode_image(&dec.image, &a.output)?)?;
    let (_, h, w) = dec.image.dims3();
    println!("{}: {}x{}", a.output.display(), w, h);
    Ok(())
}

fn report(a: &ReportArgs, threads: usize) -> Result<(), CliError> {
    let x = io::load_image(&a.input)?;
    let model = io::load_model(&a.model.model, &a.model.codebook)?;
    let bytes = io::read(&a.container)?;
    let container = Container::from_bytes(&bytes).map_err(|e| CliError::from(e).at(&a.container))?;
    let dec = decode_image(&container, &model, threads.min(3)).map_err(|e| CliError::from(e).at(&a.container))?;
    let r = rate_report(&container, &x, &dec.image).map_err(|e| CliError::from(e).at(&a.input))?;
    if let Some(path) = &a.csv {
        io::write_atomic(path, r.to_csv().as_bytes())?;
    }
    println!("{}x{}: {} bytes, {:.4} bpp, PSNR {:.2} dB", r.width, r.height, r.bytes, r.bpp, r.psnr);
    println!("  indices coded: coarse {} medium {} fine {}", r.symbols[0], r.symbols[1], r.symbols[2]);
    for s in &r.segments {
        println!("  {:<10} {:>8} bytes  {:.4} bpp", s.name, s.bytes, s.bpp);
    }
    Ok(())
}

fn synth_data(a: &SynthArgs, threads: usize) -> Result<(), CliError> {
    if !(a.len.is_finite() && a.len > 0.0) {
        return Err(CliError::Usage(format!("--len must be positive, got {}", a.len)));
    }
    if a.n == 0 || a.size == 0 {
        return Err(CliError::Usage("--n and --size must be positive".into()));
    }
    if a.out.exists() {
        let mut entries = fs::read_dir(&a.out).map_err(|e| CliError::io(&a.out, e))?;
        if entries.next().is_some() {
            return Err(CliError::Usage(format!("{} exists and is not empty", a.out.display())));
        }
    }
    let parent = io::parent_dir(&a.out);
    let staging = tempfile::Builder::new()
        .prefix(".hvqc-synth")
        .tempdir_in(&parent)
        .map_err(|e| CliError::io(&parent, e))?;
    let ids: Vec<usize> = (0..a.n).collect();
    let results = par_map(&ids, threads, |&i| -> Result<(), CliError> {
        let img = synth::gauss_markov_image(a.size, a.size, a.len, derive_seed(a.seed, 1, i as u64));
        let path = staging.path().join(format!("synth_{i:05}.png"));
        let bytes = io::encode_image(&img, &path)?;
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))
    });
    results.into_iter().collect::<Result<(), _>>()?;
    if a.out.exists() {
        fs::remove_dir(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    }
    let staged = staging.keep();
    fs::rename(&staged, &a.out).map_err(|e| {
        let _ = fs::remove_dir_all(&staged);
        CliError::io(&a.out, e)
    })?;
    println!("{}: {} images of {}x{}, correlation length {}", a.out.display(), a.n, a.size, a.size, a.len);
    Ok(())
}

fn decile_means(v: &[f64]) -> (f64, f64) {
    let n = (v.len() / 10).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&v[..n]), mean(&v[v.len() - n..]))
}

fn train(a: &TrainArgs, threads: usize) -> Result<(), CliError> {
    let rd = RdWeights {
        lambda_vq: a.lambda_vq,
        ..RdWeights::uniform(a.lambda)
    };
    rd.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if a.batch == 0 || a.k == 0 || a.d == 0 {
        return Err(CliError::Usage("--batch, --k and --d must be positive".into()));
    }
    if [a.lr_a, a.lr_b, a.lr_c].iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
        return Err(CliError::Usage("learning rates must be positive".into()));
    }
    let dataset: Vec<Tensor> = match (&a.data, a.synthetic) {
        (Some(dir), _) => {
            let files = io::image_files(dir)?;
            if files.is_empty() {
                return Err(CliError::Usage(format!("{} holds no PNG/PPM images", dir.display())));
            }
            par_map(&files, threads, |p| io::load_image(p)).into_iter().collect::<Result<_, _>>()?
        }
        (None, Some(n)) if n > 0 && a.size > 0 && a.corr_len > 0.0 => {
            let ids: Vec<u64> = (0..n as u64).collect();
            par_map(&ids, threads, |&i| synth::gauss_markov_image(a.size, a.size, a.corr_len, derive_seed(a.seed, 2, i)))
        }
        _ => return Err(CliError::Usage("--synthetic needs positive --synthetic, --size and --corr-len".into())),
    };
    let cfg = TrainConfig {
        model: ModelConfig::new(a.k, a.d),
        steps_a: a.steps_a,
        steps_b: a.steps_b,
        steps_c: a.steps_c,
        lr_a: a.lr_a,
        lr_b: a.lr_b,
        lr_c: a.lr_c,
        batch: a.batch,
        seed: a.seed,
        rd,
        train_ratios: a.train_ratios,
        ratios: a.ratios,
        ..TrainConfig::default()
    };
    eprintln!("training on {} images: {}+{}+{} steps", dataset.len(), a.steps_a, a.steps_b, a.steps_c);
    let (model, rep) = train_stages(&dataset, &cfg)?;
    if let Some(path) = &a.curve {
        io::write_atomic(path, rep.to_csv().as_bytes())?;
    }
    io::write_atomic(&a.out_codebook, &model.codebook.to_bytes())?;
    io::write_atomic(&a.out_model, &model.checkpoint_bytes())?;
    for stage in [Stage::A, Stage::B, Stage::C] {
        let losses: Vec<f64> = rep.stage(stage).map(|p| p.loss).collect();
        if !losses.is_empty() {
            let (first, last) = decile_means(&losses);
            println!("stage {stage:?}: loss {first:.6} -> {last:.6} over {} steps", losses.len());
        }
    }
    println!("wrote {} and {}", a.out_model.display(), a.out_codebook.display());
    Ok(())
}

fn bench(a: &BenchArgs) -> Result<(), CliError> {
    let strategies = &a.strategies.0;
    let wants_hyper = strategies.contains(&Strategy::Hyper);
    let rows = match a.source {
        Source::File => {
            let (Some(ckpt), Some(cb_path)) = (&a.model, &a.codebook) else {
                return Err(CliError::Usage("--source file needs --model and --codebook".into()));
            };
            if a.inputs.is_empty() {
                return Err(CliError::Usage("--source file needs at least one --input".into()));
            }
            let model = io::load_model(ckpt, cb_path)?;
            let mut samples = Vec::new();
            for p in &a.inputs {
                let [_, _, fine] = analyze(&model, &io::load_image(p)?).map_err(|e| CliError::from(e).at(p))?;
                samples.push(RateSample::new(fine, &model.codebook)?);
            }
            let grids: Vec<IndexGrid> = samples.iter().map(|s| s.indices.clone()).collect();
            let hyper = &model.hyper[Granularity::Fine.index()];
            let models = BenchModels::from_training(model.config.k, &grids, Some((&model.codebook, hyper)));
            harness::run(strategies, &samples, &models)?
        }
        Source::Markov | Source::Uniform => {
            if a.k < 2 || a.d == 0 || a.size == 0 || a.trials == 0 || a.train_fields == 0 || a.batch == 0 {
                return Err(CliError::Usage("--k >= 2 and positive --d, --size, --trials, --train-fields, --batch required".into()));
            }
            if a.source == Source::Markov && !(a.corr_len > 0.0) {
                return Err(CliError::Usage("--corr-len must be positive".into()));
            }
            let cb = Codebook::random_normal(a.k, a.d, 1.0, derive_seed(a.seed, 3, 0))?;
            let field = |s: u64| -> FeatureGrid {
                match a.source {
                    Source::Markov => synth::gauss_markov_features(a.d, a.size, a.size, a.corr_len, 1.0, s),
                    _ => synth::uniform_index_features(&cb, a.size, a.size, s),
                }
            };
            let make = |stream: u64, n: usize| -> Result<Vec<RateSample>, CliError> {
                (0..n as u64)
                    .map(|i| RateSample::new(field(derive_seed(a.seed, stream, i)), &cb).map_err(CliError::from))
                    .collect()
            };
            let train = make(4, a.train_fields)?;
            let test = make(5, a.trials)?;
            let hyper = if wants_hyper {
                eprintln!("fitting hyperprior on {} fields for {} steps", train.len(), a.train_steps);
                let cfg = StageBConfig {
                    steps: a.train_steps,
                    batch: a.batch,
                    seed: a.seed,
                    ..StageBConfig::default()
                };
                let p0 = HyperParams::init(HyperConfig::new(a.d), derive_seed(a.seed, 6, 0));
                Some(train_stage_b(&train, &cb, &p0, &cfg)?.0)
            } else {
                None
            };
            let grids: Vec<IndexGrid> = train.iter().map(|s| s.indices.clone()).collect();
            let models = BenchModels::from_training(a.k, &grids, hyper.as_ref().map(|h| (&cb, h)));
            harness::run(strategies, &test, &models)?
        }
    };
    if let Some(bad) = rows.iter().find(|r| !r.roundtrip_ok) {
        return Err(CliError::Internal(format!("{} failed to roundtrip on trial {}", bad.strategy, bad.trial)));
    }
    let csv = harness::to_csv(&rows);
    match &a.csv {
        Some(path) => {
            io::write_atomic(path, csv.as_bytes())?;
            for s in strategies {
                if let Some(b) = harness::mean_bits(&rows, *s) {
                    println!("{s:<7} {b:.4} bits/index");
                }
            }
        }
        None => print!("{csv}"),
    }
    Ok(())
}
