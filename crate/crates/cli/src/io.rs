use std::fs;
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};

use hvqc::codebook::Codebook;
use hvqc::pipeline::Model;
use hvqc::tensor::Tensor;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ImageFormat, RgbImage};

use crate::error::CliError;

pub const THREADS_ENV: &str = "HVQC_THREADS";

/// Worker cap from `HVQC_THREADS`, else the machine's parallelism.
pub fn threads() -> Result<usize, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Maps `f` over `items` on up to `threads` workers, keeping order.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

pub fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = parent_dir(path);
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| CliError::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// RGB image as a `[3, H, W]` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor, CliError> {
    let bytes = read(path)?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| CliError::Corrupt(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data).map_err(CliError::from)
}

/// Encodes a `[3, H, W]` tensor in the format implied by `path`'s
/// extension (PNG unless it names a PNM variant).
pub fn encode_image(t: &Tensor, path: &Path) -> Result<Vec<u8>, CliError> {
    let (c, h, w) = t.dims3();
    if c != 3 {
        return Err(CliError::Internal(format!("expected 3 channels, got {c}")));
    }
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| (t.data()[(ch * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    let mut buf = Cursor::new(Vec::new());
    let written = match ImageFormat::from_path(path) {
        Ok(ImageFormat::Pnm) => {
            img.write_with_encoder(PnmEncoder::new(&mut buf).with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary)))
        }
        _ => img.write_to(&mut buf, ImageFormat::Png),
    };
    written.map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(buf.into_inner())
}

pub fn load_model(checkpoint: &Path, codebook: &Path) -> Result<Model, CliError> {
    let cb = Codebook::from_bytes(&read(codebook)?).map_err(|e| CliError::from(e).at(codebook))?;
    Model::from_checkpoint(&read(checkpoint)?, &cb).map_err(|e| CliError::from(e).at(checkpoint))
}

/// PNG and PNM files directly inside `dir`, sorted by name.
pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "ppm" | "pnm")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
