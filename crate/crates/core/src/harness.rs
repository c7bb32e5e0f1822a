//! Side-by-side comparison of the entropy-coding strategies on index grids.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::codebook::{Codebook, FeatureGrid, IndexGrid};
use crate::context::{
    code_indices_context, code_indices_hyper, code_indices_static, decode_indices_context, decode_indices_hyper,
    decode_indices_static,
};
use crate::error::{Error, Result};
use crate::hyperprior::{
    decode_z, encode_z, hyper_analysis, hyper_synthesis, latent_dims, quantize_infer, z_tables, HyperParams, RateSample,
};
use crate::probability::categorical_isotropic;

/// First line of every bench CSV; bump when columns change.
pub const CSV_VERSION_LINE: &str = "# hvqc-bench-csv v1";
pub const CSV_COLUMNS: &str = "strategy,order,height,width,k,trial,bits_per_index,encode_ns,decode_ns,roundtrip_ok";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Static,
    Context(usize),
    Hyper,
}

impl Strategy {
    pub fn all() -> Vec<Strategy> {
        vec![
            Strategy::Static,
            Strategy::Context(0),
            Strategy::Context(1),
            Strategy::Context(2),
            Strategy::Context(3),
            Strategy::Hyper,
        ]
    }

    pub fn order(&self) -> Option<usize> {
        match self {
            Strategy::Context(n) => Some(*n),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Static => write!(f, "static"),
            Strategy::Context(n) => write!(f, "o{n}"),
            Strategy::Hyper => write!(f, "hyper"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "static" => Ok(Strategy::Static),
            "hyper" => Ok(Strategy::Hyper),
            o if o.len() == 2 && o.starts_with('o') => match o[1..].parse::<usize>() {
                Ok(n) if n <= crate::context::MAX_ORDER => Ok(Strategy::Context(n)),
                _ => Err(Error::InvalidParam(format!("unknown strategy {s:?}"))),
            },
            _ => Err(Error::InvalidParam(format!("unknown strategy {s:?}"))),
        }
    }
}

pub fn parse_strategies(list: &str) -> Result<Vec<Strategy>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub strategy: Strategy,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub trial: usize,
    pub bits_per_index: f64,
    pub encode_ns: u128,
    pub decode_ns: u128,
    pub roundtrip_ok: bool,
}

impl BenchRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6},{},{},{}",
            self.strategy,
            self.strategy.order().map_or(String::new(), |o| o.to_string()),
            self.height,
            self.width,
            self.k,
            self.trial,
            self.bits_per_index,
            self.encode_ns,
            self.decode_ns,
            self.roundtrip_ok
        )
    }
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{CSV_VERSION_LINE}\n{CSV_COLUMNS}\n");
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Shared state for the model-based strategies.
pub struct BenchModels<'a> {
    pub k: usize,
    /// Global symbol frequencies for the static coder.
    pub frequencies: Vec<f64>,
    pub hyper: Option<(&'a Codebook, &'a HyperParams)>,
}

impl<'a> BenchModels<'a> {
    /// Frequencies estimated from `training` grids, add-one smoothed.
    pub fn from_training(k: usize, training: &[IndexGrid], hyper: Option<(&'a Codebook, &'a HyperParams)>) -> Self {
        let mut frequencies = vec![1.0; k];
        for g in training {
            for &i in g.indices() {
                frequencies[i as usize] += 1.0;
            }
        }
        Self { k, frequencies, hyper }
    }
}

/// Codes and decodes one field with `strategy`. Hyper rows count both the
/// ẑ and ŷ streams.
pub fn bench_one(strategy: Strategy, indices: &IndexGrid, features: Option<&FeatureGrid>, models: &BenchModels<'_>, trial: usize) -> Result<BenchRow> {
    let (h, w) = (indices.height(), indices.width());
    let g = indices.granularity;
    let t0 = Instant::now();
    let (bits, (encode_ns, decode_ns), ok) = match strategy {
        Strategy::Static => {
            let coded = code_indices_static(indices, &models.frequencies)?;
            let enc = t0.elapsed().as_nanos();
            let t1 = Instant::now();
            let back = decode_indices_static(&coded.table, &coded.coded.bytes, g, h, w)?;
            let dec = t1.elapsed().as_nanos();
            (8.0 * coded.coded.bytes.len() as f64, (enc, dec), &back == indices)
        }
        Strategy::Context(order) => {
            let coded = code_indices_context(indices, models.k, order)?;
            let enc = t0.elapsed().as_nanos();
            let t1 = Instant::now();
            let back = decode_indices_context(&coded.bytes, models.k, order, g, h, w)?;
            let dec = t1.elapsed().as_nanos();
            (8.0 * coded.bytes.len() as f64, (enc, dec), &back == indices)
        }
        Strategy::Hyper => {
            let (cb, hp) = models
                .hyper
                .ok_or_else(|| Error::InvalidParam("hyper strategy needs a trained hyperprior".into()))?;
            let features = features.ok_or_else(|| Error::InvalidParam("hyper strategy needs feature grids".into()))?;
            let (z_hat, _) = quantize_infer(&hyper_analysis(features, hp)?);
            let (hz, wz) = latent_dims(h, w);
            let active = vec![true; hz * wz];
            let tables = z_tables(hp)?;
            let (z_bytes, _) = encode_z(&z_hat, &tables, &active)?;
            let cat = categorical_isotropic(cb, &hyper_synthesis(&z_hat, hp, h, w)?)?;
            let y = code_indices_hyper(indices, &cat, None)?;
            let enc = t0.elapsed().as_nanos();
            let t1 = Instant::now();
            let z_back = decode_z(&z_bytes, &tables, &active, hz, wz)?;
            let cat_back = categorical_isotropic(cb, &hyper_synthesis(&z_back, hp, h, w)?)?;
            let back = decode_indices_hyper(&y.bytes, &cat_back, None, g)?;
            let dec = t1.elapsed().as_nanos();
            (8.0 * (z_bytes.len() + y.bytes.len()) as f64, (enc, dec), &back == indices)
        }
    };
    Ok(BenchRow {
        strategy,
        height: h,
        width: w,
        k: models.k,
        trial,
        bits_per_index: bits / indices.len() as f64,
        encode_ns,
        decode_ns,
        roundtrip_ok: ok,
    })
}

/// Runs every strategy on every sample.
pub fn run(strategies: &[Strategy], samples: &[RateSample], models: &BenchModels<'_>) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for (trial, s) in samples.iter().enumerate() {
        for &st in strategies {
            rows.push(bench_one(st, &s.indices, Some(&s.features), models, trial)?);
        }
    }
    Ok(rows)
}

/// Mean bits per index of `strategy` over `rows`.
pub fn mean_bits(rows: &[BenchRow], strategy: Strategy) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.strategy == strategy).map(|r| r.bits_per_index).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hyperprior::HyperConfig;
    use crate::synth;

    #[test]
    fn strategy_names_roundtrip() {
        for s in Strategy::all() {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        assert_eq!(parse_strategies("static,o0,o1,o2,o3,hyper").unwrap(), Strategy::all());
        assert!("o4".parse::<Strategy>().is_err());
        assert!("lzma".parse::<Strategy>().is_err());
    }

    #[test]
    fn every_strategy_roundtrips_with_versioned_csv() {
        let cb = Codebook::random_normal(64, 4, 1.0, 1).unwrap();
        let hp = HyperParams::init(HyperConfig::new(4), 2);
        let samples: Vec<RateSample> = (0..2)
            .map(|s| RateSample::new(synth::gauss_markov_features(4, 16, 16, 4.0, 1.0, s), &cb).unwrap())
            .collect();
        let training: Vec<IndexGrid> = samples.iter().map(|s| s.indices.clone()).collect();
        let models = BenchModels::from_training(64, &training, Some((&cb, &hp)));
        let rows = run(&Strategy::all(), &samples, &models).unwrap();
        assert_eq!(rows.len(), 12);
        assert!(rows.iter().all(|r| r.roundtrip_ok));
        let csv = to_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_VERSION_LINE));
        assert_eq!(lines.next(), Some(CSV_COLUMNS));
        assert_eq!(lines.count(), 12);
    }
}
