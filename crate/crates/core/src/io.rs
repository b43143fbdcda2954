//! On-disk formats: run configuration, checkpoints, traces, and reports.
//!
//! Time series are CSV; everything else is pretty-printed JSON carrying a
//! `format_version` field.

use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fold::{BenchOptions, BenchStackConfig};
use crate::norm::{NormForm, NormVariantConfig, Preset, StatSource};
use crate::stats::{StatTrace, TraceRecord};
use crate::tensor::Precision;
use crate::theorem::{GapConfig, McConfig};
use crate::train::{CurvePoint, TrainConfig, TrainState};

pub const FORMAT_VERSION: u32 = 1;

/// Normalization section: a preset plus optional per-field overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormSection {
    pub preset: Option<Preset>,
    pub form: Option<NormForm>,
    pub fp_source: Option<StatSource>,
    pub bp_source: Option<StatSource>,
    pub momentum: Option<f64>,
    pub sma_capacity: Option<usize>,
    pub clip_bound: Option<f64>,
    pub brn_d_max: Option<f64>,
    pub warmup_iters: Option<u64>,
    pub epsilon: Option<f64>,
    pub affine: Option<bool>,
    pub centralize_weights: Option<bool>,
}

impl NormSection {
    pub fn resolve(&self) -> NormVariantConfig {
        let mut c = NormVariantConfig::preset(self.preset.unwrap_or(Preset::Bn));
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field {
                    c.$field = v;
                })*
            };
        }
        apply!(
            form,
            fp_source,
            bp_source,
            momentum,
            sma_capacity,
            clip_bound,
            brn_d_max,
            warmup_iters,
            epsilon,
            affine,
            centralize_weights
        );
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub stack: BenchStackConfig,
    pub options: BenchOptions,
    pub seed: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            stack: BenchStackConfig::default(),
            options: BenchOptions {
                min_rep_secs: 0.2,
                ..BenchOptions::default()
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoremSection {
    pub estimator: McConfig,
    pub gap: GapConfig,
}

/// The whole run configuration. Every field has a default, so `{}` is a
/// BN run at normalization batch 32.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub norm: NormSection,
    pub train: TrainConfig,
    pub bench: BenchSection,
    pub theorem: TheoremSection,
}

impl RunConfigFile {
    /// Parse and validate. Errors name the offending key.
    pub fn parse(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("not valid JSON: {e}")))?;
        if value.pointer("/train/norm").is_some() {
            return Err(Error::Config(
                "train.norm: normalization is set in the top-level `norm` section".into(),
            ));
        }
        let parsed: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        parsed.train_config()?;
        Ok(parsed)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    /// The training configuration with the resolved normalization variant.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            norm: self.norm.resolve(),
            ..self.train.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

pub fn write_json<V: Serialize>(value: &V, path: &Path) -> Result<()> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let text = read_text(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        Error::Format(format!("{}: {at}: {}", path.display(), e.into_inner()))
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    create_parent(path)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(file))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// CSV with header `iter,layer,stat,l2norm`.
pub fn write_trace(trace: &StatTrace, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["iter", "layer", "stat", "l2norm"])
        .map_err(|e| csv_error(path, e))?;
    for r in trace.records() {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<StatTrace> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header = r.headers().map_err(|e| csv_error(path, e))?;
    if header != vec!["iter", "layer", "stat", "l2norm"] {
        return Err(Error::Format(format!(
            "{}: unexpected trace header {header:?}",
            path.display()
        )));
    }
    let mut trace = StatTrace::new();
    for rec in r.deserialize::<TraceRecord>() {
        trace.push_record(rec.map_err(|e| csv_error(path, e))?)?;
    }
    Ok(trace)
}

/// CSV with header `iter,loss,train_err,val_err`; missing values are empty.
pub fn write_curve(curve: &[CurvePoint], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["iter", "loss", "train_err", "val_err"])
        .map_err(|e| csv_error(path, e))?;
    for p in curve {
        w.serialize(p).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .map(|r| r.map_err(|e| csv_error(path, e)))
        .collect()
}

/// A checkpoint at either precision.
#[derive(Debug)]
pub enum Checkpoint {
    F32(TrainState<f32>),
    F64(TrainState<f64>),
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            Checkpoint::F32(s) => write_json(s, path),
            Checkpoint::F64(s) => write_json(s, path),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Peek {
            format_version: u32,
            config: PeekConfig,
        }
        #[derive(Deserialize)]
        struct PeekConfig {
            #[serde(default)]
            precision: Precision,
        }
        let text = read_text(path)?;
        let peek: Peek = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: not a checkpoint: {e}", path.display())))?;
        if peek.format_version != crate::train::CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "{}: checkpoint format_version {} is not supported",
                path.display(),
                peek.format_version
            )));
        }
        Ok(match peek.config.precision {
            Precision::F32 => Checkpoint::F32(read_json(path)?),
            Precision::F64 => Checkpoint::F64(read_json(path)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::StatName;

    #[test]
    fn empty_config_is_the_bn_baseline() {
        let c = RunConfigFile::parse("{}").unwrap();
        let t = c.train_config().unwrap();
        assert_eq!(t.norm, NormVariantConfig::bn());
        assert_eq!((t.grad_batch, t.norm_batch), (32, 32));
    }

    #[test]
    fn presets_take_overrides() {
        let c = RunConfigFile::parse(r#"{"norm": {"preset": "mabn", "sma_capacity": 4}, "train": {"norm_batch": 2}}"#)
            .unwrap();
        let t = c.train_config().unwrap();
        assert_eq!(t.norm.sma_capacity, 4);
        assert_eq!(t.norm.form, NormForm::Modified);
        assert_eq!(t.norm_batch, 2);
    }

    #[test]
    fn errors_name_the_offending_key() {
        let e = RunConfigFile::parse(r#"{"train": {"lr": {"bse": 0.1}}}"#)
            .unwrap_err()
            .to_string();
        assert!(e.contains("train.lr") && e.contains("bse"), "{e}");
        let e = RunConfigFile::parse(r#"{"norm": {"momentum": "high"}}"#)
            .unwrap_err()
            .to_string();
        assert!(e.contains("norm.momentum"), "{e}");
        let e = RunConfigFile::parse(r#"{"train": {"norm_batch": 5}}"#)
            .unwrap_err()
            .to_string();
        assert!(e.contains("normalization batch 5"), "{e}");
        assert!(RunConfigFile::parse(r#"{"train": {"norm": {}}}"#).is_err());
        assert!(RunConfigFile::parse(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn trace_csv_forms() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_trace(&StatTrace::new(), &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "iter,layer,stat,l2norm\n");

        let mut t = StatTrace::new();
        t.record(10, "conv2", &[(StatName::G, &[3.0, 4.0])]).unwrap();
        write_trace(&t, &path).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "iter,layer,stat,l2norm\n10,conv2,g,5.0\n"
        );

        t.record(
            11,
            "conv2",
            &[(StatName::PsiSma, &[0.1, 1e-300]), (StatName::Chi2, &[2.0f64.sqrt()])],
        )
        .unwrap();
        write_trace(&t, &path).unwrap();
        assert_eq!(read_trace(&path).unwrap(), t);
    }

    #[test]
    fn curve_round_trip_keeps_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let curve = vec![
            CurvePoint {
                iter: 0,
                loss: None,
                train_err: Some(0.9),
                val_err: Some(0.875),
            },
            CurvePoint {
                iter: 1,
                loss: Some(2.302585092994046),
                train_err: None,
                val_err: None,
            },
        ];
        write_curve(&curve, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().nth(2), Some("1,2.302585092994046,,"));
        assert_eq!(read_curve(&path).unwrap(), curve);
    }

    #[test]
    fn io_errors_carry_the_path() {
        let e = read_trace(Path::new("/nonexistent/trace.csv")).unwrap_err().to_string();
        assert!(e.contains("/nonexistent/trace.csv"), "{e}");
    }
}
