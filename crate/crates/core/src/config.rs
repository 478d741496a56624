//! Pipeline configuration: `section.key = value` lines, `#` comments.
//!
//! Values are layered: built-in defaults, then a config file, then
//! `GATSPOOF_<SECTION>__<KEY>` environment variables, then command-line
//! overrides. Unknown keys are errors at every layer.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::encoder::{BlockSpec, ConvSpec, EncoderConfig, PoolSpec};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, MaskFill, WindowKind};
use crate::fusion::SvmConfig;
use crate::metrics::TdcfCosts;
use crate::model::{ModelConfig, System};
use crate::training::TrainConfig;

pub const ENV_PREFIX: &str = "GATSPOOF_";

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("run.seed", "0", "seed for weight init, shuffling and masks"),
    ("run.workers", "1", "threads for extraction and scoring"),
    ("features.n_bands", "60", "filterbank bands"),
    ("features.win_ms", "30", "analysis window length"),
    ("features.hop_ms", "10", "frame shift"),
    ("features.n_fft", "512", "FFT size"),
    ("features.window", "hann", "hann or rectangular"),
    ("features.log_floor", "1e-30", "floor applied before the log"),
    ("features.target_len", "64600", "samples per utterance after truncation/tiling"),
    ("encoder.stem_filters", "64", "channels of the first convolution"),
    ("encoder.stem_kernel", "3x3", "first convolution kernel"),
    ("encoder.stem_stride", "1x2", "first convolution stride"),
    ("encoder.stem_padding", "3x3", "first convolution zero padding"),
    ("encoder.pool_kernel", "3x3", "max-pool kernel"),
    ("encoder.pool_stride", "2x2", "max-pool stride"),
    ("encoder.pool_padding", "1x1", "max-pool padding"),
    ("encoder.block_filters", "64,128,256,512", "residual block widths"),
    ("encoder.block_strides", "1x1,2x2,2x2,2x2", "residual block strides"),
    ("encoder.grid", "3x5", "final (freq x time) average grid"),
    ("model.system", "gat_t", "gat_t, gat_s, resnet_sp, resnet_sap or resnet_asp"),
    ("model.gat_dim", "128", "GAT projection width"),
    ("model.attention_dim", "128", "SAP/ASP attention hidden width"),
    ("train.lr", "0.0001", "Adam learning rate"),
    ("train.weight_decay", "0.0001", "weight decay"),
    ("train.decoupled_weight_decay", "false", "decay weights directly instead of via the gradient"),
    ("train.batch_size", "64", "mini-batch size"),
    ("train.epochs", "300", "training epochs"),
    ("train.max_mask_width", "12", "widest frequency mask in bands"),
    ("train.mask_fill", "mean", "mean or zero"),
    ("train.bn_momentum", "0.1", "batch-norm running-statistics momentum"),
    ("tdcf.pi_tar", "0.9405", "target prior"),
    ("tdcf.pi_non", "0.0095", "non-target prior"),
    ("tdcf.pi_spoof", "0.05", "spoof prior"),
    ("tdcf.c_miss_asv", "1", "ASV miss cost"),
    ("tdcf.c_fa_asv", "10", "ASV false-alarm cost"),
    ("tdcf.c_miss_cm", "1", "CM miss cost"),
    ("tdcf.c_fa_cm", "10", "CM false-alarm cost"),
    ("tdcf.p_fa_asv", "0.01", "ASV false-alarm rate at its operating point"),
    ("tdcf.p_miss_asv", "0.01", "ASV miss rate at its operating point"),
    ("tdcf.p_miss_spoof_asv", "0.5", "ASV miss rate on spoofs at its operating point"),
    ("fusion.c", "1.0", "SVM soft-margin constant"),
    ("fusion.tol", "1e-6", "SVM stopping tolerance"),
    ("fusion.max_iter", "1000000", "SVM iteration cap"),
    ("paths.train_protocol", "train.protocol", "training protocol"),
    ("paths.train_features", "train.lfb", "training feature cache"),
    ("paths.dev_protocol", "dev.protocol", "development protocol"),
    ("paths.dev_features", "dev.lfb", "development feature cache"),
    ("paths.checkpoint", "model.ckpt", "best checkpoint written by training"),
    ("paths.log", "train_log.csv", "per-epoch training log"),
];

/// Raw key/value layer plus typed accessors.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    values: BTreeMap<String, String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn is_known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !is_known(key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn merge_str(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let t = line.split('#').next().unwrap_or("").trim();
            if t.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let (k, v) = t.split_once('=').ok_or_else(|| err("expected `section.key = value`".into()))?;
            self.set(k.trim(), v).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.merge_str(&text, &path.display().to_string())
    }

    /// Apply `GATSPOOF_SECTION__KEY=value` pairs.
    pub fn merge_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let key = rest.to_ascii_lowercase().replacen("__", ".", 1);
            self.set(&key, &value).map_err(|_| Error::Config(format!("environment variable {name} names no config key")))?;
        }
        Ok(())
    }

    fn raw(&self, key: &str) -> &str {
        self.get(key).expect("every registered key has a default")
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse().map_err(|_| Error::Config(format!("`{key}` has invalid value `{v}`")))
    }

    fn pair(&self, key: &str) -> Result<(usize, usize)> {
        parse_pair(self.raw(key)).ok_or_else(|| Error::Config(format!("`{key}` must look like 3x5, got `{}`", self.raw(key))))
    }

    fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.raw(key))
    }

    /// Parse and cross-check every key.
    pub fn resolve(&self) -> Result<Resolved> {
        let features = FeatureConfig {
            n_bands: self.parse("features.n_bands")?,
            win_ms: self.parse("features.win_ms")?,
            hop_ms: self.parse("features.hop_ms")?,
            n_fft: self.parse("features.n_fft")?,
            window: self.parse::<WindowKind>("features.window")?,
            log_floor: self.parse("features.log_floor")?,
        };
        crate::features::LfbExtractor::new(features.clone(), crate::audio::PIPELINE_SAMPLE_RATE)
            .map_err(|e| Error::Config(format!("feature settings: {e}")))?;
        let filters: Vec<usize> = list(self.raw("encoder.block_filters"), |s| s.parse().ok())
            .ok_or_else(|| Error::Config("`encoder.block_filters` must be a comma-separated list".into()))?;
        let strides: Vec<(usize, usize)> = list(self.raw("encoder.block_strides"), parse_pair)
            .ok_or_else(|| Error::Config("`encoder.block_strides` must be a comma-separated list of AxB".into()))?;
        if filters.len() != strides.len() {
            return Err(Error::Config("`encoder.block_filters` and `encoder.block_strides` differ in length".into()));
        }
        let encoder = EncoderConfig {
            in_channels: 1,
            stem: ConvSpec {
                kernel: self.pair("encoder.stem_kernel")?,
                filters: self.parse("encoder.stem_filters")?,
                stride: self.pair("encoder.stem_stride")?,
                padding: self.pair("encoder.stem_padding")?,
            },
            pool: PoolSpec {
                kernel: self.pair("encoder.pool_kernel")?,
                stride: self.pair("encoder.pool_stride")?,
                padding: self.pair("encoder.pool_padding")?,
            },
            blocks: filters.into_iter().zip(strides).map(|(filters, stride)| BlockSpec { filters, stride }).collect(),
            grid: self.pair("encoder.grid")?,
        };
        encoder.validate()?;
        let system: System = self.parse("model.system")?;
        let seed: u64 = self.parse("run.seed")?;
        let model = ModelConfig {
            system,
            encoder,
            gat_dim: self.parse("model.gat_dim")?,
            attention_dim: self.parse("model.attention_dim")?,
        };
        let train = TrainConfig {
            lr: self.parse("train.lr")?,
            weight_decay: self.parse("train.weight_decay")?,
            decoupled_weight_decay: self.parse("train.decoupled_weight_decay")?,
            batch_size: self.parse("train.batch_size")?,
            epochs: self.parse("train.epochs")?,
            seed,
            system,
            max_mask_width: self.parse("train.max_mask_width")?,
            mask_fill: self.parse::<MaskFill>("train.mask_fill")?,
            bn_momentum: self.parse("train.bn_momentum")?,
        };
        train.validate()?;
        if train.max_mask_width > features.n_bands {
            return Err(Error::Config("`train.max_mask_width` exceeds `features.n_bands`".into()));
        }
        let tdcf = TdcfCosts {
            pi_tar: self.parse("tdcf.pi_tar")?,
            pi_non: self.parse("tdcf.pi_non")?,
            pi_spoof: self.parse("tdcf.pi_spoof")?,
            c_miss_asv: self.parse("tdcf.c_miss_asv")?,
            c_fa_asv: self.parse("tdcf.c_fa_asv")?,
            c_miss_cm: self.parse("tdcf.c_miss_cm")?,
            c_fa_cm: self.parse("tdcf.c_fa_cm")?,
            p_fa_asv: self.parse("tdcf.p_fa_asv")?,
            p_miss_asv: self.parse("tdcf.p_miss_asv")?,
            p_miss_spoof_asv: self.parse("tdcf.p_miss_spoof_asv")?,
        };
        tdcf.coefficients()?;
        let svm = SvmConfig {
            c: self.parse("fusion.c")?,
            tol: self.parse("fusion.tol")?,
            max_iter: self.parse("fusion.max_iter")?,
        };
        let workers: usize = self.parse("run.workers")?;
        let target_len: usize = self.parse("features.target_len")?;
        if workers == 0 || target_len == 0 {
            return Err(Error::Config("`run.workers` and `features.target_len` must be positive".into()));
        }
        Ok(Resolved {
            seed,
            workers,
            target_len,
            features,
            model,
            train,
            tdcf,
            svm,
            paths: Paths {
                train_protocol: self.path("paths.train_protocol"),
                train_features: self.path("paths.train_features"),
                dev_protocol: self.path("paths.dev_protocol"),
                dev_features: self.path("paths.dev_features"),
                checkpoint: self.path("paths.checkpoint"),
                log: self.path("paths.log"),
            },
        })
    }

    /// The full key table with current values, in file syntax.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (k, _, doc) in KEYS {
            let s = k.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = s;
            }
            let _ = writeln!(out, "{k} = {}  # {doc}", self.raw(k));
        }
        out
    }
}

/// Help text listing every key with its default.
pub fn keys_help() -> String {
    let mut out = String::from("Configuration keys (default in brackets):\n");
    for (k, v, doc) in KEYS {
        let _ = writeln!(out, "  {k:<32} [{v}]  {doc}");
    }
    let _ = writeln!(out, "\nAny key can also be set through {ENV_PREFIX}<SECTION>__<KEY>, e.g. {ENV_PREFIX}TRAIN__LR=0.001.");
    out
}

fn parse_pair(s: &str) -> Option<(usize, usize)> {
    let (a, b) = s.trim().split_once('x')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

fn list<T>(s: &str, f: impl Fn(&str) -> Option<T>) -> Option<Vec<T>> {
    s.split(',').map(|p| f(p.trim())).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub train_protocol: PathBuf,
    pub train_features: PathBuf,
    pub dev_protocol: PathBuf,
    pub dev_features: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Typed view of a validated configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub seed: u64,
    pub workers: usize,
    pub target_len: usize,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tdcf: TdcfCosts,
    pub svm: SvmConfig,
    pub paths: Paths,
}
