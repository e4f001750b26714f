//! Run configuration: a flat `key = value` file with dotted keys.
//!
//! Every key has a default; files and `--key=value` overrides may only set
//! known keys. Relative paths resolve against the config file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::acoustic::{ConvSpec, EncoderConfig, MaskSpec, PretrainConfig};
use crate::checkpoint::config_hash;
use crate::corpus::{SplitSizes, SynthSpec};
use crate::error::{Error, Result};
use crate::infer::{DecodeConfig, LengthPenalty};
use crate::lm::NeuralLmConfig;
use crate::numerics::ScheduleKind;
use crate::seed;
use crate::selftrain::{MixRule, SelfTrainPlan};
use crate::translator::{DecoderConfig, TrainConfig};

const BASE_DEFAULTS: &[(&str, &str)] = &[
    ("run_dir", "run"),
    ("seed", "1"),
    ("data.source_vocab", "12"),
    ("data.frames_per_char", "8"),
    ("data.noise_sigma", "0.7"),
    ("data.feature_dim", "16"),
    ("data.min_words", "4"),
    ("data.max_words", "8"),
    ("data.general_overlap", "0.1"),
    ("data.labeled_train", "300"),
    ("data.unlabeled_pool", "1000"),
    ("data.dev", "150"),
    ("data.test", "150"),
    ("data.lm_in_domain", "1000"),
    ("data.lm_general", "10000"),
    ("bpe.merges", "40"),
    ("encoder.conv_kernels", "3,3"),
    ("encoder.conv_strides", "2,2"),
    ("encoder.conv_channels", "32"),
    ("encoder.dim", "32"),
    ("encoder.layers", "2"),
    ("encoder.heads", "2"),
    ("encoder.inner", "64"),
    ("encoder.max_positions", "512"),
    ("decoder.dim", "32"),
    ("decoder.layers", "1"),
    ("decoder.heads", "2"),
    ("decoder.inner", "64"),
    ("decoder.max_positions", "256"),
    ("pretrain.updates", "6000"),
    ("pretrain.batch_size", "8"),
    ("pretrain.lr", "0.01"),
    ("pretrain.warmup", "20"),
    ("pretrain.mask_prob", "0.15"),
    ("pretrain.mask_len", "5"),
    ("pretrain.distractors", "10"),
    ("pretrain.temperature", "0.1"),
    ("pretrain.codebook_size", "64"),
    ("pretrain.ema_decay", "0.9"),
    ("pretrain.clip_norm", "5"),
    ("selftrain.pseudo_beam", "4"),
    ("selftrain.mix_rule", "sampling"),
    ("selftrain.final_finetune", "true"),
    ("ngram.order", "4"),
    ("filter.keep_fraction", "0.1"),
    ("lm.dim", "64"),
    ("lm.layers", "2"),
    ("lm.heads", "4"),
    ("lm.inner", "256"),
    ("lm.context", "128"),
    ("lm.lr", "0.002"),
    ("lm.warmup", "100"),
    ("lm.updates", "600"),
    ("lm.tokens_per_batch", "600"),
    ("lm.clip_norm", "10"),
    ("lm.eval_every", "100"),
    ("decode.beam", "5"),
    ("decode.lm_weight", "0.1"),
    ("decode.length_penalty", "0.7"),
    ("decode.penalty_form", "power"),
    ("decode.max_len", "64"),
];

/// Keys shared by the teacher, student and final fine-tune sections.
const TRAIN_KEYS: &[&str] = &[
    "lr",
    "schedule",
    "warmup",
    "label_smooth",
    "encoder_freeze_updates",
    "layer_drop",
    "mask_prob",
    "mask_len",
    "max_updates",
    "tokens_per_batch",
    "accumulation",
    "checkpoint_fraction",
    "dev_beam",
    "clip_norm",
];

fn train_defaults(section: &str) -> [&'static str; 14] {
    let (lr, warmup, freeze, updates) = match section {
        "teacher" => ("0.001", "200", "0", "2500"),
        "student" => ("0.0006", "400", "0", "4000"),
        _ => ("0.0006", "50", "0", "600"),
    };
    [
        lr, "inverse_sqrt", warmup, "0.1", freeze, "0.05", "0.15", "5", updates, "200", "1", "0.1", "1", "10",
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut values: BTreeMap<String, String> = BASE_DEFAULTS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        for section in ["teacher", "student", "finetune"] {
            for (k, v) in TRAIN_KEYS.iter().zip(train_defaults(section)) {
                values.insert(format!("{section}.{k}"), v.to_string());
            }
        }
        Self {
            values,
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self {
            base_dir: origin.parent().map(Path::to_path_buf).unwrap_or_default(),
            ..Self::default()
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key = value", origin.display(), i + 1))
            })?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("{}:{}: {}", origin.display(), i + 1, strip(e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        Self::parse(&text, path)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key '{key}'"))),
        }
    }

    /// Applies `--key=value` (or `key=value`) overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, args: &[S]) -> Result<()> {
        for a in args {
            let a = a.as_ref();
            let body = a.strip_prefix("--").unwrap_or(a);
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{a}' is not of the form --key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("cannot parse {key} = '{raw}'")))
    }

    fn list(&self, key: &str) -> Result<Vec<usize>> {
        let raw = self.raw(key)?;
        raw.split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("cannot parse {key} = '{raw}'"))))
            .collect()
    }

    /// `key` as a path, relative ones joined onto `base_dir`.
    pub fn path(&self, key: &str) -> Result<PathBuf> {
        let p = PathBuf::from(self.raw(key)?);
        Ok(if p.is_absolute() { p } else { self.base_dir.join(p) })
    }

    pub fn run_dir(&self) -> Result<PathBuf> {
        self.path("run_dir")
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    /// Sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hash of the seed plus every key under the given sections.
    pub fn section_hash(&self, sections: &[&str]) -> u64 {
        let mut text = format!("seed = {}\n", self.values["seed"]);
        for (k, v) in &self.values {
            if sections.iter().any(|s| k.starts_with(&format!("{s}."))) {
                text.push_str(&format!("{k} = {v}\n"));
            }
        }
        config_hash(&text)
    }

    /// Child seed of the run seed for one stage.
    pub fn stage_seed(&self, stage: &str) -> Result<u64> {
        Ok(seed::child_seed(self.seed()?, stage))
    }

    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let sizes = SplitSizes {
            labeled_train: self.get("data.labeled_train")?,
            unlabeled_pool: self.get("data.unlabeled_pool")?,
            dev: self.get("data.dev")?,
            test: self.get("data.test")?,
            lm_in_domain: self.get("data.lm_in_domain")?,
            lm_general: self.get("data.lm_general")?,
        };
        let mut spec = SynthSpec::new(
            self.stage_seed("data")?,
            self.get("data.source_vocab")?,
            self.get("data.frames_per_char")?,
            self.get("data.noise_sigma")?,
            self.get("data.feature_dim")?,
            (self.get("data.min_words")?, self.get("data.max_words")?),
            sizes,
        )
        .map_err(config_err)?;
        spec.general_overlap = self.get("data.general_overlap")?;
        spec.validate().map_err(config_err)?;
        Ok(spec)
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        let cfg = EncoderConfig {
            input_dim: self.get("data.feature_dim")?,
            conv: ConvSpec::new(
                &self.list("encoder.conv_kernels")?,
                &self.list("encoder.conv_strides")?,
                self.get("encoder.conv_channels")?,
            )
            .map_err(config_err)?,
            dim: self.get("encoder.dim")?,
            layers: self.get("encoder.layers")?,
            heads: self.get("encoder.heads")?,
            inner: self.get("encoder.inner")?,
            layer_drop: self.get("teacher.layer_drop")?,
            max_positions: self.get("encoder.max_positions")?,
        };
        cfg.validate().map_err(config_err)?;
        Ok(cfg)
    }

    pub fn decoder(&self) -> Result<DecoderConfig> {
        Ok(DecoderConfig {
            dim: self.get("decoder.dim")?,
            layers: self.get("decoder.layers")?,
            heads: self.get("decoder.heads")?,
            inner: self.get("decoder.inner")?,
            max_positions: self.get("decoder.max_positions")?,
        })
    }

    pub fn pretrain(&self) -> Result<PretrainConfig> {
        Ok(PretrainConfig {
            updates: self.get("pretrain.updates")?,
            batch_size: self.get("pretrain.batch_size")?,
            lr: self.get("pretrain.lr")?,
            warmup: self.get("pretrain.warmup")?,
            mask: MaskSpec::new(self.get("pretrain.mask_prob")?, self.get("pretrain.mask_len")?).map_err(config_err)?,
            distractors: self.get("pretrain.distractors")?,
            temperature: self.get("pretrain.temperature")?,
            codebook_size: self.get("pretrain.codebook_size")?,
            ema_decay: self.get("pretrain.ema_decay")?,
            clip_norm: self.get("pretrain.clip_norm")?,
            seed: self.stage_seed("pretrain")?,
        })
    }

    /// Training hyperparameters of section `teacher`, `student` or `finetune`.
    pub fn train(&self, section: &str) -> Result<TrainConfig> {
        let k = |name: &str| format!("{section}.{name}");
        let schedule = match self.raw(&k("schedule"))? {
            "inverse_sqrt" => ScheduleKind::InverseSqrt,
            "constant" => ScheduleKind::Constant,
            other => return Err(Error::Config(format!("unknown schedule '{other}'"))),
        };
        let cfg = TrainConfig {
            lr: self.get(&k("lr"))?,
            schedule,
            warmup: self.get(&k("warmup"))?,
            label_smooth: self.get(&k("label_smooth"))?,
            encoder_freeze_updates: self.get(&k("encoder_freeze_updates"))?,
            layer_drop: self.get(&k("layer_drop"))?,
            mask: MaskSpec::new(self.get(&k("mask_prob"))?, self.get(&k("mask_len"))?).map_err(config_err)?,
            max_updates: self.get(&k("max_updates"))?,
            tokens_per_batch: self.get(&k("tokens_per_batch"))?,
            accumulation: self.get(&k("accumulation"))?,
            checkpoint_fraction: self.get(&k("checkpoint_fraction"))?,
            dev_beam: self.get(&k("dev_beam"))?,
            clip_norm: self.get(&k("clip_norm"))?,
            seed: self.stage_seed(section)?,
        };
        cfg.validate().map_err(config_err)?;
        Ok(cfg)
    }

    pub fn selftrain(&self) -> Result<SelfTrainPlan> {
        let rule = self.raw("selftrain.mix_rule")?;
        Ok(SelfTrainPlan {
            pseudo_beam: self.get("selftrain.pseudo_beam")?,
            mix_rule: MixRule::parse(rule).ok_or_else(|| Error::Config(format!("unknown mix rule '{rule}'")))?,
            student: self.train("student")?,
            finetune: self.train("finetune")?,
            final_finetune: self.get("selftrain.final_finetune")?,
        })
    }

    pub fn neural_lm(&self) -> Result<NeuralLmConfig> {
        let cfg = NeuralLmConfig {
            dim: self.get("lm.dim")?,
            layers: self.get("lm.layers")?,
            heads: self.get("lm.heads")?,
            inner: self.get("lm.inner")?,
            context: self.get("lm.context")?,
            lr: self.get("lm.lr")?,
            warmup: self.get("lm.warmup")?,
            updates: self.get("lm.updates")?,
            tokens_per_batch: self.get("lm.tokens_per_batch")?,
            clip_norm: self.get("lm.clip_norm")?,
            eval_every: self.get("lm.eval_every")?,
            seed: self.stage_seed("lm")?,
        };
        cfg.validate().map_err(config_err)?;
        Ok(cfg)
    }

    pub fn decode(&self) -> Result<DecodeConfig> {
        let form = match self.raw("decode.penalty_form")? {
            "power" => LengthPenalty::Power,
            "gnmt" => LengthPenalty::Gnmt,
            other => return Err(Error::Config(format!("unknown penalty form '{other}'"))),
        };
        let cfg = DecodeConfig {
            beam: self.get("decode.beam")?,
            lm_weight: self.get("decode.lm_weight")?,
            length_penalty: self.get("decode.length_penalty")?,
            penalty_form: form,
            max_len: self.get("decode.max_len")?,
        };
        cfg.validate().map_err(config_err)?;
        Ok(cfg)
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

fn config_err(e: Error) -> Error {
    Error::Config(strip(e))
}
