//! Flat `key = value` run configuration with strict keys and two presets.
//!
//! Each stage has a fixed key set. A file or `--set` override naming any other
//! key is rejected. The `preset` key (`full` or `desk`) selects the defaults
//! that the remaining keys override; the resolved view is written back out as
//! `config.resolved` and into checkpoints.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::checkpoint::Container;
use crate::codec::CodecConfig;
use crate::coordinator::StackConfig;
use crate::error::{Error, Result};
use crate::metrics::ExtractorConfig;
use crate::partition::{PartId, PartitionScheme};
use crate::trainer::{AugmentationConfig, GeneratorOptions, LrSchedule, OptimizerConfig, VqvaeOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Vqvae,
    Generator,
    Extractor,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Vqvae => "vqvae",
            Stage::Generator => "generator",
            Stage::Extractor => "extractor",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Full,
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected full or desk)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Full => "full",
            Preset::Desk => "desk",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Uint,
    Float,
    Bool,
    /// A step index or `auto` (60% of `steps`).
    StepOrAuto,
    Preset,
}

impl Kind {
    fn check(self, key: &str, v: &str) -> Result<()> {
        let ok = match self {
            Kind::Uint => v.parse::<u64>().is_ok(),
            Kind::Float => v.parse::<f64>().map_or(false, f64::is_finite),
            Kind::Bool => matches!(v, "true" | "false"),
            Kind::StepOrAuto => v == "auto" || v.parse::<u64>().is_ok(),
            Kind::Preset => v.parse::<Preset>().is_ok(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid value {v:?} for key `{key}`")))
        }
    }
}

type Entry = (&'static str, Kind, &'static str, &'static str);

// (key, kind, full default, desk default)
const OPTIMIZER_KEYS: [Entry; 8] = [
    ("seed", Kind::Uint, "0", "0"),
    ("beta1", Kind::Float, "0.9", "0.9"),
    ("beta2", Kind::Float, "0.99", "0.99"),
    ("weight_decay", Kind::Float, "0.0001", "0.0001"),
    ("grad_clip", Kind::Float, "1", "1"),
    ("lr_drop_step", Kind::StepOrAuto, "auto", "auto"),
    ("log_every", Kind::Uint, "10", "10"),
    ("eps", Kind::Float, "0.00000001", "0.00000001"),
];

const VQVAE_KEYS: [Entry; 15] = [
    ("steps", Kind::Uint, "300000", "5000"),
    ("batch_size", Kind::Uint, "256", "8"),
    ("lr", Kind::Float, "0.0002", "0.002"),
    ("lr_final", Kind::Float, "0.00001", "0.0002"),
    ("codebook_size", Kind::Uint, "512", "128"),
    ("code_dim", Kind::Uint, "128", "32"),
    ("width", Kind::Uint, "128", "32"),
    ("root_code_dim", Kind::Uint, "64", "32"),
    ("root_width", Kind::Uint, "64", "32"),
    ("res_blocks", Kind::Uint, "2", "1"),
    ("downsample", Kind::Uint, "4", "4"),
    ("commitment_weight", Kind::Float, "1", "1"),
    ("velocity_weight", Kind::Float, "0.5", "0.5"),
    ("window", Kind::Uint, "64", "64"),
    ("reset_every", Kind::Uint, "256", "256"),
];

const GENERATOR_KEYS: [Entry; 18] = [
    ("steps", Kind::Uint, "300000", "5000"),
    ("batch_size", Kind::Uint, "128", "8"),
    ("lr", Kind::Float, "0.0001", "0.001"),
    ("lr_final", Kind::Float, "0.000005", "0.0001"),
    ("model_dim", Kind::Uint, "256", "32"),
    ("layers", Kind::Uint, "14", "2"),
    ("heads", Kind::Uint, "4", "2"),
    ("ffn_mult", Kind::Uint, "4", "2"),
    ("dropout", Kind::Float, "0.1", "0.1"),
    ("text_dim", Kind::Uint, "128", "32"),
    ("text_buckets", Kind::Uint, "2048", "256"),
    ("max_tokens", Kind::Uint, "49", "49"),
    ("coordination", Kind::Bool, "true", "true"),
    ("token_corrupt_prob", Kind::Float, "0.1", "0.1"),
    ("part_mask_prob", Kind::Float, "0.15", "0.15"),
    ("eval_every", Kind::Uint, "10000", "1000"),
    ("eval_samples", Kind::Uint, "256", "32"),
    ("val_every", Kind::Uint, "10000", "500"),
];

const EXTRACTOR_KEYS: [Entry; 8] = [
    ("steps", Kind::Uint, "20000", "2000"),
    ("batch_size", Kind::Uint, "64", "32"),
    ("lr", Kind::Float, "0.001", "0.001"),
    ("lr_final", Kind::Float, "0.0001", "0.0001"),
    ("hidden", Kind::Uint, "64", "64"),
    ("feature_dim", Kind::Uint, "64", "64"),
    ("text_buckets", Kind::Uint, "1024", "1024"),
    ("margin", Kind::Float, "1", "1"),
];

fn schema(stage: Stage) -> Vec<Entry> {
    let mut keys = vec![("preset", Kind::Preset, "full", "desk")];
    keys.extend(match stage {
        Stage::Vqvae => VQVAE_KEYS.to_vec(),
        Stage::Generator => GENERATOR_KEYS.to_vec(),
        Stage::Extractor => EXTRACTOR_KEYS.to_vec(),
    });
    let mut opt = OPTIMIZER_KEYS.to_vec();
    match stage {
        Stage::Vqvae => opt[5].2 = "200000",
        Stage::Generator => {
            opt[1].2 = "0.5";
            opt[1].3 = "0.5";
            opt[5].2 = "150000";
        }
        Stage::Extractor => {}
    }
    keys.extend(opt);
    keys
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub stage: Stage,
    pub preset: Preset,
    entries: Vec<(&'static str, String)>,
}

/// Parses `key = value` lines; `#` starts a comment.
fn parse_pairs(text: &str, context: &str) -> Result<Vec<(String, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{context}:{}: expected `key = value`", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string(), format!("{context}:{}", i + 1)));
    }
    Ok(out)
}

impl RunConfig {
    pub fn defaults(stage: Stage, preset: Preset) -> Self {
        let entries = schema(stage)
            .into_iter()
            .map(|(k, _, full, desk)| (k, if preset == Preset::Full { full } else { desk }.to_string()))
            .collect();
        RunConfig { stage, preset, entries }
    }

    /// Resolves a configuration from optional file text and `key=value`
    /// overrides (applied after the file). Unknown or repeated keys are errors.
    pub fn resolve(stage: Stage, file: Option<(&str, &str)>, overrides: &[String]) -> Result<Self> {
        let mut pairs = match file {
            Some((text, context)) => parse_pairs(text, context)?,
            None => Vec::new(),
        };
        let mut seen = std::collections::HashSet::new();
        for (k, _, at) in &pairs {
            if !seen.insert(k.clone()) {
                return Err(Error::Config(format!("{at}: key `{k}` given twice")));
            }
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string(), "--set".to_string()));
        }
        let keys = schema(stage);
        for (k, v, at) in &pairs {
            let (_, kind, _, _) = keys
                .iter()
                .find(|e| e.0 == k)
                .ok_or_else(|| Error::Config(format!("{at}: unknown key `{k}` for the {} stage", stage.name())))?;
            kind.check(k, v)?;
        }
        let preset = match pairs.iter().rev().find(|p| p.0 == "preset") {
            Some((_, v, _)) => v.parse()?,
            None => Preset::Full,
        };
        let mut cfg = RunConfig::defaults(stage, preset);
        for (k, v, _) in pairs {
            let slot = cfg.entries.iter_mut().find(|e| e.0 == k).expect("key checked against schema");
            slot.1 = v;
        }
        Ok(cfg)
    }

    pub fn load(stage: Stage, path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::resolve(stage, Some((&text, &p.display().to_string())), overrides)
            }
            None => Self::resolve(stage, None, overrides),
        }
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.entries
            .iter()
            .find(|e| e.0 == key)
            .map(|e| e.1.as_str())
            .ok_or_else(|| Error::Config(format!("key `{key}` does not apply to the {} stage", self.stage.name())))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key)?;
        v.parse().map_err(|_| Error::Config(format!("invalid value {v:?} for key `{key}`")))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (*k, v.as_str()))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# resolved {} configuration\n", self.stage.name());
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.resolved");
        std::fs::write(&p, self.to_text()).map_err(|e| Error::io(&p, e))
    }

    pub fn push_meta(&self, c: &mut Container) {
        for (k, v) in self.entries() {
            c.push_meta(&format!("config.{k}"), v);
        }
    }

    pub fn optimizer(&self) -> Result<OptimizerConfig> {
        let steps: u64 = self.get("steps")?;
        let drop_step = match self.raw("lr_drop_step")? {
            "auto" => steps * 3 / 5,
            v => v.parse().map_err(|_| Error::Config(format!("invalid lr_drop_step {v:?}")))?,
        };
        let clip: f64 = self.get("grad_clip")?;
        let cfg = OptimizerConfig {
            beta1: self.get("beta1")?,
            beta2: self.get("beta2")?,
            eps: self.get("eps")?,
            weight_decay: self.get("weight_decay")?,
            schedule: LrSchedule { initial: self.get("lr")?, drop_step, final_lr: self.get("lr_final")? },
            batch_size: self.get("batch_size")?,
            total_steps: steps,
            seed: self.get("seed")?,
            grad_clip: if clip > 0.0 { Some(clip) } else { None },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Codec settings for every part of `scheme`, in canonical order.
    pub fn codec_configs(&self, scheme: &PartitionScheme) -> Result<Vec<CodecConfig>> {
        scheme
            .parts
            .iter()
            .map(|spec| {
                let root = spec.part == PartId::Root;
                let cfg = CodecConfig {
                    input_dim: spec.columns.len(),
                    codebook_size: self.get("codebook_size")?,
                    code_dim: self.get(if root { "root_code_dim" } else { "code_dim" })?,
                    downsample: self.get("downsample")?,
                    commitment_weight: self.get("commitment_weight")?,
                    velocity_weight: self.get("velocity_weight")?,
                    width: self.get(if root { "root_width" } else { "width" })?,
                    res_blocks: self.get("res_blocks")?,
                };
                cfg.validate()?;
                Ok(cfg)
            })
            .collect()
    }

    pub fn vqvae_options(&self) -> Result<VqvaeOptions> {
        Ok(VqvaeOptions {
            window: self.get("window")?,
            reset_every: self.get("reset_every")?,
            reset_threshold: 1,
            log_every: self.get("log_every")?,
        })
    }

    /// Generator settings; the vocabulary comes from the frozen codecs.
    pub fn stack_config(&self, vocab: usize) -> Result<StackConfig> {
        let cfg = StackConfig {
            vocab,
            model_dim: self.get("model_dim")?,
            layers: self.get("layers")?,
            heads: self.get("heads")?,
            ffn_mult: self.get("ffn_mult")?,
            dropout: self.get("dropout")?,
            max_tokens: self.get("max_tokens")?,
            text_dim: self.get("text_dim")?,
            text_buckets: self.get("text_buckets")?,
            coordination: self.get("coordination")?,
            ..StackConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn augmentation(&self) -> Result<AugmentationConfig> {
        let a = AugmentationConfig {
            token_corrupt_prob: self.get("token_corrupt_prob")?,
            part_mask_prob: self.get("part_mask_prob")?,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn generator_options(&self) -> Result<GeneratorOptions> {
        Ok(GeneratorOptions {
            eval_every: self.get("eval_every")?,
            log_every: self.get("log_every")?,
            val_every: self.get("val_every")?,
        })
    }

    pub fn extractor_config(&self, motion_dim: usize) -> Result<ExtractorConfig> {
        Ok(ExtractorConfig {
            motion_dim,
            hidden: self.get("hidden")?,
            feature_dim: self.get("feature_dim")?,
            text_buckets: self.get("text_buckets")?,
            margin: self.get("margin")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_full_preset() {
        let v = RunConfig::resolve(Stage::Vqvae, None, &[]).unwrap();
        assert!(v.to_text().contains("codebook_size = 512\n"));
        let g = RunConfig::resolve(Stage::Generator, None, &[]).unwrap().to_text();
        assert!(g.contains("layers = 14\n") && g.contains("model_dim = 256\n"));
    }

    #[test]
    fn strict_keys() {
        let e = RunConfig::resolve(Stage::Vqvae, Some(("foo = 1\n", "c.cfg")), &[]).unwrap_err();
        assert!(e.to_string().contains("`foo`"));
        assert!(RunConfig::resolve(Stage::Vqvae, Some(("steps = 1\nsteps = 2\n", "c")), &[]).is_err());
        assert!(RunConfig::resolve(Stage::Vqvae, Some(("steps = many", "c")), &[]).is_err());
        assert!(RunConfig::resolve(Stage::Vqvae, None, &["layers=2".into()]).is_err());
    }

    #[test]
    fn overrides_and_presets() {
        let text = "# desk run\npreset = desk\nsteps = 100 # short\n";
        let c = RunConfig::resolve(Stage::Generator, Some((text, "c")), &["steps=50".into()]).unwrap();
        assert_eq!(c.get::<u64>("steps").unwrap(), 50);
        assert_eq!(c.get::<usize>("model_dim").unwrap(), 32);
        let o = c.optimizer().unwrap();
        assert_eq!((o.schedule.drop_step, o.beta1), (30, 0.5));
        let full = RunConfig::resolve(Stage::Vqvae, None, &[]).unwrap();
        let o = full.optimizer().unwrap();
        assert_eq!(o.schedule.lr_at(199_999), 2e-4);
        assert_eq!(o.schedule.lr_at(200_000), 1e-5);
    }
}
