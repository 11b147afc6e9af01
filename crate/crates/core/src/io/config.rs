//! Plain-text `key = value` run configuration.
//!
//! Resolution order, later wins: built-in defaults, config file,
//! `SPIKEATTACK_<KEY>` environment variables, command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::attacks::{AttackConfig, AttackKind};
use crate::convert::{Balance, ConvertConfig};
use crate::error::{Error, Result};
use crate::harness::SweepConfig;
use crate::snn::NeuronConfig;
use crate::surrogate::{FastSigmoidForm, PweForm, SurrogateKind, SurrogateSpec};
use crate::train::{Optimizer, TrainConfig};

pub const ENV_PREFIX: &str = "SPIKEATTACK_";

/// Every accepted key with its default.
pub const KEYS: &[(&str, &str)] = &[
    ("alpha", ""),
    ("arch", "snn_mlp"),
    ("attack", "pgd"),
    ("attacks", "fgsm,pgd,mim"),
    ("balance", "weight"),
    ("batch_size", "32"),
    ("beta", "5.0"),
    ("calib_n", "500"),
    ("coef_lr", "10000"),
    ("convert_timesteps", "16"),
    ("dataset", "data/mnist"),
    ("decay", "0.5"),
    ("embed", "32"),
    ("epochs", "4"),
    ("eps", "0.031"),
    ("eps_step", "0.01"),
    ("eval_n", "200"),
    ("fast_sigmoid_form", "literal"),
    ("finetune_epochs", "1"),
    ("finetune_lr", "0.0001"),
    ("fit", "1.0"),
    ("heads", "2"),
    ("hidden", "128"),
    ("iterations", "40"),
    ("jobs", "0"),
    ("kappa", "0.0"),
    ("layers", "2"),
    ("leak", "0.9"),
    ("lr", "0.001"),
    ("mlp_hidden", "64"),
    ("model", ""),
    ("models", ""),
    ("momentum", "1.0"),
    ("neuron", "lif_hard"),
    ("normalize_alpha", "true"),
    ("optimizer", "adam"),
    ("out", "runs/latest"),
    ("patch", "4"),
    ("percentile", "99.9"),
    ("pwe_form", "decaying"),
    ("random_start", "true"),
    ("rect_alpha", "1.0"),
    ("seed", "0"),
    ("sgd_momentum", "0.9"),
    ("shard", "16"),
    ("sigma", "0.4"),
    ("step_scale", "none"),
    ("surrogate", "arctan"),
    ("surrogate_alpha", "1.0"),
    ("surrogates", "all"),
    ("sweep_eps", "0.0062,0.0124,0.0186,0.0248,0.031"),
    ("threshold", "1.0"),
    ("timesteps", "8"),
    ("train_fraction", "0.8"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn is_known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{line}'", no + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Apply overrides, rejecting the whole batch if any key is unknown.
    pub fn apply<K: AsRef<str>, V: AsRef<str>>(&mut self, pairs: &[(K, V)], source: &str) -> Result<()> {
        let unknown: Vec<&str> = pairs.iter().map(|(k, _)| k.as_ref()).filter(|k| !is_known(k)).collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys in {source}: {}", unknown.join(", "))));
        }
        for (k, v) in pairs {
            self.values.insert(k.as_ref().to_string(), v.as_ref().to_string());
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply(&parse_pairs(&text)?, &path.display().to_string())
    }

    /// `SPIKEATTACK_EPS_STEP=0.005` sets `eps_step`.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let pairs: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|s| (s.to_ascii_lowercase(), v)))
            .collect();
        self.apply(&pairs, "environment")
    }

    pub fn resolve(file: Option<&Path>, env: impl IntoIterator<Item = (String, String)>, flags: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        cfg.apply_env(env)?;
        cfg.apply(flags, "flags")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unknown config key {key}"))
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        self.apply(&[(key, value.into())], "set")
    }

    /// The resolved configuration, one sorted `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key);
        raw.parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse '{raw}'")))
    }

    pub fn f32(&self, key: &str) -> Result<f32> {
        self.parsed(key)
    }
    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parsed(key)
    }
    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parsed(key)
    }
    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parsed(key)
    }
    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.get(key).to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            other => Err(Error::Config(format!("{key}: cannot parse '{other}' as a boolean"))),
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{s}'"))))
            .collect()
    }

    pub fn strings(&self, key: &str) -> Vec<String> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    }

    pub fn surrogate_spec(&self) -> Result<SurrogateSpec> {
        let kind: SurrogateKind = self.get("surrogate").parse()?;
        self.spec_for(kind)
    }

    fn spec_for(&self, kind: SurrogateKind) -> Result<SurrogateSpec> {
        let spec = SurrogateSpec {
            kind,
            threshold: self.f64("threshold")?,
            sigma: self.f64("sigma")?,
            alpha: self.f64("surrogate_alpha")?,
            beta: self.f64("beta")?,
            rect_alpha: self.f64("rect_alpha")?,
            pwe_form: match self.get("pwe_form") {
                "decaying" => PweForm::Decaying,
                "reciprocal" => PweForm::Reciprocal,
                other => return Err(Error::Config(format!("pwe_form: '{other}' (expected decaying or reciprocal)"))),
            },
            fast_sigmoid_form: match self.get("fast_sigmoid_form") {
                "literal" => FastSigmoidForm::Literal,
                "conventional" => FastSigmoidForm::Conventional,
                other => {
                    return Err(Error::Config(format!(
                        "fast_sigmoid_form: '{other}' (expected literal or conventional)"
                    )))
                }
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Specs for the sweep: `all` or a comma list of kernel names.
    pub fn sweep_specs(&self) -> Result<Vec<SurrogateSpec>> {
        let kinds: Vec<SurrogateKind> = if self.get("surrogates") == "all" {
            SurrogateKind::ALL.to_vec()
        } else {
            self.list("surrogates")?
        };
        kinds.into_iter().map(|k| self.spec_for(k)).collect()
    }

    pub fn neuron(&self) -> Result<NeuronConfig> {
        let leak = self.f64("leak")?;
        let th = self.f64("threshold")?;
        let n = match self.get("neuron") {
            "lif_hard" => NeuronConfig::lif_hard(leak, th),
            "lif_soft" => NeuronConfig::lif_soft(leak, th),
            "adaptive" => NeuronConfig::adaptive(leak, th, self.f64("decay")?),
            other => {
                return Err(Error::Config(format!(
                    "neuron: '{other}' (expected lif_hard, lif_soft or adaptive)"
                )))
            }
        };
        n.validate()?;
        Ok(n)
    }

    pub fn attack_kind(&self) -> Result<AttackKind> {
        self.get("attack").parse()
    }

    pub fn attack_config(&self) -> Result<AttackConfig> {
        let alpha: Vec<f32> = self.list("alpha")?;
        let cfg = AttackConfig {
            eps: self.f32("eps")?,
            eps_step: self.f32("eps_step")?,
            iterations: self.usize("iterations")?,
            momentum: self.f32("momentum")?,
            kappa: self.f32("kappa")?,
            coef_lr: self.f32("coef_lr")?,
            fit: self.f32("fit")?,
            alpha: if alpha.is_empty() { None } else { Some(alpha) },
            random_start: self.bool("random_start")?,
            seed: self.u64("seed")?,
            normalize_alpha: self.bool("normalize_alpha")?,
            shard: self.usize("shard")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sweep_config(&self) -> Result<SweepConfig> {
        let mut attack = self.attack_config()?;
        attack.random_start = self.bool("random_start")?;
        let step_scale = match self.get("step_scale") {
            "none" | "" => None,
            _ => Some(self.f32("step_scale")?),
        };
        Ok(SweepConfig { attack, step_scale })
    }

    pub fn optimizer(&self, lr_key: &str) -> Result<Optimizer> {
        let lr = self.f32(lr_key)?;
        match self.get("optimizer") {
            "adam" => Ok(Optimizer::adam(lr)),
            "sgd" => Ok(Optimizer::sgd(lr, self.f32("sgd_momentum")?)),
            other => Err(Error::Config(format!("optimizer: '{other}' (expected adam or sgd)"))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::new(self.optimizer("lr")?, self.usize("epochs")?, self.u64("seed")?);
        cfg.batch_size = self.usize("batch_size")?;
        cfg.shard = self.usize("shard")?;
        Ok(cfg)
    }

    pub fn finetune_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::new(self.optimizer("finetune_lr")?, self.usize("finetune_epochs")?, self.u64("seed")?);
        cfg.batch_size = self.usize("batch_size")?;
        cfg.shard = self.usize("shard")?;
        Ok(cfg)
    }

    pub fn convert_config(&self) -> Result<ConvertConfig> {
        Ok(ConvertConfig {
            balance: match self.get("balance") {
                "weight" => Balance::WeightBalance,
                "threshold" => Balance::ThresholdBalance,
                other => return Err(Error::Config(format!("balance: '{other}' (expected weight or threshold)"))),
            },
            percentile: self.f64("percentile")?,
            timesteps: self.usize("convert_timesteps")?,
            surrogate: self.surrogate_spec()?,
        })
    }

    /// Parse every typed key, reporting all failures at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut check = |r: Result<()>| {
            if let Err(e) = r {
                bad.push(match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                });
            }
        };
        for key in [
            "batch_size", "calib_n", "convert_timesteps", "embed", "epochs", "eval_n", "finetune_epochs", "heads",
            "iterations", "jobs", "layers", "mlp_hidden", "patch", "shard", "timesteps",
        ] {
            check(self.usize(key).map(drop));
        }
        check(self.u64("seed").map(drop));
        for key in ["train_fraction", "percentile", "decay", "lr", "finetune_lr", "sgd_momentum"] {
            check(self.f64(key).map(drop));
        }
        check(self.list::<usize>("hidden").map(drop));
        check(self.list::<f32>("sweep_eps").map(drop));
        check(self.list::<AttackKind>("attacks").map(drop));
        check(self.attack_kind().map(drop));
        check(self.attack_config().map(drop));
        check(self.surrogate_spec().map(drop));
        check(self.sweep_specs().map(drop));
        check(self.neuron().map(drop));
        check(self.optimizer("lr").map(drop));
        check(self.convert_config().map(drop));
        if self.get("step_scale") != "none" {
            check(self.f32("step_scale").map(drop));
        }
        if !["snn_mlp", "ann_mlp", "ann_cnn", "attention"].contains(&self.get("arch")) {
            bad.push(format!("arch: '{}' (expected snn_mlp, ann_mlp, ann_cnn or attention)", self.get("arch")));
        }
        if let Ok(f) = self.f64("train_fraction") {
            if !(f > 0.0 && f < 1.0) {
                bad.push(format!("train_fraction: {f} not in (0, 1)"));
            }
        }
        bad.dedup();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}
