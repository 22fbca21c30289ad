//! Plain-text run configuration: one `key = value` per line, `#` comments.
//!
//! Every model, schedule and exit-policy field has a key. Unknown keys are
//! rejected. Environment variables named `DYN_` followed by the upper-cased
//! key with dots replaced by underscores (e.g. `DYN_TRAIN_ALPHA`) override
//! file values.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::inference::ExitPolicy;
use crate::model::ModelConfig;
use crate::training::TrainSchedule;

pub const ENV_PREFIX: &str = "DYN_";

/// Optional supervised warm-up of the backbone on a separate synthetic task.
#[derive(Debug, Clone, PartialEq)]
pub struct Pretrain {
    pub epochs: usize,
    pub alpha: f64,
}

impl Default for Pretrain {
    fn default() -> Self {
        Pretrain { epochs: 0, alpha: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Top-level seed; model init and every training stream derive from it.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainSchedule,
    pub pretrain: Pretrain,
    pub policy: ExitPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let stages = model.stages();
        RunConfig {
            seed: 0,
            train: TrainSchedule::for_stages(stages),
            policy: ExitPolicy::full_depth(stages),
            pretrain: Pretrain::default(),
            model,
        }
    }
}

type Getter = fn(&RunConfig) -> String;
type Setter = fn(&mut RunConfig, &str) -> Result<()>;

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("`{key}`: cannot parse `{v}`")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| num(key, x.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn float(v: f64) -> String {
    format!("{v:?}")
}

fn floats(v: &[f64]) -> String {
    v.iter().map(|&x| float(x)).collect::<Vec<_>>().join(",")
}

const KEYS: &[(&str, Getter, Setter)] = &[
    ("seed", |c| c.seed.to_string(), |c, v| Ok(c.seed = num("seed", v)?)),
    ("model.depth", |c| c.model.depth.to_string(), |c, v| Ok(c.model.depth = num("model.depth", v)?)),
    ("model.interval", |c| c.model.interval.to_string(), |c, v| Ok(c.model.interval = num("model.interval", v)?)),
    ("model.embed_dim", |c| c.model.embed_dim.to_string(), |c, v| Ok(c.model.embed_dim = num("model.embed_dim", v)?)),
    ("model.heads", |c| c.model.heads.to_string(), |c, v| Ok(c.model.heads = num("model.heads", v)?)),
    ("model.mlp_hidden", |c| c.model.mlp_hidden.to_string(), |c, v| Ok(c.model.mlp_hidden = num("model.mlp_hidden", v)?)),
    ("model.image_size", |c| c.model.image_size.to_string(), |c, v| Ok(c.model.image_size = num("model.image_size", v)?)),
    ("model.patch_size", |c| c.model.patch_size.to_string(), |c, v| Ok(c.model.patch_size = num("model.patch_size", v)?)),
    ("model.channels", |c| c.model.channels.to_string(), |c, v| Ok(c.model.channels = num("model.channels", v)?)),
    ("model.num_classes", |c| c.model.num_classes.to_string(), |c, v| Ok(c.model.num_classes = num("model.num_classes", v)?)),
    ("model.adapter.kind", |c| c.model.adapter.kind.to_string(), |c, v| Ok(c.model.adapter.kind = v.parse()?)),
    ("model.adapter.rank", |c| c.model.adapter.rank.to_string(), |c, v| Ok(c.model.adapter.rank = num("model.adapter.rank", v)?)),
    ("model.adapter.groups", |c| c.model.adapter.groups.to_string(), |c, v| Ok(c.model.adapter.groups = num("model.adapter.groups", v)?)),
    ("model.adapter.placement", |c| c.model.adapter.placement.to_string(), |c, v| Ok(c.model.adapter.placement = v.parse()?)),
    ("model.head_hidden", |c| join(&c.model.head_hidden), |c, v| Ok(c.model.head_hidden = list("model.head_hidden", v)?)),
    ("train.total_epochs", |c| c.train.total_epochs.to_string(), |c, v| Ok(c.train.total_epochs = num("train.total_epochs", v)?)),
    ("train.schedule_shape", |_| "linear".into(), |_, v| match v {
        "linear" => Ok(()),
        other => Err(Error::config(format!("`train.schedule_shape`: only `linear` is supported, got `{other}`"))),
    }),
    ("train.lambda_shallow_init", |c| float(c.train.lambda_shallow_init), |c, v| Ok(c.train.lambda_shallow_init = num("train.lambda_shallow_init", v)?)),
    ("train.lambda_deep_init", |c| float(c.train.lambda_deep_init), |c, v| Ok(c.train.lambda_deep_init = num("train.lambda_deep_init", v)?)),
    ("train.lambda_bound", |c| float(c.train.lambda_bound), |c, v| Ok(c.train.lambda_bound = num("train.lambda_bound", v)?)),
    ("train.fixed_lambdas", |c| c.train.fixed_lambdas.as_deref().map_or("none".into(), floats), |c, v| {
        c.train.fixed_lambdas = if v == "none" { None } else { Some(list("train.fixed_lambdas", v)?) };
        Ok(())
    }),
    ("train.p_shallow", |c| float(c.train.p_shallow), |c, v| Ok(c.train.p_shallow = num("train.p_shallow", v)?)),
    ("train.p_deep", |c| float(c.train.p_deep), |c, v| Ok(c.train.p_deep = num("train.p_deep", v)?)),
    ("train.shallow_cutoff", |c| c.train.shallow_cutoff.to_string(), |c, v| Ok(c.train.shallow_cutoff = num("train.shallow_cutoff", v)?)),
    ("train.p_m", |c| float(c.train.p_m), |c, v| Ok(c.train.p_m = num("train.p_m", v)?)),
    ("train.alpha", |c| float(c.train.alpha), |c, v| Ok(c.train.alpha = num("train.alpha", v)?)),
    ("train.batch_size", |c| c.train.batch_size.to_string(), |c, v| Ok(c.train.batch_size = num("train.batch_size", v)?)),
    ("pretrain.epochs", |c| c.pretrain.epochs.to_string(), |c, v| Ok(c.pretrain.epochs = num("pretrain.epochs", v)?)),
    ("pretrain.alpha", |c| float(c.pretrain.alpha), |c, v| Ok(c.pretrain.alpha = num("pretrain.alpha", v)?)),
    ("policy.thresholds", |c| policy_value(&c.policy), |c, v| {
        let t = v
            .split(',')
            .map(|x| match x.trim() {
                "inf" => Ok(f64::INFINITY),
                s => num("policy.thresholds", s),
            })
            .collect::<Result<Vec<f64>>>()?;
        c.policy = ExitPolicy::per_stage(t)?;
        Ok(())
    }),
];

fn policy_value(p: &ExitPolicy) -> String {
    p.thresholds()
        .iter()
        .map(|&t| if t.is_infinite() { "inf".to_string() } else { float(t) })
        .collect::<Vec<_>>()
        .join(",")
}

pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_uppercase().replace('.', "_"))
}

impl RunConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        KEYS.iter().map(|(k, _, _)| *k)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (_, _, setter) = KEYS
            .iter()
            .find(|(k, _, _)| *k == key)
            .ok_or_else(|| Error::config(format!("unknown key `{key}`")))?;
        setter(self, value.trim())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, g, _)| g(self))
    }

    /// Parses `text` on top of the defaults. Values that depend on the model
    /// shape (head widths, shallow cutoff, policy) follow the parsed shape
    /// unless set explicitly.
    pub fn parse(text: &str) -> Result<RunConfig> {
        Self::parse_with_overrides(text, std::iter::empty())
    }

    /// Like [`parse`](Self::parse) with `(key, value)` overrides applied last.
    pub fn parse_with_overrides(text: &str, overrides: impl IntoIterator<Item = (String, String)>) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", no + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::config(format!("line {}: `{k}` set twice", no + 1)));
            }
            c.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::config(format!("line {}: {m}", no + 1)),
                other => other,
            })?;
        }
        for (k, v) in overrides {
            c.set(&k, &v)?;
            seen.insert(k);
        }
        let stages = c.model.stages();
        if !seen.contains("model.head_hidden") {
            c.model.head_hidden = c.model.default_head_hidden();
        }
        if !seen.contains("train.shallow_cutoff") {
            c.train.shallow_cutoff = stages / 2;
        }
        if !seen.contains("policy.thresholds") && stages > 0 {
            c.policy = ExitPolicy::full_depth(stages);
        }
        c.train.seed = c.seed;
        c.validate()?;
        Ok(c)
    }

    /// `DYN_*` variables from `vars` mapped back to config keys. Unknown
    /// `DYN_` names are an error.
    pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (name, value) in vars {
            if !name.starts_with(ENV_PREFIX) {
                continue;
            }
            let key = Self::keys()
                .find(|k| env_name(k) == name)
                .ok_or_else(|| Error::config(format!("environment variable {name} matches no key")))?;
            out.push((key.to_string(), value));
        }
        Ok(out)
    }

    /// Reads `path` (or the defaults when `None`) and applies process
    /// environment overrides.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        let env = Self::env_overrides(std::env::vars())?;
        Self::parse_with_overrides(&text, env)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, g, _) in KEYS {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&g(self));
            out.push('\n');
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let stages = self.model.stages();
        self.train.validate(stages)?;
        if self.train.seed != self.seed {
            return Err(Error::config("train seed must equal the top-level seed"));
        }
        if self.policy.stages() != stages {
            return Err(Error::config(format!(
                "policy has {} thresholds for {stages} stages",
                self.policy.stages()
            )));
        }
        if !(self.pretrain.alpha >= 0.0 && self.pretrain.alpha.is_finite()) {
            return Err(Error::config("pretrain.alpha must be finite and non-negative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let text = c.render();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_error() {
        let e = RunConfig::parse("model.depthh = 4").unwrap_err().to_string();
        assert!(e.contains("unknown key"), "{e}");
    }

    #[test]
    fn shape_dependent_defaults_follow_model() {
        let c = RunConfig::parse("model.depth = 4\nmodel.interval = 1\nmodel.embed_dim = 16\nmodel.heads = 2").unwrap();
        assert_eq!(c.model.head_hidden, vec![16, 16, 8, 0]);
        assert_eq!(c.train.shallow_cutoff, 2);
        assert_eq!(c.policy.stages(), 4);
    }

    #[test]
    fn env_names_map_to_keys() {
        let vars = vec![
            ("DYN_TRAIN_ALPHA".to_string(), "0.2".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ];
        let o = RunConfig::env_overrides(vars).unwrap();
        assert_eq!(o, vec![("train.alpha".to_string(), "0.2".to_string())]);
        let c = RunConfig::parse_with_overrides("train.alpha = 0.1", o).unwrap();
        assert_eq!(c.train.alpha, 0.2);
        assert!(RunConfig::env_overrides(vec![("DYN_NOPE".into(), "1".into())]).is_err());
    }

    #[test]
    fn duplicate_key_rejected() {
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
    }
}
