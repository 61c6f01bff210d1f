//! Run configuration: profile defaults, then the JSON config file, then
//! command-line overrides. The seed falls back to `GFNROM_SEED` when
//! neither the file nor the flags set it.

use std::path::Path;

use anyhow::{bail, Context, Result};
use gfnrom::datagen::{Assignment, Family, HIERARCHY_FRACTIONS};
use gfnrom::rom::{Architecture, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SEED_ENV: &str = "GFNROM_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 500 epochs on a 30×30 base grid.
    #[default]
    Desk,
    /// 5000 epochs on a 50×50 base grid.
    Paper,
}

/// Training-mesh policy; the split seed is the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AssignmentConfig {
    Single { mesh: String },
    Split { first: String, second: String },
}

impl AssignmentConfig {
    pub fn resolve(&self, seed: u64) -> Assignment {
        match self {
            AssignmentConfig::Single { mesh } => Assignment::Single { mesh: mesh.clone() },
            AssignmentConfig::Split { first, second } => Assignment::Split {
                first: first.clone(),
                second: second.clone(),
                seed,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub family: Family,
    /// Parameter grid counts per component.
    pub grid: Vec<usize>,
    /// Nodes per side of the jittered base grid.
    pub base_grid: usize,
    /// Jitter in grid spacings.
    pub jitter: f64,
    pub fractions: [f64; 4],
    pub assignment: AssignmentConfig,
    pub train: TrainConfig,
    pub architecture: Architecture,
    pub eval_mesh: String,
    pub bounds_mesh: String,
    /// POD rank; the latent size when absent.
    pub pod_rank: Option<usize>,
    pub with_pod: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::for_profile(Profile::Desk)
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (epochs, base_grid) = match profile {
            Profile::Desk => (500, 30),
            Profile::Paper => (5000, 50),
        };
        RunConfig {
            profile,
            seed: 0,
            family: Family::Smooth,
            grid: vec![10, 10],
            base_grid,
            jitter: 0.25,
            fractions: HIERARCHY_FRACTIONS,
            assignment: AssignmentConfig::Single {
                mesh: "large".into(),
            },
            train: TrainConfig {
                epochs,
                ..TrainConfig::default()
            },
            architecture: Architecture::default(),
            eval_mesh: "large".into(),
            bounds_mesh: "large".into(),
            pod_rank: None,
            with_pod: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.grid.len() != self.family.n_params() {
            bail!(
                "grid has {} entries but family {:?} has {} parameters",
                self.grid.len(),
                self.family,
                self.family.n_params()
            );
        }
        if self.base_grid < 8 {
            bail!("base_grid must be at least 8, got {}", self.base_grid);
        }
        if !(0.0..0.5).contains(&self.jitter) {
            bail!("jitter must lie in [0, 0.5), got {}", self.jitter);
        }
        Ok(())
    }
}

/// Recursively merges `patch` into `base`; objects merge key by key,
/// everything else is replaced.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

/// Parses `a.b.c=value` into a nested object; the value is JSON when it
/// parses as JSON and a string otherwise.
pub fn parse_override(text: &str) -> Result<Value> {
    let (path, raw) = text
        .split_once('=')
        .with_context(|| format!("override {text:?} is not of the form key=value"))?;
    if path.is_empty() {
        bail!("override {text:?} has an empty key");
    }
    let mut value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    for key in path.rsplit('.') {
        let mut obj = serde_json::Map::new();
        obj.insert(key.to_string(), value);
        value = Value::Object(obj);
    }
    Ok(value)
}

fn has_seed(v: &Value) -> bool {
    v.get("seed").is_some()
}

/// Resolves the effective configuration.
pub fn load_config(file: Option<&Path>, profile: Option<Profile>, overrides: &[Value]) -> Result<RunConfig> {
    let file_value = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?;
            let v: Value = serde_json::from_str(&text)
                .with_context(|| format!("config {} is not valid JSON", path.display()))?;
            if !v.is_object() {
                bail!("config {} must be a JSON object", path.display());
            }
            v
        }
        None => Value::Object(Default::default()),
    };
    let profile = match profile {
        Some(p) => p,
        None => match file_value.get("profile") {
            Some(v) => serde_json::from_value(v.clone()).context("invalid profile in config")?,
            None => Profile::Desk,
        },
    };
    let seed_given = has_seed(&file_value) || overrides.iter().any(has_seed);
    let mut value = serde_json::to_value(RunConfig::for_profile(profile))?;
    merge(&mut value, file_value);
    for o in overrides {
        merge(&mut value, o.clone());
    }
    value["profile"] = serde_json::to_value(profile)?;
    if !seed_given {
        if let Ok(text) = std::env::var(SEED_ENV) {
            let seed: u64 = text
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={text:?} is not an unsigned integer"))?;
            value["seed"] = seed.into();
        }
    }
    let mut cfg: RunConfig = serde_json::from_value(value).context("invalid configuration")?;
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gfnrom::rom::TrainMode;

    #[test]
    fn profiles_set_epochs() {
        assert_eq!(RunConfig::for_profile(Profile::Desk).train.epochs, 500);
        assert_eq!(RunConfig::for_profile(Profile::Paper).train.epochs, 5000);
        let d = RunConfig::default();
        assert_eq!(d.train.lr, 1e-3);
        assert_eq!(d.train.omega, 10.0);
        assert_eq!(d.train.l2, 1e-5);
        assert_eq!(d.fractions, [1.0, 0.31, 0.105, 0.04]);
    }

    #[test]
    fn overrides_nest_and_parse() {
        let v = parse_override("train.epochs=12").unwrap();
        assert_eq!(v["train"]["epochs"], 12);
        let v = parse_override("family=bump").unwrap();
        assert_eq!(v["family"], "bump");
        assert!(parse_override("nokey").is_err());
    }

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 4, "train": {"epochs": 7, "mode": "fixed"}}"#).unwrap();
        let cfg = load_config(Some(&path), None, &[parse_override("train.epochs=9").unwrap()]).unwrap();
        assert_eq!(cfg.train.epochs, 9);
        assert_eq!(cfg.train.mode, TrainMode::Fixed);
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.seed, 4);
        assert_eq!(cfg.train.lr, 1e-3);
    }

    #[test]
    fn adaptive_adam_rejected() {
        let o = parse_override("train.mode=adaptive").unwrap();
        let err = load_config(None, None, &[o]).unwrap_err();
        assert!(format!("{err:#}").contains("adam"));
    }

    #[test]
    fn unknown_keys_rejected() {
        let o = parse_override("epochz=3").unwrap();
        assert!(load_config(None, None, &[o]).is_err());
    }
}
