//! Run configuration: one JSON file plus dotted `--key value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use simcse_core::train::PipelineConfig;

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "SIMCSE_FORGE_SEED";

/// Dataset locations. Relative paths are taken from the config file's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    #[serde(default)]
    pub sst_train: Option<PathBuf>,
    #[serde(default)]
    pub sst_dev: Option<PathBuf>,
    #[serde(default)]
    pub para_train: Option<PathBuf>,
    #[serde(default)]
    pub para_dev: Option<PathBuf>,
    #[serde(default)]
    pub sts_train: Option<PathBuf>,
    #[serde(default)]
    pub sts_dev: Option<PathBuf>,
    #[serde(default)]
    pub triplets: Option<PathBuf>,
    /// Plain text, one sentence per line.
    #[serde(default)]
    pub sentences: Option<PathBuf>,
}

impl DataPaths {
    fn all_mut(&mut self) -> [&mut Option<PathBuf>; 8] {
        [
            &mut self.sst_train,
            &mut self.sst_dev,
            &mut self.para_train,
            &mut self.para_dev,
            &mut self.sts_train,
            &mut self.sts_dev,
            &mut self.triplets,
            &mut self.sentences,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub data: DataPaths,
    /// Starting checkpoint for SimCSE stages, transfer, or continued training.
    #[serde(default)]
    pub init: Option<PathBuf>,
    /// Applied to every stage when set.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Reject malformed TSV rows instead of skipping them.
    #[serde(default = "default_strict")]
    pub strict: bool,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_strict() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSource {
    Flag,
    File,
    Env,
    Default,
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("{origin}: {e}")))
    }

    /// Reads `path`, applies overrides and makes relative paths absolute.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let origin = path.display().to_string();
        let mut cfg = Self::from_json(&text, &origin)?;
        if !overrides.is_empty() {
            let mut tree = serde_json::to_value(&cfg).expect("config serializes");
            for (key, raw) in overrides {
                apply_override(&mut tree, key, raw)?;
            }
            cfg = serde_json::from_value(tree).map_err(|e| CliError::Usage(format!("{origin} with overrides: {e}")))?;
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.rebase(&base)?;
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) -> CliResult<()> {
        let base = if base.as_os_str().is_empty() {
            std::env::current_dir().map_err(|e| CliError::Usage(format!("current directory: {e}")))?
        } else {
            base.to_path_buf()
        };
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in self.data.all_mut().into_iter().flatten() {
            fix(p);
        }
        if let Some(p) = &mut self.init {
            fix(p);
        }
        fix(&mut self.output_dir);
        Ok(())
    }

    /// Picks the seed by precedence and writes it into every stage.
    pub fn resolve_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> CliResult<(u64, SeedSource)> {
        let env = match env {
            Some(s) => Some(
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| CliError::Usage(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?,
            ),
            None => None,
        };
        let (seed, source) = if let Some(s) = flag {
            (s, SeedSource::Flag)
        } else if let Some(s) = self.seed {
            (s, SeedSource::File)
        } else if let Some(s) = env {
            (s, SeedSource::Env)
        } else {
            return Ok((self.pipeline.train.seed, SeedSource::Default));
        };
        self.seed = Some(seed);
        self.pipeline.set_seed(seed);
        Ok((seed, source))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.pipeline.validate().map_err(CliError::from)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Short fingerprint of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:08x}", crc32fast::hash(json.as_bytes()))
    }
}

/// `(key, raw value)` pairs from dotted flags.
pub type Overrides = Vec<(String, String)>;

/// Splits `--a.b value` and `--a.b=value` pairs out of the argument list.
/// Flags without a dot are left for the regular parser.
pub fn split_overrides(args: Vec<String>) -> CliResult<(Vec<String>, Overrides)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        if arg == "--" {
            rest.push(arg);
            rest.extend(it.by_ref());
            break;
        }
        let key = match arg.strip_prefix("--") {
            Some(k) if k.split('=').next().is_some_and(|name| name.contains('.')) => k.to_string(),
            _ => {
                rest.push(arg);
                continue;
            }
        };
        match key.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::Usage(format!("--{key} needs a value")))?;
                overrides.push((key, v));
            }
        }
    }
    Ok((rest, overrides))
}

fn lookup<'a>(tree: &'a Value, path: &[&str]) -> Option<&'a Value> {
    path.iter().try_fold(tree, |v, k| v.as_object()?.get(*k))
}

/// Sets a dotted key. Short forms are tried under `pipeline` and
/// `pipeline.train`, so `optim.lr` means `pipeline.train.optim.lr`.
pub fn apply_override(tree: &mut Value, key: &str, raw: &str) -> CliResult<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("malformed config key {key:?}")));
    }
    let candidates: Vec<Vec<&str>> = [&[][..], &["pipeline"][..], &["pipeline", "train"][..]]
        .iter()
        .map(|prefix| prefix.iter().chain(&parts).copied().collect())
        .collect();
    let chosen = candidates
        .iter()
        .find(|c| lookup(tree, c).is_some())
        .or_else(|| {
            candidates
                .iter()
                .find(|c| lookup(tree, &c[..c.len() - 1]).is_some_and(Value::is_object))
        })
        .ok_or_else(|| CliError::Usage(format!("unknown config key {key:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let (leaf, parent) = chosen.split_last().expect("nonempty key");
    let mut node = &mut *tree;
    for k in parent {
        node = node.get_mut(*k).expect("parent exists");
    }
    node.as_object_mut()
        .expect("parent is an object")
        .insert(leaf.to_string(), value);
    Ok(())
}
