use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::data::DataSource;
use crate::error::{Error, Result};
use crate::model::VggVariant;
use crate::optim::{LrSchedule, OptimizerConfig};
use crate::policy::PolicyKind;

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ArchConfig {
    ReluNet { depth: usize, width: usize },
    ConvNet { depth: usize, width: usize },
    Vgg { variant: VggVariant },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    /// Directory holding the four standard IDX files.
    Idx { dir: PathBuf, source: DataSource },
    Cifar10 {
        train_files: Vec<PathBuf>,
        test_files: Vec<PathBuf>,
    },
    Synthetic {
        train_size: usize,
        test_size: usize,
        shape: Vec<usize>,
        classes: usize,
        noise: f32,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitConfig {
    Xavier,
    Checkpoint { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Upper bound for random-k policies; the network's layer count if unset.
    pub max_k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnalysisConfig {
    pub reinit_grid: Vec<f64>,
    pub alphas: Vec<f64>,
    pub profile_epochs: Vec<usize>,
    pub profile_full_batch: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub arch: ArchConfig,
    pub data: DataConfig,
    /// Balanced training subset size; `None` keeps the whole training set.
    pub subset: Option<usize>,
    pub subset_seed: u64,
    /// Leading test samples kept; `None` keeps the whole test set.
    pub test_subset: Option<usize>,
    pub optimizer: OptimizerConfig,
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub policy: PolicyConfig,
    pub seeds: Vec<u64>,
    pub init: InitConfig,
    pub analysis: AnalysisConfig,
    /// Test evaluation every this many epochs; 0 evaluates only at the end.
    pub eval_every: usize,
    pub eval_batch_size: usize,
    /// Forward/backward repetitions per layer for `bench-backward`.
    pub bench_repeats: usize,
    /// Every key/value the config was built from, overrides applied.
    pub raw: BTreeMap<String, String>,
}

const KNOWN_KEYS: &[&str] = &[
    "arch.family",
    "arch.depth",
    "arch.width",
    "arch.variant",
    "data.kind",
    "data.dir",
    "data.source",
    "data.train_files",
    "data.test_files",
    "data.train_size",
    "data.test_size",
    "data.shape",
    "data.classes",
    "data.noise",
    "data.seed",
    "data.subset",
    "data.subset_seed",
    "data.test_subset",
    "optim.kind",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "optim.momentum",
    "optim.weight_decay",
    "schedule.kind",
    "schedule.lr",
    "schedule.period",
    "train.epochs",
    "train.batch_size",
    "policy.kind",
    "policy.k",
    "policy.q",
    "policy.rho",
    "policy.max_k",
    "policy.beta_a",
    "policy.beta_b",
    "seeds",
    "init",
    "analysis.reinit_grid",
    "analysis.alphas",
    "analysis.profile_epochs",
    "analysis.profile_full_batch",
    "eval.every",
    "eval.batch_size",
    "bench.repeats",
];

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                n + 1
            ))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!(
                "line {}: duplicate key `{k}`",
                n + 1
            )));
        }
    }
    Ok(map)
}

struct Keys<'a> {
    map: &'a BTreeMap<String, String>,
}

impl<'a> Keys<'a> {
    fn str(&self, key: &str) -> Option<&'a str> {
        self.map.get(key).map(String::as_str)
    }

    fn required(&self, key: &str) -> Result<&'a str> {
        self.str(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.str(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`")))
            })
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn need<T: FromStr>(&self, key: &str) -> Result<T> {
        self.parse(key)?
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.str(key)
            .map(|v| {
                parse_list(v)
                    .map_err(|_| Error::Config(format!("key `{key}`: cannot parse list `{v}`")))
            })
            .transpose()
    }
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, ()> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| ()))
        .collect()
}

/// Parses a seed list such as `1,2,3` or `1..5` (inclusive).
pub fn parse_seeds(v: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("cannot parse seed list `{v}`"));
    let seeds: Vec<u64> = if let Some((a, b)) = v.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        (a..=b).collect()
    } else {
        parse_list(v).map_err(|_| bad())?
    };
    if seeds.is_empty() {
        return Err(Error::Config("seed list is empty".into()));
    }
    Ok(seeds)
}

fn optional_count(v: usize) -> Option<usize> {
    (v > 0).then_some(v)
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_file_with(path, &[])
    }

    /// Loads a config file and applies `key=value` overrides on top.
    pub fn from_file_with(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut map = parse_key_values(&text)?;
        apply_overrides(&mut map, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_map_in(map, base)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_map(parse_key_values(text)?)
    }

    pub fn from_map(map: BTreeMap<String, String>) -> Result<Self> {
        Self::from_map_in(map, Path::new("."))
    }

    /// Relative paths in the config resolve against `base`.
    pub fn from_map_in(map: BTreeMap<String, String>, base: &Path) -> Result<Self> {
        if let Some(unknown) = map.keys().find(|k| !KNOWN_KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown key `{unknown}`")));
        }
        let keys = Keys { map: &map };
        let resolve = |p: &str| -> PathBuf {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };

        let arch = match keys.required("arch.family")? {
            "relu_net" => ArchConfig::ReluNet {
                depth: keys.need("arch.depth")?,
                width: keys.need("arch.width")?,
            },
            "conv_net" => ArchConfig::ConvNet {
                depth: keys.need("arch.depth")?,
                width: keys.need("arch.width")?,
            },
            "vgg" => ArchConfig::Vgg {
                variant: keys.required("arch.variant")?.parse()?,
            },
            other => return Err(Error::Config(format!("unknown arch.family `{other}`"))),
        };

        let data = match keys.required("data.kind")? {
            "idx" => DataConfig::Idx {
                dir: resolve(keys.required("data.dir")?),
                source: match keys.str("data.source").unwrap_or("mnist") {
                    "mnist" => DataSource::Mnist,
                    "fashion_mnist" => DataSource::FashionMnist,
                    other => return Err(Error::Config(format!("unknown data.source `{other}`"))),
                },
            },
            "cifar10" => {
                let files = |key: &str| -> Result<Vec<PathBuf>> {
                    let v = keys.required(key)?;
                    let list: Vec<PathBuf> = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(resolve)
                        .collect();
                    if list.is_empty() {
                        return Err(Error::Config(format!("`{key}` lists no files")));
                    }
                    Ok(list)
                };
                DataConfig::Cifar10 {
                    train_files: files("data.train_files")?,
                    test_files: files("data.test_files")?,
                }
            }
            "synthetic" => DataConfig::Synthetic {
                train_size: keys.or("data.train_size", 512)?,
                test_size: keys.or("data.test_size", 256)?,
                shape: keys.list("data.shape")?.unwrap_or_else(|| vec![1, 28, 28]),
                classes: keys.or("data.classes", 10)?,
                noise: keys.or("data.noise", 0.5)?,
                seed: keys.or("data.seed", 0)?,
            },
            other => return Err(Error::Config(format!("unknown data.kind `{other}`"))),
        };

        let optimizer = match keys.str("optim.kind").unwrap_or("adam") {
            "adam" => OptimizerConfig::Adam {
                beta1: keys.or("optim.beta1", 0.9)?,
                beta2: keys.or("optim.beta2", 0.999)?,
                eps: keys.or("optim.eps", 1e-8)?,
            },
            "nesterov_sgd" => OptimizerConfig::NesterovSgd {
                momentum: keys.or("optim.momentum", 0.9)?,
                weight_decay: keys.or("optim.weight_decay", 0.0005)?,
            },
            other => return Err(Error::Config(format!("unknown optim.kind `{other}`"))),
        };

        let schedule = match keys.str("schedule.kind").unwrap_or("constant") {
            "constant" => LrSchedule::Constant {
                lr: keys.need("schedule.lr")?,
            },
            "halve_every" => LrSchedule::HalveEvery {
                base_lr: keys.need("schedule.lr")?,
                period: keys.need("schedule.period")?,
            },
            other => return Err(Error::Config(format!("unknown schedule.kind `{other}`"))),
        };

        let kind = match keys.str("policy.kind").unwrap_or("full") {
            "full" => PolicyKind::Full,
            "top_k" => PolicyKind::TopK {
                k: keys.need("policy.k")?,
            },
            "bottom_q" => PolicyKind::BottomQ {
                q: keys.need("policy.q")?,
            },
            "top_k_bottom_q_static" => PolicyKind::TopKBottomQStatic {
                k: keys.need("policy.k")?,
                q: keys.need("policy.q")?,
            },
            "middle_only" => PolicyKind::MiddleOnly,
            "top_k_bottom_q_prob" => PolicyKind::TopKBottomQProb {
                k: keys.need("policy.k")?,
                q: keys.need("policy.q")?,
                rho: keys.need("policy.rho")?,
            },
            "top_k_all_bottoms" => PolicyKind::TopKAllBottoms {
                k: keys.need("policy.k")?,
                rho: keys.need("policy.rho")?,
            },
            "random_uniform" => PolicyKind::RandomUniform,
            "random_beta" => PolicyKind::RandomBeta {
                alpha: keys.or("policy.beta_a", 2.0)?,
                beta: keys.or("policy.beta_b", 5.0)?,
            },
            other => return Err(Error::Config(format!("unknown policy.kind `{other}`"))),
        };

        let init = match keys.str("init").unwrap_or("xavier") {
            "xavier" => InitConfig::Xavier,
            path => InitConfig::Checkpoint {
                path: resolve(path),
            },
        };

        let seeds = match keys.str("seeds") {
            Some(v) => parse_seeds(v)?,
            None => (1..=5).collect(),
        };

        let config = Self {
            arch,
            data,
            subset: optional_count(keys.or("data.subset", 0)?),
            subset_seed: keys.or("data.subset_seed", 0)?,
            test_subset: optional_count(keys.or("data.test_subset", 0)?),
            optimizer,
            schedule,
            epochs: keys.or("train.epochs", 100)?,
            batch_size: keys.or("train.batch_size", 128)?,
            policy: PolicyConfig {
                kind,
                max_k: keys.parse("policy.max_k")?,
            },
            seeds,
            init,
            analysis: AnalysisConfig {
                reinit_grid: keys.list("analysis.reinit_grid")?.unwrap_or_default(),
                alphas: keys.list("analysis.alphas")?.unwrap_or_default(),
                profile_epochs: keys.list("analysis.profile_epochs")?.unwrap_or_default(),
                profile_full_batch: keys.or("analysis.profile_full_batch", false)?,
            },
            eval_every: keys.or("eval.every", 1)?,
            eval_batch_size: keys.or("eval.batch_size", 500)?,
            bench_repeats: keys.or("bench.repeats", 20)?,
            raw: map.clone(),
        };
        config.validate()?;
        Ok(config)
    }

    /// Checks value ranges and that every referenced path exists.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        match self.arch {
            ArchConfig::ReluNet { depth, width } | ArchConfig::ConvNet { depth, width }
                if depth == 0 || width == 0 =>
            {
                return fail(format!(
                    "arch depth and width must be >= 1, got {depth}, {width}"
                ))
            }
            _ => {}
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return fail("batch sizes must be >= 1".into());
        }
        if self.seeds.is_empty() {
            return fail("seed list is empty".into());
        }
        self.optimizer.validate()?;
        self.schedule.validate()?;
        let mut paths: Vec<&Path> = Vec::new();
        match &self.data {
            DataConfig::Idx { dir, .. } => paths.push(dir),
            DataConfig::Cifar10 {
                train_files,
                test_files,
            } => paths.extend(train_files.iter().chain(test_files).map(PathBuf::as_path)),
            DataConfig::Synthetic {
                train_size,
                test_size,
                shape,
                classes,
                ..
            } => {
                if *train_size == 0 || *test_size == 0 || *classes == 0 || shape.len() != 3 {
                    return fail(format!(
                        "synthetic data needs positive sizes and a 3-d shape, got {train_size}/{test_size}, {classes} classes, {shape:?}"
                    ));
                }
            }
        }
        if let InitConfig::Checkpoint { path } = &self.init {
            paths.push(path);
        }
        if let Some(missing) = paths.iter().find(|p| !p.exists()) {
            return fail(format!("path does not exist: {}", missing.display()));
        }
        for &pct in &self.analysis.reinit_grid {
            if !(0.0..=100.0).contains(&pct) {
                return fail(format!("reinit grid value {pct} outside [0, 100]"));
            }
        }
        for &a in &self.analysis.alphas {
            if !(a > 0.0 && a <= 100.0) {
                return fail(format!("alpha {a} outside (0, 100]"));
            }
        }
        Ok(())
    }

    /// Copy with `seeds` replaced.
    pub fn with_seeds(&self, seeds: Vec<u64>) -> Result<Self> {
        let mut map = self.raw.clone();
        let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
        map.insert("seeds".into(), list.join(","));
        let mut c = self.clone();
        c.seeds = seeds;
        c.raw = map;
        c.validate()?;
        Ok(c)
    }
}

/// Applies `key=value` strings to a raw config map.
pub fn apply_overrides(map: &mut BTreeMap<String, String>, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(())
}
