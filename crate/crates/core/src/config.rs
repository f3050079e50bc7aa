//! Flat `key = value` experiment configuration.
//!
//! One pair per line, `#` starts a comment. Unknown and repeated keys are
//! rejected with the offending line number. Relative paths resolve against
//! the directory holding the config file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::activations::Activation;
use crate::error::{Error, Result};
use crate::spectral::parse_block_spec;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Every key the loader accepts.
pub const KNOWN_KEYS: &[&str] = &[
    "kind",
    "blocks",
    "spectrum_file",
    "idx_images",
    "idx_test_images",
    "max_images",
    "block_sizes",
    "d",
    "rotation",
    "n",
    "lambda",
    "epsilon",
    "r0",
    "steps",
    "batch_size",
    "checkpoints",
    "activation",
    "seeds",
    "mc_samples",
    "m_list",
    "mu_list",
    "repeats",
    "q_spectrum",
    "particles",
    "n_list",
    "epsilon_list",
    "t_end",
    "artifact_version",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    ReluDynamics,
    BoundedDynamics,
    Coupling,
    TwoStage,
    RealData,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::ReluDynamics => "relu_dynamics",
            ExperimentKind::BoundedDynamics => "bounded_dynamics",
            ExperimentKind::Coupling => "coupling",
            ExperimentKind::TwoStage => "two_stage",
            ExperimentKind::RealData => "real_data",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "relu_dynamics" => ExperimentKind::ReluDynamics,
            "bounded_dynamics" => ExperimentKind::BoundedDynamics,
            "coupling" => ExperimentKind::Coupling,
            "two_stage" => ExperimentKind::TwoStage,
            "real_data" => ExperimentKind::RealData,
            _ => return Err(format!("unknown experiment kind `{s}`")),
        })
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RotationSpec {
    Identity,
    /// Haar-random rotation drawn from the first seed.
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    Blocks(Vec<(usize, f64)>),
    SpectrumFile(PathBuf),
    Idx {
        images: PathBuf,
        /// Held-out images for evaluation; defaults to training images.
        test_images: Option<PathBuf>,
        max_images: Option<usize>,
    },
}

/// Subsample sizes for the two-stage study.
#[derive(Clone, Debug, PartialEq)]
pub enum Subsample {
    Counts(Vec<usize>),
    /// `M = round(μ·d)`.
    Ratios(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub data: DataSpec,
    pub block_sizes: Option<Vec<usize>>,
    pub d: Option<usize>,
    pub rotation: RotationSpec,
    pub n: usize,
    pub lambda: f64,
    pub epsilon: f64,
    pub r0: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub checkpoints: usize,
    pub activation: Activation,
    pub seeds: Vec<u64>,
    pub mc_samples: usize,
    pub subsample: Option<Subsample>,
    pub repeats: usize,
    pub q_spectrum: Option<[f64; 2]>,
    pub particles: usize,
    pub n_list: Vec<usize>,
    pub epsilon_list: Vec<f64>,
    pub t_end: f64,
}

#[derive(Clone, Debug)]
struct Entry {
    value: String,
    /// `None` for command-line overrides.
    line: Option<usize>,
}

/// Raw key/value pairs before typing.
#[derive(Clone, Debug, Default)]
pub struct ConfigMap {
    entries: BTreeMap<String, Entry>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::ConfigLine {
                line,
                msg: format!("expected key = value, got `{content}`"),
            })?;
            let key = key.trim().to_string();
            check_known(&key).map_err(|msg| Error::ConfigLine { line, msg })?;
            if let Some(prev) = entries.get(&key) {
                let Entry { line: prev_line, .. } = prev;
                return Err(Error::ConfigLine {
                    line,
                    msg: format!("duplicate key `{key}` (first set on line {})", prev_line.unwrap_or(0)),
                });
            }
            entries.insert(
                key,
                Entry {
                    value: value.trim().to_string(),
                    line: Some(line),
                },
            );
        }
        Ok(ConfigMap { entries })
    }

    /// Replaces or adds a key, as a command-line flag would.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        check_known(key).map_err(|msg| Error::Config(format!("override: {msg}")))?;
        self.entries.insert(
            key.to_string(),
            Entry {
                value: value.trim().to_string(),
                line: None,
            },
        );
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    fn err(&self, key: &str, msg: String) -> Error {
        match self.entries.get(key).and_then(|e| e.line) {
            Some(line) => Error::ConfigLine { line, msg },
            None => Error::Config(format!("--{key}: {msg}")),
        }
    }

    fn typed<T: FromStr>(&self, key: &str, what: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| self.err(key, format!("`{key}` expects {what}, got `{v}`"))),
        }
    }

    fn list<T: FromStr>(&self, key: &str, what: &str) -> Result<Option<Vec<T>>> {
        let Some(v) = self.get(key) else {
            return Ok(None);
        };
        let items: Vec<&str> = v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if items.is_empty() {
            return Err(self.err(key, format!("`{key}` is an empty list")));
        }
        items
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|_| self.err(key, format!("`{key}` expects a list of {what}, got `{s}`")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    fn path(&self, key: &str, base: &Path) -> Result<Option<PathBuf>> {
        let Some(v) = self.get(key) else {
            return Ok(None);
        };
        let p = Path::new(v);
        let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        if !full.is_file() {
            return Err(self.err(key, format!("`{key}` file {} does not exist", full.display())));
        }
        // Absolute so a rendered manifest resolves from any directory.
        std::fs::canonicalize(&full).map(Some).map_err(|e| Error::io(&full, e))
    }

    fn require<T>(&self, key: &str, value: Option<T>) -> Result<T> {
        value.ok_or_else(|| Error::MissingKey(key.to_string()))
    }

    /// Types and validates the map. `base` resolves relative paths.
    pub fn resolve(&self, base: &Path) -> Result<ExperimentConfig> {
        let kind_text = self.require("kind", self.get("kind"))?;
        let kind: ExperimentKind = kind_text.parse().map_err(|m| self.err("kind", m))?;
        use ExperimentKind::*;

        let data_keys = ["blocks", "spectrum_file", "idx_images"];
        let present: Vec<&str> = data_keys.iter().copied().filter(|k| self.get(k).is_some()).collect();
        let data = match present.as_slice() {
            [] => return Err(Error::MissingKey("blocks".into())),
            ["blocks"] => {
                let spec = self.get("blocks").expect("present");
                DataSpec::Blocks(parse_block_spec(spec).map_err(|e| self.err("blocks", e.to_string()))?)
            }
            ["spectrum_file"] => DataSpec::SpectrumFile(self.path("spectrum_file", base)?.expect("present")),
            ["idx_images"] => DataSpec::Idx {
                images: self.path("idx_images", base)?.expect("present"),
                test_images: self.path("idx_test_images", base)?,
                max_images: self.typed("max_images", "an integer")?,
            },
            _ => {
                return Err(Error::Config(format!(
                    "data keys {} are mutually exclusive",
                    present.join(", ")
                )))
            }
        };
        match (kind, &data) {
            (RealData, DataSpec::Idx { .. }) => {}
            (RealData, _) => return Err(self.err("kind", "real_data requires `idx_images`".into())),
            (_, DataSpec::Idx { .. }) => {
                return Err(self.err("idx_images", format!("`idx_images` needs kind real_data, not {kind}")))
            }
            _ => {}
        }
        for key in ["max_images", "idx_test_images"] {
            if self.get(key).is_some() && !matches!(data, DataSpec::Idx { .. }) {
                return Err(self.err(key, format!("`{key}` applies only to idx data")));
            }
        }

        let needs_steps = kind != Coupling;
        let n = if needs_steps {
            self.require("n", self.typed::<usize>("n", "an integer")?)?
        } else {
            self.typed::<usize>("n", "an integer")?.unwrap_or(0)
        };
        let lambda = self.require("lambda", self.typed::<f64>("lambda", "a number")?)?;
        let epsilon_list: Option<Vec<f64>> = self.list("epsilon_list", "numbers")?;
        let epsilon = match self.typed::<f64>("epsilon", "a number")? {
            Some(e) => e,
            None if kind == Coupling && epsilon_list.is_some() => epsilon_list
                .as_ref()
                .expect("checked")
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min),
            None => return Err(Error::MissingKey("epsilon".into())),
        };
        let r0 = self.require("r0", self.typed::<f64>("r0", "a number")?)?;
        let steps = if needs_steps {
            self.require("steps", self.typed::<usize>("steps", "an integer")?)?
        } else {
            0
        };

        let activation = match self.get("activation") {
            Some(a) => a
                .parse::<Activation>()
                .map_err(|e| self.err("activation", e.to_string()))?,
            None if kind == BoundedDynamics => return Err(Error::MissingKey("activation".into())),
            None => Activation::Relu,
        };
        if activation.is_relu() == (kind == BoundedDynamics) {
            return Err(self.err(
                "activation",
                if kind == BoundedDynamics {
                    "bounded_dynamics needs a bounded activation".into()
                } else {
                    format!("{kind} supports only relu")
                },
            ));
        }

        let rotation = match self.get("rotation") {
            None | Some("identity") => RotationSpec::Identity,
            Some("random") => RotationSpec::Random,
            Some(other) => return Err(self.err("rotation", format!("`rotation` is identity or random, got `{other}`"))),
        };

        let subsample = match (
            self.list::<usize>("m_list", "integers")?,
            self.list::<f64>("mu_list", "numbers")?,
        ) {
            (Some(_), Some(_)) => return Err(Error::Config("`m_list` and `mu_list` are mutually exclusive".into())),
            (Some(m), None) => Some(Subsample::Counts(m)),
            (None, Some(mu)) => Some(Subsample::Ratios(mu)),
            (None, None) if kind == TwoStage => return Err(Error::MissingKey("m_list".into())),
            (None, None) => None,
        };
        if subsample.is_some() && kind != TwoStage {
            return Err(Error::Config("`m_list`/`mu_list` apply only to two_stage".into()));
        }

        let q_spectrum = match self.list::<f64>("q_spectrum", "numbers")? {
            None => None,
            Some(v) if v.len() == 2 && kind == BoundedDynamics => Some([v[0], v[1]]),
            Some(_) => {
                return Err(self.err(
                    "q_spectrum",
                    "`q_spectrum` takes two block variances and needs bounded_dynamics".into(),
                ))
            }
        };

        let (n_list, t_end) = if kind == Coupling {
            (
                self.require("n_list", self.list::<usize>("n_list", "integers")?)?,
                self.require("t_end", self.typed::<f64>("t_end", "a number")?)?,
            )
        } else {
            for key in ["n_list", "epsilon_list", "t_end"] {
                if self.get(key).is_some() {
                    return Err(self.err(key, format!("`{key}` applies only to coupling")));
                }
            }
            (Vec::new(), steps as f64 * epsilon)
        };

        let cfg = ExperimentConfig {
            kind,
            data,
            block_sizes: self.list("block_sizes", "integers")?,
            d: self.typed("d", "an integer")?,
            rotation,
            n,
            lambda,
            epsilon,
            r0,
            steps,
            batch_size: self.typed("batch_size", "an integer")?.unwrap_or(100),
            checkpoints: self.typed("checkpoints", "an integer")?.unwrap_or(21),
            activation,
            seeds: self.list("seeds", "integers")?.unwrap_or_else(|| vec![1]),
            mc_samples: self.typed("mc_samples", "an integer")?.unwrap_or(10_000),
            subsample,
            repeats: self.typed("repeats", "an integer")?.unwrap_or(20),
            q_spectrum,
            particles: self.typed("particles", "an integer")?.unwrap_or(0),
            n_list,
            epsilon_list: epsilon_list.unwrap_or_else(|| vec![epsilon]),
            t_end,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn check_known(key: &str) -> std::result::Result<(), String> {
    if KNOWN_KEYS.contains(&key) {
        Ok(())
    } else {
        Err(format!("unknown key `{key}`"))
    }
}

impl ExperimentConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if !(self.r0 >= 0.0) {
            return bad(format!("r0 must be nonnegative, got {}", self.r0));
        }
        if self.kind != ExperimentKind::Coupling && (self.n == 0 || self.steps == 0) {
            return bad("n and steps must be positive".into());
        }
        if self.batch_size == 0 || self.checkpoints < 2 || self.mc_samples < 2 {
            return bad("batch_size must be positive, checkpoints and mc_samples at least 2".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.repeats == 0 {
            return bad("repeats must be positive".into());
        }
        if let DataSpec::Blocks(b) = &self.data {
            let dim: usize = b.iter().map(|x| x.0).sum();
            if let Some(d) = self.d {
                if d != dim {
                    return bad(format!("d = {d} but blocks sum to {dim}"));
                }
            }
            if self.block_sizes.is_some() {
                return bad("block_sizes is implied by blocks".into());
            }
            if self.kind == ExperimentKind::BoundedDynamics && b.len() != 2 {
                return bad("bounded_dynamics needs exactly two blocks".into());
            }
        } else if self.kind == ExperimentKind::BoundedDynamics {
            return bad("bounded_dynamics needs inline blocks".into());
        }
        if self.kind == ExperimentKind::Coupling {
            if self.seeds.len() < 3 {
                return bad("coupling needs at least 3 seeds".into());
            }
            if !(self.t_end > 0.0) {
                return bad("t_end must be positive".into());
            }
        }
        Ok(())
    }

    /// Dimension fixed by the config alone (not available for idx data).
    pub fn declared_dim(&self) -> Option<usize> {
        match &self.data {
            DataSpec::Blocks(b) => Some(b.iter().map(|x| x.0).sum()),
            _ => self.d,
        }
    }

    /// Canonical text form; loading it reproduces this config.
    pub fn render(&self) -> String {
        let mut lines: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| lines.push((k.to_string(), v));
        put("artifact_version", ARTIFACT_VERSION.to_string());
        put("kind", self.kind.to_string());
        match &self.data {
            DataSpec::Blocks(b) => put(
                "blocks",
                b.iter()
                    .map(|(s, v)| format!("{s}:{v:?}"))
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            DataSpec::SpectrumFile(p) => put("spectrum_file", p.display().to_string()),
            DataSpec::Idx {
                images,
                test_images,
                max_images,
            } => {
                put("idx_images", images.display().to_string());
                if let Some(t) = test_images {
                    put("idx_test_images", t.display().to_string());
                }
                if let Some(m) = max_images {
                    put("max_images", m.to_string());
                }
            }
        }
        if let Some(b) = &self.block_sizes {
            put("block_sizes", join(b));
        }
        if let Some(d) = self.d {
            put("d", d.to_string());
        }
        if self.rotation == RotationSpec::Random {
            put("rotation", "random".into());
        }
        if self.kind == ExperimentKind::Coupling {
            put("n_list", join(&self.n_list));
            put("epsilon_list", join_f(&self.epsilon_list));
            put("t_end", format!("{:?}", self.t_end));
        } else {
            put("n", self.n.to_string());
            put("steps", self.steps.to_string());
        }
        put("lambda", format!("{:?}", self.lambda));
        put("epsilon", format!("{:?}", self.epsilon));
        put("r0", format!("{:?}", self.r0));
        put("batch_size", self.batch_size.to_string());
        put("checkpoints", self.checkpoints.to_string());
        put("activation", self.activation.to_string());
        put("seeds", join(&self.seeds));
        put("mc_samples", self.mc_samples.to_string());
        match &self.subsample {
            Some(Subsample::Counts(m)) => put("m_list", join(m)),
            Some(Subsample::Ratios(mu)) => put("mu_list", join_f(mu)),
            None => {}
        }
        if self.kind == ExperimentKind::TwoStage {
            put("repeats", self.repeats.to_string());
        }
        if let Some(q) = self.q_spectrum {
            put("q_spectrum", join_f(&q));
        }
        if self.particles > 0 {
            put("particles", self.particles.to_string());
        }
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn join_f(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

/// Reads and resolves a config file, applying `overrides` first.
pub fn load_config_with(path: &Path, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = ConfigMap::parse(&text).map_err(|e| e.context(path.display().to_string()))?;
    for (k, v) in overrides {
        map.set(k, v)?;
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    map.resolve(base).map_err(|e| e.context(path.display().to_string()))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    load_config_with(path, &[])
}
