//! Run configuration: flat `key = value` files with `[verb]` sections,
//! `KEY=VALUE` overrides on the command line, and a per-verb key schema that
//! supplies every default explicitly.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verb {
    Sample,
    TrainVariational,
    TrainData,
    Reweight,
    WeightFunction,
    RbmTrain,
    RbmFeatures,
    Oracle,
}

impl Verb {
    pub const ALL: [Verb; 8] = [
        Verb::Sample,
        Verb::TrainVariational,
        Verb::TrainData,
        Verb::Reweight,
        Verb::WeightFunction,
        Verb::RbmTrain,
        Verb::RbmFeatures,
        Verb::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Verb::Sample => "sample",
            Verb::TrainVariational => "train-variational",
            Verb::TrainData => "train-data",
            Verb::Reweight => "reweight",
            Verb::WeightFunction => "weight-function",
            Verb::RbmTrain => "rbm-train",
            Verb::RbmFeatures => "rbm-features",
            Verb::Oracle => "oracle",
        }
    }

    pub fn parse(name: &str) -> Result<Verb, CliError> {
        Verb::ALL.into_iter().find(|v| v.name() == name).ok_or_else(|| {
            CliError::config(format!(
                "unknown verb {name:?}; expected one of: {}",
                Verb::ALL.map(Verb::name).join(", ")
            ))
        })
    }

    pub fn keys(self) -> Vec<KeySpec> {
        let mut keys = common_keys();
        match self {
            Verb::Sample => {
                keys.extend(lattice_keys());
                keys.extend([
                    key("action", Kind::Choice(&["target", "model"]), "target", "distribution to sample"),
                    key("g", Kind::FloatList, REFERENCE_G, "target coefficients g1..g5"),
                    key("terms", Kind::IntList, "1,2,3,4", "active target terms"),
                    key("w", Kind::Float, "1.0", "homogeneous link coupling (model)"),
                    key("a", Kind::Float, "1.52425", "homogeneous quadratic coupling (model)"),
                    key("b", Kind::Float, "0.175", "homogeneous quartic coupling (model)"),
                    key("r", Kind::Float, "0.0", "homogeneous linear coupling (model)"),
                    key("couplings", Kind::Path, "", "checkpoint to take model couplings from"),
                ]);
                keys.extend(sampler_keys("10000", "2000", "10", "8"));
            }
            Verb::TrainVariational => {
                keys.extend(lattice_keys());
                keys.extend([
                    key("g", Kind::FloatList, REFERENCE_G, "target coefficients g1..g5"),
                    key("terms", Kind::IntList, "1,2,3", "active target terms"),
                    key("epochs", Kind::Int, "5000", "training epochs"),
                    key("learning_rate", Kind::Float, "0.001", "gradient step size"),
                    key("sweeps_between", Kind::Int, "50", "sweeps between epochs"),
                    key("resample_every", Kind::Int, "0", "restart chains every this many epochs (0 = never)"),
                    key("tying", Kind::Choice(&["homogeneous", "inhomogeneous"]), "homogeneous", "parameter tying"),
                    key("train_r", Kind::Bool, "false", "train the linear couplings"),
                    key("init", Kind::Choice(&["random", "fixed"]), "random", "initial couplings"),
                    key("init_w", Kind::Float, "0.0", "fixed initial w"),
                    key("init_a", Kind::Float, "0.5", "fixed initial a"),
                    key("init_b", Kind::Float, "0.1", "fixed initial b"),
                    key("init_r", Kind::Float, "0.0", "fixed initial r"),
                    key("resume", Kind::Path, "", "checkpoint to continue from"),
                    key("gradient_ceiling", Kind::Float, "1e8", "divergence guard on the gradient norm"),
                    key("b_floor", Kind::Float, "1e-6", "lower bound on b"),
                    key("log_every", Kind::Int, "100", "epochs between log lines (0 = silent)"),
                ]);
                keys.extend(sampler_keys("1000", "10000", "10", "1"));
            }
            Verb::TrainData => {
                keys.extend(lattice_keys());
                keys.extend(dataset_keys());
                keys.extend([
                    key("epochs", Kind::Int, "1000", "training epochs"),
                    key("learning_rate", Kind::Float, "0.01", "gradient step size"),
                    key("chains", Kind::Int, "64", "persistent chains"),
                    key("cd_steps", Kind::Int, "10", "sweeps per chain per epoch"),
                    key("burn_in", Kind::Int, "1000", "initial sweeps of the chains"),
                    key("batch_size", Kind::Int, "0", "mini-batch size (0 = automatic)"),
                    key("tying", Kind::Choice(&["homogeneous", "inhomogeneous"]), "inhomogeneous", "parameter tying"),
                    key("train_r", Kind::Bool, "true", "train the linear couplings"),
                    key("proposal_width", Kind::Float, "1.0", "initial Metropolis step"),
                    key("adapt", Kind::Bool, "true", "tune the Metropolis step"),
                    key("start", Kind::Choice(&["hot", "cold"]), "hot", "chain start"),
                    key("cold_value", Kind::Float, "0.0", "site value of a cold start"),
                    key("global_flip", Kind::Bool, "false", "add the field-sign flip move"),
                    key("step_clip", Kind::Float, "0", "cap on each update component (0 = off)"),
                    key("init_w", Kind::Float, "0.0", "initial w"),
                    key("init_a", Kind::Float, "0.5", "initial a"),
                    key("init_b", Kind::Float, "0.1", "initial b"),
                    key("init_r", Kind::Float, "0.0", "initial r"),
                    key("resume", Kind::Path, "", "checkpoint to continue from"),
                    key("gradient_ceiling", Kind::Float, "1e8", "divergence guard on the gradient norm"),
                    key("b_floor", Kind::Float, "1e-6", "lower bound on b"),
                    key("eval_samples", Kind::Int, "0", "samples drawn from the trained model (0 = none)"),
                    key("eval_chains", Kind::Int, "8", "chains for the evaluation samples"),
                    key("eval_burn_in", Kind::Int, "2000", "burn-in for the evaluation samples"),
                    key("eval_thinning", Kind::Int, "10", "thinning for the evaluation samples"),
                    key("log_every", Kind::Int, "100", "epochs between log lines (0 = silent)"),
                ]);
            }
            Verb::Reweight => {
                keys.extend(reweight_keys());
                keys.extend([
                    key("g_primes", Kind::FloatList, "-1.15,-1.1,-1.05,-1.0,-0.95,-0.9,-0.85", "values of the varied coefficient"),
                    key("observable", Kind::Choice(&["action", "magnetization"]), "action", "per-sample observable"),
                    key("neff_fraction", Kind::Float, "0.01", "flag estimates with N_eff below this fraction of N"),
                ]);
            }
            Verb::WeightFunction => {
                keys.extend(reweight_keys());
                keys.extend([
                    key("g_primes", Kind::FloatList, "-1.0,-0.9,-0.85,-0.8", "values of the varied coefficient"),
                    key("reference", Kind::Float, "-1.0", "coefficient value of the reference weight function"),
                    key("bins", Kind::Int, "64", "bins per histogram axis"),
                    key("margin", Kind::Float, "0.05", "relative padding of the histogram range"),
                    key("threshold", Kind::Float, "0.5", "overlap pass threshold"),
                ]);
            }
            Verb::RbmTrain => {
                keys.extend(dataset_keys());
                keys.extend([
                    key("L", Kind::Int, "16", "image side after resampling"),
                    key("n_hidden", Kind::Int, "64", "hidden units"),
                    key("hidden", Kind::Choice(&["binary", "continuous"]), "binary", "hidden unit type"),
                    key("gaussian", Kind::Bool, "true", "train without quartic terms"),
                    key("epochs", Kind::Int, "200", "training epochs"),
                    key("learning_rate", Kind::Float, "0.005", "gradient step size"),
                    key("cd_steps", Kind::Int, "1", "alternating updates in the negative phase"),
                    key("batch_size", Kind::Int, "10", "mini-batch size (0 = full batch)"),
                    key("persistent", Kind::Bool, "false", "persistent negative chains"),
                    key("init_scale", Kind::Float, "0.01", "spread of the initial weights"),
                    key("quadratic_floor", Kind::Float, "0.001", "lower bound on a and m without quartic terms"),
                    key("gradient_ceiling", Kind::Float, "1e8", "divergence guard on the gradient norm"),
                    key("log_every", Kind::Int, "10", "epochs between log lines (0 = silent)"),
                ]);
            }
            Verb::RbmFeatures => keys.extend([
                key("network", Kind::Path, "", "trained network checkpoint"),
                key("side", Kind::Int, "0", "image side (0 = square root of the visible count)"),
                key("images", Kind::Bool, "true", "write one PGM per feature"),
            ]),
            Verb::Oracle => keys.extend([
                key("phi_max", Kind::Float, "4.0", "integration range per site"),
                key("points", Kind::Int, "41", "quadrature points per site"),
            ]),
        }
        keys
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const REFERENCE_G: &str = "-1.0,1.52425,0.175,-1.0,0.15";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Bool,
    Text,
    /// Empty means unset.
    Path,
    FloatList,
    IntList,
    Choice(&'static [&'static str]),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeySpec {
    pub name: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    pub help: &'static str,
}

fn key(name: &'static str, kind: Kind, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec { name, kind, default, help }
}

fn common_keys() -> Vec<KeySpec> {
    vec![
        key("seed", Kind::Int, "0", "master random seed"),
        key("threads", Kind::Text, "auto", "worker threads (auto = PHI4ML_THREADS or all cores)"),
        key("out", Kind::Path, "out", "output directory"),
    ]
}

fn lattice_keys() -> Vec<KeySpec> {
    vec![
        key("L", Kind::Int, "4", "lattice side length"),
        key("dims", Kind::Int, "2", "lattice dimensions"),
        key("periodic", Kind::Bool, "true", "periodic boundaries"),
    ]
}

fn sampler_keys(n: &'static str, burn: &'static str, thin: &'static str, chains: &'static str) -> Vec<KeySpec> {
    vec![
        key("n_samples", Kind::Int, n, "samples per ensemble"),
        key("burn_in", Kind::Int, burn, "equilibration sweeps"),
        key("thinning", Kind::Int, thin, "sweeps between kept samples"),
        key("chains", Kind::Int, chains, "independent chains"),
        key("proposal_width", Kind::Float, "1.0", "initial Metropolis step"),
        key("adapt", Kind::Bool, "true", "tune the Metropolis step during burn-in"),
        key("start", Kind::Choice(&["hot", "cold"]), "hot", "chain start"),
        key("cold_value", Kind::Float, "0.0", "site value of a cold start"),
        key("global_flip", Kind::Bool, "false", "add the field-sign flip move"),
    ]
}

fn dataset_keys() -> Vec<KeySpec> {
    vec![
        key("dataset", Kind::Choice(&["gaussian", "ensemble", "pgm", "faces"]), "gaussian", "training data source"),
        key("input", Kind::Path, "", "ensemble file, PGM file or directory of PGM files"),
        key("data_n", Kind::Int, "10000", "samples for generated datasets"),
        key("data_mean", Kind::Float, "-0.5", "site mean of the gaussian dataset"),
        key("data_sd", Kind::Float, "0.05", "site standard deviation of the gaussian dataset"),
        key("resize", Kind::Bool, "false", "resample images to L x L"),
    ]
}

fn reweight_keys() -> Vec<KeySpec> {
    vec![
        key("ensemble", Kind::Path, "", "ensemble file written by sample"),
        key("varying_term", Kind::Int, "4", "index of the varied coefficient"),
        key("g", Kind::FloatList, REFERENCE_G, "target coefficients g1..g5"),
        key("complex", Kind::Bool, "true", "include the imaginary term"),
    ]
}

/// A fully resolved configuration: every schema key has a value.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub verb: Verb,
    values: BTreeMap<&'static str, String>,
    specs: Vec<KeySpec>,
}

impl RunConfig {
    fn spec(&self, name: &str) -> &KeySpec {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("key {name:?} is not in the {} schema", self.verb))
    }

    pub fn raw(&self, name: &str) -> &str {
        let spec = self.spec(name);
        &self.values[spec.name]
    }

    pub fn int(&self, name: &str) -> Result<i64, CliError> {
        let v = self.raw(name);
        v.parse()
            .map_err(|_| CliError::config(format!("{name} = {v:?} is not an integer")))
    }

    pub fn usize(&self, name: &str) -> Result<usize, CliError> {
        let v = self.int(name)?;
        usize::try_from(v).map_err(|_| CliError::config(format!("{name} = {v} must not be negative")))
    }

    pub fn u64(&self, name: &str) -> Result<u64, CliError> {
        Ok(self.usize(name)? as u64)
    }

    pub fn float(&self, name: &str) -> Result<f64, CliError> {
        let v = self.raw(name);
        v.parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| CliError::config(format!("{name} = {v:?} is not a finite number")))
    }

    pub fn bool(&self, name: &str) -> Result<bool, CliError> {
        match self.raw(name) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            v => Err(CliError::config(format!("{name} = {v:?} is not a boolean"))),
        }
    }

    pub fn text(&self, name: &str) -> &str {
        self.raw(name)
    }

    pub fn path(&self, name: &str) -> Option<PathBuf> {
        Some(self.raw(name)).filter(|v| !v.is_empty()).map(PathBuf::from)
    }

    pub fn required_path(&self, name: &str) -> Result<PathBuf, CliError> {
        self.path(name)
            .ok_or_else(|| CliError::config(format!("{name} is required for {}", self.verb)))
    }

    pub fn floats(&self, name: &str) -> Result<Vec<f64>, CliError> {
        split_list(self.raw(name))
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| CliError::config(format!("{name}: {t:?} is not a finite number")))
            })
            .collect()
    }

    pub fn ints(&self, name: &str) -> Result<Vec<usize>, CliError> {
        split_list(self.raw(name))
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| CliError::config(format!("{name}: {t:?} is not a non-negative integer")))
            })
            .collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        self.path("out").unwrap_or_else(|| PathBuf::from("."))
    }

    /// The resolved configuration in the input format, schema order.
    pub fn echo(&self) -> String {
        let mut out = format!("# resolved configuration\n[{}]\n", self.verb);
        for spec in &self.specs {
            out.push_str(&format!("{} = {}\n", spec.name, self.values[spec.name]));
        }
        out
    }

    /// Checks that every value parses as its declared kind.
    fn check_types(&self) -> Result<(), CliError> {
        for spec in &self.specs {
            match spec.kind {
                Kind::Int => {
                    self.int(spec.name)?;
                }
                Kind::Float => {
                    self.float(spec.name)?;
                }
                Kind::Bool => {
                    self.bool(spec.name)?;
                }
                Kind::FloatList => {
                    self.floats(spec.name)?;
                }
                Kind::IntList => {
                    self.ints(spec.name)?;
                }
                Kind::Choice(options) => {
                    let v = self.raw(spec.name);
                    if !options.contains(&v) {
                        return Err(CliError::config(format!(
                            "{} = {v:?} is not one of: {}",
                            spec.name,
                            options.join(", ")
                        )));
                    }
                }
                Kind::Text | Kind::Path => {}
            }
        }
        Ok(())
    }
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|t| !t.is_empty())
}

/// `(section, key, value, line)` entries of a config file. Keys before the
/// first section have section `None`.
type Entry = (Option<String>, String, String, usize);

pub fn parse_config_text(text: &str) -> Result<Vec<Entry>, CliError> {
    let mut section = None;
    let mut entries = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            Verb::parse(name).map_err(|e| CliError::config(format!("line {}: {}", k + 1, e.message)))?;
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("line {}: expected `key = value`, found {raw:?}", k + 1)))?;
        entries.push((section.clone(), key.trim().to_string(), value.trim().to_string(), k + 1));
    }
    Ok(entries)
}

fn assign(
    values: &mut BTreeMap<&'static str, String>,
    specs: &[KeySpec],
    key: &str,
    value: &str,
    origin: &str,
) -> Result<(), CliError> {
    let spec = specs.iter().find(|s| s.name == key).ok_or_else(|| {
        CliError::config(format!("unknown key {key:?} ({origin})"))
    })?;
    values.insert(spec.name, value.to_string());
    Ok(())
}

/// Resolves defaults, then the file's top-level keys, then its section for
/// this verb, then the `KEY=VALUE` overrides. Sections for other verbs are
/// checked against their own schemas and otherwise ignored.
pub fn parse_config(verb: &str, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let verb = Verb::parse(verb.trim())?;
    let specs = verb.keys();
    let mut values: BTreeMap<&'static str, String> =
        specs.iter().map(|s| (s.name, s.default.to_string())).collect();
    if let Ok(threads) = std::env::var("PHI4ML_THREADS") {
        values.insert("threads", threads);
    }

    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
        let entries = parse_config_text(&text)?;
        for (section, key, value, line) in entries.iter().filter(|e| e.0.is_none()) {
            debug_assert!(section.is_none());
            assign(&mut values, &specs, key, value, &format!("{} line {line}", path.display()))?;
        }
        for (section, key, value, line) in entries.iter().filter(|e| e.0.is_some()) {
            let section = section.as_deref().unwrap_or_default();
            let origin = format!("{} line {line}, section [{section}]", path.display());
            if section == verb.name() {
                assign(&mut values, &specs, key, value, &origin)?;
            } else {
                let other = Verb::parse(section)?.keys();
                if !other.iter().any(|s| s.name == key) {
                    return Err(CliError::config(format!("unknown key {key:?} ({origin})")));
                }
            }
        }
    }

    for o in overrides {
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("override {o:?} is not KEY=VALUE")))?;
        assign(&mut values, &specs, key.trim(), value.trim(), "command line")?;
    }

    let config = RunConfig { verb, values, specs };
    config.check_types()?;
    Ok(config)
}
