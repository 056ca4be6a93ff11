//! One function per verb. Each writes its CSV tables and checkpoints into the
//! configured output directory.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use phi4ml::io::{self, Checkpoint, CsvTable, GrayImage};
use phi4ml::likelihood::{self, Dataset, LikelihoodConfig, LikelihoodTrainer};
use phi4ml::mcmc::{self, magnetization, StartState};
use phi4ml::oracle::{self, Boltzmann, QuadratureSpec};
use phi4ml::phi4nn::{self, BipartiteCouplings, HiddenKind, RbmConfig, RbmMask};
use phi4ml::reweight::{self, Binning, ReweightRequest};
use phi4ml::variational::{self, ParamMask, Tying, VariationalConfig, VariationalTrainer};
use phi4ml::{
    build_square_lattice, CouplingSet, Error, FieldConfiguration, LatticeGeometry, SamplerConfig, TargetActionSpec,
};

use crate::config::{RunConfig, Verb};
use crate::error::CliError;

/// Files written by a run, in creation order.
#[derive(Debug, Default)]
pub struct Artifacts {
    pub files: Vec<PathBuf>,
}

struct Output {
    dir: PathBuf,
    artifacts: Artifacts,
}

impl Output {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn csv(&mut self, name: &str, table: &CsvTable) -> Result<(), CliError> {
        let p = self.path(name);
        table.write(&p)?;
        self.artifacts.files.push(p);
        Ok(())
    }

    fn text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let p = self.path(name);
        io::write_bytes(&p, text.as_bytes())?;
        self.artifacts.files.push(p);
        Ok(())
    }

    fn checkpoint(&mut self, name: &str, ck: &Checkpoint) -> Result<(), CliError> {
        self.text(name, &ck.encode())
    }

    fn pgm(&mut self, name: &str, image: &GrayImage) -> Result<(), CliError> {
        let p = self.path(name);
        io::write_pgm(&p, image)?;
        self.artifacts.files.push(p);
        Ok(())
    }
}

/// Echoes the resolved configuration, then dispatches to the verb.
pub fn run(config: &RunConfig) -> Result<Artifacts, CliError> {
    configure_threads(config.text("threads"))?;
    let mut out = Output {
        dir: config.out_dir(),
        artifacts: Artifacts::default(),
    };
    out.text("config.resolved", &config.echo())?;
    match config.verb {
        Verb::Sample => sample(config, &mut out)?,
        Verb::TrainVariational => train_variational(config, &mut out)?,
        Verb::TrainData => train_data(config, &mut out)?,
        Verb::Reweight => reweight_verb(config, &mut out)?,
        Verb::WeightFunction => weight_function(config, &mut out)?,
        Verb::RbmTrain => rbm_train(config, &mut out)?,
        Verb::RbmFeatures => rbm_features(config, &mut out)?,
        Verb::Oracle => oracle_verb(config, &mut out)?,
    }
    Ok(out.artifacts)
}

fn configure_threads(value: &str) -> Result<(), CliError> {
    if value == "auto" {
        return Ok(());
    }
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config(format!("threads = {value:?} must be a positive integer or auto")))?;
    phi4ml::set_thread_count(n);
    Ok(())
}

fn f(v: f64) -> String {
    io::fmt_f64(v)
}

fn geometry(config: &RunConfig) -> Result<LatticeGeometry, CliError> {
    Ok(LatticeGeometry::new(
        config.usize("L")?,
        config.usize("dims")?,
        config.bool("periodic")?,
    )?)
}

fn five(config: &RunConfig, name: &str) -> Result<[f64; 5], CliError> {
    let g = config.floats(name)?;
    g.as_slice()
        .try_into()
        .map_err(|_| CliError::config(format!("{name} needs exactly five values, got {}", g.len())))
}

fn start_state(config: &RunConfig) -> StartState {
    match config.text("start") {
        "cold" => StartState::Cold(config.float("cold_value").unwrap_or(0.0)),
        _ => StartState::Hot,
    }
}

fn tying(config: &RunConfig) -> Tying {
    match config.text("tying") {
        "homogeneous" => Tying::Homogeneous,
        _ => Tying::Inhomogeneous,
    }
}

fn sampler(config: &RunConfig) -> Result<SamplerConfig, CliError> {
    Ok(SamplerConfig {
        burn_in_sweeps: config.usize("burn_in")?,
        thinning_sweeps: config.usize("thinning")?,
        n_samples: config.usize("n_samples")?,
        proposal_width: config.float("proposal_width")?,
        adapt_proposal: config.bool("adapt")?,
        rng_seed: config.u64("seed")?,
        n_chains: config.usize("chains")?,
        start: start_state(config),
        global_flip: config.bool("global_flip")?,
    })
}

fn check_geometry(found: &LatticeGeometry, expected: &LatticeGeometry, path: &Path) -> Result<(), CliError> {
    if found != expected {
        return Err(CliError::config(format!(
            "{} holds a {} lattice but the configuration asks for {}",
            path.display(),
            found.describe(),
            expected.describe()
        )));
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Ok(Checkpoint::read(path)?)
}

fn sample(config: &RunConfig, out: &mut Output) -> Result<(), CliError> {
    let geom = geometry(config)?;
    let cfg = sampler(config)?;
    let ensemble = if config.text("action") == "target" {
        let target = TargetActionSpec::with_terms(five(config, "g")?, &config.ints("terms")?)?;
        if target.is_complex() {
            return Err(CliError::config(
                "the imaginary term cannot be sampled directly; drop term 5 and reweight instead",
            ));
        }
        mcmc::sample_target_ensemble(&target, &geom, &cfg)?
    } else {
        let couplings = match config.path("couplings") {
            Some(p) => {
                let ck = load_checkpoint(&p)?;
                check_geometry(&ck.geometry()?, &geom, &p)?;
                ck.couplings("theta", &geom)?
            }
            None => CouplingSet::homogeneous(
                &geom,
                config.float("w")?,
                config.float("a")?,
                config.float("b")?,
                config.float("r")?,
            ),
        };
        mcmc::sample_ensemble(&couplings, &geom, &cfg)?
    };
    out.text("ensemble.txt", &io::encode_ensemble(&ensemble))?;

    let mut table = CsvTable::new(&["sample", "action", "magnetization", "magnetization_sum"]);
    for (k, (s, c)) in ensemble.actions().iter().zip(ensemble.configs()).enumerate() {
        table.row(&[k.to_string(), f(*s), f(magnetization(c)), f(mcmc::magnetization_sum(c))]);
    }
    out.csv("observables.csv", &table)?;

    let mut summary = CsvTable::new(&["quantity", "mean", "std_error"]);
    let action = phi4ml::stats::mean_with_error(ensemble.actions())?;
    summary.row(&["action".into(), f(action.mean), f(action.std_error)]);
    for (name, obs) in [
        ("magnetization", magnetization as fn(&FieldConfiguration) -> f64),
        ("abs_magnetization", |c: &FieldConfiguration| magnetization(c).abs()),
        ("magnetization_sq", |c: &FieldConfiguration| magnetization(c).powi(2)),
    ] {
        let e = mcmc::estimate_observable(&ensemble, obs)?;
        summary.row(&[name.into(), f(e.mean), f(e.std_error)]);
    }
    summary.row(&["acceptance".into(), f(ensemble.acceptance()), "0.0".into()]);
    out.csv("summary.csv", &summary)
}

const VARIATIONAL_HEADER: [&str; 6] = ["epoch", "estimated_kl", "gradient_norm", "mean_w", "mean_a", "mean_b"];

fn train_variational(config: &RunConfig, out: &mut Output) -> Result<(), CliError> {
    let geom = geometry(config)?;
    let target = TargetActionSpec::with_terms(five(config, "g")?, &config.ints("terms")?)?;
    if target.is_complex() {
        return Err(CliError::config("training targets must be real; remove term 5 from terms"));
    }
    let tying = tying(config);
    let mask = ParamMask {
        r: config.bool("train_r")?,
        ..ParamMask::default()
    };
    let vc = VariationalConfig {
        learning_rate: config.float("learning_rate")?,
        sampler: sampler(config)?,
        resample_every: config.usize("resample_every")?,
        sweeps_between_epochs: config.usize("sweeps_between")?,
        adapt_between_epochs: config.bool("adapt")?,
        tying,
        trainable: mask,
        gradient_ceiling: config.float("gradient_ceiling")?,
        b_floor: config.float("b_floor")?,
        ..VariationalConfig::default()
    };
    let mut trainer = match config.path("resume") {
        Some(p) => {
            let (state, g) = io::variational_state(&load_checkpoint(&p)?)?;
            check_geometry(&g, &geom, &p)?;
            VariationalTrainer::resume(state, target, &geom, vc)?
        }
        None => {
            let init = match config.text("init") {
                "fixed" => CouplingSet::homogeneous(
                    &geom,
                    config.float("init_w")?,
                    config.float("init_a")?,
                    config.float("init_b")?,
                    config.float("init_r")?,
                ),
                _ => variational::init_random_couplings_seeded(&geom, tying, mask, config.u64("seed")?),
            };
            VariationalTrainer::new(init, target, &geom, vc)?
        }
    };

    let epochs = config.usize("epochs")?;
    let log_every = config.usize("log_every")?;
    let mut table = CsvTable::new(&VARIATIONAL_HEADER);
    if epochs == 0 {
        let ensemble = trainer.current_ensemble()?;
        let kl = variational::estimate_kl(&ensemble, &target)?;
        let couplings = trainer.state().couplings.clone();
        let mut grad = variational::variational_gradient(&ensemble, &target, &couplings)?;
        variational::constrain_gradient(&mut grad, tying, mask);
        let m = couplings.family_means();
        table.numbers(&[trainer.state().epoch as f64, kl.mean, grad.norm(), m[0], m[1], m[2]]);
        out.csv("trace.csv", &table)?;
        return Ok(());
    }

    let mut failure = None;
    for _ in 0..epochs {
        match trainer.step() {
            Ok(r) => {
                table.numbers(&[r.epoch as f64, r.kl, r.gradient_norm, r.means[0], r.means[1], r.means[2]]);
                if log_every > 0 && (r.epoch + 1) % log_every == 0 {
                    eprintln!(
                        "epoch {:>6}  kl {:.6e}  |grad| {:.3e}  w {:.5} a {:.5} b {:.5}",
                        r.epoch + 1,
                        r.kl,
                        r.gradient_norm,
                        r.means[0],
                        r.means[1],
                        r.means[2]
                    );
                }
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    out.csv("trace.csv", &table)?;
    out.checkpoint("checkpoint.ckpt", &io::variational_checkpoint(trainer.state(), &geom))?;
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

/// Training images or configurations as flat field vectors of equal length.
fn load_fields(config: &RunConfig, side: usize, geom: Option<&LatticeGeometry>) -> Result<Vec<Vec<f64>>, CliError> {
    let seed = config.u64("seed")?;
    match config.text("dataset") {
        "gaussian" => {
            let g = match geom {
                Some(g) => g.clone(),
                None => build_square_lattice(side, true)?,
            };
            let d = Dataset::gaussian(
                &g,
                config.usize("data_n")?,
                config.float("data_mean")?,
                config.float("data_sd")?,
                seed,
            )?;
            Ok(d.samples().iter().map(|c| c.values().to_vec()).collect())
        }
        "faces" => Ok(phi4nn::synthetic_faces(config.usize("data_n")?, side, seed)),
        "ensemble" => {
            let e = io::read_ensemble(config.required_path("input")?)?;
            Ok(e.configs().iter().map(|c| c.values().to_vec()).collect())
        }
        _ => {
            let input = config.required_path("input")?;
            let files = pgm_files(&input)?;
            let resize = config.bool("resize")?;
            files
                .iter()
                .map(|p| {
                    let mut img = io::read_pgm(p)?;
                    if resize {
                        img = img.resized(side, side);
                    } else if img.width != side || img.height != side {
                        return Err(CliError::config(format!(
                            "{} is {}x{}, expected {side}x{side} (set resize = true to resample)",
                            p.display(),
                            img.width,
                            img.height
                        )));
                    }
                    Ok(img.pixels.iter().map(|&v| likelihood::pixel_to_field(v)).collect())
                })
                .collect()
        }
    }
}

fn pgm_files(input: &Path) -> Result<Vec<PathBuf>, CliError> {
    let meta = std::fs::metadata(input).map_err(|e| CliError::io(format!("{}: {e}", input.display())))?;
    if meta.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| CliError::io(format!("{}: {e}", input.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::io(format!("no .pgm files in {}", input.display())));
    }
    Ok(files)
}

fn train_data(config: &RunConfig, out: &mut Output) -> Result<(), CliError> {
    let geom = geometry(config)?;
    let side = geom.side_length();
    if geom.dimensions() != 2 && matches!(config.text("dataset"), "pgm" | "faces") {
        return Err(CliError::config("image datasets need dims = 2"));
    }
    let fields = load_fields(config, side, Some(&geom))?;
    let samples = fields
        .into_iter()
        .map(FieldConfiguration::new)
        .collect::<phi4ml::Result<Vec<_>>>()?;
    let dataset = Dataset::new(&geom, samples, config.text("dataset"))?;

    let clip = config.float("step_clip")?;
    let batch = config.usize("batch_size")?;
    let lc = LikelihoodConfig {
        learning_rate: config.float("learning_rate")?,
        n_chains: config.usize("chains")?,
        cd_steps: config.usize("cd_steps")?,
        burn_in_sweeps: config.usize("burn_in")?,
        batch_size: (batch > 0).then_some(batch),
        tying: tying(config),
        trainable: ParamMask {
            r: config.bool("train_r")?,
            ..ParamMask::all()
        },
        proposal_width: config.float("proposal_width")?,
        adapt_proposal: config.bool("adapt")?,
        start: start_state(config),
        global_flip: config.bool("global_flip")?,
        step_clip: (clip > 0.0).then_some(clip),
        gradient_ceiling: config.float("gradient_ceiling")?,
        b_floor: config.float("b_floor")?,
        rng_seed: config.u64("seed")?,
    };
    let mut trainer = match config.path("resume") {
        Some(p) => {
            let (state, g) = io::likelihood_state(&load_checkpoint(&p)?)?;
            check_geometry(&g, &geom, &p)?;
            LikelihoodTrainer::resume(&dataset, state, lc)?
        }
        None => {
            let init = CouplingSet::homogeneous(
                &geom,
                config.float("init_w")?,
                config.float("init_a")?,
                config.float("init_b")?,
                config.float("init_r")?,
            );
            LikelihoodTrainer::new(&dataset, init, lc)?
        }
    };

    let log_every = config.usize("log_every")?;
    let mut table = CsvTable::new(&["epoch", "loss", "gradient_norm", "mean_w", "mean_a", "mean_b", "mean_r"]);
    let mut failure = None;
    for _ in 0..config.usize("epochs")? {
        match trainer.step() {
            Ok(r) => {
                table.numbers(&[
                    r.epoch as f64,
                    r.loss,
                    r.gradient_norm,
                    r.means[0],
                    r.means[1],
                    r.means[2],
                    r.means[3],
                ]);
                if log_every > 0 && (r.epoch + 1) % log_every == 0 {
                    eprintln!(
                        "epoch {:>6}  loss {:+.5e}  |grad| {:.3e}  w {:.5} a {:.5} b {:.5} r {:.5}",
                        r.epoch + 1,
                        r.loss,
                        r.gradient_norm,
                        r.means[0],
                        r.means[1],
                        r.means[2],
                        r.means[3]
                    );
                }
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    out.csv("trace.csv", &table)?;
    out.checkpoint("checkpoint.ckpt", &io::likelihood_checkpoint(trainer.state(), &geom))?;
    if let Some(e) = failure {
        return Err(e.into());
    }

    let n_eval = config.usize("eval_samples")?;
    if n_eval > 0 {
        let couplings = trainer.state().couplings.clone();
        let cfg = SamplerConfig {
            burn_in_sweeps: config.usize("eval_burn_in")?,
            thinning_sweeps: config.usize("eval_thinning")?,
            n_samples: n_eval,
            n_chains: config.usize("eval_chains")?,
            rng_seed: config.u64("seed")?.wrapping_add(1),
            global_flip: config.bool("global_flip")?,
            ..SamplerConfig::default()
        };
        let ensemble = mcmc::sample_ensemble(&couplings, &geom, &cfg)?;
        let sites: Vec<f64> = ensemble.configs().iter().flat_map(|c| c.values().iter().copied()).collect();
        let mut marginal = CsvTable::new(&["quantity", "value"]);
        marginal.row(&["site_mean".into(), f(phi4ml::stats::mean(&sites))]);
        marginal.row(&["site_sd".into(), f(phi4ml::stats::variance(&sites).sqrt())]);
        marginal.row(&["samples".into(), ensemble.len().to_string()]);
        out.csv("marginal.csv", &marginal)?;
        if geom.dimensions() == 2 {
            let last = ensemble.configs().last().expect("at least one sample");
            let img = GrayImage::new(side, side, likelihood::configuration_to_image(last))?;
            out.pgm("model_sample.pgm", &img)?;
        }
    }
    Ok(())
}

fn reweight_request(config: &RunConfig, g_primes: Vec<f64>) -> Result<ReweightRequest, CliError> {
    Ok(ReweightRequest::new(
        config.usize("varying_term")?,
        five(config, "g")?,
        config.bool("complex")?,
        g_primes,
    )?)
}

fn reweight_verb(config: &RunConfig, out: &mut Output) -> Result<(), CliError> {
    let ensemble = io::read_ensemble(config.required_path("ensemble")?)?;
    let mut request = reweight_request(config, config.floats("g_primes")?)?;
    request.neff_fraction = config.float("neff_fraction")?;
    let observable = config.text("observable").to_string();
    let mut table = CsvTable::new(&["g_prime", "re", "sigma_re", "im", "sigma_im", "n_eff", "low_overlap"]);
    for &gp in &request.g_primes {
        let target = request.target_at(gp);
        let est = reweight::reweight_observable(
            &ensemble,
            |c, t| match observable.as_str() {
                "magnetization" => Complex64::new(magnetization(c), 0.0),
                _ => target.evaluate_terms(t),
            },
            &request,
            gp,
        )?;
        table.row(&[
            f(gp),
            f(est.mean.re),
            f(est.std_error_re),
            f(est.mean.im),
            f(est.std_error_im),
            f(est.n_effective),
            est.low_overlap.to_string(),
        ]);
        if est.low_overlap {
            eprintln!("warning: g' = {gp}: effective sample size {:.1} is below threshold", est.n_effective);
        }
    }
    out.csv("reweight.csv", &table)
}

fn weight_function(config: &RunConfig, out: &mut Output) -> Result<(), CliError> {
    let ensemble = io::read_ensemble(config.required_path("ensemble")?)?;
    let g_primes = config.floats("g_primes")?;
    let reference = config.float("reference")?;
    let request = reweight_request(config, g_primes.clone())?;
    let bins = config.usize("bins")?;
    let binning = Binning {
        bins: [bins; 3],
        margin: config.float("margin")?,
    };
    let threshold = config.float("threshold")?;
    let base = reweight::build_weight_function(&ensemble, &request, reference, &binning)?;
    let mut overlap = CsvTable::new(&["index", "g_prime", "overlap", "passed"]);
    for (k, &gp) in g_primes.iter().enumerate() {
        let wf = reweight::build_weight_function(&ensemble, &request, gp, &binning)?;
        let mut table = CsvTable::new(&["bin_center_S", "re_W", "im_W"]);
        for (c, w) in wf.bin_centers.iter().zip(&wf.weights) {
            table.numbers(&[*c, w.re, w.im]);
        }
        out.csv(&format!("weight_function_{k}.csv"), &table)?;
        let o = reweight::overlap_diagnostic(&base, &wf, threshold)?;
        overlap.row(&[k.to_string(), f(gp), f(o.score), o.passed.to_string()]);
    }
    out.csv("overlap.csv", &overlap)
}

fn rbm_train(config: &RunConfig, out: &mut Output) -> Result<(), CliError> {
    let side = config.usize("L")?;
    let data = load_fields(config, side, None)?;
    let nv = data.first().map(Vec::len).ok_or(Error::Empty("dataset"))?;
    let kind = match config.text("hidden") {
        "continuous" => HiddenKind::Continuous,
        _ => HiddenKind::Binary,
    };
    let seed = config.u64("seed")?;
    let mut init_rng = mcmc::chain_rng(seed, 1 << 40);
    let init = BipartiteCouplings::random(nv, config.usize("n_hidden")?, kind, config.float("init_scale")?, &mut init_rng);
    let batch = config.usize("batch_size")?;
    let rc = RbmConfig {
        learning_rate: config.float("learning_rate")?,
        cd_steps: config.usize("cd_steps")?,
        batch_size: (batch > 0).then_some(batch),
        persistent: config.bool("persistent")?,
        trainable: if config.bool("gaussian")? { RbmMask::gaussian() } else { RbmMask::all() },
        quadratic_floor: config.float("quadratic_floor")?,
        gradient_ceiling: config.float("gradient_ceiling")?,
        rng_seed: seed,
    };
    let report = phi4nn::train_rbm(&data, init, &rc, config.usize("epochs")?)?;
    let log_every = config.usize("log_every")?;
    let mut table = CsvTable::new(&["epoch", "reconstruction_error", "gradient_norm"]);
    for r in &report.history {
        table.numbers(&[r.epoch as f64, r.reconstruction_error, r.gradient_norm]);
        if log_every > 0 && (r.epoch + 1) % log_every == 0 {
            eprintln!(
                "epoch {:>6}  reconstruction {:.5e}  |grad| {:.3e}",
                r.epoch + 1,
                r.reconstruction_error,
                r.gradient_norm
            );
        }
    }
    out.csv("trace.csv", &table)?;
    let mut ck = Checkpoint::new("network");
    if side * side == nv {
        ck.put_scalar("side", side);
    }
    ck.put_bipartite(&report.couplings);
    out.checkpoint("network.ckpt", &ck)
}

fn rbm_features(config: &RunConfig, out: &mut Output) -> Result<(), CliError> {
    let ck = load_checkpoint(&config.required_path("network")?)?;
    let net = ck.bipartite()?;
    let nv = net.n_visible();
    let side = match config.usize("side")? {
        0 => ck.scalar::<usize>("side").unwrap_or_else(|_| (nv as f64).sqrt().round() as usize),
        s => s,
    };
    if side * side != nv {
        return Err(CliError::config(format!("{nv} visible units do not form a {side}x{side} image")));
    }
    let images = config.bool("images")?;
    let mut features = CsvTable::new(&["hidden", "site", "weight"]);
    let mut coherence = CsvTable::new(&["hidden", "lag1_autocorrelation"]);
    for j in 0..net.n_hidden() {
        let w = phi4nn::extract_features(&net, j)?;
        for (i, x) in w.iter().enumerate() {
            features.row(&[j.to_string(), i.to_string(), f(*x)]);
        }
        coherence.row(&[j.to_string(), f(phi4nn::spatial_autocorrelation(&w, side))]);
        if images {
            out.pgm(&format!("feature_{j:03}.pgm"), &GrayImage::from_values(side, side, &w)?)?;
        }
    }
    out.csv("features.csv", &features)?;
    out.csv("coherence.csv", &coherence)
}

/// Cases of the 2×2 periodic oracle table.
pub fn oracle_cases(geom: &LatticeGeometry) -> Vec<(&'static str, OracleSource)> {
    let g = TargetActionSpec::reference_coefficients();
    vec![
        ("model_a", OracleSource::Model(CouplingSet::homogeneous(geom, 0.2, 0.6, 0.15, 0.0))),
        ("model_b", OracleSource::Model(CouplingSet::homogeneous(geom, 0.35, 0.5, 0.3, 0.1))),
        ("target_3", OracleSource::Target(TargetActionSpec::truncated(g, 3).expect("valid terms"))),
        ("target_4", OracleSource::Target(TargetActionSpec::truncated(g, 4).expect("valid terms"))),
        ("target_5", OracleSource::Target(TargetActionSpec::new(g))),
    ]
}

pub enum OracleSource {
    Model(CouplingSet),
    Target(TargetActionSpec),
}

impl OracleSource {
    fn boltzmann(&self) -> Boltzmann<'_> {
        match self {
            OracleSource::Model(c) => Boltzmann::Model(c),
            OracleSource::Target(t) => Boltzmann::Target(t),
        }
    }
}

fn oracle_verb(config: &RunConfig, out: &mut Output) -> Result<(), CliError> {
    let quad = QuadratureSpec::new(config.float("phi_max")?, config.usize("points")?);
    quad.validate()?;
    let table = oracle_table(&quad)?;
    out.csv("oracle.csv", &table)
}

/// The oracle table: per case the log-partition function and low moments,
/// then two KL divergences and one variational gradient.
pub fn oracle_table(quad: &QuadratureSpec) -> Result<CsvTable, CliError> {
    let geom = build_square_lattice(2, true)?;
    let cases = oracle_cases(&geom);
    let mut table = CsvTable::new(&["case", "quantity", "re", "im"]);
    let names = ["phi0", "phi0_sq", "phi0_quart", "nn_corr", "nnn_corr"];
    for (name, source) in &cases {
        let m = oracle::exact_expectations(source.boltzmann(), &geom, quad, names.len(), |phi, o| {
            o[0] = phi[0];
            o[1] = phi[0] * phi[0];
            o[2] = phi[0].powi(4);
            o[3] = phi[0] * phi[1];
            o[4] = phi[0] * phi[3];
        })?;
        table.row(&[name.to_string(), "log_z".into(), f(m.log_z.re), f(m.log_z.im)]);
        for (q, v) in names.iter().zip(&m.values) {
            table.row(&[name.to_string(), q.to_string(), f(v.re), f(v.im)]);
        }
    }
    let lookup = |n: &str| &cases.iter().find(|c| c.0 == n).expect("known case").1;
    for (p, q) in [("model_a", "target_4"), ("model_b", "target_3")] {
        let kl = oracle::exact_kl(lookup(p).boltzmann(), lookup(q).boltzmann(), &geom, quad)?;
        table.row(&[format!("{p}|{q}"), "kl".into(), f(kl), "0.0".into()]);
    }
    if let (OracleSource::Model(c), OracleSource::Target(t)) = (lookup("model_a"), lookup("target_4")) {
        let grad = oracle::exact_variational_gradient(c, t, &geom, quad)?.covariance;
        for (q, family) in [("grad_w", &grad.w), ("grad_a", &grad.a), ("grad_b", &grad.b), ("grad_r", &grad.r)] {
            table.row(&["model_a|target_4".into(), q.into(), f(family.iter().sum()), "0.0".into()]);
        }
    }
    Ok(table)
}
