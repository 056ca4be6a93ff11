//! File formats: PGM images, the columnar ensemble text format, versioned
//! text checkpoints and CSV tables. Floats are written in Rust's shortest
//! round-trip form, so reading back reproduces every bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::lattice::{CouplingSet, FieldConfiguration, LatticeGeometry, TermSums};
use crate::likelihood::LikelihoodTrainState;
use crate::mcmc::{ChainPool, EnsembleSource, MarkovChain, SampleEnsemble};
use crate::phi4nn::{BipartiteCouplings, HiddenKind};
use crate::variational::TrainState;

/// An 8-bit grey-level image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        crate::lattice::check_len("image pixels", width * height, pixels.len())?;
        Ok(GrayImage { width, height, pixels })
    }

    /// Linearly rescales arbitrary values to `[0, 255]`; a constant input
    /// becomes mid-grey.
    pub fn from_values(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let pixels = values
            .iter()
            .map(|&v| {
                if hi > lo {
                    ((v - lo) / (hi - lo) * 255.0).round() as u8
                } else {
                    128
                }
            })
            .collect();
        GrayImage::new(width, height, pixels)
    }

    /// Nearest-neighbour resampling to `width × height`.
    pub fn resized(&self, width: usize, height: usize) -> GrayImage {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                let sx = x * self.width / width;
                pixels.push(self.pixels[sx + self.width * sy]);
            }
        }
        GrayImage { width, height, pixels }
    }
}

fn parse_err(what: impl Into<String>) -> Error {
    Error::Parse(what.into())
}

/// Parses a P2 (ASCII) or P5 (binary) PGM with maxval 255.
pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 0;
    let token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(parse_err("PGM header ended early"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos)?;
    let number = |s: String| s.parse::<usize>().map_err(|_| parse_err(format!("PGM header field {s:?} is not a number")));
    let width = number(token(&mut pos)?)?;
    let height = number(token(&mut pos)?)?;
    let maxval = number(token(&mut pos)?)?;
    if maxval != 255 {
        return Err(parse_err(format!("PGM maxval {maxval} is not supported (expected 255)")));
    }
    let n = width * height;
    let pixels = match magic.as_str() {
        "P5" => {
            pos += 1;
            if bytes.len() < pos + n {
                return Err(parse_err(format!(
                    "PGM data truncated: expected {n} bytes, found {}",
                    bytes.len().saturating_sub(pos)
                )));
            }
            bytes[pos..pos + n].to_vec()
        }
        "P2" => {
            let mut px = Vec::with_capacity(n);
            for _ in 0..n {
                let v = number(token(&mut pos).map_err(|_| parse_err("PGM data truncated"))?)?;
                if v > 255 {
                    return Err(parse_err(format!("PGM value {v} exceeds maxval")));
                }
                px.push(v as u8);
            }
            px
        }
        other => return Err(parse_err(format!("unsupported PGM magic {other:?}"))),
    };
    GrayImage::new(width, height, pixels)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Binary (P5) encoding.
pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

/// ASCII (P2) encoding.
pub fn encode_pgm_ascii(image: &GrayImage) -> String {
    let mut out = format!("P2\n{} {}\n255\n", image.width, image.height);
    for row in image.pixels.chunks(image.width.max(1)) {
        let line: Vec<String> = row.iter().map(|p| p.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_pgm(path: impl AsRef<Path>, image: &GrayImage) -> Result<()> {
    write_bytes(path, &encode_pgm(image))
}

pub fn write_bytes(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// A CSV table built in memory: header row, comma separators, `.` decimals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CsvTable {
    text: String,
    columns: usize,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        CsvTable {
            text: format!("{}\n", header.join(",")),
            columns: header.len(),
        }
    }

    /// Appends a row of already formatted cells.
    pub fn row(&mut self, cells: &[String]) {
        debug_assert_eq!(cells.len(), self.columns);
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn numbers(&mut self, values: &[f64]) {
        let cells: Vec<String> = values.iter().map(|v| fmt_f64(*v)).collect();
        self.row(&cells);
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path, self.text.as_bytes())
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| parse_err(format!("{s:?} is not a number")))
}

/// Parses CSV rows of numbers, skipping a header line if its first cell is
/// not numeric.
pub fn parse_numeric_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if k == 0 && cells[0].parse::<f64>().is_err() {
            continue;
        }
        let row = cells
            .iter()
            .map(|c| parse_f64(c))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| parse_err(format!("line {}: {e}", k + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

const ENSEMBLE_MAGIC: &str = "PHI4ML-ENSEMBLE v1";

fn source_digest(source: &EnsembleSource) -> String {
    match source {
        EnsembleSource::Couplings(c) => c.digest(),
        EnsembleSource::Target(t) => crate::lattice::digest_values(t.coefficients()),
        EnsembleSource::Loaded { digest } => digest.clone(),
    }
}

/// Columnar text form: a header then one row per sample with `S`, the five
/// term sums and the `V` field values.
pub fn encode_ensemble(ensemble: &SampleEnsemble) -> String {
    let g = ensemble.geometry();
    let mut out = String::new();
    let _ = writeln!(out, "{ENSEMBLE_MAGIC}");
    let _ = writeln!(out, "geometry {} {} {}", g.side_length(), g.dimensions(), g.is_periodic());
    let _ = writeln!(out, "digest {}", source_digest(ensemble.source()));
    let _ = writeln!(out, "seed {}", ensemble.seed());
    let _ = writeln!(out, "samples {}", ensemble.len());
    for ((s, t), c) in ensemble.actions().iter().zip(ensemble.terms()).zip(ensemble.configs()) {
        let mut cells = vec![fmt_f64(*s)];
        cells.extend(t.0.iter().map(|x| fmt_f64(*x)));
        cells.extend(c.values().iter().map(|x| fmt_f64(*x)));
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

fn header_value<'a>(line: Option<&'a str>, key: &str) -> Result<Vec<&'a str>> {
    let line = line.ok_or_else(|| parse_err(format!("missing {key} line")))?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some(key) {
        return Err(parse_err(format!("expected {key} line, found {line:?}")));
    }
    Ok(parts.collect())
}

fn parse_geometry(fields: &[&str]) -> Result<LatticeGeometry> {
    if fields.len() != 3 {
        return Err(parse_err("geometry line needs side, dimensions and periodic flag"));
    }
    let side = fields[0].parse().map_err(|_| parse_err("bad side length"))?;
    let dims = fields[1].parse().map_err(|_| parse_err("bad dimensions"))?;
    let periodic = fields[2].parse().map_err(|_| parse_err("bad periodic flag"))?;
    LatticeGeometry::new(side, dims, periodic)
}

pub fn decode_ensemble(text: &str) -> Result<SampleEnsemble> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(ENSEMBLE_MAGIC) {
        return Err(parse_err(format!("not an ensemble file (expected {ENSEMBLE_MAGIC:?})")));
    }
    let geometry = parse_geometry(&header_value(lines.next(), "geometry")?)?;
    let digest = header_value(lines.next(), "digest")?.join("");
    let seed: u64 = header_value(lines.next(), "seed")?
        .first()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| parse_err("bad seed"))?;
    let n: usize = header_value(lines.next(), "samples")?
        .first()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| parse_err("bad sample count"))?;
    let v = geometry.volume();
    let mut configs = Vec::with_capacity(n);
    let mut actions = Vec::with_capacity(n);
    let mut terms = Vec::with_capacity(n);
    for k in 0..n {
        let line = lines.next().ok_or_else(|| parse_err(format!("ensemble truncated after {k} of {n} rows")))?;
        let values = line.split_whitespace().map(parse_f64).collect::<Result<Vec<_>>>()?;
        if values.len() != 6 + v {
            return Err(parse_err(format!("row {k} has {} values, expected {}", values.len(), 6 + v)));
        }
        actions.push(values[0]);
        terms.push(TermSums([values[1], values[2], values[3], values[4], values[5]]));
        configs.push(FieldConfiguration::new(values[6..].to_vec())?);
    }
    SampleEnsemble::from_cached(&geometry, configs, actions, terms, EnsembleSource::Loaded { digest }, seed)
}

pub fn write_ensemble(path: impl AsRef<Path>, ensemble: &SampleEnsemble) -> Result<()> {
    write_bytes(path, encode_ensemble(ensemble).as_bytes())
}

pub fn read_ensemble(path: impl AsRef<Path>) -> Result<SampleEnsemble> {
    decode_ensemble(&read_text(path)?)
}

pub const CHECKPOINT_MAGIC: &str = "PHI4ML-CKPT v1";

/// Labelled blocks of values under the checkpoint header. Each block is a
/// `label count` line followed by one line of `count` tokens.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    blocks: Vec<(String, Vec<String>)>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        let mut c = Checkpoint::default();
        c.put_tokens("kind", vec![kind.to_string()]);
        c
    }

    pub fn kind(&self) -> Option<&str> {
        self.tokens("kind").ok().and_then(|t| t.first()).map(String::as_str)
    }

    pub fn put_tokens(&mut self, label: &str, tokens: Vec<String>) {
        self.blocks.push((label.to_string(), tokens));
    }

    pub fn put_values(&mut self, label: &str, values: &[f64]) {
        self.put_tokens(label, values.iter().map(|v| fmt_f64(*v)).collect());
    }

    pub fn put_scalar(&mut self, label: &str, value: impl ToString) {
        self.put_tokens(label, vec![value.to_string()]);
    }

    pub fn tokens(&self, label: &str) -> Result<&[String]> {
        self.blocks
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, t)| t.as_slice())
            .ok_or_else(|| parse_err(format!("checkpoint has no {label:?} block")))
    }

    pub fn values(&self, label: &str) -> Result<Vec<f64>> {
        self.tokens(label)?.iter().map(|t| parse_f64(t)).collect()
    }

    pub fn scalar<T: std::str::FromStr>(&self, label: &str) -> Result<T> {
        let t = self.tokens(label)?;
        t.first()
            .filter(|_| t.len() == 1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(format!("checkpoint block {label:?} is not a single value of the right type")))
    }

    pub fn encode(&self) -> String {
        let mut out = format!("{CHECKPOINT_MAGIC}\n");
        for (label, tokens) in &self.blocks {
            let _ = writeln!(out, "{label} {}", tokens.len());
            out.push_str(&tokens.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn decode(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CHECKPOINT_MAGIC) {
            return Err(parse_err(format!("not a checkpoint (expected header {CHECKPOINT_MAGIC:?})")));
        }
        let mut c = Checkpoint::default();
        while let Some(head) = lines.next() {
            if head.trim().is_empty() {
                continue;
            }
            let (label, count) = head
                .rsplit_once(' ')
                .ok_or_else(|| parse_err(format!("bad block header {head:?}")))?;
            let count: usize = count.parse().map_err(|_| parse_err(format!("bad block header {head:?}")))?;
            let body = lines.next().ok_or_else(|| parse_err(format!("block {label:?} has no body")))?;
            let tokens: Vec<String> = body.split_whitespace().map(str::to_string).collect();
            if tokens.len() != count {
                return Err(parse_err(format!(
                    "block {label:?} declares {count} values but has {}",
                    tokens.len()
                )));
            }
            c.blocks.push((label.to_string(), tokens));
        }
        Ok(c)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path, self.encode().as_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::decode(&read_text(path)?)
    }

    pub fn put_geometry(&mut self, g: &LatticeGeometry) {
        self.put_tokens(
            "geometry",
            vec![g.side_length().to_string(), g.dimensions().to_string(), g.is_periodic().to_string()],
        );
    }

    pub fn geometry(&self) -> Result<LatticeGeometry> {
        let t: Vec<&str> = self.tokens("geometry")?.iter().map(String::as_str).collect();
        parse_geometry(&t)
    }

    pub fn put_couplings(&mut self, prefix: &str, c: &CouplingSet) {
        self.put_values(&format!("{prefix}.w"), &c.w);
        self.put_values(&format!("{prefix}.a"), &c.a);
        self.put_values(&format!("{prefix}.b"), &c.b);
        self.put_values(&format!("{prefix}.r"), &c.r);
    }

    pub fn couplings(&self, prefix: &str, geometry: &LatticeGeometry) -> Result<CouplingSet> {
        let c = CouplingSet {
            w: self.values(&format!("{prefix}.w"))?,
            a: self.values(&format!("{prefix}.a"))?,
            b: self.values(&format!("{prefix}.b"))?,
            r: self.values(&format!("{prefix}.r"))?,
        };
        c.validate(geometry)?;
        Ok(c)
    }

    pub fn put_rng(&mut self, label: &str, rng: &ChaCha8Rng) {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        self.put_tokens(
            label,
            vec![seed, rng.get_stream().to_string(), rng.get_word_pos().to_string()],
        );
    }

    pub fn rng(&self, label: &str) -> Result<ChaCha8Rng> {
        let t = self.tokens(label)?;
        let bad = || parse_err(format!("bad generator state in block {label:?}"));
        if t.len() != 3 || t[0].len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (k, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&t[0][2 * k..2 * k + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(t[1].parse().map_err(|_| bad())?);
        rng.set_word_pos(t[2].parse().map_err(|_| bad())?);
        Ok(rng)
    }

    pub fn put_chains(&mut self, pool: &ChainPool) {
        self.put_scalar("chains", pool.len());
        for (k, chain) in pool.chains.iter().enumerate() {
            self.put_values(&format!("chain{k}.field"), chain.config.values());
            self.put_scalar(&format!("chain{k}.width"), fmt_f64(chain.proposal_width));
            self.put_scalar(&format!("chain{k}.flip"), chain.global_flip);
            self.put_rng(&format!("chain{k}.rng"), chain.rng());
        }
    }

    pub fn chains(&self, geometry: &LatticeGeometry) -> Result<ChainPool> {
        let n: usize = self.scalar("chains")?;
        let chains = (0..n)
            .map(|k| {
                let field = FieldConfiguration::new(self.values(&format!("chain{k}.field"))?)?;
                crate::lattice::check_len("chain field", geometry.volume(), field.len())?;
                let width: f64 = self.scalar(&format!("chain{k}.width"))?;
                let mut chain = MarkovChain::from_parts(field, width, self.rng(&format!("chain{k}.rng"))?);
                chain.global_flip = self.scalar(&format!("chain{k}.flip"))?;
                Ok(chain)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ChainPool { chains })
    }

    pub fn put_bipartite(&mut self, c: &BipartiteCouplings) {
        self.put_tokens(
            "network",
            vec![
                c.n_visible().to_string(),
                c.n_hidden().to_string(),
                match c.hidden_kind {
                    HiddenKind::Continuous => "continuous".into(),
                    HiddenKind::Binary => "binary".into(),
                },
            ],
        );
        for (label, v) in [
            ("net.w", &c.w),
            ("net.r", &c.r),
            ("net.a", &c.a),
            ("net.b", &c.b),
            ("net.s", &c.s),
            ("net.m", &c.m),
            ("net.n", &c.n),
        ] {
            self.put_values(label, v);
        }
    }

    pub fn bipartite(&self) -> Result<BipartiteCouplings> {
        let t = self.tokens("network")?;
        if t.len() != 3 {
            return Err(parse_err("bad network block"));
        }
        let nv: usize = t[0].parse().map_err(|_| parse_err("bad visible count"))?;
        let nh: usize = t[1].parse().map_err(|_| parse_err("bad hidden count"))?;
        let kind = match t[2].as_str() {
            "continuous" => HiddenKind::Continuous,
            "binary" => HiddenKind::Binary,
            other => return Err(parse_err(format!("unknown hidden kind {other:?}"))),
        };
        let mut c = BipartiteCouplings::zeros(nv, nh, kind);
        c.w = self.values("net.w")?;
        c.r = self.values("net.r")?;
        c.a = self.values("net.a")?;
        c.b = self.values("net.b")?;
        c.s = self.values("net.s")?;
        c.m = self.values("net.m")?;
        c.n = self.values("net.n")?;
        c.validate()?;
        Ok(c)
    }
}

/// Saves a variational run. The history is not stored; a resumed run
/// starts a fresh one.
pub fn variational_checkpoint(state: &TrainState, geometry: &LatticeGeometry) -> Checkpoint {
    let mut ck = Checkpoint::new("variational");
    ck.put_geometry(geometry);
    ck.put_scalar("epoch", state.epoch);
    ck.put_scalar("learning_rate", fmt_f64(state.learning_rate));
    ck.put_scalar("generation", state.generation);
    ck.put_couplings("theta", &state.couplings);
    ck.put_chains(&state.chains);
    ck
}

pub fn variational_state(ck: &Checkpoint) -> Result<(TrainState, LatticeGeometry)> {
    expect_kind(ck, "variational")?;
    let geometry = ck.geometry()?;
    let state = TrainState {
        couplings: ck.couplings("theta", &geometry)?,
        epoch: ck.scalar("epoch")?,
        learning_rate: ck.scalar("learning_rate")?,
        history: Vec::new(),
        chains: ck.chains(&geometry)?,
        generation: ck.scalar("generation")?,
    };
    Ok((state, geometry))
}

pub fn likelihood_checkpoint(state: &LikelihoodTrainState, geometry: &LatticeGeometry) -> Checkpoint {
    let mut ck = Checkpoint::new("likelihood");
    ck.put_geometry(geometry);
    ck.put_scalar("epoch", state.epoch);
    ck.put_scalar("learning_rate", fmt_f64(state.learning_rate));
    ck.put_scalar("cd_steps", state.cd_steps);
    ck.put_scalar("batch_cursor", state.batch_cursor);
    ck.put_tokens("order", state.order.iter().map(|k| k.to_string()).collect());
    ck.put_rng("batch_rng", &state.batch_rng);
    ck.put_couplings("theta", &state.couplings);
    ck.put_chains(&state.chains);
    ck
}

pub fn likelihood_state(ck: &Checkpoint) -> Result<(LikelihoodTrainState, LatticeGeometry)> {
    expect_kind(ck, "likelihood")?;
    let geometry = ck.geometry()?;
    let order = ck
        .tokens("order")?
        .iter()
        .map(|t| t.parse().map_err(|_| parse_err("bad order entry")))
        .collect::<Result<Vec<usize>>>()?;
    let state = LikelihoodTrainState {
        couplings: ck.couplings("theta", &geometry)?,
        chains: ck.chains(&geometry)?,
        epoch: ck.scalar("epoch")?,
        learning_rate: ck.scalar("learning_rate")?,
        cd_steps: ck.scalar("cd_steps")?,
        history: Vec::new(),
        batch_cursor: ck.scalar("batch_cursor")?,
        order,
        batch_rng: ck.rng("batch_rng")?,
    };
    Ok((state, geometry))
}

fn expect_kind(ck: &Checkpoint, kind: &str) -> Result<()> {
    match ck.kind() {
        Some(k) if k == kind => Ok(()),
        other => Err(parse_err(format!("checkpoint kind is {other:?}, expected {kind:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::build_square_lattice;
    use crate::mcmc::{sample_ensemble, SamplerConfig};
    use rand::Rng;

    #[test]
    fn pgm_round_trips() {
        let img = GrayImage::new(3, 2, vec![0, 17, 255, 128, 5, 99]).unwrap();
        let bytes = encode_pgm(&img);
        assert_eq!(parse_pgm(&bytes).unwrap(), img);
        assert_eq!(encode_pgm(&parse_pgm(&bytes).unwrap()), bytes);
        let ascii = encode_pgm_ascii(&img);
        assert_eq!(parse_pgm(ascii.as_bytes()).unwrap(), img);
        let commented = b"P2\n# made by hand\n3 2\n255\n0 17 255\n128 5 99\n";
        assert_eq!(parse_pgm(commented).unwrap(), img);
    }

    #[test]
    fn pgm_rejects_bad_input() {
        let img = GrayImage::new(3, 2, vec![1; 6]).unwrap();
        let bytes = encode_pgm(&img);
        assert!(matches!(parse_pgm(&bytes[..bytes.len() - 1]), Err(Error::Parse(_))));
        assert!(parse_pgm(b"P5\n2 2\n65535\n").is_err());
        assert!(parse_pgm(b"P6\n1 1\n255\n\0\0\0").is_err());
        assert!(parse_pgm(b"P2\n2 1\n255\n3\n").is_err());
        assert!(parse_pgm(b"P5\n2").is_err());
    }

    #[test]
    fn rescale_and_resize() {
        let img = GrayImage::from_values(2, 2, &[-1.0, 0.0, 1.0, 0.5]).unwrap();
        assert_eq!(img.pixels, vec![0, 128, 255, 191]);
        assert_eq!(GrayImage::from_values(1, 1, &[3.0]).unwrap().pixels, vec![128]);
        let big = img.resized(4, 4);
        assert_eq!(big.pixels[0..4], [0, 0, 128, 128]);
        assert_eq!(big.resized(2, 2), img);
    }

    #[test]
    fn ensemble_round_trip_is_bit_exact() {
        let g = build_square_lattice(2, true).unwrap();
        let c = CouplingSet::homogeneous(&g, 0.2, 0.7, 0.1, 0.0);
        let cfg = SamplerConfig {
            burn_in_sweeps: 10,
            thinning_sweeps: 1,
            n_samples: 25,
            rng_seed: 3,
            ..SamplerConfig::default()
        };
        let ens = sample_ensemble(&c, &g, &cfg).unwrap();
        let text = encode_ensemble(&ens);
        let back = decode_ensemble(&text).unwrap();
        assert_eq!(back.configs(), ens.configs());
        assert_eq!(back.actions(), ens.actions());
        assert_eq!(back.terms(), ens.terms());
        assert_eq!(back.seed(), 3);
        assert_eq!(back.source(), &EnsembleSource::Loaded { digest: c.digest() });
        assert_eq!(encode_ensemble(&back), text);
        let cut: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
        assert!(decode_ensemble(&cut).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let g = build_square_lattice(4, true).unwrap();
        let mut c = CouplingSet::homogeneous(&g, 0.1, 0.6, 0.2, 0.0);
        c.a[3] = std::f64::consts::PI;
        let cfg = SamplerConfig {
            n_chains: 3,
            global_flip: true,
            ..SamplerConfig::default()
        };
        let mut pool = ChainPool::new(&g, &cfg, 0).unwrap();
        pool.advance(&c, &g, 7, true);
        let mut ck = Checkpoint::new("test");
        ck.put_geometry(&g);
        ck.put_couplings("theta", &c);
        ck.put_chains(&pool);
        ck.put_scalar("epoch", 12);
        let text = ck.encode();
        assert!(text.starts_with("PHI4ML-CKPT v1\n"));
        let back = Checkpoint::decode(&text).unwrap();
        assert_eq!(back.kind(), Some("test"));
        assert_eq!(back.geometry().unwrap(), g);
        assert_eq!(back.couplings("theta", &g).unwrap(), c);
        assert_eq!(back.scalar::<usize>("epoch").unwrap(), 12);
        let mut restored = back.chains(&g).unwrap();
        for (a, b) in restored.chains.iter_mut().zip(pool.chains.iter_mut()) {
            assert_eq!(a.config, b.config);
            assert_eq!(a.proposal_width, b.proposal_width);
            assert_eq!(a.rng_mut().random::<u64>(), b.rng_mut().random::<u64>());
        }
        assert!(Checkpoint::decode("PHI4ML-CKPT v2\n").is_err());
        assert!(Checkpoint::decode("PHI4ML-CKPT v1\nx 3\n1 2\n").is_err());
    }

    #[test]
    fn network_checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = BipartiteCouplings::random(5, 3, HiddenKind::Binary, 0.3, &mut rng);
        let mut ck = Checkpoint::new("rbm");
        ck.put_bipartite(&net);
        assert_eq!(Checkpoint::decode(&ck.encode()).unwrap().bipartite().unwrap(), net);
    }

    #[test]
    fn resumed_variational_run_matches_uninterrupted() {
        use crate::variational::{VariationalConfig, VariationalTrainer};
        use crate::lattice::TargetActionSpec;
        let g = build_square_lattice(2, true).unwrap();
        let target = TargetActionSpec::truncated(TargetActionSpec::reference_coefficients(), 4).unwrap();
        let init = CouplingSet::homogeneous(&g, 0.5, 1.0, 0.3, 0.0);
        let config = VariationalConfig {
            learning_rate: 1e-2,
            sampler: SamplerConfig {
                n_samples: 50,
                burn_in_sweeps: 50,
                thinning_sweeps: 2,
                n_chains: 2,
                ..SamplerConfig::default()
            },
            sweeps_between_epochs: 5,
            ..VariationalConfig::default()
        };
        let mut straight = VariationalTrainer::new(init.clone(), target.clone(), &g, config.clone()).unwrap();
        for _ in 0..6 {
            straight.step().unwrap();
        }
        let mut first = VariationalTrainer::new(init, target.clone(), &g, config.clone()).unwrap();
        for _ in 0..3 {
            first.step().unwrap();
        }
        let text = variational_checkpoint(first.state(), &g).encode();
        let (state, g2) = variational_state(&Checkpoint::decode(&text).unwrap()).unwrap();
        let mut second = VariationalTrainer::resume(state, target, &g2, config).unwrap();
        for _ in 0..3 {
            second.step().unwrap();
        }
        assert_eq!(second.state().couplings, straight.state().couplings);
        assert_eq!(second.state().epoch, 6);
        assert!(likelihood_state(&Checkpoint::decode(&text).unwrap()).is_err());
    }

    #[test]
    fn csv_format() {
        let mut t = CsvTable::new(&["x", "y"]);
        t.numbers(&[0.1, -2.0]);
        t.numbers(&[1e-20, 3.0]);
        assert_eq!(t.as_str(), "x,y\n0.1,-2.0\n1e-20,3.0\n");
        let rows = parse_numeric_csv(t.as_str()).unwrap();
        assert_eq!(rows, vec![vec![0.1, -2.0], vec![1e-20, 3.0]]);
        assert!(parse_numeric_csv("1,2\n3,x\n").is_err());
    }

    #[test]
    fn missing_file_reports_path() {
        let err = read_pgm("/nonexistent/dir/face.pgm").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/face.pgm"), "{err}");
    }
}
