//! Observation model: Gaussian position noise, Bernoulli missing events and
//! the missing-token encoding consumed by the model.
//!
//! A missing step is always stored as the token `((0, 0), 1)`; an observed
//! step as `(value, 0)`.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::trajgen::{Point, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InputMode {
    Positions,
    Offsets,
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputMode::Positions => "positions",
            InputMode::Offsets => "offsets",
        })
    }
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positions" | "pos" => Ok(InputMode::Positions),
            "offsets" | "off" => Ok(InputMode::Offsets),
            other => Err(Error::Config(format!("unknown input mode `{other}`"))),
        }
    }
}

/// Corrupted model input.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedSequence {
    pub values: Vec<Point>,
    pub missing: Vec<bool>,
    pub mode: InputMode,
}

impl ObservedSequence {
    /// Builds a sequence, zeroing the values of missing steps.
    pub fn new(mut values: Vec<Point>, missing: Vec<bool>, mode: InputMode) -> Result<Self> {
        if values.len() != missing.len() {
            return Err(Error::Length(format!(
                "{} values but {} missing flags",
                values.len(),
                missing.len()
            )));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite observation".into()));
        }
        for (v, &m) in values.iter_mut().zip(&missing) {
            if m {
                *v = [0.0, 0.0];
            }
        }
        Ok(ObservedSequence { values, missing, mode })
    }

    /// Noise-free, fully observed positions.
    pub fn exact(traj: &Trajectory) -> Self {
        ObservedSequence {
            values: traj.positions.clone(),
            missing: vec![false; traj.len()],
            mode: InputMode::Positions,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_missing(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    /// Appends `n` missing tokens.
    pub fn extended(&self, n: usize) -> Self {
        let mut out = self.clone();
        out.values.extend(std::iter::repeat_n([0.0, 0.0], n));
        out.missing.extend(std::iter::repeat_n(true, n));
        out
    }

    /// Model input row `(x, y, missing)` for step `i`.
    pub fn token(&self, i: usize) -> [f64; 3] {
        let v = self.values[i];
        [v[0], v[1], if self.missing[i] { 1.0 } else { 0.0 }]
    }

    /// Serialises as `k mode x1 y1 m1 x2 y2 m2 ...`.
    pub fn to_line(&self) -> String {
        let mut s = format!("{} {}", self.len(), self.mode);
        for (v, &m) in self.values.iter().zip(&self.missing) {
            s.push_str(&format!(" {} {} {}", v[0], v[1], m as u8));
        }
        s
    }

    pub fn from_line(line: &str, line_no: usize) -> Result<Self> {
        let perr = |msg: String| Error::Parse { line: line_no, msg };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 2 {
            return Err(perr("expected `k mode x1 y1 m1 ...`".into()));
        }
        let k: usize = f[0].parse().map_err(|_| perr(format!("bad length `{}`", f[0])))?;
        let mode: InputMode = f[1].parse().map_err(|e: Error| perr(e.to_string()))?;
        if f.len() != 2 + 3 * k {
            return Err(perr(format!("expected {} fields after header, found {}", 3 * k, f.len() - 2)));
        }
        let mut values = Vec::with_capacity(k);
        let mut missing = Vec::with_capacity(k);
        for c in f[2..].chunks(3) {
            let x: f64 = c[0].parse().map_err(|_| perr(format!("bad coordinate `{}`", c[0])))?;
            let y: f64 = c[1].parse().map_err(|_| perr(format!("bad coordinate `{}`", c[1])))?;
            let m = match c[2] {
                "0" => false,
                "1" => true,
                other => return Err(perr(format!("missing flag must be 0 or 1, got `{other}`"))),
            };
            values.push([x, y]);
            missing.push(m);
        }
        ObservedSequence::new(values, missing, mode).map_err(|e| perr(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionConfig {
    /// Standard deviation of the per-coordinate position noise, in meters.
    pub noise_std: f64,
    /// Probability that a step is dropped.
    pub missing_prob: f64,
    /// Never drop the first step.
    pub protect_first: bool,
    pub seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            noise_std: 0.0,
            missing_prob: 0.0,
            protect_first: true,
            seed: 0,
        }
    }
}

impl CorruptionConfig {
    pub fn new(noise_std: f64, missing_prob: f64) -> Self {
        CorruptionConfig {
            noise_std,
            missing_prob,
            ..Default::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise std must be >= 0, got {}", self.noise_std)));
        }
        if !(0.0..=1.0).contains(&self.missing_prob) {
            return Err(Error::Config(format!(
                "missing probability must lie in [0, 1], got {}",
                self.missing_prob
            )));
        }
        Ok(())
    }
}

/// Corrupts `traj` using the config's own seed.
pub fn corrupt(traj: &Trajectory, config: &CorruptionConfig) -> Result<ObservedSequence> {
    corrupt_with(traj, config, &mut rng::seeded(config.seed))
}

/// Corrupts `traj` drawing from `rng`. Per step the draws are noise x,
/// noise y, then the missing event, regardless of the outcome, so the
/// stream position never depends on the data.
pub fn corrupt_with(traj: &Trajectory, config: &CorruptionConfig, rng: &mut rng::Rng) -> Result<ObservedSequence> {
    config.validate()?;
    if traj.len() < 2 {
        return Err(Error::Length("trajectory needs at least 2 steps".into()));
    }
    let mut values = Vec::with_capacity(traj.len());
    let mut missing = Vec::with_capacity(traj.len());
    for (i, p) in traj.positions.iter().enumerate() {
        let nx: f64 = StandardNormal.sample(rng);
        let ny: f64 = StandardNormal.sample(rng);
        let u: f64 = rng.random();
        let dropped = u < config.missing_prob && !(i == 0 && config.protect_first);
        if dropped {
            values.push([0.0, 0.0]);
        } else {
            values.push([p[0] + config.noise_std * nx, p[1] + config.noise_std * ny]);
        }
        missing.push(dropped);
    }
    Ok(ObservedSequence {
        values,
        missing,
        mode: InputMode::Positions,
    })
}

/// Converts positions to per-step offsets. An offset is observed only when
/// both of its endpoints are; the first offset is `(0, 0)` and inherits the
/// first step's flag.
pub fn to_offsets(obs: &ObservedSequence) -> Result<ObservedSequence> {
    if obs.mode != InputMode::Positions {
        return Err(Error::Mode("sequence is already in offset form".into()));
    }
    let k = obs.len();
    let mut values = Vec::with_capacity(k);
    let mut missing = Vec::with_capacity(k);
    for i in 0..k {
        let m = if i == 0 {
            obs.missing[0]
        } else {
            obs.missing[i] || obs.missing[i - 1]
        };
        if m || i == 0 {
            values.push([0.0, 0.0]);
        } else {
            let (a, b) = (obs.values[i - 1], obs.values[i]);
            values.push([b[0] - a[0], b[1] - a[1]]);
        }
        missing.push(m);
    }
    Ok(ObservedSequence {
        values,
        missing,
        mode: InputMode::Offsets,
    })
}

/// Replaces the last `n_pred` steps with missing tokens.
pub fn mask_tail_for_prediction(obs: &ObservedSequence, n_pred: usize) -> Result<ObservedSequence> {
    if n_pred >= obs.len() {
        return Err(Error::Length(format!(
            "cannot mask {n_pred} of {} steps; at least one must stay observed",
            obs.len()
        )));
    }
    let mut out = obs.clone();
    let start = obs.len() - n_pred;
    for i in start..obs.len() {
        out.values[i] = [0.0, 0.0];
        out.missing[i] = true;
    }
    Ok(out)
}

pub fn write_observed<W: Write>(mut w: W, seqs: &[ObservedSequence]) -> Result<()> {
    for s in seqs {
        writeln!(w, "{}", s.to_line())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_observed<R: BufRead>(r: R) -> Result<Vec<ObservedSequence>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push(ObservedSequence::from_line(t, i + 1)?);
    }
    Ok(out)
}
