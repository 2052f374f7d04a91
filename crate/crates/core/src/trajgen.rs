//! Synthetic ground-truth trajectories.
//!
//! Each trajectory starts at the origin (optionally shifted by a uniform
//! spatial offset) and advances one step per frame: the heading is turned by
//! a freshly sampled heading change, the speed is moved by a freshly sampled
//! acceleration and clamped at zero, and the position moves `speed * dt`
//! along the new heading. With [`Dynamics::PerTrajectory`] the heading
//! change and acceleration are drawn once and held for the whole trajectory.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

pub type Point = [f64; 2];

/// Ground-truth sequence of 2D positions sampled every `dt` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub positions: Vec<Point>,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(positions: Vec<Point>, dt: f64) -> Result<Self> {
        if positions.len() < 2 {
            return Err(Error::Length(format!(
                "trajectory needs at least 2 steps, got {}",
                positions.len()
            )));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {dt}")));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite trajectory coordinate".into()));
        }
        Ok(Trajectory { positions, dt })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// First `k` steps.
    pub fn prefix(&self, k: usize) -> Result<Trajectory> {
        if k > self.len() {
            return Err(Error::Length(format!("prefix {k} exceeds length {}", self.len())));
        }
        Trajectory::new(self.positions[..k].to_vec(), self.dt)
    }

    pub fn translated(&self, by: Point) -> Trajectory {
        Trajectory {
            positions: self.positions.iter().map(|p| [p[0] + by[0], p[1] + by[1]]).collect(),
            dt: self.dt,
        }
    }

    /// Serialises as `k dt x1 y1 x2 y2 ...`.
    pub fn to_line(&self) -> String {
        let mut s = format!("{} {}", self.len(), self.dt);
        for p in &self.positions {
            s.push_str(&format!(" {} {}", p[0], p[1]));
        }
        s
    }

    pub fn from_line(line: &str, line_no: usize) -> Result<Trajectory> {
        let perr = |msg: String| Error::Parse { line: line_no, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 2 {
            return Err(perr("expected `k dt x1 y1 ...`".into()));
        }
        let k: usize = fields[0].parse().map_err(|_| perr(format!("bad length `{}`", fields[0])))?;
        let dt: f64 = fields[1].parse().map_err(|_| perr(format!("bad dt `{}`", fields[1])))?;
        if fields.len() != 2 + 2 * k {
            return Err(perr(format!("expected {} coordinates, found {}", 2 * k, fields.len() - 2)));
        }
        let mut coords = Vec::with_capacity(2 * k);
        for f in &fields[2..] {
            coords.push(f.parse::<f64>().map_err(|_| perr(format!("bad coordinate `{f}`")))?);
        }
        let positions = coords.chunks(2).map(|c| [c[0], c[1]]).collect();
        Trajectory::new(positions, dt).map_err(|e| perr(e.to_string()))
    }
}

/// Closed interval for a uniform draw; `lo == hi` gives a constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Uniform {
    pub lo: f64,
    pub hi: f64,
}

impl Uniform {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Uniform { lo, hi }
    }

    pub const fn constant(v: f64) -> Self {
        Uniform { lo: v, hi: v }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(Error::Config(format!("{what}: invalid bounds U({}, {})", self.lo, self.hi)));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut rng::Rng) -> f64 {
        let u: f64 = rng.random();
        self.lo + (self.hi - self.lo) * u
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpeedDist {
    Uniform(Uniform),
    /// Gaussian speed; non-positive draws are resampled.
    Normal { mean: f64, std: f64 },
}

/// How often the heading change and acceleration are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dynamics {
    #[default]
    PerStep,
    /// Constant turn rate and acceleration along each trajectory.
    PerTrajectory,
}

impl fmt::Display for Dynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dynamics::PerStep => "per-step",
            Dynamics::PerTrajectory => "per-trajectory",
        })
    }
}

impl FromStr for Dynamics {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-step" => Ok(Dynamics::PerStep),
            "per-trajectory" => Ok(Dynamics::PerTrajectory),
            other => Err(Error::Config(format!("unknown dynamics `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// Initial speed in m/s.
    pub speed: SpeedDist,
    /// Initial heading in degrees.
    pub heading_deg: Uniform,
    /// Per-step heading change in degrees.
    pub heading_change_deg: Uniform,
    /// Per-step acceleration in m/s².
    pub accel: Uniform,
    pub dynamics: Dynamics,
    pub frame_rate: f64,
    /// Inclusive range of trajectory lengths.
    pub length_range: (usize, usize),
    /// Half-width of a uniform start offset around the origin; `None` keeps
    /// every trajectory anchored at the origin.
    pub spatial_offset: Option<f64>,
    pub seed: u64,
}

pub const K_MAX: usize = 20;

impl GeneratorConfig {
    /// Vehicle-like objects at 1 fps.
    pub fn object() -> Self {
        GeneratorConfig {
            speed: SpeedDist::Uniform(Uniform::new(5.0, 10.0)),
            heading_deg: Uniform::new(0.0, 360.0),
            heading_change_deg: Uniform::new(-20.0, 20.0),
            accel: Uniform::new(-0.8, 1.5),
            dynamics: Dynamics::PerStep,
            frame_rate: 1.0,
            length_range: (8, K_MAX),
            spatial_offset: None,
            seed: 0,
        }
    }

    /// Walking pedestrians at 2.5 fps.
    pub fn pedestrian() -> Self {
        GeneratorConfig {
            speed: SpeedDist::Normal { mean: 1.38, std: 0.37 },
            heading_deg: Uniform::new(0.0, 360.0),
            heading_change_deg: Uniform::new(-10.0, 10.0),
            accel: Uniform::new(-0.2, 0.2),
            dynamics: Dynamics::PerStep,
            frame_rate: 2.5,
            length_range: (K_MAX, K_MAX),
            spatial_offset: None,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_lengths(mut self, lo: usize, hi: usize) -> Self {
        self.length_range = (lo, hi);
        self
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.frame_rate
    }

    pub fn validate(&self) -> Result<()> {
        match self.speed {
            SpeedDist::Uniform(u) => {
                u.validate("speed")?;
                if u.lo < 0.0 {
                    return Err(Error::Config("speed: negative lower bound".into()));
                }
            }
            SpeedDist::Normal { mean, std } => {
                if !(mean.is_finite() && std.is_finite() && std >= 0.0) {
                    return Err(Error::Config(format!("speed: invalid N({mean}, {std}²)")));
                }
                if std == 0.0 && mean <= 0.0 {
                    return Err(Error::Config("speed: degenerate non-positive Gaussian".into()));
                }
            }
        }
        self.heading_deg.validate("heading")?;
        self.heading_change_deg.validate("heading change")?;
        self.accel.validate("acceleration")?;
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return Err(Error::Config(format!("frame rate must be positive, got {}", self.frame_rate)));
        }
        let (lo, hi) = self.length_range;
        if lo < 2 || lo > hi {
            return Err(Error::Config(format!("length range [{lo}, {hi}] invalid")));
        }
        if let Some(off) = self.spatial_offset {
            if !(off.is_finite() && off >= 0.0) {
                return Err(Error::Config(format!("spatial offset must be >= 0, got {off}")));
            }
        }
        Ok(())
    }
}

fn sample_speed(dist: &SpeedDist, rng: &mut rng::Rng) -> f64 {
    match *dist {
        SpeedDist::Uniform(u) => u.sample(rng),
        SpeedDist::Normal { mean, std } => {
            let normal = Normal::new(mean, std).expect("validated");
            loop {
                let v = normal.sample(rng);
                if v > 0.0 {
                    return v;
                }
            }
        }
    }
}

/// Draws trajectory `index` of the corpus defined by `config`. Each index
/// owns its own random stream, so corpora are prefix-stable in `n`.
pub fn generate_one(config: &GeneratorConfig, index: usize) -> Trajectory {
    let mut rng = rng::stream(config.seed, index as u64);
    let (lo, hi) = config.length_range;
    let k = rng.random_range(lo..=hi);
    let dt = config.dt();
    let mut speed = sample_speed(&config.speed, &mut rng);
    let mut heading = config.heading_deg.sample(&mut rng).to_radians();
    let mut pos = match config.spatial_offset {
        Some(w) => [Uniform::new(-w, w).sample(&mut rng), Uniform::new(-w, w).sample(&mut rng)],
        None => [0.0, 0.0],
    };
    let held = match config.dynamics {
        Dynamics::PerStep => None,
        Dynamics::PerTrajectory => Some((config.heading_change_deg.sample(&mut rng), config.accel.sample(&mut rng))),
    };
    let mut positions = Vec::with_capacity(k);
    positions.push(pos);
    for _ in 1..k {
        let (turn, accel) = match held {
            Some(h) => h,
            None => (config.heading_change_deg.sample(&mut rng), config.accel.sample(&mut rng)),
        };
        heading += turn.to_radians();
        speed = (speed + accel * dt).max(0.0);
        pos = [pos[0] + speed * dt * heading.cos(), pos[1] + speed * dt * heading.sin()];
        positions.push(pos);
    }
    Trajectory { positions, dt }
}

pub fn generate(config: &GeneratorConfig, n: usize) -> Result<Vec<Trajectory>> {
    config.validate()?;
    if n == 0 {
        return Err(Error::Config("number of trajectories must be >= 1".into()));
    }
    Ok((0..n).map(|i| generate_one(config, i)).collect())
}

/// Object regime generator; requires a uniform speed distribution.
pub fn generate_object(config: &GeneratorConfig, n: usize) -> Result<Vec<Trajectory>> {
    if !matches!(config.speed, SpeedDist::Uniform(_)) {
        return Err(Error::Config("object regime samples speeds uniformly".into()));
    }
    generate(config, n)
}

/// Pedestrian regime generator; requires a Gaussian speed distribution.
pub fn generate_pedestrian(config: &GeneratorConfig, n: usize) -> Result<Vec<Trajectory>> {
    if !matches!(config.speed, SpeedDist::Normal { .. }) {
        return Err(Error::Config("pedestrian regime samples speeds from a Gaussian".into()));
    }
    generate(config, n)
}

pub fn write_corpus<W: Write>(mut w: W, corpus: &[Trajectory]) -> Result<()> {
    for t in corpus {
        writeln!(w, "{}", t.to_line())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a corpus, skipping blank lines and `#` comments.
pub fn read_corpus<R: BufRead>(r: R) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push(Trajectory::from_line(t, i + 1)?);
    }
    Ok(out)
}
