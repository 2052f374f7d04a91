//! Reader for `frame agent x y` pedestrian annotation files (ETH/UCY world
//! coordinates) and fixed-length window extraction.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::trajgen::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawRecord {
    pub frame: i64,
    pub agent: i64,
    pub x: f64,
    pub y: f64,
}

/// Integer field that may be written as a float (`780.0`).
fn parse_id(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    let f = s.parse::<f64>().ok()?;
    (f.is_finite() && f.fract() == 0.0 && f.abs() < 9.0e15).then_some(f as i64)
}

fn parse_row(line: &str, line_no: usize) -> Result<RawRecord> {
    let perr = |msg: String| Error::Parse { line: line_no, msg };
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 4 {
        return Err(perr(format!("expected `frame agent x y`, got {} fields", f.len())));
    }
    let frame = parse_id(f[0]).ok_or_else(|| perr(format!("bad frame id `{}`", f[0])))?;
    let agent = parse_id(f[1]).ok_or_else(|| perr(format!("bad agent id `{}`", f[1])))?;
    let coord = |s: &str| match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(perr(format!("bad coordinate `{s}`"))),
    };
    Ok(RawRecord {
        frame,
        agent,
        x: coord(f[2])?,
        y: coord(f[3])?,
    })
}

/// Parses records from `reader`. Blank lines and `#` comments are skipped.
/// With `lenient`, malformed rows are dropped and reported on stderr
/// instead of failing the whole file.
pub fn parse_reader<R: Read>(reader: R, lenient: bool) -> Result<Vec<RawRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        match parse_row(t, i + 1) {
            Ok(r) => out.push(r),
            Err(e) if lenient => eprintln!("warning: skipping {e}"),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

pub fn parse_file(path: &Path, lenient: bool) -> Result<Vec<RawRecord>> {
    parse_reader(fs::File::open(path)?, lenient)
}

/// Writes records back in the input layout; floats use shortest
/// round-trip formatting.
pub fn write_records<W: Write>(mut w: W, records: &[RawRecord]) -> Result<()> {
    for r in records {
        writeln!(w, "{} {} {:?} {:?}", r.frame, r.agent, r.x, r.y)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowOptions {
    pub obs_len: usize,
    pub pred_len: usize,
    /// Offset between consecutive window starts, in steps.
    pub stride: usize,
    /// Seconds per step of the emitted windows.
    pub dt: f64,
    /// Translate each window so its last observed point is the origin.
    pub translate_to_last_obs: bool,
}

impl Default for WindowOptions {
    fn default() -> Self {
        WindowOptions {
            obs_len: 8,
            pred_len: 12,
            stride: 1,
            dt: 0.4,
            translate_to_last_obs: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub split: String,
    /// Modal frame-id delta between consecutive annotations of one agent.
    pub frame_stride: i64,
    pub obs_len: usize,
    pub windows: Vec<Trajectory>,
}

/// Most frequent positive frame delta within agents; ties go to the
/// smaller delta. Defaults to 1 when no agent has two records.
pub fn modal_frame_stride(records: &[RawRecord]) -> i64 {
    let by_agent = group(records);
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for recs in by_agent.values() {
        for w in recs.windows(2) {
            let d = w[1].frame - w[0].frame;
            if d > 0 {
                *counts.entry(d).or_default() += 1;
            }
        }
    }
    counts
        .iter()
        .fold(None, |best: Option<(i64, usize)>, (&d, &n)| match best {
            Some((_, bn)) if bn >= n => best,
            _ => Some((d, n)),
        })
        .map_or(1, |(d, _)| d)
}

fn group(records: &[RawRecord]) -> BTreeMap<i64, Vec<RawRecord>> {
    let mut by_agent: BTreeMap<i64, Vec<RawRecord>> = BTreeMap::new();
    for r in records {
        by_agent.entry(r.agent).or_default().push(*r);
    }
    for recs in by_agent.values_mut() {
        recs.sort_by_key(|r| r.frame);
        recs.dedup_by_key(|r| r.frame);
    }
    by_agent
}

/// Sliding windows of `obs_len + pred_len` frame-consecutive steps per
/// agent. A step is consecutive when its frame id is exactly one stride
/// after the previous one; any other delta starts a new run.
pub fn windows(records: &[RawRecord], opts: &WindowOptions, split: &str) -> Result<SampleSet> {
    let len = opts.obs_len + opts.pred_len;
    if opts.obs_len == 0 || opts.pred_len == 0 || opts.stride == 0 {
        return Err(Error::Config("window lengths and stride must be positive".into()));
    }
    if !(opts.dt.is_finite() && opts.dt > 0.0) {
        return Err(Error::Config(format!("window dt must be positive, got {}", opts.dt)));
    }
    let frame_stride = modal_frame_stride(records);
    let mut out = Vec::new();
    for recs in group(records).values() {
        let mut run_start = 0;
        for i in 1..=recs.len() {
            let breaks = i == recs.len() || recs[i].frame - recs[i - 1].frame != frame_stride;
            if !breaks {
                continue;
            }
            let run = &recs[run_start..i];
            let mut s = 0;
            while s + len <= run.len() {
                let mut pts: Vec<[f64; 2]> = run[s..s + len].iter().map(|r| [r.x, r.y]).collect();
                if opts.translate_to_last_obs {
                    let o = pts[opts.obs_len - 1];
                    pts.iter_mut().for_each(|p| *p = [p[0] - o[0], p[1] - o[1]]);
                }
                out.push(Trajectory::new(pts, opts.dt)?);
                s += opts.stride;
            }
            run_start = i;
        }
    }
    Ok(SampleSet {
        split: split.to_string(),
        frame_stride,
        obs_len: opts.obs_len,
        windows: out,
    })
}

/// Loads `{dir}/{name}.txt` for every benchmark split that exists. Returns
/// an empty list when none do.
pub fn load_splits(dir: &Path, names: &[&str], opts: &WindowOptions, lenient: bool) -> Result<Vec<SampleSet>> {
    let mut sets = Vec::new();
    for name in names {
        let path = dir.join(format!("{name}.txt"));
        if !path.exists() {
            continue;
        }
        let records = parse_file(&path, lenient)?;
        sets.push(windows(&records, opts, name)?);
    }
    Ok(sets)
}
