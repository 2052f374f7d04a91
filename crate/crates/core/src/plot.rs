//! Static SVG figures: attention filters as heatmaps and trajectory
//! overlays. Every figure gets a plain-text sidecar (`<path>.txt`) holding
//! the plotted numbers, which is what tests and downstream tools read.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::corrupt::ObservedSequence;
use crate::error::{Error, Result};
use crate::model::{AttentionMap, AttentionRecord};
use crate::trajgen::Point;

/// `figure.svg` -> `figure.svg.txt`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

/// Light (zero) to dark (`max`) blue.
fn shade(w: f64, max: f64) -> String {
    let t = if max > 0.0 { (w / max).clamp(0.0, 1.0) } else { 0.0 };
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(247.0, 8.0), lerp(251.0, 48.0), lerp(255.0, 107.0))
}

const CELL: f64 = 18.0;
const PANEL_GAP: f64 = 40.0;
const MARGIN: f64 = 40.0;

/// One heatmap per (layer, head), laid out in rows by layer. Row `i` of a
/// panel is the attention of query step `i`; missing input steps are
/// flagged with an `x` above their column.
pub fn plot_attention(record: &AttentionRecord, missing: &[bool], path: &Path) -> Result<()> {
    let maps: Vec<(usize, usize, &AttentionMap)> = record.maps().collect();
    let Some((_, _, first)) = maps.first() else {
        return Err(Error::Invalid("attention record has no maps".into()));
    };
    let k = first.k;
    if maps.iter().any(|(_, _, m)| m.k != k || m.weights.len() != k * k) || missing.len() != k {
        return Err(Error::Length(format!("attention maps and missing mask must all cover {k} steps")));
    }
    let n_layer = record.layers.len();
    let n_head = record.layers.iter().map(Vec::len).max().unwrap_or(0);
    let side = k as f64 * CELL;
    let width = MARGIN * 2.0 + n_head as f64 * side + (n_head.saturating_sub(1)) as f64 * PANEL_GAP;
    let height = MARGIN * 2.0 + n_layer as f64 * (side + PANEL_GAP);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (layer, head, map) in &maps {
        let x0 = MARGIN + *head as f64 * (side + PANEL_GAP);
        let y0 = MARGIN + *layer as f64 * (side + PANEL_GAP) + 14.0;
        let max = map.weights.iter().copied().fold(0.0, f64::max);
        let _ = writeln!(svg, r#"<g class="attention" data-layer="{layer}" data-head="{head}">"#);
        let _ = writeln!(svg, r#"<text x="{x0}" y="{}">layer {layer} head {head}</text>"#, y0 - 16.0);
        for (j, &m) in missing.iter().enumerate() {
            if m {
                let _ = writeln!(
                    svg,
                    r##"<text class="missing" x="{}" y="{}" text-anchor="middle" fill="#c00">x</text>"##,
                    x0 + (j as f64 + 0.5) * CELL,
                    y0 - 3.0
                );
            }
        }
        for i in 0..k {
            for j in 0..k {
                let w = map.get(i, j);
                let _ = writeln!(
                    svg,
                    r#"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{}"><title>{i},{j}: {w:.4}</title></rect>"#,
                    x0 + j as f64 * CELL,
                    y0 + i as f64 * CELL,
                    shade(w, max)
                );
            }
        }
        let _ = writeln!(svg, "</g>");
    }
    let _ = writeln!(svg, "</svg>");
    fs::write(path, svg)?;
    write_attention_dump(record, missing, &sidecar_path(path))
}

fn fmt_row(vals: impl IntoIterator<Item = f64>) -> String {
    vals.into_iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
}

/// Sidecar layout: a `missing` line of 0/1 flags, then per map a
/// `map <layer> <head> <k>` line followed by `k` rows of weights.
pub fn write_attention_dump(record: &AttentionRecord, missing: &[bool], path: &Path) -> Result<()> {
    let mut s = String::from("# attention weights, row = query step\n");
    let flags: Vec<&str> = missing.iter().map(|&m| if m { "1" } else { "0" }).collect();
    let _ = writeln!(s, "missing {}", flags.join(" "));
    for (layer, head, map) in record.maps() {
        let _ = writeln!(s, "map {layer} {head} {}", map.k);
        for i in 0..map.k {
            let _ = writeln!(s, "{}", fmt_row(map.row(i).iter().copied()));
        }
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_attention_dump(path: &Path) -> Result<(AttentionRecord, Vec<bool>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    let perr = |line: usize, msg: &str| Error::Parse {
        line: line + 1,
        msg: msg.to_string(),
    };
    let mut missing = Vec::new();
    let mut layers: Vec<Vec<AttentionMap>> = Vec::new();
    while let Some((n, line)) = lines.next() {
        let mut f = line.split_whitespace();
        match f.next() {
            Some("missing") => {
                missing = f.map(|v| v == "1").collect();
            }
            Some("map") => {
                let nums: Vec<usize> = f.map(|v| v.parse().map_err(|_| perr(n, "bad map header"))).collect::<Result<_>>()?;
                let [layer, head, k] = nums[..] else {
                    return Err(perr(n, "expected `map layer head k`"));
                };
                let mut weights = Vec::with_capacity(k * k);
                for _ in 0..k {
                    let (rn, row) = lines.next().ok_or_else(|| perr(n, "truncated map"))?;
                    let vals: Vec<f64> = row
                        .split_whitespace()
                        .map(|v| v.parse().map_err(|_| perr(rn, "bad weight")))
                        .collect::<Result<_>>()?;
                    if vals.len() != k {
                        return Err(perr(rn, "row length differs from k"));
                    }
                    weights.extend(vals);
                }
                if layers.len() <= layer {
                    layers.resize_with(layer + 1, Vec::new);
                }
                if layers[layer].len() != head {
                    return Err(perr(n, "heads out of order"));
                }
                layers[layer].push(AttentionMap { k, weights });
            }
            _ => return Err(perr(n, "unknown line")),
        }
    }
    Ok((AttentionRecord { layers }, missing))
}

/// Coordinates behind a trajectory overlay.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDump {
    pub truth: Vec<Point>,
    /// Observed positions; missing steps carry their zeroed token value.
    pub observed: Vec<Point>,
    pub missing: Vec<bool>,
    pub estimate: Vec<Point>,
    pub crosses: usize,
}

/// Overlay of ground truth, noisy observations (dots), missing steps
/// (crosses at the true position) and the model estimate. `observed` must
/// be in position mode.
pub fn plot_trajectories(truth: &[Point], observed: &ObservedSequence, estimate: &[Point], path: &Path) -> Result<()> {
    let k = truth.len();
    if observed.len() != k || estimate.len() != k || k == 0 {
        return Err(Error::Length(format!(
            "truth {k}, observed {}, estimate {} steps",
            observed.len(),
            estimate.len()
        )));
    }
    if observed.mode != crate::corrupt::InputMode::Positions {
        return Err(Error::Mode("trajectory plots need position observations".into()));
    }
    let shown = || {
        truth
            .iter()
            .chain(estimate)
            .chain(observed.values.iter().zip(&observed.missing).filter(|(_, &m)| !m).map(|(p, _)| p))
    };
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in shown() {
        for c in 0..2 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let (w, h, m) = (480.0, 480.0, 50.0);
    let sc = (w - 2.0 * m) / span;
    let px = |p: Point| (m + (p[0] - lo[0]) * sc, h - m - (p[1] - lo[1]) * sc);
    let poly = |pts: &[Point]| {
        pts.iter()
            .map(|&p| {
                let (x, y) = px(p);
                format!("{x:.2},{y:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#,
        h - m,
        w - m,
        h - m,
        h - m
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">x [m]</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">y [m]</text>"#,
        h / 2.0,
        h / 2.0
    );
    for v in [lo[0], lo[0] + span] {
        let (x, _) = px([v, lo[1]]);
        let _ = writeln!(svg, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{v:.1}</text>"#, h - m + 14.0);
    }
    for v in [lo[1], lo[1] + span] {
        let (_, y) = px([lo[0], v]);
        let _ = writeln!(svg, r#"<text x="{}" y="{y:.1}" text-anchor="end">{v:.1}</text>"#, m - 4.0);
    }
    let _ = writeln!(svg, r##"<polyline class="truth" fill="none" stroke="#222" stroke-width="1.5" points="{}"/>"##, poly(truth));
    let _ = writeln!(
        svg,
        r##"<polyline class="estimate" fill="none" stroke="#d62728" stroke-dasharray="4 2" stroke-width="1.5" points="{}"/>"##,
        poly(estimate)
    );
    let mut crosses = 0;
    for (i, (&p, &miss)) in observed.values.iter().zip(&observed.missing).enumerate() {
        if miss {
            let (x, y) = px(truth[i]);
            let _ = writeln!(
                svg,
                r##"<path class="missing" d="M{:.2},{:.2}L{:.2},{:.2}M{:.2},{:.2}L{:.2},{:.2}" stroke="#1f77b4" stroke-width="1.5"/>"##,
                x - 4.0,
                y - 4.0,
                x + 4.0,
                y + 4.0,
                x - 4.0,
                y + 4.0,
                x + 4.0,
                y - 4.0
            );
            crosses += 1;
        } else {
            let (x, y) = px(p);
            let _ = writeln!(svg, r##"<circle class="observed" cx="{x:.2}" cy="{y:.2}" r="2.5" fill="#1f77b4"/>"##);
        }
    }
    let _ = writeln!(
        svg,
        r##"<text x="{}" y="20" fill="#222">truth</text><text x="{}" y="20" fill="#d62728">estimate</text><text x="{}" y="20" fill="#1f77b4">observed / x missing</text>"##,
        m,
        m + 50.0,
        m + 120.0
    );
    let _ = writeln!(svg, "</svg>");
    fs::write(path, svg)?;

    let dump = TrajectoryDump {
        truth: truth.to_vec(),
        observed: observed.values.clone(),
        missing: observed.missing.clone(),
        estimate: estimate.to_vec(),
        crosses,
    };
    write_trajectory_dump(&dump, &sidecar_path(path))
}

/// Sidecar layout: `crosses <n>` then one `step tx ty ox oy missing ex ey`
/// line per step.
pub fn write_trajectory_dump(d: &TrajectoryDump, path: &Path) -> Result<()> {
    let mut s = String::from("# step truth_x truth_y obs_x obs_y missing est_x est_y\n");
    let _ = writeln!(s, "crosses {}", d.crosses);
    for i in 0..d.truth.len() {
        let _ = writeln!(
            s,
            "{i} {} {} {}",
            fmt_row(d.truth[i]),
            fmt_row(d.observed[i]),
            format_args!("{} {}", u8::from(d.missing[i]), fmt_row(d.estimate[i]))
        );
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_trajectory_dump(path: &Path) -> Result<TrajectoryDump> {
    let text = fs::read_to_string(path)?;
    let mut d = TrajectoryDump {
        truth: vec![],
        observed: vec![],
        missing: vec![],
        estimate: vec![],
        crosses: 0,
    };
    for (n, line) in text.lines().enumerate() {
        let perr = || Error::Parse {
            line: n + 1,
            msg: "malformed trajectory dump line".into(),
        };
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f[0] == "crosses" {
            d.crosses = f.get(1).and_then(|v| v.parse().ok()).ok_or_else(perr)?;
            continue;
        }
        if f.len() != 8 {
            return Err(perr());
        }
        let v: Vec<f64> = f[1..].iter().map(|s| s.parse().map_err(|_| perr())).collect::<Result<_>>()?;
        d.truth.push([v[0], v[1]]);
        d.observed.push([v[2], v[3]]);
        d.missing.push(v[4] != 0.0);
        d.estimate.push([v[5], v[6]]);
    }
    Ok(d)
}
