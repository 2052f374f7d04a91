//! Displacement metrics, corpus evaluation, the least-squares linear
//! baseline and the leave-one-out protocol over the five ETH/UCY splits.

use std::fmt::Write as _;
use std::ops::Range;

use crate::corrupt::{CorruptionConfig, InputMode, ObservedSequence};
use crate::error::{Error, Result};
use crate::ingest::SampleSet;
use crate::model::MissFormer;
use crate::rng;
use crate::training::{finish_input, SplitRange, Task, TAIL_STREAM};
use crate::trajgen::{Point, Trajectory};

/// Anything that maps already-masked inputs to full-length position
/// estimates.
pub trait Predictor {
    fn input_mode(&self) -> InputMode;

    fn estimate(&self, inputs: &[ObservedSequence]) -> Result<Vec<Vec<Point>>>;
}

impl Predictor for MissFormer {
    fn input_mode(&self) -> InputMode {
        self.config().input_mode
    }

    fn estimate(&self, inputs: &[ObservedSequence]) -> Result<Vec<Vec<Point>>> {
        self.predict_batch(inputs)
    }
}

/// Least-squares constant-velocity fit over the observed steps.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearBaseline;

impl Predictor for LinearBaseline {
    fn input_mode(&self) -> InputMode {
        InputMode::Positions
    }

    fn estimate(&self, inputs: &[ObservedSequence]) -> Result<Vec<Vec<Point>>> {
        inputs.iter().map(|s| linear_baseline(s, 0)).collect()
    }
}

/// Returns the (noisy) observations themselves; missing steps stay at the
/// token value. Measures how much a model improves on doing nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoObservations;

impl Predictor for EchoObservations {
    fn input_mode(&self) -> InputMode {
        InputMode::Positions
    }

    fn estimate(&self, inputs: &[ObservedSequence]) -> Result<Vec<Vec<Point>>> {
        Ok(inputs.iter().map(|s| s.values.clone()).collect())
    }
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mean Euclidean distance over the steps in `range`.
pub fn ade(estimate: &[Point], truth: &[Point], range: Range<usize>) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::Length(format!(
            "estimate has {} steps, truth {}",
            estimate.len(),
            truth.len()
        )));
    }
    if range.is_empty() || range.end > truth.len() {
        return Err(Error::Length(format!("evaluation range {range:?} empty or beyond {} steps", truth.len())));
    }
    let n = range.len() as f64;
    Ok(range.map(|i| dist(estimate[i], truth[i])).sum::<f64>() / n)
}

/// Euclidean distance at the final step.
pub fn fde(estimate: &[Point], truth: &[Point]) -> Result<f64> {
    if estimate.len() != truth.len() || truth.is_empty() {
        return Err(Error::Length(format!(
            "estimate has {} steps, truth {}",
            estimate.len(),
            truth.len()
        )));
    }
    let last = truth.len() - 1;
    Ok(dist(estimate[last], truth[last]))
}

/// Fits `p(t) = a + b t` (t = step index) to the observed steps of `obs`
/// and evaluates it at every index of the sequence extended by `horizon`.
pub fn linear_baseline(obs: &ObservedSequence, horizon: usize) -> Result<Vec<Point>> {
    if obs.mode != InputMode::Positions {
        return Err(Error::Mode("linear baseline needs positions".into()));
    }
    let pts: Vec<(f64, Point)> = obs
        .values
        .iter()
        .zip(&obs.missing)
        .enumerate()
        .filter(|(_, (_, &m))| !m)
        .map(|(i, (v, _))| (i as f64, *v))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Length(format!("linear fit needs 2 observed steps, got {}", pts.len())));
    }
    let n = pts.len() as f64;
    let t_mean = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let stt: f64 = pts.iter().map(|p| (p.0 - t_mean).powi(2)).sum();
    let mut coef = [[0.0; 2]; 2];
    for (c, coef) in coef.iter_mut().enumerate() {
        let mean = pts.iter().map(|p| p.1[c]).sum::<f64>() / n;
        let sty: f64 = pts.iter().map(|p| (p.0 - t_mean) * (p.1[c] - mean)).sum();
        let slope = sty / stt;
        *coef = [mean - slope * t_mean, slope];
    }
    Ok((0..obs.len() + horizon)
        .map(|i| {
            let t = i as f64;
            [coef[0][0] + coef[0][1] * t, coef[1][0] + coef[1][1] * t]
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: Task,
    pub n_samples: usize,
    pub ade: f64,
    /// Population standard deviation of the per-sample ADEs.
    pub ade_std: f64,
    pub fde: f64,
    /// `(ade_i, fde_i)` per sample, in corpus order.
    pub per_sample: Vec<(f64, f64)>,
}

impl EvalReport {
    pub fn from_samples(task: Task, per_sample: Vec<(f64, f64)>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::Invalid("no samples to aggregate".into()));
        }
        let n = per_sample.len() as f64;
        // fixed-order sums keep the aggregate bit-reproducible
        let ade = per_sample.iter().map(|s| s.0).sum::<f64>() / n;
        let fde = per_sample.iter().map(|s| s.1).sum::<f64>() / n;
        let var = per_sample.iter().map(|s| (s.0 - ade).powi(2)).sum::<f64>() / n;
        Ok(EvalReport {
            task,
            n_samples: per_sample.len(),
            ade,
            ade_std: var.sqrt(),
            fde,
            per_sample,
        })
    }

    /// Machine-readable row: `task n ade ade_std fde`.
    pub fn record_line(&self) -> String {
        format!("{} {} {} {} {}", self.task, self.n_samples, self.ade, self.ade_std, self.fde)
    }

    pub fn parse_record_line(line: &str, line_no: usize) -> Result<(Task, usize, f64, f64, f64)> {
        let perr = |msg: &str| Error::Parse {
            line: line_no,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(perr("expected `task n ade ade_std fde`"));
        }
        let task = f[0].parse::<Task>().map_err(|_| perr("unknown task"))?;
        let n = f[1].parse().map_err(|_| perr("bad sample count"))?;
        let num = |s: &str| s.parse::<f64>().map_err(|_| perr("bad number"));
        Ok((task, n, num(f[2])?, num(f[3])?, num(f[4])?))
    }
}

/// Per-sample evaluation setup shared by training-style corruption.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTask {
    pub task: Task,
    pub split: SplitRange,
}

impl EvalTask {
    pub fn new(task: Task) -> Self {
        EvalTask {
            task,
            split: SplitRange::default(),
        }
    }

    pub fn with_split(mut self, split: SplitRange) -> Self {
        self.split = split;
        self
    }
}

const EVAL_STREAM: u64 = 0x6576_616c;

/// Builds the masked input of sample `index` and the index range its error
/// is measured over.
pub fn eval_input(
    traj: &Trajectory,
    index: usize,
    corrupt_cfg: &CorruptionConfig,
    task: &EvalTask,
    mode: InputMode,
) -> Result<(ObservedSequence, Range<usize>)> {
    let mut r = rng::stream(rng::mix(&[corrupt_cfg.seed, EVAL_STREAM]), index as u64);
    let observed = crate::corrupt::corrupt_with(traj, corrupt_cfg, &mut r)?;
    let k = traj.len();
    let n_pred = if task.task == Task::Prediction {
        let mut tail = rng::stream(rng::mix(&[corrupt_cfg.seed, EVAL_STREAM, TAIL_STREAM]), index as u64);
        task.split.sample_pred(k, &mut tail)
    } else {
        0
    };
    let input = finish_input(observed, n_pred, mode)?;
    let range = if n_pred > 0 { k - n_pred..k } else { 0..k };
    Ok((input, range))
}

/// Corrupts and masks every trajectory of `corpus` for `task`, runs the
/// predictor and aggregates ADE/FDE. Prediction errors cover the masked
/// tail only; the other tasks cover every step.
pub fn evaluate(
    predictor: &dyn Predictor,
    corpus: &[Trajectory],
    corrupt_cfg: &CorruptionConfig,
    task: &EvalTask,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::Invalid("evaluation corpus is empty".into()));
    }
    let mode = predictor.input_mode();
    let mut inputs = Vec::with_capacity(corpus.len());
    let mut ranges = Vec::with_capacity(corpus.len());
    for (i, t) in corpus.iter().enumerate() {
        let (inp, range) = eval_input(t, i, corrupt_cfg, task, mode)?;
        inputs.push(inp);
        ranges.push(range);
    }
    let estimates = predictor.estimate(&inputs)?;
    if estimates.len() != corpus.len() {
        return Err(Error::Length("predictor returned the wrong number of estimates".into()));
    }
    let per_sample = corpus
        .iter()
        .zip(&estimates)
        .zip(ranges)
        .map(|((t, e), r)| Ok((ade(e, &t.positions, r)?, fde(e, &t.positions)?)))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_samples(task.task, per_sample)
}

/// Text table of labelled reports.
pub fn format_table(rows: &[(String, EvalReport)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<28} {:<15} {:>6} {:>9} {:>9} {:>9}", "model", "task", "n", "ADE", "σ_ADE", "FDE");
    for (label, r) in rows {
        let _ = writeln!(
            s,
            "{:<28} {:<15} {:>6} {:>9.3} {:>9.3} {:>9.3}",
            label,
            r.task.to_string(),
            r.n_samples,
            r.ade,
            r.ade_std,
            r.fde
        );
    }
    s
}

/// Split order of the five-sequence benchmark.
pub const SPLITS: [&str; 5] = ["eth", "hotel", "univ", "zara1", "zara2"];

/// Published ADE/FDE pairs for the five splits and their average, carried
/// for side-by-side reports. Cited, not reproduced.
pub const CITED_RESULTS: &[(&str, [(f64, f64); 6])] = &[
    ("Linear interpolation", [(1.33, 2.94), (0.39, 0.72), (0.82, 1.59), (0.62, 1.21), (0.77, 1.48), (0.79, 1.59)]),
    ("LSTM", [(1.09, 2.94), (0.86, 1.91), (0.61, 1.31), (0.41, 0.88), (0.52, 1.11), (0.70, 1.52)]),
    ("GAN (Ind.)", [(1.13, 2.21), (1.01, 2.18), (0.60, 1.28), (0.42, 0.91), (0.52, 1.11), (0.74, 1.54)]),
    ("Social-LSTM", [(1.09, 2.35), (0.79, 1.76), (0.67, 1.40), (0.47, 1.00), (0.56, 1.17), (0.72, 1.54)]),
    ("Social-Att.", [(0.39, 3.74), (0.29, 2.64), (0.33, 3.92), (0.20, 0.52), (0.30, 2.13), (0.30, 2.59)]),
    ("Trajectron++", [(0.50, 1.19), (0.24, 0.59), (0.36, 0.89), (0.29, 0.72), (0.27, 0.67), (0.34, 0.84)]),
    ("TCN", [(1.04, 2.07), (0.59, 1.17), (0.57, 1.21), (0.43, 0.90), (0.34, 0.75), (0.59, 1.22)]),
    ("TF", [(1.03, 2.10), (0.36, 0.71), (0.53, 1.32), (0.44, 1.00), (0.34, 0.76), (0.54, 1.17)]),
    ("MissFormer", [(0.99, 1.94), (0.36, 0.89), (0.51, 1.29), (0.43, 0.89), (0.34, 0.74), (0.53, 1.15)]),
];

fn split_header() -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<34}", "ADE/FDE [m]");
    for name in SPLITS {
        let _ = write!(s, " {:>11}", name);
    }
    let _ = writeln!(s, " {:>11}", "average");
    s
}

fn cited_rows(s: &mut String) {
    for (name, vals) in CITED_RESULTS {
        let _ = write!(s, "{:<34}", format!("{name} (cited, not reproduced)"));
        for (a, f) in vals {
            let _ = write!(s, " {:>11}", format!("{a:.2}/{f:.2}"));
        }
        let _ = writeln!(s);
    }
}

/// The reference rows alone, under the per-split header.
pub fn cited_table() -> String {
    let mut s = split_header();
    cited_rows(&mut s);
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct LooReport {
    pub per_split: Vec<(String, EvalReport)>,
    pub average_ade: f64,
    pub average_fde: f64,
}

impl LooReport {
    /// Table with one column per split plus the unweighted average; cited
    /// reference rows follow when `with_cited` is set.
    pub fn format_table(&self, label: &str, with_cited: bool) -> String {
        let mut s = split_header();
        let _ = write!(s, "{label:<34}");
        for (_, r) in &self.per_split {
            let _ = write!(s, " {:>11}", format!("{:.2}/{:.2}", r.ade, r.fde));
        }
        let _ = writeln!(s, " {:>11}", format!("{:.2}/{:.2}", self.average_ade, self.average_fde));
        if with_cited {
            cited_rows(&mut s);
        }
        s
    }

    /// `split n ade ade_std fde` per split, then `average`.
    pub fn record_lines(&self) -> String {
        let mut s = String::new();
        for (name, r) in &self.per_split {
            let _ = writeln!(s, "{name} {} {} {} {}", r.n_samples, r.ade, r.ade_std, r.fde);
        }
        let n: usize = self.per_split.iter().map(|(_, r)| r.n_samples).sum();
        let _ = writeln!(s, "average {n} {} nan {}", self.average_ade, self.average_fde);
        s
    }
}

/// Rotates over the five splits: `train_fn(held_out, others)` yields a
/// predictor that is then scored on the held-out windows with the fixed
/// `obs`/`pred` protocol. The average is unweighted across splits.
pub fn leave_one_out<F>(datasets: &[SampleSet], mut train_fn: F, protocol: SplitRange) -> Result<LooReport>
where
    F: FnMut(&SampleSet, &[&SampleSet]) -> Result<Box<dyn Predictor>>,
{
    let mut ordered = Vec::with_capacity(SPLITS.len());
    for name in SPLITS {
        let set = datasets
            .iter()
            .find(|d| d.split == name)
            .ok_or_else(|| Error::MissingSplit(name.to_string()))?;
        ordered.push(set);
    }
    if datasets.len() != SPLITS.len() {
        return Err(Error::Invalid(format!("expected 5 splits, got {}", datasets.len())));
    }
    let task = EvalTask::new(Task::Prediction).with_split(protocol);
    let window = protocol.obs.1 + protocol.pred.1;
    let mut per_split = Vec::with_capacity(SPLITS.len());
    for (i, held) in ordered.iter().enumerate() {
        let others: Vec<&SampleSet> = ordered.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, s)| *s).collect();
        let predictor = train_fn(held, &others)?;
        let test: Vec<Trajectory> = held.windows.iter().filter(|w| w.len() == window).cloned().collect();
        if test.is_empty() {
            return Err(Error::Invalid(format!("split {} has no {window}-step windows", held.split)));
        }
        let report = evaluate(predictor.as_ref(), &test, &CorruptionConfig::default(), &task)?;
        per_split.push((held.split.clone(), report));
    }
    let n = per_split.len() as f64;
    let average_ade = per_split.iter().map(|(_, r)| r.ade).sum::<f64>() / n;
    let average_fde = per_split.iter().map(|(_, r)| r.fde).sum::<f64>() / n;
    Ok(LooReport {
        per_split,
        average_ade,
        average_fde,
    })
}
