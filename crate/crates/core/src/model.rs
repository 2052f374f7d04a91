//! The MissFormer network.
//!
//! Every step is a three channel token `(x, y, missing)`. Tokens are embedded
//! by one affine map, time-stamped with a sinusoidal positional encoding and
//! passed through `n_layer` post-norm encoder blocks (self-attention, then a
//! ReLU feed-forward, each wrapped as `layer_norm(x + sublayer(x))`). A
//! shared affine head maps every encoded token to a 2D position, so the
//! output always has the input's length. Missing steps are not masked out of
//! attention; the model has to learn to ignore them from the token flag.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::corrupt::{mask_tail_for_prediction, InputMode, ObservedSequence};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::trajgen::Point;

const LN_EPS: f64 = 1e-5;
/// Sequences must stay below this length for the encoding to stay unique.
pub const PE_PERIOD_LIMIT: usize = 10_000;
pub const INPUT_CHANNELS: usize = 3;

/// Frequency layout of the sinusoidal encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeVariant {
    /// Exponent `d / d_model` for every dimension `d`, so neighbouring sine
    /// and cosine dimensions run at different frequencies.
    Literal,
    /// Exponent `2 * floor(d / 2) / d_model`: sine/cosine pairs share one
    /// frequency.
    Paired,
}

impl fmt::Display for PeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeVariant::Literal => "literal",
            PeVariant::Paired => "paired",
        })
    }
}

impl FromStr for PeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(PeVariant::Literal),
            "paired" => Ok(PeVariant::Paired),
            other => Err(Error::Config(format!("unknown positional encoding `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_head: usize,
    pub n_layer: usize,
    pub d_ff: usize,
    pub k_max: usize,
    pub input_mode: InputMode,
    pub pe: PeVariant,
    /// Input coordinates are divided by this before embedding.
    pub input_scale: f64,
    /// Head outputs are multiplied by this to give meters.
    pub output_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_head: 1,
            n_layer: 1,
            d_ff: 256,
            k_max: 20,
            input_mode: InputMode::Positions,
            pe: PeVariant::Literal,
            input_scale: 1.0,
            output_scale: 1.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// `d_ff` follows as `4 * d_model`.
    pub fn new(d_model: usize, n_head: usize, n_layer: usize) -> Self {
        ModelConfig {
            d_model,
            n_head,
            n_layer,
            d_ff: 4 * d_model,
            ..Default::default()
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_head
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_head == 0 || self.n_layer == 0 || self.d_ff == 0 {
            return Err(Error::Config("model widths and depths must be positive".into()));
        }
        if self.d_model % self.n_head != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_head
            )));
        }
        if self.k_max < 2 || self.k_max >= PE_PERIOD_LIMIT {
            return Err(Error::Config(format!("k_max must lie in [2, {PE_PERIOD_LIMIT}), got {}", self.k_max)));
        }
        for (name, s) in [("input_scale", self.input_scale), ("output_scale", self.output_scale)] {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

/// Sinusoidal time stamp for step `k` (0-based).
pub fn positional_encoding(k: usize, d_model: usize, variant: PeVariant) -> Vec<f64> {
    (0..d_model)
        .map(|d| {
            let e = match variant {
                PeVariant::Literal => d,
                PeVariant::Paired => 2 * (d / 2),
            };
            let angle = k as f64 / (PE_PERIOD_LIMIT as f64).powf(e as f64 / d_model as f64);
            if d % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

fn pe_table(k: usize, d_model: usize, variant: PeVariant) -> Tensor {
    let data: Vec<f64> = (0..k).flat_map(|i| positional_encoding(i, d_model, variant)).collect();
    Tensor::new(vec![k, d_model], data).expect("finite encoding")
}

/// Row-stochastic `k x k` attention filter.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub k: usize,
    pub weights: Vec<f64>,
}

impl AttentionMap {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.k..(i + 1) * self.k]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.k + j]
    }

    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.k)
            .map(|i| (self.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Attention filters of one sequence: `layers[l][h]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionRecord {
    pub layers: Vec<Vec<AttentionMap>>,
}

impl AttentionRecord {
    pub fn maps(&self) -> impl Iterator<Item = (usize, usize, &AttentionMap)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, hs)| hs.iter().enumerate().map(move |(h, m)| (l, h, m)))
    }
}

/// Scaled dot-product attention `softmax(Q Kᵀ / sqrt(d_k)) V` over the last
/// two axes. Returns the output and the weights.
pub fn attention<'t>(q: &Var<'t>, k: &Var<'t>, v: &Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    let n = qs.len();
    let bad = |lhs: &[usize], rhs: &[usize]| {
        Error::Tensor(TensorError::ShapeMismatch {
            op: "attention",
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        })
    };
    if n < 2 || ks.len() != n || vs.len() != n {
        return Err(bad(&qs, &ks));
    }
    if qs[n - 1] != ks[n - 1] || qs[..n - 2] != ks[..n - 2] {
        return Err(bad(&qs, &ks));
    }
    if ks[n - 2] != vs[n - 2] || ks[..n - 2] != vs[..n - 2] {
        return Err(bad(&ks, &vs));
    }
    let d_k = qs[n - 1] as f64;
    let logits = q.matmul(&k.transpose()?)?.scale(1.0 / d_k.sqrt())?;
    let weights = logits.softmax(n - 1)?;
    Ok((weights.matmul(v)?, weights))
}

/// Switches used by ablation tests.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Replace every attention filter by the identity matrix.
    pub identity_attention: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MissFormer {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

fn param_layout(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, dh, dff) = (c.d_model, c.d_head(), c.d_ff);
    let mut v = vec![
        ("embed.weight".to_string(), vec![INPUT_CHANNELS, d]),
        ("embed.bias".to_string(), vec![d]),
    ];
    for l in 0..c.n_layer {
        for h in 0..c.n_head {
            for p in ["q", "k", "v"] {
                v.push((format!("layer{l}.head{h}.w_{p}"), vec![d, dh]));
                v.push((format!("layer{l}.head{h}.b_{p}"), vec![dh]));
            }
        }
        v.push((format!("layer{l}.w_o"), vec![d, d]));
        v.push((format!("layer{l}.b_o"), vec![d]));
        v.push((format!("layer{l}.norm1.gain"), vec![d]));
        v.push((format!("layer{l}.norm1.bias"), vec![d]));
        v.push((format!("layer{l}.ff.w1"), vec![d, dff]));
        v.push((format!("layer{l}.ff.b1"), vec![dff]));
        v.push((format!("layer{l}.ff.w2"), vec![dff, d]));
        v.push((format!("layer{l}.ff.b2"), vec![d]));
        v.push((format!("layer{l}.norm2.gain"), vec![d]));
        v.push((format!("layer{l}.norm2.bias"), vec![d]));
    }
    v.push(("head.weight".to_string(), vec![d, 2]));
    v.push(("head.bias".to_string(), vec![2]));
    v
}

/// Number of scalar parameters implied by `config`.
pub fn param_count(config: &ModelConfig) -> usize {
    param_layout(config).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

/// Handles to the parameters of one forward pass, in declaration order.
struct Bound<'t> {
    vars: Vec<Var<'t>>,
    cursor: usize,
}

impl<'t> Bound<'t> {
    fn next(&mut self) -> Var<'t> {
        let v = self.vars[self.cursor];
        self.cursor += 1;
        v
    }
}

impl MissFormer {
    /// Fresh model: Xavier-uniform weights, zero biases, unit norm gains.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, 0x6d6f64656c);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in param_layout(&config) {
            let t = if name.ends_with("gain") {
                Tensor::full(&shape, 1.0)
            } else if shape.len() == 2 {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                Tensor::from_fn(&shape, |_| rng.random_range(-limit..limit))?
            } else {
                Tensor::zeros(&shape)
            };
            names.push(name);
            params.push(t);
        }
        Ok(MissFormer { config, names, params })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Invalid(format!(
                    "parameter {name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        let names = layout.into_iter().map(|(n, _)| n).collect();
        Ok(MissFormer { config, names, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Registers all parameters on `tape`, gradient-tracked when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| if trainable { tape.param(p) } else { tape.constant(p.clone()) })
            .collect()
    }

    fn check_batch(&self, batch: &[&ObservedSequence]) -> Result<usize> {
        let first = batch.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
        let k = first.len();
        if k == 0 || k > self.config.k_max {
            return Err(Error::Length(format!("sequence length {k} outside [1, {}]", self.config.k_max)));
        }
        for s in batch {
            if s.len() != k {
                return Err(Error::Length("batched sequences must share one length".into()));
            }
            if s.mode != self.config.input_mode {
                return Err(Error::Mode(format!(
                    "model consumes {} but sequence holds {}",
                    self.config.input_mode, s.mode
                )));
            }
        }
        Ok(k)
    }

    fn embed_on<'t>(&self, tape: &'t Tape, p: &mut Bound<'t>, batch: &[&ObservedSequence]) -> Result<Var<'t>> {
        let k = self.check_batch(batch)?;
        let inv = 1.0 / self.config.input_scale;
        let mut data = Vec::with_capacity(batch.len() * k * INPUT_CHANNELS);
        for s in batch {
            for i in 0..k {
                let t = s.token(i);
                data.extend([t[0] * inv, t[1] * inv, t[2]]);
            }
        }
        let x = tape.constant(Tensor::new(vec![batch.len(), k, INPUT_CHANNELS], data)?);
        let (w, b) = (p.next(), p.next());
        let pe = tape.constant(pe_table(k, self.config.d_model, self.config.pe));
        Ok(x.matmul(&w)?.add(&b)?.add(&pe)?)
    }

    /// Runs the encoder on equal-length sequences. Returns estimates of shape
    /// `[batch, k, 2]` in meters plus one attention record per sequence.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        batch: &[&ObservedSequence],
        opts: ForwardOptions,
    ) -> Result<(Var<'t>, Vec<AttentionRecord>)> {
        let mut p = Bound {
            vars: params.to_vec(),
            cursor: 0,
        };
        let mut h = self.embed_on(tape, &mut p, batch)?;
        let (bsz, k) = (batch.len(), batch[0].len());
        let mut records = vec![AttentionRecord::default(); bsz];
        let identity = if opts.identity_attention {
            let mut eye = vec![0.0; bsz * k * k];
            for b in 0..bsz {
                for i in 0..k {
                    eye[b * k * k + i * k + i] = 1.0;
                }
            }
            Some(tape.constant(Tensor::new(vec![bsz, k, k], eye)?))
        } else {
            None
        };

        for _ in 0..self.config.n_layer {
            let mut heads = Vec::with_capacity(self.config.n_head);
            let mut maps: Vec<Vec<AttentionMap>> = vec![Vec::new(); bsz];
            for _ in 0..self.config.n_head {
                let q = h.matmul(&p.next())?.add(&p.next())?;
                let kk = h.matmul(&p.next())?.add(&p.next())?;
                let v = h.matmul(&p.next())?.add(&p.next())?;
                let (out, w) = match identity {
                    Some(eye) => (eye.matmul(&v)?, eye),
                    None => attention(&q, &kk, &v)?,
                };
                let wd = w.data();
                for (b, m) in maps.iter_mut().enumerate() {
                    m.push(AttentionMap {
                        k,
                        weights: wd[b * k * k..(b + 1) * k * k].to_vec(),
                    });
                }
                heads.push(out);
            }
            for (r, m) in records.iter_mut().zip(maps) {
                r.layers.push(m);
            }
            let concat = if heads.len() == 1 { heads[0] } else { Var::concat_last(&heads)? };
            let attn = concat.matmul(&p.next())?.add(&p.next())?;
            h = h.add(&attn)?.layer_norm(&p.next(), &p.next(), LN_EPS)?;
            let hidden = h.matmul(&p.next())?.add(&p.next())?.relu()?;
            let ff = hidden.matmul(&p.next())?.add(&p.next())?;
            h = h.add(&ff)?.layer_norm(&p.next(), &p.next(), LN_EPS)?;
        }
        let out = h.matmul(&p.next())?.add(&p.next())?.scale(self.config.output_scale)?;
        debug_assert_eq!(p.cursor, params.len());
        Ok((out, records))
    }

    /// Embedding plus positional encoding for one sequence, `[k, d_model]`.
    pub fn embed(&self, obs: &ObservedSequence) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let mut p = Bound { vars, cursor: 0 };
        let e = self.embed_on(&tape, &mut p, &[obs])?;
        let k = obs.len();
        Ok(Tensor::new(vec![k, self.config.d_model], e.data())?)
    }

    /// Full-length position estimates and attention filters for one sequence.
    pub fn encoder_forward(&self, obs: &ObservedSequence) -> Result<(Vec<Point>, AttentionRecord)> {
        self.encoder_forward_with(obs, ForwardOptions::default())
    }

    pub fn encoder_forward_with(&self, obs: &ObservedSequence, opts: ForwardOptions) -> Result<(Vec<Point>, AttentionRecord)> {
        if obs.len() < 2 {
            return Err(Error::Length("encoder needs at least 2 steps".into()));
        }
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let (out, mut rec) = self.forward(&tape, &params, &[obs], opts)?;
        Ok((to_points(&out.data()), rec.remove(0)))
    }

    /// Estimates for many sequences; equal lengths are batched together.
    /// Output order follows the input.
    pub fn predict_batch(&self, seqs: &[ObservedSequence]) -> Result<Vec<Vec<Point>>> {
        const CHUNK: usize = 256;
        let mut out: Vec<Option<Vec<Point>>> = vec![None; seqs.len()];
        let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, s) in seqs.iter().enumerate() {
            by_len.entry(s.len()).or_default().push(i);
        }
        for idx in by_len.values() {
            for chunk in idx.chunks(CHUNK) {
                let tape = Tape::new();
                let params = self.bind(&tape, false);
                let batch: Vec<&ObservedSequence> = chunk.iter().map(|&i| &seqs[i]).collect();
                let (est, _) = self.forward(&tape, &params, &batch, ForwardOptions::default())?;
                let data = est.data();
                let per = data.len() / chunk.len();
                for (j, &i) in chunk.iter().enumerate() {
                    out[i] = Some(to_points(&data[j * per..(j + 1) * per]));
                }
            }
        }
        Ok(out.into_iter().map(|o| o.expect("every index filled")).collect())
    }

    /// Appends `horizon` missing tokens to the observed prefix and returns
    /// the full-length estimate; its last `horizon` rows are the prediction.
    pub fn predict_full(&self, obs: &ObservedSequence, horizon: usize) -> Result<Vec<Point>> {
        let input = prediction_input(obs, horizon, self.config.k_max)?;
        Ok(self.encoder_forward(&input)?.0)
    }
}

/// Observed prefix followed by `horizon` missing tokens.
pub fn prediction_input(obs: &ObservedSequence, horizon: usize, k_max: usize) -> Result<ObservedSequence> {
    if obs.len() + horizon > k_max {
        return Err(Error::Length(format!(
            "observed {} + horizon {horizon} exceeds k_max {k_max}",
            obs.len()
        )));
    }
    if horizon == 0 {
        return Ok(obs.clone());
    }
    mask_tail_for_prediction(&obs.extended(horizon), horizon)
}

pub(crate) fn to_points(data: &[f64]) -> Vec<Point> {
    data.chunks(2).map(|c| [c[0], c[1]]).collect()
}
