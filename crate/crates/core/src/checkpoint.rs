//! Model checkpoints: a line-oriented text header followed by every
//! parameter as little-endian f64, in layout order.
//!
//! ```text
//! missformer-checkpoint 1
//! config d_model 64
//! ...
//! meta task reconstruction
//! tensor embed.weight 3 64
//! ...
//! end
//! <raw f64 data>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{MissFormer, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &str = "missformer-checkpoint";
pub const VERSION: u32 = 1;

/// Free-form provenance stored next to the weights.
pub type Meta = BTreeMap<String, String>;

fn config_lines(c: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("d_model", c.d_model.to_string()),
        ("n_head", c.n_head.to_string()),
        ("n_layer", c.n_layer.to_string()),
        ("d_ff", c.d_ff.to_string()),
        ("k_max", c.k_max.to_string()),
        ("input_mode", c.input_mode.to_string()),
        ("pe", c.pe.to_string()),
        ("input_scale", format!("{:?}", c.input_scale)),
        ("output_scale", format!("{:?}", c.output_scale)),
        ("seed", c.seed.to_string()),
    ]
}

pub fn write<W: Write>(mut w: W, model: &MissFormer, meta: &Meta) -> Result<()> {
    writeln!(w, "{MAGIC} {VERSION}")?;
    for (k, v) in config_lines(model.config()) {
        writeln!(w, "config {k} {v}")?;
    }
    for (k, v) in meta {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(Error::Invalid(format!("meta entry `{k}` cannot be stored on one line")));
        }
        writeln!(w, "meta {k} {v}")?;
    }
    for (name, t) in model.param_names().iter().zip(model.params()) {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(w, "tensor {name} {}", dims.join(" "))?;
    }
    writeln!(w, "end")?;
    for t in model.params() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save(path: &Path, model: &MissFormer, meta: &Meta) -> Result<()> {
    let mut buf = Vec::new();
    write(&mut buf, model, meta)?;
    fs::write(path, buf)?;
    Ok(())
}

fn set_config(c: &mut ModelConfig, key: &str, value: &str, line: usize) -> Result<()> {
    let perr = |msg: String| Error::Parse { line, msg };
    let num = |v: &str| v.parse::<usize>().map_err(|_| perr(format!("bad value `{v}` for {key}")));
    let float = |v: &str| v.parse::<f64>().map_err(|_| perr(format!("bad value `{v}` for {key}")));
    match key {
        "d_model" => c.d_model = num(value)?,
        "n_head" => c.n_head = num(value)?,
        "n_layer" => c.n_layer = num(value)?,
        "d_ff" => c.d_ff = num(value)?,
        "k_max" => c.k_max = num(value)?,
        "input_mode" => c.input_mode = value.parse().map_err(|_| perr(format!("bad input mode `{value}`")))?,
        "pe" => c.pe = value.parse().map_err(|_| perr(format!("bad encoding `{value}`")))?,
        "input_scale" => c.input_scale = float(value)?,
        "output_scale" => c.output_scale = float(value)?,
        "seed" => c.seed = value.parse().map_err(|_| perr(format!("bad seed `{value}`")))?,
        other => return Err(perr(format!("unknown config key `{other}`"))),
    }
    Ok(())
}

pub fn read<R: Read>(r: R) -> Result<(MissFormer, Meta)> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let mut line_no = 0;
    let mut next_line = |r: &mut BufReader<R>, line: &mut String| -> Result<usize> {
        line.clear();
        if r.read_line(line)? == 0 {
            return Err(Error::Parse {
                line: line_no + 1,
                msg: "unexpected end of checkpoint header".into(),
            });
        }
        line_no += 1;
        Ok(line_no)
    };

    let n = next_line(&mut r, &mut line)?;
    let mut head = line.split_whitespace();
    if head.next() != Some(MAGIC) {
        return Err(Error::Parse {
            line: n,
            msg: "not a checkpoint file".into(),
        });
    }
    match head.next().and_then(|v| v.parse::<u32>().ok()) {
        Some(VERSION) => {}
        v => {
            return Err(Error::Parse {
                line: n,
                msg: format!("unsupported checkpoint version {v:?}"),
            })
        }
    }

    let mut config = ModelConfig::default();
    let mut meta = Meta::new();
    let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
    loop {
        let n = next_line(&mut r, &mut line)?;
        let t = line.trim_end_matches(['\n', '\r']);
        if t == "end" {
            break;
        }
        let mut parts = t.splitn(3, ' ');
        let kind = parts.next().unwrap_or("");
        let key = parts.next().unwrap_or("");
        let rest = parts.next().unwrap_or("");
        match kind {
            "config" => set_config(&mut config, key, rest, n)?,
            "meta" => {
                meta.insert(key.to_string(), rest.to_string());
            }
            "tensor" => {
                let dims = rest
                    .split_whitespace()
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Parse {
                        line: n,
                        msg: format!("bad shape for tensor {key}"),
                    })?;
                shapes.push((key.to_string(), dims));
            }
            _ => {
                return Err(Error::Parse {
                    line: n,
                    msg: format!("unknown header entry `{kind}`"),
                })
            }
        }
    }

    let mut params = Vec::with_capacity(shapes.len());
    let mut bytes = [0u8; 8];
    for (name, shape) in &shapes {
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut bytes)
                .map_err(|_| Error::Invalid(format!("checkpoint truncated inside tensor {name}")))?;
            data.push(f64::from_le_bytes(bytes));
        }
        params.push(Tensor::new(shape.clone(), data)?);
    }
    if r.read(&mut bytes)? != 0 {
        return Err(Error::Invalid("trailing bytes after the last tensor".into()));
    }
    let model = MissFormer::from_parts(config, params)?;
    if let Some((expected, (got, _))) = model.param_names().iter().zip(&shapes).find(|(e, (g, _))| e != &g) {
        return Err(Error::Invalid(format!("tensor `{got}` found where `{expected}` was expected")));
    }
    Ok((model, meta))
}

pub fn load(path: &Path) -> Result<(MissFormer, Meta)> {
    read(fs::File::open(path)?)
}
