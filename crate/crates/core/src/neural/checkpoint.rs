//! Plain-text checkpoint container.
//!
//! ```text
//! madist-checkpoint v1
//! kind embedding
//! meta norm l1
//! net phi
//! layer_dims 2 128 128 64
//! hidden selu
//! output identity
//! W0 <fan_in * fan_out values, row-major>
//! b0 <fan_out values>
//! ...
//! end
//! ```
//!
//! Floats are written in shortest round-trip form so a reload reproduces
//! every parameter bit-for-bit.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::mlp::{Activation, Layer, Mlp};
use crate::error::{Error, Result};

const MAGIC: &str = "madist-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub nets: Vec<(String, Mlp)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Checkpoint {
            kind: kind.into(),
            meta: Vec::new(),
            nets: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn with_net(mut self, name: &str, net: Mlp) -> Self {
        self.nets.push((name.to_string(), net));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require_meta<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta(key)
            .ok_or_else(|| Error::Validation(format!("checkpoint missing `{key}`")))?;
        raw.parse().map_err(|_| {
            Error::Validation(format!("checkpoint field `{key}` = `{raw}` is invalid"))
        })
    }

    pub fn take_net(&mut self, name: &str) -> Result<Mlp> {
        let pos = self
            .nets
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Validation(format!("checkpoint missing network `{name}`")))?;
        Ok(self.nets.remove(pos).1)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Validation(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{MAGIC}").unwrap();
        writeln!(out, "kind {}", self.kind).unwrap();
        for (k, v) in &self.meta {
            writeln!(out, "meta {k} {v}").unwrap();
        }
        for (name, net) in &self.nets {
            writeln!(out, "net {name}").unwrap();
            let dims: Vec<String> = net.layer_dims().iter().map(|d| d.to_string()).collect();
            writeln!(out, "layer_dims {}", dims.join(" ")).unwrap();
            writeln!(out, "hidden {}", net.hidden_activation().name()).unwrap();
            writeln!(out, "output {}", net.output_activation().name()).unwrap();
            for (i, layer) in net.layers().iter().enumerate() {
                write_floats(&mut out, &format!("W{i}"), layer.weight.iter());
                write_floats(&mut out, &format!("b{i}"), layer.bias.iter());
            }
        }
        writeln!(out, "end").unwrap();
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| {
                Error::parse(
                    path,
                    text.lines().count() + 1,
                    format!("unexpected end of file, expected {what}"),
                )
            })
        };
        let (n, first) = next("header")?;
        if first != MAGIC {
            return Err(Error::parse(path, n, "not a madist checkpoint"));
        }
        let (n, kind_line) = next("kind")?;
        let kind = kind_line
            .strip_prefix("kind ")
            .ok_or_else(|| Error::parse(path, n, "expected `kind <name>`"))?
            .to_string();
        let mut ckpt = Checkpoint::new(kind);
        loop {
            let (n, line) = next("`end`")?;
            if line == "end" {
                return Ok(ckpt);
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest
                    .split_once(' ')
                    .ok_or_else(|| Error::parse(path, n, "expected `meta <key> <value>`"))?;
                ckpt.meta.push((k.to_string(), v.to_string()));
                continue;
            }
            let name = line
                .strip_prefix("net ")
                .ok_or_else(|| {
                    Error::parse(path, n, format!("unexpected line `{}`", truncate(line)))
                })?
                .to_string();

            let (n, dims_line) = next("layer_dims")?;
            let dims: Vec<usize> = dims_line
                .strip_prefix("layer_dims ")
                .ok_or_else(|| Error::parse(path, n, "expected `layer_dims`"))?
                .split_whitespace()
                .map(|d| {
                    d.parse()
                        .map_err(|_| Error::parse(path, n, format!("bad dimension `{d}`")))
                })
                .collect::<Result<_>>()?;
            if dims.len() < 2 || dims.contains(&0) {
                return Err(Error::parse(
                    path,
                    n,
                    format!("invalid layer dims {dims:?}"),
                ));
            }
            let mut activation = |label: &str| -> Result<Activation> {
                let (n, l) = next(label)?;
                l.strip_prefix(label)
                    .and_then(|r| r.strip_prefix(' '))
                    .and_then(Activation::from_name)
                    .ok_or_else(|| {
                        Error::parse(path, n, format!("expected `{label} <activation>`"))
                    })
            };
            let hidden = activation("hidden")?;
            let output = activation("output")?;
            let mut layers = Vec::with_capacity(dims.len() - 1);
            for (i, w) in dims.windows(2).enumerate() {
                let (n, l) = next("weights")?;
                let values = read_floats(l, &format!("W{i}"), w[0] * w[1], path, n)?;
                let weight = Array2::from_shape_vec((w[0], w[1]), values).expect("shape checked");
                let (n, l) = next("biases")?;
                let bias = Array1::from(read_floats(l, &format!("b{i}"), w[1], path, n)?);
                layers.push(Layer { weight, bias });
            }
            let net = Mlp::from_layers(layers, hidden, output)
                .map_err(|e| Error::parse(path, n, e.to_string()))?;
            ckpt.nets.push((name, net));
        }
    }
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(40) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn write_floats<'a>(out: &mut String, label: &str, values: impl Iterator<Item = &'a f64>) {
    out.push_str(label);
    for v in values {
        write!(out, " {v:?}").unwrap();
    }
    out.push('\n');
}

fn read_floats(
    line: &str,
    label: &str,
    expected: usize,
    path: &Path,
    n: usize,
) -> Result<Vec<f64>> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(label) {
        return Err(Error::parse(path, n, format!("expected `{label}`")));
    }
    let values: Vec<f64> = parts
        .map(|p| {
            p.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    Error::parse(path, n, format!("bad value `{}` in {label}", truncate(p)))
                })
        })
        .collect::<Result<_>>()?;
    if values.len() != expected {
        return Err(Error::parse(
            path,
            n,
            format!("{label} has {} values, expected {expected}", values.len()),
        ));
    }
    Ok(values)
}
