//! Flat structured-text checkpoint manifest.
//!
//! ```text
//! wsco-manifest 1
//! meta <key> <value>
//! tensor <name> <rows> <cols> <param|buffer>
//! <row 0 values, space separated>
//! ...
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so a
//! write/read cycle reproduces every bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{config, Error, Result};
use crate::nn::{Param, ParamSet};

const HEADER: &str = "wsco-manifest 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub meta: BTreeMap<String, String>,
    tensors: Vec<Param<f64>>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        debug_assert!(!key.contains(char::is_whitespace) && !value.contains('\n'));
        self.meta.insert(key.to_string(), value);
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| config(format!("manifest lacks meta key {key}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)?
            .parse()
            .map_err(|_| config(format!("manifest meta {key} is malformed")))
    }

    pub fn tensors(&self) -> &[Param<f64>] {
        &self.tensors
    }

    pub fn push_tensor(&mut self, p: Param<f64>) {
        self.tensors.push(p);
    }

    /// Stores a raw vector as a `1 × n` buffer.
    pub fn put_vec(&mut self, name: &str, values: &[f64]) {
        self.tensors.push(Param {
            name: name.to_string(),
            shape: (1, values.len()),
            value: values.to_vec(),
            grad: vec![0.0; values.len()],
            trainable: false,
        });
    }

    pub fn get_vec(&self, name: &str) -> Result<Vec<f64>> {
        self.tensor(name).map(|p| p.value.clone())
    }

    pub fn tensor(&self, name: &str) -> Result<&Param<f64>> {
        self.tensors
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| config(format!("manifest lacks tensor {name}")))
    }

    pub fn has_tensor(&self, name: &str) -> bool {
        self.tensors.iter().any(|p| p.name == name)
    }

    pub fn put_params(&mut self, prefix: &str, params: &ParamSet<f64>) {
        for p in params.iter() {
            self.tensors.push(Param {
                name: format!("{prefix}{}", p.name),
                grad: vec![0.0; p.len()],
                ..p.clone()
            });
        }
    }

    /// Every tensor whose name starts with `prefix`, prefix stripped, in file order.
    pub fn take_params(&self, prefix: &str) -> Result<ParamSet<f64>> {
        let mut set = ParamSet::new();
        for p in self.tensors.iter().filter(|p| p.name.starts_with(prefix)) {
            set.push(Param { name: p.name[prefix.len()..].to_string(), ..p.clone() })?;
        }
        if set.is_empty() {
            return Err(config(format!("manifest has no tensors under {prefix}")));
        }
        Ok(set)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(HEADER);
        s.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(s, "meta {k} {v}");
        }
        for p in &self.tensors {
            let kind = if p.trainable { "param" } else { "buffer" };
            let _ = writeln!(s, "tensor {} {} {} {kind}", p.name, p.shape.0, p.shape.1);
            for r in 0..p.shape.0 {
                let row = &p.value[r * p.shape.1..(r + 1) * p.shape.1];
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                s.push_str(&line.join(" "));
                s.push('\n');
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == HEADER => {}
            _ => return Err(Error::Parse { line: 1, msg: format!("expected header '{HEADER}'") }),
        }
        let mut m = Manifest::new();
        while let Some((ln, line)) = lines.next() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: &str| Error::Parse { line: ln + 1, msg: msg.to_string() };
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                m.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let f: Vec<&str> = rest.split_whitespace().collect();
                if f.len() != 4 {
                    return Err(perr("tensor line needs: name rows cols kind"));
                }
                let rows: usize = f[1].parse().map_err(|_| perr("bad row count"))?;
                let cols: usize = f[2].parse().map_err(|_| perr("bad column count"))?;
                let trainable = match f[3] {
                    "param" => true,
                    "buffer" => false,
                    _ => return Err(perr("tensor kind must be param or buffer")),
                };
                let mut value = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let (rl, row) = lines.next().ok_or_else(|| perr("truncated tensor"))?;
                    for tok in row.split_whitespace() {
                        value.push(tok.parse::<f64>().map_err(|_| Error::Parse {
                            line: rl + 1,
                            msg: format!("bad number '{tok}'"),
                        })?);
                    }
                }
                if value.len() != rows * cols {
                    return Err(perr("tensor value count does not match its shape"));
                }
                m.tensors.push(Param {
                    name: f[0].to_string(),
                    shape: (rows, cols),
                    grad: vec![0.0; value.len()],
                    value,
                    trainable,
                });
            } else {
                return Err(perr("unrecognized line"));
            }
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
