//! Plain structured text files: `key = value` lines plus named matrix blocks.
//!
//! ```text
//! # comment
//! kind = correlation
//! [covariance 2 2]
//! 0.25 0.1
//! 0.1 0.25
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write/read cycle reproduces every value bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Document {
    entries: Vec<(String, String)>,
    blocks: Vec<(String, Array2<f64>)>,
}

impl Document {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
        self
    }

    pub fn set_block(&mut self, name: &str, matrix: Array2<f64>) -> &mut Self {
        match self.blocks.iter_mut().find(|(k, _)| k == name) {
            Some(block) => block.1 = matrix,
            None => self.blocks.push((name.to_string(), matrix)),
        }
        self
    }

    pub fn set_vector(&mut self, name: &str, values: &[f64]) -> &mut Self {
        let row = Array2::from_shape_vec((1, values.len()), values.to_vec())
            .expect("a single row always has a valid shape");
        self.set_block(name, row)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Invalid(format!("missing key `{key}`")))
    }

    pub fn require_f64(&self, key: &str) -> Result<f64> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Invalid(format!("key `{key}`: `{raw}` is not a number")))
    }

    pub fn block(&self, name: &str) -> Option<&Array2<f64>> {
        self.blocks
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, m)| m)
    }

    pub fn require_block(&self, name: &str) -> Result<&Array2<f64>> {
        self.block(name)
            .ok_or_else(|| Error::Invalid(format!("missing block `{name}`")))
    }

    pub fn require_vector(&self, name: &str) -> Result<Vec<f64>> {
        let block = self.require_block(name)?;
        if block.nrows() != 1 {
            return Err(Error::Invalid(format!(
                "block `{name}` should have one row, found {}",
                block.nrows()
            )));
        }
        Ok(block.iter().copied().collect())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        for (name, m) in &self.blocks {
            let _ = writeln!(out, "[{name} {} {}]", m.nrows(), m.ncols());
            for row in m.rows() {
                let cells: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
                let _ = writeln!(out, "{}", cells.join(" "));
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Document::new();
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        while let Some((lineno, line)) = lines.next() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(header) = line.strip_prefix('[') {
                let header = header
                    .strip_suffix(']')
                    .ok_or_else(|| Error::parse(lineno, "unterminated block header"))?;
                let parts: Vec<&str> = header.split_whitespace().collect();
                let [name, rows, cols] = parts[..] else {
                    return Err(Error::parse(lineno, "block header must be `[name rows cols]`"));
                };
                let rows: usize = rows
                    .parse()
                    .map_err(|_| Error::parse(lineno, format!("bad row count `{rows}`")))?;
                let cols: usize = cols
                    .parse()
                    .map_err(|_| Error::parse(lineno, format!("bad column count `{cols}`")))?;
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let (rl, row) = lines
                        .next()
                        .ok_or_else(|| Error::parse(lineno, format!("block `{name}` truncated")))?;
                    let before = data.len();
                    for cell in row.split_whitespace() {
                        let v: f64 = cell
                            .parse()
                            .map_err(|_| Error::parse(rl, format!("`{cell}` is not a number")))?;
                        data.push(v);
                    }
                    if data.len() - before != cols {
                        return Err(Error::parse(
                            rl,
                            format!("expected {cols} values, found {}", data.len() - before),
                        ));
                    }
                }
                let m = Array2::from_shape_vec((rows, cols), data)
                    .map_err(|e| Error::parse(lineno, e.to_string()))?;
                doc.set_block(name, m);
            } else {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::parse(lineno, "expected `key = value`"))?;
                doc.set(k.trim(), v.trim());
            }
        }
        Ok(doc)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
