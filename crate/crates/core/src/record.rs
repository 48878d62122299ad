//! Line-oriented text records used by the parameter files.
//!
//! A record is a tag followed by whitespace-separated fields. Matrices are a
//! `tag rows cols` line followed by `rows` lines of values; vectors are a
//! `tag len` line followed by one line of values. Floats are written in
//! Rust's shortest round-trip form, so save/load is lossless.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::math::{Matrix, Vector};

pub struct Line {
    pub number: usize,
    pub tag: String,
    pub fields: Vec<String>,
}

impl Line {
    fn field(&self, i: usize) -> Result<&str> {
        self.fields.get(i).map(String::as_str).ok_or_else(|| {
            Error::Parse(format!("line {}: `{}` is missing field {}", self.number, self.tag, i + 1))
        })
    }

    pub fn usize_at(&self, i: usize) -> Result<usize> {
        let f = self.field(i)?;
        f.parse()
            .map_err(|_| Error::Parse(format!("line {}: `{f}` is not an integer", self.number)))
    }

    pub fn f64_at(&self, i: usize) -> Result<f64> {
        let f = self.field(i)?;
        f.parse()
            .map_err(|_| Error::Parse(format!("line {}: `{f}` is not a number", self.number)))
    }
}

pub struct Records<R> {
    reader: R,
    line_no: usize,
}

impl<R: BufRead> Records<R> {
    pub fn new(reader: R) -> Self {
        Self { reader, line_no: 0 }
    }

    /// Next non-blank, non-comment line; `None` at end of input.
    pub fn next_line(&mut self) -> Result<Option<Line>> {
        let mut buf = String::new();
        loop {
            buf.clear();
            if self.reader.read_line(&mut buf)? == 0 {
                return Ok(None);
            }
            self.line_no += 1;
            let trimmed = buf.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut parts = trimmed.split_whitespace().map(str::to_owned);
            let tag = parts.next().unwrap_or_default();
            return Ok(Some(Line { number: self.line_no, tag, fields: parts.collect() }));
        }
    }

    pub fn expect_line(&mut self) -> Result<Line> {
        self.next_line()?
            .ok_or_else(|| Error::Parse(format!("unexpected end of input after line {}", self.line_no)))
    }

    pub fn expect_tag(&mut self, tag: &str) -> Result<Line> {
        let line = self.expect_line()?;
        if line.tag != tag {
            return Err(Error::Parse(format!(
                "line {}: expected `{tag}`, found `{}`",
                line.number, line.tag
            )));
        }
        Ok(line)
    }

    /// A line holding only numbers (no tag).
    pub fn expect_values(&mut self, count: usize) -> Result<Vec<f64>> {
        let line = self.expect_line()?;
        let mut values = Vec::with_capacity(count);
        for tok in std::iter::once(&line.tag).chain(&line.fields) {
            values.push(tok.parse::<f64>().map_err(|_| {
                Error::Parse(format!("line {}: `{tok}` is not a number", line.number))
            })?);
        }
        if values.len() != count {
            return Err(Error::Parse(format!(
                "line {}: expected {count} values, found {}",
                line.number,
                values.len()
            )));
        }
        Ok(values)
    }
}

pub fn write_values<W: Write>(out: &mut W, values: &[f64]) -> Result<()> {
    let mut first = true;
    for v in values {
        if !first {
            write!(out, " ")?;
        }
        write!(out, "{v}")?;
        first = false;
    }
    writeln!(out)?;
    Ok(())
}

pub fn write_matrix<W: Write>(out: &mut W, tag: &str, m: &Matrix) -> Result<()> {
    writeln!(out, "{tag} {} {}", m.rows(), m.cols())?;
    for r in 0..m.rows() {
        write_values(out, m.row(r))?;
    }
    Ok(())
}

pub fn write_vector<W: Write>(out: &mut W, tag: &str, v: &[f64]) -> Result<()> {
    writeln!(out, "{tag} {}", v.len())?;
    write_values(out, v)
}

pub fn read_matrix<R: BufRead>(records: &mut Records<R>, tag: &str) -> Result<Matrix> {
    let head = records.expect_tag(tag)?;
    let rows = head.usize_at(0)?;
    let cols = head.usize_at(1)?;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        data.extend(records.expect_values(cols)?);
    }
    Matrix::from_vec(rows, cols, data)
}

pub fn read_vector<R: BufRead>(records: &mut Records<R>, tag: &str) -> Result<Vector> {
    let head = records.expect_tag(tag)?;
    let len = head.usize_at(0)?;
    if len == 0 {
        // an empty vector is written as an empty line, which the reader skips
        return Ok(Vec::new());
    }
    records.expect_values(len)
}
