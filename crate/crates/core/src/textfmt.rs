//! Line-oriented helpers shared by the versioned model text formats.
//!
//! Reals are written with Rust's shortest round-trip `Display`, so a value read
//! back is bit-identical to the one written.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::Error;

pub(crate) const VERSION: &str = "v1";

pub(crate) fn push_reals(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{v}").unwrap();
    }
    out.push('\n');
}

pub(crate) struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    kind: &'static str,
    path: PathBuf,
    line_no: usize,
}

impl<'a> Lines<'a> {
    pub(crate) fn new(text: &'a str, kind: &'static str, path: &Path) -> Self {
        Self {
            iter: text.lines().enumerate(),
            kind,
            path: path.to_path_buf(),
            line_no: 0,
        }
    }

    pub(crate) fn error(&self, message: impl Into<String>) -> Error {
        Error::Format {
            kind: self.kind,
            path: self.path.clone(),
            message: format!("line {}: {}", self.line_no, message.into()),
        }
    }

    pub(crate) fn next_line(&mut self) -> Result<&'a str, Error> {
        match self.iter.next() {
            Some((i, line)) => {
                self.line_no = i + 1;
                Ok(line)
            }
            None => Err(self.error("unexpected end of file")),
        }
    }

    /// Reads `<tag> v1 <fields...>` and returns the fields after the version.
    pub(crate) fn header_fields(&mut self, tag: &str) -> Result<Vec<&'a str>, Error> {
        let line = self.next_line()?;
        let mut tokens = line.split_whitespace();
        if tokens.next() != Some(tag) {
            return Err(self.error(format!("expected header starting with {tag:?}")));
        }
        match tokens.next() {
            Some(VERSION) => Ok(tokens.collect()),
            other => Err(self.error(format!("unsupported version {other:?}"))),
        }
    }

    /// Reads `<tag> v1 <rows> <cols>`.
    pub(crate) fn header(&mut self, tag: &str) -> Result<(usize, usize), Error> {
        let fields = self.header_fields(tag)?;
        if fields.len() != 2 {
            return Err(self.error("expected two dimensions in header"));
        }
        Ok((self.parse(fields[0])?, self.parse(fields[1])?))
    }

    pub(crate) fn parse<T: FromStr>(&self, token: &str) -> Result<T, Error> {
        token
            .parse()
            .map_err(|_| self.error(format!("cannot parse {token:?}")))
    }

    /// Reads a line of exactly `n` finite reals.
    pub(crate) fn reals(&mut self, n: usize) -> Result<Vec<f64>, Error> {
        let line = self.next_line()?;
        let values = line
            .split_whitespace()
            .map(|t| self.parse::<f64>(t))
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != n {
            return Err(self.error(format!("expected {n} values, found {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(self.error("non-finite value"));
        }
        Ok(values)
    }

    /// Fails if anything but blank lines remain.
    pub(crate) fn finish(&mut self) -> Result<(), Error> {
        for (i, line) in self.iter.by_ref() {
            if !line.trim().is_empty() {
                self.line_no = i + 1;
                return Err(self.error("trailing content"));
            }
        }
        Ok(())
    }
}
