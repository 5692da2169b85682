//! Versioned text container for named matrices.
//!
//! ```text
//! prefgen-checkpoint 1
//! kind calibrator
//! meta attn_dim 16
//! tensor img_tokens 4 32
//! <row 0 values, space separated>
//! ...
//! end
//! ```
//!
//! Values use the shortest representation that parses back to the same
//! `f64`, so a save/load round trip is exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

const MAGIC: &str = "prefgen-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Checkpoint {
            kind: kind.into(),
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn push(&mut self, name: impl Into<String>, m: &Matrix) {
        self.tensors.push((name.into(), m.clone()));
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta
            .get(key)
            .ok_or_else(|| Error::config(format!("checkpoint missing meta `{key}`")))?
            .parse()
            .map_err(|_| Error::config(format!("checkpoint meta `{key}` is malformed")))
    }

    /// Removes and returns the next tensor, checking its name.
    pub fn take(&mut self, name: &str) -> Result<Matrix> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::config(format!("checkpoint missing tensor `{name}`")))?;
        Ok(self.tensors.remove(pos).1)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::config(format!(
                "checkpoint holds `{}`, expected `{kind}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{MAGIC} {VERSION}").unwrap();
        writeln!(s, "kind {}", self.kind).unwrap();
        for (k, v) in &self.meta {
            writeln!(s, "meta {k} {v}").unwrap();
        }
        for (name, m) in &self.tensors {
            writeln!(s, "tensor {name} {} {}", m.rows(), m.cols()).unwrap();
            for r in 0..m.rows() {
                let row: Vec<String> = m.row(r).iter().map(f64::to_string).collect();
                writeln!(s, "{}", row.join(" ")).unwrap();
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let bad = |line: usize, field: &str, message: String| Error::Parse {
            line,
            field: field.to_string(),
            message,
        };
        let (n, first) = lines
            .next()
            .ok_or_else(|| bad(1, "header", "empty checkpoint".into()))?;
        if first.trim() != format!("{MAGIC} {VERSION}") {
            return Err(bad(n, "header", format!("expected `{MAGIC} {VERSION}`")));
        }
        let (n, kind_line) = lines
            .next()
            .ok_or_else(|| bad(2, "kind", "missing kind".into()))?;
        let kind = kind_line
            .strip_prefix("kind ")
            .ok_or_else(|| bad(n, "kind", "expected `kind <name>`".into()))?
            .trim()
            .to_string();
        let mut ck = Checkpoint::new(kind);
        let mut ended = false;
        while let Some((n, line)) = lines.next() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("meta") => {
                    let key = parts
                        .next()
                        .ok_or_else(|| bad(n, "meta", "missing key".into()))?;
                    let value: Vec<&str> = parts.collect();
                    ck.meta.insert(key.to_string(), value.join(" "));
                }
                Some("tensor") => {
                    let name = parts
                        .next()
                        .ok_or_else(|| bad(n, "tensor", "missing name".into()))?;
                    let dims: Vec<usize> = parts
                        .map(str::parse)
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad(n, name, "malformed shape".into()))?;
                    let [rows, cols] = dims[..] else {
                        return Err(bad(n, name, "expected `rows cols`".into()));
                    };
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        let (rn, row) = lines
                            .next()
                            .ok_or_else(|| bad(n, name, "truncated tensor".into()))?;
                        let before = data.len();
                        for tok in row.split_whitespace() {
                            data.push(
                                tok.parse::<f64>()
                                    .map_err(|_| bad(rn, name, format!("bad number `{tok}`")))?,
                            );
                        }
                        if data.len() - before != cols {
                            return Err(bad(rn, name, format!("expected {cols} values")));
                        }
                    }
                    let m =
                        Matrix::new(rows, cols, data).map_err(|e| bad(n, name, e.to_string()))?;
                    ck.tensors.push((name.to_string(), m));
                }
                Some("end") => {
                    ended = true;
                    break;
                }
                None => continue,
                Some(other) => return Err(bad(n, "record", format!("unexpected `{other}`"))),
            }
        }
        if !ended {
            return Err(bad(0, "end", "checkpoint is truncated".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::parse(&text).map_err(|e| e.context(path.display().to_string()))
    }
}
