//! Text archive of embedding vectors.
//!
//! ```text
//! dim=<d>
//! #model=<tag>                       (optional)
//! <record_id>\tsent\t<d floats separated by spaces>
//! <record_id>\ttok\t<d floats>|<d floats>|...
//! ```
//!
//! For `tok` records position 0 is the `[CLS]` vector and the remaining
//! positions follow the packed input layout of the producing model.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::tensor::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum ArchiveRecord {
    Sentence(Vec<f64>),
    Tokens(Matrix),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingArchive {
    dim: usize,
    pub model_tag: Option<String>,
    records: BTreeMap<String, ArchiveRecord>,
}

fn parse_floats(s: &str, dim: usize, id: &str, line: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split_whitespace()
        .map(|x| {
            x.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("record `{id}`: `{x}` is not a number"),
            })
        })
        .collect::<Result<_>>()?;
    if v.len() != dim {
        return Err(Error::DimensionMismatch {
            context: format!("archive record `{id}` (line {line})"),
            expected: dim,
            found: v.len(),
        });
    }
    Ok(v)
}

fn push_floats(out: &mut String, xs: &[f64]) {
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{x}").expect("write to string");
    }
}

impl EmbeddingArchive {
    pub fn new(dim: usize, model_tag: Option<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("archive dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            model_tag,
            records: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    pub fn record(&self, id: &str) -> Option<&ArchiveRecord> {
        self.records.get(id)
    }

    pub fn insert(&mut self, id: impl Into<String>, record: ArchiveRecord) -> Result<()> {
        let id = id.into();
        if id.is_empty() || id.contains(['\t', '\n']) {
            return Err(Error::InvalidArgument(format!("invalid record id `{id}`")));
        }
        let found = match &record {
            ArchiveRecord::Sentence(v) => v.len(),
            ArchiveRecord::Tokens(m) => m.cols,
        };
        if found != self.dim {
            return Err(Error::DimensionMismatch {
                context: format!("archive record `{id}`"),
                expected: self.dim,
                found,
            });
        }
        if self.records.contains_key(&id) {
            return Err(Error::InvalidArgument(format!("duplicate record id `{id}`")));
        }
        self.records.insert(id, record);
        Ok(())
    }

    /// Returns the vector for `id`. Without a position, `tok` records yield
    /// their `[CLS]` vector; asking a `sent` record for a position fails.
    pub fn fetch(&self, id: &str, position: Option<usize>) -> Result<&[f64]> {
        let rec = self
            .records
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("archive record `{id}`")))?;
        match (rec, position) {
            (ArchiveRecord::Sentence(v), None) => Ok(v),
            (ArchiveRecord::Sentence(_), Some(_)) => Err(Error::Unsupported(format!(
                "record `{id}` holds only a sentence vector"
            ))),
            (ArchiveRecord::Tokens(m), p) => {
                let p = p.unwrap_or(0);
                if p >= m.rows {
                    return Err(Error::NotFound(format!(
                        "position {p} in record `{id}` of {} positions",
                        m.rows
                    )));
                }
                Ok(m.row(p))
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let dim = lines
            .next()
            .and_then(|(_, l)| l.trim().strip_prefix("dim="))
            .and_then(|d| d.parse::<usize>().ok())
            .ok_or(Error::Parse {
                line: 1,
                message: "expected `dim=<d>` header".into(),
            })?;
        let mut archive = Self::new(dim, None)?;
        for (i, line) in lines {
            let line_no = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some(tag) = meta.strip_prefix("model=") {
                    archive.model_tag = Some(tag.to_string());
                }
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            let (Some(id), Some(kind), Some(data)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Parse {
                    line: line_no,
                    message: "expected `id<TAB>kind<TAB>vector`".into(),
                });
            };
            let record = match kind {
                "sent" => ArchiveRecord::Sentence(parse_floats(data, dim, id, line_no)?),
                "tok" => {
                    let rows: Vec<Vec<f64>> = data
                        .split('|')
                        .map(|p| parse_floats(p, dim, id, line_no))
                        .collect::<Result<_>>()?;
                    let n = rows.len();
                    ArchiveRecord::Tokens(Matrix::from_vec(n, dim, rows.concat()))
                }
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("unknown record kind `{other}`"),
                    })
                }
            };
            archive.insert(id, record).map_err(|e| match e {
                Error::InvalidArgument(message) => Error::Parse { line: line_no, message },
                other => other,
            })?;
        }
        Ok(archive)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("dim={}\n", self.dim);
        if let Some(tag) = &self.model_tag {
            writeln!(out, "#model={tag}").expect("write to string");
        }
        for (id, rec) in &self.records {
            out.push_str(id);
            match rec {
                ArchiveRecord::Sentence(v) => {
                    out.push_str("\tsent\t");
                    push_floats(&mut out, v);
                }
                ArchiveRecord::Tokens(m) => {
                    out.push_str("\ttok\t");
                    for r in 0..m.rows {
                        if r > 0 {
                            out.push('|');
                        }
                        push_floats(&mut out, m.row(r));
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
