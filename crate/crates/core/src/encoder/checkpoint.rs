//! Decimal-text checkpoint of an encoder, its head and vocabulary.
//!
//! ```text
//! discourse-checkpoint v1
//! encoder vocab_size=V d_model=D layers=L heads=H ffn_dim=F max_len=M dropout=P final_norm=B seed=S
//! head input_dim=D hidden=N activation=relu|identity dropout=P
//! labels <label> <label> ...
//! vocab <count> min_frequency=<m>
//! <one token per line, in id order>
//! tensor <name> <rows> <cols>
//! <rows*cols floats separated by spaces>
//! ...                                  (encoder tensors, then head tensors)
//! end
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so save → load is exact.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::head::{Activation, ClassifierHead};
use super::model::{Encoder, EncoderConfig};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

const MAGIC: &str = "discourse-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: Encoder,
    pub head: ClassifierHead,
    pub vocab: Vocabulary,
}

fn kv(line: &str, prefix: &str, line_no: usize) -> Result<HashMap<String, String>> {
    let rest = line.strip_prefix(prefix).ok_or_else(|| Error::Parse {
        line: line_no,
        message: format!("expected `{prefix}` line"),
    })?;
    rest.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Parse {
                    line: line_no,
                    message: format!("bad key=value `{kv}`"),
                })
        })
        .collect()
}

fn get<T: std::str::FromStr>(map: &HashMap<String, String>, key: &str, line_no: usize) -> Result<T> {
    map.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Parse {
            line: line_no,
            message: format!("missing or invalid `{key}`"),
        })
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let c = &self.encoder.config;
        let h = &self.head;
        let mut out = String::new();
        writeln!(out, "{MAGIC}").unwrap();
        writeln!(
            out,
            "encoder vocab_size={} d_model={} layers={} heads={} ffn_dim={} max_len={} dropout={} final_norm={} seed={}",
            c.vocab_size, c.d_model, c.layers, c.heads, c.ffn_dim, c.max_len, c.dropout, c.final_norm, c.seed
        )
        .unwrap();
        let act = match h.activation {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        };
        writeln!(
            out,
            "head input_dim={} hidden={} activation={act} dropout={}",
            h.input_dim, h.hidden, h.dropout
        )
        .unwrap();
        writeln!(out, "labels {}", h.labels.join(" ")).unwrap();
        writeln!(out, "vocab {} min_frequency={}", self.vocab.len(), self.vocab.min_frequency()).unwrap();
        for t in self.vocab.tokens() {
            writeln!(out, "{t}").unwrap();
        }
        let names = self.encoder.params.names().into_iter().chain(h.names());
        let tensors = self.encoder.params.tensors().into_iter().chain(h.tensors());
        for (name, t) in names.zip(tensors) {
            writeln!(out, "tensor {name} {} {}", t.rows, t.cols).unwrap();
            for (i, x) in t.data.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                write!(out, "{x}").unwrap();
            }
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let line = |i: usize| -> Result<&str> {
            lines.get(i).copied().ok_or(Error::Parse {
                line: i + 1,
                message: "unexpected end of checkpoint".into(),
            })
        };
        if line(0)? != MAGIC {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected `{MAGIC}`"),
            });
        }
        let e = kv(line(1)?, "encoder ", 2)?;
        let config = EncoderConfig {
            vocab_size: get(&e, "vocab_size", 2)?,
            d_model: get(&e, "d_model", 2)?,
            layers: get(&e, "layers", 2)?,
            heads: get(&e, "heads", 2)?,
            ffn_dim: get(&e, "ffn_dim", 2)?,
            max_len: get(&e, "max_len", 2)?,
            dropout: get(&e, "dropout", 2)?,
            final_norm: get(&e, "final_norm", 2)?,
            seed: get(&e, "seed", 2)?,
        };
        let h = kv(line(2)?, "head ", 3)?;
        let labels: Vec<String> = line(3)?
            .strip_prefix("labels ")
            .ok_or(Error::Parse {
                line: 4,
                message: "expected `labels` line".into(),
            })?
            .split_whitespace()
            .map(String::from)
            .collect();
        let mut head = ClassifierHead::new(get(&h, "input_dim", 3)?, get(&h, "hidden", 3)?, labels, 0)?;
        head.dropout = get(&h, "dropout", 3)?;
        head.activation = match h.get("activation").map(String::as_str) {
            Some("relu") => Activation::Relu,
            Some("identity") => Activation::Identity,
            _ => {
                return Err(Error::Parse {
                    line: 3,
                    message: "unknown activation".into(),
                })
            }
        };

        let vocab_line = line(4)?;
        let mut parts = vocab_line.split_whitespace();
        let count: usize = match (parts.next(), parts.next().and_then(|c| c.parse().ok())) {
            (Some("vocab"), Some(c)) => c,
            _ => {
                return Err(Error::Parse {
                    line: 5,
                    message: "expected `vocab <count>`".into(),
                })
            }
        };
        let min_frequency = parts
            .next()
            .and_then(|p| p.strip_prefix("min_frequency="))
            .and_then(|m| m.parse().ok())
            .unwrap_or(1);
        let tokens = (0..count).map(|i| line(5 + i).map(String::from)).collect::<Result<Vec<_>>>()?;
        let vocab = Vocabulary::from_tokens(tokens, min_frequency)?;
        if vocab.len() != config.vocab_size {
            return Err(Error::DimensionMismatch {
                context: "checkpoint vocabulary".into(),
                expected: config.vocab_size,
                found: vocab.len(),
            });
        }

        let mut encoder = Encoder::new(config)?;
        let mut cursor = 5 + count;
        let enc_names = encoder.params.names();
        let head_names = head.names();
        let mut targets: Vec<_> = encoder.params.tensors_mut();
        targets.extend(head.tensors_mut());
        for (name, t) in enc_names.iter().chain(&head_names).zip(targets) {
            let header = line(cursor)?;
            let expected = format!("tensor {name} {} {}", t.rows, t.cols);
            if header != expected {
                return Err(Error::Parse {
                    line: cursor + 1,
                    message: format!("expected `{expected}`, found `{header}`"),
                });
            }
            let values: Vec<f64> = line(cursor + 1)?
                .split_whitespace()
                .map(|x| {
                    x.parse().map_err(|_| Error::Parse {
                        line: cursor + 2,
                        message: format!("bad float `{x}`"),
                    })
                })
                .collect::<Result<_>>()?;
            if values.len() != t.len() {
                return Err(Error::DimensionMismatch {
                    context: format!("checkpoint tensor {name}"),
                    expected: t.len(),
                    found: values.len(),
                });
            }
            t.data = values;
            cursor += 2;
        }
        if line(cursor)? != "end" {
            return Err(Error::Parse {
                line: cursor + 1,
                message: "expected `end`".into(),
            });
        }
        Ok(Self { encoder, head, vocab })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
