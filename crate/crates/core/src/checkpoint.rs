//! Versioned textual checkpoints shared by every model type.
//!
//! ```text
//! model <version> <N> <dims...>
//! kind <kind>
//! meta <key> <value>
//! block <name> <len>
//! <values, up to 16 per line>
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so a save/load cycle is
//! bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::textio::LineReader;

pub const CHECKPOINT_VERSION: u32 = 1;
const PER_LINE: usize = 16;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub kind: String,
    pub landmarks: usize,
    pub dims: Vec<usize>,
    pub meta: Vec<(String, String)>,
    pub blocks: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(kind: &str, landmarks: usize, dims: Vec<usize>) -> Self {
        Self {
            kind: kind.to_string(),
            landmarks,
            dims,
            ..Default::default()
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn with_block(mut self, name: &str, values: Vec<f64>) -> Self {
        self.blocks.push((name.to_string(), values));
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks meta `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta(key)?;
        v.parse()
            .map_err(|_| Error::invalid(format!("bad checkpoint meta `{key}` = `{v}`")))
    }

    /// Block by name, checked against an expected length.
    pub fn block(&self, name: &str, len: usize) -> Result<&[f64]> {
        let (_, values) = self
            .blocks
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks block `{name}`")))?;
        if values.len() != len {
            return Err(Error::SizeMismatch {
                expected: len,
                actual: values.len(),
            });
        }
        Ok(values)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "checkpoint holds a `{}` model, expected `{kind}`",
                self.kind
            )))
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "model {CHECKPOINT_VERSION} {}", self.landmarks);
        for d in &self.dims {
            let _ = write!(s, " {d}");
        }
        s.push('\n');
        let _ = writeln!(s, "kind {}", self.kind);
        for (k, v) in &self.meta {
            let _ = writeln!(s, "meta {k} {v}");
        }
        for (name, values) in &self.blocks {
            let _ = writeln!(s, "block {name} {}", values.len());
            for chunk in values.chunks(PER_LINE) {
                let mut first = true;
                for v in chunk {
                    if !first {
                        s.push(' ');
                    }
                    first = false;
                    let _ = write!(s, "{v}");
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = LineReader::new(text);
        let head = r.next_tokens()?;
        if head.len() < 3 || head[0] != "model" {
            return Err(r.error("expected `model <version> <N> <dims...>`"));
        }
        let version: u32 = r.parse_token(head[1])?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(format!("unsupported checkpoint version {version}")));
        }
        let landmarks = r.parse_token(head[2])?;
        let dims = head[3..]
            .iter()
            .map(|t| r.parse_token(t))
            .collect::<Result<Vec<usize>>>()?;
        let kind_line = r.next_tokens()?;
        if kind_line.len() != 2 || kind_line[0] != "kind" {
            return Err(r.error("expected `kind <name>`"));
        }
        let mut ck = Checkpoint::new(kind_line[1], landmarks, dims);
        while let Some(word) = r.peek_keyword() {
            let toks = r.next_tokens()?;
            match word {
                "meta" if toks.len() == 3 => ck.meta.push((toks[1].into(), toks[2].into())),
                "block" if toks.len() == 3 => {
                    let len: usize = r.parse_token(toks[2])?;
                    let mut values = Vec::with_capacity(len);
                    while values.len() < len {
                        for tok in r.next_tokens()? {
                            values.push(r.parse_token::<f64>(tok)?);
                        }
                    }
                    if values.len() != len {
                        return Err(r.error(format!("block `{}` overflows its length", toks[1])));
                    }
                    ck.blocks.push((toks[1].into(), values));
                }
                _ => return Err(r.error(format!("unexpected checkpoint line starting `{word}`"))),
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 0..70)) {
            let ck = Checkpoint::new("demo", 3, vec![8, 9])
                .with_meta("radius", 4)
                .with_block("w", values.clone())
                .with_block("b", vec![1.0, -0.0]);
            let back = Checkpoint::from_text(&ck.to_text()).unwrap();
            prop_assert_eq!(back.block("w", values.len()).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back.block("b", 2).unwrap()[1].to_bits(), (-0.0f64).to_bits());
            prop_assert_eq!(back.meta_parse::<usize>("radius").unwrap(), 4);
            prop_assert_eq!(back.dims, vec![8, 9]);
        }
    }

    #[test]
    fn header_is_versioned() {
        let text = Checkpoint::new("conv", 20, vec![64, 64]).to_text();
        assert!(text.starts_with("model 1 20 64 64\nkind conv\n"));
        assert!(Checkpoint::from_text("model 9 1\nkind x\n").is_err());
        assert!(Checkpoint::new("a", 1, vec![]).expect_kind("b").is_err());
    }
}
