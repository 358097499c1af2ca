//! Versioned checkpoint container.
//!
//! Layout:
//!
//! ```text
//! CDNZ1\n
//! meta <key> <escaped value>\n        (sorted by key)
//! tensor <name> <d0>x<d1>x... <byte offset>\n
//! end\n
//! <payload: little-endian f32 values, tensors back to back>
//! ```
//!
//! Offsets are relative to the first payload byte. Metadata values escape `\`,
//! newline and carriage return as `\\`, `\n`, `\r`. Encoding is canonical, so
//! decoding and re-encoding reproduces the input bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::param::ParamStore;
use crate::{Error, Result, Scalar, Tensor};

pub const MAGIC: &[u8] = b"CDNZ1\n";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<Entry>,
}

fn escape(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    for ch in v.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(v: &str) -> Option<String> {
    let mut out = String::with_capacity(v.len());
    let mut chars = v.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next()? {
            '\\' => out.push('\\'),
            'n' => out.push('\n'),
            'r' => out.push('\r'),
            _ => return None,
        }
    }
    Some(out)
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace())
}

fn bad(offset: usize, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("byte {offset}: {msg}"))
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key:?}")))
    }

    pub fn parse_meta<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.require_meta(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("metadata {key}={raw:?} does not parse")))
    }

    pub fn push<T: Scalar>(&mut self, name: &str, value: &Tensor<T>) {
        self.entries.push(Entry {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            data: value.data().iter().map(|v| v.to_f64_lossy() as f32).collect(),
        });
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Appends every parameter followed by every buffer of `store`.
    pub fn push_store<T: Scalar>(&mut self, store: &ParamStore<T>) {
        for p in store.params() {
            self.push(&p.name, &p.value);
        }
        for b in store.buffers() {
            self.push(&b.name, &b.value);
        }
    }

    /// Overwrites every parameter and buffer of `store` by name. The checkpoint
    /// must contain exactly the store's names with matching shapes.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let expected = store.params().len() + store.buffers().len();
        if self.entries.len() != expected {
            return Err(Error::Incompatible(format!(
                "checkpoint holds {} tensors, network expects {expected}",
                self.entries.len()
            )));
        }
        for e in &self.entries {
            let value = Tensor::new(
                e.shape.clone(),
                e.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
            )?;
            let slot = if let Some(p) = store.find_mut(&e.name) {
                &mut p.value
            } else if let Some(b) = store.find_buffer_mut(&e.name) {
                &mut b.value
            } else {
                return Err(Error::Incompatible(format!("unexpected tensor {:?}", e.name)));
            };
            if slot.shape() != value.shape() {
                return Err(Error::Incompatible(format!(
                    "tensor {:?}: checkpoint shape {:?}, network shape {:?}",
                    e.name,
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        for (k, v) in &self.meta {
            if !valid_token(k) {
                return Err(Error::Checkpoint(format!("invalid metadata key {k:?}")));
            }
            header.push_str(&format!("meta {k} {}\n", escape(v)));
        }
        let mut offset = 0usize;
        for e in &self.entries {
            if !valid_token(&e.name) {
                return Err(Error::Checkpoint(format!("invalid tensor name {:?}", e.name)));
            }
            let count: usize = e.shape.iter().product();
            if count != e.data.len() || e.shape.is_empty() {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?}: shape {:?} does not match {} values",
                    e.name,
                    e.shape,
                    e.data.len()
                )));
            }
            let dims: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            header.push_str(&format!("tensor {} {} {offset}\n", e.name, dims.join("x")));
            offset += 4 * count;
        }
        header.push_str("end\n");
        let mut out = Vec::with_capacity(MAGIC.len() + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(header.as_bytes());
        for e in &self.entries {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if !bytes.starts_with(MAGIC) {
            return Err(bad(0, "missing CDNZ1 magic"));
        }
        let mut pos = MAGIC.len();
        let mut meta = BTreeMap::new();
        let mut specs: Vec<(String, Vec<usize>, usize)> = Vec::new();
        loop {
            let rel = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad(pos, "unterminated header line"))?;
            let line = std::str::from_utf8(&bytes[pos..pos + rel]).map_err(|_| bad(pos, "header is not UTF-8"))?;
            let line_start = pos;
            pos += rel + 1;
            if line == "end" {
                break;
            }
            let (kind, rest) = line
                .split_once(' ')
                .ok_or_else(|| bad(line_start, format!("malformed header line {line:?}")))?;
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    let v = unescape(v).ok_or_else(|| bad(line_start, "bad escape in metadata"))?;
                    if meta.insert(k.to_string(), v).is_some() {
                        return Err(bad(line_start, format!("duplicate metadata key {k:?}")));
                    }
                }
                "tensor" => {
                    let parts: Vec<&str> = rest.split(' ').collect();
                    let [name, dims, off] = parts[..] else {
                        return Err(bad(line_start, format!("malformed tensor line {line:?}")));
                    };
                    let shape = dims
                        .split('x')
                        .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| bad(line_start, format!("bad shape {dims:?}")))?;
                    let off = off
                        .parse::<usize>()
                        .map_err(|_| bad(line_start, format!("bad offset {off:?}")))?;
                    specs.push((name.to_string(), shape, off));
                }
                other => return Err(bad(line_start, format!("unknown header record {other:?}"))),
            }
        }
        let payload = &bytes[pos..];
        let mut expected_off = 0usize;
        let mut entries = Vec::with_capacity(specs.len());
        for (name, shape, off) in specs {
            if off != expected_off {
                return Err(bad(
                    pos + off.min(payload.len()),
                    format!("tensor {name:?} at offset {off}, expected {expected_off}"),
                ));
            }
            let count: usize = shape.iter().product();
            let end = off + 4 * count;
            if end > payload.len() {
                return Err(bad(
                    pos + payload.len(),
                    format!("payload truncated inside tensor {name:?}"),
                ));
            }
            let data = payload[off..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(Entry { name, shape, data });
            expected_off = end;
        }
        if expected_off != payload.len() {
            return Err(bad(pos + expected_off, "trailing bytes after payload"));
        }
        Ok(Checkpoint { meta, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set_meta("sigma", 25.0);
        c.set_meta("config", "a = 1\nb = \"x\\y\"\n");
        c.entries.push(Entry {
            name: "w".into(),
            shape: vec![2, 3],
            data: vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0],
        });
        c.entries.push(Entry {
            name: "b".into(),
            shape: vec![1],
            data: vec![7.0],
        });
        c
    }

    #[test]
    fn header_layout() {
        let bytes = sample().encode().unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.starts_with("CDNZ1\nmeta config a = 1\\nb = \"x\\\\y\"\\n\nmeta sigma 25\n"));
        assert!(text.contains("tensor w 2x3 0\ntensor b 1 24\nend\n"));
    }

    #[test]
    fn decode_rejects_truncation_and_garbage() {
        let bytes = sample().encode().unwrap();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
        assert!(Checkpoint::decode(b"CDNZ2\nend\n").is_err());
        let err = Checkpoint::decode(b"CDNZ1\nbogus line\nend\n").unwrap_err();
        assert!(err.to_string().contains("byte 6"), "{err}");
    }

    proptest! {
        #[test]
        fn bytes_round_trip(
            values in proptest::collection::vec(any::<u32>(), 1..40),
            note in "[ -~\n\\\\]{0,30}",
        ) {
            let mut c = Checkpoint::new();
            c.set_meta("note", &note);
            c.entries.push(Entry {
                name: "t".into(),
                shape: vec![values.len()],
                data: values.iter().map(|&b| f32::from_bits(b)).collect(),
            });
            let bytes = c.encode().unwrap();
            let back = Checkpoint::decode(&bytes).unwrap();
            prop_assert_eq!(back.encode().unwrap(), bytes);
            prop_assert_eq!(back.meta("note"), Some(note.as_str()));
        }
    }
}
