//! Tensor container: a text manifest followed by a little-endian `f64`
//! payload.
//!
//! ```text
//! TDCK 1
//! meta <key> <value>
//! tensor <name> f64 <d0>x<d1>... <byte offset>
//! end
//! <raw payload>
//! ```
//!
//! Offsets are relative to the first payload byte. Scalars use the shape
//! `-`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::model::{ModelConfig, ModelParams};

const MAGIC: &str = "TDCK 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn fmt_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".into()
    } else {
        shape
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("x")
    }
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split('x')
        .map(|d| {
            d.parse()
                .map_err(|_| Error::Data(format!("bad dimension {d:?} in shape {s:?}")))
        })
        .collect()
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("{MAGIC}\n");
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::InvalidArgument(format!("unencodable meta entry {k:?}")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if name.contains(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("tensor name {name:?} has whitespace")));
            }
            header.push_str(&format!("tensor {name} f64 {} {offset}\n", fmt_shape(t.shape())));
            offset += t.len() * 8;
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Data("truncated manifest".into()))?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl]).map_err(|_| Error::Data("manifest is not UTF-8".into()))
        };
        if next_line()? != MAGIC {
            return Err(Error::Data("not a tensor container (bad magic line)".into()));
        }
        let mut meta = BTreeMap::new();
        let mut entries = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let mut parts = line.splitn(3, ' ');
            match parts.next() {
                Some("meta") => {
                    let k = parts.next().unwrap_or_default().to_string();
                    let v = parts.next().unwrap_or_default().to_string();
                    meta.insert(k, v);
                }
                Some("tensor") => {
                    let fields: Vec<&str> = line.split(' ').collect();
                    if fields.len() != 5 || fields[2] != "f64" {
                        return Err(Error::Data(format!("bad tensor line {line:?}")));
                    }
                    let shape = parse_shape(fields[3])?;
                    let offset: usize = fields[4]
                        .parse()
                        .map_err(|_| Error::Data(format!("bad offset in {line:?}")))?;
                    entries.push((fields[1].to_string(), shape, offset));
                }
                _ => return Err(Error::Data(format!("unknown manifest line {line:?}"))),
            }
        }
        let payload = &bytes[pos..];
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, shape, offset) in entries {
            let n: usize = shape.iter().product();
            let end = offset + n * 8;
            if end > payload.len() {
                return Err(Error::Data(format!("tensor {name} runs past end of payload")));
            }
            let data = payload[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Data(format!("missing meta key {key}")))?;
        v.parse()
            .map_err(|_| Error::Data(format!("bad value {v:?} for meta key {key}")))
    }
}

impl ModelParams {
    pub fn to_container(&self) -> Container {
        let c = &self.config;
        let meta = [
            ("kind", "model".to_string()),
            ("layers", c.layers.to_string()),
            ("dim", c.dim.to_string()),
            ("heads", c.heads.to_string()),
            ("n_max", c.n_max.to_string()),
            ("vocab_size", c.vocab_size.to_string()),
            ("tied", c.tied.to_string()),
            ("mlp_ratio", c.mlp_ratio.to_string()),
            ("bos_id", c.bos_id.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let tensors = self
            .names()
            .iter()
            .cloned()
            .zip(self.tensors().iter().cloned())
            .collect();
        Container { meta, tensors }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let config = ModelConfig {
            layers: c.meta_parse("layers")?,
            dim: c.meta_parse("dim")?,
            heads: c.meta_parse("heads")?,
            n_max: c.meta_parse("n_max")?,
            vocab_size: c.meta_parse("vocab_size")?,
            tied: c.meta_parse("tied")?,
            mlp_ratio: c.meta_parse("mlp_ratio")?,
            bos_id: c.meta_parse("bos_id")?,
        };
        ModelParams::from_named(config, c.tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    #[test]
    fn model_round_trip_is_exact() {
        let cfg = ModelConfig {
            layers: 1,
            dim: 4,
            heads: 1,
            n_max: 4,
            vocab_size: 9,
            ..ModelConfig::default()
        };
        let p = ModelParams::init(cfg, SeedStream::new(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        p.save(&path).unwrap();
        assert_eq!(ModelParams::load(&path).unwrap(), p);
    }

    #[test]
    fn scalar_and_meta_survive() {
        let mut c = Container::default();
        c.meta.insert("sigma".into(), "0.25".into());
        c.tensors.push(("s".into(), Tensor::scalar(1.5)));
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Container::from_bytes(b"nope\nend\n").is_err());
        let mut c = Container::default();
        c.tensors.push(("v".into(), Tensor::vector(vec![1.0, 2.0])));
        let bytes = c.to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
