//! Checkpoint and dataset-cache files.
//!
//! A file is a UTF-8 manifest followed by a raw payload:
//!
//! ```text
//! hcnaf-checkpoint 1
//! kind hcnaf
//! config flow.dim=2
//! tensor trunk.0.weight f64 1x8 offset=0 bytes=64
//! payload
//! <little-endian f64 values of every tensor, in manifest order>
//! ```
//!
//! Config values are echoed verbatim and must not contain newlines.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::CondAFConfig;
use crate::hypernet::{HyperNet, HyperNetConfig};
use crate::model::{AffineConfig, AffineModel, Dataset, Model};
use crate::tensor::Matrix;

pub const FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &str = "hcnaf-checkpoint";
pub const DATASET_MAGIC: &str = "hcnaf-dataset";

/// Named tensors plus a string-valued config echo.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub magic: String,
    pub kind: String,
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Matrix)>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Archive {
    pub fn config_value(&self, key: &str) -> Result<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| format_err(format!("missing config entry {key}")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.config_value(key)?
            .parse()
            .map_err(|_| format_err(format!("bad value for {key}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        writeln!(out, "{} {}", self.magic, FORMAT_VERSION)?;
        writeln!(out, "kind {}", self.kind)?;
        for (k, v) in &self.config {
            if k.contains(['=', '\n', ' ']) || v.contains('\n') {
                return Err(Error::Argument(format!("config entry {k} cannot be stored")));
            }
            writeln!(out, "config {k}={v}")?;
        }
        let mut offset = 0usize;
        for (name, m) in &self.tensors {
            if name.contains([' ', '\n']) || name.is_empty() {
                return Err(Error::Argument(format!("tensor name {name:?} cannot be stored")));
            }
            let bytes = m.len() * 8;
            writeln!(out, "tensor {name} f64 {}x{} offset={offset} bytes={bytes}", m.rows(), m.cols())?;
            offset += bytes;
        }
        writeln!(out, "payload")?;
        for (_, m) in &self.tensors {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], magic: &str) -> Result<Self> {
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| format_err("truncated manifest"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| format_err("manifest is not UTF-8"))
        };
        let header = next_line()?;
        if header != format!("{magic} {FORMAT_VERSION}") {
            return Err(format_err(format!("expected header '{magic} {FORMAT_VERSION}', found '{header}'")));
        }
        let kind = next_line()?
            .strip_prefix("kind ")
            .ok_or_else(|| format_err("missing kind line"))?
            .to_string();
        let mut config = Vec::new();
        let mut specs = Vec::new();
        loop {
            let line = next_line()?;
            if line == "payload" {
                break;
            }
            if let Some(kv) = line.strip_prefix("config ") {
                let (k, v) = kv.split_once('=').ok_or_else(|| format_err("config line without '='"))?;
                config.push((k.to_string(), v.to_string()));
            } else if let Some(t) = line.strip_prefix("tensor ") {
                specs.push(parse_tensor_line(t)?);
            } else {
                return Err(format_err(format!("unexpected manifest line '{line}'")));
            }
        }
        let payload = &bytes[pos..];
        let mut tensors = Vec::with_capacity(specs.len());
        let mut expected_offset = 0usize;
        for (name, rows, cols, offset, len) in specs {
            if offset != expected_offset || len != rows * cols * 8 {
                return Err(format_err(format!("inconsistent layout for tensor {name}")));
            }
            let chunk = payload
                .get(offset..offset + len)
                .ok_or_else(|| format_err(format!("payload too short for tensor {name}")))?;
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Matrix::new(rows, cols, data)?));
            expected_offset += len;
        }
        if payload.len() != expected_offset {
            return Err(format_err("trailing bytes after payload"));
        }
        Ok(Self {
            magic: magic.to_string(),
            kind,
            config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path, magic: &str) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, magic)
    }
}

fn parse_tensor_line(t: &str) -> Result<(String, usize, usize, usize, usize)> {
    let parts: Vec<&str> = t.split(' ').collect();
    let bad = || format_err(format!("malformed tensor line '{t}'"));
    if parts.len() != 5 || parts[1] != "f64" {
        return Err(bad());
    }
    let (r, c) = parts[2].split_once('x').ok_or_else(bad)?;
    let offset = parts[3].strip_prefix("offset=").ok_or_else(bad)?;
    let len = parts[4].strip_prefix("bytes=").ok_or_else(bad)?;
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    Ok((parts[0].to_string(), num(r)?, num(c)?, num(offset)?, num(len)?))
}

fn flow_entries(f: &CondAFConfig) -> Vec<(String, String)> {
    vec![
        ("flow.dim".into(), f.dim.to_string()),
        ("flow.hidden_layers".into(), f.hidden_layers.to_string()),
        ("flow.width_per_dim".into(), f.width_per_dim.to_string()),
        ("flow.activation".into(), "tanh".into()),
    ]
}

fn join(v: &[usize]) -> String {
    v.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
}

fn split(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|w| w.trim().parse().map_err(|_| format_err(format!("bad width list '{s}'"))))
        .collect()
}

impl Model {
    /// Model configuration as `key=value` pairs followed by `extra`.
    pub fn to_archive(&self, extra: &[(String, String)]) -> Archive {
        let mut config = match self {
            Model::Hcnaf(net) => {
                let h = net.config();
                let mut c = flow_entries(net.flow_config());
                c.extend([
                    ("hyper.cond_dim".into(), h.cond_dim.to_string()),
                    ("hyper.trunk_widths".into(), join(&h.trunk_widths)),
                    ("hyper.head_width_w".into(), h.head_width_w.to_string()),
                    ("hyper.head_width_b".into(), h.head_width_b.to_string()),
                    ("hyper.init_input_scale".into(), format!("{:?}", h.init_input_scale)),
                    ("hyper.init_bias_scale".into(), format!("{:?}", h.init_bias_scale)),
                ]);
                c
            }
            Model::Affine(m) => {
                let a = m.config();
                vec![
                    ("affine.dim".into(), a.dim.to_string()),
                    ("affine.cond_dim".into(), a.cond_dim.to_string()),
                    ("affine.hidden".into(), a.hidden.to_string()),
                ]
            }
        };
        config.extend(extra.iter().cloned());
        let names = crate::model::ConditionalModel::param_names(self);
        let params = crate::model::ConditionalModel::params(self);
        Archive {
            magic: CHECKPOINT_MAGIC.into(),
            kind: self.kind().into(),
            config,
            tensors: names.into_iter().zip(params.iter().map(|p| (**p).clone())).collect(),
        }
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let tensors: Vec<Matrix> = a.tensors.iter().map(|(_, m)| m.clone()).collect();
        let model = match a.kind.as_str() {
            "hcnaf" => {
                let flow = CondAFConfig::new(
                    a.parse("flow.dim")?,
                    a.parse("flow.hidden_layers")?,
                    a.parse("flow.width_per_dim")?,
                )?;
                let mut h = HyperNetConfig::new(
                    a.parse("hyper.cond_dim")?,
                    split(a.config_value("hyper.trunk_widths")?)?,
                    a.parse("hyper.head_width_w")?,
                    a.parse("hyper.head_width_b")?,
                );
                h.init_input_scale = a.parse("hyper.init_input_scale")?;
                h.init_bias_scale = a.parse("hyper.init_bias_scale")?;
                Model::Hcnaf(HyperNet::from_params(h, flow, tensors)?)
            }
            "affine" => {
                let cfg = AffineConfig {
                    dim: a.parse("affine.dim")?,
                    cond_dim: a.parse("affine.cond_dim")?,
                    hidden: a.parse("affine.hidden")?,
                };
                Model::Affine(AffineModel::from_params(cfg, tensors)?)
            }
            other => return Err(format_err(format!("unknown model kind '{other}'"))),
        };
        let expected = crate::model::ConditionalModel::param_names(&model);
        if a.tensors.iter().map(|(n, _)| n).ne(expected.iter()) {
            return Err(format_err("tensor names do not match the model configuration"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path, extra: &[(String, String)]) -> Result<()> {
        self.to_archive(extra).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path, CHECKPOINT_MAGIC)?)
    }
}

impl Dataset {
    pub fn to_archive(&self, config: Vec<(String, String)>) -> Archive {
        Archive {
            magic: DATASET_MAGIC.into(),
            kind: "dataset".into(),
            config,
            tensors: vec![("x".into(), self.x.clone()), ("c".into(), self.c.clone())],
        }
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        match a.tensors.as_slice() {
            [(xn, x), (cn, c)] if xn == "x" && cn == "c" => Dataset::new(x.clone(), c.clone()),
            _ => Err(format_err("dataset cache must hold tensors x and c")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConditionalModel;
    use std::sync::Arc;

    fn net() -> Model {
        let flow = CondAFConfig::new(2, 2, 3).unwrap();
        let mut h = HyperNetConfig::new(1, vec![4, 3], 5, 2);
        h.init_input_scale = 0.3;
        let mut n = HyperNet::new(h, flow, 7).unwrap();
        for (i, p) in ConditionalModel::params_mut(&mut n).iter_mut().enumerate() {
            Arc::make_mut(p).data_mut().iter_mut().enumerate().for_each(|(j, v)| *v += ((i * 31 + j) as f64).sin() * 0.1);
        }
        Model::Hcnaf(n)
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = net();
        m.save(&path, &[("seed".into(), "7".into())]).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back, m);
        let x = Matrix::new(2, 2, vec![0.1, -0.3, 1.2, 0.4]).unwrap();
        let c = Matrix::new(2, 1, vec![0.0, 2.0]).unwrap();
        let a = m.log_prob_batch(&x, &c).unwrap();
        let b = back.log_prob_batch(&x, &c).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let m2 = Model::Affine(AffineModel::new(AffineConfig { dim: 2, cond_dim: 1, hidden: 3 }, 1).unwrap());
        m2.save(&path, &[]).unwrap();
        assert_eq!(Model::load(&path).unwrap(), m2);
    }

    #[test]
    fn manifest_layout() {
        let bytes = net().to_archive(&[]).to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("hcnaf-checkpoint 1"));
        assert_eq!(lines.next(), Some("kind hcnaf"));
        assert!(text.contains("tensor trunk.0.weight f64 1x4 offset=0 bytes=32\n"));
        assert!(text.contains("tensor trunk.0.bias f64 1x4 offset=32 bytes=32\n"));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = net().to_archive(&[]).to_bytes().unwrap();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1], CHECKPOINT_MAGIC).is_err());
        assert!(Archive::from_bytes(&bytes, DATASET_MAGIC).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Archive::from_bytes(&extra, CHECKPOINT_MAGIC).is_err());
        assert!(Archive::from_bytes(b"hcnaf-checkpoint 2\n", CHECKPOINT_MAGIC).is_err());
    }

    #[test]
    fn dataset_cache_roundtrip() {
        let d = Dataset::new(Matrix::new(2, 1, vec![1.5, -2.0]).unwrap(), Matrix::new(2, 1, vec![0.0, 1.0]).unwrap()).unwrap();
        let a = d.to_archive(vec![("source".into(), "test".into())]);
        let back = Archive::from_bytes(&a.to_bytes().unwrap(), DATASET_MAGIC).unwrap();
        assert_eq!(Dataset::from_archive(&back).unwrap(), d);
    }
}
