//! Checkpoint container.
//!
//! ```text
//! dynsparse-checkpoint 1
//! meta <one-line JSON>
//! tensor <name> <dtype> <d0,d1,...>
//! ...
//! end
//! <little-endian payloads, in header order>
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{cast, DType, Float, Tensor};

const MAGIC: &str = "dynsparse-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    /// Free-form metadata, stored as a single JSON line.
    pub meta: serde_json::Value,
    pub tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Float> Checkpoint<T> {
    pub fn new(meta: serde_json::Value, tensors: IndexMap<String, Tensor<T>>) -> Self {
        Self { meta, tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut head = format!("{MAGIC}\nmeta {}\n", serde_json::to_string(&self.meta)?);
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::invalid("checkpoint", format!("bad tensor name `{name}`")));
            }
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            head.push_str(&format!("tensor {name} {} {}\n", T::DTYPE.name(), dims.join(",")));
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for t in self.tensors.values() {
            for &v in t.data() {
                match T::DTYPE {
                    DType::F32 => out.extend_from_slice(&v.to_f32().expect("f32").to_le_bytes()),
                    DType::F64 => out.extend_from_slice(&v.to_f64().expect("f64").to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: String| Error::CorruptCheckpoint(m);
        let mut pos = 0;
        let mut line = || -> Result<&str> {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| corrupt("header is not terminated".into()))?;
            let s = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| corrupt("header is not UTF-8".into()))?;
            pos += end + 1;
            Ok(s)
        };
        if line()? != MAGIC {
            return Err(corrupt("missing magic line".into()));
        }
        let meta = line()?
            .strip_prefix("meta ")
            .ok_or_else(|| corrupt("missing meta line".into()))
            .and_then(|m| serde_json::from_str(m).map_err(|e| corrupt(format!("meta: {e}"))))?;
        let mut specs = Vec::new();
        loop {
            let l = line()?;
            if l == "end" {
                break;
            }
            let parts: Vec<&str> = l.split(' ').collect();
            if parts.len() != 4 || parts[0] != "tensor" {
                return Err(corrupt(format!("bad header line `{l}`")));
            }
            let dtype = DType::parse(parts[2]).ok_or_else(|| corrupt(format!("unknown dtype {}", parts[2])))?;
            if dtype != T::DTYPE {
                return Err(corrupt(format!(
                    "tensor {} is {}, expected {}",
                    parts[1],
                    dtype.name(),
                    T::DTYPE.name()
                )));
            }
            let shape = parts[3]
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| corrupt(format!("bad shape `{}`", parts[3])))?;
            specs.push((parts[1].to_string(), shape));
        }
        let size = T::DTYPE.size_of();
        let mut tensors = IndexMap::new();
        for (name, shape) in specs {
            let n: usize = shape.iter().product();
            let need = n * size;
            if bytes.len() < pos + need {
                return Err(corrupt(format!("payload truncated in tensor {name}")));
            }
            let data = bytes[pos..pos + need]
                .chunks_exact(size)
                .map(|c| match T::DTYPE {
                    DType::F32 => cast(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
                    DType::F64 => cast(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
                })
                .collect();
            pos += need;
            if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(corrupt(format!("duplicate tensor {name}")));
            }
        }
        if pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
