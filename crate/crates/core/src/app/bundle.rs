//! Binary model bundle.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SQTWBNDL"
//! version    u32
//! meta_len   u64, then meta_len bytes of UTF-8 JSON
//! n_arrays   u32, then per array:
//!   name_len u32, name (UTF-8 JSON pointer into the metadata)
//!   dtype    u8   (1 = f64)
//!   ndim     u32, then ndim × u64 dims
//!   byte_len u64, then the payload
//! digest     32 bytes, SHA-256 of every preceding byte
//! ```
//!
//! Every tensor in the model structure is lifted out of the JSON into the
//! array section and replaced by `{"$array": index}`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::cohort::CohortRecord;
use crate::error::{Error, Result};
use crate::explain::BaselinePatient;
use crate::neighbors::CohortIndex;
use crate::policy::{PolicyFitReport, PolicyModel};
use crate::simulator::Simulator;
use crate::symptoms::SymptomModel;

use super::pipeline::PipelineConfig;

pub const BUNDLE_MAGIC: &[u8; 8] = b"SQTWBNDL";
pub const BUNDLE_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleInfo {
    pub seed: u64,
    pub cohort_source: String,
    pub train_size: usize,
    pub eval_size: usize,
    pub symptom_cohort_size: usize,
    pub crate_version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelBundle {
    pub info: BundleInfo,
    pub config: PipelineConfig,
    pub simulator: Simulator,
    pub policy: PolicyModel,
    pub policy_report: PolicyFitReport,
    pub baseline: BaselinePatient,
    /// Training records, in the order of the policy's cohort memory.
    pub cohort: Vec<CohortRecord>,
    pub index: CohortIndex,
    pub symptoms: SymptomModel,
}

impl ModelBundle {
    fn reindex(&mut self) -> Result<()> {
        self.simulator.post_ic.store.reindex()?;
        self.simulator.post_cc.store.reindex()?;
        self.simulator.static_outcome.store.reindex()?;
        self.simulator.survival.store.reindex()?;
        self.policy.store.reindex()?;
        self.symptoms.net.store.reindex()?;
        Ok(())
    }
}

struct Array {
    name: String,
    shape: Vec<u64>,
    data: Vec<f64>,
}

fn is_tensor(m: &Map<String, Value>) -> bool {
    m.len() == 2
        && matches!(m.get("shape"), Some(Value::Array(s)) if s.iter().all(|v| v.is_u64()))
        && matches!(m.get("data"), Some(Value::Array(_)))
}

fn escape(seg: &str) -> String {
    seg.replace('~', "~0").replace('/', "~1")
}

fn lift(v: &mut Value, path: &mut String, out: &mut Vec<Array>) -> Result<()> {
    match v {
        Value::Object(m) if is_tensor(m) => {
            let shape = m["shape"].as_array().unwrap().iter().map(|s| s.as_u64().unwrap()).collect();
            let data = m["data"]
                .as_array()
                .unwrap()
                .iter()
                .map(|x| {
                    x.as_f64()
                        .ok_or_else(|| Error::BundleFormat(format!("non-numeric tensor entry at {path}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            out.push(Array {
                name: path.clone(),
                shape,
                data,
            });
            *v = json!({ "$array": out.len() - 1 });
        }
        Value::Object(m) => {
            for (k, child) in m.iter_mut() {
                let len = path.len();
                path.push('/');
                path.push_str(&escape(k));
                lift(child, path, out)?;
                path.truncate(len);
            }
        }
        Value::Array(items) => {
            for (i, child) in items.iter_mut().enumerate() {
                let len = path.len();
                path.push('/');
                path.push_str(&i.to_string());
                lift(child, path, out)?;
                path.truncate(len);
            }
        }
        _ => {}
    }
    Ok(())
}

/// Serialized bytes, digest included.
pub fn bundle_bytes(bundle: &ModelBundle) -> Result<Vec<u8>> {
    let mut meta = serde_json::to_value(bundle)?;
    let mut arrays = Vec::new();
    lift(&mut meta, &mut String::new(), &mut arrays)?;
    let meta = serde_json::to_vec(&meta)?;

    let mut out = Vec::with_capacity(meta.len() + 8 * arrays.iter().map(|a| a.data.len()).sum::<usize>() + 64);
    out.extend_from_slice(BUNDLE_MAGIC);
    out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in &arrays {
        out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
        for d in &a.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&((a.data.len() * 8) as u64).to_le_bytes());
        for x in &a.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Hex SHA-256 of the serialized bundle.
pub fn bundle_digest(bundle: &ModelBundle) -> Result<String> {
    let bytes = bundle_bytes(bundle)?;
    Ok(hex::encode(&bytes[bytes.len() - 32..]))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::BundleFormat(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::BundleFormat(format!("{what} too large")))
    }
}

fn lower(v: &mut Value, arrays: &mut [Option<Value>]) -> Result<()> {
    match v {
        Value::Object(m) if m.len() == 1 && m.contains_key("$array") => {
            let i = m["$array"]
                .as_u64()
                .ok_or_else(|| Error::BundleFormat("bad array reference".into()))? as usize;
            *v = arrays
                .get_mut(i)
                .and_then(Option::take)
                .ok_or_else(|| Error::BundleFormat(format!("array {i} missing or used twice")))?;
        }
        Value::Object(m) => {
            for child in m.values_mut() {
                lower(child, arrays)?;
            }
        }
        Value::Array(items) => {
            for child in items {
                lower(child, arrays)?;
            }
        }
        _ => {}
    }
    Ok(())
}

/// Parse bytes produced by [`bundle_bytes`]. Returns the bundle and its digest.
pub fn bundle_from_bytes(bytes: &[u8]) -> Result<(ModelBundle, String)> {
    if bytes.len() < BUNDLE_MAGIC.len() + 4 + 32 || &bytes[..8] != BUNDLE_MAGIC {
        return Err(Error::BundleFormat("not a model bundle (bad magic)".into()));
    }
    let (body, stored) = bytes.split_at(bytes.len() - 32);
    let computed = Sha256::digest(body);
    if computed.as_slice() != stored {
        return Err(Error::BundleDigest {
            stored: hex::encode(stored),
            computed: hex::encode(computed),
        });
    }
    let mut c = Cursor { buf: body, pos: 8 };
    let version = c.u32("version")?;
    if version != BUNDLE_VERSION {
        return Err(Error::BundleVersion {
            found: version,
            expected: BUNDLE_VERSION,
        });
    }
    let meta_len = c.len("metadata length")?;
    let mut meta: Value = serde_json::from_slice(c.take(meta_len, "metadata")?)?;
    let n = c.u32("array count")? as usize;
    let mut arrays = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = c.u32("array name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "array name")?)
            .map_err(|_| Error::BundleFormat("array name is not UTF-8".into()))?
            .to_string();
        let dtype = c.take(1, "dtype")?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::BundleFormat(format!("array {name}: unknown dtype {dtype}")));
        }
        let ndim = c.u32("ndim")? as usize;
        let shape = (0..ndim).map(|_| c.u64("dim")).collect::<Result<Vec<u64>>>()?;
        let byte_len = c.len("payload length")?;
        let expected: u64 = shape.iter().product::<u64>() * 8;
        if byte_len as u64 != expected {
            return Err(Error::BundleFormat(format!(
                "array {name}: payload of {byte_len} bytes does not match shape {shape:?}"
            )));
        }
        let data: Vec<Value> = c
            .take(byte_len, "payload")?
            .chunks_exact(8)
            .map(|b| {
                let x = f64::from_le_bytes(b.try_into().unwrap());
                serde_json::Number::from_f64(x)
                    .map(Value::Number)
                    .ok_or_else(|| Error::BundleFormat(format!("array {name}: non-finite value")))
            })
            .collect::<Result<_>>()?;
        arrays.push(Some(json!({ "shape": shape, "data": data })));
    }
    if c.pos != body.len() {
        return Err(Error::BundleFormat("trailing bytes after the array section".into()));
    }
    lower(&mut meta, &mut arrays)?;
    let mut bundle: ModelBundle = serde_json::from_value(meta)?;
    bundle.reindex()?;
    Ok((bundle, hex::encode(stored)))
}

/// Write the bundle; returns its digest.
pub fn save_bundle(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = bundle_bytes(bundle)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(&bytes[bytes.len() - 32..]))
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<(ModelBundle, String)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    bundle_from_bytes(&bytes)
}
