//! On-disk formats.
//!
//! Feature file (`PIDF`), little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `PIDF` |
//! | 4     | version `u32` = 1 |
//! | 1     | dtype `u8` = 1 (`f64`) |
//! | 8     | rows `u64` |
//! | 8     | cols `u64` |
//! | 8·rows·cols | row-major `f64` payload |
//!
//! Checkpoint (`PIDM`): magic, version `u32` = 1, then `n_in`, `n_feat`, `r`,
//! `C` as `u64`, then projector weight, projector bias, `W`, head weight and
//! head bias, each as `rows u64, cols u64, payload`. Biases are stored as
//! single-row matrices.
//!
//! A dataset directory holds `manifest.jsonl` (one `{bag_id, label, path, m}`
//! per bag, `path` relative to the directory), optional `roles.jsonl`
//! (`{bag_id, roles}` per bag) and `prototypes.pidf`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metric::MetricMatrix;
use crate::model::ModelParams;
use crate::pid::{PrototypeSet, PrototypeSource};
use crate::synth::{Bag, Role};

pub const FEATURE_MAGIC: &[u8; 4] = b"PIDF";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PIDM";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const ROLES_FILE: &str = "roles.jsonl";
pub const PROTOTYPES_FILE: &str = "prototypes.pidf";
pub const BAGS_DIR: &str = "bags";

fn put_matrix_body(out: &mut Vec<u8>, m: &Matrix) {
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Sequential little-endian reader over a byte slice.
struct Cursor<'a> {
    bytes: &'a [u8],
    what: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Format(format!("{}: truncated", self.what)));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn dim(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format(format!("{}: dimension overflow", self.what)))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::Format(format!(
                "{}: bad magic, expected {}",
                self.what,
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("{}: unsupported version {version}", self.what)));
        }
        Ok(())
    }

    fn matrix_body(&mut self) -> Result<Matrix> {
        let rows = self.dim()?;
        let cols = self.dim()?;
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format(format!("{}: size overflow", self.what)))?;
        let payload = self.take(len)?;
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Matrix::new(rows, cols, values).map_err(|e| Error::Format(format!("{}: {e}", self.what)))
    }

    fn finish(&self) -> Result<()> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(Error::Format(format!("{}: {} trailing bytes", self.what, self.bytes.len())))
        }
    }
}

pub fn encode_features(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(25 + 8 * m.values().len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(DTYPE_F64);
    put_matrix_body(&mut out, m);
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<Matrix> {
    let mut c = Cursor {
        bytes,
        what: "feature file",
    };
    c.header(FEATURE_MAGIC)?;
    let dtype = c.u8()?;
    if dtype != DTYPE_F64 {
        return Err(Error::Format(format!("feature file: unsupported dtype {dtype}")));
    }
    let m = c.matrix_body()?;
    c.finish()?;
    Ok(m)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?
        .read_to_end(&mut buf)?;
    Ok(buf)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn write_features(path: &Path, m: &Matrix) -> Result<()> {
    write_bytes(path, &encode_features(m))
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    decode_features(&read_bytes(path)?)
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in [params.n_in(), params.n_feat(), params.rank(), params.classes()] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    let row = |v: &[f64]| Matrix::new(1, v.len(), v.to_vec()).expect("finite parameters");
    put_matrix_body(&mut out, &params.proj_weight);
    put_matrix_body(&mut out, &row(&params.proj_bias));
    put_matrix_body(&mut out, params.metric.weights());
    put_matrix_body(&mut out, &params.head_weight);
    put_matrix_body(&mut out, &row(&params.head_bias));
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut c = Cursor {
        bytes,
        what: "checkpoint",
    };
    c.header(CHECKPOINT_MAGIC)?;
    let (n_in, n_feat, r, classes) = (c.dim()?, c.dim()?, c.dim()?, c.dim()?);
    let mut expect = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
        let m = c.matrix_body()?;
        if (m.rows(), m.cols()) != (rows, cols) {
            return Err(Error::Format(format!(
                "checkpoint: {name} is {}×{}, header implies {rows}×{cols}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(m)
    };
    let proj_weight = expect("projector.weight", n_feat, n_in)?;
    let proj_bias = expect("projector.bias", 1, n_feat)?.into_values();
    let w = expect("metric.W", r, n_feat)?;
    let head_weight = expect("head.weight", classes, n_feat)?;
    let head_bias = expect("head.bias", 1, classes)?.into_values();
    c.finish()?;
    Ok(ModelParams {
        proj_weight,
        proj_bias,
        metric: MetricMatrix::new(w).map_err(|e| Error::Format(format!("checkpoint: {e}")))?,
        head_weight,
        head_bias,
    })
}

pub fn write_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    write_bytes(path, &encode_checkpoint(params))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    decode_checkpoint(&read_bytes(path)?)
}

/// Serializes each item as one JSON line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub bag_id: u64,
    pub label: usize,
    pub path: String,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolesEntry {
    pub bag_id: u64,
    pub roles: Vec<Role>,
}

pub fn bag_file_name(bag_id: u64) -> String {
    format!("{BAGS_DIR}/bag_{bag_id:06}.pidf")
}

/// Writes bags, manifest, roles (when every bag has them) and prototypes.
pub fn write_dataset(dir: &Path, bags: &[Bag], prototypes: &PrototypeSet) -> Result<()> {
    fs::create_dir_all(dir.join(BAGS_DIR))?;
    let mut manifest = Vec::with_capacity(bags.len());
    for bag in bags {
        let rel = bag_file_name(bag.bag_id);
        write_features(&dir.join(&rel), &bag.features)?;
        manifest.push(ManifestEntry {
            bag_id: bag.bag_id,
            label: bag.label,
            path: rel,
            m: bag.len(),
        });
    }
    write_jsonl(&dir.join(MANIFEST_FILE), &manifest)?;
    if bags.iter().all(|b| b.roles.is_some()) {
        let roles = bags.iter().map(|b| RolesEntry {
            bag_id: b.bag_id,
            roles: b.roles.clone().expect("checked"),
        });
        write_jsonl(&dir.join(ROLES_FILE), roles)?;
    }
    write_features(&dir.join(PROTOTYPES_FILE), &prototypes.features)
}

fn resolve(dir: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        dir.join(path)
    }
}

/// Reads the bags listed in `dir/manifest.jsonl`, attaching roles when present.
pub fn read_bags(dir: &Path) -> Result<Vec<Bag>> {
    let manifest: Vec<ManifestEntry> = read_jsonl(&dir.join(MANIFEST_FILE))?;
    let roles_path = dir.join(ROLES_FILE);
    let roles: Vec<RolesEntry> = if roles_path.exists() {
        read_jsonl(&roles_path)?
    } else {
        Vec::new()
    };
    manifest
        .into_iter()
        .map(|e| {
            let features = read_features(&resolve(dir, &e.path))?;
            if features.rows() != e.m {
                return Err(Error::Format(format!(
                    "bag {}: manifest says m = {}, file has {} rows",
                    e.bag_id,
                    e.m,
                    features.rows()
                )));
            }
            let bag_roles = roles.iter().find(|r| r.bag_id == e.bag_id).map(|r| r.roles.clone());
            if let Some(r) = &bag_roles {
                if r.len() != e.m {
                    return Err(Error::Format(format!("bag {}: roles length {} ≠ m", e.bag_id, r.len())));
                }
            }
            Ok(Bag {
                bag_id: e.bag_id,
                features,
                label: e.label,
                roles: bag_roles,
            })
        })
        .collect()
}

pub fn read_prototypes(path: &Path) -> Result<PrototypeSet> {
    PrototypeSet::new(read_features(path)?, PrototypeSource::File)
}

/// `bag_id,label,predicted,projection` rows for external plotting.
pub fn write_projections_csv(
    path: &Path,
    bag_ids: &[u64],
    labels: &[usize],
    predicted: &[usize],
    projections: &[f64],
) -> Result<()> {
    let mut out = String::from("bag_id,label,predicted,projection\n");
    for i in 0..bag_ids.len() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            bag_ids[i], labels[i], predicted[i], projections[i]
        ));
    }
    write_bytes(path, out.as_bytes())
}
