//! Checkpoint directories: `manifest.txt` (key/value text) + `params.bin`
//! (little-endian f32 blob).
//!
//! Manifest lines are either `key = value` metadata or one tensor record per
//! stored array:
//!
//! ```text
//! tensor name=decoder.out.w shape=2,9,3,3 dtype=f32 offset=1024
//! ```
//!
//! Adam moments are stored as `<name>#m` and `<name>#v` records.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::params::{ParamEntry, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "params.bin";
const FORMAT_TAG: &str = "cinemotion-checkpoint";

/// Free-form metadata stored alongside the parameters.
pub type Meta = BTreeMap<String, String>;

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `params` (values and Adam state) plus `meta` into directory `dir`.
pub fn save<F: Scalar>(dir: &Path, params: &ParamStore<F>, meta: &Meta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    manifest.push_str(&format!("format = {FORMAT_TAG}\nversion = 1\n"));
    manifest.push_str(&format!("adam_step = {}\n", params.step_count()));
    for (k, v) in meta {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::InvalidArgument(format!("metadata entry {k:?} not representable")));
        }
        manifest.push_str(&format!("meta.{k} = {v}\n"));
    }
    let mut blob: Vec<u8> = Vec::with_capacity(params.num_values() * 12);
    for (name, e) in params.iter() {
        for (suffix, t) in [("", &e.value), ("#m", &e.m), ("#v", &e.v)] {
            let shape: Vec<String> = t.shape().iter().map(|s| s.to_string()).collect();
            manifest.push_str(&format!(
                "tensor name={name}{suffix} shape={} dtype=f32 offset={}\n",
                shape.join(","),
                blob.len()
            ));
            for &x in t.data() {
                blob.extend_from_slice(&(x.f64() as f32).to_le_bytes());
            }
        }
    }
    write_atomic(&dir.join(BLOB), &blob)?;
    write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
}

struct Record {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

fn parse_record(path: &Path, line: &str) -> Result<Record> {
    let mut name = None;
    let mut shape = None;
    let mut offset = None;
    for field in line.split_whitespace().skip(1) {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("bad tensor field {field:?}")))?;
        match k {
            "name" => name = Some(v.to_string()),
            "shape" => {
                let s: std::result::Result<Vec<usize>, _> = if v.is_empty() {
                    Ok(vec![])
                } else {
                    v.split(',').map(str::parse).collect()
                };
                shape = Some(s.map_err(|_| Error::format(path, format!("bad shape {v:?}")))?);
            }
            "dtype" if v != "f32" => return Err(Error::format(path, format!("unsupported dtype {v}"))),
            "dtype" => {}
            "offset" => offset = Some(v.parse().map_err(|_| Error::format(path, format!("bad offset {v:?}")))?),
            _ => return Err(Error::format(path, format!("unknown tensor field {k}"))),
        }
    }
    match (name, shape, offset) {
        (Some(name), Some(shape), Some(offset)) => Ok(Record { name, shape, offset }),
        _ => Err(Error::format(path, format!("incomplete tensor record {line:?}"))),
    }
}

/// Loads a checkpoint written by [`save`].
pub fn load<F: Scalar>(dir: &Path) -> Result<(ParamStore<F>, Meta)> {
    let mpath = dir.join(MANIFEST);
    let bpath = dir.join(BLOB);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut meta = Meta::new();
    let mut records = Vec::new();
    let mut step = 0u64;
    let mut tagged = false;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        if line.starts_with("tensor ") {
            records.push(parse_record(&mpath, line)?);
            continue;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::format(&mpath, format!("bad line {line:?}")))?;
        match k {
            "format" if v == FORMAT_TAG => tagged = true,
            "format" => return Err(Error::format(&mpath, format!("unknown format {v}"))),
            "version" => {}
            "adam_step" => step = v.parse().map_err(|_| Error::format(&mpath, "bad adam_step"))?,
            _ => {
                if let Some(key) = k.strip_prefix("meta.") {
                    meta.insert(key.to_string(), v.to_string());
                }
            }
        }
    }
    if !tagged {
        return Err(Error::format(&mpath, "missing format tag"));
    }
    let mut tensors: BTreeMap<String, Tensor<F>> = BTreeMap::new();
    for r in records {
        let n: usize = r.shape.iter().product();
        let end = r.offset + 4 * n;
        if end > blob.len() {
            return Err(Error::format(
                &bpath,
                format!("{} needs bytes {}..{}, blob has {}", r.name, r.offset, end, blob.len()),
            ));
        }
        let data = blob[r.offset..end]
            .chunks_exact(4)
            .map(|c| F::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        tensors.insert(r.name, Tensor::new(&r.shape, data)?);
    }
    let mut store = ParamStore::new();
    let names: Vec<String> = tensors.keys().filter(|k| !k.contains('#')).cloned().collect();
    for name in names {
        let value = tensors.remove(&name).expect("present");
        let m = tensors
            .remove(&format!("{name}#m"))
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        let v = tensors
            .remove(&format!("{name}#v"))
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        store.insert_entry(&name, ParamEntry { value, m, v })?;
    }
    store.set_step_count(step);
    Ok((store, meta))
}

/// SHA-256 of the parameter blob, hex encoded.
pub fn blob_hash(dir: &Path) -> Result<String> {
    let bpath: PathBuf = dir.join(BLOB);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let digest = Sha256::digest(&blob);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
