// SPDX-License-Identifier: MIT OR Apache-2.0

//! File formats: the APRB activation dump, JSON probe banks and the APRM
//! toy-model file.
//!
//! # APRB layout (all integers and floats little-endian)
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0  | 4 | magic `b"APRB"` |
//! | 4  | 4 | format version, `u32` = 1 |
//! | 8  | 4 | N samples, `u32` |
//! | 12 | 4 | L layers, `u32` |
//! | 16 | 4 | H heads per layer, `u32` |
//! | 20 | 4 | d head dimension, `u32` |
//! | 24 | 4 | flags, `u32`; bit 0 set when labels are present |
//! | 28 | 8 | name-table offset, `u64` |
//! | 36 | 4·N | labels, `f32` (only when flag bit 0 is set) |
//! | .. | 4·N·L·H·d | activations, `f32`, `[sample][layer][head][dim]` |
//! | name-table offset | .. | name table |
//!
//! The name table holds, for each sample in order, three strings: id, display
//! name and group tag (empty for none). Then a `u32` count M followed by M
//! metadata `(key, value)` string pairs. Every string is a `u32` byte length
//! followed by that many bytes of UTF-8. The file must end exactly where the
//! name table ends.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{ActivationTensor, ProbeDataset};
use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::probes::{LinearProbe, ProbeBank};
use crate::toymodel::{HeadId, HeadParams, MlpParams, ToyConfig, ToyTransformer};

pub const DUMP_MAGIC: [u8; 4] = *b"APRB";
pub const DUMP_VERSION: u32 = 1;
pub const DUMP_HEADER_LEN: u64 = 36;
const FLAG_LABELS: u32 = 1;

pub const BANK_FORMAT: &str = "headprobe-bank";
pub const BANK_VERSION: u32 = 1;

pub const MODEL_MAGIC: [u8; 4] = *b"APRM";
pub const MODEL_VERSION: u32 = 1;

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::validation(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Byte cursor
// ---------------------------------------------------------------------------

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Parse {
                offset: self.pos as u64,
                message: format!(
                    "truncated: need {n} bytes for {what}, {} remain",
                    self.buf.len() - self.pos
                ),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let start = self.pos;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| overflow(start))?, what)?;
        let out: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite {what} value at byte offset {}",
                start + 4 * i
            )));
        }
        Ok(out)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let start = self.pos;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| overflow(start))?, what)?;
        let out: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite {what} value at byte offset {}",
                start + 8 * i
            )));
        }
        Ok(out)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let start = self.pos;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Parse {
            offset: start as u64,
            message: format!("{what} is not valid UTF-8"),
        })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Parse {
                offset: self.pos as u64,
                message: format!(
                    "{} trailing bytes after end of data",
                    self.buf.len() - self.pos
                ),
            });
        }
        Ok(())
    }
}

fn overflow(offset: usize) -> Error {
    Error::Parse {
        offset: offset as u64,
        message: "declared sizes overflow".into(),
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::validation(format!("{what} = {v} does not fit in u32")))
}

// ---------------------------------------------------------------------------
// APRB dumps
// ---------------------------------------------------------------------------

/// The fixed-size header of an APRB file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DumpHeader {
    pub version: u32,
    pub n: u32,
    pub layers: u32,
    pub heads: u32,
    pub dim: u32,
    pub has_labels: bool,
    pub name_table_offset: u64,
}

impl DumpHeader {
    /// Name-table offset implied by the counts.
    pub fn expected_name_table_offset(&self) -> Option<u64> {
        let n = u64::from(self.n);
        let acts = n
            .checked_mul(u64::from(self.layers))?
            .checked_mul(u64::from(self.heads))?
            .checked_mul(u64::from(self.dim))?
            .checked_mul(4)?;
        let labels = if self.has_labels { 4 * n } else { 0 };
        DUMP_HEADER_LEN.checked_add(labels)?.checked_add(acts)
    }
}

/// A parsed dump; labels may be absent.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpFile {
    pub header: DumpHeader,
    pub labels: Option<Vec<f32>>,
    pub activations: ActivationTensor,
    pub ids: Vec<String>,
    pub names: Vec<String>,
    pub groups: Vec<String>,
    pub metadata: BTreeMap<String, String>,
}

impl DumpFile {
    /// Builds a dataset, taking labels from the file or from `labels`.
    pub fn into_dataset(self, labels: Option<Vec<f64>>) -> Result<ProbeDataset> {
        let labels = match (labels, self.labels) {
            (Some(l), _) => l,
            (None, Some(l)) => l.into_iter().map(f64::from).collect(),
            (None, None) => {
                return Err(Error::Data(
                    "dump has no labels; attach a label table".into(),
                ))
            }
        };
        ProbeDataset::new(
            self.ids,
            self.names,
            self.groups,
            labels,
            self.activations,
            self.metadata,
        )
    }
}

/// Serializes a dataset to APRB bytes. Labels are stored as `f32`.
pub fn encode_dump(ds: &ProbeDataset) -> Result<Vec<u8>> {
    let (n, l, h, d) = ds.activations().dims();
    let header = DumpHeader {
        version: DUMP_VERSION,
        n: to_u32(n, "N")?,
        layers: to_u32(l, "L")?,
        heads: to_u32(h, "H")?,
        dim: to_u32(d, "d")?,
        has_labels: true,
        name_table_offset: 0,
    };
    let offset = header
        .expected_name_table_offset()
        .ok_or_else(|| Error::validation("dataset too large for APRB"))?;
    let mut out = Vec::with_capacity(offset as usize + 64 * n);
    out.extend_from_slice(&DUMP_MAGIC);
    for v in [
        header.version,
        header.n,
        header.layers,
        header.heads,
        header.dim,
        FLAG_LABELS,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&offset.to_le_bytes());
    for &y in ds.labels() {
        out.extend_from_slice(&(y as f32).to_le_bytes());
    }
    for &v in ds.activations().values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    debug_assert_eq!(out.len() as u64, offset);
    for i in 0..n {
        put_str(&mut out, &ds.ids()[i]);
        put_str(&mut out, &ds.names()[i]);
        put_str(&mut out, &ds.groups()[i]);
    }
    out.extend_from_slice(&to_u32(ds.metadata.len(), "metadata count")?.to_le_bytes());
    for (k, v) in &ds.metadata {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    Ok(out)
}

/// Parses APRB bytes. Rejects anything inconsistent.
pub fn decode_dump(bytes: &[u8]) -> Result<DumpFile> {
    let mut c = Cursor::new(bytes);
    let magic = c.take(4, "magic")?;
    if magic != DUMP_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic {magic:?}, expected \"APRB\""),
        });
    }
    let version = c.u32("version")?;
    if version != DUMP_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: DUMP_VERSION,
        });
    }
    let mut counts = [0u32; 4];
    for (slot, (what, off)) in counts
        .iter_mut()
        .zip([("N", 8), ("L", 12), ("H", 16), ("d", 20)])
    {
        *slot = c.u32(what)?;
        if *slot == 0 {
            return Err(Error::Parse {
                offset: off,
                message: format!("{what} must be > 0"),
            });
        }
    }
    let flags = c.u32("flags")?;
    if flags & !FLAG_LABELS != 0 {
        return Err(Error::Parse {
            offset: 24,
            message: format!("unknown flag bits {flags:#x}"),
        });
    }
    let name_table_offset = c.u64("name-table offset")?;
    let header = DumpHeader {
        version,
        n: counts[0],
        layers: counts[1],
        heads: counts[2],
        dim: counts[3],
        has_labels: flags & FLAG_LABELS != 0,
        name_table_offset,
    };
    let expected = header
        .expected_name_table_offset()
        .ok_or_else(|| overflow(8))?;
    if name_table_offset != expected {
        return Err(Error::Parse {
            offset: 28,
            message: format!(
                "name-table offset {name_table_offset} disagrees with counts (expected {expected})"
            ),
        });
    }
    if expected > bytes.len() as u64 {
        return Err(Error::Parse {
            offset: bytes.len() as u64,
            message: format!(
                "truncated: payload needs {expected} bytes, file has {}",
                bytes.len()
            ),
        });
    }
    let (n, l, h, d) = (
        header.n as usize,
        header.layers as usize,
        header.heads as usize,
        header.dim as usize,
    );
    let labels = if header.has_labels {
        Some(c.f32s(n, "label")?)
    } else {
        None
    };
    let values = c.f32s(n * l * h * d, "activation")?;
    let activations = ActivationTensor::new(n, l, h, d, values)?;
    let mut ids = Vec::with_capacity(n);
    let mut names = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for _ in 0..n {
        ids.push(c.string("sample id")?);
        names.push(c.string("sample name")?);
        groups.push(c.string("group tag")?);
    }
    let m = c.u32("metadata count")?;
    let mut metadata = BTreeMap::new();
    for _ in 0..m {
        let key_at = c.pos;
        let k = c.string("metadata key")?;
        let v = c.string("metadata value")?;
        if metadata.insert(k, v).is_some() {
            return Err(Error::Parse {
                offset: key_at as u64,
                message: "duplicate metadata key".into(),
            });
        }
    }
    c.finish()?;
    Ok(DumpFile {
        header,
        labels,
        activations,
        ids,
        names,
        groups,
        metadata,
    })
}

pub fn write_dump(ds: &ProbeDataset, path: &Path) -> Result<()> {
    write_atomic(path, &encode_dump(ds)?)
}

pub fn read_dump_file(path: &Path) -> Result<DumpFile> {
    decode_dump(&read_file(path)?)
}

/// Reads a labeled dump as a dataset.
pub fn read_dump(path: &Path) -> Result<ProbeDataset> {
    read_dump_file(path)?.into_dataset(None)
}

// ---------------------------------------------------------------------------
// Bank files
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ProbeEntry {
    layer: usize,
    head: usize,
    theta: Vec<f64>,
    cv_spearman: Option<f64>,
    #[serde(default)]
    cv_r2: Option<f64>,
    sigma_hat: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct BankFile {
    format: String,
    version: u32,
    layers: usize,
    heads: usize,
    dim: usize,
    lambda: f64,
    #[serde(default)]
    fold_seed: u64,
    #[serde(default)]
    dataset_fingerprint: String,
    #[serde(default)]
    sigma_convention: Option<String>,
    /// `[layer, head]` pairs, best first. Recomputed when absent.
    #[serde(default)]
    ranking: Option<Vec<[usize; 2]>>,
    probes: Vec<ProbeEntry>,
    #[serde(default)]
    warnings: Vec<String>,
}

/// Bank as pretty JSON text.
pub fn encode_bank(bank: &ProbeBank) -> Result<String> {
    let (layers, heads, dim) = bank.shape();
    let file = BankFile {
        format: BANK_FORMAT.into(),
        version: BANK_VERSION,
        layers,
        heads,
        dim,
        lambda: bank.lambda(),
        fold_seed: bank.fold_seed,
        dataset_fingerprint: bank.dataset_fingerprint.clone(),
        sigma_convention: Some(bank.sigma_convention.clone()),
        ranking: Some(bank.ranking().iter().map(|h| [h.layer, h.head]).collect()),
        probes: bank
            .probes()
            .iter()
            .map(|p| ProbeEntry {
                layer: p.head.layer,
                head: p.head.head,
                theta: p.theta.clone(),
                cv_spearman: p.cv_spearman,
                cv_r2: p.cv_r2,
                sigma_hat: p.sigma_hat,
            })
            .collect(),
        warnings: bank.warnings.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn decode_bank(text: &str) -> Result<ProbeBank> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::Format(format!("bank is not valid JSON: {e}")))?;
    let format = value.get("format").and_then(|v| v.as_str());
    if format != Some(BANK_FORMAT) {
        return Err(Error::Format(format!(
            "not a probe bank (format field {format:?}, expected {BANK_FORMAT:?})"
        )));
    }
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("bank has no integer version field".into()))?;
    if version != u64::from(BANK_VERSION) {
        return Err(Error::VersionMismatch {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: BANK_VERSION,
        });
    }
    let file: BankFile =
        serde_json::from_value(value).map_err(|e| Error::Format(format!("bank: {e}")))?;
    let probes = file
        .probes
        .into_iter()
        .map(|p| LinearProbe {
            head: HeadId::new(p.layer, p.head),
            theta: p.theta,
            lambda: file.lambda,
            cv_spearman: p.cv_spearman,
            cv_r2: p.cv_r2,
            sigma_hat: p.sigma_hat,
        })
        .collect();
    let ranking = file
        .ranking
        .map(|r| r.into_iter().map(|[l, h]| HeadId::new(l, h)).collect());
    let mut bank = ProbeBank::from_parts(
        file.layers,
        file.heads,
        file.dim,
        file.lambda,
        probes,
        ranking,
        file.fold_seed,
        file.dataset_fingerprint,
    )
    .map_err(|e| match e {
        Error::Validation(m) => Error::Format(format!("bank: {m}")),
        other => other,
    })?;
    if let Some(c) = file.sigma_convention {
        bank.sigma_convention = c;
    }
    bank.warnings = file.warnings;
    Ok(bank)
}

pub fn save_bank(bank: &ProbeBank, path: &Path) -> Result<()> {
    write_atomic(path, encode_bank(bank)?.as_bytes())
}

pub fn load_bank(path: &Path) -> Result<ProbeBank> {
    let bytes = read_file(path)?;
    let text =
        String::from_utf8(bytes).map_err(|_| Error::Format("bank file is not UTF-8".into()))?;
    decode_bank(&text)
}

// ---------------------------------------------------------------------------
// Model files
// ---------------------------------------------------------------------------
//
// APRM: magic, u32 version, u32 × 6 config (layers, heads, head_dim,
// model_dim, vocab, mlp_hidden), u64 seed, then f64 parameters: embedding,
// per head (proj_in, query, key, recency, proj_out), per layer MLP (w_in,
// b_in, w_out, b_out), unembedding. Row-major, little-endian.

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_model(model: &ToyTransformer) -> Result<Vec<u8>> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    for (v, what) in [
        (cfg.layers, "layers"),
        (cfg.heads, "heads"),
        (cfg.head_dim, "head_dim"),
        (cfg.model_dim, "model_dim"),
        (cfg.vocab, "vocab"),
        (cfg.mlp_hidden, "mlp_hidden"),
    ] {
        out.extend_from_slice(&to_u32(v, what)?.to_le_bytes());
    }
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    put_f64s(&mut out, model.embed().as_slice());
    for h in model.heads() {
        put_f64s(&mut out, h.proj_in.as_slice());
        put_f64s(&mut out, h.query.as_slice());
        put_f64s(&mut out, h.key.as_slice());
        put_f64s(&mut out, &[h.recency]);
        put_f64s(&mut out, h.proj_out.as_slice());
    }
    for m in model.mlps() {
        put_f64s(&mut out, m.w_in.as_slice());
        put_f64s(&mut out, &m.b_in);
        put_f64s(&mut out, m.w_out.as_slice());
        put_f64s(&mut out, &m.b_out);
    }
    put_f64s(&mut out, model.unembed().as_slice());
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<ToyTransformer> {
    let mut c = Cursor::new(bytes);
    if c.take(4, "magic")? != MODEL_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad magic, expected \"APRM\"".into(),
        });
    }
    let version = c.u32("version")?;
    if version != MODEL_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: MODEL_VERSION,
        });
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = c.u32("config")? as usize;
    }
    let seed = c.u64("seed")?;
    let [layers, heads, head_dim, model_dim, vocab, mlp_hidden] = dims;
    let config = ToyConfig {
        layers,
        heads,
        head_dim,
        model_dim,
        vocab,
        mlp_hidden,
        seed,
    };
    config.validate().map_err(|e| Error::Parse {
        offset: 8,
        message: e.to_string(),
    })?;
    // Refuse absurd sizes before allocating.
    let per_head = 3 * head_dim * model_dim + 1 + model_dim * head_dim;
    let per_mlp = 2 * mlp_hidden * model_dim + mlp_hidden + model_dim;
    let total = 2 * vocab * model_dim + layers * heads * per_head + layers * per_mlp;
    let expect_len = 40usize.saturating_add(total.saturating_mul(8));
    if expect_len != bytes.len() {
        return Err(Error::Parse {
            offset: bytes.len().min(expect_len) as u64,
            message: format!(
                "model file should be {expect_len} bytes, found {}",
                bytes.len()
            ),
        });
    }
    let mut mat = |r: usize, cols: usize, what: &str| -> Result<Matrix> {
        Matrix::new(r, cols, c.f64s(r * cols, what)?)
    };
    let embed = mat(vocab, model_dim, "embedding")?;
    let mut head_params = Vec::with_capacity(layers * heads);
    for _ in 0..layers * heads {
        let proj_in = mat(head_dim, model_dim, "proj_in")?;
        let query = mat(head_dim, model_dim, "query")?;
        let key = mat(head_dim, model_dim, "key")?;
        let recency = mat(1, 1, "recency")?.as_slice()[0];
        let proj_out = mat(model_dim, head_dim, "proj_out")?;
        head_params.push(HeadParams {
            proj_in,
            query,
            key,
            recency,
            proj_out,
        });
    }
    let mut mlps = Vec::with_capacity(layers);
    for _ in 0..layers {
        let w_in = mat(mlp_hidden, model_dim, "mlp w_in")?;
        let b_in = mat(1, mlp_hidden, "mlp b_in")?.as_slice().to_vec();
        let w_out = mat(model_dim, mlp_hidden, "mlp w_out")?;
        let b_out = mat(1, model_dim, "mlp b_out")?.as_slice().to_vec();
        mlps.push(MlpParams {
            w_in,
            b_in,
            w_out,
            b_out,
        });
    }
    let unembed = mat(vocab, model_dim, "unembedding")?;
    c.finish()?;
    ToyTransformer::from_parts(config, embed, head_params, mlps, unembed)
}

pub fn save_model(model: &ToyTransformer, path: &Path) -> Result<()> {
    write_atomic(path, &encode_model(model)?)
}

pub fn load_model(path: &Path) -> Result<ToyTransformer> {
    decode_model(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probes::{fit_bank, FitOptions};

    fn tiny() -> ProbeDataset {
        let acts = ActivationTensor::new(2, 1, 1, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let mut ds = ProbeDataset::new(
            vec!["a".into(), "b".into()],
            vec!["Alpha".into(), "Beta".into()],
            vec!["g1".into(), String::new()],
            vec![-0.5, 0.75],
            acts,
            BTreeMap::new(),
        )
        .unwrap();
        ds.metadata.insert("source".into(), "unit".into());
        ds
    }

    #[test]
    fn tiny_dump_byte_count() {
        let ds = tiny();
        let bytes = encode_dump(&ds).unwrap();
        let names = (4 + 1) + (4 + 5) + (4 + 2) + (4 + 1) + (4 + 4) + 4;
        let meta = 4 + (4 + 6) + (4 + 4);
        assert_eq!(bytes.len(), 36 + 2 * 4 + 4 * 4 + names + meta);
        assert_eq!(&bytes[..4], b"APRB");
        assert_eq!(
            u64::from_le_bytes(bytes[28..36].try_into().unwrap()),
            36 + 8 + 16
        );
    }

    #[test]
    fn dump_roundtrip_equal() {
        let ds = tiny();
        let back = decode_dump(&encode_dump(&ds).unwrap())
            .unwrap()
            .into_dataset(None)
            .unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_dump(&tiny()).unwrap();
        for cut in [0, 3, 20, 40, 70, bytes.len() - 1] {
            let err = decode_dump(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Parse { .. }), "cut {cut}: {err}");
        }
        let err = decode_dump(&bytes[..50]).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 50, .. }), "{err}");
    }

    #[test]
    fn header_corruptions_rejected() {
        let good = encode_dump(&tiny()).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_dump(&bad),
            Err(Error::Parse { offset: 0, .. })
        ));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(
            decode_dump(&bad),
            Err(Error::VersionMismatch {
                found: 2,
                expected: 1
            })
        ));
        let mut bad = good.clone();
        bad[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            decode_dump(&bad),
            Err(Error::Parse { offset: 8, .. })
        ));
        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(decode_dump(&bad), Err(Error::Parse { .. })));
        let mut bad = good;
        bad[44..48].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_dump(&bad), Err(Error::Data(_))));
    }

    #[test]
    fn unlabeled_dump_needs_labels() {
        let mut bytes = encode_dump(&tiny()).unwrap();
        // drop the label block and clear the flag
        bytes.drain(36..44);
        bytes[24..28].copy_from_slice(&0u32.to_le_bytes());
        let off = u64::from_le_bytes(bytes[28..36].try_into().unwrap()) - 8;
        bytes[28..36].copy_from_slice(&off.to_le_bytes());
        let file = decode_dump(&bytes).unwrap();
        assert!(file.labels.is_none());
        assert!(matches!(
            file.clone().into_dataset(None),
            Err(Error::Data(_))
        ));
        let ds = file.into_dataset(Some(vec![1.0, 2.0])).unwrap();
        assert_eq!(ds.labels(), &[1.0, 2.0]);
    }

    #[test]
    fn minimal_hand_written_bank() {
        let text = r#"{
            "format": "headprobe-bank", "version": 1,
            "layers": 1, "heads": 1, "dim": 2, "lambda": 1.0,
            "probes": [{"layer": 0, "head": 0, "theta": [0.5, -2.0],
                        "cv_spearman": 0.9, "sigma_hat": 1.0}]
        }"#;
        let bank = decode_bank(text).unwrap();
        assert_eq!(bank.best().predict(&[2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(bank.ranking(), &[HeadId::new(0, 0)]);
    }

    #[test]
    fn bank_version_and_format_errors() {
        let v2 = r#"{"format": "headprobe-bank", "version": 2}"#;
        assert!(matches!(
            decode_bank(v2),
            Err(Error::VersionMismatch {
                found: 2,
                expected: 1
            })
        ));
        assert!(matches!(decode_bank("{}"), Err(Error::Format(_))));
        assert!(matches!(decode_bank("not json"), Err(Error::Format(_))));
    }

    #[test]
    fn bank_roundtrip_bitwise() {
        let ds = crate::dataset::synth_planted(&crate::dataset::SynthConfig {
            n: 40,
            layers: 1,
            heads: 2,
            dim: 3,
            planted: vec![],
            background_noise: 1.0,
            seed: 3,
        })
        .unwrap();
        let bank = fit_bank(&ds, &FitOptions::default()).unwrap();
        let back = decode_bank(&encode_bank(&bank).unwrap()).unwrap();
        assert_eq!(back, bank);
        for (a, b) in bank.probes().iter().zip(back.probes()) {
            for (x, y) in a.theta.iter().zip(&b.theta) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn model_roundtrip_and_truncation() {
        let model = ToyTransformer::random(ToyConfig::new(2, 2, 3, 8, 5, 7)).unwrap();
        let bytes = encode_model(&model).unwrap();
        assert_eq!(decode_model(&bytes).unwrap(), model);
        assert!(matches!(
            decode_model(&bytes[..bytes.len() - 8]),
            Err(Error::Parse { .. })
        ));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(
            decode_model(&bad),
            Err(Error::VersionMismatch { .. })
        ));
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.aprb");
        write_dump(&tiny(), &path).unwrap();
        write_dump(&tiny(), &path).unwrap();
        let entries: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(entries.len(), 1);
        assert_eq!(read_dump(&path).unwrap(), tiny());
    }
}
