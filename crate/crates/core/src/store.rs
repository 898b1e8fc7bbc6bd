//! The posterior draw set and its on-disk form.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! magic      4 bytes  "LUPS"
//! version    u32      1
//! draws J    u64
//! patients n u64
//! n_params   u32, then n_params names as (u16 length, utf-8 bytes)
//! ids        n x (u32 length, utf-8 bytes)
//! params     n_params columns of J f64
//! eta        n x J u8, patient-major
//! u0, u1     n x J f64 each, patient-major
//! ```
//!
//! Run metadata lives in a JSON sidecar next to the binary file.

use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, sha256_hex, write_json, write_jsonl};
use crate::model::{ModelConfig, PatientLatents, PatientRecord, PopulationParams, PARAM_LAYOUT};

const MAGIC: &[u8; 4] = b"LUPS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub chains: usize,
    pub iters: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub draws_per_chain: usize,
    /// Digest of the canonicalized cohort the sample was fit on.
    pub data_digest: String,
    pub config: ModelConfig,
    /// Final gamma random-walk acceptance rate per chain.
    pub gamma_acceptance: Vec<f64>,
    /// Cohort file the sample was fit from, when known.
    #[serde(default)]
    pub cohort_file: Option<String>,
    /// Digest of the binary body; set at construction and checked on load.
    #[serde(default)]
    pub store_digest: Option<String>,
}

/// `J` joint draws of population parameters and every patient's latents.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSample {
    pub meta: SampleMeta,
    patient_ids: Vec<String>,
    params: Vec<PopulationParams>,
    /// Patient-major: entry `i * J + j` is patient `i` in draw `j`.
    latents: Vec<PatientLatents>,
}

impl PosteriorSample {
    pub fn new(
        meta: SampleMeta,
        patient_ids: Vec<String>,
        params: Vec<PopulationParams>,
        latents: Vec<PatientLatents>,
    ) -> Result<Self> {
        if params.is_empty() {
            return Err(Error::Validation(
                "a posterior sample needs J >= 1 draws".into(),
            ));
        }
        if latents.len() != params.len() * patient_ids.len() {
            return Err(Error::Validation(format!(
                "expected {} latents for {} draws x {} patients, got {}",
                params.len() * patient_ids.len(),
                params.len(),
                patient_ids.len(),
                latents.len()
            )));
        }
        let mut sample = Self {
            meta,
            patient_ids,
            params,
            latents,
        };
        if sample.meta.store_digest.is_none() {
            sample.meta.store_digest = Some(sample.content_digest());
        }
        Ok(sample)
    }

    pub fn n_draws(&self) -> usize {
        self.params.len()
    }

    pub fn n_patients(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn patient_ids(&self) -> &[String] {
        &self.patient_ids
    }

    pub fn params(&self) -> &[PopulationParams] {
        &self.params
    }

    pub fn patient_index(&self, id: &str) -> Option<usize> {
        self.patient_ids.iter().position(|p| p == id)
    }

    /// All `J` draws of one patient's latents.
    pub fn patient_draws(&self, index: usize) -> &[PatientLatents] {
        let j = self.n_draws();
        &self.latents[index * j..(index + 1) * j]
    }

    /// Posterior mean of `eta` for a patient in the store.
    pub fn class_probability(&self, index: usize) -> f64 {
        let draws = self.patient_draws(index);
        draws.iter().map(|l| f64::from(l.eta)).sum::<f64>() / draws.len() as f64
    }

    /// Mean of `rho` over draws: the prior predictive class probability.
    pub fn mean_rho(&self) -> f64 {
        self.params.iter().map(|p| p.rho).sum::<f64>() / self.n_draws() as f64
    }

    /// A store holding the given parameter draws as a single chain and no
    /// patients, for evaluating updates under known parameters.
    pub fn from_params(params: Vec<PopulationParams>) -> Result<Self> {
        let meta = SampleMeta {
            chains: 1,
            iters: params.len(),
            burn_in: 0,
            thin: 1,
            seed: 0,
            draws_per_chain: params.len(),
            data_digest: String::new(),
            config: ModelConfig::default(),
            gamma_acceptance: Vec::new(),
            cohort_file: None,
            store_digest: None,
        };
        Self::new(meta, Vec::new(), params, Vec::new())
    }

    fn encode_body(&self) -> Vec<u8> {
        let j = self.n_draws();
        let n = self.n_patients();
        let mut out = Vec::with_capacity(64 + j * 13 * 8 + n * j * 17);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(j as u64).to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(PARAM_LAYOUT.len() as u32).to_le_bytes());
        for name in PARAM_LAYOUT {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        for id in &self.patient_ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        let flat: Vec<[f64; 13]> = self.params.iter().map(PopulationParams::to_flat).collect();
        for k in 0..PARAM_LAYOUT.len() {
            for row in &flat {
                out.extend_from_slice(&row[k].to_le_bytes());
            }
        }
        out.extend(self.latents.iter().map(|l| l.eta));
        for d in 0..2 {
            for l in &self.latents {
                out.extend_from_slice(&l.u[d].to_le_bytes());
            }
        }
        out
    }

    /// Cryptographic digest of the draw content (not the metadata).
    pub fn content_digest(&self) -> String {
        sha256_hex(&self.encode_body())
    }

    /// Content digest, computed once at construction (or verified on load).
    pub fn digest(&self) -> String {
        self.meta
            .store_digest
            .clone()
            .unwrap_or_else(|| self.content_digest())
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes the binary store and its JSON sidecar; returns the digest.
    pub fn save(&mut self, path: &Path) -> Result<String> {
        let body = self.encode_body();
        let digest = sha256_hex(&body);
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(&body)?;
        w.flush()?;
        self.meta.store_digest = Some(digest.clone());
        write_json(&Self::sidecar_path(path), &self.meta)?;
        Ok(digest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut body = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut body)?;
        let meta: SampleMeta = read_json(&Self::sidecar_path(path))?;
        let digest = sha256_hex(&body);
        if let Some(expected) = &meta.store_digest {
            if *expected != digest {
                return Err(Error::Format(format!(
                    "store body digest {digest} does not match sidecar {expected}"
                )));
            }
        }
        let mut sample = decode_body(&body, meta)?;
        sample.meta.store_digest = Some(digest);
        Ok(sample)
    }

    /// Debug export: one JSON object per draw.
    pub fn export_jsonl(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            draw: usize,
            params: &'a PopulationParams,
            latents: Vec<&'a PatientLatents>,
        }
        let j = self.n_draws();
        let rows: Vec<Row> = (0..j)
            .map(|d| Row {
                draw: d,
                params: &self.params[d],
                latents: (0..self.n_patients())
                    .map(|i| &self.latents[i * j + d])
                    .collect(),
            })
            .collect();
        write_jsonl(path, &rows)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("store file is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("size overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format("invalid utf-8 in store".into()))
    }
}

fn decode_body(body: &[u8], meta: SampleMeta) -> Result<PosteriorSample> {
    let mut c = Cursor { buf: body, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not a posterior store (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported store version {version}"
        )));
    }
    let j = c.u64()? as usize;
    let n = c.u64()? as usize;
    let n_params = c.u32()? as usize;
    let mut names = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let len = c.u16()? as usize;
        names.push(c.string(len)?);
    }
    if names != PARAM_LAYOUT {
        return Err(Error::Format(format!(
            "unexpected parameter layout {names:?}"
        )));
    }
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        let len = c.u32()? as usize;
        ids.push(c.string(len)?);
    }
    let columns: Vec<Vec<f64>> = (0..n_params).map(|_| c.f64s(j)).collect::<Result<_>>()?;
    let params = (0..j)
        .map(|d| {
            let mut flat = [0.0; 13];
            for (k, col) in columns.iter().enumerate() {
                flat[k] = col[d];
            }
            PopulationParams::from_flat(&flat)
        })
        .collect();
    let eta = c.take(n * j)?.to_vec();
    let u0 = c.f64s(n * j)?;
    let u1 = c.f64s(n * j)?;
    if c.pos != body.len() {
        return Err(Error::Format("trailing bytes after store body".into()));
    }
    let latents = (0..n * j)
        .map(|k| PatientLatents {
            eta: eta[k],
            u: [u0[k], u1[k]],
        })
        .collect();
    PosteriorSample::new(meta, ids, params, latents)
}

/// Sorts a cohort by id and rejects duplicate or invalid records.
pub fn canonical_cohort(records: &[PatientRecord]) -> Result<Vec<PatientRecord>> {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    for w in sorted.windows(2) {
        if w[0].id == w[1].id {
            return Err(Error::Validation(format!(
                "duplicate patient id {:?}",
                w[0].id
            )));
        }
    }
    for r in &sorted {
        r.validate()?;
    }
    Ok(sorted)
}

/// Digest of the canonicalized cohort: independent of record order.
pub fn cohort_digest(records: &[PatientRecord]) -> Result<String> {
    let sorted = canonical_cohort(records)?;
    let mut bytes = Vec::new();
    for r in &sorted {
        serde_json::to_writer(&mut bytes, r)?;
        bytes.push(b'\n');
    }
    Ok(sha256_hex(&bytes))
}
