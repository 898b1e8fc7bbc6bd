//! Pre-generated candidate latents for new patients.
//!
//! Candidate `p` belongs to posterior draw `p % J` and layer `p / J`, and is
//! drawn from its own seed stream `(seed, j, layer)`. Any prefix of the
//! candidate sequence therefore covers the draws evenly, and candidates past
//! the cached layers can be regenerated on demand with identical values.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! magic        4 bytes  "LUPC"
//! version      u32      1
//! store digest 64 bytes hex
//! seed         u64
//! J            u64
//! m_per_draw   u64
//! eta          J*m u8, then u0 and u1 as J*m f64 each, candidate order
//! ```

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::model::{sample_latents, PatientLatents};
use crate::rng::rng_from;
use crate::store::PosteriorSample;

const MAGIC: &[u8; 4] = b"LUPC";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalCache {
    pub store_digest: String,
    pub seed: u64,
    pub m_per_draw: usize,
    n_draws: usize,
    candidates: Vec<PatientLatents>,
}

fn draw_candidate(store: &PosteriorSample, seed: u64, p: usize) -> PatientLatents {
    let j = p % store.n_draws();
    let layer = p / store.n_draws();
    let mut rng = rng_from(seed, &[j as u64, layer as u64]);
    sample_latents(&store.params()[j], &mut rng)
}

/// Draws `m_per_draw` candidates from the latent prior of every posterior
/// draw.
pub fn generate_proposals(
    store: &PosteriorSample,
    m_per_draw: usize,
    seed: u64,
) -> Result<ProposalCache> {
    if m_per_draw == 0 {
        return invalid("m_per_draw must be at least 1");
    }
    let total = store
        .n_draws()
        .checked_mul(m_per_draw)
        .ok_or_else(|| Error::Validation("cache size overflows".into()))?;
    let candidates = (0..total)
        .into_par_iter()
        .map(|p| draw_candidate(store, seed, p))
        .collect();
    Ok(ProposalCache {
        store_digest: store.digest(),
        seed,
        m_per_draw,
        n_draws: store.n_draws(),
        candidates,
    })
}

impl ProposalCache {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn n_draws(&self) -> usize {
        self.n_draws
    }

    /// Fails with [`Error::StaleCache`] unless the cache was generated from
    /// this store.
    pub fn check_store(&self, store: &PosteriorSample) -> Result<()> {
        let digest = store.digest();
        if self.store_digest != digest || self.n_draws != store.n_draws() {
            return Err(Error::StaleCache {
                cache: self.store_digest.clone(),
                store: digest,
            });
        }
        Ok(())
    }

    /// Posterior draw index of candidate `p`.
    pub fn draw_of(&self, p: usize) -> usize {
        p % self.n_draws
    }

    /// Candidate `p`, regenerated from its seed stream when it lies past
    /// the cached layers.
    pub fn candidate(&self, store: &PosteriorSample, p: usize) -> PatientLatents {
        match self.candidates.get(p) {
            Some(c) => *c,
            None => draw_candidate(store, self.seed, p),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(self.store_digest.as_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.n_draws as u64).to_le_bytes())?;
        w.write_all(&(self.m_per_draw as u64).to_le_bytes())?;
        let eta: Vec<u8> = self.candidates.iter().map(|c| c.eta).collect();
        w.write_all(&eta)?;
        for d in 0..2 {
            for c in &self.candidates {
                w.write_all(&c.u[d].to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut body = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut body)?;
        let header = 4 + 4 + DIGEST_LEN + 24;
        if body.len() < header || &body[..4] != MAGIC {
            return Err(Error::Format("not a proposal cache".into()));
        }
        let u64_at = |o: usize| u64::from_le_bytes(body[o..o + 8].try_into().unwrap());
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported cache version {version}"
            )));
        }
        let store_digest = String::from_utf8(body[8..8 + DIGEST_LEN].to_vec())
            .map_err(|_| Error::Format("cache digest is not utf-8".into()))?;
        let o = 8 + DIGEST_LEN;
        let seed = u64_at(o);
        let n_draws = u64_at(o + 8) as usize;
        let m_per_draw = u64_at(o + 16) as usize;
        let total = n_draws
            .checked_mul(m_per_draw)
            .filter(|t| t.checked_mul(17).map(|b| b + header) == Some(body.len()))
            .ok_or_else(|| Error::Format("cache size does not match its header".into()))?;
        if n_draws == 0 || m_per_draw == 0 {
            return Err(Error::Format("empty proposal cache".into()));
        }
        let f64_at = |k: usize| f64::from_le_bytes(body[k..k + 8].try_into().unwrap());
        let u0 = header + total;
        let u1 = u0 + 8 * total;
        let candidates = (0..total)
            .map(|p| PatientLatents {
                eta: body[header + p],
                u: [f64_at(u0 + 8 * p), f64_at(u1 + 8 * p)],
            })
            .collect();
        Ok(Self {
            store_digest,
            seed,
            m_per_draw,
            n_draws,
            candidates,
        })
    }
}
