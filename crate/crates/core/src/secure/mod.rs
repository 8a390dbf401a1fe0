//! Pairwise additive masking of quantized uploads.
//!
//! Every pair of cohort members shares a PRG stream; the lower id adds it
//! and the higher id subtracts it, so masks cancel in the modular sum.
//! There is no key agreement and no dropout recovery.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::fed::QuantizedDelta;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SecureError {
    #[error("client {0} is not in the cohort")]
    NotInCohort(u32),
    #[error("cohort must be sorted and free of duplicates")]
    Cohort,
    #[error("dropout unsupported: missing upload from client {0}")]
    Dropout(u32),
    #[error("upload from client {client} does not match the cohort layout: {detail}")]
    Layout { client: u32, detail: String },
}

pub type Result<T> = std::result::Result<T, SecureError>;

/// Shared secret for one federation session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionKey(pub [u8; 32]);

impl SessionKey {
    pub fn from_seed(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"fedcry-session");
        h.update(seed.to_le_bytes());
        Self(h.finalize().into())
    }

    /// Independent key for a labelled sub-stream.
    pub fn derive(&self, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.0);
        h.update(label.as_bytes());
        Self(h.finalize().into())
    }
}

/// Seed shared by clients `i < j` in one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSeedPair {
    pub i: u32,
    pub j: u32,
    pub seed: u64,
}

impl MaskSeedPair {
    pub fn new(a: u32, b: u32, round: u32, key: &SessionKey) -> Self {
        let (i, j) = (a.min(b), a.max(b));
        let mut h = Sha256::new();
        h.update(key.0);
        h.update(round.to_le_bytes());
        h.update(i.to_le_bytes());
        h.update(j.to_le_bytes());
        let d = h.finalize();
        let seed = u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"));
        Self { i, j, seed }
    }
}

/// Quantized upload with codes widened to `u32` and masked modulo 2^32.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedUpload {
    pub round: u32,
    pub client_id: u32,
    pub tensors: Vec<MaskedTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub scale: f32,
    pub zero_point: i32,
    pub codes: Vec<u32>,
}

fn check_cohort(client: u32, cohort: &[u32]) -> Result<()> {
    if cohort.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SecureError::Cohort);
    }
    if cohort.binary_search(&client).is_err() {
        return Err(SecureError::NotInCohort(client));
    }
    Ok(())
}

/// Total mask of `client` for tensors of the given lengths.
pub fn derive_masks(
    client: u32,
    cohort: &[u32],
    round: u32,
    key: &SessionKey,
    lens: &[usize],
) -> Result<Vec<Vec<u32>>> {
    check_cohort(client, cohort)?;
    let mut masks: Vec<Vec<u32>> = lens.iter().map(|&n| vec![0u32; n]).collect();
    for &peer in cohort.iter().filter(|&&p| p != client) {
        let pair = MaskSeedPair::new(client, peer, round, key);
        let mut prg = ChaCha20Rng::seed_from_u64(pair.seed);
        let add = client < peer;
        for m in masks.iter_mut() {
            for v in m.iter_mut() {
                let r = prg.next_u32();
                *v = if add {
                    v.wrapping_add(r)
                } else {
                    v.wrapping_sub(r)
                };
            }
        }
    }
    Ok(masks)
}

/// Widens `codes * multiplicity` to 32 bits and adds the mask.
pub fn mask_upload(
    q: &QuantizedDelta,
    multiplicity: u32,
    masks: &[Vec<u32>],
) -> Result<MaskedUpload> {
    if masks.len() != q.tensors.len() {
        return Err(SecureError::Layout {
            client: q.client_id,
            detail: format!("{} masks for {} tensors", masks.len(), q.tensors.len()),
        });
    }
    let mut tensors = Vec::with_capacity(q.tensors.len());
    for (t, m) in q.tensors.iter().zip(masks) {
        if m.len() != t.codes.len() {
            return Err(SecureError::Layout {
                client: q.client_id,
                detail: format!(
                    "mask for {} has {} entries, want {}",
                    t.name,
                    m.len(),
                    t.codes.len()
                ),
            });
        }
        let codes = t
            .codes
            .iter()
            .zip(m)
            .map(|(&c, &r)| ((c as i32).wrapping_mul(multiplicity as i32) as u32).wrapping_add(r))
            .collect();
        tensors.push(MaskedTensor {
            name: t.name.clone(),
            shape: t.shape.clone(),
            scale: t.scale,
            zero_point: t.zero_point,
            codes,
        });
    }
    Ok(MaskedUpload {
        round: q.round,
        client_id: q.client_id,
        tensors,
    })
}

/// Modular sum of all uploads, re-centred to the signed 32-bit range.
/// Every cohort member must be present.
pub fn unmask_sum(uploads: &[MaskedUpload], cohort: &[u32]) -> Result<Vec<Vec<i64>>> {
    if cohort.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SecureError::Cohort);
    }
    for &c in cohort {
        if !uploads.iter().any(|u| u.client_id == c) {
            return Err(SecureError::Dropout(c));
        }
    }
    let Some(first) = uploads.first() else {
        return Ok(Vec::new());
    };
    let mut acc: Vec<Vec<u32>> = first
        .tensors
        .iter()
        .map(|t| vec![0u32; t.codes.len()])
        .collect();
    for u in uploads {
        if cohort.binary_search(&u.client_id).is_err() {
            return Err(SecureError::NotInCohort(u.client_id));
        }
        if u.tensors.len() != acc.len() {
            return Err(SecureError::Layout {
                client: u.client_id,
                detail: format!("{} tensors, want {}", u.tensors.len(), acc.len()),
            });
        }
        for ((a, t), f) in acc.iter_mut().zip(&u.tensors).zip(&first.tensors) {
            if t.codes.len() != a.len() || t.name != f.name {
                return Err(SecureError::Layout {
                    client: u.client_id,
                    detail: format!("tensor {} does not line up with {}", t.name, f.name),
                });
            }
            for (x, &c) in a.iter_mut().zip(&t.codes) {
                *x = x.wrapping_add(c);
            }
        }
    }
    Ok(acc
        .into_iter()
        .map(|a| a.into_iter().map(|x| x as i32 as i64).collect())
        .collect())
}
