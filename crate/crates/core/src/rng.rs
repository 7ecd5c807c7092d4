//! Consistent tensor generation: a tensor's canonical id seeds the stream, so
//! every run that names the same logical tensor sees the same values.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{validate_mapping, CanonicalError, CanonicalId, ShardMapping};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GenError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Mapping(#[from] CanonicalError),
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn seed_from(id: &CanonicalId) -> u64 {
    fnv1a64(id.encode().as_bytes())
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * 2f64.powi(-53)
    }

    /// Two standard normals from one Box-Muller pair, redrawing when u1 = 0.
    pub fn next_normal_pair(&mut self) -> (f64, f64) {
        loop {
            let u1 = self.next_uniform();
            let u2 = self.next_uniform();
            if u1 == 0.0 {
                continue;
            }
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = TAU * u2;
            return (r * theta.cos(), r * theta.sin());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Normal { mean: f64, stddev: f64 },
    Uniform { lo: f64, hi: f64 },
    TokenIds { vocab: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub distribution: Distribution,
    pub shape: Vec<usize>,
}

impl GenSpec {
    pub fn normal(mean: f64, stddev: f64, shape: &[usize]) -> Self {
        Self { distribution: Distribution::Normal { mean, stddev }, shape: shape.to_vec() }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.shape.is_empty() || self.shape.contains(&0) {
            return Err(GenError::InvalidSpec(format!("bad shape {:?}", self.shape)));
        }
        match self.distribution {
            Distribution::Normal { stddev, .. } if !(stddev > 0.0) => {
                Err(GenError::InvalidSpec("stddev must be positive".into()))
            }
            Distribution::Uniform { lo, hi } if !(lo < hi) => Err(GenError::InvalidSpec("need lo < hi".into())),
            Distribution::TokenIds { vocab } if vocab < 2 => Err(GenError::InvalidSpec("vocab must be >= 2".into())),
            _ => Ok(()),
        }
    }
}

/// Generate the logical full tensor named by `id`, filled row-major.
pub fn generate_full(id: &CanonicalId, spec: &GenSpec) -> Result<Tensor, GenError> {
    spec.validate()?;
    let n: usize = spec.shape.iter().product();
    let mut rng = SplitMix64::new(seed_from(id));
    let mut data = Vec::with_capacity(n);
    match spec.distribution {
        Distribution::Normal { mean, stddev } => {
            while data.len() < n {
                let (a, b) = rng.next_normal_pair();
                data.push(mean + stddev * a);
                if data.len() < n {
                    data.push(mean + stddev * b);
                }
            }
        }
        Distribution::Uniform { lo, hi } => {
            data.extend((0..n).map(|_| lo + (hi - lo) * rng.next_uniform()));
        }
        Distribution::TokenIds { vocab } => {
            data.extend((0..n).map(|_| ((rng.next_uniform() * vocab as f64).floor() as usize).min(vocab - 1) as f64));
        }
    }
    Ok(Tensor::new(spec.shape.clone(), data).expect("length matches shape"))
}

/// Copy each global box of `mapping` out of `full` into its local box.
pub fn extract_shard(full: &Tensor, mapping: &ShardMapping) -> Result<Tensor, GenError> {
    validate_mapping(mapping)?;
    if full.shape() != mapping.global_shape.as_slice() {
        return Err(CanonicalError::MappingInvalid(format!(
            "mapping global shape {:?} does not match tensor {:?}",
            mapping.global_shape,
            full.shape()
        ))
        .into());
    }
    let mut local = Tensor::zeros(&mapping.local_shape);
    for p in &mapping.pairs {
        let piece = full.slice_read(&p.global.0).expect("validated");
        local.slice_write(&p.local.0, &piece).expect("validated");
    }
    Ok(local)
}
