//! Seeded synthetic bundles with controllable attention sharpness and
//! optional planted clusters of hidden states.
//!
//! Every layer draws from its own ChaCha stream, keyed by layer and purpose,
//! so a layer's content does not depend on how many layers come before it.
//! Per-token attention logits are drawn independently at each layer, which
//! makes pooled scores exchangeable across tokens and independent across
//! layers (the null model for rank-rise statistics).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::bundle::{DenseTensor, TensorBundle, TensorKind};
use crate::numeric::{norm, Matrix};
use crate::pooling::{pool_global, pool_last};

/// Spread of per-row logit noise around the shared per-token logit.
const ROW_NOISE: f64 = 0.25;
/// Attention mass each text row places on the visual slice lies in this range.
const ROW_MASS: (f64, f64) = (0.3, 0.9);
/// Step size of the hidden-state random walk across layers.
const HIDDEN_DRIFT: f64 = 0.3;
/// Perturbation of planted tokens around their shared direction.
const CLUSTER_NOISE: f64 = 0.05;
/// Logit margin that lifts planted tokens above all others.
const PLANTED_MARGIN: f64 = 1.0;

const STREAM_LOGITS: u64 = 0;
const STREAM_ROWS: u64 = 1;
const STREAM_HIDDEN: u64 = 2;
const STREAM_CLUSTER: u64 = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("InvalidSpec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_text: usize,
    pub n_visual: usize,
    pub n_layers: usize,
    pub d: usize,
    #[serde(default)]
    pub seed: u64,
    /// Inverse temperature of the attention rows. `0` gives uniform rows,
    /// infinity gives one-hot rows (written `"inf"` in JSON).
    #[serde(default = "default_concentration", with = "concentration_serde")]
    pub concentration: f64,
    /// Tokens whose hidden vectors share one direction and which receive
    /// the highest attention logits.
    #[serde(default)]
    pub planted_anchors: Option<Vec<usize>>,
}

fn default_concentration() -> f64 {
    1.0
}

mod concentration_serde {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if matches!(t.as_str(), "inf" | "infinity" | "Infinity") => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad concentration {t:?}"))),
        }
    }
}

impl SynthSpec {
    pub fn new(n_text: usize, n_visual: usize, n_layers: usize, d: usize, seed: u64) -> Self {
        Self {
            n_text,
            n_visual,
            n_layers,
            d,
            seed,
            concentration: default_concentration(),
            planted_anchors: None,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.n_text == 0 || self.n_visual == 0 || self.n_layers == 0 || self.d == 0 {
            return bad(format!(
                "counts must be positive (n_text={}, n_visual={}, n_layers={}, d={})",
                self.n_text, self.n_visual, self.n_layers, self.d
            ));
        }
        if self.concentration.is_nan() || self.concentration < 0.0 {
            return bad(format!("concentration {} must be >= 0", self.concentration));
        }
        if let Some(planted) = &self.planted_anchors {
            let mut seen = vec![false; self.n_visual];
            for &i in planted {
                if i >= self.n_visual || seen[i] {
                    return bad(format!("planted index {i} out of range or repeated"));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

fn rng_for(seed: u64, layer: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((layer as u64) << 8) | purpose);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    } else {
        v[0] = 1.0;
    }
    v
}

fn softmax_scaled(logits: &[f64], mass: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| mass * e / total).collect()
}

fn attention_layer(spec: &SynthSpec, layer: usize, planted: &[bool]) -> Matrix {
    let (nt, nv) = (spec.n_text, spec.n_visual);
    let mut logit_rng = rng_for(spec.seed, layer, STREAM_LOGITS);
    let mut z = gaussian(&mut logit_rng, nv);
    if planted.iter().any(|&p| p) {
        let top_free = z
            .iter()
            .zip(planted)
            .filter(|(_, &p)| !p)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let base = if top_free.is_finite() { top_free } else { 0.0 };
        for (zj, &p) in z.iter_mut().zip(planted) {
            if p {
                let lift: f64 = logit_rng.sample(StandardNormal);
                *zj = base + PLANTED_MARGIN + 0.5 * lift.abs();
            }
        }
    }

    let mut row_rng = rng_for(spec.seed, layer, STREAM_ROWS);
    let beta = spec.concentration;
    let mut data = Vec::with_capacity(nt * nv);
    for _ in 0..nt {
        let mass = row_rng.random_range(ROW_MASS.0..=ROW_MASS.1);
        if beta.is_infinite() {
            let mut best = 0;
            for j in 1..nv {
                if z[j] > z[best] {
                    best = j;
                }
            }
            let mut row = vec![0.0; nv];
            row[best] = mass;
            data.extend(row);
        } else {
            let logits: Vec<f64> = z
                .iter()
                .map(|&zj| {
                    let e: f64 = row_rng.sample(StandardNormal);
                    beta * (zj + ROW_NOISE * e)
                })
                .collect();
            data.extend(softmax_scaled(&logits, mass));
        }
    }
    Matrix::from_vec(nt, nv, data).expect("shape matches")
}

fn hidden_layers(spec: &SynthSpec, planted: &[bool]) -> Vec<Matrix> {
    let (nv, d) = (spec.n_visual, spec.d);
    let mut current: Vec<Vec<f64>> = Vec::new();
    let mut center: Vec<f64> = Vec::new();
    let mut out = Vec::with_capacity(spec.n_layers);
    for layer in 0..spec.n_layers {
        let mut rng = rng_for(spec.seed, layer, STREAM_HIDDEN);
        let mut crng = rng_for(spec.seed, layer, STREAM_CLUSTER);
        center = if layer == 0 {
            normalize(gaussian(&mut crng, d))
        } else {
            let step = gaussian(&mut crng, d);
            normalize(center.iter().zip(&step).map(|(c, g)| c + HIDDEN_DRIFT * g).collect())
        };
        current = (0..nv)
            .map(|i| {
                let g = gaussian(&mut rng, d);
                if planted[i] {
                    normalize(center.iter().zip(&g).map(|(c, e)| c + CLUSTER_NOISE * e).collect())
                } else if layer == 0 {
                    normalize(g)
                } else {
                    normalize(current[i].iter().zip(&g).map(|(h, e)| h + HIDDEN_DRIFT * e).collect())
                }
            })
            .collect();
        out.push(Matrix::from_rows(&current).expect("rows share d"));
    }
    out
}

/// Builds a bundle with every recognized tensor present at every layer.
/// Pooled vectors are computed from the stored (f32) attention so the
/// bundle is self-consistent.
pub fn generate(spec: &SynthSpec) -> Result<TensorBundle, SynthError> {
    spec.validate()?;
    let mut planted = vec![false; spec.n_visual];
    for &i in spec.planted_anchors.iter().flatten() {
        planted[i] = true;
    }

    let mut bundle = TensorBundle::new(
        format!("synth-{}", spec.seed),
        spec.n_text,
        spec.n_visual,
        spec.n_layers,
    );
    let hidden = hidden_layers(spec, &planted);
    for (layer, h) in hidden.iter().enumerate() {
        let attn = DenseTensor::matrix(&attention_layer(spec, layer, &planted)).expect("nonempty");
        let stored = attn.to_matrix().expect("2-D tensor");
        let glo = pool_global(&stored).expect("nonempty");
        let last = pool_last(&stored).expect("nonempty");
        bundle.insert(TensorKind::Attention.name(layer), attn);
        bundle.insert(
            TensorKind::GlobalScore.name(layer),
            DenseTensor::vector(&glo).expect("nonempty"),
        );
        bundle.insert(
            TensorKind::LastScore.name(layer),
            DenseTensor::vector(&last).expect("nonempty"),
        );
        bundle.insert(
            TensorKind::Hidden.name(layer),
            DenseTensor::matrix(h).expect("nonempty"),
        );
    }
    Ok(bundle)
}
