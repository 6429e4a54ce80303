//! Per-modality adapter heads applied on top of frozen embeddings.
//!
//! A head is the identity, a full affine map `W·v + b`, or a low-rank
//! residual `v + (α/r)·B·(A·v)`. Outputs are renormalized to unit length.
//! A rank-0 low-rank head is the identity, and with `B = 0` (its
//! initialization) a low-rank head returns its input unchanged.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::loss::{evaluate, Batch, LossConfig};
use super::OptError;
use crate::embedstore::{unit, EmbeddingStore, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    Identity,
    Full,
    Lora,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Image,
    Text,
}

/// Which encoder sides stay frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lock {
    /// Both sides train.
    None,
    /// Image side frozen, text side trains.
    Image,
    /// Text side frozen, image side trains.
    Text,
    /// Both sides frozen except a full text projection.
    Star,
}

impl std::str::FromStr for Lock {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Lock::None),
            "image" => Ok(Lock::Image),
            "text" => Ok(Lock::Text),
            "star" => Ok(Lock::Star),
            _ => Err(format!("unknown lock mode {s}")),
        }
    }
}

/// Declarative adapter configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterSpec {
    pub lock: Lock,
    /// Low-rank adapters of this rank on the trainable sides; full affine
    /// heads when absent.
    pub rank: Option<usize>,
    /// Low-rank scale numerator; defaults to `2 · rank`.
    pub alpha: Option<f64>,
    pub sigma_init: f64,
    pub sigma_trainable: bool,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        AdapterSpec {
            lock: Lock::None,
            rank: Some(32),
            alpha: None,
            sigma_init: 0.07,
            sigma_trainable: true,
        }
    }
}

impl AdapterSpec {
    fn trainable_mode(&self) -> HeadMode {
        match self.rank {
            Some(_) => HeadMode::Lora,
            None => HeadMode::Full,
        }
    }

    /// `(mode, trainable)` for the image and text sides.
    pub fn sides(&self) -> [(HeadMode, bool); 2] {
        let t = (self.trainable_mode(), true);
        let frozen = (HeadMode::Identity, false);
        match self.lock {
            Lock::None => [t, t],
            Lock::Image => [frozen, t],
            Lock::Text => [t, frozen],
            Lock::Star => [frozen, (HeadMode::Full, true)],
        }
    }

    pub fn rank(&self) -> usize {
        self.rank.unwrap_or(0)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(2.0 * self.rank() as f64)
    }
}

/// One adapter head with parameters stored flat in declaration order:
/// `W` (d×d) then `b` (d) for full heads, `A` (r×d) then `B` (d×r) for
/// low-rank heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub mode: HeadMode,
    pub dim: usize,
    pub rank: usize,
    pub scale: f64,
    pub params: Vec<f64>,
    pub trainable: bool,
}

impl Head {
    pub fn identity(dim: usize) -> Self {
        Head {
            mode: HeadMode::Identity,
            dim,
            rank: 0,
            scale: 0.0,
            params: Vec::new(),
            trainable: false,
        }
    }

    /// `W = I`, `b = 0`.
    pub fn full(dim: usize, trainable: bool) -> Self {
        let mut params = vec![0.0; dim * dim + dim];
        for k in 0..dim {
            params[k * dim + k] = 1.0;
        }
        Head {
            mode: HeadMode::Full,
            dim,
            rank: 0,
            scale: 0.0,
            params,
            trainable,
        }
    }

    /// `A ~ N(0, 1/d)`, `B = 0`.
    pub fn lora<R: Rng + ?Sized>(
        dim: usize,
        rank: usize,
        alpha: f64,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
        let mut params: Vec<f64> = (0..rank * dim).map(|_| normal.sample(rng)).collect();
        params.resize(2 * rank * dim, 0.0);
        Head {
            mode: HeadMode::Lora,
            dim,
            rank,
            scale: if rank == 0 { 0.0 } else { alpha / rank as f64 },
            params,
            trainable,
        }
    }

    pub fn param_count(mode: HeadMode, dim: usize, rank: usize) -> usize {
        match mode {
            HeadMode::Identity => 0,
            HeadMode::Full => dim * dim + dim,
            HeadMode::Lora => 2 * rank * dim,
        }
    }

    /// Whether the head has parameters that an optimizer would update.
    pub fn learns(&self) -> bool {
        self.trainable && !self.params.is_empty()
    }

    /// Pre-normalization output.
    pub fn forward(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim;
        match self.mode {
            HeadMode::Identity => v.to_vec(),
            HeadMode::Full => {
                let (w, b) = self.params.split_at(d * d);
                (0..d)
                    .map(|k| {
                        let row = &w[k * d..(k + 1) * d];
                        row.iter().zip(v).map(|(a, x)| a * x).sum::<f64>() + b[k]
                    })
                    .collect()
            }
            HeadMode::Lora => {
                let r = self.rank;
                if r == 0 {
                    return v.to_vec();
                }
                let (a, b) = self.params.split_at(r * d);
                let h: Vec<f64> = (0..r)
                    .map(|q| {
                        a[q * d..(q + 1) * d]
                            .iter()
                            .zip(v)
                            .map(|(p, x)| p * x)
                            .sum()
                    })
                    .collect();
                (0..d)
                    .map(|k| {
                        let delta: f64 = b[k * r..(k + 1) * r]
                            .iter()
                            .zip(&h)
                            .map(|(p, y)| p * y)
                            .sum();
                        v[k] + self.scale * delta
                    })
                    .collect()
            }
        }
    }

    /// Accumulate `∂L/∂params` given input `v` and `∂L/∂z` for `z = forward(v)`.
    pub fn backward(&self, v: &[f64], dz: &[f64], grad: &mut [f64]) {
        let d = self.dim;
        match self.mode {
            HeadMode::Identity => {}
            HeadMode::Full => {
                let (gw, gb) = grad.split_at_mut(d * d);
                for k in 0..d {
                    let g = dz[k];
                    for c in 0..d {
                        gw[k * d + c] += g * v[c];
                    }
                    gb[k] += g;
                }
            }
            HeadMode::Lora => {
                let r = self.rank;
                if r == 0 {
                    return;
                }
                let (a, b) = self.params.split_at(r * d);
                let (ga, gb) = grad.split_at_mut(r * d);
                let h: Vec<f64> = (0..r)
                    .map(|q| {
                        a[q * d..(q + 1) * d]
                            .iter()
                            .zip(v)
                            .map(|(p, x)| p * x)
                            .sum()
                    })
                    .collect();
                let mut dh = vec![0.0; r];
                for k in 0..d {
                    let g = self.scale * dz[k];
                    for q in 0..r {
                        gb[k * r + q] += g * h[q];
                        dh[q] += g * b[k * r + q];
                    }
                }
                for q in 0..r {
                    for c in 0..d {
                        ga[q * d + c] += dh[q] * v[c];
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterModel {
    pub dim: usize,
    pub rank: usize,
    pub alpha: f64,
    pub image: Head,
    pub text: Head,
    pub sigma: f64,
    pub sigma_trainable: bool,
}

/// Gradients laid out like the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub image: Vec<f64>,
    pub text: Vec<f64>,
    pub sigma: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    mode_image: HeadMode,
    mode_text: HeadMode,
    rank: usize,
    alpha: f64,
    dim: usize,
    sigma: f64,
    #[serde(default)]
    trainable_image: bool,
    #[serde(default)]
    trainable_text: bool,
    #[serde(default)]
    sigma_trainable: bool,
}

impl AdapterModel {
    /// Identity on both sides, `σ` frozen.
    pub fn identity(dim: usize, sigma: f64) -> Self {
        AdapterModel {
            dim,
            rank: 0,
            alpha: 0.0,
            image: Head::identity(dim),
            text: Head::identity(dim),
            sigma,
            sigma_trainable: false,
        }
    }

    pub fn from_spec<R: Rng + ?Sized>(spec: &AdapterSpec, dim: usize, rng: &mut R) -> Self {
        let rank = spec.rank();
        let alpha = spec.alpha();
        let [img, txt] = spec.sides();
        let mut make = |(mode, trainable): (HeadMode, bool)| match mode {
            HeadMode::Identity => Head::identity(dim),
            HeadMode::Full => Head::full(dim, trainable),
            HeadMode::Lora => Head::lora(dim, rank, alpha, trainable, rng),
        };
        let image = make(img);
        let text = make(txt);
        AdapterModel {
            dim,
            rank,
            alpha,
            image,
            text,
            sigma: spec.sigma_init,
            sigma_trainable: spec.sigma_trainable,
        }
    }

    pub fn head(&self, side: Side) -> &Head {
        match side {
            Side::Image => &self.image,
            Side::Text => &self.text,
        }
    }

    pub fn head_mut(&mut self, side: Side) -> &mut Head {
        match side {
            Side::Image => &mut self.image,
            Side::Text => &mut self.text,
        }
    }

    pub fn zero_grad(&self) -> ModelGrad {
        ModelGrad {
            image: vec![0.0; self.image.params.len()],
            text: vec![0.0; self.text.params.len()],
            sigma: 0.0,
        }
    }

    /// Serialize as one JSON header line followed by the parameters as
    /// little-endian `f32` (image side, then text side).
    /// Unit-normalize a raw embedding, pass it through one head and
    /// renormalize; `None` when either norm vanishes.
    pub fn embed(&self, side: Side, raw: &[f64]) -> Option<Vec<f64>> {
        unit(&self.head(side).forward(&unit(raw)?))
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            mode_image: self.image.mode,
            mode_text: self.text.mode,
            rank: self.rank,
            alpha: self.alpha,
            dim: self.dim,
            sigma: self.sigma,
            trainable_image: self.image.trainable,
            trainable_text: self.text.trainable,
            sigma_trainable: self.sigma_trainable,
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for v in self.image.params.iter().chain(&self.text.params) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self, OptError> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| OptError::Checkpoint("missing header line".into()))?;
        let h: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| OptError::Checkpoint(e.to_string()))?;
        if h.dim == 0 || h.sigma.is_nan() || h.sigma <= 0.0 {
            return Err(OptError::Checkpoint(
                "dim and sigma must be positive".into(),
            ));
        }
        let blob = &bytes[nl + 1..];
        let n_img = Head::param_count(h.mode_image, h.dim, h.rank);
        let n_txt = Head::param_count(h.mode_text, h.dim, h.rank);
        if blob.len() != 4 * (n_img + n_txt) {
            return Err(OptError::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                4 * (n_img + n_txt),
                blob.len()
            )));
        }
        let values: Vec<f64> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let scale = if h.rank == 0 {
            0.0
        } else {
            h.alpha / h.rank as f64
        };
        let head = |mode, params: &[f64], trainable| Head {
            mode,
            dim: h.dim,
            rank: if mode == HeadMode::Lora { h.rank } else { 0 },
            scale: if mode == HeadMode::Lora { scale } else { 0.0 },
            params: params.to_vec(),
            trainable,
        };
        Ok(AdapterModel {
            dim: h.dim,
            rank: h.rank,
            alpha: h.alpha,
            image: head(h.mode_image, &values[..n_img], h.trainable_image),
            text: head(h.mode_text, &values[n_img..], h.trainable_text),
            sigma: h.sigma,
            sigma_trainable: h.sigma_trainable,
        })
    }
}

/// Run one side's head and renormalize; returns the unit outputs and the
/// pre-normalization norms.
fn forward_rows(head: &Head, rows: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() / dim;
    let mut out = Vec::with_capacity(rows.len());
    let mut norms = Vec::with_capacity(n);
    for r in 0..n {
        let z = head.forward(&rows[r * dim..(r + 1) * dim]);
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        out.extend(z.iter().map(|v| v / norm));
        norms.push(norm);
    }
    (out, norms)
}

fn backward_rows(
    head: &Head,
    rows: &[f64],
    outs: &[f64],
    norms: &[f64],
    d_out: &[f64],
    grad: &mut [f64],
) {
    let dim = head.dim;
    let mut dz = vec![0.0; dim];
    for (r, norm) in norms.iter().enumerate() {
        let span = r * dim..(r + 1) * dim;
        let (u, g) = (&outs[span.clone()], &d_out[span.clone()]);
        let proj: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
        for c in 0..dim {
            dz[c] = (g[c] - u[c] * proj) / norm;
        }
        head.backward(&rows[span], &dz, grad);
    }
}

/// Loss of `raw` (unit-normalized input embeddings) after the adapter,
/// with gradients for every adapter parameter and `σ`. The model's `σ`
/// overrides `cfg.sigma`. Gradients are reported for frozen parameters too.
pub fn loss_and_grad(
    model: &AdapterModel,
    raw: &Batch,
    cfg: &LossConfig,
) -> Result<(f64, ModelGrad), OptError> {
    let d = model.dim;
    if raw.dim() != d {
        return Err(OptError::DimMismatch {
            expected: d,
            got: raw.dim(),
        });
    }
    let (img_out, img_norms) = forward_rows(&model.image, raw.images_flat(), d);
    let (txt_out, txt_norms) = forward_rows(&model.text, raw.texts_flat(), d);
    let adapted = Batch::from_flat(d, img_out, txt_out, raw.offsets().to_vec());
    let cfg = LossConfig {
        sigma: model.sigma,
        ..*cfg
    };
    let lg = evaluate(&adapted, &cfg)?;
    let mut grad = model.zero_grad();
    backward_rows(
        &model.image,
        raw.images_flat(),
        adapted.images_flat(),
        &img_norms,
        &lg.d_images,
        &mut grad.image,
    );
    backward_rows(
        &model.text,
        raw.texts_flat(),
        adapted.texts_flat(),
        &txt_norms,
        &lg.d_texts,
        &mut grad.text,
    );
    grad.sigma = lg.d_sigma;
    Ok((lg.value, grad))
}

/// Pass every row of `store` through one side of the adapter; see
/// [`AdapterModel::embed`].
pub fn apply_adapter(
    model: &AdapterModel,
    store: &EmbeddingStore,
    side: Side,
) -> Result<EmbeddingStore, OptError> {
    if store.dim() != model.dim {
        return Err(OptError::DimMismatch {
            expected: model.dim,
            got: store.dim(),
        });
    }
    let mut out = EmbeddingStore::new(store.modality(), store.dim());
    for (id, row) in store.rows() {
        let v: Vec<f64> = row.iter().map(|&x| x as f64).collect();
        let u = model
            .embed(side, &v)
            .ok_or_else(|| StoreError::ZeroNormRow(id.to_string()))?;
        out.push(
            id.to_string(),
            &u.iter().map(|&x| x as f32).collect::<Vec<_>>(),
        )?;
    }
    Ok(out)
}
