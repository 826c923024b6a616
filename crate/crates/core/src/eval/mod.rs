//! Evaluation against the synthetic ground truth: oracle L1, keypoint
//! similarity of detected landmarks, and a palette-based identity check.

mod landmarks;
mod report;

pub use landmarks::{detect_landmarks, modified_oks, soft_mask, DetectedPoint, LandmarkSet, PENALTY_PX, SIGMA_FRAC};
pub use report::{emit_report, grid_image, grid_size, GRID_MARGIN, GRID_ROWS};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, rgb_distance, sample_pair, FusionSample, IdentitySet, IdentitySpec};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::nets::{CopyFirst, CopySecond, Generator};

/// Inference-only image fusion.
pub trait Infer {
    fn infer(&self, x: &Tensor, y: &Tensor) -> Result<Tensor>;
}

impl Infer for Generator {
    fn infer(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        self.forward(x, y)
    }
}

impl Infer for CopyFirst {
    fn infer(&self, x: &Tensor, _y: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }
}

impl Infer for CopySecond {
    fn infer(&self, _x: &Tensor, y: &Tensor) -> Result<Tensor> {
        Ok(y.clone())
    }
}

impl<T: Infer + ?Sized> Infer for &T {
    fn infer(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        (**self).infer(x, y)
    }
}

/// Metrics summary as written to `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub oracle_l1_gen: f64,
    pub oracle_l1_copy_x: f64,
    pub oracle_l1_copy_y: f64,
    pub mean_oks: f64,
    pub identity_score: f64,
    pub iteration: u64,
    /// Keypoint similarity of the copy-x baseline under the same protocol.
    pub mean_oks_copy_x: f64,
    pub n_samples: usize,
}

fn oracle_of(s: &FusionSample) -> Result<&Tensor> {
    s.oracle
        .as_ref()
        .ok_or_else(|| Error::Contract("sample has no oracle image".into()))
}

/// Mean L1 to the oracle of `g`'s output and of the two copy baselines.
pub fn oracle_l1(g: &impl Infer, samples: &[FusionSample]) -> Result<(f64, f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Contract("no samples to evaluate".into()));
    }
    let (mut gen, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for s in samples {
        let oracle = oracle_of(s)?;
        gen += g.infer(&s.x, &s.y)?.mean_abs_diff(oracle);
        cx += s.x.mean_abs_diff(oracle);
        cy += s.y.mean_abs_diff(oracle);
    }
    let n = samples.len() as f64;
    Ok((gen / n, cx / n, cy / n))
}

/// True when the mean colour under `claimed`'s foreground mask is closer to
/// `claimed`'s foreground than to any other palette entry of `palettes`.
pub fn matches_identity(img: &Tensor, claimed: &IdentitySpec, palettes: &[IdentitySpec]) -> Result<bool> {
    let mask = soft_mask(img, claimed)?;
    let plane = mask.len();
    let d = img.data();
    let (mut wsum, mut mean) = (0.0, [0.0; 3]);
    for (i, &m) in mask.iter().enumerate() {
        if m > 0.5 {
            wsum += 1.0;
            for (ch, acc) in mean.iter_mut().enumerate() {
                *acc += d[ch * plane + i];
            }
        }
    }
    if wsum == 0.0 {
        return Ok(false);
    }
    let mean = mean.map(|v| v / wsum);
    let own = rgb_distance(mean, claimed.foreground);
    let rivals = palettes.iter().flat_map(|p| {
        let fg = (p.id != claimed.id).then_some(p.foreground);
        fg.into_iter().chain(p.background_tones())
    });
    Ok(rivals.into_iter().all(|c| own < rgb_distance(mean, c)))
}

/// Fraction of `imgs` whose dominant foreground colour matches `claimed`.
pub fn identity_score(imgs: &[Tensor], claimed: &IdentitySpec, palettes: &[IdentitySpec]) -> Result<f64> {
    if imgs.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for img in imgs {
        if matches_identity(img, claimed, palettes)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / imgs.len() as f64)
}

/// `n` cross-identity pairs drawn deterministically from `sets`.
pub fn eval_samples(sets: &[IdentitySet], n: usize, seed: u64) -> Result<Vec<FusionSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0xe7a1]));
    (0..n).map(|_| sample_pair(sets, false, &mut rng)).collect()
}

fn identities(s: &FusionSample) -> Result<(&IdentitySpec, &IdentitySpec)> {
    match (&s.x_identity, &s.y_identity) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::Contract("sample has no identity records".into())),
    }
}

/// Full metric pass over `samples`. Reference landmarks are detected on `y`
/// with `y`'s palette; outputs are read with `x`'s palette, which they claim.
pub fn evaluate(g: &impl Infer, samples: &[FusionSample], iteration: u64) -> Result<Metrics> {
    let (oracle_l1_gen, oracle_l1_copy_x, oracle_l1_copy_y) = oracle_l1(g, samples)?;
    let mut palettes: Vec<IdentitySpec> = Vec::new();
    for s in samples {
        let (a, b) = identities(s)?;
        for id in [a, b] {
            if !palettes.iter().any(|p| p.id == id.id) {
                palettes.push(*id);
            }
        }
    }
    let (mut oks, mut oks_copy, mut ident) = (0.0, 0.0, 0.0);
    for s in samples {
        let (ix, iy) = identities(s)?;
        let out = g.infer(&s.x, &s.y)?;
        let reference = detect_landmarks(&s.y, iy)?;
        if !reference.any_present() {
            return Err(Error::Contract("no glyph found in a reference image".into()));
        }
        oks += modified_oks(&reference, &detect_landmarks(&out, ix)?, SIGMA_FRAC, PENALTY_PX)?;
        oks_copy += modified_oks(&reference, &detect_landmarks(&s.x, ix)?, SIGMA_FRAC, PENALTY_PX)?;
        if matches_identity(&out, ix, &palettes)? {
            ident += 1.0;
        }
    }
    let n = samples.len() as f64;
    Ok(Metrics {
        oracle_l1_gen,
        oracle_l1_copy_x,
        oracle_l1_copy_y,
        mean_oks: oks / n,
        identity_score: ident / n,
        iteration,
        mean_oks_copy_x: oks_copy / n,
        n_samples: samples.len(),
    })
}
