use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::render::{
    quantize, render, rgb_distance, Glyph, IdentitySpec, Landmark, Rgb, ShapeSpec, Texture, CENTER_RANGE,
    SCALE_RANGE,
};
use crate::engine::Tensor;
use crate::error::{Error, Result};

/// Instance indices at or above this offset are reserved for held-out images.
pub const HOLDOUT_OFFSET: u64 = 1 << 32;

/// Minimum colour distance between any two palette entries of different sets.
const PALETTE_SEPARATION: f64 = 0.35;
/// Minimum colour distance between a set's own foreground and background tones.
const CONTRAST: f64 = 0.5;

/// One image plus the geometry that produced it, when known.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub image: Tensor,
    pub shape: Option<ShapeSpec>,
}

/// All images sharing one identity.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentitySet {
    pub label: String,
    pub identity: Option<IdentitySpec>,
    pub instances: Vec<Instance>,
}

impl IdentitySet {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn resolution(&self) -> Option<usize> {
        self.instances.first().map(|i| i.image.shape()[2])
    }
}

/// A training or evaluation pair together with its ground-truth fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionSample {
    pub x: Tensor,
    pub y: Tensor,
    pub x_set: usize,
    pub x_index: usize,
    pub y_set: usize,
    pub y_index: usize,
    pub x_identity: Option<IdentitySpec>,
    pub y_identity: Option<IdentitySpec>,
    pub x_shape: Option<ShapeSpec>,
    pub y_shape: Option<ShapeSpec>,
    /// `render(identity(x), shape(y))` when both are known.
    pub oracle: Option<Tensor>,
    pub oracle_landmarks: Option<Vec<Landmark>>,
}

impl FusionSample {
    pub fn same_identity(&self) -> bool {
        self.x_set == self.y_set
    }
}

/// Mixes a list of integers into one 64-bit seed (splitmix64 finaliser).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

fn random_color(rng: &mut ChaCha8Rng) -> Rgb {
    [0, 1, 2].map(|_| rng.gen_range(0..=255u32) as f64 / 255.0)
}

fn random_texture(rng: &mut ChaCha8Rng) -> Texture {
    let period = *[4, 8].choose(rng).unwrap();
    match rng.gen_range(0..3) {
        0 => Texture::Solid,
        1 => Texture::HorizontalStripes { period },
        _ => Texture::Checker { period },
    }
}

fn well_separated(candidate: &IdentitySpec, chosen: &[IdentitySpec]) -> bool {
    let fg = candidate.foreground;
    let tones = candidate.background_tones();
    if tones.iter().any(|&b| rgb_distance(fg, b) < CONTRAST) || candidate.validate().is_err() {
        return false;
    }
    chosen.iter().all(|other| {
        let other_tones = other.background_tones();
        rgb_distance(fg, other.foreground) >= PALETTE_SEPARATION
            && rgb_distance(candidate.background, other.background) >= PALETTE_SEPARATION
            && other_tones.iter().all(|&b| rgb_distance(fg, b) >= PALETTE_SEPARATION)
            && tones.iter().all(|&b| rgb_distance(other.foreground, b) >= PALETTE_SEPARATION)
    })
}

/// Draws `n` pairwise-distinct, mutually well separated identities.
pub fn generate_identities(n: usize, seed: u64) -> Result<Vec<IdentitySpec>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x1d]));
    let mut out: Vec<IdentitySpec> = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > 200_000 {
            return Err(Error::Config(format!("could not find {n} well separated palettes")));
        }
        let candidate = IdentitySpec {
            id: out.len() as u32,
            foreground: random_color(&mut rng),
            background: random_color(&mut rng),
            texture: random_texture(&mut rng),
        };
        if well_separated(&candidate, &out) {
            out.push(candidate);
        }
    }
    Ok(out)
}

/// Draws a glyph geometry that fits inside a `res x res` canvas.
pub fn random_shape(rng: &mut ChaCha8Rng, res: usize) -> ShapeSpec {
    let glyph = Glyph::ALL[rng.gen_range(0..3)];
    let (lo, hi) = glyph.rotation_range();
    let rotation = rng.gen_range(lo..hi);
    let scale = rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1);
    let probe = ShapeSpec {
        glyph,
        center: (0.5, 0.5),
        rotation,
        scale,
    };
    // Half extents of the glyph around its centre, normalised, plus a pixel of margin.
    let (ex, ey) = probe.vertices(res).iter().fold((0f64, 0f64), |(ex, ey), &(x, y)| {
        (ex.max((x / res as f64 - 0.5).abs()), ey.max((y / res as f64 - 0.5).abs()))
    });
    let margin = 1.0 / res as f64;
    let bounds = |e: f64| {
        let lo = CENTER_RANGE.0.max(e + margin);
        let hi = CENTER_RANGE.1.min(1.0 - e - margin);
        if lo <= hi {
            (lo, hi)
        } else {
            (0.5, 0.5)
        }
    };
    let (bx, by) = (bounds(ex), bounds(ey));
    ShapeSpec {
        center: (rng.gen_range(bx.0..=bx.1), rng.gen_range(by.0..=by.1)),
        ..probe
    }
}

/// Renders instance `index` of a set; each instance has its own sub-seed so
/// any subset can be regenerated independently.
pub fn generate_instance(identity: &IdentitySpec, set: usize, index: u64, res: usize, seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x5a, set as u64, index]));
    let shape = random_shape(&mut rng, res);
    Ok(Instance {
        image: render(identity, &shape, res)?,
        shape: Some(shape),
    })
}

fn build_sets(
    identities: &[IdentitySpec],
    indices: impl Iterator<Item = u64> + Clone,
    res: usize,
    seed: u64,
) -> Result<Vec<IdentitySet>> {
    identities
        .iter()
        .enumerate()
        .map(|(s, id)| {
            let instances = indices
                .clone()
                .map(|i| generate_instance(id, s, i, res, seed))
                .collect::<Result<Vec<_>>>()?;
            Ok(IdentitySet {
                label: format!("set_{}", id.id),
                identity: Some(*id),
                instances,
            })
        })
        .collect()
}

/// Procedural dataset: `n_sets` identities with `n_per_set` glyph images each.
pub fn generate_sets(n_sets: usize, n_per_set: usize, res: usize, seed: u64) -> Result<Vec<IdentitySet>> {
    if n_sets < 2 {
        return Err(Error::Config(format!("need at least 2 sets, got {n_sets}")));
    }
    if n_per_set == 0 {
        return Err(Error::Config("n_per_set must be positive".into()));
    }
    let ids = generate_identities(n_sets, seed)?;
    build_sets(&ids, 0..n_per_set as u64, res, seed)
}

/// Fresh images for the same identities as [`generate_sets`], disjoint from the
/// training instances.
pub fn generate_holdout(n_sets: usize, n_per_set: usize, res: usize, seed: u64) -> Result<Vec<IdentitySet>> {
    if n_sets < 2 {
        return Err(Error::Config(format!("need at least 2 sets, got {n_sets}")));
    }
    let ids = generate_identities(n_sets, seed)?;
    build_sets(&ids, HOLDOUT_OFFSET..HOLDOUT_OFFSET + n_per_set as u64, res, seed)
}

/// Assembles the sample for a fixed `(x, y)` choice.
pub fn make_sample(sets: &[IdentitySet], x_set: usize, x_index: usize, y_set: usize, y_index: usize) -> Result<FusionSample> {
    let xs = &sets[x_set];
    let ys = &sets[y_set];
    let x = &xs.instances[x_index];
    let y = &ys.instances[y_index];
    let (oracle, oracle_landmarks) = match (&xs.identity, &y.shape) {
        (Some(id), Some(shape)) => {
            let res = y.image.shape()[2];
            (Some(render(id, shape, res)?), Some(shape.landmarks(res)))
        }
        _ => (None, None),
    };
    Ok(FusionSample {
        x: x.image.clone(),
        y: y.image.clone(),
        x_set,
        x_index,
        y_set,
        y_index,
        x_identity: xs.identity,
        y_identity: ys.identity,
        x_shape: x.shape,
        y_shape: y.shape,
        oracle,
        oracle_landmarks,
    })
}

/// Picks `x` and `y` from one random set (`same_identity`) or from two
/// different random sets.
pub fn sample_pair(sets: &[IdentitySet], same_identity: bool, rng: &mut impl Rng) -> Result<FusionSample> {
    if let Some(empty) = sets.iter().find(|s| s.is_empty()) {
        return Err(Error::Contract(format!("set {} has no images", empty.label)));
    }
    if sets.is_empty() {
        return Err(Error::Contract("no sets to sample from".into()));
    }
    let (xs, ys) = if same_identity {
        let s = rng.gen_range(0..sets.len());
        (s, s)
    } else {
        if sets.len() < 2 {
            return Err(Error::Contract("cross-identity pairs need at least 2 sets".into()));
        }
        let a = rng.gen_range(0..sets.len());
        let b = (a + rng.gen_range(1..sets.len())) % sets.len();
        (a, b)
    };
    let xi = rng.gen_range(0..sets[xs].len());
    let yi = if same_identity && sets[ys].len() > 1 {
        (xi + rng.gen_range(1..sets[ys].len())) % sets[ys].len()
    } else {
        rng.gen_range(0..sets[ys].len())
    };
    make_sample(sets, xs, xi, ys, yi)
}

/// Another image of set `set`, distinct from `exclude` when the set allows it.
pub fn sample_companion(sets: &[IdentitySet], set: usize, exclude: usize, rng: &mut impl Rng) -> Tensor {
    let n = sets[set].len();
    let idx = if n > 1 {
        (exclude + rng.gen_range(1..n)) % n
    } else {
        exclude
    };
    sets[set].instances[idx].image.clone()
}

/// Re-renders every instance in `set` with another identity: used to check
/// that images differ only through identity.
pub fn recolor(set: &IdentitySet, identity: &IdentitySpec) -> Result<Vec<Tensor>> {
    set.instances
        .iter()
        .map(|inst| {
            let shape = inst
                .shape
                .ok_or_else(|| Error::Contract(format!("set {} has no shape records", set.label)))?;
            render(identity, &shape, inst.image.shape()[2])
        })
        .collect()
}

/// True if every value lies on the 8-bit grid.
pub fn on_byte_grid(t: &Tensor) -> bool {
    t.data().iter().all(|&v| quantize(v) == v)
}
