use serde::{Deserialize, Serialize};

use crate::data::{Glyph, IdentitySpec, Landmark, ShapeSpec};
use crate::engine::Tensor;
use crate::error::{Error, Result};

/// Default Gaussian width as a fraction of the image side.
pub const SIGMA_FRAC: f64 = 0.1;
/// Miss penalty in pixels at 256 px, rescaled to the actual resolution.
pub const PENALTY_PX: f64 = 100.0;
/// Smallest glyph component, as a fraction of the image area.
const MIN_AREA_FRAC: f64 = 0.01;
const ANGLE_STEPS: usize = 72;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectedPoint {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub present: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<DetectedPoint>,
    pub res: usize,
}

impl LandmarkSet {
    pub fn from_truth(landmarks: &[Landmark], res: usize) -> Self {
        Self {
            points: landmarks
                .iter()
                .map(|l| DetectedPoint {
                    name: l.name.clone(),
                    x: l.x,
                    y: l.y,
                    present: true,
                })
                .collect(),
            res,
        }
    }

    pub fn absent(k: usize, res: usize) -> Self {
        Self {
            points: (0..k)
                .map(|i| DetectedPoint {
                    name: format!("point{i}"),
                    x: 0.0,
                    y: 0.0,
                    present: false,
                })
                .collect(),
            res,
        }
    }

    pub fn any_present(&self) -> bool {
        self.points.iter().any(|p| p.present)
    }
}

/// Per-pixel glyph coverage implied by `identity`: each pixel is projected
/// onto the segment from its background tone to the foreground colour.
pub fn soft_mask(img: &Tensor, identity: &IdentitySpec) -> Result<Vec<f64>> {
    let (c, h, w) = img.dims3("soft_mask")?;
    if c != 3 {
        return Err(Error::Dimension {
            op: "soft_mask",
            axis: "channels",
            expected: 3,
            got: c,
        });
    }
    let d = img.data();
    let plane = h * w;
    let fg = identity.foreground;
    let mut out = vec![0.0; plane];
    for row in 0..h {
        for col in 0..w {
            let bg = identity.background_at(row, col);
            let i = row * w + col;
            let (mut num, mut den) = (0.0, 0.0);
            for ch in 0..3 {
                let dir = fg[ch] - bg[ch];
                num += (d[ch * plane + i] - bg[ch]) * dir;
                den += dir * dir;
            }
            out[i] = if den > 0.0 { (num / den).clamp(0.0, 1.0) } else { 0.0 };
        }
    }
    Ok(out)
}

/// Largest 4-connected component of `mask > 0.5`, as pixel indices.
fn largest_component(mask: &[f64], h: usize, w: usize) -> Vec<usize> {
    let mut seen = vec![false; mask.len()];
    let mut best: Vec<usize> = Vec::new();
    for start in 0..mask.len() {
        if seen[start] || mask[start] <= 0.5 {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        let mut head = 0;
        while head < comp.len() {
            let i = comp[head];
            head += 1;
            let (r, c) = (i / w, i % w);
            let mut push = |j: usize| {
                if !seen[j] && mask[j] > 0.5 {
                    seen[j] = true;
                    comp.push(j);
                }
            };
            if r > 0 {
                push(i - w);
            }
            if r + 1 < h {
                push(i + w);
            }
            if c > 0 {
                push(i - 1);
            }
            if c + 1 < w {
                push(i + 1);
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best
}

/// Coverage of a candidate glyph on a 2x2 sub-sample grid, restricted to a window.
fn template_score(shape: &ShapeSpec, res: usize, mask: &[f64], window: (usize, usize, usize, usize)) -> f64 {
    let poly = crate::data::render_polygon(shape, res);
    let (r0, r1, c0, c1) = window;
    let (mut inter, mut union) = (0.0, 0.0);
    for r in r0..r1 {
        for c in c0..c1 {
            let mut hits = 0.0;
            for (dy, dx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                if poly.contains(c as f64 + dx, r as f64 + dy) {
                    hits += 0.25;
                }
            }
            let m = mask[r * res + c];
            inter += f64::min(m, hits);
            union += f64::max(m, hits);
        }
    }
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Fits a glyph template to the identity's foreground mask and reads the
/// template's landmarks. All points are absent when no mask component covers
/// at least 1% of the image.
pub fn detect_landmarks(img: &Tensor, identity: &IdentitySpec) -> Result<LandmarkSet> {
    let mask = soft_mask(img, identity)?;
    let (_, h, w) = img.dims3("detect_landmarks")?;
    if h != w {
        return Err(Error::Dimension {
            op: "detect_landmarks",
            axis: "width",
            expected: h,
            got: w,
        });
    }
    let res = h;
    let comp = largest_component(&mask, h, w);
    if (comp.len() as f64) < MIN_AREA_FRAC * (res * res) as f64 {
        return Ok(LandmarkSet::absent(4, res));
    }

    // Soft moments over the component grown by one pixel, so anti-aliased
    // edge pixels are counted.
    let mut region = vec![false; mask.len()];
    for &i in &comp {
        let (r, c) = (i / w, i % w);
        for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
            for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                region[rr * w + cc] = true;
            }
        }
    }
    let (mut area, mut mx, mut my) = (0.0, 0.0, 0.0);
    let (mut r0, mut r1, mut c0, mut c1) = (h, 0, w, 0);
    for (i, _) in region.iter().enumerate().filter(|(_, &on)| on) {
        let (r, c) = (i / w, i % w);
        let m = mask[i];
        area += m;
        mx += m * (c as f64 + 0.5);
        my += m * (r as f64 + 0.5);
        r0 = r0.min(r);
        r1 = r1.max(r + 1);
        c0 = c0.min(c);
        c1 = c1.max(c + 1);
    }
    let center = (mx / area / res as f64, my / area / res as f64);
    let pad = 2;
    let window = (
        r0.saturating_sub(pad),
        (r1 + pad).min(h),
        c0.saturating_sub(pad),
        (c1 + pad).min(w),
    );
    let mut region_mask = vec![0.0; mask.len()];
    for (i, on) in region.iter().enumerate() {
        if *on {
            region_mask[i] = mask[i];
        }
    }

    let mut best: Option<(f64, ShapeSpec)> = None;
    for glyph in Glyph::ALL {
        let scale = (area / glyph.unit_area()).sqrt() / res as f64;
        let period = glyph.symmetry_period();
        let probe = |rotation: f64| ShapeSpec {
            glyph,
            center,
            rotation,
            scale,
        };
        let mut local: Option<(f64, f64)> = None;
        for k in 0..ANGLE_STEPS {
            let th = period * k as f64 / ANGLE_STEPS as f64;
            let s = template_score(&probe(th), res, &region_mask, window);
            if local.map_or(true, |(b, _)| s > b) {
                local = Some((s, th));
            }
        }
        let (mut score, mut th) = local.expect("at least one angle");
        let mut step = period / ANGLE_STEPS as f64;
        for _ in 0..4 {
            step /= 2.0;
            for cand in [th - step, th + step] {
                let s = template_score(&probe(cand), res, &region_mask, window);
                if s > score {
                    score = s;
                    th = cand;
                }
            }
        }
        let th = th.rem_euclid(period);
        if best.as_ref().map_or(true, |(b, _)| score > *b) {
            best = Some((score, probe(th)));
        }
    }
    let (_, shape) = best.expect("three glyph candidates");
    let side = res as f64;
    Ok(LandmarkSet {
        points: shape
            .landmarks(res)
            .into_iter()
            .map(|l| DetectedPoint {
                present: (0.0..=side).contains(&l.x) && (0.0..=side).contains(&l.y),
                name: l.name,
                x: l.x,
                y: l.y,
            })
            .collect(),
        res,
    })
}

/// Keypoint similarity: mean over reference-present points of
/// `exp(-d^2 / 2 sigma^2)`, with `sigma = sigma_frac * res` and a missed
/// detection scored at distance `penalty_px * res / 256`.
pub fn modified_oks(reference: &LandmarkSet, generated: &LandmarkSet, sigma_frac: f64, penalty_px: f64) -> Result<f64> {
    if reference.points.len() != generated.points.len() {
        return Err(Error::Contract(format!(
            "landmark count mismatch: reference {}, generated {}",
            reference.points.len(),
            generated.points.len()
        )));
    }
    if reference.res != generated.res {
        return Err(Error::Contract(format!(
            "resolution mismatch: reference {}, generated {}",
            reference.res, generated.res
        )));
    }
    let side = reference.res as f64;
    let sigma = sigma_frac * side;
    let penalty = penalty_px * side / 256.0;
    let mut total = 0.0;
    let mut n = 0;
    for (r, g) in reference.points.iter().zip(&generated.points) {
        if !r.present {
            continue;
        }
        let d2 = if g.present {
            (r.x - g.x).powi(2) + (r.y - g.y).powi(2)
        } else {
            penalty * penalty
        };
        total += (-d2 / (2.0 * sigma * sigma)).exp();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Contract("reference has no present landmarks".into()));
    }
    Ok(total / n as f64)
}
