use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};

/// Supersampling factor per axis.
const SUPERSAMPLE: usize = 4;

/// Resolutions the renderer accepts.
pub const SUPPORTED_RES: [usize; 3] = [16, 32, 64];

/// Snaps a value onto the 8-bit grid used by PNG storage.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

pub type Rgb = [f64; 3];

pub fn rgb_distance(a: Rgb, b: Rgb) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Solid,
    HorizontalStripes { period: usize },
    Checker { period: usize },
}

/// Set-level rendering style.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub id: u32,
    pub foreground: Rgb,
    pub background: Rgb,
    pub texture: Texture,
}

impl IdentitySpec {
    /// Second background tone used by striped and checkered textures.
    pub fn background_alt(&self) -> Rgb {
        self.background.map(|c| quantize(0.75 * c + 0.125))
    }

    /// Background colours actually present in renders.
    pub fn background_tones(&self) -> Vec<Rgb> {
        match self.texture {
            Texture::Solid => vec![self.background],
            _ => vec![self.background, self.background_alt()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let legible = self
            .foreground
            .iter()
            .zip(&self.background)
            .any(|(f, b)| (f - b).abs() >= 0.3);
        if !legible {
            return Err(Error::Spec(format!(
                "identity {}: foreground and background differ by < 0.3 in every channel",
                self.id
            )));
        }
        if self.foreground.iter().chain(&self.background).any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Spec(format!("identity {}: colour outside [0, 1]", self.id)));
        }
        match self.texture {
            Texture::HorizontalStripes { period } | Texture::Checker { period } if period < 2 => {
                Err(Error::Spec(format!("identity {}: texture period must be >= 2", self.id)))
            }
            _ => Ok(()),
        }
    }

    /// Background colour at pixel `(row, col)`.
    pub fn background_at(&self, row: usize, col: usize) -> Rgb {
        let alt = match self.texture {
            Texture::Solid => false,
            Texture::HorizontalStripes { period } => (row / (period / 2)) % 2 == 1,
            Texture::Checker { period } => (row / (period / 2) + col / (period / 2)) % 2 == 1,
        };
        if alt {
            self.background_alt()
        } else {
            self.background
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Glyph {
    Triangle,
    Square,
    Bar,
}

impl Glyph {
    pub const ALL: [Glyph; 3] = [Glyph::Triangle, Glyph::Square, Glyph::Bar];

    /// Rotation period of the glyph's symmetry group.
    pub fn symmetry_period(self) -> f64 {
        match self {
            Glyph::Triangle => 2.0 * PI / 3.0,
            Glyph::Square => FRAC_PI_2,
            Glyph::Bar => PI,
        }
    }

    /// Rotations are drawn from this window so landmark names stay unambiguous.
    pub fn rotation_range(self) -> (f64, f64) {
        let p = self.symmetry_period();
        (0.1 * p, 0.9 * p)
    }

    /// Area in units of `(scale * res)^2`.
    pub fn unit_area(self) -> f64 {
        match self {
            Glyph::Square => 1.0,
            Glyph::Triangle => 3f64.sqrt() / 4.0 * TRIANGLE_SIDE * TRIANGLE_SIDE,
            Glyph::Bar => BAR_LENGTH * BAR_THICKNESS,
        }
    }
}

const TRIANGLE_SIDE: f64 = 1.3;
const BAR_LENGTH: f64 = 1.4;
const BAR_THICKNESS: f64 = 0.35;

/// A named keypoint in continuous pixel coordinates (pixel `(r, c)` spans
/// `[c, c+1) x [r, r+1)`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub name: String,
    pub x: f64,
    pub y: f64,
}

/// Instance-level glyph geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub glyph: Glyph,
    /// Normalised centre in `[0.15, 0.85]^2`.
    pub center: (f64, f64),
    pub rotation: f64,
    /// Size as a fraction of the image width, in `[0.25, 0.45]`.
    pub scale: f64,
}

pub const SCALE_RANGE: (f64, f64) = (0.25, 0.45);
pub const CENTER_RANGE: (f64, f64) = (0.15, 0.85);

impl ShapeSpec {
    /// Polygon vertices in pixel coordinates, counter-clockwise in image space.
    pub fn vertices(&self, res: usize) -> Vec<(f64, f64)> {
        let s = self.scale * res as f64;
        let (cx, cy) = (self.center.0 * res as f64, self.center.1 * res as f64);
        let th = self.rotation;
        let polar = |r: f64, a: f64| (cx + r * a.cos(), cy + r * a.sin());
        match self.glyph {
            Glyph::Square => {
                let r = s / 2f64.sqrt();
                (0..4).map(|k| polar(r, th + FRAC_PI_4 + k as f64 * FRAC_PI_2)).collect()
            }
            Glyph::Triangle => {
                let r = TRIANGLE_SIDE * s / 3f64.sqrt();
                (0..3)
                    .map(|k| polar(r, th - FRAC_PI_2 + k as f64 * 2.0 * PI / 3.0))
                    .collect()
            }
            Glyph::Bar => {
                let (hl, ht) = (BAR_LENGTH * s / 2.0, BAR_THICKNESS * s / 2.0);
                let (c, sn) = (th.cos(), th.sin());
                [(hl, ht), (-hl, ht), (-hl, -ht), (hl, -ht)]
                    .iter()
                    .map(|(u, v)| (cx + u * c - v * sn, cy + u * sn + v * c))
                    .collect()
            }
        }
    }

    /// The four named keypoints of the glyph.
    pub fn landmarks(&self, res: usize) -> Vec<Landmark> {
        let v = self.vertices(res);
        let lm = |name: &str, p: (f64, f64)| Landmark {
            name: name.to_string(),
            x: p.0,
            y: p.1,
        };
        let centroid = {
            let n = v.len() as f64;
            (v.iter().map(|p| p.0).sum::<f64>() / n, v.iter().map(|p| p.1).sum::<f64>() / n)
        };
        let mid = |a: (f64, f64), b: (f64, f64)| ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);
        match self.glyph {
            Glyph::Triangle => vec![
                lm("vertex0", v[0]),
                lm("vertex1", v[1]),
                lm("vertex2", v[2]),
                lm("centroid", centroid),
            ],
            Glyph::Square => vec![
                lm("corner0", v[0]),
                lm("corner1", v[1]),
                lm("corner2", v[2]),
                lm("centroid", centroid),
            ],
            Glyph::Bar => vec![
                lm("end0", mid(v[0], v[3])),
                lm("end1", mid(v[1], v[2])),
                lm("edge0", mid(v[0], v[1])),
                lm("edge1", mid(v[2], v[3])),
            ],
        }
    }

    pub fn validate(&self, res: usize) -> Result<()> {
        if !(SCALE_RANGE.0..=SCALE_RANGE.1).contains(&self.scale) {
            return Err(Error::Spec(format!("scale {} outside {:?}", self.scale, SCALE_RANGE)));
        }
        let (lo, hi) = CENTER_RANGE;
        if !(lo..=hi).contains(&self.center.0) || !(lo..=hi).contains(&self.center.1) {
            return Err(Error::Spec(format!("centre {:?} outside [{lo}, {hi}]^2", self.center)));
        }
        let side = res as f64;
        for (x, y) in self.vertices(res) {
            if !(0.0..=side).contains(&x) || !(0.0..=side).contains(&y) {
                return Err(Error::Spec(format!(
                    "{:?} glyph leaves the {res}x{res} canvas at ({x:.2}, {y:.2})",
                    self.glyph
                )));
            }
        }
        Ok(())
    }
}

/// Half-plane form of a convex polygon for point-in-polygon tests.
pub(crate) struct ConvexPolygon {
    edges: Vec<(f64, f64, f64)>,
    bbox: (f64, f64, f64, f64),
}

impl ConvexPolygon {
    pub fn new(vertices: &[(f64, f64)]) -> Self {
        // Orient edges so the interior is where a*x + b*y + c >= 0.
        let n = vertices.len();
        let area2: f64 = (0..n)
            .map(|i| {
                let (p, q) = (vertices[i], vertices[(i + 1) % n]);
                p.0 * q.1 - q.0 * p.1
            })
            .sum();
        let sign = if area2 >= 0.0 { 1.0 } else { -1.0 };
        let edges = (0..n)
            .map(|i| {
                let (p, q) = (vertices[i], vertices[(i + 1) % n]);
                let a = -(q.1 - p.1) * sign;
                let b = (q.0 - p.0) * sign;
                let c = -(a * p.0 + b * p.1);
                (a, b, c)
            })
            .collect();
        let xs = vertices.iter().map(|p| p.0);
        let ys = vertices.iter().map(|p| p.1);
        let bbox = (
            xs.clone().fold(f64::INFINITY, f64::min),
            xs.fold(f64::NEG_INFINITY, f64::max),
            ys.clone().fold(f64::INFINITY, f64::min),
            ys.fold(f64::NEG_INFINITY, f64::max),
        );
        Self { edges, bbox }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.edges.iter().all(|(a, b, c)| a * x + b * y + c >= 0.0)
    }

    /// Fraction of `SUPERSAMPLE^2` sub-pixel samples inside the polygon.
    pub fn coverage(&self, row: usize, col: usize) -> f64 {
        let (x0, y0) = (col as f64, row as f64);
        if x0 + 1.0 < self.bbox.0 || x0 > self.bbox.1 || y0 + 1.0 < self.bbox.2 || y0 > self.bbox.3 {
            return 0.0;
        }
        let step = 1.0 / SUPERSAMPLE as f64;
        let mut hits = 0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let px = x0 + (sx as f64 + 0.5) * step;
                let py = y0 + (sy as f64 + 0.5) * step;
                if self.contains(px, py) {
                    hits += 1;
                }
            }
        }
        hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
    }
}

pub(crate) fn render_polygon(shape: &ShapeSpec, res: usize) -> ConvexPolygon {
    ConvexPolygon::new(&shape.vertices(res))
}

/// Rasterises `shape` in the style of `identity` as a `3 x res x res` image
/// on the 8-bit value grid.
pub fn render(identity: &IdentitySpec, shape: &ShapeSpec, res: usize) -> Result<Tensor> {
    if !SUPPORTED_RES.contains(&res) {
        return Err(Error::Spec(format!("resolution {res} not in {SUPPORTED_RES:?}")));
    }
    identity.validate()?;
    shape.validate(res)?;
    let poly = render_polygon(shape, res);
    let plane = res * res;
    let mut data = vec![0.0; 3 * plane];
    for row in 0..res {
        for col in 0..res {
            let cov = poly.coverage(row, col);
            let bg = identity.background_at(row, col);
            for ch in 0..3 {
                let v = cov * identity.foreground[ch] + (1.0 - cov) * bg[ch];
                data[ch * plane + row * res + col] = quantize(v);
            }
        }
    }
    Tensor::new(vec![3, res, res], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid() -> IdentitySpec {
        IdentitySpec {
            id: 0,
            foreground: [1.0, 0.2, 0.0],
            background: [0.0, 0.0, 0.4],
            texture: Texture::Solid,
        }
    }

    fn centered_square() -> ShapeSpec {
        ShapeSpec {
            glyph: Glyph::Square,
            center: (0.5, 0.5),
            rotation: 0.0,
            scale: 0.4,
        }
    }

    fn pixel(img: &Tensor, row: usize, col: usize) -> Rgb {
        let res = img.shape()[1];
        let d = img.data();
        [0, 1, 2].map(|c| d[c * res * res + row * res + col])
    }

    #[test]
    fn render_is_deterministic() {
        let shape = ShapeSpec {
            glyph: Glyph::Triangle,
            center: (0.45, 0.55),
            rotation: 0.7,
            scale: 0.33,
        };
        let id = IdentitySpec {
            texture: Texture::Checker { period: 4 },
            ..solid()
        };
        assert_eq!(render(&id, &shape, 32).unwrap(), render(&id, &shape, 32).unwrap());
    }

    #[test]
    fn center_pixel_is_foreground() {
        let id = solid();
        let img = render(&id, &centered_square(), 32).unwrap();
        assert_eq!(pixel(&img, 16, 16), id.foreground.map(quantize));
        assert_eq!(pixel(&img, 0, 0), id.background.map(quantize));
    }

    #[test]
    fn boundary_landmarks_sit_on_a_transition() {
        let id = solid();
        for glyph in Glyph::ALL {
            let (lo, hi) = glyph.rotation_range();
            for step in 0..5 {
                let shape = ShapeSpec {
                    glyph,
                    center: (0.5, 0.5),
                    rotation: lo + (hi - lo) * step as f64 / 4.0,
                    scale: 0.3,
                };
                let img = render(&id, &shape, 32).unwrap();
                for lm in shape.landmarks(32).iter().filter(|l| l.name != "centroid") {
                    let (r0, c0) = (lm.y.floor() as isize, lm.x.floor() as isize);
                    let mut saw_fg = false;
                    let mut saw_bg = false;
                    for dr in -1..=1 {
                        for dc in -1..=1 {
                            let (r, c) = ((r0 + dr).clamp(0, 31) as usize, (c0 + dc).clamp(0, 31) as usize);
                            let p = pixel(&img, r, c);
                            let bg = id.background.map(quantize);
                            saw_fg |= p != bg;
                            saw_bg |= p == bg;
                        }
                    }
                    assert!(saw_fg && saw_bg, "{glyph:?} {} has no transition", lm.name);
                }
            }
        }
    }

    #[test]
    fn glyph_outside_canvas_is_rejected() {
        let shape = ShapeSpec {
            glyph: Glyph::Bar,
            center: (0.15, 0.5),
            rotation: 0.1,
            scale: 0.45,
        };
        assert!(matches!(render(&solid(), &shape, 32), Err(Error::Spec(_))));
        assert!(matches!(render(&solid(), &centered_square(), 48), Err(Error::Spec(_))));
    }

    #[test]
    fn illegible_palette_is_rejected() {
        let id = IdentitySpec {
            foreground: [0.5, 0.5, 0.5],
            background: [0.6, 0.4, 0.55],
            ..solid()
        };
        assert!(id.validate().is_err());
    }

    #[test]
    fn area_matches_unit_area() {
        let id = solid();
        for glyph in Glyph::ALL {
            let shape = ShapeSpec {
                glyph,
                center: (0.5, 0.5),
                rotation: glyph.rotation_range().0,
                scale: 0.35,
            };
            let img = render(&id, &shape, 64).unwrap();
            // Red channel goes 0 -> 1 with coverage.
            let covered: f64 = img.data()[..64 * 64].iter().sum();
            let expected = glyph.unit_area() * (0.35f64 * 64.0).powi(2);
            assert!((covered - expected).abs() / expected < 0.02, "{glyph:?}: {covered} vs {expected}");
        }
    }
}
