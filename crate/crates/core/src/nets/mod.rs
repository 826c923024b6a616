//! Generator and pair discriminator.
//!
//! Both networks keep their weights in a [`ParamSet`] and are evaluated by
//! binding those weights onto a [`Tape`]; the bound views implement [`Fuse`]
//! and [`Critic`] so the losses can also run against stub networks.

mod checkpoint;
mod discriminator;
mod generator;

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use discriminator::{BoundDiscriminator, Discriminator};
pub use generator::{BoundGenerator, Generator};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Standard deviation of freshly initialised conv weights.
pub const INIT_STD: f64 = 0.02;
/// Negative slope used in the discriminator.
pub const DISC_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;

/// Architecture hyperparameters shared by both networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Image side length in pixels.
    pub res: usize,
    /// Channel count of the first generator layer; deeper layers use multiples.
    pub width: usize,
    /// Side length of the discriminator's patch map.
    pub patch: usize,
    /// Min-pool window applied to the patch map for the generator objective.
    pub pool_k: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            res: 32,
            width: 16,
            patch: 8,
            pool_k: 4,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.res < 16 || !self.res.is_power_of_two() {
            return Err(Error::Config(format!("resolution {} must be a power of two >= 16", self.res)));
        }
        if self.width == 0 {
            return Err(Error::Config("width must be positive".into()));
        }
        if self.patch == 0 || self.res % self.patch != 0 || !(self.res / self.patch).is_power_of_two() || self.res == self.patch {
            return Err(Error::Config(format!(
                "patch map side {} must be res / 2^n with n >= 1 (res {})",
                self.patch, self.res
            )));
        }
        if self.pool_k == 0 || self.patch % self.pool_k != 0 {
            return Err(Error::Config(format!(
                "pool_k {} must divide the patch map side {}",
                self.pool_k, self.patch
            )));
        }
        Ok(())
    }

    /// Number of stride-2 layers in the discriminator.
    pub fn disc_downsamples(&self) -> usize {
        (self.res / self.patch).trailing_zeros() as usize
    }
}

/// Anything that maps an `(x, y)` pair to a fused image on a tape.
pub trait Fuse {
    fn fuse(&self, tape: &mut Tape, x: Var, y: Var) -> Result<Var>;
}

/// Anything that scores an image pair with a `1 x ph x pw` patch map.
pub trait Critic {
    fn critique(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var>;
}

/// Stub generator returning its second input unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct CopySecond;

impl Fuse for CopySecond {
    fn fuse(&self, _tape: &mut Tape, _x: Var, y: Var) -> Result<Var> {
        Ok(y)
    }
}

/// Stub generator returning its first input unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct CopyFirst;

impl Fuse for CopyFirst {
    fn fuse(&self, _tape: &mut Tape, x: Var, _y: Var) -> Result<Var> {
        Ok(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct ConvSlots {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct NormSlots {
    pub gain: usize,
    pub shift: usize,
}

/// Inserts freshly initialised layers into a [`ParamSet`] under a name prefix.
pub(crate) struct LayerBuilder<'a> {
    pub params: &'a mut ParamSet,
    pub rng: &'a mut ChaCha8Rng,
}

impl LayerBuilder<'_> {
    pub fn conv(&mut self, name: &str, out_ch: usize, in_ch: usize, k: usize) -> Result<ConvSlots> {
        let weight = self.params.insert(
            format!("{name}.weight"),
            Tensor::randn(&[out_ch, in_ch, k, k], INIT_STD, self.rng),
        )?;
        let bias = self.params.insert(format!("{name}.bias"), Tensor::zeros(&[out_ch]))?;
        Ok(ConvSlots { weight, bias })
    }

    /// Transposed conv kernels are stored `[in, out, k, k]`.
    pub fn conv_t(&mut self, name: &str, in_ch: usize, out_ch: usize, k: usize) -> Result<ConvSlots> {
        let weight = self.params.insert(
            format!("{name}.weight"),
            Tensor::randn(&[in_ch, out_ch, k, k], INIT_STD, self.rng),
        )?;
        let bias = self.params.insert(format!("{name}.bias"), Tensor::zeros(&[out_ch]))?;
        Ok(ConvSlots { weight, bias })
    }

    pub fn norm(&mut self, name: &str, ch: usize) -> Result<NormSlots> {
        let gain = self.params.insert(format!("{name}.gain"), Tensor::full(&[ch], 1.0))?;
        let shift = self.params.insert(format!("{name}.shift"), Tensor::zeros(&[ch]))?;
        Ok(NormSlots { gain, shift })
    }
}

pub(crate) fn conv(tape: &mut Tape, vars: &[Var], x: Var, c: ConvSlots, stride: usize, pad: usize) -> Result<Var> {
    tape.conv2d(x, vars[c.weight], vars[c.bias], stride, pad)
}

pub(crate) fn norm(tape: &mut Tape, vars: &[Var], x: Var, n: NormSlots) -> Result<Var> {
    tape.instance_norm(x, vars[n.gain], vars[n.shift], NORM_EPS)
}

/// Copies `stored` into a freshly built set after checking names and shapes agree.
pub(crate) fn adopt_params(fresh: &ParamSet, stored: ParamSet, what: &str) -> Result<ParamSet> {
    if fresh.names() != stored.names() {
        return Err(Error::Load(format!("{what} parameter names do not match the architecture")));
    }
    for (name, (a, b)) in fresh.names().iter().zip(fresh.tensors().iter().zip(stored.tensors())) {
        if a.shape() != b.shape() {
            return Err(Error::Load(format!(
                "{what} parameter {name}: expected shape {:?}, found {:?}",
                a.shape(),
                b.shape()
            )));
        }
    }
    Ok(stored)
}

/// Deterministically initialises both networks from `seed`.
pub fn init_params(seed: u64, cfg: NetConfig) -> Result<(Generator, Discriminator)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Generator::init(cfg, &mut rng)?;
    let d = Discriminator::init(cfg, &mut rng)?;
    Ok((g, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(NetConfig::default().validate().is_ok());
        let bad = |f: fn(&mut NetConfig)| {
            let mut c = NetConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.res = 24));
        assert!(bad(|c| c.res = 8));
        assert!(bad(|c| c.patch = 6));
        assert!(bad(|c| c.patch = 32));
        assert!(bad(|c| c.pool_k = 3));
        assert!(bad(|c| c.width = 0));
        assert_eq!(NetConfig::default().disc_downsamples(), 2);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = NetConfig {
            width: 4,
            ..NetConfig::default()
        };
        let (g1, d1) = init_params(5, cfg).unwrap();
        let (g2, d2) = init_params(5, cfg).unwrap();
        assert_eq!(g1.params(), g2.params());
        assert_eq!(d1.params(), d2.params());
        let (g3, _) = init_params(6, cfg).unwrap();
        assert_ne!(g1.params(), g3.params());
    }

    #[test]
    fn parameter_count_matches_layer_arithmetic() {
        // Independent count for the default 32x32 / width-16 configuration.
        let conv = |o: usize, i: usize, k: usize| o * i * k * k + o;
        let norm = |c: usize| 2 * c;
        let res_block = |c: usize| 2 * (conv(c, c, 3) + norm(c));
        let w = 16;
        let branch = conv(w, 3, 7) + norm(w) + conv(2 * w, w, 3) + norm(2 * w) + conv(2 * w, 2 * w, 3) + norm(2 * w)
            + 2 * res_block(2 * w);
        let trunk = 2 * res_block(4 * w);
        let decoder = (4 * w * 2 * w * 16 + 2 * w) + norm(2 * w) + (2 * w * w * 16 + w) + norm(w) + conv(3, 3 * w, 3);
        let expected_g = 2 * branch + trunk + decoder;
        assert_eq!(expected_g, 297_955);

        let disc = conv(w, 6, 4) + conv(2 * w, w, 4) + norm(2 * w) + conv(2 * w, 2 * w, 3) + norm(2 * w) + conv(1, 2 * w, 3);

        let (g, d) = init_params(0, NetConfig::default()).unwrap();
        assert_eq!(g.params().count(), expected_g);
        assert_eq!(d.params().count(), disc);
    }

    #[test]
    fn every_parameter_name_is_unique_and_tagged() {
        let (g, d) = init_params(0, NetConfig::default()).unwrap();
        for set in [g.params(), d.params()] {
            let mut names = set.names().to_vec();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), set.len());
        }
        let bx: Vec<_> = g.params().names().iter().filter(|n| n.starts_with("branch_x.")).collect();
        let by: Vec<_> = g.params().names().iter().filter(|n| n.starts_with("branch_y.")).collect();
        assert_eq!(bx.len(), by.len());
        for (a, b) in bx.iter().zip(&by) {
            assert_eq!(
                g.params().get(a).unwrap().shape(),
                g.params().get(b).unwrap().shape()
            );
            if a.ends_with(".weight") {
                assert_ne!(g.params().get(a), g.params().get(b), "{a} shares weights");
            }
        }
    }
}
