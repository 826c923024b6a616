use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adopt_params, conv, norm, ConvSlots, Critic, LayerBuilder, NetConfig, NormSlots, DISC_SLOPE};
use crate::engine::{ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    /// Stride-2 4x4 convs; every layer but the first is normalised.
    down: Vec<(ConvSlots, Option<NormSlots>)>,
    mid: ConvSlots,
    mid_norm: NormSlots,
    out: ConvSlots,
}

/// Pair discriminator: the two images are stacked channel-wise (6 channels)
/// and mapped to an unbounded `1 x patch x patch` score map.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    cfg: NetConfig,
    params: ParamSet,
    layout: Layout,
}

impl Discriminator {
    pub(crate) fn init(cfg: NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut params = ParamSet::new();
        let w = cfg.width;
        let mut b = LayerBuilder {
            params: &mut params,
            rng,
        };
        let mut down = Vec::new();
        let mut ch_in = 6;
        for i in 0..cfg.disc_downsamples() {
            let ch_out = (w << i).min(8 * w);
            let c = b.conv(&format!("disc.down{i}"), ch_out, ch_in, 4)?;
            let n = if i == 0 {
                None
            } else {
                Some(b.norm(&format!("disc.down{i}_norm"), ch_out)?)
            };
            down.push((c, n));
            ch_in = ch_out;
        }
        let layout = Layout {
            down,
            mid: b.conv("disc.mid", ch_in, ch_in, 3)?,
            mid_norm: b.norm("disc.mid_norm", ch_in)?,
            out: b.conv("disc.out", 1, ch_in, 3)?,
        };
        Ok(Self { cfg, params, layout })
    }

    pub fn from_params(cfg: NetConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let fresh = Self::init(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        let params = adopt_params(&fresh.params, params, "discriminator")?;
        Ok(Self { params, ..fresh })
    }

    pub fn config(&self) -> NetConfig {
        self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundDiscriminator<'_> {
        BoundDiscriminator {
            net: self,
            vars: self.params.bind(tape, trainable),
        }
    }

    /// Inference-only patch map for the pair `(a, b)`.
    pub fn forward(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let d = self.bind(&mut tape, false);
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let out = d.critique(&mut tape, av, bv)?;
        Ok(tape.value(out).clone())
    }
}

pub struct BoundDiscriminator<'a> {
    net: &'a Discriminator,
    vars: Vec<Var>,
}

impl BoundDiscriminator<'_> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Critic for BoundDiscriminator<'_> {
    fn critique(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (tape.value(a).shape().to_vec(), tape.value(b).shape().to_vec());
        if sa != sb {
            let axis = if sa.len() != sb.len() { "rank" } else { "pair" };
            return Err(Error::Dimension {
                op: "discriminator_forward",
                axis,
                expected: sa.iter().product(),
                got: sb.iter().product(),
            });
        }
        let l = &self.net.layout;
        let v = &self.vars;
        let mut h = tape.concat_channels(a, b)?;
        for (c, n) in &l.down {
            h = conv(tape, v, h, *c, 2, 1)?;
            if let Some(n) = n {
                h = norm(tape, v, h, *n)?;
            }
            h = tape.leaky_relu(h, DISC_SLOPE)?;
        }
        h = conv(tape, v, h, l.mid, 1, 1)?;
        h = norm(tape, v, h, l.mid_norm)?;
        h = tape.leaky_relu(h, DISC_SLOPE)?;
        conv(tape, v, h, l.out, 1, 1)
    }
}
