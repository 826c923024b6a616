use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adopt_params, conv, norm, ConvSlots, Fuse, LayerBuilder, NetConfig, NormSlots};
use crate::engine::{ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
struct ResidualSlots {
    conv1: ConvSlots,
    norm1: NormSlots,
    conv2: ConvSlots,
    norm2: NormSlots,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct BranchSlots {
    stem: ConvSlots,
    stem_norm: NormSlots,
    down1: ConvSlots,
    down1_norm: NormSlots,
    down2: ConvSlots,
    down2_norm: NormSlots,
    res: [ResidualSlots; 2],
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Layout {
    branch_x: BranchSlots,
    branch_y: BranchSlots,
    trunk: [ResidualSlots; 2],
    up1: ConvSlots,
    up1_norm: NormSlots,
    up2: ConvSlots,
    up2_norm: NormSlots,
    out: ConvSlots,
}

fn residual(b: &mut LayerBuilder, name: &str, ch: usize) -> Result<ResidualSlots> {
    Ok(ResidualSlots {
        conv1: b.conv(&format!("{name}.conv1"), ch, ch, 3)?,
        norm1: b.norm(&format!("{name}.norm1"), ch)?,
        conv2: b.conv(&format!("{name}.conv2"), ch, ch, 3)?,
        norm2: b.norm(&format!("{name}.norm2"), ch)?,
    })
}

fn branch(b: &mut LayerBuilder, name: &str, w: usize) -> Result<BranchSlots> {
    Ok(BranchSlots {
        stem: b.conv(&format!("{name}.stem"), w, 3, 7)?,
        stem_norm: b.norm(&format!("{name}.stem_norm"), w)?,
        down1: b.conv(&format!("{name}.down1"), 2 * w, w, 3)?,
        down1_norm: b.norm(&format!("{name}.down1_norm"), 2 * w)?,
        down2: b.conv(&format!("{name}.down2"), 2 * w, 2 * w, 3)?,
        down2_norm: b.norm(&format!("{name}.down2_norm"), 2 * w)?,
        res: [
            residual(b, &format!("{name}.res0"), 2 * w)?,
            residual(b, &format!("{name}.res1"), 2 * w)?,
        ],
    })
}

/// Two-branch encoder, shared residual trunk, and a transposed-conv decoder
/// whose last stage also sees both branches' full-resolution features.
///
/// ```text
/// x ─ stem7 ─ down3/2 ─ down3/2 ─ res ─ res ─┐
///       └──────────────── skip ─────────┐    ├─ cat ─ res ─ res ─ up4/2 ─ up4/2 ─┐
/// y ─ stem7 ─ down3/2 ─ down3/2 ─ res ─ res ─┘                                   │
///       └──────────────── skip ─────────┴──────────────────────────── cat ─ conv3 ─ tanh01
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    cfg: NetConfig,
    params: ParamSet,
    layout: Layout,
}

impl Generator {
    pub(crate) fn init(cfg: NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut params = ParamSet::new();
        let layout = Self::build(cfg, &mut params, rng)?;
        Ok(Self { cfg, params, layout })
    }

    fn build(cfg: NetConfig, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<Layout> {
        let w = cfg.width;
        let mut b = LayerBuilder { params, rng };
        Ok(Layout {
            branch_x: branch(&mut b, "branch_x", w)?,
            branch_y: branch(&mut b, "branch_y", w)?,
            trunk: [residual(&mut b, "trunk.res0", 4 * w)?, residual(&mut b, "trunk.res1", 4 * w)?],
            up1: b.conv_t("decoder.up1", 4 * w, 2 * w, 4)?,
            up1_norm: b.norm("decoder.up1_norm", 2 * w)?,
            up2: b.conv_t("decoder.up2", 2 * w, w, 4)?,
            up2_norm: b.norm("decoder.up2_norm", w)?,
            out: b.conv("decoder.out", 3, 3 * w, 3)?,
        })
    }

    /// Wraps stored parameters, checking they fit the architecture of `cfg`.
    pub fn from_params(cfg: NetConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let fresh = Self::init(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        let params = adopt_params(&fresh.params, params, "generator")?;
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

    /// Inference-only forward pass on a private tape.
    pub fn forward(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let g = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let out = g.fuse(&mut tape, xv, yv)?;
        Ok(tape.value(out).clone())
    }

    /// Records the weights on `tape`. With `trainable` false the weights are
    /// constants and only inputs can receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundGenerator<'_> {
        BoundGenerator {
            net: self,
            vars: self.params.bind(tape, trainable),
        }
    }
}

/// A [`Generator`] whose weights live on a tape.
pub struct BoundGenerator<'a> {
    net: &'a Generator,
    vars: Vec<Var>,
}

impl BoundGenerator<'_> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn residual(&self, tape: &mut Tape, x: Var, r: &ResidualSlots) -> Result<Var> {
        let v = &self.vars;
        let h = conv(tape, v, x, r.conv1, 1, 1)?;
        let h = norm(tape, v, h, r.norm1)?;
        let h = tape.relu(h)?;
        let h = conv(tape, v, h, r.conv2, 1, 1)?;
        let h = norm(tape, v, h, r.norm2)?;
        tape.add(x, h)
    }

    /// Returns `(full-resolution features, encoded features)`.
    fn branch(&self, tape: &mut Tape, x: Var, b: &BranchSlots) -> Result<(Var, Var)> {
        let v = &self.vars;
        let h = conv(tape, v, x, b.stem, 1, 3)?;
        let h = norm(tape, v, h, b.stem_norm)?;
        let skip = tape.relu(h)?;
        let h = conv(tape, v, skip, b.down1, 2, 1)?;
        let h = norm(tape, v, h, b.down1_norm)?;
        let h = tape.relu(h)?;
        let h = conv(tape, v, h, b.down2, 2, 1)?;
        let h = norm(tape, v, h, b.down2_norm)?;
        let mut h = tape.relu(h)?;
        for r in &b.res {
            h = self.residual(tape, h, r)?;
        }
        Ok((skip, h))
    }
}

fn check_inputs(tape: &Tape, x: Var, y: Var) -> Result<()> {
    const OP: &str = "generator_forward";
    let (cx, hx, wx) = tape.value(x).dims3(OP)?;
    let (cy, hy, wy) = tape.value(y).dims3(OP)?;
    let dim = |axis, expected, got| Error::Dimension {
        op: OP,
        axis,
        expected,
        got,
    };
    if cx != 3 {
        return Err(dim("channels", 3, cx));
    }
    if cy != 3 {
        return Err(dim("channels", 3, cy));
    }
    if hx != hy {
        return Err(dim("height", hx, hy));
    }
    if wx != wy {
        return Err(dim("width", wx, wy));
    }
    if hx < 16 || !hx.is_power_of_two() {
        return Err(dim("height", hx.next_power_of_two().max(16), hx));
    }
    if wx < 16 || !wx.is_power_of_two() {
        return Err(dim("width", wx.next_power_of_two().max(16), wx));
    }
    Ok(())
}

impl Fuse for BoundGenerator<'_> {
    fn fuse(&self, tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
        check_inputs(tape, x, y)?;
        let l = &self.net.layout;
        let v = &self.vars;
        let (skip_x, enc_x) = self.branch(tape, x, &l.branch_x)?;
        let (skip_y, enc_y) = self.branch(tape, y, &l.branch_y)?;
        let mut h = tape.concat_channels(enc_x, enc_y)?;
        for r in &l.trunk {
            h = self.residual(tape, h, r)?;
        }
        let h = tape.transposed_conv2d(h, v[l.up1.weight], v[l.up1.bias], 2, 1)?;
        let h = norm(tape, v, h, l.up1_norm)?;
        let h = tape.relu(h)?;
        let h = tape.transposed_conv2d(h, v[l.up2.weight], v[l.up2.bias], 2, 1)?;
        let h = norm(tape, v, h, l.up2_norm)?;
        let h = tape.relu(h)?;
        let skips = tape.concat_channels(skip_x, skip_y)?;
        let h = tape.concat_channels(h, skips)?;
        let h = conv(tape, v, h, l.out, 1, 1)?;
        tape.tanh01(h)
    }
}
