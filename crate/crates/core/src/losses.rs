//! Training objectives. Every function records onto the caller's tape and
//! returns a scalar [`Var`]; which parameters receive gradients is decided by
//! how the networks were bound.

use serde::{Deserialize, Serialize};

use crate::engine::{Tape, Var};
use crate::error::{Error, Result};
use crate::nets::{Critic, Fuse};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight on the two cycle terms relative to the same-set term.
    pub alpha: f64,
    /// Weight on every shape update relative to the identity updates.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got alpha {} beta {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// How the generator reads the discriminator's patch map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenObjective {
    /// Score only the worst `k x k` pooled patch.
    pub min_patch: bool,
    pub pool_k: usize,
    /// Maximise the fake-pair term of the identity loss as written instead of
    /// pulling fake scores toward the real label.
    pub literal_max: bool,
}

/// Discriminator side of the identity loss: real pairs `(x, x_hat)` toward 1,
/// fake pairs `(x, g_out)` toward 0. `g_out` is detached here.
pub fn identity_loss_d(tape: &mut Tape, d: &impl Critic, x: Var, x_hat: Var, g_out: Var) -> Result<Var> {
    let fake = tape.detach(g_out);
    let real_map = d.critique(tape, x, x_hat)?;
    let fake_map = d.critique(tape, x, fake)?;
    let real = tape.mean_sq(real_map, 1.0)?;
    let fake = tape.mean_sq(fake_map, 0.0)?;
    tape.add(real, fake)
}

/// Generator side of the identity loss. Bind `d` with frozen weights so only
/// the generator is updated.
pub fn identity_loss_g(tape: &mut Tape, d: &impl Critic, x: Var, g_out: Var, obj: GenObjective) -> Result<Var> {
    let map = d.critique(tape, x, g_out)?;
    let map = if obj.min_patch {
        tape.min_pool2d(map, obj.pool_k)?
    } else {
        map
    };
    if obj.literal_max {
        let fake = tape.mean_sq(map, 0.0)?;
        tape.scale(fake, -1.0)
    } else {
        tape.mean_sq(map, 1.0)
    }
}

/// Same-set reconstruction: `|y - G(x, y)|`.
pub fn shape_loss_s1(tape: &mut Tape, g: &impl Fuse, x: Var, y: Var) -> Result<Var> {
    let out = g.fuse(tape, x, y)?;
    tape.mean_l1(y, out)
}

/// Cycle back to `y`: `|y - G(y, G(x, y))|`. With `stop_inner` the inner call
/// is treated as a constant.
pub fn shape_loss_s2a(tape: &mut Tape, g: &impl Fuse, x: Var, y: Var, stop_inner: bool) -> Result<Var> {
    let inner = g.fuse(tape, x, y)?;
    let inner = if stop_inner { tape.detach(inner) } else { inner };
    let outer = g.fuse(tape, y, inner)?;
    tape.mean_l1(y, outer)
}

/// Re-fusion stability: `|G(x, y) - G(G(x, y), y)|`.
pub fn shape_loss_s2b(tape: &mut Tape, g: &impl Fuse, x: Var, y: Var, stop_inner: bool) -> Result<Var> {
    let inner = g.fuse(tape, x, y)?;
    let fed = if stop_inner { tape.detach(inner) } else { inner };
    let outer = g.fuse(tape, fed, y)?;
    tape.mean_l1(inner, outer)
}

/// Both cycle terms from one shared inner `G(x, y)` call. Either term can be
/// skipped; skipped terms come back as `None`.
pub fn cycle_losses(
    tape: &mut Tape,
    g: &impl Fuse,
    x: Var,
    y: Var,
    stop_inner: bool,
    want: (bool, bool),
) -> Result<(Option<Var>, Option<Var>)> {
    if !want.0 && !want.1 {
        return Ok((None, None));
    }
    let inner = g.fuse(tape, x, y)?;
    let fed = if stop_inner { tape.detach(inner) } else { inner };
    let a = if want.0 {
        let outer = g.fuse(tape, y, fed)?;
        Some(tape.mean_l1(y, outer)?)
    } else {
        None
    };
    let b = if want.1 {
        let outer = g.fuse(tape, fed, y)?;
        Some(tape.mean_l1(inner, outer)?)
    } else {
        None
    };
    Ok((a, b))
}

/// `L_S1(x2, y2) + alpha * (L_S2a(x, y) + L_S2b(x, y))` with `(x2, y2)` a
/// same-set pair and `(x, y)` a cross-set pair.
pub fn total_shape_loss(
    tape: &mut Tape,
    g: &impl Fuse,
    x: Var,
    y: Var,
    x2: Var,
    y2: Var,
    w: LossWeights,
) -> Result<Var> {
    let s1 = shape_loss_s1(tape, g, x2, y2)?;
    let a = shape_loss_s2a(tape, g, x, y, false)?;
    let b = shape_loss_s2b(tape, g, x, y, false)?;
    let cycle = tape.add(a, b)?;
    let cycle = tape.scale(cycle, w.alpha)?;
    tape.add(s1, cycle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Tensor;
    use crate::nets::{init_params, CopyFirst, CopySecond, NetConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Critic returning a fixed patch map for the first call and another for
    /// every later call.
    struct Scripted {
        first: Tensor,
        rest: Tensor,
        calls: std::cell::Cell<usize>,
    }

    impl Scripted {
        fn constant(map: Tensor) -> Self {
            Self::new(map.clone(), map)
        }

        fn new(first: Tensor, rest: Tensor) -> Self {
            Self {
                first,
                rest,
                calls: std::cell::Cell::new(0),
            }
        }
    }

    impl Critic for Scripted {
        fn critique(&self, tape: &mut Tape, _a: Var, _b: Var) -> Result<Var> {
            let n = self.calls.get();
            self.calls.set(n + 1);
            Ok(tape.constant(if n == 0 { self.first.clone() } else { self.rest.clone() }))
        }
    }

    /// Returns `y + offset`.
    struct Shifted(f64);

    impl Fuse for Shifted {
        fn fuse(&self, tape: &mut Tape, _x: Var, y: Var) -> Result<Var> {
            let shift = tape.constant(tape.value(y).map(|_| self.0));
            tape.add(y, shift)
        }
    }

    fn img(rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::uniform(&[3, 16, 16], 0.0, 1.0, rng)
    }

    const OBJ: GenObjective = GenObjective {
        min_patch: true,
        pool_k: 2,
        literal_max: false,
    };

    #[test]
    fn discriminator_loss_closed_forms() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 16, 16]));
        let perfect = Scripted::new(Tensor::full(&[1, 4, 4], 1.0), Tensor::zeros(&[1, 4, 4]));
        let l = identity_loss_d(&mut tape, &perfect, x, x, x).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let unsure = Scripted::constant(Tensor::full(&[1, 4, 4], 0.5));
        let l = identity_loss_d(&mut tape, &unsure, x, x, x).unwrap();
        assert_eq!(tape.value(l).item(), 0.5);
    }

    #[test]
    fn generator_loss_closed_forms() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 16, 16]));
        let fooled = Scripted::constant(Tensor::full(&[1, 4, 4], 1.0));
        for min_patch in [true, false] {
            let obj = GenObjective { min_patch, ..OBJ };
            let l = identity_loss_g(&mut tape, &fooled, x, x, obj).unwrap();
            assert_eq!(tape.value(l).item(), 0.0);
        }
        let map = Tensor::new(vec![1, 2, 2], vec![0.2, 0.9, 0.5, 0.1]).unwrap();
        let d = Scripted::constant(map);
        let l = identity_loss_g(&mut tape, &d, x, x, OBJ).unwrap();
        assert!((tape.value(l).item() - 0.81).abs() < 1e-12);
        let off = GenObjective { min_patch: false, ..OBJ };
        let l = identity_loss_g(&mut tape, &d, x, x, off).unwrap();
        assert!((tape.value(l).item() - 0.4275).abs() < 1e-12);
        let literal = GenObjective { literal_max: true, ..off };
        let l = identity_loss_g(&mut tape, &d, x, x, literal).unwrap();
        assert!((tape.value(l).item() + (0.04 + 0.81 + 0.25 + 0.01) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn bad_pool_size_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 16, 16]));
        let d = Scripted::constant(Tensor::zeros(&[1, 4, 4]));
        let obj = GenObjective { pool_k: 3, ..OBJ };
        assert!(matches!(identity_loss_g(&mut tape, &d, x, x, obj), Err(Error::Dimension { .. })));
    }

    #[test]
    fn min_patch_dominates_every_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            // dominance needs every score at or below the real target
            let map = Tensor::uniform(&[1, 4, 4], -1.0, 1.0, &mut rng);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::zeros(&[3, 16, 16]));
            let d = Scripted::constant(map.clone());
            let obj = GenObjective { pool_k: 4, ..OBJ };
            let pooled = identity_loss_g(&mut tape, &d, x, x, obj).unwrap();
            let pooled = tape.value(pooled).item();
            let plain = identity_loss_g(&mut tape, &d, x, x, GenObjective { min_patch: false, ..obj }).unwrap();
            let plain = tape.value(plain).item();
            // Brute force: the worst single patch.
            let min = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(pooled, (1.0 - min).powi(2));
            for v in map.data() {
                assert!(pooled >= (1.0 - v).powi(2) - 1e-15);
            }
            assert!(pooled >= plain - 1e-15);
        }
    }

    #[test]
    fn copy_second_is_a_fixed_point_of_every_shape_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(img(&mut rng));
        let y = tape.constant(img(&mut rng));
        let g = CopySecond;
        for v in [
            shape_loss_s1(&mut tape, &g, x, y).unwrap(),
            shape_loss_s2a(&mut tape, &g, x, y, false).unwrap(),
            shape_loss_s2b(&mut tape, &g, x, y, false).unwrap(),
        ] {
            assert_eq!(tape.value(v).item(), 0.0);
        }
        for alpha in [0.0, 1.0, 7.5] {
            let w = LossWeights { alpha, beta: 10.0 };
            let t = total_shape_loss(&mut tape, &g, x, y, x, y, w).unwrap();
            assert_eq!(tape.value(t).item(), 0.0);
        }
    }

    #[test]
    fn copy_first_escapes_the_cycle_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let x = tape.constant(img(&mut rng));
        let y = tape.constant(img(&mut rng));
        let a = shape_loss_s2a(&mut tape, &CopyFirst, x, y, false).unwrap();
        let b = shape_loss_s2b(&mut tape, &CopyFirst, x, y, false).unwrap();
        assert_eq!(tape.value(a).item(), 0.0);
        assert_eq!(tape.value(b).item(), 0.0);
        let s1 = shape_loss_s1(&mut tape, &CopyFirst, x, y).unwrap();
        assert!(tape.value(s1).item() > 0.1);
    }

    #[test]
    fn constant_offset_costs_the_offset() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 16, 16]));
        let y = tape.constant(Tensor::full(&[3, 16, 16], 0.4));
        let l = shape_loss_s1(&mut tape, &Shifted(0.1), x, y).unwrap();
        assert!((tape.value(l).item() - 0.1).abs() < 1e-12);
    }

    fn tiny() -> NetConfig {
        NetConfig {
            res: 16,
            width: 2,
            patch: 4,
            pool_k: 2,
        }
    }

    #[test]
    fn real_network_losses_match_recomputation() {
        let (g, d) = init_params(1, tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (xt, yt, ht) = (img(&mut rng), img(&mut rng), img(&mut rng));
        let mut tape = Tape::new();
        let bg = g.bind(&mut tape, true);
        let bd = d.bind(&mut tape, false);
        let x = tape.constant(xt.clone());
        let y = tape.constant(yt.clone());
        let xh = tape.constant(ht.clone());

        let s1 = shape_loss_s1(&mut tape, &bg, x, y).unwrap();
        let fxy = g.forward(&xt, &yt).unwrap();
        assert_eq!(tape.value(s1).item(), fxy.mean_abs_diff(&yt));

        let s2a = shape_loss_s2a(&mut tape, &bg, x, y, false).unwrap();
        let back = g.forward(&yt, &fxy).unwrap();
        assert_eq!(tape.value(s2a).item(), yt.mean_abs_diff(&back));

        let s2b = shape_loss_s2b(&mut tape, &bg, x, y, false).unwrap();
        let again = g.forward(&fxy, &yt).unwrap();
        assert_eq!(tape.value(s2b).item(), fxy.mean_abs_diff(&again));

        let (a, b) = cycle_losses(&mut tape, &bg, x, y, false, (true, true)).unwrap();
        assert_eq!(tape.value(a.unwrap()).item(), tape.value(s2a).item());
        assert_eq!(tape.value(b.unwrap()).item(), tape.value(s2b).item());

        let w = LossWeights { alpha: 1.0, beta: 10.0 };
        let total = total_shape_loss(&mut tape, &bg, x, y, x, y, w).unwrap();
        let expected = tape.value(s1).item() + (tape.value(s2a).item() + tape.value(s2b).item());
        assert!((tape.value(total).item() - expected).abs() < 1e-15);
        let s1_only = total_shape_loss(&mut tape, &bg, x, y, x, y, LossWeights { alpha: 0.0, ..w }).unwrap();
        assert_eq!(tape.value(s1_only).item(), tape.value(s1).item());

        let gout = tape.constant(fxy.clone());
        let ld = identity_loss_d(&mut tape, &bd, x, xh, gout).unwrap();
        let real = d.forward(&xt, &ht).unwrap();
        let fake = d.forward(&xt, &fxy).unwrap();
        let msq = |t: &Tensor, target: f64| t.data().iter().map(|v| (v - target).powi(2)).sum::<f64>() / t.numel() as f64;
        assert!((tape.value(ld).item() - (msq(&real, 1.0) + msq(&fake, 0.0))).abs() < 1e-15);
    }

    #[test]
    fn discriminator_loss_sends_no_gradient_to_the_generator() {
        let (g, d) = init_params(2, tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let bg = g.bind(&mut tape, true);
        let bd = d.bind(&mut tape, true);
        let x = tape.constant(img(&mut rng));
        let y = tape.constant(img(&mut rng));
        let out = bg.fuse(&mut tape, x, y).unwrap();
        let l = identity_loss_d(&mut tape, &bd, x, y, out).unwrap();
        tape.backward(l).unwrap();
        assert!(bg.vars().iter().all(|&v| tape.grad(v).is_none()));
        assert!(bd.vars().iter().any(|&v| tape.grad(v).is_some_and(|g| g.iter().any(|&e| e != 0.0))));
    }

    #[test]
    fn generator_loss_leaves_frozen_discriminator_alone() {
        let (g, d) = init_params(2, tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let bg = g.bind(&mut tape, true);
        let bd = d.bind(&mut tape, false);
        let x = tape.constant(img(&mut rng));
        let y = tape.constant(img(&mut rng));
        let out = bg.fuse(&mut tape, x, y).unwrap();
        let l = identity_loss_g(&mut tape, &bd, x, out, OBJ).unwrap();
        tape.backward(l).unwrap();
        assert!(bd.vars().iter().all(|&v| tape.grad(v).is_none()));
        assert!(bg.vars().iter().any(|&v| tape.grad(v).is_some_and(|g| g.iter().any(|&e| e != 0.0))));
    }

    #[test]
    fn cycle_gradient_reaches_both_branches() {
        let (g, _) = init_params(3, tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let bg = g.bind(&mut tape, true);
        let x = tape.constant(img(&mut rng));
        let y = tape.constant(img(&mut rng));
        let a = shape_loss_s2a(&mut tape, &bg, x, y, false).unwrap();
        let b = shape_loss_s2b(&mut tape, &bg, x, y, false).unwrap();
        let l = tape.add(a, b).unwrap();
        tape.backward(l).unwrap();
        for prefix in ["branch_x.", "branch_y."] {
            let reached = g
                .params()
                .names()
                .iter()
                .zip(bg.vars())
                .filter(|(n, _)| n.starts_with(prefix))
                .any(|(_, &v)| tape.grad(v).is_some_and(|g| g.iter().any(|&e| e != 0.0)));
            assert!(reached, "{prefix} received no gradient");
        }
    }

    #[test]
    fn stop_gradient_variant_changes_gradients_not_values() {
        let (g, _) = init_params(4, tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (xt, yt) = (img(&mut rng), img(&mut rng));
        let run = |stop: bool| {
            let mut tape = Tape::new();
            let bg = g.bind(&mut tape, true);
            let x = tape.constant(xt.clone());
            let y = tape.constant(yt.clone());
            let l = shape_loss_s2a(&mut tape, &bg, x, y, stop).unwrap();
            tape.backward(l).unwrap();
            let v = tape.value(l).item();
            let grads: Vec<f64> = bg.vars().iter().flat_map(|&v| tape.grad(v).unwrap_or(&[]).to_vec()).collect();
            (v, grads)
        };
        let (v_full, g_full) = run(false);
        let (v_stop, g_stop) = run(true);
        assert_eq!(v_full, v_stop);
        assert_ne!(g_full, g_stop);
    }

    proptest! {
        #[test]
        fn losses_are_non_negative(seed in 0u64..1000, shift in -0.3f64..0.3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let x = tape.constant(img(&mut rng));
            let y = tape.constant(img(&mut rng));
            let map = Tensor::uniform(&[1, 4, 4], -1.0, 2.0, &mut rng);
            let d = Scripted::constant(map);
            let g = Shifted(shift);
            let vals = [
                identity_loss_d(&mut tape, &d, x, y, x).unwrap(),
                identity_loss_g(&mut tape, &d, x, y, OBJ).unwrap(),
                shape_loss_s1(&mut tape, &g, x, y).unwrap(),
                shape_loss_s2a(&mut tape, &g, x, y, false).unwrap(),
                shape_loss_s2b(&mut tape, &g, x, y, false).unwrap(),
            ];
            for v in vals {
                prop_assert!(tape.value(v).item() >= 0.0);
            }
        }
    }
}
