//! Central finite-difference verification of every backward rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{OpKind, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Perturbation used for the central differences.
pub const FD_EPS: f64 = 1e-5;

/// Pass threshold on the maximum relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// A seeded instance: input tensors plus a scalar-valued program over them.
pub struct GradCase {
    pub inputs: Vec<Tensor>,
    build: Build,
}

impl GradCase {
    fn new(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Self {
        Self {
            inputs,
            build: Box::new(build),
        }
    }

    fn eval(&self, inputs: &[Tensor]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = (self.build)(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    }

    fn analytic(&self, fault: Option<OpKind>) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        if let Some(kind) = fault {
            tape.inject_fault(kind);
        }
        let vars: Vec<Var> = self.inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = (self.build)(&mut tape, &vars)?;
        tape.backward(out)?;
        Ok(vars
            .iter()
            .zip(&self.inputs)
            .map(|(v, t)| tape.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect())
    }

    /// Maximum relative error between tape and finite-difference gradients
    /// over every input element.
    pub fn max_rel_error(&self, fault: Option<OpKind>) -> Result<f64> {
        let analytic = self.analytic(fault)?;
        let mut worst: f64 = 0.0;
        let mut probe = self.inputs.clone();
        for (i, input) in self.inputs.iter().enumerate() {
            for j in 0..input.numel() {
                let orig = input.data()[j];
                probe[i].data_mut()[j] = orig + FD_EPS;
                let up = self.eval(&probe)?;
                probe[i].data_mut()[j] = orig - FD_EPS;
                let down = self.eval(&probe)?;
                probe[i].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * FD_EPS);
                worst = worst.max(relative_error(analytic[i][j], numeric));
            }
        }
        Ok(worst)
    }
}

/// `|a - n| / max(|a|, |n|)`, with an absolute floor for values that are both ~0.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Result of checking one op over several seeded instances.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub op: OpKind,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl GradReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Number of seeded instances checked per op.
pub const INSTANCES_PER_OP: usize = 5;

fn rand_away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let t = Tensor::uniform(shape, 0.1, 1.0, rng);
    let signs: Vec<f64> = (0..t.numel()).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let data = t.data().iter().zip(&signs).map(|(v, s)| v * s).collect();
    Tensor::new(shape.to_vec(), data).expect("shape preserved")
}

/// Projection weights used to reduce a non-scalar output to a scalar.
fn projection(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 0.5, 1.5, rng)
}

/// Builds instance `index` of the gradcheck for `op`.
pub fn case_for(op: OpKind, seed: u64, index: usize) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ op as u64);
    match op {
        OpKind::Conv2d => {
            let stride = 1 + index % 2;
            let pad = index % 3 % 2;
            let x = Tensor::randn(&[2, 5, 5], 1.0, &mut rng);
            let k = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
            let b = Tensor::randn(&[3], 1.0, &mut rng);
            let oh = (5 + 2 * pad - 3) / stride + 1;
            let w = projection(&[3, oh, oh], &mut rng);
            GradCase::new(vec![x, k, b], move |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride, pad)?;
                t.weighted_sum(y, &w)
            })
        }
        OpKind::TransposedConv2d => {
            let stride = 1 + index % 2;
            let pad = index % 2;
            let x = Tensor::randn(&[2, 3, 3], 1.0, &mut rng);
            let k = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut rng);
            let b = Tensor::randn(&[3], 1.0, &mut rng);
            let oh = 2 * stride - 2 * pad + 3;
            let w = projection(&[3, oh, oh], &mut rng);
            GradCase::new(vec![x, k, b], move |t, v| {
                let y = t.transposed_conv2d(v[0], v[1], v[2], stride, pad)?;
                t.weighted_sum(y, &w)
            })
        }
        OpKind::LeakyRelu => {
            let slope = [0.2, 0.0, 0.1, 0.5, 0.3][index % 5];
            let x = rand_away_from_zero(&[2, 4, 4], &mut rng);
            let w = projection(&[2, 4, 4], &mut rng);
            GradCase::new(vec![x], move |t, v| {
                let y = t.leaky_relu(v[0], slope)?;
                t.weighted_sum(y, &w)
            })
        }
        OpKind::InstanceNorm => {
            let x = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
            let g = Tensor::uniform(&[2], 0.5, 1.5, &mut rng);
            let s = Tensor::randn(&[2], 1.0, &mut rng);
            let w = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
            GradCase::new(vec![x, g, s], move |t, v| {
                let y = t.instance_norm(v[0], v[1], v[2], 1e-5)?;
                t.weighted_sum(y, &w)
            })
        }
        OpKind::MinPool2d => {
            // A shuffled ladder keeps every window minimum unique by a wide margin.
            let n = 16;
            let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - 0.8).collect();
            for i in (1..n).rev() {
                vals.swap(i, rng.gen_range(0..=i));
            }
            let x = Tensor::new(vec![1, 4, 4], vals).expect("16 values");
            let w = projection(&[1, 2, 2], &mut rng);
            GradCase::new(vec![x], move |t, v| {
                let y = t.min_pool2d(v[0], 2)?;
                t.weighted_sum(y, &w)
            })
        }
        OpKind::ConcatChannels => {
            let a = Tensor::randn(&[1, 3, 3], 1.0, &mut rng);
            let b = Tensor::randn(&[2, 3, 3], 1.0, &mut rng);
            let w = projection(&[3, 3, 3], &mut rng);
            GradCase::new(vec![a, b], move |t, v| {
                let y = t.concat_channels(v[0], v[1])?;
                t.weighted_sum(y, &w)
            })
        }
        OpKind::SliceChannels => {
            let x = Tensor::randn(&[4, 2, 3], 1.0, &mut rng);
            let start = index % 3;
            let w = projection(&[2, 2, 3], &mut rng);
            GradCase::new(vec![x], move |t, v| {
                let y = t.slice_channels(v[0], start, 2)?;
                t.weighted_sum(y, &w)
            })
        }
        OpKind::MeanL1 => {
            let a = Tensor::randn(&[2, 3, 3], 1.0, &mut rng);
            let d = rand_away_from_zero(&[2, 3, 3], &mut rng);
            let b = Tensor::new(
                vec![2, 3, 3],
                a.data().iter().zip(d.data()).map(|(x, y)| x + y).collect(),
            )
            .expect("same shape");
            GradCase::new(vec![a, b], |t, v| t.mean_l1(v[0], v[1]))
        }
        OpKind::MeanSq => {
            let x = Tensor::randn(&[2, 3, 3], 1.0, &mut rng);
            let target = rng.gen_range(-1.0..1.0);
            GradCase::new(vec![x], move |t, v| t.mean_sq(v[0], target))
        }
        OpKind::Add => {
            let a = Tensor::randn(&[2, 2, 3], 1.0, &mut rng);
            let b = Tensor::randn(&[2, 2, 3], 1.0, &mut rng);
            let w = projection(&[2, 2, 3], &mut rng);
            GradCase::new(vec![a, b], move |t, v| {
                let y = t.add(v[0], v[1])?;
                t.weighted_sum(y, &w)
            })
        }
        OpKind::Scale => {
            let x = Tensor::randn(&[3, 2, 2], 1.0, &mut rng);
            let factor = rng.gen_range(-2.0..2.0);
            let w = projection(&[3, 2, 2], &mut rng);
            GradCase::new(vec![x], move |t, v| {
                let y = t.scale(v[0], factor)?;
                t.weighted_sum(y, &w)
            })
        }
        OpKind::Sum => {
            let x = Tensor::randn(&[2, 3, 2], 1.0, &mut rng);
            GradCase::new(vec![x], |t, v| t.sum(v[0]))
        }
        OpKind::WeightedSum => {
            let x = Tensor::randn(&[2, 3, 2], 1.0, &mut rng);
            let w = Tensor::randn(&[2, 3, 2], 1.0, &mut rng);
            GradCase::new(vec![x], move |t, v| t.weighted_sum(v[0], &w))
        }
        OpKind::Tanh01 => {
            let x = Tensor::randn(&[2, 3, 3], 1.0, &mut rng);
            let w = projection(&[2, 3, 3], &mut rng);
            GradCase::new(vec![x], move |t, v| {
                let y = t.tanh01(v[0])?;
                t.weighted_sum(y, &w)
            })
        }
    }
}

/// Checks `op` over [`INSTANCES_PER_OP`] seeded instances.
pub fn check_op(op: OpKind, seed: u64, fault: Option<OpKind>) -> Result<GradReport> {
    let mut worst: f64 = 0.0;
    for index in 0..INSTANCES_PER_OP {
        worst = worst.max(case_for(op, seed, index).max_rel_error(fault)?);
    }
    Ok(GradReport {
        op,
        instances: INSTANCES_PER_OP,
        max_rel_error: worst,
    })
}

/// Runs the whole registry, or just `only` when given.
pub fn run_suite(seed: u64, only: Option<OpKind>, fault: Option<OpKind>) -> Result<Vec<GradReport>> {
    OpKind::ALL
        .into_iter()
        .filter(|op| only.map_or(true, |o| o == *op))
        .map(|op| check_op(op, seed, fault))
        .collect()
}
