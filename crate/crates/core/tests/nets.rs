use fusiongan::data::{generate_sets, IdentitySet};
use fusiongan::engine::{Tape, Tensor};
use fusiongan::losses::{cycle_losses, shape_loss_s2a, shape_loss_s2b};
use fusiongan::nets::{init_params, Critic, Discriminator, Fuse, Generator, NetConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(res: usize) -> NetConfig {
    NetConfig {
        res,
        width: 4,
        patch: res / 4,
        pool_k: 2,
    }
}

fn pair(res: usize) -> (Tensor, Tensor) {
    let sets: Vec<IdentitySet> = generate_sets(2, 2, res, 11).unwrap();
    (sets[0].instances[0].image.clone(), sets[1].instances[1].image.clone())
}

fn nets(cfg: NetConfig) -> (Generator, Discriminator) {
    init_params(3, cfg).unwrap()
}

#[test]
fn generator_preserves_shape_and_range() {
    for res in [16, 32] {
        let (g, _) = nets(small(res));
        let (x, y) = pair(res);
        let out = g.forward(&x, &y).unwrap();
        assert_eq!(out.shape(), &[3, res, res]);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out, g.forward(&x, &y).unwrap());
    }
}

#[test]
fn generator_rejects_bad_inputs() {
    let (g, _) = nets(small(16));
    let (x, _) = pair(16);
    let (_, big) = pair(32);
    assert!(g.forward(&x, &big).is_err());
    assert!(g.forward(&Tensor::zeros(&[1, 16, 16]), &Tensor::zeros(&[1, 16, 16])).is_err());
    assert!(g.forward(&Tensor::zeros(&[3, 24, 24]), &Tensor::zeros(&[3, 24, 24])).is_err());
}

#[test]
fn input_order_matters() {
    let (g, d) = nets(small(32));
    let (x, y) = pair(32);
    assert_ne!(g.forward(&x, &y).unwrap(), g.forward(&y, &x).unwrap());
    let ab = d.forward(&x, &y).unwrap();
    assert_eq!(ab.shape(), &[1, 8, 8]);
    assert_ne!(ab, d.forward(&y, &x).unwrap());
}

#[test]
fn constant_pairs_give_uniform_interior_patches() {
    let (_, d) = nets(NetConfig::default());
    for level in [0.2, 0.4] {
        let c = Tensor::full(&[3, 32, 32], level);
        let map = d.forward(&c, &c).unwrap();
        // patches whose receptive field stays clear of the zero padding
        let interior: Vec<f64> = [(3, 3), (3, 4), (4, 3), (4, 4)].iter().map(|&(r, c)| map.data()[r * 8 + c]).collect();
        for v in &interior {
            assert!((v - interior[0]).abs() < 1e-12, "{interior:?}");
        }
    }
}

#[test]
fn first_layer_responds_only_near_the_changed_pixel() {
    let (_, d) = nets(NetConfig::default());
    let (x, y) = pair(32);
    let w = d.params().get("disc.down0.weight").unwrap().clone();
    let b = d.params().get("disc.down0.bias").unwrap().clone();
    let features = |a: &Tensor| {
        let mut tape = Tape::new();
        let (av, yv) = (tape.constant(a.clone()), tape.constant(y.clone()));
        let input = tape.concat_channels(av, yv).unwrap();
        let (wv, bv) = (tape.constant(w.clone()), tape.constant(b.clone()));
        let out = tape.conv2d(input, wv, bv, 2, 1).unwrap();
        tape.value(out).clone()
    };
    let base = features(&x);
    let (pr, pc) = (13usize, 20usize);
    let mut data = x.data().to_vec();
    for ch in 0..3 {
        data[ch * 1024 + pr * 32 + pc] = 0.0;
    }
    let poked = features(&Tensor::new(vec![3, 32, 32], data).unwrap());
    let (ch, h, wd) = (base.shape()[0], base.shape()[1], base.shape()[2]);
    let mut changed = 0;
    for c in 0..ch {
        for r in 0..h {
            for col in 0..wd {
                let i = (c * h + r) * wd + col;
                if base.data()[i] != poked.data()[i] {
                    changed += 1;
                    // 4x4 kernel, stride 2, padding 1: output r sees rows 2r-1 ..= 2r+2
                    let sees = |o: usize, p: usize| 2 * o <= p + 1 && p <= 2 * o + 2;
                    assert!(sees(r, pr) && sees(col, pc), "({r}, {col})");
                }
            }
        }
    }
    assert!(changed > 0);
}

#[test]
fn both_inputs_receive_gradient() {
    let (g, _) = nets(small(16));
    let (x, y) = pair(16);
    let target = Tensor::full(&[3, 16, 16], 0.5);
    let mut tape = Tape::new();
    let bound = g.bind(&mut tape, false);
    let xv = tape.leaf(x, true);
    let yv = tape.leaf(y, true);
    let tv = tape.constant(target);
    let out = bound.fuse(&mut tape, xv, yv).unwrap();
    let loss = tape.mean_l1(out, tv).unwrap();
    tape.backward(loss).unwrap();
    for v in [xv, yv] {
        let grad = tape.grad(v).unwrap();
        assert!(grad.iter().any(|g| *g != 0.0));
        assert!(grad.iter().all(|g| g.is_finite()));
    }
}

#[test]
fn generator_parameter_gradients_match_finite_differences() {
    let cfg = small(16);
    let (g, _) = nets(cfg);
    let (x, y) = pair(16);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let weights = Tensor::uniform(&[3, 16, 16], 0.5, 1.5, &mut rng);
    let loss_of = |net: &Generator| {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, true);
        let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
        let out = bound.fuse(&mut tape, xv, yv).unwrap();
        let loss = tape.weighted_sum(out, &weights).unwrap();
        let value = tape.value(loss).item();
        tape.backward(loss).unwrap();
        let grads: Vec<Vec<f64>> = bound.vars().iter().map(|v| tape.grad(*v).map_or(Vec::new(), <[f64]>::to_vec)).collect();
        (value, grads)
    };
    let (_, grads) = loss_of(&g);
    let names = g.params().names().to_vec();
    let probes = [
        ("branch_x.stem.weight", 7),
        ("branch_y.down2.weight", 31),
        ("trunk.res0.conv1.weight", 100),
        ("decoder.up1.weight", 5),
        ("decoder.out.weight", 40),
    ];
    let eps = 1e-5;
    for (name, elem) in probes {
        let slot = names.iter().position(|n| n == name).unwrap_or_else(|| panic!("no {name}"));
        let shifted = |delta: f64| {
            let mut params = g.params().clone();
            let t = params.tensor_mut(slot);
            let mut data = t.data().to_vec();
            data[elem] += delta;
            *t = Tensor::new(t.shape().to_vec(), data).unwrap();
            Generator::from_params(cfg, params).unwrap()
        };
        let numeric = (loss_of(&shifted(eps)).0 - loss_of(&shifted(-eps)).0) / (2.0 * eps);
        let analytic = grads[slot][elem];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(rel < 1e-4, "{name}[{elem}]: analytic {analytic:e}, numeric {numeric:e}");
    }
}

#[test]
fn shared_cycle_call_matches_separate_terms() {
    let cfg = small(16);
    let (g, _) = nets(cfg);
    let (x, y) = pair(16);
    for stop_inner in [false, true] {
        let run = |shared: bool| {
            let mut tape = Tape::new();
            let bound = g.bind(&mut tape, true);
            let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
            let (a, b) = if shared {
                let (a, b) = cycle_losses(&mut tape, &bound, xv, yv, stop_inner, (true, true)).unwrap();
                (a.unwrap(), b.unwrap())
            } else {
                (
                    shape_loss_s2a(&mut tape, &bound, xv, yv, stop_inner).unwrap(),
                    shape_loss_s2b(&mut tape, &bound, xv, yv, stop_inner).unwrap(),
                )
            };
            let values = (tape.value(a).item(), tape.value(b).item());
            let total = tape.add(a, b).unwrap();
            tape.backward(total).unwrap();
            let grads: Vec<f64> = bound.vars().iter().flat_map(|v| tape.grad(*v).unwrap_or(&[]).to_vec()).collect();
            (values, grads)
        };
        let (v1, g1) = run(true);
        let (v2, g2) = run(false);
        assert_eq!(v1, v2);
        assert_eq!(g1.len(), g2.len());
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn discriminator_rejects_mismatched_pairs() {
    let (_, d) = nets(small(16));
    let (x, _) = pair(16);
    let (_, big) = pair(32);
    assert!(d.forward(&x, &big).is_err());
    let mut tape = Tape::new();
    let bound = d.bind(&mut tape, false);
    let a = tape.constant(x.clone());
    let b = tape.constant(Tensor::zeros(&[3, 16]));
    assert!(bound.critique(&mut tape, a, b).is_err());
}
