use flowdisagg::autodiff::{ParamStore, Tape, Tensor, Var};
use flowdisagg::flow::{CnfModel, FlowConfig, FlowVars, LayerKind, TraceEvent};
use flowdisagg::Result;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};

const COND: usize = 3;

fn config(channels: usize, blocks: usize, learned_base: bool) -> FlowConfig {
    FlowConfig {
        channels,
        cond_channels: COND,
        hidden: 8,
        n_blocks: blocks,
        conditioned_coupling: true,
        learned_base,
        head_kernel: 3,
    }
}

/// A CNF with every layer moved away from the identity.
fn random_cnf(channels: usize, blocks: usize, seed: u64) -> (CnfModel, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut cnf = CnfModel::new(&mut store, "cnf", &config(channels, blocks, true), &mut rng).unwrap();
    let scale = Uniform::new(0.7f32, 1.3).unwrap();
    let small = Normal::new(0.0f32, 0.1).unwrap();
    for b in &cnf.blocks {
        for v in store.get_mut(b.actnorm.scale).data_mut() {
            *v = scale.sample(&mut rng) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        }
        for id in [b.actnorm.bias, b.coupling.out.weight, b.coupling.out.bias] {
            store
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = small.sample(&mut rng));
        }
    }
    cnf.set_actnorm_flags(&vec![true; blocks]).unwrap();
    (cnf, store)
}

fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f32, _>(StandardNormal))
}

type Layer<'a> = Box<dyn Fn(&mut Tape, Var, Var) -> Result<FlowVars> + 'a>;

/// (name, forward, inverse) for every layer of the first block and for the whole flow.
fn layers<'a>(cnf: &'a CnfModel, store: &'a ParamStore) -> Vec<(&'static str, Layer<'a>, Layer<'a>)> {
    let b = &cnf.blocks[0];
    vec![
        (
            "actnorm",
            Box::new(move |t: &mut Tape, z, _h| b.actnorm.forward(t, store, z)),
            Box::new(move |t: &mut Tape, z, _h| b.actnorm.inverse(t, store, z)),
        ),
        (
            "invconv",
            Box::new(move |t: &mut Tape, z, _h| b.invconv.forward(t, store, z)),
            Box::new(move |t: &mut Tape, z, _h| b.invconv.inverse(t, store, z)),
        ),
        (
            "coupling",
            Box::new(move |t: &mut Tape, z, h| b.coupling.forward(t, store, z, h)),
            Box::new(move |t: &mut Tape, z, h| b.coupling.inverse(t, store, z, h)),
        ),
        (
            "cnf",
            Box::new(move |t: &mut Tape, z, h| cnf.forward(t, store, z, h)),
            Box::new(move |t: &mut Tape, z, h| cnf.inverse(t, store, z, h)),
        ),
    ]
}

#[test]
fn every_layer_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..100u64 {
        let c = [2, 4, 8][trial as usize % 3];
        let t = [4, 8, 16][(trial as usize / 3) % 3];
        let (cnf, store) = random_cnf(c, 8, trial);
        let zt = gaussian(&[c, t], &mut rng);
        let ht = gaussian(&[COND, t / 2], &mut rng);
        for (name, fwd, inv) in layers(&cnf, &store) {
            let mut tape = Tape::new();
            let z = tape.constant(&zt);
            let h = tape.constant(&ht);
            let f = fwd(&mut tape, z, h).unwrap();
            let back = inv(&mut tape, f.code, h).unwrap();
            let err = tape.tensor(back.code).max_abs_diff(&zt);
            let mag = tape.value(f.code).iter().fold(0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-4, "{name}: C={c} T={t} error {err} mag {mag}");
            let fwd_ld = tape.item(f.log_det);
            let vol = fwd_ld + tape.item(back.log_det);
            assert!(
                vol.abs() < 1e-6 * fwd_ld.abs().max(1.0),
                "{name}: log-det bookkeeping off by {vol}"
            );
        }
    }
}

/// `log|det J|` of `code(z)` from central differences in f64.
fn fd_log_det(layer: &Layer<'_>, z: &[f64], shape: &[usize], h: &Tensor) -> f64 {
    let d = z.len();
    let eps = 1e-5;
    let eval = |v: Vec<f64>| {
        let mut tape = Tape::new();
        let zv = tape.constant_f64(shape, v).unwrap();
        let hv = tape.constant(h);
        let r = layer(&mut tape, zv, hv).unwrap();
        tape.value(r.code).to_vec()
    };
    let mut jac = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        let mut plus = z.to_vec();
        plus[j] += eps;
        let mut minus = z.to_vec();
        minus[j] -= eps;
        let (fp, fm) = (eval(plus), eval(minus));
        for i in 0..d {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * eps);
        }
    }
    jac.determinant().abs().ln()
}

#[test]
fn log_det_matches_finite_difference_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shapes = [(2, 4), (4, 4), (2, 8), (4, 2), (8, 2)];
    for trial in 0..20 {
        let (c, t) = shapes[trial % shapes.len()];
        let (cnf, store) = random_cnf(c, 8, 100 + trial as u64);
        let z: Vec<f64> = (0..c * t).map(|_| rng.sample(StandardNormal)).collect();
        let ht = gaussian(&[COND, t], &mut rng);
        for (name, fwd, _) in layers(&cnf, &store) {
            let mut tape = Tape::new();
            let zv = tape.constant_f64(&[c, t], z.clone()).unwrap();
            let hv = tape.constant(&ht);
            let out = fwd(&mut tape, zv, hv).unwrap();
            let analytic = tape.item(out.log_det);
            let numeric = fd_log_det(&fwd, &z, &[c, t], &ht);
            let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
            assert!(
                rel < 1e-3,
                "{name} C={c} T={t}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }
}

#[test]
fn identity_parameters_give_identity_flow() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let mut cnf = CnfModel::new(&mut store, "cnf", &config(4, 3, false), &mut rng).unwrap();
    for b in &cnf.blocks {
        let w = store.get_mut(b.invconv.weight).data_mut();
        w.iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = if i % 5 == 0 { 1.0 } else { 0.0 });
    }
    cnf.set_actnorm_flags(&[true; 3]).unwrap();
    let z = gaussian(&[4, 6], &mut rng);
    let h = gaussian(&[COND, 6], &mut rng);
    let f = cnf.forward_tensor(&store, &z, &h).unwrap();
    assert_eq!(f.code, z);
    assert_eq!(f.log_det, 0.0);
    let inv = cnf.inverse_tensor(&store, &z, &h).unwrap();
    assert_eq!(inv.code, z);
}

#[test]
fn single_block_flow_equals_its_block() {
    let (cnf, store) = random_cnf(4, 1, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let zt = gaussian(&[4, 8], &mut rng);
    let ht = gaussian(&[COND, 4], &mut rng);
    let mut tape = Tape::new();
    let (z, h) = (tape.constant(&zt), tape.constant(&ht));
    let whole = cnf.forward(&mut tape, &store, z, h).unwrap();
    let block = cnf.blocks[0].forward(&mut tape, &store, z, h).unwrap();
    assert_eq!(tape.value(whole.code), tape.value(block.code));
    assert!((tape.item(whole.log_det) - tape.item(block.log_det)).abs() < 1e-12);
}

#[test]
fn inverse_visits_layers_in_reverse() {
    let (cnf, store) = random_cnf(2, 3, 9);
    let mut tape = Tape::new();
    let z = tape.constant(&Tensor::full(&[2, 4], 0.3));
    let h = tape.constant(&Tensor::zeros(&[COND, 4]));
    let mut fwd = Vec::new();
    let f = cnf.forward_traced(&mut tape, &store, z, h, &mut fwd).unwrap();
    let mut inv = Vec::new();
    cnf.inverse_traced(&mut tape, &store, f.code, h, &mut inv).unwrap();
    let expected: Vec<TraceEvent> = (0..3)
        .flat_map(|block| {
            [LayerKind::ActNorm, LayerKind::InvConv, LayerKind::Coupling].map(|layer| TraceEvent { block, layer })
        })
        .collect();
    assert_eq!(fwd, expected);
    inv.reverse();
    assert_eq!(inv, expected);
}

#[test]
fn log_det_is_additive_across_blocks() {
    let (cnf, store) = random_cnf(4, 4, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let zt = gaussian(&[4, 8], &mut rng);
    let ht = gaussian(&[COND, 8], &mut rng);
    let mut tape = Tape::new();
    let (z, h) = (tape.constant(&zt), tape.constant(&ht));
    let whole = cnf.forward(&mut tape, &store, z, h).unwrap();
    let mut code = z;
    let mut sum = 0.0;
    for b in &cnf.blocks {
        let r = b.actnorm.forward(&mut tape, &store, code).unwrap();
        sum += tape.item(r.log_det);
        let r = b.invconv.forward(&mut tape, &store, r.code).unwrap();
        sum += tape.item(r.log_det);
        let r = b.coupling.forward(&mut tape, &store, r.code, h).unwrap();
        sum += tape.item(r.log_det);
        code = r.code;
    }
    assert!((tape.item(whole.log_det) - sum).abs() < 1e-5);
}

#[test]
fn actnorm_only_flow_log_prob_by_hand() {
    // One block, invconv = I, coupling = identity, actnorm s = 2, b = 0.5.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let mut cnf = CnfModel::new(&mut store, "cnf", &config(2, 1, false), &mut rng).unwrap();
    let b = &cnf.blocks[0];
    store
        .get_mut(b.invconv.weight)
        .data_mut()
        .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    store.get_mut(b.actnorm.scale).data_mut().fill(2.0);
    store.get_mut(b.actnorm.bias).data_mut().fill(0.5);
    cnf.set_actnorm_flags(&[true]).unwrap();
    let z0 = Tensor::new(vec![2, 3], vec![0.1, -0.4, 1.0, 0.0, 0.7, -1.2]).unwrap();
    let mut tape = Tape::new();
    let z = tape.constant(&z0);
    let h = tape.constant(&Tensor::zeros(&[COND, 3]));
    let (mu, sigma) = cnf.base.params(&mut tape, &store, h).unwrap();
    let lp = cnf.log_prob(&mut tape, &store, z, h, mu, sigma).unwrap();
    let expected: f64 = z0
        .data()
        .iter()
        .map(|&v| {
            let y = 2.0 * v as f64 + 0.5;
            -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * y * y
        })
        .sum::<f64>()
        + 6.0 * 2f64.ln();
    assert!((tape.item(lp) - expected).abs() < 1e-9);
}

/// Trapezoidal integral of `exp(log p)` over `[-6, 6]^2` on a two-dimensional latent.
fn integrate_density(cnf: &CnfModel, store: &ParamStore, h: &Tensor, n: usize) -> f64 {
    let step = 12.0 / (n - 1) as f64;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let a = -6.0 + i as f64 * step;
            let b = -6.0 + j as f64 * step;
            let mut tape = Tape::new();
            let z = tape.constant_f64(&[2, 1], vec![a, b]).unwrap();
            let hv = tape.constant(h);
            let (mu, sigma) = cnf.base.params(&mut tape, store, hv).unwrap();
            let lp = cnf.log_prob(&mut tape, store, z, hv, mu, sigma).unwrap();
            let w = |k: usize| if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
            total += w(i) * w(j) * tape.item(lp).exp();
        }
    }
    total * step * step
}

#[test]
fn density_integrates_to_one() {
    for seed in 0..3 {
        let (cnf, mut store) = random_cnf(2, 2, 40 + seed);
        // Keep the map close to unit scale so the mass sits inside the grid.
        for b in &cnf.blocks {
            for v in store.get_mut(b.actnorm.scale).data_mut() {
                *v = v.signum() * (0.8 + 0.2 * v.abs());
            }
        }
        if let flowdisagg::flow::ConditionalBase::Learned { mu_head, sigma_head } = &cnf.base {
            for id in [mu_head.weight, mu_head.bias, sigma_head.weight, sigma_head.bias] {
                store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 0.2);
            }
        }
        let h = Tensor::new(vec![COND, 1], vec![0.3, -0.2, 0.5]).unwrap();
        let mass = integrate_density(&cnf, &store, &h, 161);
        assert!((mass - 1.0).abs() < 0.01, "seed {seed}: mass {mass}");
    }
}
