//! Central finite-difference checks for every differentiable operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reglat::losses::{
    dice_loss, dice_loss_grad, direction_loss, jacobian_loss, jacobian_loss_grad, ncc_loss, ncc_loss_grad,
    smoothness_loss, smoothness_loss_grad, DirectionInputs, LossWeights,
};
use reglat::nn::{
    conv3_backward, conv3_forward, down_backward, down_forward, instance_norm_backward, instance_norm_forward,
    leaky_relu, leaky_relu_backward, up_backward, up_forward, FeatureMap,
};
use reglat::regnet::{ArchConfig, LatentCode, RegNet};
use reglat::volgrid::{SegMap, Shape, Volume};
use reglat::warp::{
    integrate_backward, integrate_spatial_gradients, jacobian_backward, jacobian_determinant_map,
    raw_activation_backward, warp_backward, warp_channels, DeformationGrid, GradientField,
};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms against it:
/// with a 1e-5 step on an O(1) loss, f64 round-off alone puts ~1e-10 of noise
/// on the central difference.
pub const FLOOR: f64 = 1e-5;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Largest relative error between `analytic` and the central difference of
/// `f` at `x`, over the coordinates in `idx`.
///
/// Piecewise-linear activations put kinks into the loss. When a central
/// stencil straddles one, the coordinate is re-checked with second-order
/// one-sided differences (same step); the analytic value must then match the
/// kink-free side to the same tolerance.
pub fn fd_max_err(x: &[f64], analytic: &[f64], idx: &[usize], f: impl Fn(&[f64]) -> f64) -> f64 {
    fd_check(x, analytic, idx, f).0
}

/// As [`fd_max_err`], also returning how many coordinates needed the
/// one-sided re-check.
pub fn fd_check(x: &[f64], analytic: &[f64], idx: &[usize], f: impl Fn(&[f64]) -> f64) -> (f64, usize) {
    let mut xp = x.to_vec();
    let mut eval = |i: usize, d: f64| {
        let orig = xp[i];
        xp[i] = orig + d;
        let v = f(&xp);
        xp[i] = orig;
        v
    };
    let mut worst: f64 = 0.0;
    let mut one_sided = 0;
    for &i in idx {
        let (fp, fm) = (eval(i, STEP), eval(i, -STEP));
        let mut err = rel_err(analytic[i], (fp - fm) / (2.0 * STEP));
        if err > TOL {
            let f0 = eval(i, 0.0);
            let fwd = (-3.0 * f0 + 4.0 * fp - eval(i, 2.0 * STEP)) / (2.0 * STEP);
            let bwd = (3.0 * f0 - 4.0 * fm + eval(i, -2.0 * STEP)) / (2.0 * STEP);
            // only a genuine kink makes the two sides disagree
            if rel_err(fwd, bwd) > TOL {
                err = rel_err(analytic[i], fwd).min(rel_err(analytic[i], bwd));
                one_sided += 1;
            }
        }
        worst = worst.max(err);
    }
    (worst, one_sided)
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const S5: Shape = [5, 5, 5];
const N5: usize = 125;

/// Smooth random grid near identity, kept away from the clamped border.
fn jittered_grid(rng: &mut ChaCha8Rng, shape: Shape, amp: f64) -> DeformationGrid {
    let id = integrate_spatial_gradients(&GradientField::uniform(shape, 1.0));
    let phi: Vec<f64> = id
        .phi()
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let len = shape[i / (shape[0] * shape[1] * shape[2])] as f64;
            (p + rng.random_range(-amp..amp)).clamp(0.3, len - 1.3)
        })
        .collect();
    DeformationGrid::new(shape, phi).unwrap()
}

fn grid_fn(shape: Shape, f: impl Fn(&DeformationGrid) -> f64) -> impl Fn(&[f64]) -> f64 {
    move |p: &[f64]| f(&DeformationGrid::new(shape, p.to_vec()).unwrap())
}

pub fn warp_ops(seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // raw -> increments (away from the kink at r = -1)
    let raw = rand_vec(&mut rng, 3 * N5, -0.5, 0.5);
    let w = rand_vec(&mut rng, 3 * N5, -1.0, 1.0);
    let g = raw_activation_backward(&raw, &w);
    let e = fd_max_err(&raw, &g, &all(raw.len()), |r| {
        dot(GradientField::from_raw(S5, r).unwrap().inc(), &w)
    });
    out.push(("warp/activation".into(), e));

    // integration
    let inc = rand_vec(&mut rng, 3 * N5, 0.2, 2.0);
    let g = integrate_backward(S5, &w);
    let e = fd_max_err(&inc, &g, &all(inc.len()), |x| {
        dot(
            integrate_spatial_gradients(&GradientField::new(S5, x.to_vec()).unwrap()).phi(),
            &w,
        )
    });
    out.push(("warp/integrate".into(), e));

    // trilinear warp: source and grid
    let grid = jittered_grid(&mut rng, S5, 0.45);
    let src = rand_vec(&mut rng, 2 * N5, 0.0, 1.0);
    let wo = rand_vec(&mut rng, 2 * N5, -1.0, 1.0);
    let (gs, gp) = warp_backward(&src, 2, &grid, &wo).unwrap();
    let e = fd_max_err(&src, &gs, &all(src.len()), |s| {
        dot(&warp_channels(s, 2, &grid).unwrap(), &wo)
    });
    out.push(("warp/trilinear-source".into(), e));
    let e = fd_max_err(
        grid.phi(),
        &gp,
        &all(3 * N5),
        grid_fn(S5, |g| dot(&warp_channels(&src, 2, g).unwrap(), &wo)),
    );
    out.push(("warp/trilinear-grid".into(), e));

    // Jacobian determinant
    let grid = jittered_grid(&mut rng, S5, 0.8);
    let wd = rand_vec(&mut rng, N5, -1.0, 1.0);
    let gj = jacobian_backward(&grid, &wd).unwrap();
    let e = fd_max_err(
        grid.phi(),
        &gj,
        &all(3 * N5),
        grid_fn(S5, |g| dot(&jacobian_determinant_map(g).unwrap().det, &wd)),
    );
    out.push(("warp/jacobian-determinant".into(), e));
    out
}

pub fn loss_ops(seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let a = rand_vec(&mut rng, N5, 0.0, 1.0);
    let b = rand_vec(&mut rng, N5, 0.0, 1.0);
    for window in [0usize, 3] {
        let (_, ga, gb) = ncc_loss_grad(&a, &b, S5, window).unwrap();
        let ea = fd_max_err(&a, &ga, &all(N5), |x| ncc_loss(x, &b, S5, window).unwrap());
        let eb = fd_max_err(&b, &gb, &all(N5), |x| ncc_loss(&a, x, S5, window).unwrap());
        out.push((format!("loss/ncc-window{window}"), ea.max(eb)));
    }

    let labels = 2;
    let pred = rand_vec(&mut rng, labels * N5, 0.0, 1.0);
    let target: Vec<f64> = (0..labels * N5)
        .map(|_| f64::from(rng.random_bool(0.3) as u8))
        .collect();
    let (_, g) = dice_loss_grad(&pred, &target, labels).unwrap();
    let e = fd_max_err(&pred, &g, &all(pred.len()), |p| dice_loss(p, &target, labels).unwrap());
    out.push(("loss/dice".into(), e));

    // folded grid so that the hinge is active somewhere
    let grid = jittered_grid(&mut rng, S5, 1.5);
    let (v, g) = jacobian_loss_grad(&grid).unwrap();
    assert!(v > 0.0, "test grid should fold");
    let e = fd_max_err(grid.phi(), &g, &all(3 * N5), grid_fn(S5, |g| jacobian_loss(g).unwrap()));
    out.push(("loss/jacobian".into(), e));

    let inc = rand_vec(&mut rng, 3 * N5, 0.0, 2.0);
    let (_, g) = smoothness_loss_grad(&GradientField::new(S5, inc.clone()).unwrap());
    let e = fd_max_err(&inc, &g, &all(inc.len()), |x| {
        smoothness_loss(&GradientField::new(S5, x.to_vec()).unwrap())
    });
    out.push(("loss/smoothness".into(), e));

    // one full registration direction, raw output -> weighted loss
    let seg_src: Vec<f64> = (0..labels * N5)
        .map(|_| f64::from(rng.random_bool(0.4) as u8))
        .collect();
    let inputs = DirectionInputs {
        shape: S5,
        source: &a,
        source_seg: &seg_src,
        target: &b,
        target_seg: &target,
        labels,
    };
    let weights = LossWeights {
        alpha: 0.1,
        beta: 1.0,
        ncc_window: 0,
    };
    let raw = rand_vec(&mut rng, 3 * N5, -0.6, 0.6);
    let (_, g) = direction_loss(&inputs, &raw, &weights, true).unwrap();
    let g = g.unwrap();
    let e = fd_max_err(&raw, &g, &all(raw.len()), |r| {
        direction_loss(&inputs, r, &weights, false)
            .unwrap()
            .0
            .terms
            .weighted(&weights)
    });
    out.push(("loss/direction-total".into(), e));
    out
}

fn fmap(rng: &mut ChaCha8Rng, c: usize, s: Shape) -> FeatureMap {
    FeatureMap::from_vec(c, s, rand_vec(rng, c * s.iter().product::<usize>(), -1.0, 1.0))
}

/// Layer-level checks on inputs of at most 5³.
pub fn layer_ops(seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let (cin, cout) = (2, 3);

    type Fwd = fn(&FeatureMap, &[f64], Option<&[f64]>, usize) -> FeatureMap;
    type Bwd = fn(&FeatureMap, &[f64], &FeatureMap, &mut [f64], Option<&mut [f64]>) -> FeatureMap;
    let cases: [(&str, Fwd, Bwd, usize, Shape, Shape); 3] = [
        ("conv3", conv3_forward, conv3_backward, 27, S5, S5),
        ("down", down_forward, down_backward, 8, [4, 4, 4], [2, 2, 2]),
        ("up", up_forward, up_backward, 8, [2, 2, 2], [4, 4, 4]),
    ];
    for (name, fwd, bwd, taps, ins, outs) in cases {
        let x = fmap(&mut rng, cin, ins);
        let w = rand_vec(&mut rng, cin * cout * taps, -1.0, 1.0);
        let b = rand_vec(&mut rng, cout, -1.0, 1.0);
        let gy = fmap(&mut rng, cout, outs);
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; cout];
        let gx = bwd(&x, &w, &gy, &mut gw, Some(&mut gb));
        let s = |x: &FeatureMap, w: &[f64], b: &[f64]| dot(&fwd(x, w, Some(b), cout).data, &gy.data);
        let ex = fd_max_err(&x.data, &gx.data, &all(x.data.len()), |v| {
            s(&FeatureMap::from_vec(cin, ins, v.to_vec()), &w, &b)
        });
        let ew = fd_max_err(&w, &gw, &all(w.len()), |v| s(&x, v, &b));
        let eb = fd_max_err(&b, &gb, &all(cout), |v| s(&x, &w, v));
        out.push((format!("nn/{name}"), ex.max(ew).max(eb)));
    }

    let x = fmap(&mut rng, 2, S5);
    let gy = fmap(&mut rng, 2, S5);
    let (y, inv) = instance_norm_forward(&x);
    let gx = instance_norm_backward(&y, &inv, &gy);
    let e = fd_max_err(&x.data, &gx.data, &all(x.data.len()), |v| {
        dot(
            &instance_norm_forward(&FeatureMap::from_vec(2, S5, v.to_vec())).0.data,
            &gy.data,
        )
    });
    out.push(("nn/instance-norm".into(), e));

    let gx = leaky_relu_backward(&x, &gy, 0.01);
    let e = fd_max_err(&x.data, &gx.data, &all(x.data.len()), |v| {
        dot(
            &leaky_relu(&FeatureMap::from_vec(2, S5, v.to_vec()), 0.01).data,
            &gy.data,
        )
    });
    out.push(("nn/leaky-relu".into(), e));
    out
}

pub fn mini_arch(skip: bool) -> ArchConfig {
    ArchConfig {
        in_shape: [8, 8, 8],
        base_channels: 2,
        n_downsamplings: 2,
        skip_connections: skip,
        ..ArchConfig::default()
    }
}

/// Mini network with a random (non-zero) head so every path carries signal.
pub fn mini_net(skip: bool, seed: u64) -> RegNet {
    let mut net = RegNet::new(mini_arch(skip), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    // Biases keep decoder pre-activations away from the leaky-ReLU kink, and
    // a contracting head bias keeps sample points off the clamped border, so
    // the loss is smooth across the finite-difference stencil.
    let specs = net.param_specs().to_vec();
    for spec in specs
        .iter()
        .filter(|s| s.name.starts_with("dec.") && s.name.ends_with(".bias"))
    {
        for p in &mut net.params_mut()[spec.offset..spec.offset + spec.len] {
            let mag = rng.random_range(0.2..0.6);
            *p = if rng.random_bool(0.5) { mag } else { -mag };
        }
    }
    let range = net.head_range();
    for p in &mut net.params_mut()[range] {
        *p = rng.random_range(-0.05..0.05);
    }
    let end = net.head_range().end;
    net.params_mut()[end - 3..end].fill(-0.1);
    net
}

fn blob_volume(rng: &mut ChaCha8Rng, shape: Shape) -> Volume {
    let c: [f64; 3] = std::array::from_fn(|a| shape[a] as f64 / 2.0 + rng.random_range(-1.0..1.0));
    let noise = rand_vec(rng, shape.iter().product(), 0.0, 0.2);
    Volume::from_fn(shape, |i, j, k| {
        let r2 = (i as f64 - c[0]).powi(2) + (j as f64 - c[1]).powi(2) + (k as f64 - c[2]).powi(2);
        let idx = (i * shape[1] + j) * shape[2] + k;
        ((-r2 / 8.0).exp() * 0.8 + noise[idx]) as f32
    })
    .unwrap()
}

fn blob_seg(v: &Volume) -> SegMap {
    let labels = v
        .data()
        .iter()
        .map(|&x| {
            if x > 0.5 {
                1
            } else if x > 0.25 {
                2
            } else {
                0
            }
        })
        .collect();
    SegMap::new(v.shape(), labels, 2).unwrap()
}

/// Checks every parameter of the mini network against the symmetric total
/// loss. Returns the worst relative error.
pub fn network_params(skip: bool, seed: u64) -> f64 {
    let net = mini_net(skip, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let shape = net.arch().in_shape;
    let (m, f) = (blob_volume(&mut rng, shape), blob_volume(&mut rng, shape));
    let (ms, fs) = (blob_seg(&m), blob_seg(&f));
    let weights = LossWeights {
        alpha: 0.1,
        beta: 1.0,
        ncc_window: 0,
    };
    let (_, grads) = net
        .pair_loss_and_grad(&m.to_f64(), &f.to_f64(), &ms.one_hot(), &fs.one_hot(), 2, &weights)
        .unwrap();
    let probe = std::cell::RefCell::new(net.clone());
    let (err, kinks) = fd_check(net.params(), &grads, &all(grads.len()), |p| {
        let mut n = probe.borrow_mut();
        n.params_mut().copy_from_slice(p);
        n.register_pair(&m, &f, &ms, &fs, &weights).unwrap().loss_terms.total
    });
    println!(
        "net/params skip={skip}: {} parameters, {kinks} checked one-sided",
        grads.len()
    );
    err
}

/// Directional derivative of `λ ↦ <w, decode_raw(λ·u)>` against the VJP.
pub fn decode_direction(seed: u64) -> f64 {
    let net = mini_net(false, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
    let arch = net.arch().clone();
    let u = rand_vec(&mut rng, arch.latent_len(), -1.0, 1.0);
    let w = rand_vec(&mut rng, 3 * 512, -1.0, 1.0);
    let mut worst: f64 = 0.0;
    for lambda in [-2.0, 0.5, 3.0] {
        let at = |l: f64| LatentCode::from_flat(&arch, u.iter().map(|x| l * x).collect()).unwrap();
        let gz = net.decode_raw_vjp(&at(lambda), &w).unwrap();
        let analytic = dot(&gz, &u);
        let s = |l: f64| dot(&net.decode_raw(&at(l)).unwrap(), &w);
        let num = (s(lambda + STEP) - s(lambda - STEP)) / (2.0 * STEP);
        worst = worst.max(rel_err(analytic, num));
    }
    worst
}

/// Full suite as `(name, worst relative error)` rows.
pub fn full_suite() -> Vec<(String, f64)> {
    let mut rows = warp_ops(11);
    rows.extend(loss_ops(12));
    rows.extend(layer_ops(13));
    rows.push(("net/params".into(), network_params(false, 14)));
    rows.push(("net/params-skip".into(), network_params(true, 15)));
    rows.push(("net/decode-direction".into(), decode_direction(16)));
    rows
}
