//! Symmetric-registration checks on small untrained and zero-epoch models.

use std::path::Path;

use reglat::losses::LossWeights;
use reglat::phantom::{generate_phantom_dataset, Jitter, PhantomSpec};
use reglat::regnet::{load_checkpoint, ArchConfig, RegNet};
use reglat::trainer::{train, AugmentConfig, TrainConfig};
use reglat::volgrid::{make_identity_grid, DatasetManifest, Split};

use super::algebra::{random_seg, random_volume};

pub fn small_arch(skip: bool) -> ArchConfig {
    ArchConfig {
        in_shape: [16, 16, 16],
        base_channels: 2,
        n_downsamplings: 2,
        skip_connections: skip,
        ..ArchConfig::default()
    }
}

/// A net whose head is no longer zero, so the warps are non-trivial.
pub fn perturbed_net(skip: bool, seed: u64) -> RegNet {
    let mut net = RegNet::new(small_arch(skip), seed).unwrap();
    let range = net.head_range();
    for (i, p) in net.params_mut()[range].iter_mut().enumerate() {
        *p = 0.05 * ((i as f64 * 0.7).sin());
    }
    net
}

#[derive(Debug)]
pub struct SymmetryReport {
    /// `E(M) - E(F)` equals `-(E(F) - E(M))` bit for bit.
    pub antisymmetric_bits: bool,
    /// The forward grid of `(F, M)` equals the backward grid of `(M, F)` bit
    /// for bit.
    pub swapped_grids_equal: bool,
    pub loss_swap_diff: f64,
}

pub fn symmetry(skip: bool, seed: u64) -> SymmetryReport {
    let net = perturbed_net(skip, seed);
    let shape = net.arch().in_shape;
    let (m, f) = (random_volume(seed, shape), random_volume(seed + 1, shape));
    let (ms, fs) = (random_seg(seed + 2, shape, 2), random_seg(seed + 3, shape, 2));
    let w = LossWeights::default();
    let a = net.register_pair(&m, &f, &ms, &fs, &w).unwrap();
    let b = net.register_pair(&f, &m, &fs, &ms, &w).unwrap();
    let antisymmetric_bits = a
        .latent_diff
        .flat()
        .iter()
        .zip(b.latent_diff.flat())
        .all(|(x, y)| x.to_bits() == (-y).to_bits());
    let bits = |g: &[f64]| g.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let swapped_grids_equal =
        bits(a.bwd_grid.phi()) == bits(b.fwd_grid.phi()) && bits(a.fwd_grid.phi()) == bits(b.bwd_grid.phi());
    SymmetryReport {
        antisymmetric_bits,
        swapped_grids_equal,
        loss_swap_diff: (a.loss_terms.total - b.loss_terms.total).abs(),
    }
}

/// Small phantom dataset matching [`small_arch`].
pub fn small_phantom(dir: &Path, seed: u64) -> DatasetManifest {
    let spec = PhantomSpec {
        size: 16,
        n_subjects: 6,
        n_val: 2,
        structures: reglat::phantom::default_structures(16),
        jitter: Jitter {
            translation: [1.0; 3],
            rotation_deg: [3.0; 3],
            scale: 0.03,
        },
        smooth_warp_amplitude: 0.5,
        seed,
        ..PhantomSpec::default()
    };
    generate_phantom_dataset(&spec, dir).unwrap()
}

/// Trains for zero epochs, reloads the checkpoint and returns the largest
/// deviation of any forward/backward grid from the identity and of any
/// warped volume from its source (all expected to be exactly 0).
pub fn zero_epoch_identity(dir: &Path) -> f64 {
    let manifest = small_phantom(&dir.join("data"), 5);
    let cfg = TrainConfig {
        epochs: 0,
        augment: AugmentConfig::none(),
        ..TrainConfig::default()
    };
    let out = train(&manifest, &cfg, &small_arch(false), &dir.join("run")).unwrap();
    let ckpt = load_checkpoint(&out.checkpoint, None).unwrap();
    assert_eq!(ckpt.epoch, 0);
    let net = ckpt.net;
    let id = make_identity_grid(net.arch().in_shape).unwrap();
    let mut err: f64 = 0.0;
    let subjects = manifest.split(Split::Val);
    let (m, ms) = manifest.load_normalized(subjects[0]).unwrap();
    let (f, fs) = manifest.load_normalized(subjects[1]).unwrap();
    let r = net.register_pair(&m, &f, &ms, &fs, &LossWeights::default()).unwrap();
    for g in [&r.fwd_grid, &r.bwd_grid] {
        err = g
            .phi()
            .iter()
            .zip(id.phi())
            .map(|(a, b)| (a - b).abs())
            .fold(err, f64::max);
    }
    for (src, w) in [(&m, &r.warped_moving), (&f, &r.warped_fixed)] {
        err = src
            .data()
            .iter()
            .zip(w.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .fold(err, f64::max);
    }
    err
}
