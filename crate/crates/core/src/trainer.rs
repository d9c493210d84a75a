//! Pair sampling, augmentation, Adam optimization, evaluation and run
//! artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossTerms, LossWeights, LOSS_CSV_HEADER};
use crate::regnet::{save_checkpoint, ArchConfig, Checkpoint, RegNet, RngState};
use crate::volgrid::{
    apply_affine, apply_affine_seg, dice_per_label, dice_score, Affine, DatasetManifest, Interp, SegMap, Split, Volume,
};
use crate::warp::{jacobian_determinant_map, warp_segmentation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Probability of mirroring, per axis.
    pub flip_prob: f64,
    /// Rotation range `±rot_deg` per axis.
    pub rot_deg: f64,
    /// Translation range `±trans_vox` per axis.
    pub trans_vox: f64,
    pub zoom_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rot_deg: 10.0,
            trans_vox: 5.0,
            zoom_range: [0.9, 1.1],
        }
    }
}

impl AugmentConfig {
    /// No augmentation at all.
    pub fn none() -> Self {
        Self {
            flip_prob: 0.0,
            rot_deg: 0.0,
            trans_vox: 0.0,
            zoom_range: [1.0, 1.0],
        }
    }

    pub fn is_none(&self) -> bool {
        *self == Self::none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Checkpoint (and evaluate) every this many epochs; 0 = only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 4,
            epochs: 50,
            weights: LossWeights::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let a = &self.augment;
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::InvalidInput("lr and batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&a.flip_prob)
            || a.rot_deg < 0.0
            || a.trans_vox < 0.0
            || !(a.zoom_range[0] > 0.0 && a.zoom_range[0] <= a.zoom_range[1])
        {
            return Err(Error::InvalidInput("invalid augmentation ranges".into()));
        }
        Ok(())
    }
}

/// Uniform sampler over ordered pairs of distinct indices.
pub struct PairSampler {
    n: usize,
    rng: ChaCha8Rng,
}

impl PairSampler {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        Self::from_rng(n, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_rng(n: usize, rng: ChaCha8Rng) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidInput("pair sampling needs at least two subjects".into()));
        }
        Ok(Self { n, rng })
    }

    pub fn next_pair(&mut self) -> (usize, usize) {
        let m = self.rng.random_range(0..self.n);
        let f = self.rng.random_range(0..self.n - 1);
        (m, if f >= m { f + 1 } else { f })
    }
}

/// `(moving, fixed)` subject ids drawn from the training split.
pub fn sample_pairs(manifest: &DatasetManifest, seed: u64, count: usize) -> Result<Vec<(String, String)>> {
    let train = manifest.split(Split::Train);
    let mut s = PairSampler::new(train.len(), seed)?;
    Ok((0..count)
        .map(|_| {
            let (m, f) = s.next_pair();
            (train[m].id.clone(), train[f].id.clone())
        })
        .collect())
}

/// Draws the random augmentation transform (about the volume centre).
pub fn augmentation_affine(shape: [usize; 3], cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Affine {
    let c = Affine::center_of(shape);
    let mut a = Affine::identity();
    for axis in 0..3 {
        if rng.random::<f64>() < cfg.flip_prob {
            a = Affine::flip(axis, shape).compose(&a);
        }
    }
    for axis in 0..3 {
        let deg = if cfg.rot_deg > 0.0 {
            rng.random_range(-cfg.rot_deg..=cfg.rot_deg)
        } else {
            0.0
        };
        if deg != 0.0 {
            a = Affine::rotation(axis, deg, c).compose(&a);
        }
    }
    let [z0, z1] = cfg.zoom_range;
    let zoom = if z1 > z0 { rng.random_range(z0..=z1) } else { z0 };
    if zoom != 1.0 {
        a = Affine::scaling(zoom, c).compose(&a);
    }
    let t: [f64; 3] = std::array::from_fn(|_| {
        if cfg.trans_vox > 0.0 {
            rng.random_range(-cfg.trans_vox..=cfg.trans_vox)
        } else {
            0.0
        }
    });
    Affine::translation(t).compose(&a)
}

/// Applies one random transform jointly: linear interpolation for the
/// volume, nearest neighbour for the labels.
pub fn augment(v: &Volume, seg: &SegMap, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<(Volume, SegMap)> {
    let a = augmentation_affine(v.shape(), cfg, rng);
    if a.0 == Affine::identity().0 {
        return Ok((v.clone(), seg.clone()));
    }
    Ok((apply_affine(v, &a, Interp::Linear)?, apply_affine_seg(seg, &a)?))
}

/// Adam with constant learning rate and no weight decay.
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// A subject prepared for the network.
struct Prepared {
    volume: Volume,
    seg: SegMap,
}

fn prepare(manifest: &DatasetManifest, split: Split) -> Result<Vec<(String, Prepared)>> {
    manifest
        .split(split)
        .into_iter()
        .map(|e| {
            let (volume, seg) = manifest.load_normalized(e)?;
            Ok((e.id.clone(), Prepared { volume, seg }))
        })
        .collect()
}

pub const CONFIG_FILE: &str = "config.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const ARCH_FILE: &str = "arch.json";

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(format!("checkpoint_{epoch:04}.bin"))
}

/// Checkpoint with the highest epoch number in `run_dir`.
pub fn latest_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    let mut best: Option<(usize, PathBuf)> = None;
    if run_dir.is_dir() {
        for entry in fs::read_dir(run_dir)? {
            let p = entry?.path();
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if let Some(e) = name
                .strip_prefix("checkpoint_")
                .and_then(|r| r.strip_suffix(".bin"))
                .and_then(|r| r.parse::<usize>().ok())
            {
                if best.as_ref().is_none_or(|(b, _)| e > *b) {
                    best = Some((e, p));
                }
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::MissingFile(run_dir.join("checkpoint_*.bin")))
}

#[derive(Serialize)]
struct RunConfig<'a> {
    arch: &'a ArchConfig,
    train: &'a TrainConfig,
    manifest_root: String,
}

/// Everything a training run produced.
pub struct TrainOutcome {
    pub net: RegNet,
    pub checkpoint: PathBuf,
    /// Mean loss terms of every optimization step, in order.
    pub step_losses: Vec<LossTerms>,
    pub eval: Option<EvalReport>,
}

/// Trains a fresh network and writes `config.json`, `arch.json`,
/// `loss.csv`, `checkpoint_*.bin` and (with a validation split)
/// `eval.json` into `out_dir`.
pub fn train(manifest: &DatasetManifest, cfg: &TrainConfig, arch: &ArchConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    arch.validate()?;
    let subjects = prepare(manifest, Split::Train)?;
    if subjects.len() < 2 {
        return Err(Error::InvalidInput(
            "training needs at least two training subjects".into(),
        ));
    }
    let labels = subjects[0].1.seg.num_labels();
    for (id, s) in &subjects {
        if s.volume.shape() != arch.in_shape {
            return Err(Error::shape(arch.in_shape, s.volume.shape()));
        }
        if s.seg.num_labels() != labels {
            return Err(Error::InvalidInput(format!("subject {id} has a different label count")));
        }
    }
    let labels = labels as usize;
    let val_present = !manifest.split(Split::Val).is_empty();

    fs::create_dir_all(out_dir)?;
    let run_cfg = RunConfig {
        arch,
        train: cfg,
        manifest_root: manifest.root.display().to_string(),
    };
    fs::write(out_dir.join(CONFIG_FILE), serde_json::to_vec_pretty(&run_cfg)?)?;
    fs::write(out_dir.join(ARCH_FILE), serde_json::to_vec_pretty(arch)?)?;

    let mut net = RegNet::new(arch.clone(), cfg.seed)?;
    let mut adam = Adam::new(net.params().len(), cfg.lr);
    // one stream for pair sampling, one for augmentation
    let mut sampler = PairSampler::new(subjects.len(), cfg.seed.wrapping_add(1))?;
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let prepared: Vec<(Vec<f64>, Vec<f64>)> = subjects
        .iter()
        .map(|(_, s)| (s.volume.to_f64(), s.seg.one_hot()))
        .collect();

    let mut csv = String::from(LOSS_CSV_HEADER);
    csv.push('\n');
    let mut step_losses = Vec::new();
    let rng_state = |aug: &ChaCha8Rng| RngState {
        seed: cfg.seed,
        word_pos: aug.get_word_pos().to_string(),
    };
    let mut last_ckpt = checkpoint_path(out_dir, 0);
    if cfg.epochs == 0 {
        save_checkpoint(
            &last_ckpt,
            &Checkpoint {
                net: net.clone(),
                epoch: 0,
                rng_state: Some(rng_state(&aug_rng)),
            },
        )?;
    }
    let n_train = subjects.len();
    let mut eval = None;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut visited = 0;
        let mut epoch_terms = Vec::new();
        while visited < n_train {
            let b = cfg.batch_size.min(n_train - visited);
            visited += b;
            let mut grads = vec![0.0; net.params().len()];
            let mut terms = Vec::with_capacity(b);
            for _ in 0..b {
                let (mi, fi) = sampler.next_pair();
                let (t, g) = if cfg.augment.is_none() {
                    let (m, ms) = &prepared[mi];
                    let (f, fs) = &prepared[fi];
                    net.pair_loss_and_grad(m, f, ms, fs, labels, &cfg.weights)?
                } else {
                    let (mv, ms) = augment(&subjects[mi].1.volume, &subjects[mi].1.seg, &cfg.augment, &mut aug_rng)?;
                    let (fv, fs) = augment(&subjects[fi].1.volume, &subjects[fi].1.seg, &cfg.augment, &mut aug_rng)?;
                    net.pair_loss_and_grad(
                        &mv.to_f64(),
                        &fv.to_f64(),
                        &ms.one_hot(),
                        &fs.one_hot(),
                        labels,
                        &cfg.weights,
                    )?
                };
                for (a, x) in grads.iter_mut().zip(&g) {
                    *a += x;
                }
                terms.push(t);
            }
            let mean = LossTerms::mean(&terms);
            if !mean.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                log::error!("non-finite loss at epoch {epoch} step {step}");
                return Err(Error::Diverged { epoch, step });
            }
            grads.iter_mut().for_each(|g| *g /= b as f64);
            adam.step(net.params_mut(), &grads);
            csv.push_str(&mean.csv_row(epoch, step));
            csv.push('\n');
            step_losses.push(mean);
            epoch_terms.push(mean);
            step += 1;
        }
        let done = epoch + 1;
        log::info!(
            "epoch {done}/{}: loss {:.5}",
            cfg.epochs,
            LossTerms::mean(&epoch_terms).total
        );
        let at_eval = cfg.eval_every > 0 && done % cfg.eval_every == 0;
        if at_eval || done == cfg.epochs {
            last_ckpt = checkpoint_path(out_dir, done);
            save_checkpoint(
                &last_ckpt,
                &Checkpoint {
                    net: net.clone(),
                    epoch: done,
                    rng_state: Some(rng_state(&aug_rng)),
                },
            )?;
            if val_present && done < cfg.epochs {
                let r = evaluate(&net, manifest, Split::Val)?;
                log::info!("epoch {done}: val dice {:.4} -> {:.4}", r.mean_before, r.mean_after);
            }
        }
    }
    fs::write(out_dir.join(LOSS_FILE), csv)?;
    if val_present {
        let r = evaluate(&net, manifest, Split::Val)?;
        fs::write(out_dir.join(EVAL_FILE), serde_json::to_vec_pretty(&r)?)?;
        eval = Some(r);
    }
    Ok(TrainOutcome {
        net,
        checkpoint: last_ckpt,
        step_losses,
        eval,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEval {
    pub moving: String,
    pub fixed: String,
    pub dice_before: f64,
    pub dice_after: f64,
    pub dice_before_per_label: Vec<f64>,
    pub dice_after_per_label: Vec<f64>,
    pub fold_fraction: f64,
    pub min_det: f64,
}

/// Registration quality over all ordered pairs of a split. Standard
/// deviations are population (ddof = 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub pairs: Vec<PairEval>,
    pub mean_before: f64,
    pub std_before: f64,
    pub mean_after: f64,
    pub std_after: f64,
    pub mean_fold_fraction: f64,
    pub max_fold_fraction: f64,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Dice before and after registration for each ordered pair of distinct
/// subjects in `split`, plus the folding fraction of each forward grid.
pub fn evaluate(net: &RegNet, manifest: &DatasetManifest, split: Split) -> Result<EvalReport> {
    let subjects = prepare(manifest, split)?;
    if subjects.len() < 2 {
        return Err(Error::InvalidInput("evaluation needs at least two subjects".into()));
    }
    let enc = subjects
        .iter()
        .map(|(_, s)| net.encode_levels(&s.volume.to_f64()))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::new();
    for (mi, (mid, m)) in subjects.iter().enumerate() {
        for (fi, (fid, f)) in subjects.iter().enumerate() {
            if mi == fi {
                continue;
            }
            let grid = net.forward_grid_from(&enc[mi], &enc[fi])?;
            let soft = warp_segmentation(&m.seg, &grid)?;
            let warped = SegMap::from_soft(m.seg.shape(), &soft, m.seg.num_labels())?;
            let jac = jacobian_determinant_map(&grid)?;
            pairs.push(PairEval {
                moving: mid.clone(),
                fixed: fid.clone(),
                dice_before: dice_score(&m.seg, &f.seg)?,
                dice_after: dice_score(&warped, &f.seg)?,
                dice_before_per_label: dice_per_label(&m.seg, &f.seg)?,
                dice_after_per_label: dice_per_label(&warped, &f.seg)?,
                fold_fraction: jac.fold_fraction(),
                min_det: jac.min_det(),
            });
        }
    }
    let (mean_before, std_before) = mean_std(&pairs.iter().map(|p| p.dice_before).collect::<Vec<_>>());
    let (mean_after, std_after) = mean_std(&pairs.iter().map(|p| p.dice_after).collect::<Vec<_>>());
    let folds: Vec<f64> = pairs.iter().map(|p| p.fold_fraction).collect();
    Ok(EvalReport {
        split,
        mean_before,
        std_before,
        mean_after,
        std_after,
        mean_fold_fraction: mean_std(&folds).0,
        max_fold_fraction: folds.iter().cloned().fold(0.0, f64::max),
        pairs,
    })
}
