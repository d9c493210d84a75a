//! Encoder/decoder registration network with late fusion by latent
//! subtraction, symmetric forward/backward prediction, and checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{direction_loss, DirectionInputs, LossTerms, LossWeights};
use crate::nn::{backprop_stage, run_stage, FeatureMap, Layer, Tape};
use crate::volgrid::{voxel_count, SegMap, Shape, Volume};
use crate::warp::{integrate_spatial_gradients, DeformationGrid, GradientField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub in_shape: Shape,
    pub base_channels: usize,
    pub n_downsamplings: usize,
    pub kernel_size: usize,
    pub negative_slope: f64,
    pub skip_connections: bool,
    pub norm: String,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_shape: [32, 32, 32],
            base_channels: 8,
            n_downsamplings: 3,
            kernel_size: 3,
            negative_slope: 0.01,
            skip_connections: false,
            norm: "instance".into(),
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let f = 1usize << self.n_downsamplings;
        if self.in_shape.iter().any(|&s| s == 0 || s % f != 0) {
            return Err(Error::InvalidInput(format!(
                "in_shape {:?} must be divisible by 2^{}",
                self.in_shape, self.n_downsamplings
            )));
        }
        if self.kernel_size != 3 {
            return Err(Error::InvalidInput("only kernel_size 3 is supported".into()));
        }
        if self.norm != "instance" {
            return Err(Error::InvalidInput(format!("unsupported norm {}", self.norm)));
        }
        if self.base_channels == 0 {
            return Err(Error::InvalidInput("base_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn level_shape(&self, level: usize) -> Shape {
        self.in_shape.map(|s| s >> level)
    }

    /// Bottleneck `(C, [d, h, w])`.
    pub fn latent_dims(&self) -> (usize, Shape) {
        (
            self.channels(self.n_downsamplings),
            self.level_shape(self.n_downsamplings),
        )
    }

    pub fn latent_len(&self) -> usize {
        let (c, s) = self.latent_dims();
        c * voxel_count(s)
    }
}

/// Bottleneck activation. The flat view is channel-major, then axis 0, 1, 2.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub channels: usize,
    pub shape: Shape,
    data: Vec<f64>,
}

impl LatentCode {
    pub fn from_flat(arch: &ArchConfig, flat: Vec<f64>) -> Result<Self> {
        let (channels, shape) = arch.latent_dims();
        if flat.len() != channels * voxel_count(shape) {
            return Err(Error::shape(channels * voxel_count(shape), flat.len()));
        }
        Ok(Self {
            channels,
            shape,
            data: flat,
        })
    }

    pub fn zeros(arch: &ArchConfig) -> Self {
        let (channels, shape) = arch.latent_dims();
        Self {
            channels,
            shape,
            data: vec![0.0; channels * voxel_count(shape)],
        }
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    /// `self - other`, element by element.
    pub fn sub(&self, other: &LatentCode) -> LatentCode {
        LatentCode {
            channels: self.channels,
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    fn to_map(&self) -> FeatureMap {
        FeatureMap::from_vec(self.channels, self.shape, self.data.clone())
    }
}

/// Named parameter block in the flat buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    specs: Vec<ParamSpec>,
    enc: Vec<Vec<Layer>>,
    bottleneck: Vec<Layer>,
    up: Vec<Vec<Layer>>,
    blocks: Vec<Vec<Layer>>,
    head: Vec<Layer>,
    head_params: (usize, usize),
}

struct Builder {
    specs: Vec<ParamSpec>,
    next: usize,
}

impl Builder {
    fn alloc(&mut self, name: String, shape: Vec<usize>) -> usize {
        let len = shape.iter().product();
        let offset = self.next;
        self.specs.push(ParamSpec {
            name,
            shape,
            offset,
            len,
        });
        self.next += len;
        offset
    }

    fn conv3(&mut self, name: &str, cin: usize, cout: usize, bias: bool) -> Layer {
        let w = self.alloc(format!("{name}.weight"), vec![cout, cin, 3, 3, 3]);
        let b = bias.then(|| self.alloc(format!("{name}.bias"), vec![cout]));
        Layer::Conv3 { cin, cout, w, b }
    }

    fn down(&mut self, name: &str, cin: usize, cout: usize) -> Layer {
        let w = self.alloc(format!("{name}.weight"), vec![cout, cin, 2, 2, 2]);
        Layer::Down { cin, cout, w, b: None }
    }

    fn up(&mut self, name: &str, cin: usize, cout: usize) -> Layer {
        let w = self.alloc(format!("{name}.weight"), vec![cin, cout, 2, 2, 2]);
        let b = Some(self.alloc(format!("{name}.bias"), vec![cout]));
        Layer::Up { cin, cout, w, b }
    }
}

impl Layout {
    fn new(arch: &ArchConfig) -> Self {
        let mut bld = Builder {
            specs: Vec::new(),
            next: 0,
        };
        let slope = arch.negative_slope;
        let act = Layer::LeakyRelu(slope);
        let n = arch.n_downsamplings;
        let c = |l| arch.channels(l);

        let mut enc = Vec::new();
        for l in 0..=n {
            let mut st = Vec::new();
            if l == 0 {
                st.push(bld.conv3("enc.0.conv0", 1, c(0), false));
            } else {
                st.push(bld.down(&format!("enc.{l}.down"), c(l - 1), c(l)));
            }
            st.extend([Layer::Norm, act.clone()]);
            st.push(bld.conv3(&format!("enc.{l}.conv1"), c(l), c(l), false));
            st.extend([Layer::Norm, act.clone()]);
            if l > 0 {
                st.push(bld.conv3(&format!("enc.{l}.conv2"), c(l), c(l), false));
                st.extend([Layer::Norm, act.clone()]);
            }
            enc.push(st);
        }

        let bottleneck = vec![bld.conv3("dec.bottleneck", c(n), c(n), true), act.clone()];
        let mut up = vec![Vec::new(); n];
        let mut blocks = vec![Vec::new(); n];
        for l in (0..n).rev() {
            up[l] = vec![bld.up(&format!("dec.{l}.up"), c(l + 1), c(l)), act.clone()];
            let cin = if arch.skip_connections { 2 * c(l) } else { c(l) };
            blocks[l] = vec![
                bld.conv3(&format!("dec.{l}.conv0"), cin, c(l), true),
                act.clone(),
                bld.conv3(&format!("dec.{l}.conv1"), c(l), c(l), true),
                act.clone(),
            ];
        }
        let head_layer = bld.conv3("dec.head", c(0), 3, true);
        let head_params = match head_layer {
            Layer::Conv3 { w, b: Some(b), .. } => (w, b + 3 - w),
            _ => unreachable!(),
        };
        Layout {
            specs: bld.specs,
            enc,
            bottleneck,
            up,
            blocks,
            head: vec![head_layer],
            head_params,
        }
    }

    fn param_count(&self) -> usize {
        self.specs.last().map(|s| s.offset + s.len).unwrap_or(0)
    }
}

/// Encoder features at every resolution; the last entry is the latent.
pub struct Encoding {
    pub levels: Vec<FeatureMap>,
}

impl Encoding {
    pub fn latent(&self) -> LatentCode {
        let m = self.levels.last().expect("encoding has levels");
        LatentCode {
            channels: m.channels,
            shape: m.shape,
            data: m.data.clone(),
        }
    }

    fn diff(&self, other: &Encoding) -> Vec<FeatureMap> {
        self.levels
            .iter()
            .zip(&other.levels)
            .map(|(a, b)| {
                FeatureMap::from_vec(
                    a.channels,
                    a.shape,
                    a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
                )
            })
            .collect()
    }
}

struct DecoderTape {
    bottleneck: Tape,
    up: Vec<Tape>,
    blocks: Vec<Tape>,
    head: Tape,
}

/// Gradients flowing out of a decoder pass.
struct DecoderGrads {
    latent: FeatureMap,
    skips: Vec<Option<FeatureMap>>,
}

/// Symmetric registration result for a moving/fixed pair.
#[derive(Clone, Debug)]
pub struct RegistrationOutput {
    pub latent_diff: LatentCode,
    pub fwd_grad: GradientField,
    pub bwd_grad: GradientField,
    pub fwd_grid: DeformationGrid,
    pub bwd_grid: DeformationGrid,
    pub warped_moving: Volume,
    /// Soft foreground channels of the warped moving label map.
    pub warped_moving_seg: Vec<f64>,
    pub warped_fixed: Volume,
    pub warped_fixed_seg: Vec<f64>,
    pub loss_terms: LossTerms,
}

/// Registration network `g = D ∘ E` with parameters in one flat buffer.
#[derive(Clone, Debug)]
pub struct RegNet {
    arch: ArchConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl RegNet {
    /// He-initialized network with a zero final layer, so an untrained model
    /// predicts the identity deformation.
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut params = vec![0.0; layout.param_count()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in &layout.specs {
            if spec.name.ends_with(".bias") || spec.name.starts_with("dec.head") {
                continue;
            }
            // a k2 s2 transposed conv feeds each output voxel one tap per
            // input channel
            let fan_in: usize = if spec.name.contains(".up.") {
                spec.shape[0]
            } else {
                spec.shape[1..].iter().product()
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("positive std");
            for v in &mut params[spec.offset..spec.offset + spec.len] {
                *v = dist.sample(&mut rng);
            }
        }
        Ok(Self { arch, layout, params })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.layout.specs
    }

    /// Offsets of the final decoder layer's weights and bias (contiguous).
    pub fn head_range(&self) -> std::ops::Range<usize> {
        let (start, len) = self.layout.head_params;
        start..start + len
    }

    /// Hash of the architecture and every parameter bit.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.arch).expect("arch serializes"));
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        let digest = h.finalize();
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_volume(&self, len: usize) -> Result<()> {
        let n = voxel_count(self.arch.in_shape);
        if len != n {
            return Err(Error::shape(self.arch.in_shape, len));
        }
        Ok(())
    }

    fn encode_impl(&self, x: &[f64], mut tapes: Option<&mut Vec<Tape>>) -> Encoding {
        let mut cur = FeatureMap::from_vec(1, self.arch.in_shape, x.to_vec());
        let mut levels = Vec::with_capacity(self.layout.enc.len());
        for stage in &self.layout.enc {
            let mut tape = Tape::default();
            cur = run_stage(stage, &self.params, cur, tapes.as_ref().map(|_| &mut tape));
            if let Some(t) = tapes.as_deref_mut() {
                t.push(tape);
            }
            levels.push(cur.clone());
        }
        Encoding { levels }
    }

    /// Encoder features at every level for a voxel array of `in_shape`.
    pub fn encode_levels(&self, x: &[f64]) -> Result<Encoding> {
        self.check_volume(x.len())?;
        Ok(self.encode_impl(x, None))
    }

    pub fn encode(&self, v: &Volume) -> Result<LatentCode> {
        if v.shape() != self.arch.in_shape {
            return Err(Error::shape(self.arch.in_shape, v.shape()));
        }
        Ok(self.encode_impl(&v.to_f64(), None).latent())
    }

    pub fn encode_f64(&self, x: &[f64]) -> Result<LatentCode> {
        self.check_volume(x.len())?;
        Ok(self.encode_impl(x, None).latent())
    }

    fn decode_impl(
        &self,
        z: FeatureMap,
        skips: Option<&[FeatureMap]>,
        want_tape: bool,
    ) -> (FeatureMap, Option<DecoderTape>) {
        let params = &self.params;
        let n = self.arch.n_downsamplings;
        let mut bt = Tape::default();
        let mut cur = run_stage(&self.layout.bottleneck, params, z, want_tape.then_some(&mut bt));
        let mut up_tapes: Vec<Tape> = (0..n).map(|_| Tape::default()).collect();
        let mut block_tapes: Vec<Tape> = (0..n).map(|_| Tape::default()).collect();
        for l in (0..n).rev() {
            cur = run_stage(&self.layout.up[l], params, cur, want_tape.then_some(&mut up_tapes[l]));
            if self.arch.skip_connections {
                let skip = match skips {
                    Some(s) => s[l].clone(),
                    None => FeatureMap::zeros(self.arch.channels(l), cur.shape),
                };
                cur = cur.concat(&skip);
            }
            cur = run_stage(
                &self.layout.blocks[l],
                params,
                cur,
                want_tape.then_some(&mut block_tapes[l]),
            );
        }
        let mut ht = Tape::default();
        let raw = run_stage(&self.layout.head, params, cur, want_tape.then_some(&mut ht));
        let tape = want_tape.then_some(DecoderTape {
            bottleneck: bt,
            up: up_tapes,
            blocks: block_tapes,
            head: ht,
        });
        (raw, tape)
    }

    fn decode_backward(&self, tape: DecoderTape, g_raw: FeatureMap, grads: &mut [f64]) -> DecoderGrads {
        let params = &self.params;
        let n = self.arch.n_downsamplings;
        let DecoderTape {
            bottleneck,
            up,
            blocks,
            head,
        } = tape;
        let mut g = backprop_stage(&self.layout.head, params, head, g_raw, grads);
        let mut skips = vec![None; n];
        let mut up = up.into_iter().map(Some).collect::<Vec<_>>();
        let mut blocks = blocks.into_iter().map(Some).collect::<Vec<_>>();
        for l in 0..n {
            g = backprop_stage(&self.layout.blocks[l], params, blocks[l].take().unwrap(), g, grads);
            if self.arch.skip_connections {
                let (main, skip) = g.split(self.arch.channels(l));
                skips[l] = Some(skip);
                g = main;
            }
            g = backprop_stage(&self.layout.up[l], params, up[l].take().unwrap(), g, grads);
        }
        let latent = backprop_stage(&self.layout.bottleneck, params, bottleneck, g, grads);
        DecoderGrads { latent, skips }
    }

    /// Raw decoder output `r` (3 x in_shape) for a latent difference.
    pub fn decode_raw(&self, z: &LatentCode) -> Result<Vec<f64>> {
        self.check_latent(z)?;
        Ok(self.decode_impl(z.to_map(), None, false).0.data)
    }

    /// Vector-Jacobian product of [`RegNet::decode_raw`]: gradient of
    /// `<g_raw, decode_raw(z)>` with respect to `z`.
    pub fn decode_raw_vjp(&self, z: &LatentCode, g_raw: &[f64]) -> Result<Vec<f64>> {
        self.check_latent(z)?;
        let n = 3 * voxel_count(self.arch.in_shape);
        if g_raw.len() != n {
            return Err(Error::shape(n, g_raw.len()));
        }
        let (_, tape) = self.decode_impl(z.to_map(), None, true);
        let mut scratch = vec![0.0; self.params.len()];
        let g = FeatureMap::from_vec(3, self.arch.in_shape, g_raw.to_vec());
        Ok(self.decode_backward(tape.unwrap(), g, &mut scratch).latent.data)
    }

    /// Increment field `max(0, 1 + r)` for a latent.
    pub fn decode(&self, z: &LatentCode) -> Result<GradientField> {
        GradientField::from_raw(self.arch.in_shape, &self.decode_raw(z)?)
    }

    fn check_latent(&self, z: &LatentCode) -> Result<()> {
        let (c, s) = self.arch.latent_dims();
        if z.channels != c || z.shape != s || z.data.len() != c * voxel_count(s) {
            return Err(Error::shape((c, s), (z.channels, z.shape)));
        }
        Ok(())
    }

    /// Symmetric registration of `moving` onto `fixed` and back, with every
    /// loss term evaluated.
    pub fn register_pair(
        &self,
        moving: &Volume,
        fixed: &Volume,
        moving_seg: &SegMap,
        fixed_seg: &SegMap,
        weights: &LossWeights,
    ) -> Result<RegistrationOutput> {
        let shape = self.arch.in_shape;
        for s in [moving.shape(), fixed.shape(), moving_seg.shape(), fixed_seg.shape()] {
            if s != shape {
                return Err(Error::shape(shape, s));
            }
        }
        if moving_seg.num_labels() != fixed_seg.num_labels() {
            return Err(Error::InvalidInput("label counts differ".into()));
        }
        let (m, f) = (moving.to_f64(), fixed.to_f64());
        let em = self.encode_impl(&m, None);
        let ef = self.encode_impl(&f, None);
        let fwd_skips = em.diff(&ef);
        let bwd_skips = ef.diff(&em);
        let skips = |d: &[FeatureMap]| d[..d.len() - 1].to_vec();
        let (raw_f, _) = self.decode_impl(fwd_skips.last().unwrap().clone(), Some(&skips(&fwd_skips)), false);
        let (raw_b, _) = self.decode_impl(bwd_skips.last().unwrap().clone(), Some(&skips(&bwd_skips)), false);

        let (ms, fs) = (moving_seg.one_hot(), fixed_seg.one_hot());
        let labels = moving_seg.num_labels() as usize;
        let fwd_in = DirectionInputs {
            shape,
            source: &m,
            source_seg: &ms,
            target: &f,
            target_seg: &fs,
            labels,
        };
        let bwd_in = DirectionInputs {
            shape,
            source: &f,
            source_seg: &fs,
            target: &m,
            target_seg: &ms,
            labels,
        };
        let (fr, _) = direction_loss(&fwd_in, &raw_f.data, weights, false)?;
        let (br, _) = direction_loss(&bwd_in, &raw_b.data, weights, false)?;
        let diff = fwd_skips.last().unwrap();
        Ok(RegistrationOutput {
            latent_diff: LatentCode {
                channels: diff.channels,
                shape: diff.shape,
                data: diff.data.clone(),
            },
            loss_terms: LossTerms::combine(fr.terms, br.terms, weights),
            warped_moving: Volume::from_f64(shape, &fr.warped)?,
            warped_moving_seg: fr.warped_seg,
            warped_fixed: Volume::from_f64(shape, &br.warped)?,
            warped_fixed_seg: br.warped_seg,
            fwd_grad: fr.increments,
            bwd_grad: br.increments,
            fwd_grid: fr.grid,
            bwd_grid: br.grid,
        })
    }

    /// Forward deformation grid only (no losses), used by evaluation.
    pub fn forward_grid(&self, moving: &[f64], fixed: &[f64]) -> Result<DeformationGrid> {
        self.check_volume(moving.len())?;
        self.check_volume(fixed.len())?;
        let em = self.encode_impl(moving, None);
        let ef = self.encode_impl(fixed, None);
        self.forward_grid_from(&em, &ef)
    }

    /// Forward grid from precomputed encodings.
    pub fn forward_grid_from(&self, moving: &Encoding, fixed: &Encoding) -> Result<DeformationGrid> {
        let d = moving.diff(fixed);
        let (raw, _) = self.decode_impl(d.last().unwrap().clone(), Some(&d[..d.len() - 1]), false);
        Ok(integrate_spatial_gradients(&GradientField::from_raw(
            self.arch.in_shape,
            &raw.data,
        )?))
    }

    /// Forward increments from precomputed encodings.
    pub fn forward_increments_from(&self, moving: &Encoding, fixed: &Encoding) -> Result<GradientField> {
        let d = moving.diff(fixed);
        let (raw, _) = self.decode_impl(d.last().unwrap().clone(), Some(&d[..d.len() - 1]), false);
        GradientField::from_raw(self.arch.in_shape, &raw.data)
    }

    /// Symmetric loss for one pair and its gradient with respect to every
    /// parameter. Volumes are flat `in_shape` arrays; segmentations are
    /// foreground one-hot stacks with `labels` channels.
    pub fn pair_loss_and_grad(
        &self,
        moving: &[f64],
        fixed: &[f64],
        moving_seg: &[f64],
        fixed_seg: &[f64],
        labels: usize,
        weights: &LossWeights,
    ) -> Result<(LossTerms, Vec<f64>)> {
        self.check_volume(moving.len())?;
        self.check_volume(fixed.len())?;
        let shape = self.arch.in_shape;
        let n = self.arch.n_downsamplings;
        let mut grads = vec![0.0; self.params.len()];

        let mut tm = Vec::new();
        let mut tf = Vec::new();
        let em = self.encode_impl(moving, Some(&mut tm));
        let ef = self.encode_impl(fixed, Some(&mut tf));
        let fwd = em.diff(&ef);
        let bwd = ef.diff(&em);
        let (raw_f, tape_f) = self.decode_impl(fwd[n].clone(), Some(&fwd[..n]), true);
        let (raw_b, tape_b) = self.decode_impl(bwd[n].clone(), Some(&bwd[..n]), true);

        let fwd_in = DirectionInputs {
            shape,
            source: moving,
            source_seg: moving_seg,
            target: fixed,
            target_seg: fixed_seg,
            labels,
        };
        let bwd_in = DirectionInputs {
            shape,
            source: fixed,
            source_seg: fixed_seg,
            target: moving,
            target_seg: moving_seg,
            labels,
        };
        let (fr, gf) = direction_loss(&fwd_in, &raw_f.data, weights, true)?;
        let (br, gb) = direction_loss(&bwd_in, &raw_b.data, weights, true)?;
        let terms = LossTerms::combine(fr.terms, br.terms, weights);

        let gf = FeatureMap::from_vec(3, shape, gf.expect("gradient requested"));
        let gb = FeatureMap::from_vec(3, shape, gb.expect("gradient requested"));
        let df = self.decode_backward(tape_f.unwrap(), gf, &mut grads);
        let db = self.decode_backward(tape_b.unwrap(), gb, &mut grads);

        // d/d(level l of E(M)) = g_fwd - g_bwd ; E(F) receives the negation.
        let mut level_grads: Vec<FeatureMap> = Vec::with_capacity(n + 1);
        for l in 0..=n {
            let (a, b) = if l == n {
                (Some(&df.latent), Some(&db.latent))
            } else {
                (df.skips[l].as_ref(), db.skips[l].as_ref())
            };
            let m = em.levels[l].channels;
            let s = em.levels[l].shape;
            let mut g = FeatureMap::zeros(m, s);
            if let (Some(a), Some(b)) = (a, b) {
                for ((t, x), y) in g.data.iter_mut().zip(&a.data).zip(&b.data) {
                    *t = x - y;
                }
            }
            level_grads.push(g);
        }
        self.encoder_backward(tm, &level_grads, 1.0, &mut grads);
        self.encoder_backward(tf, &level_grads, -1.0, &mut grads);
        Ok((terms, grads))
    }

    fn encoder_backward(&self, tapes: Vec<Tape>, level_grads: &[FeatureMap], sign: f64, grads: &mut [f64]) {
        let n = self.arch.n_downsamplings;
        let mut carry: Option<FeatureMap> = None;
        for (l, tape) in tapes.into_iter().enumerate().rev() {
            let mut g = level_grads[l].clone();
            if sign != 1.0 {
                g.data.iter_mut().for_each(|v| *v *= sign);
            }
            if let Some(c) = carry.take() {
                for (a, b) in g.data.iter_mut().zip(&c.data) {
                    *a += b;
                }
            }
            let gin = backprop_stage(&self.layout.enc[l], &self.params, tape, g, grads);
            if l > 0 {
                carry = Some(gin);
            }
            debug_assert!(l <= n);
        }
    }

    /// Replaces every parameter; the buffer length must match.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape(self.params.len(), params.len()));
        }
        self.params = params;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// RNG position for resuming a seeded run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position, decimal string (u128 does not fit JSON numbers).
    pub word_pos: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: RegNet,
    pub epoch: usize,
    pub rng_state: Option<RngState>,
}

const CKPT_MAGIC: &[u8; 8] = b"RGLTCKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    version: u32,
    arch: ArchConfig,
    epoch: usize,
    rng_state: Option<RngState>,
    params: Vec<ParamSpec>,
    payload_bytes: usize,
    fingerprint: String,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let net = &ckpt.net;
    let header = CkptHeader {
        version: CKPT_VERSION,
        arch: net.arch.clone(),
        epoch: ckpt.epoch,
        rng_state: ckpt.rng_state.clone(),
        params: net.layout.specs.clone(),
        payload_bytes: net.params.len() * 8,
        fingerprint: net.fingerprint(),
    };
    let hbytes = serde_json::to_vec(&header)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = Vec::with_capacity(20 + hbytes.len() + header.payload_bytes);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(hbytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&hbytes);
    for p in &net.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Loads a checkpoint; with `expected` set, any architecture difference is an
/// error.
pub fn load_checkpoint(path: &Path, expected: Option<&ArchConfig>) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let bad = |r: &str| Error::format(path, r.to_string());
    if bytes.len() < 20 || &bytes[..8] != CKPT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let hend = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: CkptHeader = serde_json::from_slice(&bytes[20..hend]).map_err(|e| bad(&e.to_string()))?;
    if let Some(exp) = expected {
        if *exp != header.arch {
            return Err(Error::ArchMismatch(format!(
                "checkpoint has {:?}, expected {:?}",
                header.arch, exp
            )));
        }
    }
    let payload = &bytes[hend..];
    if payload.len() != header.payload_bytes || payload.len() % 8 != 0 {
        return Err(bad(&format!(
            "payload has {} bytes, header declares {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    let mut net = RegNet::new(header.arch.clone(), 0)?;
    if net.layout.specs != header.params {
        return Err(Error::ArchMismatch(
            "parameter index does not match architecture".into(),
        ));
    }
    let params: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    net.set_params(params)?;
    if net.fingerprint() != header.fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: header.fingerprint,
            found: net.fingerprint(),
        });
    }
    Ok(Checkpoint {
        net,
        epoch: header.epoch,
        rng_state: header.rng_state,
    })
}
