//! Artifact round trips and fingerprint enforcement.

use std::fs;
use std::path::Path;

use reglat::latent::{
    collect_latents, decode_component, fit_pca, load_basis, load_coeffs, load_latents, project_matrix, save_basis,
    save_coeffs, save_latents, LatentMatrix,
};
use reglat::regnet::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
use reglat::volgrid::{load_grid, load_segmap, load_volume, save_grid, save_segmap, save_volume, Split};
use reglat::Error;

use super::algebra::{random_seg, random_volume};
use super::symmetry::{perturbed_net, small_phantom};

#[derive(Debug, Default)]
pub struct RoundTripReport {
    pub volume: bool,
    pub segmap: bool,
    pub grid: bool,
    pub checkpoint: bool,
    pub latents: bool,
    pub basis: bool,
    pub coeffs: bool,
    pub tampered_checkpoint_rejected: bool,
    pub foreign_basis_rejected: bool,
    pub foreign_latents_rejected: bool,
}

impl RoundTripReport {
    pub fn all(&self) -> bool {
        self.volume
            && self.segmap
            && self.grid
            && self.checkpoint
            && self.latents
            && self.basis
            && self.coeffs
            && self.tampered_checkpoint_rejected
            && self.foreign_basis_rejected
            && self.foreign_latents_rejected
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

pub fn round_trips(dir: &Path) -> RoundTripReport {
    let mut r = RoundTripReport::default();
    let shape = [5, 6, 7];

    let v = random_volume(1, shape).with_spacing([1.0, 1.5, 2.0]);
    save_volume(&dir.join("vol"), &v).unwrap();
    let back = load_volume(&dir.join("vol")).unwrap();
    r.volume = back.shape() == v.shape()
        && back.spacing() == v.spacing()
        && back
            .data()
            .iter()
            .zip(v.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());

    let s = random_seg(2, shape, 3);
    save_segmap(&dir.join("seg"), &s).unwrap();
    r.segmap = load_segmap(&dir.join("seg")).unwrap() == s;

    let net = perturbed_net(false, 3);
    let in_shape = net.arch().in_shape;
    let g = net
        .forward_grid(
            &random_volume(4, in_shape).to_f64(),
            &random_volume(5, in_shape).to_f64(),
        )
        .unwrap();
    save_grid(&dir.join("grid"), &g).unwrap();
    r.grid = bits(load_grid(&dir.join("grid")).unwrap().phi()) == bits(g.phi());

    let ck = dir.join("ckpt.bin");
    save_checkpoint(
        &ck,
        &Checkpoint {
            net: net.clone(),
            epoch: 7,
            rng_state: Some(RngState {
                seed: 9,
                word_pos: "123".into(),
            }),
        },
    )
    .unwrap();
    let loaded = load_checkpoint(&ck, Some(net.arch())).unwrap();
    r.checkpoint = bits(loaded.net.params()) == bits(net.params())
        && loaded.epoch == 7
        && loaded.net.fingerprint() == net.fingerprint()
        && loaded.rng_state.as_ref().map(|s| s.word_pos.as_str()) == Some("123");

    // flip one payload byte: the stored fingerprint no longer matches
    let mut bytes = fs::read(&ck).unwrap();
    let last = bytes.len() - 3;
    bytes[last] ^= 0x40;
    let tampered = dir.join("tampered.bin");
    fs::write(&tampered, bytes).unwrap();
    r.tampered_checkpoint_rejected = matches!(load_checkpoint(&tampered, None), Err(Error::FingerprintMismatch { .. }));

    let manifest = small_phantom(&dir.join("data"), 6);
    let lat = collect_latents(&net, &manifest, Split::Train).unwrap();
    save_latents(&dir.join("latents.bin"), &lat).unwrap();
    let lat_back = load_latents(&dir.join("latents.bin")).unwrap();
    r.latents = bits(&lat_back.data) == bits(&lat.data)
        && lat_back.subject_ids == lat.subject_ids
        && lat_back.model_fingerprint == lat.model_fingerprint;

    let basis = fit_pca(&lat, 3, false).unwrap();
    save_basis(&dir.join("basis"), &basis).unwrap();
    let basis_back = load_basis(&dir.join("basis")).unwrap();
    r.basis = basis_back == basis.quantized();

    let coeffs = project_matrix(&basis_back, &lat).unwrap();
    save_coeffs(&dir.join("coeffs.csv"), basis.k, &coeffs).unwrap();
    let coeffs_back = load_coeffs(&dir.join("coeffs.csv")).unwrap();
    r.coeffs = coeffs_back.len() == coeffs.len()
        && coeffs_back
            .iter()
            .zip(&coeffs)
            .all(|(a, b)| a.subject_id == b.subject_id && bits(&a.a) == bits(&b.a));

    let other = perturbed_net(false, 4);
    r.foreign_basis_rejected = matches!(
        decode_component(&other, &basis_back, 1, 1.0),
        Err(Error::FingerprintMismatch { .. })
    ) && matches!(basis_back.check_model(&other), Err(Error::FingerprintMismatch { .. }));

    let foreign = LatentMatrix::new(
        (0..lat.n).map(|i| lat.row(i).to_vec()).collect(),
        lat.subject_ids.clone(),
        other.fingerprint(),
    )
    .unwrap();
    r.foreign_latents_rejected = matches!(
        project_matrix(&basis_back, &foreign),
        Err(Error::FingerprintMismatch { .. })
    );
    r
}
