mod common;

use std::fs;

use common::symmetry::{perturbed_net, small_phantom};
use reglat::contour::{label_slice, marching_squares, rasterize, Contour, Role, Slice2};
use reglat::latent::{collect_latents, decode_component, fit_pca, PcaBasis};
use reglat::probes::*;
use reglat::regnet::RegNet;
use reglat::volgrid::{DatasetManifest, Split};

fn setup(dir: &std::path::Path, skip: bool, seed: u64) -> (RegNet, PcaBasis, DatasetManifest) {
    let m = small_phantom(&dir.join("data"), 7);
    let net = perturbed_net(skip, seed);
    let lat = collect_latents(&net, &m, Split::Train).unwrap();
    let basis = fit_pca(&lat, 3, false).unwrap();
    (net, basis, m)
}

fn spec(s: &str, split: Split) -> ProbeSpec {
    ProbeSpec {
        transform: s.parse().unwrap(),
        split,
    }
}

#[test]
fn identity_probe_is_exactly_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (net, basis, m) = setup(dir.path(), false, 1);
    let r = affine_perturbation_probe(&net, &basis, &m, &spec("identity", Split::Train)).unwrap();
    assert_eq!(r.subjects.len(), 4);
    assert!(r.deltas.iter().flatten().all(|&d| d == 0.0));
    assert_eq!(r.dominance_ratio(), 0.0);
}

#[test]
fn probe_is_deterministic_and_order_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let (net, basis, m) = setup(dir.path(), false, 2);
    let s = spec("translation:z:2", Split::Train);
    let a = affine_perturbation_probe(&net, &basis, &m, &s).unwrap();
    assert_eq!(a, affine_perturbation_probe(&net, &basis, &m, &s).unwrap());
    let mut rev = m.clone();
    rev.subjects.reverse();
    assert_eq!(a, affine_perturbation_probe(&net, &basis, &rev, &s).unwrap());
    assert!(a.deltas.iter().flatten().all(|&d| d >= 0.0));
    assert!(a.deltas.iter().flatten().any(|&d| d > 0.0));
    assert_eq!(a.k(), 3);
    let csv = a.to_csv();
    assert!(csv.starts_with("transform,subject,component,abs_delta\n"));
    assert_eq!(csv.lines().count(), 1 + 4 * 3);
    assert_eq!(ProbeResult::from_csv(&csv).unwrap(), a);
}

#[test]
fn probe_rejects_foreign_basis_and_empty_split() {
    let dir = tempfile::tempdir().unwrap();
    let (_, basis, mut m) = setup(dir.path(), false, 3);
    let other = perturbed_net(false, 4);
    assert!(affine_perturbation_probe(&other, &basis, &m, &spec("identity", Split::Val)).is_err());
    let net = perturbed_net(false, 3);
    m.subjects.retain(|e| e.split == Split::Train);
    assert!(affine_perturbation_probe(&net, &basis, &m, &spec("identity", Split::Val)).is_err());
}

#[test]
fn sweep_writes_three_planes_per_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let (net, basis, m) = setup(dir.path(), false, 5);
    let lambdas = [-200.0, -100.0, 0.0, 100.0, 200.0];
    let out = lambda_sweep(&net, &basis, &m, "s000", 1, &lambdas, &dir.path().join("sweep")).unwrap();
    assert_eq!(out.images.len(), lambdas.len() * 3);
    assert_eq!(
        fs::read_dir(dir.path().join("sweep/images")).unwrap().count(),
        lambdas.len() * 3
    );
    let c: Vec<Contour> = serde_json::from_slice(
        &fs::read(
            dir.path()
                .join("sweep/contours")
                .join(format!("{}.json", sweep_stem(1, 100.0, 1))),
        )
        .unwrap(),
    )
    .unwrap();
    assert!(c.iter().any(|c| c.role == Role::Original) && c.iter().any(|c| c.role == Role::Deformed));
    assert!(lambda_sweep(&net, &basis, &m, "nobody", 1, &lambdas, dir.path()).is_err());
    assert!(lambda_sweep(&net, &basis, &m, "s000", 4, &lambdas, dir.path()).is_err());
}

#[test]
fn zero_lambda_on_untrained_model_keeps_contours() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_phantom(&dir.path().join("data"), 8);
    let net = RegNet::new(common::symmetry::small_arch(false), 0).unwrap();
    let basis = fit_pca(&collect_latents(&net, &m, Split::Train).unwrap(), 2, false).unwrap();
    let (v, s) = m.load_normalized(&m.subjects[0]).unwrap();
    for lambda in [0.0, 150.0] {
        // the zero head makes every λ an identity on the untrained model
        let d = DeformedSubject::new(&v, &s, &decode_component(&net, &basis, 1, lambda).unwrap()).unwrap();
        for axis in 0..3 {
            // slice 7 crosses the lobes on every axis of the 16³ phantom
            let sl = d.slice(axis, 7).unwrap();
            assert!(!sl.contours_original.is_empty());
            assert_eq!(sl.contours_original.len(), sl.contours_deformed.len());
            for (a, b) in sl.contours_original.iter().zip(&sl.contours_deformed) {
                assert_eq!((a.label, &a.points), (b.label, &b.points));
            }
        }
    }
}

#[test]
fn opposite_lambdas_give_distinct_grids() {
    let dir = tempfile::tempdir().unwrap();
    let (net, basis, _) = setup(dir.path(), false, 6);
    let a = decode_component(&net, &basis, 1, 50.0).unwrap();
    let b = decode_component(&net, &basis, 1, -50.0).unwrap();
    assert_ne!(a.phi(), b.phi());
    assert_eq!(a, decode_component(&net, &basis, 1, 50.0).unwrap());
}

fn dice(a: &Slice2<bool>, b: &Slice2<bool>) -> f64 {
    let inter = a.data.iter().zip(&b.data).filter(|(x, y)| **x && **y).count();
    let total = a.data.iter().filter(|x| **x).count() + b.data.iter().filter(|x| **x).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

#[test]
fn contours_rasterize_back_to_the_masks() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_phantom(&dir.path().join("data"), 9);
    let mut checked = 0;
    for e in &m.subjects {
        let (_, seg) = m.load_subject(e).unwrap();
        for axis in 0..3 {
            for index in 0..16 {
                for label in 1..=3 {
                    let mask = label_slice(&seg, label, axis, index).unwrap();
                    let polys = marching_squares(&mask);
                    for p in &polys {
                        assert!(p.len() >= 4);
                        assert!(p
                            .iter()
                            .all(|q| q[0] >= -0.5 && q[0] <= 15.5 && q[1] >= -0.5 && q[1] <= 15.5));
                    }
                    let back = rasterize(&polys, mask.rows, mask.cols);
                    assert!(
                        dice(&mask, &back) >= 0.98,
                        "{} axis {axis} slice {index} label {label}",
                        e.id
                    );
                    checked += 1;
                }
            }
        }
    }
    assert_eq!(checked, 6 * 3 * 16 * 3);
}

#[test]
fn skip_comparison_of_a_model_with_itself() {
    let dir = tempfile::tempdir().unwrap();
    let (net, basis, m) = setup(dir.path(), false, 10);
    let s = spec("rotation:z:10", Split::Train);
    let c = skip_connection_comparison((&net, &basis), (&net, &basis), &m, &s).unwrap();
    assert_eq!(c.noskip, c.skip);
    assert_eq!(c.summary_csv().lines().count(), 1 + 2 * 3);
    let (net2, basis2, _) = setup(&dir.path().join("b"), true, 10);
    let c2 = skip_connection_comparison((&net, &basis), (&net2, &basis2), &m, &s).unwrap();
    assert!(c2.report().contains("with skips"));
    let mut other = common::symmetry::small_arch(false);
    other.base_channels = 3;
    let net3 = RegNet::new(other, 0).unwrap();
    assert!(skip_connection_comparison((&net, &basis), (&net3, &basis), &m, &s).is_err());
}

#[test]
fn field_pca_shapes_and_invariants() {
    let dir = tempfile::tempdir().unwrap();
    let (net, _, m) = setup(dir.path(), false, 11);
    let f = pca_on_fields(&net, &m, 3, false).unwrap();
    assert_eq!(f.reference, m.split(Split::Val)[0].id);
    assert_eq!(f.subjects.len(), 5);
    let b = &f.basis;
    assert_eq!(b.dim, 3 * 16 * 16 * 16);
    for w in b.evr.windows(2) {
        assert!(w[0] >= w[1]);
    }
    assert!(b.cumulative_evr().last().unwrap() <= &(1.0 + 1e-9));
    for i in 1..=3 {
        for j in 1..=3 {
            let d: f64 = b
                .component(i)
                .unwrap()
                .iter()
                .zip(b.component(j).unwrap())
                .map(|(x, y)| x * y)
                .sum();
            assert!((d - if i == j { 1.0 } else { 0.0 }).abs() <= 1e-6);
        }
    }
}
