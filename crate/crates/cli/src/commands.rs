use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use log::info;

use reglat::latent::{
    collect_latents, decode_component, fit_pca, load_basis, load_latents, project_matrix, save_basis, save_coeffs,
    save_latents, PcaBasis,
};
use reglat::phantom::{generate_phantom_dataset, PhantomSpec};
use reglat::probes::{
    affine_perturbation_probe, lambda_sweep, pca_on_fields, skip_connection_comparison, ProbeSpec, ProbeSummary,
    ProbeTransform,
};
use reglat::regnet::{load_checkpoint, ArchConfig, RegNet};
use reglat::trainer::{evaluate, latest_checkpoint, train, AugmentConfig, TrainConfig, CONFIG_FILE};
use reglat::volgrid::{save_grid, DatasetManifest, Split, MANIFEST_FILE};
use reglat::warp::jacobian_determinant_map;
use reglat_service::{Api, Loaded};

use crate::settings::Resolver;
use crate::*;

pub fn run(cli: Cli) -> Result<()> {
    let runs = cli.runs;
    match cli.command {
        Command::Phantom(a) => phantom(&runs, a),
        Command::Train(a) => train_cmd(&runs, a),
        Command::Eval(a) => eval(&runs, a),
        Command::Latents(a) => latents(&runs, a),
        Command::Pca(a) => pca(&runs, a),
        Command::Component(a) => component(&runs, a),
        Command::Sweep(a) => sweep(&runs, a),
        Command::Probe(a) => probe(&runs, a),
        Command::Fieldpca(a) => fieldpca(&runs, a),
        Command::Serve(a) => serve(&runs, a),
    }
}

/// A bare name lives under the runs root; anything path-like is used as is.
fn run_dir(runs: &Path, name: &str) -> PathBuf {
    let p = Path::new(name);
    if p.is_absolute() || p.components().count() > 1 || name.starts_with('.') {
        p.to_path_buf()
    } else {
        runs.join(p)
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        other => bail!("unknown split '{other}' (expected train or val)"),
    }
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
    }
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!("{} already exists; pass --force to overwrite", path.display());
    }
    Ok(())
}

/// Exclusive lock on a run directory for the lifetime of a command.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path, force: bool) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(".lock");
        if force {
            let _ = fs::remove_file(&path);
        }
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| {
                format!(
                    "{} is locked by another command (remove {} if stale)",
                    dir.display(),
                    path.display()
                )
            })?;
        Ok(Self(path))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Dataset a run was trained on, from its `config.json`.
fn run_dataset(run: &Path) -> Option<PathBuf> {
    let text = fs::read_to_string(run.join(CONFIG_FILE)).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    Some(PathBuf::from(v.get("manifest_root")?.as_str()?))
}

/// Resolved model location.
struct ModelPaths {
    run: PathBuf,
    checkpoint: Option<PathBuf>,
    data: PathBuf,
}

fn resolve_model(r: &mut Resolver, runs: &Path, m: ModelArgs) -> Result<ModelPaths> {
    let name = r.get("run", m.run, || "default".to_string())?;
    let run = run_dir(runs, &name);
    let checkpoint = r.get("checkpoint", m.checkpoint.map(Some), || None)?;
    let data = r.path("data", m.data, || {
        run_dataset(&run).unwrap_or_else(|| runs.join("data"))
    })?;
    Ok(ModelPaths { run, checkpoint, data })
}

impl ModelPaths {
    fn load(&self) -> Result<(RegNet, DatasetManifest)> {
        let ckpt = match &self.checkpoint {
            Some(p) => p.clone(),
            None => latest_checkpoint(&self.run)?,
        };
        info!("loading {}", ckpt.display());
        let net = load_checkpoint(&ckpt, None)?.net;
        let manifest = DatasetManifest::load(&self.data)?;
        Ok((net, manifest))
    }
}

fn load_checked_basis(dir: &Path, net: &RegNet) -> Result<PcaBasis> {
    let basis = load_basis(dir)?;
    basis.check_model(net)?;
    Ok(basis)
}

fn start(r: &Resolver) {
    eprint!("{}", r.report());
}

fn phantom(runs: &Path, a: PhantomArgs) -> Result<()> {
    let mut r = Resolver::new("phantom", a.common.config.as_deref())?;
    let seed = r.get("seed", a.common.seed, || 0)?;
    let force = r.flag("force", a.common.force, false)?;
    let out = r.path("out", a.out, || runs.join("data"))?;
    let t_only = r.get("translation_only", a.translation_only.map(Some), || None)?;
    let mut spec = match t_only {
        Some(t) => PhantomSpec::translation_only(t),
        None => PhantomSpec::default(),
    };
    spec.seed = seed;
    let d = spec.clone();
    spec.size = r.get("size", a.size, || d.size)?;
    spec.n_subjects = r.get("subjects", a.subjects, || d.n_subjects)?;
    spec.n_val = r.get("val", a.val, || d.n_val)?;
    if t_only.is_none() {
        let t = r.get("jitter_translation", a.jitter_translation, || d.jitter.translation[0])?;
        spec.jitter.translation = [t; 3];
        spec.jitter.rotation_deg = [r.get("jitter_rotation", a.jitter_rotation, || d.jitter.rotation_deg[0])?; 3];
        spec.jitter.scale = r.get("jitter_scale", a.jitter_scale, || d.jitter.scale)?;
        spec.smooth_warp_amplitude = r.get("warp", a.warp, || d.smooth_warp_amplitude)?;
    }
    spec.noise_sigma = r.get("noise", a.noise, || d.noise_sigma)?;
    if spec.size != d.size {
        spec.structures = reglat::phantom::default_structures(spec.size);
    }
    start(&r);
    refuse_overwrite(&out.join(MANIFEST_FILE), force)?;
    let m = generate_phantom_dataset(&spec, &out)?;
    println!(
        "wrote {} subjects ({} train, {} val) to {}",
        m.subjects.len(),
        m.split(Split::Train).len(),
        m.split(Split::Val).len(),
        out.display()
    );
    Ok(())
}

fn train_cmd(runs: &Path, a: TrainArgs) -> Result<()> {
    let mut r = Resolver::new("train", a.common.config.as_deref())?;
    let seed = r.get("seed", a.common.seed, || 0)?;
    let force = r.flag("force", a.common.force, false)?;
    let data = r.path("data", a.data, || runs.join("data"))?;
    let run = run_dir(runs, &r.get("run", a.run, || "default".to_string())?);
    let d = TrainConfig::default();
    let mut cfg = TrainConfig {
        seed,
        epochs: r.get("epochs", a.epochs, || d.epochs)?,
        lr: r.get("lr", a.lr, || d.lr)?,
        batch_size: r.get("batch_size", a.batch_size, || d.batch_size)?,
        eval_every: r.get("eval_every", a.eval_every, || d.eval_every)?,
        ..d.clone()
    };
    cfg.weights.alpha = r.get("alpha", a.alpha, || d.weights.alpha)?;
    cfg.weights.beta = r.get("beta", a.beta, || d.weights.beta)?;
    cfg.weights.ncc_window = r.get("ncc_window", a.ncc_window, || d.weights.ncc_window)?;
    if r.flag("no_augment", a.no_augment, false)? {
        cfg.augment = AugmentConfig::none();
    }
    let da = ArchConfig::default();
    let base_channels = r.get("base_channels", a.base_channels, || da.base_channels)?;
    let n_down = r.get("n_down", a.n_down, || da.n_downsamplings)?;
    let skip = r.flag("skip", a.skip, false)?;
    start(&r);

    refuse_overwrite(&run.join(CONFIG_FILE), force)?;
    let _lock = RunLock::acquire(&run, force)?;
    if force {
        for e in fs::read_dir(&run)? {
            let p = e?.path();
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if name.starts_with("checkpoint_") && name.ends_with(".bin") {
                fs::remove_file(&p)?;
            }
        }
    }
    let manifest = DatasetManifest::load(&data)?;
    let first = manifest.subjects.first().context("dataset is empty")?;
    let (v, _) = manifest.load_subject(first)?;
    let arch = ArchConfig {
        in_shape: v.shape(),
        base_channels,
        n_downsamplings: n_down,
        skip_connections: skip,
        ..da
    };
    let out = train(&manifest, &cfg, &arch, &run)?;
    println!("checkpoint {}", out.checkpoint.display());
    if let Some(e) = out.eval {
        println!(
            "val Dice {:.4} ± {:.4} -> {:.4} ± {:.4} over {} pairs; fold fraction mean {:.2e} max {:.2e}",
            e.mean_before,
            e.std_before,
            e.mean_after,
            e.std_after,
            e.pairs.len(),
            e.mean_fold_fraction,
            e.max_fold_fraction
        );
    }
    Ok(())
}

fn eval(runs: &Path, a: EvalArgs) -> Result<()> {
    let mut r = Resolver::new("eval", a.common.config.as_deref())?;
    r.get("seed", a.common.seed, || 0)?;
    let force = r.flag("force", a.common.force, false)?;
    let m = resolve_model(&mut r, runs, a.model)?;
    let split = parse_split(&r.get("split", a.split, || "val".to_string())?)?;
    let out = r.path("out", a.out, || m.run.join(format!("eval_{}.json", split_name(split))))?;
    start(&r);
    refuse_overwrite(&out, force)?;
    let (net, manifest) = m.load()?;
    let e = evaluate(&net, &manifest, split)?;
    if let Some(p) = out.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(&out, serde_json::to_vec_pretty(&e)?)?;
    println!(
        "{} Dice {:.4} ± {:.4} -> {:.4} ± {:.4} over {} pairs; fold fraction mean {:.2e} max {:.2e}",
        split_name(split),
        e.mean_before,
        e.std_before,
        e.mean_after,
        e.std_after,
        e.pairs.len(),
        e.mean_fold_fraction,
        e.max_fold_fraction
    );
    Ok(())
}

fn latents(runs: &Path, a: LatentsArgs) -> Result<()> {
    let mut r = Resolver::new("latents", a.common.config.as_deref())?;
    r.get("seed", a.common.seed, || 0)?;
    let force = r.flag("force", a.common.force, false)?;
    let m = resolve_model(&mut r, runs, a.model)?;
    let split = parse_split(&r.get("split", a.split, || "train".to_string())?)?;
    let out = r.path("out", a.out, || m.run.join("latents.bin"))?;
    start(&r);
    refuse_overwrite(&out, force)?;
    let (net, manifest) = m.load()?;
    let l = collect_latents(&net, &manifest, split)?;
    save_latents(&out, &l)?;
    println!("wrote {} x {} latent matrix to {}", l.n, l.dim, out.display());
    Ok(())
}

fn pca(runs: &Path, a: PcaArgs) -> Result<()> {
    let mut r = Resolver::new("pca", a.common.config.as_deref())?;
    r.get("seed", a.common.seed, || 0)?;
    let force = r.flag("force", a.common.force, false)?;
    let run = run_dir(runs, &r.get("run", a.run, || "default".to_string())?);
    let latents = r.path("latents", a.latents, || run.join("latents.bin"))?;
    let k = r.get("k", a.k, || 32)?;
    let center = r.flag("center", a.center, false)?;
    let out = r.path("out", a.out, || run.join("basis"))?;
    start(&r);
    refuse_overwrite(&out.join(reglat::latent::BASIS_FILE), force)?;
    let l = load_latents(&latents)?;
    let basis = fit_pca(&l, k, center)?;
    save_basis(&out, &basis)?;
    let coeffs = project_matrix(&basis, &l)?;
    save_coeffs(&out.join("coeffs.csv"), basis.k, &coeffs)?;
    let cum = basis.cumulative_evr();
    println!("K = {} over {} latents of dimension {}", basis.k, l.n, l.dim);
    println!("component,evr,cumulative_evr");
    for (j, (e, c)) in basis.evr.iter().zip(&cum).enumerate() {
        println!("{},{e:.6},{c:.6}", j + 1);
    }
    println!("wrote basis to {}", out.display());
    Ok(())
}

fn fmt_lambda(l: f64) -> String {
    format!("{l}")
}

fn component(runs: &Path, a: ComponentArgs) -> Result<()> {
    let mut r = Resolver::new("component", a.common.config.as_deref())?;
    r.get("seed", a.common.seed, || 0)?;
    let force = r.flag("force", a.common.force, false)?;
    let m = resolve_model(&mut r, runs, a.model)?;
    let basis_dir = r.path("basis", a.basis, || m.run.join("basis"))?;
    let j = r.get("j", a.j, || 1)?;
    let lambda = r.get("lambda", a.lambda, || 100.0)?;
    let subject = r.get("subject", a.subject.map(Some), || None)?;
    let out = r.path("out", a.out, || {
        m.run.join("components").join(format!("c{j}_l{}", fmt_lambda(lambda)))
    })?;
    start(&r);
    refuse_overwrite(&out, force)?;
    let (net, manifest) = m.load()?;
    let basis = load_checked_basis(&basis_dir, &net)?;
    let grid = decode_component(&net, &basis, j, lambda)?;
    save_grid(&out.join("grid"), &grid)?;
    let jac = jacobian_determinant_map(&grid)?;
    println!(
        "component {j} at lambda {lambda}: min det {:.4}, fold fraction {:.4e}",
        jac.min_det(),
        jac.fold_fraction()
    );
    if let Some(s) = subject {
        let o = lambda_sweep(&net, &basis, &manifest, &s, j, &[lambda], &out)?;
        println!("rendered {} slices of {s}", o.images.len());
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn sweep(runs: &Path, a: SweepArgs) -> Result<()> {
    let mut r = Resolver::new("sweep", a.common.config.as_deref())?;
    r.get("seed", a.common.seed, || 0)?;
    let force = r.flag("force", a.common.force, false)?;
    let m = resolve_model(&mut r, runs, a.model)?;
    let basis_dir = r.path("basis", a.basis, || m.run.join("basis"))?;
    let j = r.get("j", a.j, || 1)?;
    let lambdas = r.get("lambdas", a.lambdas, || vec![-200.0, -100.0, 0.0, 100.0, 200.0])?;
    let subject = r.get("subject", a.subject.map(Some), || None)?;
    let out = r.path("out", a.out, || m.run.join("sweep").join(format!("c{j}")))?;
    start(&r);
    refuse_overwrite(&out, force)?;
    let (net, manifest) = m.load()?;
    let basis = load_checked_basis(&basis_dir, &net)?;
    let subject = match subject {
        Some(s) => s,
        None => manifest
            .split(Split::Val)
            .first()
            .copied()
            .or(manifest.subjects.first())
            .context("dataset is empty")?
            .id
            .clone(),
    };
    let o = lambda_sweep(&net, &basis, &manifest, &subject, j, &lambdas, &out)?;
    println!(
        "wrote {} images and {} contour files for {subject} to {}",
        o.images.len(),
        o.contours.len(),
        out.display()
    );
    Ok(())
}

fn probe(runs: &Path, a: ProbeArgs) -> Result<()> {
    let mut r = Resolver::new("probe", a.common.config.as_deref())?;
    r.get("seed", a.common.seed, || 0)?;
    let force = r.flag("force", a.common.force, false)?;
    let m = resolve_model(&mut r, runs, a.model)?;
    let basis_dir = r.path("basis", a.basis, || m.run.join("basis"))?;
    let transform: ProbeTransform = r
        .get("transform", a.transform, || "translation:z:10".to_string())?
        .parse()?;
    let split = parse_split(&r.get("split", a.split, || "val".to_string())?)?;
    let out = r.path("out", a.out, || m.run.join("probes"))?;
    let compare = r.get("compare_run", a.compare_run, String::new)?;
    let compare = (!compare.is_empty()).then(|| run_dir(runs, &compare));
    let compare_basis = match &compare {
        Some(c) => Some(r.path("compare_basis", a.compare_basis, || c.join("basis"))?),
        None => None,
    };
    start(&r);
    let csv = out.join(transform.csv_name());
    refuse_overwrite(&csv, force)?;
    let (net, manifest) = m.load()?;
    let basis = load_checked_basis(&basis_dir, &net)?;
    let spec = ProbeSpec { transform, split };
    let res = affine_perturbation_probe(&net, &basis, &manifest, &spec)?;
    fs::create_dir_all(&out)?;
    fs::write(&csv, res.to_csv())?;
    let s = ProbeSummary::from(&res);
    println!("{transform} over {} subjects", s.n_subjects);
    println!("component,median,q1,q3");
    for (j, c) in s.components.iter().enumerate() {
        println!("{},{:.6},{:.6},{:.6}", j + 1, c.median, c.q1, c.q3);
    }
    println!(
        "dominance ratio {:.4} (uniform {:.4}), {} activated components",
        s.dominance_ratio,
        1.0 / s.k.max(1) as f64,
        s.activation_count
    );
    println!("wrote {}", csv.display());
    if let (Some(c), Some(cb)) = (compare, compare_basis) {
        let ckpt = latest_checkpoint(&c)?;
        let other = load_checkpoint(&ckpt, None)?.net;
        let other_basis = load_checked_basis(&cb, &other)?;
        let (noskip, skip) = match (net.arch().skip_connections, other.arch().skip_connections) {
            (false, true) => ((&net, &basis), (&other, &other_basis)),
            (true, false) => ((&other, &other_basis), (&net, &basis)),
            _ => bail!("exactly one of the two runs must use skip connections"),
        };
        let cmp = skip_connection_comparison(noskip, skip, &manifest, &spec)?;
        let path = out.join(format!("skip_comparison_{}.csv", transform.file_stem()));
        refuse_overwrite(&path, force)?;
        fs::write(&path, cmp.summary_csv())?;
        println!("{}", cmp.report());
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn fieldpca(runs: &Path, a: FieldPcaArgs) -> Result<()> {
    let mut r = Resolver::new("fieldpca", a.common.config.as_deref())?;
    r.get("seed", a.common.seed, || 0)?;
    let force = r.flag("force", a.common.force, false)?;
    let m = resolve_model(&mut r, runs, a.model)?;
    let k = r.get("k", a.k, || 32)?;
    let center = r.flag("center", a.center, false)?;
    let out = r.path("out", a.out, || m.run.join("fieldpca"))?;
    start(&r);
    refuse_overwrite(&out.join(reglat::latent::BASIS_FILE), force)?;
    let (net, manifest) = m.load()?;
    let f = pca_on_fields(&net, &manifest, k, center)?;
    save_basis(&out, &f.basis)?;
    let meta = serde_json::json!({"reference": f.reference, "subjects": f.subjects});
    fs::write(out.join("fields.json"), serde_json::to_vec_pretty(&meta)?)?;
    let cum = f.basis.cumulative_evr();
    println!(
        "field PCA against reference {}: {} fields of dimension {}",
        f.reference,
        f.subjects.len(),
        f.basis.dim
    );
    println!("component,evr,cumulative_evr");
    for (j, (e, c)) in f.basis.evr.iter().zip(&cum).enumerate() {
        println!("{},{e:.6},{c:.6}", j + 1);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn serve(runs: &Path, a: ServeArgs) -> Result<()> {
    let mut r = Resolver::new("serve", a.common.config.as_deref())?;
    r.get("seed", a.common.seed, || 0)?;
    r.flag("force", a.common.force, false)?;
    let m = resolve_model(&mut r, runs, a.model)?;
    let basis_dir = r.path("basis", a.basis, || m.run.join("basis"))?;
    let probes = r.path("probes", a.probes, || m.run.join("probes"))?;
    let host = r.get("host", a.host, || "127.0.0.1".to_string())?;
    let port = r.get("port", a.port, || 8080)?;
    start(&r);
    let (net, manifest) = m.load()?;
    let basis = load_basis(&basis_dir)?;
    let loaded = Loaded::new(net, basis, manifest, probes)?;
    let addr = format!("{host}:{port}")
        .parse()
        .with_context(|| format!("invalid listen address {host}:{port}"))?;
    let api = Arc::new(Api::new(loaded));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(reglat_service::serve(addr, api))?;
    Ok(())
}
