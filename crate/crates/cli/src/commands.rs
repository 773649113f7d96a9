use std::fs::{self, File};
use std::io::{BufWriter, LineWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use envsiren::checkpoint::{self, load_checkpoint, save_checkpoint};
use envsiren::hdr::{self, save_pfm, save_preview, HdrImage};
use envsiren::inverse::{self, InitMap, TRACE_HEADER};
use envsiren::metrics;
use envsiren::render::{self, build_transport, Scene, TransportOperator};
use envsiren::siren::{self, TRAIN_LOG_HEADER};
use envsiren::synth::{synthetic_sky, SkySpec};
use sha2::{Digest, Sha256};

use crate::config::{self, pick, FileConfig, FitOverrides, InverseOverrides};
use crate::{
    Cli, Command, EvalArgs, FitArgs, InvertArgs, PerturbArgs, RenderArgs, SceneArgs, SceneSource,
    SynthArgs, UsageError,
};

pub const DEFAULT_SPP: usize = 64;
pub const PREVIEW_GAMMA: f32 = 2.2;

pub fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(path) = &cli.config {
        require_file(path)?;
    }
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Fit(a) => fit(&a, &file),
        Command::Render(a) => render_cmd(&a, &file),
        Command::Invert(a) => invert(&a, &file),
        Command::Perturb(a) => perturb(&a, &file),
        Command::Eval(a) => eval(&a),
        Command::Synth(a) => synth(&a),
        Command::Scene(a) => scene_cmd(&a),
    }
}

fn require_file(path: &Path) -> anyhow::Result<()> {
    if !path.is_file() {
        let e = std::io::Error::new(std::io::ErrorKind::NotFound, "no such file");
        return Err(envsiren::Error::io(path, e).into());
    }
    Ok(())
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    if !path.as_os_str().is_empty() {
        fs::create_dir_all(path).map_err(|e| envsiren::Error::io(path, e))?;
    }
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn create(path: &Path) -> anyhow::Result<File> {
    Ok(File::create(path).map_err(|e| envsiren::Error::io(path, e))?)
}

/// A full 2:1 lat-long map is cropped to its upper half; a 4:1 map is taken
/// to be a crop already.
fn load_crop(path: &Path) -> anyhow::Result<HdrImage> {
    let img = hdr::load_image(path)?;
    let (w, h) = img.dims();
    if w == 2 * h {
        Ok(img.crop_upper_half()?)
    } else if w == 4 * h {
        Ok(img)
    } else {
        Err(envsiren::Error::Dimension(format!(
            "{}: {w}x{h} is neither a 2:1 lat-long map nor a 4:1 upper crop",
            path.display()
        ))
        .into())
    }
}

fn is_checkpoint(path: &Path) -> anyhow::Result<bool> {
    let mut magic = [0u8; 8];
    let mut f = File::open(path).map_err(|e| envsiren::Error::io(path, e))?;
    let n = f
        .read(&mut magic)
        .map_err(|e| envsiren::Error::io(path, e))?;
    Ok(n == magic.len() && &magic == checkpoint::MAGIC)
}

fn fit(a: &FitArgs, file: &FileConfig) -> anyhow::Result<()> {
    require_file(&a.env)?;
    let out_dir = parent_dir(&a.out);
    create_dir(&out_dir)?;
    let overrides = FitOverrides {
        epochs: a.epochs,
        lr: a.lr,
        robust: a.robust,
        gamma: a.gamma,
        proxy_lr: a.proxy_lr,
        seed: a.seed,
        hidden_features: a.hidden_features,
        hidden_layers: a.hidden_layers,
        omega_0: a.omega0,
    };
    let (cfg, arch) = config::fit_config(file, &overrides);
    cfg.validate()?;
    arch.validate()?;

    let crop = hdr::load_image(&a.env)?.crop_upper_half()?;
    let log_path = PathBuf::from(format!("{}.log", a.out.display()));
    let mut log = BufWriter::new(create(&log_path)?);
    writeln!(log, "{TRAIN_LOG_HEADER}")?;
    let start = Instant::now();
    let mut log_err = None;
    let trained = siren::train_with(&crop, &arch, &cfg, |r| {
        if log_err.is_none() {
            log_err = writeln!(log, "{}", r.log_line()).err();
        }
    });
    log.flush()?;
    let model = trained?;
    if let Some(e) = log_err {
        return Err(envsiren::Error::io(&log_path, e).into());
    }

    save_checkpoint(&model, &a.out)?;
    let recon = siren::predict_envmap(&model)?;
    let stem = a.env.file_stem().and_then(|s| s.to_str()).unwrap_or("env");
    let recon_path = out_dir.join(format!("{stem}_recon.pfm"));
    save_pfm(&recon, &recon_path)?;
    save_preview(&recon, recon_path.with_extension("png"), 1.0, PREVIEW_GAMMA)?;
    let m = metrics::envmap_metrics(&recon, &crop)?;
    println!(
        "fitted {}x{} crop in {:.1}s ({} epochs{}): log PSNR {:.2} dB, log SSIM {:.4}",
        crop.width(),
        crop.height(),
        start.elapsed().as_secs_f64(),
        cfg.epochs,
        if cfg.awp_enabled { ", robust" } else { "" },
        m.psnr_db,
        m.ssim
    );
    println!("wrote {} and {}", a.out.display(), recon_path.display());
    Ok(())
}

fn scene_from(source: &SceneSource, file: &FileConfig) -> anyhow::Result<Scene> {
    match &source.scene {
        Some(path) => {
            require_file(path)?;
            if source.roughness.is_some() {
                return Err(
                    UsageError("--roughness only applies to the built-in scene".into()).into(),
                );
            }
            Ok(Scene::load(path)?)
        }
        None => {
            let scene = Scene::desk(pick(source.roughness, file.render.roughness, 0.0));
            scene.validate()?;
            Ok(scene)
        }
    }
}

fn cache_key(scene: &Scene, env_dims: (usize, usize), spp: usize, seed: u64) -> String {
    let text = format!(
        "transport v{}\n{}\n{}x{}\n{spp}\n{seed}\n",
        render::TRANSPORT_VERSION,
        scene.to_toml(),
        env_dims.0,
        env_dims.1
    );
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Builds the operator, or loads it from the cache directory when a cache
/// for the same scene, sizes, sample count and seed exists.
fn transport(
    source: &SceneSource,
    file: &FileConfig,
    scene: &Scene,
    env_dims: (usize, usize),
) -> anyhow::Result<TransportOperator> {
    let spp = pick(source.spp, file.render.spp, DEFAULT_SPP);
    let seed = pick(source.seed, file.seed, 0);
    let build = || build_transport(scene, env_dims.0, env_dims.1, spp, seed);
    let op = match &source.cache_dir {
        None => build()?,
        Some(dir) => {
            create_dir(dir)?;
            let path = dir.join(format!(
                "transport-{}.bin",
                &cache_key(scene, env_dims, spp, seed)[..32]
            ));
            if path.is_file() {
                render::load_transport(&path)
                    .with_context(|| format!("loading cache {}", path.display()))?
            } else {
                let op = build()?;
                render::save_transport(&op, &path)?;
                op
            }
        }
    };
    if op.env_dims() != env_dims || op.render_dims() != (scene.camera.width, scene.camera.height) {
        return Err(envsiren::Error::Dimension(format!(
            "transport {:?} -> {:?} does not match map {env_dims:?} and scene",
            op.env_dims(),
            op.render_dims()
        ))
        .into());
    }
    Ok(op)
}

fn render_cmd(a: &RenderArgs, file: &FileConfig) -> anyhow::Result<()> {
    for p in a.env.iter().chain(&a.model).chain(&a.source.scene) {
        require_file(p)?;
    }
    create_dir(&parent_dir(&a.out))?;
    let env = match (&a.env, &a.model) {
        (Some(p), _) => load_crop(p)?,
        (None, Some(p)) => siren::predict_envmap(&load_checkpoint(p)?)?,
        (None, None) => return Err(UsageError("either --env or --model is required".into()).into()),
    };
    let scene = scene_from(&a.source, file)?;
    let op = transport(&a.source, file, &scene, env.dims())?;
    let img = op.render(&env)?;
    save_pfm(&img, &a.out)?;
    let preview = a
        .preview
        .clone()
        .unwrap_or_else(|| a.out.with_extension("png"));
    save_preview(
        &img,
        &preview,
        file.render.exposure.unwrap_or(1.0),
        PREVIEW_GAMMA,
    )?;
    println!(
        "rendered {}x{} ({} transport entries) to {}",
        img.width(),
        img.height(),
        op.nnz(),
        a.out.display()
    );
    Ok(())
}

fn invert(a: &InvertArgs, file: &FileConfig) -> anyhow::Result<()> {
    require_file(&a.target)?;
    require_file(&a.init)?;
    if let Some(p) = &a.source.scene {
        require_file(p)?;
    }
    create_dir(&a.out_dir)?;
    let overrides = InverseOverrides {
        iterations: a.iterations,
        lr: a.lr,
        seed: a.source.seed,
    };
    let cfg = config::inverse_config(file, a.method, &overrides);
    cfg.validate()?;

    let checkpoint_given = is_checkpoint(&a.init)?;
    let init = match (a.method.uses_model(), checkpoint_given) {
        (true, true) => InitMap::Model(load_checkpoint(&a.init)?),
        (false, false) => InitMap::Image(load_crop(&a.init)?),
        (true, false) => {
            return Err(UsageError(format!(
                "method {} needs a model checkpoint as --init",
                a.method
            ))
            .into())
        }
        (false, true) => {
            return Err(UsageError(format!(
                "method {} needs an environment map as --init",
                a.method
            ))
            .into())
        }
    };
    let env_dims = match &init {
        InitMap::Image(img) => img.dims(),
        InitMap::Model(m) => (m.width, m.height),
    };
    let target = hdr::load_image(&a.target)?;
    let scene = scene_from(&a.source, file)?;
    let op = transport(&a.source, file, &scene, env_dims)?;

    let trace_path = a.out_dir.join("trace.txt");
    let mut trace = LineWriter::new(create(&trace_path)?);
    writeln!(trace, "{TRACE_HEADER}")?;
    let mut trace_err = None;
    let result = inverse::optimize_with(&target, &init, &op, &cfg, |rec| {
        if trace_err.is_none() {
            trace_err = writeln!(trace, "{}", rec.line()).err();
        }
    });
    trace.flush()?;
    let result = result?;
    if let Some(e) = trace_err {
        return Err(envsiren::Error::io(&trace_path, e).into());
    }

    let exposure = file.render.exposure.unwrap_or(1.0);
    let env_path = a.out_dir.join("result_env.pfm");
    let render_path = a.out_dir.join("result_render.pfm");
    save_pfm(&result.env, &env_path)?;
    save_pfm(&result.rendering, &render_path)?;
    save_preview(
        &result.env,
        env_path.with_extension("png"),
        exposure,
        PREVIEW_GAMMA,
    )?;
    save_preview(
        &result.rendering,
        render_path.with_extension("png"),
        exposure,
        PREVIEW_GAMMA,
    )?;
    if let Some(model) = &result.model {
        save_checkpoint(model, a.out_dir.join("result_model.bin"))?;
    }
    let first = result
        .trace
        .first()
        .map(|r| r.render_ssim())
        .unwrap_or(f64::NAN);
    let last = metrics::rendering_metrics(&result.rendering, &target)?.ssim;
    println!(
        "{} iterations of {} in {:.1}s: rendering SSIM {:.4} -> {:.4}; results in {}",
        result.iterations,
        a.method,
        result.wall_time.as_secs_f64(),
        first,
        last,
        a.out_dir.display()
    );
    Ok(())
}

fn perturb(a: &PerturbArgs, file: &FileConfig) -> anyhow::Result<()> {
    require_file(&a.model)?;
    if a.n == 0 {
        return Err(UsageError("--n must be at least 1".into()).into());
    }
    if !(a.alpha >= 0.0 && a.alpha.is_finite()) {
        return Err(UsageError(format!("--alpha must be >= 0, got {}", a.alpha)).into());
    }
    create_dir(&a.out_dir)?;
    let model = load_checkpoint(&a.model)?;
    let base = siren::predict_envmap(&model)?;
    save_pfm(&base, a.out_dir.join("reconstruction.pfm"))?;
    let first_seed = pick(a.seed, file.seed, 0);
    let mut summary = String::from("# seed ssim\n");
    let mut total = 0.0;
    for i in 0..a.n {
        let seed = first_seed + i as u64;
        let noisy = model.with_params(siren::perturb(&model.params, a.alpha, seed));
        let img = siren::predict_envmap(&noisy)?;
        save_pfm(&img, a.out_dir.join(format!("perturbed_{i:03}.pfm")))?;
        let ssim = metrics::envmap_metrics(&img, &base)?.ssim;
        total += ssim;
        summary.push_str(&format!("{seed} {ssim:.9}\n"));
    }
    let mean = total / a.n as f64;
    summary.push_str(&format!("mean {mean:.9}\n"));
    let path = a.out_dir.join("summary.txt");
    fs::write(&path, summary).map_err(|e| envsiren::Error::io(&path, e))?;
    println!(
        "{} perturbations with alpha {}: mean log-space SSIM {mean:.6}",
        a.n, a.alpha
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    for p in [&a.pred_env, &a.gt_env, &a.pred_render, &a.gt_render] {
        require_file(p)?;
    }
    create_dir(&parent_dir(&a.out))?;
    let report = metrics::eval_report(
        &load_crop(&a.pred_env)?,
        &load_crop(&a.gt_env)?,
        &hdr::load_image(&a.pred_render)?,
        &hdr::load_image(&a.gt_render)?,
    )?;
    let table = report.to_table();
    fs::write(&a.out, &table).map_err(|e| envsiren::Error::io(&a.out, e))?;
    let csv = a.out.with_extension("csv");
    fs::write(&csv, report.to_records()).map_err(|e| envsiren::Error::io(&csv, e))?;
    print!("{table}");
    Ok(())
}

fn synth(a: &SynthArgs) -> anyhow::Result<()> {
    create_dir(&parent_dir(&a.out))?;
    let d = SkySpec::default_for(a.width, a.height);
    let spec = SkySpec {
        sun_x: a.sun_x.unwrap_or(d.sun_x),
        sun_y: a.sun_y.unwrap_or(d.sun_y),
        sun_peak: a.peak,
        ..d
    };
    let sky = synthetic_sky(a.width, a.height, &spec)?;
    save_pfm(&sky, &a.out)?;
    println!("wrote {}x{} sky to {}", a.width, a.height, a.out.display());
    Ok(())
}

fn scene_cmd(a: &SceneArgs) -> anyhow::Result<()> {
    create_dir(&parent_dir(&a.out))?;
    let scene = Scene::desk(a.roughness).with_resolution(a.width, a.height);
    scene.validate()?;
    fs::write(&a.out, scene.to_toml()).map_err(|e| envsiren::Error::io(&a.out, e))?;
    Ok(())
}
