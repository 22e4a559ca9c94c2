use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use spikerecon::classic_recon::{tfi, tfp};
use spikerecon::frame::{Depth, Frame};
use spikerecon::spike_codec::SpikeStream;
use spikerecon::spike_sim::{
    build_dataset, read_dataset, simulate, synthetic_scene, write_dataset, DatasetSpec, InitialCharge,
    LuminanceSequence, SceneKind, SensorParams, Windows,
};
use spikerecon::swinsf::{parse_kv, Checkpoint, ModelConfig, SwinSf};
use spikerecon::train_eval::{evaluate, train, EvalReport, Reconstructor, TrainRunConfig};

use crate::error::CliError;
use crate::{ChargeArgs, Command, ConfigArgs, EvalMethod, Method, SensorArgs};

pub fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Simulate {
            input,
            scene,
            size,
            speed,
            frame_duration,
            sensor,
            charge,
            out,
        } => cmd_simulate(input, scene, &size, speed, frame_duration, &sensor, &charge, &out),
        Command::Reconstruct {
            method,
            stream,
            t_ref,
            window,
            checkpoint,
            sensor,
            out,
        } => cmd_reconstruct(method, &stream, t_ref, window, checkpoint.as_deref(), &sensor, &out),
        Command::BuildDataset {
            source,
            scene,
            scene_size,
            speed,
            crop,
            windows,
            count,
            sensor,
            charge,
            out,
        } => cmd_build_dataset(
            &source,
            &scene,
            &scene_size,
            speed,
            &crop,
            &windows,
            count,
            &sensor,
            &charge,
            &out,
        ),
        Command::Train {
            config,
            manifest,
            out,
            resume,
        } => cmd_train(&config, manifest, &out, resume.as_deref()),
        Command::Eval {
            method,
            manifest,
            checkpoint,
            config,
            windows,
            window,
            sensor,
            csv,
        } => cmd_eval(
            method,
            &manifest,
            checkpoint.as_deref(),
            &config,
            &windows,
            window,
            &sensor,
            csv.as_deref(),
        ),
        Command::Inspect { stream, frame } => cmd_inspect(&stream, frame),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Writes through a sibling temporary file so failures leave no partial output.
fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<(), CliError>) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    match write(&tmp) {
        Ok(()) => {
            fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn parse_dims<const N: usize>(s: &str, what: &str) -> Result<[usize; N], CliError> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| usage(format!("{what} {s:?}: {e}")))?;
    let arr: [usize; N] = parts
        .try_into()
        .map_err(|_| usage(format!("{what} {s:?}: expected {N} numbers separated by 'x'")))?;
    if arr.contains(&0) {
        return Err(usage(format!("{what} {s:?}: sizes must be positive")));
    }
    Ok(arr)
}

fn sensor_params(sensor: &SensorArgs, charge: Option<&ChargeArgs>) -> Result<SensorParams, CliError> {
    let mut p = SensorParams {
        alpha: sensor.alpha,
        theta: sensor.theta,
        ..Default::default()
    };
    if let Some(c) = charge {
        p.seed = c.seed;
        p.initial_charge = match c.initial_charge.as_str() {
            "zero" => InitialCharge::Constant(0.0),
            "uniform" => InitialCharge::Uniform,
            v => InitialCharge::Constant(
                v.parse()
                    .map_err(|_| usage(format!("--initial-charge {v:?}: expected zero, uniform or a number")))?,
            ),
        };
    }
    p.validate()?;
    Ok(p)
}

fn load_frames_dir(dir: &Path) -> Result<LuminanceSequence, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data(format!("{}: no .pgm frames", dir.display())));
    }
    let frames = paths
        .iter()
        .map(|p| Frame::load_pgm(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    log::debug!("{} frames from {}", frames.len(), dir.display());
    let label = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(LuminanceSequence::from_frames(&frames)?.with_label(label))
}

fn scene_source(spec: &str, size: &str, speed: f64) -> Result<LuminanceSequence, CliError> {
    let kind: SceneKind = spec.parse().map_err(usage)?;
    let [w, h, n] = parse_dims::<3>(size, "scene size")?;
    Ok(synthetic_scene(kind, w, h, n, speed).with_label(spec))
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    input: Option<PathBuf>,
    scene: Option<String>,
    size: &str,
    speed: f64,
    frame_duration: f64,
    sensor: &SensorArgs,
    charge: &ChargeArgs,
    out: &Path,
) -> Result<(), CliError> {
    let params = sensor_params(sensor, Some(charge))?;
    let lum = match (input, scene) {
        (Some(dir), None) => load_frames_dir(&dir)?,
        (None, Some(s)) => scene_source(&s, size, speed)?,
        _ => return Err(usage("give exactly one of --input or --scene")),
    };
    let lum = lum.with_frame_duration(frame_duration)?;
    let stream = simulate(&lum, &params)?;
    write_atomic(out, |p| Ok(fs::write(p, stream.to_spks_bytes())?))?;
    println!(
        "wrote {}: {}x{}, {} ticks, mean spike rate {:.6}",
        out.display(),
        stream.width(),
        stream.height(),
        stream.t_len(),
        stream.density()
    );
    Ok(())
}

fn read_stream(path: &Path) -> Result<SpikeStream, CliError> {
    let f = fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    SpikeStream::read_spks(BufReader::new(f)).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn segment_path(out: &Path, seg: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = out
        .extension()
        .map(|e| e.to_string_lossy().into_owned())
        .unwrap_or_else(|| "pgm".into());
    out.with_file_name(format!("{stem}_{seg}.{ext}"))
}

fn save_frame(f: &Frame, path: &Path) -> Result<(), CliError> {
    write_atomic(path, |p| Ok(f.save_pgm(p, Depth::Eight)?))
}

fn cmd_reconstruct(
    method: Method,
    stream_path: &Path,
    t_ref: Option<usize>,
    window: Option<usize>,
    checkpoint: Option<&Path>,
    sensor: &SensorArgs,
    out: &Path,
) -> Result<(), CliError> {
    let params = sensor_params(sensor, None)?;
    if method == Method::Swinsf && checkpoint.is_none() {
        return Err(usage("--method swinsf needs --checkpoint"));
    }
    let stream = read_stream(stream_path)?;
    let t_ref = t_ref.unwrap_or(stream.t_len() / 2);
    match method {
        Method::Tfi => {
            save_frame(&tfi(&stream, t_ref, &params)?, out)?;
            println!("wrote {}", out.display());
        }
        Method::Tfp => {
            let w = window.unwrap_or(stream.t_len());
            save_frame(&tfp(&stream, t_ref, w, &params)?, out)?;
            println!("wrote {}", out.display());
        }
        Method::Swinsf => {
            let ck = load_checkpoint(checkpoint.expect("checked"))?;
            let frames = ck.model.infer(&stream)?;
            for (f, seg) in frames.iter().zip(["left", "mid", "right"]) {
                let p = segment_path(out, seg);
                save_frame(f, &p)?;
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_build_dataset(
    sources: &[PathBuf],
    scenes: &[String],
    scene_size: &str,
    speed: f64,
    crop: &str,
    windows: &str,
    count: Option<usize>,
    sensor: &SensorArgs,
    charge: &ChargeArgs,
    out: &Path,
) -> Result<(), CliError> {
    let params = sensor_params(sensor, Some(charge))?;
    let [crop_w, crop_h] = parse_dims::<2>(crop, "crop")?;
    let windows: Windows = windows.parse().map_err(usage)?;
    if sources.is_empty() && scenes.is_empty() {
        return Err(usage("give at least one --source or --scene"));
    }
    let mut lum = Vec::new();
    for s in scenes {
        lum.push(scene_source(s, scene_size, speed)?);
    }
    for d in sources {
        lum.push(load_frames_dir(d)?);
    }
    let spec = DatasetSpec {
        crop_w,
        crop_h,
        windows,
        count,
    };
    let samples = build_dataset(&lum, &spec, &params, charge.seed)?;
    let manifest = write_dataset(out, &samples)?;
    println!(
        "wrote {} samples from {} sources to {}",
        samples.len(),
        lum.len(),
        manifest.display()
    );
    Ok(())
}

/// Splits `key = value` settings into model and run configs.
fn load_configs(args: &ConfigArgs, base: ModelConfig) -> Result<(ModelConfig, TrainRunConfig, bool), CliError> {
    let mut pairs = Vec::new();
    if let Some(p) = &args.config {
        let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        pairs.extend(parse_kv(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?);
    }
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("--set {o:?}: expected key=value")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut model = base;
    let mut run = TrainRunConfig::default();
    let mut touched_model = false;
    for (k, v) in pairs {
        if ModelConfig::is_key(&k) {
            model.set(&k, &v)?;
            touched_model = true;
        } else if TrainRunConfig::is_key(&k) {
            run.set(&k, &v)?;
        } else {
            return Err(usage(format!("unknown setting {k:?}")));
        }
    }
    model.validate()?;
    run.validate()?;
    Ok((model, run, touched_model))
}

fn cmd_train(args: &ConfigArgs, manifest: Option<PathBuf>, out: &Path, resume: Option<&Path>) -> Result<(), CliError> {
    let resume = resume.map(load_checkpoint).transpose()?;
    let base = resume
        .as_ref()
        .map_or_else(ModelConfig::default, |c| c.model.config().clone());
    let (cfg, mut run, _) = load_configs(args, base)?;
    if let Some(ck) = &resume {
        check_fingerprint(ck, &cfg)?;
    }
    if let Some(m) = manifest {
        run.manifest = Some(m);
    }
    let manifest = run
        .manifest
        .clone()
        .ok_or_else(|| usage("no dataset: pass --manifest or set `manifest` in the config"))?;
    let samples = read_dataset(&manifest)?;
    log::info!(
        "{} samples from {}, model config {:016x}",
        samples.len(),
        manifest.display(),
        cfg.fingerprint()
    );
    let model = SwinSf::new(cfg)?;
    let report = train(model, run, &samples, Some(out), resume, |r| println!("{}", r.to_line()))?;
    if report.holdout_is_train {
        println!("no held-out samples; metrics on the training samples");
    }
    print!("{}", report.holdout.to_text());
    println!("checkpoint: {}", out.join("last.swsf").display());
    Ok(())
}

fn check_fingerprint(ck: &Checkpoint, cfg: &ModelConfig) -> Result<(), CliError> {
    let have = ck.model.config().fingerprint();
    if have != cfg.fingerprint() {
        return Err(CliError::Data(format!(
            "checkpoint config fingerprint {have:016x} does not match the requested config {:016x}",
            cfg.fingerprint()
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    method: EvalMethod,
    manifest: &Path,
    checkpoint: Option<&Path>,
    args: &ConfigArgs,
    windows: &str,
    window: Option<usize>,
    sensor: &SensorArgs,
    csv: Option<&Path>,
) -> Result<(), CliError> {
    let params = sensor_params(sensor, None)?;
    let mut windows: Windows = windows.parse().map_err(usage)?;
    if method == EvalMethod::Swinsf && checkpoint.is_none() {
        return Err(usage("--method swinsf needs --checkpoint"));
    }
    let ck = checkpoint.map(load_checkpoint).transpose()?;
    if let Some(ck) = &ck {
        let (cfg, _, touched) = load_configs(args, ck.model.config().clone())?;
        if touched {
            check_fingerprint(ck, &cfg)?;
        }
        if method == EvalMethod::Swinsf {
            windows = ck.model.config().windows;
        }
    } else {
        load_configs(args, ModelConfig::default())?;
    }
    let samples = read_dataset(manifest)?;
    let rec = match method {
        EvalMethod::Swinsf => Reconstructor::SwinSf(&ck.as_ref().expect("checked").model),
        EvalMethod::Tfi => Reconstructor::Tfi(params),
        EvalMethod::Tfp => Reconstructor::Tfp(params, window),
        EvalMethod::Gt => Reconstructor::GroundTruth,
    };
    let report: EvalReport = evaluate(&samples, &rec, windows)?;
    emit(&report.to_text())?;
    if let Some(p) = csv {
        write_atomic(p, |t| Ok(fs::write(t, report.to_csv())?))?;
    }
    Ok(())
}

fn cmd_inspect(path: &Path, frame: Option<usize>) -> Result<(), CliError> {
    let s = read_stream(path)?;
    if let Some(t) = frame {
        if t >= s.t_len() {
            return Err(usage(format!("--frame {t} outside stream of {} ticks", s.t_len())));
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "dims: {}x{}", s.width(), s.height());
    let _ = writeln!(out, "ticks: {}", s.t_len());
    let _ = writeln!(out, "tick_duration: {}", s.tick_duration());
    let _ = writeln!(out, "spikes: {}", s.spike_count());
    let _ = writeln!(out, "density: {:.6}", s.density());
    let px = (s.width() * s.height()) as f64;
    for t in 0..s.t_len() {
        let _ = writeln!(out, "frame {t}: density {:.6}", s.count_frame(t) as f64 / px);
    }
    if let Some(t) = frame {
        let _ = writeln!(out, "frame {t} bitmap:");
        for i in 0..s.height() {
            let row: String = (0..s.width())
                .map(|j| if s.bit(t, i * s.width() + j) { '#' } else { '.' })
                .collect();
            let _ = writeln!(out, "{row}");
        }
    }
    emit(&out)
}

/// Prints to stdout; a closed pipe ends output quietly.
fn emit(text: &str) -> Result<(), CliError> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}
