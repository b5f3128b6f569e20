use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use meae_core::baselines::{run_baseline, BaselineMethod};
use meae_core::checkpoint::load_checkpoint;
use meae_core::hr::{
    align_and_score, bland_altman, bland_altman_csv, detect_ppg_beats, detect_r_peaks, detect_source_beats,
    metrics_csv, reference_beats, Beat, BeatSeries, MetricsRow,
};
use meae_core::model::MeaeParams;
use meae_core::nn::Tensor;
use meae_core::signal::{preprocess, resample, Recording, CORE_LEN, PAD, SEGMENT_LEN, TARGET_FS};
use meae_core::synth::{gen_ecg, generate_scene, SyntheticScene};
use meae_core::train::{checkpoint_name, select_best_epoch, ResumeState, Trainer, ValidationItem, LOG_FILE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::args::{BaselineArgs, Cli, Command, Common, EvalArgs, InferArgs, Reference, SynthArgs, TrainArgs};
use crate::config::{check_jobs, RunConfig};
use crate::io::{
    collect_recordings, collect_scenes, read_r_peaks, read_recording, stem, write_signal, write_text, BEATS_FILE,
    MIXTURE_FILE, SCENE_FILE,
};

pub const SMOOTH_WINDOW: usize = 5;
pub const CONFIG_ECHO: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_FILE: &str = "best.toml";

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Baseline(a) => cmd_baseline(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

/// Loads the config file, applies the seed flag and validates everything.
fn prepare(common: &Common, tweak: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
    check_jobs(common.jobs)?;
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    tweak(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn create_out(common: &Common, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&common.out).with_context(|| format!("cannot create {}", common.out.display()))?;
    write_text(&common.out.join(CONFIG_ECHO), &cfg.to_toml())
}

fn segments_of(path: &Path) -> Result<Vec<Tensor>> {
    let rec = read_recording(path)?;
    let pre = preprocess(&rec).with_context(|| format!("cannot preprocess {}", path.display()))?;
    if !pre.dropped.is_empty() {
        log::warn!("{}: dropped {} flat window(s)", path.display(), pre.dropped.len());
    }
    Ok(pre.segments.iter().map(|s| s.to_tensor()).collect())
}

fn validation_set(dir: &Path) -> Result<Vec<ValidationItem>> {
    let mut items = Vec::new();
    for scene in collect_scenes(dir)? {
        let rec = read_recording(&scene.join(MIXTURE_FILE))?;
        let peaks = read_r_peaks(&scene.join(BEATS_FILE))?;
        items.extend(ValidationItem::from_recording(&rec, &peaks)?);
    }
    if items.is_empty() {
        bail!("no validation scenes found in {}", dir.display());
    }
    Ok(items)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = prepare(&a.common, |c| {
        if let Some(v) = a.epochs {
            c.train.epochs = v;
        }
        if let Some(v) = a.encoders {
            c.model.num_encoders = v;
        }
        if let Some(v) = a.batch_size {
            c.train.batch_size = v;
        }
        if let Some(v) = a.learning_rate {
            c.train.learning_rate = v;
        }
    })?;
    ensure!(
        cfg.model.input_length == SEGMENT_LEN,
        "model input_length must be {SEGMENT_LEN} to train on preprocessed recordings, got {}",
        cfg.model.input_length
    );
    let resume = a.resume.as_deref().map(ResumeState::load).transpose().context("cannot load resume state")?;

    let mut data = Vec::new();
    for path in collect_recordings(&a.data)? {
        data.extend(segments_of(&path)?);
    }
    if data.is_empty() {
        bail!("no usable 48 s segments found in {}", a.data.display());
    }
    let validation = a.val.as_deref().map(validation_set).transpose()?.unwrap_or_default();
    log::info!("training on {} segment(s), validating on {}", data.len(), validation.len());

    create_out(&a.common, &cfg)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.checkpoint_dir = Some(a.common.out.clone());
    let mut trainer = match resume {
        Some(state) => {
            ensure!(state.params.config == cfg.model, "resume state was trained with a different [model] config");
            Trainer::resume(state, train_cfg)?
        }
        None => {
            let log = a.common.out.join(LOG_FILE);
            if log.exists() {
                std::fs::remove_file(&log)?;
            }
            Trainer::new(MeaeParams::init(&cfg.model)?, train_cfg, cfg.loss.clone())?
        }
    };
    let reports = trainer.train(&data, &validation)?;
    if !validation.is_empty() {
        let (epoch, encoder) = select_best_epoch(&reports)?;
        write_text(
            &a.common.out.join(BEST_FILE),
            &format!("epoch = {epoch}\nencoder = {encoder}\ncheckpoint = \"{}\"\n", checkpoint_name(epoch)),
        )?;
    }
    Ok(())
}

/// Parses `all` or a single index, checking it against `n`.
pub fn parse_encoders(choice: &str, n: usize) -> Result<Vec<usize>> {
    if choice.eq_ignore_ascii_case("all") {
        return Ok((0..n).collect());
    }
    let k: usize = choice.parse().with_context(|| format!("encoder must be an index or \"all\", got {choice:?}"))?;
    ensure!(k < n, "encoder {k} out of range; valid indices are 0..={}", n - 1);
    Ok(vec![k])
}

pub fn cmd_infer(a: &InferArgs) -> Result<()> {
    prepare(&a.common, |_| {})?;
    let params = load_checkpoint(&a.checkpoint).with_context(|| format!("cannot load {}", a.checkpoint.display()))?;
    let encoders = parse_encoders(&a.encoder, params.config.num_encoders)?;
    ensure!(
        params.config.input_length == SEGMENT_LEN,
        "checkpoint expects {}-sample inputs, preprocessing produces {SEGMENT_LEN}",
        params.config.input_length
    );
    let rec = read_recording(&a.input)?;
    let pre = preprocess(&rec)?;
    ensure!(pre.windows > 0, "{} is shorter than one 48 s window", a.input.display());

    let mut outputs = vec![vec![0.0; pre.windows * CORE_LEN]; encoders.len()];
    for seg in &pre.segments {
        let x = seg.to_tensor();
        let offset = seg.origin.index * CORE_LEN;
        for (out, &k) in outputs.iter_mut().zip(&encoders) {
            let s = params.infer_source(&x, k)?;
            out[offset..offset + CORE_LEN].copy_from_slice(&s.data()[PAD..PAD + CORE_LEN]);
        }
    }
    std::fs::create_dir_all(&a.common.out)?;
    for (out, &k) in outputs.iter().zip(&encoders) {
        write_signal(&a.common.out.join(format!("source-{k}.csv")), out, TARGET_FS)?;
    }
    Ok(())
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn at_target_rate(rec: Recording) -> Result<Recording> {
    Ok(resample(&rec, TARGET_FS)?)
}

/// R-peaks at 125 Hz from either an ECG or a beat file, refusing the PPG as its own reference.
fn r_peaks_for(reference: &Reference, ppg_path: &Path, ppg: &Recording) -> Result<Vec<usize>> {
    let peaks = if let Some(ecg_path) = &reference.ecg {
        ensure!(!same_file(ecg_path, ppg_path), "the PPG recording cannot also serve as the ECG reference");
        let ecg = at_target_rate(read_recording(ecg_path)?)?;
        ensure!(
            ecg.samples != ppg.samples,
            "ECG {} has the same samples as the PPG; refusing to use PPG as a pseudo-ECG",
            ecg_path.display()
        );
        let peaks = detect_r_peaks(&ecg.samples, ecg.fs);
        ensure!(peaks.len() >= 2, "ECG {} is too short or has no detectable R-peaks", ecg_path.display());
        peaks
    } else if let Some(path) = &reference.r_peaks {
        read_r_peaks(path)?
    } else {
        bail!("either --ecg or --r-peaks is required");
    };
    ensure!(peaks.len() >= 4, "need at least 4 R-peaks, found {}", peaks.len());
    Ok(peaks)
}

fn series(beats: Vec<Beat>) -> Result<BeatSeries> {
    Ok(BeatSeries::new(beats, TARGET_FS)?.smoothed(SMOOTH_WINDOW))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    prepare(&a.common, |_| {})?;
    let ppg = at_target_rate(read_recording(&a.ppg)?)?;
    let r_peaks = r_peaks_for(&a.reference, &a.ppg, &ppg)?;
    let reference = series(reference_beats(&r_peaks))?;
    let id = stem(&a.ppg);

    let mut rows = Vec::new();
    let mut ba = Vec::new();
    let raw = series(detect_ppg_beats(&ppg.samples, &r_peaks))?;
    let m = align_and_score(&reference, &raw).context("scoring raw PPG")?;
    rows.push(MetricsRow { recording_id: id.clone(), method: "ppg".into(), encoder: -1, metrics: m });
    ba.push(("ppg".to_string(), bland_altman(&reference, &raw)));

    for (i, path) in a.sources.iter().enumerate() {
        ensure!(!same_file(path, &a.ppg), "source {} is the PPG itself", path.display());
        let src = at_target_rate(read_recording(path)?)?;
        let test = series(detect_source_beats(&src.samples, &r_peaks))?;
        let m = align_and_score(&reference, &test).with_context(|| format!("scoring {}", path.display()))?;
        let label = stem(path);
        let encoder = label
            .rsplit(['-', '_'])
            .next()
            .and_then(|t| t.parse::<i64>().ok())
            .unwrap_or(i as i64);
        rows.push(MetricsRow { recording_id: id.clone(), method: "meae".into(), encoder, metrics: m });
        ba.push((label, bland_altman(&reference, &test)));
    }

    std::fs::create_dir_all(&a.common.out)?;
    write_text(&a.common.out.join(METRICS_FILE), &metrics_csv(&rows))?;
    for (label, pairs) in ba {
        write_text(&a.common.out.join(format!("bland-altman-{label}.csv")), &bland_altman_csv(&pairs))?;
    }
    Ok(())
}

pub fn cmd_baseline(a: &BaselineArgs) -> Result<()> {
    let cfg = prepare(&a.common, |_| {})?;
    let method: BaselineMethod = a.method.parse()?;
    ensure!(a.copies >= 1, "--copies must be at least 1");
    let ppg = at_target_rate(read_recording(&a.ppg)?)?;
    let r_peaks = r_peaks_for(&a.reference, &a.ppg, &ppg)?;
    let reference = series(reference_beats(&r_peaks))?;
    let id = stem(&a.ppg);

    let raw = series(detect_ppg_beats(&ppg.samples, &r_peaks))?;
    let raw_metrics = align_and_score(&reference, &raw).context("scoring raw PPG")?;
    let outcome = run_baseline(method, &ppg.samples, &r_peaks, &reference, a.copies, SMOOTH_WINDOW, cfg.model.seed)
        .with_context(|| format!("{} baseline on {}", method.name(), a.ppg.display()))?;
    if !outcome.converged {
        log::warn!("{} did not converge on {}", method.name(), a.ppg.display());
    }
    let rows = [
        MetricsRow { recording_id: id.clone(), method: "ppg".into(), encoder: -1, metrics: raw_metrics },
        MetricsRow {
            recording_id: id,
            method: method.name().into(),
            encoder: outcome.best as i64,
            metrics: outcome.metrics,
        },
    ];
    std::fs::create_dir_all(&a.common.out)?;
    write_text(&a.common.out.join(METRICS_FILE), &metrics_csv(&rows))?;
    write_signal(
        &a.common.out.join(format!("{}-component-{}.csv", method.name(), outcome.best)),
        &outcome.components[outcome.best],
        TARGET_FS,
    )
}

fn beats_csv(scene: &SyntheticScene) -> String {
    let transit = scene.beats.len() - scene.r_peaks.len();
    let mut out = String::from("pulse_peak,r_peak\n");
    for (i, b) in scene.beats.iter().enumerate() {
        match i.checked_sub(transit) {
            Some(j) => out.push_str(&format!("{b},{}\n", scene.r_peaks[j])),
            None => out.push_str(&format!("{b},\n")),
        }
    }
    out
}

fn write_scene(dir: &Path, scene: &SyntheticScene, with_ecg: bool) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    write_signal(&dir.join(MIXTURE_FILE), &scene.mixture, scene.fs)?;
    for (name, s) in scene.sources() {
        write_signal(&dir.join(format!("{name}.csv")), s, scene.fs)?;
    }
    write_text(&dir.join(BEATS_FILE), &beats_csv(scene))?;
    if with_ecg {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0xEC6);
        let ecg = gen_ecg(&scene.r_peaks, scene.len(), scene.fs, 0.01, &mut rng);
        write_signal(&dir.join("ecg.csv"), &ecg, scene.fs)?;
    }
    let mut cfg = scene.config.clone();
    cfg.seed = scene.seed;
    write_text(&dir.join(SCENE_FILE), &cfg.to_toml())
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = prepare(&a.common, |_| {})?;
    ensure!(a.count >= 1, "--count must be at least 1");
    let scenes = (0..a.count as u64)
        .map(|i| generate_scene(&cfg.scene, cfg.scene.seed.wrapping_add(i)))
        .collect::<meae_core::Result<Vec<_>>>()?;
    if scenes.len() == 1 {
        write_scene(&a.common.out, &scenes[0], a.ecg)
    } else {
        for (i, scene) in scenes.iter().enumerate() {
            write_scene(&a.common.out.join(format!("scene-{i:04}")), scene, a.ecg)?;
        }
        Ok(())
    }
}

/// Directory names produced by `synth --count`.
pub fn scene_dirs(out: &Path, count: usize) -> Vec<PathBuf> {
    (0..count).map(|i| out.join(format!("scene-{i:04}"))).collect()
}
