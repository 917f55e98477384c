//! Subcommand implementations.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rigsynth::audio2rig::{
    decode_weights, encode_weights, grad_check, infer as run_model, read_weights, write_weights, Audio2RigModel, InferenceConfig,
    ModelConfig, ModelError, Probe,
};
use rigsynth::blink::{self, BlinkClassifier, BlinkEvent, BlinkFrequencyModel, SvmConfig};
use rigsynth::evalkit::{lr_correlation, mae_report};
use rigsynth::featio::{
    extract_fallback_features, read_feature_csv, read_feature_file, resample_features, AudioClip, FallbackConfig,
    FALLBACK_FAMILY,
};
use rigsynth::gaze::{inject_gaze, sample_gaze_track, GazeConfig};
use rigsynth::nn::standard_normal;
use rigsynth::postfx::{postprocess, SmoothConfig};
use rigsynth::rig::{ControllerMap, EmotionLabel, EmotionTimeline, RIG_FPS};
use rigsynth::rigcsv::{read_rig_csv, write_rig_csv};
use rigsynth::trainer::{self, export_dataset, load_manifest, train as run_training, write_loss_csv, TrainConfig};

use crate::error::{data, CliError};
use crate::{
    AnalyzeArgs, BlinkDetectArgs, BlinkFitArgs, BlinkTrainArgs, ExportMapArgs, GenSyntheticArgs, GradcheckArgs,
    InferArgs, InitArgs, MapArg, ModelArgs, Preset, TrainArgs,
};

type CliResult = Result<(), CliError>;

fn load_map(arg: &MapArg) -> Result<ControllerMap, CliError> {
    match &arg.map {
        Some(path) => ControllerMap::load(path).map_err(|e| data(&format!("controller map {}", path.display()), e)),
        None => Ok(ControllerMap::default_map()),
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| data(&path.display().to_string(), e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| data(&path.display().to_string(), e))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| data(&path.display().to_string(), e))
}

fn write_text(path: Option<&Path>, text: &str) -> CliResult {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| data(&p.display().to_string(), e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Independent seeds for the blink and gaze samplers, drawn from the root seed.
fn derived_seeds(root: u64) -> (u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    (rng.next_u64(), rng.next_u64())
}

fn read_wav(path: &Path) -> Result<AudioClip, CliError> {
    let ctx = path.display().to_string();
    let mut reader = hound::WavReader::open(path).map_err(|e| data(&ctx, e))?;
    let spec = reader.spec();
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => {
            reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<_, _>>().map_err(|e| data(&ctx, e))?
        }
        hound::SampleFormat::Int => {
            let full_scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / full_scale))
                .collect::<Result<_, _>>()
                .map_err(|e| data(&ctx, e))?
        }
    };
    let channels = spec.channels.max(1) as usize;
    let mono = interleaved.chunks(channels).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    Ok(AudioClip::new(mono, spec.sample_rate)?)
}

fn read_timeline(path: &Path, frames: usize) -> Result<EmotionTimeline, CliError> {
    let ctx = path.display().to_string();
    let mut keys = Vec::new();
    for row in csv::Reader::from_reader(open(path)?).deserialize() {
        let (frame, label): (usize, String) = row.map_err(|e| data(&ctx, e))?;
        let label: EmotionLabel = label.parse().map_err(|e| data(&ctx, e))?;
        keys.push((frame, label));
    }
    if let Some(&(last, _)) = keys.last() {
        if last >= frames {
            return Err(CliError::Data(format!(
                "timeline length mismatch: key at frame {last} but the clip has {frames} frames at 60 fps"
            )));
        }
    }
    EmotionTimeline::from_keys(&keys, frames).map_err(|e| data(&ctx, e))
}

#[derive(Serialize)]
struct InferFlags {
    blink: bool,
    gaze: bool,
    smooth: bool,
}

#[derive(Serialize)]
struct Sidecar {
    fps: f64,
    frames: usize,
    seed: u64,
    blink_seed: Option<u64>,
    gaze_seed: Option<u64>,
    weights_sha256: String,
    feature_family: String,
    /// True when features came from the built-in audio extractor.
    reference_features: bool,
    emotion: Option<EmotionLabel>,
    flags: InferFlags,
    blink_model: Option<BlinkFrequencyModel>,
}

pub fn infer(args: InferArgs) -> CliResult {
    let map = load_map(&args.map)?;
    let weight_bytes = std::fs::read(&args.weights).map_err(|e| data(&args.weights.display().to_string(), e))?;
    let model = decode_weights(&weight_bytes)?;

    let (features, reference_features) = match (&args.features, &args.audio) {
        (Some(path), _) => {
            let seq = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
                read_feature_csv(path, args.feature_rate)
            } else {
                read_feature_file(path)
            };
            (seq.map_err(|e| data(&path.display().to_string(), e))?, false)
        }
        (None, Some(path)) => {
            if model.config.feature_family != FALLBACK_FAMILY {
                return Err(ModelError::FamilyMismatch {
                    expected: model.config.feature_family.clone(),
                    found: FALLBACK_FAMILY.to_string(),
                }
                .into());
            }
            let clip = read_wav(path)?;
            (extract_fallback_features(&clip, &FallbackConfig::for_rate(clip.sample_rate))?, true)
        }
        (None, None) => return Err(CliError::Usage("one of --features or --audio is required".into())),
    };
    let features = if features.rate_hz() == RIG_FPS { features } else { resample_features(&features, RIG_FPS)? };
    let frames = features.frames();

    let (timeline, emotion) = match (&args.emotion, &args.timeline) {
        (Some(name), _) => {
            let label: EmotionLabel = name.parse().map_err(|e| CliError::Usage(format!("--emotion: {e}")))?;
            (EmotionTimeline::constant(label, frames), Some(label))
        }
        (None, Some(path)) => (read_timeline(path, frames)?, None),
        (None, None) => return Err(CliError::Usage("one of --emotion or --timeline is required".into())),
    };

    let cfg = InferenceConfig { deterministic_seed: args.seed, ..InferenceConfig::default() };
    let raw = run_model(&features, &timeline, &model, &cfg)?;
    let smooth = (!args.no_smooth).then(SmoothConfig::default);
    let mut seq = postprocess(&raw, &map, smooth)?;

    let (blink_seed, gaze_seed) = derived_seeds(args.seed);
    let mut blink_model = None;
    if args.blink {
        let mut bm = match &args.blink_model {
            Some(path) => serde_json::from_str(&read_text(path)?).map_err(|e| data(&path.display().to_string(), e))?,
            None => BlinkFrequencyModel::default(),
        };
        if let Some(mu) = args.blink_mu {
            bm.mu_ln = mu;
        }
        if let Some(sigma) = args.blink_sigma {
            bm.sigma_ln = sigma;
        }
        let starts = blink::sample_blink_times(&bm, frames as f64 / RIG_FPS, RIG_FPS, blink_seed)?;
        seq = blink::inject_blinks(&seq, &starts, &map)?;
        blink_model = Some(bm);
    }
    if args.gaze {
        let track = sample_gaze_track(&GazeConfig::default(), frames, gaze_seed)?;
        seq = inject_gaze(&seq, &track, &map)?;
    }

    let mut out = create(&args.out)?;
    write_rig_csv(&seq, &map, &mut out)?;
    out.flush()?;

    let sidecar = Sidecar {
        fps: RIG_FPS,
        frames,
        seed: args.seed,
        blink_seed: args.blink.then_some(blink_seed),
        gaze_seed: args.gaze.then_some(gaze_seed),
        weights_sha256: format!("{:x}", Sha256::digest(&weight_bytes)),
        feature_family: if reference_features { FALLBACK_FAMILY.to_string() } else { model.config.feature_family.clone() },
        reference_features,
        emotion,
        flags: InferFlags { blink: args.blink, gaze: args.gaze, smooth: !args.no_smooth },
        blink_model,
    };
    std::fs::write(sidecar_path(&args.out), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// Optional architecture fields, as found in the `model` section of a
/// training config.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelOverrides {
    feature_family: Option<String>,
    d_model: Option<usize>,
    n_heads: Option<usize>,
    d_ff: Option<usize>,
    n_layers: Option<usize>,
    dropout: Option<f64>,
    leaky_slope: Option<f64>,
    emotion_dim: Option<usize>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    train: TrainConfig,
    model: ModelOverrides,
}

fn preset_config(preset: Preset, feature_dim: usize) -> ModelConfig {
    match preset {
        Preset::Reference => ModelConfig { feature_dim, ..ModelConfig::default() },
        Preset::Desk => ModelConfig::desk(feature_dim, 32, 2, 1),
    }
}

fn build_config(args: &ModelArgs, feature_dim: usize, file: ModelOverrides) -> ModelConfig {
    let mut cfg = preset_config(args.preset, feature_dim);
    let d_model_set = file.d_model.or(args.d_model);
    let emotion_dim_set = file.emotion_dim;
    let pick = |cli: Option<usize>, file: Option<usize>, base: usize| cli.or(file).unwrap_or(base);
    cfg.d_model = pick(args.d_model, file.d_model, cfg.d_model);
    cfg.n_heads = pick(args.heads, file.n_heads, cfg.n_heads);
    cfg.n_layers = pick(args.layers, file.n_layers, cfg.n_layers);
    cfg.d_ff = pick(args.d_ff, file.d_ff, if d_model_set.is_some() { 2 * cfg.d_model } else { cfg.d_ff });
    cfg.dropout = args.dropout.or(file.dropout).unwrap_or(cfg.dropout);
    cfg.leaky_slope = file.leaky_slope.unwrap_or(cfg.leaky_slope);
    // the emotion embedding follows the model width unless set explicitly
    cfg.emotion_dim = emotion_dim_set.unwrap_or(if d_model_set.is_some() { cfg.d_model } else { cfg.emotion_dim });
    if let Some(family) = args.feature_family.clone().or(file.feature_family) {
        cfg.feature_family = family;
    }
    cfg
}

pub fn train(args: TrainArgs) -> CliResult {
    let file: TrainFile = match &args.config {
        Some(path) => serde_json::from_str(&read_text(path)?).map_err(|e| data(&path.display().to_string(), e))?,
        None => TrainFile::default(),
    };
    let items = load_manifest(&args.manifest)?;
    let feature_dim = items[0].features.ncols();

    let mut model = match &args.init {
        Some(path) => read_weights(path)?,
        None => {
            let cfg = build_config(&args.model, feature_dim, file.model);
            Audio2RigModel::new(cfg, args.seed.unwrap_or(file.train.seed)).map_err(|e| CliError::Usage(e.to_string()))?
        }
    };
    let mut cfg = file.train;
    cfg.epochs = args.epochs.unwrap_or(cfg.epochs);
    cfg.lr0 = args.lr.unwrap_or(cfg.lr0);
    cfg.batch = args.batch.unwrap_or(cfg.batch);
    cfg.seed = args.seed.unwrap_or(cfg.seed);

    let curve = run_training(&mut model, &items, &cfg, |_| {})?;
    write_weights(&model, &args.out)?;
    if let Some(path) = &args.loss {
        write_loss_csv(&curve, create(path)?)?;
    }
    if let Some(last) = curve.last() {
        println!("epochs {} final_loss {:e}", curve.len(), last.loss);
    }
    Ok(())
}

pub fn init(args: InitArgs) -> CliResult {
    let feature_dim = args.feature_dim.unwrap_or(match args.model.preset {
        Preset::Reference => ModelConfig::default().feature_dim,
        Preset::Desk => 32,
    });
    let cfg = build_config(&args.model, feature_dim, ModelOverrides::default());
    let mut model = Audio2RigModel::new(cfg, args.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    if args.ablate_emotion {
        model.encoder.zero_emotion_pathway();
    }
    std::fs::write(&args.out, encode_weights(&model)).map_err(|e| data(&args.out.display().to_string(), e))
}

pub fn export_map(args: ExportMapArgs) -> CliResult {
    ControllerMap::default_map().save(&args.out)?;
    Ok(())
}

pub fn gen_synthetic(args: GenSyntheticArgs) -> CliResult {
    if args.min_frames == 0 || args.min_frames > args.max_frames {
        return Err(CliError::Usage("need 1 <= --min-frames <= --max-frames".into()));
    }
    if args.clips == 0 || args.feature_dim == 0 {
        return Err(CliError::Usage("--clips and --feature-dim must be positive".into()));
    }
    let set = trainer::gen_synthetic(args.seed, args.clips, args.min_frames..=args.max_frames, args.feature_dim);
    let manifest = export_dataset(&set.items, &args.out)?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn analyze(args: AnalyzeArgs) -> CliResult {
    if args.truth.is_none() && args.corr_out.is_none() {
        return Err(CliError::Usage("nothing to do: give --truth and/or --corr-out".into()));
    }
    let map = load_map(&args.map)?;
    let pred = read_rig_csv(open(&args.pred)?, &map).map_err(|e| data(&args.pred.display().to_string(), e))?;
    if let Some(truth_path) = &args.truth {
        let truth = read_rig_csv(open(truth_path)?, &map).map_err(|e| data(&truth_path.display().to_string(), e))?;
        let report = mae_report(&pred, &truth, &map)?;
        write_text(args.mae_out.as_deref(), &serde_json::to_string_pretty(&report)?)?;
    }
    if let Some(path) = &args.corr_out {
        let corr = lr_correlation(&pred, &map)?;
        let mut out = create(path)?;
        corr.write_csv(&map, &mut out)?;
        out.flush()?;
    }
    Ok(())
}

fn load_classifier(path: Option<&Path>) -> Result<BlinkClassifier, CliError> {
    match path {
        Some(p) => BlinkClassifier::from_json(&read_text(p)?).map_err(|e| data(&p.display().to_string(), e)),
        None => Ok(blink::synth::reference_classifier()?),
    }
}

fn read_trace(path: &Path) -> Result<Vec<f64>, CliError> {
    blink::read_ear_csv(open(path)?).map_err(|e| data(&path.display().to_string(), e))
}

fn read_rates(path: &Path) -> Result<Vec<f64>, CliError> {
    let ctx = path.display().to_string();
    let mut rates = Vec::new();
    for (i, line) in read_text(path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.eq_ignore_ascii_case("rate")) {
            continue;
        }
        rates.push(line.parse::<f64>().map_err(|e| data(&format!("{ctx} line {}", i + 1), e))?);
    }
    Ok(rates)
}

pub fn blink_fit(args: BlinkFitArgs) -> CliResult {
    let rates = match &args.rates {
        Some(path) => read_rates(path)?,
        None => {
            let clf = load_classifier(args.classifier.as_deref())?;
            let mut rates = Vec::with_capacity(args.traces.len());
            for path in &args.traces {
                let trace = read_trace(path)?;
                let events = blink::detect_blinks(&trace, &clf).map_err(|e| data(&path.display().to_string(), e))?;
                let minutes = trace.len() as f64 / blink::TRACE_FPS / 60.0;
                rates.push(events.len() as f64 / minutes);
            }
            rates
        }
    };
    let model = blink::fit_lognormal(&rates)?;
    write_text(args.out.as_deref(), &serde_json::to_string_pretty(&model)?)
}

pub fn blink_detect(args: BlinkDetectArgs) -> CliResult {
    let trace = read_trace(&args.trace)?;
    let events: Vec<BlinkEvent> = match args.threshold {
        Some(th) => blink::detect_threshold(&trace, th),
        None => blink::detect_blinks(&trace, &load_classifier(args.classifier.as_deref())?)?,
    };
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["start_frame", "end_frame"])?;
        for e in &events {
            w.write_record([e.start_frame.to_string(), e.end_frame.to_string()])?;
        }
        w.flush()?;
    }
    match &args.out {
        Some(p) => std::fs::write(p, &buf).map_err(|e| data(&p.display().to_string(), e)),
        None => {
            std::io::stdout().write_all(&buf)?;
            Ok(())
        }
    }
}

fn read_labelled_trace(path: &Path) -> Result<(Vec<f64>, Vec<bool>), CliError> {
    #[derive(Deserialize)]
    struct Row {
        #[allow(dead_code)]
        frame: usize,
        ear: f64,
        blink: u8,
    }
    let ctx = path.display().to_string();
    let (mut ear, mut labels) = (Vec::new(), Vec::new());
    for row in csv::Reader::from_reader(open(path)?).deserialize() {
        let row: Row = row.map_err(|e| data(&ctx, e))?;
        ear.push(row.ear);
        labels.push(row.blink != 0);
    }
    Ok((ear, labels))
}

pub fn blink_train(args: BlinkTrainArgs) -> CliResult {
    let (windows, labels) = match args.synthetic {
        Some(n) => {
            let traces: Vec<_> = (0..n as u64).map(|i| blink::synth::labelled_trace(args.seed.wrapping_add(i), 300)).collect();
            blink::synth::training_set(&traces)
        }
        None => {
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for path in &args.traces {
                let (ear, labels) = read_labelled_trace(path)?;
                xs.extend(blink::windows_of(&ear));
                ys.extend(labels);
            }
            (xs, ys)
        }
    };
    let cfg = SvmConfig { seed: args.seed, ..SvmConfig::default() };
    let clf = blink::train_blink_classifier(&windows, &labels, &cfg)?;
    std::fs::write(&args.out, clf.to_json()).map_err(|e| data(&args.out.display().to_string(), e))
}

#[derive(Serialize)]
struct GradcheckOutput {
    tolerance: f64,
    pass: bool,
    #[serde(flatten)]
    report: rigsynth::audio2rig::GradCheckReport,
}

pub fn gradcheck(args: GradcheckArgs) -> CliResult {
    let mut cfg = ModelConfig::desk(args.feature_dim, args.d_model, args.heads, args.layers);
    cfg.d_ff = args.d_ff;
    let model = Audio2RigModel::new(cfg, args.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    if args.frames == 0 {
        return Err(CliError::Usage("--frames must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(1));
    let probe = Probe {
        features: standard_normal((args.frames, args.feature_dim), &mut rng),
        labels: (0..args.frames).map(|t| EmotionLabel::ALL[t % EmotionLabel::COUNT]).collect(),
        target: standard_normal((args.frames, model.config.output_dim), &mut rng) * 0.5,
    };
    let report = grad_check(&model, &probe, args.eps, args.max_per_tensor)?;
    let pass = report.max_rel_error < args.tolerance;
    let max = report.max_rel_error;
    println!("{}", serde_json::to_string_pretty(&GradcheckOutput { tolerance: args.tolerance, pass, report })?);
    if pass {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("max relative gradient error {max:e} exceeds {:e}", args.tolerance)))
    }
}
