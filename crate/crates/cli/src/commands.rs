use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use texrec::archive::{entropy_report, read_archive, write_archive};
use texrec::data::{
    generate_dataset, load_dataset, read_mask, read_raster, write_mask, write_probability, Dataset, GenConfig,
    Preset, SampleRecord, SplitCounts, TrainSample, LABELED, UNLABELED, VALIDATION,
};
use texrec::denoiser::Denoiser;
use texrec::diffusion::StepSubsequence;
use texrec::metrics::{sliding_window_infer, Evaluation, PixelTally, WindowConfig};
use texrec::scalar::Scalar;
use texrec::trainer::{CheckpointRecord, TrainConfig, TrainData, Trainer, BEST_DIR, LATEST_DIR, STATE_FILE};

use crate::run_config::{Layered, RunConfig};
use crate::{EvalArgs, GenerateArgs, InferArgs, TexentArgs, TrainArgs, UserError, WindowArgs, RUN_ROOT_ENV};

fn user(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UserError(msg.into()))
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let preset: Preset = a.preset.parse()?;
    let (base, counts) = match preset {
        Preset::Default => (GenConfig::default(), SplitCounts::new(1082, 2240, 154, 154)),
        Preset::Small => (GenConfig::small(), SplitCounts::new(4, 8, 2, 2)),
    };
    let mut run = RunConfig::new("generate-data");
    run.param("preset", a.preset.clone(), "flag --preset");
    let mut cfg = match &a.config {
        Some(p) => {
            // Keys in the file replace the preset's values.
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            let file: toml::Table = toml::from_str(&text).map_err(|e| user(format!("{}: {e}", p.display())))?;
            let mut merged = toml::Table::try_from(&base)?;
            let mut keys = Vec::new();
            crate::run_config::leaf_keys(&file, "", &mut keys);
            for k in keys {
                run.provenance.insert(k, format!("file {}", p.display()));
            }
            merged.extend(file);
            toml::Value::Table(merged)
                .try_into::<GenConfig>()
                .map_err(|e| user(format!("{}: {e}", p.display())))?
        }
        None => base,
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
        run.provenance.insert("seed".into(), "flag --seed".into());
    }
    cfg.validate()?;
    let counts = SplitCounts {
        labeled: a.labeled.unwrap_or(counts.labeled),
        unlabeled: a.unlabeled.unwrap_or(counts.unlabeled),
        val: a.val.unwrap_or(counts.val),
        test: a.test.unwrap_or(counts.test),
    };
    for (k, flag) in [
        ("labeled", a.labeled),
        ("unlabeled", a.unlabeled),
        ("val", a.val),
        ("test", a.test),
    ] {
        let v = match k {
            "labeled" => counts.labeled,
            "unlabeled" => counts.unlabeled,
            "val" => counts.val,
            _ => counts.test,
        };
        let src = if flag.is_some() { format!("flag --{k}") } else { format!("preset {}", a.preset) };
        run.param(&format!("count.{k}"), v as i64, &src);
    }
    generate_dataset(&cfg, counts, &a.out)?;
    run.seed = Some(cfg.seed);
    run.generator = Some(cfg);
    run.path("out", &a.out);
    run.write(&a.out)?;
    println!("wrote {} samples to {}", counts.total(), a.out.display());
    Ok(())
}

fn check_pair(ok: bool, what: &str, a: (&str, String), b: (&str, String)) -> Result<()> {
    if !ok {
        return Err(user(format!(
            "conflicting settings: {what} ({} from {}, {} from {})",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

fn resolve_train(a: &TrainArgs) -> Result<(TrainConfig, RunConfig)> {
    let mut cfg: Layered<TrainConfig> = Layered::load(a.config.as_deref(), "train")?;
    macro_rules! flag {
        ($field:ident, $key:expr, $flag:expr) => {
            if let Some(v) = a.$field {
                cfg.value.$field = v;
                cfg.set_by_flag($key, $flag);
            }
        };
    }
    flag!(m, "m", "--m");
    flag!(n, "n", "--n");
    flag!(epochs, "epochs", "--epochs");
    if let Some(v) = a.max_steps {
        cfg.value.max_steps = Some(v);
        cfg.set_by_flag("max_steps", "--max-steps");
    }
    if let Some(v) = a.lr {
        cfg.value.optimizer.lr = v;
        cfg.set_by_flag("optimizer.lr", "--lr");
    }
    if a.supervised_only {
        cfg.value.supervised_only = true;
        cfg.set_by_flag("supervised_only", "--supervised-only");
    }
    if let Some(s) = a.seed {
        cfg.value.seed = s;
        cfg.set_by_flag("seed", "--seed");
    } else if cfg.is_default("seed") {
        let hash = texrec::rng::sub_seed(0, &cfg.value.to_toml(), 0);
        cfg.value.seed = hash;
        cfg.provenance.insert("seed".into(), "derived from config hash".into());
    }
    let v = &cfg.value;
    check_pair(
        v.signal.tau_f < v.m + 1,
        "tau_f must be below M + 1",
        ("signal.tau_f", cfg.source("signal.tau_f")),
        ("m", cfg.source("m")),
    )?;
    check_pair(
        v.m <= v.steps,
        "M must not exceed T",
        ("m", cfg.source("m")),
        ("steps", cfg.source("steps")),
    )?;
    if let Some(e) = v.eval_steps {
        check_pair(
            e <= v.steps,
            "eval_steps must not exceed T",
            ("eval_steps", cfg.source("eval_steps")),
            ("steps", cfg.source("steps")),
        )?;
    }
    v.validate()?;
    let mut run = RunConfig::new("train");
    run.seed = Some(v.seed);
    run.provenance = cfg.provenance.clone();
    run.param("precision", a.precision.clone(), "flag --precision");
    run.path("data", &a.data);
    if let Some(c) = &a.config {
        run.path("config", c);
    }
    run.train = Some(cfg.value.clone());
    Ok((cfg.value, run))
}

fn load_split(root: &Path, split: &str, required: bool) -> Result<Vec<SampleRecord>> {
    let p = root.join(format!("{split}.jsonl"));
    if !p.exists() && !required {
        return Ok(Vec::new());
    }
    Ok(load_dataset(&p)?.load_all()?)
}

fn run_root(a: &TrainArgs) -> PathBuf {
    a.run_root
        .clone()
        .or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn fresh_run_dir(root: &Path, seed: u64) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    let base = root.join(format!("{stamp}-seed{seed}"));
    let mut dir = base.clone();
    let mut k = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{k}", base.display()));
        k += 1;
    }
    dir
}

pub fn train(a: TrainArgs) -> Result<()> {
    match a.precision.as_str() {
        "f32" => train_as::<f32>(a),
        "f64" => train_as::<f64>(a),
        other => Err(user(format!("unknown precision '{other}' (expected f32 or f64)"))),
    }
}

fn train_as<S: Scalar>(a: TrainArgs) -> Result<()> {
    let (mut trainer, run_dir) = match &a.resume {
        Some(dir) => (Trainer::<S>::resume(dir)?, dir.clone()),
        None => {
            let (cfg, mut run) = resolve_train(&a)?;
            let dir = fresh_run_dir(&run_root(&a), cfg.seed);
            run.path("run_dir", &dir);
            run.write(&dir)?;
            (Trainer::<S>::new(cfg, Some(&dir))?, dir)
        }
    };
    let supervised_only = trainer.config.supervised_only;
    let data = TrainData {
        labeled: load_split(&a.data, LABELED, true)?,
        unlabeled: if supervised_only { Vec::new() } else { load_split(&a.data, UNLABELED, false)? },
        val: load_split(&a.data, VALIDATION, false)?,
    };
    if data.labeled.is_empty() {
        return Err(user("the labeled split is empty; training needs supervision to start"));
    }
    let summary = trainer.train(&data)?;
    println!(
        "trained {} steps ({} epochs); best val IoU {}; run directory {}",
        summary.steps,
        summary.epochs,
        summary.best_iou.map_or("n/a".to_string(), |v| format!("{v:.4}")),
        run_dir.display()
    );
    Ok(())
}

/// Accepts a checkpoint directory or a run directory (best, then latest).
fn checkpoint_dir(p: &Path) -> Result<PathBuf> {
    if p.join(STATE_FILE).is_file() {
        return Ok(p.to_path_buf());
    }
    for sub in [BEST_DIR, LATEST_DIR] {
        if p.join(sub).join(STATE_FILE).is_file() {
            return Ok(p.join(sub));
        }
    }
    Err(user(format!("{} is not a checkpoint or run directory", p.display())))
}

struct Predictor<S: Scalar> {
    config: TrainConfig,
    model: Denoiser<S>,
}

fn load_predictor(p: &Path) -> Result<Predictor<f64>> {
    let dir = checkpoint_dir(p)?;
    let state = fs::read_to_string(dir.join(STATE_FILE))?;
    let scalar = serde_json::from_str::<serde_json::Value>(&state)
        .ok()
        .and_then(|v| v["scalar"].as_str().map(str::to_string))
        .unwrap_or_default();
    // Inference always runs in f64; f32 checkpoints are widened.
    let (config, model) = if scalar == "f32" {
        let rec = CheckpointRecord::<f32>::load(&dir)?;
        let mut wide: Denoiser<f64> = rec.config.build_model(0)?;
        for (dst, src) in wide.params_mut().iter_mut().zip(rec.model.params().iter()) {
            for (d, s) in dst.value.as_mut_slice().iter_mut().zip(src.value.as_slice()) {
                *d = f64::from(*s);
            }
        }
        (rec.config, wide)
    } else {
        let rec = CheckpointRecord::<f64>::load(&dir)?;
        (rec.config, rec.model)
    };
    Ok(Predictor { config, model })
}

struct Job {
    stem: String,
    sample: SampleRecord,
}

fn jobs_from(input: &Path) -> Result<Vec<Job>> {
    if input.extension().is_some_and(|e| e == "jsonl") {
        let ds: Dataset = load_dataset(input)?;
        let mut out = Vec::with_capacity(ds.len());
        for (i, e) in ds.manifest.entries.iter().enumerate() {
            let stem = e
                .image
                .file_stem()
                .map_or_else(|| i.to_string(), |s| s.to_string_lossy().into_owned());
            out.push(Job {
                stem,
                sample: ds.get(i)?,
            });
        }
        Ok(out)
    } else {
        let image = read_raster(input)?;
        let stem = input
            .file_stem()
            .map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned());
        Ok(vec![Job {
            stem,
            sample: SampleRecord {
                image,
                classes: None,
                meta: None,
            },
        }])
    }
}

fn window_config(w: &WindowArgs, p: &Predictor<f64>, shape: (usize, usize), trace: bool) -> WindowConfig {
    let window = w.window.unwrap_or(shape.0.min(shape.1));
    WindowConfig {
        window,
        stride: w.stride.unwrap_or(window),
        threshold: w.threshold.unwrap_or(p.config.signal.tau_m),
        batch: 4,
        keep_traces: trace,
    }
}

fn window_params(run: &mut RunConfig, w: &WindowArgs, steps: usize) {
    let src = |set: bool, flag: &str| if set { format!("flag {flag}") } else { "default".to_string() };
    if let Some(v) = w.window {
        run.param("window", v as i64, "flag --window");
    } else {
        run.param("window", "image", "default");
    }
    if let Some(v) = w.stride {
        run.param("stride", v as i64, "flag --stride");
    }
    run.param("steps", steps as i64, &src(w.steps.is_some(), "--steps"));
    run.param("seed", w.seed as i64, "flag --seed");
    if let Some(t) = w.threshold {
        run.param("threshold", t, "flag --threshold");
    }
}

fn reverse_steps(w: &WindowArgs, p: &Predictor<f64>) -> Result<StepSubsequence> {
    let m = w.steps.or(p.config.eval_steps).unwrap_or(p.config.steps);
    if m == 0 || m > p.config.steps {
        return Err(user(format!("--steps {m} must lie in 1..={}", p.config.steps)));
    }
    Ok(StepSubsequence::evenly_spaced(p.config.steps, m)?)
}

fn predict(p: &Predictor<f64>, job: &Job, w: &WindowArgs, trace: bool) -> Result<texrec::metrics::Stitched> {
    let sched = p.config.schedule()?;
    let steps = reverse_steps(w, p)?;
    let image = TrainSample::<f64>::plain(&job.sample).image;
    let cfg = window_config(w, p, image.shape(), trace);
    sliding_window_infer(&image, &p.model, &sched, &steps, &cfg, w.seed)
        .with_context(|| format!("inference on {}", job.stem))
}

pub fn infer(a: InferArgs) -> Result<()> {
    let p = load_predictor(&a.checkpoint)?;
    let jobs = jobs_from(&a.input)?;
    let steps = reverse_steps(&a.window, &p)?;
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let mut run = RunConfig::new("infer");
    run.path("checkpoint", &a.checkpoint);
    run.path("input", &a.input);
    run.path("out", &a.out);
    run.param("trace", a.trace, if a.trace { "flag --trace" } else { "default" });
    window_params(&mut run, &a.window, steps.len());
    run.seed = Some(a.window.seed);
    run.train = Some(p.config.clone());
    run.write(&a.out)?;
    for job in &jobs {
        let out = predict(&p, job, &a.window, a.trace)?;
        write_mask(&a.out.join(format!("{}_mask.png", job.stem)), &out.mask)?;
        write_probability(&a.out.join(format!("{}_prob.png", job.stem)), &out.probability)?;
        if a.trace {
            write_archive(&a.out.join("trace").join(&job.stem), &out.traces)?;
        }
    }
    println!("wrote {} prediction(s) to {}", jobs.len(), a.out.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let mut run = RunConfig::new("eval");
    run.path("data", &a.data);
    run.path("out", &a.out);
    let predictor = match &a.checkpoint {
        Some(c) => {
            let p = load_predictor(c)?;
            run.path("checkpoint", c);
            window_params(&mut run, &a.window, reverse_steps(&a.window, &p)?.len());
            run.train = Some(p.config.clone());
            Some(p)
        }
        None => {
            run.path("predictions", a.predictions.as_ref().expect("clap requires one source"));
            None
        }
    };
    run.write(&a.out)?;
    let jobs = jobs_from(&a.data)?;
    let mut eval = Evaluation::default();
    let mut names = Vec::new();
    let mut failures = Vec::new();
    for job in &jobs {
        let Some(gt) = &job.sample.classes else {
            failures.push(format!("{}: no ground-truth mask in the manifest", job.stem));
            continue;
        };
        let pred = match (&predictor, &a.predictions) {
            (Some(p), _) => predict(p, job, &a.window, false)?.mask,
            (None, Some(dir)) => match read_mask(&dir.join(format!("{}_mask.png", job.stem))) {
                Ok(m) => m,
                Err(e) => {
                    failures.push(e.to_string());
                    continue;
                }
            },
            (None, None) => unreachable!(),
        };
        match PixelTally::of(&pred, gt) {
            Ok(t) => {
                eval.push(t);
                names.push(job.stem.clone());
            }
            Err(e) => failures.push(format!("{}: {e}", job.stem)),
        }
    }
    let report = eval.report();
    let json = serde_json::json!({
        "images": eval.per_image.len(),
        "aggregate": report,
        "counts": eval.total.counts,
    });
    fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&json)?)?;
    fs::write(a.out.join("per_image.tsv"), eval.table(&names))?;
    println!(
        "IoU {:.4}  Dice {:.4}  Accuracy {:.4}  Shallow recall {:.4}  Deep recall {:.4}  ({} images)",
        report.iou,
        report.dice,
        report.accuracy,
        report.shallow_recall,
        report.deep_recall,
        eval.per_image.len()
    );
    if !failures.is_empty() {
        for f in &failures {
            eprintln!("{f}");
        }
        bail!(UserError(format!("{} of {} image(s) could not be scored", failures.len(), jobs.len())));
    }
    Ok(())
}

pub fn texent(a: TexentArgs) -> Result<()> {
    let frames = read_archive(&a.archive)?;
    let report = entropy_report(&frames, a.tau_m, a.window, a.tau_f)?;
    for (i, (s, l)) in report.series.iter().zip(&report.per_trajectory).enumerate() {
        let series: Vec<String> = s.iter().map(|v| format!("{v:.4}")).collect();
        println!("trajectory {i}: lambda {l:.6}  E_T [{}]", series.join(", "));
    }
    println!("lambda {:.6}", report.lambda);
    if let Some(out) = &a.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}
