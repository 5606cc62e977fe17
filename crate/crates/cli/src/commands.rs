use std::path::{Path, PathBuf};
use std::sync::Arc;

use ace_core::config::{Settings, SettingsSource};
use ace_core::diffusion::{train_denoiser, EpsDenoiser};
use ace_core::engine::run_dir::{read_run_dir, write_run_dir, Manifest, StoredRun, MANIFEST_JSON};
use ace_core::engine::{diversity_run_config, CounterfactualResult, ExplainConfig, Explainer, Request};
use ace_core::metrics::{distinct_count, diversity, evaluate_runs, EvaluationOptions, MetricKind, MetricSuite};
use ace_core::zoo::{
    ingest_dataset, predict_labels, synthetic, train_classifier, train_contrastive_encoder, Classifier, Dataset,
    EncoderAsset, FeatureEncoder, IngestConfig, PatchClassifier, PerceptualDistance,
};
use ace_service::ServiceConfig;
use candle_core::Tensor;
use serde_json::{json, Value};

use crate::failure::{Failure, Outcome};
use crate::{
    Cli, Command, DiversityArgs, EvaluateArgs, ExplainArgs, IngestArgs, InstanceArgs, Role, ServeArgs, SettingsArgs,
    TrainClassifierArgs, TrainDdpmArgs,
};

pub fn run(cli: Cli) -> Outcome {
    let settings = resolve_settings(&cli.settings)?;
    match cli.command {
        Command::TrainDdpm(a) => train_ddpm(&settings, a),
        Command::TrainClassifier(a) => train_classifier_cmd(&settings, a),
        Command::Explain(a) => explain(&settings, &cli.settings, a),
        Command::Diversity(a) => diversity_cmd(&settings, &cli.settings, a),
        Command::Evaluate(a) => evaluate(&settings, a),
        Command::Serve(a) => serve(settings, a),
        Command::Ingest(a) => ingest(a),
        Command::Config => {
            print!("{}", settings.to_toml()?);
            Ok(())
        }
    }
}

fn resolve_settings(args: &SettingsArgs) -> Outcome<Settings> {
    let file = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::NotFound(format!("config file {}: {e}", path.display())))?;
            Some((path.display().to_string(), text))
        }
        None => None,
    };
    let source = SettingsSource { preset: args.preset.clone(), file, overrides: args.overrides.clone() };
    Ok(source.resolve()?)
}

fn require_file(path: &Path, what: &str) -> Outcome {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::NotFound(format!("{what} {}", path.display())))
    }
}

/// `synthetic`, a saved `.dataset` archive, or a directory of PNG files.
fn load_dataset(spec: &str, settings: &Settings) -> Outcome<Dataset> {
    if spec == "synthetic" {
        return Ok(synthetic::generate(&settings.dataset)?);
    }
    let path = Path::new(spec);
    require_file(path, "dataset")?;
    if path.is_dir() {
        let (dataset, report) = ingest_dataset(path, &IngestConfig::default())?;
        if !report.issues.is_empty() {
            tracing::warn!(issues = %report.summary(), "dataset ingested with issues");
        }
        Ok(dataset)
    } else {
        Ok(Dataset::load(path)?)
    }
}

fn ensure_parent(path: &Path) -> Outcome {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn train_ddpm(settings: &Settings, args: TrainDdpmArgs) -> Outcome {
    let dataset = load_dataset(&args.dataset, settings)?;
    let mut config = settings.denoiser.clone();
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let (images, _) = dataset.split("train")?;
    let (model, report) = train_denoiser(&images, &config)?;
    ensure_parent(&args.out)?;
    model.save(&args.out)?;
    println!(
        "{}",
        json!({
            "checkpoint": args.out,
            "num_steps": config.num_steps,
            "max_timestep": model.max_timestep(),
            "iterations": config.iterations,
            "final_loss": report.tail_loss(100),
        })
    );
    Ok(())
}

/// Seed offset separating the FID classifier from the target classifier
/// when both are trained from the same settings.
const FID_SEED_OFFSET: u64 = 1_000_003;

fn train_classifier_cmd(settings: &Settings, args: TrainClassifierArgs) -> Outcome {
    let dataset = load_dataset(&args.dataset, settings)?;
    ensure_parent(&args.out)?;
    let summary = match args.role {
        Role::Target | Role::Fid => {
            let mut config = settings.classifier.clone();
            config.seed = args.seed.unwrap_or(config.seed);
            if args.role == Role::Fid && args.seed.is_none() {
                config.seed = config.seed.wrapping_add(FID_SEED_OFFSET);
            }
            let model = train_classifier(&dataset, &config)?;
            model.save(&args.out)?;
            json!({
                "checkpoint": args.out,
                "role": format!("{:?}", args.role).to_lowercase(),
                "seed": config.seed,
                "held_out_accuracy": model.held_out_accuracy(),
            })
        }
        Role::S3 => {
            let mut config = settings.encoder.clone();
            config.seed = args.seed.unwrap_or(config.seed);
            let model = train_contrastive_encoder(&dataset, &config)?;
            model.save(&args.out)?;
            json!({ "checkpoint": args.out, "role": "s3", "seed": config.seed, "dim": model.dim() })
        }
    };
    println!("{summary}");
    Ok(())
}

struct Loaded {
    classifier: Arc<PatchClassifier>,
    denoiser: EpsDenoiser,
    image: Tensor,
    target: usize,
}

fn load_instance(settings: &Settings, args: &InstanceArgs) -> Outcome<Loaded> {
    require_file(&args.classifier, "classifier checkpoint")?;
    require_file(&args.denoiser, "denoiser checkpoint")?;
    let classifier = Arc::new(PatchClassifier::load(&args.classifier)?);
    let denoiser = EpsDenoiser::load(&args.denoiser)?;
    let geometry = classifier.geometry();
    let image = match (&args.image, &args.dataset, args.index) {
        (Some(path), None, _) => {
            require_file(path, "image")?;
            let image = ace_core::image::load_png(path, geometry.channels)?;
            geometry.check_image(&image)?;
            image
        }
        (None, Some(spec), Some(index)) => load_dataset(spec, settings)?.instance(&args.split, index)?.0,
        _ => return Err(Failure::Config("give either --image or --dataset with --index".into())),
    };
    let target = match args.target {
        Some(t) => t,
        None if classifier.num_classes() == 2 => {
            1 - predict_labels(classifier.as_ref(), &image.unsqueeze(0)?)?[0]
        }
        None => return Err(Failure::Config("--target is required for models with more than two classes".into())),
    };
    Ok(Loaded { classifier, denoiser, image, target })
}

fn invocation(command: &str, settings_args: &SettingsArgs, instance: &InstanceArgs, extra: Value) -> Value {
    let mut v = json!({
        "command": command,
        "preset": settings_args.preset,
        "config_file": settings_args.config,
        "overrides": settings_args.overrides,
        "classifier": instance.classifier,
        "denoiser": instance.denoiser,
        "image": instance.image,
        "dataset": instance.dataset,
        "split": instance.split,
        "index": instance.index,
        "target": instance.target,
    });
    if let (Value::Object(base), Value::Object(more)) = (&mut v, extra) {
        base.extend(more);
    }
    v
}

fn write_run(dir: &Path, result: &CounterfactualResult, labels: Vec<String>, invocation: Value, canonical: bool) -> Outcome {
    let mut manifest = Manifest::from_result(result, labels, invocation)?;
    if canonical {
        manifest = manifest.canonical();
    } else {
        manifest.created_at = Some(chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true));
    }
    write_run_dir(dir, result, &manifest)?;
    Ok(())
}

fn explain_one(loaded: &Loaded, config: &ExplainConfig, seed: u64) -> Outcome<CounterfactualResult> {
    let explainer = Explainer {
        classifier: loaded.classifier.as_ref(),
        denoiser: &loaded.denoiser,
        schedule: loaded.denoiser.schedule(),
    };
    let request = Request { image: loaded.image.clone(), target: loaded.target, seed };
    let result = explainer.explain(&request, config, &mut |p| {
        tracing::debug!(iteration = p.iteration, total = p.total, "attack");
    })?;
    Ok(result)
}

fn explain(settings: &Settings, settings_args: &SettingsArgs, args: ExplainArgs) -> Outcome {
    let loaded = load_instance(settings, &args.instance)?;
    let result = explain_one(&loaded, &settings.explain, args.seed)?;
    let inv = invocation("explain", settings_args, &args.instance, json!({ "seed": args.seed }));
    write_run(&args.out, &result, loaded.classifier.label_names(), inv, args.canonical)?;
    println!(
        "{}",
        json!({
            "run": args.out,
            "source_label": result.source_label,
            "target_label": result.target_label,
            "flipped": result.flipped,
            "pre_explanation_flipped": result.pre_explanation.flipped,
            "mask_fraction": result.mask.fraction(),
            "counterfactual_probs": result.counterfactual_probs,
        })
    );
    Ok(())
}

fn diversity_cmd(settings: &Settings, settings_args: &SettingsArgs, args: DiversityArgs) -> Outcome {
    if args.seeds.len() < 2 {
        return Err(Failure::Config("diversity needs at least two seeds".into()));
    }
    let loaded = load_instance(settings, &args.instance)?;
    let num_steps = loaded.denoiser.schedule().num_steps();
    let mut images = Vec::new();
    let mut runs = Vec::new();
    for (k, &seed) in args.seeds.iter().enumerate() {
        let config = diversity_run_config(&settings.explain, seed, num_steps)?;
        let result = explain_one(&loaded, &config, seed)?;
        let dir = args.out.join(format!("explanation-{k:02}"));
        let inv = invocation("diversity", settings_args, &args.instance, json!({ "seed": seed, "seeds": args.seeds }));
        write_run(&dir, &result, loaded.classifier.label_names(), inv, args.canonical)?;
        runs.push(json!({
            "seed": seed,
            "run": dir,
            "refine_respacing": config.refine.respacing,
            "flipped": result.flipped,
        }));
        images.push(result.counterfactual);
    }
    let distance = PerceptualDistance::new(loaded.classifier.clone());
    let report = json!({
        "seeds": args.seeds,
        "sigma_l": diversity(&images, &distance)?,
        "distinct": distinct_count(&images)?,
        "runs": runs,
    });
    std::fs::write(args.out.join("diversity.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!("{report}");
    Ok(())
}

/// Run directories under `root`, in name order; `root` itself when it is
/// a run.
fn run_dirs(root: &Path) -> Outcome<Vec<PathBuf>> {
    require_file(root, "runs directory")?;
    if root.join(MANIFEST_JSON).exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_JSON).exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Failure::NotFound(format!("no run directories under {}", root.display())));
    }
    Ok(dirs)
}

fn load_encoder(path: &Option<PathBuf>, what: &str) -> Outcome<Option<EncoderAsset>> {
    match path {
        Some(p) => {
            require_file(p, what)?;
            Ok(Some(EncoderAsset::load(p)?))
        }
        None => Ok(None),
    }
}

fn evaluate(settings: &Settings, args: EvaluateArgs) -> Outcome {
    let metrics = MetricKind::parse_list(&args.metrics)?;
    let runs: Vec<StoredRun> = run_dirs(&args.runs)?.iter().map(read_run_dir).collect::<ace_core::Result<_>>()?;
    let classifier = match &args.classifier {
        Some(p) => {
            require_file(p, "classifier checkpoint")?;
            Some(Arc::new(PatchClassifier::load(p)?))
        }
        None => None,
    };
    let fid = load_encoder(&args.fid_encoder, "fid encoder")?;
    let fs = load_encoder(&args.fs_encoder, "fs encoder")?;
    let s3 = load_encoder(&args.s3_encoder, "s3 encoder")?;
    let fallback = classifier.as_deref().map(|c| c as &dyn FeatureEncoder);
    let suite = MetricSuite {
        classifier: classifier.as_deref().map(|c| c as &dyn Classifier),
        fid_encoder: fid.as_ref().map(|e| e as &dyn FeatureEncoder).or(fallback),
        fs_encoder: fs.as_ref().map(|e| e as &dyn FeatureEncoder).or(fallback),
        s3_encoder: s3.as_ref().map(|e| e as &dyn FeatureEncoder),
        perceptual: classifier.clone().map(|c| PerceptualDistance::new(c)),
    };
    let options = EvaluationOptions { seed: args.seed, ..settings.evaluation.clone() };
    let report = evaluate_runs(&runs, &metrics, &suite, &options)?;
    let text = report.to_json()?;
    match &args.out {
        Some(path) => {
            ensure_parent(path)?;
            std::fs::write(path, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn serve(settings: Settings, args: ServeArgs) -> Outcome {
    let config = ServiceConfig {
        listen: args.listen,
        data_root: args.data_root,
        slots: args.slots,
        queue_capacity: args.queue_capacity,
        strict_ingest: args.strict_ingest,
        ui_dir: args.ui_dir,
        settings,
    };
    if config.slots == 0 || config.queue_capacity == 0 {
        return Err(Failure::Config("--slots and --queue-capacity must be positive".into()));
    }
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(ace_service::serve(config))?;
    Ok(())
}

fn ingest(args: IngestArgs) -> Outcome {
    require_file(&args.dir, "image directory")?;
    let config = IngestConfig {
        name: args.name,
        manifest: args.manifest,
        geometry: None,
        test_fraction: args.test_fraction,
        seed: args.seed,
        strict: !args.lenient,
    };
    let (dataset, report) = ingest_dataset(&args.dir, &config)?;
    ensure_parent(&args.out)?;
    dataset.save(&args.out)?;
    println!(
        "{}",
        json!({
            "dataset": args.out,
            "accepted": report.accepted,
            "issues": report.issues,
            "classes": dataset.descriptor.class_names,
        })
    );
    Ok(())
}
