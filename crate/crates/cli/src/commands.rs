use std::fs;
use std::path::{Path, PathBuf};

use eeg2img::caption::{CaptionMode, CaptionProvider, CaptionProviderConfig, DEFAULT_TEMPLATE};
use eeg2img::container::sha256_hex;
use eeg2img::dataset::{
    generate_synthetic, ingest, make_splits, Dataset, Normalize, PreprocessConfig, SplitFractions, SyntheticSpec,
};
use eeg2img::embedding::{StandInImageEmbedder, StandInTextEmbedder, TextEmbedder};
use eeg2img::encoder::{Encoder, EncoderConfig};
use eeg2img::experiments::{
    evaluate_images, generate_condition, load_generated, run_ablation, toy_items_from_caches, write_generated,
    write_report, ConditionSpec, ExperimentPlan,
};
use eeg2img::generation::{train_toy_backend, NoiseSchedule, ToyCheckpoint, ToyDenoiserConfig, ToyTrainConfig};
use eeg2img::metrics::{MetricConfig, RESULTS_HEADER};
use eeg2img::model::{load_manifest, save_manifest, RunManifest, Space, Split};
use eeg2img::training::{build_target_cache, eval_alignment, train_alignment, write_history_csv, TargetCache, TargetSource, TrainConfig};
use eeg2img::{Error, Result};
use log::info;
use serde::Serialize;

use crate::{
    AblateArgs, CacheArgs, Command, EvaluateArgs, GenerateArgs, IngestArgs, MetricArgs, ModelArg, NormalizeArg, ReportArgs,
    SplitArgs, SynthArgs, TrainArgs,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Split(a) => cmd_split(a),
        Command::CacheTargets(a) => cmd_cache(a),
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Collects what a run produced and writes its RunManifest.
struct Run {
    manifest: RunManifest,
}

impl Run {
    fn new(command: &str, args: &impl Serialize, seed: Option<u64>) -> Result<Self> {
        let config = serde_json::to_value(args).map_err(|e| Error::parse("arguments", e))?;
        Ok(Run {
            manifest: RunManifest::new(command, config, seed),
        })
    }

    fn artifact(&mut self, name: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.manifest.checkpoints.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    /// `<dir>/<command>.run.json` for directory outputs.
    fn save_in(self, dir: &Path) -> Result<()> {
        let path = dir.join(format!("{}.run.json", self.manifest.command));
        self.finish(&path)
    }

    /// `<file>.run.json` next to a single-file output.
    fn save_beside(self, file: &Path) -> Result<()> {
        let mut name = file.file_name().unwrap_or_default().to_os_string();
        name.push(".run.json");
        self.finish(&file.with_file_name(name))
    }

    fn finish(self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.manifest.save(path)?;
        info!("run manifest {}", path.display());
        Ok(())
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_classes: a.classes,
        n_subjects: a.subjects,
        n_channels: a.channels,
        n_timesteps: a.timesteps,
        samples_per_class: a.per_class,
        noise_sigma: a.noise,
        seed: a.seed,
        stimuli_per_class: a.stimuli_per_class,
        image_size: a.image_size,
    };
    spec.validate()?;
    let mut run = Run::new("synth", &a, Some(a.seed))?;
    let manifest = generate_synthetic(&spec, &a.out)?;
    info!(
        "wrote {} recordings of {} classes to {}",
        manifest.recordings.len(),
        manifest.n_classes,
        a.out.display()
    );
    run.artifact("labels", &a.out.join(eeg2img::dataset::LABELS_FILE))?;
    run.save_in(&a.out)
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let config = PreprocessConfig {
        normalize: match a.normalize {
            NormalizeArg::None => Normalize::None,
            NormalizeArg::Zscore => Normalize::PerChannelZscore,
        },
        crop: a.crop_start.zip(a.crop_end),
    };
    let mut run = Run::new("ingest", &a, None)?;
    ingest(&a.raw, &a.out, &config)?;
    run.artifact("manifest", &a.out.join(eeg2img::dataset::MANIFEST_FILE))?;
    run.save_in(&a.out)
}

fn cmd_split(a: SplitArgs) -> Result<()> {
    let fractions = SplitFractions {
        train: a.train,
        val: a.val,
        test: a.test,
    };
    fractions.validate()?;
    let mut run = Run::new("split", &a, Some(a.seed))?;
    let manifest = load_manifest(&a.manifest)?;
    let split = make_splits(&manifest, fractions, a.seed)?;
    let out = a.out.clone().unwrap_or_else(|| a.manifest.clone());
    if out != a.manifest && out.parent() != a.manifest.parent() {
        return Err(Error::Config("--out must sit next to --manifest so relative data paths still resolve".into()));
    }
    save_manifest(&out, &split)?;
    let s = split.splits.as_ref().expect("just assigned");
    info!(
        "train {} / val {} / test {} recordings",
        s.ids(Split::Train).len(),
        s.ids(Split::Val).len(),
        s.ids(Split::Test).len()
    );
    run.artifact("manifest", &out)?;
    run.save_beside(&out)
}

fn cmd_cache(a: CacheArgs) -> Result<()> {
    let mut run = Run::new("cache-targets", &a, None)?;
    let dataset = Dataset::load(&a.manifest)?;
    let (cache, stats) = match a.space {
        Space::Image => {
            let embedder = StandInImageEmbedder::new(a.dim, a.extractor_seed);
            build_target_cache(&dataset, &TargetSource::Image(&embedder), &a.out)?
        }
        Space::Text => {
            let embedder = StandInTextEmbedder::new(a.tokens, a.dim, a.extractor_seed);
            let config = match &a.captions_file {
                Some(p) => CaptionProviderConfig {
                    mode: CaptionMode::ExternalFile,
                    template: DEFAULT_TEMPLATE.into(),
                    external_path: Some(p.clone()),
                },
                None => CaptionProviderConfig {
                    template: a.caption_template.clone().unwrap_or_else(|| DEFAULT_TEMPLATE.into()),
                    ..CaptionProviderConfig::default()
                },
            };
            let captions = CaptionProvider::from_config(&config, &dataset.manifest.class_names)?;
            let source = TargetSource::Text {
                embedder: &embedder,
                captions: &captions,
                pooled: a.pooled,
            };
            build_target_cache(&dataset, &source, &a.out)?
        }
    };
    info!(
        "{} targets for {} ({} provider calls, {} reused)",
        cache.targets.len(),
        cache.extractor_id,
        stats.provider_calls,
        stats.reused
    );
    run.artifact("cache", &a.out)?;
    run.save_beside(&a.out)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut run = Run::new("train", &a, Some(a.seed))?;
    let dataset = Dataset::load(&a.manifest)?;
    match a.model {
        ModelArg::Encoder => {
            let cache = TargetCache::load(a.cache.as_deref().expect("required by clap"))?;
            let mut config = EncoderConfig::new(dataset.manifest.n_channels, dataset.manifest.n_timesteps, cache.shape);
            config.rnn_layers = a.layers.unwrap_or(config.rnn_layers);
            config.hidden_dim = a.hidden.unwrap_or(config.hidden_dim);
            config.head_hidden_dim = a.head_hidden.unwrap_or(config.head_hidden_dim);
            let mut train = TrainConfig::new(cache.space, a.epochs, a.batch_size.unwrap_or(16), a.seed);
            train.lr = a.lr.unwrap_or(train.lr);
            train.weight_decay = a.weight_decay.unwrap_or(train.weight_decay);
            train.validate()?;
            let outcome = train_alignment(Encoder::new(config, a.seed)?, &dataset, &cache, &train)?;
            outcome.checkpoint.save(&a.out)?;
            let history = with_suffix(&a.out, ".history.csv");
            write_history_csv(&history, &outcome.history)?;
            if dataset.recordings_in(Split::Test)?.is_empty() {
                info!("no test recordings; skipping held-out evaluation");
            } else {
                let eval = eval_alignment(&outcome.best, &dataset, &cache, Split::Test)?;
                info!("test MSE {:.6}, top-1 retrieval {:.4} over {}", eval.mse, eval.retrieval_top1, eval.n);
            }
            run.artifact("encoder", &a.out)?;
            run.artifact("history", &history)?;
        }
        ModelArg::ToyBackend => {
            let image_cache = TargetCache::load(a.image_cache.as_deref().expect("required by clap"))?;
            let text_cache = TargetCache::load(a.text_cache.as_deref().expect("required by clap"))?;
            let text_embedder = StandInTextEmbedder::from_id(&text_cache.extractor_id).ok_or_else(|| {
                Error::Config(format!("cannot rebuild text extractor {} for the null caption", text_cache.extractor_id))
            })?;
            let items = toy_items_from_caches(&dataset, Split::Train, &image_cache, &text_cache)?;
            let first = items.first().ok_or_else(|| Error::Dataset("train split has no recordings".into()))?;
            let mut denoiser =
                ToyDenoiserConfig::new(text_embedder.tokens(), text_embedder.dim(), first.bundle.image_embedding.len());
            denoiser.image_size = first.image.dim().0;
            let mut train = ToyTrainConfig::new(a.seed);
            train.steps = a.steps;
            train.batch_size = a.batch_size.unwrap_or(train.batch_size);
            train.lr = a.lr.unwrap_or(train.lr);
            train.weight_decay = a.weight_decay.unwrap_or(train.weight_decay);
            let outcome = train_toy_backend(
                &items,
                text_embedder.embed_text("")?,
                denoiser,
                NoiseSchedule::default(),
                &train,
            )?;
            let h = &outcome.loss_history;
            info!("toy backend loss {:.4} -> {:.4} over {} steps", h[0], h[h.len() - 1], h.len());
            ToyCheckpoint::from_backend(&outcome.backend, &train, &text_cache.extractor_id, &image_cache.extractor_id)
                .save(&a.out)?;
            let history = with_suffix(&a.out, ".history.csv");
            let mut text = String::from("step,loss\n");
            for (i, l) in h.iter().enumerate() {
                text.push_str(&format!("{i},{l:e}\n"));
            }
            fs::write(&history, text).map_err(|e| Error::io(&history, e))?;
            run.artifact("backend", &a.out)?;
            run.artifact("history", &history)?;
        }
    }
    run.save_beside(&a.out)
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let mut run = Run::new("generate", &a, Some(a.seed))?;
    let dataset = Dataset::load(&a.manifest)?;
    let condition = ConditionSpec {
        name: "generate".into(),
        image_encoder: a.image_encoder.clone(),
        text_encoder: a.text_encoder.clone(),
        backend: a.backend.clone(),
        backend_kind: Some(a.backend_kind),
        inference_steps: a.steps,
        drop_text: a.drop_text,
        drop_image: a.drop_image,
        image_scale: a.image_scale,
        caption_provider: None,
        metrics: MetricConfig::default(),
    };
    let images = generate_condition(&dataset, &condition, a.split, a.seed, a.samples_per_recording, a.limit)?;
    write_generated(&a.out, &images)?;
    info!("wrote {} images to {}", images.len(), a.out.display());
    for (name, p) in [("image_encoder", &a.image_encoder), ("text_encoder", &a.text_encoder), ("backend", &a.backend)] {
        run.artifact(name, p)?;
    }
    run.save_in(&a.out)
}

fn metric_config(m: &MetricArgs, seed: u64) -> MetricConfig {
    MetricConfig {
        acc_n: m.acc_n,
        acc_k: m.acc_k,
        acc_trials: m.acc_trials,
        is_splits: m.is_splits,
        ssim_window: m.ssim_window,
        ssim_sigma: m.ssim_sigma,
        seed,
        ..MetricConfig::default()
    }
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let config = metric_config(&a.metrics, a.seed);
    config.validate()?;
    if a.condition.is_empty() || a.condition.contains([',', '"', '\n']) {
        return Err(Error::Config(format!("condition label {:?} cannot go in a CSV cell", a.condition)));
    }
    let mut run = Run::new("evaluate", &a, Some(a.seed))?;
    let dataset = Dataset::load(&a.manifest)?;
    let images = load_generated(&a.generated)?;
    if images.is_empty() {
        return Err(Error::Dataset(format!("no PNG images in {}", a.generated.display())));
    }
    let report = evaluate_images(&dataset, &images, a.ground_truth.as_deref(), &config)?;
    if let Some(parent) = a.out.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let csv = format!("{RESULTS_HEADER}\n{}\n", report.csv_row(&a.condition));
    fs::write(&a.out, csv).map_err(|e| Error::io(&a.out, e))?;
    let json_path = with_suffix(&a.out, ".json");
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::parse("metric report", e))?;
    fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
    info!(
        "{} images: acc {:.4}, IS {:.3} ± {:.3}, FID {:.4}, SSIM {:.4}, CS {:.4}",
        report.n_images, report.acc, report.is_mean, report.is_std, report.fid, report.ssim, report.cs
    );
    run.artifact("results", &a.out)?;
    run.save_beside(&a.out)
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let plan = ExperimentPlan::load(&a.plan)?;
    let mut run = Run::new("ablate", &plan, Some(plan.seed))?;
    let (csv, results) = run_ablation(&plan)?;
    for r in &results {
        info!("{}: acc {:.4}, FID {:.4}, SSIM {:.4}", r.name, r.report.acc, r.report.fid, r.report.ssim);
    }
    info!("results in {}", csv.display());
    run.artifact("results", &csv)?;
    run.save_in(&plan.output_dir)
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let mut run = Run::new("report", &a, None)?;
    let table = write_report(&a.results, &a.out)?;
    eprint!("{table}");
    run.artifact("table", &a.out.join("table.txt"))?;
    run.save_in(&a.out)
}
