//! Command-line front door: argument parsing and the seven commands.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::audio::{decode_wav, resample, write_wav, AudioBuffer};
use crate::augment::augment_clip;
use crate::checkpoint::Model;
use crate::config::RunConfig;
use crate::dataset::{build_frame_pool, partition, FramePool, LabeledClip, Manifest, Partition};
use crate::error::{Error, Result};
use crate::features::FrontEnd;
use crate::hpo::{tune, write_trial_log, TrialScore};
use crate::metrics::evaluate;
use crate::optim::{train, TrainSettings, TrainedModel};
use crate::segment::{export_clips, format_summary, process_many, summarize, write_jsonl, SegmentSet};
use crate::synth::{cut_manifest, generate_soundscape};

#[derive(Debug, Parser)]
#[command(name = "vocalseg", version, about = "Detect and classify vocalizations in long recordings")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for partitioning, sampling, augmentation and search.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Labeled clip manifest (CSV).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Model checkpoint to write or read.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a manifest into train/val/test partitions.
    Prepare,
    /// Write pitch, speed and noise variants of the training clips.
    Augment,
    /// Train the back-end and write a checkpoint.
    Train,
    /// Search hyper-parameters with Bayesian optimization.
    Tune {
        /// Number of objective evaluations.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Segment and classify long recordings.
    Predict {
        /// Recordings to process; defaults to the WAV files of paths.recordings_dir.
        recordings: Vec<PathBuf>,
        /// Also write every segment as a WAV clip.
        #[arg(long)]
        export_clips: bool,
    },
    /// Frame-level metrics of a checkpoint on one partition.
    Evaluate {
        #[arg(long, default_value = "test")]
        partition: String,
    },
    /// Generate a synthetic soundscape with ground truth.
    Synth {
        /// Also cut a labeled clip manifest from the soundscape.
        #[arg(long)]
        cut_manifest: bool,
    },
}

/// Exit status for an error: 1 for configuration problems, 2 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 1,
        _ => 2,
    }
}

/// Merges the config file and flag overrides.
pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let g = &cli.global;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    if let Some(o) = &g.output {
        cfg.paths.output_dir = o.clone();
    }
    if let Some(m) = &g.manifest {
        cfg.paths.manifest = Some(m.clone());
    }
    if let Some(c) = &g.checkpoint {
        cfg.paths.checkpoint = Some(c.clone());
    }
    if let Command::Tune { budget: Some(b) } = cli.command {
        cfg.hpo.bo.budget = b;
    }
    cfg.augment.seed = cfg.seed;
    cfg.hpo.bo.seed = cfg.seed;
    cfg.sampling.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    std::fs::create_dir_all(&cfg.paths.output_dir)?;
    cfg.save(cfg.paths.output_dir.join("effective_config.json"))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Prepare => cmd_prepare(&cfg),
        Command::Augment => cmd_augment(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Tune { .. } => cmd_tune(&cfg),
        Command::Predict {
            recordings,
            export_clips,
        } => cmd_predict(&cfg, recordings, *export_clips),
        Command::Evaluate { partition } => cmd_evaluate(&cfg, &partition.parse()?),
        Command::Synth { cut_manifest } => cmd_synth(&cfg, *cut_manifest),
    })
}

fn require<'a>(p: &'a Option<PathBuf>, field: &str) -> Result<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::config(field, "required by this command"))
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(std::path::absolute(p)?)
}

/// Rewrites clip paths as absolute so the manifest can live anywhere.
fn detach(manifest: &Manifest) -> Result<Manifest> {
    let clips = manifest
        .clips
        .iter()
        .map(|c| {
            Ok(LabeledClip {
                path: absolute(&manifest.resolve(c))?,
                ..c.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Manifest {
        clips,
        ..manifest.clone()
    })
}

/// Reads the configured manifest, partitioning it first when needed.
pub fn load_partitioned(cfg: &RunConfig) -> Result<Manifest> {
    let m = Manifest::read(require(&cfg.paths.manifest, "paths.manifest")?)?;
    if m.is_partitioned() {
        Ok(m)
    } else {
        log::info!("manifest has no partition column; splitting with seed {}", cfg.seed);
        partition(&m, cfg.seed)
    }
}

/// Embeds the train and validation partitions.
pub fn build_pools(cfg: &RunConfig, manifest: &Manifest, front: &FrontEnd) -> Result<(FramePool, FramePool)> {
    let (train_pool, r) = build_frame_pool(manifest, Some(Partition::Train), &cfg.window, front)?;
    log::info!("train: {} clips, {} frames", r.clips, r.frames);
    let (val_pool, r) = build_frame_pool(manifest, Some(Partition::Val), &cfg.window, front)?;
    log::info!("val: {} clips, {} frames", r.clips, r.frames);
    Ok((train_pool, val_pool))
}

pub fn train_settings(cfg: &RunConfig, input_dim: usize, n_classes: usize) -> TrainSettings {
    TrainSettings {
        sampling: cfg.sampling.clone(),
        backend: cfg.architecture.backend(input_dim, n_classes),
        optimizer: cfg.optimizer,
        schedule: cfg.train,
        seed: cfg.seed,
    }
}

fn bundle(cfg: &RunConfig, manifest: &Manifest, trained: TrainedModel, settings: &TrainSettings) -> Model {
    Model {
        params: trained.params,
        repertoire: manifest.repertoire.clone(),
        window: cfg.window,
        frontend: cfg.frontend.clone(),
        optimizer: settings.optimizer,
        history: trained.history,
    }
}

/// Trains on the train partition of `manifest`, selecting on validation.
pub fn train_from_manifest(cfg: &RunConfig, manifest: &Manifest) -> Result<Model> {
    let front = FrontEnd::from_config(&cfg.frontend)?;
    let (train_pool, val_pool) = build_pools(cfg, manifest, &front)?;
    let settings = train_settings(cfg, front.dim(), manifest.repertoire.len());
    let trained = train(&train_pool, &val_pool, &settings)?;
    Ok(bundle(cfg, manifest, trained, &settings))
}

fn cmd_prepare(cfg: &RunConfig) -> Result<()> {
    let m = Manifest::read(require(&cfg.paths.manifest, "paths.manifest")?)?;
    let parted = detach(&partition(&m, cfg.seed)?)?;
    let out = cfg.paths.output_dir.join("manifest.csv");
    parted.write(&out)?;
    for p in [Partition::Train, Partition::Val, Partition::Test] {
        let n = parted.clips.iter().filter(|c| c.partition == p).count();
        println!("{p}: {n} clips");
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        })
        .collect();
    v.sort();
    Ok(v)
}

fn cmd_augment(cfg: &RunConfig) -> Result<()> {
    let manifest = detach(&Manifest::read(require(&cfg.paths.manifest, "paths.manifest")?)?)?;
    let rate = cfg.window.target_rate;
    let partitioned = manifest.is_partitioned();
    if !partitioned {
        log::warn!("manifest is not partitioned; augmenting every vocalization clip");
    }
    let in_train = |c: &&LabeledClip| !partitioned || c.partition == Partition::Train;
    let load = |p: &Path| -> Result<AudioBuffer> { resample(&decode_wav(p)?, rate) };
    let noise: Vec<AudioBuffer> = match &cfg.paths.noise_dir {
        Some(dir) => wav_files(dir)?.iter().map(|p| load(p)).collect::<Result<_>>()?,
        None => manifest
            .clips
            .iter()
            .filter(in_train)
            .filter(|c| !c.label.is_signal())
            .map(|c| load(&c.path))
            .collect::<Result<_>>()?,
    };
    let sources: Vec<&LabeledClip> = manifest
        .clips
        .iter()
        .filter(in_train)
        .filter(|c| c.label.is_signal())
        .collect();
    let out_dir = cfg.paths.output_dir.join("augmented");
    std::fs::create_dir_all(&out_dir)?;
    let out_dir = absolute(&out_dir)?;
    let produced: Vec<Vec<LabeledClip>> = sources
        .par_iter()
        .map(|clip| {
            let audio = load(&clip.path)?;
            augment_clip(clip, &audio, &noise, &cfg.augment)?
                .into_iter()
                .map(|a| {
                    let path = out_dir.join(&a.clip.path);
                    write_wav(&path, &a.audio)?;
                    Ok(LabeledClip { path, ..a.clip })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut clips = manifest.clips.clone();
    let added: usize = produced.iter().map(Vec::len).sum();
    clips.extend(produced.into_iter().flatten());
    let out = cfg.paths.output_dir.join("augmented.csv");
    Manifest { clips, ..manifest }.write(&out)?;
    println!("{} source clips, {added} variants; wrote {}", sources.len(), out.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let manifest = load_partitioned(cfg)?;
    let model = train_from_manifest(cfg, &manifest)?;
    let ckpt = cfg.checkpoint_path();
    model.save(&ckpt)?;
    let hist = cfg.paths.output_dir.join("history.csv");
    model.history.write_csv(&hist)?;
    if let Some(b) = model.history.best() {
        println!(
            "best epoch {} of {}: val loss {:.4}, binary acc {:.4}, class acc {:.4}",
            b.epoch,
            model.history.epochs.len(),
            b.val_total,
            b.val_binary_acc,
            b.val_multi_acc
        );
    }
    println!("wrote {} and {}", ckpt.display(), hist.display());
    Ok(())
}

fn cmd_tune(cfg: &RunConfig) -> Result<()> {
    let manifest = load_partitioned(cfg)?;
    let front = FrontEnd::from_config(&cfg.frontend)?;
    let (train_pool, val_pool) = build_pools(cfg, &manifest, &front)?;
    let k = manifest.repertoire.len();
    let mut best: Option<(f64, Model)> = None;
    let result = tune(&cfg.hpo, |_, h| {
        let mut settings = train_settings(cfg, front.dim(), k);
        settings.backend = h.backend(front.dim(), k);
        settings.optimizer = h.optimizer();
        let trained = train(&train_pool, &val_pool, &settings)?;
        let rec = trained
            .history
            .best()
            .ok_or_else(|| Error::config("train", "no epoch completed"))?;
        let score = TrialScore {
            val_binary_acc: rec.val_binary_acc,
            val_multi_acc: rec.val_multi_acc,
        };
        let loss = cfg.hpo.selection.loss(&score);
        if best.as_ref().is_none_or(|(l, _)| loss < *l) {
            best = Some((loss, bundle(cfg, &manifest, trained, &settings)));
        }
        Ok(score)
    })?;
    let log_path = cfg.paths.output_dir.join("trials.csv");
    write_trial_log(&result.trials, &log_path)?;
    let (_, model) = best.expect("tune succeeded with at least one trial");
    let ckpt = cfg
        .paths
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.paths.output_dir.join("best.ckpt"));
    model.save(&ckpt)?;
    model
        .history
        .write_csv(cfg.paths.output_dir.join("history.csv"))?;
    println!(
        "best trial {} of {}: {}",
        result.best_trial,
        result.trials.len(),
        serde_json::to_string(&result.best)?
    );
    println!("wrote {} and {}", log_path.display(), ckpt.display());
    Ok(())
}

fn cmd_predict(cfg: &RunConfig, recordings: &[PathBuf], clips: bool) -> Result<()> {
    let model = Model::load(cfg.checkpoint_path())?;
    let front = FrontEnd::from_config(&model.frontend)?;
    let paths = if recordings.is_empty() {
        wav_files(require(&cfg.paths.recordings_dir, "paths.recordings_dir")?)?
    } else {
        recordings.to_vec()
    };
    let results = process_many(&paths, &model, &front, &cfg.predict);
    let mut sets: Vec<SegmentSet> = Vec::with_capacity(results.len());
    let mut first_error = None;
    for (path, r) in results {
        match r {
            Ok(s) => {
                log::info!("{}: {} segments", path.display(), s.segments.len());
                if clips {
                    export_clips(
                        &path,
                        &s,
                        &model.repertoire,
                        &model.window,
                        cfg.paths.output_dir.join("clips"),
                    )?;
                }
                sets.push(s);
            }
            Err(e) => {
                log::error!("{}: {e}", path.display());
                first_error.get_or_insert(e);
            }
        }
    }
    let out = cfg.paths.output_dir.join("segments.jsonl");
    write_jsonl(&sets, &model.repertoire, &out)?;
    let summary = summarize(&sets, &model.repertoire);
    let mut w = csv::Writer::from_path(cfg.paths.output_dir.join("summary.csv"))?;
    for row in &summary {
        w.serialize(row)?;
    }
    w.flush()?;
    print!("{}", format_summary(&summary));
    println!("wrote {}", out.display());
    match first_error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn cmd_evaluate(cfg: &RunConfig, part: &Partition) -> Result<()> {
    let model = Model::load(cfg.checkpoint_path())?;
    let manifest = Manifest::read_with_repertoire(
        require(&cfg.paths.manifest, "paths.manifest")?,
        &model.repertoire,
    )?;
    let manifest = if manifest.is_partitioned() {
        manifest
    } else {
        partition(&manifest, cfg.seed)?
    };
    let front = FrontEnd::from_config(&model.frontend)?;
    let (pool, _) = build_frame_pool(&manifest, Some(*part), &model.window, &front)?;
    let report = evaluate(&model.params, &pool, &model.repertoire, &part.to_string())?;
    let json = cfg.paths.output_dir.join(format!("eval_{part}.json"));
    report.write_json(&json)?;
    report.multi.confusion.write_csv(
        cfg.paths.output_dir.join(format!("confusion_{part}.csv")),
        model.repertoire.names(),
    )?;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.2}"));
    println!(
        "{part}: {} frames, binary accuracy {}, precision {}, recall {}, AUC {}, class accuracy {}",
        report.frames,
        show(report.binary.accuracy),
        show(report.binary.precision),
        show(report.binary.recall),
        show(report.binary.auc.map(|a| 100.0 * a)),
        show(report.multi.accuracy)
    );
    println!("wrote {}", json.display());
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, cut: bool) -> Result<()> {
    let (audio, truth) = generate_soundscape(&cfg.synth, cfg.seed)?;
    let wav = cfg.paths.output_dir.join("soundscape.wav");
    write_wav(&wav, &audio)?;
    truth.write_json(cfg.paths.output_dir.join("truth.json"))?;
    println!("{} events in {:.1} s; wrote {}", truth.events.len(), truth.duration_s, wav.display());
    if cut {
        let dir = cfg.paths.output_dir.join("clips");
        let m = cut_manifest(&audio, &truth, &cfg.synth.repertoire()?, &cfg.cut, "clip", &dir)?;
        m.write(dir.join("manifest.csv"))?;
        println!("{} labeled clips in {}", m.clips.len(), dir.display());
    }
    Ok(())
}
