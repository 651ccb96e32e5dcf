use std::path::Path;
use std::process::ExitCode;

use tcv2_core::data::features::read_features;
use tcv2_core::data::manifest::{parse_manifest_text, REGISTRY_FILE};
use tcv2_core::data::splits::{read_splits, write_global_splits, SplitFile};
use tcv2_core::data::{
    check_split_coherence, make_patient_splits, parse_manifest, synth_generate, Cohort, Manifest, Slide,
    TaskRegistry, TaskSplits,
};
use tcv2_core::eval::finetune::predictions_csv;
use tcv2_core::eval::predictions::{evaluate_predictions, read_predictions};
use tcv2_core::eval::{attention_export, energy_estimate, finetune_protocol, FinetuneConfig, Intensity};
use tcv2_core::model::{load_checkpoint, CheckpointBundle, MultiTaskModel};
use tcv2_core::train::{sample_bag, val_rng, Bag, SampleMode, TrainConfig, TrainData, Trainer};
use tcv2_core::{Error, Result};

use crate::config::ConfigFile;
use crate::repro::write_repro;
use crate::{AttendCmd, CheckSplitsCmd, EnergyCmd, EvalCmd, FinetuneCmd, SynthCmd, TrainCmd};

pub const STATE_FILE: &str = "state.ckpt";
pub const BEST_FILE: &str = "best.ckpt";
pub const LOG_FILE: &str = "log.csv";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary sibling, then renames.
fn write_bundle(path: &Path, bundle: &CheckpointBundle) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    bundle.write(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn load_model(path: &Path) -> Result<MultiTaskModel> {
    let (model, _, _) = load_checkpoint(&CheckpointBundle::read(path)?)?;
    Ok(model)
}

fn task_splits(path: &Path, manifest: &Manifest) -> Result<TaskSplits> {
    Ok(read_splits(path)?.task_splits(manifest))
}

pub fn synth(cmd: SynthCmd) -> Result<ExitCode> {
    let mut file = ConfigFile::load(cmd.common.config.as_deref())?;
    file.synth = cmd.synth.overlay(file.synth).resolved();
    let (cfg, fractions) = file.synth.to_core()?;
    let cohort = synth_generate(&cfg)?;
    let manifest_path = cohort.write(&cmd.out)?;
    let manifest = cohort.manifest(&cmd.out);
    let split = make_patient_splits(&manifest, fractions, file.synth.split_seed.unwrap_or(cfg.seed))?;
    for w in &split.warnings {
        eprintln!("warning: {w}");
    }
    write_global_splits(&cmd.out.join("splits.csv"), &split.assignment)?;
    write_repro(&cmd.out, "synth", Some(cfg.seed), &file)?;
    println!(
        "wrote {} slides for {} tasks to {}",
        cohort.cohort.len(),
        cfg.tasks.len(),
        manifest_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn train(cmd: TrainCmd) -> Result<ExitCode> {
    let mut file = ConfigFile::load(cmd.common.config.as_deref())?;
    let defaults = TrainConfig::default();
    file.train = cmd.train.overlay(file.train).resolved(&defaults);
    let cfg = file.train.to_core(&defaults)?;
    let manifest = parse_manifest(&cmd.manifest)?;
    let splits = task_splits(&cmd.splits, &manifest)?;
    let cohort = Cohort::load(&manifest)?;
    let width = cohort
        .input_width()
        .ok_or_else(|| Error::Data("the manifest lists no slides".into()))?;
    create_dir(&cmd.out)?;
    let data = TrainData {
        cohort: &cohort,
        splits: &splits,
    };
    let state_path = cmd.out.join(STATE_FILE);
    let best_path = cmd.out.join(BEST_FILE);
    let mut trainer = if cmd.resume {
        let state = CheckpointBundle::read(&state_path)?;
        let best = if best_path.exists() {
            Some(CheckpointBundle::read(&best_path)?)
        } else {
            None
        };
        let t = Trainer::resume(&state, best, data, cfg.clone())?;
        let m = t.model().config();
        file.model = crate::config::ModelArgs {
            width: Some(m.encoder.output_width),
            hidden: Some(m.encoder.hidden_widths.clone()),
            activation: Some(m.encoder.activation.to_string()),
            heads: Some(m.heads),
            att_dim: Some(m.att_dim),
            dropout: Some(m.dropout_p),
        };
        t
    } else {
        file.model = cmd.model.overlay(file.model).resolved(width);
        let model = MultiTaskModel::new(file.model.to_core(width)?, manifest.registry.clone(), cfg.seed)?;
        Trainer::new(model, data, cfg.clone())?
    };
    trainer = trainer.with_log_file(&cmd.out.join(LOG_FILE))?;
    write_repro(&cmd.out, "train", Some(cfg.seed), &file)?;

    let per_epoch = trainer.steps_per_epoch().max(1);
    while !trainer.is_done() {
        let (epoch, step) = trainer.position();
        trainer.run_steps(per_epoch - step)?;
        for e in trainer.log().entries().iter().filter(|e| e.epoch == epoch) {
            println!("epoch {} {} {} loss {:.6} metric {:.4}", e.epoch, e.task_id, e.split, e.loss, e.metric);
        }
        write_bundle(&state_path, &trainer.resume_bundle())?;
        if let Some(b) = trainer.best() {
            write_bundle(&best_path, &b.bundle)?;
        }
    }
    let outcome = trainer.finish();
    write_bundle(&best_path, &outcome.best.bundle)?;
    match outcome.best.epoch {
        Some(e) => println!("best epoch {e} (mean val loss {:.6}); checkpoint {}", outcome.best.score, best_path.display()),
        None => println!("no epoch completed; initial model saved to {}", best_path.display()),
    }
    Ok(ExitCode::SUCCESS)
}

pub fn finetune(cmd: FinetuneCmd) -> Result<ExitCode> {
    let mut file = ConfigFile::load(cmd.common.config.as_deref())?;
    let defaults = FinetuneConfig::default();
    file.train = cmd.train.overlay(file.train).resolved(&defaults.base);
    file.finetune = cmd.finetune.overlay(file.finetune).resolved();
    let base = file.train.to_core(&defaults.base)?;
    let pretrained = load_model(&cmd.checkpoint)?;
    let manifest = parse_manifest(&cmd.manifest)?;
    let task = match &file.finetune.task {
        Some(id) => manifest.registry.require(id)?.clone(),
        None => match manifest.registry.tasks() {
            [only] => only.clone(),
            _ => return Err(Error::Config("the manifest has several tasks; choose one with --task".into())),
        },
    };
    file.finetune.task = Some(task.task_id.clone());
    let splits = task_splits(&cmd.splits, &manifest)?;
    let cohort = Cohort::load(&manifest)?;
    let cfg = FinetuneConfig {
        repeats: file.finetune.repeats.unwrap_or(defaults.repeats),
        init: file.finetune.init()?,
        base,
    };
    create_dir(&cmd.out)?;
    write_repro(&cmd.out, "finetune", Some(cfg.base.seed), &file)?;
    let outcome = finetune_protocol(&pretrained, &cohort, &splits, &task, &cfg)?;
    for r in &outcome.repeats {
        write_text(&cmd.out.join(format!("predictions_r{}.csv", r.repeat)), &predictions_csv(&task.task_id, &r.predictions))?;
        write_text(&cmd.out.join(format!("log_r{}.csv", r.repeat)), &r.log.to_text())?;
        println!("repeat {} seed {} best epoch {:?} auc {:.4}", r.repeat, r.seed, r.best_epoch, r.auc);
    }
    let report = outcome.report.to_string();
    write_text(&cmd.out.join("report.txt"), &format!("{report}\n"))?;
    println!("{report}");
    Ok(ExitCode::SUCCESS)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

pub fn eval(cmd: EvalCmd) -> Result<ExitCode> {
    let file = read_predictions(&cmd.predictions)?;
    let registry = cmd.tasks.as_deref().map(TaskRegistry::load).transpose()?;
    let metrics = evaluate_predictions(&file, registry.as_ref())?;
    let mut csv = String::from("task_id,n,num_classes,auc,balanced_accuracy,kappa\n");
    for (task, m) in &metrics {
        let row = format!(
            "{task},{},{},{},{:.6},{}",
            m.n,
            m.num_classes,
            fmt_opt(m.auc),
            m.balanced_accuracy,
            fmt_opt(m.kappa)
        );
        println!("{row}");
        csv.push_str(&row);
        csv.push('\n');
    }
    if let Some(out) = &cmd.out {
        create_dir(out)?;
        write_text(&out.join("metrics.csv"), &csv)?;
        write_repro(out, "eval", None, &ConfigFile::default())?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn attend(cmd: AttendCmd) -> Result<ExitCode> {
    let model = load_model(&cmd.checkpoint)?;
    let manifest = parse_manifest(&cmd.manifest)?;
    let record = manifest
        .record(&cmd.slide)
        .ok_or_else(|| Error::Data(format!("slide `{}` is not in the manifest", cmd.slide)))?
        .clone();
    let m = read_features(&manifest.feature_path(&record))?;
    let slide = Slide {
        features: m.to_tensor(),
        coords: m.coords,
        record,
    };
    let bag = match cmd.bag {
        Some(n) => sample_bag(&slide, (n, n), SampleMode::Val, &mut val_rng(cmd.seed, &cmd.slide))?,
        None => Bag::from_slide(&slide),
    };
    let export = attention_export(&model, &bag, &cmd.task)?;
    create_dir(&cmd.out)?;
    let stem = format!("{}_{}", cmd.slide, cmd.task);
    let csv_path = cmd.out.join(format!("{stem}.csv"));
    write_text(&csv_path, &export.to_csv())?;
    println!("wrote {}", csv_path.display());
    if cmd.raster {
        let pgm_path = cmd.out.join(format!("{stem}.pgm"));
        write_text(&pgm_path, &export.to_pgm()?)?;
        println!("wrote {}", pgm_path.display());
    }
    write_repro(&cmd.out, "attend", cmd.bag.map(|_| cmd.seed), &ConfigFile::default())?;
    Ok(ExitCode::SUCCESS)
}

pub fn energy(cmd: EnergyCmd) -> Result<ExitCode> {
    let intensity: Intensity = cmd.intensity.parse()?;
    println!("{}", energy_estimate(cmd.hours, cmd.watts, intensity)?);
    Ok(ExitCode::SUCCESS)
}

/// Reads a manifest without opening its feature files.
fn manifest_only(path: &Path, registry: Option<TaskRegistry>) -> Result<Manifest> {
    let registry = match registry {
        Some(r) => r,
        None => TaskRegistry::load(&path.with_file_name(REGISTRY_FILE))?,
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest_text(path, &text, registry)
}

pub fn check_splits(cmd: CheckSplitsCmd) -> Result<ExitCode> {
    let explicit = cmd.tasks.as_deref().map(TaskRegistry::load).transpose()?;
    let manifest = cmd.manifest.as_deref().map(|p| manifest_only(p, explicit.clone())).transpose()?;
    let registry = match (&explicit, &manifest) {
        (Some(r), _) => r.clone(),
        (None, Some(m)) => m.registry.clone(),
        (None, None) => return Err(Error::Config("pass --manifest or --tasks".into())),
    };
    let splits = match (read_splits(&cmd.splits)?, &manifest) {
        (SplitFile::PerTask(t), _) => t,
        (global, Some(m)) => global.task_splits(m),
        (SplitFile::Global(_), None) => {
            return Err(Error::Config("a global split file needs --manifest".into()));
        }
    };
    let report = check_split_coherence(&splits, &registry);
    if report.is_coherent() {
        println!("coherent: {} tasks", splits.tasks().count());
        return Ok(ExitCode::SUCCESS);
    }
    for v in &report.violations {
        println!(
            "violation: slide {} is {} for task {} but train for task {}",
            v.slide_id, v.split_a, v.task_a, v.task_b
        );
    }
    println!("{} violations", report.violations.len());
    Ok(ExitCode::from(1))
}
