use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, Context};
use klue::model::{Checkpoint, KlueModel};
use klue::provenance::FileHeader;
use klue::rulebase::RuleBase;
use klue::train::{
    concept_recovery_score, evaluate, generate_task, hard_sample_report, hard_sample_split, index_for,
    peak_to_final_decline, predict_dataset, rule_base_for, train_model_with, Dataset, EpochRecord,
    ExperimentConfig, SyntheticTask, TrainError,
};
use serde_json::{json, Value};

use crate::config::{self, to_document};
use crate::curves::{self, StreamHeader};
use crate::rules::{read_rules, write_file};
use crate::{CliResult, ConceptReportArgs, ConfigArgs, EvalArgs, ExportArgs, HardSplitArgs, SplitChoice, TrainArgs};

struct Setup {
    cfg: ExperimentConfig,
    rb: RuleBase,
}

fn setup(a: &ConfigArgs) -> Result<Setup, crate::CliError> {
    let cfg = config::load(a.config.as_deref(), a.preset, &a.sets)?;
    let rb = match &a.rules {
        Some(p) => read_rules(p)?,
        None => rule_base_for(&cfg)?,
    };
    cfg.check_dims(rb.concepts(), rb.classes())?;
    Ok(Setup { cfg, rb })
}

struct Splits {
    task: SyntheticTask,
    train: Dataset,
    val: Dataset,
    shifted: Dataset,
}

impl Splits {
    fn new(cfg: &ExperimentConfig) -> anyhow::Result<Self> {
        let (task, train, val, shifted) = generate_task(&cfg.task)?;
        Ok(Self {
            task,
            train,
            val,
            shifted,
        })
    }

    fn get(&self, s: SplitChoice) -> &Dataset {
        match s {
            SplitChoice::Train => &self.train,
            SplitChoice::Val => &self.val,
            SplitChoice::Shifted => &self.shifted,
        }
    }
}

fn write_json(path: &Path, header: &FileHeader, body: Value) -> anyhow::Result<()> {
    let mut doc = json!({ "header": header });
    if let (Value::Object(d), Value::Object(b)) = (&mut doc, body) {
        d.extend(b);
    }
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn load_model(path: &Path, cfg: &ExperimentConfig) -> anyhow::Result<(Checkpoint, KlueModel)> {
    let ck = Checkpoint::load(path).with_context(|| format!("checkpoint `{}`", path.display()))?;
    let m = &ck.model.config;
    if m.input_dim != cfg.task.input_dim || m.classes != cfg.task.classes {
        return Err(anyhow!(
            "checkpoint `{}` expects F={} K={}, the task has F={} K={}",
            path.display(),
            m.input_dim,
            m.classes,
            cfg.task.input_dim,
            cfg.task.classes
        ));
    }
    if ck.header.config_hash != cfg.hash() {
        log::warn!(
            "checkpoint `{}` was trained under config {} (current {})",
            path.display(),
            ck.header.config_hash,
            cfg.hash()
        );
    }
    let model = ck.model.clone();
    Ok((ck, model))
}

fn last_record<'a>(history: &'a [EpochRecord], split: &str) -> Option<&'a EpochRecord> {
    history.iter().rev().find(|r| r.split == split)
}

pub fn train(a: &TrainArgs) -> CliResult {
    let Setup { cfg, rb } = setup(&a.cfg)?;
    let data = Splits::new(&cfg)?;
    let header = cfg.header();
    let variant = cfg.variant.to_string();
    let dir = &a.out_dir;
    let ck_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ck_dir).with_context(|| format!("cannot create `{}`", ck_dir.display()))?;
    write_json(&dir.join("config.json"), &header, to_document(&cfg))?;

    let metrics_path = dir.join("metrics.ndjson");
    let mut metrics = BufWriter::new(
        File::create(&metrics_path).with_context(|| format!("cannot write `{}`", metrics_path.display()))?,
    );
    let stream_header = StreamHeader {
        header: header.clone(),
        variant: variant.clone(),
        seed: cfg.seed,
    };
    writeln!(metrics, "{}", serde_json::to_string(&stream_header)?)?;
    let mut write_err: Option<std::io::Error> = None;
    let every = a.checkpoint_every;
    let outcome = train_model_with(
        &cfg,
        &data.train,
        &[&data.val, &data.shifted],
        &rb,
        |rec| {
            if write_err.is_none() {
                if let Err(e) = writeln!(metrics, "{}", curves::record_line(&variant, rec)) {
                    write_err = Some(e);
                }
            }
        },
        |state| {
            if every > 0 && (state.epoch + 1) % every == 0 {
                let ck = Checkpoint::new(header.clone(), state.epoch, state.model, state.optimizer, state.rng);
                ck.save(&ck_dir.join(format!("epoch_{:03}.json", state.epoch + 1)))
                    .map_err(TrainError::from)?;
            }
            Ok(())
        },
    )?;
    if let Some(e) = write_err {
        return Err(anyhow::Error::from(e).context(format!("writing `{}`", metrics_path.display())).into());
    }
    metrics.flush()?;

    let last_epoch = cfg.epochs.saturating_sub(1);
    let final_ck = Checkpoint::new(header.clone(), last_epoch, &outcome.model, &outcome.optimizer, &outcome.rng);
    final_ck
        .save(&dir.join("checkpoint.json"))
        .with_context(|| format!("cannot write checkpoint in `{}`", dir.display()))?;

    let val_auc: Vec<f64> = outcome
        .history
        .iter()
        .filter(|r| r.split == "val")
        .map(|r| r.auc_refined)
        .collect();
    let index = index_for(&outcome.model, &rb)?;
    let preds = predict_dataset(&outcome.model, &data.val.x, index.as_ref())?;
    let recovery = concept_recovery_score(&preds.concept_logits, &data.val.latents, cfg.null_permutations, cfg.seed);
    let finals: serde_json::Map<String, Value> = ["train", "val", "shifted"]
        .iter()
        .filter_map(|s| last_record(&outcome.history, s).map(|r| (s.to_string(), serde_json::to_value(r).unwrap())))
        .collect();
    write_json(
        &dir.join("summary.json"),
        &header,
        json!({
            "variant": variant,
            "epochs": cfg.epochs,
            "steps": outcome.optimizer.step,
            "parameters": outcome.model.num_parameters(),
            "final": finals,
            "val_auc_peak": val_auc.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            "val_auc_final": val_auc.last(),
            "val_auc_peak_to_final_decline": peak_to_final_decline(&val_auc),
            "concept_recovery": {
                "mean_matched_auc": recovery.mean_matched_auc,
                "null_mean": recovery.null_mean,
                "null_std": recovery.null_std,
                "matching": recovery.matching,
            },
        }),
    )?;

    say!("variant {variant}  config {}  epochs {}", header.config_hash, cfg.epochs);
    for s in ["train", "val", "shifted"] {
        if let Some(r) = last_record(&outcome.history, s) {
            say!(
                "{s:<8} mAP {:.4} -> {:.4}  AUC {:.4} -> {:.4}  loss {:.5}",
                r.map_initial, r.map_refined, r.auc_initial, r.auc_refined, r.loss.total
            );
        }
    }
    say!(
        "concept recovery: mean matched AUC {:.4} (null {:.4} ± {:.4})",
        recovery.mean_matched_auc, recovery.null_mean, recovery.null_std
    );
    say!("outputs in {}", dir.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CliResult {
    let Setup { cfg, rb } = setup(&a.cfg)?;
    let data = Splits::new(&cfg)?;
    let (ck, model) = load_model(&a.checkpoint, &cfg)?;
    let index = index_for(&model, &rb)?;
    let splits = if a.splits.is_empty() {
        vec![SplitChoice::Train, SplitChoice::Val, SplitChoice::Shifted]
    } else {
        a.splits.clone()
    };
    let mut reports = serde_json::Map::new();
    say!("checkpoint epoch {}  variant {}", ck.epoch, model.config.variant);
    for s in splits {
        let (report, _) = evaluate(&model, data.get(s), index.as_ref())?;
        say!(
            "{:<8} mAP {:.4} -> {:.4}  AUC {:.4} -> {:.4}",
            s.name(),
            report.initial.map,
            report.refined.map,
            report.initial.mean_auc,
            report.refined.mean_auc
        );
        reports.insert(s.name().into(), serde_json::to_value(report)?);
    }
    write_json(
        &a.out,
        &cfg.header(),
        json!({
            "checkpoint": { "config_hash": ck.header.config_hash, "epoch": ck.epoch },
            "variant": model.config.variant,
            "splits": reports,
        }),
    )?;
    Ok(())
}

pub fn hard_split(a: &HardSplitArgs) -> CliResult {
    let Setup { cfg, rb } = setup(&a.cfg)?;
    let data = Splits::new(&cfg)?;
    let split = data.get(a.split);
    let (_, base) = load_model(&a.baseline, &cfg)?;
    let base_index = index_for(&base, &rb)?;
    let base_pred = predict_dataset(&base, &split.x, base_index.as_ref())?;
    let hard = hard_sample_split(&base_pred.p_class, a.percentile)
        .map_err(|e| crate::CliError::Usage(format!("--percentile: {e:?}")))?;

    let mut rows = vec![(a.baseline.display().to_string(), base.config.variant, hard_sample_report(&base_pred.p_refined, split, &hard))];
    for path in &a.models {
        let (_, m) = load_model(path, &cfg)?;
        let idx = index_for(&m, &rb)?;
        let p = predict_dataset(&m, &split.x, idx.as_ref())?;
        rows.push((path.display().to_string(), m.config.variant, hard_sample_report(&p.p_refined, split, &hard)));
    }
    say!(
        "split {}  percentile {}  hard samples {} of {}",
        a.split.name(),
        a.percentile,
        hard.len(),
        split.len()
    );
    say!("{:<10} {:>9} {:>9} {:>9}  checkpoint", "variant", "mAP full", "mAP hard", "drop");
    for (path, variant, r) in &rows {
        say!(
            "{:<10} {:>9.4} {:>9.4} {:>9.4}  {path}",
            variant.to_string(),
            r.map_full,
            r.map_hard,
            r.drop
        );
    }
    let models: Vec<Value> = rows
        .iter()
        .map(|(path, variant, r)| {
            json!({
                "checkpoint": path,
                "variant": variant,
                "map_full": r.map_full,
                "map_hard": r.map_hard,
                "drop": r.drop,
            })
        })
        .collect();
    write_json(
        &a.out,
        &cfg.header(),
        json!({
            "split": a.split.name(),
            "percentile": a.percentile,
            "hard_indices": hard,
            "models": models,
        }),
    )?;
    Ok(())
}

pub fn concept_report(a: &ConceptReportArgs) -> CliResult {
    let Setup { cfg, rb } = setup(&a.cfg)?;
    let data = Splits::new(&cfg)?;
    let split = data.get(a.split);
    let (_, model) = load_model(&a.checkpoint, &cfg)?;
    let index = index_for(&model, &rb)?;
    let pred = predict_dataset(&model, &split.x, index.as_ref())?;
    let perms = a.permutations.unwrap_or(cfg.null_permutations);
    let rec = concept_recovery_score(&pred.concept_logits, &split.latents, perms, cfg.seed);
    let formulas: Vec<String> = data
        .task
        .formulas
        .iter()
        .enumerate()
        .map(|(k, f)| format!("y{k} = {f}"))
        .collect();
    say!("{:<8} {:<6} {:>7}", "latent", "head", "AUC");
    for m in &rec.matching {
        say!("{:<8} {:<6} {:>7.4}", format!("c{}", m.latent), format!("s{}", m.head), m.auc);
    }
    say!(
        "mean matched AUC {:.4}; permutation null {:.4} ± {:.4} ({perms} permutations)",
        rec.mean_matched_auc, rec.null_mean, rec.null_std
    );
    write_json(
        &a.out,
        &cfg.header(),
        json!({
            "split": a.split.name(),
            "variant": model.config.variant,
            "formulas": formulas,
            "recovery": rec,
        }),
    )?;
    Ok(())
}

pub fn export_curves(a: &ExportArgs) -> CliResult {
    let mut headers = Vec::new();
    let mut points = Vec::new();
    for path in &a.metrics {
        let file = File::open(path).with_context(|| format!("cannot read metrics `{}`", path.display()))?;
        let s = curves::read_stream(&path.display().to_string(), BufReader::new(file), a.split.name(), a.series)?;
        headers.push(s.header);
        points.extend(s.points);
    }
    let header = curves::export_header(&headers, a.split.name(), a.series);
    let mut out = Vec::new();
    curves::write_csv(&mut out, &header, &points)?;
    write_file(&a.out, &out)?;
    let mut variants: Vec<&str> = points.iter().map(|p| p.variant.as_str()).collect();
    variants.dedup();
    say!("{} points in {} series -> {}", points.len(), variants.len(), a.out.display());
    Ok(())
}
