//! Command implementations behind the `cmn` binary.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cmn_core::checkpoint;
use cmn_core::data::{
    self, build_vocab, corpus_stats, load_manifest, prepare_split, GenerateOptions, Manifest,
    PreparedSample, Split, Vocab,
};
use cmn_core::decode;
use cmn_core::memory::memory_param_share;
use cmn_core::metrics::{bleu, label_prf, rouge_l, rule_labeler, tokenize, EvalPair};
use cmn_core::model::{Model, Sample};
use cmn_core::trainer::{loss_log_csv, StepLog, TrainOptions, Trainer};
use cmn_core::{Error, Result};

use crate::runconfig::RunConfig;

/// Generate a synthetic corpus and print its statistics table.
pub fn cmd_gen_corpus(dir: &Path, opts: &GenerateOptions) -> Result<()> {
    let manifest = data::generate_corpus(dir, opts)?;
    println!("wrote {} records under {}", manifest.records.len(), dir.display());
    println!("{:<8} {:>8} {:>9} {:>10}", "SPLIT", "IMAGE#", "REPORT#", "AVG.LEN");
    for s in corpus_stats(&manifest) {
        println!(
            "{:<8} {:>8} {:>9} {:>10.2}",
            s.split.name(),
            s.images,
            s.reports,
            s.avg_len
        );
    }
    Ok(())
}

/// Patch width when any record rasterizes images; feature records bypass the
/// projection entirely.
fn patch_dim_for(manifest: &Manifest, patch_size: usize) -> Option<usize> {
    manifest
        .records
        .iter()
        .any(|r| r.image_path.is_some())
        .then_some(patch_size * patch_size)
}

fn load_dataset(cfg: &RunConfig) -> Result<(Manifest, Vocab)> {
    let manifest = load_manifest(cfg.manifest_path()?)?;
    let vocab = build_vocab(&manifest, cfg.min_count)?;
    Ok((manifest, vocab))
}

#[derive(Serialize)]
struct EpochSummary {
    epoch: usize,
    mean_loss: f64,
    val_bl4: f64,
}

#[derive(Serialize)]
struct TrainSummary {
    best_epoch: usize,
    best_val_bl4: f64,
    param_count: usize,
    memory_overhead: usize,
    epochs: Vec<EpochSummary>,
}

pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best_val_bl4: f64,
    pub model: Model,
    pub vocab: Vocab,
}

/// Train per the configuration: loss CSV, per-epoch checkpoints, greedy
/// validation BLEU-4 tracking, and a summary JSON.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let out_dir = cfg.output_dir.clone();
    cfg.write_resolved(&out_dir)?;
    let (manifest, vocab) = load_dataset(cfg)?;
    let patch_dim = patch_dim_for(&manifest, cfg.patch_size);
    let train_set = prepare_split(&manifest, &vocab, Split::Train, cfg.patch_size, Some(cfg.dim))?;
    let val_set = prepare_split(&manifest, &vocab, Split::Val, cfg.patch_size, Some(cfg.dim))?;
    let samples: Vec<Sample> = train_set.iter().map(|p| p.sample.clone()).collect();

    let model = Model::new(cfg.model_config(vocab.size(), patch_dim), cfg.seed)?;
    println!(
        "training variant={} on {} records ({} parameters, {} from memory)",
        model.config.variant.name(),
        samples.len(),
        model.param_count(),
        model.memory_overhead()
    );
    let options = TrainOptions {
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        seed: cfg.seed,
        grad_clip: (cfg.grad_clip > 0.0).then_some(cfg.grad_clip),
    };
    let mut trainer = Trainer::new(model, &samples, cfg.schedule(), options)?;

    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let mut all_rows: Vec<StepLog> = Vec::new();
    let mut summaries = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for epoch in 0..cfg.epochs {
        let rows = trainer.run_epoch()?;
        let mean_loss = rows.iter().map(|r| r.loss).sum::<f64>() / rows.len().max(1) as f64;
        all_rows.extend(rows);

        let ckpt_path = ckpt_dir.join(format!("epoch-{epoch:03}.ckpt"));
        checkpoint::save(&ckpt_path, &trainer.model, &vocab)?;

        let val_bl4 = validation_bl4(&trainer.model, &vocab, &val_set, cfg.max_len)?;
        println!("epoch {epoch:>3}: mean loss {mean_loss:.4}, val BL-4 {val_bl4:.4}");
        summaries.push(EpochSummary {
            epoch,
            mean_loss,
            val_bl4,
        });
        if best.map_or(true, |(_, b)| val_bl4 > b) {
            best = Some((epoch, val_bl4));
            fs::copy(&ckpt_path, out_dir.join("checkpoint.best"))?;
        }
    }
    fs::write(out_dir.join("loss.csv"), loss_log_csv(&all_rows))?;
    let (best_epoch, best_val_bl4) = best.expect("at least one epoch ran");
    let summary = TrainSummary {
        best_epoch,
        best_val_bl4,
        param_count: trainer.model.param_count(),
        memory_overhead: trainer.model.memory_overhead(),
        epochs: summaries,
    };
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::Format(format!("summary serialization: {e}")))?,
    )?;
    println!("best epoch {best_epoch} (val BL-4 {best_val_bl4:.4})");
    Ok(TrainOutcome {
        best_checkpoint: out_dir.join("checkpoint.best"),
        best_epoch,
        best_val_bl4,
        model: trainer.model,
        vocab,
    })
}

/// Greedy decoding keeps per-epoch validation cheap; final generation uses
/// the configured beam.
fn validation_bl4(
    model: &Model,
    vocab: &Vocab,
    val_set: &[PreparedSample],
    max_len: usize,
) -> Result<f64> {
    if val_set.is_empty() {
        return Ok(0.0);
    }
    let mut pairs = Vec::with_capacity(val_set.len());
    for p in val_set {
        let out = decode::greedy(model, &p.sample.source, max_len)?;
        pairs.push(EvalPair {
            id: p.id.clone(),
            candidate: vocab.decode(&out.tokens),
            reference: p.reference.clone(),
        });
    }
    Ok(bleu(&pairs, 4)?[3])
}

#[derive(Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub token_ids: Vec<usize>,
    pub text: String,
    pub score: f64,
}

/// Generate reports for a split with the configured beam; one JSON line per
/// record.
pub fn cmd_generate(
    cfg: &RunConfig,
    ckpt_path: &Path,
    split: Split,
    out: Option<&Path>,
) -> Result<PathBuf> {
    let (model, vocab) = checkpoint::load(ckpt_path)?;
    // The checkpoint must agree with the model keys of the run configuration.
    let expected = cfg.model_config(vocab.size(), model.config.patch_dim);
    if expected != model.config {
        return Err(Error::Consistency(format!(
            "checkpoint {} was built for a different configuration (stored {:?})",
            ckpt_path.display(),
            model.config
        )));
    }
    let manifest = load_manifest(cfg.manifest_path()?)?;
    let set = prepare_split(&manifest, &vocab, split, cfg.patch_size, Some(cfg.dim))?;
    let out_path = match out {
        Some(p) => p.to_path_buf(),
        None => {
            fs::create_dir_all(&cfg.output_dir)?;
            cfg.output_dir
                .join(format!("generations-{}.jsonl", split.name()))
        }
    };
    cfg.write_resolved(out_path.parent().unwrap_or(Path::new(".")))?;
    let mut w = fs::File::create(&out_path)?;
    for p in &set {
        let decoded = decode::beam_search(
            &model,
            &p.sample.source,
            cfg.beam_size,
            cfg.max_len,
            cfg.length_alpha,
        )?;
        let record = GenerationRecord {
            id: p.id.clone(),
            text: vocab.decode(&decoded.tokens).join(" "),
            token_ids: decoded.tokens,
            score: decoded.score,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Format(format!("generation record: {e}")))?;
        writeln!(w, "{line}")?;
    }
    println!("wrote {} generations to {}", set.len(), out_path.display());
    Ok(out_path)
}

#[derive(Serialize, Clone, Debug)]
pub struct MetricsReport {
    #[serde(rename = "BL-1")]
    pub bl1: f64,
    #[serde(rename = "BL-2")]
    pub bl2: f64,
    #[serde(rename = "BL-3")]
    pub bl3: f64,
    #[serde(rename = "BL-4")]
    pub bl4: f64,
    #[serde(rename = "RG-L")]
    pub rouge_l: f64,
    #[serde(rename = "P")]
    pub precision: f64,
    #[serde(rename = "R")]
    pub recall: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
}

/// Score generations against the manifest's references and labels; prints a
/// results-table-shaped row (METEOR column fixed at n/a) and writes JSON.
pub fn cmd_evaluate(
    generations: &Path,
    manifest_path: &Path,
    out: Option<&Path>,
) -> Result<MetricsReport> {
    let manifest = load_manifest(manifest_path)?;
    let reader = BufReader::new(fs::File::open(generations)?);
    let mut pairs = Vec::new();
    let mut predicted = BTreeMap::new();
    let mut gold = BTreeMap::new();
    let table = data::corpus_rule_table();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GenerationRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("generation line: {e}")))?;
        let reference = manifest.find(&rec.id)?;
        let candidate = tokenize(&rec.text);
        predicted.insert(rec.id.clone(), rule_labeler(&candidate, &table));
        gold.insert(
            rec.id.clone(),
            reference.labels.iter().cloned().collect(),
        );
        pairs.push(EvalPair {
            id: rec.id,
            candidate,
            reference: tokenize(&reference.report),
        });
    }
    if pairs.is_empty() {
        return Err(Error::Argument(format!(
            "no generation records in {}",
            generations.display()
        )));
    }
    let b = bleu(&pairs, 4)?;
    let rl = rouge_l(&pairs)?;
    let labels = label_prf(&predicted, &gold, &table.universe())?;
    let report = MetricsReport {
        bl1: b[0],
        bl2: b[1],
        bl3: b[2],
        bl4: b[3],
        rouge_l: rl,
        precision: labels.precision,
        recall: labels.recall,
        f1: labels.f1,
    };
    println!(
        "{:<10} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6}",
        "MODEL", "BL-1", "BL-2", "BL-3", "BL-4", "MTR", "RG-L", "P", "R", "F1"
    );
    println!(
        "{:<10} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6} {:>6.3} | {:>6.3} {:>6.3} {:>6.3}",
        "generated",
        report.bl1,
        report.bl2,
        report.bl3,
        report.bl4,
        "n/a",
        report.rouge_l,
        report.precision,
        report.recall,
        report.f1
    );
    if let Some(path) = out {
        fs::write(
            path,
            serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Format(format!("metrics serialization: {e}")))?,
        )?;
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    MemorySize,
    QueriedK,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<SweepAxis> {
        match s {
            "memory_size" => Ok(SweepAxis::MemorySize),
            "queried_k" => Ok(SweepAxis::QueriedK),
            other => Err(Error::Argument(format!(
                "unknown sweep axis `{other}` (expected memory_size|queried_k)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::MemorySize => "memory_size",
            SweepAxis::QueriedK => "queried_k",
        }
    }
}

/// Train one model per axis value under a shared seed; test-set BLEU-4 and
/// parameter counts land in a plot-ready CSV.
pub fn cmd_sweep(cfg: &RunConfig, axis: SweepAxis, values: &[usize]) -> Result<PathBuf> {
    if values.is_empty() {
        return Err(Error::Argument("sweep needs at least one value".into()));
    }
    let base_out = cfg.output_dir.clone();
    fs::create_dir_all(&base_out)?;
    cfg.write_resolved(&base_out)?;
    let mut rows = vec!["value,bl4,param_count".to_string()];
    for &value in values {
        let mut run_cfg = cfg.clone();
        match axis {
            SweepAxis::MemorySize => {
                run_cfg.memory_slots = value;
                run_cfg.memory_topk = run_cfg.memory_topk.min(value.max(1));
            }
            SweepAxis::QueriedK => run_cfg.memory_topk = value,
        }
        run_cfg.output_dir = base_out.join(format!("{}-{value}", axis.name()));
        let outcome = cmd_train(&run_cfg)?;
        let gen_path = cmd_generate(&run_cfg, &outcome.best_checkpoint, Split::Test, None)?;
        let metrics = cmd_evaluate(
            &gen_path,
            run_cfg.manifest_path()?,
            Some(&run_cfg.output_dir.join("metrics.json")),
        )?;
        rows.push(format!(
            "{value},{},{}",
            metrics.bl4,
            outcome.model.param_count()
        ));
    }
    let csv_path = base_out.join(format!("sweep-{}.csv", axis.name()));
    fs::write(&csv_path, rows.join("\n") + "\n")?;
    println!("sweep results in {}", csv_path.display());
    Ok(csv_path)
}

/// Export the per-position, per-head memory trace CSVs for one record.
pub fn cmd_export_attn(
    cfg: &RunConfig,
    ckpt_path: &Path,
    record_id: &str,
    out_dir: Option<&Path>,
) -> Result<(PathBuf, PathBuf)> {
    let (model, vocab) = checkpoint::load(ckpt_path)?;
    if model.memory_overhead() == 0 {
        return Err(Error::Argument(format!(
            "variant `{}` has no memory to trace",
            model.config.variant.name()
        )));
    }
    let manifest = load_manifest(cfg.manifest_path()?)?;
    let record = manifest.find(record_id)?;
    let split = record.split;
    let set = prepare_split(&manifest, &vocab, split, cfg.patch_size, Some(cfg.dim))?;
    let prepared = set
        .into_iter()
        .find(|p| p.id == record_id)
        .ok_or_else(|| Error::Argument(format!("record `{record_id}` vanished from split")))?;

    let (_, visual_trace) = model.encode_traced(&prepared.sample.source)?;
    // Textual positions follow the teacher-forcing input: position 0 is BOS,
    // position t is report token t.
    let input = &prepared.sample.tokens[..prepared.sample.tokens.len() - 1];
    let textual_trace = model.textual_trace(input)?;
    let (visual_trace, textual_trace) = match (visual_trace, textual_trace) {
        (Some(v), Some(t)) => (v, t),
        _ => {
            return Err(Error::Consistency(
                "memory traces missing despite an active memory path".into(),
            ))
        }
    };

    let dir = out_dir.unwrap_or(&cfg.output_dir).to_path_buf();
    fs::create_dir_all(&dir)?;
    let header = "modality,position,head,rank,memory_index,weight";
    let visual_path = dir.join(format!("attn-{record_id}-visual.csv"));
    let textual_path = dir.join(format!("attn-{record_id}-textual.csv"));
    fs::write(
        &visual_path,
        format!("{header}\n{}\n", visual_trace.csv_rows("visual").join("\n")),
    )?;
    fs::write(
        &textual_path,
        format!("{header}\n{}\n", textual_trace.csv_rows("textual").join("\n")),
    )?;
    println!(
        "wrote {} and {}",
        visual_path.display(),
        textual_path.display()
    );
    Ok((visual_path, textual_path))
}

/// Parameter accounting: totals, memory overhead, and its share.
pub fn cmd_param_count(cfg: &RunConfig, total_override: Option<usize>) -> Result<()> {
    let (vocab_size, patch_dim) = if cfg.vocab_size > 0 {
        (cfg.vocab_size, Some(cfg.patch_size * cfg.patch_size))
    } else {
        let (manifest, vocab) = load_dataset(cfg)?;
        (vocab.size(), patch_dim_for(&manifest, cfg.patch_size))
    };
    let model = Model::new(cfg.model_config(vocab_size, patch_dim), cfg.seed)?;
    let total = total_override.unwrap_or_else(|| model.param_count());
    let overhead = model.memory_overhead();
    let (one, one_pct) = memory_param_share(cfg.memory_slots, cfg.dim, cfg.heads, total);
    let share = if total == 0 {
        0.0
    } else {
        100.0 * overhead as f64 / total as f64
    };
    println!("variant            {}", model.config.variant.name());
    println!("total parameters   {}", model.param_count());
    println!("memory overhead    {overhead} ({share:.2}% of {total})");
    println!(
        "one memory module  {one} = N*d {} + projections {} + output {} ({one_pct:.2}%)",
        cfg.memory_slots * cfg.dim,
        3 * cfg.heads * cfg.dim * (cfg.dim / cfg.heads.max(1)),
        cfg.dim * cfg.dim
    );
    Ok(())
}
