//! Experiment drivers behind the CLI subcommands: scene generation,
//! training, evaluation, the ablation grid, sparsity accounting, and report
//! emission. Every artifact embeds the config hash and seed; wall-clock
//! timings go to a separate file so report.json stays byte-reproducible.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use fusionq_core::model::FusionModel;
use fusionq_core::numerics::adam::{cosine_lr, AdamParams, AdamState};
use fusionq_core::numerics::graph::Graph;
use fusionq_core::scenesim::{
    child_seed, generate_sequence, save_sequence, SceneFileHeader, SceneFrame, SCENE_FORMAT,
    SCENE_VERSION,
};
use fusionq_core::training::{
    load_checkpoint, save_checkpoint, train_step, Checkpoint, LossBreakdown, TrainStepCfg,
};

use crate::config::ExperimentConfig;
use crate::metrics::{
    bench_sparsity, evaluate_center_ap, per_layer_image_query_mse, ApEntry, GroundTruth,
    Prediction, SparsityReport,
};
use crate::plot;

/// Ordered frames of one or more sequences.
pub struct Dataset {
    pub sequences: Vec<Vec<SceneFrame>>,
}

impl Dataset {
    pub fn n_frames(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Flat (sequence, frame) visit order.
    pub fn flat_index(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.n_frames());
        for (s, seq) in self.sequences.iter().enumerate() {
            for f in 0..seq.len() {
                out.push((s, f));
            }
        }
        out
    }
}

/// Training sequences for a config.
pub fn build_train_dataset(cfg: &ExperimentConfig) -> anyhow::Result<Dataset> {
    let mut scene = cfg.scene.clone();
    scene.seed = child_seed(cfg.seed, 10, scene.seed);
    let sequences = (0..scene.n_sequences)
        .map(|i| generate_sequence(&scene, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { sequences })
}

/// Held-out evaluation sequences (same distribution, disjoint seed lane);
/// falls back to the training scenes when `eval_sequences` is 0.
pub fn build_eval_dataset(cfg: &ExperimentConfig) -> anyhow::Result<Dataset> {
    if cfg.eval.eval_sequences == 0 {
        return build_train_dataset(cfg);
    }
    let mut scene = cfg.scene.clone();
    scene.seed = child_seed(cfg.seed, 10, scene.seed);
    let sequences = (0..cfg.eval.eval_sequences)
        .map(|i| generate_sequence(&scene, 100_000 + i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { sequences })
}

pub struct TrainOutcome {
    pub model: FusionModel,
    pub adam: AdamState,
    pub losses: Vec<(u64, LossBreakdown)>,
    pub steps_run: u64,
}

/// Full training loop: frames are visited in sequence order (cycling), the
/// history queue follows each sequence and resets at discontinuities, and
/// the learning rate follows cosine annealing when enabled.
pub fn train(cfg: &ExperimentConfig, dataset: &Dataset) -> anyhow::Result<TrainOutcome> {
    let model_cfg = cfg.model.to_model_config(&cfg.scene)?;
    let mut model = FusionModel::new(model_cfg, child_seed(cfg.seed, 11, 0))?;
    let mut adam = AdamState::new(&model.store);
    let step_cfg = TrainStepCfg {
        weights: cfg.training.loss_weights(),
        adam: AdamParams { weight_decay: cfg.training.weight_decay, ..AdamParams::default() },
        modality_probs: cfg.training.modality_probs,
        seed: cfg.seed,
    };
    let flat = dataset.flat_index();
    if flat.is_empty() {
        anyhow::bail!("training dataset has no frames");
    }
    let mut history = model.new_history();
    let mut last_visit: Option<(usize, usize)> = None;
    let mut losses = Vec::new();
    for step in 0..cfg.training.steps {
        let (s, f) = flat[(step as usize) % flat.len()];
        let contiguous = matches!(last_visit, Some((ls, lf)) if ls == s && f == lf + 1);
        if !contiguous {
            history.clear();
        }
        last_visit = Some((s, f));
        let lr = if cfg.training.cosine {
            cosine_lr(cfg.training.lr, cfg.training.lr_min, step, cfg.training.steps)
        } else {
            cfg.training.lr
        };
        let frame = &dataset.sequences[s][f];
        let hist_arg = cfg.training.use_history.then_some(&mut history);
        let bd = train_step(&mut model, frame, &cfg.oracle, &mut adam, &step_cfg, step, lr, hist_arg)?;
        if let Some(bd) = bd {
            if step % cfg.training.log_every == 0 {
                losses.push((step, bd));
            }
        }
    }
    Ok(TrainOutcome { model, adam, losses, steps_run: cfg.training.steps })
}

/// Everything eval writes into report.json.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub cfg_hash: String,
    pub seed: u64,
    pub mean_ap: f64,
    pub ap: Vec<ApEntry>,
    /// Mean per-layer image-query MSE curve (layers + 1 entries; empty when
    /// no frame produced image queries).
    pub mse_curve: Vec<f64>,
    pub n_frames: usize,
    pub n_predictions: usize,
    pub mean_pc_queries: f64,
    pub mean_img_queries: f64,
    pub mean_pillars: f64,
    pub max_pillars: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalTimings {
    pub total_seconds: f64,
    pub per_frame_seconds: f64,
}

/// Run the model over a dataset and score it.
pub fn evaluate(
    cfg: &ExperimentConfig,
    model: &FusionModel,
    dataset: &Dataset,
) -> anyhow::Result<(EvalReport, EvalTimings)> {
    let t0 = Instant::now();
    let eval_modality = cfg.eval.modality()?;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut mse_sum: Vec<f64> = Vec::new();
    let mut mse_frames = 0usize;
    let mut q_pc = 0usize;
    let mut q_img = 0usize;
    let mut pillars_total = 0usize;
    let mut pillars_max = 0usize;
    let mut frame_counter = 0usize;
    for seq in &dataset.sequences {
        let mut history = model.new_history();
        for frame in seq {
            let frame_id = frame_counter;
            frame_counter += 1;
            for gt in &frame.gts {
                gts.push(GroundTruth {
                    frame: frame_id,
                    class: gt.class,
                    center: [gt.bbox.center[0], gt.bbox.center[1]],
                });
            }
            let mut g = Graph::new();
            let pass = model.forward(
                &mut g,
                frame,
                &cfg.oracle,
                eval_modality,
                (cfg.eval.use_history && !history.is_empty()).then_some(&history),
                child_seed(cfg.seed, 4, frame_id as u64),
            )?;
            let Some(pass) = pass else { continue };
            q_pc += pass.output.n_pc;
            q_img += pass.output.n_img;
            pillars_total += pass.n_pillars;
            pillars_max = pillars_max.max(pass.n_pillars);
            let rec = pass.output.final_layer();
            let cls = g.value(rec.heads.cls);
            let reg = g.value(rec.heads.reg_norm);
            for i in 0..pass.output.total_queries() {
                let row = cls.row(i);
                let (mut best_c, mut best_z) = (0usize, f64::NEG_INFINITY);
                for (c, &z) in row.iter().enumerate() {
                    if z > best_z {
                        best_z = z;
                        best_c = c;
                    }
                }
                preds.push(Prediction {
                    frame: frame_id,
                    class: best_c,
                    score: 1.0 / (1.0 + (-best_z).exp()),
                    center: [reg.at2(i, 0), reg.at2(i, 1)],
                });
            }
            if let Some(curve) = per_layer_image_query_mse(&g, &pass.output, &frame.gts)? {
                if mse_sum.is_empty() {
                    mse_sum = vec![0.0; curve.len()];
                }
                if mse_sum.len() == curve.len() {
                    for (a, b) in mse_sum.iter_mut().zip(&curve) {
                        *a += b;
                    }
                    mse_frames += 1;
                }
            }
            if cfg.eval.use_history {
                let entries = fusionq_core::decoder::history_entries_from_output(
                    &g,
                    &pass.output,
                    history.per_frame,
                );
                history.push_topk(entries, frame.ego_pose, frame.timestamp);
            }
        }
    }
    let table = evaluate_center_ap(&preds, &gts, &cfg.eval.thresholds);
    let mse_curve: Vec<f64> = if mse_frames == 0 {
        vec![]
    } else {
        mse_sum.iter().map(|v| v / mse_frames as f64).collect()
    };
    let n_frames = dataset.n_frames();
    let elapsed = t0.elapsed().as_secs_f64();
    Ok((
        EvalReport {
            cfg_hash: cfg.hash(),
            seed: cfg.seed,
            mean_ap: table.mean_ap,
            ap: table.entries,
            mse_curve,
            n_frames,
            n_predictions: preds.len(),
            mean_pc_queries: q_pc as f64 / n_frames.max(1) as f64,
            mean_img_queries: q_img as f64 / n_frames.max(1) as f64,
            mean_pillars: pillars_total as f64 / n_frames.max(1) as f64,
            max_pillars: pillars_max,
        },
        EvalTimings { total_seconds: elapsed, per_frame_seconds: elapsed / n_frames.max(1) as f64 },
    ))
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

// --- subcommands -----------------------------------------------------------

/// `gen-scenes`: write one JSONL file per sequence.
pub fn run_gen_scenes(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    ensure_dir(out)?;
    let dataset = build_train_dataset(cfg)?;
    let header = SceneFileHeader {
        format: SCENE_FORMAT.into(),
        version: SCENE_VERSION,
        cfg_hash: Some(cfg.hash()),
        seed: Some(cfg.seed),
    };
    for (i, seq) in dataset.sequences.iter().enumerate() {
        let path = out.join(format!("scenes_{i:03}.jsonl"));
        save_sequence(&path, seq, &header)?;
    }
    log::info!("wrote {} sequences to {}", dataset.sequences.len(), out.display());
    Ok(())
}

/// `train`: loss.csv + checkpoint.bin.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    ensure_dir(out)?;
    let dataset = build_train_dataset(cfg)?;
    let t0 = Instant::now();
    let outcome = train(cfg, &dataset)?;
    let mut csv = String::new();
    csv.push_str(&format!("# cfg_hash={} seed={}\n", cfg.hash(), cfg.seed));
    csv.push_str("step,l_total,l_cls,l_reg,l_aux\n");
    for (step, bd) in &outcome.losses {
        csv.push_str(&format!(
            "{step},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            bd.l_total, bd.l_cls, bd.l_reg, bd.l_aux
        ));
    }
    std::fs::write(out.join("loss.csv"), csv)?;
    let ckpt = Checkpoint::capture(
        &outcome.model.store,
        &outcome.adam,
        outcome.steps_run,
        cfg.seed,
        &cfg.hash(),
    );
    save_checkpoint(&out.join("checkpoint.bin"), &ckpt)?;
    write_json(
        &out.join("train_timings.json"),
        &serde_json::json!({
            "total_seconds": t0.elapsed().as_secs_f64(),
            "steps": outcome.steps_run,
        }),
    )?;
    log::info!(
        "trained {} steps in {:.1}s; final loss {:.4}",
        outcome.steps_run,
        t0.elapsed().as_secs_f64(),
        outcome.losses.last().map_or(f64::NAN, |(_, b)| b.l_total)
    );
    Ok(())
}

/// Rebuild the model and load a checkpoint into it.
pub fn load_model(cfg: &ExperimentConfig, checkpoint: &Path) -> anyhow::Result<FusionModel> {
    let model_cfg = cfg.model.to_model_config(&cfg.scene)?;
    let mut model = FusionModel::new(model_cfg, child_seed(cfg.seed, 11, 0))?;
    let ckpt = load_checkpoint(checkpoint)?;
    if ckpt.cfg_hash != cfg.hash() {
        log::warn!("checkpoint cfg hash {} differs from current config {}", ckpt.cfg_hash, cfg.hash());
    }
    let mut adam = AdamState::new(&model.store);
    ckpt.restore(&mut model.store, &mut adam)?;
    Ok(model)
}

/// `eval`: report.json, mse_layers.csv, timings.json.
pub fn run_eval(cfg: &ExperimentConfig, out: &Path, checkpoint: &Path) -> anyhow::Result<()> {
    ensure_dir(out)?;
    let model = load_model(cfg, checkpoint)?;
    let dataset = build_eval_dataset(cfg)?;
    let (report, timings) = evaluate(cfg, &model, &dataset)?;
    write_json(&out.join("report.json"), &report)?;
    let mut csv = String::new();
    csv.push_str(&format!("# cfg_hash={} seed={}\n", report.cfg_hash, report.seed));
    csv.push_str("layer,mse\n");
    for (i, v) in report.mse_curve.iter().enumerate() {
        csv.push_str(&format!("{i},{v:.17e}\n"));
    }
    std::fs::write(out.join("mse_layers.csv"), csv)?;
    write_json(&out.join("timings.json"), &timings)?;
    log::info!("mean AP {:.3} over {} frames", report.mean_ap, report.n_frames);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateRow {
    pub query_form: String,
    pub cross_attention: bool,
    pub history_frames: usize,
    pub modality_probs: [f64; 3],
    pub mean_ap: f64,
    pub final_loss: f64,
    pub steps: u64,
}

/// `ablate`: train+eval each cell of the factor grid.
pub fn run_ablate(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    ensure_dir(out)?;
    let mut rows = Vec::new();
    for form in &cfg.ablate.query_forms {
        for &cross in &cfg.ablate.cross_attention {
            for &hist in &cfg.ablate.history_frames {
                for &probs in &cfg.ablate.modality_probs {
                    let mut sub = cfg.clone();
                    sub.model.image_query_form = form.clone();
                    sub.model.use_cross_attention = cross;
                    sub.model.history_frames = hist.max(1);
                    sub.training.use_history = hist > 0;
                    sub.eval.use_history = hist > 0;
                    sub.training.modality_probs = probs;
                    sub.training.steps = cfg.ablate.steps;
                    let dataset = build_train_dataset(&sub)?;
                    let outcome = train(&sub, &dataset)?;
                    let eval_set = build_eval_dataset(&sub)?;
                    let (report, _) = evaluate(&sub, &outcome.model, &eval_set)?;
                    log::info!(
                        "ablate form={form} cross={cross} hist={hist}: mean AP {:.3}",
                        report.mean_ap
                    );
                    rows.push(AblateRow {
                        query_form: form.clone(),
                        cross_attention: cross,
                        history_frames: hist,
                        modality_probs: probs,
                        mean_ap: report.mean_ap,
                        final_loss: outcome.losses.last().map_or(f64::NAN, |(_, b)| b.l_total),
                        steps: cfg.ablate.steps,
                    });
                }
            }
        }
    }
    write_json(
        &out.join("ablate.json"),
        &serde_json::json!({
            "cfg_hash": cfg.hash(),
            "seed": cfg.seed,
            "rows": rows,
        }),
    )?;
    let mut csv = String::new();
    csv.push_str(&format!("# cfg_hash={} seed={}\n", cfg.hash(), cfg.seed));
    csv.push_str("query_form,cross_attention,history_frames,mean_ap,final_loss\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            r.query_form, r.cross_attention, r.history_frames, r.mean_ap, r.final_loss
        ));
    }
    std::fs::write(out.join("ablate.csv"), csv)?;
    Ok(())
}

/// `bench-sparsity`: sparsity.json.
pub fn run_bench_sparsity(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    ensure_dir(out)?;
    let dataset = build_train_dataset(cfg)?;
    let frames: Vec<SceneFrame> = dataset.sequences.into_iter().flatten().collect();
    let report = bench_sparsity(
        &frames,
        cfg.sparsity.pillar_cell,
        cfg.scene.extent,
        cfg.sparsity.dense_cell,
        cfg.sparsity.dense_extent,
    );
    write_json(
        &out.join("sparsity.json"),
        &serde_json::json!({
            "cfg_hash": cfg.hash(),
            "seed": cfg.seed,
            "report": report,
        }),
    )?;
    log::info!(
        "mean pillars {:.0} vs dense {} (ratio {:.4})",
        report.mean_pillars,
        report.dense_grid_count,
        report.ratio
    );
    Ok(())
}

/// `report`: deterministic SVG plots plus a Markdown summary built from
/// whatever artifacts exist in the directory; missing inputs are listed and
/// skipped.
pub fn run_report(dir: &Path) -> anyhow::Result<()> {
    ensure_dir(dir)?;
    let mut summary = String::new();
    summary.push_str("# Experiment summary\n\n");
    let mut missing: Vec<&str> = Vec::new();

    // loss curve
    let loss_path = dir.join("loss.csv");
    if loss_path.exists() {
        let text = std::fs::read_to_string(&loss_path)?;
        let mut total = Vec::new();
        let mut aux = Vec::new();
        for line in text.lines().skip(2) {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() >= 5 {
                if let (Ok(s), Ok(t), Ok(a)) =
                    (parts[0].parse::<f64>(), parts[1].parse::<f64>(), parts[4].parse::<f64>())
                {
                    total.push((s, t));
                    aux.push((s, a));
                }
            }
        }
        let svg = plot::line_plot(
            "training loss",
            "step",
            "loss",
            &[("l_total", &total[..]), ("l_aux", &aux[..])],
        );
        std::fs::write(dir.join("loss.svg"), svg)?;
        if let Some((_, last)) = total.last() {
            summary.push_str(&format!("- final training loss: {last:.4}\n"));
        }
    } else {
        missing.push("loss.csv");
    }

    // eval report: AP bars + MSE curve
    let report_path = dir.join("report.json");
    if report_path.exists() {
        let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&report_path)?)?;
        summary.push_str(&format!(
            "- mean AP: {:.4} over {} frames ({} predictions)\n",
            report.mean_ap, report.n_frames, report.n_predictions
        ));
        summary.push_str(&format!(
            "- queries/frame: {:.1} point-cloud + {:.1} image; pillars/frame {:.0} (max {})\n",
            report.mean_pc_queries, report.mean_img_queries, report.mean_pillars, report.max_pillars
        ));
        let bars: Vec<(String, f64)> = report
            .ap
            .iter()
            .map(|e| (format!("c{}@{}", e.class, e.threshold), e.ap))
            .collect();
        std::fs::write(dir.join("ap.svg"), plot::bar_chart("center-distance AP", "AP", &bars))?;
        if !report.mse_curve.is_empty() {
            let pts: Vec<(f64, f64)> = report
                .mse_curve
                .iter()
                .enumerate()
                .map(|(i, &v)| (i as f64, v))
                .collect();
            std::fs::write(
                dir.join("mse_layers.svg"),
                plot::line_plot("image-query MSE per decoder layer", "layer", "MSE (m^2)", &[("mse", &pts[..])]),
            )?;
            summary.push_str(&format!(
                "- image-query MSE: {:.3} (initial) -> {:.3} (final layer)\n",
                report.mse_curve[0],
                report.mse_curve.last().unwrap()
            ));
        }
        summary.push_str("\n| class | threshold (m) | AP |\n|---|---|---|\n");
        for e in &report.ap {
            summary.push_str(&format!("| {} | {} | {:.4} |\n", e.class, e.threshold, e.ap));
        }
        summary.push('\n');
    } else {
        missing.push("report.json");
    }

    // ablation table
    let ablate_path = dir.join("ablate.json");
    if ablate_path.exists() {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&ablate_path)?)?;
        if let Some(rows) = v.get("rows").and_then(|r| r.as_array()) {
            summary.push_str("## Ablation grid\n\n");
            summary.push_str("| query form | cross-attn | history | mean AP | final loss |\n|---|---|---|---|---|\n");
            for r in rows {
                let row: AblateRow = serde_json::from_value(r.clone())?;
                summary.push_str(&format!(
                    "| {} | {} | {} | {:.4} | {:.4} |\n",
                    row.query_form, row.cross_attention, row.history_frames, row.mean_ap, row.final_loss
                ));
            }
            summary.push('\n');
        }
    } else {
        missing.push("ablate.json");
    }

    // sparsity numbers
    let sparsity_path = dir.join("sparsity.json");
    if sparsity_path.exists() {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&sparsity_path)?)?;
        if let Some(rep) = v.get("report") {
            let rep: SparsityReport = serde_json::from_value(rep.clone())?;
            summary.push_str(&format!(
                "## Sparsity\n\n- mean pillars/frame: {:.0} (cell {} m)\n- dense grid: {} cells (cell {} m over +-{} m)\n- ratio: {:.4}\n\n",
                rep.mean_pillars, rep.pillar_cell, rep.dense_grid_count, rep.dense_cell, rep.dense_extent, rep.ratio
            ));
        }
    } else {
        missing.push("sparsity.json");
    }

    if !missing.is_empty() {
        summary.push_str("## Skipped\n\n");
        for m in &missing {
            summary.push_str(&format!("- missing input: {m}\n"));
        }
    }
    std::fs::write(dir.join("summary.md"), summary)?;
    Ok(())
}

/// Resolve the output directory argument.
pub fn out_dir(arg: Option<PathBuf>) -> PathBuf {
    arg.unwrap_or_else(|| PathBuf::from("out"))
}
