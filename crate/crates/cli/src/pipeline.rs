//! Stage implementations: simulate, complexity, gen, train, finetune,
//! analyze, report. Every stage writes its artifacts plus a manifest and
//! is a no-op when config and input hashes are unchanged.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ecalab_core::analysis::{
    attention_last_k, cka_matrix, class_summary, compare_horizons, correlation_table, mds_embed,
    CkaMode, ExperimentResult,
};
use ecalab_core::complexity::{sweep, ComplexityReport};
use ecalab_core::datagen::{
    gen_pretrain, gen_reasoning_easy, gen_reasoning_hard, ingest_chess, load_dataset_file,
    save_dataset_file, Dataset, CHESS_SEQ_LEN,
};
use ecalab_core::eca::{evolve_seeded, save_grid_file, RuleId, State};
use ecalab_core::manifest::{hash_file, hash_json, RunManifest};
use ecalab_core::model::{
    attention_probe, efficiency, evaluate, finetune_frozen, load_checkpoint_file,
    save_checkpoint_file, train_pretrain, AccuracyKind, HeadSpec, Model, ModelCheckpoint,
    Provenance, TaskData,
};
use ecalab_core::rng::mix;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::CliError;

// ---------------------------------------------------------------------------
// artifact layout and manifest caching
// ---------------------------------------------------------------------------

fn grid_path(out: &Path, rule: RuleId) -> PathBuf {
    out.join(format!("grids/rule{:03}.ecg", rule.0))
}

fn pretrain_path(out: &Path, rule: RuleId, horizon: usize) -> PathBuf {
    out.join(format!("data/pretrain_rule{:03}_h{horizon}.eds", rule.0))
}

fn task_path(out: &Path, name: &str) -> PathBuf {
    out.join(format!("data/{name}.eds"))
}

fn model_path(out: &Path, rule: RuleId, horizon: usize, seed: u64) -> PathBuf {
    out.join(format!("models/rule{:03}_h{horizon}_s{seed}.eck", rule.0))
}

fn history_path(out: &Path, rule: RuleId, horizon: usize, seed: u64) -> PathBuf {
    out.join(format!(
        "models/rule{:03}_h{horizon}_s{seed}_history.json",
        rule.0
    ))
}

fn result_path(out: &Path, rule: RuleId, horizon: usize) -> PathBuf {
    out.join(format!("results/rule{:03}_h{horizon}.json", rule.0))
}

fn manifest_path(out: &Path, stage: &str) -> PathBuf {
    out.join(format!("manifests/{stage}.json"))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// True when the stage's manifest matches the current config hash and every
/// recorded output still exists with the recorded content hash.
fn stage_is_cached(out: &Path, stage: &str, config_hash: &str) -> bool {
    let Ok(m) = RunManifest::read(&manifest_path(out, stage)) else {
        return false;
    };
    if m.status != "complete" || m.config_hash != config_hash {
        return false;
    }
    m.outputs.iter().all(|(rel, hash)| {
        hash_file(&out.join(rel)).map(|h| h == *hash).unwrap_or(false)
    })
}

struct StageRun {
    stage: String,
    manifest: RunManifest,
    started: Instant,
}

impl StageRun {
    fn begin(stage: &str, config_hash: String) -> StageRun {
        StageRun {
            stage: stage.to_string(),
            manifest: RunManifest::new(stage, config_hash),
            started: Instant::now(),
        }
    }

    fn record_input(&mut self, out: &Path, path: &Path) -> Result<(), CliError> {
        let rel = path.strip_prefix(out).unwrap_or(path).to_string_lossy();
        self.manifest
            .inputs
            .insert(rel.into_owned(), hash_file(path)?);
        Ok(())
    }

    fn record_output(&mut self, out: &Path, path: &Path) -> Result<(), CliError> {
        let rel = path.strip_prefix(out).unwrap_or(path).to_string_lossy();
        self.manifest
            .outputs
            .insert(rel.into_owned(), hash_file(path)?);
        Ok(())
    }

    fn finish(mut self, out: &Path) -> Result<(), CliError> {
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        self.manifest.status = "complete".into();
        let path = manifest_path(out, &self.stage);
        ensure_parent(&path)?;
        self.manifest.write_atomic(&path)?;
        log::info!(
            "{}: complete in {:.1}s ({} outputs)",
            self.stage,
            self.manifest.wall_clock_secs,
            self.manifest.outputs.len()
        );
        Ok(())
    }
}

fn require(path: &Path, producer: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(format!(
            "{} not found; run `ecalab {producer}` first",
            path.display()
        )))
    }
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    ensure_parent(path)?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(value)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Numeric(format!("corrupt artifact {}: {e}", path.display()))
    })
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let rules = cfg.rules.resolve()?;
    let config_hash = hash_json(&(&rules, &cfg.simulate));
    if stage_is_cached(out, "simulate", &config_hash) {
        log::info!("simulate: cached, skipping");
        return Ok(());
    }
    let mut run = StageRun::begin("simulate", config_hash);
    for &rule in &rules {
        let seed = mix(cfg.simulate.seed, rule.0 as u64);
        let init = State::random(cfg.simulate.width, cfg.simulate.density, seed);
        let grid = evolve_seeded(rule, &init, cfg.simulate.steps, seed)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        let path = grid_path(out, rule);
        ensure_parent(&path)?;
        save_grid_file(&grid, &path).map_err(|e| CliError::Numeric(e.to_string()))?;
        run.record_output(out, &path)?;
    }
    run.finish(out)
}

// ---------------------------------------------------------------------------
// complexity
// ---------------------------------------------------------------------------

pub fn cmd_complexity(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let rules = cfg.rules.resolve()?;
    let config_hash = hash_json(&(&rules, &cfg.complexity));
    if stage_is_cached(out, "complexity", &config_hash) {
        log::info!("complexity: cached, skipping");
        return Ok(());
    }
    let mut run = StageRun::begin("complexity", config_hash);
    let reports =
        sweep(&rules, &cfg.complexity).map_err(|e| CliError::Numeric(e.to_string()))?;
    let path = out.join("complexity.json");
    write_json_atomic(&path, &reports)?;
    run.record_output(out, &path)?;
    run.finish(out)
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let rules = cfg.rules.resolve()?;
    let config_hash = hash_json(&(
        &rules,
        &cfg.horizons,
        &cfg.pretrain,
        &cfg.tasks,
        &cfg.chess,
        &cfg.simulate.seed,
    ));
    if stage_is_cached(out, "gen", &config_hash) {
        log::info!("gen: cached, skipping");
        return Ok(());
    }
    let mut run = StageRun::begin("gen", config_hash);

    for &rule in &rules {
        for &h in &cfg.horizons {
            let seed = mix(cfg.simulate.seed, ((rule.0 as u64) << 8) | h as u64);
            let ds = gen_pretrain(rule, cfg.pretrain.samples, h, seed, &cfg.pretrain.window)
                .map_err(|e| CliError::Numeric(e.to_string()))?;
            let path = pretrain_path(out, rule, h);
            ensure_parent(&path)?;
            save_dataset_file(&Dataset::Pretrain(ds), &path)
                .map_err(|e| CliError::Numeric(e.to_string()))?;
            run.record_output(out, &path)?;
        }
    }

    let easy = gen_reasoning_easy(
        cfg.tasks.easy.sequences,
        cfg.tasks.easy.seq_len,
        cfg.tasks.easy.seed,
        &cfg.tasks.easy_grid.clone().unwrap_or_default(),
    )
    .map_err(|e| CliError::Numeric(e.to_string()))?;
    let easy_path = task_path(out, "easy");
    ensure_parent(&easy_path)?;
    save_dataset_file(&Dataset::Reasoning(easy), &easy_path)
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    run.record_output(out, &easy_path)?;

    let hard = gen_reasoning_hard(
        cfg.tasks.hard.sequences,
        cfg.tasks.hard.seq_len,
        cfg.tasks.hard.seed,
        &cfg.tasks.hard_grid.clone().unwrap_or_default(),
    )
    .map_err(|e| CliError::Numeric(e.to_string()))?;
    let hard_path = task_path(out, "hard");
    save_dataset_file(&Dataset::Reasoning(hard), &hard_path)
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    run.record_output(out, &hard_path)?;

    if cfg.chess.enabled() {
        let paths: Vec<PathBuf> = cfg.chess.pgn.iter().map(PathBuf::from).collect();
        for p in &paths {
            if !p.exists() {
                return Err(CliError::Missing(format!(
                    "PGN file {} not found",
                    p.display()
                )));
            }
            run.record_input(out, p)?;
        }
        let (ds, _games) = ingest_chess(&paths, cfg.chess.min_rating, cfg.chess.split())
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        let chess_path = task_path(out, "chess");
        save_dataset_file(&Dataset::Chess(ds), &chess_path)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        run.record_output(out, &chess_path)?;
    }

    run.finish(out)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn load_pretrain_data(path: &Path) -> Result<TaskData, CliError> {
    match load_dataset_file(path).map_err(|e| CliError::Numeric(e.to_string()))? {
        Dataset::Pretrain(ds) => Ok(TaskData::from_pretrain(&ds)),
        _ => Err(CliError::Numeric(format!(
            "{} is not a pretraining dataset",
            path.display()
        ))),
    }
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let rules = cfg.rules.resolve()?;
    let mut data_hashes = BTreeMap::new();
    for &rule in &rules {
        for &h in &cfg.horizons {
            let path = pretrain_path(out, rule, h);
            require(&path, "gen")?;
            data_hashes.insert(path.to_string_lossy().into_owned(), hash_file(&path)?);
        }
    }
    let config_hash = hash_json(&(
        &rules,
        &cfg.horizons,
        &cfg.seeds,
        &cfg.model,
        &cfg.train,
        cfg.context_len(),
        &data_hashes,
    ));
    if stage_is_cached(out, "train", &config_hash) {
        log::info!("train: cached, skipping");
        return Ok(());
    }
    let mut run = StageRun::begin("train", config_hash);
    let train_cfg_hash = hash_json(&cfg.train);

    for &rule in &rules {
        for &h in &cfg.horizons {
            let data_path = pretrain_path(out, rule, h);
            run.record_input(out, &data_path)?;
            let data = load_pretrain_data(&data_path)?;
            for &seed in &cfg.seeds {
                let model_seed = mix(seed, ((rule.0 as u64) << 8) | h as u64);
                let mc = cfg.model.to_model_config(
                    cfg.context_len(),
                    cfg.pretrain.window.x_len,
                    model_seed,
                );
                let mut model = Model::new(
                    mc,
                    HeadSpec::Binary {
                        width: cfg.pretrain.window.x_len,
                    },
                )
                .map_err(|e| CliError::Config(e.to_string()))?;
                let tc = cfg.train.to_train_config(model_seed);
                let history = train_pretrain(&mut model, &data, &tc)
                    .map_err(|e| CliError::Numeric(e.to_string()))?;
                log::info!(
                    "train rule {} h{} seed {}: {} epochs, final val loss {:.4}",
                    rule.0,
                    h,
                    seed,
                    history.epochs(),
                    history.val_loss.last().copied().unwrap_or(f64::NAN)
                );
                let ckpt = ModelCheckpoint::from_model(
                    &model,
                    Provenance {
                        stage: "pretrain".into(),
                        data_hash: hash_file(&data_path)?,
                        train_config_hash: train_cfg_hash.clone(),
                        parent_backbone: None,
                    },
                );
                let mpath = model_path(out, rule, h, seed);
                ensure_parent(&mpath)?;
                save_checkpoint_file(&ckpt, &mpath)
                    .map_err(|e| CliError::Numeric(e.to_string()))?;
                run.record_output(out, &mpath)?;
                let hpath = history_path(out, rule, h, seed);
                write_json_atomic(&hpath, &history)?;
                run.record_output(out, &hpath)?;
            }
        }
    }
    run.finish(out)
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

/// One rule x horizon outcome, averaged over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuleOutcome {
    pub rule: u8,
    pub horizon: usize,
    pub seeds: Vec<u64>,
    pub efficiency_easy: f64,
    pub efficiency_hard: f64,
    /// NaN-free: 0 when the chess stage is disabled
    pub chess_accuracy: f64,
    pub attention_per_offset: Vec<f64>,
    pub avg_attention: f64,
    /// per-seed efficiencies, for seed-group analyses
    pub per_seed_easy: Vec<f64>,
    pub per_seed_hard: Vec<f64>,
}

fn load_reasoning_data(path: &Path) -> Result<(TaskData, usize), CliError> {
    match load_dataset_file(path).map_err(|e| CliError::Numeric(e.to_string()))? {
        Dataset::Reasoning(ds) => {
            let bits = ds.frame_bits();
            Ok((TaskData::from_reasoning(&ds), bits))
        }
        _ => Err(CliError::Numeric(format!(
            "{} is not a reasoning dataset",
            path.display()
        ))),
    }
}

pub fn cmd_finetune(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let rules = cfg.rules.resolve()?;
    let easy_path = task_path(out, "easy");
    let hard_path = task_path(out, "hard");
    require(&easy_path, "gen")?;
    require(&hard_path, "gen")?;
    let mut model_hashes = BTreeMap::new();
    for &rule in &rules {
        for &h in &cfg.horizons {
            for &seed in &cfg.seeds {
                let path = model_path(out, rule, h, seed);
                require(&path, "train")?;
                model_hashes.insert(path.to_string_lossy().into_owned(), hash_file(&path)?);
            }
        }
    }
    let config_hash = hash_json(&(
        &rules,
        &cfg.horizons,
        &cfg.seeds,
        &cfg.finetune,
        &cfg.analysis.attention_k,
        &cfg.analysis.probe_samples,
        &model_hashes,
        hash_file(&easy_path)?,
        hash_file(&hard_path)?,
    ));
    if stage_is_cached(out, "finetune", &config_hash) {
        log::info!("finetune: cached, skipping");
        return Ok(());
    }
    let mut run = StageRun::begin("finetune", config_hash);

    let (easy_data, easy_bits) = load_reasoning_data(&easy_path)?;
    let (hard_data, hard_bits) = load_reasoning_data(&hard_path)?;
    run.record_input(out, &easy_path)?;
    run.record_input(out, &hard_path)?;

    let chess_path = task_path(out, "chess");
    let chess = if cfg.chess.enabled() {
        require(&chess_path, "gen")?;
        run.record_input(out, &chess_path)?;
        match load_dataset_file(&chess_path).map_err(|e| CliError::Numeric(e.to_string()))? {
            Dataset::Chess(ds) => Some(ds),
            _ => {
                return Err(CliError::Numeric(format!(
                    "{} is not a chess dataset",
                    chess_path.display()
                )))
            }
        }
    } else {
        None
    };

    for &rule in &rules {
        for &h in &cfg.horizons {
            let mut outcome = RuleOutcome {
                rule: rule.0,
                horizon: h,
                seeds: cfg.seeds.clone(),
                efficiency_easy: 0.0,
                efficiency_hard: 0.0,
                chess_accuracy: 0.0,
                attention_per_offset: vec![0.0; cfg.analysis.attention_k],
                avg_attention: 0.0,
                per_seed_easy: Vec::new(),
                per_seed_hard: Vec::new(),
            };
            let probe_path = pretrain_path(out, rule, h);
            require(&probe_path, "gen")?;
            let probe_data = load_pretrain_data(&probe_path)?;
            let probe_ix: Vec<usize> =
                (0..probe_data.n_samples().min(cfg.analysis.probe_samples)).collect();

            for &seed in &cfg.seeds {
                let mpath = model_path(out, rule, h, seed);
                run.record_input(out, &mpath)?;
                let ckpt = load_checkpoint_file(&mpath)
                    .map_err(|e| CliError::Numeric(e.to_string()))?;
                let base = ckpt.into_model();

                // attention summary on the pretraining head
                let trace = attention_probe(&base, &probe_data, &probe_ix)
                    .map_err(|e| CliError::Numeric(e.to_string()))?;
                let summary = attention_last_k(&trace, cfg.analysis.attention_k)
                    .map_err(|e| CliError::Numeric(e.to_string()))?;
                for (acc, v) in outcome
                    .attention_per_offset
                    .iter_mut()
                    .zip(&summary.per_offset)
                {
                    *acc += v / cfg.seeds.len() as f64;
                }
                outcome.avg_attention += summary.mean / cfg.seeds.len() as f64;

                // easy task
                let ft = cfg.finetune.to_train_config(&cfg.train, mix(seed, 0xea5))?;
                let mut m = base.clone();
                let hist =
                    finetune_frozen(&mut m, HeadSpec::Binary { width: easy_bits }, &easy_data, &ft)
                        .map_err(|e| CliError::Numeric(e.to_string()))?;
                let eff = efficiency(&hist, cfg.finetune.threshold);
                outcome.per_seed_easy.push(eff);
                outcome.efficiency_easy += eff / cfg.seeds.len() as f64;

                // hard task
                let ft = cfg.finetune.to_train_config(&cfg.train, mix(seed, 0xa4d))?;
                let mut m = base.clone();
                let hist =
                    finetune_frozen(&mut m, HeadSpec::Binary { width: hard_bits }, &hard_data, &ft)
                        .map_err(|e| CliError::Numeric(e.to_string()))?;
                let eff = efficiency(&hist, cfg.finetune.threshold);
                outcome.per_seed_hard.push(eff);
                outcome.efficiency_hard += eff / cfg.seeds.len() as f64;

                // chess task
                if let Some(ds) = &chess {
                    let vocab = ds.vocab.len();
                    let train = TaskData::from_chess(&ds.train, CHESS_SEQ_LEN, vocab);
                    let test = TaskData::from_chess(&ds.test, CHESS_SEQ_LEN, vocab);
                    let mut ft = cfg.finetune.to_train_config(&cfg.train, mix(seed, 0xc4e))?;
                    ft.stop_at_accuracy = None;
                    ft.accuracy_kind = AccuracyKind::Token;
                    let mut m = base.clone();
                    finetune_frozen(&mut m, HeadSpec::Chess { vocab_size: vocab }, &train, &ft)
                        .map_err(|e| CliError::Numeric(e.to_string()))?;
                    let metrics = evaluate(&m, &test, None, cfg.finetune.batch_size)
                        .map_err(|e| CliError::Numeric(e.to_string()))?;
                    outcome.chess_accuracy += metrics.per_cell / cfg.seeds.len() as f64;
                }
            }
            log::info!(
                "finetune rule {} h{}: easy {:.3}, hard {:.3}, chess {:.3}",
                rule.0,
                h,
                outcome.efficiency_easy,
                outcome.efficiency_hard,
                outcome.chess_accuracy
            );
            let rpath = result_path(out, rule, h);
            write_json_atomic(&rpath, &outcome)?;
            run.record_output(out, &rpath)?;
        }
    }
    run.finish(out)
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<(), CliError> {
    ensure_parent(path)?;
    let tmp = path.with_extension("csv.tmp");
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn gather_results(
    cfg: &ExperimentConfig,
    out: &Path,
    horizon: usize,
) -> Result<Vec<ExperimentResult>, CliError> {
    let rules = cfg.rules.resolve()?;
    let complexity_path = out.join("complexity.json");
    require(&complexity_path, "complexity")?;
    let reports: Vec<ComplexityReport> = read_json(&complexity_path)?;
    let mut results = Vec::new();
    for &rule in &rules {
        let rpath = result_path(out, rule, horizon);
        require(&rpath, "finetune")?;
        let outcome: RuleOutcome = read_json(&rpath)?;
        let complexity = reports
            .iter()
            .find(|r| r.rule == rule)
            .cloned()
            .ok_or_else(|| {
                CliError::Missing(format!(
                    "complexity.json has no entry for rule {}; run `ecalab complexity`",
                    rule.0
                ))
            })?;
        results.push(ExperimentResult {
            rule: rule.0,
            complexity,
            efficiency_easy: outcome.efficiency_easy,
            efficiency_hard: outcome.efficiency_hard,
            chess_accuracy: outcome.chess_accuracy,
            avg_attention_last10: outcome.avg_attention,
            seeds: outcome.seeds,
        });
    }
    Ok(results)
}

pub fn cmd_analyze(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let rules = cfg.rules.resolve()?;
    let h0 = cfg.horizons[0];
    let mut input_hashes = BTreeMap::new();
    let complexity_path = out.join("complexity.json");
    require(&complexity_path, "complexity")?;
    input_hashes.insert("complexity.json".to_string(), hash_file(&complexity_path)?);
    for &rule in &rules {
        for &h in &cfg.horizons {
            let p = result_path(out, rule, h);
            require(&p, "finetune")?;
            input_hashes.insert(p.to_string_lossy().into_owned(), hash_file(&p)?);
        }
    }
    let config_hash = hash_json(&(&rules, &cfg.horizons, &cfg.analysis, &input_hashes));
    if stage_is_cached(out, "analyze", &config_hash) {
        log::info!("analyze: cached, skipping");
        return Ok(());
    }
    let mut run = StageRun::begin("analyze", config_hash);
    run.record_input(out, &complexity_path)?;

    let results = gather_results(cfg, out, h0)?;

    // results.csv: one row per rule
    let rows: Vec<String> = results
        .iter()
        .map(|r| {
            format!(
                "{},{:?},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                r.rule,
                r.complexity.wolfram_class,
                r.complexity.lempel_ziv,
                r.complexity.compression,
                r.complexity.lyapunov,
                r.complexity.krylov,
                r.efficiency_easy,
                r.efficiency_hard,
                r.chess_accuracy,
                r.avg_attention_last10,
                r.seeds.len()
            )
        })
        .collect();
    let results_csv = out.join("analysis/results.csv");
    write_csv(
        &results_csv,
        "rule,class,lempel_ziv,compression,lyapunov,krylov,efficiency_easy,efficiency_hard,chess_accuracy,avg_attention_last10,n_seeds",
        &rows,
    )?;
    run.record_output(out, &results_csv)?;

    // correlations.json
    let correlations = correlation_table(&results);
    let corr_path = out.join("analysis/correlations.json");
    write_json_atomic(&corr_path, &correlations)?;
    run.record_output(out, &corr_path)?;

    // attention.csv: per-offset values per rule
    let mut rows = Vec::new();
    for &rule in &rules {
        let outcome: RuleOutcome = read_json(&result_path(out, rule, h0))?;
        for (i, v) in outcome.attention_per_offset.iter().enumerate() {
            rows.push(format!("{},{},{v:.6}", rule.0, i + 1));
        }
    }
    let attention_csv = out.join("analysis/attention.csv");
    write_csv(&attention_csv, "rule,offset,attention", &rows)?;
    run.record_output(out, &attention_csv)?;

    // class_summary.csv over the headline metrics
    let rule_ids: Vec<RuleId> = results.iter().map(|r| RuleId(r.rule)).collect();
    let mut rows = Vec::new();
    for (metric, values) in [
        (
            "efficiency_easy",
            results.iter().map(|r| r.efficiency_easy).collect::<Vec<_>>(),
        ),
        (
            "efficiency_hard",
            results.iter().map(|r| r.efficiency_hard).collect(),
        ),
        (
            "chess_accuracy",
            results.iter().map(|r| r.chess_accuracy).collect(),
        ),
        (
            "avg_attention_last10",
            results.iter().map(|r| r.avg_attention_last10).collect(),
        ),
    ] {
        for stat in class_summary(&rule_ids, &values) {
            rows.push(format!(
                "{metric},{:?},{},{:.6},{:.6}",
                stat.class, stat.n, stat.mean, stat.stderr
            ));
        }
    }
    let class_csv = out.join("analysis/class_summary.csv");
    write_csv(&class_csv, "metric,class,n,mean,stderr", &rows)?;
    run.record_output(out, &class_csv)?;

    // pairwise CKA over the first-seed pretrained checkpoints, shared probe
    let mode = match cfg.analysis.cka_mode.as_str() {
        "weight" => CkaMode::Weight,
        _ => CkaMode::Activation,
    };
    let probe_path = pretrain_path(out, rules[0], h0);
    require(&probe_path, "gen")?;
    run.record_input(out, &probe_path)?;
    let probe = load_pretrain_data(&probe_path)?;
    let seed0 = cfg.seeds[0];
    let mut models = Vec::new();
    for &rule in &rules {
        let mpath = model_path(out, rule, h0, seed0);
        require(&mpath, "train")?;
        run.record_input(out, &mpath)?;
        let ckpt =
            load_checkpoint_file(&mpath).map_err(|e| CliError::Numeric(e.to_string()))?;
        models.push((format!("rule{:03}", rule.0), ckpt.into_model()));
    }
    let matrix =
        cka_matrix(&models, mode, &probe).map_err(|e| CliError::Numeric(e.to_string()))?;
    let mut rows = Vec::new();
    for (i, label) in matrix.labels.iter().enumerate() {
        let vals: Vec<String> = matrix.values[i].iter().map(|v| format!("{v:.6}")).collect();
        rows.push(format!("{label},{}", vals.join(",")));
    }
    let cka_csv = out.join("analysis/cka.csv");
    write_csv(
        &cka_csv,
        &format!("model,{}", matrix.labels.join(",")),
        &rows,
    )?;
    run.record_output(out, &cka_csv)?;

    // 2D embedding of the similarity matrix
    let (coords, dims) = mds_embed(&matrix).map_err(|e| CliError::Numeric(e.to_string()))?;
    let mut rows = Vec::new();
    for (i, label) in matrix.labels.iter().enumerate() {
        let y = if dims > 1 { coords[[i, 1]] } else { 0.0 };
        rows.push(format!("{label},{:.6},{y:.6}", coords[[i, 0]]));
    }
    let mds_csv = out.join("analysis/mds.csv");
    write_csv(&mds_csv, "model,x,y", &rows)?;
    run.record_output(out, &mds_csv)?;

    // horizon comparison when both horizons were trained
    if cfg.horizons.len() == 2 {
        let short = gather_results(cfg, out, cfg.horizons[0])?;
        let long = gather_results(cfg, out, cfg.horizons[1])?;
        let pairs =
            compare_horizons(&short, &long).map_err(|e| CliError::Numeric(e.to_string()))?;
        let rows: Vec<String> = pairs
            .iter()
            .map(|p| {
                format!(
                    "{},{:.6},{:.6},{:.6},{:.6}",
                    p.rule, p.short, p.long, p.delta, p.lempel_ziv
                )
            })
            .collect();
        let horizons_csv = out.join("analysis/horizons.csv");
        write_csv(
            &horizons_csv,
            "rule,efficiency_short,efficiency_long,delta,lempel_ziv",
            &rows,
        )?;
        run.record_output(out, &horizons_csv)?;
    }

    run.finish(out)
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

pub fn cmd_report(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let results_csv = out.join("analysis/results.csv");
    let class_csv = out.join("analysis/class_summary.csv");
    let corr_path = out.join("analysis/correlations.json");
    for p in [&results_csv, &class_csv, &corr_path] {
        require(p, "analyze")?;
    }
    let mut input_hashes = BTreeMap::new();
    for p in [&results_csv, &class_csv, &corr_path] {
        input_hashes.insert(p.to_string_lossy().into_owned(), hash_file(p)?);
    }
    let config_hash = hash_json(&input_hashes);
    if stage_is_cached(out, "report", &config_hash) {
        log::info!("report: cached, skipping");
        return Ok(());
    }
    let mut run = StageRun::begin("report", config_hash);
    for p in [&results_csv, &class_csv, &corr_path] {
        run.record_input(out, p)?;
    }

    let mut md = String::new();
    md.push_str("# Experiment summary\n\n");
    md.push_str("## Per-rule results\n\n");
    push_csv_as_table(&mut md, &std::fs::read_to_string(&results_csv)?);
    md.push_str("\n## Per-class summary\n\n");
    push_csv_as_table(&mut md, &std::fs::read_to_string(&class_csv)?);
    md.push_str("\n## Correlations (complexity measure vs downstream metric)\n\n");
    let correlations: Vec<ecalab_core::analysis::CorrelationEntry> = read_json(&corr_path)?;
    md.push_str("| measure | metric | r | p | n | |\n|---|---|---|---|---|---|\n");
    for c in &correlations {
        let star = if c.significant { "*" } else { "" };
        md.push_str(&format!(
            "| {} | {} | {:.3} | {:.4} | {} | {star} |\n",
            c.measure, c.metric, c.r, c.p, c.n
        ));
    }
    md.push_str("\n`*` marks p < 0.05 (two-sided).\n");
    if cfg.horizons.len() == 2 {
        md.push_str("\nSee analysis/horizons.csv for the short- vs long-horizon pairing.\n");
    }

    let report_path = out.join("report/summary.md");
    ensure_parent(&report_path)?;
    let tmp = report_path.with_extension("md.tmp");
    std::fs::write(&tmp, &md)?;
    std::fs::rename(&tmp, &report_path)?;
    run.record_output(out, &report_path)?;
    run.finish(out)
}

fn push_csv_as_table(md: &mut String, csv: &str) {
    let mut lines = csv.lines();
    if let Some(header) = lines.next() {
        let cols = header.split(',').count();
        md.push_str(&format!("| {} |\n", header.replace(',', " | ")));
        md.push_str(&format!("|{}\n", "---|".repeat(cols)));
        for line in lines {
            md.push_str(&format!("| {} |\n", line.replace(',', " | ")));
        }
    }
}
