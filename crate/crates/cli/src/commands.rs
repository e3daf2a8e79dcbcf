use std::fs::File;
use std::path::{Path, PathBuf};

use motlm_core::dataio::{generate as synthesize, load_csv, read_csv, LoadOptions, RawDataset, SyntheticSpec};
use motlm_core::distrib::{TaskKind, SCHEMA_VERSION};
use motlm_core::predictor::{class_sign, predict as predict_row};
use motlm_core::specfn::QmcPoints;
use motlm_core::trainer::{bound_report, split_indices, train as fit, FittedModel, TrainConfig, TrainOutcome};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::manifest::{manifest_path, with_suffix, write_text, ManifestBuilder};
use crate::{EvaluateArgs, GenerateArgs, PredictArgs, SplitArg, TrainArgs};

pub fn generate(args: &GenerateArgs) -> CliResult<()> {
    let mut manifest = ManifestBuilder::start("generate");
    let mut spec = SyntheticSpec::new(args.scenario, args.seed);
    if let Some(size) = args.size {
        spec.size = size;
    }
    if let Some(noise) = args.noise {
        spec.noise = noise;
    }
    manifest.config(spec)?;
    manifest.seed("data", args.seed);
    let (raw, truth) = synthesize(&spec)?;

    let mut csv_bytes = Vec::new();
    raw.write_csv(&mut csv_bytes)?;
    write_text(&args.out, std::str::from_utf8(&csv_bytes).map_err(|e| CliError::Runtime(e.to_string()))?)?;
    let truth_path = args.truth.clone().unwrap_or_else(|| with_suffix(&args.out, ".truth.json"));
    write_text(&truth_path, &truth.to_json()?)?;
    manifest.output(&args.out);
    manifest.output(&truth_path);
    manifest.summary(serde_json::json!({ "rows": raw.n_rows(), "centers": truth.centers.len() }))?;
    let m = manifest.finish(&manifest_path(&args.out, args.manifest.as_deref()))?;
    println!(
        "wrote {} rows to {} (ground truth {}, manifest {})",
        raw.n_rows(),
        args.out.display(),
        truth_path.display(),
        m.display()
    );
    Ok(())
}

/// Accepts a bare list of coordinate lists or any document with a `centers` list.
fn read_centers(path: &Path) -> CliResult<Vec<Vec<f64>>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{} is not JSON: {e}", path.display())))?;
    let list = value.get("centers").cloned().unwrap_or(value);
    serde_json::from_value(list)
        .map_err(|e| CliError::usage(format!("{} must hold a list of coordinate lists: {e}", path.display())))
}

fn load(path: &Path, label: &str, task: TaskKind) -> CliResult<RawDataset> {
    if !path.exists() {
        return Err(CliError::usage(format!("data file {} does not exist", path.display())));
    }
    Ok(load_csv(path, label, task)?)
}

fn model_path_for(out: &Path, n: usize, sweep: bool) -> PathBuf {
    if !sweep {
        return out.to_path_buf();
    }
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = out.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    out.with_file_name(format!("{stem}.n{n}{ext}"))
}

fn metric_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Classification => "accuracy",
        TaskKind::Regression => "r2",
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into())
}

fn print_lambda_table(outcome: &TrainOutcome) {
    let m = &outcome.model;
    println!(
        "{:>8} {:>10} {:>8} {:>6} {:>12} {:>12} {:>12} {:>12} {:>12}",
        "lambda'", "lambda", "restarts", "failed", "objective", "validation", "core", "L_S(Q)", "KL"
    );
    for s in &m.lambda_summaries {
        let mark = if s.lambda_prime == m.chosen_lambda_prime { " *" } else { "" };
        println!(
            "{:>8.3} {:>10.2} {:>8} {:>6} {:>12} {:>12} {:>12} {:>12} {:>12}{mark}",
            s.lambda_prime,
            s.lambda,
            s.restarts,
            s.failed_restarts,
            opt(s.best_objective),
            opt(s.validation_metric),
            opt(s.core),
            opt(s.empirical_risk),
            opt(s.kl)
        );
    }
}

/// One line of the per-lambda' sidecar.
#[derive(Serialize)]
struct LambdaRow {
    n: usize,
    lambda_prime: f64,
    lambda: f64,
    restarts: usize,
    failed_restarts: usize,
    best_objective: Option<f64>,
    validation_metric: Option<f64>,
    core: Option<f64>,
    empirical_risk: Option<f64>,
    kl: Option<f64>,
    chosen: bool,
}

#[derive(Serialize)]
struct SweepRow {
    n: usize,
    chosen_lambda_prime: f64,
    validation_metric: f64,
    test_metric: Option<f64>,
    core: f64,
    empirical_risk: f64,
    kl: f64,
    restarts_executed: usize,
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let mut manifest = ManifestBuilder::start("train");
    let task: TaskKind = args.task.into();
    let raw = load(&args.data, &args.label, task)?;
    manifest.input(&args.data)?;
    let centers = match &args.centers_file {
        Some(p) => {
            manifest.input(p)?;
            Some(read_centers(p)?)
        }
        None => None,
    };
    let sweep = args.sweep_n.is_some();
    let counts = args.sweep_n.clone().map(|l| l.0).unwrap_or_else(|| args.n.into_iter().collect());

    let mut configs = Vec::new();
    for &n in &counts {
        let fixed = match &centers {
            Some(c) if c.len() < n => {
                return Err(CliError::usage(format!("{} centers supplied but n = {n}", c.len())));
            }
            Some(c) => Some(c[..n].to_vec()),
            None => None,
        };
        let mut cfg = TrainConfig::new(task, n, fixed);
        if let Some(l) = &args.lambda_primes {
            cfg.lambda_primes = l.0.clone();
        }
        cfg.restarts_per_lambda = args.restarts;
        cfg.master_seed = args.seed;
        cfg.qmc_count = args.qmc_count;
        cfg.metric = args.metric;
        cfg.overlap_rule = args.overlap_rule;
        cfg.sub_gaussian_sigma = args.sigma;
        cfg.delta = args.delta;
        cfg.preprocess.remove_outliers = !args.keep_outliers;
        if let Some(lr) = args.learning_rate {
            cfg.nadam.learning_rate = lr;
        }
        if let Some(s) = args.max_steps {
            cfg.nadam.max_steps = s;
        }
        cfg.validate()?;
        configs.push(cfg);
    }
    manifest.config(&configs)?;
    manifest.seed("master", args.seed);

    let summary_path = args.summary_csv.clone().unwrap_or_else(|| with_suffix(&args.out, ".lambdas.csv"));
    let mut lambda_csv = csv::Writer::from_writer(Vec::new());
    let mut sweep_rows = Vec::new();
    for cfg in &configs {
        log::info!("training n = {} over {} lambda' values", cfg.n, cfg.lambda_primes.len());
        let outcome = fit(&raw, cfg, args.jobs)?;
        let model = &outcome.model;
        let path = model_path_for(&args.out, cfg.n, sweep);
        write_text(&path, &model.to_json()?)?;
        manifest.output(&path);
        if sweep {
            println!("n = {}", cfg.n);
        }
        print_lambda_table(&outcome);
        for s in &model.lambda_summaries {
            lambda_csv.serialize(LambdaRow {
                n: cfg.n,
                lambda_prime: s.lambda_prime,
                lambda: s.lambda,
                restarts: s.restarts,
                failed_restarts: s.failed_restarts,
                best_objective: s.best_objective,
                validation_metric: s.validation_metric,
                core: s.core,
                empirical_risk: s.empirical_risk,
                kl: s.kl,
                chosen: s.lambda_prime == model.chosen_lambda_prime,
            })?;
        }
        let test_metric = if outcome.test.is_empty() { None } else { Some(model.score(&outcome.test.examples())?) };
        println!(
            "chose lambda' = {} ({} {:.6} on validation; core bound {:.6}); {} restarts executed; model written to {}",
            model.chosen_lambda_prime,
            metric_name(task),
            model.validation_metric,
            model.bound.core,
            model.provenance.restarts_executed,
            path.display()
        );
        sweep_rows.push(SweepRow {
            n: cfg.n,
            chosen_lambda_prime: model.chosen_lambda_prime,
            validation_metric: model.validation_metric,
            test_metric,
            core: model.bound.core,
            empirical_risk: model.bound.empirical_risk,
            kl: model.bound.kl,
            restarts_executed: model.provenance.restarts_executed,
        });
    }
    let bytes = lambda_csv.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    write_text(&summary_path, &String::from_utf8_lossy(&bytes))?;
    manifest.output(&summary_path);
    if sweep {
        let sweep_path = args.sweep_csv.clone().unwrap_or_else(|| with_suffix(&args.out, ".sweep.csv"));
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &sweep_rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
        write_text(&sweep_path, &String::from_utf8_lossy(&bytes))?;
        manifest.output(&sweep_path);
        println!("sweep table written to {}", sweep_path.display());
    }
    manifest.summary(&sweep_rows)?;
    manifest.finish(&manifest_path(&args.out, args.manifest.as_deref()))?;
    Ok(())
}

fn read_model(path: &Path) -> CliResult<FittedModel> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    FittedModel::from_json(&text).map_err(|e| CliError::usage(format!("{} is not a usable model: {e}", path.display())))
}

#[derive(Serialize)]
struct RunMetrics {
    model: String,
    data: String,
    rows: usize,
    metric: f64,
    empirical_risk: f64,
    kl: f64,
    lambda: f64,
    core: f64,
    full_bound: Option<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn evaluate(args: &EvaluateArgs) -> CliResult<()> {
    if args.reproductions == 0 {
        return Err(CliError::usage("--reproductions must be at least 1"));
    }
    if args.reproductions > 1 && !args.model.contains("{r}") {
        return Err(CliError::usage("--reproductions > 1 needs a `{r}` placeholder in --model"));
    }
    let mut manifest = ManifestBuilder::start("evaluate");
    manifest.config(serde_json::json!({
        "model": args.model, "data": args.data, "split": args.split,
        "reproductions": args.reproductions, "sigma": args.sigma, "delta": args.delta,
    }))?;
    let mut runs = Vec::new();
    let mut task = None;
    for r in 0..args.reproductions {
        let model_path = PathBuf::from(args.model.replace("{r}", &r.to_string()));
        let data_path = PathBuf::from(args.data.replace("{r}", &r.to_string()));
        let model = read_model(&model_path)?;
        manifest.input(&model_path)?;
        if task.is_some_and(|t| t != model.task()) {
            return Err(CliError::usage("reproductions mix classification and regression models"));
        }
        task = Some(model.task());
        let raw = load(&data_path, &model.pipeline.label_name, model.task())?;
        manifest.input(&data_path)?;
        manifest.seed(&format!("model_{r}"), model.provenance.master_seed);
        let cfg = &model.config;
        let all = model.pipeline.apply(&raw, true)?;
        let data = match args.split {
            SplitArg::All => all,
            part => {
                let idx = split_indices(raw.n_rows(), cfg.split_ratios, cfg.master_seed)?;
                all.subset(match part {
                    SplitArg::Train => &idx.train,
                    SplitArg::Valid => &idx.valid,
                    _ => &idx.test,
                })
            }
        };
        let ex = data.examples();
        if ex.is_empty() {
            return Err(CliError::usage(format!("no labeled rows to evaluate in {}", data_path.display())));
        }
        let qmc = QmcPoints::centered(cfg.qmc_count)?;
        let (sigma, delta) =
            if args.sigma.is_some() { (args.sigma, args.delta) } else { (cfg.sub_gaussian_sigma, cfg.delta) };
        let bound = bound_report(&model.posterior, &ex, model.bound.lambda, &cfg.prior, &qmc, sigma, delta)?;
        runs.push(RunMetrics {
            model: model_path.display().to_string(),
            data: data_path.display().to_string(),
            rows: ex.len(),
            metric: model.score(&ex)?,
            empirical_risk: bound.empirical_risk,
            kl: bound.kl,
            lambda: bound.lambda,
            core: bound.core,
            full_bound: bound.full_bound,
        });
    }
    let task = task.expect("at least one reproduction");
    let column = |f: fn(&RunMetrics) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
    type Field = (&'static str, fn(&RunMetrics) -> f64);
    let fields: [Field; 5] = [
        (metric_name(task), |r| r.metric),
        ("empirical_risk", |r| r.empirical_risk),
        ("kl", |r| r.kl),
        ("lambda", |r| r.lambda),
        ("core", |r| r.core),
    ];
    let mut doc = serde_json::Map::new();
    let mut std_doc = serde_json::Map::new();
    doc.insert("schema_version".into(), SCHEMA_VERSION.into());
    doc.insert("task".into(), serde_json::to_value(task)?);
    doc.insert("split".into(), serde_json::to_value(args.split)?);
    doc.insert("reproductions".into(), runs.len().into());
    for (name, f) in fields {
        let (m, s) = column(f);
        doc.insert(name.into(), m.into());
        std_doc.insert(name.into(), s.into());
    }
    if runs.iter().all(|r| r.full_bound.is_some()) {
        let (m, s) = mean_std(&runs.iter().filter_map(|r| r.full_bound).collect::<Vec<_>>());
        doc.insert("full_bound".into(), m.into());
        std_doc.insert("full_bound".into(), s.into());
    }
    doc.insert("std".into(), std_doc.into());
    doc.insert("runs".into(), serde_json::to_value(&runs)?);
    write_text(&args.out, &serde_json::to_string_pretty(&doc)?)?;
    manifest.output(&args.out);
    let (m, s) = column(|r| r.metric);
    let (c, cs) = column(|r| r.core);
    println!(
        "{} {m:.4} ± {s:.4}, core bound {c:.4} ± {cs:.4} over {} reproduction(s); metrics written to {}",
        metric_name(task),
        runs.len(),
        args.out.display()
    );
    manifest.finish(&manifest_path(&args.out, args.manifest.as_deref()))?;
    Ok(())
}

pub fn predict(args: &PredictArgs) -> CliResult<()> {
    let mut manifest = ManifestBuilder::start("predict");
    let model = read_model(&args.model)?;
    manifest.input(&args.model)?;
    let file =
        File::open(&args.data).map_err(|e| CliError::usage(format!("cannot open {}: {e}", args.data.display())))?;
    let opts = LoadOptions { deduplicate: false, require_label: false };
    let raw = read_csv(file, &model.pipeline.label_name, model.task(), opts)?;
    manifest.input(&args.data)?;
    let rule = args.overlap_rule.unwrap_or(model.config.overlap_rule);
    manifest.config(serde_json::json!({ "overlap_rule": rule.name() }))?;
    let data = model.pipeline.apply(&raw, false)?;

    let labeled = raw.has_labels();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header =
        vec!["row", "prediction", "ambiguous", "abstained", "members", "member_outputs", "external_output"];
    if labeled {
        header.push("label");
    }
    w.write_record(&header)?;
    let (mut ambiguous, mut abstained) = (0usize, 0usize);
    for (i, x) in data.features.iter().enumerate() {
        let p = predict_row(&model.deterministic, x, rule)?;
        ambiguous += p.ambiguous as usize;
        abstained += p.abstained as usize;
        let prediction = if p.abstained {
            String::new()
        } else {
            match (&model.pipeline.label_map, model.task()) {
                (Some(map), TaskKind::Classification) => {
                    if class_sign(p.resolved) > 0.0 {
                        map.positive.clone()
                    } else {
                        map.negative.clone()
                    }
                }
                _ => format!("{}", p.resolved),
            }
        };
        let join = |v: Vec<String>| v.join(";");
        let mut rec = vec![
            data.row_ids[i].to_string(),
            prediction,
            p.ambiguous.to_string(),
            p.abstained.to_string(),
            join(p.member_localities.iter().map(|m| m.to_string()).collect()),
            join(p.per_locality_outputs.iter().map(|o| format!("{o}")).collect()),
            format!("{}", p.external_output),
        ];
        if labeled {
            rec.push(raw.label_raw[data.row_ids[i]].clone());
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    write_text(&args.out, &String::from_utf8_lossy(&bytes))?;
    manifest.output(&args.out);
    manifest.summary(serde_json::json!({ "rows": data.len(), "ambiguous": ambiguous, "abstained": abstained }))?;
    manifest.finish(&manifest_path(&args.out, args.manifest.as_deref()))?;
    println!("scored {} rows ({ambiguous} ambiguous, {abstained} abstained) into {}", data.len(), args.out.display());
    Ok(())
}
