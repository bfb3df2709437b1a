use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use gcwm_core::data::{load_csv, Dataset, Schema};
use gcwm_core::em::{compare_models, hard_labels, ModelComparison, ZipOptions};
use gcwm_core::error::SelectionError;
use gcwm_core::selection::{select_k, FailureKind, SelectionRow};
use gcwm_core::simgen::write_long_format;
use gcwm_core::{
    estep, first_run_samples, fit_gcwm, fit_zigcwm, run_study, Condition, FitConfig, GcwmModel, Init, ModelDocument,
    Partitioning, ResponseKind, Selections, StudyConfig, ZiConfig,
};

use crate::error::{CliError, CliResult};
use crate::manifest::{parent_dir, Recorder, MANIFEST_FILE};
use crate::{ClassifyArgs, DataArgs, FitArgs, LrtestArgs, ModelKind, ResponseArg, SimulateArgs};

fn load(input: &DataArgs) -> CliResult<Dataset> {
    let schema = Schema::load(&input.schema).map_err(|e| CliError::input(format!("--schema {}: {e}", input.schema.display())))?;
    load_csv(&input.data, &schema).map_err(|e| CliError::input(format!("--data {}: {e}", input.data.display())))
}

fn parse_k(flag: &str, s: &str) -> CliResult<usize> {
    match s.trim().parse::<usize>() {
        Ok(0) => Err(CliError::input(format!("{flag}: component counts must be at least 1"))),
        Ok(k) => Ok(k),
        Err(_) => Err(CliError::input(format!("{flag}: `{s}` is not a component count"))),
    }
}

/// Candidate Ks from `--k` or `--k-range` (`a..b` inclusive, or a comma list).
pub fn parse_ks(k: Option<&str>, range: Option<&str>) -> CliResult<Vec<usize>> {
    match (k, range) {
        (Some(k), _) => Ok(vec![parse_k("--k", k)?]),
        (None, Some(r)) => {
            let ks: Vec<usize> = if let Some((a, b)) = r.split_once("..") {
                let (a, b) = (parse_k("--k-range", a)?, parse_k("--k-range", b.trim_start_matches('='))?);
                if a > b {
                    return Err(CliError::input(format!("--k-range: empty range `{r}`")));
                }
                (a..=b).collect()
            } else {
                r.split(',').map(|s| parse_k("--k-range", s)).collect::<CliResult<_>>()?
            };
            Ok(ks)
        }
        (None, None) => Err(CliError::input("one of --k or --k-range is required")),
    }
}

fn split_terms(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(String::from).collect()
}

/// Every covariate on its own scale.
fn default_terms(ds: &Dataset) -> Vec<String> {
    ds.covariates().iter().map(|c| c.name.clone()).collect()
}

fn response_kind(kind: ModelKind, response: ResponseArg) -> ResponseKind {
    if kind == ModelKind::ZiGcwm {
        return ResponseKind::ZipFrequency;
    }
    match response {
        ResponseArg::Severity => ResponseKind::GaussianSeverity,
        ResponseArg::LogSeverity => ResponseKind::GaussianLogSeverity,
        ResponseArg::Frequency => ResponseKind::PoissonFrequency,
        ResponseArg::Zero => ResponseKind::BernoulliZero,
    }
}

fn with_extension_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    parent_dir(path).join(format!("{stem}{suffix}"))
}

fn kind_label(kind: &str) -> &'static str {
    match kind {
        "cwm" => "CWM",
        "zi-gcwm" => "ZI-GCWM",
        _ => "GCWM",
    }
}

fn print_selection(kind: &str, rows: &[SelectionRow]) {
    println!("{:<8} {:>3} {:>16} {:>10} {:>14} {:>14}  {}", "Model", "K", "log-likelihood", "parameters", "AIC", "BIC", "");
    for r in rows {
        match &r.criteria {
            Some(c) => println!(
                "{:<8} {:>3} {:>16.3} {:>10} {:>14.3} {:>14.3}  {}{}",
                kind_label(kind),
                r.k,
                c.loglik,
                c.n_params,
                c.aic,
                c.bic,
                if r.selected { "selected" } else { "" },
                if r.converged { "" } else { " (not converged)" }
            ),
            None => println!(
                "{:<8} {:>3}  failed ({}): {}",
                kind_label(kind),
                r.k,
                r.failure.map_or("error", |f| match f {
                    FailureKind::Sizing => "sizing",
                    FailureKind::Convergence => "convergence",
                    FailureKind::Input => "input",
                }),
                r.message.as_deref().unwrap_or("")
            ),
        }
    }
}

fn write_selection_csv(path: &Path, rows: &[SelectionRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["k", "loglik", "n_params", "aic", "bic", "converged", "selected", "failure", "message"])?;
    for r in rows {
        let c = r.criteria.as_ref();
        w.write_record([
            r.k.to_string(),
            c.map_or(String::new(), |c| c.loglik.to_string()),
            c.map_or(String::new(), |c| c.n_params.to_string()),
            c.map_or(String::new(), |c| c.aic.to_string()),
            c.map_or(String::new(), |c| c.bic.to_string()),
            r.converged.to_string(),
            r.selected.to_string(),
            r.failure.map_or(String::new(), |f| format!("{f:?}").to_lowercase()),
            r.message.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// The error class of a range in which no candidate produced a model.
fn range_failure(rows: &[SelectionRow]) -> CliError {
    let msg = rows
        .iter()
        .map(|r| format!("K={}: {}", r.k, r.message.as_deref().unwrap_or("failed")))
        .collect::<Vec<_>>()
        .join("; ");
    let kinds: Vec<FailureKind> = rows.iter().filter_map(|r| r.failure).collect();
    if kinds.contains(&FailureKind::Input) {
        CliError::Input(msg)
    } else if !kinds.is_empty() && kinds.iter().all(|&k| k == FailureKind::Sizing) {
        CliError::Sizing(msg)
    } else {
        CliError::Convergence(msg)
    }
}

pub fn fit(a: &FitArgs) -> CliResult<()> {
    let mut rec = Recorder::start("fit", a.seed);
    rec.inputs = vec![a.input.data.clone(), a.input.schema.clone()];
    let ks = parse_ks(a.k.as_deref(), a.k_range.as_deref())?;
    let partitioning: Partitioning = a.partitioning.parse().map_err(|e: String| CliError::input(format!("--partitioning: {e}")))?;
    let raw = load(&a.input)?;
    let raw_lognormal = raw.p_lognormal() > 0;
    let response = a.select_response.as_deref().map(split_terms).unwrap_or_else(|| default_terms(&raw));
    let ds = if a.kind == ModelKind::Cwm { raw.with_all_gaussian() } else { raw };
    let kind = response_kind(a.kind, a.response);
    let bernoulli = a.select_bernoulli.as_deref().map(split_terms).unwrap_or_else(|| response.clone());
    let sel = Selections::new(response).with_bernoulli(bernoulli).with_offset(a.offset_exposure).with_claim_weights(a.weights_claims);
    let mut inits = vec![Init::Distance];
    inits.extend(std::iter::repeat(Init::Random).take(a.restarts));

    let fit_one = |k: usize| {
        let cfg = FitConfig::new(k, kind, sel.clone()).seed(a.seed).inits(inits.clone());
        if kind == ResponseKind::ZipFrequency {
            fit_zigcwm(&ds, &ZiConfig::from_fit_config(&cfg).partitioning(partitioning))
        } else {
            fit_gcwm(&ds, &cfg)
        }
    };
    let label = kind_str(a.kind, raw_lognormal);
    let (model, table): (GcwmModel, Vec<SelectionRow>) = if ks.len() == 1 {
        let m = fit_one(ks[0])?;
        let (_, rows) = select_k(&ks, |_| Ok(m.clone()))?;
        (m, rows)
    } else {
        match select_k(&ks, fit_one) {
            Ok(r) => r,
            Err(SelectionError::NoSuccessfulFit(rows)) => {
                print_selection(label, &rows);
                return Err(range_failure(&rows));
            }
            Err(e) => return Err(e.into()),
        }
    };

    print_selection(label, &table);
    let mut doc = ModelDocument::new(label, a.seed, ds.covariates().to_vec(), ds.fingerprint(), model, table);
    doc.manifest = Some(MANIFEST_FILE.to_string());
    doc.save(&a.out)?;
    let table_path = with_extension_suffix(&a.out, ".selection.csv");
    write_selection_csv(&table_path, &doc.selection_table)?;
    rec.outputs = vec![a.out.clone(), table_path];
    rec.finish(&parent_dir(&a.out))?;
    if !doc.model.converged {
        return Err(CliError::Convergence(format!(
            "selected model (K = {}) stopped at the iteration limit without converging",
            doc.model.k
        )));
    }
    Ok(())
}

/// The document label: `cwm` only when a log-normal covariate was actually
/// reassigned, since otherwise the two model classes coincide.
fn kind_str(kind: ModelKind, had_lognormal: bool) -> &'static str {
    match kind {
        ModelKind::Cwm if had_lognormal => "cwm",
        ModelKind::Cwm | ModelKind::Gcwm => "gcwm",
        ModelKind::ZiGcwm => "zi-gcwm",
    }
}

/// Loads data for a fitted model, applying the same role override it was fitted with.
fn data_for(doc: &ModelDocument, input: &DataArgs) -> CliResult<Dataset> {
    let ds = load(input)?;
    let ds = if doc.kind == "cwm" { ds.with_all_gaussian() } else { ds };
    if ds.covariates() != doc.covariates.as_slice() {
        let names = |c: &[gcwm_core::CovariateSpec]| c.iter().map(|c| format!("{}:{:?}", c.name, c.role)).collect::<Vec<_>>().join(", ");
        return Err(CliError::input(format!(
            "schema mismatch: model has covariates [{}], data has [{}]",
            names(&doc.covariates),
            names(ds.covariates())
        )));
    }
    Ok(ds)
}

fn load_doc(path: &Path, flag: &str) -> CliResult<ModelDocument> {
    ModelDocument::load(path).map_err(|e| CliError::input(format!("{flag} {}: {e}", path.display())))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn classify(a: &ClassifyArgs) -> CliResult<()> {
    let doc = load_doc(&a.model, "--model")?;
    let mut rec = Recorder::start("classify", doc.seed);
    rec.inputs = vec![a.model.clone(), a.input.data.clone(), a.input.schema.clone()];
    let ds = data_for(&doc, &a.input)?;
    let post = estep(&ds, &doc.model)?;
    let labels = hard_labels(&post);
    let k = doc.model.k;
    fs::create_dir_all(&a.out)?;

    let assign_path = a.out.join("assignments.csv");
    let mut w = csv::Writer::from_path(&assign_path)?;
    let mut header = vec!["row".to_string(), "cluster".to_string()];
    header.extend((1..=k).map(|j| format!("posterior_{j}")));
    w.write_record(&header)?;
    for (i, &l) in labels.iter().enumerate() {
        let mut rec = vec![(i + 1).to_string(), (l + 1).to_string()];
        rec.extend(post.row(i).iter().map(|p| p.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let y = ds.response();
    let n = ds.n();
    let sizes_path = a.out.join("cluster_sizes.csv");
    let summary_path = a.out.join("response_summary.csv");
    let mut sizes = csv::Writer::from_path(&sizes_path)?;
    sizes.write_record(["cluster", "size", "percent"])?;
    let mut summary = csv::Writer::from_path(&summary_path)?;
    summary.write_record(["cluster", "n", "min", "mean", "max", "sd"])?;
    println!("{:<8} {:>8} {:>8}   {:>12} {:>12} {:>12} {:>12}", "Cluster", "Size", "%", "Min", "Mean", "Max", "Sd");
    for j in 0..k {
        let vals: Vec<f64> = (0..n).filter(|&i| labels[i] == j).map(|i| y[i]).collect();
        let size = vals.len();
        let pct = 100.0 * size as f64 / n as f64;
        let stats = response_stats(&vals);
        sizes.write_record([(j + 1).to_string(), size.to_string(), pct.to_string()])?;
        summary.write_record([
            (j + 1).to_string(),
            size.to_string(),
            fmt_opt(stats.map(|s| s.0)),
            fmt_opt(stats.map(|s| s.1)),
            fmt_opt(stats.map(|s| s.2)),
            fmt_opt(stats.map(|s| s.3)),
        ])?;
        let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!(
            "{:<8} {:>8} {:>8.2}   {:>12} {:>12} {:>12} {:>12}",
            j + 1,
            size,
            pct,
            show(stats.map(|s| s.0)),
            show(stats.map(|s| s.1)),
            show(stats.map(|s| s.2)),
            show(stats.map(|s| s.3))
        );
    }
    sizes.flush()?;
    summary.flush()?;
    println!("{:<8} {:>8} {:>8.2}", "Total", n, 100.0);
    rec.outputs = vec![assign_path, sizes_path, summary_path];
    rec.finish(&a.out)?;
    Ok(())
}

/// `(min, mean, max, sample sd)`; sd is 0 for a single value.
fn response_stats(v: &[f64]) -> Option<(f64, f64, f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sd = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    Some((min, mean, max, sd))
}

fn print_comparison(cmp: &ModelComparison, per_cluster: bool) {
    println!(
        "{:<8} {:>7} {:>7} {:>12} {:>4} {:>10}  {}",
        "Cluster", "rows", "zeros", "Chi-square", "df", "critical", "decision"
    );
    let line = |name: String, rows: String, zeros: String, t: &gcwm_core::LrTestResult| {
        let decision = if t.reject { "zero-inflated" } else { "Poisson retained" };
        println!("{:<8} {:>7} {:>7} {:>12.3} {:>4} {:>10.3}  {}", name, rows, zeros, t.phi, t.m, t.critical_95, decision);
    };
    if per_cluster {
        for r in &cmp.rows {
            match &r.test {
                Some(t) => line(r.cluster.to_string(), r.rows.to_string(), r.zeros.to_string(), t),
                None => println!("{:<8} {:>7} {:>7}  empty", r.cluster, r.rows, r.zeros),
            }
        }
    }
    let total_rows: usize = cmp.rows.iter().map(|r| r.rows).sum();
    let total_zeros: usize = cmp.rows.iter().map(|r| r.zeros).sum();
    match &cmp.pooled {
        Some(t) => line("All".into(), total_rows.to_string(), total_zeros.to_string(), t),
        None => println!("{:<8} {:>7} {:>7}  no restriction to test", "All", total_rows, total_zeros),
    }
    println!("partition agreement (ARI): {:.4}", cmp.partition_agreement);
}

pub fn lrtest(a: &LrtestArgs) -> CliResult<()> {
    let null = load_doc(&a.poisson, "--poisson")?;
    let alt = load_doc(&a.zip, "--zip")?;
    let mut rec = Recorder::start("lrtest", alt.seed);
    rec.inputs = vec![a.poisson.clone(), a.zip.clone(), a.input.data.clone(), a.input.schema.clone()];
    let ds = data_for(&alt, &a.input)?;
    if null.data_fingerprint != alt.data_fingerprint {
        return Err(CliError::input("the two models were fitted on different data"));
    }
    if ds.fingerprint() != alt.data_fingerprint {
        return Err(CliError::input("--data is not the data the models were fitted on"));
    }
    let cmp = compare_models(&ds, &null.model, &alt.model, &ZipOptions::default())?;
    print_comparison(&cmp, a.per_cluster);
    if let Some(out) = &a.out {
        let mut w = csv::Writer::from_path(out)?;
        w.write_record(["cluster", "rows", "zeros", "null_loglik", "alt_loglik", "phi", "df", "critical_95", "reject"])?;
        for r in &cmp.rows {
            let t = r.test.as_ref();
            w.write_record([
                r.cluster.to_string(),
                r.rows.to_string(),
                r.zeros.to_string(),
                r.null_loglik.to_string(),
                r.alt_loglik.to_string(),
                fmt_opt(t.map(|t| t.phi)),
                t.map_or(String::new(), |t| t.m.to_string()),
                fmt_opt(t.map(|t| t.critical_95)),
                t.map_or(String::new(), |t| t.reject.to_string()),
            ])?;
        }
        if let Some(t) = &cmp.pooled {
            let rows: usize = cmp.rows.iter().map(|r| r.rows).sum();
            let zeros: usize = cmp.rows.iter().map(|r| r.zeros).sum();
            let (nl, al): (f64, f64) = cmp.rows.iter().fold((0.0, 0.0), |(x, y), r| (x + r.null_loglik, y + r.alt_loglik));
            w.write_record([
                "All".to_string(),
                rows.to_string(),
                zeros.to_string(),
                nl.to_string(),
                al.to_string(),
                t.phi.to_string(),
                t.m.to_string(),
                t.critical_95.to_string(),
                t.reject.to_string(),
            ])?;
        }
        w.flush()?;
        rec.outputs.push(out.clone());
        rec.finish(&parent_dir(out))?;
    }
    Ok(())
}

pub fn simulate(a: &SimulateArgs) -> CliResult<()> {
    let text = fs::read_to_string(&a.config).map_err(|e| CliError::input(format!("--config {}: {e}", a.config.display())))?;
    let mut config = StudyConfig::from_toml_str(&text).map_err(|e| CliError::input(format!("--config: {e}")))?;
    if let Some(r) = a.runs {
        if r == 0 {
            return Err(CliError::input("--runs must be at least 1"));
        }
        config.runs = r;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(c) = &a.condition {
        config.conditions = split_terms(c)
            .iter()
            .map(|s| s.parse::<Condition>().map_err(|e| CliError::input(format!("--condition: {e}"))))
            .collect::<CliResult<_>>()?;
    }
    if config.runs == 0 {
        return Err(CliError::input("runs must be at least 1"));
    }
    let mut rec = Recorder::start("simulate", config.seed);
    rec.config = Some(a.config.clone());
    fs::create_dir_all(&a.out)?;
    let report = run_study(&config)?;
    rec.outputs = report.write_dir(&a.out)?;
    for (tag, sample) in first_run_samples(&config)? {
        let path = a.out.join(format!("long_{tag}.csv"));
        let f = fs::File::create(&path)?;
        write_long_format(std::io::BufWriter::new(f), &sample.dataset, &sample.labels)?;
        rec.outputs.push(path);
    }
    print_report(&report);
    let manifest = rec.finish(&a.out)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "wrote {} (manifest {})", a.out.display(), manifest.display())?;
    Ok(())
}

fn print_report(report: &gcwm_core::StudyReport) {
    if !report.metrics.is_empty() {
        println!("{:<8} {:<10} {:<18} {:>10} {:>10} {:>10} {:>6} {:>8}", "cond", "method", "metric", "mean", "sd", "median", "runs", "failed");
        for m in &report.metrics {
            println!(
                "{:<8} {:<10} {:<18} {:>10.4} {:>10.4} {:>10.4} {:>6} {:>8}",
                format!("{:?}", m.condition).to_lowercase(),
                format!("{:?}", m.method).to_lowercase(),
                m.metric,
                m.mean,
                m.sd,
                m.median,
                m.runs_used,
                m.failures
            );
        }
    }
    if !report.accuracy.is_empty() {
        println!("{:<6} {:<6} {:>4} {:<14} {:>12} {:>9} {:>12} {:>6}", "model", "fit", "comp", "coefficient", "truth", "coverage", "mse", "failed");
        for r in &report.accuracy {
            println!(
                "{:<6} {:<6} {:>4} {:<14} {:>12.4} {:>8.1}% {:>12.4e} {:>6}",
                r.model,
                r.variant,
                r.component,
                r.coefficient,
                r.truth,
                100.0 * r.coverage,
                r.mse,
                r.failures
            );
        }
    }
}
