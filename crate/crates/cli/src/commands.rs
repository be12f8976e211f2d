use std::time::Instant;

use anyhow::Context as _;
use infominima::bound::{bound_rhs, gamma_sweep, BoundInputs, BoundResult};
use infominima::experiments::run_scenario;
use infominima::fisher::{compute_metrics, MetricReport};
use infominima::net::ParamVector;
use infominima::oracle::run_oracle_suite;
use infominima::persist::{fmt_f64, write_atomic, write_json};
use infominima::regularizer::train as train_net;
use serde::Serialize;
use serde_json::json;

use crate::config::{BoundConfig, MetricsConfig, ModelFile, ScenarioFile, TrainConfig, VerifyConfig};
use crate::{to_value, CliError, Context, Outcome};

fn prepare_out(ctx: &Context) -> Result<(), CliError> {
    std::fs::create_dir_all(&ctx.out).with_context(|| format!("cannot create {}", ctx.out.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct TrainReport {
    seed: u64,
    epochs: usize,
    steps: usize,
    param_count: usize,
    final_train_loss: f64,
    final_train_acc: f64,
    final_test_err: Option<f64>,
    metrics: Option<MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics_error: Option<String>,
}

pub fn train(ctx: &Context) -> Result<Outcome, CliError> {
    let mut cfg: TrainConfig = ctx.require_config()?;
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    if !(0.0..1.0).contains(&cfg.label_smoothing) {
        return Err(CliError::Usage("label_smoothing must lie in [0, 1)".into()));
    }
    prepare_out(ctx)?;
    let (train_set, test_set) = cfg.data.load(cfg.seed)?;
    let spec = cfg.net.spec(&train_set)?;
    let fit_set = if cfg.label_smoothing > 0.0 { train_set.relabeled(cfg.label_smoothing)? } else { train_set.clone() };
    log::info!("training {:?} ({} parameters) on {} samples", spec.layer_sizes(), spec.param_count(), fit_set.len());

    let start = Instant::now();
    let init = ParamVector::init(&spec, cfg.seed);
    let (params, record) = train_net(&spec, &init, &fit_set, test_set.as_ref(), &cfg.schedule, &cfg.reg, cfg.seed)?;
    let train_s = start.elapsed().as_secs_f64();

    let (metrics, metrics_error) = match cfg.metrics.as_ref().map(|o| compute_metrics(&spec, &params, &train_set, o)) {
        Some(Ok(m)) => (Some(m), None),
        Some(Err(e)) => {
            log::error!("metrics failed: {e}");
            (None, Some(e.to_string()))
        }
        None => (None, None),
    };
    let summary = record.summary();
    if !ctx.quiet {
        println!(
            "train loss {:.6}  train acc {:.4}  test err {}",
            summary.final_train_loss,
            summary.final_train_acc,
            summary.final_test_err.map_or("-".into(), |e| format!("{e:.4}"))
        );
        if let Some(m) = &metrics {
            println!("gamma_hat {:.4}  robustness {:.6e}  frobenius {:.6e}", m.gamma_hat, m.robustness, m.frobenius);
        }
    }
    let report = TrainReport {
        seed: cfg.seed,
        epochs: summary.epochs,
        steps: summary.steps,
        param_count: spec.param_count(),
        final_train_loss: summary.final_train_loss,
        final_train_acc: summary.final_train_acc,
        final_test_err: summary.final_test_err,
        metrics,
        metrics_error,
    };
    write_json(&ctx.path("model.json"), &ModelFile { spec: spec.clone(), params: params.into_vec() })?;
    write_atomic(&ctx.path("train.csv"), &record.to_csv_untimed()?)?;
    write_json(&ctx.path("summary.json"), &report)?;

    let step_ms: Vec<f64> = record.epochs.iter().map(|e| e.step_ms).collect();
    Ok(Outcome {
        config: to_value(&cfg)?,
        seed: Some(cfg.seed),
        outputs: vec!["model.json".into(), "train.csv".into(), "summary.json".into()],
        timings: json!({ "train_s": train_s, "mean_step_ms": summary.mean_step_ms, "epoch_step_ms": step_ms }),
        success: report.metrics_error.is_none(),
    })
}

pub fn metrics(ctx: &Context) -> Result<Outcome, CliError> {
    let mut cfg: MetricsConfig = ctx.require_config()?;
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    let text = std::fs::read_to_string(&cfg.model)
        .map_err(|e| CliError::Usage(format!("cannot read model {}: {e}", cfg.model.display())))?;
    let model: ModelFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("cannot parse model {}: {e}", cfg.model.display())))?;
    model.spec.validate()?;
    let params = ParamVector::new(&model.spec, model.params)?;
    prepare_out(ctx)?;
    let (data, _) = cfg.data.load(cfg.seed)?;
    if data.input_dim() != model.spec.input_dim() || data.num_classes() != model.spec.num_classes() {
        return Err(CliError::Usage(format!(
            "data shape ({} inputs, {} classes) does not match the model ({} inputs, {} classes)",
            data.input_dim(),
            data.num_classes(),
            model.spec.input_dim(),
            model.spec.num_classes()
        )));
    }
    let start = Instant::now();
    let report = compute_metrics(&model.spec, &params, &data, &cfg.options)?;
    if !ctx.quiet {
        println!(
            "gamma_hat {:.4}  robustness {:.6e}  frobenius {:.6e}  spectral_radius {:.6e}",
            report.gamma_hat, report.robustness, report.frobenius, report.spectral_radius
        );
    }
    write_json(&ctx.path("metrics.json"), &report)?;
    Ok(Outcome {
        config: to_value(&cfg)?,
        seed: Some(cfg.seed),
        outputs: vec!["metrics.json".into()],
        timings: json!({ "metrics_s": start.elapsed().as_secs_f64() }),
        success: true,
    })
}

pub fn scenario(ctx: &Context) -> Result<Outcome, CliError> {
    let mut cfg: ScenarioFile = ctx.require_config()?;
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    prepare_out(ctx)?;
    let start = Instant::now();
    let result = run_scenario(&cfg)?;
    result.write(&ctx.out)?;
    if !ctx.quiet {
        for agg in &result.aggregates {
            println!(
                "level {:<8} converged {:>2}  test err {:.4} ± {:.4}  gamma_hat {:.2} ± {:.2}",
                fmt_f64(agg.level),
                agg.converged,
                agg.test_err.mean,
                agg.test_err.std,
                agg.gamma_hat.mean,
                agg.gamma_hat.std
            );
        }
        for (metric, rho) in &result.rank_correlations {
            println!("spearman({metric}, test_err) = {}", rho.map_or("-".into(), |r| format!("{r:.4}")));
        }
    }
    let name = cfg.scenario.name();
    Ok(Outcome {
        config: to_value(&cfg)?,
        seed: Some(cfg.seed),
        outputs: vec![format!("{name}.csv"), format!("{name}.json")],
        timings: json!({ "scenario_s": start.elapsed().as_secs_f64() }),
        success: true,
    })
}

fn sweep_csv(var: &str, points: &[(f64, BoundResult)]) -> Vec<u8> {
    let mut out = format!("{var},ln_a,ln_h_excess,ln_gap,a,h,rhs\n");
    for (x, r) in points {
        let cells = [*x, r.ln_a, r.ln_h_excess, r.ln_gap, r.a, r.h, r.rhs].map(fmt_f64);
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out.into_bytes()
}

pub fn bound(ctx: &Context) -> Result<Outcome, CliError> {
    let raw: serde_json::Value = ctx.require_config()?;
    let cfg = BoundConfig::from_value(raw).map_err(|e| CliError::Usage(format!("invalid bound config: {e}")))?;
    if ctx.seed.is_some() {
        log::warn!("--seed has no effect on `bound`");
    }
    cfg.inputs.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let gammas = cfg.gamma_sweep().linear().map_err(CliError::Usage)?;
    let volumes = cfg.v_sweep.map(|s| s.geometric()).transpose().map_err(CliError::Usage)?;
    prepare_out(ctx)?;

    let result = bound_rhs(&cfg.inputs)?;
    if !ctx.quiet {
        println!("ln A {:.6}  ln gap {:.6}  rhs {:e}", result.ln_a, result.ln_gap, result.rhs);
    }
    write_json(&ctx.path("bound.json"), &json!({ "inputs": cfg.inputs, "result": result }))?;
    write_atomic(&ctx.path("sweep.csv"), &sweep_csv("gamma", &gamma_sweep(&cfg.inputs, &gammas)?))?;
    let mut outputs = vec!["bound.json".to_string(), "sweep.csv".to_string()];
    if let Some(volumes) = volumes {
        let rows = volumes
            .iter()
            .map(|&v| Ok((v, bound_rhs(&BoundInputs { v, ..cfg.inputs })?)))
            .collect::<infominima::Result<Vec<_>>>()?;
        write_atomic(&ctx.path("v_sweep.csv"), &sweep_csv("v", &rows))?;
        outputs.push("v_sweep.csv".into());
    }
    Ok(Outcome { config: to_value(&cfg)?, seed: None, outputs, timings: json!({}), success: true })
}

pub fn verify(ctx: &Context) -> Result<Outcome, CliError> {
    let mut cfg = ctx.load_config::<VerifyConfig>()?.unwrap_or(VerifyConfig { seed: 0 });
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    prepare_out(ctx)?;
    let start = Instant::now();
    let report = run_oracle_suite(cfg.seed);
    for c in &report.checks {
        if !c.passed {
            log::error!("{} failed: {}", c.name, c.detail);
        }
        if !ctx.quiet {
            println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
    }
    write_json(&ctx.path("verify.json"), &report)?;
    Ok(Outcome {
        config: to_value(&cfg)?,
        seed: Some(cfg.seed),
        outputs: vec!["verify.json".into()],
        timings: json!({ "verify_s": start.elapsed().as_secs_f64() }),
        success: report.all_passed,
    })
}
