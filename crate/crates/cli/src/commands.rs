//! One function per subcommand. Each reads its upstream artifacts, runs a
//! pipeline stage and writes its own artifact directory.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, Write};
use std::sync::Arc;
use std::time::Instant;

use hedgelab::agent::{bc_pretrain, finetune as run_finetune, Agent};
use hedgelab::evalkit::{
    cost_sweep, evaluate as run_evaluate, grid_report, pv_distribution, write_distribution, write_grid, write_metrics,
    write_outcome_log, AgentHedge, DeltaHedge, HedgeStrategy, SweepRow, ZeroHedge,
};
use hedgelab::forecaster::{held_out_nll, sample_paths as run_sampler, train, write_loss_curve, ConstantGaussian, Forecaster};
use hedgelab::hedgenv::{EpisodeGenerator, PathOrigin};
use hedgelab::marketdata::{
    filter_eligible_options, ingest_ohlc, ingest_options, split_index, write_ohlc, write_options, OhlcSchema, PricePanel,
    ReturnPanel,
};
use hedgelab::pricing::{build_expert_dataset, read_expert_csv, write_expert_csv};
use hedgelab::PricePathSet;
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{AgentInit, AgentStage, RunConfig, StrategyKind};
use crate::stage::{read_to_string, upstream, Stage};
use crate::CliError;

/// Evaluation episodes are numbered from here, away from the ids used for
/// fine-tuning rollouts and validation.
pub const EVAL_ID_BASE: u64 = 1 << 41;

fn eval_ids(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.eval.episodes as u64).map(|i| EVAL_ID_BASE + i).collect()
}

fn load_panel(cfg: &RunConfig, command: &str) -> Result<PricePanel, CliError> {
    let p = upstream(cfg, command, "ingest", "ohlc.csv")?;
    Ok(ingest_ohlc(&p, &OhlcSchema::default())?)
}

pub fn ingest(cfg: &RunConfig) -> Result<(), CliError> {
    for p in [&cfg.data.ohlc, &cfg.data.options].into_iter().flatten() {
        if !p.is_file() {
            return Err(CliError::Config(format!("data file {} does not exist", p.display())));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let panel = match &cfg.data.ohlc {
        Some(p) => ingest_ohlc(p, &cfg.data.schema)?,
        None => cfg.data.synthetic.generate(&mut rng)?,
    };
    let chain = match &cfg.data.options {
        Some(p) => ingest_options(p)?,
        None => cfg.data.chain.generate(&panel)?,
    };
    let (eligible, report) = filter_eligible_options(&chain, &panel);
    let stage = Stage::create(cfg, "ingest")?;
    stage.write_with("ohlc.csv", |w| Ok(write_ohlc(&panel, w)?))?;
    stage.write_with("options.csv", |w| Ok(write_options(&chain, w)?))?;
    stage.write_with("eligible_options.csv", |w| Ok(write_options(&eligible, w)?))?;
    let mut text = String::new();
    let _ = writeln!(text, "assets={}", panel.n_assets());
    let _ = writeln!(text, "dates={}", panel.n_dates());
    let _ = writeln!(text, "missing_cells={}", panel.missing_count());
    let _ = writeln!(text, "quotes={}", report.input);
    let _ = writeln!(text, "kept={}", report.kept);
    let _ = writeln!(text, "zero_volume={}", report.zero_volume);
    let _ = writeln!(text, "outside_band={}", report.outside_band);
    let _ = writeln!(text, "too_long={}", report.too_long);
    let _ = writeln!(text, "unknown_underlying={}", report.unknown_underlying);
    let _ = writeln!(text, "uncovered={}", report.uncovered);
    stage.write_text("ingest_report.txt", &text)?;
    info!("ingested {} assets x {} dates, kept {} of {} option quotes", panel.n_assets(), panel.n_dates(), report.kept, report.input);
    Ok(())
}

/// Chronological train/validation/test split of the return panel.
fn split_returns(cfg: &RunConfig, panel: &PricePanel) -> Result<(ReturnPanel, usize, usize), CliError> {
    let r = panel.to_log_returns()?;
    let n = r.len();
    let (a, b) = match (cfg.data.train_end, cfg.data.val_end) {
        (Some(t), Some(v)) => {
            // Return k ends on price date k + 1.
            let (a, b) = split_index(&panel.calendar, t, v)?;
            (a.saturating_sub(1), b.saturating_sub(1))
        }
        _ => {
            let a = (n as f64 * cfg.data.train_fraction).round() as usize;
            let b = (n as f64 * (cfg.data.train_fraction + cfg.data.val_fraction)).round() as usize;
            (a, b)
        }
    };
    if !(0 < a && a < b && b < n) {
        return Err(CliError::Config(format!("data split {}/{}/{} of {} returns leaves an empty part", a, b - a, n - b, n)));
    }
    Ok((r, a, b))
}

pub fn train_forecaster(cfg: &RunConfig) -> Result<(), CliError> {
    let panel = load_panel(cfg, "train-forecaster")?;
    let (r, a, b) = split_returns(cfg, &panel)?;
    let n = r.len();
    let (tr, va, te) = (r.slice_dates(0..a), r.slice_dates(a..b), r.slice_dates(b..n));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let t0 = Instant::now();
    let report = train(&tr, &va, &cfg.forecaster.model, &cfg.forecaster.train, &mut rng)?;
    info!("trained forecaster in {:.1?}; best epoch {} val nll {:.5}", t0.elapsed(), report.best_epoch, report.best_val_nll);
    let held = held_out_nll(&report.model, &r.slice_dates(0..b), &te)?;
    let pooled = ConstantGaussian::fit_pooled(&tr)?.panel_nll(&te, held.first_step)?;
    let per_series = ConstantGaussian::per_series_nll(&ConstantGaussian::fit_per_series(&tr)?, &te, held.first_step)?;
    let stage = Stage::create(cfg, "train-forecaster")?;
    let ckpt = stage.path("forecaster.ckpt");
    report.model.save(&ckpt)?;
    stage.write_with("loss_curve.csv", |w| write_loss_curve(&report.curve, w).map_err(|e| CliError::io(&ckpt, e)))?;
    stage.write_text(
        "heldout_nll.csv",
        &format!(
            "model,nll,cells\nforecaster,{},{}\npooled_gaussian,{},{}\nper_series_gaussian,{},{}\n",
            held.nll, held.cells, pooled, held.cells, per_series, held.cells
        ),
    )?;
    info!("held-out nll: forecaster {:.5}, pooled gaussian {:.5}, per-series gaussian {:.5}", held.nll, pooled, per_series);
    Ok(())
}

pub fn sample_paths(cfg: &RunConfig) -> Result<(), CliError> {
    let ckpt = upstream(cfg, "sample-paths", "train-forecaster", "forecaster.ckpt")?;
    let panel = load_panel(cfg, "sample-paths")?;
    let model = Forecaster::load(cfg.forecaster.model.clone(), panel.n_assets(), &ckpt)?;
    let f = &cfg.forecaster;
    let paths = run_sampler(&model, &panel, f.horizon, f.n_paths, cfg.seed)?;
    let stage = Stage::create(cfg, "sample-paths")?;
    stage.write_with("paths.csv", |w| Ok(paths.write_csv(w)?))?;
    let mut text = String::from("asset,horizon_log_return_mean,horizon_log_return_std\n");
    for i in 0..paths.n_assets() {
        let x: Vec<f64> =
            (0..paths.n_paths()).map(|p| (paths.price(p, paths.horizon(), i) / paths.price(p, 0, i)).ln()).collect();
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let sd = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len().max(2) - 1) as f64).sqrt();
        let _ = writeln!(text, "{},{},{}", panel.assets[i], m, sd);
    }
    stage.write_text("path_summary.csv", &text)?;
    info!("sampled {} paths of {} steps", paths.n_paths(), paths.horizon());
    Ok(())
}

pub fn build_expert(cfg: &RunConfig) -> Result<(), CliError> {
    let panel = load_panel(cfg, "build-expert")?;
    let chain_path = upstream(cfg, "build-expert", "ingest", "eligible_options.csv")?;
    let chain = ingest_options(&chain_path)?;
    let (pairs, report) = build_expert_dataset(&chain, &panel, cfg.pricing.r_f);
    if pairs.is_empty() {
        return Err(CliError::Run(format!("no expert pairs from {} eligible quotes", chain.len())));
    }
    let stage = Stage::create(cfg, "build-expert")?;
    stage.write_with("expert.csv", |w| Ok(write_expert_csv(&pairs, w)?))?;
    let mut text = format!(
        "pairs={}\ncontracts={}\ninversion_failures={}\nunusable={}\n",
        report.pairs, report.contracts, report.inversion_failures, report.unusable
    );
    for (contract, date, why) in &report.skipped {
        let _ = writeln!(text, "skipped={},{},{}", contract, date, why);
    }
    stage.write_text("expert_report.txt", &text)?;
    info!("{} expert pairs from {} contracts", report.pairs, report.contracts);
    Ok(())
}

pub fn pretrain(cfg: &RunConfig) -> Result<(), CliError> {
    let expert = upstream(cfg, "pretrain", "build-expert", "expert.csv")?;
    let file = File::open(&expert).map_err(|e| CliError::io(&expert, e))?;
    let pairs = read_expert_csv(BufReader::new(file))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = cfg.agent.net;
    let mut agent = Agent::new(net, &mut rng)?;
    let t0 = Instant::now();
    let report = bc_pretrain(&pairs, &mut agent.actor, &net, &cfg.agent.bc, &mut rng)?;
    let stage = Stage::create(cfg, "pretrain")?;
    agent.save(&stage.path("agent.ckpt"))?;
    let mut text = String::from("epoch,loss_expert,loss_entropy,val_mae\n");
    for e in &report.epochs {
        let _ = writeln!(text, "{},{},{},{}", e.epoch, e.loss_expert, e.loss_entropy, e.val_mae);
    }
    stage.write_text("bc_report.csv", &text)?;
    stage.write_text(
        "bc_summary.txt",
        &format!("train_pairs={}\nval_pairs={}\nmin_sigma={}\n", report.train_pairs, report.val_pairs, report.min_sigma),
    )?;
    if let Some(last) = report.epochs.last() {
        info!("behavior cloning finished in {:.1?}; held-out mae {:.5}", t0.elapsed(), last.val_mae);
    }
    Ok(())
}

/// Episode generator for the configured source; path-bank episodes need the
/// output of `sample-paths`.
fn generator(cfg: &RunConfig, command: &str) -> Result<EpisodeGenerator, CliError> {
    let bank = match cfg.env.source {
        PathOrigin::Gbm => None,
        PathOrigin::Paths => {
            let p = upstream(cfg, command, "sample-paths", "paths.csv")?;
            let f = File::open(&p).map_err(|e| CliError::io(&p, e))?;
            Some(Arc::new(PricePathSet::read_csv(BufReader::new(f))?))
        }
    };
    EpisodeGenerator::new(cfg.env.clone(), cfg.seed, bank)
        .map_err(|e| CliError::Config(format!("env does not fit the sampled paths: {}", e)))
}

pub fn finetune(cfg: &RunConfig) -> Result<(), CliError> {
    let net = cfg.agent.net;
    let mut agent = match cfg.agent.init {
        AgentInit::Pretrained => Agent::load(net, &upstream(cfg, "finetune", "pretrain", "agent.ckpt")?)?,
        AgentInit::Random => Agent::new(net, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?,
    };
    let factory = generator(cfg, "finetune")?;
    let t0 = Instant::now();
    let report = run_finetune(&factory, &mut agent, &cfg.agent.ppo, &cfg.agent.finetune, cfg.seed)?;
    let stage = Stage::create(cfg, "finetune")?;
    agent.save(&stage.path("agent.ckpt"))?;
    let p = stage.path("finetune_report.csv");
    stage.write_with("finetune_report.csv", |w| report.write(w).map_err(|e| CliError::io(&p, e)))?;
    let mut summary = format!("best_epoch={}\nbest_avg_r={}\n", report.best_epoch, report.best_avg_r);
    if let Some(why) = &report.aborted {
        let _ = writeln!(summary, "aborted={}", why);
    }
    stage.write_text("finetune_summary.txt", &summary)?;
    info!("fine-tuned in {:.1?}; kept epoch {} with validation avg_r {:.6}", t0.elapsed(), report.best_epoch, report.best_avg_r);
    Ok(())
}

fn load_agent(cfg: &RunConfig, command: &str) -> Result<Option<Agent>, CliError> {
    if !cfg.eval.strategies.contains(&StrategyKind::Agent) {
        return Ok(None);
    }
    let stage = match cfg.eval.agent_stage {
        AgentStage::Pretrain => "pretrain",
        AgentStage::Finetune => "finetune",
    };
    Ok(Some(Agent::load(cfg.agent.net, &upstream(cfg, command, stage, "agent.ckpt")?)?))
}

fn strategies<'a>(cfg: &RunConfig, agent: Option<&'a Agent>) -> Vec<Box<dyn HedgeStrategy + 'a>> {
    cfg.eval
        .strategies
        .iter()
        .map(|k| -> Box<dyn HedgeStrategy + 'a> {
            match k {
                StrategyKind::Agent => Box::new(AgentHedge { agent: agent.expect("agent loaded when requested") }),
                StrategyKind::Delta => Box::new(DeltaHedge { sigma: cfg.eval.delta_sigma }),
                StrategyKind::Zero => Box::new(ZeroHedge),
            }
        })
        .collect()
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let agent = load_agent(cfg, "evaluate")?;
    let factory = generator(cfg, "evaluate")?;
    let ids = eval_ids(cfg);
    let stage = Stage::create(cfg, "evaluate")?;
    let mut rows = Vec::new();
    for s in strategies(cfg, agent.as_ref()) {
        let (metrics, run) = run_evaluate(&factory, s.as_ref(), &ids, cfg.eval_seed())?;
        let name = s.name();
        let dist = pv_distribution(&run.pv_samples(), cfg.eval.bins)?;
        stage.write_with(&format!("distribution_{}.csv", name), |w| Ok(write_distribution(w, &dist)?))?;
        if cfg.eval.episode_logs {
            stage.write_with(&format!("episodes_{}.csv", name), |w| Ok(write_outcome_log(w, &run)?))?;
        }
        if !run.failures.is_empty() {
            let mut text = String::from("episode,error\n");
            for (id, why) in &run.failures {
                let _ = writeln!(text, "{},\"{}\"", id, why.replace('"', "'"));
            }
            stage.write_text(&format!("failures_{}.csv", name), &text)?;
        }
        info!("{}: avg_r {:.6} avg_PV {:.5} std_PV {:.5}", name, metrics.avg_r, metrics.avg_pv, metrics.std_pv);
        rows.push(SweepRow { cost_rate: cfg.env.cost_rate, strategy: name, ci95: metrics.ci95(), metrics });
    }
    stage.write_with("metrics.csv", |w| Ok(write_metrics(w, &rows)?))?;
    Ok(())
}

pub fn sweep(cfg: &RunConfig) -> Result<(), CliError> {
    let agent = load_agent(cfg, "sweep")?;
    let factory = generator(cfg, "sweep")?;
    let ids = eval_ids(cfg);
    let owned = strategies(cfg, agent.as_ref());
    let refs: Vec<&dyn HedgeStrategy> = owned.iter().map(|s| s.as_ref()).collect();
    let result = cost_sweep(&factory, &refs, &cfg.eval.cost_rates, &ids, cfg.eval_seed())?;
    let stage = Stage::create(cfg, "sweep")?;
    stage.write_with("metrics.csv", |w| Ok(write_metrics(w, &result.rows)?))?;
    if agent.is_some() && cfg.eval.strategies.contains(&StrategyKind::Delta) {
        let mut text = String::from("c,agent_avg_r,delta_avg_r,gap\n");
        for &c in &cfg.eval.cost_rates {
            let (a, d) = (result.get("agent", c), result.get("delta", c));
            if let (Some(a), Some(d)) = (a, d) {
                let _ = writeln!(text, "{},{},{},{}", c, a.metrics.avg_r, d.metrics.avg_r, a.metrics.avg_r - d.metrics.avg_r);
            }
        }
        stage.write_text("gap.csv", &text)?;
    }
    for r in &result.rows {
        info!("c={} {}: avg_r {:.6}", r.cost_rate, r.strategy, r.metrics.avg_r);
    }
    Ok(())
}

pub fn grid(cfg: &RunConfig) -> Result<(), CliError> {
    let agent = load_agent(cfg, "grid")?;
    let mut gcfg = cfg.clone();
    gcfg.env.min_steps = Some(cfg.eval.grid_min_steps);
    let factory = generator(&gcfg, "grid")?;
    let ids = eval_ids(cfg);
    let stage = Stage::create(cfg, "grid")?;
    for s in strategies(cfg, agent.as_ref()) {
        let (_, run) = run_evaluate(&factory, s.as_ref(), &ids, cfg.eval_seed())?;
        let report = grid_report(&run.outcomes, &cfg.eval.grid)?;
        stage.write_with(&format!("grid_{}.csv", s.name()), |w| Ok(write_grid(w, &report)?))?;
        info!("{}: {} episodes outside the grid", s.name(), report.outside);
    }
    Ok(())
}

/// Rows of a delimited file after the header, split on commas.
fn csv_rows(text: &str) -> Vec<Vec<&str>> {
    text.lines().skip(1).filter(|l| !l.is_empty()).map(|l| l.split(',').collect()).collect()
}

fn markdown_table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
    out.push('\n');
}

fn num(s: &str, digits: usize) -> String {
    s.parse::<f64>().map(|v| format!("{:.*}", digits, v)).unwrap_or_else(|_| s.to_string())
}

pub fn report(cfg: &RunConfig) -> Result<(), CliError> {
    let metrics = read_to_string(&upstream(cfg, "report", "evaluate", "metrics.csv")?)?;
    let run = cfg.run_dir();
    let optional = |stage: &str, file: &str| std::fs::read_to_string(run.join(stage).join(file)).ok();
    let mut out = format!("# Hedging report: {}\n\n", cfg.run_name);
    let _ = writeln!(
        out,
        "Episodes: {} {:?} episodes of {} steps, sigma {}, cost rate {}, evaluation seed {}.\n",
        cfg.eval.episodes,
        cfg.env.source,
        cfg.env.steps,
        cfg.env.sigma,
        cfg.env.cost_rate,
        cfg.eval_seed()
    );
    out.push_str("## Evaluation\n\n");
    let rows: Vec<Vec<String>> = csv_rows(&metrics)
        .iter()
        .map(|r| {
            let f = |i: usize, d: usize| r.get(i).map(|s| num(s, d)).unwrap_or_default();
            vec![r[0].to_string(), f(1, 4), r.get(2).unwrap_or(&"").to_string(), f(3, 6), f(4, 4), f(5, 4), format!("[{}, {}]", f(6, 4), f(7, 4))]
        })
        .collect();
    markdown_table(&mut out, &["strategy", "c", "n", "avg_r", "avg_PV", "std_PV", "95% CI"], &rows);
    if let Some(gap) = optional("sweep", "gap.csv") {
        out.push_str("## Cost sweep: agent minus delta avg_r\n\n");
        let rows: Vec<Vec<String>> =
            csv_rows(&gap).iter().map(|r| vec![r[0].to_string(), num(r[1], 6), num(r[2], 6), num(r[3], 6)]).collect();
        markdown_table(&mut out, &["c", "agent", "delta", "gap"], &rows);
    } else if let Some(sw) = optional("sweep", "metrics.csv") {
        out.push_str("## Cost sweep\n\n");
        let rows: Vec<Vec<String>> =
            csv_rows(&sw).iter().map(|r| vec![r[0].to_string(), r[1].to_string(), num(r[3], 6), num(r[5], 4)]).collect();
        markdown_table(&mut out, &["strategy", "c", "avg_r", "std_PV"], &rows);
    }
    if let Some(nll) = optional("train-forecaster", "heldout_nll.csv") {
        out.push_str("## Forecaster held-out NLL\n\n");
        let rows: Vec<Vec<String>> = csv_rows(&nll).iter().map(|r| vec![r[0].to_string(), num(r[1], 5)]).collect();
        markdown_table(&mut out, &["model", "nll"], &rows);
    }
    if let Some(ft) = optional("finetune", "finetune_summary.txt") {
        out.push_str("## Fine-tuning\n\n");
        for line in ft.lines() {
            let _ = writeln!(out, "- {}", line.replace('=', ": "));
        }
        out.push('\n');
    }
    let grids: Vec<String> = ["agent", "delta", "zero"]
        .iter()
        .filter(|s| run.join("grid").join(format!("grid_{}.csv", s)).is_file())
        .map(|s| format!("grid/grid_{}.csv", s))
        .collect();
    if !grids.is_empty() {
        let _ = writeln!(out, "Grid tables: {}.", grids.join(", "));
    }
    let stage = Stage::create(cfg, "report")?;
    stage.write_text("report.md", &out)?;
    let mut stdout = std::io::stdout().lock();
    let _ = stdout.write_all(out.as_bytes());
    Ok(())
}
