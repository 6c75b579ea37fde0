use log::{info, warn};
use nlfrac::dn_map::{window_basis, DNData};
use nlfrac::linearization::{
    aggregate_check, compute_cascade, fd_derivative, geometric, loglog_slope, remainder_study, LinearizationState,
};
use nlfrac::multi_index::MultiIndex;
use nlfrac::recovery::{run_full_recovery, RecoveryMode, RecoveryTask, Simulator};
use nlfrac::runge::{discrepancy_lambda, RungeControl};
use nlfrac::{Error, Field, MaskKind};
use serde::Serialize;

use crate::config::{shape_field, window_kind, Config};
use crate::error::CliError;
use crate::output::{fmt, Output};

fn bits(alpha: &MultiIndex) -> String {
    alpha.entries().iter().map(|e| e.to_string()).collect()
}

fn binary_indices(k: usize) -> Vec<MultiIndex> {
    (1..(1usize << k)).map(|mask| MultiIndex::new((0..k).map(|i| ((mask >> i) & 1) as u32).collect())).collect()
}

pub fn forward(cfg: &Config, out: &mut Output) -> Result<(), CliError> {
    let model = cfg.model()?;
    let count = cfg.data.fractions.as_ref().map_or(1, |f| f.len());
    let f = cfg
        .data_fields(&model.grid, count)?
        .into_iter()
        .fold(Field::zeros(&model.grid), |acc, b| &acc + &b);
    let smallness = model.solver.check_smallness(&f, cfg.seed)?;
    if !smallness.holds {
        warn!("contraction inequality fails for delta = {:e} (lhs {:e})", smallness.delta, smallness.lhs);
    }
    let report = model.solver.solve(&f)?;

    #[derive(Serialize)]
    struct ForwardReport {
        data_norm: f64,
        eps0: f64,
        iterations: usize,
        last_increment: f64,
        residual_norm: f64,
        residual_scale: f64,
        scaled_residual: f64,
        solution_norm: f64,
        correction_norm: f64,
        smallness: nlfrac::nonlinear_solver::SmallnessReport,
    }
    out.field_csv("data.csv", &f)?;
    out.field_csv("solution.csv", &report.solution)?;
    out.field_csv("linear_part.csv", &report.linear_part)?;
    out.field_csv("correction.csv", &report.correction)?;
    out.json(
        "forward.json",
        &ForwardReport {
            data_norm: f.max_norm(),
            eps0: cfg.solver.eps0,
            iterations: report.iterations,
            last_increment: report.last_increment,
            residual_norm: report.residual_norm,
            residual_scale: report.residual_scale,
            scaled_residual: report.scaled_residual(),
            solution_norm: report.solution.max_norm(),
            correction_norm: report.correction.max_norm(),
            smallness,
        },
    )?;
    println!("forward: {} iterations, scaled residual {:.3e}", report.iterations, report.scaled_residual());
    Ok(())
}

fn cascade_state(cfg: &Config, exhaustive: bool) -> Result<LinearizationState, CliError> {
    let model = cfg.model()?;
    let k = cfg.params.k;
    let data = cfg.data_fields(&model.grid, k)?;
    let solver = if exhaustive { model.solver.with_config(model.solver.config().exhaustive()) } else { model.solver };
    let mut state = LinearizationState::new(solver, data)?;
    compute_cascade(&mut state, k)?;
    Ok(state)
}

pub fn linearize(cfg: &Config, out: &mut Output) -> Result<(), CliError> {
    let k = cfg.params.k;
    let state = cascade_state(cfg, false)?;
    let steps = &cfg.linearization.eps_steps;
    if steps.len() < 2 || steps.iter().any(|&h| !(h > 0.0)) {
        return Err(CliError::Config("linearization.eps_steps needs at least two positive steps".into()));
    }

    #[derive(Serialize)]
    struct AlphaRow {
        alpha: MultiIndex,
        w_norm: f64,
        t_norm: f64,
        fd_errors: Vec<f64>,
        fd_order: f64,
    }
    let mut rows = Vec::new();
    let mut table = Vec::new();
    for alpha in binary_indices(k) {
        let w = state.w(&alpha).ok_or_else(|| Error::MissingPrerequisite(alpha.to_string()))?;
        out.field_csv(&format!("w_{}.csv", bits(&alpha)), w)?;
        let t_norm = match state.t(&alpha) {
            Some(t) if alpha.order() >= 2 => {
                out.field_csv(&format!("t_{}.csv", bits(&alpha)), t)?;
                t.max_norm()
            }
            _ => 0.0,
        };
        let errs: Vec<f64> = steps
            .iter()
            .map(|&h| Ok((&fd_derivative(&alpha, state.data(), h, state.solver())? - w).max_norm()))
            .collect::<Result<_, Error>>()?;
        for (&h, &e) in steps.iter().zip(&errs) {
            table.push(vec![bits(&alpha), fmt(h), fmt(e), fmt(e / w.max_norm().max(f64::MIN_POSITIVE))]);
        }
        let order = loglog_slope(steps, &errs);
        rows.push(AlphaRow { alpha, w_norm: w.max_norm(), t_norm, fd_errors: errs, fd_order: order });
    }
    out.table_csv("linearize.csv", &["alpha", "eps_step", "fd_error", "relative_error"], table)?;
    let direction = cfg.direction(k)?;
    let scales = geometric(cfg.linearization.scale_start, cfg.linearization.scale_ratio, cfg.linearization.scale_count);
    let aggregates = aggregate_check(&state, &direction, &scales)?;

    #[derive(Serialize)]
    struct LinearizeReport<'a> {
        k: usize,
        indices: Vec<AlphaRow>,
        aggregates: &'a nlfrac::linearization::AggregateCheck,
    }
    let orders: Vec<f64> = rows.iter().map(|r| r.fd_order).collect();
    out.json("linearize.json", &LinearizeReport { k, indices: rows, aggregates: &aggregates })?;
    let (lo, hi) = orders.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &o| (a.min(o), b.max(o)));
    println!("linearize: {} indices, finite-difference orders in [{lo:.3}, {hi:.3}]", orders.len());
    Ok(())
}

pub fn remainder(cfg: &Config, out: &mut Output) -> Result<(), CliError> {
    let k = cfg.params.k;
    let state = cascade_state(cfg, true)?;
    let direction = cfg.direction(k)?;
    let lin = &cfg.linearization;
    if lin.scale_count < 2 {
        return Err(CliError::Config("linearization.scale_count must be at least 2".into()));
    }
    let scales = geometric(lin.scale_start, lin.scale_ratio, lin.scale_count);
    let study = remainder_study(&state, &direction, &scales)?;
    let rows = study.rows.iter().map(|r| {
        vec![fmt(r.scale), fmt(r.data_norm), fmt(r.remainder_norm), fmt(r.remainder_residual), fmt(study.slope)]
    });
    out.table_csv("remainder.csv", &["scale", "data_norm", "remainder_norm", "remainder_residual", "slope"], rows)?;
    out.json("remainder.json", &study)?;
    println!("remainder: K = {k}, slope {:.4} (target {})", study.slope, k + 1);
    Ok(())
}

pub fn synthesize_dn(cfg: &Config, out: &mut Output) -> Result<(), CliError> {
    let model = cfg.model()?;
    let dn = &cfg.dn;
    let basis_in = window_basis(&model.grid, MaskKind::W1, dn.count_in, dn.amplitude)?;
    let basis_out = window_basis(&model.grid, MaskKind::W2, dn.count_out, 1.0)?;
    let inputs = basis_in.len();
    let mut data = DNData::assemble(&model.solver, basis_in, basis_out)?;
    for order in 2..=dn.derivative_order.min(cfg.params.k) {
        if order > inputs {
            warn!("skipping order {order} derivatives: only {inputs} input functions");
            continue;
        }
        let alpha = MultiIndex::leading_ones(order, order);
        let slots: Vec<usize> = (0..order).collect();
        data.add_derivatives(&model.solver, &alpha, &slots, dn.eps_step)?;
    }
    if !data.is_finite() {
        return Err(Error::Internal("non-finite DN pairing".into()).into());
    }
    let rows = data
        .pairings
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, v)| vec![i.to_string(), j.to_string(), fmt(*v)]));
    out.table_csv("dn_pairings.csv", &["input", "output", "value"], rows.collect::<Vec<_>>())?;
    out.json("dn.json", &data)?;
    println!(
        "synthesize-dn: {}x{} pairings, {} derivative pairings",
        data.basis_in.len(),
        data.basis_out.len(),
        data.deriv_pairings.len()
    );
    Ok(())
}

pub fn runge_sweep(cfg: &Config, out: &mut Output) -> Result<(), CliError> {
    let model = cfg.model()?;
    let r = &cfg.runge;
    let mut lambdas = r.lambdas.clone();
    if lambdas.is_empty() || lambdas.iter().any(|&l| !(l > 0.0)) {
        return Err(CliError::Config("runge.lambdas must be positive and nonempty".into()));
    }
    lambdas.sort_by(|a, b| b.total_cmp(a));
    let opts = r.options();
    opts.validate().map_err(crate::config::config_error)?;
    let control = RungeControl::new(cfg.linear_solver(&model.q)?, model.grid.mask(window_kind(&r.window)?))
        .map_err(crate::config::config_error)?;
    let target = shape_field(&model.grid, &r.target)?;
    let rows = control.sweep(&target, &lambdas, &opts)?;
    let chosen = discrepancy_lambda(&rows, r.discrepancy).unwrap_or_else(|| {
        warn!("no lambda reaches the discrepancy level {:e}; using the smallest", r.discrepancy);
        lambdas[lambdas.len() - 1]
    });
    let best = control.solve(&target, &nlfrac::runge::RungeOptions { lambda: chosen, ..opts })?;
    let table = rows.iter().map(|row| {
        vec![fmt(row.lambda), fmt(row.achieved_err), fmt(row.control_norm), fmt(row.penalty_norm), row.iterations.to_string()]
    });
    out.table_csv(
        "runge_sweep.csv",
        &["lambda", "achieved_err", "control_norm", "penalty_norm", "iterations"],
        table.collect::<Vec<_>>(),
    )?;
    out.field_csv("runge_target.csv", &target)?;
    out.field_csv("runge_control.csv", &best.control)?;
    out.field_csv("runge_realized.csv", &best.realized)?;

    #[derive(Serialize)]
    struct RungeReport<'a> {
        rows: &'a [nlfrac::runge::SweepRow],
        discrepancy: f64,
        chosen_lambda: f64,
        achieved_err: f64,
        iterations: usize,
    }
    out.json(
        "runge.json",
        &RungeReport {
            rows: &rows,
            discrepancy: r.discrepancy,
            chosen_lambda: chosen,
            achieved_err: best.achieved_err,
            iterations: best.iterations,
        },
    )?;
    println!("runge-sweep: lambda {chosen:e}, achieved error {:.3e}", best.achieved_err);
    Ok(())
}

pub fn recover(cfg: &Config, mode: Option<RecoveryMode>, out: &mut Output) -> Result<(), CliError> {
    let model = cfg.model()?;
    let mode = mode.unwrap_or(cfg.recovery.mode);
    let task = RecoveryTask::new(Simulator::new(model.solver), mode, cfg.recovery.config.clone())
        .map_err(crate::config::config_error)?;
    info!("recovering with {} nodes in the recovery region", task.recovery_region().iter().filter(|&&b| b).count());
    let report = run_full_recovery(&task)?;
    let rows = report.coefficients.iter().map(|c| {
        vec![
            c.level.to_string(),
            c.sigma.to_string(),
            c.relative_error.map_or_else(String::new, fmt),
            fmt(c.budget),
        ]
    });
    let mut table = vec![vec!["0".into(), "q".into(), report.q_error.map_or_else(String::new, fmt), fmt(report.q_budget)]];
    table.extend(rows);
    out.table_csv("recovery_levels.csv", &["level", "sigma", "relative_error", "budget"], table)?;
    let q_hat = Field::from_values(task.grid(), report.q_hat.clone())?;
    out.field_csv("q_hat.csv", &q_hat)?;
    for c in &report.coefficients {
        let field = Field::from_values(task.grid(), c.values.clone())?;
        out.field_csv(&format!("a_{}_{}.csv", c.level, bits(&c.sigma)), &field)?;
    }
    out.json("recovery.json", &report)?;
    let worst = report.max_error().unwrap_or(f64::NAN);
    println!(
        "recover ({}): q error {:.3e}, worst coefficient error {worst:.3e}",
        match mode {
            RecoveryMode::Oracle => "oracle",
            RecoveryMode::Exterior => "exterior",
        },
        report.q_error.unwrap_or(f64::NAN)
    );
    if let Some(reason) = &report.aborted {
        return Err(CliError::Aborted(reason.clone()));
    }
    Ok(())
}
