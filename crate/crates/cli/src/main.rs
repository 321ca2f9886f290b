//! Command-line front end: reproducible simulate / fit / personalize /
//! validate / select-sources / check-latent-age runs over plain CSV and
//! key-value files.
//!
//! Every command is a pure function of its inputs and seed: re-running with
//! the same arguments writes byte-identical outputs. Exit codes: 0 on
//! success, 2 on input or validation errors, 3 on numerical failure.

#![allow(clippy::needless_range_loop)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use latage::data::{write_random_effects_csv, Dataset};
use latage::error::Error;
use latage::metrics;
use latage::model::{Hyperparameters, RandomEffects};
use latage::params_io::{
    fmt_float, read_fixed_effects, read_hyperparameters, read_saem_settings,
    read_simulation_config, write_fixed_effects, KvDoc, KvWriter,
};
use latage::personalize::{personalize, predict_event, predict_longitudinal, PersonalizeOptions};
use latage::saem::{fit_with_init, posterior_se, theta_coordinate_names, FitResult, InitMode};
use latage::simulate::{dataset_summary, simulate_dataset, LinkMode};
use latage::{aft, Result};

mod args;
use args::Args;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = argv.first().cloned() else {
        eprintln!("{USAGE}");
        return ExitCode::from(2);
    };
    let args = Args::new(&argv[1..]);
    let outcome = match command.as_str() {
        "simulate" => cmd_simulate(&args),
        "fit" => cmd_fit(&args),
        "personalize" => cmd_personalize(&args),
        "validate" => cmd_validate(&args),
        "select-sources" => cmd_select_sources(&args),
        "check-latent-age" => cmd_check_latent_age(&args),
        "--help" | "-h" | "help" => {
            println!("{USAGE}");
            return ExitCode::SUCCESS;
        }
        other => {
            eprintln!("unknown command {other:?}\n{USAGE}");
            return ExitCode::from(2);
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Numerical(_) => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

const USAGE: &str = "\
latage <command> [flags]

commands:
  simulate         --config PATH --out DIR [--seed INT] [--mode real-like|no-link]
  fit              --data DIR --hyper PATH --settings PATH --out DIR
                   [--warm-start PATH] [--plot-data]
  personalize      --data DIR --params PATH --condition-on-visits N
                   --horizons LIST --out DIR [--seed INT] [--plot-data]
  validate         --runs GLOB --truth-config PATH --out FILE
  select-sources   --data DIR --hyper PATH --settings PATH --max-sources N --out FILE
  check-latent-age --data DIR --joint-params PATH --out FILE";

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn cmd_simulate(args: &Args) -> Result<()> {
    let mut config = read_simulation_config(&args.path("--config")?)?;
    if let Some(seed) = args.opt_u64("--seed")? {
        config.seed = seed;
    }
    if let Some(mode) = args.opt_string("--mode") {
        config.link_mode = LinkMode::parse(&mode)?;
    }
    let out = args.path("--out")?;
    std::fs::create_dir_all(&out)?;

    let cohort = simulate_dataset(&config)?;
    cohort.dataset.write_csv_dir(&out)?;
    let ids: Vec<String> = cohort.dataset.patients.iter().map(|p| p.id.clone()).collect();
    write_random_effects_csv(
        &out.join("truth.csv"),
        &ids,
        &cohort.truth,
        Some((&cohort.truth_space_shifts, &cohort.truth_survival_shifts)),
    )?;

    let summary = dataset_summary(&cohort.dataset);
    let mut rows = vec![
        format!("link_mode,{}", config.link_mode.as_str()),
        format!("seed,{}", config.seed),
        format!("n_patients,{}", summary.n_patients),
        format!("n_visits,{}", summary.n_visits),
        format!("patient_years,{}", fmt_float(summary.patient_years)),
        format!("visits_per_patient_mean,{}", fmt_float(summary.visits_per_patient_mean)),
        format!("visits_per_patient_sd,{}", fmt_float(summary.visits_per_patient_sd)),
        format!("followup_years_mean,{}", fmt_float(summary.followup_years_mean)),
        format!("followup_years_sd,{}", fmt_float(summary.followup_years_sd)),
        format!("intervisit_months_mean,{}", fmt_float(summary.intervisit_months_mean)),
        format!("intervisit_months_sd,{}", fmt_float(summary.intervisit_months_sd)),
        format!("n_censored,{}", summary.n_censored),
    ];
    for (l, count) in summary.event_counts.iter().enumerate() {
        rows.push(format!("event_{l}_count,{count}"));
        rows.push(format!("event_{l}_fraction,{}", fmt_float(summary.event_fraction(l))));
    }
    for (k, (m, s)) in summary.baseline_means.iter().zip(&summary.baseline_sds).enumerate() {
        rows.push(format!("baseline_mean_{k},{}", fmt_float(*m)));
        rows.push(format!("baseline_sd_{k},{}", fmt_float(*s)));
    }
    let mut text = String::from("key,value\n");
    text.push_str(&rows.join("\n"));
    text.push('\n');
    std::fs::write(out.join("summary.csv"), text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

fn cmd_fit(args: &Args) -> Result<()> {
    let hyper = read_hyperparameters(&args.path("--hyper")?)?;
    let settings = read_saem_settings(&args.path("--settings")?)?;
    let dataset = Dataset::read_csv_dir(&args.path("--data")?, hyper.n_events)?;
    let out = args.path("--out")?;
    std::fs::create_dir_all(&out)?;

    let warm = match args.opt_string("--warm-start") {
        Some(p) => Some(read_fixed_effects(Path::new(&p))?),
        None => None,
    };
    let mode = match &warm {
        Some(fe) => InitMode::Warm(fe),
        None => InitMode::Heuristic,
    };
    let fit = fit_with_init(&dataset, &hyper, &settings, mode)?;

    write_fit_outputs(&out, &dataset, &hyper, &fit)?;
    if args.flag("--plot-data") {
        write_population_curves(&out, &fit)?;
    }
    Ok(())
}

fn write_fit_outputs(
    out: &Path,
    dataset: &Dataset,
    hyper: &Hyperparameters,
    fit: &FitResult,
) -> Result<()> {
    // Parameter document, with the chain SDs appended for coverage summaries.
    let params_path = out.join("params.out");
    write_fixed_effects(&params_path, &fit.theta_hat)?;
    let se = posterior_se(&fit.traces, 1000);
    {
        let mut w = KvWriter::new();
        w.comment("chain SD of each parameter over the window before averaging;");
        w.comment("order matches the trace columns");
        w.vec("posterior_se", &se);
        let text = w.to_text();
        let mut existing = std::fs::read_to_string(&params_path)?;
        existing.push_str(&text);
        std::fs::write(&params_path, existing)?;
    }

    let ids: Vec<String> = dataset.patients.iter().map(|p| p.id.clone()).collect();
    write_random_effects_csv(
        &out.join("random_effects.csv"),
        &ids,
        &fit.re_posterior_mean,
        Some((&fit.space_shift_mean, &fit.survival_shift_mean)),
    )?;

    // One trace row per iteration.
    let names = theta_coordinate_names(hyper.n_outcomes, hyper.n_events, hyper.n_sources);
    let mut text = String::from("iteration,loglik");
    for n in &names {
        text.push(',');
        text.push_str(n);
    }
    for a in &fit.traces.acceptance_names {
        text.push_str(&format!(",accept_{a}"));
    }
    text.push('\n');
    for (i, row) in fit.traces.values.iter().enumerate() {
        text.push_str(&format!("{},{}", i + 1, fmt_float(fit.loglik_history[i])));
        for v in row {
            text.push(',');
            text.push_str(&fmt_float(*v));
        }
        for v in &fit.traces.acceptance[i] {
            text.push(',');
            text.push_str(&fmt_float(*v));
        }
        text.push('\n');
    }
    std::fs::write(out.join("trace.csv"), text)?;
    Ok(())
}

fn write_population_curves(out: &Path, fit: &FitResult) -> Result<()> {
    let fe = &fit.theta_hat;
    let re = RandomEffects::prior_mean(fe.t0, fe.n_sources());
    let u = vec![0.0; fe.n_events()];
    let lo = fe.t0 - 4.0 * fe.sigma_tau;
    let hi = fe.t0 + 6.0 * fe.sigma_tau;
    let mut text = String::from("curve,time_years,value\n");
    for i in 0..=120 {
        let t = lo + (hi - lo) * i as f64 / 120.0;
        for k in 0..fe.n_outcomes() {
            let v = latage::model::population_trajectory(fe, k, t);
            text.push_str(&format!("outcome_{k},{},{}\n", fmt_float(t), fmt_float(v)));
        }
        for l in 0..fe.n_events() {
            let v = latage::model::cif(fe, &re, &u, l, t)?;
            text.push_str(&format!("cif_{l},{},{}\n", fmt_float(t), fmt_float(v)));
        }
    }
    std::fs::write(out.join("population_curves.csv"), text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// personalize
// ---------------------------------------------------------------------------

fn cmd_personalize(args: &Args) -> Result<()> {
    let fe = read_fixed_effects(&args.path("--params")?)?;
    let dataset = Dataset::read_csv_dir(&args.path("--data")?, fe.n_events())?;
    let n_cond = args.usize("--condition-on-visits")?;
    if n_cond == 0 {
        return Err(Error::InvalidInput("--condition-on-visits must be >= 1".into()));
    }
    let horizons = args.f64_list("--horizons")?;
    let out = args.path("--out")?;
    std::fs::create_dir_all(&out)?;
    let seed = args.opt_u64("--seed")?.unwrap_or(0);
    let geometry = fe.geometry()?;
    let opts = PersonalizeOptions { seed, ..Default::default() };

    let mut long_rows = String::from("patient_id,time_years,outcome,observed,predicted,conditioning\n");
    let mut event_rows = String::from("patient_id,event,t_last_years,horizon_years,probability\n");
    let mut plot_rows = String::from("patient_id,curve,time_years,value\n");
    let mut ids = Vec::new();
    let mut res = Vec::new();
    let mut ws = Vec::new();
    let mut us = Vec::new();

    for patient in &dataset.patients {
        // Condition on the first visits only; the event is censored at the
        // conditioning time so later information cannot leak into the fit.
        let n_used = n_cond.min(patient.visits.len());
        let mut conditioned = patient.clone();
        conditioned.visits.truncate(n_used);
        let t_last = conditioned.last_visit_time();
        conditioned.event_time = t_last;
        conditioned.event_code = 0;

        let re = personalize(&conditioned, &fe, &geometry, &opts)?;

        let times: Vec<f64> = patient.visits.iter().map(|v| v.time).collect();
        let pred = predict_longitudinal(&re, &fe, &geometry, &times)?;
        for (j, visit) in patient.visits.iter().enumerate() {
            for k in 0..dataset.n_outcomes {
                long_rows.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    patient.id,
                    fmt_float(visit.time),
                    k,
                    fmt_float(visit.values[k]),
                    fmt_float(pred[j][k]),
                    if j < n_used { 1 } else { 0 }
                ));
            }
        }
        for l in 0..fe.n_events() {
            for &h in &horizons {
                let p = predict_event(&re, &fe, &geometry, l, t_last + h, t_last)?;
                event_rows.push_str(&format!(
                    "{},{},{},{},{}\n",
                    patient.id,
                    l,
                    fmt_float(t_last),
                    fmt_float(h),
                    fmt_float(p)
                ));
            }
        }
        if args.flag("--plot-data") {
            let lo = t_last - 1.0;
            let hi = t_last + horizons.iter().cloned().fold(2.0, f64::max) + 1.0;
            for i in 0..=60 {
                let t = lo + (hi - lo) * i as f64 / 60.0;
                let vals = predict_longitudinal(&re, &fe, &geometry, &[t])?;
                for (k, v) in vals[0].iter().enumerate() {
                    plot_rows.push_str(&format!(
                        "{},outcome_{k},{},{}\n",
                        patient.id,
                        fmt_float(t),
                        fmt_float(*v)
                    ));
                }
                if t >= t_last {
                    for l in 0..fe.n_events() {
                        let p = predict_event(&re, &fe, &geometry, l, t, t_last)?;
                        plot_rows.push_str(&format!(
                            "{},cif_{l},{},{}\n",
                            patient.id,
                            fmt_float(t),
                            fmt_float(p)
                        ));
                    }
                }
            }
        }

        let w = latage::model::space_shift(&geometry, &re.sources)?;
        let u = latage::model::survival_shift(&fe.zeta, &re.sources)?;
        ids.push(patient.id.clone());
        res.push(re);
        ws.push(w);
        us.push(u);
    }

    std::fs::write(out.join("predictions_long.csv"), long_rows)?;
    std::fs::write(out.join("predictions_event.csv"), event_rows)?;
    write_random_effects_csv(&out.join("random_effects.csv"), &ids, &res, Some((&ws, &us)))?;
    if args.flag("--plot-data") {
        std::fs::write(out.join("plot_curves.csv"), plot_rows)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

fn cmd_validate(args: &Args) -> Result<()> {
    let pattern = args.string("--runs")?;
    let truth_config = read_simulation_config(&args.path("--truth-config")?)?;
    let out = args.path("--out")?;
    let run_dirs = expand_glob(&pattern)?;
    if run_dirs.is_empty() {
        return Err(Error::InvalidInput(format!("no run directories match {pattern:?}")));
    }

    let truth = &truth_config.fixed;
    let k = truth.n_outcomes();
    let l = truth.n_events();
    let ns = truth.n_sources();
    let names = theta_coordinate_names(k, l, ns);

    // Collect estimates and SEs per run, in trace-column order.
    let mut estimates: Vec<Vec<f64>> = Vec::new();
    let mut ses: Vec<Vec<f64>> = Vec::new();
    let mut icc_acc: Vec<(String, Vec<f64>)> = Vec::new();
    for dir in &run_dirs {
        let fe = read_fixed_effects(&dir.join("params.out"))?;
        estimates.push(latage::saem::theta_to_coordinates(&fe));
        let doc = KvDoc::read(&dir.join("params.out"))?;
        ses.push(doc.get_vec("posterior_se")?);

        // Per-run ICC of the random effects against the simulation truth.
        let truth_path = dir.join("truth.csv");
        let re_path = dir.join("random_effects.csv");
        if truth_path.exists() && re_path.exists() {
            let (tids, tre, tw, tu) = latage::data::read_random_effects_csv(&truth_path)?;
            let (eids, ere, ew, eu) = latage::data::read_random_effects_csv(&re_path)?;
            if tids == eids {
                let mut push = |name: String, t: Vec<f64>, e: Vec<f64>| -> Result<()> {
                    let v = metrics::icc(&t, &e)?;
                    match icc_acc.iter_mut().find(|(n, _)| *n == name) {
                        Some((_, vals)) => vals.push(v),
                        None => icc_acc.push((name, vec![v])),
                    }
                    Ok(())
                };
                push(
                    "tau".into(),
                    tre.iter().map(|r| r.tau).collect(),
                    ere.iter().map(|r| r.tau).collect(),
                )?;
                push(
                    "xi".into(),
                    tre.iter().map(|r| r.xi).collect(),
                    ere.iter().map(|r| r.xi).collect(),
                )?;
                for kk in 0..k.min(tw.first().map(|r| r.len()).unwrap_or(0)) {
                    push(
                        format!("w_{kk}"),
                        tw.iter().map(|r| r[kk]).collect(),
                        ew.iter().map(|r| r[kk]).collect(),
                    )?;
                }
                for ll in 0..l.min(tu.first().map(|r| r.len()).unwrap_or(0)) {
                    push(
                        format!("u_{ll}"),
                        tu.iter().map(|r| r[ll]).collect(),
                        eu.iter().map(|r| r[ll]).collect(),
                    )?;
                }
            }
        }
    }

    let truth_row = latage::saem::theta_to_coordinates(truth);
    let mut text = String::from("metric,parameter,value,ci_low,ci_high\n");
    text.push_str(&format!("n_runs,,{},,\n", run_dirs.len()));
    for (c, name) in names.iter().enumerate() {
        let truth_v = truth_row[c];
        if truth_v == 0.0 {
            continue; // relative metrics undefined (zero-mean coefficients)
        }
        let est: Vec<f64> = estimates.iter().map(|row| row[c]).collect();
        let se: Vec<f64> = ses.iter().map(|row| row[c]).collect();
        let rb = metrics::relative_bias(&est, truth_v)?;
        let rrmse = metrics::rrmse(&est, truth_v)?;
        text.push_str(&format!("rb_pct,{name},{},,\n", fmt_float(rb)));
        text.push_str(&format!("rrmse_pct,{name},{},,\n", fmt_float(rrmse)));
        for (m, e) in est.iter().enumerate() {
            let ree = metrics::ree(*e, truth_v)?;
            text.push_str(&format!("ree_pct_run{m},{name},{},,\n", fmt_float(ree)));
        }
        let cov = metrics::coverage_rate(&est, &se, truth_v)?;
        text.push_str(&format!(
            "coverage_pct,{name},{},{},{}\n",
            fmt_float(cov.rate),
            fmt_float(cov.ci_low),
            fmt_float(cov.ci_high)
        ));
    }
    for (name, vals) in &icc_acc {
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        text.push_str(&format!("icc,{name},{},,\n", fmt_float(mean)));
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&out, text)?;
    Ok(())
}

/// Minimal glob: `*` in the final path component only.
fn expand_glob(pattern: &str) -> Result<Vec<PathBuf>> {
    let path = Path::new(pattern);
    if !pattern.contains('*') {
        return Ok(if path.is_dir() { vec![path.to_path_buf()] } else { vec![] });
    }
    let parent = path.parent().unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidInput(format!("bad glob {pattern:?}")))?;
    if parent.to_string_lossy().contains('*') {
        return Err(Error::InvalidInput("glob wildcards are only supported in the last component".into()));
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(parent)? {
        let entry = entry?;
        let fname = entry.file_name();
        let fname = fname.to_string_lossy();
        if wildcard_match(name, &fname) && entry.path().is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

fn wildcard_match(pattern: &str, target: &str) -> bool {
    // Segments between '*' must appear in order; anchored at both ends.
    let parts: Vec<&str> = pattern.split('*').collect();
    let mut pos = 0usize;
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            continue;
        }
        match target[pos..].find(part) {
            Some(found) => {
                if i == 0 && found != 0 {
                    return false;
                }
                pos += found + part.len();
            }
            None => return false,
        }
    }
    if let Some(last) = parts.last() {
        if !last.is_empty() && !target.ends_with(last) {
            return false;
        }
    }
    true
}

// ---------------------------------------------------------------------------
// select-sources
// ---------------------------------------------------------------------------

fn cmd_select_sources(args: &Args) -> Result<()> {
    let base_hyper = read_hyperparameters(&args.path("--hyper")?)?;
    let settings = read_saem_settings(&args.path("--settings")?)?;
    let dataset = Dataset::read_csv_dir(&args.path("--data")?, base_hyper.n_events)?;
    let max_sources = args.usize("--max-sources")?;
    let out = args.path("--out")?;
    if max_sources == 0 || max_sources > base_hyper.n_outcomes - 1 {
        return Err(Error::InvalidInput(format!(
            "--max-sources must lie in 1..={}",
            base_hyper.n_outcomes - 1
        )));
    }

    let mut text = String::from("metric,parameter,value,ci_low,ci_high\n");
    let mut best: Option<(usize, f64)> = None;
    for ns in 1..=max_sources {
        let hyper = Hyperparameters { n_sources: ns, ..base_hyper.clone() };
        let fit = fit_with_init(&dataset, &hyper, &settings, InitMode::Heuristic)?;
        let bic = metrics::extended_bic_detailed(&fit, &dataset, &hyper)?;
        text.push_str(&format!("bic,ns_{ns},{},,\n", fmt_float(bic.bic)));
        text.push_str(&format!("loglik,ns_{ns},{},,\n", fmt_float(bic.loglik)));
        text.push_str(&format!("d_random,ns_{ns},{},,\n", bic.d_random));
        text.push_str(&format!("d_fixed,ns_{ns},{},,\n", bic.d_fixed));
        if best.map(|(_, b)| bic.bic < b).unwrap_or(true) {
            best = Some((ns, bic.bic));
        }
    }
    let (best_ns, best_bic) = best.expect("at least one candidate");
    text.push_str(&format!("selected_sources,,{best_ns},,\n"));
    text.push_str(&format!("selected_bic,,{},,\n", fmt_float(best_bic)));
    std::fs::write(&out, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// check-latent-age
// ---------------------------------------------------------------------------

fn cmd_check_latent_age(args: &Args) -> Result<()> {
    let joint = read_fixed_effects(&args.path("--joint-params")?)?;
    let dataset = Dataset::read_csv_dir(&args.path("--data")?, joint.n_events())?;
    let out = args.path("--out")?;

    let aft_fits = aft::fit_weibull_cause_specific(&dataset)?;
    let diagnostics = aft::latent_age_check(&joint, &aft_fits)?;
    let mut text = String::from(
        "event,matched_scale_reldiff_pct,rho_joint,joint_class,rho_aft,rho_aft_ci_low,rho_aft_ci_high,aft_class,concordant\n",
    );
    for d in &diagnostics {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            d.event,
            fmt_float(d.matched_scale_reldiff_pct),
            fmt_float(d.rho_joint),
            d.joint_class.as_str(),
            fmt_float(d.rho_aft),
            fmt_float(d.rho_aft_ci.0),
            fmt_float(d.rho_aft_ci.1),
            d.aft_class.as_str(),
            if d.concordant { 1 } else { 0 }
        ));
    }
    std::fs::write(&out, text)?;
    Ok(())
}
