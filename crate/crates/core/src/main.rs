use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mpsq::config::{load_run, LoadedRun};
use mpsq::diffusion::{conjecture_check, rbm_marginal_samples, simulate_rbm, RbmScheme};
use mpsq::error::{Error, Result};
use mpsq::fluid::{solve_fluid, FluidConfig, FluidInitial};
use mpsq::harness::{ht_campaign, identity_suite, HtConfig, ModelKernels};
use mpsq::measures::tail_columnar;
use mpsq::model::derived_params;
use mpsq::report;
use mpsq::simulator::{replicate, DescriptorSet, SimOptions};

#[derive(Parser)]
#[command(name = "mpsq", version, about = "Multiclass processor-sharing queue toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Grid step override.
    #[arg(long, global = true)]
    grid_h: Option<f64>,
    /// Diffusion time-step override.
    #[arg(long, global = true)]
    dt: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Print and write the derived parameters of the model.
    Params,
    /// Run replicated simulations and write trajectory files.
    Simulate,
    /// Solve the fluid model and write convergence diagnostics.
    Fluid,
    /// Simulate the reflected workload limit.
    Rbm,
    /// Evaluate the closed-form identity suite.
    Identities,
    /// Heavy-traffic campaign: workload KS statistics across r.
    Ht,
    /// Heavy-traffic campaign with state-space-collapse statistics.
    Ssc,
    /// Queue-length conjecture report.
    Conjecture,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn require_config(cli: &Cli) -> Result<LoadedRun> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    load_run(path)
}

fn out_dir(cli: &Cli, loaded: &LoadedRun) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| loaded.run.out.clone())
}

fn run(cli: &Cli) -> Result<()> {
    let loaded = require_config(cli)?;
    let out = out_dir(cli, &loaded);
    let grids = loaded.run.grids.clone().unwrap_or_default();
    let h = cli.grid_h.unwrap_or(grids.h);
    let dt = cli.dt.unwrap_or(grids.dt);
    let model = &loaded.model;

    match cli.command {
        Command::Params => {
            let dp = derived_params(model)?;
            let table = report::params_table(&dp);
            print!("{table}");
            report::write_out(&out, "params.txt", &table)?;
            report::write_out(&out, "params.tsv", &report::params_tsv(&dp))?;
            report::write_out(&out, "manifest.toml", &report::manifest("params", &loaded.raw, 0))?;
        }
        Command::Simulate => {
            let sim = loaded
                .run
                .simulate
                .clone()
                .ok_or_else(|| Error::Config("missing [simulate] section".into()))?;
            let seed = cli.seed.unwrap_or(sim.seed);
            let snapshot_times = if sim.snapshots.is_empty() {
                (0..sim.n_snapshots)
                    .map(|i| sim.horizon * i as f64 / (sim.n_snapshots - 1).max(1) as f64)
                    .collect()
            } else {
                sim.snapshots.clone()
            };
            let opts = SimOptions {
                horizon: sim.horizon,
                snapshot_times,
                descriptors: if sim.descriptors {
                    DescriptorSet::all()
                } else {
                    DescriptorSet::default()
                },
                seed,
                rep: 0,
                event_cap: mpsq::simulator::DEFAULT_EVENT_CAP,
                check_invariants: true,
                explicit_initial: None,
            };
            let results = replicate(model, &opts, sim.reps);
            let mut total_events = 0u64;
            for (rep, res) in results.into_iter().enumerate() {
                let traj = res?;
                total_events += traj.event_count;
                report::write_out(
                    &out,
                    &format!("trajectory_rep{rep}.tsv"),
                    &report::trajectory_tsv(&traj),
                )?;
            }
            println!("simulated {} replication(s), {total_events} events", sim.reps);
            report::write_out(
                &out,
                "manifest.toml",
                &report::manifest("simulate", &loaded.raw, seed),
            )?;
        }
        Command::Fluid => {
            let fl = loaded
                .run
                .fluid
                .clone()
                .ok_or_else(|| Error::Config("missing [fluid] section".into()))?;
            let dp = derived_params(model)?;
            let initial = match fl.initial.kind.as_str() {
                "zero" => FluidInitial::Zero,
                "invariant" => FluidInitial::Invariant {
                    c: fl.initial.c.unwrap_or(1.0),
                },
                "product" => FluidInitial::ProductForm {
                    zbar0: fl
                        .initial
                        .zbar0
                        .clone()
                        .ok_or_else(|| Error::Config("product initial needs zbar0".into()))?,
                    nu0: fl
                        .initial
                        .nu0
                        .clone()
                        .unwrap_or_else(|| model.initial_services.clone()),
                },
                other => {
                    return Err(Error::Config(format!("unknown fluid initial kind {other}")))
                }
            };
            let cfg = FluidConfig {
                h,
                x_max: grids.x_max,
                t_max: fl.t_max,
            };
            let sol = solve_fluid(model, &dp, &initial, &cfg)?;
            let n_pts = fl.diagnostic_points.max(2);
            let t_grid: Vec<f64> = (0..n_pts)
                .map(|i| fl.t_max * i as f64 / (n_pts - 1) as f64)
                .collect();
            let diag = sol.convergence_to_invariant(model, &dp, &t_grid)?;
            report::write_out(
                &out,
                "fluid_diagnostics.tsv",
                &report::fluid_diagnostics_tsv(&diag),
            )?;
            let n_final = sol.u_index_for_time(fl.t_max);
            for (k, tail) in sol.mu_tails_at(n_final).iter().enumerate() {
                report::write_out(&out, &format!("fluid_mu_final_{k}.tsv"), &tail_columnar(tail))?;
            }
            for (k, tail) in sol.q_tails_at(n_final).iter().enumerate() {
                report::write_out(&out, &format!("fluid_q_final_{k}.tsv"), &tail_columnar(tail))?;
            }
            let final_d = *diag.d_mu.last().unwrap();
            println!(
                "fluid solved: W(0) = {:.6}, final d_mu = {:.6} (epsilon = {})",
                sol.w0, final_d, fl.epsilon
            );
            if final_d > fl.epsilon {
                println!("note: final distance above epsilon");
            }
            report::write_out(&out, "manifest.toml", &report::manifest("fluid", &loaded.raw, 0))?;
        }
        Command::Rbm => {
            let rb = loaded
                .run
                .rbm
                .clone()
                .ok_or_else(|| Error::Config("missing [rbm] section".into()))?;
            let dp = derived_params(model)?;
            let gamma = rb.gamma.unwrap_or(dp.gamma);
            let seed = cli.seed.unwrap_or(rb.seed);
            let path = simulate_rbm(
                rb.w0,
                rb.sigma,
                gamma,
                dt,
                rb.horizon,
                seed,
                RbmScheme::BridgeExact,
            )?;
            report::write_out(&out, "rbm_path.tsv", &report::rbm_path_tsv(&path))?;
            let samples =
                rbm_marginal_samples(rb.w0, rb.sigma, gamma, rb.horizon, dt, rb.paths, seed)?;
            report::write_out(&out, "rbm_samples.tsv", &report::samples_tsv(&samples))?;
            let mean: f64 = samples.iter().sum::<f64>() / samples.len() as f64;
            println!(
                "rbm: sigma = {}, Gamma = {gamma:.6}, E W({}) ~ {mean:.6} over {} paths",
                rb.sigma,
                rb.horizon,
                rb.paths
            );
            report::write_out(&out, "manifest.toml", &report::manifest("rbm", &loaded.raw, seed))?;
        }
        Command::Identities => {
            let dp = derived_params(model)?;
            let kernels = ModelKernels::build(model, h, ModelKernels::default_x_max(model))?;
            let rows = identity_suite(model, &dp, &kernels)?;
            print!("{}", report::identities_table(&rows));
            report::write_out(&out, "identities.tsv", &report::identities_tsv(&rows))?;
            report::write_out(
                &out,
                "manifest.toml",
                &report::manifest("identities", &loaded.raw, 0),
            )?;
        }
        Command::Ht | Command::Ssc => {
            let ht = loaded
                .run
                .ht
                .clone()
                .ok_or_else(|| Error::Config("missing [ht] section".into()))?;
            let with_ssc = matches!(cli.command, Command::Ssc);
            let cfg = HtConfig {
                sigma: ht.sigma,
                r_values: ht.r_values.clone(),
                reps: ht.reps,
                t_horizon: ht.t_horizon,
                n_snapshots: ht.n_snapshots,
                seed: cli.seed.unwrap_or(ht.seed),
                dt,
                grid_h: h,
                x_max: grids.x_max,
                with_ssc,
                event_cap: mpsq::simulator::DEFAULT_EVENT_CAP,
            };
            let rep = ht_campaign(model, &cfg)?;
            for l in &rep.levels {
                if with_ssc {
                    println!(
                        "r = {:>5}: rho = {:.6}  KS(T) = {:.4}  ssc_mu = {:.4}  ssc_q = {:.4}  z_gap = {:.4}  ({} events, {} ms)",
                        l.r, l.rho, l.ks_w_final, l.ssc_mu_mean, l.ssc_q_mean, l.z_gap_mean,
                        l.events_total, l.wall_ms
                    );
                } else {
                    println!(
                        "r = {:>5}: rho = {:.6}  KS(T) = {:.4}  ({} events, {} ms)",
                        l.r, l.rho, l.ks_w_final, l.events_total, l.wall_ms
                    );
                }
            }
            let name = if with_ssc { "ssc" } else { "ht" };
            report::write_out(
                &out,
                &format!("{name}_report.tsv"),
                &report::ht_report_tsv(&rep),
            )?;
            report::write_out(&out, &format!("{name}_ks_series.tsv"), &report::ht_ks_series_tsv(&rep))?;
            report::write_out(
                &out,
                "manifest.toml",
                &report::manifest(name, &loaded.raw, cfg.seed),
            )?;
        }
        Command::Conjecture => {
            let dp = derived_params(model)?;
            let rep = conjecture_check(&dp);
            println!(
                "R = {:.9}, max |<1,Delta^nu> - R Delta_F| = {:.3e}",
                rep.r_ratio, rep.max_abs_diff
            );
            report::write_out(&out, "conjecture.tsv", &report::conjecture_tsv(&rep))?;
            report::write_out(
                &out,
                "manifest.toml",
                &report::manifest("conjecture", &loaded.raw, 0),
            )?;
        }
    }
    Ok(())
}
