//! Columnar text emission and run manifests. Output bytes are
//! deterministic for a fixed config; the manifest carries the one
//! timestamp field, which is excluded from hashing concerns.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::diffusion::{ConjectureReport, RbmPath};
use crate::error::Result;
use crate::fluid::InvariantDiagnostics;
use crate::harness::{ExperimentReport, IdentityRow};
use crate::model::DerivedParams;
use crate::simulator::Trajectory;

pub fn config_hash(raw: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(raw.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn manifest(command: &str, config_raw: &str, seed: u64) -> String {
    let ts = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!(
        "command = \"{command}\"\nconfig_sha256 = \"{}\"\nseed = {seed}\nversion = \"{}\"\ntimestamp = {ts}\n",
        config_hash(config_raw),
        env!("CARGO_PKG_VERSION"),
    )
}

pub fn write_out(dir: &Path, name: &str, content: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), content)?;
    Ok(())
}

fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> String {
    let mut s = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:+.9e}", m[(i, j)])).collect();
        let _ = writeln!(s, "  [{}]", row.join(", "));
    }
    s
}

pub fn params_table(dp: &DerivedParams) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "K        = {}", dp.k);
    let _ = writeln!(s, "rho      = {:.12}", dp.rho);
    let _ = writeln!(s, "Gamma    = {:.12}", dp.gamma);
    let _ = writeln!(s, "dstar    = {:.12}", dp.dstar);
    let _ = writeln!(s, "R        = {:.12}", dp.r_ratio);
    let _ = writeln!(
        s,
        "lambda   = [{}]",
        dp.lambda
            .iter()
            .map(|v| format!("{v:.9}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    let _ = writeln!(
        s,
        "Delta_F  = [{}]",
        dp.delta_f
            .iter()
            .map(|v| format!("{v:.9}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    let _ = writeln!(s, "Q =");
    s.push_str(&matrix_rows(&dp.q));
    s
}

pub fn params_tsv(dp: &DerivedParams) -> String {
    let mut s = String::from("name\tindex\tvalue\n");
    let _ = writeln!(s, "rho\t-\t{:.15e}", dp.rho);
    let _ = writeln!(s, "gamma\t-\t{:.15e}", dp.gamma);
    let _ = writeln!(s, "dstar\t-\t{:.15e}", dp.dstar);
    let _ = writeln!(s, "r_ratio\t-\t{:.15e}", dp.r_ratio);
    for (i, v) in dp.lambda.iter().enumerate() {
        let _ = writeln!(s, "lambda\t{i}\t{v:.15e}");
    }
    for (i, v) in dp.delta_f.iter().enumerate() {
        let _ = writeln!(s, "delta_f\t{i}\t{v:.15e}");
    }
    for i in 0..dp.k {
        for j in 0..dp.k {
            let _ = writeln!(s, "q\t{i},{j}\t{:.15e}", dp.q[(i, j)]);
        }
    }
    s
}

pub fn trajectory_tsv(traj: &Trajectory) -> String {
    let k = traj.k();
    let mut s = String::from("t\ts");
    for c in 0..k {
        let _ = write!(s, "\tz{c}");
    }
    s.push_str("\tw");
    for c in 0..k {
        let _ = write!(s, "\ta{c}\td{c}\te{c}\tn{c}\tr{c}");
    }
    s.push('\n');
    for snap in &traj.snapshots {
        let _ = write!(s, "{:.9e}\t{:.9e}", snap.t, snap.s_value);
        for c in 0..k {
            let _ = write!(s, "\t{}", snap.z[c]);
        }
        let _ = write!(s, "\t{:.9e}", snap.workload);
        for c in 0..k {
            let _ = write!(
                s,
                "\t{}\t{}\t{}\t{}\t{}",
                snap.arrivals[c],
                snap.departures[c],
                snap.exogenous[c],
                snap.total_visits[c],
                snap.remaining_visits[c]
            );
        }
        s.push('\n');
    }
    let _ = writeln!(
        s,
        "# events = {}, violations = {}, seed = {}, rep = {}",
        traj.event_count, traj.invariant_violations, traj.seed, traj.rep
    );
    s
}

pub fn identities_tsv(rows: &[IdentityRow]) -> String {
    let mut s = String::from("name\trel_err\ttol\tpass\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{:.6e}\t{:.3e}\t{}", r.name, r.rel_err, r.tol, r.pass);
    }
    s
}

pub fn identities_table(rows: &[IdentityRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(10);
    let mut s = String::new();
    for r in rows {
        let _ = writeln!(
            s,
            "{:<width$}  rel_err {:>10.3e}  tol {:>8.1e}  {}",
            r.name,
            r.rel_err,
            r.tol,
            if r.pass { "PASS" } else { "FAIL" },
        );
    }
    s
}

pub fn fluid_diagnostics_tsv(d: &InvariantDiagnostics) -> String {
    let mut s = String::from("t\td_mu\td_q\tworkload\n");
    for i in 0..d.t.len() {
        let _ = writeln!(
            s,
            "{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}",
            d.t[i], d.d_mu[i], d.d_q[i], d.workload[i]
        );
    }
    s
}

pub fn rbm_path_tsv(p: &RbmPath) -> String {
    let mut s = String::from("t\tw\tregulator\n");
    for (i, (w, l)) in p.values.iter().zip(&p.regulator).enumerate() {
        let _ = writeln!(s, "{:.9e}\t{w:.9e}\t{l:.9e}", i as f64 * p.dt);
    }
    s
}

pub fn samples_tsv(samples: &[f64]) -> String {
    let mut s = String::from("sample\n");
    for v in samples {
        let _ = writeln!(s, "{v:.12e}");
    }
    s
}

pub fn ht_report_tsv(rep: &ExperimentReport) -> String {
    let mut s = String::from(
        "r\trho\tks_w_final\tssc_mu_mean\tssc_q_mean\tz_gap_mean\tevents\twall_ms\tfailed_reps\n",
    );
    for l in &rep.levels {
        let _ = writeln!(
            s,
            "{}\t{:.9}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}",
            l.r,
            l.rho,
            l.ks_w_final,
            l.ssc_mu_mean,
            l.ssc_q_mean,
            l.z_gap_mean,
            l.events_total,
            l.wall_ms,
            l.failed_reps
        );
    }
    s
}

pub fn ht_ks_series_tsv(rep: &ExperimentReport) -> String {
    let mut s = String::from("r\tt\tks\n");
    for l in &rep.levels {
        for (t, d) in &l.ks_per_time {
            let _ = writeln!(s, "{}\t{t:.6}\t{d:.6}", l.r);
        }
    }
    s
}

pub fn conjecture_tsv(rep: &ConjectureReport) -> String {
    let mut s = String::from("name\tindex\tvalue\n");
    let _ = writeln!(s, "r_ratio\t-\t{:.15e}", rep.r_ratio);
    let _ = writeln!(s, "max_abs_diff\t-\t{:.15e}", rep.max_abs_diff);
    let _ = writeln!(s, "gamma\t-\t{:.15e}", rep.gamma);
    let _ = writeln!(s, "r2_gamma\t-\t{:.15e}", rep.scaled_gamma);
    for (i, v) in rep.lift_mass.iter().enumerate() {
        let _ = writeln!(s, "lift_mass\t{i}\t{v:.15e}");
    }
    for (i, v) in rep.r_delta_f.iter().enumerate() {
        let _ = writeln!(s, "r_delta_f\t{i}\t{v:.15e}");
    }
    s
}
