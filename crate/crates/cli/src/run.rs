//! Run orchestration: kernel, optional API server, and outputs.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use gridloop::runlog::CsvLog;
use gridloop::RunSummary;
use gridloop_api::ApiServer;

use crate::scenario::Prepared;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("cannot write {path}: {source}")]
    Output { path: String, source: gridloop::Error },
    #[error("cannot start api server on {addr}: {source}")]
    Listen { addr: String, source: std::io::Error },
    #[error(transparent)]
    Simulation(#[from] gridloop::Error),
}

fn create_log(path: &Path) -> Result<CsvLog<BufWriter<File>>, RunError> {
    let output_err = |source: gridloop::Error| RunError::Output { path: path.display().to_string(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| output_err(e.into()))?;
    }
    let file = File::create(path).map_err(|e| output_err(e.into()))?;
    CsvLog::new(BufWriter::new(file)).map_err(output_err)
}

/// Human-readable subsystem table and warnings, as printed by `validate`.
pub fn describe(p: &Prepared) -> String {
    let mut out = String::from("OK\n");
    let width = p.subsystems.iter().map(|r| r.id.len()).max().unwrap_or(2).max(2);
    let _ = writeln!(out, "{:<width$}  {:<8}  DETAIL", "ID", "CLASS");
    for r in &p.subsystems {
        let _ = writeln!(out, "{:<width$}  {:<8}  {}", r.id, r.class, r.detail);
    }
    let clock = p.sim.clock();
    let _ = writeln!(
        out,
        "start={} step_size_s={} duration_s={} steps={} mode={}",
        clock.start_epoch(),
        clock.step_size_s(),
        p.duration_s,
        p.duration_s / clock.step_size_s() as u64,
        p.mode
    );
    if let Some(addr) = p.listen {
        let _ = writeln!(out, "api=http://{addr}/api/v1");
    }
    out
}

pub fn execute(mut p: Prepared) -> Result<RunSummary, RunError> {
    let mut log = p.csv.as_deref().map(create_log).transpose()?;
    let server = match p.listen {
        Some(addr) => Some(
            ApiServer::start(addr, p.sim.control_plane())
                .map_err(|source| RunError::Listen { addr: addr.to_string(), source })?,
        ),
        None => None,
    };
    if let Some(s) = &server {
        eprintln!("api listening on {}", s.base_url());
    }

    let mut write_err = None;
    let report = p.sim.run_with(p.duration_s, &p.mode, |record| {
        if let (Some(log), None) = (log.as_mut(), &write_err) {
            if let Err(e) = log.write(record) {
                write_err = Some(e);
            }
        }
    });
    if let Some(s) = server {
        if let Err(e) = s.shutdown() {
            tracing::warn!(error = %e, "api server did not shut down cleanly");
        }
    }
    let report = report?;

    if let (Some(path), Some(mut log)) = (p.csv.as_deref(), log) {
        let output_err = |source| RunError::Output { path: path.display().to_string(), source };
        if let Some(e) = write_err {
            return Err(output_err(e));
        }
        log.flush().map_err(output_err)?;
    }
    if let Some(path) = &p.summary {
        std::fs::write(path, format!("{}\n", report.summary))
            .map_err(|e| RunError::Output { path: path.display().to_string(), source: e.into() })?;
    }
    Ok(report.summary)
}
