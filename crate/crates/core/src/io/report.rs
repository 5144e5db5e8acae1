use std::fs;
use std::path::{Path, PathBuf};

use super::pipeline::RunReport;
use crate::error::{Error, Result};

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// `model_id,score,rank,method`, one row per model in matrix order.
pub fn scores_csv(report: &RunReport) -> String {
    let mut out = String::from("model_id,score,rank,method\n");
    for s in &report.scores {
        out.push_str(&format!("{},{},{},{}\n", s.model_id, opt(s.score), opt(s.rank), s.method));
    }
    out
}

pub fn bounds_csv(report: &RunReport) -> String {
    let mut out = String::from(
        "source,target,d_eff,delta_emp,delta_theo,ratio,rademacher_share,rademacher,hoeffding_val,hoeffding_train,holds\n",
    );
    for b in &report.bounds {
        let r = &b.report;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            b.source,
            b.target,
            b.d_eff,
            r.delta_emp,
            r.delta_theo,
            opt(r.ratio),
            r.rademacher_share,
            r.rademacher,
            r.hoeffding_val,
            r.hoeffding_train,
            r.holds()
        ));
    }
    out
}

pub fn perturbation_csv(report: &RunReport) -> String {
    let mut out = String::from("job_id,sigma,draws,median,mean,std,max,divergent\n");
    for entry in &report.perturbation {
        for s in &entry.stats {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                entry.job_id,
                s.sigma,
                s.draws,
                opt(s.median),
                opt(s.mean),
                opt(s.std),
                opt(s.max),
                s.divergent
            ));
        }
    }
    out
}

/// Serialized report with stable key order and a trailing newline.
pub fn report_json(report: &RunReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

/// Relative paths and contents of every file the report produces.
pub fn report_files(report: &RunReport) -> Result<Vec<(PathBuf, String)>> {
    let mut files = vec![
        (PathBuf::from("report.json"), report_json(report)?),
        (PathBuf::from("is_matrix.csv"), report.matrix.to_csv()),
        (PathBuf::from("scores.csv"), scores_csv(report)),
    ];
    for c in &report.curves {
        files.push((Path::new("curves").join(format!("{}.csv", c.name)), c.to_csv()));
    }
    if !report.perturbation.is_empty() {
        files.push((Path::new("curves").join("perturbation.csv"), perturbation_csv(report)));
    }
    if !report.bounds.is_empty() {
        files.push((PathBuf::from("bounds.csv"), bounds_csv(report)));
    }
    Ok(files)
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes every report file under `dir`. Files are staged next to their
/// targets and renamed only after all writes succeed; on failure the staged
/// files are removed.
pub fn write_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let files = report_files(report)?;
    let mut staged: Vec<(PathBuf, PathBuf)> = Vec::new();
    let result = (|| -> Result<()> {
        for (rel, contents) in &files {
            let target = dir.join(rel);
            if let Some(parent) = target.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let tmp = tmp_path(&target);
            staged.push((tmp.clone(), target));
            fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
        }
        for (tmp, target) in &staged {
            fs::rename(tmp, target).map_err(|e| Error::io(target, e))?;
        }
        Ok(())
    })();
    if let Err(e) = result {
        for (tmp, _) in &staged {
            let _ = fs::remove_file(tmp);
        }
        return Err(e);
    }
    Ok(staged.into_iter().map(|(_, t)| t).collect())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    if let Err(e) = fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path)) {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
