//! Plain CSV writers. Floats use the shortest round-trip form, so identical
//! runs produce byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;

use decopt::rl::CurvePoint;
use decopt::Real;

/// One metrics row of a rollout trace, tagged with its origin.
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub instance_id: String,
    /// Algorithm name in comparisons, checkpoint name in evaluations.
    pub label: String,
    pub iteration: usize,
    pub mse: Real,
    pub objective_error: Real,
    pub consensus_error: Real,
    pub alpha: Real,
    pub beta: Real,
    pub rho: Real,
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text).with_context(|| format!("cannot write `{}`", path.display()))
}

/// `instance_id,iter,mse,obj_err,cons_err,alpha,beta,rho,<label_column>`.
pub fn write_trace_csv(
    path: &Path,
    label_column: &str,
    records: &[TraceRecord],
) -> anyhow::Result<()> {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "instance_id,iter,mse,obj_err,cons_err,alpha,beta,rho,{label_column}"
    );
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.instance_id,
            r.iteration,
            r.mse,
            r.objective_error,
            r.consensus_error,
            r.alpha,
            r.beta,
            r.rho,
            r.label
        );
    }
    write_file(path, &out)
}

/// `update_idx,mean_return,val_mse,clip_frac,policy_loss,value_loss`.
pub fn write_curves_csv(path: &Path, curves: &[CurvePoint<Real>]) -> anyhow::Result<()> {
    let mut out = String::from("update_idx,mean_return,val_mse,clip_frac,policy_loss,value_loss\n");
    for c in curves {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            c.update_idx, c.mean_return, c.val_mse, c.clip_frac, c.policy_loss, c.value_loss
        );
    }
    write_file(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_rows_round_trip_their_floats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let record = TraceRecord {
            instance_id: "a-1".into(),
            label: "learned".into(),
            iteration: 3,
            mse: 0.1,
            objective_error: 1e-12,
            consensus_error: 2.5e-3,
            alpha: 0.30000000000000004,
            beta: 5.0,
            rho: 1.0,
        };
        write_trace_csv(&path, "algorithm", &[record]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "instance_id,iter,mse,obj_err,cons_err,alpha,beta,rho,algorithm"
        );
        let row = lines.next().unwrap();
        assert_eq!(
            row,
            "a-1,3,0.1,0.000000000001,0.0025,0.30000000000000004,5,1,learned"
        );
    }
}
