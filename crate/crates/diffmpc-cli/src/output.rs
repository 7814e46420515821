//! Result files: per-trial curve CSVs and a single summary JSON.  Floats go
//! through `Display`, which is the shortest round-trip form, so two runs
//! with the same seed produce byte-identical files.

use std::io;
use std::path::Path;

use diffmpc::imitation::{EpochStats, TrainResult};
use serde::Serialize;

pub const CURVES_HEADER: &str = "epoch,train_loss,val_loss,test_loss,model_loss";

pub fn write_curves(path: &Path, curves: &[EpochStats]) -> io::Result<()> {
    let mut text = String::from(CURVES_HEADER);
    text.push('\n');
    for row in curves {
        let model = row.model_loss.map(|v| v.to_string()).unwrap_or_default();
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            row.epoch, row.train_loss, row.val_loss, row.test_loss, model
        ));
    }
    std::fs::write(path, text)
}

/// Top-level summary document.  Serialized with `serde_json`, so the key
/// order is exactly the field order here and stable across runs.
#[derive(Debug, Serialize)]
pub struct Summary {
    pub schema_version: u32,
    pub experiment: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub trials: Vec<TrialSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub compare: Vec<TrialCompare>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradcheck: Option<GradcheckSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchSummary>,
    pub wall_clock_seconds: f64,
}

impl Summary {
    pub fn new(experiment: &str, seed: u64) -> Self {
        Summary {
            schema_version: 1,
            experiment: experiment.to_string(),
            seed,
            trials: Vec::new(),
            compare: Vec::new(),
            gradcheck: None,
            bench: None,
            wall_clock_seconds: 0.0,
        }
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("summary serialization");
        text.push('\n');
        std::fs::write(path, text)
    }
}

#[derive(Debug, Serialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub method: String,
    /// Epochs completed, excluding the pre-training evaluation at epoch 0.
    pub epochs_run: usize,
    pub initial_train_loss: f64,
    pub initial_test_loss: f64,
    pub best_train_loss: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub test_loss_at_best: f64,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub final_test_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_loss_at_best: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_model_loss: Option<f64>,
    /// Solves skipped for non-convergence, summed over every epoch.
    pub skipped_solves: usize,
    /// Parameters at the best validation epoch.
    pub recovered_params: Vec<f64>,
    /// For sysid runs: control imitation loss on the test split, evaluated
    /// at the initial and at the recovered parameters.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub imitation_test_initial: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub imitation_test_at_best: Option<f64>,
}

pub fn trial_summary(trial: usize, method: &str, res: &TrainResult) -> TrialSummary {
    let first = res.curves.first().expect("curves include epoch 0");
    let last = res.curves.last().expect("curves are nonempty");
    let at_best = res
        .curves
        .iter()
        .find(|row| row.epoch == res.best_epoch)
        .unwrap_or(last);
    let best_train = res
        .curves
        .iter()
        .map(|row| row.train_loss)
        .fold(f64::INFINITY, f64::min);
    TrialSummary {
        trial,
        method: method.to_string(),
        epochs_run: res.curves.len().saturating_sub(1),
        initial_train_loss: first.train_loss,
        initial_test_loss: first.test_loss,
        best_train_loss: best_train,
        best_val_loss: res.best_val_loss,
        best_epoch: res.best_epoch,
        test_loss_at_best: at_best.test_loss,
        final_train_loss: last.train_loss,
        final_val_loss: last.val_loss,
        final_test_loss: last.test_loss,
        model_loss_at_best: at_best.model_loss,
        final_model_loss: last.model_loss,
        skipped_solves: res.curves.iter().map(|row| row.skipped).sum(),
        recovered_params: res.best_params.clone(),
        imitation_test_initial: None,
        imitation_test_at_best: None,
    }
}

/// Cross-evaluation of the two sysid-compare arms on the held-out test set.
#[derive(Debug, Serialize)]
pub struct TrialCompare {
    pub trial: usize,
    pub sysid_model: ModelEval,
    pub imitation_model: ModelEval,
}

#[derive(Debug, Serialize)]
pub struct ModelEval {
    pub params: Vec<f64>,
    /// Mean squared next-state error over test transitions.
    pub sysid_test_loss: f64,
    /// Control imitation loss over test demonstrations.
    pub imitation_test_loss: f64,
}

#[derive(Debug, Serialize)]
pub struct GradcheckSummary {
    pub env: String,
    pub eps: f64,
    pub threshold: f64,
    pub blocks: Vec<BlockReport>,
    /// Relative error of the full assembled gradient vector.
    pub assembled_rel_error: f64,
    pub pass: bool,
}

#[derive(Debug, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub rel_error: f64,
}

#[derive(Debug, Serialize)]
pub struct BenchSummary {
    pub rows: Vec<BenchRow>,
    /// Mean forward time at the largest cap over the smallest.
    pub forward_growth: f64,
    /// Largest over smallest mean backward time across caps.
    pub backward_spread: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub env: String,
    pub n_state: usize,
    pub n_ctrl: usize,
    pub horizon: usize,
    pub cap: usize,
    pub iters_used: usize,
    pub forward_mean_s: f64,
    pub forward_std_s: f64,
    pub backward_mean_s: f64,
    pub backward_std_s: f64,
}

pub const BENCH_HEADER: &str = "env,n_state,n_ctrl,horizon,cap,iters_used,\
forward_mean_s,forward_std_s,backward_mean_s,backward_std_s";

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> io::Result<()> {
    let mut text = String::from(BENCH_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.env,
            r.n_state,
            r.n_ctrl,
            r.horizon,
            r.cap,
            r.iters_used,
            r.forward_mean_s,
            r.forward_std_s,
            r.backward_mean_s,
            r.backward_std_s
        ));
    }
    std::fs::write(path, text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_csv_uses_lf_and_leaves_missing_model_loss_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        let rows = vec![
            EpochStats {
                epoch: 0,
                train_loss: 1.5,
                val_loss: 2.0,
                test_loss: 2.5,
                model_loss: None,
                skipped: 0,
            },
            EpochStats {
                epoch: 1,
                train_loss: 0.25,
                val_loss: 0.5,
                test_loss: 0.75,
                model_loss: Some(0.125),
                skipped: 2,
            },
        ];
        write_curves(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "epoch,train_loss,val_loss,test_loss,model_loss\n\
             0,1.5,2,2.5,\n\
             1,0.25,0.5,0.75,0.125\n"
        );
        assert!(!text.contains('\r'));
    }

    #[test]
    fn summary_keys_follow_declaration_order() {
        let mut s = Summary::new("gradcheck", 3);
        s.gradcheck = Some(GradcheckSummary {
            env: "lqr".into(),
            eps: 1e-5,
            threshold: 1e-4,
            blocks: vec![],
            assembled_rel_error: 1e-7,
            pass: true,
        });
        let text = serde_json::to_string(&s).unwrap();
        let schema = text.find("schema_version").unwrap();
        let exp = text.find("experiment").unwrap();
        let wall = text.find("wall_clock_seconds").unwrap();
        assert!(schema < exp && exp < wall);
        // empty sections stay out of the document entirely
        assert!(!text.contains("trials"));
        assert!(!text.contains("compare"));
    }
}
