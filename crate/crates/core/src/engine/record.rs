use serde::{Deserialize, Serialize};

use super::{RunSummary, TtaConfig};
use crate::adapters::SvdAdapter;
use crate::mapk::ControllerStep;
use crate::objectives::LossBreakdown;
use crate::rac1::PlasticityMask;
use crate::stream::TaskId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub t: usize,
    pub segment_id: usize,
    /// Predictions made before this batch's update.
    pub predictions: Vec<usize>,
    pub loss: LossBreakdown,
    pub controller: ControllerStep,
    /// Whether an update was applied (false while frozen or after a skipped step).
    pub updated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TtaConfig,
    pub retrieved_task: TaskId,
    /// Source adapters exactly as retrieved.
    pub retrieved: Vec<SvdAdapter>,
    /// Adapters after the tail reset, before any update.
    pub anchors: Vec<SvdAdapter>,
    pub masks: Vec<PlasticityMask>,
    pub final_adapters: Vec<SvdAdapter>,
    pub steps: Vec<StepRow>,
}

pub const RUN_CSV_COLUMNS: [&str; 15] = [
    "t", "segment_id", "batch_size", "accuracy", "L_prob", "L_proc", "L_guard", "L_total", "H", "P", "C", "A_p", "A_f",
    "eta_t", "updated",
];

impl RunRecord {
    pub fn controller_steps(&self) -> Vec<ControllerStep> {
        self.steps.iter().map(|s| s.controller).collect()
    }

    /// Per-step CSV joined with the evaluated accuracies.
    pub fn steps_csv(&self, summary: &RunSummary) -> String {
        let mut out = RUN_CSV_COLUMNS.join(",");
        out.push('\n');
        for (s, acc) in self.steps.iter().zip(&summary.step_accuracy) {
            let c = &s.controller;
            let row = [
                s.t.to_string(),
                s.segment_id.to_string(),
                s.predictions.len().to_string(),
                acc.to_string(),
                s.loss.l_prob.to_string(),
                s.loss.l_proc.to_string(),
                s.loss.l_guard.to_string(),
                s.loss.l_total.to_string(),
                c.sample.h.to_string(),
                c.sample.p.to_string(),
                c.sample.c.to_string(),
                u8::from(c.activation.a_p).to_string(),
                u8::from(c.activation.a_f).to_string(),
                c.eta.to_string(),
                u8::from(s.updated).to_string(),
            ];
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}
