use serde::{Deserialize, Serialize};

use super::{EngineError, Result, RunRecord};
use crate::adapters::{Adapter, SvdAdapter, ToyBackbone};
use crate::stream::{HiddenLabels, LabeledDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub segment_id: usize,
    pub n: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Mean prequential accuracy over all queries.
    pub accuracy: f64,
    pub segments: Vec<SegmentSummary>,
    pub step_accuracy: Vec<f64>,
    /// Source validation accuracy with the retrieved adapters.
    pub source_before: f64,
    /// Source validation accuracy with the final adapters.
    pub source_after: f64,
    pub retention_delta: f64,
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / predictions.len().max(1) as f64
}

pub fn source_accuracy(model: &ToyBackbone, adapters: &[SvdAdapter], data: &LabeledDataset) -> Result<f64> {
    let set: Vec<Option<Adapter>> = adapters.iter().cloned().map(|a| Some(Adapter::Svd(a))).collect();
    let preds = data
        .inputs
        .iter()
        .map(|x| Ok(model.predict(x, &set)?.argmax()))
        .collect::<Result<Vec<_>>>()?;
    Ok(accuracy(&preds, &data.labels))
}

/// Scores a finished run against the hidden labels. This is the only place labels are read.
pub fn evaluate_stream(
    record: &RunRecord,
    labels: &[HiddenLabels],
    model: &ToyBackbone,
    source_val: &LabeledDataset,
) -> Result<RunSummary> {
    if record.steps.len() != labels.len() {
        return Err(EngineError::Mismatch(format!(
            "{} steps but {} label batches",
            record.steps.len(),
            labels.len()
        )));
    }
    let mut step_accuracy = Vec::with_capacity(labels.len());
    let mut segments: Vec<SegmentSummary> = Vec::new();
    let mut seg_hits: Vec<usize> = Vec::new();
    let (mut hits, mut total) = (0usize, 0usize);
    for (s, y) in record.steps.iter().zip(labels) {
        let y = y.labels();
        if s.predictions.len() != y.len() {
            return Err(EngineError::Mismatch(format!("step {} batch size", s.t)));
        }
        let h = s.predictions.iter().zip(y).filter(|(p, l)| p == l).count();
        step_accuracy.push(h as f64 / y.len().max(1) as f64);
        hits += h;
        total += y.len();
        let pos = match segments.iter().position(|g| g.segment_id == s.segment_id) {
            Some(p) => p,
            None => {
                segments.push(SegmentSummary {
                    segment_id: s.segment_id,
                    n: 0,
                    accuracy: 0.0,
                });
                seg_hits.push(0);
                segments.len() - 1
            }
        };
        segments[pos].n += y.len();
        seg_hits[pos] += h;
    }
    for (g, h) in segments.iter_mut().zip(seg_hits) {
        g.accuracy = h as f64 / g.n.max(1) as f64;
    }
    let source_before = source_accuracy(model, &record.retrieved, source_val)?;
    let source_after = source_accuracy(model, &record.final_adapters, source_val)?;
    Ok(RunSummary {
        accuracy: hits as f64 / total.max(1) as f64,
        segments,
        step_accuracy,
        source_before,
        source_after,
        retention_delta: source_after - source_before,
    })
}
