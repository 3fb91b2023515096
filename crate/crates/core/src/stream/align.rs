use serde::{Deserialize, Serialize};

use super::{Result, SourceTask, StreamError, TaskId};
use crate::numerics::cosine_sim;

/// Value of the constant channel appended to every canonical query.
pub const CANONICAL_MARKER: f64 = 1.0;

/// Routing and standardization statistics of one source task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub task_id: TaskId,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// A query before or after alignment. Aligning a canonical query is a no-op.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Query {
    Raw(Vec<f64>),
    Canonical { x: Vec<f64>, template: TaskId },
}

/// Routes raw inputs to the closest source template and rewrites them in
/// that template's standardized coordinates, plus a constant marker channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatAligner {
    templates: Vec<Template>,
}

fn mean_std(rows: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = rows.first().ok_or(StreamError::EmptyBatch)?;
    let n = rows.len() as f64;
    let d = first.len();
    let mut mean = vec![0.0; d];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; d];
    for r in rows {
        var.iter_mut().zip(r).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2) / n);
    }
    Ok((mean, var.into_iter().map(f64::sqrt).collect()))
}

/// Feature-wise mean followed by feature-wise (population) std.
pub fn task_embedding(batch: &[Vec<f64>]) -> Result<Vec<f64>> {
    let (mut mean, std) = mean_std(batch)?;
    mean.extend(std);
    Ok(mean)
}

impl FormatAligner {
    pub fn from_sources(sources: &[SourceTask]) -> Result<Self> {
        if sources.is_empty() {
            return Err(StreamError::TooFewSources { min: 1, got: 0 });
        }
        let templates = sources
            .iter()
            .map(|s| {
                let (mean, std) = mean_std(&s.train.inputs)?;
                let std = std.into_iter().map(|v| v.max(1e-8)).collect();
                Ok(Template {
                    task_id: s.spec.task_id,
                    mean,
                    std,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { templates })
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn template(&self, id: TaskId) -> Option<&Template> {
        self.templates.iter().find(|t| t.task_id == id)
    }

    /// Template whose mean has the highest cosine with `x`; lowest position wins ties.
    pub fn route(&self, x: &[f64]) -> &Template {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, t) in self.templates.iter().enumerate() {
            let c = cosine_sim(x, &t.mean).unwrap_or(f64::NEG_INFINITY);
            if c > best.1 {
                best = (i, c);
            }
        }
        &self.templates[best.0]
    }

    /// Standardizes `x` under `template` and appends the marker channel.
    pub fn standardize(template: &Template, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = x
            .iter()
            .zip(&template.mean)
            .zip(&template.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        out.push(CANONICAL_MARKER);
        out
    }

    pub fn align(&self, q: Query) -> Query {
        match q {
            Query::Raw(x) => {
                let t = self.route(&x);
                Query::Canonical {
                    x: Self::standardize(t, &x),
                    template: t.task_id,
                }
            }
            canonical => canonical,
        }
    }

    /// `(canonical query, template id)` of a raw input.
    pub fn canonicalize(&self, x: &[f64]) -> (Vec<f64>, TaskId) {
        match self.align(Query::Raw(x.to_vec())) {
            Query::Canonical { x, template } => (x, template),
            Query::Raw(_) => unreachable!("align always yields a canonical query"),
        }
    }
}
