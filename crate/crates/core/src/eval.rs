//! Dataset evaluation: one grounding run per `(record, affordance)` pair,
//! scored against the manifest's ground truth.

use serde::Serialize;
use thiserror::Error;

use crate::backend::Backend;
use crate::dataset::{Dataset, DatasetError};
use crate::metrics::{
    aggregate, saliency_scores, weighted_fscore, AggregateReport, Aggregation, EvalRow, MetricConfig, MetricError,
    RowStatus, SaliencyScores,
};
use crate::model::GroundingResult;
use crate::par::{map_ordered, Execution};
use crate::pipeline::{ground_affordance, PipelineConfig, PipelineError, Task};
use crate::prompt::PromptSet;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Pipeline(PipelineError),
    #[error("manifest has no (record, affordance) pairs")]
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowOutcome {
    pub row: EvalRow,
    /// Absent when the backend failed.
    pub result: Option<GroundingResult>,
    pub error: Option<String>,
    /// Heatmap ground truth only, for successful rows.
    pub saliency: Option<SaliencyScores>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SaliencySummary {
    pub rows: usize,
    pub kld: f64,
    pub sim: f64,
    pub nss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    /// Sorted by `(sample_id, affordance)`.
    pub rows: Vec<RowOutcome>,
    pub report: AggregateReport,
    pub saliency: Option<SaliencySummary>,
}

#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub pipeline: PipelineConfig,
    pub metric: MetricConfig,
    pub aggregation: Aggregation,
    pub execution: Execution,
}

fn run_pair<B: Backend + ?Sized>(
    dataset: &Dataset,
    backend: &B,
    prompts: &PromptSet,
    settings: &EvalSettings,
    sample_id: &str,
    affordance: &str,
) -> Result<RowOutcome, EvalError> {
    let record = dataset.manifest.record(sample_id).expect("pair comes from the manifest");
    let phrase = dataset
        .manifest
        .vocabulary
        .task_phrase(affordance)
        .expect("validated vocabulary has every task phrase");
    let image = dataset.load_rgb(record)?;
    let gt = dataset.ground_truth(sample_id, affordance)?;
    let task = Task::new(phrase).with_affordance(affordance);
    match ground_affordance(backend, prompts, &image, &task, &settings.pipeline) {
        Ok(result) => {
            let (fscore, saliency) = match &result.mask {
                Some(mask) if result.status == crate::GroundingStatus::Succeeded => {
                    let f = weighted_fscore(mask, &gt.binary(), &settings.metric)?;
                    let s = gt.heatmap().map(|h| saliency_scores(mask, h)).transpose()?;
                    (Some(f), s)
                }
                _ => (None, None),
            };
            Ok(RowOutcome {
                row: EvalRow::new(sample_id, affordance, result.status.into(), fscore),
                result: Some(result),
                error: None,
                saliency,
            })
        }
        Err(PipelineError::Backend(e)) => Ok(RowOutcome {
            row: EvalRow::new(sample_id, affordance, RowStatus::TransportFailure, None),
            result: None,
            error: Some(e.to_string()),
            saliency: None,
        }),
        Err(other) => Err(EvalError::Pipeline(other)),
    }
}

/// Backend failures are recorded per row; configuration, dataset and metric
/// errors abort the run.
pub fn evaluate<B: Backend + ?Sized>(
    dataset: &Dataset,
    backend: &B,
    prompts: &PromptSet,
    settings: &EvalSettings,
) -> Result<EvalOutcome, EvalError> {
    settings.metric.validate()?;
    settings.pipeline.validate().map_err(EvalError::Pipeline)?;
    let mut pairs: Vec<(String, String)> = dataset
        .pairs()
        .into_iter()
        .map(|(r, a)| (r.sample_id.clone(), a.to_string()))
        .collect();
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    pairs.sort();
    let rows = map_ordered(&pairs, settings.execution, |(id, aff)| {
        run_pair(dataset, backend, prompts, settings, id, aff)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let eval_rows: Vec<EvalRow> = rows.iter().map(|r| r.row.clone()).collect();
    let report = aggregate(&eval_rows, settings.aggregation);
    let scored: Vec<&SaliencyScores> = rows.iter().filter_map(|r| r.saliency.as_ref()).collect();
    let saliency = (!scored.is_empty()).then(|| {
        let n = scored.len() as f64;
        SaliencySummary {
            rows: scored.len(),
            kld: scored.iter().map(|s| s.kld).sum::<f64>() / n,
            sim: scored.iter().map(|s| s.sim).sum::<f64>() / n,
            nss: scored.iter().map(|s| s.nss).sum::<f64>() / n,
        }
    });
    Ok(EvalOutcome {
        rows,
        report,
        saliency,
    })
}
