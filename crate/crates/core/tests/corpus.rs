use std::path::{Path, PathBuf};

use oval_core::dataset::load_manifest;
use oval_core::eval::{evaluate, EvalSettings};
use oval_core::metrics::{Aggregation, MetricConfig, RowStatus};
use oval_core::mock::{MockBackend, MockResponder};
use oval_core::par::Execution;
use oval_core::pipeline::{Ablation, PipelineConfig};
use oval_core::prompt::PromptSet;
use oval_core::synth;

fn shipped() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synth10")
}

fn settings(dataset: &oval_core::dataset::Dataset, ablation: Ablation, workers: usize) -> EvalSettings {
    EvalSettings {
        pipeline: PipelineConfig {
            object_vocabulary: dataset.manifest.object_vocabulary.clone(),
            ablation,
            ..PipelineConfig::default()
        },
        metric: MetricConfig::default(),
        aggregation: Aggregation::PerAffordanceMean,
        execution: Execution::with_workers(workers),
    }
}

/// Set `OVAL_REGENERATE_FIXTURES=1` to rewrite the shipped copy.
#[test]
fn shipped_corpus_matches_generator() {
    let corpus = synth::generate().unwrap();
    if std::env::var_os("OVAL_REGENERATE_FIXTURES").is_some() {
        corpus.write_to(&shipped()).unwrap();
    }
    for (rel, bytes) in &corpus.files {
        let on_disk = std::fs::read(shipped().join(rel)).unwrap_or_else(|e| panic!("{}: {e}", rel.display()));
        assert!(on_disk == *bytes, "{} differs from the generator output", rel.display());
    }
}

#[test]
fn ablations_separate_on_corpus() {
    let dataset = load_manifest(&shipped().join("manifest.json")).unwrap();
    assert_eq!(dataset.records().len(), 10);
    let mut averages = Vec::new();
    for ablation in Ablation::ALL {
        let backend = MockBackend::in_process(MockResponder::load(&shipped().join("mock_script.json")).unwrap()).unwrap();
        let out = evaluate(&dataset, &backend, &PromptSet::default(), &settings(&dataset, ablation, 4)).unwrap();
        assert_eq!(out.rows.len(), 20);
        assert!(out.rows.iter().all(|r| r.row.status != RowStatus::TransportFailure && r.row.is_consistent()));
        let ok = out.rows.iter().filter(|r| r.row.status == RowStatus::Succeeded).count();
        let expected = match ablation {
            Ablation::VlmOnly => 1,
            Ablation::NoReprompt => 10,
            Ablation::Full => 15,
        };
        assert_eq!(ok, expected, "{ablation:?}");
        averages.push(out.report.average);
    }
    assert!(averages[0] < averages[1] && averages[1] < averages[2], "{averages:?}");
}

#[test]
fn worker_count_does_not_change_results() {
    let dataset = load_manifest(&shipped().join("manifest.json")).unwrap();
    let run = |workers| {
        let responder = MockResponder::with_images(&synth::mock_script(), &synth::images()).unwrap();
        let backend = MockBackend::in_process(responder).unwrap();
        evaluate(&dataset, &backend, &PromptSet::default(), &settings(&dataset, Ablation::Full, workers)).unwrap()
    };
    assert_eq!(run(1), run(8));
}
