use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, Context};
use oval_core::backend::WireBackend;
use oval_core::dataset::{load_manifest, Dataset, GroundTruthSpec};
use oval_core::eval::{evaluate, EvalError, EvalOutcome, EvalSettings};
use oval_core::grasp::{plan_topdown_grasp, CameraIntrinsics, GraspError, GraspPose};
use oval_core::imageio;
use oval_core::metrics::{RowStatus, Score};
use oval_core::mock::MockResponder;
use oval_core::par::Execution;
use oval_core::pipeline::{ground_affordance, Ablation, PipelineError, Task};
use oval_core::{synth, Backend, BackendError, BinaryMask, GroundingStatus};
use oval_gateway::{plan_via_external, serve_until_signal, HttpTransport};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::EffectiveConfig;
use crate::output::{self, sha256_file, sha256_hex, ResultView};

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Success = 0,
    Transport = 1,
    Usage = 2,
    Semantic = 3,
    DepthHole = 4,
}

#[derive(Debug)]
pub struct Failure {
    pub code: Exit,
    pub error: anyhow::Error,
}

pub type Outcome = Result<Exit, Failure>;

trait ExitContext<T> {
    fn or_exit(self, code: Exit) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ExitContext<T> for Result<T, E> {
    fn or_exit(self, code: Exit) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

fn backend_exit(e: &BackendError) -> Exit {
    match e {
        BackendError::ConfigViolation(_) | BackendError::Usage(_) => Exit::Usage,
        _ => Exit::Transport,
    }
}

fn pipeline_failure(e: PipelineError) -> Failure {
    let code = match &e {
        PipelineError::Backend(b) => backend_exit(b),
        _ => Exit::Usage,
    };
    Failure { code, error: e.into() }
}

fn open_backend(cfg: &EffectiveConfig) -> Result<Box<dyn Backend>, Failure> {
    match &cfg.mock_path {
        Some(script) => {
            let responder = MockResponder::load(script)
                .with_context(|| format!("loading mock script {}", script.display()))
                .or_exit(Exit::Usage)?;
            Ok(Box::new(WireBackend::new(responder, &cfg.backend).or_exit(Exit::Usage)?))
        }
        None => Ok(Box::new(HttpTransport::backend(&cfg.backend).or_exit(Exit::Usage)?)),
    }
}

fn file_input(path: &Path) -> Result<Value, Failure> {
    Ok(json!({"path": path.display().to_string(), "sha256": sha256_file(path).or_exit(Exit::Usage)?}))
}

#[derive(Serialize)]
struct GroundArtifact<'a> {
    #[serde(flatten)]
    result: ResultView<'a>,
    task: &'a str,
    affordance: Option<&'a str>,
    inputs: &'a Value,
    config: &'a Value,
}

pub struct GroundArgs<'a> {
    pub image: &'a Path,
    pub task: &'a str,
    pub affordance: Option<&'a str>,
    pub out: &'a Path,
}

pub fn ground(args: GroundArgs<'_>, cfg: &EffectiveConfig) -> Outcome {
    cfg.pipeline.validate().map_err(pipeline_failure)?;
    let image = imageio::load_rgb(args.image).or_exit(Exit::Usage)?;
    let inputs = json!({"image": file_input(args.image)?, "task": args.task, "affordance": args.affordance});
    let config = cfg.to_json();
    let backend = open_backend(cfg)?;
    let mut task = Task::new(args.task);
    if let Some(a) = args.affordance {
        task = task.with_affordance(a);
    }
    let result =
        ground_affordance(&*backend, &cfg.prompt_set(), &image, &task, &cfg.pipeline).map_err(pipeline_failure)?;

    let artifact = GroundArtifact {
        result: ResultView::of(&result),
        task: args.task,
        affordance: args.affordance,
        inputs: &inputs,
        config: &config,
    };
    output::write_json(&args.out.join("result.json"), &artifact).or_exit(Exit::Usage)?;
    let mask = match &result.mask {
        Some(m) => m.clone(),
        None => BinaryMask::empty(image.width(), image.height()).or_exit(Exit::Usage)?,
    };
    output::write_bytes(&args.out.join("mask.png"), &output::mask_png(&mask, &config, &inputs).or_exit(Exit::Usage)?)
        .or_exit(Exit::Usage)?;
    let color = output::affordance_color(args.affordance.unwrap_or(args.task));
    let overlay = output::overlay(&image, &mask, color);
    output::write_bytes(&args.out.join("overlay.png"), &output::rgb_png(&overlay, &config, &inputs).or_exit(Exit::Usage)?)
        .or_exit(Exit::Usage)?;

    println!(
        "{} object={} parts={:?} area={}",
        result.status.as_str(),
        result.selected_object.as_deref().unwrap_or("-"),
        result.part_names_tried,
        mask.area()
    );
    Ok(if result.status == GroundingStatus::Succeeded {
        Exit::Success
    } else {
        Exit::Semantic
    })
}

/// Content digest of the manifest and every file it references.
fn dataset_inputs(manifest_path: &Path, dataset: &Dataset) -> Result<Value, Failure> {
    let mut files = BTreeMap::new();
    for r in dataset.records() {
        let mut paths = vec![r.rgb.clone()];
        paths.extend(r.depth.clone());
        for spec in r.gt.values() {
            if let GroundTruthSpec::Heatmap(p) = spec {
                paths.push(p.clone());
            }
        }
        for p in paths {
            let digest = sha256_file(&dataset.resolve(&p)).or_exit(Exit::Usage)?;
            files.insert(p.display().to_string(), digest);
        }
    }
    let listing: String = files.iter().map(|(p, d)| format!("{d}  {p}\n")).collect();
    Ok(json!({
        "manifest": file_input(manifest_path)?,
        "files": files.len(),
        "files_sha256": sha256_hex(listing.as_bytes()),
    }))
}

fn fmt_score(x: f64) -> String {
    format!("{x}")
}

fn write_eval(out: &Path, outcome: &EvalOutcome, dataset: &Dataset, config: &Value, inputs: &Value) -> anyhow::Result<()> {
    let mut csv_bytes = Vec::new();
    writeln!(csv_bytes, "# {}: {}", output::PNG_CONFIG_KEY, config)?;
    writeln!(csv_bytes, "# {}: {}", output::PNG_INPUTS_KEY, inputs)?;
    {
        let mut w = csv::Writer::from_writer(&mut csv_bytes);
        w.write_record(["sample_id", "affordance", "status", "fscore"])?;
        for r in &outcome.rows {
            w.write_record([
                r.row.sample_id.as_str(),
                r.row.affordance.as_str(),
                r.row.status.as_str(),
                &fmt_score(r.row.fscore.value()),
            ])?;
        }
        w.flush()?;
    }
    output::write_bytes(&out.join("eval.csv"), &csv_bytes)?;

    for r in &outcome.rows {
        let stem = output::file_stem(&[&r.row.sample_id, &r.row.affordance]);
        let record = dataset.manifest.record(&r.row.sample_id).expect("row from manifest");
        let row_inputs = json!({
            "rgb": {"path": record.rgb.display().to_string(), "sha256": sha256_file(&dataset.resolve(&record.rgb))?},
            "affordance": r.row.affordance,
            "dataset": inputs,
        });
        let mut body = json!({
            "sample_id": r.row.sample_id,
            "affordance": r.row.affordance,
            "row_status": r.row.status.as_str(),
            "fscore": r.row.fscore.value(),
            "zero_filled": matches!(r.row.fscore, Score::ZeroFilled),
        });
        if let Some(result) = &r.result {
            body["result"] = serde_json::to_value(ResultView::of(result))?;
        }
        if let Some(e) = &r.error {
            body["error"] = json!(e);
        }
        if let Some(s) = &r.saliency {
            body["saliency"] = serde_json::to_value(s)?;
        }
        body["inputs"] = row_inputs.clone();
        body["config"] = config.clone();
        output::write_json(&out.join("results").join(format!("{stem}.json")), &body)?;
        if let Some(mask) = r.result.as_ref().and_then(|x| x.mask.as_ref()) {
            output::write_bytes(&out.join("masks").join(format!("{stem}.png")), &output::mask_png(mask, config, &row_inputs)?)?;
        }
    }

    let mut status_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &outcome.rows {
        *status_counts.entry(r.row.status.as_str()).or_default() += 1;
    }
    let summary = json!({
        "ablation": config["pipeline"]["ablation"],
        "aggregation": outcome.report.mode,
        "average": outcome.report.average,
        "per_affordance": outcome.report.per_affordance,
        "rows": outcome.report.rows,
        "zero_filled": outcome.report.zero_filled,
        "transport_failures": status_counts.get(RowStatus::TransportFailure.as_str()).copied().unwrap_or(0),
        "status_counts": status_counts,
        "saliency": outcome.saliency,
        "inputs": inputs,
        "config": config,
    });
    output::write_json(&out.join("summary.json"), &summary)
}

fn eval_failure(e: EvalError) -> Failure {
    match e {
        EvalError::Pipeline(p) => pipeline_failure(p),
        other => Failure {
            code: Exit::Usage,
            error: other.into(),
        },
    }
}

fn run_eval(manifest: &Path, cfg: &EffectiveConfig, out: &Path) -> Result<EvalOutcome, Failure> {
    let dataset = load_manifest(manifest).or_exit(Exit::Usage)?;
    let mut cfg = cfg.clone();
    if cfg.pipeline.object_vocabulary.is_empty() {
        cfg.pipeline.object_vocabulary = dataset.manifest.object_vocabulary.clone();
    }
    let inputs = dataset_inputs(manifest, &dataset)?;
    let config = cfg.to_json();
    let backend = open_backend(&cfg)?;
    let settings = EvalSettings {
        pipeline: cfg.pipeline.clone(),
        metric: cfg.metric,
        aggregation: cfg.aggregation,
        execution: match cfg.workers {
            Some(n) => Execution::with_workers(n),
            None => Execution::default(),
        },
    };
    let outcome = evaluate(&dataset, &*backend, &cfg.prompt_set(), &settings).map_err(eval_failure)?;
    write_eval(out, &outcome, &dataset, &config, &inputs).or_exit(Exit::Usage)?;
    Ok(outcome)
}

fn all_transport_failures(outcome: &EvalOutcome) -> bool {
    outcome.rows.iter().all(|r| r.row.status == RowStatus::TransportFailure)
}

pub fn eval(manifest: &Path, cfg: &EffectiveConfig, out: &Path) -> Outcome {
    let outcome = run_eval(manifest, cfg, out)?;
    println!(
        "{}: average {} over {} rows ({} zero-filled)",
        cfg.pipeline.ablation.as_str(),
        outcome.report.average,
        outcome.report.rows,
        outcome.report.zero_filled
    );
    if all_transport_failures(&outcome) {
        let first = outcome.rows.iter().find_map(|r| r.error.clone()).unwrap_or_default();
        return Err(Failure {
            code: Exit::Transport,
            error: anyhow!("every row failed at the backend; first error: {first}"),
        });
    }
    Ok(Exit::Success)
}

/// Runs every ablation into `out/<ablation>/` and writes `out/ablation.json`.
pub fn ablation(manifest: &Path, cfg: &EffectiveConfig, out: &Path) -> Outcome {
    let mut averages = Vec::new();
    for a in Ablation::ALL {
        let mut c = cfg.clone();
        c.pipeline.ablation = a;
        let outcome = run_eval(manifest, &c, &out.join(a.as_str()))?;
        if all_transport_failures(&outcome) {
            return Err(Failure {
                code: Exit::Transport,
                error: anyhow!("every {} row failed at the backend", a.as_str()),
            });
        }
        println!("{:<12} {}", a.as_str(), outcome.report.average);
        averages.push((a.as_str(), outcome.report.average));
    }
    let ordered = averages.windows(2).all(|w| w[0].1 <= w[1].1);
    let strict = averages.windows(2).all(|w| w[0].1 < w[1].1);
    let body = json!({
        "averages": averages.iter().map(|(a, v)| (a.to_string(), json!(v))).collect::<serde_json::Map<_, _>>(),
        "order": averages.iter().map(|(a, _)| a).collect::<Vec<_>>(),
        "weakly_increasing": ordered,
        "strictly_increasing": strict,
        "config": cfg.to_json(),
    });
    output::write_json(&out.join("ablation.json"), &body).or_exit(Exit::Usage)?;
    Ok(Exit::Success)
}

pub fn mock_serve(script: &Path, bind: &str) -> Outcome {
    let responder = MockResponder::load(script)
        .with_context(|| format!("loading mock script {}", script.display()))
        .or_exit(Exit::Usage)?;
    serve_until_signal(responder, bind, |addr| {
        println!("listening on http://{addr}");
        let _ = std::io::stdout().flush();
    })
    .with_context(|| format!("serving on {bind}"))
    .or_exit(Exit::Usage)?;
    Ok(Exit::Success)
}

fn grasp_failure(e: GraspError) -> Failure {
    let code = match &e {
        GraspError::DepthHole { .. } => Exit::DepthHole,
        GraspError::MaskTooSmall { .. } | GraspError::Planner(_) => Exit::Semantic,
        GraspError::Backend(b) => backend_exit(b),
        GraspError::InvalidDepth(_) | GraspError::Intrinsics(_) | GraspError::Model(_) => Exit::Usage,
    };
    Failure { code, error: e.into() }
}

pub struct GraspArgs<'a> {
    pub mask: &'a Path,
    pub depth: &'a Path,
    pub intrinsics: &'a Path,
    pub out: &'a Path,
}

pub fn grasp(args: GraspArgs<'_>, cfg: &EffectiveConfig) -> Outcome {
    let mask = imageio::load_mask_png(args.mask).or_exit(Exit::Usage)?;
    let depth = imageio::load_depth_png(args.depth).or_exit(Exit::Usage)?;
    let k_text = std::fs::read_to_string(args.intrinsics)
        .with_context(|| format!("reading {}", args.intrinsics.display()))
        .or_exit(Exit::Usage)?;
    let k: CameraIntrinsics = serde_json::from_str(&k_text)
        .with_context(|| format!("parsing intrinsics {}", args.intrinsics.display()))
        .or_exit(Exit::Usage)?;
    k.validate().map_err(grasp_failure)?;
    let inputs = json!({
        "mask": file_input(args.mask)?,
        "depth": file_input(args.depth)?,
        "intrinsics": file_input(args.intrinsics)?,
    });

    let (pose, planner): (GraspPose, &str) = match &cfg.planner_url {
        None => (plan_topdown_grasp(&mask, &depth, &k).map_err(grasp_failure)?, "builtin"),
        Some(url) => match plan_via_external(&mask, &depth, &k, url, &cfg.backend, false) {
            Ok(p) => (p, "external"),
            Err(GraspError::Backend(e)) if cfg.planner_fallback && e.is_transport() => {
                eprintln!("warning: planner unavailable ({e}); using the built-in planner");
                (plan_topdown_grasp(&mask, &depth, &k).map_err(grasp_failure)?, "builtin-fallback")
            }
            Err(e) => return Err(grasp_failure(e)),
        },
    };
    let body = json!({
        "pose": pose,
        "planner": planner,
        "inputs": inputs,
        "config": cfg.to_json(),
    });
    output::write_json(args.out, &body).or_exit(Exit::Usage)?;
    println!(
        "{planner}: position [{:.4}, {:.4}, {:.4}] m, yaw {:.2} deg",
        pose.position[0],
        pose.position[1],
        pose.position[2],
        pose.yaw.to_degrees()
    );
    Ok(Exit::Success)
}

pub fn gen_fixtures(out: &Path) -> Outcome {
    let corpus = synth::generate().or_exit(Exit::Usage)?;
    corpus.write_to(out).or_exit(Exit::Usage)?;
    println!("wrote {} files to {}", corpus.files.len(), out.display());
    Ok(Exit::Success)
}
