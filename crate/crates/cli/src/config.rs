//! Config file (TOML or JSON) merged with environment and flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use oval_core::metrics::{Aggregation, MetricConfig, Weighting};
use oval_core::pipeline::{Ablation, PipelineConfig};
use oval_core::prompt::{
    PromptSet, TemplateOverrides, ALTERNATIVE_PART_TEMPLATE, OBJECT_SELECT_TEMPLATE, PART_QUERY_TEMPLATE,
};
use oval_core::BackendConfig;
use serde::{Deserialize, Serialize};

use crate::output::sha256_file;

pub const DEFAULT_BASE: &str = "http://127.0.0.1:8080";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub base: Option<String>,
    pub detect_url: Option<String>,
    pub segment_url: Option<String>,
    pub chat_url: Option<String>,
    pub api_key: Option<String>,
    pub request_timeout_secs: Option<f64>,
    pub max_retries: Option<u32>,
    pub retry_base_delay_secs: Option<f64>,
    pub retry_jitter: Option<bool>,
    pub max_in_flight_chat: Option<usize>,
    pub chat_temperature: Option<f64>,
    /// Serve every request from this script in-process instead of over HTTP.
    pub mock_script: Option<PathBuf>,
    pub planner_url: Option<String>,
    pub planner_fallback: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub aggregation: Option<Aggregation>,
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub metric: MetricConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub prompts: TemplateOverrides,
}

impl FileConfig {
    /// `.json` files parse as JSON, anything else as TOML. Relative
    /// `mock_script` paths resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: FileConfig = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        } else {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        };
        if let Some(script) = &cfg.backend.mock_script {
            if script.is_relative() {
                let dir = path.parent().unwrap_or(Path::new(""));
                cfg.backend.mock_script = Some(dir.join(script));
            }
        }
        Ok(cfg)
    }
}

/// Flag values that take precedence over the file and the environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub backend_base: Option<String>,
    pub mock_script: Option<PathBuf>,
    pub ablation: Option<Ablation>,
    pub confidence_floor: Option<f64>,
    pub max_reprompts: Option<u32>,
    pub objects: Option<Vec<String>>,
    pub beta: Option<f64>,
    pub distance_weighting: bool,
    pub aggregation: Option<Aggregation>,
    pub workers: Option<usize>,
    pub planner_url: Option<String>,
    pub planner_fallback: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MockSource {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedPrompts {
    pub object_select: String,
    pub part_query: String,
    pub alternative_part: String,
}

/// The merged configuration, echoed into every artifact. Worker count is an
/// execution detail that never changes results, so it is kept out of the echo.
#[derive(Debug, Clone, Serialize)]
pub struct EffectiveConfig {
    pub backend: BackendConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockSource>,
    pub pipeline: PipelineConfig,
    pub metric: MetricConfig,
    pub aggregation: Aggregation,
    pub prompts: ResolvedPrompts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub planner_url: Option<String>,
    pub planner_fallback: bool,
    #[serde(skip)]
    pub mock_path: Option<PathBuf>,
    #[serde(skip)]
    pub workers: Option<usize>,
}

impl EffectiveConfig {
    pub fn resolve(file: Option<&Path>, flags: &Overrides, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let cfg = match file {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let b = &cfg.backend;
        let mut backend = BackendConfig::with_base(b.base.as_deref().unwrap_or(DEFAULT_BASE));
        if let Some(u) = &b.detect_url {
            backend.detect_url = u.clone();
        }
        if let Some(u) = &b.segment_url {
            backend.segment_url = u.clone();
        }
        if let Some(u) = &b.chat_url {
            backend.chat_url = u.clone();
        }
        backend.api_key = b.api_key.clone();
        if let Some(x) = b.request_timeout_secs {
            backend.request_timeout_secs = x;
        }
        if let Some(x) = b.max_retries {
            backend.max_retries = x;
        }
        if let Some(x) = b.retry_base_delay_secs {
            backend.retry_base_delay_secs = x;
        }
        if let Some(x) = b.retry_jitter {
            backend.retry_jitter = x;
        }
        if let Some(x) = b.max_in_flight_chat {
            backend.max_in_flight_chat = x;
        }
        if let Some(x) = b.chat_temperature {
            backend.chat_temperature = x;
        }
        backend.apply_env(&env);
        if let Some(base) = &flags.backend_base {
            let fresh = BackendConfig::with_base(base);
            backend.detect_url = fresh.detect_url;
            backend.segment_url = fresh.segment_url;
            backend.chat_url = fresh.chat_url;
        }

        let mut pipeline = cfg.pipeline.clone();
        if let Some(a) = flags.ablation {
            pipeline.ablation = a;
        }
        if let Some(f) = flags.confidence_floor {
            pipeline.confidence_floor = f;
        }
        if let Some(r) = flags.max_reprompts {
            pipeline.max_reprompts = r;
        }
        if let Some(objects) = &flags.objects {
            pipeline.object_vocabulary = objects.clone();
        }
        backend.detect_confidence_floor = pipeline.confidence_floor;

        let mut metric = cfg.metric;
        if let Some(beta) = flags.beta {
            metric.beta = beta;
        }
        if flags.distance_weighting {
            metric.weighting = Weighting::distance_gaussian_default();
        }
        metric.validate()?;
        backend.validate()?;

        PromptSet::from_overrides(&cfg.prompts)?;
        let p = &cfg.prompts;
        let prompts = ResolvedPrompts {
            object_select: p.object_select.clone().unwrap_or_else(|| OBJECT_SELECT_TEMPLATE.into()),
            part_query: p.part_query.clone().unwrap_or_else(|| PART_QUERY_TEMPLATE.into()),
            alternative_part: p.alternative_part.clone().unwrap_or_else(|| ALTERNATIVE_PART_TEMPLATE.into()),
        };

        let mock_path = flags.mock_script.clone().or(b.mock_script.clone());
        let mock = match &mock_path {
            Some(p) => Some(MockSource {
                path: p.display().to_string(),
                sha256: sha256_file(p).with_context(|| format!("mock script {}", p.display()))?,
            }),
            None => None,
        };
        let workers = flags.workers.or(cfg.eval.workers);
        if workers == Some(0) {
            bail!("--workers must be >= 1");
        }
        Ok(EffectiveConfig {
            backend,
            mock,
            pipeline,
            metric,
            aggregation: flags.aggregation.or(cfg.eval.aggregation).unwrap_or_default(),
            prompts,
            planner_url: flags.planner_url.clone().or(b.planner_url.clone()),
            planner_fallback: flags.planner_fallback || b.planner_fallback.unwrap_or(false),
            mock_path,
            workers,
        })
    }

    pub fn prompt_set(&self) -> PromptSet {
        PromptSet::from_overrides(&TemplateOverrides {
            object_select: Some(self.prompts.object_select.clone()),
            part_query: Some(self.prompts.part_query.clone()),
            alternative_part: Some(self.prompts.alternative_part.clone()),
        })
        .expect("validated during resolve")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
