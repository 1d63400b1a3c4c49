//! The grounding state machine.
//!
//! ```text
//! detect ─▶ filter ─▶ select objects ─▶ query part ─▶ segment ─┬─▶ Succeeded
//!   │          │            │                │                 │
//!   │   NoObjectDetected  NoObjectSelected  PartNotFound   empty ─▶ ask for an
//!   │                                                       alternative name,
//!   └─ backend errors propagate as PipelineError            segment again
//! ```
//!
//! Semantic failures are data: they come back as a [`GroundingResult`] with
//! the matching status and no mask. Only backend and configuration problems
//! are errors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, ChatMessage, SegmentCandidate};
use crate::model::{BinaryMask, Detection, GroundingResult, GroundingStatus, RgbImage, TraceRecord};
use crate::prompt::{extract_list, parse_structured_reply, PromptError, PromptSet};

/// The language backend is always queried at zero temperature.
pub const CHAT_TEMPERATURE: f64 = 0.0;

pub mod stage {
    pub const DETECT: &str = "detect";
    pub const SELECT_OBJECTS: &str = "select_objects";
    pub const PART_QUERY: &str = "part_query";
    pub const ALTERNATIVE_PART: &str = "alternative_part";
    pub const SEGMENT: &str = "segment";
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    /// Retryable at the caller's discretion when `is_transport()` holds.
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl PipelineError {
    pub fn is_transport(&self) -> bool {
        matches!(self, PipelineError::Backend(e) if e.is_transport())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    /// Full pipeline without alternative-name rounds.
    NoReprompt,
    /// Segmentation backend alone, queried with the bare affordance word.
    VlmOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::VlmOnly, Ablation::NoReprompt, Ablation::Full];

    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoReprompt => "no-reprompt",
            Ablation::VlmOnly => "vlm-only",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Ablation::Full),
            "no-reprompt" => Ok(Ablation::NoReprompt),
            "vlm-only" => Ok(Ablation::VlmOnly),
            other => Err(format!("unknown ablation {other:?}; expected full, no-reprompt or vlm-only")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidatePick {
    #[default]
    HighestConfidence,
    Union,
}

fn default_floor() -> f64 {
    0.5
}
fn default_reprompts() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_floor")]
    pub confidence_floor: f64,
    #[serde(default = "default_reprompts")]
    pub max_reprompts: u32,
    #[serde(default)]
    pub candidate_pick: CandidatePick,
    #[serde(default)]
    pub object_vocabulary: Vec<String>,
    #[serde(default)]
    pub ablation: Ablation,
    /// Ground every selected object instead of only the first.
    #[serde(default)]
    pub per_object: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            confidence_floor: default_floor(),
            max_reprompts: default_reprompts(),
            candidate_pick: CandidatePick::default(),
            object_vocabulary: Vec::new(),
            ablation: Ablation::Full,
            per_object: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(0.0..=1.0).contains(&self.confidence_floor) {
            return Err(PipelineError::Config(format!(
                "confidence_floor {} outside [0, 1]",
                self.confidence_floor
            )));
        }
        if self.ablation != Ablation::VlmOnly && self.object_vocabulary.iter().all(|o| o.trim().is_empty()) {
            return Err(PipelineError::Config(
                "object_vocabulary must not be empty unless the ablation is vlm-only".into(),
            ));
        }
        Ok(())
    }

    /// Reprompt rounds actually allowed under the configured ablation.
    pub fn reprompt_budget(&self) -> u32 {
        match self.ablation {
            Ablation::Full => self.max_reprompts,
            Ablation::NoReprompt | Ablation::VlmOnly => 0,
        }
    }
}

/// What to ground: the imperative task phrase for the language stages and,
/// optionally, the bare affordance word used by the vlm-only ablation (which
/// falls back to the phrase).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub phrase: String,
    pub affordance: Option<String>,
}

impl Task {
    pub fn new(phrase: impl Into<String>) -> Task {
        Task {
            phrase: phrase.into(),
            affordance: None,
        }
    }

    pub fn with_affordance(mut self, affordance: impl Into<String>) -> Task {
        self.affordance = Some(affordance.into());
        self
    }

    fn vlm_query(&self) -> &str {
        self.affordance.as_deref().unwrap_or(&self.phrase)
    }
}

/// Confidence `≥ floor` is kept; input order is preserved.
pub fn filter_detections(detections: &[Detection], floor: f64) -> Vec<Detection> {
    detections.iter().filter(|d| d.confidence >= floor).cloned().collect()
}

/// Distinct labels in first-seen order.
pub fn detected_labels(detections: &[Detection]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for d in detections {
        if !out.iter().any(|l| l.eq_ignore_ascii_case(&d.label)) {
            out.push(d.label.clone());
        }
    }
    out
}

/// Outcome of a language stage that did not yield a usable answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageFailure {
    /// The reply lacked the required headers, twice.
    Unparseable,
    /// Parsed, but nothing usable in it.
    Empty,
}

/// Runs the stages against one backend, recording every exchange.
pub struct Grounder<'a, B: Backend + ?Sized> {
    backend: &'a B,
    prompts: &'a PromptSet,
    trace: Vec<TraceRecord>,
}

fn candidates_summary(c: &[SegmentCandidate]) -> String {
    if c.is_empty() {
        return "no candidates".into();
    }
    c.iter()
        .map(|c| format!("{} ({:.4}, {} px)", c.part_label, c.confidence, c.mask.area()))
        .collect::<Vec<_>>()
        .join("; ")
}

/// `"{object} {part}"`, unless the part name already starts with the object.
pub fn segment_query(object_name: &str, part: &str) -> String {
    let part = part.trim();
    let object_name = object_name.trim();
    let lower = part.to_lowercase();
    let obj = object_name.to_lowercase();
    if lower == obj || lower.starts_with(&format!("{obj} ")) {
        part.to_string()
    } else {
        format!("{object_name} {part}")
    }
}

impl<'a, B: Backend + ?Sized> Grounder<'a, B> {
    pub fn new(backend: &'a B, prompts: &'a PromptSet) -> Self {
        Grounder {
            backend,
            prompts,
            trace: Vec::new(),
        }
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn into_trace(self) -> Vec<TraceRecord> {
        self.trace
    }

    fn record(&mut self, stage: &str, request: impl Into<String>, response: impl Into<String>) {
        self.trace.push(TraceRecord {
            stage: stage.to_string(),
            request: request.into(),
            response: response.into(),
        });
    }

    fn chat(&mut self, stage: &str, prompt: &str) -> Result<String, PipelineError> {
        match self.backend.chat(&[ChatMessage::user(prompt)], CHAT_TEMPERATURE) {
            Ok(reply) => {
                self.record(stage, prompt, reply.clone());
                Ok(reply)
            }
            Err(e) => {
                self.record(stage, prompt, format!("error: {e}"));
                Err(e.into())
            }
        }
    }

    /// Asks `prompt`, re-asking once if the reply lacks `headers`. Returns
    /// the list extracted from the first header's section.
    fn ask_list(&mut self, stage: &str, prompt: &str, headers: &[&str]) -> Result<Result<Vec<String>, StageFailure>, PipelineError> {
        for _ in 0..2 {
            let reply = self.chat(stage, prompt)?;
            if let Ok(parsed) = parse_structured_reply(&reply, headers) {
                let items = extract_list(parsed.section(headers[0]).unwrap_or_default());
                return Ok(if items.is_empty() { Err(StageFailure::Empty) } else { Ok(items) });
            }
        }
        Ok(Err(StageFailure::Unparseable))
    }

    pub fn detect(&mut self, image: &RgbImage, labels: &[String]) -> Result<Vec<Detection>, PipelineError> {
        let request = labels.join(", ");
        match self.backend.detect_objects(image, labels) {
            Ok(d) => {
                let summary = d
                    .iter()
                    .map(|d| format!("{} ({:.4})", d.label, d.confidence))
                    .collect::<Vec<_>>()
                    .join("; ");
                self.record(stage::DETECT, request, summary);
                Ok(d)
            }
            Err(e) => {
                self.record(stage::DETECT, request, format!("error: {e}"));
                Err(e.into())
            }
        }
    }

    /// Selected objects, restricted to `detected` (case-insensitive) and
    /// returned with the detector's spelling in the language backend's order.
    pub fn select_objects(&mut self, task: &str, detected: &[String]) -> Result<Result<Vec<String>, StageFailure>, PipelineError> {
        let prompt = self.prompts.render_object_prompt(task, detected)?;
        let named = match self.ask_list(stage::SELECT_OBJECTS, &prompt, &["objects", "reason"])? {
            Ok(n) => n,
            Err(f) => return Ok(Err(f)),
        };
        let mut out: Vec<String> = Vec::new();
        for n in named {
            if let Some(d) = detected.iter().find(|d| d.eq_ignore_ascii_case(&n)) {
                if !out.contains(d) {
                    out.push(d.clone());
                }
            }
        }
        Ok(if out.is_empty() { Err(StageFailure::Empty) } else { Ok(out) })
    }

    /// First part name of the reply, verbatim.
    pub fn query_part(&mut self, task: &str, object_name: &str) -> Result<Result<String, StageFailure>, PipelineError> {
        let prompt = self.prompts.render_part_prompt(task, object_name)?;
        Ok(self
            .ask_list(stage::PART_QUERY, &prompt, &["part", "reason"])?
            .map(|mut parts| parts.swap_remove(0)))
    }

    fn segment(&mut self, image: &RgbImage, query: &str) -> Result<Vec<SegmentCandidate>, PipelineError> {
        match self.backend.segment_part(image, query) {
            Ok(mut c) => {
                self.record(stage::SEGMENT, query, candidates_summary(&c));
                c.retain(|c| c.mask.area() > 0);
                Ok(c)
            }
            Err(e) => {
                self.record(stage::SEGMENT, query, format!("error: {e}"));
                Err(e.into())
            }
        }
    }

    fn pick(candidates: &[SegmentCandidate], how: CandidatePick) -> BinaryMask {
        match how {
            CandidatePick::HighestConfidence => candidates[0].mask.clone(),
            CandidatePick::Union => candidates[1..]
                .iter()
                .fold(candidates[0].mask.clone(), |acc, c| acc.union(&c.mask).unwrap_or(acc)),
        }
    }

    /// Segments `"{object} {part}"`, asking for alternative part names while
    /// the result is empty and the budget lasts. Returns the mask, if any,
    /// and every part name tried.
    pub fn segment_with_reprompt(
        &mut self,
        image: &RgbImage,
        object_name: &str,
        first_part: &str,
        reprompts: u32,
        pick: CandidatePick,
    ) -> Result<(Option<BinaryMask>, Vec<String>), PipelineError> {
        let mut tried = vec![first_part.to_string()];
        let candidates = self.segment(image, &segment_query(object_name, first_part))?;
        if !candidates.is_empty() {
            return Ok((Some(Self::pick(&candidates, pick)), tried));
        }
        for _ in 0..reprompts {
            let prompt = self.prompts.render_alternative_prompt(object_name, &tried)?;
            let Ok(names) = self.ask_list(stage::ALTERNATIVE_PART, &prompt, &["part", "reason"])? else {
                continue;
            };
            // A name that was already tried spends the round without a segment call.
            let Some(name) = names
                .into_iter()
                .find(|n| !tried.iter().any(|t| t.eq_ignore_ascii_case(n)))
            else {
                continue;
            };
            tried.push(name.clone());
            let candidates = self.segment(image, &segment_query(object_name, &name))?;
            if !candidates.is_empty() {
                return Ok((Some(Self::pick(&candidates, pick)), tried));
            }
        }
        Ok((None, tried))
    }
}

fn failed(status: GroundingStatus, selected: Option<String>, tried: Vec<String>, trace: Vec<TraceRecord>) -> GroundingResult {
    GroundingResult {
        status,
        selected_object: selected,
        part_names_tried: tried,
        mask: None,
        trace,
    }
}

/// Grounds `task` in `image`. With `per_object` set, one result per selected
/// object is returned; otherwise exactly one.
pub fn ground_affordance_all<B: Backend + ?Sized>(
    backend: &B,
    prompts: &PromptSet,
    image: &RgbImage,
    task: &Task,
    config: &PipelineConfig,
) -> Result<Vec<GroundingResult>, PipelineError> {
    config.validate()?;
    let mut g = Grounder::new(backend, prompts);

    if config.ablation == Ablation::VlmOnly {
        let query = task.vlm_query().trim().to_string();
        let candidates = g.segment(image, &query)?;
        let mask = (!candidates.is_empty()).then(|| Grounder::<B>::pick(&candidates, config.candidate_pick));
        let status = if mask.is_some() {
            GroundingStatus::Succeeded
        } else {
            GroundingStatus::PartNotFound
        };
        return Ok(vec![GroundingResult {
            status,
            selected_object: None,
            part_names_tried: vec![query],
            mask,
            trace: g.into_trace(),
        }]);
    }

    let vocabulary: Vec<String> = config
        .object_vocabulary
        .iter()
        .filter(|o| !o.trim().is_empty())
        .cloned()
        .collect();
    let detections = g.detect(image, &vocabulary)?;
    let kept = filter_detections(&detections, config.confidence_floor);
    if kept.is_empty() {
        return Ok(vec![failed(GroundingStatus::NoObjectDetected, None, vec![], g.into_trace())]);
    }
    let labels = detected_labels(&kept);
    let selected = match g.select_objects(&task.phrase, &labels)? {
        Ok(s) => s,
        Err(_) => return Ok(vec![failed(GroundingStatus::NoObjectSelected, None, vec![], g.into_trace())]),
    };
    let objects = if config.per_object { selected } else { vec![selected[0].clone()] };

    let mut results = Vec::with_capacity(objects.len());
    // Each per-object result carries the shared prefix of the trace.
    let prefix = g.trace().to_vec();
    for object in objects {
        let mut og = Grounder {
            backend,
            prompts,
            trace: prefix.clone(),
        };
        let part = match og.query_part(&task.phrase, &object)? {
            Ok(p) => p,
            Err(_) => {
                results.push(failed(GroundingStatus::PartNotFound, Some(object), vec![], og.into_trace()));
                continue;
            }
        };
        let (mask, tried) =
            og.segment_with_reprompt(image, &object, &part, config.reprompt_budget(), config.candidate_pick)?;
        let status = if mask.is_some() {
            GroundingStatus::Succeeded
        } else {
            GroundingStatus::PartNotFound
        };
        results.push(GroundingResult {
            status,
            selected_object: Some(object),
            part_names_tried: tried,
            mask,
            trace: og.into_trace(),
        });
    }
    Ok(results)
}

/// Grounds `task` for the first selected object.
pub fn ground_affordance<B: Backend + ?Sized>(
    backend: &B,
    prompts: &PromptSet,
    image: &RgbImage,
    task: &Task,
    config: &PipelineConfig,
) -> Result<GroundingResult, PipelineError> {
    let config = PipelineConfig {
        per_object: false,
        ..config.clone()
    };
    let mut all = ground_affordance_all(backend, prompts, image, task, &config)?;
    Ok(all.swap_remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mock::{ChatEntry, MockBackend, MockImage, MockResponder, MockScript, SegmentEntry};
    use crate::prompt::{render_alternative_prompt, render_object_prompt, render_part_prompt};
    use crate::rle::RleMask;
    use crate::wire::WireCandidate;
    use crate::Endpoint;
    use proptest::prelude::*;

    const W: usize = 16;
    const H: usize = 12;

    fn det(label: &str, confidence: f64) -> Detection {
        Detection {
            label: label.into(),
            confidence,
            bbox: [0.0, 0.0, 8.0, 8.0].into(),
        }
    }

    fn image() -> RgbImage {
        let mut img = RgbImage::filled(W, H, [200, 200, 200]).unwrap();
        img.set(3, 3, [10, 20, 30]);
        img
    }

    fn handle_mask() -> BinaryMask {
        BinaryMask::from_fn(W, H, |u, v| u < 6 && (4..8).contains(&v)).unwrap()
    }

    fn cand(label: &str, confidence: f64, mask: &BinaryMask) -> WireCandidate {
        WireCandidate {
            part_label: label.into(),
            confidence,
            mask: RleMask::from(mask),
        }
    }

    struct Script(MockScript);

    impl Script {
        fn new(detections: Vec<Detection>) -> Script {
            Script(MockScript {
                images: vec![MockImage {
                    id: "img".into(),
                    path: "img.png".into(),
                }],
                detect: [("img".to_string(), detections)].into_iter().collect(),
                ..MockScript::default()
            })
        }

        fn chat(mut self, prompt: String, reply: &str) -> Script {
            self.0.chat.push(ChatEntry {
                prompt: Some(prompt),
                fingerprint: None,
                reply: reply.into(),
            });
            self
        }

        fn segment(mut self, query: &str, candidates: Vec<WireCandidate>) -> Script {
            self.0.segment.push(SegmentEntry {
                image: "img".into(),
                query: query.into(),
                candidates,
            });
            self
        }

        fn backend(&self) -> MockBackend {
            let responder = MockResponder::with_images(&self.0, &[("img".to_string(), image())]).unwrap();
            MockBackend::in_process(responder).unwrap()
        }
    }

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn config() -> PipelineConfig {
        PipelineConfig {
            object_vocabulary: s(&["knife", "bowl", "cup"]),
            ..PipelineConfig::default()
        }
    }

    fn knife_script() -> Script {
        Script::new(vec![det("knife", 0.91), det("bowl", 0.3)])
            .chat(render_object_prompt("grasp the object", &s(&["knife"])).unwrap(), "Objects: knife\nReason: it has a handle")
            .chat(render_part_prompt("grasp the object", "knife").unwrap(), "Part: handle\nReason: safe to hold")
            .segment("knife handle", vec![cand("knife handle", 0.8, &handle_mask())])
    }

    #[test]
    fn filter_boundary() {
        let d = vec![det("a", 0.49), det("b", 0.50), det("c", 0.91)];
        let kept = filter_detections(&d, 0.5);
        assert_eq!(kept.iter().map(|d| d.confidence).collect::<Vec<_>>(), [0.50, 0.91]);
        assert!(filter_detections(&[], 0.5).is_empty());
        assert_eq!(filter_detections(&d, 0.0), d);
        assert!(filter_detections(&[det("x", 0.4999)], 0.5).is_empty());
    }

    #[test]
    fn segment_query_composition() {
        assert_eq!(segment_query("cup", "body"), "cup body");
        assert_eq!(segment_query("cup", "cup top"), "cup top");
        assert_eq!(segment_query("cup", "Cup rim"), "Cup rim");
        assert_eq!(segment_query("cup", "cupboard"), "cup cupboard");
    }

    #[test]
    fn knife_end_to_end() {
        let b = knife_script().backend();
        let r = ground_affordance(&b, &PromptSet::default(), &image(), &Task::new("grasp the object"), &config()).unwrap();
        assert_eq!(r.status, GroundingStatus::Succeeded);
        assert_eq!(r.mask.as_ref(), Some(&handle_mask()));
        assert_eq!(r.selected_object.as_deref(), Some("knife"));
        assert_eq!(r.part_names_tried, ["handle"]);
        let stages: Vec<&str> = r.trace.iter().map(|t| t.stage.as_str()).collect();
        assert_eq!(stages, ["detect", "select_objects", "part_query", "segment"]);
        assert!(r.is_consistent());
        assert_eq!(b.transport().endpoint_count(Endpoint::Chat), 2);
        let again = ground_affordance(&b, &PromptSet::default(), &image(), &Task::new("grasp the object"), &config()).unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn select_objects_examples() {
        let prompts = PromptSet::default();
        let detected = s(&["knife", "bowl"]);
        let prompt = render_object_prompt("cut a rope", &detected).unwrap();
        for (reply, expected) in [
            ("Objects: knife\nReason: sharp", Ok(s(&["knife"]))),
            ("Objects: Knife\nReason: sharp", Ok(s(&["knife"]))),
            ("Objects: sword\nReason: sharp", Err(StageFailure::Empty)),
            ("I would use the knife.", Err(StageFailure::Unparseable)),
        ] {
            let b = Script::new(vec![]).chat(prompt.clone(), reply).backend();
            let mut g = Grounder::new(&b, &prompts);
            assert_eq!(g.select_objects("cut a rope", &detected).unwrap(), expected, "{reply}");
        }
        // An unparseable reply is asked exactly twice.
        let b = Script::new(vec![]).chat(prompt.clone(), "no headers").backend();
        Grounder::new(&b, &prompts).select_objects("cut a rope", &detected).unwrap().unwrap_err();
        assert_eq!(b.transport().chat_hits(&prompt), 2);
    }

    #[test]
    fn query_part_examples() {
        let prompts = PromptSet::default();
        let prompt = render_part_prompt("grasp the object", "knife").unwrap();
        for (reply, expected) in [
            ("Part: handle\nReason: safe", Ok("handle".to_string())),
            ("Part: cup top\nReason: x", Ok("cup top".to_string())),
            ("Part:\n- blade\nReason: x", Ok("blade".to_string())),
            ("Part:\nReason: none", Err(StageFailure::Empty)),
        ] {
            let b = Script::new(vec![]).chat(prompt.clone(), reply).backend();
            assert_eq!(
                Grounder::new(&b, &prompts).query_part("grasp the object", "knife").unwrap(),
                expected,
                "{reply}"
            );
        }
    }

    fn cup_script() -> Script {
        let side = BinaryMask::from_fn(W, H, |u, _| u >= 10).unwrap();
        Script::new(vec![det("cup", 0.8)])
            .chat(render_object_prompt("hold the cup", &s(&["cup"])).unwrap(), "Objects: cup\nReason: r")
            .chat(render_part_prompt("hold the cup", "cup").unwrap(), "Part: body\nReason: r")
            .chat(render_alternative_prompt("cup", &s(&["body"])).unwrap(), "Part: side\nReason: r")
            .segment("cup body", vec![])
            .segment("cup side", vec![cand("cup side", 0.7, &side)])
    }

    #[test]
    fn reprompt_recovers_and_budget_respected() {
        let alt = render_alternative_prompt("cup", &s(&["body"])).unwrap();
        let script = cup_script();
        let b = script.backend();
        let r = ground_affordance(&b, &PromptSet::default(), &image(), &Task::new("hold the cup"), &config()).unwrap();
        assert_eq!(r.status, GroundingStatus::Succeeded);
        assert_eq!(r.part_names_tried, ["body", "side"]);
        assert_eq!(b.transport().chat_hits(&alt), 1);

        let b = script.backend();
        let cfg = PipelineConfig {
            max_reprompts: 0,
            ..config()
        };
        let r = ground_affordance(&b, &PromptSet::default(), &image(), &Task::new("hold the cup"), &cfg).unwrap();
        assert_eq!(r.status, GroundingStatus::PartNotFound);
        assert_eq!(r.part_names_tried, ["body"]);
        assert_eq!(b.transport().chat_hits(&alt), 0);
        assert!(r.mask.is_none() && r.is_consistent());

        let b = script.backend();
        let cfg = PipelineConfig {
            ablation: Ablation::NoReprompt,
            ..config()
        };
        let r = ground_affordance(&b, &PromptSet::default(), &image(), &Task::new("hold the cup"), &cfg).unwrap();
        assert_eq!(r.status, GroundingStatus::PartNotFound);
        assert_eq!(b.transport().chat_hits(&alt), 0);
    }

    #[test]
    fn repeated_alternative_spends_round_without_segment() {
        let script = Script::new(vec![det("cup", 0.8)])
            .chat(render_object_prompt("t", &s(&["cup"])).unwrap(), "Objects: cup\nReason: r")
            .chat(render_part_prompt("t", "cup").unwrap(), "Part: body\nReason: r")
            .chat(render_alternative_prompt("cup", &s(&["body"])).unwrap(), "Part: Body\nReason: r")
            .segment("cup body", vec![]);
        let b = script.backend();
        let cfg = PipelineConfig {
            max_reprompts: 3,
            ..config()
        };
        let r = ground_affordance(&b, &PromptSet::default(), &image(), &Task::new("t"), &cfg).unwrap();
        assert_eq!(r.status, GroundingStatus::PartNotFound);
        assert_eq!(r.part_names_tried, ["body"]);
        assert_eq!(b.transport().endpoint_count(Endpoint::Segment), 1);
        assert_eq!(b.transport().endpoint_count(Endpoint::Chat), 2 + 3);
    }

    #[test]
    fn terminal_failures() {
        let b = Script::new(vec![det("knife", 0.4999)]).backend();
        let r = ground_affordance(&b, &PromptSet::default(), &image(), &Task::new("grasp the object"), &config()).unwrap();
        assert_eq!(r.status, GroundingStatus::NoObjectDetected);
        assert!(r.mask.is_none());
        assert_eq!(b.transport().endpoint_count(Endpoint::Chat), 0);

        let b = Script::new(vec![det("knife", 0.9)])
            .chat(render_object_prompt("fly", &s(&["knife"])).unwrap(), "Objects: none\nReason: nothing flies")
            .backend();
        let r = ground_affordance(&b, &PromptSet::default(), &image(), &Task::new("fly"), &config()).unwrap();
        assert_eq!(r.status, GroundingStatus::NoObjectSelected);
    }

    #[test]
    fn vlm_only_uses_affordance_word_without_chat() {
        let b = knife_script().backend();
        let cfg = PipelineConfig {
            ablation: Ablation::VlmOnly,
            ..config()
        };
        let task = Task::new("grasp the object").with_affordance("grasp");
        let r = ground_affordance(&b, &PromptSet::default(), &image(), &task, &cfg).unwrap();
        assert_eq!(r.status, GroundingStatus::PartNotFound);
        assert_eq!(r.part_names_tried, ["grasp"]);
        assert_eq!(b.transport().endpoint_count(Endpoint::Chat), 0);
        assert_eq!(b.transport().endpoint_count(Endpoint::Detect), 0);
    }

    #[test]
    fn transport_errors_propagate() {
        let mut script = knife_script();
        script.0.faults.push(crate::mock::Fault {
            endpoint: Endpoint::Segment,
            status: 503,
            count: 10,
        });
        let b = script.backend();
        let err = ground_affordance(&b, &PromptSet::default(), &image(), &Task::new("grasp the object"), &config()).unwrap_err();
        assert!(err.is_transport(), "{err}");
    }

    #[test]
    fn union_and_per_object() {
        let a = BinaryMask::from_fn(W, H, |u, _| u == 0).unwrap();
        let c = BinaryMask::from_fn(W, H, |u, _| u == 1).unwrap();
        let script = Script::new(vec![det("knife", 0.9), det("cup", 0.9)])
            .chat(render_object_prompt("t", &s(&["knife", "cup"])).unwrap(), "Objects: cup, knife\nReason: r")
            .chat(render_part_prompt("t", "cup").unwrap(), "Part: rim\nReason: r")
            .chat(render_part_prompt("t", "knife").unwrap(), "Part: handle\nReason: r")
            .segment("cup rim", vec![cand("rim", 0.9, &a), cand("rim", 0.4, &c)])
            .segment("knife handle", vec![]);
        let b = script.backend();
        let cfg = PipelineConfig {
            per_object: true,
            candidate_pick: CandidatePick::Union,
            max_reprompts: 0,
            ..config()
        };
        let all = ground_affordance_all(&b, &PromptSet::default(), &image(), &Task::new("t"), &cfg).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].selected_object.as_deref(), Some("cup"));
        assert_eq!(all[0].mask, Some(a.union(&c).unwrap()));
        assert_eq!(all[1].status, GroundingStatus::PartNotFound);
        let first = ground_affordance(&b, &PromptSet::default(), &image(), &Task::new("t"), &cfg).unwrap();
        assert_eq!(first.mask, Some(a.union(&c).unwrap()));
        let best = PipelineConfig {
            candidate_pick: CandidatePick::HighestConfidence,
            ..cfg
        };
        let r = ground_affordance(&b, &PromptSet::default(), &image(), &Task::new("t"), &best).unwrap();
        assert_eq!(r.mask, Some(a));
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_err());
        let vlm = PipelineConfig {
            ablation: Ablation::VlmOnly,
            ..PipelineConfig::default()
        };
        assert!(vlm.validate().is_ok());
        let bad = PipelineConfig {
            confidence_floor: 1.5,
            ..config()
        };
        assert!(bad.validate().is_err());
        assert_eq!("no-reprompt".parse::<Ablation>(), Ok(Ablation::NoReprompt));
        assert!("partial".parse::<Ablation>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn tried_names_within_budget(reprompts in 0u32..4, fail_all in any::<bool>()) {
            let mut script = Script::new(vec![det("cup", 0.8)])
                .chat(render_object_prompt("t", &s(&["cup"])).unwrap(), "Objects: cup\nReason: r")
                .chat(render_part_prompt("t", "cup").unwrap(), "Part: p0\nReason: r")
                .segment("cup p0", vec![]);
            let mut tried = s(&["p0"]);
            for i in 1..=4 {
                script = script.chat(render_alternative_prompt("cup", &tried).unwrap(), &format!("Part: p{i}\nReason: r"));
                let c = if fail_all || i < 3 { vec![] } else { vec![cand("p", 0.5, &handle_mask())] };
                script = script.segment(&format!("cup p{i}"), c);
                tried.push(format!("p{i}"));
            }
            let b = script.backend();
            let cfg = PipelineConfig { max_reprompts: reprompts, ..config() };
            let r = ground_affordance(&b, &PromptSet::default(), &image(), &Task::new("t"), &cfg).unwrap();
            prop_assert!(r.part_names_tried.len() <= 1 + reprompts as usize);
            prop_assert!(r.is_consistent());
            prop_assert_eq!(r.status == GroundingStatus::Succeeded, !fail_all && reprompts >= 3);
        }
    }
}
