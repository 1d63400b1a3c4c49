//! Generator for the bundled ten-sample synthetic corpus: images, depth,
//! ground truth, manifest and a mock script that scripts every backend reply.
//!
//! The scripts are authored so that the three ablations separate cleanly:
//! several rows only succeed after an alternative part name, the bare
//! affordance word segments nothing except for the spoon's "scoop", and a few
//! rows fail for good (sub-threshold detection, no object selected, a part
//! that never segments, a repeated alternative name).

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::dataset::{manifest_json, AffordanceRecord, GroundTruthSpec, Manifest, SCHEMA_VERSION};
use crate::grasp::CameraIntrinsics;
use crate::imageio::{self, ImageIoError};
use crate::mock::{ChatEntry, MockImage, MockScript, SegmentEntry};
use crate::model::{AffordanceVocabulary, BBox, BinaryMask, DepthImage, Detection, RgbImage, SaliencyMap};
use crate::pipeline::segment_query;
use crate::prompt::{render_alternative_prompt, render_object_prompt, render_part_prompt};
use crate::rle::RleMask;
use crate::wire::{PlanGraspResponse, WireCandidate};

pub const WIDTH: usize = 64;
pub const HEIGHT: usize = 48;
pub const TABLE_DEPTH: f64 = 1.0;
pub const OBJECT_DEPTH: f64 = 0.95;

pub const INTRINSICS: CameraIntrinsics = CameraIntrinsics {
    fx: 60.0,
    fy: 60.0,
    cx: 31.5,
    cy: 23.5,
};

pub const AFFORDANCES: [&str; 7] = ["grasp", "cut", "scoop", "contain", "pound", "support", "wrap-grasp"];

#[derive(Debug, Clone, Copy)]
enum Shape {
    /// Half-open `[u0, u1) × [v0, v1)`.
    Rect(usize, usize, usize, usize),
    /// Centre and radii.
    Ellipse(f64, f64, f64, f64),
}

impl Shape {
    fn contains(&self, u: usize, v: usize) -> bool {
        match *self {
            Shape::Rect(u0, v0, u1, v1) => (u0..u1).contains(&u) && (v0..v1).contains(&v),
            Shape::Ellipse(cu, cv, ru, rv) => {
                let (a, b) = ((u as f64 - cu) / ru, (v as f64 - cv) / rv);
                a * a + b * b <= 1.0
            }
        }
    }
}

fn mask_of(shapes: &[Shape]) -> BinaryMask {
    BinaryMask::from_fn(WIDTH, HEIGHT, |u, v| shapes.iter().any(|s| s.contains(u, v))).expect("fixed dims")
}

enum Gt {
    Mask(Vec<Shape>),
    /// Isotropic Gaussian `(cu, cv, sigma)`.
    Heatmap(f64, f64, f64),
}

/// How the scripted backends answer one `(sample, affordance)` pair.
enum Plan {
    /// The first part name segments to `pred`.
    Hit { part: &'static str, pred: Vec<Shape> },
    /// The first name segments nothing; the alternative segments to `pred`.
    Recover {
        first: &'static str,
        alt: &'static str,
        pred: Vec<Shape>,
    },
    /// Nothing ever segments. `alt = None` repeats the first name.
    Miss {
        first: &'static str,
        alt: Option<&'static str>,
    },
    /// The first name yields several candidates, by descending confidence.
    Multi {
        part: &'static str,
        candidates: Vec<(f64, Vec<Shape>)>,
    },
    /// The language backend names no detected object.
    NotSelected,
    /// Never reached: the object is not detected.
    Undetected,
}

struct Sample {
    id: &'static str,
    object: &'static str,
    parts: Vec<(Vec<Shape>, [u8; 3])>,
    detections: Vec<(&'static str, f64)>,
    affordances: Vec<(&'static str, Gt, Plan)>,
    /// Segment replies for bare affordance words.
    vlm: Vec<(&'static str, Vec<Shape>)>,
}

use Shape::{Ellipse, Rect};

fn samples() -> Vec<Sample> {
    vec![
        Sample {
            id: "knife_01",
            object: "knife",
            parts: vec![
                (vec![Rect(8, 21, 26, 27)], [110, 70, 40]),
                (vec![Rect(26, 22, 56, 26)], [180, 185, 190]),
            ],
            detections: vec![("knife", 0.91), ("spoon", 0.31)],
            affordances: vec![
                (
                    "grasp",
                    Gt::Mask(vec![Rect(8, 21, 26, 27)]),
                    Plan::Hit {
                        part: "handle",
                        pred: vec![Rect(8, 21, 27, 27)],
                    },
                ),
                (
                    "cut",
                    Gt::Mask(vec![Rect(26, 22, 56, 26)]),
                    Plan::Hit {
                        part: "blade",
                        pred: vec![Rect(27, 22, 56, 26)],
                    },
                ),
            ],
            vlm: vec![],
        },
        Sample {
            id: "saw_01",
            object: "saw",
            parts: vec![
                (vec![Rect(6, 18, 20, 30)], [150, 40, 30]),
                (vec![Rect(20, 20, 58, 28)], [200, 200, 170]),
            ],
            detections: vec![("saw", 0.84)],
            affordances: vec![
                (
                    "grasp",
                    Gt::Mask(vec![Rect(6, 18, 20, 30)]),
                    Plan::Hit {
                        part: "handle",
                        pred: vec![Rect(6, 18, 20, 30)],
                    },
                ),
                (
                    "cut",
                    Gt::Mask(vec![Rect(20, 20, 58, 28)]),
                    Plan::Recover {
                        first: "teeth",
                        alt: "blade",
                        pred: vec![Rect(20, 21, 58, 28)],
                    },
                ),
            ],
            vlm: vec![],
        },
        Sample {
            id: "cup_01",
            object: "cup",
            parts: vec![
                (vec![Rect(18, 12, 44, 16)], [240, 240, 250]),
                (vec![Rect(18, 16, 44, 40)], [60, 120, 200]),
                (vec![Rect(44, 20, 50, 32)], [50, 100, 180]),
            ],
            detections: vec![("cup", 0.9), ("mug", 0.62)],
            affordances: vec![
                (
                    "wrap-grasp",
                    Gt::Mask(vec![Rect(18, 16, 44, 40)]),
                    Plan::Recover {
                        first: "body",
                        alt: "side",
                        pred: vec![Rect(18, 17, 44, 40)],
                    },
                ),
                (
                    "contain",
                    Gt::Mask(vec![Rect(18, 12, 44, 16)]),
                    Plan::Recover {
                        first: "cup top",
                        alt: "rim",
                        pred: vec![Rect(18, 12, 44, 14)],
                    },
                ),
            ],
            vlm: vec![],
        },
        Sample {
            id: "spoon_01",
            object: "spoon",
            parts: vec![
                (vec![Rect(6, 22, 36, 26)], [170, 170, 175]),
                (vec![Ellipse(46.0, 24.0, 10.0, 6.0)], [200, 200, 210]),
            ],
            detections: vec![("spoon", 0.88)],
            affordances: vec![
                (
                    "grasp",
                    Gt::Mask(vec![Rect(6, 22, 36, 26)]),
                    Plan::Hit {
                        part: "handle",
                        pred: vec![Rect(6, 22, 35, 26)],
                    },
                ),
                (
                    "scoop",
                    Gt::Mask(vec![Ellipse(46.0, 24.0, 10.0, 6.0)]),
                    Plan::Hit {
                        part: "bowl",
                        pred: vec![Ellipse(46.0, 24.0, 10.0, 6.0)],
                    },
                ),
            ],
            // The bare word segments the whole spoon.
            vlm: vec![("scoop", vec![Rect(6, 22, 36, 26), Ellipse(46.0, 24.0, 10.0, 6.0)])],
        },
        Sample {
            id: "mug_01",
            object: "mug",
            parts: vec![
                (vec![Rect(16, 12, 42, 18)], [90, 60, 50]),
                (vec![Rect(16, 18, 42, 40)], [190, 60, 60]),
                (vec![Rect(42, 18, 50, 21), Rect(42, 31, 50, 34), Rect(47, 21, 50, 31)], [170, 50, 50]),
            ],
            detections: vec![("mug", 0.77)],
            affordances: vec![
                (
                    "grasp",
                    Gt::Mask(vec![Rect(42, 18, 50, 21), Rect(42, 31, 50, 34), Rect(47, 21, 50, 31)]),
                    Plan::Miss {
                        first: "handle",
                        alt: Some("grip"),
                    },
                ),
                (
                    "contain",
                    Gt::Mask(vec![Rect(16, 12, 42, 18)]),
                    Plan::Recover {
                        first: "inside",
                        alt: "opening",
                        pred: vec![Rect(16, 12, 42, 17)],
                    },
                ),
            ],
            vlm: vec![],
        },
        Sample {
            id: "hammer_01",
            object: "hammer",
            parts: vec![
                (vec![Rect(10, 22, 44, 26)], [140, 100, 60]),
                (vec![Rect(44, 14, 52, 34)], [80, 80, 90]),
            ],
            detections: vec![("hammer", 0.95)],
            affordances: vec![
                (
                    "grasp",
                    Gt::Mask(vec![Rect(10, 22, 44, 26)]),
                    Plan::Hit {
                        part: "handle",
                        pred: vec![Rect(10, 22, 44, 27)],
                    },
                ),
                (
                    "pound",
                    Gt::Heatmap(48.0, 24.0, 4.0),
                    Plan::Hit {
                        part: "head",
                        pred: vec![Rect(44, 14, 52, 34)],
                    },
                ),
            ],
            vlm: vec![],
        },
        Sample {
            id: "turner_01",
            object: "turner",
            parts: vec![
                (vec![Rect(6, 22, 34, 26)], [30, 30, 30]),
                (vec![Rect(34, 16, 54, 32)], [120, 120, 110]),
            ],
            detections: vec![("turner", 0.45)],
            affordances: vec![
                ("grasp", Gt::Mask(vec![Rect(6, 22, 34, 26)]), Plan::Undetected),
                ("support", Gt::Mask(vec![Rect(34, 16, 54, 32)]), Plan::Undetected),
            ],
            vlm: vec![],
        },
        Sample {
            id: "trowel_01",
            object: "trowel",
            parts: vec![
                (vec![Rect(6, 22, 26, 26)], [200, 150, 40]),
                (vec![Rect(26, 16, 54, 32)], [150, 150, 160]),
            ],
            // Exactly at the floor (kept) and just under it (dropped).
            detections: vec![("trowel", 0.50), ("spoon", 0.4999)],
            affordances: vec![
                (
                    "grasp",
                    Gt::Mask(vec![Rect(6, 22, 26, 26)]),
                    Plan::Hit {
                        part: "handle",
                        pred: vec![Rect(6, 22, 26, 26)],
                    },
                ),
                (
                    "scoop",
                    Gt::Mask(vec![Rect(26, 16, 54, 32)]),
                    Plan::Recover {
                        first: "blade",
                        alt: "scoop",
                        pred: vec![Rect(27, 16, 54, 32)],
                    },
                ),
            ],
            vlm: vec![],
        },
        Sample {
            id: "scissors_01",
            object: "scissors",
            parts: vec![
                (vec![Rect(6, 14, 22, 22), Rect(6, 26, 22, 34)], [220, 60, 140]),
                (vec![Rect(22, 21, 58, 27)], [190, 190, 200]),
            ],
            detections: vec![("scissors", 0.81)],
            affordances: vec![
                (
                    "grasp",
                    Gt::Mask(vec![Rect(6, 14, 22, 22), Rect(6, 26, 22, 34)]),
                    Plan::Multi {
                        part: "handles",
                        candidates: vec![(0.82, vec![Rect(6, 14, 22, 22)]), (0.77, vec![Rect(6, 26, 22, 34)])],
                    },
                ),
                (
                    "cut",
                    Gt::Mask(vec![Rect(22, 21, 58, 27)]),
                    Plan::Miss {
                        first: "blades",
                        alt: None,
                    },
                ),
            ],
            vlm: vec![],
        },
        Sample {
            id: "pot_01",
            object: "pot",
            parts: vec![
                (vec![Rect(14, 16, 50, 24)], [50, 50, 55]),
                (vec![Rect(14, 24, 50, 40)], [100, 100, 110]),
                (vec![Rect(8, 18, 14, 22), Rect(50, 18, 56, 22)], [20, 20, 20]),
            ],
            detections: vec![("pot", 0.86)],
            affordances: vec![
                (
                    "wrap-grasp",
                    Gt::Mask(vec![Rect(14, 24, 50, 40)]),
                    Plan::NotSelected,
                ),
                (
                    "contain",
                    Gt::Mask(vec![Rect(14, 16, 50, 24)]),
                    Plan::Hit {
                        part: "inside",
                        pred: vec![Rect(14, 16, 50, 22)],
                    },
                ),
            ],
            vlm: vec![],
        },
    ]
}

fn render_rgb(s: &Sample) -> RgbImage {
    let mut img = RgbImage::filled(WIDTH, HEIGHT, [0, 0, 0]).expect("fixed dims");
    for v in 0..HEIGHT {
        for u in 0..WIDTH {
            // Faint wood-grain table so no two backgrounds are flat.
            let g = ((u * 3 + v * 7) % 11) as u8;
            img.set(u, v, [222 + g, 214 + g, 196 + g]);
        }
    }
    for (shapes, color) in &s.parts {
        for v in 0..HEIGHT {
            for u in 0..WIDTH {
                if shapes.iter().any(|sh| sh.contains(u, v)) {
                    img.set(u, v, *color);
                }
            }
        }
    }
    img
}

fn render_depth(s: &Sample) -> DepthImage {
    let all: Vec<Shape> = s.parts.iter().flat_map(|(sh, _)| sh.iter().copied()).collect();
    let object = mask_of(&all);
    let values = (0..HEIGHT)
        .flat_map(|v| (0..WIDTH).map(move |u| (u, v)))
        .map(|(u, v)| {
            if object.get(u, v) {
                OBJECT_DEPTH
            } else if u < 3 && v < 3 {
                // Sensor dropout in the corner.
                0.0
            } else {
                TABLE_DEPTH
            }
        })
        .collect();
    DepthImage::new(WIDTH, HEIGHT, values).expect("finite depth")
}

fn render_heatmap(cu: f64, cv: f64, sigma: f64) -> SaliencyMap {
    let values = (0..HEIGHT)
        .flat_map(|v| (0..WIDTH).map(move |u| (u, v)))
        .map(|(u, v)| {
            let (a, b) = (u as f64 - cu, v as f64 - cv);
            (-(a * a + b * b) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    SaliencyMap::new(WIDTH, HEIGHT, values).expect("finite heatmap")
}

fn detection(label: &str, confidence: f64) -> Detection {
    Detection {
        label: label.to_string(),
        confidence,
        bbox: BBox {
            x_min: 4.0,
            y_min: 10.0,
            x_max: 60.0,
            y_max: 42.0,
        },
    }
}

fn candidate(label: &str, confidence: f64, shapes: &[Shape]) -> WireCandidate {
    WireCandidate {
        part_label: label.to_string(),
        confidence,
        mask: RleMask::from(&mask_of(shapes)),
    }
}

fn reply(header: &str, body: &str, reason: &str) -> String {
    format!("{header}: {body}\nReason: {reason}")
}

pub fn task_phrase(affordance: &str) -> &'static str {
    crate::dataset::default_task_phrase(affordance).expect("corpus affordances have defaults")
}

fn object_vocabulary() -> Vec<String> {
    samples().iter().map(|s| s.object.to_string()).collect()
}

/// Every generated file, keyed by path relative to the corpus root.
pub struct Corpus {
    pub files: BTreeMap<PathBuf, Vec<u8>>,
}

impl Corpus {
    pub fn write_to(&self, root: &std::path::Path) -> Result<(), ImageIoError> {
        for (rel, bytes) in &self.files {
            imageio::write_file(&root.join(rel), bytes)?;
        }
        Ok(())
    }
}

fn json_bytes<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("fixture json");
    s.push('\n');
    s.into_bytes()
}

fn add_chat(chat: &mut Vec<ChatEntry>, prompt: String, reply: String) {
    if let Some(existing) = chat.iter().find(|c| c.prompt.as_deref() == Some(&prompt)) {
        assert_eq!(existing.reply, reply, "conflicting scripted replies");
        return;
    }
    chat.push(ChatEntry {
        prompt: Some(prompt),
        fingerprint: None,
        reply,
    });
}

fn script_sample(s: &Sample, script: &mut MockScript) {
    script.images.push(MockImage {
        id: s.id.to_string(),
        path: PathBuf::from(format!("rgb/{}.png", s.id)),
    });
    script.detect.insert(
        s.id.to_string(),
        s.detections.iter().map(|(l, c)| detection(l, *c)).collect(),
    );
    let detected: Vec<String> = s
        .detections
        .iter()
        .filter(|(_, c)| *c >= 0.5)
        .map(|(l, _)| l.to_string())
        .collect();
    let obj = s.object;
    let mut segment = |query: String, candidates: Vec<WireCandidate>| {
        script.segment.push(SegmentEntry {
            image: s.id.to_string(),
            query,
            candidates,
        });
    };
    let mut chat = Vec::new();
    for (aff, _, plan) in &s.affordances {
        let phrase = task_phrase(aff);
        if matches!(plan, Plan::Undetected) {
            continue;
        }
        let select = render_object_prompt(phrase, &detected).expect("nonempty");
        if matches!(plan, Plan::NotSelected) {
            add_chat(&mut chat, select, reply("Objects", "none", &format!("none of these objects can {phrase}")));
            continue;
        }
        add_chat(&mut chat, select, reply("Objects", obj, &format!("the {obj} is made to {phrase}")));
        let part_prompt = render_part_prompt(phrase, obj).expect("nonempty");
        let first = match plan {
            Plan::Hit { part, .. } | Plan::Multi { part, .. } => *part,
            Plan::Recover { first, .. } | Plan::Miss { first, .. } => *first,
            Plan::NotSelected | Plan::Undetected => unreachable!(),
        };
        add_chat(&mut chat, part_prompt, reply("Part", first, &format!("the {first} is the working part")));
        match plan {
            Plan::Hit { part, pred } => {
                let q = segment_query(obj, part);
                segment(q.clone(), vec![candidate(&q, 0.74, pred)]);
            }
            Plan::Multi { part, candidates } => {
                let q = segment_query(obj, part);
                segment(q.clone(), candidates.iter().map(|(c, sh)| candidate(&q, *c, sh)).collect());
            }
            Plan::Recover { first, alt, pred } => {
                segment(segment_query(obj, first), vec![]);
                let alt_prompt = render_alternative_prompt(obj, &[first.to_string()]).expect("nonempty");
                add_chat(&mut chat, alt_prompt, reply("Part", alt, "a more common name for the same part"));
                let q = segment_query(obj, alt);
                segment(q.clone(), vec![candidate(&q, 0.66, pred)]);
            }
            Plan::Miss { first, alt } => {
                segment(segment_query(obj, first), vec![]);
                let alt_prompt = render_alternative_prompt(obj, &[first.to_string()]).expect("nonempty");
                // Without an alternative the reply repeats the first name in a different case.
                let name = alt.map(str::to_string).unwrap_or_else(|| {
                    let mut c = first.chars();
                    c.next().map(|h| h.to_uppercase().chain(c).collect()).unwrap_or_default()
                });
                add_chat(&mut chat, alt_prompt, reply("Part", &name, "another name for the same part"));
                if let Some(alt) = alt {
                    segment(segment_query(obj, alt), vec![]);
                }
            }
            Plan::NotSelected | Plan::Undetected => unreachable!(),
        }
    }
    for (word, shapes) in &s.vlm {
        segment(word.to_string(), vec![candidate(word, 0.58, shapes)]);
    }
    for c in chat {
        script.chat.push(c);
    }
}

pub fn manifest() -> Manifest {
    let records = samples()
        .iter()
        .map(|s| AffordanceRecord {
            sample_id: s.id.to_string(),
            rgb: PathBuf::from(format!("rgb/{}.png", s.id)),
            depth: Some(PathBuf::from(format!("depth/{}.png", s.id))),
            object: s.object.to_string(),
            gt: s
                .affordances
                .iter()
                .map(|(aff, gt, _)| {
                    let spec = match gt {
                        Gt::Mask(shapes) => GroundTruthSpec::MaskRle(RleMask::from(&mask_of(shapes))),
                        Gt::Heatmap(..) => GroundTruthSpec::Heatmap(PathBuf::from(format!("heatmaps/{}_{aff}.png", s.id))),
                    };
                    (aff.to_string(), spec)
                })
                .collect(),
        })
        .collect();
    Manifest {
        schema_version: SCHEMA_VERSION,
        vocabulary: AffordanceVocabulary {
            affordances: AFFORDANCES.iter().map(|a| a.to_string()).collect(),
            task_phrases: AFFORDANCES
                .iter()
                .map(|a| (a.to_string(), task_phrase(a).to_string()))
                .collect(),
        },
        object_vocabulary: object_vocabulary(),
        records,
    }
}

pub fn mock_script() -> MockScript {
    let mut script = MockScript::default();
    for s in samples() {
        script_sample(&s, &mut script);
    }
    script.plan_grasp = Some(PlanGraspResponse {
        position: [0.012, -0.004, 0.95],
        approach: [0.2, -0.1, -0.97],
        axis_angle: std::f64::consts::FRAC_PI_4,
        quality: 0.87,
    });
    script
}

/// Decoded fixture images, for building an in-process mock without disk I/O.
pub fn images() -> Vec<(String, RgbImage)> {
    samples().iter().map(|s| (s.id.to_string(), render_rgb(s))).collect()
}

pub fn generate() -> Result<Corpus, ImageIoError> {
    let mut files = BTreeMap::new();
    for s in samples() {
        files.insert(
            PathBuf::from(format!("rgb/{}.png", s.id)),
            imageio::encode_rgb_png(&render_rgb(&s), &[])?,
        );
        files.insert(
            PathBuf::from(format!("depth/{}.png", s.id)),
            imageio::encode_depth_png(&render_depth(&s))?,
        );
        for (aff, gt, _) in &s.affordances {
            if let Gt::Heatmap(cu, cv, sigma) = gt {
                files.insert(
                    PathBuf::from(format!("heatmaps/{}_{aff}.png", s.id)),
                    imageio::encode_heatmap_png(&render_heatmap(*cu, *cv, *sigma))?,
                );
            }
        }
    }
    files.insert(PathBuf::from("manifest.json"), manifest_json(&manifest()));
    files.insert(PathBuf::from("mock_script.json"), json_bytes(&mock_script()));
    files.insert(PathBuf::from("intrinsics.json"), json_bytes(&INTRINSICS));
    Ok(Corpus { files })
}
