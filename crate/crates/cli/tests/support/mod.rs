#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use jsonschema::{Resource, Validator};
use oval_core::Endpoint;
use oval_gateway::schemas;
use serde_json::Value;

pub fn oval() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_oval"));
    c.env_remove("OVAL_API_KEY").env_remove("OVAL_BACKEND_BASE");
    c
}

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures/synth10")
        .canonicalize()
        .expect("fixture corpus present")
}

pub fn manifest() -> PathBuf {
    fixtures().join("manifest.json")
}

pub fn mock_script() -> PathBuf {
    fixtures().join("mock_script.json")
}

pub fn objects_flag() -> String {
    oval_core::synth::manifest().object_vocabulary.join(",")
}

pub fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("oval binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

pub fn describe(out: &Output) -> String {
    format!(
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    )
}

/// Every file under `dir`, keyed by relative path.
pub fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

/// `oval mock-serve` as a child process; killed on drop.
pub struct Served {
    child: Child,
    pub base: String,
}

impl Served {
    pub fn start(script: &Path) -> Served {
        let mut child = oval()
            .args(["mock-serve", "--bind", "127.0.0.1:0", "--script"])
            .arg(script)
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .expect("spawn mock-serve");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let base = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
            .to_string();
        Served { child, base }
    }

    pub fn alive(&mut self) -> bool {
        self.child.try_wait().unwrap().is_none()
    }

    pub fn url(&self, endpoint: Endpoint) -> String {
        format!("{}{}", self.base, endpoint.path())
    }
}

impl Drop for Served {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub struct Validators {
    pub request: BTreeMap<&'static str, Validator>,
    pub response: BTreeMap<&'static str, Validator>,
    pub error: Validator,
}

fn validator(schema: &str) -> Validator {
    let common = Resource::from_contents(serde_json::from_str(schemas::COMMON).unwrap()).unwrap();
    jsonschema::options()
        .with_resource(schemas::COMMON_ID, common)
        .build(&serde_json::from_str(schema).unwrap())
        .unwrap()
}

pub fn validators() -> Validators {
    Validators {
        request: Endpoint::ALL.iter().map(|e| (e.path(), validator(schemas::request(*e)))).collect(),
        response: Endpoint::ALL.iter().map(|e| (e.path(), validator(schemas::response(*e)))).collect(),
        error: validator(schemas::ERROR),
    }
}

pub fn schema_errors(v: &Validator, instance: &Value) -> Vec<String> {
    v.iter_errors(instance).map(|e| format!("{} at {}", e, e.instance_path)).collect()
}
