//! Prompt rendering for the three language-backend stages and parsing of the
//! header-structured replies (`Objects:` / `Part:` / `Reason:`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("template {template:?} uses unknown placeholder {{{placeholder}}}")]
    UnknownPlaceholder {
        template: TemplateName,
        placeholder: String,
    },
    #[error("template {template:?} has an unbalanced brace at byte {offset}")]
    UnbalancedBrace { template: TemplateName, offset: usize },
    #[error("reply is missing required header {header:?}")]
    MissingHeader { header: String, raw: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TemplateName {
    ObjectSelect,
    PartQuery,
    AlternativePart,
}

impl TemplateName {
    fn placeholders(&self) -> &'static [&'static str] {
        match self {
            TemplateName::ObjectSelect => &["task", "objects"],
            TemplateName::PartQuery => &["task", "object"],
            TemplateName::AlternativePart => &["s", "list", "object"],
        }
    }
}

pub const OBJECT_SELECT_TEMPLATE: &str = "Your task is to {task}. Which of these objects can do this task: {objects}\nAnswer like the following:\n\nObjects:\nReason:";
pub const PART_QUERY_TEMPLATE: &str = "Your task is to {task}. Which part of the {object} should be used for this task?\nAnswer like the following:\n\nPart:\nReason:";
pub const ALTERNATIVE_PART_TEMPLATE: &str = "The part name{s} {list} of the {object} could not be found. Give an alternative common name for this part.\nAnswer like the following:\n\nPart:\nReason:";

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(&'static str),
}

/// A validated template. Placeholders are `{name}`; `{{` and `}}` escape
/// literal braces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: TemplateName,
    body: String,
    pieces: Vec<Piece>,
}

impl PromptTemplate {
    pub fn new(name: TemplateName, body: impl Into<String>) -> Result<Self, PromptError> {
        let body = body.into();
        let pieces = parse_template(name, &body)?;
        Ok(Self { name, body, pieces })
    }

    pub fn name(&self) -> TemplateName {
        self.name
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    fn render(&self, lookup: impl Fn(&str) -> String) -> String {
        let mut out = String::with_capacity(self.body.len() + 64);
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(s) => out.push_str(&lookup(s)),
            }
        }
        out
    }
}

fn parse_template(name: TemplateName, body: &str) -> Result<Vec<Piece>, PromptError> {
    let allowed = name.placeholders();
    let mut pieces = Vec::new();
    let mut text = String::new();
    let bytes = body.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                text.push('{');
                i += 2;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                text.push('}');
                i += 2;
            }
            b'{' => {
                let close = body[i + 1..]
                    .find('}')
                    .ok_or(PromptError::UnbalancedBrace { template: name, offset: i })?;
                let ident = &body[i + 1..i + 1 + close];
                let slot = allowed.iter().find(|a| **a == ident).ok_or_else(|| {
                    PromptError::UnknownPlaceholder {
                        template: name,
                        placeholder: ident.to_string(),
                    }
                })?;
                if !text.is_empty() {
                    pieces.push(Piece::Text(std::mem::take(&mut text)));
                }
                pieces.push(Piece::Slot(slot));
                i += close + 2;
            }
            b'}' => return Err(PromptError::UnbalancedBrace { template: name, offset: i }),
            _ => {
                let ch = body[i..].chars().next().expect("in bounds");
                text.push(ch);
                i += ch.len_utf8();
            }
        }
    }
    if !text.is_empty() {
        pieces.push(Piece::Text(text));
    }
    Ok(pieces)
}

/// Template bodies as they appear in a config file. Missing entries fall back
/// to the compiled-in defaults.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateOverrides {
    pub object_select: Option<String>,
    pub part_query: Option<String>,
    pub alternative_part: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    object_select: PromptTemplate,
    part_query: PromptTemplate,
    alternative_part: PromptTemplate,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::from_overrides(&TemplateOverrides::default()).expect("built-in templates are valid")
    }
}

fn require_nonempty(what: &str, value: &str) -> Result<(), PromptError> {
    if value.trim().is_empty() {
        return Err(PromptError::Usage(format!("{what} must not be empty")));
    }
    Ok(())
}

impl PromptSet {
    pub fn from_overrides(o: &TemplateOverrides) -> Result<Self, PromptError> {
        Ok(Self {
            object_select: PromptTemplate::new(
                TemplateName::ObjectSelect,
                o.object_select.as_deref().unwrap_or(OBJECT_SELECT_TEMPLATE),
            )?,
            part_query: PromptTemplate::new(
                TemplateName::PartQuery,
                o.part_query.as_deref().unwrap_or(PART_QUERY_TEMPLATE),
            )?,
            alternative_part: PromptTemplate::new(
                TemplateName::AlternativePart,
                o.alternative_part.as_deref().unwrap_or(ALTERNATIVE_PART_TEMPLATE),
            )?,
        })
    }

    pub fn render_object_prompt(&self, task: &str, objects: &[String]) -> Result<String, PromptError> {
        require_nonempty("task", task)?;
        if objects.is_empty() {
            return Err(PromptError::Usage("object list must not be empty".into()));
        }
        let joined = objects.join(", ");
        Ok(self.object_select.render(|slot| match slot {
            "task" => task.to_string(),
            _ => joined.clone(),
        }))
    }

    pub fn render_part_prompt(&self, task: &str, object_name: &str) -> Result<String, PromptError> {
        require_nonempty("task", task)?;
        require_nonempty("object name", object_name)?;
        Ok(self.part_query.render(|slot| match slot {
            "task" => task.to_string(),
            _ => object_name.to_string(),
        }))
    }

    pub fn render_alternative_prompt(
        &self,
        object_name: &str,
        failed_parts: &[String],
    ) -> Result<String, PromptError> {
        require_nonempty("object name", object_name)?;
        if failed_parts.is_empty() {
            return Err(PromptError::Usage("failed part list must not be empty".into()));
        }
        let list = failed_parts
            .iter()
            .map(|p| format!("\"{p}\""))
            .collect::<Vec<_>>()
            .join(", ");
        let plural = if failed_parts.len() > 1 { "s" } else { "" };
        Ok(self.alternative_part.render(|slot| match slot {
            "s" => plural.to_string(),
            "list" => list.clone(),
            _ => object_name.to_string(),
        }))
    }
}

pub fn render_object_prompt(task: &str, objects: &[String]) -> Result<String, PromptError> {
    PromptSet::default().render_object_prompt(task, objects)
}

pub fn render_part_prompt(task: &str, object_name: &str) -> Result<String, PromptError> {
    PromptSet::default().render_part_prompt(task, object_name)
}

pub fn render_alternative_prompt(object_name: &str, failed_parts: &[String]) -> Result<String, PromptError> {
    PromptSet::default().render_alternative_prompt(object_name, failed_parts)
}

/// Reply split into header sections; headers are lowercased, bodies trimmed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuredReply {
    pub sections: Vec<(String, String)>,
    pub raw: String,
}

impl StructuredReply {
    pub fn section(&self, header: &str) -> Option<&str> {
        let header = header.to_lowercase();
        self.sections
            .iter()
            .find(|(h, _)| *h == header)
            .map(|(_, b)| b.as_str())
    }
}

/// Matches `^\s*{header}\s*:` with a case-insensitive header.
fn match_header<'a>(line: &'a str, headers: &[String]) -> Option<(String, &'a str)> {
    let trimmed = line.trim_start();
    let colon = trimmed.find(':')?;
    let candidate = trimmed[..colon].trim_end().to_lowercase();
    headers
        .iter()
        .find(|h| **h == candidate)
        .map(|h| (h.clone(), &trimmed[colon + 1..]))
}

/// Splits `text` on lines that start with one of `required_headers`. All
/// required headers must be present.
pub fn parse_structured_reply(text: &str, required_headers: &[&str]) -> Result<StructuredReply, PromptError> {
    let headers: Vec<String> = required_headers.iter().map(|h| h.trim().to_lowercase()).collect();
    let mut sections: Vec<(String, String)> = Vec::new();
    let mut current: Option<(String, String)> = None;
    for line in text.lines() {
        if let Some((header, rest)) = match_header(line, &headers) {
            if let Some(done) = current.take() {
                sections.push(done);
            }
            current = Some((header, rest.to_string()));
        } else if let Some((_, body)) = current.as_mut() {
            body.push('\n');
            body.push_str(line);
        }
    }
    if let Some(done) = current.take() {
        sections.push(done);
    }
    for (_, body) in sections.iter_mut() {
        *body = body.trim().to_string();
    }
    for h in &headers {
        if !sections.iter().any(|(s, _)| s == h) {
            return Err(PromptError::MissingHeader {
                header: h.clone(),
                raw: text.to_string(),
            });
        }
    }
    Ok(StructuredReply {
        sections,
        raw: text.to_string(),
    })
}

fn strip_bullet(item: &str) -> &str {
    let s = item.trim();
    if let Some(rest) = s.strip_prefix(['-', '*', '•']) {
        return rest.trim_start();
    }
    let digits = s.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        if let Some(rest) = s[digits..].strip_prefix(['.', ')']) {
            return rest.trim_start();
        }
    }
    s
}

fn clean_item(item: &str) -> &str {
    let mut current = item;
    loop {
        let next = strip_bullet(current).trim_end_matches('.').trim();
        if next == current {
            return next;
        }
        current = next;
    }
}

/// Splits a section body into items on commas and newlines, dropping bullets
/// and case-insensitive duplicates.
pub fn extract_list(section_body: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for item in section_body.split([',', '\n']) {
        let item = clean_item(item);
        if item.is_empty() {
            continue;
        }
        if seen.insert(item.to_lowercase()) {
            out.push(item.to_string());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn object_prompt_matches_box() {
        let p = render_object_prompt("cut a rope", &s(&["knife", "bowl"])).unwrap();
        assert_eq!(
            p,
            "Your task is to cut a rope. Which of these objects can do this task: knife, bowl\nAnswer like the following:\n\nObjects:\nReason:"
        );
        let single = render_object_prompt("cut a rope", &s(&["knife"])).unwrap();
        assert!(single.contains("task: knife\n"));
        let spaced = render_object_prompt("talk", &s(&["walkie talkie"])).unwrap();
        assert!(spaced.contains("walkie talkie"));
        assert!(matches!(
            render_object_prompt("cut a rope", &[]),
            Err(PromptError::Usage(_))
        ));
    }

    #[test]
    fn part_prompt_snapshot() {
        let p = render_part_prompt("grasp the object", "knife").unwrap();
        assert_eq!(
            p,
            "Your task is to grasp the object. Which part of the knife should be used for this task?\nAnswer like the following:\n\nPart:\nReason:"
        );
        let p = render_part_prompt("scoop rice", "spoon").unwrap();
        assert!(p.contains("scoop rice") && p.contains("spoon"));
        assert!(render_part_prompt("grasp", "Mug").unwrap().contains("the Mug "));
        assert!(render_part_prompt("", "Mug").is_err());
        assert!(render_part_prompt("grasp", " ").is_err());
    }

    #[test]
    fn alternative_prompt_snapshot() {
        let p = render_alternative_prompt("cup", &s(&["cup body"])).unwrap();
        assert_eq!(
            p,
            "The part name \"cup body\" of the cup could not be found. Give an alternative common name for this part.\nAnswer like the following:\n\nPart:\nReason:"
        );
        let p = render_alternative_prompt("cup", &s(&["body", "top"])).unwrap();
        assert!(p.starts_with("The part names \"body\", \"top\" of the cup"));
        let p = render_alternative_prompt("pot", &s(&["pot top"])).unwrap();
        assert!(p.contains("\"pot top\"") && !p.contains("plant"));
        assert!(render_alternative_prompt("cup", &[]).is_err());
    }

    #[test]
    fn templates_validate_placeholders() {
        assert!(matches!(
            PromptTemplate::new(TemplateName::PartQuery, "{task} {objects}"),
            Err(PromptError::UnknownPlaceholder { .. })
        ));
        assert!(PromptTemplate::new(TemplateName::PartQuery, "{task").is_err());
        let t = PromptTemplate::new(TemplateName::PartQuery, "{{literal}} {task}").unwrap();
        assert_eq!(t.render(|_| "x".into()), "{literal} x");
        let set = PromptSet::from_overrides(&TemplateOverrides {
            part_query: Some("Which bit of the {object} lets you {task}?\nPart:\nReason:".into()),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(
            set.render_part_prompt("pour", "jug").unwrap(),
            "Which bit of the jug lets you pour?\nPart:\nReason:"
        );
    }

    #[test]
    fn parse_examples() {
        let r = parse_structured_reply("Objects: knife\nReason: it cuts", &["objects", "reason"]).unwrap();
        assert_eq!(r.section("objects"), Some("knife"));
        assert_eq!(r.section("reason"), Some("it cuts"));
        let r = parse_structured_reply("OBJECTS:knife", &["objects"]).unwrap();
        assert_eq!(r.section("Objects"), Some("knife"));
        assert!(matches!(
            parse_structured_reply("knife is best", &["objects"]),
            Err(PromptError::MissingHeader { .. })
        ));
        let r = parse_structured_reply("Sure!\n  Part :\n- blade\nReason: sharp\nmore", &["part", "reason"]).unwrap();
        assert_eq!(r.section("part"), Some("- blade"));
        assert_eq!(r.section("reason"), Some("sharp\nmore"));
        assert_eq!(r.raw, "Sure!\n  Part :\n- blade\nReason: sharp\nmore");
    }

    #[test]
    fn list_examples() {
        assert_eq!(extract_list("knife, scissors"), s(&["knife", "scissors"]));
        assert_eq!(extract_list("- knife\n- Knife"), s(&["knife"]));
        assert!(extract_list("").is_empty());
        assert_eq!(extract_list("1. handle\n2) blade\n* tip."), s(&["handle", "blade", "tip"]));
    }

    proptest! {
        #[test]
        fn parse_recovers_synthetic_render(
            h1 in "[a-z][a-z0-9]{0,8}",
            h2 in "[a-z][a-z0-9]{0,8}",
            a in "[A-Za-z0-9 ]{0,20}",
            b in "[A-Za-z0-9 ]{0,20}",
        ) {
            prop_assume!(h1 != h2);
            let text = format!("{h1}: {a}\n{h2}: {b}");
            let r = parse_structured_reply(&text, &[&h1, &h2]).unwrap();
            prop_assert_eq!(r.section(&h1), Some(a.trim()));
            prop_assert_eq!(r.section(&h2), Some(b.trim()));
        }

        #[test]
        fn extract_list_idempotent(body in "[A-Za-z0-9 ,\n*-]{0,60}") {
            let once = extract_list(&body);
            let twice = extract_list(&once.join(", "));
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn rendering_is_deterministic(task in "[a-z ]{1,20}", obj in "[a-z]{1,10}") {
            prop_assume!(!task.trim().is_empty());
            let o = vec![obj.clone()];
            prop_assert_eq!(render_object_prompt(&task, &o).unwrap(), render_object_prompt(&task, &o).unwrap());
        }
    }
}
