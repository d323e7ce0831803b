//! Prompt templates with `{name}` placeholders.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("no binding for placeholder `{0}`")]
    MissingBinding(String),
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
}

/// A placeholder is `{` + identifier + `}`; identifiers are ASCII
/// letters, digits and `_`, not starting with a digit. Any other brace is
/// literal text.
fn placeholder_at(body: &str, start: usize) -> Option<(&str, usize)> {
    let rest = &body[start + 1..];
    let end = rest.find('}')?;
    let name = &rest[..end];
    let mut chars = name.chars();
    let first = chars.next()?;
    if !(first.is_ascii_alphabetic() || first == '_') {
        return None;
    }
    if !chars.all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return None;
    }
    Some((name, start + 1 + end + 1))
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            body: body.into(),
        }
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        let mut i = 0;
        while let Some(off) = self.body[i..].find('{') {
            let at = i + off;
            match placeholder_at(&self.body, at) {
                Some((name, next)) => {
                    if !out.contains(&name) {
                        out.push(name);
                    }
                    i = next;
                }
                None => i = at + 1,
            }
        }
        out
    }

    /// Substitutes every placeholder; nothing else in the body changes.
    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<String, TemplateError> {
        let body = &self.body;
        let mut out = String::with_capacity(body.len());
        let mut i = 0;
        while let Some(off) = body[i..].find('{') {
            let at = i + off;
            out.push_str(&body[i..at]);
            match placeholder_at(body, at) {
                Some((name, next)) => {
                    let value = bindings
                        .get(name)
                        .ok_or_else(|| TemplateError::MissingBinding(name.to_string()))?;
                    out.push_str(value);
                    i = next;
                }
                None => {
                    out.push('{');
                    i = at + 1;
                }
            }
        }
        out.push_str(&body[i..]);
        Ok(out)
    }
}

/// Zero-shot multi-frame prompt; `{text}` receives the transcript.
pub const ZERO_SHOT: &str = "These pictures are different frames of the same video. The words spoken by the characters in the picture are {text}. Assuming that you are an expert in the field of emotion, please describe the expression of the character in the picture in detail, and based on the above description, use a few words to summarize his expression in the format of [,,**]";

/// Trimodal prompt for audio/video/subtitle models; `{subtitle}` receives the transcript.
pub const TRIMODAL: &str = "###Human: Close your eyes, open your ears and you imagine only based on the sound that <Audio><AudioHere></Audio>. \"Close your ears, open your eyes and you see that <Video><ImageHere></Video>. The subtitle content of this video is <Subtitle>{subtitle}</Subtitle>. Now as an expert in the field of emotions, please focus on the facial expressions, body movements, environment, acoustic information, subtitle content, etc., in the video to discern clues related to the emotions of the individual. Please provide a detailed description and ultimately predict the emotional state of the individual in the video. ###Assistant:";

/// Image caption prompt.
pub const CAPTION: &str = "As an expert in the field of emotions, pay close attention to the facial expressions, body movements, environment, and subtitle content of the characters in the image to capture clues closely related to personal emotions, and provide detailed descriptions based on this, and finally predict the emotional state of the characters in the image.";

/// Caption similarity judge; the two captions are appended after the instruction.
pub const JUDGE: &str = "Please judge whether the emotions described in these two sentences are similar and give a score between 0 and 1.\nSentence 1: {caption_a}\nSentence 2: {caption_b}";

/// Built-in templates by name.
pub fn builtin(name: &str) -> Option<PromptTemplate> {
    let body = match name {
        "zero_shot" => ZERO_SHOT,
        "trimodal" => TRIMODAL,
        "caption" => CAPTION,
        "judge" => JUDGE,
        _ => return None,
    };
    Some(PromptTemplate::new(name, body))
}

pub const BUILTIN_NAMES: [&str; 4] = ["zero_shot", "trimodal", "caption", "judge"];

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bind(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn substitutes_exactly() {
        let t = PromptTemplate::new("t", "words are {text}.");
        assert_eq!(t.render(&bind(&[("text", "hello")])).unwrap(), "words are hello.");
    }

    #[test]
    fn missing_binding() {
        let t = PromptTemplate::new("t", "sub: {subtitle}");
        assert_eq!(
            t.render(&bind(&[("text", "x")])),
            Err(TemplateError::MissingBinding("subtitle".into()))
        );
    }

    #[test]
    fn no_placeholders_is_verbatim() {
        let t = PromptTemplate::new("t", "format [,,**] {} { x } {1a}");
        assert_eq!(t.render(&BTreeMap::new()).unwrap(), t.body);
        assert!(t.placeholders().is_empty());
    }

    #[test]
    fn values_are_not_re_expanded() {
        let t = PromptTemplate::new("t", "{a}|{b}");
        assert_eq!(t.render(&bind(&[("a", "{b}"), ("b", "x")])).unwrap(), "{b}|x");
    }

    #[test]
    fn builtins_expose_their_slots() {
        assert_eq!(builtin("zero_shot").unwrap().placeholders(), ["text"]);
        assert_eq!(builtin("trimodal").unwrap().placeholders(), ["subtitle"]);
        assert!(builtin("caption").unwrap().placeholders().is_empty());
        assert_eq!(builtin("judge").unwrap().placeholders(), ["caption_a", "caption_b"]);
        assert!(builtin("nope").is_none());
        let p = builtin("zero_shot").unwrap().render(&bind(&[("text", "我没事")])).unwrap();
        assert!(p.contains("are 我没事. Assuming"));
        assert!(p.ends_with("in the format of [,,**]"));
    }

    proptest! {
        #[test]
        fn render_is_injective_in_bindings(a1 in "[a-z ]{0,8}", b1 in "[a-z ]{0,8}", a2 in "[a-z ]{0,8}", b2 in "[a-z ]{0,8}") {
            let t = PromptTemplate::new("t", "A<{a}>B<{b}>");
            let r1 = t.render(&bind(&[("a", &a1), ("b", &b1)])).unwrap();
            let r2 = t.render(&bind(&[("a", &a2), ("b", &b2)])).unwrap();
            prop_assert_eq!(r1 == r2, a1 == a2 && b1 == b2);
        }
    }
}
