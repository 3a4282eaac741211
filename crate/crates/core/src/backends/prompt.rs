//! Prompt assembly.
//!
//! Layout, with `<image:REF>` marking where an image part goes:
//!
//! ```text
//! {system}[ {reasoning instruction}][ {annotation instruction}]
//!
//! <image:demo-1>
//! Question: {question}
//! [Options:
//! {option}
//! ...]
//! Answer: {answer}
//!
//! ...one block per demonstration...
//!
//! <image:query>
//! Question: {question}
//! [Options: ...]
//! Answer:
//! ```
//!
//! The system line is kept apart from the parts so chat-style wire clients can
//! send it as a system message.

use std::fmt::Write as _;

use crate::domain::{AnnotationKind, ImageRef};

use super::GenerationRequest;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptPart {
    Text(String),
    Image(ImageRef),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub system: String,
    pub parts: Vec<PromptPart>,
}

impl Prompt {
    fn push_text(&mut self, s: &str) {
        if let Some(PromptPart::Text(t)) = self.parts.last_mut() {
            t.push_str(s);
        } else {
            self.parts.push(PromptPart::Text(s.to_owned()));
        }
    }

    fn push_image(&mut self, image: &ImageRef) {
        self.parts.push(PromptPart::Image(image.clone()));
    }

    pub fn image_count(&self) -> usize {
        self.parts.iter().filter(|p| matches!(p, PromptPart::Image(_))).count()
    }

    /// Flat text form used by golden tests and by the simulators' token counts.
    pub fn render(&self) -> String {
        let mut out = self.system.clone();
        out.push_str("\n\n");
        for p in &self.parts {
            match p {
                PromptPart::Text(t) => out.push_str(t),
                PromptPart::Image(i) => {
                    let _ = write!(out, "<image:{i}>");
                }
            }
        }
        out
    }
}

fn annotation_instruction(kind: AnnotationKind) -> Option<&'static str> {
    match kind {
        AnnotationKind::Label => None,
        AnnotationKind::LabelPlusDescription => {
            Some("Give the answer on the first line, then a line starting with \"Description:\" describing the image.")
        }
        AnnotationKind::LabelPlusCot => {
            Some("Give the answer on the first line, then a line starting with \"Reasoning:\" explaining it.")
        }
    }
}

fn question_block(p: &mut Prompt, image: &ImageRef, question: &str, options: Option<&[String]>) {
    p.push_image(image);
    p.push_text("\nQuestion: ");
    p.push_text(question);
    p.push_text("\n");
    if let Some(opts) = options {
        p.push_text("Options:\n");
        for o in opts {
            p.push_text(o);
            p.push_text("\n");
        }
    }
    p.push_text("Answer:");
}

pub fn build_prompt(req: &GenerationRequest) -> Prompt {
    let mut system = req.system_message.clone();
    for extra in [
        req.reasoning_instruction.as_deref(),
        annotation_instruction(req.annotation_kind),
    ]
    .into_iter()
    .flatten()
    {
        system.push(' ');
        system.push_str(extra);
    }
    let mut p = Prompt {
        system,
        parts: Vec::new(),
    };
    for d in &req.demonstrations {
        question_block(&mut p, &d.image, &d.question, d.options.as_deref());
        p.push_text(" ");
        p.push_text(&d.answer);
        p.push_text("\n\n");
    }
    question_block(
        &mut p,
        &req.query.image,
        &req.query.question,
        req.query.options.as_deref(),
    );
    p
}

/// Text after the last `Answer:` marker, else the last non-empty line.
pub fn extract_final_answer(text: &str) -> String {
    if let Some(i) = text.rfind("Answer:") {
        let tail = text[i + "Answer:".len()..].trim();
        if let Some(first) = tail.lines().next() {
            return first.trim().to_owned();
        }
    }
    text.lines()
        .map(str::trim)
        .rfind(|l| !l.is_empty())
        .unwrap_or("")
        .to_owned()
}

/// Splits an annotation reply into its answer line and optional detail.
pub fn parse_annotation_text(text: &str) -> (String, Option<String>) {
    let text = text.trim();
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let rest = rest.trim();
    let detail = ["Description:", "Reasoning:"]
        .iter()
        .find_map(|p| rest.strip_prefix(p))
        .unwrap_or(rest)
        .trim();
    let answer = first.trim().trim_start_matches("Answer:").trim().to_owned();
    (answer, (!detail.is_empty()).then(|| detail.to_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{DemoBlock, QueryBlock, Sampling};

    fn req(n_demos: usize) -> GenerationRequest {
        let mut r = GenerationRequest::new(
            "Classify the sign.",
            QueryBlock {
                image: ImageRef::new("q.png"),
                question: "What is the traffic sign?".into(),
                options: None,
            },
            Sampling::default(),
        );
        r.demonstrations = (0..n_demos)
            .map(|i| DemoBlock {
                image: ImageRef::new(format!("d{i}.png")),
                question: "What is the traffic sign?".into(),
                options: None,
                answer: format!("label{i}"),
            })
            .collect();
        r
    }

    #[test]
    fn zero_shot_is_system_plus_query() {
        let p = build_prompt(&req(0));
        assert_eq!(p.image_count(), 1);
        assert_eq!(
            p.render(),
            "Classify the sign.\n\n<image:q.png>\nQuestion: What is the traffic sign?\nAnswer:"
        );
    }

    #[test]
    fn demonstrations_keep_selection_order() {
        let p = build_prompt(&req(3));
        assert_eq!(p.image_count(), 4);
        let s = p.render();
        let pos: Vec<usize> = ["d0.png", "d1.png", "d2.png", "q.png"]
            .iter()
            .map(|r| s.find(r).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s.matches("Answer:").count(), 4);
    }

    #[test]
    fn instructions_extend_the_system_line() {
        let mut r = req(0);
        r.reasoning_instruction = Some("Let's think step by step.".into());
        r.annotation_kind = AnnotationKind::LabelPlusCot;
        let p = build_prompt(&r);
        assert!(p
            .system
            .starts_with("Classify the sign. Let's think step by step. Give the answer"));
    }

    #[test]
    fn answer_extraction() {
        assert_eq!(extract_final_answer("Reasoning...\nAnswer: Stop"), "Stop");
        assert_eq!(extract_final_answer("stop\n"), "stop");
        assert_eq!(extract_final_answer(""), "");
        assert_eq!(
            parse_annotation_text("Stop\nDescription: red octagon"),
            ("Stop".into(), Some("red octagon".into()))
        );
        assert_eq!(parse_annotation_text("Stop"), ("Stop".into(), None));
    }
}
