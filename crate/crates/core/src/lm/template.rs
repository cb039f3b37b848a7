//! Prompt templates for grounded generation and correction.
//!
//! A template is a plain-text block with the placeholders `{QUESTION}`,
//! `{DOCUMENTS}`, `{DRAFT}` and `{VERIFIED_COUNT}`, plus a list of in-context
//! examples rendered with the same block ahead of the real query.
//! Substitution is single-pass, so placeholder-like text inside a question or
//! document is never expanded.

use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::answer::{render, AnswerStyle, GroundedAnswer};
use crate::error::{Error, Result};
use crate::retrieval::Passage;

const BLOCK_SEPARATOR: &str = "\n\n\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStyle {
    #[serde(alias = "asqa_long_form")]
    Asqa,
    #[serde(alias = "qampari_entity_list")]
    Qampari,
    #[serde(alias = "eli5_long_form")]
    Eli5,
}

impl TaskStyle {
    pub fn answer_style(self) -> AnswerStyle {
        match self {
            TaskStyle::Qampari => AnswerStyle::EntityList,
            TaskStyle::Asqa | TaskStyle::Eli5 => AnswerStyle::LongForm,
        }
    }

    /// Consistency threshold used when none is configured.
    pub fn default_threshold(self) -> f64 {
        match self {
            TaskStyle::Eli5 => 0.25,
            TaskStyle::Asqa | TaskStyle::Qampari => 0.5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskStyle::Asqa => "asqa",
            TaskStyle::Qampari => "qampari",
            TaskStyle::Eli5 => "eli5",
        }
    }
}

impl std::str::FromStr for TaskStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asqa" | "asqa_long_form" => Ok(TaskStyle::Asqa),
            "qampari" | "qampari_entity_list" => Ok(TaskStyle::Qampari),
            "eli5" | "eli5_long_form" => Ok(TaskStyle::Eli5),
            other => Err(Error::Config(format!("unknown task style `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Generate,
    Correct,
}

impl PromptMode {
    fn as_str(self) -> &'static str {
        match self {
            PromptMode::Generate => "generate",
            PromptMode::Correct => "correct",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotDocument {
    pub title: String,
    pub text: String,
}

/// One in-context example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shot {
    pub question: String,
    pub documents: Vec<ShotDocument>,
    #[serde(default)]
    pub draft: Option<String>,
    #[serde(default)]
    pub verified_count: Option<usize>,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub task_style: TaskStyle,
    pub mode: PromptMode,
    /// The block text, including instruction and trailing answer header.
    pub instruction: String,
    pub shots: Vec<Shot>,
}

macro_rules! builtin {
    ($name:literal) => {
        (
            include_str!(concat!("../../templates/", $name, ".txt")),
            include_str!(concat!("../../templates/", $name, ".shots.json")),
        )
    };
}

impl PromptTemplate {
    pub fn new(task_style: TaskStyle, mode: PromptMode, instruction: String, shots: Vec<Shot>) -> Result<Self> {
        let mut required = vec!["{QUESTION}", "{DOCUMENTS}"];
        if mode == PromptMode::Correct {
            required.extend(["{DRAFT}", "{VERIFIED_COUNT}"]);
        }
        for placeholder in required {
            if !instruction.contains(placeholder) {
                return Err(Error::Template(format!(
                    "{} {} template lacks {placeholder}",
                    task_style.as_str(),
                    mode.as_str()
                )));
            }
        }
        Ok(Self {
            task_style,
            mode,
            instruction: instruction.trim_end().to_string(),
            shots,
        })
    }

    /// The shipped templates: two shots for generation, one for correction.
    pub fn builtin(task_style: TaskStyle, mode: PromptMode) -> Self {
        let (block, shots) = match (task_style, mode) {
            (TaskStyle::Asqa, PromptMode::Generate) => builtin!("asqa_generate"),
            (TaskStyle::Asqa, PromptMode::Correct) => builtin!("asqa_correct"),
            (TaskStyle::Qampari, PromptMode::Generate) => builtin!("qampari_generate"),
            (TaskStyle::Qampari, PromptMode::Correct) => builtin!("qampari_correct"),
            (TaskStyle::Eli5, PromptMode::Generate) => builtin!("eli5_generate"),
            (TaskStyle::Eli5, PromptMode::Correct) => builtin!("eli5_correct"),
        };
        let shots = serde_json::from_str(shots).expect("builtin shots are valid JSON");
        Self::new(task_style, mode, block.to_string(), shots).expect("builtin templates are valid")
    }

    /// Loads `<dir>/<style>_<mode>.txt` and, if present,
    /// `<dir>/<style>_<mode>.shots.json`.
    pub fn from_dir(dir: &Path, task_style: TaskStyle, mode: PromptMode) -> Result<Self> {
        let stem = format!("{}_{}", task_style.as_str(), mode.as_str());
        let block_path = dir.join(format!("{stem}.txt"));
        let block = std::fs::read_to_string(&block_path).map_err(|e| Error::io(&block_path, e))?;
        let shots_path = dir.join(format!("{stem}.shots.json"));
        let shots = if shots_path.exists() {
            let raw = std::fs::read_to_string(&shots_path).map_err(|e| Error::io(&shots_path, e))?;
            serde_json::from_str(&raw)?
        } else {
            Vec::new()
        };
        Self::new(task_style, mode, block, shots)
    }
}

/// Generation and correction templates for one task style.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    pub generate: PromptTemplate,
    pub correct: PromptTemplate,
}

impl TemplateSet {
    pub fn builtin(style: TaskStyle) -> Self {
        Self {
            generate: PromptTemplate::builtin(style, PromptMode::Generate),
            correct: PromptTemplate::builtin(style, PromptMode::Correct),
        }
    }

    pub fn from_dir(dir: &Path, style: TaskStyle) -> Result<Self> {
        Ok(Self {
            generate: PromptTemplate::from_dir(dir, style, PromptMode::Generate)?,
            correct: PromptTemplate::from_dir(dir, style, PromptMode::Correct)?,
        })
    }
}

/// A document as shown in a prompt, with its run-wide display index.
#[derive(Debug, Clone, Copy)]
pub struct ShownDocument<'a> {
    pub index: u32,
    pub passage: &'a Passage,
}

static PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{(QUESTION|DOCUMENTS|DRAFT|VERIFIED_COUNT)\}").expect("valid regex"));

struct BlockValues<'a> {
    question: &'a str,
    documents: String,
    draft: &'a str,
    verified_count: usize,
}

fn fill(block: &str, values: &BlockValues<'_>) -> String {
    PLACEHOLDER
        .replace_all(block, |caps: &regex::Captures<'_>| match &caps[1] {
            "QUESTION" => values.question.to_string(),
            "DOCUMENTS" => values.documents.clone(),
            "DRAFT" => values.draft.to_string(),
            _ => values.verified_count.to_string(),
        })
        .into_owned()
}

fn single_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn document_line(index: u32, title: &str, text: &str) -> String {
    format!("Document [{index}](Title: {}): {}", single_line(title), single_line(text))
}

fn document_block<'a>(docs: impl Iterator<Item = (u32, &'a str, &'a str)>) -> String {
    docs.map(|(i, title, text)| document_line(i, title, text))
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_shots(template: &PromptTemplate) -> Vec<String> {
    template
        .shots
        .iter()
        .map(|shot| {
            let documents = document_block(
                shot.documents
                    .iter()
                    .enumerate()
                    .map(|(i, d)| (i as u32 + 1, d.title.as_str(), d.text.as_str())),
            );
            let block = fill(
                &template.instruction,
                &BlockValues {
                    question: &shot.question,
                    documents,
                    draft: shot.draft.as_deref().unwrap_or(""),
                    verified_count: shot.verified_count.unwrap_or(0),
                },
            );
            format!("{} {}", block.trim_end(), shot.answer)
        })
        .collect()
}

fn check_docs(docs: &[ShownDocument<'_>]) -> Result<()> {
    if docs.is_empty() {
        return Err(Error::Template("a prompt needs at least one document".into()));
    }
    if docs.windows(2).any(|w| w[0].index >= w[1].index) {
        return Err(Error::Template("display indices must be strictly increasing".into()));
    }
    Ok(())
}

fn assemble(template: &PromptTemplate, values: BlockValues<'_>) -> String {
    let mut blocks = render_shots(template);
    blocks.push(fill(&template.instruction, &values));
    blocks.join(BLOCK_SEPARATOR)
}

pub fn render_generation_prompt(template: &PromptTemplate, query: &str, docs: &[ShownDocument<'_>]) -> Result<String> {
    if template.mode != PromptMode::Generate {
        return Err(Error::Template("expected a generation template".into()));
    }
    check_docs(docs)?;
    let documents = document_block(
        docs.iter()
            .map(|d| (d.index, d.passage.title.as_str(), d.passage.text.as_str())),
    );
    Ok(assemble(
        template,
        BlockValues {
            question: query,
            documents,
            draft: "",
            verified_count: 0,
        },
    ))
}

pub fn render_correction_prompt(
    template: &PromptTemplate,
    query: &str,
    docs: &[ShownDocument<'_>],
    draft: &GroundedAnswer,
    verified_count: usize,
) -> Result<String> {
    if template.mode != PromptMode::Correct {
        return Err(Error::Template("expected a correction template".into()));
    }
    check_docs(docs)?;
    if verified_count > docs.len() {
        return Err(Error::Template(format!(
            "verified count {verified_count} exceeds the {} shown documents",
            docs.len()
        )));
    }
    let documents = document_block(
        docs.iter()
            .map(|d| (d.index, d.passage.title.as_str(), d.passage.text.as_str())),
    );
    let draft = render(draft);
    Ok(assemble(
        template,
        BlockValues {
            question: query,
            documents,
            draft: &draft,
            verified_count,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptDocument {
    pub index: u32,
    pub title: String,
    pub text: String,
}

/// The query block of a rendered prompt, recovered from its text. Only the
/// content after the last `Question:` line is considered, so in-context
/// examples are ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptView {
    pub question: String,
    pub documents: Vec<PromptDocument>,
    pub draft: Option<String>,
}

static DOC_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^Document \[(\d+)\]\(Title: (.*?)\): (.*)$").expect("valid regex"));

impl PromptView {
    pub fn parse(prompt: &str) -> Self {
        let lines: Vec<&str> = prompt.lines().collect();
        let start = lines
            .iter()
            .rposition(|l| l.starts_with("Question:"))
            .unwrap_or(0);
        let question = lines
            .get(start)
            .and_then(|l| l.strip_prefix("Question:"))
            .map(|q| q.trim().to_string())
            .unwrap_or_default();
        let mut documents = Vec::new();
        let mut draft = None;
        for line in &lines[start.min(lines.len())..] {
            if let Some(caps) = DOC_LINE.captures(line) {
                if let Ok(index) = caps[1].parse() {
                    documents.push(PromptDocument {
                        index,
                        title: caps[2].to_string(),
                        text: caps[3].to_string(),
                    });
                }
            } else if let Some(rest) = line.strip_prefix("Drafted Solution:") {
                draft = Some(rest.trim().to_string());
            }
        }
        Self {
            question,
            documents,
            draft,
        }
    }

    pub fn mode(&self) -> PromptMode {
        if self.draft.is_some() {
            PromptMode::Correct
        } else {
            PromptMode::Generate
        }
    }

    pub fn indices(&self) -> Vec<u32> {
        self.documents.iter().map(|d| d.index).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answer::{parse_long_form, Statement};

    fn passages(n: usize) -> Vec<Passage> {
        (1..=n)
            .map(|i| Passage {
                pid: format!("p{i}"),
                title: format!("Title {i}"),
                text: format!("Body of passage {i}."),
            })
            .collect()
    }

    fn shown<'a>(ps: &'a [Passage], indices: &[u32]) -> Vec<ShownDocument<'a>> {
        ps.iter()
            .zip(indices)
            .map(|(p, &index)| ShownDocument { index, passage: p })
            .collect()
    }

    fn query_block(prompt: &str) -> &str {
        &prompt[prompt.rfind("Question:").unwrap()..]
    }

    #[test]
    fn builtin_shot_counts() {
        for style in [TaskStyle::Asqa, TaskStyle::Qampari, TaskStyle::Eli5] {
            assert_eq!(PromptTemplate::builtin(style, PromptMode::Generate).shots.len(), 2);
            assert_eq!(PromptTemplate::builtin(style, PromptMode::Correct).shots.len(), 1);
        }
    }

    #[test]
    fn five_documents_in_order() {
        let ps = passages(5);
        let t = PromptTemplate::builtin(TaskStyle::Asqa, PromptMode::Generate);
        let prompt = render_generation_prompt(&t, "Who sings it?", &shown(&ps, &[1, 2, 3, 4, 5])).unwrap();
        let block = query_block(&prompt);
        let lines: Vec<&str> = block.lines().filter(|l| l.starts_with("Document [")).collect();
        assert_eq!(lines.len(), 5);
        for (i, line) in lines.iter().enumerate() {
            assert!(line.starts_with(&format!("Document [{}](Title: Title {})", i + 1, i + 1)));
        }
        assert!(prompt.starts_with("Instruction: Write an accurate"));
        assert!(prompt.ends_with("Answer:"));
        assert!(block.starts_with("Question: Who sings it?"));
    }

    #[test]
    fn zero_shot_prompt_has_exactly_the_shown_documents() {
        let mut t = PromptTemplate::builtin(TaskStyle::Asqa, PromptMode::Generate);
        t.shots.clear();
        let ps = passages(5);
        let prompt = render_generation_prompt(&t, "q", &shown(&ps, &[1, 2, 3, 4, 5])).unwrap();
        assert_eq!(prompt.matches("Document [").count(), 5);
    }

    #[test]
    fn global_display_indices_are_kept() {
        let ps = passages(5);
        let t = PromptTemplate::builtin(TaskStyle::Asqa, PromptMode::Generate);
        let prompt = render_generation_prompt(&t, "q", &shown(&ps, &[1, 4, 5, 6, 7])).unwrap();
        assert_eq!(PromptView::parse(&prompt).indices(), vec![1, 4, 5, 6, 7]);
    }

    #[test]
    fn zero_documents_is_an_error() {
        let t = PromptTemplate::builtin(TaskStyle::Asqa, PromptMode::Generate);
        assert!(matches!(render_generation_prompt(&t, "q", &[]), Err(Error::Template(_))));
        let ps = passages(2);
        assert!(render_generation_prompt(&t, "q", &shown(&ps, &[2, 1])).is_err());
    }

    #[test]
    fn correction_prompt_structure() {
        let ps = passages(5);
        let t = PromptTemplate::builtin(TaskStyle::Asqa, PromptMode::Correct);
        let draft = parse_long_form("First claim [1]. Second claim [4].", &(1..=5).collect());
        let prompt = render_correction_prompt(&t, "q", &shown(&ps, &[1, 4, 5]), &draft, 3).unwrap();
        let block = query_block(&prompt);
        assert!(block.contains("Drafted Solution: First claim [1]. Second claim [4]."));
        assert!(prompt.contains("based on the first 3 search results"));
        assert!(prompt.ends_with("Corrected Answer:"));
        let view = PromptView::parse(&prompt);
        assert_eq!(view.mode(), PromptMode::Correct);
        assert_eq!(view.draft.as_deref(), Some("First claim [1]. Second claim [4]."));
    }

    #[test]
    fn qampari_correction_with_empty_draft() {
        let ps = passages(5);
        let t = PromptTemplate::builtin(TaskStyle::Qampari, PromptMode::Correct);
        let draft = GroundedAnswer::empty(AnswerStyle::EntityList);
        let prompt = render_correction_prompt(&t, "q", &shown(&ps, &[1, 2, 3, 4, 5]), &draft, 0).unwrap();
        assert!(prompt.contains("start from scratch, basing your answer"));
        assert!(prompt.contains("\"Final Answer:\""));
        assert!(query_block(&prompt).contains("Drafted Solution: \n"));
        assert!(prompt.contains("based on the first 0 search results"));
        assert!(render_correction_prompt(&t, "q", &shown(&ps, &[1]), &draft, 2).is_err());
    }

    #[test]
    fn substitution_is_single_pass() {
        let ps = [Passage {
            pid: "x".into(),
            title: "{QUESTION}".into(),
            text: "{DRAFT} and {DOCUMENTS}".into(),
        }];
        let mut t = PromptTemplate::builtin(TaskStyle::Eli5, PromptMode::Generate);
        t.shots.clear();
        let prompt = render_generation_prompt(&t, "what {DOCUMENTS}?", &shown(&ps, &[1])).unwrap();
        assert!(prompt.contains("Question: what {DOCUMENTS}?"));
        assert!(prompt.contains("Document [1](Title: {QUESTION}): {DRAFT} and {DOCUMENTS}"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let ps = passages(3);
        let t = PromptTemplate::builtin(TaskStyle::Qampari, PromptMode::Generate);
        let a = render_generation_prompt(&t, "q", &shown(&ps, &[1, 2, 3])).unwrap();
        let b = render_generation_prompt(&t, "q", &shown(&ps, &[1, 2, 3])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn template_requires_placeholders() {
        let err = PromptTemplate::new(TaskStyle::Asqa, PromptMode::Correct, "Question: {QUESTION}\n{DOCUMENTS}".into(), vec![]);
        assert!(matches!(err, Err(Error::Template(_))));
    }

    #[test]
    fn prompt_view_reads_titles_with_parentheses() {
        let ps = [Passage {
            pid: "x".into(),
            title: "Don't (Ed Sheeran song)".into(),
            text: "(Omitted)".into(),
        }];
        let t = PromptTemplate::builtin(TaskStyle::Asqa, PromptMode::Generate);
        let prompt = render_generation_prompt(&t, "q", &shown(&ps, &[2])).unwrap();
        let view = PromptView::parse(&prompt);
        assert_eq!(view.documents[0].title, "Don't (Ed Sheeran song)");
        assert_eq!(view.documents[0].text, "(Omitted)");
        let _ = Statement::new("x", [1]);
    }
}
