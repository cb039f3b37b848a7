//! A deterministic rule-driven backend for tests and desk-scale experiments.
//!
//! Each rule pairs a prompt predicate with a reply. The first matching rule
//! answers. Replies can read the documents shown in the prompt, which is
//! enough to imitate a model that answers only from what it was given.

use std::collections::HashSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::template::{PromptMode, PromptView};
use super::{LmBackend, LmRequest, LmResponse, Usage};
use crate::answer::{render, AnswerStyle, GroundedAnswer, Statement};
use crate::error::{Error, Result};
use crate::text::sentences;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Matcher {
    #[default]
    Any,
    Contains { text: String },
    QuestionContains { text: String },
    Mode { mode: PromptMode },
    /// Hex SHA-256 of the full prompt.
    PromptHash { sha256: String },
    All { matchers: Vec<Matcher> },
}

impl Matcher {
    fn matches(&self, prompt: &str, view: &PromptView) -> bool {
        match self {
            Matcher::Any => true,
            Matcher::Contains { text } => prompt.contains(text.as_str()),
            Matcher::QuestionContains { text } => view.question.contains(text.as_str()),
            Matcher::Mode { mode } => view.mode() == *mode,
            Matcher::PromptHash { sha256 } => prompt_hash(prompt).eq_ignore_ascii_case(sha256),
            Matcher::All { matchers } => matchers.iter().all(|m| m.matches(prompt, view)),
        }
    }
}

pub fn prompt_hash(prompt: &str) -> String {
    Sha256::digest(prompt.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// An unsupported statement injected into a reply with some probability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Noise {
    pub probability: f64,
    /// Statement text; `{SUBJECT}` is replaced by the extracted subject.
    pub statement: String,
    #[serde(default)]
    pub seed: u64,
}

type ReplyClosure = dyn Fn(&str, &PromptView) -> String + Send + Sync;

/// A reply computed by arbitrary code from the prompt and its parsed view.
#[derive(Clone)]
pub struct ReplyFn(pub Arc<ReplyClosure>);

impl ReplyFn {
    pub fn new(f: impl Fn(&str, &PromptView) -> String + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }
}

impl std::fmt::Debug for ReplyFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ReplyFn(..)")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reply {
    Text { text: String },
    EchoQuestion,
    /// The draft from a correction prompt, or nothing for generation prompts.
    EchoDraft,
    /// `text` followed by a marker for every shown document.
    CiteAll { text: String },
    /// Every sentence of the shown documents that mentions the subject,
    /// cited to its document. The subject is the first capture group of
    /// `subject_pattern` applied to the question; without a pattern every
    /// sentence is read.
    ReadSentences {
        #[serde(default)]
        subject_pattern: Option<String>,
        #[serde(default)]
        noise: Option<Noise>,
    },
    /// Every first-capture-group match of `pattern` in the shown documents,
    /// as an entity list with one citation each; repeated entities keep
    /// their first source.
    ReadEntities { pattern: String },
    #[serde(skip)]
    Custom(ReplyFn),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rule {
    #[serde(default)]
    pub when: Matcher,
    pub reply: Reply,
}

impl Rule {
    pub fn new(when: Matcher, reply: Reply) -> Self {
        Self { when, reply }
    }

    pub fn always(reply: Reply) -> Self {
        Self::new(Matcher::Any, reply)
    }
}

#[derive(Debug)]
pub struct ScriptedBackend {
    id: String,
    rules: Vec<Rule>,
}

impl ScriptedBackend {
    pub fn new(id: impl Into<String>, rules: Vec<Rule>) -> Result<Self> {
        let id = id.into();
        if rules.is_empty() {
            return Err(Error::Script {
                backend: id,
                message: "script has no rules".into(),
            });
        }
        let backend = Self { id, rules };
        for rule in &backend.rules {
            backend.check(&rule.reply)?;
        }
        Ok(backend)
    }

    fn script_error(&self, message: impl Into<String>) -> Error {
        Error::Script {
            backend: self.id.clone(),
            message: message.into(),
        }
    }

    fn regex(&self, pattern: &str) -> Result<Regex> {
        Regex::new(pattern).map_err(|e| self.script_error(format!("bad pattern `{pattern}`: {e}")))
    }

    fn check(&self, reply: &Reply) -> Result<()> {
        match reply {
            Reply::ReadSentences {
                subject_pattern: Some(p),
                ..
            }
            | Reply::ReadEntities { pattern: p } => self.regex(p).map(|_| ()),
            _ => Ok(()),
        }
    }

    fn reply(&self, reply: &Reply, request: &LmRequest, view: &PromptView) -> Result<String> {
        Ok(match reply {
            Reply::Text { text } => text.clone(),
            Reply::EchoQuestion => view.question.clone(),
            Reply::EchoDraft => view.draft.clone().unwrap_or_default(),
            Reply::CiteAll { text } => {
                let markers: String = view.documents.iter().map(|d| format!("[{}]", d.index)).collect();
                format!("{text} {markers}")
            }
            Reply::ReadSentences {
                subject_pattern,
                noise,
            } => self.read_sentences(subject_pattern.as_deref(), noise.as_ref(), request, view)?,
            Reply::ReadEntities { pattern } => {
                let re = self.regex(pattern)?;
                let mut seen = HashSet::new();
                let statements = view
                    .documents
                    .iter()
                    .flat_map(|d| {
                        re.captures_iter(&d.text)
                            .filter_map(|c| c.get(1))
                            .map(|m| (m.as_str().trim().to_string(), d.index))
                            .collect::<Vec<_>>()
                    })
                    .filter(|(e, _)| !e.is_empty() && seen.insert(e.to_lowercase()))
                    .map(|(e, i)| Statement::new(e, [i]))
                    .collect();
                render(&GroundedAnswer::from_statements(AnswerStyle::EntityList, statements))
            }
            Reply::Custom(f) => (f.0)(&request.prompt, view),
        })
    }

    fn read_sentences(
        &self,
        subject_pattern: Option<&str>,
        noise: Option<&Noise>,
        request: &LmRequest,
        view: &PromptView,
    ) -> Result<String> {
        let subject = match subject_pattern {
            Some(p) => self
                .regex(p)?
                .captures(&view.question)
                .and_then(|c| c.get(1))
                .map(|m| m.as_str().trim().to_string()),
            None => None,
        };
        let needle = subject.as_deref().map(str::to_lowercase);
        let mut statements: Vec<Statement> = Vec::new();
        for doc in &view.documents {
            for sentence in sentences(&doc.text) {
                if needle.as_deref().is_none_or(|n| sentence.to_lowercase().contains(n)) {
                    statements.push(Statement::new(sentence, [doc.index]));
                }
            }
        }
        if let Some(noise) = noise {
            if !view.documents.is_empty() {
                let mut rng = noise_rng(noise.seed, request);
                if rng.random_bool(noise.probability.clamp(0.0, 1.0)) {
                    let doc = &view.documents[rng.random_range(0..view.documents.len())];
                    let text = noise
                        .statement
                        .replace("{SUBJECT}", subject.as_deref().unwrap_or("It"));
                    let at = rng.random_range(0..=statements.len());
                    statements.insert(at, Statement::new(text, [doc.index]));
                }
            }
        }
        Ok(render(&GroundedAnswer::from_statements(AnswerStyle::LongForm, statements)))
    }
}

fn noise_rng(seed: u64, request: &LmRequest) -> ChaCha8Rng {
    let digest = Sha256::digest(request.prompt.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(seed ^ u64::from_le_bytes(bytes) ^ request.seed.unwrap_or(0))
}

impl LmBackend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &LmRequest) -> Result<LmResponse> {
        let view = PromptView::parse(&request.prompt);
        let rule = self
            .rules
            .iter()
            .find(|r| r.when.matches(&request.prompt, &view))
            .ok_or_else(|| self.script_error("no rule matches the prompt"))?;
        let text = self.reply(&rule.reply, request, &view)?;
        Ok(LmResponse {
            usage: Usage {
                prompt_tokens: request.prompt.split_whitespace().count() as u64,
                completion_tokens: text.split_whitespace().count() as u64,
            },
            text,
            backend_id: self.id.clone(),
            latency_ms: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::answer::parse_long_form;
    use crate::lm::template::{render_generation_prompt, PromptTemplate, ShownDocument, TaskStyle};
    use crate::retrieval::Passage;

    fn prompt(question: &str, docs: &[(u32, &str)]) -> String {
        let passages: Vec<Passage> = docs
            .iter()
            .map(|(i, text)| Passage {
                pid: format!("d{i}"),
                title: format!("T{i}"),
                text: text.to_string(),
            })
            .collect();
        let shown: Vec<ShownDocument<'_>> = passages
            .iter()
            .zip(docs)
            .map(|(p, (i, _))| ShownDocument { index: *i, passage: p })
            .collect();
        let t = PromptTemplate::builtin(TaskStyle::Asqa, PromptMode::Generate);
        render_generation_prompt(&t, question, &shown).unwrap()
    }

    fn ask(backend: &ScriptedBackend, prompt: &str) -> String {
        backend.complete(&LmRequest::new(prompt, 64)).unwrap().text
    }

    #[test]
    fn empty_script_is_rejected() {
        assert!(matches!(ScriptedBackend::new("m", vec![]), Err(Error::Script { .. })));
    }

    #[test]
    fn echo_question() {
        let b = ScriptedBackend::new("m", vec![Rule::always(Reply::EchoQuestion)]).unwrap();
        assert_eq!(ask(&b, &prompt("Who won?", &[(1, "x.")])), "Who won?");
    }

    #[test]
    fn cite_all_over_five_docs() {
        let b = ScriptedBackend::new("m", vec![Rule::always(Reply::CiteAll { text: "Yes.".into() })]).unwrap();
        let docs: Vec<(u32, &str)> = (1..=5).map(|i| (i, "text.")).collect();
        assert_eq!(ask(&b, &prompt("q", &docs)), "Yes. [1][2][3][4][5]");
    }

    #[test]
    fn prompt_hash_rule_gives_exact_reply() {
        let p = prompt("q", &[(1, "a.")]);
        let b = ScriptedBackend::new(
            "m",
            vec![
                Rule::new(
                    Matcher::PromptHash { sha256: prompt_hash(&p) },
                    Reply::Text { text: "exact".into() },
                ),
                Rule::always(Reply::Text { text: "other".into() }),
            ],
        )
        .unwrap();
        assert_eq!(ask(&b, &p), "exact");
        assert_eq!(ask(&b, &prompt("q2", &[(1, "a.")])), "other");
    }

    #[test]
    fn no_matching_rule_is_an_error() {
        let b = ScriptedBackend::new(
            "m",
            vec![Rule::new(Matcher::Contains { text: "zzz".into() }, Reply::EchoQuestion)],
        )
        .unwrap();
        let err = b.complete(&LmRequest::new(prompt("q", &[(1, "a.")]), 8)).unwrap_err();
        assert!(matches!(err, Error::Script { .. }));
    }

    #[test]
    fn reader_cites_only_shown_documents() {
        let b = ScriptedBackend::new(
            "v",
            vec![Rule::always(Reply::ReadSentences {
                subject_pattern: Some(r"^What is (.+) known for\?$".into()),
                noise: None,
            })],
        )
        .unwrap();
        let p = prompt(
            "What is Ostra Bay known for?",
            &[
                (2, "Ostra Bay is known for its salt. Rain falls."),
                (5, "Nothing here."),
                (9, "Fishermen praise Ostra Bay."),
            ],
        );
        let out = ask(&b, &p);
        assert_eq!(out, "Ostra Bay is known for its salt [2]. Fishermen praise Ostra Bay [9].");
        let valid: BTreeSet<u32> = [2, 5, 9].into();
        let parsed = parse_long_form(&out, &valid);
        assert!(!parsed.has_warnings());
        assert!(parsed.cited_indices().iter().all(|c| valid.contains(c)));
    }

    #[test]
    fn noise_is_deterministic_per_prompt() {
        let rules = vec![Rule::always(Reply::ReadSentences {
            subject_pattern: None,
            noise: Some(Noise {
                probability: 0.5,
                statement: "{SUBJECT} glows at night.".into(),
                seed: 7,
            }),
        })];
        let b = ScriptedBackend::new("m", rules).unwrap();
        let mut injected = 0;
        for i in 0..64 {
            let p = prompt(&format!("q{i}"), &[(1, "A fact.")]);
            let first = ask(&b, &p);
            assert_eq!(first, ask(&b, &p));
            if first.contains("glows") {
                injected += 1;
            }
        }
        assert!((10..54).contains(&injected), "{injected}");
    }

    #[test]
    fn entities_dedup_and_cite_one_source() {
        let b = ScriptedBackend::new(
            "m",
            vec![Rule::always(Reply::ReadEntities {
                pattern: r"film ([A-Z][a-z]+)".into(),
            })],
        )
        .unwrap();
        let p = prompt("q", &[(1, "the film Halloween and film Christine"), (3, "film Halloween again")]);
        assert_eq!(ask(&b, &p), "Halloween [1], Christine [1]");
    }

    #[test]
    fn rules_deserialize_from_json() {
        let rules: Vec<Rule> = serde_json::from_str(
            r#"[{"when": {"kind": "mode", "mode": "correct"}, "reply": {"kind": "echo_draft"}},
                {"reply": {"kind": "text", "text": "hi"}}]"#,
        )
        .unwrap();
        let b = ScriptedBackend::new("m", rules).unwrap();
        assert_eq!(ask(&b, &prompt("q", &[(1, "a.")])), "hi");
    }
}
