//! Three-step self-explanation protocol for chat-completion endpoints.
//!
//! A classifier is asked (a) for a label, (b) for the phrases that most
//! influenced its answer, and (c) for a minimally edited counterfactual
//! version of the input that would flip its answer. Step (b) continues the
//! classification chat; step (c) runs in a fresh session that replays the
//! classification exchange, so the two elicitations can never influence
//! each other. Replies are parsed leniently (labels by case-insensitive
//! match, phrases by line with surrounding quotes stripped) and every
//! exchange is retained for audit.

pub mod client;
pub mod mock;

use serde::{Deserialize, Serialize};

use crate::corpus::LabelSet;
use crate::error::{Error, Result};

use client::ChatClient;

/// Sender of a chat message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// One message of a chat exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

/// An ordered chat exchange with one endpoint, pinned to temperature 0.
///
/// Messages alternate user/assistant after an optional leading system
/// message; user and assistant contents are never empty. The invariant is
/// enforced by the push methods, so a transcript built through them is
/// always valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatTranscript {
    pub endpoint_id: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
}

impl ChatTranscript {
    pub fn new(endpoint_id: impl Into<String>) -> Self {
        ChatTranscript {
            endpoint_id: endpoint_id.into(),
            temperature: 0.0,
            messages: Vec::new(),
        }
    }

    fn push(&mut self, role: Role, content: impl Into<String>) -> Result<()> {
        let content = content.into();
        if content.is_empty() {
            return Err(Error::Protocol(format!(
                "{} message must not be empty",
                role.as_str()
            )));
        }
        let last = self.messages.last().map(|m| m.role);
        let ok = match role {
            Role::System => self.messages.is_empty(),
            Role::User => matches!(last, None | Some(Role::System) | Some(Role::Assistant)),
            Role::Assistant => matches!(last, Some(Role::User)),
        };
        if !ok {
            return Err(Error::Protocol(format!(
                "cannot append {} message after {}",
                role.as_str(),
                last.map_or("nothing", |r| r.as_str()),
            )));
        }
        self.messages.push(ChatMessage { role, content });
        Ok(())
    }

    pub fn push_system(&mut self, content: impl Into<String>) -> Result<()> {
        self.push(Role::System, content)
    }

    pub fn push_user(&mut self, content: impl Into<String>) -> Result<()> {
        self.push(Role::User, content)
    }

    pub fn push_assistant(&mut self, content: impl Into<String>) -> Result<()> {
        self.push(Role::Assistant, content)
    }

    /// Content of the trailing assistant message, if the exchange ends on
    /// one.
    pub fn last_assistant(&self) -> Option<&str> {
        match self.messages.last() {
            Some(m) if m.role == Role::Assistant => Some(&m.content),
            _ => None,
        }
    }

    /// Checks the alternation and non-emptiness invariants, for transcripts
    /// deserialized from external sources.
    pub fn validate(&self) -> Result<()> {
        let mut check = ChatTranscript::new(self.endpoint_id.clone());
        for m in &self.messages {
            check.push(m.role, m.content.clone())?;
        }
        Ok(())
    }
}

/// Prompt wording for the three protocol steps.
///
/// `{text}` and `{labels}` are substituted into the classify template and
/// `{k}` (the requested phrase count) into the extractive template. The
/// bundled defaults address a single most-important phrase, so they carry
/// no `{k}`; a pipeline that requests more than one phrase per text must
/// use a template containing it (see [`PromptTemplates::validate`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub classify_template: String,
    pub extractive_template: String,
    pub counterfactual_template: String,
}

/// Extractive wording for pipelines that request several phrases at once.
pub const EXTRACTIVE_MULTI_TEMPLATE: &str = "What are the {k} most important phrases influencing your assessment? Provide only the phrases as strings, one per line.";

impl PromptTemplates {
    /// Wording for sentiment classification of reviews.
    pub fn sentiment() -> Self {
        PromptTemplates {
            classify_template: "What is the sentiment of the following review?\n\n\"{text}\"\n\nAssign one of the following labels: {labels}. Make sure to answer only with the label.".into(),
            extractive_template: "What is the most important phrase influencing your assessment? Provide only the phrase as a string.".into(),
            counterfactual_template: "Provide a version of the review that would flip your assessment while changing as few words in the original review as possible. Make sure to answer with only the new version.".into(),
        }
    }

    /// Wording for product-recall hazard classification.
    pub fn recall() -> Self {
        PromptTemplates {
            classify_template: "What is the reason for recall in the following text?\n\n\"{text}\"\n\nAssign one of the following labels: {labels}. Make sure to answer only with the label.".into(),
            extractive_template: "What is the most important phrase influencing your assessment? Provide only the phrase as a string.".into(),
            counterfactual_template: "Provide a version of the text that would flip your assessment while changing as few words in the original text as possible. Make sure to answer with only the new version.".into(),
        }
    }

    /// Renders the classification prompt for one text.
    pub fn classify_prompt(&self, text: &str, labels: &LabelSet) -> String {
        self.classify_template
            .replace("{labels}", &format_labels(labels))
            .replace("{text}", text)
    }

    /// Renders the extractive prompt for a request of `k` phrases.
    pub fn extractive_prompt(&self, k: usize) -> String {
        self.extractive_template.replace("{k}", &k.to_string())
    }

    /// Renders the counterfactual prompt.
    pub fn counterfactual_prompt(&self, text: &str, labels: &LabelSet) -> String {
        self.counterfactual_template
            .replace("{labels}", &format_labels(labels))
            .replace("{text}", text)
    }

    /// Checks that every placeholder the pipeline will substitute is
    /// present: `{text}` and `{labels}` in the classify template, and `{k}`
    /// in the extractive template when any request asks for more than one
    /// phrase (`needs_k`).
    pub fn validate(&self, needs_k: bool) -> Result<()> {
        for ph in ["{text}", "{labels}"] {
            if !self.classify_template.contains(ph) {
                return Err(Error::Config(format!(
                    "classify template is missing the {ph} placeholder"
                )));
            }
        }
        if needs_k && !self.extractive_template.contains("{k}") {
            return Err(Error::Config(
                "extractive template needs a {k} placeholder to request more than one phrase"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Everything elicited for one text: the label, the phrases the classifier
/// named as decisive, the counterfactual rewrite, and the raw transcripts
/// of both sessions for audit. The extractive exchange lives at the end of
/// the classification transcript; the counterfactual transcript shares only
/// the replayed classification exchange with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfExplanationRecord {
    pub text_id: String,
    pub predicted_label: String,
    pub extractive_phrases: Vec<String>,
    pub counterfactual_text: Option<String>,
    pub extractive_transcript: ChatTranscript,
    pub counterfactual_transcript: Option<ChatTranscript>,
}

/// Formats a label set for prompt interpolation: each label quoted, the
/// last two joined by "or".
pub fn format_labels(labels: &LabelSet) -> String {
    let quoted: Vec<String> = labels.iter().map(|l| format!("\"{l}\"")).collect();
    match quoted.len() {
        1 => quoted.into_iter().next().unwrap(),
        n => format!("{} or {}", quoted[..n - 1].join(", "), quoted[n - 1]),
    }
}

/// Maps a free-form reply onto a label set.
///
/// Matching is case-insensitive. A reply that equals a label after
/// trimming surrounding whitespace and punctuation wins outright;
/// otherwise a label occurring as a substring of the reply wins if it is
/// the only one. Zero or several candidates are a parse error.
pub fn parse_label(reply: &str, labels: &LabelSet) -> Result<String> {
    let lowered = reply.to_lowercase();
    let trimmed = lowered
        .trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .to_string();
    let fail = |reason: String| {
        Err(Error::LabelParse {
            reply: reply.to_string(),
            reason,
        })
    };
    if trimmed.is_empty() {
        return fail("reply is empty".into());
    }
    for label in labels.iter() {
        if trimmed == label.to_lowercase() {
            return Ok(label.to_string());
        }
    }
    let candidates: Vec<&str> = labels
        .iter()
        .filter(|l| lowered.contains(&l.to_lowercase()))
        .collect();
    match candidates.len() {
        1 => Ok(candidates[0].to_string()),
        0 => fail("no label mentioned".into()),
        _ => fail(format!("several labels mentioned: {}", candidates.join(", "))),
    }
}

/// Strips one or more layers of matching surrounding quote characters.
fn strip_quotes(s: &str) -> &str {
    const PAIRS: [(char, char); 4] = [('"', '"'), ('\'', '\''), ('\u{201c}', '\u{201d}'), ('\u{2018}', '\u{2019}')];
    let mut out = s.trim();
    loop {
        let mut chars = out.chars();
        let (first, last) = match (chars.next(), chars.next_back()) {
            (Some(f), Some(l)) => (f, l),
            _ => return out,
        };
        if PAIRS.iter().any(|&(open, close)| first == open && last == close) {
            out = out[first.len_utf8()..out.len() - last.len_utf8()].trim();
        } else {
            return out;
        }
    }
}

/// Step (a): asks for a label and parses the reply.
///
/// Returns the canonical label together with the transcript, which the
/// extractive step continues.
pub fn ask_classification(
    client: &ChatClient,
    templates: &PromptTemplates,
    text: &str,
    labels: &LabelSet,
) -> Result<(String, ChatTranscript)> {
    let mut transcript = ChatTranscript::new(client.endpoint_id());
    transcript.push_user(templates.classify_prompt(text, labels))?;
    let reply = client.chat(&transcript)?;
    transcript.push_assistant(reply.clone())?;
    let label = parse_label(&reply, labels)?;
    Ok((label, transcript))
}

/// Step (b): asks, in the same session as the classification, for the `k`
/// phrases that most influenced the answer.
///
/// The reply is split on newlines and each line is kept as one phrase with
/// surrounding quotes stripped; at most `k` phrases are returned. The
/// exchange is appended to `transcript`.
pub fn ask_extractive(
    client: &ChatClient,
    templates: &PromptTemplates,
    transcript: &mut ChatTranscript,
    k: usize,
) -> Result<Vec<String>> {
    if k == 0 {
        return Err(Error::Config("phrase count must be at least 1".into()));
    }
    if transcript.last_assistant().is_none() {
        return Err(Error::Protocol(
            "extractive step requires a transcript ending on the label reply".into(),
        ));
    }
    transcript.push_user(templates.extractive_prompt(k))?;
    let reply = client.chat(transcript)?;
    transcript.push_assistant(reply.clone())?;
    let phrases: Vec<String> = reply
        .lines()
        .map(|line| strip_quotes(line).to_string())
        .filter(|p| !p.is_empty())
        .take(k)
        .collect();
    if phrases.is_empty() {
        return Err(Error::Protocol(format!(
            "no phrases could be read from reply {reply:?}"
        )));
    }
    Ok(phrases)
}

/// Step (c): asks for a counterfactual rewrite in a fresh session.
///
/// The new session replays the classification exchange (the same prompt
/// and the assistant's original `classification_reply`) so the endpoint
/// has the context of its own answer, then asks for a version of the text
/// that would flip it. The extractive session is never reused.
pub fn ask_counterfactual(
    client: &ChatClient,
    templates: &PromptTemplates,
    text: &str,
    labels: &LabelSet,
    classification_reply: &str,
) -> Result<(String, ChatTranscript)> {
    let mut transcript = ChatTranscript::new(client.endpoint_id());
    transcript.push_user(templates.classify_prompt(text, labels))?;
    transcript.push_assistant(classification_reply)?;
    transcript.push_user(templates.counterfactual_prompt(text, labels))?;
    let reply = client.chat(&transcript)?;
    transcript.push_assistant(reply.clone())?;
    let counterfactual = strip_quotes(&reply).to_string();
    if counterfactual.is_empty() {
        return Err(Error::Protocol(
            "counterfactual reply is empty after quote stripping".into(),
        ));
    }
    Ok((counterfactual, transcript))
}

/// Judges a counterfactual: valid iff `classify` assigns it a different
/// label than the original text received. The classifier must be the same
/// model or endpoint that produced `original_label`.
pub fn validate_counterfactual<F>(
    mut classify: F,
    original_label: &str,
    counterfactual_text: &str,
) -> Result<bool>
where
    F: FnMut(&str) -> Result<String>,
{
    let relabel = classify(counterfactual_text)?;
    Ok(relabel != original_label)
}

/// Runs the full protocol for one text: classify, elicit `k` phrases in
/// the same session, elicit a counterfactual in a fresh one.
pub fn explain_text(
    client: &ChatClient,
    templates: &PromptTemplates,
    text_id: &str,
    text: &str,
    labels: &LabelSet,
    k: usize,
) -> Result<SelfExplanationRecord> {
    let (label, mut transcript) = ask_classification(client, templates, text, labels)?;
    let reply = transcript
        .last_assistant()
        .expect("classification ends on the assistant reply")
        .to_string();
    let phrases = ask_extractive(client, templates, &mut transcript, k)?;
    let (counterfactual, cf_transcript) =
        ask_counterfactual(client, templates, text, labels, &reply)?;
    Ok(SelfExplanationRecord {
        text_id: text_id.to_string(),
        predicted_label: label,
        extractive_phrases: phrases,
        counterfactual_text: Some(counterfactual),
        extractive_transcript: transcript,
        counterfactual_transcript: Some(cf_transcript),
    })
}
