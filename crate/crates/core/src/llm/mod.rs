//! Language-model steps behind one client interface: query aspect extraction,
//! review text generation and listwise reranking.
//!
//! [`MockLlm`] is deterministic and offline; [`HttpLlm`] talks to an
//! OpenAI-compatible chat-completions endpoint.

pub(crate) mod http;
mod mock;
mod prompts;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::place_subspans;

pub use http::{AuditLog, HttpLlm, LlmEndpointConfig};
pub use mock::MockLlm;
pub use prompts::PromptSet;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("query text is empty")]
    EmptyQuery,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("endpoint unreachable after {attempts} attempt(s): {message}")]
    Unreachable { attempts: u32, message: String },
    #[error("{task} output rejected after {attempts} attempt(s): {reason}; raw output: {raw}")]
    InvalidOutput {
        task: &'static str,
        attempts: u32,
        reason: String,
        raw: String,
    },
    #[error("cannot read prompt file: {0}")]
    Io(#[from] std::io::Error),
}

impl LlmError {
    /// True when the endpoint itself gave out, as opposed to a caller error.
    pub fn is_exhaustion(&self) -> bool {
        matches!(
            self,
            LlmError::Unreachable { .. } | LlmError::InvalidOutput { .. }
        )
    }
}

/// A verbatim piece of the query, in character offsets with exclusive end.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedAspects {
    pub query_id: String,
    pub spans: Vec<Span>,
}

impl ExtractedAspects {
    /// Places span texts in the query, left to right and without overlap.
    pub fn from_texts(query_id: &str, query_text: &str, texts: &[String]) -> Result<Self, String> {
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let placed = place_subspans(query_text, &refs)
            .ok_or_else(|| "spans are not non-overlapping sub-spans of the query".to_string())?;
        let out = Self {
            query_id: query_id.to_string(),
            spans: placed
                .into_iter()
                .zip(texts)
                .map(|((start, end), text)| Span {
                    start,
                    end,
                    text: text.clone(),
                })
                .collect(),
        };
        out.check(query_text)?;
        Ok(out)
    }

    /// Checks the extraction contract against the query text.
    pub fn check(&self, query_text: &str) -> Result<(), String> {
        if self.spans.len() < 2 {
            return Err(format!("need at least 2 spans, got {}", self.spans.len()));
        }
        let chars: Vec<char> = query_text.chars().collect();
        for span in &self.spans {
            if span.start >= span.end || span.end > chars.len() {
                return Err(format!("span {}..{} is out of range", span.start, span.end));
            }
            let actual: String = chars[span.start..span.end].iter().collect();
            if actual != span.text {
                return Err(format!(
                    "span {}..{} reads `{actual}`, not `{}`",
                    span.start, span.end, span.text
                ));
            }
        }
        if let Some((a, b)) = first_overlap(&self.spans) {
            return Err(format!("spans `{}` and `{}` overlap", a.text, b.text));
        }
        Ok(())
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.spans.iter().map(|s| s.text.as_str())
    }
}

/// First pair of spans whose character ranges intersect.
pub fn first_overlap(spans: &[Span]) -> Option<(&Span, &Span)> {
    spans.iter().enumerate().find_map(|(i, a)| {
        spans[i + 1..]
            .iter()
            .find(|b| a.start < b.end && b.start < a.end)
            .map(|b| (a, b))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReviewStyle {
    Overlapping,
    Disjoint,
}

impl fmt::Display for ReviewStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReviewStyle::Overlapping => "overlapping",
            ReviewStyle::Disjoint => "disjoint",
        })
    }
}

/// One candidate item with the review texts shown to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemReviews {
    pub item_id: String,
    pub reviews: Vec<String>,
}

pub trait LlmClient: Send + Sync {
    fn extract_aspects(
        &self,
        query_id: &str,
        query_text: &str,
    ) -> Result<ExtractedAspects, LlmError>;

    fn generate_review_text(
        &self,
        item_id: &str,
        aspect_texts: &[&str],
        style: ReviewStyle,
        nonce: u64,
    ) -> Result<String, LlmError>;

    /// The item ids in the order the model emitted them, unrepaired.
    fn rerank_listwise(
        &self,
        query_text: &str,
        items: &[ItemReviews],
    ) -> Result<Vec<String>, LlmError>;
}

pub(crate) fn check_review_request(
    aspect_texts: &[&str],
    style: ReviewStyle,
) -> Result<(), LlmError> {
    if aspect_texts.is_empty() {
        return Err(LlmError::InvalidRequest("no aspect texts given".into()));
    }
    if style == ReviewStyle::Disjoint && aspect_texts.len() != 1 {
        return Err(LlmError::InvalidRequest(format!(
            "disjoint reviews take exactly one aspect, got {}",
            aspect_texts.len()
        )));
    }
    Ok(())
}

pub(crate) fn check_listwise_request(items: &[ItemReviews]) -> Result<(), LlmError> {
    if items.is_empty() {
        return Err(LlmError::InvalidRequest("no items to rerank".into()));
    }
    if let Some(item) = items.iter().find(|i| i.reviews.is_empty()) {
        return Err(LlmError::InvalidRequest(format!(
            "item `{}` has no reviews",
            item.item_id
        )));
    }
    Ok(())
}
