use super::{Arity, RewardSource};
use thiserror::Error;

/// Labels accepted on the opening fence; anything else is rejected.
pub const ACCEPTED_FENCE_LABELS: [&str; 3] = ["python", "reward", "text"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractionError {
    #[error("no ``` fenced block found")]
    NoFence,
    #[error("fenced block is not closed")]
    Unterminated,
    #[error("unsupported fence label `{0}`")]
    Label(String),
    #[error("fenced block is empty")]
    Empty,
}

/// Returns the trimmed contents of the first triple-backtick block.
pub fn extract_code_block(llm_text: &str, arity: Arity) -> Result<RewardSource, ExtractionError> {
    let open = llm_text.find("```").ok_or(ExtractionError::NoFence)?;
    let after = &llm_text[open + 3..];
    let (label, body) = match after.find('\n') {
        Some(nl) => (after[..nl].trim(), &after[nl + 1..]),
        None => ("", after),
    };
    // a one-line block such as ```obs[0]``` has no label line
    let (label, body) = if !label.is_empty() && !label.contains("```") && is_label(label) {
        (label, body)
    } else {
        ("", after)
    };
    if !label.is_empty() && !ACCEPTED_FENCE_LABELS.contains(&label.to_ascii_lowercase().as_str()) {
        return Err(ExtractionError::Label(label.to_string()));
    }
    let close = body.find("```").ok_or(ExtractionError::Unterminated)?;
    let code = body[..close].trim();
    if code.is_empty() {
        return Err(ExtractionError::Empty);
    }
    Ok(RewardSource::expression(code, arity))
}

fn is_label(s: &str) -> bool {
    s.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '+')
}
