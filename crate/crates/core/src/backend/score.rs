//! Similarity-score extraction from judge responses.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScoreError {
    #[error("no score in [0, 1] found in judge response")]
    NoScoreFound,
}

/// Decimal tokens in `text`: an optional `-`, digits, optional fraction,
/// or a bare `.5` style fraction.
fn numbers(text: &str) -> impl Iterator<Item = f64> + '_ {
    let bytes = text.as_bytes();
    let mut i = 0;
    std::iter::from_fn(move || {
        while i < bytes.len() {
            let starts_number = bytes[i].is_ascii_digit()
                || (bytes[i] == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit));
            if !starts_number {
                i += 1;
                continue;
            }
            let negative = i > 0 && bytes[i - 1] == b'-';
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            let value: f64 = text[start..i].parse().ok()?;
            return Some(if negative { -value } else { value });
        }
        None
    })
}

/// Returns the first number in the response that lies in `[0, 1]`.
pub fn parse_score(text: &str) -> Result<f64, ScoreError> {
    numbers(text)
        .find(|v| (0.0..=1.0).contains(v))
        .ok_or(ScoreError::NoScoreFound)
}
