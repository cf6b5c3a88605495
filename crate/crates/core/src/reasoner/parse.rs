//! Splits raw reasoning output into its three attribute sections.

use thiserror::Error;

const SECTION_NAMES: [&str; 3] = ["Cause-Effect", "Figurative Understanding", "Mental State"];

/// The three parsed attribute bodies, trimmed, heading lines removed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sections {
    pub cause_effect: String,
    pub figurative_understanding: String,
    pub mental_state: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("empty reasoning output")]
    Empty,
    #[error("missing section heading: {0}")]
    MissingHeading(&'static str),
    #[error("empty section body under: {0}")]
    EmptySection(&'static str),
}

/// Detects whether a line is one of the three section headings. Tolerant
/// to case, surrounding punctuation or markdown, and leading enumeration
/// ("2. Mental State:"), but a heading followed by content on the same
/// line is body text, not a heading.
fn heading_index(line: &str) -> Option<usize> {
    let norm: String = line
        .chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect();
    let stripped = norm.trim_start_matches(|c: char| c.is_ascii_digit());
    match stripped {
        "causeeffect" => Some(0),
        "figurativeunderstanding" => Some(1),
        "mentalstate" => Some(2),
        _ => None,
    }
}

/// Assigns body lines to sections by heading name, in any heading order.
/// Text before the first heading (a preamble sentence) is ignored.
pub fn parse_reasoning(raw: &str) -> Result<Sections, ParseError> {
    if raw.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    let mut bodies: [Vec<&str>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut seen = [false; 3];
    let mut current: Option<usize> = None;
    for line in raw.lines() {
        if let Some(i) = heading_index(line) {
            seen[i] = true;
            current = Some(i);
        } else if let Some(i) = current {
            bodies[i].push(line);
        }
    }
    for (i, name) in SECTION_NAMES.iter().enumerate() {
        if !seen[i] {
            return Err(ParseError::MissingHeading(name));
        }
    }
    let mut out = [String::new(), String::new(), String::new()];
    for (i, name) in SECTION_NAMES.iter().enumerate() {
        let body = bodies[i].join("\n").trim().to_string();
        if body.is_empty() {
            return Err(ParseError::EmptySection(name));
        }
        out[i] = body;
    }
    let [cause_effect, figurative_understanding, mental_state] = out;
    Ok(Sections {
        cause_effect,
        figurative_understanding,
        mental_state,
    })
}

/// Renders sections back into the canonical heading layout. Re-parsing the
/// result reproduces the same three bodies.
pub fn render_sections(sections: &Sections) -> String {
    format!(
        "Cause-Effect:\n{}\nFigurative Understanding:\n{}\nMental State:\n{}",
        sections.cause_effect, sections.figurative_understanding, sections.mental_state
    )
}
