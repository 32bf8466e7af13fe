//! Locating the query inside free-form model output.

use std::sync::OnceLock;

use regex::Regex;

fn fence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)```([^\n`]*)\n(.*?)```").expect("valid regex"))
}

/// Contents of the last fenced block tagged `javascript`, `js` or untagged;
/// the whole input trimmed when there is none.
pub fn extract_code_block(llm_output: &str) -> String {
    fence_re()
        .captures_iter(llm_output)
        .filter(|c| {
            let info = c[1].trim().to_ascii_lowercase();
            matches!(info.as_str(), "javascript" | "js" | "")
        })
        .last()
        .map(|c| c[2].trim().to_string())
        .unwrap_or_else(|| llm_output.trim().to_string())
}

/// Drops reasoning enclosed in `<think>` tags, keeping what follows the
/// last closing tag.
pub fn strip_think(raw: &str) -> &str {
    match raw.rfind("</think>") {
        Some(i) => &raw[i + "</think>".len()..],
        None => raw,
    }
}

/// Reasoning text inside the first `<think>` block, if any.
pub fn think_content(raw: &str) -> Option<&str> {
    let start = raw.find("<think>")? + "<think>".len();
    let end = raw[start..].find("</think>")? + start;
    Some(raw[start..end].trim())
}
