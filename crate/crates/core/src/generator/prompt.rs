//! Prompt construction from versioned templates.

use std::fmt::Write as _;

use serde::Serialize;

use crate::evidence::{EvidenceContext, ValueEvidence};
use crate::mql::Literal;

pub const TEMPLATE_VERSION: &str = "v1";
const SYSTEM_TEMPLATE: &str = include_str!("../../templates/system.v1.txt");
const USER_TEMPLATE: &str = include_str!("../../templates/user.v1.txt");
const FORMAT_TEMPLATE: &str = include_str!("../../templates/format.v1.txt");

/// Placeholder names recognised in templates.
pub const PLACEHOLDERS: &[&str] = &["question", "schema", "evidence", "format_instructions"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Prompt {
    pub system: String,
    pub user: String,
    /// Schema lines dropped to respect the character budget.
    pub truncated_lines: usize,
}

impl Prompt {
    pub fn char_len(&self) -> usize {
        self.system.chars().count() + self.user.chars().count()
    }
}

/// Prompt-building options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PromptOptions {
    /// Upper bound on `system + user` characters.
    pub max_chars: Option<usize>,
}

/// Single-pass `{name}` substitution; substituted values are never rescanned.
pub fn fill_template(template: &str, lookup: impl Fn(&str) -> Option<String>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if after[..close].chars().all(|c| c.is_ascii_alphanumeric() || c == '_') => {
                match lookup(&after[..close]) {
                    Some(v) => out.push_str(&v),
                    None => out.push_str(&rest[open..open + close + 2]),
                }
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

fn render_user(question: &str, schema: &str, evidence: &str) -> String {
    let format = FORMAT_TEMPLATE.trim_end();
    fill_template(USER_TEMPLATE, |name| match name {
        "question" => Some(question.trim().to_string()),
        "schema" => Some(schema.trim_end().to_string()),
        "evidence" => Some(evidence.to_string()),
        "format_instructions" => Some(format.to_string()),
        _ => None,
    })
}

fn build(question: &str, schema_text: &str, evidence: &str, opts: &PromptOptions) -> Prompt {
    let system = SYSTEM_TEMPLATE.trim_end().to_string();
    let mut lines: Vec<&str> = schema_text.lines().collect();
    let mut dropped = 0;
    let mut user = render_user(question, schema_text, evidence);
    if let Some(budget) = opts.max_chars {
        // the banner line is always kept
        while system.chars().count() + user.chars().count() > budget && lines.len() > 1 {
            lines.pop();
            dropped += 1;
            let schema = format!("{}\n... ({dropped} schema lines omitted)", lines.join("\n"));
            user = render_user(question, &schema, evidence);
        }
    }
    Prompt {
        system,
        user,
        truncated_lines: dropped,
    }
}

/// The initial prompt: full schema and question, no evidence.
pub fn build_draft_prompt(question: &str, schema_text: &str, opts: &PromptOptions) -> Prompt {
    build(question, schema_text, "", opts)
}

/// A prompt for a refined context. With every refinement flag off this is
/// identical to [`build_draft_prompt`].
pub fn build_refined_prompt(ctx: &EvidenceContext, opts: &PromptOptions) -> Prompt {
    let evidence = if ctx.flags.use_ground {
        render_evidence(&ctx.value_evidence)
    } else {
        String::new()
    };
    build(&ctx.question, &ctx.schema_text, &evidence, opts)
}

fn compact(doc: &crate::mql::Document) -> String {
    Literal::Document(doc.clone()).to_json_string()
}

/// The value-evidence section, including its trailing blank line.
pub fn render_evidence(evidence: &[ValueEvidence]) -> String {
    let mut out = String::from("### Value evidence\n");
    if evidence.is_empty() {
        out.push_str("No equality or membership values in the draft needed verification.\n\n");
        return out;
    }
    for ev in evidence {
        let value = ev.value.to_json_string();
        if !ev.is_verified() {
            let _ = writeln!(out, "- {} = {value}: not found in data", ev.field);
            continue;
        }
        for probe in &ev.verified {
            let case = if probe.case_insensitive { ", case differs" } else { "" };
            let sample = probe.sample.first().map(compact).unwrap_or_default();
            let _ = writeln!(
                out,
                "- {} = {value}: found under {}{case}; sample {sample}",
                ev.field, probe.field
            );
        }
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitution_is_single_pass() {
        let out = fill_template("a {x} {y} {not closed", |n| match n {
            "x" => Some("{y}".into()),
            "y" => Some("Y".into()),
            _ => None,
        });
        assert_eq!(out, "a {y} Y {not closed");
        assert_eq!(fill_template("{unknown} {a-b}", |_| None), "{unknown} {a-b}");
    }

    #[test]
    fn draft_prompt_is_well_formed() {
        let p = build_draft_prompt("How many users?", "", &PromptOptions::default());
        for name in PLACEHOLDERS {
            assert!(!p.user.contains(&format!("{{{name}}}")));
        }
        assert!(p.user.contains("How many users?"));
        assert!(p.user.contains("```javascript"));
        assert_eq!(p.truncated_lines, 0);
    }

    #[test]
    fn budget_truncates_schema_tail() {
        let schema: String = (0..50).map(|i| format!("field{i} (int): examples=[{i}]\n")).collect();
        let full = build_draft_prompt("q", &schema, &PromptOptions::default());
        let budget = full.char_len() - 200;
        let p = build_draft_prompt(
            "q",
            &schema,
            &PromptOptions {
                max_chars: Some(budget),
            },
        );
        assert!(p.char_len() <= budget);
        assert!(p.truncated_lines > 0);
        assert!(p.user.contains("field0 "));
        assert!(!p.user.contains("field49 "));
        assert!(p.user.contains("schema lines omitted"));
    }
}
