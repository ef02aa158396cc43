//! Prompt templates shipped as opaque text assets.

use crate::model::{PrincipleSet, Quadruple};
use std::collections::BTreeMap;

pub const DECOMPOSE: &str = include_str!("../../assets/decompose.txt");
pub const SCORE: &str = include_str!("../../assets/score.txt");
pub const VERIFY: &str = include_str!("../../assets/verify.txt");

pub fn by_name(name: &str) -> Option<&'static str> {
    match name {
        "decompose" => Some(DECOMPOSE),
        "score" => Some(SCORE),
        "verify" => Some(VERIFY),
        _ => None,
    }
}

/// Replaces each `{{KEY}}` with its value verbatim. Unknown placeholders are
/// left untouched.
pub fn render(template: &str, vars: &BTreeMap<&str, String>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find("}}").and_then(|end| vars.get(&after[..end]).map(|v| (end, v))) {
            Some((end, value)) => {
                out.push_str(value);
                rest = &after[end + 2..];
            }
            None => {
                out.push_str("{{");
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// One principle per line, numbered from 1.
pub fn question_points(principles: &PrincipleSet) -> String {
    principles
        .iter()
        .enumerate()
        .map(|(i, p)| format!("{}. {}", i + 1, p.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// The standard variables for a quadruple, plus `CoT` when given.
pub fn quad_vars(quad: &Quadruple, cot: Option<&str>) -> BTreeMap<&'static str, String> {
    let mut vars = BTreeMap::new();
    vars.insert("EDIT_INSTRUCTION", quad.context.instruction.clone());
    vars.insert("QUESTION_POINTS", question_points(&quad.principles));
    if let Some(c) = cot {
        vars.insert("CoT", c.to_string());
    }
    vars
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitution_is_verbatim() {
        let mut vars = BTreeMap::new();
        vars.insert("EDIT_INSTRUCTION", "add {{CoT}} & $1".to_string());
        vars.insert("CoT", "thoughts".to_string());
        let out = render("A {{EDIT_INSTRUCTION}} B {{OTHER}} {{CoT}}", &vars);
        assert_eq!(out, "A add {{CoT}} & $1 B {{OTHER}} thoughts");
    }

    #[test]
    fn assets_carry_placeholders() {
        assert!(DECOMPOSE.contains("{{EDIT_INSTRUCTION}}"));
        assert!(SCORE.contains("{{QUESTION_POINTS}}"));
        assert!(VERIFY.contains("{{CoT}}"));
        assert!(by_name("nope").is_none());
    }
}
