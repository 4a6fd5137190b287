//! Prompt templates for generation and the loss/gradient/update chain.
//!
//! Templates use `{name}` placeholders. Substitution is a single pass over
//! the template text, so braces inside substituted values stay literal.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::reward::Arity;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("placeholder error: {0}")]
    Placeholder(String),
    #[error("{0}")]
    Validation(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("{0}")]
    Io(String),
}

/// Template text plus the placeholders it declares; each declared
/// placeholder occurs exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    text: String,
    names: Vec<String>,
}

impl Template {
    pub fn new(text: impl Into<String>, names: &[&str]) -> Result<Self, PromptError> {
        let text = text.into();
        for n in names {
            let count = text.matches(&format!("{{{n}}}")).count();
            if count != 1 {
                return Err(PromptError::Placeholder(format!("`{{{n}}}` occurs {count} times, expected once")));
            }
        }
        Ok(Template { text, names: names.iter().map(|s| s.to_string()).collect() })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, PromptError> {
        for n in &self.names {
            if !values.iter().any(|(k, _)| k == n) {
                return Err(PromptError::Placeholder(format!("no value for `{{{n}}}`")));
            }
        }
        let mut out = String::with_capacity(self.text.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>());
        let mut rest = self.text.as_str();
        'scan: while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let tail = &rest[open..];
            for (k, v) in values {
                if self.names.iter().any(|n| n == k) {
                    let token_len = k.len() + 2;
                    if tail.len() >= token_len && tail[1..].starts_with(k) && tail[1 + k.len()..].starts_with('}') {
                        out.push_str(v);
                        rest = &tail[token_len..];
                        continue 'scan;
                    }
                }
            }
            out.push('{');
            rest = &tail[1..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

pub const GENERAL_TEMPLATE: &str = include_str!("../prompts/general.txt");
pub const LOSS_TEMPLATE: &str = include_str!("../prompts/loss.txt");
pub const GRAD_TEMPLATE: &str = include_str!("../prompts/grad.txt");
pub const UPDATE_TEMPLATE: &str = include_str!("../prompts/update.txt");

pub const BUILTIN_TASKS: [(&str, &str); 4] = [
    ("halfcheetah", include_str!("../prompts/tasks/halfcheetah.txt")),
    ("hopper", include_str!("../prompts/tasks/hopper.txt")),
    ("walker2d", include_str!("../prompts/tasks/walker2d.txt")),
    ("point_mass", include_str!("../prompts/tasks/point_mass.txt")),
];

const GENERAL_NAMES: [&str; 3] = ["inputs", "signature", "vectors"];
const LOSS_NAMES: [&str; 3] = ["query", "rejected_response", "chosen_response"];
const GRAD_NAMES: [&str; 1] = ["loss"];
const UPDATE_NAMES: [&str; 2] = ["gradient", "variable"];

/// General and task-specific prompt text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub general: String,
    pub task: String,
}

/// General prompt followed by a newline and the task prompt.
pub fn build_query(bundle: &PromptBundle) -> Result<String, PromptError> {
    if bundle.general.is_empty() {
        return Err(PromptError::Validation("general prompt is empty".into()));
    }
    if bundle.task.is_empty() {
        return Err(PromptError::Validation("task prompt is empty".into()));
    }
    let mut q = String::with_capacity(bundle.general.len() + 1 + bundle.task.len());
    q.push_str(&bundle.general);
    q.push('\n');
    q.push_str(&bundle.task);
    Ok(q)
}

/// The full template set used by a run.
#[derive(Debug, Clone)]
pub struct PromptSet {
    general: Template,
    loss: Template,
    grad: Template,
    update: Template,
    tasks: BTreeMap<String, String>,
}

impl PromptSet {
    pub fn builtin() -> Self {
        let t = |text: &str, names: &[&str]| Template::new(text, names).expect("shipped templates are well formed");
        PromptSet {
            general: t(GENERAL_TEMPLATE, &GENERAL_NAMES),
            loss: t(LOSS_TEMPLATE, &LOSS_NAMES),
            grad: t(GRAD_TEMPLATE, &GRAD_NAMES),
            update: t(UPDATE_TEMPLATE, &UPDATE_NAMES),
            tasks: BUILTIN_TASKS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    /// Loads `general.txt`, `loss.txt`, `grad.txt`, `update.txt` and
    /// `tasks/*.txt` from `dir`. Missing files fall back to the shipped ones.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        let read = |name: &str| -> Result<Option<String>, PromptError> {
            let p = dir.join(name);
            if !p.exists() {
                return Ok(None);
            }
            fs::read_to_string(&p).map(Some).map_err(|e| PromptError::Io(format!("{}: {e}", p.display())))
        };
        if let Some(t) = read("general.txt")? {
            set.general = Template::new(t, &GENERAL_NAMES)?;
        }
        if let Some(t) = read("loss.txt")? {
            set.loss = Template::new(t, &LOSS_NAMES)?;
        }
        if let Some(t) = read("grad.txt")? {
            set.grad = Template::new(t, &GRAD_NAMES)?;
        }
        if let Some(t) = read("update.txt")? {
            set.update = Template::new(t, &UPDATE_NAMES)?;
        }
        let tasks = dir.join("tasks");
        if tasks.is_dir() {
            let entries = fs::read_dir(&tasks).map_err(|e| PromptError::Io(format!("{}: {e}", tasks.display())))?;
            for entry in entries {
                let p = entry.map_err(|e| PromptError::Io(e.to_string()))?.path();
                if p.extension().and_then(|e| e.to_str()) == Some("txt") {
                    let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_owned();
                    let text = fs::read_to_string(&p).map_err(|e| PromptError::Io(format!("{}: {e}", p.display())))?;
                    set.tasks.insert(name, text);
                }
            }
        }
        Ok(set)
    }

    pub fn task_names(&self) -> impl Iterator<Item = &str> {
        self.tasks.keys().map(String::as_str)
    }

    pub fn task(&self, name: &str) -> Result<&str, PromptError> {
        self.tasks.get(name).map(String::as_str).ok_or_else(|| PromptError::UnknownTask(name.to_owned()))
    }

    /// General prompt with the input signature for `arity` filled in.
    pub fn general(&self, arity: Arity) -> String {
        let (inputs, signature, vectors) = match arity {
            Arity::WithAction => (
                "the current step's observation and action from the environment, as well as the next step's observation",
                "reward(obs, act, next) -> float",
                "`obs` (current observation), `act` (action) and `next` (next observation)",
            ),
            Arity::StateOnly => (
                "the current step's observation from the environment, as well as the next step's observation",
                "reward(obs, next) -> float",
                "`obs` (current observation) and `next` (next observation)",
            ),
        };
        self.general
            .render(&[("inputs", inputs), ("signature", signature), ("vectors", vectors)])
            .expect("all general placeholders supplied")
    }

    pub fn bundle(&self, task: &str, arity: Arity) -> Result<PromptBundle, PromptError> {
        Ok(PromptBundle { general: self.general(arity), task: self.task(task)?.to_owned() })
    }

    pub fn render_loss(&self, query: &str, chosen: &str, rejected: &str) -> Result<String, PromptError> {
        self.loss.render(&[("query", query), ("rejected_response", rejected), ("chosen_response", chosen)])
    }

    pub fn render_grad(&self, loss: &str) -> Result<String, PromptError> {
        if loss.trim().is_empty() {
            return Err(PromptError::Validation("loss text is empty".into()));
        }
        self.grad.render(&[("loss", loss)])
    }

    pub fn render_update(&self, gradient: &str, variable: &str) -> Result<String, PromptError> {
        if gradient.trim().is_empty() {
            return Err(PromptError::Validation("gradient text is empty".into()));
        }
        if variable.trim().is_empty() {
            return Err(PromptError::Validation("variable text is empty".into()));
        }
        self.update.render(&[("gradient", gradient), ("variable", variable)])
    }
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn query_concatenation() {
        let b = PromptBundle { general: "G".into(), task: "T".into() };
        assert_eq!(build_query(&b).unwrap(), "G\nT");
        let empty = PromptBundle { general: "G".into(), task: String::new() };
        assert!(matches!(build_query(&empty), Err(PromptError::Validation(_))));
    }

    #[test]
    fn template_requires_single_occurrence() {
        assert!(Template::new("{a} {a}", &["a"]).is_err());
        assert!(Template::new("none", &["a"]).is_err());
        let t = Template::new("x{a}y", &["a"]).unwrap();
        assert!(matches!(t.render(&[]), Err(PromptError::Placeholder(_))));
    }

    #[test]
    fn payload_braces_are_literal() {
        let t = Template::new("[{a}|{b}] {other}", &["a", "b"]).unwrap();
        assert_eq!(t.render(&[("a", "{b}"), ("b", "}{")]).unwrap(), "[{b}|}{] {other}");
    }

    #[test]
    fn general_prompt_arity() {
        let set = PromptSet::builtin();
        let sas = set.general(Arity::WithAction);
        let ss = set.general(Arity::StateOnly);
        assert!(sas.starts_with("You are an expert in robotics, reinforcement learning and code generation.\n"));
        assert!(sas.contains("reward(obs, act, next) -> float"));
        assert!(ss.contains("reward(obs, next) -> float"));
        assert!(!ss.contains("`act`"));
        assert!(!sas.contains('{') && !ss.contains('{'));
    }

    #[test]
    fn shipped_tasks() {
        let set = PromptSet::builtin();
        let names: Vec<&str> = set.task_names().collect();
        assert_eq!(names, vec!["halfcheetah", "hopper", "point_mass", "walker2d"]);
        assert!(set.task("halfcheetah").unwrap().contains("(17,)"));
        assert!(matches!(set.task("ant"), Err(PromptError::UnknownTask(_))));
    }

    #[test]
    fn loss_render_sections() {
        let set = PromptSet::builtin();
        let out = set.render_loss("Q", "C", "R").unwrap();
        assert!(out.contains("**Rejected Response**:\nR\n"));
        assert!(out.contains("**User Query**:\nQ\n"));
        assert!(out.ends_with("**Chosen Response**.\nC\n"));
    }

    #[test]
    fn grad_and_update_validation() {
        let set = PromptSet::builtin();
        assert!(matches!(set.render_grad("  "), Err(PromptError::Validation(_))));
        let up = set.render_update("GRAD-TEXT", "VAR-TEXT").unwrap();
        assert_eq!(up.matches("GRAD-TEXT").count(), 1);
        assert_eq!(up.matches("VAR-TEXT").count(), 1);
    }

    proptest! {
        #[test]
        fn loss_render_resolves_all(q in "[^{}]{0,40}", c in "[^{}]{0,40}", r in "[^{}]{0,40}") {
            let out = PromptSet::builtin().render_loss(&q, &c, &r).unwrap();
            prop_assert!(!out.contains('{') && !out.contains('}'), "unresolved braces in {:?}", out);
        }
    }
}
