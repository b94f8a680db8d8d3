//! Sub-query plans with `{ans:i}` placeholders and answer binding.
//!
//! The decomposer is asked for one line per sub-query:
//!
//! ```text
//! 1 | - | Who directed Inception?
//! 2 | 1 | When was {ans:1} born?
//! ```
//!
//! Lines that do not look like plan rows (prose, code fences) are ignored.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::llm::{CallKind, LlmRequest, Session};
use crate::prompts;
use crate::text::render;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subquery {
    /// 1-based position in the plan.
    pub index: usize,
    pub template: String,
    pub depends_on: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubqueryPlan {
    pub subqueries: Vec<Subquery>,
}

impl SubqueryPlan {
    /// The one-step plan that asks the question as-is.
    pub fn single(question: &str) -> Self {
        Self {
            subqueries: alloc::vec![Subquery {
                index: 1,
                template: question.to_string(),
                depends_on: BTreeSet::new(),
            }],
        }
    }

    pub fn len(&self) -> usize {
        self.subqueries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subqueries.is_empty()
    }

    /// Checks index contiguity, backward-only dependencies and placeholder
    /// coverage.
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.subqueries.is_empty() {
            return Err(PlanError::Empty);
        }
        for (pos, sq) in self.subqueries.iter().enumerate() {
            if sq.index != pos + 1 {
                return Err(PlanError::BadIndex { expected: pos + 1, found: sq.index });
            }
            if sq.template.trim().is_empty() {
                return Err(PlanError::EmptyTemplate(sq.index));
            }
            if let Some(&dep) = sq.depends_on.iter().find(|&&d| d == 0 || d >= sq.index) {
                return Err(PlanError::ForwardDependency { index: sq.index, dependency: dep });
            }
            if let Some(p) = placeholders(&sq.template).into_iter().find(|p| !sq.depends_on.contains(p)) {
                return Err(PlanError::UndeclaredPlaceholder { index: sq.index, placeholder: p });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("plan has no sub-queries")]
    Empty,
    #[error("expected sub-query index {expected}, found {found}")]
    BadIndex { expected: usize, found: usize },
    #[error("sub-query {0} has an empty template")]
    EmptyTemplate(usize),
    #[error("sub-query {index} depends on {dependency}, which is not an earlier sub-query")]
    ForwardDependency { index: usize, dependency: usize },
    #[error("sub-query {index} uses {{ans:{placeholder}}} without depending on it")]
    UndeclaredPlaceholder { index: usize, placeholder: usize },
}

/// Completed answers keyed by sub-query index.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerEnvironment(BTreeMap<usize, String>);

impl AnswerEnvironment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, index: usize, answer: impl Into<String>) {
        self.0.insert(index, answer.into());
    }

    pub fn get(&self, index: usize) -> Option<&str> {
        self.0.get(&index).map(String::as_str)
    }

    pub fn contains(&self, index: usize) -> bool {
        self.0.contains_key(&index)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.keys().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unresolved placeholder {0}")]
pub struct UnresolvedPlaceholder(pub usize);

/// Finds `{ans:N}` tokens; returns (byte start, byte end, N).
fn scan(template: &str) -> Vec<(usize, usize, usize)> {
    const OPEN: &str = "{ans:";
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(rel) = template[from..].find(OPEN) {
        let start = from + rel;
        let digits_at = start + OPEN.len();
        let digits: &str = {
            let tail = &template[digits_at..];
            let n = tail.bytes().take_while(u8::is_ascii_digit).count();
            &tail[..n]
        };
        let close = digits_at + digits.len();
        match (digits.parse::<usize>(), template[close..].starts_with('}')) {
            (Ok(n), true) if !digits.is_empty() => {
                out.push((start, close + 1, n));
                from = close + 1;
            }
            _ => from = start + 1,
        }
    }
    out
}

/// Placeholder indices in order of appearance.
pub fn placeholders(template: &str) -> Vec<usize> {
    scan(template).into_iter().map(|(_, _, n)| n).collect()
}

/// Replaces every `{ans:i}` with `env[i]`; other text is copied byte for byte.
pub fn substitute_variables(template: &str, env: &AnswerEnvironment) -> Result<String, UnresolvedPlaceholder> {
    let mut out = String::with_capacity(template.len());
    let mut last = 0;
    for (start, end, n) in scan(template) {
        let value = env.get(n).ok_or(UnresolvedPlaceholder(n))?;
        out.push_str(&template[last..start]);
        out.push_str(value);
        last = end;
    }
    out.push_str(&template[last..]);
    Ok(out)
}

fn parse_dependencies(field: &str) -> Option<BTreeSet<usize>> {
    let field = field.trim();
    if field.is_empty() || field == "-" || field.eq_ignore_ascii_case("none") {
        return Some(BTreeSet::new());
    }
    field
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.trim_start_matches('#').parse().ok())
        .collect()
}

/// Lenient parse of `index | depends_on | template` lines. Placeholders that
/// reference earlier sub-queries are added to `depends_on` when missing.
pub fn parse_plan(text: &str) -> Result<SubqueryPlan, PlanError> {
    let mut subqueries = Vec::new();
    for line in text.lines() {
        let line = line.trim().trim_start_matches(['-', '*']).trim();
        let mut parts = line.splitn(3, '|');
        let (Some(index), Some(deps), Some(template)) = (parts.next(), parts.next(), parts.next()) else {
            continue;
        };
        let index = index.trim().trim_end_matches(['.', ')']);
        let (Ok(index), Some(mut depends_on)) = (index.parse::<usize>(), parse_dependencies(deps)) else {
            continue;
        };
        let template = template.trim().to_string();
        for p in placeholders(&template) {
            if p >= 1 && p < index {
                depends_on.insert(p);
            }
        }
        subqueries.push(Subquery { index, template, depends_on });
    }
    let plan = SubqueryPlan { subqueries };
    plan.validate()?;
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decomposition {
    pub plan: SubqueryPlan,
    /// True when the single-sub-query plan was used because decomposition failed.
    pub fallback: bool,
    pub notes: Vec<String>,
}

/// Asks the LLM for a plan, retrying once with the parse error, and falls
/// back to the single-sub-query plan. With `enabled = false` no call is made.
pub fn decompose(question: &str, enabled: bool, session: &mut Session<'_>) -> Decomposition {
    if !enabled {
        return Decomposition {
            plan: SubqueryPlan::single(question),
            fallback: false,
            notes: Vec::new(),
        };
    }
    let mut notes = Vec::new();
    let first = render(prompts::DECOMPOSE, &[("question", question)]);
    let previous = match session.complete(&LlmRequest::new(CallKind::Decompose, first, 512)) {
        Ok(reply) => match parse_plan(&reply) {
            Ok(plan) => return Decomposition { plan, fallback: false, notes },
            Err(err) => {
                notes.push(format!("plan parse failed: {err}"));
                Some((reply, err))
            }
        },
        Err(err) => {
            notes.push(format!("decompose call failed: {err}"));
            None
        }
    };
    if let Some((reply, err)) = previous {
        let error = err.to_string();
        let retry = render(
            prompts::DECOMPOSE_RETRY,
            &[("error", &error), ("previous", &reply), ("question", question)],
        );
        match session.complete(&LlmRequest::new(CallKind::Decompose, retry, 512)) {
            Ok(reply) => match parse_plan(&reply) {
                Ok(plan) => return Decomposition { plan, fallback: false, notes },
                Err(err) => notes.push(format!("reformatted plan parse failed: {err}")),
            },
            Err(err) => notes.push(format!("decompose retry failed: {err}")),
        }
    }
    notes.push("using single-sub-query plan".to_string());
    Decomposition {
        plan: SubqueryPlan::single(question),
        fallback: true,
        notes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{Llm, LlmError, LlmReply};
    use alloc::vec;
    use std::sync::Mutex;

    struct Queue(Mutex<Vec<&'static str>>);

    impl Llm for Queue {
        fn complete(&self, _: &LlmRequest) -> Result<LlmReply, LlmError> {
            let mut q = self.0.lock().unwrap();
            if q.is_empty() {
                return Err(LlmError::Unscripted("empty".into()));
            }
            Ok(LlmReply { text: q.remove(0).to_string(), usage: None })
        }
    }

    fn env(pairs: &[(usize, &str)]) -> AnswerEnvironment {
        let mut e = AnswerEnvironment::new();
        for (i, a) in pairs {
            e.insert(*i, *a);
        }
        e
    }

    #[test]
    fn substitution() {
        assert_eq!(substitute_variables("plain {text}", &env(&[])).unwrap(), "plain {text}");
        assert_eq!(
            substitute_variables("When was {ans:1} born?", &env(&[(1, "Christopher Nolan")])).unwrap(),
            "When was Christopher Nolan born?"
        );
        let err = substitute_variables("{ans:2}", &env(&[(1, "x")])).unwrap_err();
        assert_eq!(err.to_string(), "unresolved placeholder 2");
        assert_eq!(substitute_variables("{ans:}{ans:1", &env(&[])).unwrap(), "{ans:}{ans:1");
        // values containing placeholder syntax are not rescanned
        assert_eq!(substitute_variables("{ans:1}!", &env(&[(1, "{ans:9}")])).unwrap(), "{ans:9}!");
    }

    #[test]
    fn decompose_disabled_is_identity() {
        let llm = Queue(Mutex::new(vec![]));
        let mut s = Session::new(&llm);
        let d = decompose("Who?", false, &mut s);
        assert_eq!(d.plan, SubqueryPlan::single("Who?"));
        assert!(s.calls().is_empty());
    }

    #[test]
    fn decompose_parses_two_steps() {
        let llm = Queue(Mutex::new(vec!["Here is the plan:\n```\n1 | - | Who directed X?\n2 | 1 | When was {ans:1} born?\n```"]));
        let mut s = Session::new(&llm);
        let d = decompose("When was the director of X born?", true, &mut s);
        assert!(!d.fallback);
        assert_eq!(d.plan.len(), 2);
        assert_eq!(d.plan.subqueries[1].template, "When was {ans:1} born?");
        assert_eq!(d.plan.subqueries[1].depends_on, BTreeSet::from([1]));
    }

    #[test]
    fn decompose_retries_once_then_falls_back() {
        let llm = Queue(Mutex::new(vec!["no plan here", "1 | 2 | still broken {ans:2}"]));
        let mut s = Session::new(&llm);
        let d = decompose("Q?", true, &mut s);
        assert!(d.fallback);
        assert_eq!(d.plan, SubqueryPlan::single("Q?"));
        assert_eq!(s.count(CallKind::Decompose), 2);

        let llm = Queue(Mutex::new(vec!["garbage", "1 | - | fixed"]));
        let mut s = Session::new(&llm);
        let d = decompose("Q?", true, &mut s);
        assert!(!d.fallback);
        assert_eq!(d.plan.subqueries[0].template, "fixed");
    }

    #[test]
    fn placeholders_auto_declared_but_not_forward() {
        let plan = parse_plan("1 | - | a\n2 | - | b {ans:1}").unwrap();
        assert_eq!(plan.subqueries[1].depends_on, BTreeSet::from([1]));
        assert_eq!(
            parse_plan("1 | - | a {ans:2}\n2 | - | b").unwrap_err(),
            PlanError::UndeclaredPlaceholder { index: 1, placeholder: 2 }
        );
        assert_eq!(parse_plan("1 | - | a\n3 | 1 | c").unwrap_err(), PlanError::BadIndex { expected: 2, found: 3 });
    }

    proptest::proptest! {
        #[test]
        fn substitution_leaves_no_placeholders(
            pieces in proptest::collection::vec(("[a-z {}:]{0,6}", 1usize..4), 0..6),
            answers in proptest::collection::vec("[A-Za-z ]{1,10}", 3),
        ) {
            let template: String = pieces.iter().map(|(t, i)| format!("{t}{{ans:{i}}}")).collect();
            let e = env(&[(1, &answers[0]), (2, &answers[1]), (3, &answers[2])]);
            let once = substitute_variables(&template, &e).unwrap();
            proptest::prop_assert!(placeholders(&once).is_empty());
            proptest::prop_assert_eq!(substitute_variables(&once, &e).unwrap(), once);
        }
    }
}
