use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::cache::prompt_hash;
use super::{CompletionProvider, CompletionRequest, LlmError};
use crate::prompt::{ANSWER_INSTRUCTION, COMPLETION_STEM};

/// Prefix the mock puts in front of SQL it is asked to describe, so that a
/// later text-to-SQL call on that question can echo the SQL back.
pub const ECHO_PREFIX: &str = "Compute:";

#[derive(Debug, Clone)]
enum Behavior {
    Heuristic,
    Constant(String),
}

/// Deterministic offline provider. Answers from a prompt-hash table first,
/// then from a fixed rule set:
///
/// * SQL-to-question prompts get `Compute: <sql>`.
/// * Text-to-SQL prompts whose question is `Compute: select ...` echo that SQL.
/// * Otherwise the SQL of the last in-domain demonstration is copied, or a
///   `count(*)` over the first table of the test database.
#[derive(Debug)]
pub struct MockProvider {
    table: HashMap<String, String>,
    behavior: Behavior,
    calls: AtomicU64,
}

impl MockProvider {
    pub fn new() -> Self {
        MockProvider {
            table: HashMap::new(),
            behavior: Behavior::Heuristic,
            calls: AtomicU64::new(0),
        }
    }

    /// Answers every prompt with `response`.
    pub fn constant(response: impl Into<String>) -> Self {
        MockProvider {
            behavior: Behavior::Constant(response.into()),
            ..Self::new()
        }
    }

    /// Adds table entries keyed by the SHA-256 hex of the prompt.
    pub fn with_table(mut self, table: HashMap<String, String>) -> Self {
        self.table.extend(table);
        self
    }

    pub fn insert(&mut self, prompt: &str, response: impl Into<String>) {
        self.table.insert(prompt_hash(prompt), response.into());
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Default for MockProvider {
    fn default() -> Self {
        Self::new()
    }
}

fn last_line_before<'a>(prompt: &'a str, suffix: &str) -> Option<&'a str> {
    prompt.strip_suffix(suffix)?.lines().last()
}

fn after_stem(sql: &str) -> Option<&str> {
    let lower = sql.get(..COMPLETION_STEM.len())?;
    if lower.eq_ignore_ascii_case(COMPLETION_STEM) {
        Some(&sql[COMPLETION_STEM.len()..])
    } else {
        None
    }
}

fn heuristic(prompt: &str) -> String {
    if let Some(sql) = last_line_before(prompt, "\nQuestion:") {
        return format!(" {ECHO_PREFIX} {sql}");
    }
    let Some(body) = prompt.strip_suffix(&format!("\n{COMPLETION_STEM}")) else {
        return String::new();
    };
    let question = body
        .lines()
        .last()
        .and_then(|l| l.strip_prefix("Question: "))
        .unwrap_or("");
    if let Some(rest) = question
        .strip_prefix(ECHO_PREFIX)
        .map(str::trim)
        .and_then(after_stem)
    {
        return format!("{rest};");
    }
    let mut segments = body.rsplit(ANSWER_INSTRUCTION);
    let test_block = segments.next().unwrap_or("");
    let demo_lines: Vec<&str> = test_block.lines().collect();
    // lines: "", Question, sql, Question, sql, ..., Question (test)
    if demo_lines.len() >= 3 {
        if let Some(rest) = after_stem(demo_lines[demo_lines.len() - 2]) {
            return rest.to_string();
        }
    }
    let table = segments
        .next()
        .and_then(|db| db.split("create table ").nth(1))
        .and_then(|s| s.split_whitespace().next())
        .unwrap_or("sqlite_master");
    format!(" count(*) from {table};")
}

impl CompletionProvider for MockProvider {
    fn model_id(&self) -> &str {
        "mock"
    }

    fn complete(&self, req: &CompletionRequest) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(hit) = self.table.get(&prompt_hash(&req.prompt)) {
            return Ok(hit.clone());
        }
        Ok(match &self.behavior {
            Behavior::Constant(s) => s.clone(),
            Behavior::Heuristic => heuristic(&req.prompt),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ask(provider: &MockProvider, prompt: &str) -> String {
        provider
            .complete(&CompletionRequest::new(prompt, vec![], 64, 0.0))
            .unwrap()
    }

    #[test]
    fn table_lookup_wins() {
        let mut mock = MockProvider::new();
        mock.insert("p", " count(*) from t;");
        assert_eq!(ask(&mock, "p"), " count(*) from t;");
        assert_eq!(mock.calls(), 1);
    }

    #[test]
    fn describes_then_echoes_sql() {
        let mock = MockProvider::new();
        let nlq = ask(&mock, "db\n\n-- translate\nselect a from b\nQuestion: x\nselect count(*) from t\nQuestion:");
        assert_eq!(nlq, " Compute: select count(*) from t");
        let prompt = format!("db\n\n{ANSWER_INSTRUCTION}\nQuestion: {}\nselect", nlq.trim());
        assert_eq!(ask(&mock, &prompt), " count(*) from t;");
    }

    #[test]
    fn copies_last_in_domain_demo() {
        let mock = MockProvider::new();
        let prompt = format!(
            "create table x (\na int\n);\n/*\n*/\n\n{ANSWER_INSTRUCTION}\nQuestion: q1\nselect a from x;\nQuestion: q2\nselect max(a) from x;\nQuestion: real\nselect"
        );
        assert_eq!(ask(&mock, &prompt), " max(a) from x;");
    }

    #[test]
    fn falls_back_to_count_over_test_table() {
        let mock = MockProvider::new();
        let prompt = format!(
            "create table other (\na int\n);\n/*\n*/\n\n{ANSWER_INSTRUCTION}\nQuestion: q\nselect a from other;\n\n\
             create table concert (\nb int\n);\n/*\n*/\n\n\
             create table singer (\nc int\n);\n/*\n*/\n\n{ANSWER_INSTRUCTION}\nQuestion: real\nselect"
        );
        assert_eq!(ask(&mock, &prompt), " count(*) from concert;");
        let zero_shot = format!("create table singer (\nc int\n);\n/*\n*/\n\n{ANSWER_INSTRUCTION}\nQuestion: q\nselect");
        assert_eq!(ask(&mock, &zero_shot), " count(*) from singer;");
    }

    #[test]
    fn constant_mock() {
        let mock = MockProvider::constant(" 0");
        assert_eq!(ask(&mock, "anything"), " 0");
    }
}
