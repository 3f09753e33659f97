//! Prompt rendering: `create table` database prompts with sampled column
//! values, demonstration layouts, and the SQL-to-question prompt used during
//! synthesis.

use serde::{Deserialize, Serialize};

use crate::corpus::{DatabaseSchema, Table};
use crate::sql::normalize;

pub const ANSWER_INSTRUCTION: &str =
    "-- Using valid SQLite, answer the following questions for the tables provided above.";
pub const TRANSLATE_INSTRUCTION: &str =
    "-- Translate the SQL queries into natural language questions for the tables provided above.";
pub const COMPLETION_STEM: &str = "select";

/// Canned exemplars for SQL-to-question generation.
const SQL_TO_NLQ_EXEMPLARS: [(&str, &str); 3] = [
    (
        "select count(*) from employee where age > 30",
        "How many employees are older than 30?",
    ),
    (
        "select name, city from airport order by name",
        "List the names and cities of all airports, ordered by name.",
    ),
    (
        "select category, avg(price) from product group by category",
        "What is the average price of products in each category?",
    ),
];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PromptError {
    #[error("table `{table}` of `{db_id}` has no content samples")]
    MissingSamples { db_id: String, table: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodOrder {
    /// Least similar database first, so the most similar one sits closest to
    /// the test question.
    #[default]
    Asc,
    Desc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptOptions {
    pub ood_order: OodOrder,
    pub with_descriptions: bool,
    pub content_samples: usize,
}

impl Default for PromptOptions {
    fn default() -> Self {
        PromptOptions {
            ood_order: OodOrder::Asc,
            with_descriptions: false,
            content_samples: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demo {
    pub nlq: String,
    pub sql: String,
}

impl Demo {
    pub fn new(nlq: impl Into<String>, sql: impl Into<String>) -> Self {
        Demo {
            nlq: nlq.into(),
            sql: sql.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OodBlock<'a> {
    pub schema: &'a DatabaseSchema,
    pub pairs: Vec<Demo>,
}

/// Everything a prompt contains. `ood_blocks` are laid out in the given
/// order; callers apply [`OodOrder`] when building the plan.
#[derive(Debug, Clone)]
pub struct DemonstrationPlan<'a> {
    pub ood_blocks: Vec<OodBlock<'a>>,
    pub id_pairs: Vec<Demo>,
    pub test_schema: &'a DatabaseSchema,
    pub test_nlq: String,
}

impl<'a> DemonstrationPlan<'a> {
    pub fn zero_shot(test_schema: &'a DatabaseSchema, test_nlq: impl Into<String>) -> Self {
        DemonstrationPlan {
            ood_blocks: Vec::new(),
            id_pairs: Vec::new(),
            test_schema,
            test_nlq: test_nlq.into(),
        }
    }
}

pub(crate) fn looks_numeric(value: &str) -> bool {
    let digits = value.strip_prefix('-').unwrap_or(value);
    let (int, frac) = digits.split_once('.').unwrap_or((digits, ""));
    !int.is_empty()
        && int.bytes().all(|b| b.is_ascii_digit())
        && frac.bytes().all(|b| b.is_ascii_digit())
        && !(digits.contains('.') && frac.is_empty())
}

fn render_sample(value: &str) -> String {
    if looks_numeric(value) {
        value.to_string()
    } else {
        format!("\"{value}\"")
    }
}

fn render_table(
    out: &mut String,
    schema: &DatabaseSchema,
    table: &Table,
    with_descriptions: bool,
) -> Result<(), PromptError> {
    let samples = table
        .content_samples
        .as_ref()
        .ok_or_else(|| PromptError::MissingSamples {
            db_id: schema.db_id.clone(),
            table: table.name.clone(),
        })?;
    let name = table.name.to_lowercase();

    let mut items: Vec<(String, Option<&str>)> = table
        .columns
        .iter()
        .map(|c| {
            let desc = c.description.as_deref().filter(|_| with_descriptions);
            (format!("{} {}", c.name.to_lowercase(), c.decl_type), desc)
        })
        .collect();
    let pk: Vec<String> = table
        .columns
        .iter()
        .filter(|c| c.is_pk)
        .map(|c| c.name.to_lowercase())
        .collect();
    if !pk.is_empty() {
        items.push((format!("primary key ({})", pk.join(",")), None));
    }
    for fk in schema
        .foreign_keys
        .iter()
        .filter(|fk| fk.from_table.eq_ignore_ascii_case(&table.name))
    {
        items.push((
            format!(
                "foreign key ({}) references {}({})",
                fk.from_column.to_lowercase(),
                fk.to_table.to_lowercase(),
                fk.to_column.to_lowercase()
            ),
            None,
        ));
    }

    out.push_str(&format!("create table {name} (\n"));
    let last = items.len() - 1;
    for (i, (item, desc)) in items.iter().enumerate() {
        out.push_str(item);
        if i < last {
            out.push(',');
        }
        if let Some(desc) = desc {
            out.push_str(" -- ");
            out.push_str(desc);
        }
        out.push('\n');
    }
    out.push_str(");\n/*\n");
    out.push_str(&format!(
        "Columns in {name} and 3 distinct examples in each column:\n"
    ));
    for (i, col) in table.columns.iter().enumerate() {
        let values: Vec<String> = samples
            .get(i)
            .map(|v| v.iter().map(|s| render_sample(s)).collect())
            .unwrap_or_default();
        out.push_str(&format!("{}: {};\n", col.name.to_lowercase(), values.join(", ")));
    }
    out.push_str("*/");
    Ok(())
}

/// `create table` statements plus sampled values for every table, separated
/// by blank lines. No trailing newline.
pub fn render_db_prompt(
    schema: &DatabaseSchema,
    with_descriptions: bool,
) -> Result<String, PromptError> {
    let mut out = String::new();
    for (i, table) in schema.tables.iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        render_table(&mut out, schema, table, with_descriptions)?;
    }
    Ok(out)
}

/// Stored demonstration SQL in prompt form: normalized, with a trailing `;`.
pub fn demo_sql(sql: &str) -> String {
    let body = normalize(sql).unwrap_or_else(|_| sql.trim().trim_end_matches(';').to_string());
    format!("{body};")
}

fn push_pairs(out: &mut String, pairs: &[Demo]) {
    for pair in pairs {
        out.push_str("Question: ");
        out.push_str(&pair.nlq);
        out.push('\n');
        out.push_str(&demo_sql(&pair.sql));
        out.push('\n');
    }
}

/// Lays out out-of-domain blocks, then the test database with its in-domain
/// pairs, ending with the test question and the `select` stem.
pub fn render_prompt(
    plan: &DemonstrationPlan<'_>,
    with_descriptions: bool,
) -> Result<String, PromptError> {
    let mut out = String::new();
    for block in &plan.ood_blocks {
        out.push_str(&render_db_prompt(block.schema, with_descriptions)?);
        out.push_str("\n\n");
        out.push_str(ANSWER_INSTRUCTION);
        out.push('\n');
        push_pairs(&mut out, &block.pairs);
        out.push('\n');
    }
    out.push_str(&render_db_prompt(plan.test_schema, with_descriptions)?);
    out.push_str("\n\n");
    out.push_str(ANSWER_INSTRUCTION);
    out.push('\n');
    push_pairs(&mut out, &plan.id_pairs);
    out.push_str("Question: ");
    out.push_str(&plan.test_nlq);
    out.push('\n');
    out.push_str(COMPLETION_STEM);
    Ok(out)
}

/// Prompt asking the model to describe `sql` as a question; the answer is
/// the continuation after the final `Question:`.
pub fn render_sql_to_nlq_prompt(
    schema: &DatabaseSchema,
    sql: &str,
    with_descriptions: bool,
) -> Result<String, PromptError> {
    let mut out = render_db_prompt(schema, with_descriptions)?;
    out.push_str("\n\n");
    out.push_str(TRANSLATE_INSTRUCTION);
    out.push('\n');
    for (ex_sql, ex_nlq) in SQL_TO_NLQ_EXEMPLARS {
        out.push_str(&format!("{ex_sql}\nQuestion: {ex_nlq}\n"));
    }
    let body = normalize(sql).unwrap_or_else(|_| sql.trim().to_string());
    out.push_str(&body);
    out.push_str("\nQuestion:");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Column, ForeignKey};

    fn tiny() -> DatabaseSchema {
        DatabaseSchema {
            db_id: "tiny".into(),
            tables: vec![
                Table {
                    name: "Owner".into(),
                    columns: vec![
                        Column {
                            name: "Id".into(),
                            decl_type: "int".into(),
                            is_pk: true,
                            description: Some("row id".into()),
                        },
                        Column {
                            name: "name".into(),
                            decl_type: "text".into(),
                            is_pk: false,
                            description: Some("owner name".into()),
                        },
                    ],
                    content_samples: Some(vec![vec!["1".into(), "2".into()], vec![]]),
                },
                Table {
                    name: "pet".into(),
                    columns: vec![Column {
                        name: "owner_id".into(),
                        decl_type: "int".into(),
                        is_pk: false,
                        description: None,
                    }],
                    content_samples: Some(vec![vec!["-1.5".into()]]),
                },
            ],
            foreign_keys: vec![ForeignKey {
                from_table: "pet".into(),
                from_column: "owner_id".into(),
                to_table: "Owner".into(),
                to_column: "Id".into(),
            }],
        }
    }

    #[test]
    fn renders_tables_keys_and_samples() {
        let text = render_db_prompt(&tiny(), false).unwrap();
        assert_eq!(
            text,
            "create table owner (\nid int,\nname text,\nprimary key (id)\n);\n/*\n\
             Columns in owner and 3 distinct examples in each column:\nid: 1, 2;\nname: ;\n*/\n\n\
             create table pet (\nowner_id int,\nforeign key (owner_id) references owner(id)\n);\n\
             /*\nColumns in pet and 3 distinct examples in each column:\nowner_id: -1.5;\n*/"
        );
    }

    #[test]
    fn descriptions_follow_the_comma() {
        let text = render_db_prompt(&tiny(), true).unwrap();
        assert!(text.contains("id int, -- row id\nname text, -- owner name\nprimary key (id)\n"));
    }

    #[test]
    fn missing_samples_is_an_error() {
        let mut schema = tiny();
        schema.tables[1].content_samples = None;
        assert_eq!(
            render_db_prompt(&schema, false),
            Err(PromptError::MissingSamples {
                db_id: "tiny".into(),
                table: "pet".into()
            })
        );
    }

    #[test]
    fn numeric_detection() {
        for v in ["0", "2014", "-3", "1.25"] {
            assert!(looks_numeric(v), "{v}");
        }
        for v in ["", "-", "1.", ".5", "1e5", "nan", "inf", "12a", "F"] {
            assert!(!looks_numeric(v), "{v}");
        }
    }

    #[test]
    fn zero_shot_layout() {
        let schema = tiny();
        let text = render_prompt(&DemonstrationPlan::zero_shot(&schema, "How many?"), false).unwrap();
        let db = render_db_prompt(&schema, false).unwrap();
        assert_eq!(
            text,
            format!("{db}\n\n{ANSWER_INSTRUCTION}\nQuestion: How many?\nselect")
        );
    }

    #[test]
    fn demo_sql_is_normalized() {
        assert_eq!(
            demo_sql("SELECT count(*)  FROM pet;"),
            "select count(*) from pet;"
        );
    }

    #[test]
    fn sql_to_nlq_prompt_ends_with_question_marker() {
        let text = render_sql_to_nlq_prompt(&tiny(), "SELECT name FROM owner;", false).unwrap();
        assert!(text.ends_with("\nselect name from owner\nQuestion:"));
        assert!(text.contains(TRANSLATE_INSTRUCTION));
    }
}
