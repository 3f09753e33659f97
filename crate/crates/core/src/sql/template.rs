use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::lexer::{tokenize_classified, LexError, SchemaVocab, TokenKind};
use crate::corpus::DatabaseSchema;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateItem {
    /// Keyword, operator, punctuation or unresolved identifier, verbatim.
    Token(String),
    Table,
    Column,
    Number,
    Str,
}

impl TemplateItem {
    pub fn is_placeholder(&self) -> bool {
        !matches!(self, TemplateItem::Token(_))
    }

    pub fn word(&self) -> Option<&str> {
        match self {
            TemplateItem::Token(t) => Some(t),
            _ => None,
        }
    }
}

impl fmt::Display for TemplateItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TemplateItem::Token(t) => f.write_str(t),
            TemplateItem::Table => f.write_str("⟨TAB⟩"),
            TemplateItem::Column => f.write_str("⟨COL⟩"),
            TemplateItem::Number => f.write_str("⟨NUM⟩"),
            TemplateItem::Str => f.write_str("⟨STR⟩"),
        }
    }
}

/// SQL skeleton with typed placeholders. Equality is item-wise.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SqlTemplate {
    pub items: Vec<TemplateItem>,
}

impl SqlTemplate {
    pub fn new(items: Vec<TemplateItem>) -> Self {
        SqlTemplate { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

impl fmt::Display for SqlTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, item) in self.items.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{item}")?;
        }
        Ok(())
    }
}

pub fn template_equal(a: &SqlTemplate, b: &SqlTemplate) -> bool {
    a == b
}

/// Input to [`entity_roles`]: either a fixed word or a name that could be a
/// table, alias or column.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Slot<'a> {
    Word(&'a str),
    Entity { is_table: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Role {
    /// A table named in a FROM/JOIN list.
    From,
    /// The alias directly after a FROM table.
    Alias,
    /// A name directly followed by `.`.
    Qualifier,
    Other,
}

const REGION_END: [&str; 13] = [
    "where", "on", "group", "order", "having", "limit", "union", "intersect", "except", "select",
    "using", "offset", "window",
];

/// Lexical scan that assigns each entity slot its role. Both template
/// extraction and template filling use this scan, which is what keeps
/// extraction and instantiation consistent with each other.
pub(crate) fn entity_roles(slots: &[Slot<'_>]) -> Vec<Option<Role>> {
    #[derive(Clone, Copy, Default)]
    struct Frame {
        in_region: bool,
        after_table: bool,
    }
    let mut stack = vec![Frame::default()];
    let mut roles = Vec::with_capacity(slots.len());
    for (i, slot) in slots.iter().enumerate() {
        let top = stack.last_mut().unwrap();
        match *slot {
            Slot::Word(w) => {
                roles.push(None);
                match w {
                    "(" => stack.push(Frame::default()),
                    ")" => {
                        if stack.len() > 1 {
                            stack.pop();
                        }
                        stack.last_mut().unwrap().after_table = false;
                    }
                    "as" => {}
                    "from" | "join" => {
                        top.in_region = true;
                        top.after_table = false;
                    }
                    _ => {
                        top.after_table = false;
                        if REGION_END.contains(&w) {
                            top.in_region = false;
                        }
                    }
                }
            }
            Slot::Entity { is_table } => {
                let qualifier = matches!(slots.get(i + 1), Some(Slot::Word(".")));
                let role = if qualifier {
                    top.after_table = false;
                    Role::Qualifier
                } else if top.in_region && top.after_table {
                    top.after_table = false;
                    Role::Alias
                } else if top.in_region && is_table {
                    top.after_table = true;
                    Role::From
                } else {
                    top.after_table = false;
                    Role::Other
                };
                roles.push(Some(role));
            }
        }
    }
    roles
}

/// Replaces table names (and their aliases) with ⟨TAB⟩, column names with
/// ⟨COL⟩ and literals with ⟨NUM⟩/⟨STR⟩.
pub fn extract_template(sql: &str, schema: &DatabaseSchema) -> Result<SqlTemplate, LexError> {
    extract_template_with(sql, &SchemaVocab::new(schema))
}

pub fn extract_template_with(sql: &str, vocab: &SchemaVocab) -> Result<SqlTemplate, LexError> {
    let tokens = tokenize_classified(sql, vocab)?;
    let slots: Vec<Slot<'_>> = tokens
        .iter()
        .map(|t| match t.kind {
            TokenKind::SchemaRef => Slot::Entity {
                is_table: vocab.is_table(&t.text),
            },
            TokenKind::IdentifierUnknown => Slot::Entity { is_table: false },
            _ => Slot::Word(&t.text),
        })
        .collect();
    let roles = entity_roles(&slots);
    let aliases: HashSet<&str> = tokens
        .iter()
        .zip(&roles)
        .filter(|(_, r)| **r == Some(Role::Alias))
        .map(|(t, _)| t.name())
        .collect();

    let items = tokens
        .iter()
        .zip(&roles)
        .map(|(t, role)| match t.kind {
            TokenKind::LiteralNumber => TemplateItem::Number,
            TokenKind::LiteralString => TemplateItem::Str,
            TokenKind::SchemaRef | TokenKind::IdentifierUnknown => {
                let name = t.name();
                let schema_ref = t.kind == TokenKind::SchemaRef;
                match role.expect("entity slot has a role") {
                    Role::From | Role::Alias => TemplateItem::Table,
                    Role::Qualifier => {
                        if vocab.is_table(name) || aliases.contains(name) {
                            TemplateItem::Table
                        } else if schema_ref {
                            TemplateItem::Column
                        } else {
                            TemplateItem::Token(t.text.clone())
                        }
                    }
                    Role::Other => {
                        if vocab.is_column(name) {
                            TemplateItem::Column
                        } else if aliases.contains(name) || vocab.is_table(name) {
                            TemplateItem::Table
                        } else {
                            TemplateItem::Token(t.text.clone())
                        }
                    }
                }
            }
            _ => TemplateItem::Token(t.text.clone()),
        })
        .collect();
    Ok(SqlTemplate { items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sql::lexer::tests::concert_schema;
    use TemplateItem::*;

    fn tok(s: &str) -> TemplateItem {
        Token(s.into())
    }

    #[test]
    fn count_query_template() {
        let t = extract_template(
            "select count(*) from concert where year = 2014 or year = 2015",
            &concert_schema(),
        )
        .unwrap();
        assert_eq!(
            t.items,
            vec![
                tok("select"),
                tok("count"),
                tok("("),
                tok("*"),
                tok(")"),
                tok("from"),
                Table,
                tok("where"),
                Column,
                tok("="),
                Number,
                tok("or"),
                Column,
                tok("="),
                Number
            ]
        );
        assert_eq!(
            t.to_string(),
            "select count ( * ) from ⟨TAB⟩ where ⟨COL⟩ = ⟨NUM⟩ or ⟨COL⟩ = ⟨NUM⟩"
        );
    }

    #[test]
    fn sum_query_template() {
        let mut schema = concert_schema();
        schema.tables.push(crate::corpus::Table {
            name: "dorm".into(),
            columns: vec![crate::corpus::Column {
                name: "student_capacity".into(),
                decl_type: "int".into(),
                is_pk: false,
                description: None,
            }],
            content_samples: None,
        });
        let t = extract_template("select sum(student_capacity) from dorm", &schema).unwrap();
        assert_eq!(
            t.items,
            vec![tok("select"), tok("sum"), tok("("), Column, tok(")"), tok("from"), Table]
        );
    }

    #[test]
    fn aliases_become_table_placeholders() {
        let t = extract_template(
            "SELECT T2.name , count(*) FROM concert AS T1 JOIN stadium AS T2 \
             ON T1.stadium_id = T2.stadium_id GROUP BY T1.stadium_id",
            &concert_schema(),
        )
        .unwrap();
        assert_eq!(
            t.to_string(),
            "select ⟨TAB⟩ . ⟨COL⟩ , count ( * ) from ⟨TAB⟩ as ⟨TAB⟩ join ⟨TAB⟩ as ⟨TAB⟩ \
             on ⟨TAB⟩ . ⟨COL⟩ = ⟨TAB⟩ . ⟨COL⟩ group by ⟨TAB⟩ . ⟨COL⟩"
        );
    }

    #[test]
    fn literal_values_do_not_matter() {
        let schema = concert_schema();
        let a = extract_template("select name from singer where age > 30", &schema).unwrap();
        let b = extract_template("SELECT Name FROM singer WHERE Age > 52", &schema).unwrap();
        let c = extract_template("select count(*) from singer", &schema).unwrap();
        assert!(template_equal(&a, &a));
        assert!(template_equal(&a, &b));
        assert!(!template_equal(&a, &c));
    }

    #[test]
    fn subquery_alias_stays_verbatim() {
        let t = extract_template(
            "select count(*) from (select name from singer) as sub",
            &concert_schema(),
        )
        .unwrap();
        assert_eq!(
            t.to_string(),
            "select count ( * ) from ( select ⟨COL⟩ from ⟨TAB⟩ ) as sub"
        );
    }
}
