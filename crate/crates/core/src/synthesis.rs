//! Synthetic in-domain examples: templates mined from out-of-domain SQL are
//! filled with the test database's tables, columns and values, described as
//! questions by the model, and kept only when a back-translation of the
//! question executes to the same result.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, DatabaseSchema, Example, Origin, Pool};
use crate::executor::{results_equal, Database};
use crate::llm::{zero_shot_predict, CompletionRequest, Gateway, LlmError};
use crate::prompt::{looks_numeric, render_sql_to_nlq_prompt};
use crate::sql::lexer::{is_function_name, is_reserved};
use crate::sql::template::{entity_roles, Role, Slot};
use crate::sql::{extract_template, tokenize, SqlTemplate, TemplateItem, TokenKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateEntry {
    pub template: SqlTemplate,
    pub frequency: u32,
    /// Databases the template was seen on, in first-occurrence order.
    pub provenance: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TemplatePool {
    pub entries: Vec<TemplateEntry>,
    /// Pool examples that could not be templated.
    pub skipped: usize,
}

impl TemplatePool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Distinct templates of the pool's gold SQL, ordered by first occurrence.
pub fn extract_templates(pool: &Pool, catalog: &Catalog) -> TemplatePool {
    let mut out = TemplatePool::default();
    let mut seen: HashMap<SqlTemplate, usize> = HashMap::new();
    for (i, ex) in pool.examples.iter().enumerate() {
        let template = match (catalog.get(&ex.db_id), ex.gold_sql.as_deref()) {
            (Some(schema), Some(sql)) => extract_template(sql, schema),
            _ => {
                out.skipped += 1;
                continue;
            }
        };
        let Ok(template) = template else {
            log::debug!("example {i}: gold SQL does not lex");
            out.skipped += 1;
            continue;
        };
        match seen.get(&template) {
            Some(&pos) => {
                let entry = &mut out.entries[pos];
                entry.frequency += 1;
                if !entry.provenance.contains(&ex.db_id) {
                    entry.provenance.push(ex.db_id.clone());
                }
            }
            None => {
                seen.insert(template.clone(), out.entries.len());
                out.entries.push(TemplateEntry {
                    template,
                    frequency: 1,
                    provenance: vec![ex.db_id.clone()],
                });
            }
        }
    }
    if out.skipped > 0 {
        log::warn!("{} example(s) skipped during template extraction", out.skipped);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TemplateSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partitions example indices so that no template occurs on both sides.
/// Template groups move to the test side in seeded random order until at
/// least `test_fraction` of the examples are there. Examples without a usable
/// template stay in train.
pub fn template_split(
    examples: &[Example],
    catalog: &Catalog,
    test_fraction: f64,
    seed: u64,
) -> TemplateSplit {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut group_of: HashMap<SqlTemplate, usize> = HashMap::new();
    let mut loose = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let template = catalog
            .get(&ex.db_id)
            .zip(ex.gold_sql.as_deref())
            .and_then(|(schema, sql)| extract_template(sql, schema).ok());
        match template {
            Some(t) => {
                let next = groups.len();
                let g = *group_of.entry(t).or_insert(next);
                if g == next {
                    groups.push(Vec::new());
                }
                groups[g].push(i);
            }
            None => loose.push(i),
        }
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let wanted = (test_fraction.clamp(0.0, 1.0) * examples.len() as f64).ceil() as usize;
    let mut split = TemplateSplit {
        train: loose,
        test: Vec::new(),
    };
    for g in order {
        if split.test.len() < wanted {
            split.test.extend(&groups[g]);
        } else {
            split.train.extend(&groups[g]);
        }
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    split
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateWeighting {
    #[default]
    Frequency,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingPolicy {
    /// Probability of drawing an unqualified column from tables already in
    /// the query.
    pub same_table_bias: f64,
    /// Joined tables must be connected to an earlier table by a foreign key.
    pub fk_join_only: bool,
    pub seed: u64,
    pub target_size: usize,
    pub weighting: TemplateWeighting,
    pub drop_empty_results: bool,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        SamplingPolicy {
            same_table_bias: 0.8,
            fk_join_only: true,
            seed: 0,
            target_size: 100,
            weighting: TemplateWeighting::Frequency,
            drop_empty_results: false,
        }
    }
}

impl SamplingPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.same_table_bias) {
            return Err(format!(
                "synthesis.same_table_bias must be in [0, 1], got {}",
                self.same_table_bias
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InstantiateError {
    #[error("schema has no usable tables")]
    NoTables,
    #[error("no table can be joined")]
    NoJoinableTable,
    #[error("no column compatible with the placeholder")]
    NoCompatibleColumn,
    #[error("no text column for a string literal")]
    NoTextColumn,
    #[error("column paired with both a number and a string")]
    ConflictingTypes,
    #[error("alias without a preceding table")]
    DanglingAlias,
    #[error("instantiated SQL does not reproduce the template")]
    RoundTrip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LitType {
    Num,
    Str,
}

struct ColInfo {
    name: String,
    num_ok: bool,
    str_ok: bool,
    num_samples: Vec<String>,
    str_samples: Vec<String>,
}

impl ColInfo {
    fn accepts(&self, req: Option<LitType>) -> bool {
        match req {
            None => true,
            Some(LitType::Num) => self.num_ok,
            Some(LitType::Str) => self.str_ok,
        }
    }
}

struct TableInfo {
    name: String,
    columns: Vec<usize>,
}

fn simple_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    chars
        .next()
        .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        && !is_reserved(name)
}

#[derive(PartialEq)]
enum Affinity {
    Integer,
    Text,
    Blob,
    Real,
    Numeric,
}

fn affinity(decl_type: &str) -> Affinity {
    let t = decl_type.to_ascii_lowercase();
    if t.contains("int") {
        Affinity::Integer
    } else if t.contains("char") || t.contains("clob") || t.contains("text") {
        Affinity::Text
    } else if t.is_empty() || t.contains("blob") {
        Affinity::Blob
    } else if t.contains("real") || t.contains("floa") || t.contains("doub") {
        Affinity::Real
    } else {
        Affinity::Numeric
    }
}

fn is_number_token(value: &str) -> bool {
    matches!(tokenize(value).as_deref(), Ok([t]) if t.kind == TokenKind::LiteralNumber)
}

fn sql_string(value: &str) -> String {
    format!("'{}'", value.replace('\'', "''"))
}

struct Vocabulary {
    tables: Vec<TableInfo>,
    columns: Vec<ColInfo>,
    column_names: HashSet<String>,
}

impl Vocabulary {
    fn new(schema: &DatabaseSchema) -> Self {
        let table_names: HashSet<String> =
            schema.tables.iter().map(|t| t.name.to_lowercase()).collect();
        let mut tables = Vec::new();
        let mut columns = Vec::new();
        for table in &schema.tables {
            let name = table.name.to_lowercase();
            if !simple_identifier(&name) {
                continue;
            }
            let mut col_ids = Vec::new();
            for (c_idx, col) in table.columns.iter().enumerate() {
                let cname = col.name.to_lowercase();
                if !simple_identifier(&cname) || table_names.contains(&cname) {
                    continue;
                }
                let samples = table.samples_for(c_idx);
                let all_numeric = !samples.is_empty() && samples.iter().all(|s| looks_numeric(s));
                let aff = affinity(&col.decl_type);
                col_ids.push(columns.len());
                columns.push(ColInfo {
                    name: cname,
                    num_ok: matches!(aff, Affinity::Integer | Affinity::Real | Affinity::Numeric)
                        || all_numeric,
                    str_ok: aff == Affinity::Text || samples.iter().any(|s| !looks_numeric(s)),
                    num_samples: samples.iter().filter(|s| is_number_token(s)).cloned().collect(),
                    str_samples: samples.iter().map(|s| sql_string(s)).collect(),
                });
            }
            tables.push(TableInfo {
                name,
                columns: col_ids,
            });
        }
        let column_names = columns.iter().map(|c| c.name.clone()).collect();
        Vocabulary {
            tables,
            columns,
            column_names,
        }
    }

    fn adjacent(&self, schema: &DatabaseSchema, a: usize, b: usize) -> bool {
        let (a, b) = (&self.tables[a].name, &self.tables[b].name);
        schema.foreign_keys.iter().any(|fk| {
            let (f, t) = (fk.from_table.to_lowercase(), fk.to_table.to_lowercase());
            (&f == a && &t == b) || (&f == b && &t == a)
        })
    }

    fn column_of(&self, table: usize, name: &str) -> Option<usize> {
        self.tables[table]
            .columns
            .iter()
            .copied()
            .find(|&c| self.columns[c].name.eq_ignore_ascii_case(name))
    }
}

fn word(item: &TemplateItem) -> Option<&str> {
    item.word()
}

/// Scope id of every item: `( select` opens a nested scope, a set operator
/// starts a sibling scope.
fn scopes(items: &[TemplateItem]) -> (Vec<usize>, Vec<Option<usize>>) {
    let mut parent: Vec<Option<usize>> = vec![None];
    let mut stack: Vec<(usize, usize)> = vec![(0, 0)];
    let mut depth = 0usize;
    let mut scope_of = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        match word(item) {
            Some("(") => {
                depth += 1;
                if items.get(i + 1).and_then(word) == Some("select") {
                    let id = parent.len();
                    parent.push(Some(stack.last().unwrap().0));
                    stack.push((id, depth));
                }
            }
            Some(")") => {
                if stack.len() > 1 && stack.last().unwrap().1 == depth {
                    stack.pop();
                }
                depth = depth.saturating_sub(1);
            }
            Some("union" | "intersect" | "except") => {
                let (cur, open) = *stack.last().unwrap();
                let id = parent.len();
                parent.push(parent[cur]);
                *stack.last_mut().unwrap() = (id, open);
            }
            _ => {}
        }
        scope_of.push(stack.last().unwrap().0);
    }
    (scope_of, parent)
}

const LITERAL_CONTEXT: [&str; 15] = [
    "=", "==", "!=", "<>", "<", ">", "<=", ">=", "not", "like", "between", "and", "in", "(", ",",
];

/// The column a literal is compared with, if any.
fn literal_partner(items: &[TemplateItem], pos: usize) -> Option<usize> {
    let mut j = pos;
    while j > 0 {
        j -= 1;
        match &items[j] {
            TemplateItem::Column => return Some(j),
            TemplateItem::Number | TemplateItem::Str => {}
            TemplateItem::Token(w) if LITERAL_CONTEXT.contains(&w.as_str()) => {}
            _ => return None,
        }
    }
    None
}

fn choose<R: Rng>(rng: &mut R, candidates: &[usize]) -> Option<usize> {
    candidates.choose(rng).copied()
}

/// Joins rendered pieces the way SQL is usually written: no space inside
/// parentheses, around `.`, before `,`, or between a function and `(`.
fn join_pieces(pieces: &[String]) -> String {
    let mut out = String::new();
    for (i, piece) in pieces.iter().enumerate() {
        if i > 0 {
            let prev = pieces[i - 1].as_str();
            let tight = prev == "("
                || prev == "."
                || matches!(piece.as_str(), ")" | "," | ".")
                || (piece == "(" && is_function_name(prev));
            if !tight {
                out.push(' ');
            }
        }
        out.push_str(piece);
    }
    out
}

/// Fills a template with tables, columns and values of `schema`. The result
/// always re-extracts to `template`.
pub fn instantiate<R: Rng>(
    template: &SqlTemplate,
    schema: &DatabaseSchema,
    policy: &SamplingPolicy,
    rng: &mut R,
) -> Result<String, InstantiateError> {
    let items = &template.items;
    let vocab = Vocabulary::new(schema);
    if vocab.tables.is_empty() {
        return Err(InstantiateError::NoTables);
    }
    let slots: Vec<Slot<'_>> = items
        .iter()
        .map(|item| match item {
            TemplateItem::Table => Slot::Entity { is_table: true },
            TemplateItem::Column => Slot::Entity { is_table: false },
            TemplateItem::Token(w) => Slot::Word(w),
            TemplateItem::Number | TemplateItem::Str => Slot::Word(""),
        })
        .collect();
    let roles = entity_roles(&slots);
    let (scope_of, parent) = scopes(items);

    let mut partner: Vec<Option<usize>> = vec![None; items.len()];
    let mut requirement: Vec<Option<LitType>> = vec![None; items.len()];
    for (p, item) in items.iter().enumerate() {
        let ty = match item {
            TemplateItem::Number => LitType::Num,
            TemplateItem::Str => LitType::Str,
            _ => continue,
        };
        if let Some(c) = literal_partner(items, p) {
            partner[p] = Some(c);
            match requirement[c] {
                Some(existing) if existing != ty => return Err(InstantiateError::ConflictingTypes),
                _ => requirement[c] = Some(ty),
            }
        }
    }

    for i in 2..items.len() {
        let numeric_arg = matches!(items[i], TemplateItem::Column)
            && word(&items[i - 1]) == Some("(")
            && matches!(word(&items[i - 2]), Some("sum" | "avg"));
        if numeric_arg {
            match requirement[i] {
                Some(LitType::Str) => return Err(InstantiateError::ConflictingTypes),
                _ => requirement[i] = Some(LitType::Num),
            }
        }
    }

    let mut table_at: Vec<Option<usize>> = vec![None; items.len()];
    let mut column_at: Vec<Option<usize>> = vec![None; items.len()];
    let mut scope_tables: Vec<Vec<usize>> = vec![Vec::new(); parent.len()];
    let mut bound_at: Vec<Vec<usize>> = vec![Vec::new(); parent.len()];
    let all_tables: Vec<usize> = (0..vocab.tables.len()).collect();

    for i in 0..items.len() {
        match roles[i] {
            Some(Role::From) => {
                let bound = &scope_tables[scope_of[i]];
                let candidates: Vec<usize> = if policy.fk_join_only && !bound.is_empty() {
                    all_tables
                        .iter()
                        .copied()
                        .filter(|t| !bound.contains(t))
                        .filter(|&t| bound.iter().any(|&b| vocab.adjacent(schema, b, t)))
                        .collect()
                } else {
                    all_tables.clone()
                };
                let t = choose(rng, &candidates).ok_or(InstantiateError::NoJoinableTable)?;
                table_at[i] = Some(t);
                scope_tables[scope_of[i]].push(t);
                bound_at[scope_of[i]].push(i);
            }
            Some(Role::Alias) => {
                let t = *scope_tables[scope_of[i]]
                    .last()
                    .ok_or(InstantiateError::DanglingAlias)?;
                table_at[i] = Some(t);
            }
            _ => {}
        }
    }

    let visible = |scope: usize, scope_tables: &[Vec<usize>]| -> Vec<usize> {
        let mut s = Some(scope);
        while let Some(id) = s {
            if !scope_tables[id].is_empty() {
                return scope_tables[id].clone();
            }
            s = parent[id];
        }
        Vec::new()
    };

    // `on Q.C = Q.C` joins follow a foreign key when one links the scope's
    // tables.
    for i in 0..items.len() {
        if word(&items[i]) != Some("on") || i + 7 >= items.len() {
            continue;
        }
        let shape = [
            &items[i + 1],
            &items[i + 2],
            &items[i + 3],
            &items[i + 4],
            &items[i + 5],
            &items[i + 6],
            &items[i + 7],
        ];
        let dot = TemplateItem::Token(".".into());
        let eq = TemplateItem::Token("=".into());
        let expected = [
            &TemplateItem::Table,
            &dot,
            &TemplateItem::Column,
            &eq,
            &TemplateItem::Table,
            &dot,
            &TemplateItem::Column,
        ];
        if shape != expected {
            continue;
        }
        let scope = scope_of[i];
        let tables: Vec<usize> = scope_tables[scope]
            .iter()
            .zip(&bound_at[scope])
            .filter(|(_, &pos)| pos < i)
            .map(|(&t, _)| t)
            .collect();
        let mut links: Vec<(usize, usize, usize, usize)> = Vec::new();
        for fk in &schema.foreign_keys {
            let find = |name: &str| tables.iter().copied().find(|&t| vocab.tables[t].name.eq_ignore_ascii_case(name));
            if let (Some(a), Some(b)) = (find(&fk.from_table), find(&fk.to_table)) {
                if let (Some(ca), Some(cb)) =
                    (vocab.column_of(a, &fk.from_column), vocab.column_of(b, &fk.to_column))
                {
                    links.push((a, ca, b, cb));
                }
            }
        }
        let last = tables.last().copied();
        let recent: Vec<_> = links
            .iter()
            .copied()
            .filter(|&(a, _, b, _)| Some(a) == last || Some(b) == last)
            .collect();
        let pool = if recent.is_empty() { links } else { recent };
        let Some(&(a, ca, b, cb)) = pool.choose(rng) else {
            continue;
        };
        let ((a, ca), (b, cb)) = if rng.gen_bool(0.5) {
            ((a, ca), (b, cb))
        } else {
            ((b, cb), (a, ca))
        };
        if requirement[i + 3].is_some() || requirement[i + 7].is_some() {
            continue;
        }
        table_at[i + 1] = Some(a);
        column_at[i + 3] = Some(ca);
        table_at[i + 5] = Some(b);
        column_at[i + 7] = Some(cb);
    }

    let all_columns: Vec<usize> = (0..vocab.columns.len()).collect();
    for i in 0..items.len() {
        match items[i] {
            TemplateItem::Table if table_at[i].is_none() => {
                let mut candidates = visible(scope_of[i], &scope_tables);
                if roles[i] == Some(Role::Other) {
                    candidates.retain(|&t| !vocab.column_names.contains(&vocab.tables[t].name));
                    if candidates.is_empty() {
                        candidates = all_tables
                            .iter()
                            .copied()
                            .filter(|&t| !vocab.column_names.contains(&vocab.tables[t].name))
                            .collect();
                    }
                } else if candidates.is_empty() {
                    candidates = all_tables.clone();
                }
                table_at[i] = Some(choose(rng, &candidates).ok_or(InstantiateError::NoCompatibleColumn)?);
            }
            TemplateItem::Column if column_at[i].is_none() => {
                let req = requirement[i];
                let qualified = i >= 2
                    && word(&items[i - 1]) == Some(".")
                    && matches!(items[i - 2], TemplateItem::Table);
                let candidates: Vec<usize> = if qualified {
                    let t = table_at[i - 2].expect("qualifier bound before its column");
                    vocab.tables[t]
                        .columns
                        .iter()
                        .copied()
                        .filter(|&c| vocab.columns[c].accepts(req))
                        .collect()
                } else {
                    let scope_cols: Vec<usize> = visible(scope_of[i], &scope_tables)
                        .iter()
                        .flat_map(|&t| vocab.tables[t].columns.iter().copied())
                        .filter(|&c| vocab.columns[c].accepts(req))
                        .collect();
                    if !scope_cols.is_empty() && rng.gen_bool(policy.same_table_bias) {
                        scope_cols
                    } else {
                        all_columns
                            .iter()
                            .copied()
                            .filter(|&c| vocab.columns[c].accepts(req))
                            .collect()
                    }
                };
                let c = choose(rng, &candidates).ok_or(match req {
                    Some(LitType::Str) => InstantiateError::NoTextColumn,
                    _ => InstantiateError::NoCompatibleColumn,
                })?;
                column_at[i] = Some(c);
            }
            _ => {}
        }
    }

    let text_columns: Vec<usize> = all_columns
        .iter()
        .copied()
        .filter(|&c| vocab.columns[c].str_ok)
        .collect();
    let mut pieces = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let piece = match item {
            TemplateItem::Token(w) => w.clone(),
            TemplateItem::Table => vocab.tables[table_at[i].unwrap()].name.clone(),
            TemplateItem::Column => vocab.columns[column_at[i].unwrap()].name.clone(),
            TemplateItem::Number => partner[i]
                .and_then(|c| column_at[c])
                .and_then(|c| vocab.columns[c].num_samples.choose(rng).cloned())
                .unwrap_or_else(|| "1".to_string()),
            TemplateItem::Str => {
                let col = match partner[i].and_then(|c| column_at[c]) {
                    Some(c) => c,
                    None => choose(rng, &text_columns).ok_or(InstantiateError::NoTextColumn)?,
                };
                vocab.columns[col]
                    .str_samples
                    .choose(rng)
                    .cloned()
                    .unwrap_or_else(|| "'a'".to_string())
            }
        };
        pieces.push(piece);
    }
    let sql = join_pieces(&pieces);
    match extract_template(&sql, schema) {
        Ok(t) if &t == template => Ok(sql),
        _ => Err(InstantiateError::RoundTrip),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthesisError {
    #[error("target size must be positive")]
    ZeroTarget,
    #[error("no templates to sample from")]
    NoTemplates,
    #[error("cannot open database: {0}")]
    Database(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GenerationStats {
    pub attempts: usize,
    pub instantiation_failures: usize,
    pub execution_failures: usize,
    pub empty_results_dropped: usize,
    pub duplicates: usize,
    pub candidates: usize,
    pub nlq_failures: usize,
    pub verified: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Kept { back_sql: String },
    Rejected { back_sql: Option<String>, reason: String },
}

/// Back-translates `nlq` and compares execution results with `sql`.
#[allow(clippy::too_many_arguments)]
pub fn verify(
    nlq: &str,
    sql: &str,
    schema: &DatabaseSchema,
    db: &Database,
    gateway: &Gateway,
    with_descriptions: bool,
    max_tokens: u32,
    timeout_ms: u64,
) -> Verdict {
    let back_sql = match zero_shot_predict(schema, nlq, gateway, with_descriptions, max_tokens) {
        Ok(s) => s,
        Err(e) => {
            log::warn!("verification call failed: {e}");
            return Verdict::Rejected {
                back_sql: None,
                reason: e.to_string(),
            };
        }
    };
    let outcome = db
        .execute(sql, timeout_ms)
        .map_err(|e| format!("synthetic SQL: {e}"))
        .and_then(|expected| {
            db.execute(&back_sql, timeout_ms)
                .map_err(|e| format!("back-translated SQL: {e}"))
                .map(|got| results_equal(&expected, &got))
        });
    match outcome {
        Ok(true) => Verdict::Kept { back_sql },
        Ok(false) => Verdict::Rejected {
            back_sql: Some(back_sql),
            reason: "different execution results".into(),
        },
        Err(reason) => Verdict::Rejected {
            back_sql: Some(back_sql),
            reason,
        },
    }
}

/// Asks the model for the question a synthetic SQL query answers.
pub fn generate_nlq(
    schema: &DatabaseSchema,
    sql: &str,
    gateway: &Gateway,
    with_descriptions: bool,
    max_tokens: u32,
) -> Result<String, LlmError> {
    let prompt = render_sql_to_nlq_prompt(schema, sql, with_descriptions)?;
    let req = CompletionRequest::new(prompt, vec!["\n".into()], max_tokens, 0.0);
    Ok(gateway.complete(&req)?.trim().to_string())
}

pub struct GenerationSettings {
    pub with_descriptions: bool,
    pub max_tokens: u32,
    pub timeout_ms: u64,
}

pub struct GenerationOutcome {
    pub examples: Vec<Example>,
    pub stats: GenerationStats,
}

type NlqOutcome = Result<(String, Verdict), LlmError>;

/// Samples, describes and verifies synthetic examples for one database
/// until `policy.target_size` are kept or `20 × target` templates have been
/// tried. Output order is sampling order.
pub fn generate_pool(
    templates: &TemplatePool,
    schema: &DatabaseSchema,
    db_file: &Path,
    gateway: &Gateway,
    policy: &SamplingPolicy,
    settings: &GenerationSettings,
) -> Result<GenerationOutcome, SynthesisError> {
    let target = policy.target_size;
    if target == 0 {
        return Err(SynthesisError::ZeroTarget);
    }
    if templates.is_empty() {
        return Err(SynthesisError::NoTemplates);
    }
    let db = Database::open(db_file).map_err(|e| SynthesisError::Database(e.to_string()))?;
    let weights: Vec<u32> = templates
        .entries
        .iter()
        .map(|e| match policy.weighting {
            TemplateWeighting::Frequency => e.frequency.max(1),
            TemplateWeighting::Uniform => 1,
        })
        .collect();
    let dist = WeightedIndex::new(&weights).expect("positive weights");
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let budget = target.saturating_mul(20);
    let mut stats = GenerationStats::default();
    let mut seen: HashSet<String> = HashSet::new();
    let mut kept: Vec<Example> = Vec::new();

    while kept.len() < target && stats.attempts < budget {
        let need = target - kept.len();
        let mut batch: Vec<String> = Vec::new();
        while batch.len() < need && stats.attempts < budget {
            stats.attempts += 1;
            let entry = &templates.entries[dist.sample(&mut rng)];
            let sql = match instantiate(&entry.template, schema, policy, &mut rng) {
                Ok(sql) => sql,
                Err(_) => {
                    stats.instantiation_failures += 1;
                    continue;
                }
            };
            match db.execute(&sql, settings.timeout_ms) {
                Err(_) => {
                    stats.execution_failures += 1;
                    continue;
                }
                Ok(res) if res.rows.is_empty() && policy.drop_empty_results => {
                    stats.empty_results_dropped += 1;
                    continue;
                }
                Ok(_) => {}
            }
            if !seen.insert(sql.clone()) {
                stats.duplicates += 1;
                continue;
            }
            batch.push(sql);
        }
        stats.candidates += batch.len();
        let verdicts: Vec<(String, NlqOutcome)> = batch
            .into_par_iter()
            .map(|sql| {
                let outcome = generate_nlq(schema, &sql, gateway, settings.with_descriptions, settings.max_tokens)
                    .map(|nlq| {
                        let conn = Database::open(db_file);
                        let verdict = match conn {
                            Ok(conn) => verify(
                                &nlq,
                                &sql,
                                schema,
                                &conn,
                                gateway,
                                settings.with_descriptions,
                                settings.max_tokens,
                                settings.timeout_ms,
                            ),
                            Err(e) => Verdict::Rejected {
                                back_sql: None,
                                reason: e.to_string(),
                            },
                        };
                        (nlq, verdict)
                    });
                (sql, outcome)
            })
            .collect();
        for (sql, outcome) in verdicts {
            match outcome {
                Ok((nlq, _)) if nlq.is_empty() => stats.nlq_failures += 1,
                Err(e) => {
                    log::warn!("question generation failed: {e}");
                    stats.nlq_failures += 1;
                }
                Ok((nlq, Verdict::Kept { back_sql })) => {
                    stats.verified += 1;
                    if kept.len() < target {
                        kept.push(Example {
                            db_id: schema.db_id.clone(),
                            nlq,
                            gold_sql: Some(sql),
                            pred_sql: Some(back_sql),
                            origin: Origin::Synthetic,
                        });
                    }
                }
                Ok((_, Verdict::Rejected { reason, .. })) => {
                    log::debug!("rejected `{sql}`: {reason}");
                    stats.rejected += 1;
                }
            }
        }
    }
    if kept.len() < target {
        log::warn!(
            "{}: sampling budget exhausted with {} of {target} verified examples",
            schema.db_id,
            kept.len()
        );
    }
    Ok(GenerationOutcome {
        examples: kept,
        stats,
    })
}
