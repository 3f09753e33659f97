//! Dataset loading: Spider-style schema catalogs, example files, SQLite
//! content sampling, and the JSONL artifact format shared by every stage.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error{}: {message}", describe_location(.db_id, .index))]
    Parse {
        db_id: Option<String>,
        index: Option<usize>,
        message: String,
    },
    #[error("invalid schema `{db_id}`: {message}")]
    Validation { db_id: String, message: String },
    #[error("content error in `{db_id}`: {message}")]
    Content { db_id: String, message: String },
    #[error("sqlite error on {path}: {source}")]
    Sqlite {
        path: PathBuf,
        #[source]
        source: rusqlite::Error,
    },
}

fn describe_location(db_id: &Option<String>, index: &Option<usize>) -> String {
    match (db_id, index) {
        (Some(db), Some(i)) => format!(" in record {i} (db_id `{db}`)"),
        (Some(db), None) => format!(" in db_id `{db}`"),
        (None, Some(i)) => format!(" in record {i}"),
        (None, None) => String::new(),
    }
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub decl_type: String,
    pub is_pk: bool,
    /// Free-text documentation for the column (KaggleDBQA database documents).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<Column>,
    /// Per column, up to `n` distinct values rendered as strings. `None` until
    /// [`sample_content`] has run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_samples: Option<Vec<Vec<String>>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns
            .iter()
            .find(|c| c.name.eq_ignore_ascii_case(name))
    }

    pub fn samples_for(&self, column_idx: usize) -> &[String] {
        self.content_samples
            .as_ref()
            .and_then(|s| s.get(column_idx))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ForeignKey {
    pub from_table: String,
    pub from_column: String,
    pub to_table: String,
    pub to_column: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatabaseSchema {
    pub db_id: String,
    pub tables: Vec<Table>,
    pub foreign_keys: Vec<ForeignKey>,
}

impl DatabaseSchema {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name.eq_ignore_ascii_case(name))
    }

    pub fn has_samples(&self) -> bool {
        self.tables.iter().all(|t| {
            t.content_samples
                .as_ref()
                .is_some_and(|s| s.len() == t.columns.len())
        })
    }

    /// Checks the structural invariants: unique table names, unique column
    /// names per table, non-empty tables, FK endpoints that exist, and sample
    /// lists that are short and duplicate-free.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |message: String| CorpusError::Validation {
            db_id: self.db_id.clone(),
            message,
        };
        let mut seen = HashSet::new();
        for table in &self.tables {
            if !seen.insert(table.name.to_lowercase()) {
                return Err(fail(format!("duplicate table `{}`", table.name)));
            }
            if table.columns.is_empty() {
                return Err(fail(format!("table `{}` has no columns", table.name)));
            }
            let mut cols = HashSet::new();
            for col in &table.columns {
                if !cols.insert(col.name.to_lowercase()) {
                    return Err(fail(format!(
                        "duplicate column `{}` in table `{}`",
                        col.name, table.name
                    )));
                }
            }
            if let Some(samples) = &table.content_samples {
                if samples.len() != table.columns.len() {
                    return Err(fail(format!(
                        "table `{}` has {} sample lists for {} columns",
                        table.name,
                        samples.len(),
                        table.columns.len()
                    )));
                }
                for values in samples {
                    let distinct: HashSet<_> = values.iter().collect();
                    if distinct.len() != values.len() {
                        return Err(fail(format!(
                            "duplicate sample values in table `{}`",
                            table.name
                        )));
                    }
                }
            }
        }
        for fk in &self.foreign_keys {
            for (t, c) in [(&fk.from_table, &fk.from_column), (&fk.to_table, &fk.to_column)] {
                let ok = self.table(t).is_some_and(|tab| tab.column(c).is_some());
                if !ok {
                    return Err(fail(format!("foreign key endpoint `{t}.{c}` does not exist")));
                }
            }
        }
        Ok(())
    }
}

/// Schemas indexed by `db_id`, in file order.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    schemas: Vec<DatabaseSchema>,
    by_id: HashMap<String, usize>,
}

impl Catalog {
    pub fn new(schemas: Vec<DatabaseSchema>) -> Self {
        let by_id = schemas
            .iter()
            .enumerate()
            .map(|(i, s)| (s.db_id.clone(), i))
            .collect();
        Catalog { schemas, by_id }
    }

    pub fn get(&self, db_id: &str) -> Option<&DatabaseSchema> {
        self.by_id.get(db_id).map(|&i| &self.schemas[i])
    }

    pub fn schemas(&self) -> &[DatabaseSchema] {
        &self.schemas
    }

    pub fn len(&self) -> usize {
        self.schemas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schemas.is_empty()
    }

    pub fn into_schemas(self) -> Vec<DatabaseSchema> {
        self.schemas
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Annotated,
    Synthetic,
}

/// One NLQ/SQL unit. Field order is the JSONL wire order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub db_id: String,
    pub nlq: String,
    pub gold_sql: Option<String>,
    pub pred_sql: Option<String>,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    OutOfDomain,
    InDomainSynthetic,
}

/// Ordered examples. The order is the tie-breaker for every ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    pub kind: PoolKind,
    pub examples: Vec<Example>,
}

impl Pool {
    pub fn new(kind: PoolKind, examples: Vec<Example>) -> Self {
        Pool { kind, examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PrimaryKeyEntry {
    Single(usize),
    Composite(Vec<usize>),
}

#[derive(Deserialize)]
struct SpiderSchemaEntry {
    db_id: String,
    table_names_original: Vec<String>,
    column_names_original: Vec<(i64, String)>,
    column_types: Vec<String>,
    #[serde(default)]
    primary_keys: Vec<PrimaryKeyEntry>,
    #[serde(default)]
    foreign_keys: Vec<(usize, usize)>,
    #[serde(default)]
    column_descriptions: Option<Vec<String>>,
}

fn read_to_string(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))
}

/// Loads a Spider-format `tables.json`. The `*` sentinel column is dropped.
pub fn load_schema_catalog(path: &Path) -> Result<Vec<DatabaseSchema>, CorpusError> {
    parse_schema_catalog(&read_to_string(path)?)
}

pub fn parse_schema_catalog(text: &str) -> Result<Vec<DatabaseSchema>, CorpusError> {
    let raw: Vec<Value> = serde_json::from_str(text).map_err(|e| CorpusError::Parse {
        db_id: None,
        index: None,
        message: e.to_string(),
    })?;
    raw.into_iter()
        .enumerate()
        .map(|(i, value)| {
            let db_id = value
                .get("db_id")
                .and_then(Value::as_str)
                .map(str::to_string);
            let entry: SpiderSchemaEntry =
                serde_json::from_value(value).map_err(|e| CorpusError::Parse {
                    db_id: db_id.clone(),
                    index: Some(i),
                    message: e.to_string(),
                })?;
            schema_from_entry(entry)
        })
        .collect()
}

fn schema_from_entry(entry: SpiderSchemaEntry) -> Result<DatabaseSchema, CorpusError> {
    let db_id = entry.db_id;
    let fail = |message: String| CorpusError::Validation {
        db_id: db_id.clone(),
        message,
    };
    if entry.column_types.len() != entry.column_names_original.len() {
        return Err(fail(format!(
            "{} column types for {} columns",
            entry.column_types.len(),
            entry.column_names_original.len()
        )));
    }
    if let Some(desc) = &entry.column_descriptions {
        if desc.len() != entry.column_names_original.len() {
            return Err(fail("column_descriptions length mismatch".into()));
        }
    }

    let mut tables: Vec<Table> = entry
        .table_names_original
        .iter()
        .map(|name| Table {
            name: name.clone(),
            columns: Vec::new(),
            content_samples: None,
        })
        .collect();
    // Global column index -> (table index, position within table).
    let mut locate: Vec<Option<(usize, usize)>> = Vec::with_capacity(entry.column_names_original.len());
    for (i, (table_idx, name)) in entry.column_names_original.iter().enumerate() {
        if *table_idx < 0 {
            locate.push(None);
            continue;
        }
        let t = *table_idx as usize;
        let table = tables
            .get_mut(t)
            .ok_or_else(|| fail(format!("column `{name}` references table index {t}")))?;
        let description = entry
            .column_descriptions
            .as_ref()
            .map(|d| d[i].trim().to_string())
            .filter(|d| !d.is_empty());
        locate.push(Some((t, table.columns.len())));
        table.columns.push(Column {
            name: name.clone(),
            decl_type: entry.column_types[i].clone(),
            is_pk: false,
            description,
        });
    }
    let resolve = |idx: usize| -> Result<(usize, usize), CorpusError> {
        locate
            .get(idx)
            .copied()
            .flatten()
            .ok_or_else(|| fail(format!("column index {idx} out of range")))
    };

    for pk in &entry.primary_keys {
        let cols = match pk {
            PrimaryKeyEntry::Single(c) => vec![*c],
            PrimaryKeyEntry::Composite(cs) => cs.clone(),
        };
        for c in cols {
            let (t, p) = resolve(c)?;
            tables[t].columns[p].is_pk = true;
        }
    }
    let mut foreign_keys = Vec::with_capacity(entry.foreign_keys.len());
    for &(from, to) in &entry.foreign_keys {
        let (ft, fp) = resolve(from)?;
        let (tt, tp) = resolve(to)?;
        foreign_keys.push(ForeignKey {
            from_table: tables[ft].name.clone(),
            from_column: tables[ft].columns[fp].name.clone(),
            to_table: tables[tt].name.clone(),
            to_column: tables[tt].columns[tp].name.clone(),
        });
    }
    let schema = DatabaseSchema {
        db_id,
        tables,
        foreign_keys,
    };
    schema.validate()?;
    Ok(schema)
}

/// Renders a schema back into a Spider `tables.json` entry.
pub fn to_spider_entry(schema: &DatabaseSchema) -> Value {
    let mut columns = vec![serde_json::json!([-1, "*"])];
    let mut types = vec![Value::from("text")];
    let mut descriptions = vec![Value::from("")];
    let mut has_descriptions = false;
    let mut primary_keys = Vec::new();
    let mut global: HashMap<(String, String), usize> = HashMap::new();
    for (ti, table) in schema.tables.iter().enumerate() {
        let mut pk = Vec::new();
        for col in &table.columns {
            let idx = columns.len();
            columns.push(serde_json::json!([ti, col.name]));
            types.push(Value::from(col.decl_type.clone()));
            descriptions.push(Value::from(col.description.clone().unwrap_or_default()));
            has_descriptions |= col.description.is_some();
            global.insert((table.name.to_lowercase(), col.name.to_lowercase()), idx);
            if col.is_pk {
                pk.push(idx);
            }
        }
        match pk.len() {
            0 => {}
            1 => primary_keys.push(Value::from(pk[0])),
            _ => primary_keys.push(Value::from(pk)),
        }
    }
    let lookup = |t: &str, c: &str| global[&(t.to_lowercase(), c.to_lowercase())];
    let foreign_keys: Vec<Value> = schema
        .foreign_keys
        .iter()
        .map(|fk| {
            serde_json::json!([
                lookup(&fk.from_table, &fk.from_column),
                lookup(&fk.to_table, &fk.to_column)
            ])
        })
        .collect();
    let mut entry = serde_json::json!({
        "db_id": schema.db_id,
        "table_names_original": schema.tables.iter().map(|t| t.name.clone()).collect::<Vec<_>>(),
        "column_names_original": columns,
        "column_types": types,
        "primary_keys": primary_keys,
        "foreign_keys": foreign_keys,
    });
    if has_descriptions {
        entry["column_descriptions"] = Value::from(descriptions);
    }
    entry
}

/// Conventional Spider layout: `<dir>/<db_id>/<db_id>.sqlite`.
pub fn database_path(database_dir: &Path, db_id: &str) -> PathBuf {
    database_dir.join(db_id).join(format!("{db_id}.sqlite"))
}

pub(crate) fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

pub(crate) fn open_read_only(path: &Path) -> Result<Connection, rusqlite::Error> {
    if !path.is_file() {
        return Err(rusqlite::Error::SqliteFailure(
            rusqlite::ffi::Error::new(rusqlite::ffi::SQLITE_CANTOPEN),
            Some(format!("no database file at {}", path.display())),
        ));
    }
    Connection::open_with_flags(
        path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )
}

/// Renders a stored value the way it is shown in prompts (before quoting).
pub(crate) fn render_value(value: ValueRef<'_>) -> Option<String> {
    match value {
        ValueRef::Null => None,
        ValueRef::Integer(i) => Some(i.to_string()),
        ValueRef::Real(f) => Some(format!("{f:?}")),
        ValueRef::Text(t) => Some(String::from_utf8_lossy(t).into_owned()),
        ValueRef::Blob(_) => None,
    }
}

/// Fills `content_samples` with the first `n` distinct non-null values of
/// each column in rowid order, and refreshes declared column types from the
/// database file.
pub fn sample_content(
    db_file: &Path,
    schema: &DatabaseSchema,
    n: usize,
) -> Result<DatabaseSchema, CorpusError> {
    let sqlite_err = |source| CorpusError::Sqlite {
        path: db_file.to_path_buf(),
        source,
    };
    let conn = open_read_only(db_file).map_err(sqlite_err)?;
    let content_err = |message: String| CorpusError::Content {
        db_id: schema.db_id.clone(),
        message,
    };

    let mut out = schema.clone();
    for table in &mut out.tables {
        let declared = declared_types(&conn, &table.name).map_err(sqlite_err)?;
        if declared.is_empty() {
            return Err(content_err(format!("table `{}` missing from database file", table.name)));
        }
        let mut samples = Vec::with_capacity(table.columns.len());
        for col in &mut table.columns {
            let decl = declared
                .get(&col.name.to_lowercase())
                .ok_or_else(|| {
                    content_err(format!(
                        "column `{}.{}` missing from database file",
                        table.name, col.name
                    ))
                })?;
            if !decl.is_empty() {
                col.decl_type = decl.to_lowercase();
            }
            let values = if n == 0 {
                Vec::new()
            } else {
                distinct_values(&conn, &table.name, &col.name, n).map_err(sqlite_err)?
            };
            samples.push(values);
        }
        table.content_samples = Some(samples);
    }
    Ok(out)
}

fn declared_types(conn: &Connection, table: &str) -> Result<HashMap<String, String>, rusqlite::Error> {
    let mut stmt = conn.prepare(&format!("PRAGMA table_info({})", quote_ident(table)))?;
    let rows = stmt.query_map([], |row| {
        Ok((row.get::<_, String>(1)?, row.get::<_, Option<String>>(2)?))
    })?;
    let mut out = HashMap::new();
    for row in rows {
        let (name, decl) = row?;
        out.insert(name.to_lowercase(), decl.unwrap_or_default());
    }
    Ok(out)
}

fn distinct_values(
    conn: &Connection,
    table: &str,
    column: &str,
    n: usize,
) -> Result<Vec<String>, rusqlite::Error> {
    let base = format!("SELECT {} FROM {}", quote_ident(column), quote_ident(table));
    // WITHOUT ROWID tables reject the ordered form; fall back to scan order.
    let mut stmt = match conn.prepare(&format!("{base} ORDER BY rowid")) {
        Ok(stmt) => stmt,
        Err(_) => conn.prepare(&base)?,
    };
    let mut rows = stmt.query([])?;
    let mut seen = HashSet::new();
    let mut values = Vec::new();
    while let Some(row) = rows.next()? {
        if let Some(v) = render_value(row.get_ref(0)?) {
            if seen.insert(v.clone()) {
                values.push(v);
                if values.len() == n {
                    break;
                }
            }
        }
    }
    Ok(values)
}

#[derive(Deserialize)]
struct RawExample {
    db_id: Option<String>,
    question: Option<String>,
    query: Option<String>,
    #[serde(default)]
    pred_sql: Option<String>,
}

/// Loads a Spider/KaggleDBQA example file (`db_id`, `question`, `query`).
pub fn load_examples(path: &Path, origin: Origin) -> Result<Vec<Example>, CorpusError> {
    parse_examples(&read_to_string(path)?, origin)
}

pub fn parse_examples(text: &str, origin: Origin) -> Result<Vec<Example>, CorpusError> {
    let raw: Vec<Value> = serde_json::from_str(text).map_err(|e| CorpusError::Parse {
        db_id: None,
        index: None,
        message: e.to_string(),
    })?;
    raw.into_iter()
        .enumerate()
        .map(|(index, value)| {
            let record: RawExample =
                serde_json::from_value(value).map_err(|e| CorpusError::Parse {
                    db_id: None,
                    index: Some(index),
                    message: e.to_string(),
                })?;
            let missing = |field: &str| CorpusError::Parse {
                db_id: record.db_id.clone(),
                index: Some(index),
                message: format!("missing `{field}`"),
            };
            let db_id = record.db_id.clone().ok_or_else(|| missing("db_id"))?;
            let nlq = record
                .question
                .clone()
                .filter(|q| !q.trim().is_empty())
                .ok_or_else(|| missing("question"))?;
            Ok(Example {
                db_id,
                nlq,
                gold_sql: record.query,
                pred_sql: record.pred_sql,
                origin,
            })
        })
        .collect()
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>, CorpusError> {
    let file = fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = Vec::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let example: Example = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            db_id: None,
            index: Some(index),
            message: e.to_string(),
        })?;
        out.push(example);
    }
    Ok(out)
}

/// Writes any serializable records as JSON Lines, creating parent
/// directories as needed.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CorpusError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CorpusError::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut writer = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).map_err(|e| CorpusError::Parse {
            db_id: None,
            index: None,
            message: e.to_string(),
        })?;
        writeln!(writer, "{line}").map_err(|e| CorpusError::io(path, e))?;
    }
    writer.flush().map_err(|e| CorpusError::io(path, e))
}

/// Loads a pool from either a `.jsonl` artifact or a dataset `.json` file.
pub fn load_pool(path: &Path, kind: PoolKind) -> Result<Pool, CorpusError> {
    let is_jsonl = path.extension().is_some_and(|e| e == "jsonl");
    let examples = if is_jsonl {
        read_jsonl(path)?
    } else {
        let origin = match kind {
            PoolKind::OutOfDomain => Origin::Annotated,
            PoolKind::InDomainSynthetic => Origin::Synthetic,
        };
        load_examples(path, origin)?
    };
    Ok(Pool::new(kind, examples))
}
