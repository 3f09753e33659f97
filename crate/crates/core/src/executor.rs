//! Read-only SQL execution, result-set comparison and execution accuracy.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use rusqlite::types::ValueRef;
use rusqlite::Connection;
use serde::{Deserialize, Serialize};

use crate::corpus::{open_read_only, Example};
use crate::sql::has_top_level_order_by;

pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;
const REAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("cannot open {path}: {message}")]
    Open { path: PathBuf, message: String },
    #[error("{0}")]
    Sql(String),
    #[error("query exceeded {timeout_ms} ms")]
    Timeout { timeout_ms: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl Cell {
    fn from_value(v: ValueRef<'_>) -> Self {
        match v {
            ValueRef::Null => Cell::Null,
            ValueRef::Integer(i) => Cell::Integer(i),
            ValueRef::Real(f) => Cell::Real(f),
            ValueRef::Text(t) => Cell::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Cell::Blob(b.to_vec()),
        }
    }

    fn as_number(&self) -> Option<f64> {
        match *self {
            Cell::Integer(i) => Some(i as f64),
            Cell::Real(f) => Some(f),
            _ => None,
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Cell::Null => 0,
            Cell::Integer(_) | Cell::Real(_) => 1,
            Cell::Text(_) => 2,
            Cell::Blob(_) => 3,
        }
    }

    /// Total order used to canonicalize unordered result sets.
    fn canonical_cmp(&self, other: &Cell) -> Ordering {
        match (self, other) {
            (Cell::Text(a), Cell::Text(b)) => a.cmp(b),
            (Cell::Blob(a), Cell::Blob(b)) => a.cmp(b),
            _ => match (self.as_number(), other.as_number()) {
                (Some(a), Some(b)) => a.total_cmp(&b),
                _ => self.rank().cmp(&other.rank()),
            },
        }
    }

    pub fn matches(&self, other: &Cell) -> bool {
        match (self, other) {
            (Cell::Null, Cell::Null) => true,
            (Cell::Integer(a), Cell::Integer(b)) => a == b,
            (Cell::Text(a), Cell::Text(b)) => a == b,
            (Cell::Blob(a), Cell::Blob(b)) => a == b,
            _ => match (self.as_number(), other.as_number()) {
                (Some(a), Some(b)) => {
                    a == b || (a - b).abs() <= REAL_TOLERANCE * a.abs().max(b.abs())
                }
                _ => false,
            },
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Null => f.write_str("NULL"),
            Cell::Integer(i) => write!(f, "{i}"),
            Cell::Real(r) => write!(f, "{r:?}"),
            Cell::Text(t) => f.write_str(t),
            Cell::Blob(b) => {
                f.write_str("x'")?;
                for byte in b {
                    write!(f, "{byte:02x}")?;
                }
                f.write_str("'")
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultSet {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    pub row_order_significant: bool,
}

impl ResultSet {
    pub fn arity(&self) -> usize {
        self.columns.len()
    }

    fn sorted_rows(&self) -> Vec<&Vec<Cell>> {
        let mut rows: Vec<&Vec<Cell>> = self.rows.iter().collect();
        rows.sort_by(|a, b| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| x.canonical_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(a.len().cmp(&b.len()))
        });
        rows
    }
}

fn rows_match(a: &[Cell], b: &[Cell]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.matches(y))
}

/// Equality of query results. Column order matters; row order matters only
/// when either side has a top-level `ORDER BY`.
pub fn results_equal(a: &ResultSet, b: &ResultSet) -> bool {
    if a.arity() != b.arity() || a.rows.len() != b.rows.len() {
        return false;
    }
    if a.row_order_significant || b.row_order_significant {
        a.rows.iter().zip(&b.rows).all(|(x, y)| rows_match(x, y))
    } else {
        a.sorted_rows()
            .into_iter()
            .zip(b.sorted_rows())
            .all(|(x, y)| rows_match(x, y))
    }
}

/// A read-only connection to one database file.
pub struct Database {
    conn: Connection,
    path: PathBuf,
}

impl Database {
    pub fn open(path: &Path) -> Result<Self, ExecError> {
        let open_err = |e: rusqlite::Error| ExecError::Open {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let conn = open_read_only(path).map_err(open_err)?;
        conn.execute_batch("PRAGMA query_only = 1;")
            .map_err(open_err)?;
        Ok(Database {
            conn,
            path: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn execute(&self, sql: &str, timeout_ms: u64) -> Result<ResultSet, ExecError> {
        let deadline = Instant::now() + Duration::from_millis(timeout_ms);
        self.conn
            .progress_handler(1000, Some(move || Instant::now() >= deadline));
        let result = self.run(sql);
        self.conn.progress_handler(1000, None::<fn() -> bool>);
        match result {
            Err(rusqlite::Error::SqliteFailure(e, _))
                if e.code == rusqlite::ErrorCode::OperationInterrupted =>
            {
                Err(ExecError::Timeout { timeout_ms })
            }
            other => other.map_err(|e| ExecError::Sql(e.to_string())),
        }
    }

    fn run(&self, sql: &str) -> Result<ResultSet, rusqlite::Error> {
        let mut stmt = self.conn.prepare(sql)?;
        let columns: Vec<String> = stmt.column_names().iter().map(|c| c.to_string()).collect();
        let arity = columns.len();
        let mut rows = Vec::new();
        let mut cursor = stmt.query([])?;
        while let Some(row) = cursor.next()? {
            let mut cells = Vec::with_capacity(arity);
            for i in 0..arity {
                cells.push(Cell::from_value(row.get_ref(i)?));
            }
            rows.push(cells);
        }
        Ok(ResultSet {
            columns,
            rows,
            row_order_significant: has_top_level_order_by(sql),
        })
    }
}

/// Opens `db_file` read-only and runs one statement.
pub fn execute(db_file: &Path, sql: &str, timeout_ms: u64) -> Result<ResultSet, ExecError> {
    Database::open(db_file)?.execute(sql, timeout_ms)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub accuracy: f64,
    pub correct: usize,
    pub scored: usize,
    /// Examples whose gold SQL failed to execute; excluded from `scored`.
    pub dropped: usize,
    /// Per-example verdict; `None` for dropped examples.
    pub verdicts: Vec<Option<bool>>,
}

#[derive(Debug, thiserror::Error)]
#[error("{preds} predictions for {golds} gold examples")]
pub struct LengthMismatch {
    pub preds: usize,
    pub golds: usize,
}

/// Fraction of predictions whose results equal the gold results. Examples
/// whose gold query cannot be executed are dropped with a warning.
pub fn execution_accuracy(
    preds: &[String],
    golds: &[Example],
    db_files: &HashMap<String, PathBuf>,
    timeout_ms: u64,
) -> Result<Accuracy, LengthMismatch> {
    if preds.len() != golds.len() {
        return Err(LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    let verdicts: Vec<Option<bool>> = preds
        .par_iter()
        .zip(golds.par_iter())
        .enumerate()
        .map(|(i, (pred, gold))| {
            let gold_result = db_files
                .get(&gold.db_id)
                .ok_or_else(|| format!("no database file for `{}`", gold.db_id))
                .and_then(|path| Database::open(path).map_err(|e| e.to_string()))
                .and_then(|db| {
                    let sql = gold.gold_sql.as_deref().ok_or("no gold SQL")?;
                    let res = db.execute(sql, timeout_ms).map_err(|e| e.to_string())?;
                    Ok((db, res))
                });
            match gold_result {
                Err(e) => {
                    log::warn!("example {i}: gold query failed, dropped: {e}");
                    None
                }
                Ok((db, gold_res)) => Some(
                    db.execute(pred, timeout_ms)
                        .is_ok_and(|pred_res| results_equal(&pred_res, &gold_res)),
                ),
            }
        })
        .collect();
    let scored = verdicts.iter().filter(|v| v.is_some()).count();
    let correct = verdicts.iter().filter(|v| **v == Some(true)).count();
    Ok(Accuracy {
        accuracy: if scored == 0 {
            0.0
        } else {
            correct as f64 / scored as f64
        },
        correct,
        scored,
        dropped: verdicts.len() - scored,
        verdicts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Origin;

    fn fixture_db(name: &str) -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../fixtures/database")
            .join(name)
            .join(format!("{name}.sqlite"))
    }

    fn unordered(rows: Vec<Vec<Cell>>) -> ResultSet {
        ResultSet {
            columns: vec!["c".into(); rows.first().map_or(1, Vec::len)],
            rows,
            row_order_significant: false,
        }
    }

    #[test]
    fn counts_concerts_in_2014_and_2015() {
        let res = execute(
            &fixture_db("concert_singer"),
            "select count(*) from concert where year = 2014 or year = 2015",
            DEFAULT_TIMEOUT_MS,
        )
        .unwrap();
        assert_eq!(res.rows.len(), 1);
        assert!(matches!(res.rows[0][..], [Cell::Integer(6)]));
        assert!(!res.row_order_significant);
    }

    #[test]
    fn select_one_and_missing_table() {
        let db = Database::open(&fixture_db("concert_singer")).unwrap();
        let res = db.execute("select 1", 1000).unwrap();
        assert!(matches!(res.rows[..], [ref r] if matches!(r[..], [Cell::Integer(1)])));
        let err = db.execute("select * from missing_table", 1000).unwrap_err();
        assert!(err.to_string().contains("no such table"), "{err}");
    }

    #[test]
    fn writes_are_rejected() {
        let db = Database::open(&fixture_db("concert_singer")).unwrap();
        assert!(db.execute("delete from concert", 1000).is_err());
        let res = db.execute("select count(*) from concert", 1000).unwrap();
        assert!(matches!(res.rows[0][..], [Cell::Integer(n)] if n > 0));
    }

    #[test]
    fn long_query_times_out() {
        let db = Database::open(&fixture_db("concert_singer")).unwrap();
        let sql = "with recursive c(x) as (select 1 union all select x + 1 from c) \
                   select count(*) from c";
        assert!(matches!(db.execute(sql, 50), Err(ExecError::Timeout { timeout_ms: 50 })));
        // the handler is cleared after a timeout
        assert!(db.execute("select 1", 50).is_ok());
    }

    #[test]
    fn order_by_sets_significance() {
        let db = Database::open(&fixture_db("concert_singer")).unwrap();
        let res = db.execute("select name from singer order by age", 1000).unwrap();
        assert!(res.row_order_significant);
    }

    #[test]
    fn equality_rules() {
        let a = unordered(vec![vec![Cell::Integer(1)], vec![Cell::Integer(2)]]);
        let b = unordered(vec![vec![Cell::Integer(2)], vec![Cell::Integer(1)]]);
        assert!(results_equal(&a, &b));
        let mut ordered = b.clone();
        ordered.row_order_significant = true;
        assert!(!results_equal(&a, &ordered));

        let x = unordered(vec![vec![Cell::Real(1.000_000_1)]]);
        let y = unordered(vec![vec![Cell::Real(1.0)]]);
        assert!(results_equal(&x, &y));
        let z = unordered(vec![vec![Cell::Integer(1)]]);
        assert!(results_equal(&y, &z));
        let n = unordered(vec![vec![Cell::Null]]);
        assert!(results_equal(&n, &n));
        assert!(!results_equal(&n, &z));
        assert!(!results_equal(
            &unordered(vec![vec![Cell::Text("1".into())]]),
            &z
        ));
    }

    #[test]
    fn arity_must_match() {
        let a = ResultSet {
            columns: vec!["a".into()],
            rows: vec![],
            row_order_significant: false,
        };
        let b = ResultSet {
            columns: vec!["a".into(), "b".into()],
            rows: vec![],
            row_order_significant: false,
        };
        assert!(!results_equal(&a, &b));
    }

    fn gold(sql: &str) -> Example {
        Example {
            db_id: "concert_singer".into(),
            nlq: "q".into(),
            gold_sql: Some(sql.into()),
            pred_sql: None,
            origin: Origin::Annotated,
        }
    }

    #[test]
    fn accuracy_counts_and_drops() {
        let files: HashMap<_, _> =
            [("concert_singer".to_string(), fixture_db("concert_singer"))].into();
        let golds = vec![
            gold("select count(*) from singer"),
            gold("select name from stadium"),
            gold("select count(*) from concert"),
            gold("select * from nowhere"),
        ];
        let preds = vec![
            "select count(*) from singer".to_string(),
            "SELECT Name FROM stadium;".to_string(),
            "select 0".to_string(),
            "select 1".to_string(),
        ];
        let acc = execution_accuracy(&preds, &golds, &files, 1000).unwrap();
        assert_eq!(acc.correct, 2);
        assert_eq!(acc.scored, 3);
        assert_eq!(acc.dropped, 1);
        assert!((acc.accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(acc.verdicts, vec![Some(true), Some(true), Some(false), None]);

        let err = execution_accuracy(&preds[..1], &golds, &files, 1000).unwrap_err();
        assert_eq!((err.preds, err.golds), (1, 4));
    }
}
