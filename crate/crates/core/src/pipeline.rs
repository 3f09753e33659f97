//! End-to-end orchestration behind the `odis` subcommands: configuration,
//! offline synthesis, per-question retrieval and decoding, and scoring.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bm25::Bm25Params;
use crate::corpus::{
    database_path, load_examples, load_pool, load_schema_catalog, sample_content, write_jsonl,
    Catalog, CorpusError, Example, Origin, Pool, PoolKind,
};
use crate::executor::{execution_accuracy, DEFAULT_TIMEOUT_MS};
use crate::llm::{predict_sql, zero_shot_predict, CallCounts, Gateway, GatewayConfig, LlmError};
use crate::prompt::{render_prompt, Demo, DemonstrationPlan, OodBlock, OodOrder, PromptOptions};
use crate::retrieval::{
    cosine, example_bags, random_select, CovSqlIndex, EmbeddingProvider, HashEmbedder, Pick,
    RetrievalConfig, SimSqlIndex, SimilaritySource,
};
use crate::sql::token_bag;
use crate::synthesis::{
    extract_templates, generate_pool, GenerationSettings, GenerationStats, SamplingPolicy,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("{0}")]
    Runtime(String),
}

impl PipelineError {
    pub fn is_config(&self) -> bool {
        matches!(self, PipelineError::Config(_) | PipelineError::Llm(LlmError::Config(_)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ZeroShot,
    OodOnly,
    IdOnly,
    #[default]
    Odis,
    RandomOod,
    SimNlqOod,
    RandomId,
    SimNlqId,
}

impl Mode {
    pub const ALL: [Mode; 8] = [
        Mode::ZeroShot,
        Mode::OodOnly,
        Mode::IdOnly,
        Mode::Odis,
        Mode::RandomOod,
        Mode::SimNlqOod,
        Mode::RandomId,
        Mode::SimNlqId,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::ZeroShot => "zero_shot",
            Mode::OodOnly => "ood_only",
            Mode::IdOnly => "id_only",
            Mode::Odis => "odis",
            Mode::RandomOod => "random_ood",
            Mode::SimNlqOod => "sim_nlq_ood",
            Mode::RandomId => "random_id",
            Mode::SimNlqId => "sim_nlq_id",
        }
    }

    pub fn uses_ood(self) -> bool {
        matches!(self, Mode::OodOnly | Mode::Odis | Mode::RandomOod | Mode::SimNlqOod)
    }

    pub fn uses_id(self) -> bool {
        matches!(self, Mode::IdOnly | Mode::Odis | Mode::RandomId | Mode::SimNlqId)
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
                format!("unknown mode `{s}` (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Spider-style `tables.json`.
    pub tables: PathBuf,
    /// Directory holding `<db_id>/<db_id>.sqlite`.
    pub database_dir: PathBuf,
    /// Out-of-domain examples, a dataset `.json` or a `.jsonl` with
    /// zero-shot predictions.
    pub ood_pool: Option<PathBuf>,
    /// Test questions with gold SQL.
    pub test: PathBuf,
    /// Synthetic in-domain pool, written by `synthesize`.
    pub synthetic_pool: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            tables: PathBuf::from("tables.json"),
            database_dir: PathBuf::from("database"),
            ood_pool: None,
            test: PathBuf::from("dev.json"),
            synthetic_pool: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub mode: Mode,
    pub workers: usize,
    pub seed: u64,
    /// Score predictions by execution once decoding has finished.
    pub score: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            mode: Mode::Odis,
            workers: 1,
            seed: 0,
            score: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub timeout_ms: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            timeout_ms: DEFAULT_TIMEOUT_MS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub retrieval: RetrievalConfig,
    pub bm25: Bm25Params,
    pub prompt: PromptOptions,
    pub synthesis: SamplingPolicy,
    /// Model for zero-shot predictions, synthesis and, unless
    /// `llm_generate` is set, final decoding.
    pub llm: GatewayConfig,
    pub llm_generate: Option<GatewayConfig>,
    pub run: RunSection,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Reads a TOML config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let d = &mut self.data;
        for p in [&mut d.tables, &mut d.database_dir, &mut d.test, &mut d.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        for p in [&mut d.ood_pool, &mut d.synthetic_pool].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        self.llm.resolve_paths(base);
        if let Some(g) = &mut self.llm_generate {
            g.resolve_paths(base);
        }
    }

    pub fn synthetic_pool_path(&self) -> PathBuf {
        self.data
            .synthetic_pool
            .clone()
            .unwrap_or_else(|| self.data.output_dir.join("synthetic.jsonl"))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let config = PipelineError::Config;
        if self.run.workers == 0 {
            return Err(config("run.workers must be at least 1".into()));
        }
        self.retrieval.validate().map_err(config)?;
        self.synthesis.validate().map_err(config)?;
        for (key, path) in [
            ("data.tables", &self.data.tables),
            ("data.database_dir", &self.data.database_dir),
            ("data.test", &self.data.test),
        ] {
            if !path.exists() {
                return Err(config(format!("{key}: {} does not exist", path.display())));
            }
        }
        if let Some(p) = &self.data.ood_pool {
            if !p.exists() {
                return Err(config(format!("data.ood_pool: {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

/// Schemas from `data.tables` with content samples from each database file
/// that exists.
pub fn load_catalog(cfg: &RunConfig) -> Result<Catalog, PipelineError> {
    let mut missing = 0usize;
    let schemas = load_schema_catalog(&cfg.data.tables)?
        .into_iter()
        .map(|s| {
            let file = database_path(&cfg.data.database_dir, &s.db_id);
            if file.exists() {
                sample_content(&file, &s, cfg.prompt.content_samples)
            } else {
                missing += 1;
                Ok(s)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    if missing > 0 {
        log::warn!("{missing} schema(s) have no database file under {}", cfg.data.database_dir.display());
    }
    Ok(Catalog::new(schemas))
}

pub fn load_tests(cfg: &RunConfig) -> Result<Vec<Example>, PipelineError> {
    Ok(load_examples(&cfg.data.test, Origin::Annotated)?)
}

pub fn database_files(cfg: &RunConfig, catalog: &Catalog) -> HashMap<String, PathBuf> {
    catalog
        .schemas()
        .iter()
        .map(|s| (s.db_id.clone(), database_path(&cfg.data.database_dir, &s.db_id)))
        .collect()
}

fn require_ood_pool(cfg: &RunConfig) -> Result<Pool, PipelineError> {
    let path = cfg
        .data
        .ood_pool
        .as_ref()
        .ok_or_else(|| PipelineError::Config("data.ood_pool is required for this mode".into()))?;
    Ok(load_pool(path, PoolKind::OutOfDomain)?)
}

fn sha_seed(seed: u64, label: &str) -> u64 {
    let digest = Sha256::digest(label.as_bytes());
    seed ^ u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub databases: usize,
    pub with_content: usize,
    pub test_examples: usize,
    pub ood_examples: usize,
    pub catalog_path: PathBuf,
}

/// Validates the dataset, samples content and writes the enriched catalog
/// to `<output_dir>/catalog.json`.
pub fn ingest(cfg: &RunConfig) -> Result<IngestSummary, PipelineError> {
    cfg.validate()?;
    let catalog = load_catalog(cfg)?;
    for schema in catalog.schemas() {
        schema.validate()?;
    }
    let tests = load_tests(cfg)?;
    let ood = match &cfg.data.ood_pool {
        Some(p) => load_pool(p, PoolKind::OutOfDomain)?.examples,
        None => Vec::new(),
    };
    for ex in tests.iter().chain(&ood) {
        if !catalog.get(&ex.db_id).is_some_and(|s| s.has_samples()) {
            return Err(PipelineError::Runtime(format!(
                "example on `{}` has no schema with a database file",
                ex.db_id
            )));
        }
    }
    fs::create_dir_all(&cfg.data.output_dir)
        .map_err(|e| PipelineError::Runtime(format!("{}: {e}", cfg.data.output_dir.display())))?;
    let catalog_path = cfg.data.output_dir.join("catalog.json");
    let json = serde_json::to_string_pretty(catalog.schemas())
        .map_err(|e| PipelineError::Runtime(e.to_string()))?;
    fs::write(&catalog_path, json)
        .map_err(|e| PipelineError::Runtime(format!("{}: {e}", catalog_path.display())))?;
    Ok(IngestSummary {
        databases: catalog.len(),
        with_content: catalog.schemas().iter().filter(|s| s.has_samples()).count(),
        test_examples: tests.len(),
        ood_examples: ood.len(),
        catalog_path,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbSynthesis {
    pub db_id: String,
    pub templates: usize,
    pub kept: usize,
    pub stats: GenerationStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub pool_path: PathBuf,
    pub target_per_db: usize,
    pub databases: Vec<DbSynthesis>,
    pub calls: CallCounts,
}

/// Builds the synthetic pool for every test database, with templates taken
/// from the other databases of the out-of-domain pool.
pub fn synthesize(cfg: &RunConfig) -> Result<SynthesisReport, PipelineError> {
    cfg.validate()?;
    let catalog = load_catalog(cfg)?;
    let tests = load_tests(cfg)?;
    let ood = require_ood_pool(cfg)?;
    let gateway = Gateway::from_config(&cfg.llm)?;
    let settings = GenerationSettings {
        with_descriptions: cfg.prompt.with_descriptions,
        max_tokens: cfg.llm.max_tokens,
        timeout_ms: cfg.eval.timeout_ms,
    };
    let mut db_ids: Vec<&str> = Vec::new();
    for ex in &tests {
        if !db_ids.contains(&ex.db_id.as_str()) {
            db_ids.push(&ex.db_id);
        }
    }
    let pool_for = |db: &str| {
        Pool::new(
            PoolKind::OutOfDomain,
            ood.examples.iter().filter(|e| e.db_id != db).cloned().collect(),
        )
    };
    let run = || -> Result<SynthesisReport, PipelineError> {
        let mut examples = Vec::new();
        let mut databases = Vec::new();
        for db in db_ids {
            let schema = catalog
                .get(db)
                .ok_or_else(|| PipelineError::Runtime(format!("no schema for `{db}`")))?;
            let templates = extract_templates(&pool_for(db), &catalog);
            let policy = SamplingPolicy {
                seed: sha_seed(cfg.synthesis.seed, db),
                ..cfg.synthesis
            };
            let file = database_path(&cfg.data.database_dir, db);
            let outcome = generate_pool(&templates, schema, &file, &gateway, &policy, &settings)
                .map_err(|e| PipelineError::Runtime(format!("{db}: {e}")))?;
            log::info!("{db}: {} synthetic examples from {} templates", outcome.examples.len(), templates.len());
            databases.push(DbSynthesis {
                db_id: db.to_string(),
                templates: templates.len(),
                kept: outcome.examples.len(),
                stats: outcome.stats,
            });
            examples.extend(outcome.examples);
        }
        let pool_path = cfg.synthetic_pool_path();
        write_jsonl(&pool_path, &examples)?;
        Ok(SynthesisReport {
            pool_path,
            target_per_db: cfg.synthesis.target_size,
            databases,
            calls: gateway.counts(),
        })
    };
    let report = with_workers(cfg.run.workers, run)?;
    write_json(&cfg.data.output_dir.join("synthesis_report.json"), &report)?;
    Ok(report)
}

/// Fills `pred_sql` of every out-of-domain example with the model's
/// zero-shot prediction and writes `<output_dir>/ood_pool.jsonl`.
pub fn predict_zero_shot(cfg: &RunConfig) -> Result<(PathBuf, CallCounts), PipelineError> {
    cfg.validate()?;
    let catalog = load_catalog(cfg)?;
    let mut pool = require_ood_pool(cfg)?;
    let gateway = Gateway::from_config(&cfg.llm)?;
    let preds: Vec<Option<String>> = with_workers(cfg.run.workers, || {
        pool.examples
            .par_iter()
            .enumerate()
            .map(|(i, ex)| {
                let schema = catalog.get(&ex.db_id)?;
                zero_shot_predict(
                    schema,
                    &ex.nlq,
                    &gateway,
                    cfg.prompt.with_descriptions,
                    cfg.llm.max_tokens,
                )
                .map_err(|e| log::warn!("pool example {i}: {e}"))
                .ok()
            })
            .collect()
    });
    for (ex, pred) in pool.examples.iter_mut().zip(preds) {
        ex.pred_sql = pred;
    }
    let path = cfg.data.output_dir.join("ood_pool.jsonl");
    write_jsonl(&path, &pool.examples)?;
    Ok((path, gateway.counts()))
}

fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(f),
        Err(e) => {
            log::warn!("cannot build a {workers}-thread pool ({e}); using the global pool");
            f()
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| PipelineError::Runtime(format!("{}: {e}", parent.display())))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| PipelineError::Runtime(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDb {
    pub db_id: String,
    pub picks: Vec<Pick>,
}

/// Which pool examples were shown; indices refer to the pool files.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalTrace {
    pub ood: Vec<TraceDb>,
    pub ood_padded: bool,
    pub in_domain: Vec<Pick>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: usize,
    pub db_id: String,
    pub question: String,
    pub zero_shot_sql: Option<String>,
    pub retrieval: RetrievalTrace,
    pub final_sql: Option<String>,
    pub error: Option<String>,
}

struct OodState {
    pool: Pool,
    index: SimSqlIndex,
    embeddings: Vec<Vec<f32>>,
}

struct IdState {
    /// Positions in the synthetic pool file.
    positions: Vec<usize>,
    examples: Vec<Example>,
    index: CovSqlIndex,
    embeddings: Vec<Vec<f32>>,
}

/// Immutable state shared by all workers during a run.
pub struct Pipeline {
    cfg: RunConfig,
    catalog: Catalog,
    tests: Vec<Example>,
    ood: Option<OodState>,
    id: HashMap<String, IdState>,
    embedder: Box<dyn EmbeddingProvider>,
    retrieve_llm: Gateway,
    generate_llm: Option<Gateway>,
}

fn embed_all(embedder: &dyn EmbeddingProvider, texts: &[&str]) -> Result<Vec<Vec<f32>>, PipelineError> {
    texts
        .iter()
        .map(|t| embedder.embed(t).map_err(|e| PipelineError::Runtime(e.to_string())))
        .collect()
}

impl Pipeline {
    /// Loads data, pools and indexes for `cfg.run.mode`. Refuses to run a
    /// mode that needs the synthetic pool before `synthesize` produced it.
    pub fn new(cfg: RunConfig) -> Result<Self, PipelineError> {
        let retrieve_llm = Gateway::from_config(&cfg.llm)?;
        let generate_llm = cfg.llm_generate.as_ref().map(Gateway::from_config).transpose()?;
        Self::with_gateways(cfg, retrieve_llm, generate_llm)
    }

    pub fn with_gateways(
        cfg: RunConfig,
        retrieve_llm: Gateway,
        generate_llm: Option<Gateway>,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let mode = cfg.run.mode;
        let catalog = load_catalog(&cfg)?;
        let tests = load_tests(&cfg)?;
        let embedder: Box<dyn EmbeddingProvider> = Box::new(HashEmbedder::default());
        let source = cfg.retrieval.similarity_source;

        let ood = if mode.uses_ood() {
            let pool = require_ood_pool(&cfg)?;
            let index = SimSqlIndex::build(&pool, &catalog, source, cfg.bm25);
            let embeddings = if mode == Mode::SimNlqOod {
                let texts: Vec<&str> = pool.examples.iter().map(|e| e.nlq.as_str()).collect();
                embed_all(embedder.as_ref(), &texts)?
            } else {
                Vec::new()
            };
            Some(OodState {
                pool,
                index,
                embeddings,
            })
        } else {
            None
        };

        let mut id = HashMap::new();
        if mode.uses_id() {
            let path = cfg.synthetic_pool_path();
            if !path.exists() {
                return Err(PipelineError::Config(format!(
                    "mode {} needs the synthetic pool {}; run `odis synthesize` first",
                    mode.name(),
                    path.display()
                )));
            }
            let pool = load_pool(&path, PoolKind::InDomainSynthetic)?;
            let mut by_db: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, ex) in pool.examples.iter().enumerate() {
                by_db.entry(ex.db_id.as_str()).or_default().push(i);
            }
            for (db, positions) in by_db {
                let examples: Vec<Example> = positions.iter().map(|&i| pool.examples[i].clone()).collect();
                // synthetic SQL is the gold side
                let bags = example_bags(&examples, &catalog, SimilaritySource::Oracle);
                let embeddings = if mode == Mode::SimNlqId {
                    let texts: Vec<&str> = examples.iter().map(|e| e.nlq.as_str()).collect();
                    embed_all(embedder.as_ref(), &texts)?
                } else {
                    Vec::new()
                };
                id.insert(
                    db.to_string(),
                    IdState {
                        positions,
                        examples,
                        index: CovSqlIndex::new(bags, cfg.bm25),
                        embeddings,
                    },
                );
            }
        }

        Ok(Pipeline {
            cfg,
            catalog,
            tests,
            ood,
            id,
            embedder,
            retrieve_llm,
            generate_llm,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn tests(&self) -> &[Example] {
        &self.tests
    }

    fn generator(&self) -> &Gateway {
        self.generate_llm.as_ref().unwrap_or(&self.retrieve_llm)
    }

    pub fn call_counts(&self) -> (CallCounts, Option<CallCounts>) {
        (self.retrieve_llm.counts(), self.generate_llm.as_ref().map(Gateway::counts))
    }

    fn example_seed(&self, id: usize) -> u64 {
        sha_seed(self.cfg.run.seed, &format!("example-{id}"))
    }

    /// The zero-shot prediction used as the retrieval query (one call).
    pub fn zero_shot(&self, id: usize) -> Result<String, PipelineError> {
        let ex = self.test(id)?;
        let schema = self.schema(&ex.db_id)?;
        Ok(zero_shot_predict(
            schema,
            &ex.nlq,
            &self.retrieve_llm,
            self.cfg.prompt.with_descriptions,
            self.cfg.llm.max_tokens,
        )?)
    }

    fn test(&self, id: usize) -> Result<&Example, PipelineError> {
        self.tests
            .get(id)
            .ok_or_else(|| PipelineError::Runtime(format!("no test example {id} (have {})", self.tests.len())))
    }

    fn schema(&self, db_id: &str) -> Result<&crate::corpus::DatabaseSchema, PipelineError> {
        self.catalog
            .get(db_id)
            .ok_or_else(|| PipelineError::Runtime(format!("no schema for `{db_id}`")))
    }

    /// Demonstrations for test example `id` given its zero-shot prediction.
    pub fn retrieve(&self, id: usize, zero_shot_sql: &str) -> Result<RetrievalTrace, PipelineError> {
        let ex = self.test(id)?;
        let schema = self.schema(&ex.db_id)?;
        let r = &self.cfg.retrieval;
        let mode = self.cfg.run.mode;
        let query_sql = match r.similarity_source {
            SimilaritySource::Predicted => zero_shot_sql,
            SimilaritySource::Oracle => ex
                .gold_sql
                .as_deref()
                .ok_or_else(|| PipelineError::Runtime(format!("example {id} has no gold SQL for oracle retrieval")))?,
        };
        let query = token_bag(query_sql, schema).unwrap_or_else(|e| {
            log::warn!("example {id}: retrieval query does not lex ({e}); scores fall back to pool order");
            Default::default()
        });
        let mut trace = RetrievalTrace::default();

        if let Some(ood) = self.ood.as_ref().filter(|_| mode.uses_ood()) {
            let exclude = Some(ex.db_id.as_str());
            let selection = match mode {
                Mode::RandomOod => ood.index.retrieve_random(self.example_seed(id), exclude, r.m, r.k_ood),
                Mode::SimNlqOod => {
                    let q = self.embedder.embed(&ex.nlq).map_err(|e| PipelineError::Runtime(e.to_string()))?;
                    let scores: Vec<f64> = ood.embeddings.iter().map(|e| cosine(&q, e)).collect();
                    ood.index.retrieve_by_scores(&scores, exclude, r.m, r.k_ood)
                }
                _ => ood.index.retrieve(&query, exclude, r.m, r.k_ood),
            };
            if selection.padded {
                log::warn!("example {id}: fewer than {} databases reached {} examples", r.m, r.k_ood);
            }
            trace.ood_padded = selection.padded;
            trace.ood = selection
                .databases
                .into_iter()
                .map(|d| TraceDb {
                    db_id: d.db_id,
                    picks: d.picks,
                })
                .collect();
        }

        if mode.uses_id() {
            match self.id.get(&ex.db_id) {
                None => log::warn!("example {id}: no synthetic examples for `{}`", ex.db_id),
                Some(state) => {
                    let picks = match mode {
                        Mode::RandomId => random_select(state.examples.len(), r.k_id, self.example_seed(id))
                            .into_iter()
                            .map(|index| Pick { index, score: 0.0 })
                            .collect(),
                        Mode::SimNlqId => {
                            let q = self.embedder.embed(&ex.nlq).map_err(|e| PipelineError::Runtime(e.to_string()))?;
                            let scores: Vec<f64> = state.embeddings.iter().map(|e| cosine(&q, e)).collect();
                            crate::retrieval::rank_desc(&scores)
                                .into_iter()
                                .take(r.k_id)
                                .map(|index| Pick { index, score: scores[index] })
                                .collect()
                        }
                        _ => state.index.retrieve(&query, r.k_id),
                    };
                    trace.in_domain = picks
                        .into_iter()
                        .map(|p| Pick {
                            index: state.positions[p.index],
                            score: p.score,
                        })
                        .collect();
                }
            }
        }
        Ok(trace)
    }

    /// Renders the final prompt for test example `id` from a retrieval trace.
    pub fn render(&self, id: usize, trace: &RetrievalTrace) -> Result<String, PipelineError> {
        let ex = self.test(id)?;
        let test_schema = self.schema(&ex.db_id)?;
        let mut ood_blocks = Vec::new();
        if let Some(ood) = &self.ood {
            for db in &trace.ood {
                let schema = self.schema(&db.db_id)?;
                let pairs = db
                    .picks
                    .iter()
                    .map(|p| demo(&ood.pool.examples[p.index]))
                    .collect::<Result<Vec<_>, _>>()?;
                ood_blocks.push(OodBlock { schema, pairs });
            }
        }
        if self.cfg.prompt.ood_order == OodOrder::Asc {
            ood_blocks.reverse();
        }
        let id_pairs = match self.id.get(&ex.db_id) {
            Some(state) => trace
                .in_domain
                .iter()
                .map(|p| {
                    let local = state.positions.binary_search(&p.index).map_err(|_| {
                        PipelineError::Runtime(format!("synthetic example {} is not on `{}`", p.index, ex.db_id))
                    })?;
                    demo(&state.examples[local])
                })
                .collect::<Result<Vec<_>, _>>()?,
            None => Vec::new(),
        };
        let plan = DemonstrationPlan {
            ood_blocks,
            id_pairs,
            test_schema,
            test_nlq: ex.nlq.clone(),
        };
        Ok(render_prompt(&plan, self.cfg.prompt.with_descriptions).map_err(LlmError::from)?)
    }

    /// Zero-shot prediction, retrieval, prompt and final decoding for one
    /// test example. Failures are recorded, never propagated.
    pub fn process(&self, id: usize) -> Record {
        let (db_id, question) = match self.tests.get(id) {
            Some(ex) => (ex.db_id.clone(), ex.nlq.clone()),
            None => (String::new(), String::new()),
        };
        let mut record = Record {
            id,
            db_id,
            question,
            zero_shot_sql: None,
            retrieval: RetrievalTrace::default(),
            final_sql: None,
            error: None,
        };
        let zero_shot = match self.zero_shot(id) {
            Ok(sql) => sql,
            Err(e) => {
                record.error = Some(format!("zero-shot: {e}"));
                return record;
            }
        };
        record.zero_shot_sql = Some(zero_shot.clone());
        if self.cfg.run.mode == Mode::ZeroShot {
            record.final_sql = Some(zero_shot);
            return record;
        }
        let outcome = self.retrieve(id, &zero_shot).and_then(|trace| {
            record.retrieval = trace;
            let prompt = self.render(id, &record.retrieval)?;
            Ok(predict_sql(prompt, self.generator(), self.cfg.llm.max_tokens)?)
        });
        match outcome {
            Ok(sql) => record.final_sql = Some(sql),
            Err(e) => record.error = Some(e.to_string()),
        }
        record
    }

    /// Processes every test example on `run.workers` threads; records come
    /// back sorted by id.
    pub fn decode_all(&self) -> (Vec<Record>, Vec<f64>) {
        let ids: Vec<usize> = (0..self.tests.len()).collect();
        let timed: Vec<(Record, f64)> = with_workers(self.cfg.run.workers, || {
            ids.par_iter()
                .map(|&id| {
                    let start = Instant::now();
                    let record = self.process(id);
                    (record, start.elapsed().as_secs_f64() * 1000.0)
                })
                .collect()
        });
        let mut timed = timed;
        timed.sort_by_key(|(r, _)| r.id);
        timed.into_iter().unzip()
    }
}

fn demo(ex: &Example) -> Result<Demo, PipelineError> {
    let sql = ex
        .gold_sql
        .as_deref()
        .ok_or_else(|| PipelineError::Runtime(format!("demonstration on `{}` has no SQL", ex.db_id)))?;
    Ok(Demo::new(ex.nlq.clone(), sql))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub accuracy: f64,
    pub correct: usize,
    pub scored: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let at = |q: f64| sorted[((sorted.len() - 1) as f64 * q).round() as usize];
        LatencyStats {
            mean_ms: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p50_ms: at(0.5),
            p95_ms: at(0.95),
            max_ms: *sorted.last().unwrap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub examples: usize,
    pub failed_examples: usize,
    pub score: Option<ScoreSummary>,
    pub calls: CallCounts,
    pub generate_calls: Option<CallCounts>,
    pub calls_per_example: f64,
    pub wall_time_secs: f64,
    pub latency: LatencyStats,
    pub config: RunConfig,
    pub predictions_path: PathBuf,
}

/// Decodes every test example, writes `predictions.jsonl` and
/// `report.json` under the output directory, then scores by execution.
pub fn run(cfg: &RunConfig) -> Result<RunReport, PipelineError> {
    run_with(Pipeline::new(cfg.clone())?)
}

pub fn run_with(pipeline: Pipeline) -> Result<RunReport, PipelineError> {
    let start = Instant::now();
    let (records, latencies) = pipeline.decode_all();
    let cfg = pipeline.config();
    let predictions_path = cfg.data.output_dir.join("predictions.jsonl");
    write_jsonl(&predictions_path, &records)?;
    let (calls, generate_calls) = pipeline.call_counts();
    let wall_time_secs = start.elapsed().as_secs_f64();

    let score = if cfg.run.score {
        let preds: Vec<String> = records.iter().map(|r| r.final_sql.clone().unwrap_or_default()).collect();
        let files = database_files(cfg, pipeline.catalog());
        let acc = execution_accuracy(&preds, pipeline.tests(), &files, cfg.eval.timeout_ms)
            .map_err(|e| PipelineError::Runtime(e.to_string()))?;
        Some(ScoreSummary {
            accuracy: acc.accuracy,
            correct: acc.correct,
            scored: acc.scored,
            dropped: acc.dropped,
        })
    } else {
        None
    };
    let total_calls = calls.requests + generate_calls.map_or(0, |c| c.requests);
    let report = RunReport {
        mode: cfg.run.mode,
        examples: records.len(),
        failed_examples: records.iter().filter(|r| r.error.is_some()).count(),
        score,
        calls,
        generate_calls,
        calls_per_example: if records.is_empty() { 0.0 } else { total_calls as f64 / records.len() as f64 },
        wall_time_secs,
        latency: LatencyStats::from_samples(&latencies),
        config: cfg.clone(),
        predictions_path,
    };
    write_json(&cfg.data.output_dir.join("report.json"), &report)?;
    Ok(report)
}

/// Reads predictions either as `run` output (`.jsonl` records, ordered by
/// id) or as one SQL query per line, Spider style, with an optional
/// tab-separated suffix.
pub fn read_predictions(path: &Path) -> Result<Vec<String>, PipelineError> {
    let text = fs::read_to_string(path)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "jsonl") {
        let mut records: Vec<Record> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| PipelineError::Runtime(format!("{} line {}: {e}", path.display(), i + 1)))
            })
            .collect::<Result<_, _>>()?;
        records.sort_by_key(|r| r.id);
        Ok(records.into_iter().map(|r| r.final_sql.unwrap_or_default()).collect())
    } else {
        Ok(text
            .lines()
            .map(|l| l.split('\t').next().unwrap_or("").trim().to_string())
            .collect())
    }
}

/// Execution accuracy of a predictions file against a gold example file.
pub fn evaluate(
    cfg: &RunConfig,
    predictions: &Path,
    gold: Option<&Path>,
) -> Result<ScoreSummary, PipelineError> {
    let gold_path = gold.unwrap_or(&cfg.data.test);
    let golds = load_examples(gold_path, Origin::Annotated)?;
    let preds = read_predictions(predictions)?;
    let files: HashMap<String, PathBuf> = golds
        .iter()
        .map(|g| (g.db_id.clone(), database_path(&cfg.data.database_dir, &g.db_id)))
        .collect();
    let acc = execution_accuracy(&preds, &golds, &files, cfg.eval.timeout_ms)
        .map_err(|e| PipelineError::Runtime(e.to_string()))?;
    Ok(ScoreSummary {
        accuracy: acc.accuracy,
        correct: acc.correct,
        scored: acc.scored,
        dropped: acc.dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_shipped_hyperparameters() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!((cfg.retrieval.m, cfg.retrieval.k_ood, cfg.retrieval.k_id), (4, 5, 5));
        assert_eq!(cfg.run.mode, Mode::Odis);
        assert_eq!(cfg.run.workers, 1);
        assert_eq!(cfg.bm25, Bm25Params::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[retrieval]\nn = 3\n").is_err());
        assert!(RunConfig::parse("[run]\nmode = \"fancy\"\n").is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
            let toml = format!("[run]\nmode = \"{}\"\n", m.name());
            assert_eq!(RunConfig::parse(&toml).unwrap().run.mode, m);
        }
        assert!("odis2".parse::<Mode>().is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut cfg = RunConfig::parse("[data]\ntables = \"t.json\"\ntest = \"/abs/dev.json\"\n").unwrap();
        cfg.resolve_paths(Path::new("/cfg"));
        assert_eq!(cfg.data.tables, PathBuf::from("/cfg/t.json"));
        assert_eq!(cfg.data.test, PathBuf::from("/abs/dev.json"));
        assert_eq!(cfg.synthetic_pool_path(), PathBuf::from("/cfg/out/synthetic.jsonl"));
    }

    #[test]
    fn latency_percentiles() {
        let s = LatencyStats::from_samples(&[4.0, 1.0, 3.0, 2.0, 5.0]);
        assert_eq!((s.mean_ms, s.p50_ms, s.max_ms), (3.0, 3.0, 5.0));
        assert_eq!(LatencyStats::from_samples(&[]), LatencyStats::default());
    }

    #[test]
    fn zero_workers_is_a_config_error() {
        let mut cfg = RunConfig::default();
        cfg.run.workers = 0;
        assert!(cfg.validate().unwrap_err().is_config());
    }
}
