use std::fs;
use std::path::{Path, PathBuf};

use odis_core::corpus::{database_path, load_schema_catalog, sample_content, DatabaseSchema};
use odis_core::prompt::{
    render_db_prompt, render_prompt, render_sql_to_nlq_prompt, Demo, DemonstrationPlan, OodBlock,
};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn golden(name: &str) -> String {
    fs::read_to_string(fixtures().join("prompts").join(name)).unwrap()
}

fn sampled(catalog: &str, db_id: &str) -> DatabaseSchema {
    let schemas = load_schema_catalog(&fixtures().join(catalog)).unwrap();
    let schema = schemas.into_iter().find(|s| s.db_id == db_id).unwrap();
    sample_content(&database_path(&fixtures().join("database"), db_id), &schema, 3).unwrap()
}

#[test]
fn concert_singer_database_prompt() {
    let schema = sampled("tables.json", "concert_singer");
    assert_eq!(render_db_prompt(&schema, false).unwrap(), golden("concert_singer_db.txt"));
}

#[test]
fn dorm_database_prompt() {
    let schema = sampled("tables.json", "dorm_1");
    assert_eq!(render_db_prompt(&schema, false).unwrap(), golden("dorm_1_db.txt"));
}

#[test]
fn kaggle_prompt_with_descriptions() {
    let schema = sampled("kaggle_tables.json", "student_math_score");
    assert_eq!(render_db_prompt(&schema, true).unwrap(), golden("student_math_score_db.txt"));
}

#[test]
fn zero_shot_prompt() {
    let schema = sampled("tables.json", "concert_singer");
    let plan = DemonstrationPlan::zero_shot(&schema, "Which year has most number of concerts?");
    assert_eq!(render_prompt(&plan, false).unwrap(), golden("zero_shot.txt"));
}

#[test]
fn in_domain_layout() {
    let schema = sampled("tables.json", "concert_singer");
    let plan = DemonstrationPlan {
        ood_blocks: vec![],
        id_pairs: vec![
            Demo::new(
                "what is the name and nation of the singer who have a song having 'Hey' in its name?",
                "select name, country from singer where song_name like 'Hey'",
            ),
            Demo::new(
                "How many concerts are there in year 2014 or 2015?",
                "select count(*) from concert where year = 2014 or year = 2015",
            ),
        ],
        test_schema: &schema,
        test_nlq: "Which year has most number of concerts?".into(),
    };
    assert_eq!(render_prompt(&plan, false).unwrap(), golden("in_domain.txt"));
}

#[test]
fn out_of_domain_layout() {
    let schema = sampled("tables.json", "concert_singer");
    let dorm = sampled("tables.json", "dorm_1");
    let plan = DemonstrationPlan {
        ood_blocks: vec![OodBlock {
            schema: &dorm,
            pairs: vec![
                Demo::new(
                    "Find the number of students in each major.",
                    "select count(*), major from student group by major",
                ),
                Demo::new(
                    "Find the total capacity of all dorms.",
                    "select sum(student_capacity) from dorm",
                ),
            ],
        }],
        id_pairs: vec![],
        test_schema: &schema,
        test_nlq: "Which year has most number of concerts?".into(),
    };
    let text = render_prompt(&plan, false).unwrap();
    assert_eq!(text, golden("out_of_domain.txt"));
    assert!(text.ends_with("\nselect"));
}

#[test]
fn sql_to_nlq_prompt() {
    let schema = sampled("tables.json", "concert_singer");
    let text = render_sql_to_nlq_prompt(
        &schema,
        "select count(*) from concert where year = 2014 or year = 2015",
        false,
    )
    .unwrap();
    assert_eq!(text, golden("sql_to_nlq.txt"));
}
