//! Checks the bundled toy database, dataset and mock fixtures.
//!
//! Fixtures and golden prompts are derived from the dataset. Run with
//! `DROKIT_BLESS=1` to rewrite them after a prompt or dataset change.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use drokit::engine::{execute, ExecOutcome};
use drokit::evidence::ContextFlags;
use drokit::generator::{build_refined_prompt, parse_response, prompt_hash, MockGenerator, Prompt, DEFAULT_FIXTURE};
use drokit::orchestrator::{bundled_assets, load_instances, RunConfig, Workspace};
use drokit::schema::Annotations;
use regex::Regex;

fn wrap(reasoning: &str, mql: &str) -> String {
    format!("<think>{reasoning}</think>\n```javascript\n{mql}\n```")
}

fn swap_case(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_uppercase() {
                c.to_lowercase().next().unwrap_or(c)
            } else {
                c.to_uppercase().next().unwrap_or(c)
            }
        })
        .collect()
}

/// Reference plus three broken variants: a hallucinated field name, a
/// case-flipped value and a missing closing parenthesis.
fn distractors(mql: &str) -> [String; 3] {
    let eq = Regex::new(r"([{,])('?)([A-Za-z_][\w.]*)('?):'([^']+)'").unwrap();
    let caps = eq.captures(mql).expect("reference has a string equality");
    let whole = caps.get(0).unwrap();
    let (open, q, key, value) = (&caps[1], &caps[2], &caps[3], &caps[5]);
    let halluc = format!(
        "{}{open}{q}{key}_name{q}:'{value}'{}",
        &mql[..whole.start()],
        &mql[whole.end()..]
    );
    let case = format!(
        "{}{open}{q}{key}{q}:'{}'{}",
        &mql[..whole.start()],
        swap_case(value),
        &mql[whole.end()..]
    );
    let syntax = mql.strip_suffix(')').expect("reference ends with )").to_string();
    [halluc, case, syntax]
}

/// Responses used by `synth` for prompts without their own fixture.
const SYNTH_RESPONSES: &[(&str, &str)] = &[
    ("List the names of users who live in Oslo.", "db.users.aggregate([{$match:{city:'Oslo'}},{$project:{_id:0,name:1}}])"),
    ("How many users are in the gold tier?", "db.users.aggregate([{$match:{tier:'gold'}},{$count:'n'}])"),
    ("List users from Rome older than 30 with their age.", "db.users.aggregate([{$match:{city:'Rome',age:{$gt:30}}},{$project:{_id:0,name:1,age:1}}])"),
    ("How many gold tier users live in each city?", "db.users.aggregate([{$match:{tier:'gold'}},{$group:{_id:'$city',n:{$sum:1}}},{$sort:{_id:1}}])"),
    ("Which products belong to the Books category?", "db.products.aggregate([{$match:{category:'Books'}},{$project:{_id:0,name:1}}])"),
    ("What is the average price of Electronics products?", "db.products.aggregate([{$match:{category:'Electronics'}},{$group:{_id:null,avg:{$avg:'$price'}}}])"),
    ("What are the three most expensive Toys by price?", "db.products.aggregate([{$match:{category:'Toys'}},{$sort:{price:-1}},{$limit:3},{$project:{_id:0,name:1}}])"),
    ("How many orders have the shipped status?", "db.orders.aggregate([{$match:{status:'shipped'}},{$count:'n'}])"),
    ("What is the total revenue per sales channel?", "db.orders.aggregate([{$group:{_id:'$channel',revenue:{$sum:'$total'}}},{$sort:{_id:1}}])"),
    ("How many units of each SKU were ordered in total?", "db.orders.aggregate([{$unwind:'$items'},{$group:{_id:'$items.sku',units:{$sum:'$items.qty'}}},{$sort:{_id:1}}])"),
    ("List users with the nonexistent tier platinum.", "db.users.aggregate([{$match:{tier:'platinum'}},{$project:{_id:0,name:1}}])"),
    ("Count the orders.", "db.orders.aggregate([{$count:'n'}"),
];

struct Derived {
    scripts: BTreeMap<String, Vec<String>>,
    golden: BTreeMap<String, String>,
}

fn render_prompt(p: &Prompt) -> String {
    format!("=== system ===\n{}\n=== user ===\n{}\n", p.system, p.user)
}

fn derive() -> Derived {
    let cfg = RunConfig::default();
    let ws = Workspace::load(&cfg).unwrap();
    let instances = load_instances(&cfg.dataset).unwrap();
    let raw: Vec<serde_json::Value> = fs::read_to_string(&cfg.dataset)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let mut scripts = BTreeMap::new();
    let mut golden = BTreeMap::new();
    for (inst, row) in instances.iter().zip(&raw) {
        let reference = row["mql_text"].as_str().unwrap();
        let [halluc, case, syntax] = distractors(reference);
        let draft_prompt = ws.draft_prompt(inst).unwrap();
        let drafts = vec![
            wrap("Guessing the field name.", &halluc),
            wrap("Copying the value as written.", &case),
            wrap("Writing the pipeline.", &syntax),
            wrap("Filtering, then shaping the output.", reference),
        ];
        for draft in &drafts {
            let parsed = parse_response(draft).ok();
            let ctx = ws
                .context(
                    &inst.question,
                    &inst.reference.collection,
                    parsed.as_ref(),
                    ContextFlags::FULL,
                )
                .unwrap();
            let refined = build_refined_prompt(&ctx, &ws.prompt);
            let responses = vec![
                wrap("The evidence confirms the field and value.", reference),
                wrap("Using the linked schema.", reference),
                wrap("Keeping the draft value.", &case),
                wrap("Keeping the draft field.", &halluc),
            ];
            scripts.insert(prompt_hash(&refined.system, &refined.user), responses);
            if inst.id == "q01" && parsed.is_some() && draft == &drafts[0] {
                golden.insert("q01.refined.txt".to_string(), render_prompt(&refined));
            }
        }
        if inst.id == "q01" {
            golden.insert("q01.draft.txt".to_string(), render_prompt(&draft_prompt));
        }
        scripts.insert(prompt_hash(&draft_prompt.system, &draft_prompt.user), drafts);
    }
    scripts.insert(
        DEFAULT_FIXTURE.to_string(),
        SYNTH_RESPONSES
            .iter()
            .map(|(q, m)| {
                format!("<think>Pick a filter from the samples.</think>\nQuestion: {q}\n```javascript\n{m}\n```")
            })
            .collect(),
    );
    Derived { scripts, golden }
}

fn blessing() -> bool {
    std::env::var("DROKIT_BLESS").is_ok_and(|v| v == "1")
}

#[test]
fn fixtures_and_golden_prompts_are_current() {
    let assets = bundled_assets();
    let derived = derive();
    let fixtures = assets.join("fixtures");
    let golden_dir = assets.join("golden");
    if blessing() {
        if fixtures.exists() {
            fs::remove_dir_all(&fixtures).unwrap();
        }
        MockGenerator::write_dir(&fixtures, &derived.scripts).unwrap();
        fs::create_dir_all(&golden_dir).unwrap();
        for (name, text) in &derived.golden {
            fs::write(golden_dir.join(name), text).unwrap();
        }
        return;
    }
    let mut on_disk = BTreeMap::new();
    for entry in fs::read_dir(&fixtures).expect("fixtures exist; run with DROKIT_BLESS=1") {
        let path = entry.unwrap().path();
        let key = path.file_stem().unwrap().to_str().unwrap().to_string();
        let v: Vec<String> = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        on_disk.insert(key, v);
    }
    assert_eq!(
        on_disk, derived.scripts,
        "fixtures are stale; rerun with DROKIT_BLESS=1"
    );
    for (name, text) in &derived.golden {
        let disk = fs::read_to_string(golden_dir.join(name)).unwrap();
        assert_eq!(&disk, text, "golden prompt {name} changed");
    }
}

#[test]
fn distractors_differ_from_reference_and_each_other() {
    for line in fs::read_to_string(bundled_assets().join("dataset.jsonl"))
        .unwrap()
        .lines()
    {
        let row: serde_json::Value = serde_json::from_str(line).unwrap();
        let (id, text) = (row["id"].as_str().unwrap(), row["mql_text"].as_str().unwrap());
        let d = distractors(text);
        assert_ne!(d[0], text, "{id}");
        assert_ne!(d[1], text, "{id}");
        assert_ne!(d[0], d[1], "{id}");
        assert!(parse_response(&d[0]).is_ok());
        assert!(parse_response(&d[1]).is_ok());
        assert!(parse_response(&d[2]).is_err(), "{id}");
    }
}

#[test]
fn toy_database_is_small_and_references_execute() {
    let cfg = RunConfig::default();
    let ws = Workspace::load(&cfg).unwrap();
    assert_eq!(ws.db.collection_names().count(), 3);
    let docs: usize = ws
        .db
        .collection_names()
        .map(|c| ws.db.collection(c).unwrap().len())
        .sum();
    assert!(docs <= 60, "{docs} documents");
    let instances = load_instances(&cfg.dataset).unwrap();
    assert_eq!(instances.len(), 20);
    for inst in &instances {
        match execute(&inst.reference, &ws.db) {
            ExecOutcome::Ok(rows) => assert!(!rows.is_empty(), "{} returns no rows", inst.id),
            other => panic!("{}: {other:?}", inst.id),
        }
    }
}

#[test]
fn annotations_name_existing_fields() {
    let assets = bundled_assets();
    let ann = Annotations::load(&assets.join("annotations.json")).unwrap();
    let ws = Workspace::load(&RunConfig::default()).unwrap();
    for key in ann.0.keys() {
        let (coll, path) = key.split_once('.').unwrap_or((key, ""));
        let schema = ws.schema(coll).unwrap();
        if !path.is_empty() {
            assert!(schema.flatten().iter().any(|f| f.to_string() == path), "{key}");
        }
    }
}

#[test]
fn default_config_loads_bundled_fixtures() {
    let cfg = RunConfig::default();
    cfg.validate().unwrap();
    let mock = MockGenerator::load_dir(&cfg.generator.fixtures).unwrap();
    assert!(mock.has_script(DEFAULT_FIXTURE));
    let golden = Path::new(&bundled_assets()).join("golden").join("q01.draft.txt");
    assert!(golden.exists());
}
