//! Property tests for invariants that hold across modules.

use drokit::curriculum::{bandpass_filter, select_round, CurriculumConfig, InstanceRecord};
use drokit::engine::{execute, Database, ExecOutcome};
use drokit::gspo::{group_advantages, seq_importance_ratio, Trajectory};
use drokit::mql::{parse_pipeline, Document, Literal, Pipeline, Stage};
use drokit::verdict::{fuzzy_match, ops_score, overlong_penalty, RewardConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scalar() -> impl Strategy<Value = Literal> {
    prop_oneof![
        Just(Literal::Null),
        any::<bool>().prop_map(Literal::Bool),
        (-1000i64..1000).prop_map(Literal::Int),
        (-1e6f64..1e6).prop_map(Literal::Float),
        "[a-zA-Z0-9 '\"\\\\.$]{0,8}".prop_map(Literal::String),
    ]
}

fn literal() -> impl Strategy<Value = Literal> {
    scalar().prop_recursive(3, 24, 4, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..4).prop_map(Literal::Array),
            prop::collection::vec(("[a-z_][a-z0-9_.]{0,5}", inner), 0..4).prop_map(|kvs| {
                let mut d = Document::new();
                for (k, v) in kvs {
                    d.insert(k, v);
                }
                Literal::Document(d)
            }),
        ]
    })
}

fn row() -> impl Strategy<Value = Document> {
    (0i64..5, prop::option::of(0i64..4), "[xyz]").prop_map(|(a, b, s)| {
        let mut d = Document::new();
        d.insert("a".into(), Literal::Int(a));
        if let Some(b) = b {
            d.insert("b".into(), Literal::Int(b));
        }
        d.insert("s".into(), Literal::String(s));
        d
    })
}

fn db_with(rows: Vec<Document>) -> Database {
    Database::new().load_collection("t", rows).unwrap()
}

fn run(db: &Database, text: &str) -> Vec<Document> {
    match execute(&parse_pipeline(text).unwrap(), db) {
        ExecOutcome::Ok(rows) => rows,
        other => panic!("{text}: {other:?}"),
    }
}

proptest! {
    #[test]
    fn render_then_parse_is_identity(coll in "[a-z][a-z0-9_]{0,6}", bodies in prop::collection::vec(literal(), 0..4)) {
        let stages = bodies.into_iter().map(|b| Stage::new("$match", b)).collect();
        let p = Pipeline::new(coll, stages);
        prop_assert_eq!(parse_pipeline(&p.render()).unwrap(), p);
    }

    #[test]
    fn parser_never_panics(text in "\\PC{0,64}") {
        let _ = parse_pipeline(&text);
    }

    #[test]
    fn rows_fuzzy_match_themselves_in_any_order(rows in prop::collection::vec(row(), 0..12), seed in any::<u64>()) {
        prop_assert!(fuzzy_match(&rows, &rows, true));
        let mut shuffled = rows.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(fuzzy_match(&shuffled, &rows, false));
    }

    #[test]
    fn fewer_rows_never_match(rows in prop::collection::vec(row(), 1..12)) {
        prop_assert!(!fuzzy_match(&rows[1..], &rows, false));
    }

    #[test]
    fn ops_stays_in_unit_interval(se in 0.0f64..=1.0, neo in 0.0f64..=1.0, ro in 0.0f64..=1.0, cof in 0.0f64..=1.0) {
        let v = ops_score(se, neo, ro, cof);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
    }

    #[test]
    fn overlong_penalty_is_bounded_and_non_increasing(len in 0usize..10_000) {
        let cfg = RewardConfig::default();
        let p = overlong_penalty(len, &cfg);
        prop_assert!(p <= 0.0 && p >= -cfg.lambda);
        prop_assert!(overlong_penalty(len + 1, &cfg) <= p);
    }

    #[test]
    fn importance_ratio_is_positive(new in prop::collection::vec(-5.0f64..-1.0, 1..8), shift in -1.0f64..1.0) {
        let old: Vec<f64> = new.iter().map(|x| x + shift).collect();
        let t = Trajectory { token_logps_new: new.clone(), token_logps_old: old, reward: 0.0 };
        let s = seq_importance_ratio(&t).unwrap();
        prop_assert!(s > 0.0);
        prop_assert!((s.ln() + shift).abs() < 1e-9);
    }

    #[test]
    fn advantages_are_centered(rewards in prop::collection::vec(-1.0f64..1.0, 2..10)) {
        let adv = group_advantages(&rewards).unwrap();
        let mean: f64 = adv.iter().sum::<f64>() / adv.len() as f64;
        prop_assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn limit_returns_a_prefix(rows in prop::collection::vec(row(), 0..20), n in 1usize..25) {
        let db = db_with(rows.clone());
        let out = run(&db, &format!("db.t.aggregate([{{$limit:{n}}}])"));
        prop_assert_eq!(&out[..], &rows[..n.min(rows.len())]);
    }

    #[test]
    fn match_keeps_a_subsequence(rows in prop::collection::vec(row(), 0..20), a in 0i64..5) {
        let db = db_with(rows.clone());
        let out = run(&db, &format!("db.t.aggregate([{{$match:{{a:{a}}}}}])"));
        let expected: Vec<Document> = rows.into_iter().filter(|r| r.get("a") == Some(&Literal::Int(a))).collect();
        prop_assert_eq!(out, expected);
    }

    #[test]
    fn group_counts_sum_to_input(rows in prop::collection::vec(row(), 0..20)) {
        let db = db_with(rows.clone());
        let out = run(&db, "db.t.aggregate([{$group:{_id:'$s',n:{$sum:1}}}])");
        let total: i64 = out.iter().map(|d| match d.get("n") { Some(Literal::Int(n)) => *n, _ => 0 }).sum();
        prop_assert_eq!(total as usize, rows.len());
    }

    #[test]
    fn sort_is_a_permutation_ordered_by_key(rows in prop::collection::vec(row(), 0..20)) {
        let db = db_with(rows.clone());
        let out = run(&db, "db.t.aggregate([{$sort:{a:1}}])");
        prop_assert_eq!(out.len(), rows.len());
        let keys: Vec<i64> = out.iter().map(|d| match d.get("a") { Some(Literal::Int(a)) => *a, _ => unreachable!() }).collect();
        prop_assert!(keys.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn selection_is_disjoint_and_sized(diffs in prop::collection::vec(0u32..=9, 1..40), round in 1u32..=3, seed in any::<u64>()) {
        let cfg = CurriculumConfig::default();
        let stub = parse_pipeline("db.c.aggregate([{$limit:1}])").unwrap();
        let pool: Vec<InstanceRecord> = diffs
            .iter()
            .enumerate()
            .map(|(i, d)| InstanceRecord { difficulty: Some(*d), ..InstanceRecord::new(format!("i{i}"), "q", stub.clone()) })
            .collect();
        let mid = bandpass_filter(&pool, &cfg).unwrap();
        prop_assert!(mid.iter().all(|r| (2..=7).contains(&r.difficulty.unwrap())));
        let n = pool.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (selected, rest) = select_round(pool, &mid, cfg.rho(round), round, &mut rng).unwrap();
        prop_assert_eq!(selected.len() + rest.len(), n);
        prop_assert_eq!(selected.len(), (cfg.rho(round) * mid.len() as f64 - 1e-9).ceil() as usize);
        prop_assert!(selected.iter().all(|s| !rest.iter().any(|r| r.id == s.id)));
    }
}
