//! Acceptance suite. Each criterion prints one PASS or FAIL line; the
//! process exits non-zero if any criterion fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::HashMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use num_rational::Ratio;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfsl_core::annotation::{oracle_answer, OracleVerdict, TripletTest};
use sfsl_core::config::RunConfig;
use sfsl_core::data::{generate_synthetic, FeatureStore, LeafLookup, SampleId, Split, SynthConfig};
use sfsl_core::embedding::{
    dual_triplet_loss, ntxent_loss, ContrastiveBatch, EmbeddedTriplet, NormalizedFeatures,
};
use sfsl_core::episodes::{
    infer_nn, infer_prototype, sample_typical_task, score, EmbeddingTable, Outcome,
};
use sfsl_core::hierarchy::{ConceptTree, NodeId, CIFAR100_TREE};
use sfsl_core::pipeline::{run_desk, ANSWERS_FILE, CHECKPOINT_FILE, REPORT_FILE, TABLE_FILE};
use support::{brute_prototype, build_tree, random_edges, BruteTree};

type Verdict = Result<String, String>;
type Criterion = fn() -> Verdict;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn cifar() -> ConceptTree {
    ConceptTree::parse(CIFAR100_TREE).expect("fixture parses")
}

fn leaves_as_samples(tree: &ConceptTree) -> HashMap<SampleId, NodeId> {
    tree.leaves()
        .map(|l| (SampleId::new(l.as_str()), l.clone()))
        .collect()
}

fn triplet(items: [&str; 3]) -> TripletTest {
    TripletTest {
        test_id: "t".into(),
        items: items.map(SampleId::from),
    }
}

fn wolf_lion_fixture() -> Verdict {
    let tree = cifar();
    check(tree.layer_sizes() == vec![1, 2, 10, 100], || {
        format!("layer sizes {:?}", tree.layer_sizes())
    })?;
    let d = tree.semantic_distance("wolf", "lion").map_err(|e| e.to_string())?;
    let s = tree.semantic_similarity("wolf", "lion").map_err(|e| e.to_string())?;
    check(d == Ratio::new(1, 3) && s == Ratio::new(2, 3), || {
        format!("D = {d}, S = {s}")
    })?;
    Ok(format!("D = {d}, S = {s}"))
}

fn random_tree_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut pairs = 0usize;
    for t in 0..1000 {
        let n = rng.random_range(2..=200);
        let edges = random_edges(&mut rng, n);
        let tree = build_tree(&edges);
        let brute = BruteTree::new(&edges);
        check(tree.tree_height() == brute.height(&brute.root), || {
            format!("tree {t}: height {} vs {}", tree.tree_height(), brute.height(&brute.root))
        })?;
        let leaves = brute.leaves();
        for _ in 0..20 {
            let a = leaves.choose(&mut rng).unwrap();
            let b = leaves.choose(&mut rng).unwrap();
            let lcs = tree.lcs(a, b).map_err(|e| e.to_string())?.as_str().to_owned();
            let want = brute.lcs(a, b);
            check(lcs == want, || format!("tree {t}: lcs({a},{b}) {lcs} vs {want}"))?;
            let h = tree.height(&lcs).map_err(|e| e.to_string())?;
            check(h == brute.height(&want), || format!("tree {t}: height of {lcs}"))?;
            let d = tree.semantic_distance(a, b).map_err(|e| e.to_string())?;
            check(d == brute.distance(a, b), || {
                format!("tree {t}: distance({a},{b}) {d} vs {}", brute.distance(a, b))
            })?;
            pairs += 1;
        }
    }
    Ok(format!("1000 trees, {pairs} leaf pairs"))
}

const PERMUTATIONS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

fn oracle_behaviour() -> Verdict {
    let tree = cifar();
    let names = leaves_as_samples(&tree);
    let odd = |items: [&str; 3]| -> Result<Option<String>, String> {
        match oracle_answer(&triplet(items), &tree, &names).map_err(|e| e.to_string())? {
            OracleVerdict::Chosen(i) => Ok(Some(items[i as usize].to_owned())),
            OracleVerdict::Ambiguous { .. } => Ok(None),
        }
    };
    for (items, want) in [
        (["tiger", "lion", "butterfly"], "butterfly"),
        (["wolf", "pickup_truck", "streetcar"], "wolf"),
    ] {
        let got = odd(items)?;
        check(got.as_deref() == Some(want), || format!("{items:?} gave {got:?}"))?;
    }

    let leaves: Vec<String> = tree.leaves().map(|l| l.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    while checked < 500 {
        let pick: Vec<&String> = leaves.choose_multiple(&mut rng, 3).collect();
        let items = [pick[0].as_str(), pick[1].as_str(), pick[2].as_str()];
        let Some(base) = odd(items)? else { continue };
        for p in PERMUTATIONS {
            let permuted = [items[p[0]], items[p[1]], items[p[2]]];
            let got = odd(permuted)?;
            check(got.as_deref() == Some(base.as_str()), || {
                format!("{permuted:?} gave {got:?}, expected {base}")
            })?;
        }
        checked += 1;
    }
    Ok("fixture cases hold, 500 triplets x 6 orderings".into())
}

fn gradient_checks() -> Verdict {
    let mut worst = (0.0f64, 0.0f64);
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = support::triplet_gradient_error(&mut rng, 20);
        check(e < 1e-4, || format!("dual triplet seed {seed}: {e:e}"))?;
        worst.0 = worst.0.max(e);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let e = support::ntxent_gradient_error(&mut rng, 20);
        check(e < 1e-4, || format!("nt-xent seed {seed}: {e:e}"))?;
        worst.1 = worst.1.max(e);
    }
    Ok(format!(
        "10 seeds x 20 params, worst relative error triplet {:.1e}, nt-xent {:.1e}",
        worst.0, worst.1
    ))
}

fn loss_point_values() -> Verdict {
    let e1 = [1.0, 0.0, 0.0];
    let e2 = [0.0, 1.0, 0.0];
    let neg_e1 = [-1.0, 0.0, 0.0];
    let trip = |n: &[f64], p1: &[f64], p2: &[f64]| -> Result<f64, String> {
        let t = EmbeddedTriplet {
            negative: n,
            positive1: p1,
            positive2: p2,
        };
        dual_triplet_loss(&[t], 0.4)
            .map(|(l, _)| l)
            .map_err(|e| e.to_string())
    };
    let nt = |v: Vec<[f64; 3]>, tau: f64| -> Result<f64, String> {
        let b = ContrastiveBatch::consecutive_pairs(v.into_iter().map(|x| x.to_vec()).collect(), tau);
        ntxent_loss(&b).map(|(l, _)| l).map_err(|e| e.to_string())
    };
    let cases = [
        ("coincident", trip(&e1, &e1, &e1)?, 0.8),
        ("separated", trip(&e2, &e1, &e1)?, 0.0),
        ("half-active", trip(&neg_e1, &e1, &e2)?, 0.4),
        ("nt-xent one pair", nt(vec![e1, e2], 0.5)?, 0.0),
        (
            "nt-xent two orthogonal pairs",
            nt(vec![e1, e1, e2, e2], 1.0)?,
            4.0 * (1.0 + 2.0 / std::f64::consts::E).ln(),
        ),
    ];
    for (name, got, want) in cases {
        check((got - want).abs() < 1e-9, || format!("{name}: {got} vs {want}"))?;
    }
    Ok("5 point values within 1e-9".into())
}

fn synthetic_gain() -> Verdict {
    let mut gains = Vec::new();
    let mut detail = Vec::new();
    for seed in 0..5u64 {
        let mut cfg = RunConfig::default();
        cfg.set("seed", &seed.to_string()).unwrap();
        check(cfg.synth.leaf_count() == 100, || "default tree is not 100 leaves".into())?;
        let run = run_desk(&cfg).map_err(|e| e.to_string())?;
        let base_leaves = run.store.leaves_in(Split::Base).len();
        let novel_leaves = run.store.leaves_in(Split::Novel).len();
        check(base_leaves >= 40 && novel_leaves >= 20, || {
            format!("{base_leaves} base / {novel_leaves} novel leaves")
        })?;
        check(run.answers.len() == 1000, || format!("{} answers", run.answers.len()))?;
        let rows = &run.report.rows;
        check(
            rows[0].method == "untuned-features" && rows[1].method == "srn",
            || "unexpected report rows".into(),
        )?;
        check(rows[1].semantic.episodes == 2000, || "episode count".into())?;
        let base = rows[0].semantic.semantic_accuracy();
        let srn = rows[1].semantic.semantic_accuracy();
        gains.push(srn - base);
        detail.push(format!("{:.1}->{:.1}", 100.0 * base, 100.0 * srn));
    }
    let mean = 100.0 * gains.iter().sum::<f64>() / gains.len() as f64;
    let msg = format!("mean gain {mean:.2} points ({})", detail.join(", "));
    check(mean >= 10.0, || msg.clone())?;
    Ok(msg)
}

fn special_case_equivalence() -> Verdict {
    let cfg = SynthConfig {
        seed: 7,
        ..SynthConfig::default()
    };
    let (tree, store) = generate_synthetic(&cfg).map_err(|e| e.to_string())?;
    let table = EmbeddingTable::build(&store, &NormalizedFeatures, Some(Split::Novel))
        .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut outcomes = Vec::new();
    for i in 0..4000 {
        let ep = sample_typical_task(&store, 5, 1, &mut rng).map_err(|e| e.to_string())?;
        let q = store.leaf_of(&ep.query).unwrap();
        let present = ep.support.iter().filter(|s| store.leaf_of(s).unwrap() == q).count();
        check(present == 1, || format!("query leaf appears {present} times"))?;
        let chosen = if i % 2 == 0 {
            infer_nn(&ep, &table).map_err(|e| e.to_string())?.index
        } else {
            rng.random_range(0..5)
        };
        outcomes.push(Outcome {
            episode: ep,
            chosen,
            tied: false,
        });
    }
    let s = score(&outcomes, &tree, &store).map_err(|e| e.to_string())?;
    check(s.semantic_correct == s.typical_correct, || {
        format!("semantic {} vs typical {}", s.semantic_correct, s.typical_correct)
    })?;
    Ok(format!(
        "4000 episodes, {} correct under both",
        s.typical_correct
    ))
}

fn reproduce_twice() -> Verdict {
    let bin = env!("CARGO_BIN_EXE_sfsl");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let out = Command::new(bin)
            .args(["reproduce-desk", "--seed", "11", "--out", "run"])
            .current_dir(d.path())
            .output()
            .map_err(|e| e.to_string())?;
        check(out.status.success(), || {
            format!("exit {:?}: {}", out.status, String::from_utf8_lossy(&out.stderr))
        })?;
    }
    let read = |root: &Path, f: &str| fs::read(root.join("run").join(f)).map_err(|e| e.to_string());
    for f in [ANSWERS_FILE, CHECKPOINT_FILE, REPORT_FILE, TABLE_FILE] {
        let a = read(dirs[0].path(), f)?;
        let b = read(dirs[1].path(), f)?;
        check(!a.is_empty() && a == b, || format!("{f} differs"))?;
    }
    Ok("answer log, checkpoint and reports byte-identical".into())
}

fn prototype_oracle() -> Verdict {
    let cfg = SynthConfig {
        seed: 5,
        ..SynthConfig::default()
    };
    let (_, store) = generate_synthetic(&cfg).map_err(|e| e.to_string())?;
    let table = EmbeddingTable::build(&store, &NormalizedFeatures, Some(Split::Novel))
        .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut one_shot = 0;
    for i in 0..1000 {
        let k = 1 + i % 3;
        let ep = sample_typical_task(&store, 5, k, &mut rng).map_err(|e| e.to_string())?;
        let (order, classes) = group_by_leaf(&ep.support, &store, &table);
        let want = brute_prototype(&classes, table.get(&ep.query).unwrap());
        let got = infer_prototype(&ep, &table, &store).map_err(|e| e.to_string())?;
        check(got.class_index == want && got.leaf == order[want], || {
            format!("episode {i}: class {} vs {want}", got.class_index)
        })?;
        if k == 1 {
            let nn = infer_nn(&ep, &table).map_err(|e| e.to_string())?.index;
            check(got.support_index == nn, || format!("episode {i}: K=1 differs from NN"))?;
            one_shot += 1;
        }
    }
    Ok(format!("1000 episodes, {one_shot} at K=1 equal to NN"))
}

fn group_by_leaf(
    support: &[SampleId],
    store: &FeatureStore,
    table: &EmbeddingTable,
) -> (Vec<NodeId>, Vec<Vec<Vec<f64>>>) {
    let mut order: Vec<NodeId> = Vec::new();
    let mut classes: Vec<Vec<Vec<f64>>> = Vec::new();
    for s in support {
        let leaf = store.leaf_of(s).unwrap();
        let c = match order.iter().position(|l| l == leaf) {
            Some(c) => c,
            None => {
                order.push(leaf.clone());
                classes.push(Vec::new());
                order.len() - 1
            }
        };
        classes[c].push(table.get(s).unwrap().to_vec());
    }
    (order, classes)
}

fn main() {
    let criteria: [(&str, Criterion); 9] = [
        ("semantic metric fixture", wolf_lion_fixture),
        ("lcs/height/distance oracle", random_tree_oracle),
        ("3afc oracle behaviour", oracle_behaviour),
        ("gradient checks", gradient_checks),
        ("loss point values", loss_point_values),
        ("synthetic semantic gain >= 10 points", synthetic_gain),
        ("semantic == typical on typical episodes", special_case_equivalence),
        ("reproduce-desk determinism", reproduce_twice),
        ("prototype oracle", prototype_oracle),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
