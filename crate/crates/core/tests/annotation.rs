mod support;

use std::collections::HashMap;

use proptest::prelude::*;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfsl_core::annotation::{
    collect_oracle_answers, logical_timestamp, oracle_answer, AmbiguityPolicy, AnswerLog,
    AnswerSource, OracleVerdict, TestAnswer, TripletTest,
};
use sfsl_core::data::SampleId;
use sfsl_core::hierarchy::{ConceptTree, NodeId, CIFAR100_TREE};
use support::BruteTree;

fn cifar() -> ConceptTree {
    ConceptTree::parse(CIFAR100_TREE).unwrap()
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

const PERMUTATIONS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

#[test]
fn oracle_agrees_with_brute_force_on_the_fixture() {
    let tree = cifar();
    let brute = BruteTree::new(&support::edges_from_tree(&tree));
    let names = leaves_as_samples(&tree);
    let leaves: Vec<String> = tree.leaves().map(|l| l.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..2000 {
        let pick: Vec<&String> = leaves.choose_multiple(&mut rng, 3).collect();
        let items = [pick[0].as_str(), pick[1].as_str(), pick[2].as_str()];
        let got = match oracle_answer(&triplet(items), &tree, &names).unwrap() {
            OracleVerdict::Chosen(i) => Some(i as usize),
            OracleVerdict::Ambiguous { .. } => None,
        };
        assert_eq!(got, brute.odd_one_out(items), "{items:?}");
    }
}

#[test]
fn oracle_is_permutation_equivariant() {
    let tree = cifar();
    let names = leaves_as_samples(&tree);
    let leaves: Vec<String> = tree.leaves().map(|l| l.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    while checked < 500 {
        let pick: Vec<&String> = leaves.choose_multiple(&mut rng, 3).collect();
        let items = [pick[0].as_str(), pick[1].as_str(), pick[2].as_str()];
        let OracleVerdict::Chosen(c) = oracle_answer(&triplet(items), &tree, &names).unwrap() else {
            continue;
        };
        let odd = items[c as usize];
        for p in PERMUTATIONS {
            let permuted = [items[p[0]], items[p[1]], items[p[2]]];
            match oracle_answer(&triplet(permuted), &tree, &names).unwrap() {
                OracleVerdict::Chosen(i) => assert_eq!(permuted[i as usize], odd),
                other => panic!("{permuted:?} became {other:?}"),
            }
        }
        checked += 1;
    }
}

#[test]
fn collected_answers_are_unambiguous_and_distinct() {
    let tree = cifar();
    let names = leaves_as_samples(&tree);
    let pool: Vec<SampleId> = names.keys().cloned().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let answers =
        collect_oracle_answers(&pool, 300, &tree, &names, AmbiguityPolicy::Discard, &mut rng).unwrap();
    assert_eq!(answers.len(), 300);
    let brute = BruteTree::new(&support::edges_from_tree(&tree));
    for a in &answers {
        let items = [a.items[0].as_str(), a.items[1].as_str(), a.items[2].as_str()];
        assert_eq!(brute.odd_one_out(items), Some(a.chosen as usize));
        assert_eq!(a.source, AnswerSource::Oracle);
    }
    let mut ids: Vec<&str> = answers.iter().map(|a| a.test_id.as_str()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 300);
}

fn answer(n: usize, chosen: u8) -> TestAnswer {
    let t = TripletTest {
        test_id: format!("t{n:06}"),
        items: [format!("a{n}"), format!("b{n}"), format!("c{n}")].map(SampleId::new),
    };
    TestAnswer::new(&t, chosen, AnswerSource::Human, logical_timestamp(n as u64))
}

#[test]
fn log_survives_reopen_and_torn_tail() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("answers.jsonl");
    {
        let mut log = AnswerLog::open(&path).unwrap();
        for n in 0..5 {
            log.append(answer(n, (n % 3) as u8)).unwrap();
        }
    }
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{\"test_id\":\"t0000");
    std::fs::write(&path, &text).unwrap();

    let mut log = AnswerLog::open(&path).unwrap();
    assert_eq!(log.len(), 5);
    log.append(answer(5, 1)).unwrap();
    drop(log);
    let log = AnswerLog::open(&path).unwrap();
    assert_eq!(log.len(), 6);
    assert_eq!(log.get("t000005").unwrap().chosen, 1);
    assert_eq!(std::fs::read_to_string(&path).unwrap(), log.to_jsonl());
}

#[test]
fn log_rejects_conflicting_duplicate() {
    let mut log = AnswerLog::in_memory();
    log.append(answer(1, 0)).unwrap();
    assert!(log.append(answer(1, 2)).is_err());
    assert_eq!(log.len(), 1);
}

proptest! {
    #[test]
    fn jsonl_round_trip(choices in proptest::collection::vec(0u8..3, 0..40)) {
        let answers: Vec<TestAnswer> =
            choices.iter().enumerate().map(|(n, &c)| answer(n, c)).collect();
        let text = sfsl_core::annotation::to_jsonl(&answers);
        prop_assert_eq!(AnswerLog::parse(&text).unwrap(), answers);
    }

    #[test]
    fn oracle_matches_brute_force_on_random_trees(seed in any::<u64>(), n in 4usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let edges = support::random_edges(&mut rng, n);
        let tree = support::build_tree(&edges);
        let brute = BruteTree::new(&edges);
        let leaves = brute.leaves();
        prop_assume!(leaves.len() >= 3);
        let names: HashMap<SampleId, NodeId> = leaves
            .iter()
            .map(|l| (SampleId::new(l.as_str()), NodeId::new(l.as_str())))
            .collect();
        for _ in 0..20 {
            let pick: Vec<&String> = leaves.choose_multiple(&mut rng, 3).collect();
            let items = [pick[0].as_str(), pick[1].as_str(), pick[2].as_str()];
            let got = match oracle_answer(&triplet(items), &tree, &names).unwrap() {
                OracleVerdict::Chosen(i) => Some(i as usize),
                OracleVerdict::Ambiguous { .. } => None,
            };
            prop_assert_eq!(got, brute.odd_one_out(items));
        }
    }

    #[test]
    fn own_similarity_sum_rule_agrees_on_equal_depth_trees(seed in any::<u64>(), depth in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let edges = layered_edges(&mut rng, depth);
        let tree = support::build_tree(&edges);
        let leaves: Vec<String> = tree.leaves().map(|l| l.to_string()).collect();
        prop_assume!(leaves.len() >= 3);
        let names: HashMap<SampleId, NodeId> = leaves
            .iter()
            .map(|l| (SampleId::new(l.as_str()), NodeId::new(l.as_str())))
            .collect();
        for _ in 0..20 {
            let pick: Vec<&String> = leaves.choose_multiple(&mut rng, 3).collect();
            let items = [pick[0].as_str(), pick[1].as_str(), pick[2].as_str()];
            let OracleVerdict::Chosen(c) = oracle_answer(&triplet(items), &tree, &names).unwrap() else {
                continue;
            };
            let own = |i: usize| {
                (0..3)
                    .filter(|&j| j != i)
                    .map(|j| tree.semantic_similarity(items[i], items[j]).unwrap())
                    .sum::<num_rational::Ratio<u32>>()
            };
            let sums = [own(0), own(1), own(2)];
            let min = *sums.iter().min().unwrap();
            prop_assert_eq!(sums.iter().filter(|&&s| s == min).count(), 1);
            prop_assert_eq!(sums[c as usize], min);
        }
    }
}

/// A tree whose leaves all sit `depth` levels below the root.
fn layered_edges(rng: &mut ChaCha8Rng, depth: usize) -> Vec<(String, Option<String>)> {
    use rand::Rng;
    let mut edges = vec![("r".to_owned(), None)];
    let mut layer = vec!["r".to_owned()];
    for d in 0..depth {
        let mut next = Vec::new();
        for p in &layer {
            for k in 0..rng.random_range(1..=4) {
                let id = format!("{p}.{d}{k}");
                edges.push((id.clone(), Some(p.clone())));
                next.push(id);
            }
        }
        layer = next;
    }
    edges
}
