mod common;

use std::collections::BTreeSet;

use common::{generated_graph, oracle_all_defs, oracle_all_uses, oracle_edges, oracle_nodes, OracleSummary};
use tiertest::coverage::{coverage, feasible_pairs, CoverageSummary, Criterion};

const FAMILY: u64 = 300;

fn agree(seed: u64, criterion: Criterion, got: CoverageSummary, want: OracleSummary) {
    let uncovered: BTreeSet<_> = got.uncovered_items.iter().cloned().collect();
    assert_eq!(
        uncovered.len(),
        got.uncovered_items.len(),
        "graph {seed} {criterion:?}: repeated items"
    );
    assert_eq!(
        (got.covered, got.total, got.ratio, uncovered),
        (want.covered, want.total, want.ratio, want.uncovered),
        "graph {seed} {criterion:?}"
    );
}

#[test]
fn family_matches_brute_force() {
    let mut with_pairs = 0;
    let mut with_cycles = 0;
    for seed in 0..FAMILY {
        let gg = generated_graph(seed);
        let (g, t) = (&gg.graph, &gg.traces);
        assert!(g.nodes().len() <= 8);
        agree(
            seed,
            Criterion::NodeCoverage,
            coverage(g, t, Criterion::NodeCoverage).unwrap(),
            oracle_nodes(g, t),
        );
        agree(
            seed,
            Criterion::EdgeCoverage,
            coverage(g, t, Criterion::EdgeCoverage).unwrap(),
            oracle_edges(g, t),
        );
        agree(
            seed,
            Criterion::AllUses,
            coverage(g, t, Criterion::AllUses).unwrap(),
            oracle_all_uses(g, t),
        );
        agree(
            seed,
            Criterion::AllDefs,
            coverage(g, t, Criterion::AllDefs).unwrap(),
            oracle_all_defs(g, t),
        );
        if !feasible_pairs(g).is_empty() {
            with_pairs += 1;
        }
        if g.edges().iter().any(|(a, b)| b <= a) {
            with_cycles += 1;
        }
    }
    // The family is only useful if it exercises loops and dataflow.
    assert!(with_pairs > FAMILY / 2, "{with_pairs}");
    assert!(with_cycles > FAMILY / 4, "{with_cycles}");
}

#[test]
fn feasible_pairs_are_sorted_and_unique() {
    for seed in 0..FAMILY {
        let pairs = feasible_pairs(&generated_graph(seed).graph);
        assert!(pairs.windows(2).all(|w| w[0] < w[1]), "graph {seed}");
    }
}

#[test]
fn full_walk_set_covers_every_feasible_pair() {
    // Each feasible pair's witness path, prefixed by a path from entry,
    // must cover it.
    for seed in 0..FAMILY {
        let g = generated_graph(seed).graph;
        for p in feasible_pairs(&g) {
            let mut walk = if p.def == g.entry() {
                vec![p.def.clone()]
            } else {
                common::simple_paths(&g, g.entry(), &p.def).into_iter().next().unwrap()
            };
            let witness = common::simple_paths(&g, &p.def, &p.use_node)
                .into_iter()
                .find(|w| w[1..w.len() - 1].iter().all(|n| !g.defines(n, &p.var)))
                .unwrap();
            walk.extend(witness.into_iter().skip(1));
            let t = [tiertest::coverage::ExecutionTrace::new("w", walk)];
            let s = coverage(&g, &t, Criterion::AllUses).unwrap();
            assert!(
                !s.uncovered_items.iter().any(|i| matches!(i,
                    tiertest::coverage::CoverageItem::DefUse { var, def, r#use }
                        if *var == p.var && *def == p.def && *r#use == p.use_node)),
                "graph {seed} pair {p:?}"
            );
        }
    }
}
