//! Invariants of trees, housekeeping and the TV integrand, plus a replay of
//! the checked-in fuzz corpus through the parsers.

use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lagphylo::config::ExperimentConfig;
use lagphylo::diagnostics::tv_integrand;
use lagphylo::io::{read_records, read_samples, write_records};
use lagphylo::model::PatternData;
use lagphylo::tree::{housekeeping, parse_newick, random_tree, tree_equal, Tree};

fn tree(n: usize, seed: u64) -> Tree {
    let taxa = Arc::new((1..=n).map(|i| format!("t{i}")).collect::<Vec<_>>());
    random_tree(taxa, 100.0, &[], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn newick_round_trip(n in 2usize..14, seed in any::<u64>()) {
        let t = tree(n, seed);
        let text = t.to_newick();
        let back = parse_newick(&text).unwrap().with_taxa_order(t.taxa()).unwrap();
        prop_assert_eq!(back.splits(), t.splits());
        for v in 0..t.n_nodes() {
            let (a, b) = (t.age(v), back.age(back.mrca(&t.leafsets()[v], &back.leafsets())));
            prop_assert!((a - b).abs() <= 1e-9 * t.age(t.root()), "{} vs {}", a, b);
        }
        // Printing is a fixed point after one trip.
        prop_assert_eq!(parse_newick(&back.to_newick()).unwrap().to_newick(), back.to_newick());
    }

    #[test]
    fn housekeeping_keeps_the_tree_and_shares_common_clades(n in 3usize..12, sx in any::<u64>(), sy in any::<u64>()) {
        let (x, y) = (tree(n, sx), tree(n, sy));
        let (hy, perm) = housekeeping(&x, &y).unwrap();
        prop_assert!(tree_equal(&hy, &y));
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..y.n_nodes()).collect::<Vec<_>>());
        prop_assert!(perm[..n].iter().enumerate().all(|(i, &p)| i == p));
        let xsets = x.leafsets();
        let ysets = hy.leafsets();
        for v in hy.internal_nodes() {
            if let Some(u) = x.internal_nodes().find(|&u| xsets[u] == ysets[v]) {
                prop_assert_eq!(u, v);
            }
        }
        let (again, _) = housekeeping(&x, &hy).unwrap();
        prop_assert!(again.identical(&hy));
        let (self_hk, _) = housekeeping(&x, &x).unwrap();
        prop_assert!(self_hk.identical(&x));
    }

    #[test]
    fn swap_is_an_involution(n in 3usize..12, seed in any::<u64>(), i in 0usize..40, j in 0usize..40) {
        let t = tree(n, seed);
        let (i, j) = (i % t.n_nodes(), j % t.n_nodes());
        if let Ok(s) = t.apply_swap(i, j) {
            prop_assert!(s.validate().is_ok());
            let back = s.apply_swap(i, j).unwrap();
            prop_assert!(tree_equal(&back, &t));
        }
    }

    #[test]
    fn tv_integrand_is_monotone(tau in 0u64..100_000, lag in 1u64..5_000, s in 0u64..50_000) {
        prop_assume!(tau >= lag);
        let here = tv_integrand(tau, lag, s);
        prop_assert!(tv_integrand(tau, lag, s + 1) <= here);
        // Same excess over the lag, larger lag: never a larger bound.
        prop_assert!(tv_integrand(tau + 1, lag + 1, s) <= here);
        prop_assert_eq!(here == 0, tau - lag <= s);
    }

    #[test]
    fn parsers_never_panic(text in "\\PC{0,200}") {
        let _ = parse_newick(&text);
        let _ = PatternData::from_tsv(&text);
        let _ = ExperimentConfig::from_toml_str(&text);
        let _ = read_records(&text);
        let _ = read_samples(&text);
    }

    #[test]
    fn accepted_patterns_round_trip(rows in prop::collection::vec(prop::collection::vec(0u8..3, 3), 0..20)) {
        let sym = ['0', '1', '?'];
        let mut text = String::from("a\tb\tc\n");
        for r in &rows {
            let cells: Vec<String> = r.iter().map(|&k| sym[k as usize].to_string()).collect();
            text.push_str(&cells.join("\t"));
            text.push('\n');
        }
        let p = PatternData::from_tsv(&text).unwrap();
        prop_assert_eq!(PatternData::from_tsv(&p.to_tsv()).unwrap(), p);
    }
}

fn corpus(target: &str) -> Vec<(String, String)> {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(String, String)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read_to_string(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "empty corpus for {target}");
    out
}

/// The same checks the fuzz targets make, run on every seed.
#[test]
fn fuzz_corpus_replays() {
    for (name, text) in corpus("newick") {
        if let Ok(t) = parse_newick(&text) {
            parse_newick(&t.to_newick()).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
    for (_, text) in corpus("pattern_data") {
        if let Ok(p) = PatternData::from_tsv(&text) {
            assert_eq!(PatternData::from_tsv(&p.to_tsv()).unwrap(), p);
        }
    }
    for (_, text) in corpus("config") {
        let _ = ExperimentConfig::from_toml_str(&text);
    }
    for (_, text) in corpus("meeting_records") {
        if let Ok(recs) = read_records(&text) {
            assert_eq!(read_records(&write_records("fuzz", &recs)).unwrap().len(), recs.len());
        }
    }
    for (_, text) in corpus("samples") {
        let _ = read_samples(&text);
    }
    // Seeds named for valid inputs must be accepted.
    assert!(parse_newick(&corpus("newick").iter().find(|(n, _)| n == "five").unwrap().1).is_ok());
    assert!(ExperimentConfig::from_toml_str(&corpus("config").iter().find(|(n, _)| n == "smoke4").unwrap().1).is_ok());
    assert_eq!(read_samples(&corpus("samples").iter().find(|(n, _)| n == "smoke").unwrap().1).unwrap().len(), 4);
    assert_eq!(read_records(&corpus("meeting_records")[0].1).unwrap().len(), 3);
}
