//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use aspectfuse_core::distgen::generate_geometric_bench;
use aspectfuse_core::eval::{
    average_precision_at_k, fusion_diagnostics, recall_at_k, summarize, CellStage,
};
use aspectfuse_core::fusion::{
    aggregate_row, aspect_item_scores, borda_merge, late_fusion, round_robin_merge,
};
use aspectfuse_core::rerank::{repair_permutation, select_reviews, SelectStrategy};
use aspectfuse_core::{
    aspect_fusion, monolithic_lf, run_experiment, Aggregator, Clients, Corpus, DistributionKind,
    EmbeddingStore, ExperimentConfig, ExperimentReport, GeometricBenchConfig, Item,
    LengthCrossEncoder, Method, MockLlm, Probe, RerankMode, Review, ScoredList,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
/// AF(AMean) over Mono LF at K_R=1 under one-popular; smallest seed gap in
/// the oracle run was 0.554.
const POPULAR_MARGIN: f64 = 0.25;
const OVERLAP_TOLERANCE: f64 = 0.05;
const COLLAPSE_DROP: f64 = 0.15;
const MIN_COLLAPSE_CEILING: f64 = 0.1;
const CHAIN_RTOL: f64 = 1e-12;
const MARGIN_TOL: f64 = 1e-3;

type Outcome = Result<String, String>;

struct Suite {
    failed: usize,
}

impl Suite {
    fn check(&mut self, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        let elapsed = start.elapsed();
        let result = match (result, budget) {
            (Ok(d), Some(b)) if elapsed > b => Err(format!("{d}; over the {:.0?} budget", b)),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("PASS  {name}  [{detail}; {:.2}s]", elapsed.as_secs_f64()),
            Err(detail) => {
                self.failed += 1;
                println!("FAIL  {name}  [{detail}; {:.2}s]", elapsed.as_secs_f64());
            }
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn bench(kind: DistributionKind, seed: u64, similarity: f64) -> (Corpus, EmbeddingStore) {
    generate_geometric_bench(&GeometricBenchConfig {
        n_items: 200,
        aspects_per_item: 3,
        dim: 64,
        reviews_per_aspect: 10,
        distractor_similarity: similarity,
        kind,
        seed,
        ..Default::default()
    })
    .expect("bench generation")
}

fn experiment(
    corpus: &Corpus,
    store: &EmbeddingStore,
    methods: Vec<Method>,
    k_r: Vec<usize>,
    rerank: RerankMode,
) -> ExperimentReport {
    let config = ExperimentConfig {
        methods,
        k_r,
        rerank,
        ..Default::default()
    };
    run_experiment(
        &config,
        corpus,
        store,
        Clients {
            llm: &MockLlm,
            cross_encoder: &LengthCrossEncoder,
        },
    )
    .expect("experiment")
}

fn map(report: &ExperimentReport, method: Method, k_r: usize) -> f64 {
    let cell = report.cell(method, k_r).expect("cell");
    assert!(cell.failure.is_none(), "{:?}", cell.failure);
    cell.map().expect("MAP")
}

const AMEAN: Method = Method::Af(Aggregator::AMean);

fn late_fusion_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let dim = 16;
    for case in 0..100 {
        let n_items = rng.random_range(1..=12);
        let mut items = Vec::new();
        let mut reviews = Vec::new();
        let mut vectors = Vec::new();
        for i in 0..n_items {
            let id = format!("item{i:02}");
            for r in 0..rng.random_range(0..=10) {
                let rid = format!("{id}::r{r}");
                // Coarse values make exact score ties common.
                let v: Vec<f32> = (0..dim)
                    .map(|_| rng.random_range(-4i32..=4) as f32 / 4.0)
                    .collect();
                vectors.push((rid.clone(), v));
                reviews.push(Review {
                    id: rid,
                    item_id: id.clone(),
                    text: String::new(),
                    aspect_ids: BTreeSet::new(),
                });
            }
            items.push(Item {
                id,
                aspects: vec![],
            });
        }
        if reviews.is_empty() {
            continue;
        }
        let corpus = Corpus::from_parts(items, reviews.clone(), vec![]).unwrap();
        let store = EmbeddingStore::from_vectors(dim, vectors.clone(), &corpus).unwrap();
        let probe: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k_r = rng.random_range(1..=12);
        let (scores, _) = late_fusion(&store, &probe, k_r).map_err(|e| e.to_string())?;

        let mut expected: BTreeMap<String, f64> = BTreeMap::new();
        let mut per_item: BTreeMap<&str, Vec<(f64, &str)>> = BTreeMap::new();
        for ((id, v), r) in vectors.iter().zip(&reviews) {
            let mut s = 0.0f64;
            for (a, b) in v.iter().zip(&probe) {
                s += f64::from(*a) * f64::from(*b);
            }
            per_item.entry(&r.item_id).or_default().push((s, id));
        }
        for (item, mut list) in per_item {
            list.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(Ordering::Equal)
                    .then(a.1.cmp(b.1))
            });
            let top = &list[..k_r.min(list.len())];
            let mut sum = 0.0f64;
            for (s, _) in top {
                sum += s;
            }
            expected.insert(item.to_string(), sum / top.len() as f64);
        }
        ensure(scores.len() == expected.len(), || {
            format!("case {case}: item sets differ")
        })?;
        for (item, want) in &expected {
            let got = scores[item];
            ensure(got.to_bits() == want.to_bits(), || {
                format!("case {case}, {item}: {got:e} != {want:e}")
            })?;
        }
    }
    Ok("100 instances bit-exact".into())
}

fn aggregator_chain() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut strict, mut constant) = (0, 0);
    for case in 0..1000 {
        let len = rng.random_range(1..=6);
        let row: Vec<f64> = if case % 5 == 0 {
            vec![rng.random_range(0.01..2.0); len]
        } else {
            (0..len).map(|_| rng.random_range(0.01..2.0)).collect()
        };
        let a = aggregate_row(&row, Aggregator::AMean).unwrap();
        let g = aggregate_row(&row, Aggregator::GMean).unwrap();
        let h = aggregate_row(&row, Aggregator::HMean).unwrap();
        let tol = CHAIN_RTOL * a.abs();
        ensure(h <= g + tol && g <= a + tol, || {
            format!("{row:?}: {h} {g} {a}")
        })?;
        let is_constant = row.iter().all(|x| *x == row[0]);
        let equal = (a - h).abs() <= tol && (a - g).abs() <= tol;
        ensure(equal == is_constant, || {
            format!("{row:?}: equality {equal} but constant {is_constant}")
        })?;
        if is_constant {
            constant += 1;
        } else {
            strict += 1;
        }
    }
    Ok(format!("{strict} strict rows, {constant} constant rows"))
}

fn merge_examples() -> Outcome {
    let ranked = |ids: &[&str], k: usize| ScoredList::from_ranked_ids(ids.iter().copied(), k);
    let score_of = |l: &ScoredList, id: &str| {
        l.entries()
            .iter()
            .find(|e| e.item_id == id)
            .map(|e| e.score)
    };
    let mut problems = Vec::new();

    let b1 = borda_merge(&[ranked(&["x"], 10), ranked(&["x"], 10)], 10);
    if score_of(&b1, "x") != Some(20.0) {
        problems.push(format!("borda rank-1 twice: {:?}", score_of(&b1, "x")));
    }
    let ten: Vec<String> = (1..=10).map(|r| format!("i{r:02}")).collect();
    let ten_refs: Vec<&str> = ten.iter().map(String::as_str).collect();
    let b2 = borda_merge(&[ranked(&ten_refs, 10), ranked(&["i01"], 10)], 10);
    if score_of(&b2, "i10") != Some(1.0) {
        problems.push(format!("borda rank 10 once: {:?}", score_of(&b2, "i10")));
    }
    let b3 = borda_merge(&[ranked(&["A", "B"], 2), ranked(&["B", "A"], 2)], 2);
    if b3.ids().collect::<Vec<_>>() != ["A", "B"] || score_of(&b3, "A") != Some(3.0) {
        problems.push(format!("borda tie: {:?}", b3.entries()));
    }

    let r1 = round_robin_merge(&[vec!["A", "B", "C"], vec!["B", "D"]], 10);
    if r1 != ["A", "B", "D", "C"] {
        problems.push(format!(
            "round-robin [A,B,C]+[B,D] gave {r1:?}, example expects [A,B,D,C]"
        ));
    }
    let r2 = round_robin_merge(&[vec!["A", "B"], vec!["A", "B"]], 10);
    if r2 != ["A", "B"] {
        problems.push(format!("round-robin identical lists: {r2:?}"));
    }
    let r3 = round_robin_merge(&[Vec::<&str>::new(), vec!["C", "A"]], 10);
    if r3 != ["C", "A"] {
        problems.push(format!("round-robin empty list: {r3:?}"));
    }
    // Same duplicate-skip rule, as exercised through review selection.
    let r4 = round_robin_merge(&[vec!["r1", "r2"], vec!["r1", "r5"]], 3);
    let rule = if r4 == ["r1", "r5", "r2"] {
        "ok"
    } else {
        "broken"
    };

    if problems.is_empty() {
        Ok(format!(
            "6 examples exact; review-selection skip case {rule}"
        ))
    } else {
        Err(format!(
            "{}; review-selection skip case [r1,r2]+[r1,r5] -> {r4:?} ({rule}); the two examples need opposite skip rules",
            problems.join("; ")
        ))
    }
}

fn popular_trend() -> Outcome {
    let mut gaps = Vec::new();
    for seed in SEEDS {
        let (corpus, store) = bench(DistributionKind::OnePopularAspect, seed, 0.5);
        let r = experiment(
            &corpus,
            &store,
            vec![Method::MonoLf, AMEAN],
            vec![1],
            RerankMode::None,
        );
        let (af, mono) = (map(&r, AMEAN, 1), map(&r, Method::MonoLf, 1));
        gaps.push(af - mono);
        ensure(af - mono >= POPULAR_MARGIN, || {
            format!("seed {seed}: AF {af:.3} vs Mono {mono:.3}, gap below {POPULAR_MARGIN}")
        })?;
    }
    Ok(format!("gaps {}", fmt_list(&gaps)))
}

fn overlap_trend() -> Outcome {
    let mut diffs = Vec::new();
    for seed in SEEDS {
        let (corpus, store) = bench(DistributionKind::FullyOverlapping, seed, 0.5);
        let r = experiment(
            &corpus,
            &store,
            vec![Method::MonoLf, AMEAN],
            vec![1],
            RerankMode::None,
        );
        diffs.push(map(&r, AMEAN, 1) - map(&r, Method::MonoLf, 1));
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    ensure(mean.abs() <= OVERLAP_TOLERANCE, || {
        format!("mean |AF - Mono| {:.3} > {OVERLAP_TOLERANCE}", mean.abs())
    })?;
    Ok(format!(
        "mean AF - Mono {mean:+.4}, per seed {}",
        fmt_list(&diffs)
    ))
}

fn collapse_trend() -> Outcome {
    let mut drops = Vec::new();
    for seed in SEEDS {
        let (corpus, store) = bench(DistributionKind::FullyDisjoint, seed, 0.5);
        let r = experiment(&corpus, &store, vec![AMEAN], vec![10, 30], RerankMode::None);
        let (at10, at30) = (map(&r, AMEAN, 10), map(&r, AMEAN, 30));
        drops.push(at10 - at30);
        ensure(at10 - at30 >= COLLAPSE_DROP, || {
            format!("seed {seed}: K_R=10 {at10:.3}, K_R=30 {at30:.3}")
        })?;
    }
    Ok(format!("drops {}", fmt_list(&drops)))
}

fn min_collapse() -> Outcome {
    let mut values = Vec::new();
    for seed in SEEDS {
        let (corpus, store) = bench(DistributionKind::FullyDisjoint, seed, 0.0);
        let r = experiment(
            &corpus,
            &store,
            vec![Method::Af(Aggregator::Min)],
            vec![2],
            RerankMode::None,
        );
        values.push(map(&r, Method::Af(Aggregator::Min), 2));
    }
    ensure(values.iter().all(|v| *v < MIN_COLLAPSE_CEILING), || {
        format!(
            "AF(Min) MAP@10 at K_R=2 is {} (needs < {MIN_COLLAPSE_CEILING}); the correct item tops every aspect probe, so its minimum stays high",
            fmt_list(&values)
        )
    })?;
    Ok(format!("AF(Min) MAP@10 {}", fmt_list(&values)))
}

fn metric_checks() -> Outcome {
    let correct_at = |rank: usize, len: usize| {
        ScoredList::from_ranked_ids(
            (1..=len).map(|r| {
                if r == rank {
                    "gold".to_string()
                } else {
                    format!("x{r}")
                }
            }),
            len,
        )
    };
    for rank in 1..=10 {
        let ap = average_precision_at_k(&correct_at(rank, 20), "gold", 10);
        ensure(ap == 1.0 / rank as f64, || {
            format!("AP at rank {rank} = {ap}")
        })?;
    }
    ensure(
        average_precision_at_k(&correct_at(11, 20), "gold", 10) == 0.0,
        || "AP at rank 11".into(),
    )?;
    let (_, margin) = summarize(&[1.0, 0.0, 1.0, 0.0]).map_err(|e| e.to_string())?;
    ensure((margin - 0.566).abs() <= MARGIN_TOL, || {
        format!("margin {margin}")
    })?;

    let mut cells = 0;
    for kind in DistributionKind::ALL {
        let (corpus, store) = bench(kind, 1, 0.5);
        let r = experiment(
            &corpus,
            &store,
            Method::all(),
            vec![1, 2, 5, 10, 15, 30],
            RerankMode::Ce,
        );
        for cell in &r.cells {
            for stage in [CellStage::Stage1, CellStage::Stage2] {
                let m = cell.metric(stage, "MAP").ok_or("missing MAP")?.mean;
                let re = cell.metric(stage, "Re").ok_or("missing Re")?.mean;
                ensure(re >= m, || {
                    format!(
                        "{kind:?} {} K_R={}: Re {re} < MAP {m}",
                        cell.method, cell.k_r
                    )
                })?;
                cells += 1;
            }
            for res in &cell.results {
                for list in [Some(&res.stage1), res.stage2.as_ref()]
                    .into_iter()
                    .flatten()
                {
                    let (ap, re) = (
                        average_precision_at_k(list, &res.correct_item_id, 10),
                        recall_at_k(list, &res.correct_item_id, 10),
                    );
                    ensure(re >= ap, || {
                        format!("query {}: Re {re} < AP {ap}", res.query_id)
                    })?;
                }
            }
        }
    }
    Ok(format!(
        "AP/summarize exact; Re >= MAP over {cells} summaries and every query"
    ))
}

fn rerank_safety() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..1000 {
        let n = rng.random_range(0..12);
        let stage1: Vec<String> = (0..n).map(|i| format!("i{i}")).collect();
        let emitted: Vec<String> = (0..rng.random_range(0..16))
            .map(|_| match rng.random_range(0..3) {
                0 => format!("ghost{}", rng.random_range(0..4)),
                _ => format!("i{}", rng.random_range(0..n.max(1) + 2)),
            })
            .collect();
        let out = repair_permutation(&emitted, &stage1);
        let mut sorted_out = out.clone();
        sorted_out.sort();
        let mut sorted_in = stage1.clone();
        sorted_in.sort();
        ensure(sorted_out == sorted_in, || {
            format!("case {case}: {emitted:?} -> {out:?}")
        })?;
    }
    let (corpus, store) = bench(DistributionKind::FullyDisjoint, 1, 0.5);
    let r = experiment(
        &corpus,
        &store,
        Method::all(),
        vec![1, 10],
        RerankMode::Listwise,
    );
    for cell in &r.cells {
        let s1 = cell
            .metric(CellStage::Stage1, "MAP")
            .ok_or("missing MAP")?
            .mean;
        let s2 = cell
            .metric(CellStage::Stage2, "MAP")
            .ok_or("missing MAP")?
            .mean;
        ensure(s1 == s2, || {
            format!("{} K_R={}: {s1} vs {s2}", cell.method, cell.k_r)
        })?;
        let t = cell.transitions.as_ref().ok_or("no transitions")?;
        ensure(t.is_diagonal(), || {
            format!("{} K_R={} not diagonal", cell.method, cell.k_r)
        })?;
    }
    Ok(format!(
        "1000 fuzz cases permutations; identity rerank exact over {} cells",
        r.cells.len()
    ))
}

fn desiderata() -> Outcome {
    let (corpus, store) = generate_geometric_bench(&GeometricBenchConfig {
        n_items: 40,
        kind: DistributionKind::FullyOverlapping,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let mut checked = 0usize;
    for q in corpus.queries() {
        let probes: Vec<Probe> = q
            .gt_aspects
            .iter()
            .map(|a| Probe::new(a.id.clone(), store.vector(&a.id).unwrap().to_vec()))
            .collect();
        for k_r in [1, 2, 5, 10, 15, 30] {
            let (_, mono) = monolithic_lf(&store, store.vector(&q.id).unwrap(), k_r, 10)
                .map_err(|e| e.to_string())?;
            let (_, af) = aspect_fusion(&store, &probes, k_r, 10, Aggregator::AMean)
                .map_err(|e| e.to_string())?;
            let (_, full) = aspect_item_scores(&store, &probes, k_r).map_err(|e| e.to_string())?;
            for trace in [&mono, &af, &full] {
                let diags = fusion_diagnostics(trace, &corpus, None).map_err(|e| e.to_string())?;
                for (item, d) in diags {
                    ensure(d.coverage == 1.0 && d.balance == 1.0, || {
                        format!("{} K_R={k_r} item {item}: {d:?}", q.id)
                    })?;
                    checked += 1;
                }
            }
            let sel =
                select_reviews(&af, SelectStrategy::Aspect, k_r).map_err(|e| e.to_string())?;
            ensure(sel.values().all(|ids| !ids.is_empty()), || {
                "empty selection".into()
            })?;
        }
    }
    Ok(format!("{checked} item traces at coverage 1, balance 1"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    std::fs::write(
        dir.path().join("exp.json"),
        r#"{"bench": {"n_items": 100, "seed": 11},
            "experiment": {"dataset": "bench", "aspect_source": "extracted", "rerank": "listwise", "seed": 11}}"#,
    )
    .map_err(|e| e.to_string())?;
    let run = |out: &str| -> Result<Vec<u8>, String> {
        let o = Command::new(env!("CARGO_BIN_EXE_aspectfuse"))
            .args(["experiment", "--config", "exp.json", "--out", out])
            .current_dir(dir.path())
            .output()
            .map_err(|e| e.to_string())?;
        ensure(o.status.success(), || {
            String::from_utf8_lossy(&o.stderr).into_owned()
        })?;
        std::fs::read(dir.path().join(out).join("report.csv")).map_err(|e| e.to_string())
    };
    let (a, b) = (run("first")?, run("second")?);
    ensure(a == b, || "report.csv differs between runs".into())?;
    Ok(format!("two runs, {} identical bytes", a.len()))
}

fn fmt_list(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn main() -> ExitCode {
    let mut suite = Suite { failed: 0 };
    let secs = Duration::from_secs;
    suite.check(
        "late-fusion brute-force oracle",
        Some(secs(5)),
        late_fusion_oracle,
    );
    suite.check(
        "aggregator mean chain HMean <= GMean <= AMean",
        Some(secs(1)),
        aggregator_chain,
    );
    suite.check("Borda and round-robin examples", None, merge_examples);
    suite.check(
        "one-popular: AF(AMean) beats Mono LF at K_R=1 on every seed",
        Some(secs(60)),
        popular_trend,
    );
    suite.check(
        "fully-overlapping: AF(AMean) and Mono LF agree",
        Some(secs(60)),
        overlap_trend,
    );
    suite.check(
        "disjoint: AF(AMean) collapses from K_R=10 to K_R=30",
        None,
        collapse_trend,
    );
    suite.check(
        "disjoint, orthogonal aspects: AF(Min) collapses at K_R=2",
        None,
        min_collapse,
    );
    suite.check("metric definitions and Re >= MAP", None, metric_checks);
    suite.check(
        "rerank permutation safety and identity reranker",
        None,
        rerank_safety,
    );
    suite.check("fully-overlapping coverage and balance", None, desiderata);
    suite.check("experiment determinism", None, determinism);
    println!("acceptance: {} failed", suite.failed);
    if suite.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
