use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use aspectfuse_core::corpus::{load_corpus, read_jsonl, save_corpus, validate_corpus, CorpusPaths};
use aspectfuse_core::distgen::{
    apply_frequency_imbalance, generate_geometric_bench, generate_reviews,
    DISJOINT_REVIEWS_PER_ASPECT, OVERLAPPING_REVIEWS_PER_ITEM,
};
use aspectfuse_core::embedstore::{load_embeddings, save_embeddings};
use aspectfuse_core::eval::{
    aspect_probes, average_precision_at_k, metric_summary, rank_transition_matrix, recall_at_k,
    MetricSummary, TransitionMatrix,
};
use aspectfuse_core::rerank::{
    cross_encoder_rerank, listwise_rerank, select_reviews, RerankInput, SelectStrategy,
};
use aspectfuse_core::{
    aspect_fusion, monolithic_lf, run_experiment, AspectSource, Clients, Corpus, DistgenError,
    DistributionKind, EmbeddingStore, GeometricBenchConfig, Item, Method, Query, QueryResult,
    RerankMode, ScoredList,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{
    build_cross_encoder, build_llm, cross_encoder_from_file, llm_from_file, RunConfig,
};
use crate::error::CliError;

/// One query's ranked lists, as written by `retrieve` and `rerank`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListRecord {
    pub query_id: String,
    pub correct_item_id: String,
    pub method: Method,
    pub k_r: usize,
    pub stage1: ScoredList,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2: Option<ScoredList>,
    /// Review ids chosen to represent each stage-1 item in reranking.
    pub reviews: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

pub fn with_pool<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> T + Send,
) -> Result<T, CliError> {
    match threads {
        None => Ok(f()),
        Some(n) => Ok(rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(CliError::runtime)?
            .install(f)),
    }
}

fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(CliError::runtime)?;
    }
    let file = fs::File::create(path)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(CliError::runtime)?;
        out.write_all(b"\n").map_err(CliError::runtime)?;
    }
    out.flush().map_err(CliError::runtime)
}

fn read_records(path: &Path) -> Result<Vec<ListRecord>, CliError> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::Invalid(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(CliError::runtime)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| CliError::Invalid(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

fn load_data(corpus_dir: &Path, embeddings: &Path) -> Result<(Corpus, EmbeddingStore), CliError> {
    let paths = CorpusPaths::in_dir(corpus_dir);
    let corpus =
        load_corpus(&paths.items, &paths.reviews, &paths.queries).map_err(CliError::invalid)?;
    let store = load_embeddings(embeddings, &corpus).map_err(CliError::invalid)?;
    Ok((corpus, store))
}

fn default_reviews_per_unit(kind: DistributionKind) -> usize {
    match kind {
        DistributionKind::FullyOverlapping => OVERLAPPING_REVIEWS_PER_ITEM,
        _ => DISJOINT_REVIEWS_PER_ASPECT,
    }
}

fn distgen_error(e: DistgenError) -> CliError {
    match &e {
        DistgenError::Text { source, .. } if source.is_exhaustion() => {
            CliError::Exhausted(e.to_string())
        }
        DistgenError::Text { .. } => CliError::Runtime(e.to_string()),
        _ => CliError::Invalid(e.to_string()),
    }
}

fn write_corpus(corpus: &Corpus, out: &Path) -> Result<(), CliError> {
    let report = validate_corpus(corpus);
    if !report.is_empty() {
        for v in &report.violations {
            eprintln!("violation: {v}");
        }
        return Err(CliError::Invalid(format!(
            "corpus has {} invariant violation(s); nothing written",
            report.violations.len()
        )));
    }
    fs::create_dir_all(out).map_err(CliError::runtime)?;
    save_corpus(corpus, &CorpusPaths::in_dir(out)).map_err(CliError::runtime)
}

pub struct GenCorpus {
    pub kind: DistributionKind,
    pub items: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub from: Option<PathBuf>,
    pub seed: u64,
    pub reviews_per_unit: Option<usize>,
    pub out: PathBuf,
    pub llm_config: Option<PathBuf>,
    pub llm_log: Option<PathBuf>,
}

pub fn gen_corpus(args: GenCorpus) -> Result<(), CliError> {
    let (items, reviews, queries) = if let Some(from) = &args.from {
        if !args.kind.is_imbalanced() {
            return Err(CliError::Invalid(format!(
                "--from thins an existing disjoint corpus; `{}` is not an imbalance kind",
                args.kind.as_str()
            )));
        }
        let paths = CorpusPaths::in_dir(from);
        let corpus =
            load_corpus(&paths.items, &paths.reviews, &paths.queries).map_err(CliError::invalid)?;
        let base: Vec<_> = corpus.reviews().cloned().collect();
        let reviews = apply_frequency_imbalance(
            &base,
            args.kind,
            aspectfuse_core::distgen::sub_seed(args.seed, "imbalance"),
        )
        .map_err(distgen_error)?;
        (
            corpus.items().cloned().collect::<Vec<_>>(),
            reviews,
            corpus.queries().cloned().collect::<Vec<_>>(),
        )
    } else {
        let items_path = args
            .items
            .as_ref()
            .ok_or_else(|| CliError::Invalid("one of --items or --from is required".into()))?;
        let items: Vec<Item> = read_jsonl(items_path).map_err(CliError::invalid)?;
        let queries: Vec<Query> = match &args.queries {
            Some(p) => read_jsonl(p).map_err(CliError::invalid)?,
            None => Vec::new(),
        };
        let per_unit = args
            .reviews_per_unit
            .unwrap_or_else(|| default_reviews_per_unit(args.kind));
        if per_unit == 0 {
            return Err(CliError::Invalid("--reviews-per must be at least 1".into()));
        }
        let llm = build_llm(
            &llm_from_file(args.llm_config.as_deref())?,
            args.llm_log.as_deref(),
        )?;
        let reviews = generate_reviews(&items, args.kind, per_unit, llm.as_ref(), args.seed)
            .map_err(distgen_error)?;
        (items, reviews, queries)
    };
    let corpus = Corpus::from_parts(items, reviews, queries).map_err(CliError::invalid)?;
    write_corpus(&corpus, &args.out)?;
    println!(
        "{}: {} items, {} reviews, {} queries -> {}",
        args.kind.as_str(),
        corpus.items().len(),
        corpus.reviews().len(),
        corpus.queries().len(),
        args.out.display()
    );
    Ok(())
}

pub struct GenBench {
    pub config: Option<PathBuf>,
    pub kind: Option<DistributionKind>,
    pub seed: Option<u64>,
    pub n_items: Option<usize>,
    pub out: PathBuf,
}

pub fn gen_bench(args: GenBench) -> Result<(), CliError> {
    let mut config = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str::<GeometricBenchConfig>(&text).map_err(|e| {
                CliError::Invalid(format!("invalid bench config {}: {e}", p.display()))
            })?
        }
        None => GeometricBenchConfig::default(),
    };
    if let Some(kind) = args.kind {
        config.kind = kind;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(n) = args.n_items {
        config.n_items = n;
    }
    config.validate().map_err(CliError::invalid)?;
    let (corpus, store) = generate_geometric_bench(&config).map_err(distgen_error)?;
    write_corpus(&corpus, &args.out)?;
    save_embeddings(&store, &args.out.join("embeddings.bin")).map_err(CliError::runtime)?;
    println!(
        "{} bench: {} items, {} reviews, {} queries, dim {} -> {}",
        config.kind.as_str(),
        corpus.items().len(),
        corpus.reviews().len(),
        corpus.queries().len(),
        store.dim(),
        args.out.display()
    );
    Ok(())
}

pub struct Retrieve {
    pub corpus: PathBuf,
    pub embeddings: PathBuf,
    pub method: Method,
    pub k_r: usize,
    pub k_i: usize,
    pub aspects: AspectSource,
    pub all_queries: bool,
    pub out: PathBuf,
    pub llm_config: Option<PathBuf>,
    pub llm_log: Option<PathBuf>,
    pub threads: Option<usize>,
}

pub fn retrieve(args: Retrieve) -> Result<(), CliError> {
    if args.k_r == 0 || args.k_i == 0 {
        return Err(CliError::Invalid("--kr and --ki must be at least 1".into()));
    }
    let (corpus, store) = load_data(&args.corpus, &args.embeddings)?;
    let llm = build_llm(
        &llm_from_file(args.llm_config.as_deref())?,
        args.llm_log.as_deref(),
    )?;
    let queries: Vec<&Query> = if args.all_queries {
        corpus.queries().collect()
    } else {
        corpus.multi_aspect_queries().collect()
    };
    let records = with_pool(args.threads, || {
        queries
            .par_iter()
            .map(|q| {
                let context = |e: String| format!("query `{}`: {e}", q.id);
                let (list, trace, strategy) = match args.method {
                    Method::MonoLf => {
                        let v = store
                            .require(&q.id)
                            .map_err(|e| CliError::Runtime(context(e.to_string())))?;
                        let (l, t) = monolithic_lf(&store, v, args.k_r, args.k_i)
                            .map_err(|e| CliError::Runtime(context(e.to_string())))?;
                        (l, t, SelectStrategy::Mono)
                    }
                    Method::Af(agg) => {
                        let (probes, _) = aspect_probes(q, args.aspects, &store, llm.as_ref())
                            .map_err(|e| {
                                if e.is_exhaustion() {
                                    CliError::Exhausted(context(e.to_string()))
                                } else {
                                    CliError::Runtime(context(e.to_string()))
                                }
                            })?;
                        let (l, t) = aspect_fusion(&store, &probes, args.k_r, args.k_i, agg)
                            .map_err(|e| CliError::Runtime(context(e.to_string())))?;
                        (l, t, SelectStrategy::Aspect)
                    }
                };
                let mut reviews = select_reviews(&trace, strategy, args.k_r)
                    .map_err(|e| CliError::Runtime(context(e.to_string())))?;
                let keep: Vec<&str> = list.ids().collect();
                reviews.retain(|item, _| keep.contains(&item.as_str()));
                Ok(ListRecord {
                    query_id: q.id.clone(),
                    correct_item_id: q.correct_item_id.clone(),
                    method: args.method,
                    k_r: args.k_r,
                    stage1: list,
                    stage2: None,
                    reviews,
                    warning: None,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()
    })??;
    write_records(&args.out, &records)?;
    println!(
        "{} lists ({}, K_R={}, K_I={}) -> {}",
        records.len(),
        args.method,
        args.k_r,
        args.k_i,
        args.out.display()
    );
    Ok(())
}

pub struct Rerank {
    pub corpus: PathBuf,
    pub input: PathBuf,
    pub mode: RerankMode,
    pub out: PathBuf,
    pub passage_chars: usize,
    pub llm_config: Option<PathBuf>,
    pub ce_config: Option<PathBuf>,
    pub llm_log: Option<PathBuf>,
    pub threads: Option<usize>,
}

pub fn rerank(args: Rerank) -> Result<(), CliError> {
    if args.mode == RerankMode::None {
        return Err(CliError::Invalid("--mode must be ce or listwise".into()));
    }
    if args.passage_chars == 0 {
        return Err(CliError::Invalid(
            "--passage-chars must be at least 1".into(),
        ));
    }
    let paths = CorpusPaths::in_dir(&args.corpus);
    let corpus =
        load_corpus(&paths.items, &paths.reviews, &paths.queries).map_err(CliError::invalid)?;
    let mut records = read_records(&args.input)?;
    if let Some(r) = records.iter().find(|r| corpus.query(&r.query_id).is_none()) {
        return Err(CliError::Invalid(format!(
            "query `{}` is not in the corpus",
            r.query_id
        )));
    }
    let llm = build_llm(
        &llm_from_file(args.llm_config.as_deref())?,
        args.llm_log.as_deref(),
    )?;
    let ce = build_cross_encoder(&cross_encoder_from_file(args.ce_config.as_deref())?);
    let exhausted = with_pool(args.threads, || {
        records
            .par_iter_mut()
            .map(|rec| {
                let query = corpus.query(&rec.query_id).expect("checked above");
                let input = RerankInput::from_selection(
                    &query.text,
                    rec.stage1.clone(),
                    &rec.reviews,
                    &corpus,
                )
                .map_err(|e| CliError::Runtime(format!("query `{}`: {e}", rec.query_id)))?;
                let outcome = match args.mode {
                    RerankMode::Ce => cross_encoder_rerank(ce.as_ref(), &input, args.passage_chars),
                    _ => listwise_rerank(llm.as_ref(), &input),
                };
                rec.stage2 = Some(outcome.list);
                rec.warning = outcome.warning;
                Ok(outcome.endpoint_exhausted)
            })
            .collect::<Result<Vec<bool>, CliError>>()
    })??;
    write_records(&args.out, &records)?;
    let fallbacks = records.iter().filter(|r| r.warning.is_some()).count();
    println!(
        "{} lists reranked ({}), {} kept stage-1 order -> {}",
        records.len(),
        args.mode.as_str(),
        fallbacks,
        args.out.display()
    );
    let n_exhausted = exhausted.iter().filter(|&&e| e).count();
    if n_exhausted > 0 {
        return Err(CliError::Exhausted(format!(
            "model endpoint exhausted for {n_exhausted} quer(ies); their stage-1 order was kept"
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct Evaluation {
    pub k: usize,
    pub n: usize,
    pub stage1: Vec<MetricSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub stage2: Vec<MetricSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transitions: Option<TransitionMatrix>,
}

pub fn evaluate_records(records: &[ListRecord], k: Option<usize>) -> Result<Evaluation, CliError> {
    let first = records
        .first()
        .ok_or_else(|| CliError::Invalid("no lists to evaluate".into()))?;
    let k = k.unwrap_or(first.stage1.k());
    if k == 0 {
        return Err(CliError::Invalid("--k must be at least 1".into()));
    }
    let summarize = |lists: Vec<(&ScoredList, &str)>| -> Result<Vec<MetricSummary>, CliError> {
        let ap: Vec<f64> = lists
            .iter()
            .map(|(l, c)| average_precision_at_k(l, c, k))
            .collect();
        let re: Vec<f64> = lists.iter().map(|(l, c)| recall_at_k(l, c, k)).collect();
        Ok(vec![
            metric_summary(format!("MAP@{k}"), &ap).map_err(CliError::invalid)?,
            metric_summary(format!("Re@{k}"), &re).map_err(CliError::invalid)?,
        ])
    };
    let stage1 = summarize(
        records
            .iter()
            .map(|r| (&r.stage1, r.correct_item_id.as_str()))
            .collect(),
    )?;
    let reranked = records.iter().all(|r| r.stage2.is_some());
    let (stage2, transitions) = if reranked {
        let s2 = summarize(
            records
                .iter()
                .map(|r| {
                    (
                        r.stage2.as_ref().expect("all reranked"),
                        r.correct_item_id.as_str(),
                    )
                })
                .collect(),
        )?;
        let results: Vec<QueryResult> = records
            .iter()
            .map(|r| {
                QueryResult::new(
                    &r.query_id,
                    &r.correct_item_id,
                    r.stage1.clone(),
                    r.stage2.clone(),
                )
            })
            .collect();
        (s2, Some(rank_transition_matrix(&results, first.stage1.k())))
    } else {
        (Vec::new(), None)
    };
    Ok(Evaluation {
        k,
        n: records.len(),
        stage1,
        stage2,
        transitions,
    })
}

pub fn evaluate(input: &Path, k: Option<usize>, out: Option<&Path>) -> Result<(), CliError> {
    let records = read_records(input)?;
    let eval = evaluate_records(&records, k)?;
    println!("stage\tmetric\tmean\tmargin\tn");
    for (stage, list) in [("stage1", &eval.stage1), ("stage2", &eval.stage2)] {
        for m in list {
            println!(
                "{stage}\t{}\t{:.6}\t{:.6}\t{}",
                m.name, m.mean, m.margin95, m.n
            );
        }
    }
    if let Some(t) = &eval.transitions {
        if let (Some((a, b)), Some(f)) = (t.center_of_mass, t.improvement_fraction) {
            println!(
                "transitions: {} counted, center of mass ({a:.3}, {b:.3}), improved {f:.3}",
                t.total
            );
        }
    }
    if let Some(out) = out {
        let json = serde_json::to_string_pretty(&eval).map_err(CliError::runtime)?;
        fs::write(out, json + "\n").map_err(CliError::runtime)?;
    }
    Ok(())
}

pub struct Experiment {
    pub config: PathBuf,
    pub k_r: Option<Vec<usize>>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub llm_log: Option<PathBuf>,
}

pub fn experiment(args: Experiment) -> Result<(), CliError> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(k_r) = args.k_r {
        config.experiment.k_r = k_r;
    }
    if let Some(out) = args.out {
        config.out_dir = out;
    }
    if args.threads.is_some() {
        config.threads = args.threads;
    }
    if args.llm_log.is_some() {
        config.llm_log = args.llm_log;
    }
    config.validate()?;

    let (corpus, store) = match (&config.bench, &config.corpus_dir, &config.embeddings) {
        (Some(bench), _, _) => generate_geometric_bench(bench).map_err(distgen_error)?,
        (None, Some(dir), Some(emb)) => load_data(dir, emb)?,
        _ => unreachable!("validated"),
    };
    let llm = build_llm(&config.llm, config.llm_log.as_deref())?;
    let ce = build_cross_encoder(&config.cross_encoder);
    let clients = Clients {
        llm: llm.as_ref(),
        cross_encoder: ce.as_ref(),
    };
    let report = with_pool(config.threads, || {
        run_experiment(&config.experiment, &corpus, &store, clients)
    })?
    .map_err(CliError::invalid)?;

    let out = &config.out_dir;
    report.write_to_dir(out).map_err(CliError::runtime)?;
    let json = serde_json::to_string_pretty(&report).map_err(CliError::runtime)?;
    fs::write(out.join("report.json"), json + "\n").map_err(CliError::runtime)?;
    if !report.extractions.is_empty() {
        let ex: Vec<_> = report.extractions.values().collect();
        write_records(&out.join("extractions.jsonl"), &ex)?;
    }
    let failed: Vec<String> = report
        .cells
        .iter()
        .filter_map(|c| {
            c.failure
                .as_ref()
                .map(|f| format!("{} K_R={}: {f}", c.method, c.k_r))
        })
        .collect();
    println!(
        "{} queries, {} cells ({} failed) -> {}",
        report.n_queries,
        report.cells.len(),
        failed.len(),
        out.display()
    );
    if report.endpoint_exhausted() {
        return Err(CliError::Exhausted(
            "model endpoint exhausted during the run; affected cells are marked in report.json"
                .into(),
        ));
    }
    if !failed.is_empty() {
        return Err(CliError::Runtime(format!(
            "failed cells:\n  {}",
            failed.join("\n  ")
        )));
    }
    Ok(())
}
