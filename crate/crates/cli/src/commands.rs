use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use factlink_core::benchmark::{build_benchmark, Benchmark};
use factlink_core::corpus::{self, OieTriple};
use factlink_core::eval::{self, EvalReport, Metric, ReportFormat, StoreKind};
use factlink_core::io::{read_records, write_record, write_records};
use factlink_core::kg::{load_kg, KgFact};
use factlink_core::ookg::{
    self, CoinDetector, ConfidenceDetector, ConstantDetector, Decision, Detector, EntropyDetector, OokgEvalConfig,
    OokgReport, OokgThresholds, QkvDetector, QkvParams,
};
use factlink_core::preranker::{self, EmbeddingIndex, LinkIndices, SlotLinkResult};
use factlink_core::reranker::{self, CrossScorerParams, EntryCache};
use factlink_core::splits::{self, SplitKind, SplitResult, SplitSpec, SplitStats};
use factlink_core::synth::toy_world;
use factlink_core::{rng, Encoder, EntryKind, ImportedEmbeddings, KgEntry, KgStore, ReferenceEncoder};
use serde::Serialize;

use crate::artifact::{open, read_with, Artifacts, Header};
use crate::config::{DetectorKind, LinkerKind, RunConfig};
use crate::error::{CliError, CliResult};

pub const ALIGNMENTS: &str = "alignments.jsonl";
pub const STATS: &str = "stats.jsonl";
pub const ENCODER: &str = "preranker.flep";
pub const PRERANK_TRACE: &str = "preranker_trace.jsonl";
pub const RERANKER: &str = "reranker.jsonl";
pub const NEIGHBORS: &str = "neighbors.jsonl";
pub const RERANK_TRACE: &str = "reranker_trace.jsonl";
pub const QKV: &str = "qkv.jsonl";
pub const QKV_TRACE: &str = "qkv_trace.jsonl";
pub const THRESHOLDS: &str = "thresholds.jsonl";
pub const LINKS: &str = "links.jsonl";

/// RNG stream of the coin detector.
const COIN: &str = "coin-detector";

pub fn split_file(kind: SplitKind) -> String {
    format!("split_{}.jsonl", kind.name())
}

fn index_file(store: StoreKind, kind: EntryKind) -> String {
    let what = match kind {
        EntryKind::Entity => "entities",
        EntryKind::Predicate => "predicates",
    };
    format!("index_{}_{what}.flix", store.name().to_lowercase())
}

fn detector_name(kind: DetectorKind) -> &'static str {
    match kind {
        DetectorKind::Confidence => "confidence",
        DetectorKind::Entropy => "entropy",
        DetectorKind::Attention => "attention",
        DetectorKind::Coin => "coin",
        DetectorKind::AlwaysInKg => "always_in_kg",
    }
}

pub struct Run {
    pub config: RunConfig,
    pub out: Artifacts,
}

impl Run {
    pub fn new(config: RunConfig) -> CliResult<Self> {
        let out = Artifacts::new(config.output_dir()?, Header::new(&config))?;
        Ok(Self { config, out })
    }

    fn existing(&self, name: &str) -> CliResult<std::path::PathBuf> {
        let path = self.out.path(name);
        if !path.exists() {
            return Err(CliError::Path {
                path,
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "run the producing stage first"),
            });
        }
        Ok(path)
    }

    fn kg(&self) -> CliResult<KgStore> {
        let entries = self.config.input("kg_entries")?;
        let facts = self.config.input("kg_facts")?;
        // parse each file alone first so syntax errors name their file
        read_with(entries, read_records::<KgEntry, _>)?;
        read_with(facts, read_records::<KgFact, _>)?;
        let store = load_kg(open(entries)?, open(facts)?, self.config.normalizer).map_err(|source| CliError::Data {
            path: facts.to_owned(),
            source,
        })?;
        log::info!("loaded {} KG entries and {} facts", store.len(), store.fact_count());
        Ok(store)
    }

    fn benchmark(&self) -> CliResult<Benchmark> {
        let (train, test) = read_with(&self.existing(ALIGNMENTS)?, corpus::read_benchmark_alignments)?;
        Ok(Benchmark { train, test })
    }

    fn store_variant(&self, store: &KgStore, bench: &Benchmark, kind: StoreKind) -> CliResult<KgStore> {
        Ok(match kind {
            StoreKind::Brkg => bench.brkg(store)?,
            StoreKind::Large => store.clone(),
        })
    }

    fn reference_encoder(&self) -> CliResult<ReferenceEncoder> {
        let path = self.existing(ENCODER)?;
        let mut reader = open(&path)?;
        ReferenceEncoder::load(&mut reader).map_err(|source| CliError::Data { path, source })
    }

    /// Imported vectors when configured, the trained encoder otherwise.
    fn encoder(&self) -> CliResult<Box<dyn Encoder>> {
        if self.config.paths.embeddings.is_some() {
            let path = self.config.input("embeddings")?;
            let dim = Some(self.config.encoder.dim);
            return Ok(Box::new(read_with(path, |r| ImportedEmbeddings::read(r, dim))?));
        }
        Ok(Box::new(self.reference_encoder()?))
    }

    fn facet(&self, bench: &Benchmark, eval_store: &KgStore) -> SplitResult {
        splits::make_split(
            SplitSpec {
                kind: self.config.eval.facet,
                inductive_mode: self.config.eval.inductive_mode,
            },
            &bench.test,
            &bench.train,
            eval_store,
        )
    }
}

pub fn toy(run: &Run) -> CliResult<()> {
    let world = toy_world(&run.config.toy)?;
    run.out.jsonl("kg_entries.jsonl", |w| world.store.write_entries(w))?;
    run.out.jsonl("kg_facts.jsonl", |w| world.store.write_facts(w))?;
    run.out.jsonl("oie.jsonl", |w| corpus::write_oies(w, &world.oies))?;
    run.out.jsonl("pairs.jsonl", |w| corpus::write_pairs(w, &world.pairs))?;
    println!(
        "toy world: {} entries, {} facts, {} sentences",
        world.store.len(),
        world.store.fact_count(),
        world.pairs.len()
    );
    Ok(())
}

pub fn build(run: &Run) -> CliResult<()> {
    let store = run.kg()?;
    let oies = read_with(run.config.input("oie")?, corpus::read_oies)?;
    let pairs = read_with(run.config.input("pairs")?, corpus::read_pairs)?;
    let bench = build_benchmark(&store, &oies, &pairs, &run.config.benchmark)?;
    run.out
        .jsonl(ALIGNMENTS, |w| corpus::write_benchmark_alignments(w, &bench.train, &bench.test))?;
    let eval_store = run.store_variant(&store, &bench, run.config.eval.store)?;
    let facets = bench.facets(&eval_store, run.config.eval.inductive_mode);
    for facet in &facets {
        run.out.jsonl(&split_file(facet.kind), |w| facet.write_alignments(w))?;
    }
    let mut stats: Vec<SplitStats> = bench.stats().into();
    stats.extend(facets.iter().map(|f| f.stats.clone()));
    run.out.jsonl(STATS, |w| write_records(w, &stats))?;
    for s in &stats {
        println!("{}", serde_json::to_string(s).map_err(factlink_core::Error::from)?);
    }
    Ok(())
}

pub fn split(run: &Run) -> CliResult<()> {
    let store = run.kg()?;
    let bench = run.benchmark()?;
    let eval_store = run.store_variant(&store, &bench, run.config.eval.store)?;
    let facet = run.facet(&bench, &eval_store);
    run.out.jsonl(&split_file(facet.kind), |w| facet.write_alignments(w))?;
    run.out
        .jsonl(&format!("split_{}.stats.jsonl", facet.kind.name()), |w| facet.write_stats(w))?;
    println!("{}", serde_json::to_string(&facet.stats).map_err(factlink_core::Error::from)?);
    Ok(())
}

fn training_inputs(run: &Run) -> CliResult<(Benchmark, KgStore)> {
    let store = run.kg()?;
    let bench = run.benchmark()?;
    let train_store = bench.training_store(&store)?;
    Ok((bench, train_store))
}

pub fn train_preranker(run: &Run, resume: bool) -> CliResult<()> {
    let (bench, train_store) = training_inputs(run)?;
    let encoder = if resume && run.out.path(ENCODER).exists() {
        log::info!("resuming from {}", run.out.path(ENCODER).display());
        let enc = run.reference_encoder()?;
        if enc.config().dim != run.config.encoder.dim {
            return Err(CliError::Usage("resumed encoder dimension differs from the configuration".into()));
        }
        enc
    } else {
        ReferenceEncoder::new(run.config.encoder)?
    };
    let outcome = preranker::train_preranker(&bench.train, &train_store, encoder, &run.config.preranker)?;
    let mut bytes = Vec::new();
    outcome.encoder.save(&mut bytes)?;
    run.out.binary(ENCODER, &bytes)?;
    run.out.jsonl(PRERANK_TRACE, |w| write_records(w, &outcome.trace))?;
    let last = outcome.trace.last().expect("at least one epoch");
    println!("final loss {:.6} (tau {:.4})", last.mean_loss, last.tau);
    Ok(())
}

pub fn train_reranker(run: &Run, resume: bool) -> CliResult<()> {
    let (bench, train_store) = training_inputs(run)?;
    let encoder = run.reference_encoder()?;
    let init = if resume && run.out.path(RERANKER).exists() {
        log::info!("resuming from {}", run.out.path(RERANKER).display());
        read_with(&run.out.path(RERANKER), CrossScorerParams::load)?
    } else {
        CrossScorerParams::zeros(encoder.dim(), run.config.reranker.seed)
    };
    let outcome = reranker::train_reranker_from(init, &bench.train, &encoder, &train_store, &run.config.reranker)?;
    run.out.jsonl(RERANKER, |w| outcome.params.save(w))?;
    run.out.jsonl(NEIGHBORS, |w| outcome.neighbors.write(w))?;
    run.out.jsonl(RERANK_TRACE, |w| write_records(w, &outcome.trace))?;
    let last = outcome.trace.last().expect("at least one epoch");
    println!("final loss {:.6}", last.mean_loss);
    Ok(())
}

pub fn train_ookg(run: &Run, resume: bool) -> CliResult<()> {
    let (bench, train_store) = training_inputs(run)?;
    let encoder = run.reference_encoder()?;
    let init = if resume && run.out.path(QKV).exists() {
        log::info!("resuming from {}", run.out.path(QKV).display());
        read_with(&run.out.path(QKV), QkvParams::load)?
    } else {
        QkvParams::identity(encoder.dim())
    };
    let outcome = ookg::train_qkv_from(init, &bench.train, &encoder, &train_store, &run.config.qkv)?;
    run.out.jsonl(QKV, |w| outcome.params.save(w))?;
    run.out.jsonl(QKV_TRACE, |w| write_records(w, &outcome.trace))?;
    let eval_config = OokgEvalConfig {
        keys: run.config.eval.keys,
        with_context: run.config.qkv.with_context,
    };
    let grid = run.config.calibration.grid_size;
    let thresholds =
        ookg::calibrate_thresholds(&bench.train, &train_store, &encoder, Some(&outcome.params), &eval_config, grid)?;
    run.out.jsonl(THRESHOLDS, |w| thresholds.write(w, Some(grid)))?;
    let last = outcome.trace.last().expect("at least one epoch");
    println!("final loss {:.6}", last.mean_loss);
    println!("{}", serde_json::to_string(&thresholds).map_err(factlink_core::Error::from)?);
    Ok(())
}

pub fn index(run: &Run) -> CliResult<()> {
    let store = run.kg()?;
    let bench = run.benchmark()?;
    let kind = run.config.eval.store;
    let eval_store = run.store_variant(&store, &bench, kind)?;
    let encoder = run.encoder()?;
    let indices = LinkIndices::from_store(encoder.as_ref(), &eval_store)?;
    for index in [&indices.entities, &indices.predicates] {
        let mut bytes = Vec::new();
        index.save(&mut bytes)?;
        run.out.binary(&index_file(kind, index.kind()), &bytes)?;
    }
    println!("indexed {} entities and {} predicates", indices.entities.len(), indices.predicates.len());
    Ok(())
}

/// Saved indices of the configured store when present, else fresh ones.
fn link_indices(run: &Run, encoder: &dyn Encoder, eval_store: &KgStore) -> CliResult<LinkIndices> {
    let kind = run.config.eval.store;
    let paths = [EntryKind::Entity, EntryKind::Predicate].map(|k| run.out.path(&index_file(kind, k)));
    if paths.iter().all(|p| p.exists()) {
        let [entities, predicates] = paths;
        let load = |p: &Path| -> CliResult<EmbeddingIndex> {
            let mut reader = open(p)?;
            EmbeddingIndex::load(&mut reader).map_err(|source| CliError::Data {
                path: p.to_owned(),
                source,
            })
        };
        let indices = LinkIndices {
            entities: load(&entities)?,
            predicates: load(&predicates)?,
        };
        if indices.entities.dim() != encoder.dim() {
            return Err(CliError::Usage("saved index dimension differs from the encoder".into()));
        }
        log::info!("using saved {} indices", kind.name());
        return Ok(indices);
    }
    Ok(LinkIndices::from_store(encoder, eval_store)?)
}

/// Pre-ranks, then optionally re-ranks the product of the top lists.
struct Linker<'a> {
    encoder: &'a dyn Encoder,
    indices: LinkIndices,
    scorer: Option<(CrossScorerParams, EntryCache<'a>, usize)>,
    k: usize,
    with_context: bool,
}

impl Linker<'_> {
    fn link(&mut self, t: &OieTriple) -> CliResult<(SlotLinkResult, KgFact, Option<KgFact>)> {
        let slots = self.encoder.slot_embed(t, self.with_context)?;
        let lists = preranker::link_embedded(&self.indices, &slots, self.k);
        let top = lists.linked_fact().ok_or(factlink_core::Error::EmptyEvaluation)?;
        let reranked = match &mut self.scorer {
            Some((params, cache, k)) => {
                let short = preranker::link_embedded(&self.indices, &slots, *k);
                let candidates = reranker::enumerate_candidates(&short);
                let (best, _) = reranker::rerank(params, cache, &slots, &candidates)?;
                Some(best.to_fact())
            }
            None => None,
        };
        Ok((lists, top, reranked))
    }
}

fn make_linker<'a>(
    run: &Run,
    encoder: &'a dyn Encoder,
    eval_store: &'a KgStore,
    k: usize,
) -> CliResult<Linker<'a>> {
    let indices = link_indices(run, encoder, eval_store)?;
    let scorer = match run.config.eval.rerank_k {
        Some(0) => return Err(CliError::Usage("rerank_k must be positive".into())),
        Some(rk) => {
            let params = read_with(&run.existing(RERANKER)?, CrossScorerParams::load)?;
            if params.dim != encoder.dim() {
                return Err(CliError::Usage("re-ranker dimension differs from the encoder".into()));
            }
            log::info!("re-ranking {} candidate facts per triple", rk.pow(3));
            Some((params, EntryCache::new(encoder, eval_store), rk))
        }
        None => None,
    };
    Ok(Linker {
        encoder,
        indices,
        scorer,
        k,
        with_context: run.config.eval_with_context(),
    })
}

#[derive(Serialize)]
struct LinkRecord<'a> {
    sentence_id: &'a str,
    subject: &'a str,
    relation: &'a str,
    object: &'a str,
    candidates: &'a SlotLinkResult,
    linked: &'a KgFact,
    #[serde(skip_serializing_if = "Option::is_none")]
    reranked: Option<&'a KgFact>,
}

pub fn link(run: &Run, input: Option<&Path>) -> CliResult<()> {
    let store = run.kg()?;
    let bench = run.benchmark()?;
    let eval_store = run.store_variant(&store, &bench, run.config.eval.store)?;
    let input = match input {
        Some(p) => p,
        None => run.config.input("oie")?,
    };
    let oies = read_with(input, corpus::read_oies)?;
    let encoder = run.encoder()?;
    let mut linker = make_linker(run, encoder.as_ref(), &eval_store, run.config.eval.k.max(1))?;
    let mut count = 0usize;
    run.out.jsonl(LINKS, |w| {
        for (sentence_id, triples) in &oies {
            for t in triples {
                let (lists, linked, reranked) = linker.link(t).map_err(core_error)?;
                write_record(
                    w,
                    &LinkRecord {
                        sentence_id,
                        subject: &t.subject,
                        relation: &t.relation,
                        object: &t.object,
                        candidates: &lists,
                        linked: &linked,
                        reranked: reranked.as_ref(),
                    },
                )?;
                count += 1;
            }
        }
        Ok(())
    })?;
    println!("linked {count} triples");
    Ok(())
}

/// Flattens CLI errors raised inside a core writer callback.
fn core_error(e: CliError) -> factlink_core::Error {
    match e {
        CliError::Core(e) | CliError::Data { source: e, .. } => e,
        other => factlink_core::Error::Format(other.to_string()),
    }
}

fn report_name(run: &Run, prefix: &str) -> String {
    let e = &run.config.eval;
    format!("{prefix}_{}_{}.jsonl", e.facet.name(), e.store.name().to_lowercase())
}

pub fn evaluate(run: &Run) -> CliResult<()> {
    if run.config.eval.detector.is_some() {
        return detect(run, false);
    }
    let store = run.kg()?;
    let bench = run.benchmark()?;
    let eval_store = run.store_variant(&store, &bench, run.config.eval.store)?;
    let facet = run.facet(&bench, &eval_store);
    let gold: Vec<KgFact> = facet.alignments.iter().map(|a| a.fact.clone()).collect();
    let (predictions, prefix) = match run.config.eval.linker {
        LinkerKind::Frequency => {
            let constant = eval::frequency_baseline(&bench.train)?;
            (vec![constant; gold.len()], "report_frequency".to_string())
        }
        LinkerKind::Random => {
            let mut linker = eval::random_baseline(&eval_store, run.config.seed)?;
            (gold.iter().map(|_| linker.sample()).collect(), "report_random".to_string())
        }
        LinkerKind::Model => {
            let encoder = run.encoder()?;
            let mut linker = make_linker(run, encoder.as_ref(), &eval_store, 1)?;
            let mut out = Vec::with_capacity(gold.len());
            for a in &facet.alignments {
                let (_, top, reranked) = linker.link(&a.oie)?;
                out.push(reranked.unwrap_or(top));
            }
            let prefix = match run.config.eval.rerank_k {
                Some(k) => format!("report_rerank{k}"),
                None => "report_prerank".to_string(),
            };
            (out, prefix)
        }
    };
    let report = eval::score_linking(&predictions, &gold, facet.kind.name(), run.config.eval.store)?;
    let records = eval::emit_report(&report, ReportFormat::Records)?;
    run.out
        .jsonl(&report_name(run, &prefix), |w| w.write_all(&records).map_err(Into::into))?;
    print_table(&report)?;
    Ok(())
}

fn print_table(report: &EvalReport) -> CliResult<()> {
    let table = eval::emit_report(report, ReportFormat::Table)?;
    println!("{} on {} (n={})", report.split, report.store.name(), report.n);
    print!("{}", String::from_utf8_lossy(&table));
    let sems: Vec<String> = Metric::ALL.iter().map(|&m| format!("{:.1}", 100.0 * report.sem(m))).collect();
    println!("sem {}", sems.join(" "));
    Ok(())
}

fn thresholds(run: &Run) -> CliResult<OokgThresholds> {
    if run.config.eval.calibrated {
        return read_with(&run.existing(THRESHOLDS)?, OokgThresholds::read);
    }
    run.config.thresholds.validate()?;
    Ok(run.config.thresholds.clone())
}

fn make_detector(run: &Run, kind: DetectorKind) -> CliResult<Box<dyn Detector>> {
    let t = thresholds(run)?;
    Ok(match kind {
        DetectorKind::Confidence => Box::new(ConfidenceDetector(t)),
        DetectorKind::Entropy => {
            log::info!("entropy thresholds {:?}", t.entropy);
            Box::new(EntropyDetector(t))
        }
        DetectorKind::Attention => Box::new(QkvDetector {
            params: read_with(&run.existing(QKV)?, QkvParams::load)?,
            threshold: t.attention,
        }),
        DetectorKind::Coin => Box::new(CoinDetector(rng::stream(run.config.seed, COIN))),
        DetectorKind::AlwaysInKg => Box::new(ConstantDetector(Decision::InKg)),
    })
}

#[derive(Serialize)]
struct OokgSummary<'a> {
    split: &'a str,
    store: StoreKind,
    detector: &'a str,
    slot_accuracy: [f64; 3],
    fact_accuracy: f64,
    n: usize,
}

/// Out-of-KG evaluation; `per_slot` also writes every decision.
pub fn detect(run: &Run, per_slot: bool) -> CliResult<()> {
    let kind = run
        .config
        .eval
        .detector
        .ok_or_else(|| CliError::Usage("no detector (eval.detector or --detector)".into()))?;
    let store = run.kg()?;
    let bench = run.benchmark()?;
    let eval_store = run.store_variant(&store, &bench, run.config.eval.store)?;
    let facet = run.facet(&bench, &eval_store);
    let encoder = run.encoder()?;
    let mut detector = make_detector(run, kind)?;
    let config = OokgEvalConfig {
        keys: run.config.eval.keys,
        with_context: run.config.eval_with_context(),
    };
    let report: OokgReport = ookg::ookg_evaluate(detector.as_mut(), &facet.alignments, &eval_store, encoder.as_ref(), &config)?;
    let name = detector_name(kind);
    let summary = OokgSummary {
        split: facet.kind.name(),
        store: run.config.eval.store,
        detector: name,
        slot_accuracy: report.slot_accuracy,
        fact_accuracy: report.fact_accuracy,
        n: report.n,
    };
    run.out
        .jsonl(&report_name(run, &format!("report_ookg_{name}")), |w| write_record(w, &summary))?;
    if per_slot {
        run.out
            .jsonl(&report_name(run, &format!("detections_{name}")), |w| report.write_records(w))?;
    }
    let pct: BTreeMap<&str, String> = [
        ("subject", report.slot_accuracy[0]),
        ("relation", report.slot_accuracy[1]),
        ("object", report.slot_accuracy[2]),
        ("fact", report.fact_accuracy),
    ]
    .into_iter()
    .map(|(k, v)| (k, format!("{:.1}", 100.0 * v)))
    .collect();
    println!(
        "{name} on {} / {} (n={}): subject {} relation {} object {} fact {}",
        facet.kind.name(),
        run.config.eval.store.name(),
        report.n,
        pct["subject"],
        pct["relation"],
        pct["object"],
        pct["fact"]
    );
    Ok(())
}
