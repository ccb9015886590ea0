//! Linking metrics, the constant and random baselines, and report output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Alignment;
use crate::error::{Error, Result};
use crate::io::{read_records, write_record};
use crate::kg::{KgFact, KgStore};
use crate::rng;

/// RNG stream of the random baseline.
pub const RANDOM_BASELINE: &str = "random-baseline";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Subject,
    Relation,
    Object,
    Fact,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Subject, Metric::Relation, Metric::Object, Metric::Fact];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn title(self) -> &'static str {
        match self {
            Metric::Subject => "Subject",
            Metric::Relation => "Relation",
            Metric::Object => "Object",
            Metric::Fact => "Fact",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StoreKind {
    #[serde(rename = "BRKG", alias = "brkg")]
    Brkg,
    #[serde(alias = "large")]
    Large,
}

impl StoreKind {
    pub fn name(self) -> &'static str {
        match self {
            StoreKind::Brkg => "BRKG",
            StoreKind::Large => "Large",
        }
    }
}

impl std::str::FromStr for StoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "BRKG" | "brkg" => Ok(StoreKind::Brkg),
            "Large" | "large" => Ok(StoreKind::Large),
            other => Err(Error::Config(format!("unknown store kind {other:?}"))),
        }
    }
}

/// Standard error of a Bernoulli mean.
pub fn sem(p: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (p * (1.0 - p) / n as f64).sqrt().max(0.0)
}

/// Accuracies indexed by [`Metric`].
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub split: String,
    pub store: StoreKind,
    pub n: usize,
    pub accuracy: [f64; 4],
}

impl EvalReport {
    pub fn value(&self, metric: Metric) -> f64 {
        self.accuracy[metric.index()]
    }

    pub fn sem(&self, metric: Metric) -> f64 {
        sem(self.value(metric), self.n)
    }
}

/// Slot accuracy counts correct ids per slot; a fact hit needs all three.
pub fn score_linking(predictions: &[KgFact], gold: &[KgFact], split: &str, store: StoreKind) -> Result<EvalReport> {
    if predictions.len() != gold.len() {
        return Err(Error::LengthMismatch {
            predictions: predictions.len(),
            gold: gold.len(),
        });
    }
    if gold.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut hits = [0usize; 4];
    for (p, g) in predictions.iter().zip(gold) {
        let slot_hits = [
            p.subject == g.subject,
            p.predicate == g.predicate,
            p.object == g.object,
        ];
        for (h, ok) in hits.iter_mut().zip(slot_hits) {
            *h += ok as usize;
        }
        hits[3] += slot_hits.iter().all(|&ok| ok) as usize;
    }
    let n = gold.len();
    Ok(EvalReport {
        split: split.to_owned(),
        store,
        n,
        accuracy: hits.map(|h| h as f64 / n as f64),
    })
}

/// Links every slot to the id most frequent at that position in training
/// facts. Ties go to the smallest id.
pub fn frequency_baseline(train: &[Alignment]) -> Result<KgFact> {
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let modal = |pick: fn(&KgFact) -> &str| {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for a in train {
            *counts.entry(pick(&a.fact)).or_default() += 1;
        }
        let mut best = ("", 0);
        for (id, c) in counts {
            if c > best.1 {
                best = (id, c);
            }
        }
        best.0.to_owned()
    };
    Ok(KgFact {
        subject: modal(|f| &f.subject),
        predicate: modal(|f| &f.predicate),
        object: modal(|f| &f.object),
    })
}

/// Samples every slot uniformly from the entries of the matching kind.
pub struct RandomLinker {
    entities: Vec<String>,
    predicates: Vec<String>,
    rng: ChaCha8Rng,
}

impl RandomLinker {
    pub fn new(store: &KgStore, seed: u64) -> Result<Self> {
        let entities: Vec<String> = store.entities().map(|e| e.id.clone()).collect();
        let predicates: Vec<String> = store.predicates().map(|e| e.id.clone()).collect();
        if entities.is_empty() || predicates.is_empty() {
            return Err(Error::Config("random baseline needs at least one entity and one predicate".into()));
        }
        Ok(Self {
            entities,
            predicates,
            rng: rng::stream(seed, RANDOM_BASELINE),
        })
    }

    pub fn sample(&mut self) -> KgFact {
        let mut draw = |ids: &[String]| ids[self.rng.gen_range(0..ids.len())].clone();
        let subject = draw(&self.entities);
        let predicate = draw(&self.predicates);
        let object = draw(&self.entities);
        KgFact {
            subject,
            predicate,
            object,
        }
    }
}

pub fn random_baseline(store: &KgStore, seed: u64) -> Result<RandomLinker> {
    RandomLinker::new(store, seed)
}

/// Unweighted mean of each metric across reports.
pub fn macro_score(reports: &[EvalReport]) -> Result<[f64; 4]> {
    if reports.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut out = [0.0; 4];
    for r in reports {
        for (o, v) in out.iter_mut().zip(r.accuracy) {
            *o += v;
        }
    }
    Ok(out.map(|v| v / reports.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Table,
    Records,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "records" => Ok(ReportFormat::Records),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub split: String,
    pub store: StoreKind,
    pub metric: Metric,
    pub value: f64,
    pub sem: f64,
    pub n: usize,
}

/// Table mode prints percentages to one decimal under a fixed header;
/// records mode writes one line per metric at full precision.
pub fn emit_report(report: &EvalReport, format: ReportFormat) -> Result<Vec<u8>> {
    if report.n == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let mut out = Vec::new();
    match format {
        ReportFormat::Table => {
            let titles = Metric::ALL.map(Metric::title);
            let mut text = titles.join("  ");
            text.push('\n');
            let cells: Vec<String> = Metric::ALL
                .iter()
                .zip(titles)
                .map(|(&m, t)| format!("{:>w$.1}", 100.0 * report.value(m), w = t.len()))
                .collect();
            let _ = writeln!(text, "{}", cells.join("  "));
            out.extend_from_slice(text.as_bytes());
        }
        ReportFormat::Records => {
            for metric in Metric::ALL {
                let record = MetricRecord {
                    split: report.split.clone(),
                    store: report.store,
                    metric,
                    value: report.value(metric),
                    sem: report.sem(metric),
                    n: report.n,
                };
                write_record(&mut out, &record)?;
            }
        }
    }
    Ok(out)
}

/// Regroups metric records into reports, in order of first appearance.
pub fn read_report_records<R: BufRead>(reader: R) -> Result<Vec<EvalReport>> {
    let mut reports: Vec<EvalReport> = Vec::new();
    let mut seen: Vec<[bool; 4]> = Vec::new();
    for (line, rec) in read_records::<MetricRecord, _>(reader)? {
        let pos = reports.iter().position(|r| r.split == rec.split && r.store == rec.store);
        let i = match pos {
            Some(i) => i,
            None => {
                reports.push(EvalReport {
                    split: rec.split.clone(),
                    store: rec.store,
                    n: rec.n,
                    accuracy: [0.0; 4],
                });
                seen.push([false; 4]);
                reports.len() - 1
            }
        };
        if reports[i].n != rec.n || seen[i][rec.metric.index()] {
            return Err(Error::MalformedRecord {
                line,
                reason: format!("inconsistent record for {} / {}", rec.split, rec.store.name()),
            });
        }
        reports[i].accuracy[rec.metric.index()] = rec.value;
        seen[i][rec.metric.index()] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s.iter().all(|&b| b)) {
        return Err(Error::Format(format!("report {} / {} lacks a metric", reports[i].split, reports[i].store.name())));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::OieTriple;
    use crate::kg::KgEntry;
    use crate::text::Normalizer;

    fn fact(s: &str, p: &str, o: &str) -> KgFact {
        KgFact::new(s, p, o)
    }

    fn aligned(f: KgFact) -> Alignment {
        Alignment::new("s", OieTriple::new("a", "b", "c").unwrap(), f)
    }

    #[test]
    fn all_correct_scores_one() {
        let gold = vec![fact("Q1", "P1", "Q2"), fact("Q2", "P1", "Q3")];
        let r = score_linking(&gold, &gold, "transductive", StoreKind::Brkg).unwrap();
        assert_eq!(r.accuracy, [1.0; 4]);
        assert_eq!(r.sem(Metric::Fact), 0.0);
    }

    #[test]
    fn wrong_subject_counts_toward_other_slots_only() {
        let gold = vec![fact("Q1", "P1", "Q2"), fact("Q2", "P1", "Q3")];
        let pred = vec![fact("Q9", "P1", "Q2"), fact("Q2", "P1", "Q3")];
        let r = score_linking(&pred, &gold, "t", StoreKind::Brkg).unwrap();
        assert_eq!(r.accuracy, [0.5, 1.0, 1.0, 0.5]);
    }

    #[test]
    fn sem_of_half_over_hundred() {
        assert!((sem(0.5, 100) - 0.05).abs() < 1e-12);
        assert_eq!(sem(0.0, 10), 0.0);
        assert_eq!(sem(1.0, 10), 0.0);
        assert!(sem(0.3, 10) > 0.0);
    }

    #[test]
    fn mismatched_and_empty_inputs_are_rejected() {
        let gold = vec![fact("Q1", "P1", "Q2")];
        assert!(matches!(
            score_linking(&[], &gold, "t", StoreKind::Large),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(score_linking(&[], &[], "t", StoreKind::Large), Err(Error::EmptyEvaluation)));
    }

    #[test]
    fn frequency_baseline_takes_modes_with_smallest_id_ties() {
        let train: Vec<Alignment> = [
            fact("Q2", "P1", "Q5"),
            fact("Q1", "P1", "Q5"),
            fact("Q3", "P2", "Q4"),
        ]
        .into_iter()
        .map(aligned)
        .collect();
        assert_eq!(frequency_baseline(&train).unwrap(), fact("Q1", "P1", "Q5"));
        assert!(frequency_baseline(&[]).is_err());
    }

    #[test]
    fn uniform_predicates_give_one_over_m() {
        let m = 4;
        let train: Vec<Alignment> = (0..400).map(|i| aligned(fact("Q1", &format!("P{}", i % m), "Q2"))).collect();
        let constant = frequency_baseline(&train).unwrap();
        let gold: Vec<KgFact> = (0..1000).map(|i| fact("Q1", &format!("P{}", i % m), "Q2")).collect();
        let pred = vec![constant; gold.len()];
        let r = score_linking(&pred, &gold, "t", StoreKind::Brkg).unwrap();
        assert!((r.value(Metric::Relation) - 1.0 / m as f64).abs() < 1e-9);
    }

    fn store(entities: usize, predicates: usize) -> KgStore {
        let mut entries: Vec<KgEntry> = (0..entities).map(|i| KgEntry::entity(&format!("Q{i}"), &format!("e{i}"))).collect();
        entries.extend((0..predicates).map(|i| KgEntry::predicate(&format!("P{i}"), &format!("p{i}"))));
        KgStore::new(entries, vec![], Normalizer::default()).unwrap()
    }

    #[test]
    fn random_baseline_on_singleton_store_is_perfect() {
        let mut linker = random_baseline(&store(1, 1), 3).unwrap();
        for _ in 0..5 {
            assert_eq!(linker.sample(), fact("Q0", "P0", "Q0"));
        }
    }

    #[test]
    fn random_subject_accuracy_matches_inventory_size() {
        let entities = 20;
        let n = 20_000;
        let mut linker = random_baseline(&store(entities, 5), 11).unwrap();
        let gold = vec![fact("Q7", "P1", "Q3"); n];
        let pred: Vec<KgFact> = (0..n).map(|_| linker.sample()).collect();
        let r = score_linking(&pred, &gold, "t", StoreKind::Large).unwrap();
        let p = 1.0 / entities as f64;
        assert!((r.value(Metric::Subject) - p).abs() < 3.0 * sem(p, n));
        assert!((r.value(Metric::Relation) - 0.2).abs() < 3.0 * sem(0.2, n));
    }

    fn report(values: [f64; 4]) -> EvalReport {
        EvalReport {
            split: "transductive".into(),
            store: StoreKind::Brkg,
            n: 250,
            accuracy: values,
        }
    }

    #[test]
    fn macro_score_averages() {
        let m = macro_score(&[report([0.620, 0.5, 0.4, 0.3]), report([0.536, 0.5, 0.2, 0.1])]).unwrap();
        assert!((100.0 * m[0] - 57.8).abs() < 1e-9);
        let single = report([0.1, 0.2, 0.3, 0.05]);
        assert_eq!(macro_score(std::slice::from_ref(&single)).unwrap(), single.accuracy);
        assert!(macro_score(&[]).is_err());
    }

    #[test]
    fn table_layout() {
        let text = String::from_utf8(emit_report(&report([0.62, 0.533, 0.0, 0.12345]), ReportFormat::Table).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "Subject  Relation  Object  Fact");
        assert_eq!(lines[1], "   62.0      53.3     0.0  12.3");
    }

    #[test]
    fn records_round_trip_and_empty_report_fails() {
        let a = report([0.1 + 0.2, 1.0 / 3.0, 0.5, 0.0]);
        let mut b = report([0.9, 0.8, 0.7, 0.6]);
        b.store = StoreKind::Large;
        let mut bytes = emit_report(&a, ReportFormat::Records).unwrap();
        bytes.extend(emit_report(&b, ReportFormat::Records).unwrap());
        assert_eq!(read_report_records(bytes.as_slice()).unwrap(), vec![a, b]);

        let mut empty = report([0.0; 4]);
        empty.n = 0;
        assert!(matches!(emit_report(&empty, ReportFormat::Table), Err(Error::EmptyEvaluation)));
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn facts() -> impl Strategy<Value = Vec<(KgFact, KgFact)>> {
        let id = |p: &'static str| (0u8..3).prop_map(move |i| format!("{p}{i}"));
        let f = move || (id("Q"), id("P"), id("Q")).prop_map(|(s, p, o)| KgFact::new(&s, &p, &o));
        prop::collection::vec((f(), f()), 1..40)
    }

    proptest! {
        #[test]
        fn fact_accuracy_bounded_by_slots(pairs in facts()) {
            let (pred, gold): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let r = score_linking(&pred, &gold, "t", StoreKind::Brkg).unwrap();
            let min_slot = r.accuracy[..3].iter().copied().fold(1.0, f64::min);
            prop_assert!(r.value(Metric::Fact) <= min_slot);
            for m in Metric::ALL {
                let v = r.value(m);
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert_eq!(r.sem(m) == 0.0, v == 0.0 || v == 1.0);
            }
        }

        #[test]
        fn macro_is_permutation_invariant(values in prop::collection::vec(prop::array::uniform4(0.0f64..1.0), 1..8)) {
            let reports: Vec<EvalReport> = values.iter().map(|v| EvalReport {
                split: "t".into(), store: StoreKind::Brkg, n: 10, accuracy: *v,
            }).collect();
            let mut rev = reports.clone();
            rev.reverse();
            let a = macro_score(&reports).unwrap();
            let b = macro_score(&rev).unwrap();
            for (x, y) in a.iter().zip(b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
