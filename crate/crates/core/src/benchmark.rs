//! End-to-end benchmark construction: alignment, alias augmentation,
//! leakage removal and the four evaluation facets.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{self, Alignment, OieTriple, Partition, SentenceFactPair};
use crate::error::Result;
use crate::kg::KgStore;
use crate::splits::{self, InductiveMode, SplitKind, SplitResult, SplitStats};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub augment_aliases: bool,
    pub inductive_mode: InductiveMode,
    /// Drop KG entries taking part in fewer facts than this before aligning.
    pub min_frequency: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            augment_aliases: true,
            inductive_mode: InductiveMode::AnyEntityUnseen,
            min_frequency: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub train: Vec<Alignment>,
    pub test: Vec<Alignment>,
}

impl Benchmark {
    pub fn all(&self) -> Vec<Alignment> {
        self.train.iter().chain(&self.test).cloned().collect()
    }

    /// The KG restricted to entries and facts the benchmark references.
    pub fn brkg(&self, store: &KgStore) -> Result<KgStore> {
        store.restrict_to_benchmark(&self.all())
    }

    /// The KG as seen at training time: only what training facts touch.
    pub fn training_store(&self, store: &KgStore) -> Result<KgStore> {
        store.restrict_to_benchmark(&self.train)
    }

    /// Facets of the test set; polysemy is judged against `eval_store`.
    pub fn facets(&self, eval_store: &KgStore, mode: InductiveMode) -> [SplitResult; 4] {
        SplitKind::ALL.map(|kind| {
            splits::make_split(
                splits::SplitSpec {
                    kind,
                    inductive_mode: mode,
                },
                &self.test,
                &self.train,
                eval_store,
            )
        })
    }

    pub fn stats(&self) -> [SplitStats; 2] {
        [
            SplitStats::recount("train", &self.train),
            SplitStats::recount("test", &self.test),
        ]
    }
}

/// Aligns, augments and de-leaks. Sentences keep their dataset partition.
pub fn build_benchmark(
    store: &KgStore,
    oies: &BTreeMap<String, Vec<OieTriple>>,
    pairs: &[SentenceFactPair],
    config: &BenchmarkConfig,
) -> Result<Benchmark> {
    let filtered;
    let store = if config.min_frequency > 0 {
        filtered = store.filter_by_frequency(config.min_frequency);
        &filtered
    } else {
        store
    };
    let pairs: Vec<SentenceFactPair> = pairs
        .iter()
        .filter(|p| p.fact.ids().iter().all(|id| store.contains(id)))
        .cloned()
        .collect();
    let partition: HashMap<&str, Partition> = pairs.iter().map(|p| (p.sentence_id.as_str(), p.partition)).collect();
    let aligned = corpus::align(oies, &pairs, store)?;
    let (train, test): (Vec<Alignment>, Vec<Alignment>) = aligned
        .into_iter()
        .partition(|a| partition.get(a.sentence_id.as_str()) != Some(&Partition::Test));
    let (train, test) = if config.augment_aliases {
        (corpus::augment_aliases(&train, store)?, corpus::augment_aliases(&test, store)?)
    } else {
        (train, test)
    };
    let train = corpus::remove_leakage(&train, &test, store.normalizer());
    Ok(Benchmark { train, test })
}
