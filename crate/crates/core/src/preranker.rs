//! Per-slot dense retrieval against KG entry embeddings, and contrastive
//! training of the encoder with in-batch plus globally sampled negatives.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Alignment, OieTriple};
use crate::encoder::{read_f32s, read_u32, write_f32s, Embedding, Encoder, EncoderGrad, ReferenceEncoder, Slot};
use crate::error::{Error, Result};
use crate::kg::{EntryKind, KgFact, KgStore};
use crate::rng;

/// Rows scanned per block during top-k search.
const SCAN_CHUNK: usize = 256;

/// Row-unit-norm matrix of entry embeddings of one kind.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    kind: EntryKind,
    dim: usize,
    ids: Vec<String>,
    positions: HashMap<String, usize>,
    matrix: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntry {
    pub id: String,
    pub score: f32,
}

/// Score-descending, id-ascending order.
fn rank_order(a: (f32, &str), b: (f32, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

impl EmbeddingIndex {
    /// Rows are stored in input order.
    pub fn build(kind: EntryKind, dim: usize, embeddings: Vec<(String, Embedding)>) -> Result<Self> {
        let mut ids = Vec::with_capacity(embeddings.len());
        let mut positions = HashMap::with_capacity(embeddings.len());
        let mut matrix = Vec::with_capacity(embeddings.len() * dim);
        for (row, (id, emb)) in embeddings.into_iter().enumerate() {
            if emb.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: emb.dim(),
                });
            }
            if positions.insert(id.clone(), row).is_some() {
                return Err(Error::DuplicateId { line: row + 1, id });
            }
            ids.push(id);
            matrix.extend_from_slice(emb.values());
        }
        Ok(Self {
            kind,
            dim,
            ids,
            positions,
            matrix,
        })
    }

    /// Embeds every entry of `kind` in `store`, in store order.
    pub fn from_store(encoder: &dyn Encoder, store: &KgStore, kind: EntryKind, mask_description: bool) -> Result<Self> {
        let embeddings = store
            .entries_of(kind)
            .map(|e| Ok((e.id.clone(), encoder.entry_embed(e, mask_description)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::build(kind, encoder.dim(), embeddings)
    }

    pub fn kind(&self) -> EntryKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    /// Exact top-k by dot product over all rows.
    pub fn topk(&self, query: &Embedding, k: usize) -> Vec<ScoredEntry> {
        self.topk_where(query, k, |_| true)
    }

    /// Exact top-k restricted to rows accepted by `allow`; used for overlay
    /// views that hide or re-insert entries without touching the index.
    pub fn topk_where(&self, query: &Embedding, k: usize, allow: impl Fn(usize) -> bool) -> Vec<ScoredEntry> {
        if k == 0 || self.is_empty() {
            return Vec::new();
        }
        let q = query.values();
        let mut scored: Vec<(f32, usize)> = Vec::with_capacity(self.len());
        for chunk_start in (0..self.len()).step_by(SCAN_CHUNK) {
            let chunk_end = (chunk_start + SCAN_CHUNK).min(self.len());
            for i in chunk_start..chunk_end {
                if allow(i) {
                    scored.push((crate::encoder::dot(q, self.row(i)), i));
                }
            }
        }
        let cmp = |a: &(f32, usize), b: &(f32, usize)| rank_order((a.0, &self.ids[a.1]), (b.0, &self.ids[b.1]));
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        scored
            .into_iter()
            .map(|(score, i)| ScoredEntry {
                id: self.ids[i].clone(),
                score,
            })
            .collect()
    }

    const MAGIC: &'static [u8; 4] = b"FLIX";
    const VERSION: u32 = 1;

    /// Header {magic "FLIX", version u32, kind u8, count u64, dim u32},
    /// length-prefixed UTF-8 ids, then the row-major little-endian f32
    /// matrix.
    pub fn save<W: Write>(&self, writer: &mut W) -> Result<()> {
        writer.write_all(Self::MAGIC)?;
        writer.write_all(&Self::VERSION.to_le_bytes())?;
        let kind: u8 = match self.kind {
            EntryKind::Entity => 0,
            EntryKind::Predicate => 1,
        };
        writer.write_all(&[kind])?;
        writer.write_all(&(self.len() as u64).to_le_bytes())?;
        writer.write_all(&(self.dim as u32).to_le_bytes())?;
        for id in &self.ids {
            writer.write_all(&(id.len() as u32).to_le_bytes())?;
            writer.write_all(id.as_bytes())?;
        }
        write_f32s(writer, &self.matrix)
    }

    pub fn load<R: Read>(reader: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        reader.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Format("not an index file".into()));
        }
        let version = read_u32(reader)?;
        if version != Self::VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let mut kind = [0u8; 1];
        reader.read_exact(&mut kind)?;
        let kind = match kind[0] {
            0 => EntryKind::Entity,
            1 => EntryKind::Predicate,
            other => return Err(Error::Format(format!("unknown index kind {other}"))),
        };
        let mut count = [0u8; 8];
        reader.read_exact(&mut count)?;
        let count = u64::from_le_bytes(count) as usize;
        let dim = read_u32(reader)? as usize;
        let mut ids = Vec::with_capacity(count);
        let mut positions = HashMap::with_capacity(count);
        for row in 0..count {
            let len = read_u32(reader)? as usize;
            let mut buf = vec![0u8; len];
            reader.read_exact(&mut buf)?;
            let id = String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?;
            if positions.insert(id.clone(), row).is_some() {
                return Err(Error::DuplicateId { line: row + 1, id });
            }
            ids.push(id);
        }
        let matrix = read_f32s(reader, count * dim)?;
        Ok(Self {
            kind,
            dim,
            ids,
            positions,
            matrix,
        })
    }
}

/// Entity and predicate indices of one store.
#[derive(Clone, Debug)]
pub struct LinkIndices {
    pub entities: EmbeddingIndex,
    pub predicates: EmbeddingIndex,
}

impl LinkIndices {
    pub fn from_store(encoder: &dyn Encoder, store: &KgStore) -> Result<Self> {
        Ok(Self {
            entities: EmbeddingIndex::from_store(encoder, store, EntryKind::Entity, false)?,
            predicates: EmbeddingIndex::from_store(encoder, store, EntryKind::Predicate, false)?,
        })
    }

    pub fn for_slot(&self, slot: Slot) -> &EmbeddingIndex {
        match slot {
            Slot::Relation => &self.predicates,
            _ => &self.entities,
        }
    }
}

/// Ranked candidates per slot (subject, relation, object).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotLinkResult {
    pub lists: [Vec<ScoredEntry>; 3],
}

impl SlotLinkResult {
    pub fn slot(&self, slot: Slot) -> &[ScoredEntry] {
        &self.lists[slot.index()]
    }

    /// Top-1 of each slot; `None` when any list is empty.
    pub fn linked_fact(&self) -> Option<KgFact> {
        let [s, r, o] = &self.lists;
        Some(KgFact::new(&s.first()?.id, &r.first()?.id, &o.first()?.id))
    }
}

/// Links each slot to its most similar entries.
pub fn link(
    encoder: &dyn Encoder,
    indices: &LinkIndices,
    t: &OieTriple,
    k: usize,
    with_context: bool,
) -> Result<SlotLinkResult> {
    let embeddings = encoder.slot_embed(t, with_context)?;
    Ok(link_embedded(indices, &embeddings, k))
}

pub fn link_embedded(indices: &LinkIndices, embeddings: &[Embedding; 3], k: usize) -> SlotLinkResult {
    let lists = Slot::ALL.map(|slot| indices.for_slot(slot).topk(&embeddings[slot.index()], k));
    SlotLinkResult { lists }
}

/// Temperature-scaled InfoNCE: `-log(e^{p/τ} / (e^{p/τ} + Σ e^{n/τ}))`,
/// evaluated as a log-sum-exp.
pub fn infonce_loss(pos_sim: f64, neg_sims: &[f64], tau: f64) -> f64 {
    assert!(tau > 0.0, "temperature must be positive");
    let pos = pos_sim / tau;
    let max = neg_sims.iter().map(|n| n / tau).fold(pos, f64::max);
    let sum: f64 = std::iter::once(pos)
        .chain(neg_sims.iter().map(|n| n / tau))
        .map(|l| (l - max).exp())
        .sum();
    (max + sum.ln() - pos).max(0.0)
}

/// Loss together with its gradient w.r.t. the similarities and log τ.
#[derive(Clone, Debug, PartialEq)]
pub struct InfoNceGrad {
    pub loss: f64,
    pub d_pos: f64,
    pub d_negs: Vec<f64>,
    pub d_log_tau: f64,
}

pub fn infonce_grad(pos_sim: f64, neg_sims: &[f64], tau: f64) -> InfoNceGrad {
    let logits: Vec<f64> = std::iter::once(pos_sim)
        .chain(neg_sims.iter().copied())
        .map(|s| s / tau)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let loss = (max + z.ln() - logits[0]).max(0.0);
    // dL/dl_j = p_j - [j = 0]; dl_j/ds_j = 1/τ; dl_j/dlogτ = -l_j
    let dlogit: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(j, p)| if j == 0 { p - 1.0 } else { *p })
        .collect();
    let d_log_tau = -dlogit.iter().zip(&logits).map(|(d, l)| d * l).sum::<f64>();
    InfoNceGrad {
        loss,
        d_pos: dlogit[0] / tau,
        d_negs: dlogit[1..].iter().map(|d| d / tau).collect(),
        d_log_tau,
    }
}

/// Uniform draws of distinct entries of one kind, never returning an
/// excluded id.
#[derive(Clone, Debug)]
pub struct GlobalSampler {
    ids: Vec<String>,
}

impl GlobalSampler {
    pub fn new(store: &KgStore, kind: EntryKind) -> Self {
        Self {
            ids: store.entries_of(kind).map(|e| e.id.clone()).collect(),
        }
    }

    pub fn from_ids(ids: Vec<String>) -> Self {
        Self { ids }
    }

    /// Up to `count` distinct ids outside `exclude`, uniformly without
    /// replacement.
    pub fn sample<R: Rng>(&self, count: usize, exclude: &HashSet<&str>, rng: &mut R) -> Vec<String> {
        if count == 0 {
            return Vec::new();
        }
        let allowed: Vec<&String> = self.ids.iter().filter(|id| !exclude.contains(id.as_str())).collect();
        if allowed.len() <= count {
            return allowed.into_iter().cloned().collect();
        }
        rand::seq::index::sample(rng, allowed.len(), count)
            .into_iter()
            .map(|i| allowed[i].clone())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrerankTrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub temperature_init: f64,
    pub temperature_min: f64,
    pub global_neg_entities: usize,
    pub global_neg_predicates: usize,
    pub with_context: bool,
    /// Recorded for forward compatibility; only "sgd" is implemented.
    pub optimizer: String,
    pub seed: u64,
}

impl Default for PrerankTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 5e-5,
            weight_decay: 1e-3,
            batch_size: 32,
            temperature_init: 0.07,
            temperature_min: 0.01,
            global_neg_entities: 128,
            global_neg_predicates: 64,
            with_context: false,
            optimizer: "sgd".into(),
            seed: 0,
        }
    }
}

impl PrerankTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0
            || self.batch_size == 0
            || !(self.learning_rate > 0.0)
            || self.weight_decay < 0.0
            || !(self.temperature_init > 0.0)
            || !(self.temperature_min > 0.0)
        {
            return Err(Error::Config(format!("invalid pre-ranker config {self:?}")));
        }
        if self.optimizer != "sgd" {
            return Err(Error::Config(format!("unsupported optimizer {:?}", self.optimizer)));
        }
        Ok(())
    }
}

/// One line of a loss trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
    pub tau: f64,
}

#[derive(Clone, Debug)]
pub struct PrerankOutcome {
    pub encoder: ReferenceEncoder,
    pub tau: f64,
    pub trace: Vec<EpochLoss>,
}

/// Trains `encoder` contrastively on the alignments.
///
/// For each batch and slot, the aligned entry is the positive; negatives
/// are the same-kind entries of the other batch examples plus entries
/// sampled uniformly from the whole store (resampled per batch). Only KG
/// entries are sampled as negatives for OIE slots, not the reverse.
pub fn train_preranker(
    alignments: &[Alignment],
    store: &KgStore,
    encoder: ReferenceEncoder,
    config: &PrerankTrainConfig,
) -> Result<PrerankOutcome> {
    config.validate()?;
    if alignments.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    for a in alignments {
        for id in a.fact.ids() {
            if !store.contains(id) {
                return Err(Error::UnknownId(id.to_string()));
            }
        }
    }
    let mut encoder = encoder;
    let mut log_tau = config.temperature_init.ln();
    let min_log_tau = config.temperature_min.ln();
    let mut order_rng = rng::stream(config.seed, rng::ALIGN_ORDER);
    let mut neg_rng = rng::stream(config.seed, rng::NEGATIVES);
    let entity_sampler = GlobalSampler::new(store, EntryKind::Entity);
    let predicate_sampler = GlobalSampler::new(store, EntryKind::Predicate);

    let mut order: Vec<usize> = (0..alignments.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Alignment> = chunk.iter().map(|&i| &alignments[i]).collect();
            let step = BatchStep::run(
                &encoder,
                store,
                &batch,
                log_tau.exp(),
                config,
                &entity_sampler,
                &predicate_sampler,
                &mut neg_rng,
            )?;
            if !step.loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}")));
            }
            encoder.apply(&step.grad, config.learning_rate, config.weight_decay);
            log_tau = (log_tau - config.learning_rate as f64 * step.d_log_tau).max(min_log_tau);
            loss_sum += step.loss;
            batches += 1;
        }
        if !encoder.is_finite() {
            return Err(Error::Numeric(format!("parameters diverged at epoch {epoch}")));
        }
        trace.push(EpochLoss {
            epoch: epoch + 1,
            mean_loss: loss_sum / batches as f64,
            tau: log_tau.exp(),
        });
    }
    Ok(PrerankOutcome {
        encoder,
        tau: log_tau.exp(),
        trace,
    })
}

/// Candidate entry of a batch: which examples own it as a slot entry, and
/// whether it came from the global sample.
struct PoolEntry<'a> {
    id: &'a str,
    owners: Vec<usize>,
    global: bool,
}

struct BatchStep {
    loss: f64,
    d_log_tau: f64,
    grad: EncoderGrad,
}

impl BatchStep {
    #[allow(clippy::too_many_arguments)]
    fn run<R: Rng>(
        encoder: &ReferenceEncoder,
        store: &KgStore,
        batch: &[&Alignment],
        tau: f64,
        config: &PrerankTrainConfig,
        entity_sampler: &GlobalSampler,
        predicate_sampler: &GlobalSampler,
        rng: &mut R,
    ) -> Result<Self> {
        let n = batch.len();
        let d = encoder.config().dim;

        let triples = batch
            .iter()
            .map(|a| encoder.forward_triple(&a.oie, config.with_context))
            .collect::<Result<Vec<_>>>()?;

        let pool = |kind: EntryKind, count: usize, sampler: &GlobalSampler, rng: &mut R| {
            let mut pool: Vec<PoolEntry> = Vec::new();
            let mut at: HashMap<&str, usize> = HashMap::new();
            for (i, a) in batch.iter().enumerate() {
                let ids: &[&str] = match kind {
                    EntryKind::Entity => &[&a.fact.subject, &a.fact.object],
                    EntryKind::Predicate => &[&a.fact.predicate],
                };
                for &id in ids {
                    let slot = *at.entry(id).or_insert_with(|| {
                        pool.push(PoolEntry {
                            id,
                            owners: Vec::new(),
                            global: false,
                        });
                        pool.len() - 1
                    });
                    pool[slot].owners.push(i);
                }
            }
            let positives: HashSet<&str> = at.keys().copied().collect();
            let sampled = sampler.sample(count, &positives, rng);
            (pool, at, sampled)
        };
        let (mut entity_pool, entity_at, entity_global) =
            pool(EntryKind::Entity, config.global_neg_entities, entity_sampler, rng);
        let (mut predicate_pool, predicate_at, predicate_global) =
            pool(EntryKind::Predicate, config.global_neg_predicates, predicate_sampler, rng);
        for id in &entity_global {
            entity_pool.push(PoolEntry {
                id,
                owners: Vec::new(),
                global: true,
            });
        }
        for id in &predicate_global {
            predicate_pool.push(PoolEntry {
                id,
                owners: Vec::new(),
                global: true,
            });
        }

        let embed_pool = |pool: &[PoolEntry]| -> Result<Vec<_>> {
            pool.iter()
                .map(|p| {
                    let entry = store.get(p.id).ok_or_else(|| Error::UnknownId(p.id.to_string()))?;
                    encoder.forward_entry(entry, false)
                })
                .collect()
        };
        let entity_acts = embed_pool(&entity_pool)?;
        let predicate_acts = embed_pool(&predicate_pool)?;

        let mut entity_grads = vec![vec![0.0f32; d]; entity_pool.len()];
        let mut predicate_grads = vec![vec![0.0f32; d]; predicate_pool.len()];
        let mut slot_grads: Vec<[Vec<f32>; 3]> = (0..n).map(|_| [vec![0.0; d], vec![0.0; d], vec![0.0; d]]).collect();
        let scale = 1.0 / (3 * n) as f64;
        let mut loss = 0.0;
        let mut d_log_tau = 0.0;

        for (i, a) in batch.iter().enumerate() {
            for slot in Slot::ALL {
                let (pool, acts, grads, positive) = match slot {
                    Slot::Subject => (&entity_pool, &entity_acts, &mut entity_grads, entity_at[a.fact.subject.as_str()]),
                    Slot::Object => (&entity_pool, &entity_acts, &mut entity_grads, entity_at[a.fact.object.as_str()]),
                    Slot::Relation => (
                        &predicate_pool,
                        &predicate_acts,
                        &mut predicate_grads,
                        predicate_at[a.fact.predicate.as_str()],
                    ),
                };
                let query = &triples[i].slots[slot.index()].embedding;
                let negatives: Vec<usize> = pool
                    .iter()
                    .enumerate()
                    .filter(|(j, p)| *j != positive && (p.global || p.owners.iter().any(|&o| o != i)))
                    .map(|(j, _)| j)
                    .collect();
                let pos_sim = query.dot(&acts[positive].embedding) as f64;
                let neg_sims: Vec<f64> = negatives.iter().map(|&j| query.dot(&acts[j].embedding) as f64).collect();
                let g = infonce_grad(pos_sim, &neg_sims, tau);
                loss += g.loss * scale;
                d_log_tau += g.d_log_tau * scale;

                let q = query.values();
                let qgrad = &mut slot_grads[i][slot.index()];
                let mut push = |j: usize, dsim: f64| {
                    let w = (dsim * scale) as f32;
                    if w == 0.0 {
                        return;
                    }
                    for ((qg, kv), (kg, qv)) in qgrad
                        .iter_mut()
                        .zip(acts[j].embedding.values())
                        .zip(grads[j].iter_mut().zip(q))
                    {
                        *qg += w * kv;
                        *kg += w * qv;
                    }
                };
                push(positive, g.d_pos);
                for (&j, &dn) in negatives.iter().zip(&g.d_negs) {
                    push(j, dn);
                }
            }
        }

        let mut grad = EncoderGrad::zeros(encoder.config());
        for (act, g) in triples.iter().zip(&slot_grads) {
            encoder.backward_triple(act, g, &mut grad);
        }
        for (act, g) in entity_acts.iter().zip(&entity_grads) {
            encoder.backward_entry(act, g, &mut grad);
        }
        for (act, g) in predicate_acts.iter().zip(&predicate_grads) {
            encoder.backward_entry(act, g, &mut grad);
        }
        Ok(Self { loss, d_log_tau, grad })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::kg::KgEntry;
    use crate::text::Normalizer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f32>) -> Embedding {
        Embedding::normalized(v).unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Embedding {
        unit((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn build_and_persist() {
        let rows = vec![
            ("Q1".to_string(), unit(vec![1.0, 0.0, 0.0])),
            ("Q2".to_string(), unit(vec![0.0, 1.0, 0.0])),
            ("Q3".to_string(), unit(vec![0.3, 0.3, 0.9])),
        ];
        let index = EmbeddingIndex::build(EntryKind::Entity, 3, rows.clone()).unwrap();
        assert_eq!(index.len(), 3);
        let mut buf = Vec::new();
        index.save(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"FLIX");
        let loaded = EmbeddingIndex::load(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded, index);
        let mut again = Vec::new();
        loaded.save(&mut again).unwrap();
        assert_eq!(again, buf);

        let mut dup = rows.clone();
        dup.push(("Q1".into(), unit(vec![1.0, 1.0, 1.0])));
        assert!(matches!(
            EmbeddingIndex::build(EntryKind::Entity, 3, dup),
            Err(Error::DuplicateId { line: 4, .. })
        ));

        let empty = EmbeddingIndex::build(EntryKind::Predicate, 3, vec![]).unwrap();
        assert!(empty.topk(&unit(vec![1.0, 0.0, 0.0]), 5).is_empty());
    }

    #[test]
    fn topk_identity_orthogonal_and_truncation() {
        let rows = vec![
            ("b".to_string(), unit(vec![0.0, 1.0, 0.0])),
            ("a".to_string(), unit(vec![0.0, 0.0, 1.0])),
            ("c".to_string(), unit(vec![0.0, 0.6, 0.8])),
        ];
        let index = EmbeddingIndex::build(EntryKind::Entity, 3, rows).unwrap();
        let hits = index.topk(&unit(vec![0.0, 0.6, 0.8]), 1);
        assert_eq!(hits[0].id, "c");
        assert!((hits[0].score - 1.0).abs() < 1e-6);

        let hits = index.topk(&unit(vec![1.0, 0.0, 0.0]), 10);
        assert_eq!(hits.len(), 3);
        let ids: Vec<&str> = hits.iter().map(|h| h.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
        assert!(hits.iter().all(|h| h.score.abs() < 1e-6));
    }

    #[test]
    fn topk_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<(String, Embedding)> = (0..1000).map(|i| (format!("E{i:04}"), random_unit(&mut rng, 8))).collect();
        let index = EmbeddingIndex::build(EntryKind::Entity, 8, rows.clone()).unwrap();
        let q = random_unit(&mut rng, 8);
        let mut oracle: Vec<(f32, &str)> = rows.iter().map(|(id, e)| (q.dot(e), id.as_str())).collect();
        oracle.sort_by(|a, b| rank_order(*a, *b));
        let got: Vec<String> = index.topk(&q, 5).into_iter().map(|h| h.id).collect();
        let want: Vec<String> = oracle[..5].iter().map(|(_, id)| id.to_string()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn infonce_cases() {
        assert_eq!(infonce_loss(0.7, &[], 0.07), 0.0);
        for tau in [0.01, 0.07, 1.0, 5.0] {
            assert!((infonce_loss(0.3, &[0.3], tau) - 2f64.ln()).abs() < 1e-12);
        }
        // pos=0.9, negs=[0.1,-0.2], tau=0.07 evaluated in closed form
        let direct = -((0.9f64 / 0.07).exp() / ((0.9f64 / 0.07).exp() + (0.1f64 / 0.07).exp() + (-0.2f64 / 0.07).exp())).ln();
        assert!((infonce_loss(0.9, &[0.1, -0.2], 0.07) - direct).abs() < 1e-12);
        // frozen from a 40-digit evaluation
        assert!((infonce_loss(0.9, &[0.1, -0.2], 0.07) - 1.102983132279095e-5).abs() < 1e-15);
        // permutation invariance
        let a = infonce_loss(0.2, &[0.5, -0.1, 0.3], 0.1);
        let b = infonce_loss(0.2, &[0.3, 0.5, -0.1], 0.1);
        assert!((a - b).abs() < 1e-12);
        // large logits stay finite
        assert!(infonce_loss(-1.0, &[1.0], 1e-3).is_finite());
    }

    #[test]
    fn sampler_excludes_and_is_uniform() {
        let ids: Vec<String> = (0..50).map(|i| format!("Q{i}")).collect();
        let sampler = GlobalSampler::from_ids(ids);
        let exclude: HashSet<&str> = ["Q7"].into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts: HashMap<String, usize> = HashMap::new();
        let draws = 100_000;
        for _ in 0..draws {
            let got = sampler.sample(1, &exclude, &mut rng);
            *counts.entry(got[0].clone()).or_default() += 1;
        }
        assert!(!counts.contains_key("Q7"));
        assert_eq!(counts.len(), 49);
        let p = 1.0 / 49.0;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for &c in counts.values() {
            assert!((c as f64 - mean).abs() < 3.0 * sigma + 1.0, "count {c} vs {mean}");
        }
        let many = sampler.sample(100, &exclude, &mut rng);
        assert_eq!(many.len(), 49);
    }

    fn tiny_world() -> (KgStore, Vec<Alignment>) {
        let mut entries = Vec::new();
        for i in 0..12 {
            entries.push(KgEntry::entity(&format!("Q{i}"), &format!("entity{i} name{}", i * 7 % 5)));
        }
        for i in 0..3 {
            entries.push(KgEntry::predicate(&format!("P{i}"), &format!("relation{i}")));
        }
        let mut facts = Vec::new();
        let mut alignments = Vec::new();
        for i in 0..12 {
            let f = KgFact::new(&format!("Q{i}"), &format!("P{}", i % 3), &format!("Q{}", (i + 5) % 12));
            let t = OieTriple::new(
                &format!("entity{i} name{}", i * 7 % 5),
                &format!("relation{}", i % 3),
                &format!("entity{} name{}", (i + 5) % 12, ((i + 5) % 12) * 7 % 5),
            )
            .unwrap();
            facts.push(f.clone());
            alignments.push(Alignment::new("s", t, f));
        }
        (KgStore::new(entries, facts, Normalizer::default()).unwrap(), alignments)
    }

    fn tiny_encoder() -> ReferenceEncoder {
        ReferenceEncoder::new(EncoderConfig {
            dim: 16,
            hidden: 8,
            buckets: 1 << 12,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn no_negatives_means_zero_loss() {
        let (store, alignments) = tiny_world();
        let config = PrerankTrainConfig {
            epochs: 2,
            batch_size: 1,
            global_neg_entities: 0,
            global_neg_predicates: 0,
            learning_rate: 0.5,
            ..Default::default()
        };
        let out = train_preranker(&alignments, &store, tiny_encoder(), &config).unwrap();
        assert!(out.trace.iter().all(|e| e.mean_loss == 0.0));
        assert_eq!(out.encoder, {
            // zero loss still applies weight decay; compare against pure decay
            let mut e = tiny_encoder();
            let zero = EncoderGrad::zeros(e.config());
            for _ in 0..24 {
                e.apply(&zero, 0.5, 1e-3);
            }
            e
        });
    }

    #[test]
    fn training_is_reproducible_and_learns() {
        let (store, alignments) = tiny_world();
        let config = PrerankTrainConfig {
            epochs: 15,
            batch_size: 4,
            global_neg_entities: 4,
            global_neg_predicates: 1,
            learning_rate: 2.0,
            seed: 5,
            ..Default::default()
        };
        let a = train_preranker(&alignments, &store, tiny_encoder(), &config).unwrap();
        let b = train_preranker(&alignments, &store, tiny_encoder(), &config).unwrap();
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.trace, b.trace);
        assert!(a.trace.last().unwrap().mean_loss < a.trace[0].mean_loss);
        assert!(a.tau >= 0.01);

        assert!(matches!(
            train_preranker(&[], &store, tiny_encoder(), &config),
            Err(Error::EmptyTrainingSet)
        ));
    }

    #[test]
    fn link_lists_have_k_and_truncate() {
        let (store, alignments) = tiny_world();
        let enc = tiny_encoder();
        let indices = LinkIndices::from_store(&enc, &store).unwrap();
        let r = link(&enc, &indices, &alignments[0].oie, 5, false).unwrap();
        assert_eq!(r.slot(Slot::Subject).len(), 5);
        assert_eq!(r.slot(Slot::Relation).len(), 3);
        for list in &r.lists {
            assert!(list.windows(2).all(|w| w[0].score >= w[1].score));
        }
        assert_eq!(r, link(&enc, &indices, &alignments[0].oie, 5, false).unwrap());
        assert!(r.linked_fact().is_some());
    }
}
