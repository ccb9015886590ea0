//! Whole-fact re-ranking over the cartesian product of per-slot candidate
//! lists.
//!
//! A candidate (subject, predicate, object) is scored against the OIE with a
//! logistic model over cross features of frozen embeddings. Per slot the
//! features are the elementwise product of the slot and entry embeddings,
//! the elementwise product of the entry with the next slot's entry (cyclic:
//! subject-predicate, predicate-object, object-subject), the cosine, its
//! square and a constant 1. Product blocks are scaled by `sqrt(d)` so every
//! block has unit-order norm.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Alignment, OieTriple};
use crate::encoder::{Embedding, Encoder};
use crate::error::{Error, Result};
use crate::io::{read_records, write_record};
use crate::kg::{EntryKind, KgFact, KgStore};
use crate::preranker::{EmbeddingIndex, SlotLinkResult};
use crate::rng;

/// Length of the cross-feature vector for embedding dimension `dim`.
pub fn feature_len(dim: usize) -> usize {
    6 * dim + 9
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CandidateFact {
    pub subject_id: String,
    pub predicate_id: String,
    pub object_id: String,
    /// Position of each id in its slot list.
    pub ranks: [usize; 3],
}

impl CandidateFact {
    pub fn to_fact(&self) -> KgFact {
        KgFact::new(&self.subject_id, &self.predicate_id, &self.object_id)
    }

    fn ids(&self) -> [&str; 3] {
        [&self.subject_id, &self.predicate_id, &self.object_id]
    }
}

/// Cartesian product of the three slot lists in rank-lexicographic order.
pub fn enumerate_candidates(result: &SlotLinkResult) -> Vec<CandidateFact> {
    let [s, r, o] = &result.lists;
    let mut out = Vec::with_capacity(s.len() * r.len() * o.len());
    for (i, se) in s.iter().enumerate() {
        for (j, re) in r.iter().enumerate() {
            for (k, oe) in o.iter().enumerate() {
                out.push(CandidateFact {
                    subject_id: se.id.clone(),
                    predicate_id: re.id.clone(),
                    object_id: oe.id.clone(),
                    ranks: [i, j, k],
                });
            }
        }
    }
    out
}

/// Cross features of slot embeddings against candidate entry embeddings.
pub fn cross_features(slots: &[Embedding; 3], entries: [&Embedding; 3]) -> Vec<f32> {
    let d = slots[0].dim();
    let scale = (d as f32).sqrt();
    let mut out = Vec::with_capacity(feature_len(d));
    for i in 0..3 {
        let q = slots[i].values();
        let k = entries[i].values();
        let next = entries[(i + 1) % 3].values();
        out.extend(q.iter().zip(k).map(|(a, b)| scale * a * b));
        out.extend(k.iter().zip(next).map(|(a, b)| scale * a * b));
        let cos = slots[i].dot(entries[i]);
        out.extend([cos, cos * cos, 1.0]);
    }
    out
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of `sigmoid(logit)` against `label`, stable for
/// large |logit|.
pub fn bce_loss(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossScorerParams {
    pub dim: usize,
    pub weights: Vec<f32>,
    pub bias: f32,
    pub seed: u64,
}

/// Gradient of [`bce_loss`] with respect to weights and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct BceGrad {
    pub loss: f64,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl CrossScorerParams {
    pub fn zeros(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            weights: vec![0.0; feature_len(dim)],
            bias: 0.0,
            seed,
        }
    }

    pub fn logit(&self, features: &[f32]) -> f64 {
        let dot: f64 = self.weights.iter().zip(features).map(|(&w, &x)| w as f64 * x as f64).sum();
        dot + self.bias as f64
    }

    pub fn score_features(&self, features: &[f32]) -> f64 {
        sigmoid(self.logit(features))
    }

    pub fn bce_grad(&self, features: &[f32], label: f64) -> BceGrad {
        let z = self.logit(features);
        let delta = sigmoid(z) - label;
        BceGrad {
            loss: bce_loss(z, label),
            weights: features.iter().map(|&x| delta * x as f64).collect(),
            bias: delta,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }

    fn check(&self) -> Result<()> {
        if self.weights.len() != feature_len(self.dim) {
            return Err(Error::DimensionMismatch {
                expected: feature_len(self.dim),
                got: self.weights.len(),
            });
        }
        if !self.is_finite() {
            return Err(Error::Numeric("non-finite scorer params".into()));
        }
        Ok(())
    }

    /// Header line `{dim, seed, bias}` followed by a line holding the
    /// weights as 32-bit floats.
    pub fn save<W: Write>(&self, writer: &mut W) -> Result<()> {
        write_record(
            writer,
            &ParamsHeader {
                dim: self.dim,
                seed: self.seed,
                bias: self.bias,
            },
        )?;
        write_record(writer, &WeightsRecord { weights: self.weights.clone() })
    }

    pub fn load<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let mut next = |what: &str| -> Result<String> {
            for line in lines.by_ref() {
                let line = line?;
                if !line.trim().is_empty() && !line.starts_with("{\"header\":") {
                    return Ok(line);
                }
            }
            Err(Error::Format(format!("scorer params file lacks {what}")))
        };
        let header: ParamsHeader = serde_json::from_str(&next("a header")?)?;
        let weights: WeightsRecord = serde_json::from_str(&next("weights")?)?;
        let params = Self {
            dim: header.dim,
            weights: weights.weights,
            bias: header.bias,
            seed: header.seed,
        };
        params.check()?;
        Ok(params)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsHeader {
    dim: usize,
    seed: u64,
    bias: f32,
}

#[derive(Serialize, Deserialize)]
struct WeightsRecord {
    weights: Vec<f32>,
}

/// Entry embeddings computed on demand and cached per masking state.
pub struct EntryCache<'a> {
    encoder: &'a dyn Encoder,
    store: &'a KgStore,
    cache: HashMap<(String, bool), Embedding>,
}

impl<'a> EntryCache<'a> {
    pub fn new(encoder: &'a dyn Encoder, store: &'a KgStore) -> Self {
        Self {
            encoder,
            store,
            cache: HashMap::new(),
        }
    }

    pub fn get(&mut self, id: &str, mask_description: bool) -> Result<&Embedding> {
        let key = (id.to_string(), mask_description);
        if !self.cache.contains_key(&key) {
            let entry = self.store.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
            let e = self.encoder.entry_embed(entry, mask_description)?;
            self.cache.insert(key.clone(), e);
        }
        Ok(&self.cache[&key])
    }

    fn features(&mut self, slots: &[Embedding; 3], ids: [&str; 3], mask: bool) -> Result<Vec<f32>> {
        let [s, p, o] = ids;
        let s = self.get(s, mask)?.clone();
        let p = self.get(p, mask)?.clone();
        let o = self.get(o, mask)?;
        Ok(cross_features(slots, [&s, &p, o]))
    }
}

/// Scores one candidate against an OIE.
pub fn score_fact(
    params: &CrossScorerParams,
    encoder: &dyn Encoder,
    store: &KgStore,
    t: &OieTriple,
    f: &CandidateFact,
    mask_description: bool,
    with_context: bool,
) -> Result<f64> {
    let slots = encoder.slot_embed(t, with_context)?;
    let mut cache = EntryCache::new(encoder, store);
    let features = cache.features(&slots, f.ids(), mask_description)?;
    Ok(params.score_features(&features))
}

/// Index of the first maximum.
pub fn first_argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Best candidate (first maximum in candidate order) and all scores.
pub fn rerank(
    params: &CrossScorerParams,
    cache: &mut EntryCache,
    slots: &[Embedding; 3],
    candidates: &[CandidateFact],
) -> Result<(CandidateFact, Vec<f64>)> {
    let mut scores = Vec::with_capacity(candidates.len());
    for c in candidates {
        let features = cache.features(slots, c.ids(), false)?;
        scores.push(params.score_features(&features));
    }
    let best = first_argmax(&scores).ok_or_else(|| Error::Config("no candidates to re-rank".into()))?;
    Ok((candidates[best].clone(), scores))
}

/// Per-entry most similar same-kind entries, excluding the entry itself.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NeighborLists(pub BTreeMap<String, Vec<String>>);

#[derive(Serialize, Deserialize)]
struct NeighborRecord {
    id: String,
    neighbors: Vec<String>,
}

impl NeighborLists {
    pub fn compute(encoder: &dyn Encoder, store: &KgStore, size: usize, mask_description: bool) -> Result<Self> {
        let mut out = BTreeMap::new();
        for kind in [EntryKind::Entity, EntryKind::Predicate] {
            let index = EmbeddingIndex::from_store(encoder, store, kind, mask_description)?;
            for (row, id) in index.ids().iter().enumerate() {
                let query = Embedding::normalized(index.row(row).to_vec())?;
                let neighbors = index
                    .topk_where(&query, size, |i| i != row)
                    .into_iter()
                    .map(|s| s.id)
                    .collect();
                out.insert(id.clone(), neighbors);
            }
        }
        Ok(Self(out))
    }

    pub fn get(&self, id: &str) -> &[String] {
        self.0.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn write<W: Write>(&self, writer: &mut W) -> Result<()> {
        for (id, neighbors) in &self.0 {
            write_record(
                writer,
                &NeighborRecord {
                    id: id.clone(),
                    neighbors: neighbors.clone(),
                },
            )?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (line, rec) in read_records::<NeighborRecord, _>(reader)? {
            if out.insert(rec.id.clone(), rec.neighbors).is_some() {
                return Err(Error::DuplicateId { line, id: rec.id });
            }
        }
        Ok(Self(out))
    }
}

/// Replaces one uniformly chosen slot of `f` by a uniform draw from that
/// entry's neighbor list. Slots whose entry has no neighbors other than
/// itself are skipped.
pub fn sample_hard_negative<R: Rng>(f: &KgFact, neighbors: &NeighborLists, rng: &mut R) -> Result<KgFact> {
    let ids = f.ids();
    let usable: Vec<usize> = (0..3)
        .filter(|&i| neighbors.get(ids[i]).iter().any(|n| n != ids[i]))
        .collect();
    let &slot = usable
        .choose(rng)
        .ok_or_else(|| Error::Config(format!("no neighbors to corrupt fact {ids:?}")))?;
    let pool: Vec<&String> = neighbors.get(ids[slot]).iter().filter(|n| *n != ids[slot]).collect();
    let replacement = pool.choose(rng).unwrap().as_str();
    let mut out = [ids[0], ids[1], ids[2]];
    out[slot] = replacement;
    Ok(KgFact::new(out[0], out[1], out[2]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankTrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub hard_negative_pool: usize,
    pub description_mask_prob: f64,
    pub negatives_per_positive: usize,
    /// Build neighbor lists from label-only embeddings, so hard negatives
    /// are entries confusable by surface form.
    pub neighbor_mask_description: bool,
    pub with_context: bool,
    pub seed: u64,
}

impl Default for RerankTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 5e-5,
            weight_decay: 1e-3,
            hard_negative_pool: 10,
            description_mask_prob: 0.5,
            negatives_per_positive: 3,
            neighbor_mask_description: true,
            with_context: false,
            seed: 0,
        }
    }
}

impl RerankTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0
            || !(self.learning_rate > 0.0)
            || self.weight_decay < 0.0
            || self.hard_negative_pool == 0
            || !(0.0..=1.0).contains(&self.description_mask_prob)
        {
            return Err(Error::Config(format!("invalid re-ranker config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankEpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug)]
pub struct RerankOutcome {
    pub params: CrossScorerParams,
    pub neighbors: NeighborLists,
    pub trace: Vec<RerankEpochLoss>,
}

/// Trains the cross scorer with binary cross-entropy on gold facts and
/// one-slot hard negatives. The encoder is frozen.
pub fn train_reranker(
    alignments: &[Alignment],
    encoder: &dyn Encoder,
    store: &KgStore,
    config: &RerankTrainConfig,
) -> Result<RerankOutcome> {
    train_reranker_from(CrossScorerParams::zeros(encoder.dim(), config.seed), alignments, encoder, store, config)
}

/// Continues training from `params`.
pub fn train_reranker_from(
    mut params: CrossScorerParams,
    alignments: &[Alignment],
    encoder: &dyn Encoder,
    store: &KgStore,
    config: &RerankTrainConfig,
) -> Result<RerankOutcome> {
    config.validate()?;
    if params.dim != encoder.dim() {
        return Err(Error::DimensionMismatch {
            expected: encoder.dim(),
            got: params.dim,
        });
    }
    if alignments.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let neighbors = NeighborLists::compute(encoder, store, config.hard_negative_pool, config.neighbor_mask_description)?;
    let slots = alignments
        .iter()
        .map(|a| encoder.slot_embed(&a.oie, config.with_context))
        .collect::<Result<Vec<_>>>()?;
    let mut cache = EntryCache::new(encoder, store);

    let mut order_rng = rng::stream(config.seed, rng::ALIGN_ORDER);
    let mut mask_rng = rng::stream(config.seed, rng::MASKING);
    let mut corrupt_rng = rng::stream(config.seed, rng::CORRUPTION);
    let lr = config.learning_rate as f64;
    let decay = 1.0 - lr * config.weight_decay as f64;

    let mut order: Vec<usize> = (0..alignments.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for &i in &order {
            let gold = &alignments[i].fact;
            let mask = mask_rng.gen_bool(config.description_mask_prob);
            let mut examples = vec![(gold.clone(), 1.0)];
            for _ in 0..config.negatives_per_positive {
                examples.push((sample_hard_negative(gold, &neighbors, &mut corrupt_rng)?, 0.0));
            }
            for (fact, label) in examples {
                let features = cache.features(&slots[i], fact.ids(), mask)?;
                let grad = params.bce_grad(&features, label);
                for (w, g) in params.weights.iter_mut().zip(&grad.weights) {
                    *w = (*w as f64 * decay - lr * g) as f32;
                }
                params.bias = (params.bias as f64 - lr * grad.bias) as f32;
                loss_sum += grad.loss;
                count += 1;
            }
        }
        if !params.is_finite() || !loss_sum.is_finite() {
            return Err(Error::Numeric(format!("re-ranker diverged at epoch {epoch}")));
        }
        trace.push(RerankEpochLoss {
            epoch: epoch + 1,
            mean_loss: loss_sum / count as f64,
        });
    }
    Ok(RerankOutcome {
        params,
        neighbors,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, ReferenceEncoder};
    use crate::kg::KgEntry;
    use crate::preranker::ScoredEntry;
    use crate::text::Normalizer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn list(ids: &[&str]) -> Vec<ScoredEntry> {
        ids.iter()
            .map(|id| ScoredEntry {
                id: id.to_string(),
                score: 0.0,
            })
            .collect()
    }

    #[test]
    fn enumerates_cartesian_product_in_rank_order() {
        let r = SlotLinkResult {
            lists: [list(&["a", "b"]), list(&["p", "q"]), list(&["x", "y"])],
        };
        let c = enumerate_candidates(&r);
        assert_eq!(c.len(), 8);
        assert_eq!(c[0].ids(), ["a", "p", "x"]);
        assert_eq!(c[1].ids(), ["a", "p", "y"]);
        assert_eq!(c[7].ranks, [1, 1, 1]);
        let r3 = SlotLinkResult {
            lists: [list(&["a", "b", "c"]), list(&["p", "q", "r"]), list(&["x", "y", "z"])],
        };
        assert_eq!(enumerate_candidates(&r3).len(), 27);
        let r1 = SlotLinkResult {
            lists: [list(&["a"]), list(&["p"]), list(&["x"])],
        };
        assert_eq!(enumerate_candidates(&r1)[0].to_fact(), r1.linked_fact().unwrap());
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Embedding {
        Embedding::normalized((0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_params_score_half_and_features_have_expected_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = 8;
        let slots = [random_unit(&mut rng, d), random_unit(&mut rng, d), random_unit(&mut rng, d)];
        let entries = [random_unit(&mut rng, d), random_unit(&mut rng, d), random_unit(&mut rng, d)];
        let f = cross_features(&slots, [&entries[0], &entries[1], &entries[2]]);
        assert_eq!(f.len(), feature_len(d));
        assert_eq!(CrossScorerParams::zeros(d, 0).score_features(&f), 0.5);
        // the cosine follows the two product blocks of the first slot
        assert!((f[2 * d] - slots[0].dot(&entries[0])).abs() < 1e-6);
        assert_eq!(f[2 * d + 2], 1.0);
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 4;
        for _ in 0..20 {
            let features: Vec<f32> = (0..feature_len(d)).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut params = CrossScorerParams::zeros(d, 0);
            for w in &mut params.weights {
                *w = rng.gen_range(-0.5..0.5);
            }
            params.bias = rng.gen_range(-1.0..1.0);
            let label = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
            let grad = params.bce_grad(&features, label);
            let j = rng.gen_range(0..features.len());
            // evaluate in f64 to keep the difference quotient precise
            let loss_at = |delta: f64| {
                let z: f64 = params
                    .weights
                    .iter()
                    .zip(&features)
                    .enumerate()
                    .map(|(i, (&w, &x))| (w as f64 + if i == j { delta } else { 0.0 }) * x as f64)
                    .sum::<f64>()
                    + params.bias as f64;
                bce_loss(z, label)
            };
            let h = 1e-6;
            let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
            let rel = (numeric - grad.weights[j]).abs() / numeric.abs().max(grad.weights[j].abs()).max(1e-8);
            assert!(rel < 1e-4, "rel {rel}");
        }
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        assert!((bce_loss(1000.0, 1.0)).abs() < 1e-12);
        assert!((bce_loss(-1000.0, 1.0) - 1000.0).abs() < 1e-9);
        assert!((bce_loss(0.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn first_max_wins_ties() {
        assert_eq!(first_argmax(&[0.2, 0.9, 0.9]), Some(1));
        assert_eq!(first_argmax(&[0.4]), Some(0));
        assert_eq!(first_argmax(&[]), None);
    }

    fn neighbors() -> NeighborLists {
        NeighborLists(BTreeMap::from([
            ("Q1".to_string(), vec!["Q2".to_string(), "Q3".to_string()]),
            ("P1".to_string(), vec!["P2".to_string()]),
            ("Q9".to_string(), vec!["Q2".to_string(), "Q3".to_string(), "Q4".to_string()]),
        ]))
    }

    #[test]
    fn hard_negatives_change_exactly_one_slot_uniformly() {
        let gold = KgFact::new("Q1", "P1", "Q9");
        let lists = neighbors();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            let neg = sample_hard_negative(&gold, &lists, &mut rng).unwrap();
            assert_ne!(neg, gold);
            let changed: Vec<usize> = (0..3).filter(|&i| neg.ids()[i] != gold.ids()[i]).collect();
            assert_eq!(changed.len(), 1);
            counts[changed[0]] += 1;
            if changed[0] == 1 {
                assert_eq!(neg.predicate, "P2");
            }
        }
        let sigma = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 / 3.0).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn neighbor_lists_round_trip_and_exclude_self() {
        let store = KgStore::new(
            vec![
                KgEntry::entity("Q1", "alpha"),
                KgEntry::entity("Q2", "alphb"),
                KgEntry::entity("Q3", "gamma"),
                KgEntry::predicate("P1", "rel"),
                KgEntry::predicate("P2", "other rel"),
            ],
            vec![],
            Normalizer::default(),
        )
        .unwrap();
        let enc = ReferenceEncoder::new(EncoderConfig {
            dim: 16,
            hidden: 8,
            buckets: 1 << 10,
            seed: 1,
        })
        .unwrap();
        let lists = NeighborLists::compute(&enc, &store, 10, false).unwrap();
        assert_eq!(lists.get("Q1").len(), 2);
        assert!(!lists.get("Q1").contains(&"Q1".to_string()));
        assert_eq!(lists.get("P1"), ["P2".to_string()]);
        let mut buf = Vec::new();
        lists.write(&mut buf).unwrap();
        assert_eq!(NeighborLists::read(buf.as_slice()).unwrap(), lists);
    }

    #[test]
    fn params_round_trip() {
        let mut p = CrossScorerParams::zeros(3, 9);
        p.weights[4] = 0.125;
        p.bias = -0.5;
        let mut buf = Vec::new();
        p.save(&mut buf).unwrap();
        assert_eq!(CrossScorerParams::load(buf.as_slice()).unwrap(), p);
        let bad = b"{\"dim\":3,\"seed\":0,\"bias\":0.0}\n{\"weights\":[1.0]}\n";
        assert!(matches!(
            CrossScorerParams::load(&bad[..]),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
