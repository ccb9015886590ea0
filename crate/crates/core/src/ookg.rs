//! Out-of-KG detection: deciding per OIE slot whether its referent has a KG
//! entry at all.
//!
//! Three detectors read the pre-ranked candidates of a slot: top-1
//! confidence and entropy of the softmax over the top-5 similarities, and a
//! query-key-value attention head over the top-M entries. Evaluation runs
//! every slot twice, once with its gold entry present in the index and once
//! with it hidden.

use std::cmp::Ordering;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Alignment;
use crate::encoder::{dot, Embedding, Encoder, Slot};
use crate::error::{Error, Result};
use crate::io::{read_records, write_record, write_records};
use crate::kg::KgStore;
use crate::preranker::{EmbeddingIndex, LinkIndices, ScoredEntry};
use crate::rng;

/// Support of the softmax heuristics.
pub const SOFTMAX_SUPPORT: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    InKg,
    OutOfKg,
}

/// Softmax without temperature.
pub fn topk_softmax(sims: &[f64]) -> Vec<f64> {
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Shannon entropy in nats; zero probabilities contribute nothing.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OokgThresholds {
    pub confidence: [f64; 3],
    pub entropy: [f64; 3],
    pub attention: f64,
}

impl Default for OokgThresholds {
    fn default() -> Self {
        Self {
            confidence: [0.235, 0.260, 0.235],
            entropy: [1.60, 1.58, 1.60],
            attention: 0.3,
        }
    }
}

impl OokgThresholds {
    pub fn validate(&self) -> Result<()> {
        let prob_ok = |t: f64| t > 0.0 && t < 1.0;
        let max_entropy = (SOFTMAX_SUPPORT as f64).ln();
        if !self.confidence.iter().all(|&t| prob_ok(t))
            || !prob_ok(self.attention)
            || !self.entropy.iter().all(|&t| (0.0..=max_entropy).contains(&t))
        {
            return Err(Error::Config(format!("thresholds out of range: {self:?}")));
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, writer: &mut W, grid_size: Option<usize>) -> Result<()> {
        write_record(
            writer,
            &ThresholdsRecord {
                confidence: self.confidence,
                entropy: self.entropy,
                attention: self.attention,
                grid_size,
            },
        )
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let records = read_records::<ThresholdsRecord, _>(reader)?;
        let [(_, rec)] = <[_; 1]>::try_from(records)
            .map_err(|r| Error::Format(format!("expected one thresholds record, found {}", r.len())))?;
        let t = Self {
            confidence: rec.confidence,
            entropy: rec.entropy,
            attention: rec.attention,
        };
        t.validate()?;
        Ok(t)
    }
}

/// Thresholds file record; `grid_size` is set when calibrated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdsRecord {
    pub confidence: [f64; 3],
    pub entropy: [f64; 3],
    pub attention: f64,
    #[serde(default)]
    pub grid_size: Option<usize>,
}

/// OutOfKg iff the top-1 probability is below the slot threshold.
pub fn confidence_detect(probs: &[f64], slot: Slot, thresholds: &OokgThresholds) -> Decision {
    let top = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top < thresholds.confidence[slot.index()] {
        Decision::OutOfKg
    } else {
        Decision::InKg
    }
}

/// OutOfKg iff the entropy exceeds the slot threshold.
pub fn entropy_detect(h: f64, slot: Slot, thresholds: &OokgThresholds) -> Decision {
    if h > thresholds.entropy[slot.index()] {
        Decision::OutOfKg
    } else {
        Decision::InKg
    }
}

/// Attention head over KG entry embeddings. Matrices are row-major d×d.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QkvParams {
    pub dim: usize,
    pub q: Vec<f32>,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
    pub scale: f32,
    pub bias: f32,
}

fn identity(d: usize) -> Vec<f32> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

fn matvec(m: &[f32], x: &[f32]) -> Vec<f32> {
    let d = x.len();
    (0..d).map(|i| dot(&m[i * d..(i + 1) * d], x)).collect()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct QkvForward {
    q_proj: Vec<f32>,
    k_proj: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    attention: Vec<f64>,
    qc: f64,
    score: f64,
}

#[derive(Clone, Debug)]
struct QkvGrad {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    scale: f64,
    bias: f64,
}

impl QkvParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            q: identity(dim),
            k: identity(dim),
            v: identity(dim),
            scale: 1.0,
            bias: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.scale.is_finite()
            && self.bias.is_finite()
            && [&self.q, &self.k, &self.v].iter().all(|m| m.iter().all(|x| x.is_finite()))
    }

    fn forward(&self, query: &[f32], keys: &[&[f32]]) -> Result<QkvForward> {
        if keys.is_empty() {
            return Err(Error::EmptyKeySet);
        }
        let d = self.dim;
        for x in std::iter::once(query).chain(keys.iter().copied()) {
            if x.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: x.len() });
            }
        }
        let q_proj = matvec(&self.q, query);
        let k_proj: Vec<Vec<f32>> = keys.iter().map(|k| matvec(&self.k, k)).collect();
        let values: Vec<Vec<f32>> = keys.iter().map(|k| matvec(&self.v, k)).collect();
        let norm = (d as f64).sqrt();
        let logits: Vec<f64> = k_proj.iter().map(|k| dot(&q_proj, k) as f64 / norm).collect();
        let attention = topk_softmax(&logits);
        let mut context = vec![0.0f32; d];
        for (a, v) in attention.iter().zip(&values) {
            for (c, x) in context.iter_mut().zip(v) {
                *c += (*a as f32) * x;
            }
        }
        let qc = dot(query, &context) as f64;
        let score = sigmoid(self.scale as f64 * qc + self.bias as f64);
        Ok(QkvForward {
            q_proj,
            k_proj,
            values,
            attention,
            qc,
            score,
        })
    }

    /// BCE loss and gradient for one example.
    fn backward(&self, query: &[f32], keys: &[&[f32]], label: f64) -> Result<(f64, QkvGrad)> {
        let f = self.forward(query, keys)?;
        let d = self.dim;
        let z = self.scale as f64 * f.qc + self.bias as f64;
        let loss = z.max(0.0) - z * label + (-z.abs()).exp().ln_1p();
        let delta = f.score - label;
        // gradient reaching the context vector
        let g_c: Vec<f64> = query.iter().map(|&x| delta * self.scale as f64 * x as f64).collect();
        let g_a: Vec<f64> = f
            .values
            .iter()
            .map(|v| v.iter().zip(&g_c).map(|(&x, g)| x as f64 * g).sum())
            .collect();
        let mean_g: f64 = f.attention.iter().zip(&g_a).map(|(a, g)| a * g).sum();
        let g_logit: Vec<f64> = f
            .attention
            .iter()
            .zip(&g_a)
            .map(|(a, g)| a * (g - mean_g) / (d as f64).sqrt())
            .collect();
        // mixtures of keys weighted by attention and by logit gradient
        let mut key_mean = vec![0.0f64; d];
        let mut key_grad = vec![0.0f64; d];
        let mut kproj_grad = vec![0.0f64; d];
        for j in 0..keys.len() {
            for i in 0..d {
                key_mean[i] += f.attention[j] * keys[j][i] as f64;
                key_grad[i] += g_logit[j] * keys[j][i] as f64;
                kproj_grad[i] += g_logit[j] * f.k_proj[j][i] as f64;
            }
        }
        let outer = |u: &[f64], w: &[f64]| -> Vec<f64> {
            let mut m = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    m[i * d + j] = u[i] * w[j];
                }
            }
            m
        };
        let query64: Vec<f64> = query.iter().map(|&x| x as f64).collect();
        let q_proj64: Vec<f64> = f.q_proj.iter().map(|&x| x as f64).collect();
        Ok((
            loss,
            QkvGrad {
                q: outer(&kproj_grad, &query64),
                k: outer(&q_proj64, &key_grad),
                v: outer(&g_c, &key_mean),
                scale: delta * f.qc,
                bias: delta,
            },
        ))
    }

    fn apply(&mut self, g: &QkvGrad, lr: f64) {
        for (m, gm) in [(&mut self.q, &g.q), (&mut self.k, &g.k), (&mut self.v, &g.v)] {
            for (x, dx) in m.iter_mut().zip(gm) {
                *x = (*x as f64 - lr * dx) as f32;
            }
        }
        self.scale = (self.scale as f64 - lr * g.scale) as f32;
        self.bias = (self.bias as f64 - lr * g.bias) as f32;
    }

    pub fn save<W: Write>(&self, writer: &mut W) -> Result<()> {
        write_record(writer, self)
    }

    pub fn load<R: BufRead>(reader: R) -> Result<Self> {
        let records = read_records::<QkvParams, _>(reader)?;
        let [(_, p)] = <[_; 1]>::try_from(records)
            .map_err(|r| Error::Format(format!("expected one attention params record, found {}", r.len())))?;
        let n = p.dim * p.dim;
        if p.q.len() != n || p.k.len() != n || p.v.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: p.q.len().min(p.k.len()).min(p.v.len()),
            });
        }
        if !p.is_finite() {
            return Err(Error::Numeric("non-finite attention params".into()));
        }
        Ok(p)
    }
}

/// Probability that the query's referent is among `keys`.
pub fn qkv_score(params: &QkvParams, query: &Embedding, keys: &[&Embedding]) -> Result<f64> {
    let keys: Vec<&[f32]> = keys.iter().map(|k| k.values()).collect();
    Ok(params.forward(query.values(), &keys)?.score)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QkvTrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    /// Key set size M.
    pub keys: usize,
    pub gold_prob: f64,
    pub with_context: bool,
    pub seed: u64,
}

impl Default for QkvTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            learning_rate: 1e-3,
            keys: 64,
            gold_prob: 0.5,
            with_context: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QkvEpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug)]
pub struct QkvOutcome {
    pub params: QkvParams,
    pub trace: Vec<QkvEpochLoss>,
}

/// Trains the attention head. Each slot example gets a key set of size M:
/// with probability `gold_prob` it contains the gold entry (label 1),
/// otherwise not (label 0); the rest are uniform non-gold entries of the
/// same kind.
pub fn train_qkv(
    alignments: &[Alignment],
    encoder: &dyn Encoder,
    store: &KgStore,
    config: &QkvTrainConfig,
) -> Result<QkvOutcome> {
    train_qkv_from(QkvParams::identity(encoder.dim()), alignments, encoder, store, config)
}

/// Continues training from `params`.
pub fn train_qkv_from(
    mut params: QkvParams,
    alignments: &[Alignment],
    encoder: &dyn Encoder,
    store: &KgStore,
    config: &QkvTrainConfig,
) -> Result<QkvOutcome> {
    if params.dim != encoder.dim() {
        return Err(Error::DimensionMismatch {
            expected: encoder.dim(),
            got: params.dim,
        });
    }
    if config.epochs == 0 || config.keys == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::Config(format!("invalid attention training config {config:?}")));
    }
    if alignments.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let indices = LinkIndices::from_store(encoder, store)?;
    let mut examples: Vec<(Embedding, Slot, usize)> = Vec::new();
    for a in alignments {
        let slots = encoder.slot_embed(&a.oie, config.with_context)?;
        for (slot, emb) in Slot::ALL.into_iter().zip(slots) {
            let id = a.fact.ids()[slot.index()];
            let row = indices
                .for_slot(slot)
                .position(id)
                .ok_or_else(|| Error::UnknownId(id.to_string()))?;
            examples.push((emb, slot, row));
        }
    }

    let mut rng = rng::stream(config.seed, rng::CALIBRATION);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &i in &order {
            let (query, slot, gold) = &examples[i];
            let index = indices.for_slot(*slot);
            let include = rng.gen_bool(config.gold_prob);
            let rows = sample_keys(index.len(), *gold, include, config.keys, &mut rng);
            let keys: Vec<&[f32]> = rows.iter().map(|&r| index.row(r)).collect();
            let label = if include { 1.0 } else { 0.0 };
            let (loss, grad) = params.backward(query.values(), &keys, label)?;
            params.apply(&grad, config.learning_rate as f64);
            loss_sum += loss;
        }
        if !params.is_finite() {
            return Err(Error::Numeric(format!("attention head diverged at epoch {epoch}")));
        }
        trace.push(QkvEpochLoss {
            epoch: epoch + 1,
            mean_loss: loss_sum / examples.len() as f64,
        });
    }
    Ok(QkvOutcome { params, trace })
}

fn sample_keys(n: usize, gold: usize, include: bool, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let others = m.saturating_sub(include as usize).min(n - 1);
    let mut rows: Vec<usize> = rand::seq::index::sample(rng, n - 1, others)
        .into_iter()
        .map(|r| if r >= gold { r + 1 } else { r })
        .collect();
    if include {
        rows.push(gold);
    }
    rows
}

/// Direction of a thresholded statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutOfKgWhen {
    Below,
    Above,
}

impl OutOfKgWhen {
    pub fn decide(self, statistic: f64, threshold: f64) -> Decision {
        let out = match self {
            OutOfKgWhen::Below => statistic < threshold,
            OutOfKgWhen::Above => statistic > threshold,
        };
        if out {
            Decision::OutOfKg
        } else {
            Decision::InKg
        }
    }
}

/// A statistic observed in a known scenario.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledStatistic {
    pub value: f64,
    pub out_of_kg: bool,
}

/// Grid search for the threshold maximizing the mean of the in-KG and
/// out-of-KG accuracies. Returns `(threshold, accuracy)`; ties go to the
/// smallest threshold.
pub fn calibrate_threshold(samples: &[LabeledStatistic], direction: OutOfKgWhen, grid_size: usize) -> Result<(f64, f64)> {
    if samples.is_empty() || grid_size == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let lo = samples.iter().map(|s| s.value).fold(f64::INFINITY, f64::min);
    let hi = samples.iter().map(|s| s.value).fold(f64::NEG_INFINITY, f64::max);
    let n_out = samples.iter().filter(|s| s.out_of_kg).count();
    let n_in = samples.len() - n_out;
    let mut best = (lo, f64::NEG_INFINITY);
    for g in 0..grid_size {
        let t = if grid_size == 1 {
            lo
        } else {
            lo + (hi - lo) * g as f64 / (grid_size - 1) as f64
        };
        let (mut hit_in, mut hit_out) = (0usize, 0usize);
        for s in samples {
            let d = direction.decide(s.value, t);
            match (s.out_of_kg, d) {
                (true, Decision::OutOfKg) => hit_out += 1,
                (false, Decision::InKg) => hit_in += 1,
                _ => {}
            }
        }
        let rate = |h: usize, n: usize| if n == 0 { None } else { Some(h as f64 / n as f64) };
        let acc = match (rate(hit_in, n_in), rate(hit_out, n_out)) {
            (Some(a), Some(b)) => (a + b) / 2.0,
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => unreachable!(),
        };
        if acc > best.1 {
            best = (t, acc);
        }
    }
    Ok(best)
}

/// Scenario of one detection trial.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Gold entry present in the index.
    Imputed,
    /// Gold entry hidden from the index.
    Removed,
}

impl Scenario {
    pub const BOTH: [Scenario; 2] = [Scenario::Imputed, Scenario::Removed];

    pub fn expected(self) -> Decision {
        match self {
            Scenario::Imputed => Decision::InKg,
            Scenario::Removed => Decision::OutOfKg,
        }
    }
}

/// Pre-ranked candidates of one slot as seen by a detector.
pub struct SlotView<'a> {
    pub slot: Slot,
    pub query: &'a Embedding,
    /// Score-descending candidates with their embedding rows.
    pub candidates: Vec<(ScoredEntry, &'a [f32])>,
    /// Gold id and scenario, only for protocol checks such as
    /// [`OracleDetector`].
    pub gold: &'a str,
    pub scenario: Scenario,
}

impl SlotView<'_> {
    pub fn top_sims(&self, n: usize) -> Vec<f64> {
        self.candidates.iter().take(n).map(|(c, _)| c.score as f64).collect()
    }
}

pub trait Detector {
    /// Decision and the statistic it was based on, if any.
    fn detect(&mut self, view: &SlotView) -> Result<(Decision, Option<f64>)>;
}

pub struct ConfidenceDetector(pub OokgThresholds);

impl Detector for ConfidenceDetector {
    fn detect(&mut self, view: &SlotView) -> Result<(Decision, Option<f64>)> {
        let probs = topk_softmax(&view.top_sims(SOFTMAX_SUPPORT));
        let top = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok((confidence_detect(&probs, view.slot, &self.0), Some(top)))
    }
}

pub struct EntropyDetector(pub OokgThresholds);

impl Detector for EntropyDetector {
    fn detect(&mut self, view: &SlotView) -> Result<(Decision, Option<f64>)> {
        let h = entropy(&topk_softmax(&view.top_sims(SOFTMAX_SUPPORT)));
        Ok((entropy_detect(h, view.slot, &self.0), Some(h)))
    }
}

pub struct QkvDetector {
    pub params: QkvParams,
    pub threshold: f64,
}

impl Detector for QkvDetector {
    fn detect(&mut self, view: &SlotView) -> Result<(Decision, Option<f64>)> {
        let keys: Vec<&[f32]> = view.candidates.iter().map(|(_, row)| *row).collect();
        let score = self.params.forward(view.query.values(), &keys)?.score;
        Ok((OutOfKgWhen::Below.decide(score, self.threshold), Some(score)))
    }
}

/// Fair coin per slot.
pub struct CoinDetector(pub ChaCha8Rng);

impl Detector for CoinDetector {
    fn detect(&mut self, _: &SlotView) -> Result<(Decision, Option<f64>)> {
        let d = if self.0.gen_bool(0.5) {
            Decision::InKg
        } else {
            Decision::OutOfKg
        };
        Ok((d, None))
    }
}

pub struct ConstantDetector(pub Decision);

impl Detector for ConstantDetector {
    fn detect(&mut self, _: &SlotView) -> Result<(Decision, Option<f64>)> {
        Ok((self.0, None))
    }
}

/// Answers from the gold id; a protocol check, not a method.
pub struct OracleDetector;

impl Detector for OracleDetector {
    fn detect(&mut self, view: &SlotView) -> Result<(Decision, Option<f64>)> {
        Ok((view.scenario.expected(), None))
    }
}

/// One line of a detection report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub alignment_id: Option<String>,
    pub slot: String,
    pub scenario: Scenario,
    pub decision: Decision,
    pub statistic: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OokgReport {
    /// Per slot, mean of the imputed and removed accuracies.
    pub slot_accuracy: [f64; 3],
    /// Mean over scenarios of the fraction of OIEs with all slots right.
    pub fact_accuracy: f64,
    pub n: usize,
    #[serde(skip)]
    pub records: Vec<DetectionRecord>,
}

impl OokgReport {
    pub fn write_records<W: Write>(&self, writer: &mut W) -> Result<()> {
        write_records(writer, &self.records)
    }
}

/// Candidates of one slot in a scenario: the index with the gold entry
/// hidden, plus the gold entry re-inserted for the imputed scenario. The
/// base index is never modified.
fn overlay_candidates<'a>(
    index: &'a EmbeddingIndex,
    gold_vector: &'a [f32],
    gold: &str,
    query: &Embedding,
    scenario: Scenario,
    m: usize,
) -> Vec<(ScoredEntry, &'a [f32])> {
    let hidden = index.position(gold);
    let mut out: Vec<(ScoredEntry, &[f32])> = index
        .topk_where(query, m, |i| Some(i) != hidden)
        .into_iter()
        .map(|s| {
            let row = index.row(index.position(&s.id).unwrap());
            (s, row)
        })
        .collect();
    if scenario == Scenario::Imputed {
        let score = dot(query.values(), gold_vector);
        out.push((
            ScoredEntry {
                id: gold.to_string(),
                score,
            },
            gold_vector,
        ));
        out.sort_by(|a, b| match b.0.score.total_cmp(&a.0.score) {
            Ordering::Equal => a.0.id.cmp(&b.0.id),
            o => o,
        });
        out.truncate(m);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OokgEvalConfig {
    /// Candidates handed to detectors per slot.
    pub keys: usize,
    pub with_context: bool,
}

impl Default for OokgEvalConfig {
    fn default() -> Self {
        Self {
            keys: 64,
            with_context: false,
        }
    }
}

/// Runs every slot of every alignment in both scenarios.
pub fn ookg_evaluate(
    detector: &mut dyn Detector,
    alignments: &[Alignment],
    store: &KgStore,
    encoder: &dyn Encoder,
    config: &OokgEvalConfig,
) -> Result<OokgReport> {
    if alignments.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let indices = LinkIndices::from_store(encoder, store)?;
    let mut slot_hits = [[0usize; 3]; 2];
    let mut fact_hits = [0usize; 2];
    let mut records = Vec::with_capacity(alignments.len() * 6);
    for a in alignments {
        let queries = encoder.slot_embed(&a.oie, config.with_context)?;
        let mut gold_vectors = Vec::with_capacity(3);
        for slot in Slot::ALL {
            let id = a.fact.ids()[slot.index()];
            let entry = store.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
            gold_vectors.push(encoder.entry_embed(entry, false)?);
        }
        for (s, scenario) in Scenario::BOTH.into_iter().enumerate() {
            let mut all = true;
            for slot in Slot::ALL {
                let gold = a.fact.ids()[slot.index()];
                let query = &queries[slot.index()];
                let view = SlotView {
                    slot,
                    query,
                    candidates: overlay_candidates(
                        indices.for_slot(slot),
                        gold_vectors[slot.index()].values(),
                        gold,
                        query,
                        scenario,
                        config.keys.max(SOFTMAX_SUPPORT),
                    ),
                    gold,
                    scenario,
                };
                let (decision, statistic) = detector.detect(&view)?;
                let hit = decision == scenario.expected();
                slot_hits[s][slot.index()] += hit as usize;
                all &= hit;
                records.push(DetectionRecord {
                    alignment_id: a.oie.id.clone(),
                    slot: slot.name().to_string(),
                    scenario,
                    decision,
                    statistic,
                });
            }
            fact_hits[s] += all as usize;
        }
    }
    let n = alignments.len() as f64;
    let slot_accuracy = [0, 1, 2].map(|i| (slot_hits[0][i] + slot_hits[1][i]) as f64 / (2.0 * n));
    Ok(OokgReport {
        slot_accuracy,
        fact_accuracy: (fact_hits[0] + fact_hits[1]) as f64 / (2.0 * n),
        n: alignments.len(),
        records,
    })
}

/// Statistics of the confidence, entropy and attention detectors over
/// both scenarios of `alignments`, grouped per slot.
pub fn collect_statistics(
    alignments: &[Alignment],
    store: &KgStore,
    encoder: &dyn Encoder,
    qkv: Option<&QkvParams>,
    config: &OokgEvalConfig,
) -> Result<[[Vec<LabeledStatistic>; 3]; 3]> {
    struct Collect<'p> {
        qkv: Option<&'p QkvParams>,
        stats: [[Vec<LabeledStatistic>; 3]; 3],
    }
    impl Detector for Collect<'_> {
        fn detect(&mut self, view: &SlotView) -> Result<(Decision, Option<f64>)> {
            let probs = topk_softmax(&view.top_sims(SOFTMAX_SUPPORT));
            let top = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s = view.slot.index();
            let out = view.scenario == Scenario::Removed;
            self.stats[0][s].push(LabeledStatistic { value: top, out_of_kg: out });
            self.stats[1][s].push(LabeledStatistic {
                value: entropy(&probs),
                out_of_kg: out,
            });
            if let Some(p) = self.qkv {
                let keys: Vec<&[f32]> = view.candidates.iter().map(|(_, row)| *row).collect();
                let score = p.forward(view.query.values(), &keys)?.score;
                self.stats[2][s].push(LabeledStatistic { value: score, out_of_kg: out });
            }
            Ok((Decision::InKg, None))
        }
    }
    let mut c = Collect {
        qkv,
        stats: Default::default(),
    };
    ookg_evaluate(&mut c, alignments, store, encoder, config)?;
    Ok(c.stats)
}

/// Calibrates all nine thresholds on held-out alignments.
pub fn calibrate_thresholds(
    alignments: &[Alignment],
    store: &KgStore,
    encoder: &dyn Encoder,
    qkv: Option<&QkvParams>,
    config: &OokgEvalConfig,
    grid_size: usize,
) -> Result<OokgThresholds> {
    let stats = collect_statistics(alignments, store, encoder, qkv, config)?;
    let mut t = OokgThresholds::default();
    for (s, (conf, ent)) in stats[0].iter().zip(&stats[1]).enumerate() {
        t.confidence[s] = calibrate_threshold(conf, OutOfKgWhen::Below, grid_size)?.0;
        t.entropy[s] = calibrate_threshold(ent, OutOfKgWhen::Above, grid_size)?.0;
    }
    if qkv.is_some() {
        let pooled: Vec<LabeledStatistic> = stats[2].iter().flatten().copied().collect();
        t.attention = calibrate_threshold(&pooled, OutOfKgWhen::Below, grid_size)?.0;
    }
    Ok(t)
}
