//! Slot and KG-entry encoders.
//!
//! [`ReferenceEncoder`] is a transformer-free stand-in: hashed word and
//! character-trigram features index a learned table whose rows are
//! mean-pooled and linearly projected into the shared latent space.
//! Per-slot embeddings see their own segment plus the whole serialized
//! triple, which is what lets context influence each slot.
//! [`ImportedEmbeddings`] serves vectors computed elsewhere.

use std::collections::HashMap;
use std::hash::Hasher;
use std::io::{BufRead, Read, Write};

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{oie_text, OieTriple};
use crate::error::{Error, Result};
use crate::io::{read_records, write_record};
use crate::kg::KgEntry;
use crate::text::{self, MARKERS};

pub const DEFAULT_DIM: usize = 200;
pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_BUCKETS: usize = 1 << 18;

/// Buckets `0..RESERVED_BUCKETS` belong to the marker tokens.
pub const RESERVED_BUCKETS: usize = MARKERS.len();

/// The three OIE slots, in serialization order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Subject,
    Relation,
    Object,
}

impl Slot {
    pub const ALL: [Slot; 3] = [Slot::Subject, Slot::Relation, Slot::Object];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Slot::Subject => "subject",
            Slot::Relation => "relation",
            Slot::Object => "object",
        }
    }

    pub fn entry_kind(self) -> crate::kg::EntryKind {
        match self {
            Slot::Relation => crate::kg::EntryKind::Predicate,
            _ => crate::kg::EntryKind::Entity,
        }
    }
}

/// Unit-norm vector in the shared latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Normalizes `values`; fails on zero or non-finite input.
    pub fn normalized(mut values: Vec<f32>) -> Result<Self> {
        let norm = l2(&values);
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Numeric(format!("cannot normalize vector with norm {norm}")));
        }
        let inv = 1.0 / norm;
        values.iter_mut().for_each(|v| *v *= inv);
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f32> {
        self.0
    }

    pub fn dot(&self, other: &Embedding) -> f32 {
        dot(&self.0, &other.0)
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    // eight independent lanes so the loop vectorizes
    let mut lanes = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    lanes.iter().sum::<f32>() + tail
}

fn l2(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum::<f32>().sqrt()
}

/// Encoder contract shared by the pre-ranker, re-ranker and detectors.
pub trait Encoder: Send + Sync {
    fn dim(&self) -> usize;

    /// (subject, relation, object) embeddings of a triple.
    fn slot_embed(&self, t: &OieTriple, with_context: bool) -> Result<[Embedding; 3]>;

    fn entry_embed(&self, e: &KgEntry, mask_description: bool) -> Result<Embedding>;
}

/// A symbolic feature before hashing.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Feature {
    Marker(usize),
    Word(String),
    Trigram(String),
}

/// Lowercased whitespace tokens plus their boundary-marked character
/// trigrams; marker literals become a single marker feature.
pub fn features(text: &str) -> Vec<Feature> {
    let mut out = Vec::new();
    for token in text.split_whitespace() {
        if let Some(m) = text::marker_index(token) {
            out.push(Feature::Marker(m));
            continue;
        }
        let word = token.to_lowercase();
        let padded: Vec<char> = std::iter::once('^')
            .chain(word.chars())
            .chain(std::iter::once('$'))
            .collect();
        out.push(Feature::Word(word));
        for w in padded.windows(3) {
            out.push(Feature::Trigram(w.iter().collect()));
        }
    }
    out
}

pub fn bucket(feature: &Feature, buckets: usize) -> u32 {
    let (tag, s) = match feature {
        Feature::Marker(m) => return *m as u32,
        Feature::Word(w) => (b'w', w.as_str()),
        Feature::Trigram(t) => (b't', t.as_str()),
    };
    hash_bucket(tag, s.as_bytes(), buckets)
}

fn hash_bucket(tag: u8, bytes: &[u8], buckets: usize) -> u32 {
    let mut h = FnvHasher::default();
    h.write_u8(tag);
    h.write(bytes);
    let span = (buckets - RESERVED_BUCKETS) as u64;
    (RESERVED_BUCKETS as u64 + h.finish() % span) as u32
}

/// Hashed feature multiset of `text`; same result as hashing [`features`].
pub fn featurize(text: &str, buckets: usize) -> Vec<u32> {
    let mut out = Vec::new();
    let mut padded: Vec<char> = Vec::new();
    let mut gram = [0u8; 12];
    for token in text.split_whitespace() {
        if let Some(m) = text::marker_index(token) {
            out.push(m as u32);
            continue;
        }
        let word = token.to_lowercase();
        out.push(hash_bucket(b'w', word.as_bytes(), buckets));
        padded.clear();
        padded.push('^');
        padded.extend(word.chars());
        padded.push('$');
        for w in padded.windows(3) {
            let mut len = 0;
            for c in w {
                len += c.encode_utf8(&mut gram[len..]).len();
            }
            out.push(hash_bucket(b't', &gram[..len], buckets));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub hidden: usize,
    pub buckets: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            hidden: DEFAULT_HIDDEN,
            buckets: DEFAULT_BUCKETS,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 || self.buckets <= RESERVED_BUCKETS {
            return Err(Error::Config(format!("invalid encoder dimensions {self:?}")));
        }
        Ok(())
    }
}

/// Trainable hashed-feature encoder.
///
/// The table is stored as `table_scale * table` so that decoupled weight
/// decay costs O(1) per step instead of touching every row.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceEncoder {
    config: EncoderConfig,
    table: Vec<f32>,
    table_scale: f32,
    /// (2h) x d, row-major
    slot_projection: Vec<f32>,
    /// (2h) x d, row-major
    entry_projection: Vec<f32>,
}

/// Activations of one slot embedding, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct SlotActivation {
    segment_features: Vec<u32>,
    input: Vec<f32>,
    norm: f32,
    pub embedding: Embedding,
}

/// Activations of a whole triple; the triple features are shared by all
/// three slots.
#[derive(Clone, Debug)]
pub struct TripleActivation {
    triple_features: Vec<u32>,
    pub slots: [SlotActivation; 3],
}

#[derive(Clone, Debug)]
pub struct EntryActivation {
    label_features: Vec<u32>,
    description_features: Vec<u32>,
    input: Vec<f32>,
    norm: f32,
    pub embedding: Embedding,
}

/// Accumulated gradients: dense for projections, sparse for table rows.
#[derive(Clone, Debug)]
pub struct EncoderGrad {
    slot_projection: Vec<f32>,
    entry_projection: Vec<f32>,
    table: HashMap<u32, Vec<f32>>,
    hidden: usize,
}

impl EncoderGrad {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let n = 2 * config.hidden * config.dim;
        Self {
            slot_projection: vec![0.0; n],
            entry_projection: vec![0.0; n],
            table: HashMap::new(),
            hidden: config.hidden,
        }
    }

    fn add_rows(&mut self, features: &[u32], grad: &[f32], weight: f32) {
        for &f in features {
            let row = self.table.entry(f).or_insert_with(|| vec![0.0; self.hidden]);
            for (r, g) in row.iter_mut().zip(grad) {
                *r += weight * g;
            }
        }
    }
}

impl ReferenceEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden;
        let table_bound = 1.0 / (h as f32).sqrt();
        let proj_bound = 1.0 / ((2 * h) as f32).sqrt();
        let table = (0..config.buckets * h)
            .map(|_| rng.gen_range(-table_bound..=table_bound))
            .collect();
        let projection = |rng: &mut ChaCha8Rng| -> Vec<f32> {
            (0..2 * h * config.dim)
                .map(|_| rng.gen_range(-proj_bound..=proj_bound))
                .collect()
        };
        let slot_projection = projection(&mut rng);
        let entry_projection = projection(&mut rng);
        Ok(Self {
            config,
            table,
            table_scale: 1.0,
            slot_projection,
            entry_projection,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn row(&self, bucket: u32) -> &[f32] {
        let h = self.config.hidden;
        let start = bucket as usize * h;
        &self.table[start..start + h]
    }

    /// Mean of the (scaled) table rows of `features`; zero when empty.
    fn pooled(&self, features: &[u32], out: &mut [f32]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if features.is_empty() {
            return;
        }
        for &f in features {
            for (o, r) in out.iter_mut().zip(self.row(f)) {
                *o += r;
            }
        }
        let w = self.table_scale / features.len() as f32;
        out.iter_mut().for_each(|v| *v *= w);
    }

    fn project(&self, projection: &[f32], input: &[f32]) -> Vec<f32> {
        let d = self.config.dim;
        let mut z = vec![0.0f32; d];
        for (i, &x) in input.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &projection[i * d..(i + 1) * d];
            for (zj, pj) in z.iter_mut().zip(row) {
                *zj += x * pj;
            }
        }
        z
    }

    fn normalize_output(z: Vec<f32>) -> Result<(Embedding, f32)> {
        let norm = l2(&z);
        Embedding::normalized(z).map(|e| (e, norm))
    }

    pub fn forward_triple(&self, t: &OieTriple, with_context: bool) -> Result<TripleActivation> {
        let h = self.config.hidden;
        let buckets = self.config.buckets;
        let triple_features = featurize(&oie_text(t, with_context)?, buckets);
        let mut triple_vec = vec![0.0; h];
        self.pooled(&triple_features, &mut triple_vec);

        let slot = |surface: &str| -> Result<SlotActivation> {
            let segment_features = featurize(surface, buckets);
            let mut input = vec![0.0; 2 * h];
            self.pooled(&segment_features, &mut input[..h]);
            input[h..].copy_from_slice(&triple_vec);
            let (embedding, norm) = Self::normalize_output(self.project(&self.slot_projection, &input))?;
            Ok(SlotActivation {
                segment_features,
                input,
                norm,
                embedding,
            })
        };
        Ok(TripleActivation {
            slots: [slot(&t.subject)?, slot(&t.relation)?, slot(&t.object)?],
            triple_features,
        })
    }

    pub fn forward_entry(&self, e: &KgEntry, mask_description: bool) -> Result<EntryActivation> {
        let h = self.config.hidden;
        let label_features = featurize(&e.label, self.config.buckets);
        let description_features = match (&e.description, mask_description) {
            (Some(desc), false) => featurize(desc, self.config.buckets),
            _ => Vec::new(),
        };
        let mut input = vec![0.0; 2 * h];
        self.pooled(&label_features, &mut input[..h]);
        self.pooled(&description_features, &mut input[h..]);
        let (embedding, norm) = Self::normalize_output(self.project(&self.entry_projection, &input))?;
        Ok(EntryActivation {
            label_features,
            description_features,
            input,
            norm,
            embedding,
        })
    }

    /// Backpropagates through normalization and projection. Returns the
    /// gradient w.r.t. the projection input.
    fn backward_projection(
        &self,
        projection: &[f32],
        projection_grad: &mut [f32],
        input: &[f32],
        output: &Embedding,
        norm: f32,
        grad_out: &[f32],
    ) -> Vec<f32> {
        let d = self.config.dim;
        let e = output.values();
        let along = dot(e, grad_out);
        let grad_z: Vec<f32> = grad_out
            .iter()
            .zip(e)
            .map(|(g, ei)| (g - ei * along) / norm)
            .collect();
        let mut grad_input = vec![0.0f32; input.len()];
        for (i, &x) in input.iter().enumerate() {
            let row = &projection[i * d..(i + 1) * d];
            let grow = &mut projection_grad[i * d..(i + 1) * d];
            if x != 0.0 {
                for (gw, gz) in grow.iter_mut().zip(&grad_z) {
                    *gw += x * gz;
                }
            }
            grad_input[i] = dot(row, &grad_z);
        }
        grad_input
    }

    /// Accumulates parameter gradients given dL/d(slot embeddings).
    pub fn backward_triple(&self, act: &TripleActivation, grad_out: &[Vec<f32>; 3], grad: &mut EncoderGrad) {
        let h = self.config.hidden;
        let mut triple_grad = vec![0.0f32; h];
        for (slot, g) in act.slots.iter().zip(grad_out) {
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let gx = self.backward_projection(
                &self.slot_projection,
                &mut grad.slot_projection,
                &slot.input,
                &slot.embedding,
                slot.norm,
                g,
            );
            let n = slot.segment_features.len() as f32;
            grad.add_rows(&slot.segment_features, &gx[..h], 1.0 / n);
            for (t, v) in triple_grad.iter_mut().zip(&gx[h..]) {
                *t += v;
            }
        }
        if !act.triple_features.is_empty() {
            let n = act.triple_features.len() as f32;
            grad.add_rows(&act.triple_features, &triple_grad, 1.0 / n);
        }
    }

    pub fn backward_entry(&self, act: &EntryActivation, grad_out: &[f32], grad: &mut EncoderGrad) {
        let h = self.config.hidden;
        let gx = self.backward_projection(
            &self.entry_projection,
            &mut grad.entry_projection,
            &act.input,
            &act.embedding,
            act.norm,
            grad_out,
        );
        let n = act.label_features.len() as f32;
        grad.add_rows(&act.label_features, &gx[..h], 1.0 / n);
        if !act.description_features.is_empty() {
            let n = act.description_features.len() as f32;
            grad.add_rows(&act.description_features, &gx[h..], 1.0 / n);
        }
    }

    /// One SGD step with decoupled weight decay.
    pub fn apply(&mut self, grad: &EncoderGrad, learning_rate: f32, weight_decay: f32) {
        let decay = 1.0 - learning_rate * weight_decay;
        for (p, g) in self.slot_projection.iter_mut().zip(&grad.slot_projection) {
            *p = *p * decay - learning_rate * g;
        }
        for (p, g) in self.entry_projection.iter_mut().zip(&grad.entry_projection) {
            *p = *p * decay - learning_rate * g;
        }
        // effective row r = scale * raw; decay the scale, then write the
        // gradient step into raw units
        self.table_scale *= decay;
        let h = self.config.hidden;
        let inv_scale = 1.0 / self.table_scale;
        for (&bucket, g) in &grad.table {
            let start = bucket as usize * h;
            for (p, gv) in self.table[start..start + h].iter_mut().zip(g) {
                *p -= learning_rate * gv * inv_scale;
            }
        }
        if self.table_scale < 1e-3 {
            self.fold_scale();
        }
    }

    fn fold_scale(&mut self) {
        let s = self.table_scale;
        self.table.iter_mut().for_each(|v| *v *= s);
        self.table_scale = 1.0;
    }

    pub fn is_finite(&self) -> bool {
        self.table_scale.is_finite()
            && self.slot_projection.iter().all(|v| v.is_finite())
            && self.entry_projection.iter().all(|v| v.is_finite())
            && self.table.iter().all(|v| v.is_finite())
    }

    const MAGIC: &'static [u8; 4] = b"FLEP";
    const VERSION: u32 = 1;

    /// Binary parameter file: magic, version, dim, hidden, buckets, seed,
    /// then table, slot projection and entry projection as little-endian
    /// f32.
    pub fn save<W: Write>(&self, writer: &mut W) -> Result<()> {
        let mut folded = self.clone();
        folded.fold_scale();
        writer.write_all(Self::MAGIC)?;
        writer.write_all(&Self::VERSION.to_le_bytes())?;
        for v in [self.config.dim, self.config.hidden, self.config.buckets] {
            writer.write_all(&(v as u32).to_le_bytes())?;
        }
        writer.write_all(&self.config.seed.to_le_bytes())?;
        for block in [&folded.table, &folded.slot_projection, &folded.entry_projection] {
            write_f32s(writer, block)?;
        }
        Ok(())
    }

    pub fn load<R: Read>(reader: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        reader.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Format("not an encoder parameter file".into()));
        }
        let version = read_u32(reader)?;
        if version != Self::VERSION {
            return Err(Error::Format(format!("unsupported encoder version {version}")));
        }
        let dim = read_u32(reader)? as usize;
        let hidden = read_u32(reader)? as usize;
        let buckets = read_u32(reader)? as usize;
        let mut seed = [0u8; 8];
        reader.read_exact(&mut seed)?;
        let config = EncoderConfig {
            dim,
            hidden,
            buckets,
            seed: u64::from_le_bytes(seed),
        };
        config.validate()?;
        let table = read_f32s(reader, buckets * hidden)?;
        let slot_projection = read_f32s(reader, 2 * hidden * dim)?;
        let entry_projection = read_f32s(reader, 2 * hidden * dim)?;
        Ok(Self {
            config,
            table,
            table_scale: 1.0,
            slot_projection,
            entry_projection,
        })
    }
}

pub(crate) fn write_f32s<W: Write>(writer: &mut W, values: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    writer.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f32s<R: Read>(reader: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    reader.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn read_u32<R: Read>(reader: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

impl Encoder for ReferenceEncoder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn slot_embed(&self, t: &OieTriple, with_context: bool) -> Result<[Embedding; 3]> {
        let act = self.forward_triple(t, with_context)?;
        let [s, r, o] = act.slots;
        Ok([s.embedding, r.embedding, o.embedding])
    }

    fn entry_embed(&self, e: &KgEntry, mask_description: bool) -> Result<Embedding> {
        Ok(self.forward_entry(e, mask_description)?.embedding)
    }
}

/// Embedding file record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorRecord {
    pub key: String,
    pub vector: Vec<f32>,
}

/// Key of an OIE slot vector in an embedding file.
pub fn slot_key(oie_id: &str, slot: Slot) -> String {
    format!("{oie_id}/{}", slot.name())
}

/// Frozen encoder serving vectors loaded from an embedding file. Entries
/// are keyed by id; OIE slots by `{oie id}/{slot}`. The context and mask
/// flags are ignored.
#[derive(Clone, Debug)]
pub struct ImportedEmbeddings {
    dim: usize,
    vectors: HashMap<String, Embedding>,
}

impl ImportedEmbeddings {
    pub fn from_records(records: impl IntoIterator<Item = VectorRecord>, dim: Option<usize>) -> Result<Self> {
        let mut vectors = HashMap::new();
        let mut dim = dim;
        for rec in records {
            let expected = *dim.get_or_insert(rec.vector.len());
            if rec.vector.len() != expected {
                return Err(Error::DimensionMismatch {
                    expected,
                    got: rec.vector.len(),
                });
            }
            vectors.insert(rec.key, Embedding::normalized(rec.vector)?);
        }
        Ok(Self {
            dim: dim.unwrap_or(DEFAULT_DIM),
            vectors,
        })
    }

    pub fn read<R: BufRead>(reader: R, dim: Option<usize>) -> Result<Self> {
        let records = read_records::<VectorRecord, _>(reader)?;
        Self::from_records(records.into_iter().map(|(_, r)| r), dim)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    fn get(&self, key: &str) -> Result<Embedding> {
        self.vectors
            .get(key)
            .cloned()
            .ok_or_else(|| Error::MissingVector(key.to_string()))
    }
}

impl Encoder for ImportedEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn slot_embed(&self, t: &OieTriple, _with_context: bool) -> Result<[Embedding; 3]> {
        let id = t
            .id
            .as_deref()
            .ok_or_else(|| Error::MissingVector(format!("<unkeyed triple {:?}>", t.slots())))?;
        Ok([
            self.get(&slot_key(id, Slot::Subject))?,
            self.get(&slot_key(id, Slot::Relation))?,
            self.get(&slot_key(id, Slot::Object))?,
        ])
    }

    fn entry_embed(&self, e: &KgEntry, _mask_description: bool) -> Result<Embedding> {
        self.get(&e.id)
    }
}

/// Writes entry and OIE slot vectors in the import format.
pub fn export_embeddings<'a, W: Write>(
    encoder: &dyn Encoder,
    entries: impl IntoIterator<Item = &'a KgEntry>,
    triples: impl IntoIterator<Item = &'a OieTriple>,
    with_context: bool,
    writer: &mut W,
) -> Result<()> {
    for e in entries {
        let v = encoder.entry_embed(e, false)?;
        write_record(
            writer,
            &VectorRecord {
                key: e.id.clone(),
                vector: v.into_values(),
            },
        )?;
    }
    for t in triples {
        let Some(id) = t.id.as_deref() else { continue };
        for (slot, v) in Slot::ALL.into_iter().zip(encoder.slot_embed(t, with_context)?) {
            write_record(
                writer,
                &VectorRecord {
                    key: slot_key(id, slot),
                    vector: v.into_values(),
                },
            )?;
        }
    }
    Ok(())
}
