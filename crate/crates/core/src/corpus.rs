//! OIE triples, sentence/fact pairs and the distant-supervision alignment
//! between them.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_records, write_record, write_records};
use crate::kg::{KgFact, KgStore};
use crate::text::{self, Normalizer};

/// Surface-form (subject; relation; object) triple.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OieTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extractor: Option<String>,
    /// Stable key used by imported embedding tables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

impl OieTriple {
    pub fn new(subject: &str, relation: &str, object: &str) -> Result<Self> {
        let triple = Self {
            subject: subject.to_string(),
            relation: relation.to_string(),
            object: object.to_string(),
            sentence: None,
            extractor: None,
            id: None,
        };
        triple.validate()?;
        Ok(triple)
    }

    pub fn with_sentence(mut self, sentence: &str) -> Result<Self> {
        text::reject_markers(sentence)?;
        self.sentence = Some(sentence.to_string());
        Ok(self)
    }

    pub fn with_extractor(mut self, extractor: &str) -> Self {
        self.extractor = Some(extractor.to_string());
        self
    }

    pub fn slots(&self) -> [&str; 3] {
        [&self.subject, &self.relation, &self.object]
    }

    pub fn validate(&self) -> Result<()> {
        for slot in self.slots() {
            if slot.trim().is_empty() {
                return Err(Error::Format("OIE slot is empty after trimming".into()));
            }
            text::reject_markers(slot)?;
        }
        if let Some(sentence) = &self.sentence {
            text::reject_markers(sentence)?;
        }
        Ok(())
    }

    /// Normalized (subject, relation, object) key.
    pub fn key(&self, norm: &Normalizer) -> (String, String, String) {
        (
            norm.normalize(&self.subject),
            norm.normalize(&self.relation),
            norm.normalize(&self.object),
        )
    }
}

/// Encoder input: `<SUBJ> s <REL> r <OBJ> o`, plus ` <SENT> sentence` with
/// context.
pub fn oie_text(t: &OieTriple, with_context: bool) -> Result<String> {
    let base = format!(
        "{} {} {} {} {} {}",
        text::SUBJ,
        t.subject,
        text::REL,
        t.relation,
        text::OBJ,
        t.object
    );
    if !with_context {
        return Ok(base);
    }
    match &t.sentence {
        Some(sentence) => Ok(format!("{base} {} {sentence}", text::SENT)),
        None => Err(Error::MissingContext),
    }
}

/// Dataset partition a sentence belongs to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    #[default]
    Train,
    Test,
}

/// A sentence together with one of its gold KG facts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentenceFactPair {
    pub sentence_id: String,
    pub sentence: String,
    pub fact: KgFact,
    pub subject_mention: Option<String>,
    pub object_mention: Option<String>,
    pub partition: Partition,
}

/// An OIE triple paired with a KG fact.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Alignment {
    pub sentence_id: String,
    pub oie: OieTriple,
    pub fact: KgFact,
    pub augmented: bool,
}

impl Alignment {
    pub fn new(sentence_id: &str, oie: OieTriple, fact: KgFact) -> Self {
        Self {
            sentence_id: sentence_id.to_string(),
            oie,
            fact,
            augmented: false,
        }
    }

    pub fn id(&self) -> Option<&str> {
        self.oie.id.as_deref()
    }

    /// Canonical ordering key: sentence, fact ids, then OIE strings.
    fn sort_key(&self) -> (&str, &KgFact, [&str; 3], bool) {
        (&self.sentence_id, &self.fact, self.oie.slots(), self.augmented)
    }
}

/// Sorts alignments into the canonical deterministic order.
pub fn canonicalize(alignments: &mut [Alignment]) {
    alignments.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
}

/// Aligns OIE triples to sentence facts by exact subject/object text match.
///
/// The match target of a fact slot is the gold mention when the dataset
/// provides one, else the entity's canonical label. Triples are
/// deduplicated per sentence first; output is canonically ordered and each
/// alignment receives the id `{sentence_id}#{n}`.
pub fn align(
    oies: &BTreeMap<String, Vec<OieTriple>>,
    pairs: &[SentenceFactPair],
    store: &KgStore,
) -> Result<Vec<Alignment>> {
    let norm = store.normalizer();
    let mut by_sentence: BTreeMap<&str, Vec<&SentenceFactPair>> = BTreeMap::new();
    for pair in pairs {
        by_sentence.entry(&pair.sentence_id).or_default().push(pair);
    }

    let mut out = Vec::new();
    for (sentence_id, triples) in oies {
        let Some(sentence_pairs) = by_sentence.get(sentence_id.as_str()) else {
            continue;
        };
        let mut seen = HashSet::new();
        let unique: Vec<&OieTriple> = triples.iter().filter(|t| seen.insert(t.key(norm))).collect();

        let mut sentence_out = Vec::new();
        for pair in sentence_pairs {
            let target = |mention: &Option<String>, id: &str| -> Result<String> {
                match mention {
                    Some(m) => Ok(norm.normalize(m)),
                    None => store
                        .get(id)
                        .map(|e| norm.normalize(&e.label))
                        .ok_or_else(|| Error::UnknownId(id.to_string())),
                }
            };
            let subject_target = target(&pair.subject_mention, &pair.fact.subject)?;
            let object_target = target(&pair.object_mention, &pair.fact.object)?;
            if !store.contains(&pair.fact.predicate) {
                return Err(Error::UnknownId(pair.fact.predicate.clone()));
            }
            for triple in &unique {
                if norm.normalize(&triple.subject) == subject_target
                    && norm.normalize(&triple.object) == object_target
                {
                    let mut oie = (*triple).clone();
                    if oie.sentence.is_none() {
                        oie.sentence = Some(pair.sentence.clone());
                    }
                    sentence_out.push(Alignment::new(sentence_id, oie, pair.fact.clone()));
                }
            }
        }
        canonicalize(&mut sentence_out);
        sentence_out.dedup_by(|a, b| a.fact == b.fact && a.oie.key(norm) == b.oie.key(norm));
        for (n, alignment) in sentence_out.iter_mut().enumerate() {
            alignment.oie.id = Some(format!("{sentence_id}#{n}"));
        }
        out.extend(sentence_out);
    }
    Ok(out)
}

/// Adds one augmented alignment per (subject form, object form) combination
/// drawn from the original strings and the entities' aliases, excluding the
/// original pair. Originals are kept and each is followed by its variants.
pub fn augment_aliases(alignments: &[Alignment], store: &KgStore) -> Result<Vec<Alignment>> {
    let mut out = Vec::with_capacity(alignments.len());
    for alignment in alignments {
        let forms = |surface: &str, id: &str| -> Result<Vec<String>> {
            let entry = store.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
            let mut forms = vec![surface.to_string()];
            for alias in &entry.aliases {
                if !forms.contains(alias) {
                    forms.push(alias.clone());
                }
            }
            Ok(forms)
        };
        let subjects = forms(&alignment.oie.subject, &alignment.fact.subject)?;
        let objects = forms(&alignment.oie.object, &alignment.fact.object)?;

        out.push(alignment.clone());
        for (i, subject) in subjects.iter().enumerate() {
            for (j, object) in objects.iter().enumerate() {
                if i == 0 && j == 0 {
                    continue;
                }
                let mut oie = alignment.oie.clone();
                oie.subject = subject.clone();
                oie.object = object.clone();
                oie.id = alignment.oie.id.as_ref().map(|id| format!("{id}~{i}.{j}"));
                out.push(Alignment {
                    sentence_id: alignment.sentence_id.clone(),
                    oie,
                    fact: alignment.fact.clone(),
                    augmented: true,
                });
            }
        }
    }
    Ok(out)
}

/// Drops training alignments whose (normalized OIE, fact) pair occurs in
/// the test set.
pub fn remove_leakage(train: &[Alignment], test: &[Alignment], norm: &Normalizer) -> Vec<Alignment> {
    let test_keys: HashSet<_> = test.iter().map(|a| (a.oie.key(norm), &a.fact)).collect();
    train
        .iter()
        .filter(|a| !test_keys.contains(&(a.oie.key(norm), &a.fact)))
        .cloned()
        .collect()
}

/// OIE file record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OieRecord {
    pub sentence_id: String,
    pub subject: String,
    pub relation: String,
    pub object: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extractor: Option<String>,
}

/// Pairs file record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairRecord {
    pub sentence_id: String,
    pub sentence: String,
    pub subject: String,
    pub predicate: String,
    pub object: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_mention: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_mention: Option<String>,
    #[serde(default)]
    pub split: Partition,
}

/// Alignment file record: the OIE, its provenance and the fact, flattened.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub id: Option<String>,
    pub sentence_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extractor: Option<String>,
    pub oie_subject: String,
    pub oie_relation: String,
    pub oie_object: String,
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub augmented: bool,
}

impl From<&Alignment> for AlignmentRecord {
    fn from(a: &Alignment) -> Self {
        Self {
            id: a.oie.id.clone(),
            sentence_id: a.sentence_id.clone(),
            sentence: a.oie.sentence.clone(),
            extractor: a.oie.extractor.clone(),
            oie_subject: a.oie.subject.clone(),
            oie_relation: a.oie.relation.clone(),
            oie_object: a.oie.object.clone(),
            subject: a.fact.subject.clone(),
            predicate: a.fact.predicate.clone(),
            object: a.fact.object.clone(),
            augmented: a.augmented,
        }
    }
}

impl AlignmentRecord {
    fn into_alignment(self, line: usize) -> Result<Alignment> {
        let oie = OieTriple {
            subject: self.oie_subject,
            relation: self.oie_relation,
            object: self.oie_object,
            sentence: self.sentence,
            extractor: self.extractor,
            id: self.id,
        };
        oie.validate().map_err(|e| Error::MalformedRecord {
            line,
            reason: e.to_string(),
        })?;
        Ok(Alignment {
            sentence_id: self.sentence_id,
            oie,
            fact: KgFact::new(&self.subject, &self.predicate, &self.object),
            augmented: self.augmented,
        })
    }
}

/// Reads an OIE file, grouping triples by sentence id. Sentence text is
/// attached later by [`align`] from the pairs file.
pub fn read_oies<R: BufRead>(reader: R) -> Result<BTreeMap<String, Vec<OieTriple>>> {
    let mut grouped: BTreeMap<String, Vec<OieTriple>> = BTreeMap::new();
    for (line, rec) in read_records::<OieRecord, _>(reader)? {
        let mut triple = OieTriple::new(&rec.subject, &rec.relation, &rec.object)
            .map_err(|e| Error::MalformedRecord {
                line,
                reason: e.to_string(),
            })?;
        triple.extractor = rec.extractor;
        grouped.entry(rec.sentence_id).or_default().push(triple);
    }
    Ok(grouped)
}

pub fn read_pairs<R: BufRead>(reader: R) -> Result<Vec<SentenceFactPair>> {
    read_records::<PairRecord, _>(reader)?
        .into_iter()
        .map(|(line, rec)| {
            text::reject_markers(&rec.sentence).map_err(|e| Error::MalformedRecord {
                line,
                reason: e.to_string(),
            })?;
            Ok(SentenceFactPair {
                sentence_id: rec.sentence_id,
                sentence: rec.sentence,
                fact: KgFact::new(&rec.subject, &rec.predicate, &rec.object),
                subject_mention: rec.subject_mention,
                object_mention: rec.object_mention,
                partition: rec.split,
            })
        })
        .collect()
}

pub fn write_oies<W: Write>(writer: &mut W, oies: &BTreeMap<String, Vec<OieTriple>>) -> Result<()> {
    let records: Vec<OieRecord> = oies
        .iter()
        .flat_map(|(sid, triples)| {
            triples.iter().map(move |t| OieRecord {
                sentence_id: sid.clone(),
                subject: t.subject.clone(),
                relation: t.relation.clone(),
                object: t.object.clone(),
                extractor: t.extractor.clone(),
            })
        })
        .collect();
    write_records(writer, &records)
}

pub fn write_pairs<W: Write>(writer: &mut W, pairs: &[SentenceFactPair]) -> Result<()> {
    let records: Vec<PairRecord> = pairs
        .iter()
        .map(|p| PairRecord {
            sentence_id: p.sentence_id.clone(),
            sentence: p.sentence.clone(),
            subject: p.fact.subject.clone(),
            predicate: p.fact.predicate.clone(),
            object: p.fact.object.clone(),
            subject_mention: p.subject_mention.clone(),
            object_mention: p.object_mention.clone(),
            split: p.partition,
        })
        .collect();
    write_records(writer, &records)
}

pub fn read_alignments<R: BufRead>(reader: R) -> Result<Vec<Alignment>> {
    read_records::<AlignmentRecord, _>(reader)?
        .into_iter()
        .map(|(line, rec)| rec.into_alignment(line))
        .collect()
}

pub fn write_alignments<W: Write>(writer: &mut W, alignments: &[Alignment]) -> Result<()> {
    let records: Vec<AlignmentRecord> = alignments.iter().map(AlignmentRecord::from).collect();
    write_records(writer, &records)
}

#[derive(Serialize, Deserialize)]
struct TaggedAlignmentRecord {
    split: Partition,
    #[serde(flatten)]
    record: AlignmentRecord,
}

/// Writes train and test alignments into one file, each record tagged
/// with its partition.
pub fn write_benchmark_alignments<W: Write>(writer: &mut W, train: &[Alignment], test: &[Alignment]) -> Result<()> {
    let tagged = train
        .iter()
        .map(|a| (Partition::Train, a))
        .chain(test.iter().map(|a| (Partition::Test, a)));
    for (split, a) in tagged {
        write_record(
            writer,
            &TaggedAlignmentRecord {
                split,
                record: AlignmentRecord::from(a),
            },
        )?;
    }
    Ok(())
}

/// Reads a file written by [`write_benchmark_alignments`] into
/// `(train, test)`.
pub fn read_benchmark_alignments<R: BufRead>(reader: R) -> Result<(Vec<Alignment>, Vec<Alignment>)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (line, rec) in read_records::<TaggedAlignmentRecord, _>(reader)? {
        let a = rec.record.into_alignment(line)?;
        match rec.split {
            Partition::Train => train.push(a),
            Partition::Test => test.push(a),
        }
    }
    Ok((train, test))
}

/// Distinct facts referenced by a set of alignments.
pub fn unique_facts(alignments: &[Alignment]) -> BTreeSet<&KgFact> {
    alignments.iter().map(|a| &a.fact).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::KgEntry;
    use proptest::prelude::*;

    fn store() -> KgStore {
        let entries = vec![
            KgEntry::entity("Q41421", "Michael Jordan").with_aliases(&["Air Jordan", "M.J."]),
            KgEntry::entity("Q128109", "Chicago Bulls").with_aliases(&["The Bulls"]),
            KgEntry::entity("Q3385492", "Pierre Hétu"),
            KgEntry::entity("Q340", "Montreal"),
            KgEntry::entity("Q1", "Solo").with_aliases(&["S."]),
            KgEntry::entity("Q2", "Other"),
            KgEntry::predicate("P54", "member of sports team"),
            KgEntry::predicate("P19", "place of birth"),
        ];
        let facts = vec![
            KgFact::new("Q41421", "P54", "Q128109"),
            KgFact::new("Q3385492", "P19", "Q340"),
            KgFact::new("Q1", "P19", "Q2"),
        ];
        KgStore::new(entries, facts, Normalizer::default()).unwrap()
    }

    fn pair(sid: &str, fact: KgFact) -> SentenceFactPair {
        SentenceFactPair {
            sentence_id: sid.into(),
            sentence: format!("sentence {sid}"),
            fact,
            subject_mention: None,
            object_mention: None,
            partition: Partition::Train,
        }
    }

    fn grouped(sid: &str, triples: Vec<OieTriple>) -> BTreeMap<String, Vec<OieTriple>> {
        BTreeMap::from([(sid.to_string(), triples)])
    }

    #[test]
    fn aligns_on_exact_subject_object() {
        let store = store();
        let oies = grouped(
            "s1",
            vec![
                OieTriple::new("Michael Jordan", "played for", "Chicago Bulls").unwrap(),
                OieTriple::new("Michael Jordan", "played for", "Chicago Bulls").unwrap(),
                OieTriple::new("Michael Jordan", "joined", "Chicago Bulls").unwrap(),
                OieTriple::new("M. Jordan", "played for", "Chicago Bulls").unwrap(),
            ],
        );
        let pairs = vec![pair("s1", KgFact::new("Q41421", "P54", "Q128109"))];
        let aligned = align(&oies, &pairs, &store).unwrap();
        assert_eq!(aligned.len(), 2, "duplicate collapsed, M. Jordan dropped");
        assert_eq!(aligned[0].oie.relation, "joined");
        assert_eq!(aligned[0].oie.id.as_deref(), Some("s1#0"));
        assert_eq!(aligned[1].oie.relation, "played for");
        assert_eq!(aligned[1].oie.sentence.as_deref(), Some("sentence s1"));
        assert!(aligned.iter().all(|a| !a.augmented));
    }

    #[test]
    fn relation_text_is_not_checked() {
        let store = store();
        let oies = grouped("s2", vec![OieTriple::new("Pierre Hétu", "April in", "Montreal").unwrap()]);
        let pairs = vec![pair("s2", KgFact::new("Q3385492", "P19", "Q340"))];
        assert_eq!(align(&oies, &pairs, &store).unwrap().len(), 1);
    }

    #[test]
    fn gold_mentions_take_priority() {
        let store = store();
        let oies = grouped("s3", vec![OieTriple::new("MJ", "played for", "Chicago Bulls").unwrap()]);
        let mut p = pair("s3", KgFact::new("Q41421", "P54", "Q128109"));
        assert!(align(&oies, std::slice::from_ref(&p), &store).unwrap().is_empty());
        p.subject_mention = Some("MJ".into());
        assert_eq!(align(&oies, &[p], &store).unwrap().len(), 1);
    }

    #[test]
    fn alias_augmentation_counts() {
        let store = store();
        let base = Alignment::new(
            "s1",
            OieTriple::new("Michael Jordan", "played for", "Chicago Bulls").unwrap(),
            KgFact::new("Q41421", "P54", "Q128109"),
        );
        let out = augment_aliases(std::slice::from_ref(&base), &store).unwrap();
        // (1 + 2) * (1 + 1) - 1 augmented plus the original
        assert_eq!(out.len(), 1 + 5);
        assert_eq!(out[0], base);
        let triples: Vec<(String, String)> = out[1..]
            .iter()
            .map(|a| (a.oie.subject.clone(), a.oie.object.clone()))
            .collect();
        assert!(triples.contains(&("Air Jordan".into(), "Chicago Bulls".into())));
        assert!(triples.contains(&("M.J.".into(), "The Bulls".into())));
        assert!(out[1..].iter().all(|a| a.augmented && a.oie.relation == "played for"));

        let no_alias = Alignment::new(
            "s2",
            OieTriple::new("Pierre Hétu", "born in", "Montreal").unwrap(),
            KgFact::new("Q3385492", "P19", "Q340"),
        );
        assert_eq!(augment_aliases(&[no_alias], &store).unwrap().len(), 1);

        let one_alias = Alignment::new(
            "s3",
            OieTriple::new("Solo", "born in", "Other").unwrap(),
            KgFact::new("Q1", "P19", "Q2"),
        );
        assert_eq!(augment_aliases(&[one_alias], &store).unwrap().len(), 2);
    }

    #[test]
    fn leakage_removal() {
        let norm = Normalizer::default();
        let fact = KgFact::new("Q41421", "P54", "Q128109");
        let a = Alignment::new("s1", OieTriple::new("Michael Jordan", "played for", "Chicago Bulls").unwrap(), fact.clone());
        let b = Alignment::new("s9", OieTriple::new("Air Jordan", "played for", "Chicago Bulls").unwrap(), fact.clone());
        let c = Alignment::new("s2", OieTriple::new("Pierre Hétu", "born in", "Montreal").unwrap(), KgFact::new("Q3385492", "P19", "Q340"));
        let train = vec![a.clone(), b.clone()];
        let kept = remove_leakage(&train, std::slice::from_ref(&a), &norm);
        assert_eq!(kept, vec![b.clone()]);
        assert_eq!(remove_leakage(&train, &[c], &norm), train);
    }

    #[test]
    fn oie_text_forms() {
        let t = OieTriple::new("M. Jordan", "grew up in", "Wilmington").unwrap();
        assert_eq!(oie_text(&t, false).unwrap(), "<SUBJ> M. Jordan <REL> grew up in <OBJ> Wilmington");
        assert!(matches!(oie_text(&t, true), Err(Error::MissingContext)));
        let t = t.with_sentence("He grew up in Wilmington.").unwrap();
        assert_eq!(
            oie_text(&t, true).unwrap(),
            "<SUBJ> M. Jordan <REL> grew up in <OBJ> Wilmington <SENT> He grew up in Wilmington."
        );
    }

    #[test]
    fn rejects_bad_slots() {
        assert!(OieTriple::new("  ", "r", "o").is_err());
        assert!(matches!(
            OieTriple::new("a <OBJ> b", "r", "o"),
            Err(Error::ReservedMarker { marker: "<OBJ>", .. })
        ));
    }

    #[test]
    fn alignment_file_round_trip() {
        let store = store();
        let oies = grouped("s1", vec![OieTriple::new("Michael Jordan", "played for", "Chicago Bulls").unwrap().with_extractor("minie")]);
        let aligned = align(&oies, &[pair("s1", KgFact::new("Q41421", "P54", "Q128109"))], &store).unwrap();
        let augmented = augment_aliases(&aligned, &store).unwrap();
        let mut buf = Vec::new();
        write_alignments(&mut buf, &augmented).unwrap();
        assert_eq!(read_alignments(buf.as_slice()).unwrap(), augmented);
    }

    fn slot() -> impl Strategy<Value = String> {
        "[a-zA-Z<>]{1,6}( [a-zA-Z]{1,4})?".prop_filter("no markers", |s| text::reject_markers(s).is_ok())
    }

    proptest! {
        #[test]
        fn oie_text_injective(a in (slot(), slot(), slot()), b in (slot(), slot(), slot())) {
            let ta = OieTriple::new(&a.0, &a.1, &a.2).unwrap();
            let tb = OieTriple::new(&b.0, &b.1, &b.2).unwrap();
            let same_text = oie_text(&ta, false).unwrap() == oie_text(&tb, false).unwrap();
            prop_assert_eq!(same_text, a == b);
        }

        #[test]
        fn leakage_result_disjoint_from_test(train_idx in proptest::collection::vec(0usize..6, 0..10), test_idx in proptest::collection::vec(0usize..6, 0..10)) {
            let norm = Normalizer::default();
            let make = |i: usize| Alignment::new(
                "s",
                OieTriple::new(&format!("s{}", i % 3), "r", "o").unwrap(),
                KgFact::new(&format!("Q{}", i % 2), "P", "Q"),
            );
            let train: Vec<_> = train_idx.into_iter().map(make).collect();
            let test: Vec<_> = test_idx.into_iter().map(make).collect();
            let kept = remove_leakage(&train, &test, &norm);
            for a in &kept {
                prop_assert!(!test.iter().any(|t| t.oie.key(&norm) == a.oie.key(&norm) && t.fact == a.fact));
            }
            // everything not in test survives
            let expected = train.iter().filter(|a| !test.iter().any(|t| t.oie.key(&norm) == a.oie.key(&norm) && t.fact == a.fact)).count();
            prop_assert_eq!(kept.len(), expected);
        }
    }
}
