//! The four evaluation facets: transductive, inductive, polysemous and
//! out-of-KG test splits.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{write_alignments, Alignment};
use crate::error::Result;
use crate::io::write_record;
use crate::kg::KgStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Transductive,
    Inductive,
    Polysemous,
    OutOfKg,
}

impl SplitKind {
    pub const ALL: [SplitKind; 4] = [
        SplitKind::Transductive,
        SplitKind::Inductive,
        SplitKind::Polysemous,
        SplitKind::OutOfKg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Transductive => "transductive",
            SplitKind::Inductive => "inductive",
            SplitKind::Polysemous => "polysemous",
            SplitKind::OutOfKg => "out_of_kg",
        }
    }
}

impl std::str::FromStr for SplitKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        SplitKind::ALL
            .into_iter()
            .find(|k| k.name() == s || (s == "ookg" && *k == SplitKind::OutOfKg))
            .ok_or_else(|| format!("unknown split {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InductiveMode {
    /// At least one of subject/object never occurs in a training fact.
    #[default]
    AnyEntityUnseen,
    /// Both subject and object never occur in a training fact.
    AllEntitiesUnseen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub kind: SplitKind,
    #[serde(default)]
    pub inductive_mode: InductiveMode,
}

/// Sample, entity, predicate and fact counts of a split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub split_type: String,
    pub total_samples: usize,
    pub unique_entities: usize,
    pub unique_predicates: usize,
    pub unique_facts: usize,
}

impl SplitStats {
    pub fn recount(split_type: &str, alignments: &[Alignment]) -> Self {
        let mut entities = BTreeSet::new();
        let mut predicates = BTreeSet::new();
        let mut facts = BTreeSet::new();
        for a in alignments {
            entities.insert(a.fact.subject.as_str());
            entities.insert(a.fact.object.as_str());
            predicates.insert(a.fact.predicate.as_str());
            facts.insert(&a.fact);
        }
        Self {
            split_type: split_type.to_string(),
            total_samples: alignments.len(),
            unique_entities: entities.len(),
            unique_predicates: predicates.len(),
            unique_facts: facts.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitResult {
    pub kind: SplitKind,
    pub alignments: Vec<Alignment>,
    pub stats: SplitStats,
}

impl SplitResult {
    fn new(kind: SplitKind, alignments: Vec<Alignment>) -> Self {
        let stats = SplitStats::recount(kind.name(), &alignments);
        Self {
            kind,
            alignments,
            stats,
        }
    }

    pub fn write_alignments<W: Write>(&self, writer: &mut W) -> Result<()> {
        write_alignments(writer, &self.alignments)
    }

    pub fn write_stats<W: Write>(&self, writer: &mut W) -> Result<()> {
        write_record(writer, &self.stats)
    }
}

/// Entity and predicate ids occurring in the training facts.
struct Seen<'a> {
    entities: HashSet<&'a str>,
    predicates: HashSet<&'a str>,
    facts: HashSet<[&'a str; 3]>,
}

impl<'a> Seen<'a> {
    fn new(train: &'a [Alignment]) -> Self {
        let mut seen = Seen {
            entities: HashSet::new(),
            predicates: HashSet::new(),
            facts: HashSet::new(),
        };
        for a in train {
            seen.entities.insert(&a.fact.subject);
            seen.entities.insert(&a.fact.object);
            seen.predicates.insert(&a.fact.predicate);
            seen.facts.insert(a.fact.ids());
        }
        seen
    }
}

fn filter(test: &[Alignment], keep: impl Fn(&Alignment) -> bool) -> Vec<Alignment> {
    test.iter().filter(|a| keep(a)).cloned().collect()
}

/// Test alignments whose components were all seen in training but whose
/// whole fact was not.
pub fn transductive_split(test: &[Alignment], train: &[Alignment]) -> SplitResult {
    let seen = Seen::new(train);
    let kept = filter(test, |a| {
        seen.entities.contains(a.fact.subject.as_str())
            && seen.predicates.contains(a.fact.predicate.as_str())
            && seen.entities.contains(a.fact.object.as_str())
            && !seen.facts.contains(&a.fact.ids())
    });
    SplitResult::new(SplitKind::Transductive, kept)
}

/// Test alignments with unseen subject/object entities.
pub fn inductive_split(test: &[Alignment], train: &[Alignment], mode: InductiveMode) -> SplitResult {
    let seen = Seen::new(train);
    let kept = filter(test, |a| {
        let subject_unseen = !seen.entities.contains(a.fact.subject.as_str());
        let object_unseen = !seen.entities.contains(a.fact.object.as_str());
        match mode {
            InductiveMode::AnyEntityUnseen => subject_unseen || object_unseen,
            InductiveMode::AllEntitiesUnseen => subject_unseen && object_unseen,
        }
    });
    SplitResult::new(SplitKind::Inductive, kept)
}

/// Test alignments whose subject or object surface resolves to two or more
/// entities of `store`.
pub fn polysemous_split(test: &[Alignment], store: &KgStore) -> SplitResult {
    let kept = filter(test, |a| {
        store.lookup_surface(&a.oie.subject).len() >= 2 || store.lookup_surface(&a.oie.object).len() >= 2
    });
    SplitResult::new(SplitKind::Polysemous, kept)
}

/// Test alignments whose subject, object and predicate are all absent from
/// the training facts.
pub fn ookg_split(test: &[Alignment], train: &[Alignment]) -> SplitResult {
    let seen = Seen::new(train);
    let kept = filter(test, |a| {
        !seen.entities.contains(a.fact.subject.as_str())
            && !seen.entities.contains(a.fact.object.as_str())
            && !seen.predicates.contains(a.fact.predicate.as_str())
    });
    SplitResult::new(SplitKind::OutOfKg, kept)
}

/// Dispatches on a [`SplitSpec`].
pub fn make_split(spec: SplitSpec, test: &[Alignment], train: &[Alignment], store: &KgStore) -> SplitResult {
    match spec.kind {
        SplitKind::Transductive => transductive_split(test, train),
        SplitKind::Inductive => inductive_split(test, train, spec.inductive_mode),
        SplitKind::Polysemous => polysemous_split(test, store),
        SplitKind::OutOfKg => ookg_split(test, train),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::OieTriple;
    use crate::kg::{KgEntry, KgFact};
    use crate::text::Normalizer;

    fn al(s: &str, p: &str, o: &str) -> Alignment {
        al_text(s, p, o, &format!("{s} text"), &format!("{o} text"))
    }

    fn al_text(s: &str, p: &str, o: &str, subj: &str, obj: &str) -> Alignment {
        Alignment::new("x", OieTriple::new(subj, "rel", obj).unwrap(), KgFact::new(s, p, o))
    }

    #[test]
    fn transductive_cases() {
        let train = vec![al("Q41421", "P19", "Q18419"), al("Q1", "P54", "Q128109")];
        let test = vec![
            al("Q41421", "P54", "Q128109"),
            al("Q41421", "P19", "Q18419"),
            al("Q41421", "P54", "Q659400"),
        ];
        let split = transductive_split(&test, &train);
        assert_eq!(split.alignments, vec![test[0].clone()]);
        assert_eq!(split.stats.total_samples, 1);
    }

    #[test]
    fn inductive_cases() {
        let train = vec![al("Q41421", "P54", "Q128109")];
        let one_unseen = al("Q41421", "P19", "Q659400");
        let both_seen = al("Q128109", "P19", "Q41421");
        let both_unseen = al("Q5", "P19", "Q6");
        let test = vec![one_unseen.clone(), both_seen, both_unseen.clone()];
        let any = inductive_split(&test, &train, InductiveMode::AnyEntityUnseen);
        assert_eq!(any.alignments, vec![one_unseen, both_unseen.clone()]);
        let all = inductive_split(&test, &train, InductiveMode::AllEntitiesUnseen);
        assert_eq!(all.alignments, vec![both_unseen]);
    }

    #[test]
    fn polysemous_cases() {
        let store = KgStore::new(
            vec![
                KgEntry::entity("Q41421", "Michael Jordan"),
                KgEntry::entity("Q3308205", "Michael Jordan"),
                KgEntry::entity("Q128109", "Chicago Bulls"),
                KgEntry::entity("Q9", "Bulls"),
                KgEntry::entity("Q10", "Chicago").with_aliases(&["Bulls"]),
                KgEntry::predicate("P54", "p"),
            ],
            vec![],
            Normalizer::default(),
        )
        .unwrap();
        let poly_subject = al_text("Q41421", "P54", "Q128109", "Michael Jordan", "Chicago Bulls");
        let unique = al_text("Q10", "P54", "Q128109", "Chicago", "Chicago Bulls");
        let poly_object = al_text("Q10", "P54", "Q9", "Chicago", "Bulls");
        let split = polysemous_split(&[poly_subject.clone(), unique, poly_object.clone()], &store);
        assert_eq!(split.alignments, vec![poly_subject, poly_object]);
    }

    #[test]
    fn ookg_cases() {
        let train = vec![al("Q1", "P1", "Q2")];
        let all_unseen = al("Q3", "P2", "Q4");
        let pred_seen = al("Q3", "P1", "Q4");
        let split = ookg_split(&[all_unseen.clone(), pred_seen.clone()], &train);
        assert_eq!(split.alignments, vec![all_unseen.clone()]);
        let split = ookg_split(&[all_unseen.clone(), pred_seen.clone()], &[]);
        assert_eq!(split.alignments.len(), 2);
    }

    #[test]
    fn stats_count_uniques() {
        let items = vec![al("Q1", "P1", "Q2"), al("Q1", "P1", "Q2"), al("Q2", "P2", "Q3")];
        let stats = SplitStats::recount("t", &items);
        assert_eq!(
            stats,
            SplitStats {
                split_type: "t".into(),
                total_samples: 3,
                unique_entities: 3,
                unique_predicates: 2,
                unique_facts: 2
            }
        );
        let mut buf = Vec::new();
        SplitResult::new(SplitKind::Inductive, items).write_stats(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("\"unique_predicates\":2"));
    }

    #[test]
    fn split_kind_parses() {
        assert_eq!("out_of_kg".parse::<SplitKind>(), Ok(SplitKind::OutOfKg));
        assert_eq!("ookg".parse::<SplitKind>(), Ok(SplitKind::OutOfKg));
        assert!("other".parse::<SplitKind>().is_err());
    }
}
