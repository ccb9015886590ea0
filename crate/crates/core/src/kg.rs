//! Reference knowledge graph: entries (entities and predicates), canonical
//! facts and a surface-string index over entity labels and aliases.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::Alignment;
use crate::error::{Error, Result};
use crate::io::{read_records, write_records};
use crate::text::{self, Normalizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Entity,
    Predicate,
}

/// One canonical KG concept.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgEntry {
    pub id: String,
    pub kind: EntryKind,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default)]
    pub aliases: Vec<String>,
}

impl KgEntry {
    pub fn entity(id: &str, label: &str) -> Self {
        Self {
            id: id.to_string(),
            kind: EntryKind::Entity,
            label: label.to_string(),
            description: None,
            aliases: Vec::new(),
        }
    }

    pub fn predicate(id: &str, label: &str) -> Self {
        Self {
            kind: EntryKind::Predicate,
            ..Self::entity(id, label)
        }
    }

    pub fn with_description(mut self, description: &str) -> Self {
        self.description = Some(description.to_string());
        self
    }

    pub fn with_aliases<S: AsRef<str>>(mut self, aliases: &[S]) -> Self {
        self.aliases = aliases.iter().map(|a| a.as_ref().to_string()).collect();
        self
    }

    /// Checks the per-entry invariants; `reason` strings end up in
    /// `MalformedRecord` errors.
    fn check(&self) -> std::result::Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.label.trim().is_empty() {
            return Err(format!("entry {} has an empty label", self.id));
        }
        let mut seen = HashSet::new();
        for alias in &self.aliases {
            if alias == &self.label {
                return Err(format!("entry {} lists its label as an alias", self.id));
            }
            if !seen.insert(alias.as_str()) {
                return Err(format!("entry {} has duplicate alias {alias:?}", self.id));
            }
        }
        let texts = std::iter::once(&self.label)
            .chain(self.description.iter())
            .chain(self.aliases.iter());
        for t in texts {
            text::reject_markers(t).map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}

/// Canonical (subject; predicate; object) triple over entry ids.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KgFact {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl KgFact {
    pub fn new(subject: &str, predicate: &str, object: &str) -> Self {
        Self {
            subject: subject.to_string(),
            predicate: predicate.to_string(),
            object: object.to_string(),
        }
    }

    pub fn ids(&self) -> [&str; 3] {
        [&self.subject, &self.predicate, &self.object]
    }
}

/// Textual form fed to encoders: `label <DESC> description`, with the
/// description replaced by `<mask>` when masked.
pub fn entry_text(entry: &KgEntry, mask_description: bool) -> String {
    match (&entry.description, mask_description) {
        (None, _) => entry.label.clone(),
        (Some(_), true) => format!("{} {} {}", entry.label, text::DESC, text::MASK),
        (Some(desc), false) => format!("{} {} {}", entry.label, text::DESC, desc),
    }
}

/// Immutable, validated reference KG.
#[derive(Clone, Debug)]
pub struct KgStore {
    entries: Vec<KgEntry>,
    by_id: HashMap<String, usize>,
    facts: BTreeSet<KgFact>,
    surface_index: HashMap<String, BTreeSet<String>>,
    normalizer: Normalizer,
}

impl KgStore {
    /// Validates entries and facts. Line numbers in errors are 1-based
    /// positions within `entries` / `facts`.
    pub fn new(entries: Vec<KgEntry>, facts: Vec<KgFact>, normalizer: Normalizer) -> Result<Self> {
        let numbered_entries = entries.into_iter().enumerate().map(|(i, e)| (i + 1, e));
        let numbered_facts = facts.into_iter().enumerate().map(|(i, f)| (i + 1, f));
        Self::from_numbered(numbered_entries, numbered_facts, normalizer)
    }

    fn from_numbered(
        entries: impl IntoIterator<Item = (usize, KgEntry)>,
        facts: impl IntoIterator<Item = (usize, KgFact)>,
        normalizer: Normalizer,
    ) -> Result<Self> {
        let mut stored = Vec::new();
        let mut by_id = HashMap::new();
        for (line, entry) in entries {
            entry
                .check()
                .map_err(|reason| Error::MalformedRecord { line, reason })?;
            if by_id.contains_key(&entry.id) {
                return Err(Error::DuplicateId { line, id: entry.id });
            }
            by_id.insert(entry.id.clone(), stored.len());
            stored.push(entry);
        }

        let mut fact_set = BTreeSet::new();
        for (line, fact) in facts {
            let slots = [
                (&fact.subject, EntryKind::Entity),
                (&fact.predicate, EntryKind::Predicate),
                (&fact.object, EntryKind::Entity),
            ];
            for (id, kind) in slots {
                match by_id.get(id.as_str()) {
                    None => {
                        return Err(Error::DanglingFactReference {
                            line,
                            id: id.clone(),
                        })
                    }
                    Some(&idx) if stored[idx].kind != kind => {
                        return Err(Error::MalformedRecord {
                            line,
                            reason: format!("{id} is not of kind {kind:?}"),
                        })
                    }
                    Some(_) => {}
                }
            }
            fact_set.insert(fact);
        }

        let mut surface_index: HashMap<String, BTreeSet<String>> = HashMap::new();
        for entry in stored.iter().filter(|e| e.kind == EntryKind::Entity) {
            for surface in std::iter::once(&entry.label).chain(&entry.aliases) {
                surface_index
                    .entry(normalizer.normalize(surface))
                    .or_default()
                    .insert(entry.id.clone());
            }
        }

        Ok(Self {
            entries: stored,
            by_id,
            facts: fact_set,
            surface_index,
            normalizer,
        })
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&KgEntry> {
        self.by_id.get(id).map(|&i| &self.entries[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    /// Entries in load order.
    pub fn entries(&self) -> &[KgEntry] {
        &self.entries
    }

    pub fn entities(&self) -> impl Iterator<Item = &KgEntry> {
        self.entries.iter().filter(|e| e.kind == EntryKind::Entity)
    }

    pub fn predicates(&self) -> impl Iterator<Item = &KgEntry> {
        self.entries.iter().filter(|e| e.kind == EntryKind::Predicate)
    }

    pub fn entries_of(&self, kind: EntryKind) -> impl Iterator<Item = &KgEntry> {
        self.entries.iter().filter(move |e| e.kind == kind)
    }

    /// Facts in canonical (sorted) order.
    pub fn facts(&self) -> impl Iterator<Item = &KgFact> {
        self.facts.iter()
    }

    pub fn fact_count(&self) -> usize {
        self.facts.len()
    }

    pub fn contains_fact(&self, fact: &KgFact) -> bool {
        self.facts.contains(fact)
    }

    /// Entity ids whose label or any alias equals `surface` after
    /// normalization.
    pub fn lookup_surface(&self, surface: &str) -> BTreeSet<&str> {
        self.surface_index
            .get(&self.normalizer.normalize(surface))
            .map(|ids| ids.iter().map(String::as_str).collect())
            .unwrap_or_default()
    }

    /// Keeps entries referenced by at least `min_count` facts, dropping
    /// facts that lose an entry, until nothing changes.
    pub fn filter_by_frequency(&self, min_count: usize) -> KgStore {
        let min_count = min_count.max(1);
        let mut facts: Vec<&KgFact> = self.facts.iter().collect();
        let mut alive: HashSet<&str> = self.by_id.keys().map(String::as_str).collect();
        loop {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for fact in &facts {
                let unique: BTreeSet<&str> = fact.ids().into_iter().collect();
                for id in unique {
                    *counts.entry(id).or_default() += 1;
                }
            }
            let next_alive: HashSet<&str> = alive
                .iter()
                .copied()
                .filter(|id| counts.get(id).copied().unwrap_or(0) >= min_count)
                .collect();
            let next_facts: Vec<&KgFact> = facts
                .iter()
                .copied()
                .filter(|f| f.ids().iter().all(|id| next_alive.contains(id)))
                .collect();
            let stable = next_alive.len() == alive.len() && next_facts.len() == facts.len();
            alive = next_alive;
            facts = next_facts;
            if stable {
                break;
            }
        }
        self.subset(|e| alive.contains(e.id.as_str()), facts.into_iter().cloned())
    }

    /// Benchmark-restricted KG: the entries referenced by the alignments'
    /// facts, plus every stored fact over those entries.
    pub fn restrict_to_benchmark(&self, alignments: &[Alignment]) -> Result<KgStore> {
        let mut keep: HashSet<&str> = HashSet::new();
        for alignment in alignments {
            for id in alignment.fact.ids() {
                if !self.contains(id) {
                    return Err(Error::UnknownId(id.to_string()));
                }
                keep.insert(id);
            }
        }
        let facts = self
            .facts
            .iter()
            .filter(|f| f.ids().iter().all(|id| keep.contains(id)))
            .cloned()
            .collect::<Vec<_>>();
        Ok(self.subset(|e| keep.contains(e.id.as_str()), facts))
    }

    /// New store with the selected entries, preserving load order.
    /// Facts must only reference kept entries.
    fn subset(&self, keep: impl Fn(&KgEntry) -> bool, facts: impl IntoIterator<Item = KgFact>) -> KgStore {
        let entries: Vec<KgEntry> = self.entries.iter().filter(|e| keep(e)).cloned().collect();
        KgStore::new(entries, facts.into_iter().collect(), self.normalizer)
            .expect("subset of a valid store is valid")
    }

    /// Adds entries and facts on top of this store (e.g. distractors for a
    /// larger store variant).
    pub fn extended(&self, entries: Vec<KgEntry>, facts: Vec<KgFact>) -> Result<KgStore> {
        let all_entries = self.entries.iter().cloned().chain(entries).collect();
        let all_facts = self.facts.iter().cloned().chain(facts).collect();
        KgStore::new(all_entries, all_facts, self.normalizer)
    }

    pub fn write_entries<W: Write>(&self, writer: &mut W) -> Result<()> {
        write_records(writer, &self.entries)
    }

    pub fn write_facts<W: Write>(&self, writer: &mut W) -> Result<()> {
        write_records(writer, &self.facts)
    }

    /// Number of facts each entry participates in.
    pub fn frequencies(&self) -> BTreeMap<&str, usize> {
        let mut counts: BTreeMap<&str, usize> =
            self.entries.iter().map(|e| (e.id.as_str(), 0)).collect();
        for fact in &self.facts {
            let unique: BTreeSet<&str> = fact.ids().into_iter().collect();
            for id in unique {
                *counts.get_mut(id).expect("validated") += 1;
            }
        }
        counts
    }
}

/// Loads a store from line-delimited entry and fact records.
pub fn load_kg<E: BufRead, F: BufRead>(
    entries_source: E,
    facts_source: F,
    normalizer: Normalizer,
) -> Result<KgStore> {
    let entries = read_records::<KgEntry, _>(entries_source)?;
    let facts = read_records::<KgFact, _>(facts_source)?;
    KgStore::from_numbered(entries, facts, normalizer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::OieTriple;
    use proptest::prelude::*;

    fn jordan() -> KgEntry {
        KgEntry::entity("Q41421", "Michael Jordan")
            .with_description("American basketball player and businessman")
            .with_aliases(&["Air Jordan", "M.J.", "His Airness"])
    }

    fn jordan_world() -> KgStore {
        let entries = vec![
            jordan(),
            KgEntry::entity("Q3308205", "Michael Jordan").with_description("computer scientist"),
            KgEntry::entity("Q128109", "Chicago Bulls").with_aliases(&["Bulls", "The Bulls"]),
            KgEntry::predicate("P54", "member of sports team"),
            KgEntry::predicate("P19", "place of birth")
                .with_description("most specific known birth location of a person"),
            KgEntry::entity("Q18419", "Brooklyn"),
        ];
        let facts = vec![
            KgFact::new("Q41421", "P54", "Q128109"),
            KgFact::new("Q41421", "P19", "Q18419"),
        ];
        KgStore::new(entries, facts, Normalizer::default()).unwrap()
    }

    #[test]
    fn loads_jsonl_and_retrieves_by_id() {
        let entries = r#"{"id":"Q41421","kind":"entity","label":"Michael Jordan","description":"American basketball player and businessman","aliases":["Air Jordan","M.J.","His Airness"]}
{"id":"P54","kind":"predicate","label":"member of sports team"}
"#;
        let store = load_kg(entries.as_bytes(), "".as_bytes(), Normalizer::default()).unwrap();
        assert_eq!(store.get("Q41421"), Some(&jordan()));
        assert_eq!(store.fact_count(), 0);
        assert!(!store.contains_fact(&KgFact::new("Q41421", "P54", "Q41421")));
    }

    #[test]
    fn load_errors_name_the_line() {
        let entries = "{\"id\":\"Q1\",\"kind\":\"entity\",\"label\":\"a\"}\n{\"id\":\"Q1\",\"kind\":\"entity\",\"label\":\"b\"}\n";
        let err = load_kg(entries.as_bytes(), "".as_bytes(), Normalizer::default()).unwrap_err();
        assert!(matches!(err, Error::DuplicateId { line: 2, .. }));

        let entries = "{\"id\":\"Q1\",\"kind\":\"entity\",\"label\":\"a\"}\n{\"id\":\"P1\",\"kind\":\"predicate\",\"label\":\"p\"}\n";
        let facts = "{\"subject\":\"Q1\",\"predicate\":\"P1\",\"object\":\"Q1\"}\n{\"subject\":\"Q1\",\"predicate\":\"P1\",\"object\":\"Q999999\"}\n";
        let err = load_kg(entries.as_bytes(), facts.as_bytes(), Normalizer::default()).unwrap_err();
        match err {
            Error::DanglingFactReference { line, id } => {
                assert_eq!(line, 2);
                assert_eq!(id, "Q999999");
            }
            other => panic!("unexpected {other:?}"),
        }

        let err = load_kg("{\"id\":\"Q1\"}\n".as_bytes(), "".as_bytes(), Normalizer::default())
            .unwrap_err();
        assert!(matches!(err, Error::MalformedRecord { line: 1, .. }));
    }

    #[test]
    fn kind_mismatch_and_alias_invariants() {
        let entries = vec![KgEntry::entity("Q1", "a"), KgEntry::predicate("P1", "p")];
        let bad = vec![KgFact::new("Q1", "Q1", "Q1")];
        assert!(matches!(
            KgStore::new(entries, bad, Normalizer::default()),
            Err(Error::MalformedRecord { .. })
        ));
        let dup_alias = vec![KgEntry::entity("Q1", "a").with_aliases(&["b", "b"])];
        assert!(KgStore::new(dup_alias, vec![], Normalizer::default()).is_err());
        let label_alias = vec![KgEntry::entity("Q1", "a").with_aliases(&["a"])];
        assert!(KgStore::new(label_alias, vec![], Normalizer::default()).is_err());
        let marker = vec![KgEntry::entity("Q1", "a <DESC> b")];
        assert!(KgStore::new(marker, vec![], Normalizer::default()).is_err());
    }

    #[test]
    fn entry_text_forms() {
        assert_eq!(
            entry_text(&jordan(), false),
            "Michael Jordan <DESC> American basketball player and businessman"
        );
        assert_eq!(entry_text(&jordan(), true), "Michael Jordan <DESC> <mask>");
        let p19 = KgEntry::predicate("P19", "place of birth")
            .with_description("most specific known birth location of a person");
        assert_eq!(
            entry_text(&p19, false),
            "place of birth <DESC> most specific known birth location of a person"
        );
        let bare = KgEntry::entity("Q18419", "Brooklyn");
        assert_eq!(entry_text(&bare, false), "Brooklyn");
        assert_eq!(entry_text(&bare, true), "Brooklyn");
    }

    #[test]
    fn surface_lookup() {
        let store = jordan_world();
        let hits: Vec<_> = store.lookup_surface("Michael Jordan").into_iter().collect();
        assert_eq!(hits, vec!["Q3308205", "Q41421"]);
        let mj: Vec<_> = store.lookup_surface("M.J.").into_iter().collect();
        assert_eq!(mj, vec!["Q41421"]);
        assert!(store.lookup_surface("Scottie Pippen").is_empty());
        // predicates are not surface-indexed
        assert!(store.lookup_surface("place of birth").is_empty());
        // NFC: decomposed input finds composed label
        let store = KgStore::new(
            vec![KgEntry::entity("Q1", "Hétu")],
            vec![],
            Normalizer::default(),
        )
        .unwrap();
        assert!(store.lookup_surface("He\u{301}tu").contains("Q1"));
    }

    /// Builds a star world where entity `Q{i}` takes part in `counts[i]`
    /// facts, each with its own fresh partner entity that appears once.
    fn counted_world(counts: &[usize]) -> KgStore {
        let mut entries = vec![KgEntry::predicate("P1", "p")];
        let mut facts = Vec::new();
        for (i, &n) in counts.iter().enumerate() {
            entries.push(KgEntry::entity(&format!("Q{i}"), &format!("e{i}")));
            for j in 0..n {
                let partner = format!("X{i}_{j}");
                entries.push(KgEntry::entity(&partner, &partner));
                facts.push(KgFact::new(&format!("Q{i}"), "P1", &partner));
            }
        }
        KgStore::new(entries, facts, Normalizer::default()).unwrap()
    }

    #[test]
    fn frequency_filter_keeps_five_drops_four() {
        // R, S, T form a dense core (20 facts each, over 5 predicates); hub
        // Q0 touches the core 4 times and Q1 touches it 5 times.
        let mut entries: Vec<KgEntry> = (1..=5)
            .map(|k| KgEntry::predicate(&format!("P{k}"), "p"))
            .collect();
        for id in ["Q0", "Q1", "R", "S", "T"] {
            entries.push(KgEntry::entity(id, id));
        }
        let mut facts = Vec::new();
        for k in 1..=5 {
            let p = format!("P{k}");
            facts.push(KgFact::new("R", &p, "S"));
            facts.push(KgFact::new("S", &p, "T"));
            facts.push(KgFact::new("T", &p, "R"));
            facts.push(KgFact::new("S", &p, "R"));
            facts.push(KgFact::new("T", &p, "S"));
            facts.push(KgFact::new("R", &p, "T"));
        }
        for k in 1..=4 {
            facts.push(KgFact::new("Q0", &format!("P{k}"), "R"));
        }
        for k in 1..=5 {
            facts.push(KgFact::new("Q1", &format!("P{k}"), "S"));
        }
        let store = KgStore::new(entries, facts, Normalizer::default()).unwrap();
        let freq = store.frequencies();
        assert_eq!(freq["Q0"], 4);
        assert_eq!(freq["Q1"], 5);
        let filtered = store.filter_by_frequency(5);
        assert!(!filtered.contains("Q0"));
        assert!(filtered.contains("Q1"));
        assert_eq!(filtered.fact_count(), store.fact_count() - 4);
        for &n in filtered.frequencies().values() {
            assert!(n >= 5);
        }
    }

    #[test]
    fn frequency_filter_cascades() {
        // partners occur once; once they fall the hubs lose every fact
        let store = counted_world(&[4, 5]);
        assert!(store.filter_by_frequency(5).is_empty());
        let filtered = store.filter_by_frequency(1);
        assert_eq!(filtered.len(), store.len());
        assert_eq!(filtered.fact_count(), store.fact_count());
    }

    #[test]
    fn restrict_to_benchmark_cases() {
        let store = jordan_world();
        let oie = OieTriple::new("Michael Jordan", "played for", "Chicago Bulls").unwrap();
        let aligned = Alignment::new("s1", oie, KgFact::new("Q41421", "P54", "Q128109"));
        let brkg = store.restrict_to_benchmark(std::slice::from_ref(&aligned)).unwrap();
        assert_eq!(brkg.entities().count(), 2);
        assert_eq!(brkg.predicates().count(), 1);
        assert_eq!(brkg.fact_count(), 1);

        assert!(store.restrict_to_benchmark(&[]).unwrap().is_empty());

        let mut unknown = aligned.clone();
        unknown.fact.object = "Q0".into();
        assert!(matches!(
            store.restrict_to_benchmark(&[unknown]),
            Err(Error::UnknownId(id)) if id == "Q0"
        ));
    }

    fn arb_store() -> impl Strategy<Value = KgStore> {
        (2usize..12, 1usize..4, proptest::collection::vec((0usize..64, 0usize..64, 0usize..64), 0..40))
            .prop_map(|(n_ent, n_pred, raw)| {
                let mut entries: Vec<KgEntry> = (0..n_ent)
                    .map(|i| KgEntry::entity(&format!("Q{i}"), &format!("name {}", i % 5)))
                    .collect();
                entries.extend((0..n_pred).map(|i| KgEntry::predicate(&format!("P{i}"), "p")));
                let facts = raw
                    .into_iter()
                    .map(|(s, p, o)| {
                        KgFact::new(
                            &format!("Q{}", s % n_ent),
                            &format!("P{}", p % n_pred),
                            &format!("Q{}", o % n_ent),
                        )
                    })
                    .collect();
                KgStore::new(entries, facts, Normalizer::default()).unwrap()
            })
    }

    proptest! {
        #[test]
        fn facts_always_resolve_and_labels_lookup(store in arb_store()) {
            for fact in store.facts() {
                for id in fact.ids() {
                    prop_assert!(store.contains(id));
                }
            }
            for e in store.entities() {
                prop_assert!(store.lookup_surface(&e.label).contains(e.id.as_str()));
            }
        }

        #[test]
        fn frequency_fixpoint(store in arb_store(), min_count in 1usize..6) {
            let filtered = store.filter_by_frequency(min_count);
            for &n in filtered.frequencies().values() {
                prop_assert!(n >= min_count);
            }
            for fact in filtered.facts() {
                prop_assert!(store.contains_fact(fact));
            }
        }

        #[test]
        fn restriction_matches_brute_force(store in arb_store(), pick in proptest::collection::vec(any::<prop::sample::Index>(), 0..6)) {
            let facts: Vec<&KgFact> = store.facts().collect();
            if facts.is_empty() { return Ok(()); }
            let alignments: Vec<Alignment> = pick.iter().map(|ix| {
                let f = ix.get(&facts);
                Alignment::new("s", OieTriple::new("a", "b", "c").unwrap(), (*f).clone())
            }).collect();
            let brkg = store.restrict_to_benchmark(&alignments).unwrap();
            let expected: BTreeSet<&str> = alignments.iter().flat_map(|a| a.fact.ids()).collect();
            let got: BTreeSet<&str> = brkg.entries().iter().map(|e| e.id.as_str()).collect();
            prop_assert_eq!(got, expected.clone());
            let expected_facts: Vec<&KgFact> = store.facts().filter(|f| f.ids().iter().all(|i| expected.contains(i))).collect();
            prop_assert_eq!(brkg.facts().collect::<Vec<_>>(), expected_facts);
        }
    }
}
