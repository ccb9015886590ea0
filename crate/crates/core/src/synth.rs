//! Synthetic sentence/fact worlds for tests, benchmarks and demos.
//!
//! Entities carry a type and a home region that appear in their
//! descriptions and in the generated sentences. Some person entities share
//! a label (homonyms) and differ only in description, so they can be told
//! apart by sentence context or by the other fact slots (objects mostly
//! share the subject's region). A fraction of entities and predicates is
//! held out of training so every evaluation facet is populated.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{OieTriple, Partition, SentenceFactPair};
use crate::error::Result;
use crate::kg::{KgEntry, KgFact, KgStore};
use crate::rng;
use crate::text::Normalizer;

const SYLLABLES: [&str; 36] = [
    "ka", "ro", "mi", "tel", "dor", "vin", "sa", "lu", "ben", "zar", "qui", "fen", "ol", "ma", "rik", "ta",
    "nor", "sel", "pa", "vo", "gri", "den", "hal", "li", "mor", "cas", "te", "bru", "ni", "wen", "jo", "ky",
    "fa", "ste", "gu", "pe",
];

const REGIONS: [&str; 6] = ["Norland", "Sudmark", "Ostria", "Westval", "Karenth", "Lumia"];

const PERSON_ROLES: [&str; 6] = ["athlete", "painter", "chemist", "writer", "engineer", "singer"];

const INDUSTRIES: [&str; 4] = ["shipping", "software", "textile", "mining"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum EntityType {
    Person,
    Team,
    City,
    Company,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyWorldConfig {
    pub entities: usize,
    pub predicates: usize,
    /// Facts per predicate before deduplication.
    pub facts_per_predicate: usize,
    /// Person labels shared by two entities.
    pub homonym_pairs: usize,
    /// Probability that an object shares the subject's region.
    pub homophily: f64,
    pub alias_rate: f64,
    /// Fraction of entities never seen in training.
    pub heldout_entity_rate: f64,
    /// Predicates never seen in training.
    pub heldout_predicates: usize,
    /// Extra facts among held-out entities using held-out predicates.
    pub ookg_facts: usize,
    /// Fraction of remaining facts assigned to the test partition.
    pub test_rate: f64,
    /// OIE extractions per sentence.
    pub oies_per_sentence: usize,
    /// Extra entities present only in the large store variant.
    pub distractors: usize,
    pub seed: u64,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        Self {
            entities: 200,
            predicates: 20,
            facts_per_predicate: 60,
            homonym_pairs: 14,
            homophily: 0.85,
            alias_rate: 0.35,
            heldout_entity_rate: 0.12,
            heldout_predicates: 2,
            ookg_facts: 60,
            test_rate: 0.15,
            oies_per_sentence: 2,
            distractors: 200,
            seed: 0,
        }
    }
}

/// Generated inputs of the benchmark pipeline.
#[derive(Clone, Debug)]
pub struct ToyWorld {
    /// Reference KG including distractor entities.
    pub store: KgStore,
    pub pairs: Vec<SentenceFactPair>,
    pub oies: BTreeMap<String, Vec<OieTriple>>,
    pub heldout_entities: BTreeSet<String>,
    pub heldout_predicates: BTreeSet<String>,
    pub distractor_ids: BTreeSet<String>,
}

struct EntitySpec {
    id: String,
    ty: EntityType,
    region: usize,
    role: &'static str,
    label: String,
    aliases: Vec<String>,
}

impl EntitySpec {
    fn description(&self) -> String {
        let region = REGIONS[self.region];
        match self.ty {
            EntityType::Person => format!("{} from {region}", self.role),
            EntityType::Team => format!("sports club based in {region}"),
            EntityType::City => format!("city in {region}"),
            EntityType::Company => format!("{} company from {region}", self.role),
        }
    }

    /// Noun phrase used in sentences, echoing the description.
    fn sentence_phrase(&self) -> String {
        format!("{} , the {}", self.label, self.description())
    }

    fn entry(&self) -> KgEntry {
        KgEntry::entity(&self.id, &self.label)
            .with_description(&self.description())
            .with_aliases(&self.aliases)
    }
}

struct PredicateSpec {
    id: String,
    domain: EntityType,
    range: EntityType,
    label: String,
    description: String,
    phrases: Vec<String>,
}

struct NameGen<'a> {
    rng: &'a mut ChaCha8Rng,
    used: HashSet<String>,
}

impl NameGen<'_> {
    fn word(&mut self) -> String {
        loop {
            let n = self.rng.gen_range(2..=3);
            let w: String = (0..n).map(|_| *SYLLABLES.choose(self.rng).unwrap()).collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn capitalized(&mut self) -> String {
        capitalize(&self.word())
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn predicate_shapes(n: usize) -> Vec<(EntityType, EntityType)> {
    use EntityType::*;
    const SHAPES: [(EntityType, EntityType); 6] = [
        (Person, Team),
        (Person, City),
        (Person, Company),
        (Team, City),
        (Company, City),
        (Person, Person),
    ];
    (0..n).map(|i| SHAPES[i % SHAPES.len()]).collect()
}

/// Generates a world. Deterministic in `config.seed`.
pub fn toy_world(config: &ToyWorldConfig) -> Result<ToyWorld> {
    let mut rng = rng::stream(config.seed, "toy-world");
    let mut names = NameGen {
        rng: &mut rng,
        used: HashSet::new(),
    };

    // predicates
    let mut predicates = Vec::new();
    for (k, (domain, range)) in predicate_shapes(config.predicates).into_iter().enumerate() {
        let stem = names.word();
        let qualifier = names.word();
        predicates.push(PredicateSpec {
            id: format!("P{}", k + 1),
            domain,
            range,
            label: format!("{stem} {qualifier}"),
            description: format!("links a {} to a {} by {stem}", type_noun(domain), type_noun(range)),
            phrases: vec![format!("{stem}s"), format!("was {stem} with"), format!("{stem} of")],
        });
    }

    // entities
    let quotas = [
        (EntityType::Person, config.entities / 2),
        (EntityType::Team, config.entities / 5),
        (EntityType::City, config.entities * 3 / 20),
        (EntityType::Company, config.entities - config.entities / 2 - config.entities / 5 - config.entities * 3 / 20),
    ];
    let mut entities: Vec<EntitySpec> = Vec::new();
    for (ty, count) in quotas {
        for _ in 0..count {
            let spec = new_entity(&mut names, ty, format!("Q{}", entities.len() + 1), config.alias_rate);
            entities.push(spec);
        }
    }
    // homonyms: later persons copy the label of earlier persons, in a
    // different region with a different role
    let persons: Vec<usize> = (0..entities.len()).filter(|&i| entities[i].ty == EntityType::Person).collect();
    let pairs = config.homonym_pairs.min(persons.len() / 2);
    for p in 0..pairs {
        let (src, dst) = (persons[p], persons[persons.len() - 1 - p]);
        let label = entities[src].label.clone();
        let src_region = entities[src].region;
        let src_role = entities[src].role;
        let dst_spec = &mut entities[dst];
        dst_spec.label = label;
        dst_spec.aliases.clear();
        dst_spec.region = (src_region + 1 + p % (REGIONS.len() - 1)) % REGIONS.len();
        if dst_spec.role == src_role {
            let i = PERSON_ROLES.iter().position(|r| *r == src_role).unwrap();
            dst_spec.role = PERSON_ROLES[(i + 1) % PERSON_ROLES.len()];
        }
    }
    drop_colliding_aliases(&mut entities);

    let mut ids: Vec<usize> = (0..entities.len()).collect();
    ids.shuffle(&mut rng);
    let n_heldout = (entities.len() as f64 * config.heldout_entity_rate).round() as usize;
    let heldout: BTreeSet<usize> = ids[..n_heldout].iter().copied().collect();
    let heldout_predicates: BTreeSet<usize> =
        (config.predicates.saturating_sub(config.heldout_predicates)..config.predicates).collect();

    // facts
    let by_type = |ty: EntityType, pool: &dyn Fn(usize) -> bool| -> Vec<usize> {
        (0..entities.len()).filter(|&i| entities[i].ty == ty && pool(i)).collect()
    };
    let mut facts: BTreeSet<(usize, usize, usize)> = BTreeSet::new();
    let draw = |rng: &mut ChaCha8Rng, p: usize, subjects: &[usize], objects: &[usize], facts: &mut BTreeSet<_>| {
        if subjects.is_empty() || objects.is_empty() {
            return;
        }
        let s = *subjects.choose(rng).unwrap();
        let same_region: Vec<usize> = objects
            .iter()
            .copied()
            .filter(|&o| o != s && entities[o].region == entities[s].region)
            .collect();
        let o = if !same_region.is_empty() && rng.gen_bool(config.homophily) {
            *same_region.choose(rng).unwrap()
        } else {
            *objects.choose(rng).unwrap()
        };
        if o != s {
            facts.insert((s, p, o));
        }
    };
    for (p, pred) in predicates.iter().enumerate() {
        let any = |_: usize| true;
        let subjects = by_type(pred.domain, &any);
        let objects = by_type(pred.range, &any);
        for _ in 0..config.facts_per_predicate {
            draw(&mut rng, p, &subjects, &objects, &mut facts);
        }
    }
    let in_heldout = |i: usize| heldout.contains(&i);
    let heldout_list: Vec<usize> = heldout_predicates.iter().copied().collect();
    if !heldout_list.is_empty() {
        for _ in 0..config.ookg_facts {
            let p = *heldout_list.choose(&mut rng).unwrap();
            let subjects = by_type(predicates[p].domain, &in_heldout);
            let objects = by_type(predicates[p].range, &in_heldout);
            draw(&mut rng, p, &subjects, &objects, &mut facts);
        }
    }

    // sentences, OIEs, partitions
    let mut pairs_out = Vec::new();
    let mut oies: BTreeMap<String, Vec<OieTriple>> = BTreeMap::new();
    for (n, &(s, p, o)) in facts.iter().enumerate() {
        let sentence_id = format!("S{:05}", n + 1);
        let (subj, pred, obj) = (&entities[s], &predicates[p], &entities[o]);
        let forced_test = heldout.contains(&s) || heldout.contains(&o) || heldout_predicates.contains(&p);
        let partition = if forced_test || rng.gen_bool(config.test_rate) {
            Partition::Test
        } else {
            Partition::Train
        };
        let mut phrases = pred.phrases.clone();
        phrases.shuffle(&mut rng);
        let sentence = format!("{} {} {} .", subj.sentence_phrase(), phrases[0], obj.sentence_phrase());
        let extractors = ["minie", "stanford", "milie", "multi2oie"];
        let triples = phrases
            .iter()
            .take(config.oies_per_sentence.max(1))
            .enumerate()
            .map(|(i, phrase)| {
                OieTriple::new(&subj.label, phrase, &obj.label).map(|t| t.with_extractor(extractors[i % extractors.len()]))
            })
            .collect::<Result<Vec<_>>>()?;
        oies.insert(sentence_id.clone(), triples);
        pairs_out.push(SentenceFactPair {
            sentence_id,
            sentence,
            fact: KgFact::new(&subj.id, &pred.id, &obj.id),
            subject_mention: None,
            object_mention: None,
            partition,
        });
    }

    // distractors: only in the large store; a third reuse existing labels
    let mut distractor_ids = BTreeSet::new();
    let mut distractors = Vec::new();
    for i in 0..config.distractors {
        let ty = [EntityType::Person, EntityType::Team, EntityType::City, EntityType::Company][i % 4];
        let mut spec = new_entity(&mut NameGen { rng: &mut rng, used: HashSet::new() }, ty, format!("D{}", i + 1), 0.0);
        if i % 3 == 0 {
            let same_type: Vec<&EntitySpec> = entities.iter().filter(|e| e.ty == ty).collect();
            let original = same_type.choose(&mut rng).unwrap();
            spec.label = original.label.clone();
            spec.region = (original.region + 1 + i % 5) % REGIONS.len();
        }
        distractor_ids.insert(spec.id.clone());
        distractors.push(spec);
    }
    drop_colliding_aliases(&mut distractors);

    let mut entries: Vec<KgEntry> = entities.iter().map(EntitySpec::entry).collect();
    entries.extend(distractors.iter().map(EntitySpec::entry));
    entries.extend(
        predicates
            .iter()
            .map(|p| KgEntry::predicate(&p.id, &p.label).with_description(&p.description)),
    );
    let kg_facts: Vec<KgFact> = facts
        .iter()
        .map(|&(s, p, o)| KgFact::new(&entities[s].id, &predicates[p].id, &entities[o].id))
        .collect();
    let store = KgStore::new(entries, kg_facts, Normalizer::default())?;

    Ok(ToyWorld {
        store,
        pairs: pairs_out,
        oies,
        heldout_entities: heldout.iter().map(|&i| entities[i].id.clone()).collect(),
        heldout_predicates: heldout_predicates.iter().map(|&p| predicates[p].id.clone()).collect(),
        distractor_ids,
    })
}

fn type_noun(ty: EntityType) -> &'static str {
    match ty {
        EntityType::Person => "person",
        EntityType::Team => "team",
        EntityType::City => "city",
        EntityType::Company => "company",
    }
}

fn new_entity(names: &mut NameGen, ty: EntityType, id: String, alias_rate: f64) -> EntitySpec {
    let region = names.rng.gen_range(0..REGIONS.len());
    let (label, role, aliases) = match ty {
        EntityType::Person => {
            let first = names.capitalized();
            let last = names.capitalized();
            let role = *PERSON_ROLES.choose(names.rng).unwrap();
            let mut aliases = Vec::new();
            if names.rng.gen_bool(alias_rate) {
                aliases.push(format!("{}. {last}", &first[..1]));
                if names.rng.gen_bool(0.5) {
                    aliases.push(format!("{first} {}.", &last[..1]));
                }
            }
            (format!("{first} {last}"), role, aliases)
        }
        EntityType::Team => {
            let base = names.capitalized();
            let suffix = *["Rovers", "United", "Wolves", "Athletic"].choose(names.rng).unwrap();
            let aliases = if names.rng.gen_bool(alias_rate) {
                vec![format!("The {suffix}")]
            } else {
                Vec::new()
            };
            (format!("{base} {suffix}"), "club", aliases)
        }
        EntityType::City => (names.capitalized(), "city", Vec::new()),
        EntityType::Company => {
            let base = names.capitalized();
            let industry = *INDUSTRIES.choose(names.rng).unwrap();
            let aliases = if names.rng.gen_bool(alias_rate) {
                vec![format!("{base} Co.")]
            } else {
                Vec::new()
            };
            (format!("{base} Industries"), industry, aliases)
        }
    };
    EntitySpec {
        id,
        ty,
        region,
        role,
        label,
        aliases,
    }
}

/// Removes aliases that equal some entity's label, so alias-driven
/// polysemy only comes from shared aliases between entities.
fn drop_colliding_aliases(entities: &mut [EntitySpec]) {
    let labels: HashSet<String> = entities.iter().map(|e| e.label.clone()).collect();
    for e in entities.iter_mut() {
        e.aliases.retain(|a| !labels.contains(a));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn world_is_deterministic_and_valid() {
        let config = ToyWorldConfig::default();
        let a = toy_world(&config).unwrap();
        let b = toy_world(&config).unwrap();
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.oies, b.oies);
        assert_eq!(a.store.entries(), b.store.entries());
        assert_eq!(a.store.predicates().count(), 20);
        assert_eq!(a.store.entities().count(), 200 + config.distractors);
        assert!(a.pairs.iter().any(|p| p.partition == Partition::Test));
        assert!(a.pairs.iter().any(|p| p.partition == Partition::Train));
        // homonyms exist
        let polysemous = a
            .store
            .entities()
            .filter(|e| !a.distractor_ids.contains(&e.id))
            .filter(|e| a.store.lookup_surface(&e.label).len() > 1)
            .count();
        assert!(polysemous >= 2 * config.homonym_pairs);
    }
}
