//! Seeded synthetic corpus with learnable lexical cues.
//!
//! Each event type owns its trigger verbs (one of them a two-token phrasal
//! verb) and a nominal trigger; each role owns a cue word that precedes its
//! argument. Subject roles depend on the event type. Sentences combine
//! clauses so that shared arguments (coordinated clauses), nested arguments
//! and trigger-inside-argument overlap (nominal triggers inside a subject
//! noun phrase) and long arguments all occur regularly.
//!
//! The vocabulary depends only on the ontology size, so corpora drawn with
//! different seeds share it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Example, Ontology};
use crate::graph::{EventMention, Sentence, Span};

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ru", "te", "sa", "no", "pi", "du", "ve", "zo", "gu", "ba", "he", "fi", "xo",
];

const EVENT_NAMES: [&str; 12] = [
    "Attack", "Die", "Transport", "Meet", "Injure", "Elect", "Arrest", "Marry", "Sentence",
    "Attend", "Demonstrate", "Transfer",
];

const ROLE_NAMES: [&str; 12] = [
    "Agent", "Attacker", "Victim", "Place", "Target", "Instrument", "Destination", "Origin",
    "Entity", "Person", "Artifact", "Buyer",
];

const N_NOUNS: usize = 48;
const N_ADJECTIVES: usize = 16;
const N_FILLERS: usize = 16;
const VERBS_PER_TYPE: usize = 3;

/// Unique pseudo-word for a vocabulary index.
fn pseudo_word(index: usize, suffix: &str) -> String {
    let mut k = index;
    let mut w = String::new();
    for _ in 0..3 {
        w.push_str(SYLLABLES[k % SYLLABLES.len()]);
        k /= SYLLABLES.len();
    }
    w.push_str(suffix);
    w
}

fn label(names: &[&str], i: usize) -> String {
    let base = names[i % names.len()];
    match i / names.len() {
        0 => base.to_string(),
        round => format!("{base}{}", round + 1),
    }
}

struct Lexicon {
    event_types: Vec<String>,
    roles: Vec<String>,
    verbs: Vec<Vec<String>>,
    phrasal: Vec<[String; 2]>,
    nominal: Vec<String>,
    cues: Vec<String>,
    nouns: Vec<String>,
    adjectives: Vec<String>,
    fillers: Vec<String>,
}

impl Lexicon {
    fn new(n_types: usize, n_roles: usize) -> Self {
        let mut next = 0usize;
        let mut take = |suffix: &str| {
            next += 1;
            pseudo_word(next * 7 + 3, suffix)
        };
        let verbs = (0..n_types)
            .map(|_| (0..VERBS_PER_TYPE).map(|_| take("ed")).collect())
            .collect();
        let phrasal = (0..n_types).map(|_| [take("ed"), take("up")]).collect();
        let nominal = (0..n_types).map(|_| take("ment")).collect();
        let cues = (0..n_roles).map(|_| take("")).collect();
        let nouns = (0..N_NOUNS).map(|_| take("s")).collect();
        let adjectives = (0..N_ADJECTIVES).map(|_| take("ish")).collect();
        let fillers = (0..N_FILLERS).map(|_| take("ly")).collect();
        Lexicon {
            event_types: (0..n_types).map(|i| label(&EVENT_NAMES, i)).collect(),
            roles: (0..n_roles).map(|i| label(&ROLE_NAMES, i)).collect(),
            verbs,
            phrasal,
            nominal,
            cues,
            nouns,
            adjectives,
            fillers,
        }
    }

    fn subject_role(&self, event: usize) -> usize {
        event % self.roles.len()
    }

    /// Object roles available to an event type, distinct from its subject
    /// role when the ontology allows it.
    fn object_roles(&self, event: usize) -> Vec<usize> {
        let r = self.roles.len();
        let subj = self.subject_role(event);
        let mut out: Vec<usize> = (1..=2).map(|k| (event + k) % r).filter(|&x| x != subj).collect();
        out.dedup();
        if out.is_empty() {
            out.push(subj);
        }
        out
    }
}

struct Builder<'a> {
    lex: &'a Lexicon,
    rng: ChaCha8Rng,
    tokens: Vec<String>,
    mentions: Vec<EventMention>,
}

impl<'a> Builder<'a> {
    fn push(&mut self, word: &str) -> usize {
        self.tokens.push(word.to_string());
        self.tokens.len() - 1
    }

    fn pick<'b>(&mut self, words: &'b [String]) -> &'b str {
        words.choose(&mut self.rng).expect("non-empty word list")
    }

    /// Noun phrase of 1 to 7 tokens.
    fn noun_phrase(&mut self) -> Span {
        let lex = self.lex;
        let start = self.tokens.len();
        let len_class = self.rng.gen_range(0..100);
        let (det, n_adj, of_tail) = match len_class {
            0..=34 => (false, 0, false),
            35..=64 => (true, 0, false),
            65..=84 => (true, 1, false),
            85..=92 => (true, self.rng.gen_range(1..=2), true),
            _ => (true, self.rng.gen_range(3..=4), true),
        };
        if det {
            let d = if self.rng.gen_bool(0.5) { "the" } else { "a" };
            self.push(d);
        }
        for _ in 0..n_adj {
            let w = self.pick(&lex.adjectives);
            self.push(w);
        }
        let w = self.pick(&lex.nouns);
        self.push(w);
        if of_tail {
            self.push("of");
            let w = self.pick(&lex.nouns);
            self.push(w);
        }
        Span {
            start,
            end: self.tokens.len(),
        }
    }

    fn trigger(&mut self, event: usize) -> Span {
        let lex = self.lex;
        let start = self.tokens.len();
        if self.rng.gen_bool(0.2) {
            let [a, b] = &lex.phrasal[event];
            self.push(a);
            self.push(b);
        } else {
            let w = self.pick(&lex.verbs[event]);
            self.push(w);
        }
        Span {
            start,
            end: self.tokens.len(),
        }
    }

    fn objects(&mut self, mention: &mut EventMention, event: usize) {
        let lex = self.lex;
        let roles = lex.object_roles(event);
        let n = self.rng.gen_range(0..=roles.len().min(2));
        for &role in roles.iter().take(n) {
            self.push(&lex.cues[role]);
            let span = self.noun_phrase();
            mention.arguments.push(crate::graph::Argument {
                role: lex.roles[role].clone(),
                span,
            });
        }
    }

    fn random_event(&mut self) -> usize {
        self.rng.gen_range(0..self.lex.event_types.len())
    }

    /// SUBJ VERB objects
    fn simple_clause(&mut self) {
        let lex = self.lex;
        let event = self.random_event();
        let subject = self.rng.gen_bool(0.85).then(|| self.noun_phrase());
        let trigger = self.trigger(event);
        let mut m = EventMention::new(trigger, lex.event_types[event].clone());
        if let Some(span) = subject {
            m = m.with_argument(lex.roles[lex.subject_role(event)].clone(), span);
        }
        self.objects(&mut m, event);
        self.mentions.push(m);
    }

    /// SUBJ VERB1 objects and VERB2 objects, the subject shared by both.
    fn coordinated_clause(&mut self) {
        let lex = self.lex;
        let first = self.random_event();
        let second = self.random_event();
        let subject = self.noun_phrase();
        let t1 = self.trigger(first);
        let mut m1 = EventMention::new(t1, lex.event_types[first].clone())
            .with_argument(lex.roles[lex.subject_role(first)].clone(), subject);
        self.objects(&mut m1, first);
        self.push("and");
        let t2 = self.trigger(second);
        let mut m2 = EventMention::new(t2, lex.event_types[second].clone())
            .with_argument(lex.roles[lex.subject_role(second)].clone(), subject);
        self.objects(&mut m2, second);
        self.mentions.push(m1);
        self.mentions.push(m2);
    }

    /// [the N1 NOMINAL N2] VERB objects: the nominal trigger and its
    /// argument N1 sit inside the subject of the verb.
    fn nested_clause(&mut self) {
        let lex = self.lex;
        let outer = self.random_event();
        let inner = self.random_event();
        let start = self.push("the");
        let inner_arg = {
            let w = self.pick(&lex.nouns);
            let i = self.push(w);
            Span { start: i, end: i + 1 }
        };
        let nominal = {
            let i = self.push(&lex.nominal[inner]);
            Span { start: i, end: i + 1 }
        };
        let w = self.pick(&lex.nouns);
        self.push(w);
        let subject = Span {
            start,
            end: self.tokens.len(),
        };
        let inner_m = EventMention::new(nominal, lex.event_types[inner].clone())
            .with_argument(lex.roles[lex.subject_role(inner)].clone(), inner_arg);
        let t = self.trigger(outer);
        let mut outer_m = EventMention::new(t, lex.event_types[outer].clone())
            .with_argument(lex.roles[lex.subject_role(outer)].clone(), subject);
        self.objects(&mut outer_m, outer);
        self.mentions.push(outer_m);
        self.mentions.push(inner_m);
    }

    fn no_event_clause(&mut self) {
        let lex = self.lex;
        self.noun_phrase();
        let w = self.pick(&lex.fillers);
        self.push(w);
        if self.rng.gen_bool(0.5) {
            self.push("of");
            self.noun_phrase();
        }
    }
}

/// Generates `n_sentences` sentences with 0 to 3 events each. The result is
/// a pure function of the arguments.
pub fn gen_synthetic(seed: u64, n_sentences: usize, ontology_size: (usize, usize)) -> Corpus {
    let (n_types, n_roles) = (ontology_size.0.max(1), ontology_size.1.max(1));
    let lex = Lexicon::new(n_types, n_roles);
    let mut b = Builder {
        lex: &lex,
        rng: ChaCha8Rng::seed_from_u64(seed),
        tokens: Vec::new(),
        mentions: Vec::new(),
    };
    let mut examples = Vec::with_capacity(n_sentences);
    for i in 0..n_sentences {
        b.tokens.clear();
        b.mentions.clear();
        if b.rng.gen_bool(0.3) {
            let w = b.pick(&lex.fillers);
            b.push(w);
        }
        let n_events = match b.rng.gen_range(0..100) {
            0..=14 => 0,
            15..=54 => 1,
            55..=84 => 2,
            _ => 3,
        };
        if n_events == 0 {
            b.no_event_clause();
        }
        let mut remaining = n_events;
        while remaining > 0 {
            if remaining < n_events {
                b.push(",");
                b.push("while");
            }
            let roll = b.rng.gen_range(0..100);
            if remaining >= 2 && roll < 40 {
                b.coordinated_clause();
                remaining -= 2;
            } else if remaining >= 2 && roll < 70 {
                b.nested_clause();
                remaining -= 2;
            } else {
                b.simple_clause();
                remaining -= 1;
            }
        }
        b.push(".");
        let sentence = Sentence {
            id: format!("syn-{seed}-{i:05}"),
            tokens: b.tokens.clone(),
        };
        examples.push(Example {
            sentence,
            mentions: b.mentions.clone(),
        });
    }
    let mut corpus = Corpus::new(examples);
    corpus.ontology.merge(&Ontology {
        event_types: lex.event_types.iter().cloned().collect(),
        roles: lex.roles.iter().cloned().collect(),
    });
    corpus
}
