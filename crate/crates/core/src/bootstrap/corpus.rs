//! Synthetic fact corpus.
//!
//! Each fact ties a two-word subject to an object through one relation.
//! Sentences read `[filler] <relation phrase> <subject> <object> .`, so the
//! object is predicted right after the last subject token. The training
//! corpus states every fact with every filler opening and both phrasings of
//! its relation. The second phrasing and filler-prefixed prompts serve as
//! rephrase probes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, BOS};
use crate::eval::{CaseRecord, ProbeRecord};
use crate::{Error, Result, TokenId};

pub const END: &str = ".";

pub const FILLERS: [&str; 10] = [
    "",
    "it is known that",
    "i heard that",
    "everyone says",
    "in fact",
    "as we know",
    "reportedly",
    "they told me",
    "yesterday",
    "some say",
];

const FIRST_NAMES: [&str; 12] =
    ["alice", "bruno", "chen", "dara", "emil", "farah", "goran", "hana", "ivan", "julia", "kofi", "lena"];

const LAST_NAMES: [&str; 40] = [
    "abbott",
    "baxter",
    "carver",
    "dalton",
    "ellis",
    "fowler",
    "garner",
    "hughes",
    "ingram",
    "jensen",
    "keller",
    "lawson",
    "mercer",
    "norris",
    "osborne",
    "porter",
    "quinn",
    "ramsey",
    "sutton",
    "tanner",
    "underwood",
    "vaughn",
    "walsh",
    "yates",
    "zamora",
    "archer",
    "bishop",
    "crane",
    "doyle",
    "easton",
    "fletcher",
    "gibbs",
    "harper",
    "irwin",
    "jordan",
    "knox",
    "lowell",
    "marsh",
    "nash",
    "oakley",
];

pub struct Relation {
    pub phrasings: [&'static str; 2],
    pub objects: [&'static str; 10],
}

pub const RELATIONS: [Relation; 4] = [
    Relation {
        phrasings: ["the city of", "the hometown of"],
        objects: ["paris", "london", "tokyo", "rome", "berlin", "madrid", "cairo", "lima", "oslo", "delhi"],
    },
    Relation {
        phrasings: ["the job of", "the profession of"],
        objects: ["doctor", "lawyer", "teacher", "farmer", "pilot", "baker", "dancer", "nurse", "chef", "writer"],
    },
    Relation {
        phrasings: ["the instrument of", "the favorite instrument of"],
        objects: ["piano", "violin", "guitar", "drums", "flute", "cello", "harp", "trumpet", "organ", "banjo"],
    },
    Relation {
        phrasings: ["the language of", "the native language of"],
        objects: ["french", "english", "spanish", "german", "arabic", "hindi", "russian", "greek", "polish", "korean"],
    },
];

/// The fixed vocabulary of the synthetic world.
pub fn world_vocab() -> Vocab {
    let mut words: Vec<String> = vec![BOS.into(), END.into()];
    let mut push = |text: &str| {
        for w in text.split_whitespace() {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        }
    };
    FILLERS.iter().for_each(|f| push(f));
    FIRST_NAMES.iter().chain(&LAST_NAMES).for_each(|n| push(n));
    for r in &RELATIONS {
        r.phrasings.iter().for_each(|p| push(p));
        r.objects.iter().for_each(|o| push(o));
    }
    Vocab::new(words).expect("world words are unique and non-empty")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticFact {
    pub subject: String,
    pub relation: usize,
    pub object: String,
    pub counterfactual: String,
}

impl SyntheticFact {
    /// Prompts end with the subject; the object is the next word.
    pub fn prompt(&self) -> String {
        format!("{} {}", RELATIONS[self.relation].phrasings[0], self.subject)
    }

    pub fn rephrase(&self) -> String {
        format!("{} {}", RELATIONS[self.relation].phrasings[1], self.subject)
    }

    /// The subject under a relation it has no fact for.
    pub fn other_relation_prompt(&self) -> String {
        format!("{} {}", RELATIONS[(self.relation + 1) % RELATIONS.len()].phrasings[0], self.subject)
    }

    /// Every training sentence stating this fact.
    pub fn sentences(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(FILLERS.len() * 2);
        for filler in FILLERS {
            for phrase in RELATIONS[self.relation].phrasings {
                let body = format!("{phrase} {} {} {END}", self.subject, self.object);
                out.push(format!("{BOS} {filler} {body}").split_whitespace().collect::<Vec<_>>().join(" "));
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub vocab: Vocab,
    pub facts: Vec<SyntheticFact>,
    /// Tokenized training sentences, each starting with `<bos>`.
    pub sequences: Vec<Vec<TokenId>>,
}

pub fn generate_corpus(n_facts: usize, seed: u64) -> Result<ToyCorpus> {
    if n_facts == 0 || n_facts > LAST_NAMES.len() {
        return Err(Error::Config(format!("n_facts must lie in 1..={}", LAST_NAMES.len())));
    }
    let vocab = world_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last: Vec<&str> = LAST_NAMES.to_vec();
    last.shuffle(&mut rng);
    let facts: Vec<SyntheticFact> = (0..n_facts)
        .map(|i| {
            let relation = i % RELATIONS.len();
            let objects = &RELATIONS[relation].objects;
            let o = rng.random_range(0..objects.len());
            let c = (o + rng.random_range(1..objects.len())) % objects.len();
            SyntheticFact {
                subject: format!("{} {}", FIRST_NAMES[rng.random_range(0..FIRST_NAMES.len())], last[i]),
                relation,
                object: objects[o].into(),
                counterfactual: objects[c].into(),
            }
        })
        .collect();
    let sequences = facts.iter().flat_map(|f| f.sentences()).map(|s| vocab.encode(&s)).collect::<Result<_>>()?;
    Ok(ToyCorpus { vocab, facts, sequences })
}

impl ToyCorpus {
    /// Filler openings as token sequences, used as editing prefixes.
    pub fn filler_prefixes(&self) -> Vec<Vec<TokenId>> {
        FILLERS.iter().map(|f| self.vocab.encode(f).expect("fillers are in the vocabulary")).collect()
    }

    /// Every distinct sentence opening up to the subject: a filler followed
    /// by a relation phrase.
    pub fn context_prefixes(&self) -> Vec<Vec<TokenId>> {
        let mut out: Vec<Vec<TokenId>> = Vec::new();
        for filler in FILLERS {
            for r in &RELATIONS {
                for phrase in r.phrasings {
                    let p = self.vocab.encode(&format!("{filler} {phrase}")).expect("openings are in the vocabulary");
                    if !out.contains(&p) {
                        out.push(p);
                    }
                }
            }
        }
        out
    }

    /// Counterfactual edit cases for the first `n` facts. Locality probes are
    /// the prompts of up to `n_probes` other facts.
    pub fn counterfactual_cases(&self, n: usize, n_probes: usize, layer: usize) -> Vec<CaseRecord> {
        let total = self.facts.len();
        (0..n.min(total))
            .map(|i| {
                let f = &self.facts[i];
                CaseRecord {
                    subject: f.subject.clone(),
                    prompt: f.prompt(),
                    target: f.counterfactual.clone(),
                    preservation_prompt: f.other_relation_prompt(),
                    rephrases: vec![f.rephrase(), format!("{} {}", FILLERS[2], f.prompt())],
                    locality_probes: (1..total)
                        .take(n_probes)
                        .map(|k| {
                            let o = &self.facts[(i + k) % total];
                            ProbeRecord { prompt: o.prompt(), expected: o.object.clone() }
                        })
                        .collect(),
                    layer: Some(layer),
                }
            })
            .collect()
    }
}
