//! Deterministic synthetic corpora whose labels are recoverable from the
//! annotated spans alone, so human-rationale maps have a known ground
//! truth.
//!
//! `hazard`: product-recall texts; exactly one planted hazard keyword per
//! text decides the class, and the single span covers that keyword. Class
//! sizes follow a fixed 77/53/29/20/12/9 distribution (largest-remainder
//! scaled for other corpus sizes).
//!
//! `polarity`: 1-3 templated review sentences, each carrying 0-2 planted
//! sentiment words; the majority polarity of the planted words is the
//! label (strict majority by construction) and every planted word is a
//! span. Classes are balanced.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AnnotatedText, LabelSet};
use crate::error::{Error, Result};

/// Synthetic task family. Decides the label set, the generator, and the
/// default chat prompt wording.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Hazard,
    Polarity,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Hazard => "hazard",
            Task::Polarity => "polarity",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "hazard" => Ok(Task::Hazard),
            "polarity" => Ok(Task::Polarity),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected \"hazard\" or \"polarity\")"
            ))),
        }
    }

    pub fn label_set(&self) -> LabelSet {
        let labels = match self {
            Task::Hazard => HAZARD_CLASSES.iter().map(|c| c.label.to_string()).collect(),
            Task::Polarity => vec!["negative".to_string(), "positive".to_string()],
        };
        LabelSet::new(labels).expect("built-in label sets are valid")
    }
}

pub(crate) struct HazardClass {
    pub label: &'static str,
    pub weight: usize,
    pub terms: &'static [&'static str],
}

pub(crate) const HAZARD_CLASSES: [HazardClass; 6] = [
    HazardClass {
        label: "biological",
        weight: 77,
        terms: &["salmonella", "listeria", "norovirus", "botulism"],
    },
    HazardClass {
        label: "allergens",
        weight: 53,
        terms: &["peanut", "gluten", "sesame", "lupin"],
    },
    HazardClass {
        label: "chemical",
        weight: 29,
        terms: &["pesticide", "mercury", "dioxin", "benzene"],
    },
    HazardClass {
        label: "foreign bodies",
        weight: 20,
        terms: &["plastic", "glass", "metal", "rubber"],
    },
    HazardClass {
        label: "organoleptic aspects",
        weight: 12,
        terms: &["rancid", "odor", "discoloration", "slimy"],
    },
    HazardClass {
        label: "fraud",
        weight: 9,
        terms: &["counterfeit", "adulterated", "mislabeled", "smuggled"],
    },
];

const BRANDS: [&str; 8] = [
    "acme", "northdale", "bluepeak", "harvestco", "goldenvale", "sunrow",
    "marlowe", "redbarn",
];

const PRODUCTS: [&str; 10] = [
    "cheese", "sausage", "cookies", "juice", "flour", "yogurt", "crackers",
    "lentils", "spinach", "tuna",
];

/// Generates a synthetic corpus. Identical `(task, n, seed)` triples yield
/// identical corpora.
pub fn gen_synthetic(task: Task, n: usize, seed: u64) -> Vec<AnnotatedText> {
    match task {
        Task::Hazard => gen_hazard(n, seed),
        Task::Polarity => gen_polarity(n, seed),
    }
}

/// Largest-remainder apportionment of `n` over integer weights.
fn apportion(weights: &[usize], n: usize) -> Vec<usize> {
    let total: usize = weights.iter().sum();
    let mut counts: Vec<usize> = Vec::with_capacity(weights.len());
    let mut remainders: Vec<(usize, usize)> = Vec::with_capacity(weights.len());
    let mut assigned = 0;
    for (i, &w) in weights.iter().enumerate() {
        let exact = n * w;
        counts.push(exact / total);
        assigned += exact / total;
        remainders.push((exact % total, i));
    }
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

fn char_len(s: &str) -> usize {
    s.chars().count()
}

fn gen_hazard(n: usize, seed: u64) -> Vec<AnnotatedText> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<usize> = HAZARD_CLASSES.iter().map(|c| c.weight).collect();
    let counts = apportion(&weights, n);

    let mut class_of: Vec<usize> = Vec::with_capacity(n);
    for (ci, &count) in counts.iter().enumerate() {
        class_of.extend(std::iter::repeat_n(ci, count));
    }
    class_of.shuffle(&mut rng);

    let mut out = Vec::with_capacity(n);
    for (i, &ci) in class_of.iter().enumerate() {
        let class = &HAZARD_CLASSES[ci];
        let term = class.terms[rng.gen_range(0..class.terms.len())];
        let brand = BRANDS[rng.gen_range(0..BRANDS.len())];
        let product = PRODUCTS[rng.gen_range(0..PRODUCTS.len())];
        let template = rng.gen_range(0..4u32);
        let (text, span) = match template {
            0 => {
                let prefix = format!("{brand} recalled {product} due to ");
                let s = char_len(&prefix);
                (format!("{prefix}{term}"), (s, s + char_len(term)))
            }
            1 => {
                let prefix = format!("{brand} recalls {product} after ");
                let s = char_len(&prefix);
                (
                    format!("{prefix}{term} found in batches"),
                    (s, s + char_len(term)),
                )
            }
            2 => {
                let prefix = format!("{brand} issues recall of {product} because of ");
                let s = char_len(&prefix);
                (format!("{prefix}{term}"), (s, s + char_len(term)))
            }
            _ => {
                let prefix = "consumer report: ".to_string();
                let s = char_len(&prefix);
                (
                    format!("{prefix}{term} in {brand} {product}"),
                    (s, s + char_len(term)),
                )
            }
        };
        let mut meta = serde_json::Map::new();
        meta.insert("term".into(), serde_json::json!(term));
        out.push(AnnotatedText {
            id: format!("hz{i:04}"),
            text,
            label: class.label.to_string(),
            spans: vec![span],
            meta,
        });
    }
    out
}

pub(crate) const POSITIVE_WORDS: [&str; 6] = [
    "wonderful", "brilliant", "delightful", "superb", "charming", "gripping",
];

pub(crate) const NEGATIVE_WORDS: [&str; 6] = [
    "dreadful", "tedious", "clumsy", "awful", "boring", "shallow",
];

/// Sentence templates; `{}` slots take sentiment words (0-2 per sentence).
const SENTENCES: [&str; 8] = [
    "the plot was {}",
    "critics called the acting {}",
    "a thoroughly {} screenplay",
    "the pacing felt {} throughout",
    "the cast was {} and the script {}",
    "{} ideas undone by a {} finale",
    "the film premiered last spring",
    "it runs just over two hours",
];

fn slot_count(template: &str) -> usize {
    template.matches("{}").count()
}

/// Fills `{}` slots of a template, appending to `out` and recording the
/// character span of every filled word.
fn fill_template(
    template: &str,
    words: &mut impl Iterator<Item = &'static str>,
    out: &mut String,
    cursor: &mut usize,
    spans: &mut Vec<(usize, usize)>,
) {
    let mut rest = template;
    loop {
        match rest.find("{}") {
            Some(pos) => {
                let head = &rest[..pos];
                out.push_str(head);
                *cursor += char_len(head);
                let word = words.next().expect("enough words for slots");
                spans.push((*cursor, *cursor + char_len(word)));
                out.push_str(word);
                *cursor += char_len(word);
                rest = &rest[pos + 2..];
            }
            None => {
                out.push_str(rest);
                *cursor += char_len(rest);
                return;
            }
        }
    }
}

fn gen_polarity(n: usize, seed: u64) -> Vec<AnnotatedText> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    labels.shuffle(&mut rng);

    let mut out = Vec::with_capacity(n);
    for (i, &li) in labels.iter().enumerate() {
        // Pick sentences until at least one sentiment slot exists.
        let (templates, total_slots) = loop {
            let count = rng.gen_range(1..=3usize);
            let picks: Vec<&str> = (0..count)
                .map(|_| SENTENCES[rng.gen_range(0..SENTENCES.len())])
                .collect();
            let slots: usize = picks.iter().map(|t| slot_count(t)).sum();
            if slots >= 1 {
                break (picks, slots);
            }
        };

        // Strict majority for the winning polarity.
        let minority = if total_slots <= 1 {
            0
        } else {
            rng.gen_range(0..=(total_slots - 1) / 2)
        };
        let majority = total_slots - minority;
        let (win_words, lose_words): (&[&str], &[&str]) = if li == 1 {
            (&POSITIVE_WORDS, &NEGATIVE_WORDS)
        } else {
            (&NEGATIVE_WORDS, &POSITIVE_WORDS)
        };
        let mut polarity_of_slot: Vec<bool> = std::iter::repeat_n(true, majority)
            .chain(std::iter::repeat_n(false, minority))
            .collect();
        polarity_of_slot.shuffle(&mut rng);
        let picked: Vec<&'static str> = polarity_of_slot
            .iter()
            .map(|&winner| {
                let pool = if winner { win_words } else { lose_words };
                pool[rng.gen_range(0..pool.len())]
            })
            .collect();

        let mut text = String::new();
        let mut spans = Vec::new();
        let mut cursor = 0usize;
        let mut words = picked.iter().copied();
        for (si, template) in templates.iter().enumerate() {
            if si > 0 {
                text.push(' ');
                cursor += 1;
            }
            fill_template(template, &mut words, &mut text, &mut cursor, &mut spans);
            text.push('.');
            cursor += 1;
        }

        let mut meta = serde_json::Map::new();
        meta.insert("majority".into(), serde_json::json!(majority));
        meta.insert("minority".into(), serde_json::json!(minority));
        out.push(AnnotatedText {
            id: format!("pol{i:04}"),
            text,
            label: if li == 1 { "positive" } else { "negative" }.to_string(),
            spans,
            meta,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn char_slice(text: &str, s: usize, e: usize) -> String {
        text.chars().skip(s).take(e - s).collect()
    }

    /// Label lookup from text content alone; mirrors how an annotator
    /// would decide, independent of the generator's bookkeeping.
    fn hazard_oracle(text: &str) -> Option<&'static str> {
        let toks = super::super::split_tokens(text);
        let mut found = None;
        for class in &HAZARD_CLASSES {
            for (tok, _) in &toks {
                if class.terms.contains(&tok.as_str()) {
                    if found.is_some() {
                        return None;
                    }
                    found = Some(class.label);
                }
            }
        }
        found
    }

    #[test]
    fn hazard_distribution_is_pinned_at_200() {
        let corpus = gen_synthetic(Task::Hazard, 200, 11);
        let labels = Task::Hazard.label_set();
        let mut counts = vec![0usize; labels.len()];
        for t in &corpus {
            counts[labels.index_of(&t.label).unwrap()] += 1;
        }
        assert_eq!(counts, vec![77, 53, 29, 20, 12, 9]);
    }

    #[test]
    fn hazard_labels_recoverable_from_keyword() {
        let corpus = gen_synthetic(Task::Hazard, 200, 3);
        for t in &corpus {
            assert_eq!(hazard_oracle(&t.text), Some(t.label.as_str()), "{}", t.text);
        }
    }

    #[test]
    fn hazard_span_covers_exactly_the_keyword() {
        let corpus = gen_synthetic(Task::Hazard, 100, 5);
        for t in &corpus {
            assert_eq!(t.spans.len(), 1);
            let (s, e) = t.spans[0];
            let covered = char_slice(&t.text, s, e);
            let term = t.meta["term"].as_str().unwrap();
            assert_eq!(covered, term);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for task in [Task::Hazard, Task::Polarity] {
            let a = gen_synthetic(task, 50, 9);
            let b = gen_synthetic(task, 50, 9);
            let c = gen_synthetic(task, 50, 10);
            assert_eq!(a, b);
            assert_ne!(a, c);
        }
    }

    #[test]
    fn records_validate() {
        for task in [Task::Hazard, Task::Polarity] {
            let labels = task.label_set();
            for t in gen_synthetic(task, 120, 21) {
                t.validate(&labels).unwrap();
            }
        }
    }

    #[test]
    fn polarity_is_balanced_and_majority_decides() {
        let corpus = gen_synthetic(Task::Polarity, 200, 13);
        let mut pos = 0;
        for t in &corpus {
            if t.label == "positive" {
                pos += 1;
            }
            assert!(!t.spans.is_empty());
            let mut pos_words = 0i32;
            let mut neg_words = 0i32;
            for &(s, e) in &t.spans {
                let w = char_slice(&t.text, s, e);
                if POSITIVE_WORDS.contains(&w.as_str()) {
                    pos_words += 1;
                } else if NEGATIVE_WORDS.contains(&w.as_str()) {
                    neg_words += 1;
                } else {
                    panic!("span {w:?} is not a sentiment word in {:?}", t.text);
                }
            }
            let majority_label = if pos_words > neg_words {
                "positive"
            } else {
                "negative"
            };
            assert_ne!(pos_words, neg_words, "strict majority required");
            assert_eq!(majority_label, t.label);
        }
        assert_eq!(pos, 100);
    }

    #[test]
    fn apportion_scales_to_other_sizes() {
        let weights: Vec<usize> = HAZARD_CLASSES.iter().map(|c| c.weight).collect();
        for n in [6, 50, 137, 200, 1000] {
            let counts = apportion(&weights, n);
            assert_eq!(counts.iter().sum::<usize>(), n);
        }
        assert_eq!(apportion(&weights, 200), vec![77, 53, 29, 20, 12, 9]);
    }
}
