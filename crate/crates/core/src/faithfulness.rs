//! Perturbation-based faithfulness testing: mask tokens cumulatively in
//! order of saliency (both directions), re-classify after each step, and
//! record when the predicted label changes. A faithful explanation makes
//! the label flip early when masking from the most important token and
//! late when masking from the least important one.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::saliency::SaliencyMap;

/// The masking fractions every curve is evaluated at.
pub const FRACTIONS: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Direction {
    HighToLow,
    LowToHigh,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::HighToLow => "high_to_low",
            Direction::LowToHigh => "low_to_high",
        }
    }

    pub fn parse(s: &str) -> Result<Direction> {
        match s {
            "high_to_low" => Ok(Direction::HighToLow),
            "low_to_high" => Ok(Direction::LowToHigh),
            other => Err(Error::Config(format!("unknown direction {:?}", other))),
        }
    }
}

/// One evaluated masking fraction of a curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveStep {
    pub fraction: f64,
    pub label: String,
    pub flipped: bool,
}

/// The full perturbation record for one (text, method, direction) run.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationCurve {
    pub text_id: String,
    pub method: String,
    pub direction: Direction,
    pub steps: Vec<CurveStep>,
    pub mask_token: String,
    pub rng_seed: u64,
}

impl PerturbationCurve {
    pub fn terminal_label(&self) -> &str {
        &self.steps.last().expect("curve has steps").label
    }
}

/// Knobs for [`run_curve`]. `sticky` makes the flipped flag latch once
/// set; the default re-evaluates each step independently, so flips may
/// revert, matching how real curves move non-monotonically.
#[derive(Debug, Clone)]
pub struct CurveOptions {
    pub mask_token: String,
    pub seed: u64,
    pub sticky: bool,
}

impl Default for CurveOptions {
    fn default() -> Self {
        CurveOptions {
            mask_token: crate::corpus::UNK_TOKEN.to_string(),
            seed: 0,
            sticky: false,
        }
    }
}

/// Splits token indices into masking batches of size `ceil(0.2 n)`:
/// sorted by weight (descending for high-to-low, ascending otherwise),
/// with ties permuted uniformly by the rng. Only non-empty batches are
/// returned; short sequences exhaust all tokens in fewer than five.
pub fn mask_order(
    map: &SaliencyMap,
    direction: Direction,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let n = map.len();
    if n == 0 {
        return Vec::new();
    }
    let keys: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let by_weight = match direction {
            Direction::HighToLow => map.weights[b].partial_cmp(&map.weights[a]).unwrap(),
            Direction::LowToHigh => map.weights[a].partial_cmp(&map.weights[b]).unwrap(),
        };
        by_weight
            .then(keys[a].partial_cmp(&keys[b]).unwrap())
            .then(a.cmp(&b))
    });
    let batch = n.div_ceil(5);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Rebuilds the text with the given tokens' character ranges replaced by
/// the mask token (rightmost range first, so earlier offsets stay
/// valid).
pub fn masked_text(seq: &TokenSequence, masked: &[usize], mask_token: &str) -> String {
    let mut chars: Vec<char> = seq.text.chars().collect();
    let mut ranges: Vec<(usize, usize)> = masked.iter().map(|&i| seq.offsets[i]).collect();
    ranges.sort_unstable();
    ranges.dedup();
    for &(s, e) in ranges.iter().rev() {
        chars.splice(s..e, mask_token.chars());
    }
    chars.into_iter().collect()
}

/// Runs one cumulative masking curve. `classify` is called on the
/// original text and once per non-empty batch; when a short sequence is
/// fully masked before the final fraction, the remaining steps reuse the
/// last label without re-classifying. Any classification failure aborts
/// the curve, leaving it out of aggregation.
pub fn run_curve<F>(
    mut classify: F,
    text_id: &str,
    seq: &TokenSequence,
    map: &SaliencyMap,
    direction: Direction,
    options: &CurveOptions,
) -> Result<PerturbationCurve>
where
    F: FnMut(&str) -> Result<String>,
{
    if seq.is_empty() {
        return Err(Error::EmptyTokenSequence);
    }
    if seq.len() != map.len() {
        return Err(Error::MapLengthMismatch {
            a: seq.len(),
            b: map.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let batches = mask_order(map, direction, &mut rng);
    let origin = classify(&seq.text)?;
    let mut steps = vec![CurveStep {
        fraction: FRACTIONS[0],
        label: origin.clone(),
        flipped: false,
    }];
    let mut masked: Vec<usize> = Vec::with_capacity(seq.len());
    let mut last_label = origin.clone();
    let mut latched = false;
    for (i, &fraction) in FRACTIONS.iter().enumerate().skip(1) {
        let label = if let Some(batch) = batches.get(i - 1) {
            masked.extend_from_slice(batch);
            classify(&masked_text(seq, &masked, &options.mask_token))?
        } else {
            last_label.clone()
        };
        let changed = label != origin;
        latched |= changed;
        steps.push(CurveStep {
            fraction,
            label: label.clone(),
            flipped: if options.sticky { latched } else { changed },
        });
        last_label = label;
    }
    Ok(PerturbationCurve {
        text_id: text_id.to_string(),
        method: map.method.clone(),
        direction,
        steps,
        mask_token: options.mask_token.clone(),
        rng_seed: options.seed,
    })
}

/// Flip counts for one (method, direction, fraction) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FlipRow {
    pub method: String,
    pub direction: Direction,
    pub fraction: f64,
    pub flipped: usize,
    pub total: usize,
}

impl FlipRow {
    pub fn flip_fraction(&self) -> f64 {
        self.flipped as f64 / self.total as f64
    }
}

/// Aggregated curves: per-(method, direction, fraction) flip fractions
/// in deterministic order, plus the histogram of labels assigned to
/// fully occluded texts (each text counted once, however many curves it
/// appears in).
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub rows: Vec<FlipRow>,
    pub occluded: BTreeMap<String, usize>,
    pub curve_count: usize,
}

pub fn aggregate(curves: &[PerturbationCurve]) -> Result<Aggregate> {
    if curves.is_empty() {
        return Err(Error::Validation {
            id: String::new(),
            msg: "no curves to aggregate".into(),
        });
    }
    let mut cells: BTreeMap<(String, Direction), (Vec<usize>, usize)> = BTreeMap::new();
    let mut occluded: BTreeMap<String, usize> = BTreeMap::new();
    let mut seen_texts: BTreeSet<String> = BTreeSet::new();
    for curve in curves {
        if curve.steps.len() != FRACTIONS.len() {
            return Err(Error::Validation {
                id: curve.text_id.clone(),
                msg: format!(
                    "curve has {} steps, expected {}",
                    curve.steps.len(),
                    FRACTIONS.len()
                ),
            });
        }
        let entry = cells
            .entry((curve.method.clone(), curve.direction))
            .or_insert_with(|| (vec![0; FRACTIONS.len()], 0));
        entry.1 += 1;
        for (i, step) in curve.steps.iter().enumerate() {
            if step.flipped {
                entry.0[i] += 1;
            }
        }
        if seen_texts.insert(curve.text_id.clone()) {
            *occluded.entry(curve.terminal_label().to_string()).or_insert(0) += 1;
        }
    }
    let mut rows = Vec::new();
    for ((method, direction), (flips, total)) in cells {
        for (i, &fraction) in FRACTIONS.iter().enumerate() {
            rows.push(FlipRow {
                method: method.clone(),
                direction,
                fraction,
                flipped: flips[i],
                total,
            });
        }
    }
    Ok(Aggregate {
        rows,
        occluded,
        curve_count: curves.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LabelSet, Vocab};

    fn seq(text: &str) -> TokenSequence {
        let vocab = Vocab::build(&[], &LabelSet::new(vec!["x".into()]).unwrap());
        vocab.tokenize(text)
    }

    fn map_with(weights: Vec<f64>, n: usize) -> SaliencyMap {
        SaliencyMap::from_raw((0..n).map(|i| format!("t{}", i)).collect(), weights, "test")
            .unwrap()
    }

    fn map_from_raw(weights: Vec<f64>) -> SaliencyMap {
        let n = weights.len();
        map_with(weights, n)
    }

    #[test]
    fn distinct_weights_mask_in_strict_order() {
        let map = map_from_raw((0..10).map(|i| (10 - i) as f64).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = mask_order(&map, Direction::HighToLow, &mut rng);
        assert_eq!(
            batches,
            vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7], vec![8, 9]]
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let up = mask_order(&map, Direction::LowToHigh, &mut rng);
        assert_eq!(up[0], vec![9, 8]);
    }

    #[test]
    fn tied_weights_shuffle_deterministically() {
        let map = map_from_raw(vec![1.0; 12]);
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let mut c = ChaCha8Rng::seed_from_u64(6);
        let ba = mask_order(&map, Direction::HighToLow, &mut a);
        let bb = mask_order(&map, Direction::HighToLow, &mut b);
        let bc = mask_order(&map, Direction::HighToLow, &mut c);
        assert_eq!(ba, bb);
        assert_ne!(ba, bc);
        let mut all: Vec<usize> = ba.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn three_tokens_get_three_singleton_batches() {
        let map = map_from_raw(vec![3.0, 2.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = mask_order(&map, Direction::HighToLow, &mut rng);
        assert_eq!(batches, vec![vec![0], vec![1], vec![2]]);
    }

    #[test]
    fn masked_text_replaces_ranges_in_place() {
        let s = seq("alpha beta, gamma");
        assert_eq!(masked_text(&s, &[1], "<unk>"), "alpha <unk>, gamma");
        assert_eq!(masked_text(&s, &[0, 3], "###"), "### beta, ###");
        assert_eq!(masked_text(&s, &[], "###"), "alpha beta, gamma");
    }

    #[test]
    fn curves_mask_cumulatively_and_reuse_exhausted_steps() {
        let s = seq("one two three");
        let map = map_from_raw(vec![3.0, 2.0, 1.0]);
        let mut calls: Vec<String> = Vec::new();
        let curve = run_curve(
            |text: &str| {
                calls.push(text.to_string());
                Ok(if text.contains("three") { "keep" } else { "flip" }.to_string())
            },
            "t0",
            &s,
            &map,
            Direction::HighToLow,
            &CurveOptions::default(),
        )
        .unwrap();
        assert_eq!(
            calls,
            vec![
                "one two three",
                "<unk> two three",
                "<unk> <unk> three",
                "<unk> <unk> <unk>",
            ]
        );
        let fractions: Vec<f64> = curve.steps.iter().map(|st| st.fraction).collect();
        assert_eq!(fractions, FRACTIONS.to_vec());
        let flips: Vec<bool> = curve.steps.iter().map(|st| st.flipped).collect();
        assert_eq!(flips, vec![false, false, false, true, true, true]);
        assert_eq!(curve.terminal_label(), "flip");
    }

    #[test]
    fn both_directions_share_the_terminal_state() {
        let s = seq("a b c d e");
        let map = map_from_raw(vec![5.0, 4.0, 3.0, 2.0, 1.0]);
        let classify = |text: &str| Ok(format!("label-{}", text.matches("<unk>").count()));
        let opts = CurveOptions::default();
        let hi = run_curve(classify, "t", &s, &map, Direction::HighToLow, &opts).unwrap();
        let lo = run_curve(classify, "t", &s, &map, Direction::LowToHigh, &opts).unwrap();
        assert_eq!(hi.terminal_label(), lo.terminal_label());
        assert_eq!(hi.terminal_label(), "label-5");
    }

    #[test]
    fn sticky_mode_latches_flips() {
        let s = seq("a b c d e");
        let map = map_from_raw(vec![5.0, 4.0, 3.0, 2.0, 1.0]);
        // Flips at one masked token, reverts afterwards.
        let classify = |text: &str| {
            Ok(if text.matches("<unk>").count() == 1 { "other" } else { "base" }.to_string())
        };
        let loose = run_curve(
            classify,
            "t",
            &s,
            &map,
            Direction::HighToLow,
            &CurveOptions::default(),
        )
        .unwrap();
        let f: Vec<bool> = loose.steps.iter().map(|st| st.flipped).collect();
        assert_eq!(f, vec![false, true, false, false, false, false]);
        let sticky = run_curve(
            classify,
            "t",
            &s,
            &map,
            Direction::HighToLow,
            &CurveOptions {
                sticky: true,
                ..CurveOptions::default()
            },
        )
        .unwrap();
        let f: Vec<bool> = sticky.steps.iter().map(|st| st.flipped).collect();
        assert_eq!(f, vec![false, true, true, true, true, true]);
    }

    #[test]
    fn classification_failure_aborts_the_curve() {
        let s = seq("a b");
        let map = map_from_raw(vec![2.0, 1.0]);
        let mut n = 0;
        let out = run_curve(
            |_: &str| {
                n += 1;
                if n > 1 {
                    Err(Error::Protocol("endpoint gone".into()))
                } else {
                    Ok("x".into())
                }
            },
            "t",
            &s,
            &map,
            Direction::HighToLow,
            &CurveOptions::default(),
        );
        assert!(out.is_err());
    }

    #[test]
    fn same_seed_reproduces_the_curve_exactly() {
        let s = seq("a b c d");
        let map = map_from_raw(vec![1.0; 4]);
        let classify = |text: &str| Ok(format!("{}", text.matches("<unk>").count() % 2));
        let opts = CurveOptions {
            seed: 42,
            ..CurveOptions::default()
        };
        let one = run_curve(classify, "t", &s, &map, Direction::HighToLow, &opts).unwrap();
        let two = run_curve(classify, "t", &s, &map, Direction::HighToLow, &opts).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn map_and_sequence_lengths_must_agree() {
        let s = seq("a b c");
        let map = map_from_raw(vec![1.0, 2.0]);
        assert!(matches!(
            run_curve(
                |_| Ok("x".into()),
                "t",
                &s,
                &map,
                Direction::HighToLow,
                &CurveOptions::default()
            ),
            Err(Error::MapLengthMismatch { .. })
        ));
    }

    fn toy_curve(text_id: &str, method: &str, direction: Direction, flips: [bool; 6]) -> PerturbationCurve {
        PerturbationCurve {
            text_id: text_id.into(),
            method: method.into(),
            direction,
            steps: FRACTIONS
                .iter()
                .zip(flips)
                .map(|(&fraction, flipped)| CurveStep {
                    fraction,
                    label: if flipped { "b".into() } else { "a".into() },
                    flipped,
                })
                .collect(),
            mask_token: "<unk>".into(),
            rng_seed: 0,
        }
    }

    #[test]
    fn aggregate_counts_flips_per_cell_and_dedupes_occlusion() {
        let curves = vec![
            toy_curve("t1", "m", Direction::HighToLow, [false, true, true, true, true, true]),
            toy_curve("t2", "m", Direction::HighToLow, [false, true, true, true, true, true]),
            toy_curve("t1", "m", Direction::LowToHigh, [false, false, false, false, false, true]),
            toy_curve("t2", "m", Direction::LowToHigh, [false, false, false, false, false, true]),
        ];
        let agg = aggregate(&curves).unwrap();
        assert_eq!(agg.curve_count, 4);
        let hi: Vec<f64> = agg
            .rows
            .iter()
            .filter(|r| r.direction == Direction::HighToLow)
            .map(|r| r.flip_fraction())
            .collect();
        assert_eq!(hi, vec![0.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        // Two texts, each seen by two curves: histogram counts each once.
        assert_eq!(agg.occluded.len(), 1);
        assert_eq!(agg.occluded["b"], 2);
    }

    #[test]
    fn single_curve_fractions_are_zero_or_one() {
        let agg = aggregate(&[toy_curve(
            "t",
            "m",
            Direction::HighToLow,
            [false, true, false, true, true, true],
        )])
        .unwrap();
        for row in &agg.rows {
            assert!(row.flip_fraction() == 0.0 || row.flip_fraction() == 1.0);
        }
    }

    #[test]
    fn empty_aggregate_is_an_error() {
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn step_zero_is_never_flipped() {
        let s = seq("a b c");
        let map = map_from_raw(vec![1.0, 2.0, 3.0]);
        // Classifier that never repeats a label: even the unmasked text
        // gets a unique label, but step 0 defines the origin.
        let mut n = 0;
        let curve = run_curve(
            |_: &str| {
                n += 1;
                Ok(format!("l{}", n))
            },
            "t",
            &s,
            &map,
            Direction::HighToLow,
            &CurveOptions::default(),
        )
        .unwrap();
        assert!(!curve.steps[0].flipped);
        assert!(curve.steps[1..].iter().all(|st| st.flipped));
    }
}
