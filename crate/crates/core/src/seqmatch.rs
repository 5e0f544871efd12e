//! Sequence alignment primitives: longest-common-subsequence tables and
//! pair extraction, plus the Ratcliff/Obershelp matched-element count
//! (the quantity behind `difflib.SequenceMatcher` ratios, which is not
//! the same thing as the LCS length).

use std::collections::HashMap;
use std::hash::Hash;

/// DP table where `table[i][j]` is the LCS length of `a[..i]` and
/// `b[..j]`.
pub fn lcs_table<T: PartialEq>(a: &[T], b: &[T]) -> Vec<Vec<usize>> {
    let (n, m) = (a.len(), b.len());
    let mut table = vec![vec![0usize; m + 1]; n + 1];
    for i in 1..=n {
        for j in 1..=m {
            table[i][j] = if a[i - 1] == b[j - 1] {
                table[i - 1][j - 1] + 1
            } else {
                table[i - 1][j].max(table[i][j - 1])
            };
        }
    }
    table
}

pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    lcs_table(a, b)[a.len()][b.len()]
}

/// One longest common subsequence as index pairs `(i, j)` with
/// `a[i] == b[j]`, strictly increasing in both coordinates. Backtracking
/// is deterministic: equal elements pair greedily from the end, and ties
/// between dropping an `a` element or a `b` element prefer dropping from
/// `a`.
pub fn lcs_pairs<T: PartialEq>(a: &[T], b: &[T]) -> Vec<(usize, usize)> {
    let table = lcs_table(a, b);
    let mut pairs = Vec::with_capacity(table[a.len()][b.len()]);
    let (mut i, mut j) = (a.len(), b.len());
    while i > 0 && j > 0 {
        if a[i - 1] == b[j - 1] {
            pairs.push((i - 1, j - 1));
            i -= 1;
            j -= 1;
        } else if table[i - 1][j] >= table[i][j - 1] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    pairs.reverse();
    pairs
}

/// Total elements matched by Ratcliff/Obershelp recursive longest-block
/// alignment. Equivalent to summing the block sizes reported by Python's
/// `difflib.SequenceMatcher` with junk detection disabled: the longest
/// common contiguous block (earliest in `a`, then earliest in `b`, on
/// ties) is matched, then the regions to its left and right are aligned
/// recursively. Always at most [`lcs_length`].
pub fn ro_matched<T: Eq + Hash>(a: &[T], b: &[T]) -> usize {
    let mut b2j: HashMap<&T, Vec<usize>> = HashMap::new();
    for (j, x) in b.iter().enumerate() {
        b2j.entry(x).or_default().push(j);
    }
    let mut matched = 0;
    let mut queue = vec![(0usize, a.len(), 0usize, b.len())];
    while let Some((alo, ahi, blo, bhi)) = queue.pop() {
        let (i, j, k) = longest_block(a, &b2j, alo, ahi, blo, bhi);
        if k > 0 {
            matched += k;
            if alo < i && blo < j {
                queue.push((alo, i, blo, j));
            }
            if i + k < ahi && j + k < bhi {
                queue.push((i + k, ahi, j + k, bhi));
            }
        }
    }
    matched
}

/// Longest contiguous block common to `a[alo..ahi]` and `b[blo..bhi]`,
/// as `(i, j, size)`. Ties resolve to the smallest `i`, then smallest
/// `j`.
#[allow(clippy::needless_range_loop)]
fn longest_block<T: Eq + Hash>(
    a: &[T],
    b2j: &HashMap<&T, Vec<usize>>,
    alo: usize,
    ahi: usize,
    blo: usize,
    bhi: usize,
) -> (usize, usize, usize) {
    let (mut besti, mut bestj, mut bestsize) = (alo, blo, 0usize);
    let mut j2len: HashMap<usize, usize> = HashMap::new();
    for i in alo..ahi {
        let mut newj2len: HashMap<usize, usize> = HashMap::new();
        if let Some(js) = b2j.get(&a[i]) {
            for &j in js {
                if j < blo {
                    continue;
                }
                if j >= bhi {
                    break;
                }
                let k = if j > 0 { j2len.get(&(j - 1)).copied().unwrap_or(0) + 1 } else { 1 };
                newj2len.insert(j, k);
                if k > bestsize {
                    besti = i + 1 - k;
                    bestj = j + 1 - k;
                    bestsize = k;
                }
            }
        }
        j2len = newj2len;
    }
    (besti, bestj, bestsize)
}
