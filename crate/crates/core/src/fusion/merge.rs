use std::collections::{BTreeMap, HashSet};

use super::{rank_top_k, ScoredList};

/// Borda count over ranked lists: an item at rank `r` earns `k_i - r + 1`
/// points from that list and nothing from lists it is absent from.
pub fn borda_merge(lists: &[ScoredList], k_i: usize) -> ScoredList {
    let mut points: BTreeMap<String, f64> = BTreeMap::new();
    for list in lists {
        for (pos, id) in list.ids().enumerate() {
            let earned = k_i.saturating_sub(pos) as f64;
            *points.entry(id.to_string()).or_default() += earned;
        }
    }
    rank_top_k(&points, k_i.max(1)).expect("cutoff is at least 1")
}

/// Cyclic merge: lists take turns in the given order; a list whose next id
/// was already emitted keeps drawing until it yields a new id or runs out.
pub fn round_robin_merge<S: AsRef<str>>(lists: &[Vec<S>], k_i: usize) -> Vec<String> {
    round_robin_sourced(lists, k_i)
        .into_iter()
        .map(|(id, _)| id.to_string())
        .collect()
}

/// Merged ids paired with the index of the list that contributed each.
fn round_robin_sourced<S: AsRef<str>>(lists: &[Vec<S>], k_i: usize) -> Vec<(&str, usize)> {
    let mut cursors = vec![0usize; lists.len()];
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    while out.len() < k_i {
        let mut progressed = false;
        for (j, (list, cursor)) in lists.iter().zip(cursors.iter_mut()).enumerate() {
            if out.len() == k_i {
                break;
            }
            while let Some(id) = list.get(*cursor) {
                *cursor += 1;
                if seen.insert(id.as_ref()) {
                    out.push((id.as_ref(), j));
                    progressed = true;
                    break;
                }
            }
        }
        if !progressed {
            break;
        }
    }
    out
}
