use super::{
    check_listwise_request, check_review_request, ExtractedAspects, ItemReviews, LlmClient,
    LlmError, ReviewStyle, Span,
};

/// Offline client with fixed, reproducible behavior.
///
/// Extraction splits the query once, at the first clause marker after its
/// third word, or near the middle when there is none. Reviews follow a fixed
/// template. Listwise reranking returns the input order.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockLlm;

const MARKERS: [&str; 4] = [" that ", " which ", " and ", ", "];

const FILLER: &[&str] = &[
    "a",
    "an",
    "the",
    "i",
    "me",
    "my",
    "can",
    "could",
    "would",
    "have",
    "want",
    "need",
    "like",
    "give",
    "find",
    "get",
    "is",
    "are",
    "for",
    "with",
    "of",
    "to",
    "some",
    "something",
    "please",
    "recipe",
    "recipes",
    "dish",
    "meal",
    "that",
    "which",
    "and",
];

/// Leading and trailing characters never kept in a span.
fn is_edge_noise(c: char) -> bool {
    c.is_whitespace() || matches!(c, '?' | '!' | '.' | ',' | ';' | ':' | '"' | '(' | ')')
}

/// Narrows `[start, end)` by dropping edge noise and, if `drop_filler`,
/// filler words at either end. Returns `None` when nothing would remain.
fn trim(
    chars: &[char],
    mut start: usize,
    mut end: usize,
    drop_filler: bool,
) -> Option<(usize, usize)> {
    loop {
        while start < end && is_edge_noise(chars[start]) {
            start += 1;
        }
        while end > start && is_edge_noise(chars[end - 1]) {
            end -= 1;
        }
        if start == end {
            return None;
        }
        if !drop_filler {
            return Some((start, end));
        }
        let first_end = (start..end)
            .find(|&i| chars[i].is_whitespace())
            .unwrap_or(end);
        let last_start = (start..end)
            .rev()
            .find(|&i| chars[i].is_whitespace())
            .map_or(start, |i| i + 1);
        let word = |a: usize, b: usize| chars[a..b].iter().collect::<String>().to_lowercase();
        if FILLER.contains(&word(start, first_end).as_str()) {
            start = first_end;
        } else if FILLER.contains(&word(last_start, end).as_str()) {
            end = last_start;
        } else {
            return Some((start, end));
        }
    }
}

fn side(chars: &[char], start: usize, end: usize) -> Option<(usize, usize)> {
    trim(chars, start, end, true).or_else(|| trim(chars, start, end, false))
}

fn to_span(chars: &[char], (start, end): (usize, usize)) -> Span {
    Span {
        start,
        end,
        text: chars[start..end].iter().collect(),
    }
}

fn marker_split(chars: &[char], text: &str) -> Option<[(usize, usize); 2]> {
    // Char index just past the third word.
    let mut words = 0;
    let mut in_word = false;
    let mut guard = chars.len();
    for (i, c) in chars.iter().enumerate() {
        if c.is_whitespace() {
            if in_word {
                words += 1;
                if words == 3 {
                    guard = i;
                    break;
                }
            }
            in_word = false;
        } else {
            in_word = true;
        }
    }
    let byte_to_char = |b: usize| text[..b].chars().count();
    let (at, len) = MARKERS
        .iter()
        .filter_map(|m| {
            text.match_indices(m)
                .map(|(b, _)| byte_to_char(b))
                .find(|&c| c >= guard)
                .map(|c| (c, m.chars().count()))
        })
        .min()?;
    let left = side(chars, 0, at)?;
    let right = side(chars, at + len, chars.len())?;
    Some([left, right])
}

fn midpoint_split(chars: &[char]) -> Option<[(usize, usize); 2]> {
    let (start, end) = trim(chars, 0, chars.len(), false)?;
    let mid = (start + end) / 2;
    let boundary = (start + 1..end)
        .filter(|&i| chars[i].is_whitespace())
        .min_by_key(|&i| (i.abs_diff(mid), i));
    let cut = match boundary {
        Some(b) => b,
        None if end - start >= 2 => (start + end).div_ceil(2),
        None => return None,
    };
    let left = trim(chars, start, cut, false)?;
    let right = trim(chars, cut, end, false)?;
    Some([left, right])
}

impl LlmClient for MockLlm {
    fn extract_aspects(
        &self,
        query_id: &str,
        query_text: &str,
    ) -> Result<ExtractedAspects, LlmError> {
        if query_text.trim().is_empty() {
            return Err(LlmError::EmptyQuery);
        }
        let chars: Vec<char> = query_text.chars().collect();
        let [left, right] = marker_split(&chars, query_text)
            .or_else(|| midpoint_split(&chars))
            .ok_or_else(|| {
                LlmError::InvalidRequest(format!("query `{query_text}` is too short to split"))
            })?;
        Ok(ExtractedAspects {
            query_id: query_id.to_string(),
            spans: vec![to_span(&chars, left), to_span(&chars, right)],
        })
    }

    fn generate_review_text(
        &self,
        item_id: &str,
        aspect_texts: &[&str],
        style: ReviewStyle,
        nonce: u64,
    ) -> Result<String, LlmError> {
        check_review_request(aspect_texts, style)?;
        Ok(format!(
            "Review of {item_id}: this recipe {}. ({nonce})",
            aspect_texts.join(", and ")
        ))
    }

    fn rerank_listwise(
        &self,
        _query_text: &str,
        items: &[ItemReviews],
    ) -> Result<Vec<String>, LlmError> {
        check_listwise_request(items)?;
        Ok(items.iter().map(|i| i.item_id.clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::first_overlap;
    use proptest::prelude::*;

    fn texts(q: &str) -> Vec<String> {
        MockLlm
            .extract_aspects("q", q)
            .unwrap()
            .texts()
            .map(str::to_string)
            .collect()
    }

    #[test]
    fn meatball_query() {
        let q = "Can I have a meatball recipe that doesn't take too long?";
        assert_eq!(texts(q), ["meatball", "doesn't take too long"]);
        MockLlm.extract_aspects("q", q).unwrap().check(q).unwrap();
    }

    #[test]
    fn markers_inside_first_three_words_are_ignored() {
        assert_eq!(
            texts("soup and bread that is warm"),
            ["soup and bread", "warm"]
        );
    }

    #[test]
    fn earliest_marker_wins() {
        assert_eq!(
            texts("Recipe with feature i3a0, feature i3a1 and feature i3a2"),
            ["feature i3a0", "feature i3a1 and feature i3a2"]
        );
    }

    #[test]
    fn midpoint_fallback() {
        assert_eq!(
            texts("spicy vegetarian lentil soup"),
            ["spicy vegetarian", "lentil soup"]
        );
        assert_eq!(texts("chili"), ["chi", "li"]);
        assert!(MockLlm.extract_aspects("q", "x").is_err());
        assert!(matches!(
            MockLlm.extract_aspects("q", "  "),
            Err(LlmError::EmptyQuery)
        ));
    }

    #[test]
    fn filler_only_side_falls_back_to_raw_text() {
        assert_eq!(
            texts("I want the recipe that is a dish"),
            ["I want the recipe", "is a dish"]
        );
    }

    #[test]
    fn review_template() {
        let t = MockLlm
            .generate_review_text("i1", &["ready in 25 minutes"], ReviewStyle::Disjoint, 7)
            .unwrap();
        assert_eq!(t, "Review of i1: this recipe ready in 25 minutes. (7)");
        let t = MockLlm
            .generate_review_text(
                "i1",
                &["is vegan", "uses tofu"],
                ReviewStyle::Overlapping,
                3,
            )
            .unwrap();
        assert!(t.contains("is vegan") && t.contains("uses tofu"));
        let again = MockLlm
            .generate_review_text(
                "i1",
                &["is vegan", "uses tofu"],
                ReviewStyle::Overlapping,
                3,
            )
            .unwrap();
        assert_eq!(t, again);
        assert!(MockLlm
            .generate_review_text("i1", &["a", "b"], ReviewStyle::Disjoint, 0)
            .is_err());
    }

    #[test]
    fn listwise_identity() {
        let items: Vec<ItemReviews> = ["A", "B", "C"]
            .iter()
            .map(|id| ItemReviews {
                item_id: id.to_string(),
                reviews: vec!["r".into()],
            })
            .collect();
        assert_eq!(
            MockLlm.rerank_listwise("q", &items).unwrap(),
            ["A", "B", "C"]
        );
        assert!(MockLlm.rerank_listwise("q", &[]).is_err());
    }

    proptest! {
        #[test]
        fn extraction_always_meets_the_contract(q in "[a-zA-Z ,?']{2,60}") {
            if let Ok(ex) = MockLlm.extract_aspects("q", &q) {
                prop_assert!(ex.check(&q).is_ok(), "{:?}", ex);
                prop_assert!(first_overlap(&ex.spans).is_none());
            } else {
                // Only queries with fewer than two meaningful characters fail.
                prop_assert!(q.chars().filter(|c| !is_edge_noise(*c)).count() < 2);
            }
        }
    }
}
