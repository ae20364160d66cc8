use std::path::Path;

/// Prompt templates with `{name}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub extract: String,
    pub review_overlapping: String,
    pub review_disjoint: String,
    pub listwise: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            extract: include_str!("../../assets/extract_aspects.txt").to_string(),
            review_overlapping: include_str!("../../assets/review_overlapping.txt").to_string(),
            review_disjoint: include_str!("../../assets/review_disjoint.txt").to_string(),
            listwise: include_str!("../../assets/listwise_rerank.txt").to_string(),
        }
    }
}

impl PromptSet {
    /// Built-in prompts, with any of `extract_aspects.txt`,
    /// `review_overlapping.txt`, `review_disjoint.txt` or `listwise_rerank.txt`
    /// found in `dir` taking their place.
    pub fn with_overrides(dir: &Path) -> std::io::Result<Self> {
        let mut set = Self::default();
        for (file, slot) in [
            ("extract_aspects.txt", &mut set.extract),
            ("review_overlapping.txt", &mut set.review_overlapping),
            ("review_disjoint.txt", &mut set.review_disjoint),
            ("listwise_rerank.txt", &mut set.listwise),
        ] {
            let path = dir.join(file);
            if path.exists() {
                *slot = std::fs::read_to_string(path)?;
            }
        }
        Ok(set)
    }
}

/// Substitutes each `{key}` in `template`. Substituted text is not rescanned.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        let hit = vars
            .iter()
            .find(|(k, _)| tail[1..].starts_with(k) && tail[1 + k.len()..].starts_with('}'));
        match hit {
            Some((k, v)) => {
                out.push_str(v);
                rest = &tail[k.len() + 2..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_fills_known_placeholders_only() {
        assert_eq!(
            render(
                "Q: {query}\n{item_blocks} {other} [\"{\"]",
                &[("query", "a {query}"), ("item_blocks", "B")]
            ),
            "Q: a {query}\nB {other} [\"{\"]"
        );
    }

    #[test]
    fn builtin_prompts_carry_their_placeholders() {
        let p = PromptSet::default();
        assert!(p.extract.contains("{query}"));
        assert!(p.listwise.contains("{query}") && p.listwise.contains("{item_blocks}"));
        for t in [&p.review_overlapping, &p.review_disjoint] {
            assert!(t.contains("{item_id}") && t.contains("{aspects}"));
        }
    }

    #[test]
    fn overrides_replace_single_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("listwise_rerank.txt"), "rank {query}").unwrap();
        let p = PromptSet::with_overrides(dir.path()).unwrap();
        assert_eq!(p.listwise, "rank {query}");
        assert_eq!(p.extract, PromptSet::default().extract);
    }
}
