//! Answer containment.

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// True when any gold answer appears in `output`, ignoring case and runs of whitespace.
pub fn score_answer<S: AsRef<str>>(output: &str, gold_answers: &[S]) -> bool {
    let out = normalize(output);
    gold_answers.iter().any(|g| {
        let g = normalize(g.as_ref());
        !g.is_empty() && out.contains(&g)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn containment() {
        assert!(score_answer("The answer is Paris.", &["Paris"]));
        assert!(!score_answer("unknown", &["Paris"]));
        assert!(!score_answer("par is", &["Paris"]));
        assert!(score_answer("New\n  York City", &["new york"]));
        assert!(score_answer("b", &["a", "B"]));
        assert!(!score_answer("anything", &[""]));
    }
}
