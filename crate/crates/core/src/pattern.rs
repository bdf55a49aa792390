//! Glob matching over dotted layer names.
//!
//! Names and patterns are split on `.`. In a pattern, `**` matches any number
//! of segments (including none), a segment `*` matches exactly one segment, and
//! a `*` inside a segment matches any run of characters within that segment.
//! So `encoder.layer.*.output.dense` matches `encoder.layer.3.output.dense`
//! but not `encoder.layer.3.attention.output.dense`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerPattern(String);

impl LayerPattern {
    pub fn new(pattern: impl Into<String>) -> Self {
        LayerPattern(pattern.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn matches(&self, name: &str) -> bool {
        let pat: Vec<&str> = self.0.split('.').collect();
        let segs: Vec<&str> = name.split('.').collect();
        match_segments(&pat, &segs)
    }
}

impl From<&str> for LayerPattern {
    fn from(s: &str) -> Self {
        LayerPattern::new(s)
    }
}

/// True when any of `patterns` matches `name`.
pub fn any_match(patterns: &[LayerPattern], name: &str) -> bool {
    patterns.iter().any(|p| p.matches(name))
}

fn match_segments(pat: &[&str], segs: &[&str]) -> bool {
    match pat.split_first() {
        None => segs.is_empty(),
        Some((&"**", rest)) => (0..=segs.len()).any(|skip| match_segments(rest, &segs[skip..])),
        Some((p, rest)) => match segs.split_first() {
            Some((s, srest)) => match_segment(p, s) && match_segments(rest, srest),
            None => false,
        },
    }
}

fn match_segment(pat: &str, seg: &str) -> bool {
    let parts: Vec<&str> = pat.split('*').collect();
    if parts.len() == 1 {
        return pat == seg;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if seg.len() < first.len() + last.len() || !seg.starts_with(first) || !seg.ends_with(last) {
        return false;
    }
    let mut rest = &seg[first.len()..seg.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(at) => rest = &rest[at + mid.len()..],
            None => return false,
        }
    }
    true
}
