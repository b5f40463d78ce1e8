//! Ablation grid files: one run per line, `#` comments.
//!
//! ```text
//! lgt_only conf 1     # strategy indicator seed
//! mix+ind 2           # component-table name and seed
//! ```

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::trainer::{GridEntry, IndicatorMode, Strategy};

/// Component names of the ablation table mapped to (strategy, indicator).
pub const COMPONENTS: [(&str, Strategy, IndicatorMode); 6] = [
    ("baseline", Strategy::LgtOnly, IndicatorMode::Conf),
    ("mix", Strategy::Mix, IndicatorMode::Conf),
    ("cross", Strategy::Cross, IndicatorMode::Conf),
    ("ind", Strategy::LgtOnly, IndicatorMode::Mix),
    ("mix+ind", Strategy::Mix, IndicatorMode::Mix),
    ("cross+ind", Strategy::Cross, IndicatorMode::Mix),
];

pub fn parse(text: &str) -> Result<Vec<GridEntry>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse { line, message };
        let tokens: Vec<&str> = content.split_whitespace().collect();
        let (strategy, indicator, seed) = match tokens.as_slice() {
            [s, i, seed] => (s.parse::<Strategy>()?, i.parse::<IndicatorMode>()?, *seed),
            [component, seed] => {
                let (_, s, i) = COMPONENTS
                    .iter()
                    .find(|c| c.0 == *component)
                    .ok_or_else(|| bad(format!("unknown component `{component}`")))?;
                (*s, *i, *seed)
            }
            _ => return Err(bad(format!("expected `strategy indicator seed` or `component seed`, got `{content}`"))),
        };
        let seed = seed.parse().map_err(|_| bad(format!("bad seed `{seed}`")))?;
        let entry = GridEntry { strategy, indicator, seed };
        if !seen.insert(entry) {
            return Err(bad(format!("duplicate run {}", entry.run_name())));
        }
        out.push(entry);
    }
    Ok(out)
}
