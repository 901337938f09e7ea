//! Segmentation of target sequences into lexical units.
//!
//! A lexical unit is a maximal run of target positions whose teacher-forced
//! probability is at least `alpha`. Runs of two or more positions are
//! [`UnitKind::Multi`]; every other position, confident or not, becomes a
//! [`UnitKind::Singleton`]. Sequence edges count as low-confidence neighbours.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LudError, Result};
use crate::jsonl;

/// Default identification threshold.
pub const DEFAULT_ALPHA: f64 = 0.85;

/// `probs[i]` is the probability of the ground-truth target token `i` under teacher forcing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTrace")]
pub struct ProbabilityTrace {
    pub item_id: String,
    probs: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTrace {
    item_id: String,
    probs: Vec<f64>,
}

impl TryFrom<RawTrace> for ProbabilityTrace {
    type Error = LudError;

    fn try_from(r: RawTrace) -> Result<Self> {
        ProbabilityTrace::new(r.item_id, r.probs)
    }
}

impl ProbabilityTrace {
    pub fn new(item_id: String, probs: Vec<f64>) -> Result<Self> {
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(LudError::InvalidArgument(format!("probability {p} outside [0, 1]")));
        }
        Ok(ProbabilityTrace { item_id, probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Multi,
    Singleton,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LexicalUnit {
    pub start: usize,
    pub length: usize,
    pub kind: UnitKind,
    /// Trace values covered by the unit; empty when loaded from a units file.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probs: Vec<f64>,
}

impl LexicalUnit {
    pub fn end(&self) -> usize {
        self.start + self.length
    }
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(LudError::InvalidArgument(format!("alpha {alpha} must lie in (0, 1]")))
    }
}

/// Partitions the trace into lexical units (see the module docs).
pub fn identify_units(trace: &ProbabilityTrace, alpha: f64) -> Result<Vec<LexicalUnit>> {
    check_alpha(alpha)?;
    let p = trace.probs();
    if p.is_empty() {
        return Err(LudError::InvalidArgument(format!("trace {} is empty", trace.item_id)));
    }
    let mut units = Vec::new();
    let mut i = 0;
    while i < p.len() {
        let mut j = i;
        while j < p.len() && p[j] >= alpha {
            j += 1;
        }
        let (length, kind) = match j - i {
            0 | 1 => (1, UnitKind::Singleton),
            n => (n, UnitKind::Multi),
        };
        units.push(LexicalUnit {
            start: i,
            length,
            kind,
            probs: p[i..i + length].to_vec(),
        });
        i += length;
    }
    Ok(units)
}

/// Checks that `units` tile `[0, len)` in order with no gaps or overlaps.
pub fn check_partition(units: &[LexicalUnit], len: usize) -> Result<()> {
    let mut next = 0;
    for u in units {
        if u.start != next || u.length == 0 {
            return Err(LudError::Invariant(format!(
                "units do not partition the target: expected a unit at {next}, found start {} length {}",
                u.start, u.length
            )));
        }
        if u.kind == UnitKind::Singleton && u.length != 1 {
            return Err(LudError::Invariant(format!(
                "singleton at {} has length {}",
                u.start, u.length
            )));
        }
        next = u.end();
    }
    if next != len {
        return Err(LudError::Invariant(format!(
            "units cover [0, {next}) of a length-{len} target"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UnitStatistics {
    pub count: usize,
    pub mean_length: f64,
    /// Tokens inside multi-token units.
    pub multi_tokens: usize,
    pub multi: KindStats,
    pub singleton: KindStats,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KindStats {
    pub count: usize,
    pub mean_length: f64,
    /// unit length -> number of units
    pub histogram: BTreeMap<usize, usize>,
}

pub fn unit_statistics<'a>(units: impl IntoIterator<Item = &'a LexicalUnit>) -> UnitStatistics {
    let mut stats = UnitStatistics::default();
    let mut total_len = 0usize;
    for u in units {
        let ks = match u.kind {
            UnitKind::Multi => {
                stats.multi_tokens += u.length;
                &mut stats.multi
            }
            UnitKind::Singleton => &mut stats.singleton,
        };
        ks.count += 1;
        *ks.histogram.entry(u.length).or_default() += 1;
        stats.count += 1;
        total_len += u.length;
    }
    let mean = |tokens: usize, n: usize| if n == 0 { 0.0 } else { tokens as f64 / n as f64 };
    stats.mean_length = mean(total_len, stats.count);
    stats.multi.mean_length = mean(stats.multi_tokens, stats.multi.count);
    stats.singleton.mean_length = mean(total_len - stats.multi_tokens, stats.singleton.count);
    stats
}

// ---------------------------------------------------------------------------
// Files

pub fn save_traces(path: &Path, traces: &[ProbabilityTrace]) -> Result<()> {
    jsonl::write(path, None::<&()>, traces)
}

pub fn load_traces(path: &Path) -> Result<Vec<ProbabilityTrace>> {
    jsonl::read(path)?
        .into_iter()
        .map(|(line, text)| jsonl::parse(path, line, &text))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemUnits {
    pub item_id: String,
    pub units: Vec<LexicalUnit>,
}

/// Writes `{item_id, units: [{start, length, kind}]}` records (no probabilities).
pub fn save_units(path: &Path, items: &[ItemUnits]) -> Result<()> {
    let stripped: Vec<ItemUnits> = items
        .iter()
        .map(|it| ItemUnits {
            item_id: it.item_id.clone(),
            units: it
                .units
                .iter()
                .map(|u| LexicalUnit {
                    probs: Vec::new(),
                    ..u.clone()
                })
                .collect(),
        })
        .collect();
    jsonl::write(path, None::<&()>, &stripped)
}

pub fn load_units(path: &Path) -> Result<Vec<ItemUnits>> {
    jsonl::read(path)?
        .into_iter()
        .map(|(line, text)| jsonl::parse(path, line, &text))
        .collect()
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(p: &[f64]) -> ProbabilityTrace {
        ProbabilityTrace::new("t".into(), p.to_vec()).unwrap()
    }

    fn spans(units: &[LexicalUnit]) -> Vec<(usize, usize, UnitKind)> {
        units.iter().map(|u| (u.start, u.length, u.kind)).collect()
    }

    #[test]
    fn isolated_confident_position_is_singleton() {
        let u = identify_units(&trace(&[0.95, 0.92, 0.30, 0.99]), 0.85).unwrap();
        assert_eq!(
            spans(&u),
            vec![
                (0, 2, UnitKind::Multi),
                (2, 1, UnitKind::Singleton),
                (3, 1, UnitKind::Singleton)
            ]
        );
        assert_eq!(u[0].probs, vec![0.95, 0.92]);
    }

    #[test]
    fn nothing_confident_gives_singletons() {
        let u = identify_units(&trace(&[0.5, 0.5, 0.5]), 0.6).unwrap();
        assert!(u.iter().all(|u| u.kind == UnitKind::Singleton));
        assert_eq!(u.len(), 3);
    }

    #[test]
    fn everything_confident_gives_one_unit() {
        let u = identify_units(&trace(&[0.9; 7]), 0.85).unwrap();
        assert_eq!(spans(&u), vec![(0, 7, UnitKind::Multi)]);
    }

    #[test]
    fn alpha_is_inclusive_and_validated() {
        let u = identify_units(&trace(&[1.0, 1.0, 0.999]), 1.0).unwrap();
        assert_eq!(spans(&u)[0], (0, 2, UnitKind::Multi));
        let u = identify_units(&trace(&[0.85, 0.85]), 0.85).unwrap();
        assert_eq!(spans(&u), vec![(0, 2, UnitKind::Multi)]);
        for bad in [0.0, -0.1, 1.0001, f64::NAN] {
            assert!(identify_units(&trace(&[0.5]), bad).is_err());
        }
        assert!(identify_units(&trace(&[]), 0.5).is_err());
        assert!(ProbabilityTrace::new("x".into(), vec![1.2]).is_err());
    }

    #[test]
    fn statistics() {
        let empty = unit_statistics(&[]);
        assert_eq!(empty.count, 0);
        assert!(empty.multi.histogram.is_empty() && empty.singleton.histogram.is_empty());

        let one = LexicalUnit {
            start: 0,
            length: 3,
            kind: UnitKind::Multi,
            probs: vec![],
        };
        let s = unit_statistics([&one]);
        assert_eq!(s.multi.histogram, BTreeMap::from([(3, 1)]));
        assert_eq!(s.multi_tokens, 3);
    }

    #[test]
    fn units_file_round_trip_drops_probs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.jsonl");
        let units = identify_units(&trace(&[0.9, 0.9, 0.1]), 0.85).unwrap();
        save_units(
            &path,
            &[ItemUnits {
                item_id: "a".into(),
                units: units.clone(),
            }],
        )
        .unwrap();
        let back = load_units(&path).unwrap();
        assert_eq!(spans(&back[0].units), spans(&units));
        assert!(back[0].units[0].probs.is_empty());
        let line = std::fs::read_to_string(&path).unwrap();
        assert!(line.contains(r#"{"start":0,"length":2,"kind":"multi"}"#), "{line}");
    }

    fn probs_strategy() -> impl Strategy<Value = Vec<f64>> {
        // Coarse grid so exact threshold hits occur often.
        proptest::collection::vec((0u32..=20).prop_map(|x| x as f64 / 20.0), 1..=12)
    }

    proptest! {
        #[test]
        fn scan_matches_partition_oracle(p in probs_strategy(), a in 0usize..3) {
            let alpha = [0.5, 0.85, 0.99][a];
            let units = identify_units(&trace(&p), alpha).unwrap();
            let valid = oracle::valid_partitions(&p, alpha);
            prop_assert_eq!(valid.len(), 1);
            prop_assert_eq!(&valid[0], &spans(&units));
        }

        #[test]
        fn units_partition_the_target(p in probs_strategy(), alpha in 0.01f64..=1.0) {
            let units = identify_units(&trace(&p), alpha).unwrap();
            check_partition(&units, p.len()).unwrap();
            for u in &units {
                if u.kind == UnitKind::Multi {
                    prop_assert!(u.length >= 2 && u.probs.iter().all(|&x| x >= alpha));
                }
            }
        }

        #[test]
        fn raising_alpha_never_grows_multi_coverage(p in probs_strategy(), a in 0.01f64..=1.0, b in 0.01f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let cover = |alpha| unit_statistics(&identify_units(&trace(&p), alpha).unwrap()).multi_tokens;
            prop_assert!(cover(hi) <= cover(lo));
        }
    }
}
