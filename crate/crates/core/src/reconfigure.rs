//! PAD-instance construction and the mixed continual-training set.
//!
//! For a multi-token unit covering target positions `[s, s + L)` the
//! instance input is `BOS + prompt + target[..s]` followed by `L - 1` PADs,
//! each PAD sitting at the absolute position of the target token it
//! replaces. The last `L` input positions are supervised with
//! `target[s..s + L]`: the first unit token from real context, the rest
//! across PADs that carry only position. Nothing after the unit is kept.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenizedItem, Vocabulary};
use crate::error::Result;
use crate::identify::{check_partition, LexicalUnit, UnitKind};
use crate::jsonl;
use crate::model::{Label, TrainingBatchItem, IGNORE};
use crate::TokenId;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceSource {
    pub item_id: String,
    pub start: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconfiguredInstance {
    pub input_ids: Vec<TokenId>,
    pub label_ids: Vec<Label>,
    pub source: InstanceSource,
}

impl ReconfiguredInstance {
    pub fn to_batch_item(&self) -> Result<TrainingBatchItem> {
        TrainingBatchItem::new(self.input_ids.clone(), self.label_ids.clone())
    }
}

/// One PAD instance per multi-token unit; singletons are left to the
/// original auto-regressive item.
pub fn reconfigure_item(
    item: &TokenizedItem,
    units: &[LexicalUnit],
    vocab: &Vocabulary,
) -> Result<Vec<ReconfiguredInstance>> {
    check_partition(units, item.target_ids.len())?;
    let p = item.prompt_ids.len();
    let mut out = Vec::new();
    for u in units.iter().filter(|u| u.kind == UnitKind::Multi) {
        let (s, l) = (u.start, u.length);
        let mut input = Vec::with_capacity(p + s + l);
        input.push(vocab.bos_id());
        input.extend(&item.prompt_ids);
        input.extend(&item.target_ids[..s]);
        input.extend(std::iter::repeat_n(vocab.pad_id(), l - 1));
        let labels = std::iter::repeat_n(IGNORE, p + s)
            .chain(item.target_ids[s..s + l].iter().map(|&t| Some(t)))
            .collect();
        out.push(ReconfiguredInstance {
            input_ids: input,
            label_ids: labels,
            source: InstanceSource {
                item_id: item.item_id.clone(),
                start: s,
                length: l,
            },
        });
    }
    Ok(out)
}

/// `D + Dbar`, shuffled deterministically by `seed`. No deduplication.
pub fn build_mixed_dataset(
    original: Vec<TrainingBatchItem>,
    reconfigured: &[ReconfiguredInstance],
    seed: u64,
) -> Result<Vec<TrainingBatchItem>> {
    let mut all = original;
    for inst in reconfigured {
        all.push(inst.to_batch_item()?);
    }
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(all)
}

/// Per-target-position supervision counts for one item across `D` and `Dbar`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossAudit {
    pub item_id: String,
    /// `counts[i]`: number of (instance, position) pairs supervising target token `i`.
    pub counts: Vec<usize>,
    pub zero_count_positions: Vec<usize>,
    /// Structural problems: wrong label token, PAD misplacement, untruncated suffix.
    pub violations: Vec<String>,
}

impl LossAudit {
    pub fn is_clean(&self) -> bool {
        self.zero_count_positions.is_empty() && self.violations.is_empty()
    }
}

fn check_instance(item: &TokenizedItem, inst: &ReconfiguredInstance, vocab: &Vocabulary) -> Vec<String> {
    let mut v = Vec::new();
    let p = item.prompt_ids.len();
    let InstanceSource {
        start: s, length: l, ..
    } = inst.source;
    let tag = format!("instance ({s}, {l})");
    if s + l > item.target_ids.len() || l < 2 {
        v.push(format!("{tag}: unit out of range"));
        return v;
    }
    // Truncation: exactly context + (L - 1) PADs.
    if inst.input_ids.len() != p + s + l || inst.label_ids.len() != inst.input_ids.len() {
        v.push(format!("{tag}: length {} != {}", inst.input_ids.len(), p + s + l));
        return v;
    }
    let mut expected_ctx = vec![vocab.bos_id()];
    expected_ctx.extend(&item.prompt_ids);
    expected_ctx.extend(&item.target_ids[..s]);
    if inst.input_ids[..p + 1 + s] != expected_ctx[..] {
        v.push(format!("{tag}: context differs from BOS + prompt + target prefix"));
    }
    // PAD at absolute position q replaces target token q - 1 - p.
    for (q, &id) in inst.input_ids.iter().enumerate() {
        let in_unit = q > p + s;
        if in_unit && id != vocab.pad_id() {
            v.push(format!("{tag}: position {q} should be PAD"));
        }
        if !in_unit && id == vocab.pad_id() {
            v.push(format!("{tag}: PAD outside the unit at position {q}"));
        }
    }
    let supervised: Vec<(usize, TokenId)> = inst
        .label_ids
        .iter()
        .enumerate()
        .filter_map(|(j, l)| l.map(|t| (j, t)))
        .collect();
    if supervised.len() != l {
        v.push(format!("{tag}: {} supervised labels, expected {l}", supervised.len()));
    }
    for (j, t) in supervised {
        match j.checked_sub(p) {
            Some(i) if (s..s + l).contains(&i) && item.target_ids[i] == t => {}
            _ => v.push(format!(
                "{tag}: label {t} at position {j} is not target token of the unit"
            )),
        }
    }
    v
}

/// Counts how often each target token is supervised by the item's `D` entry
/// and its `Dbar` instances, and checks the PAD instance invariants.
pub fn audit_loss_once(
    item: &TokenizedItem,
    d_entry: &TrainingBatchItem,
    instances: &[ReconfiguredInstance],
    vocab: &Vocabulary,
) -> LossAudit {
    let n = item.target_ids.len();
    let p = item.prompt_ids.len();
    let mut counts = vec![0usize; n];
    let mut violations = Vec::new();
    let mut tally = |labels: &[Label], what: &str, violations: &mut Vec<String>| {
        for (j, l) in labels.iter().enumerate() {
            let Some(t) = l else { continue };
            match j.checked_sub(p).filter(|&i| i < n) {
                Some(i) if item.target_ids[i] == *t => counts[i] += 1,
                _ => violations.push(format!("{what}: label {t} at position {j} does not match the target")),
            }
        }
    };
    tally(&d_entry.label_ids, "D entry", &mut violations);
    for inst in instances {
        if inst.source.item_id != item.item_id {
            violations.push(format!(
                "instance from {} audited against {}",
                inst.source.item_id, item.item_id
            ));
            continue;
        }
        violations.extend(check_instance(item, inst, vocab));
        tally(&inst.label_ids, "PAD instance", &mut violations);
    }
    let zero_count_positions = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == 0)
        .map(|(i, _)| i)
        .collect();
    LossAudit {
        item_id: item.item_id.clone(),
        counts,
        zero_count_positions,
        violations,
    }
}

// ---------------------------------------------------------------------------
// Files

#[derive(Serialize, Deserialize)]
struct InstancesHeader {
    vocabulary: Vocabulary,
    n_items: usize,
}

pub fn save_instances(path: &Path, vocab: &Vocabulary, instances: &[ReconfiguredInstance]) -> Result<()> {
    let header = InstancesHeader {
        vocabulary: vocab.clone(),
        n_items: instances.len(),
    };
    jsonl::write(path, Some(&header), instances)
}

pub fn load_instances(path: &Path) -> Result<(Vocabulary, Vec<ReconfiguredInstance>)> {
    let mut lines = jsonl::read(path)?.into_iter();
    let (hline, htext) = lines
        .next()
        .ok_or_else(|| jsonl::malformed(path, 1, "missing header record"))?;
    let header: InstancesHeader = jsonl::parse(path, hline, &htext)?;
    let mut out = Vec::with_capacity(header.n_items);
    let mut last = hline;
    for (line, text) in lines {
        let inst: ReconfiguredInstance = jsonl::parse(path, line, &text)?;
        inst.to_batch_item()
            .map_err(|e| jsonl::malformed(path, line, e.to_string()))?;
        out.push(inst);
        last = line;
    }
    if out.len() != header.n_items {
        return Err(jsonl::malformed(
            path,
            last + 1,
            format!("expected {} instances, found {}", header.n_items, out.len()),
        ));
    }
    Ok((header.vocabulary, out))
}

/// Groups instances by source item, preserving order.
pub fn instances_by_item(
    instances: &[ReconfiguredInstance],
) -> std::collections::HashMap<&str, Vec<ReconfiguredInstance>> {
    let mut map: std::collections::HashMap<&str, Vec<ReconfiguredInstance>> = Default::default();
    for inst in instances {
        map.entry(inst.source.item_id.as_str()).or_default().push(inst.clone());
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, TokenizerMode};
    use crate::identify::{identify_units, ProbabilityTrace};
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        build_vocabulary(&["abcdpq"], TokenizerMode::Char).unwrap()
    }

    fn item(v: &Vocabulary) -> TokenizedItem {
        TokenizedItem::from_text("it", "pq", "abcd", v).unwrap()
    }

    fn unit(start: usize, length: usize, kind: UnitKind) -> LexicalUnit {
        LexicalUnit {
            start,
            length,
            kind,
            probs: vec![],
        }
    }

    fn singletons(n: usize) -> Vec<LexicalUnit> {
        (0..n).map(|i| unit(i, 1, UnitKind::Singleton)).collect()
    }

    #[test]
    fn hand_built_instance() {
        let v = vocab();
        let it = item(&v);
        let [a, b, c] = ["a", "b", "c"].map(|s| v.id_of(s).unwrap());
        let [p, q] = ["p", "q"].map(|s| v.id_of(s).unwrap());
        // target = a b c d EOS; unit over (b, c)
        let units = vec![
            unit(0, 1, UnitKind::Singleton),
            unit(1, 2, UnitKind::Multi),
            unit(3, 1, UnitKind::Singleton),
            unit(4, 1, UnitKind::Singleton),
        ];
        let out = reconfigure_item(&it, &units, &v).unwrap();
        assert_eq!(out.len(), 1);
        let inst = &out[0];
        assert_eq!(inst.input_ids, vec![v.bos_id(), p, q, a, v.pad_id()]);
        assert_eq!(inst.label_ids, vec![IGNORE, IGNORE, IGNORE, Some(b), Some(c)]);
        assert_eq!(inst.source.start, 1);
    }

    #[test]
    fn all_singletons_yield_nothing() {
        let v = vocab();
        let it = item(&v);
        assert!(reconfigure_item(&it, &singletons(5), &v).unwrap().is_empty());
    }

    #[test]
    fn whole_target_unit() {
        let v = vocab();
        let it = item(&v);
        let out = reconfigure_item(&it, &[unit(0, 5, UnitKind::Multi)], &v).unwrap();
        let inst = &out[0];
        assert_eq!(inst.input_ids.len(), 1 + 2 + 4);
        assert_eq!(inst.input_ids[3..], [v.pad_id(); 4]);
        let labels: Vec<TokenId> = inst.label_ids.iter().flatten().copied().collect();
        assert_eq!(labels, it.target_ids);
    }

    #[test]
    fn non_partition_is_rejected() {
        let v = vocab();
        let it = item(&v);
        let gap = vec![unit(0, 1, UnitKind::Singleton), unit(2, 3, UnitKind::Multi)];
        assert!(reconfigure_item(&it, &gap, &v).is_err());
        let short = singletons(4);
        assert!(reconfigure_item(&it, &short, &v).is_err());
    }

    #[test]
    fn mixing() {
        let v = vocab();
        let it = item(&v);
        let d: Vec<_> = (0..10)
            .map(|_| TrainingBatchItem::from_item(&it, v.bos_id()).unwrap())
            .collect();
        let one = reconfigure_item(&it, &[unit(0, 5, UnitKind::Multi)], &v).unwrap();
        let dbar: Vec<_> = one.iter().cycle().take(4).cloned().collect();
        let mixed = build_mixed_dataset(d.clone(), &dbar, 3).unwrap();
        assert_eq!(mixed.len(), 14);
        assert_eq!(mixed, build_mixed_dataset(d.clone(), &dbar, 3).unwrap());
        let only_d = build_mixed_dataset(d.clone(), &[], 3).unwrap();
        assert_eq!(only_d.len(), 10);
    }

    #[test]
    fn audit_counts() {
        let v = vocab();
        let it = item(&v);
        let d = TrainingBatchItem::from_item(&it, v.bos_id()).unwrap();
        let a = audit_loss_once(&it, &d, &[], &v);
        assert_eq!(a.counts, vec![1; 5]);
        assert!(a.is_clean());

        let units = vec![
            unit(0, 1, UnitKind::Singleton),
            unit(1, 3, UnitKind::Multi),
            unit(4, 1, UnitKind::Singleton),
        ];
        let inst = reconfigure_item(&it, &units, &v).unwrap();
        let a = audit_loss_once(&it, &d, &inst, &v);
        assert_eq!(a.counts, vec![1, 2, 2, 2, 1]);
        assert!(a.is_clean(), "{:?}", a.violations);

        let mut broken = d.clone();
        broken.label_ids[3] = IGNORE;
        let a = audit_loss_once(&it, &broken, &[], &v);
        assert_eq!(a.zero_count_positions, vec![1]);
        assert!(!a.is_clean());

        let mut suffix = inst[0].clone();
        suffix.input_ids.push(v.id_of("d").unwrap());
        suffix.label_ids.push(IGNORE);
        assert!(!audit_loss_once(&it, &d, &[suffix], &v).violations.is_empty());
    }

    #[test]
    fn instances_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dbar.jsonl");
        let v = vocab();
        let it = item(&v);
        let inst = reconfigure_item(&it, &[unit(0, 5, UnitKind::Multi)], &v).unwrap();
        save_instances(&path, &v, &inst).unwrap();
        let (v2, back) = load_instances(&path).unwrap();
        assert_eq!((v2, back), (v, inst));
    }

    proptest! {
        #[test]
        fn random_items_audit_clean(
            target in proptest::collection::vec(3u32..9, 1..20),
            prompt in proptest::collection::vec(3u32..9, 0..6),
            probs_seed in proptest::collection::vec(0.0f64..1.0, 20),
        ) {
            let v = vocab();
            let mut it = TokenizedItem { item_id: "r".into(), prompt_ids: prompt, target_ids: target };
            it.target_ids.push(v.eos_id());
            let probs = probs_seed[..it.target_ids.len()].to_vec();
            let units = identify_units(&ProbabilityTrace::new("r".into(), probs).unwrap(), 0.5).unwrap();
            let inst = reconfigure_item(&it, &units, &v).unwrap();
            let d = TrainingBatchItem::from_item(&it, v.bos_id()).unwrap();
            let a = audit_loss_once(&it, &d, &inst, &v);
            prop_assert!(a.is_clean(), "{:?}", a);
            for u in &units {
                for i in u.start..u.end() {
                    let expected = if u.kind == UnitKind::Multi { 2 } else { 1 };
                    prop_assert_eq!(a.counts[i], expected);
                }
            }
        }
    }
}
