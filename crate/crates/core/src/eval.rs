//! Speed and quality metrics over decode traces, and the static report.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::decode::{Beta, DecodeTrace, HaltReason, NamedTrace};
use crate::error::{LudError, Result};
use crate::jsonl;
use crate::TokenId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeStats {
    pub n_tokens: usize,
    pub n_forwards: usize,
    pub wall_time: Duration,
}

impl DecodeStats {
    pub fn of(trace: &DecodeTrace) -> Self {
        DecodeStats {
            n_tokens: trace.n_tokens(),
            n_forwards: trace.n_forwards(),
            wall_time: trace.wall_time,
        }
    }

    /// Pooled counts and times over several generations.
    pub fn total<'a>(traces: impl IntoIterator<Item = &'a DecodeTrace>) -> Self {
        traces.into_iter().fold(DecodeStats::default(), |acc, t| DecodeStats {
            n_tokens: acc.n_tokens + t.n_tokens(),
            n_forwards: acc.n_forwards + t.n_forwards(),
            wall_time: acc.wall_time + t.wall_time,
        })
    }

    /// Loop wall time per generated token, in seconds.
    pub fn per_token_secs(&self) -> Result<f64> {
        if self.n_tokens == 0 {
            return Err(LudError::InvalidArgument("no generated tokens".into()));
        }
        Ok(self.wall_time.as_secs_f64() / self.n_tokens as f64)
    }
}

/// Forward compression ratio: the share of forward passes saved relative to
/// one pass per token.
pub fn fcr(stats: &DecodeStats) -> Result<f64> {
    if stats.n_tokens == 0 {
        return Err(LudError::InvalidArgument("fcr of an empty generation".into()));
    }
    if stats.n_forwards > stats.n_tokens {
        return Err(LudError::Invariant(format!(
            "{} forwards for {} tokens",
            stats.n_forwards, stats.n_tokens
        )));
    }
    Ok((stats.n_tokens - stats.n_forwards) as f64 / stats.n_tokens as f64)
}

/// Mean of per-generation FCR, skipping empty generations.
pub fn mean_fcr<'a>(traces: impl IntoIterator<Item = &'a DecodeTrace>) -> Result<f64> {
    let values: Vec<f64> = traces
        .into_iter()
        .filter(|t| t.n_tokens() > 0)
        .map(|t| fcr(&DecodeStats::of(t)))
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(LudError::InvalidArgument("mean fcr over no generations".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Wall-time acceleration ratio from per-token times. Negative when LUD is slower.
pub fn war(t_ar: f64, t_lud: f64) -> Result<f64> {
    if !(t_ar > 0.0 && t_lud > 0.0) || !t_ar.is_finite() || !t_lud.is_finite() {
        return Err(LudError::InvalidArgument(format!(
            "per-token times must be positive, got ar={t_ar} lud={t_lud}"
        )));
    }
    Ok((t_ar - t_lud) / t_ar)
}

/// Judge outcomes for LUD against the reference: better, same, worse.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityTally {
    pub g: usize,
    pub s: usize,
    pub b: usize,
}

impl QualityTally {
    pub fn total(&self) -> usize {
        self.g + self.s + self.b
    }
}

pub fn quality_ratio(tally: &QualityTally) -> Result<f64> {
    let denom = tally.b + tally.s;
    if denom == 0 {
        return Err(LudError::InvalidArgument(
            "quality ratio undefined when b + s == 0".into(),
        ));
    }
    Ok((tally.g + tally.s) as f64 / denom as f64)
}

/// One judged example. `order1` is `[lud, reference]` as presented to the
/// judge; `order2` is the swapped presentation `[reference, lud]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub order1: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order2: Option<[f64; 2]>,
}

impl ScoreRecord {
    /// (lud, reference) scores, averaged over both orders when available.
    pub fn scores(&self) -> (f64, f64) {
        match self.order2 {
            Some([r2, l2]) => ((self.order1[0] + l2) / 2.0, (self.order1[1] + r2) / 2.0),
            None => (self.order1[0], self.order1[1]),
        }
    }
}

pub fn load_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    jsonl::read(path)?
        .into_iter()
        .map(|(line, text)| {
            let r: ScoreRecord = jsonl::parse(path, line, &text)?;
            let all = r.order1.iter().chain(r.order2.iter().flatten());
            if all.into_iter().any(|v| !v.is_finite()) {
                return Err(jsonl::malformed(path, line, "non-finite score"));
            }
            Ok(r)
        })
        .collect()
}

pub fn tally_scores(records: &[ScoreRecord]) -> QualityTally {
    let mut t = QualityTally::default();
    for r in records {
        let (lud, reference) = r.scores();
        match lud.partial_cmp(&reference) {
            Some(std::cmp::Ordering::Greater) => t.g += 1,
            Some(std::cmp::Ordering::Less) => t.b += 1,
            _ => t.s += 1,
        }
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub exact_match: bool,
    pub prefix_match_len: usize,
    pub token_f1: f64,
}

/// Agreement of a LUD output with the greedy output for the same prompt.
pub fn ar_agreement(lud: &DecodeTrace, ar: &DecodeTrace) -> Agreement {
    agreement_ids(&lud.output_ids, &ar.output_ids)
}

pub fn agreement_ids(a: &[TokenId], b: &[TokenId]) -> Agreement {
    let prefix_match_len = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    let token_f1 = if a.is_empty() && b.is_empty() {
        1.0
    } else {
        let mut counts: HashMap<TokenId, isize> = HashMap::new();
        for &t in a {
            *counts.entry(t).or_default() += 1;
        }
        let mut overlap = 0usize;
        for &t in b {
            let c = counts.entry(t).or_default();
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
        if overlap == 0 {
            0.0
        } else {
            let p = overlap as f64 / a.len() as f64;
            let r = overlap as f64 / b.len() as f64;
            2.0 * p * r / (p + r)
        }
    };
    Agreement {
        exact_match: a == b,
        prefix_match_len,
        token_f1,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgreementSummary {
    pub n: usize,
    pub exact_match_rate: f64,
    pub mean_prefix_match_len: f64,
    pub mean_token_f1: f64,
}

impl AgreementSummary {
    pub fn of(items: &[Agreement]) -> Self {
        if items.is_empty() {
            return AgreementSummary::default();
        }
        let n = items.len() as f64;
        AgreementSummary {
            n: items.len(),
            exact_match_rate: items.iter().filter(|a| a.exact_match).count() as f64 / n,
            mean_prefix_match_len: items.iter().map(|a| a.prefix_match_len as f64).sum::<f64>() / n,
            mean_token_f1: items.iter().map(|a| a.token_f1).sum::<f64>() / n,
        }
    }
}

/// Pairs traces by item id and scores each LUD output against its greedy one.
pub fn agreement_by_id(lud: &[NamedTrace], ar: &[NamedTrace]) -> Result<Vec<Agreement>> {
    let ar: HashMap<&str, &DecodeTrace> = ar.iter().map(|t| (t.item_id.as_str(), &t.trace)).collect();
    lud.iter()
        .map(|t| {
            ar.get(t.item_id.as_str())
                .map(|r| ar_agreement(&t.trace, r))
                .ok_or_else(|| LudError::InvalidArgument(format!("no greedy trace for item {}", t.item_id)))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanHistogram {
    /// `bins[i]` counts steps that accepted `i + 1` tokens.
    pub bins: Vec<usize>,
    pub halt_reasons: BTreeMap<HaltReason, usize>,
    pub total_steps: usize,
}

impl SpanHistogram {
    pub fn mean_accepted(&self) -> f64 {
        if self.total_steps == 0 {
            return 0.0;
        }
        let tokens: usize = self.bins.iter().enumerate().map(|(i, c)| (i + 1) * c).sum();
        tokens as f64 / self.total_steps as f64
    }

    pub fn halts(&self, reason: HaltReason) -> usize {
        self.halt_reasons.get(&reason).copied().unwrap_or(0)
    }
}

/// Distribution of accepted span lengths over bins `1..=k`, with the halt
/// reason of every step. Spans longer than `k` are an error.
pub fn span_histogram<'a>(traces: impl IntoIterator<Item = &'a DecodeTrace>, k: usize) -> Result<SpanHistogram> {
    let mut h = SpanHistogram {
        bins: vec![0; k],
        halt_reasons: HaltReason::ALL.iter().map(|&r| (r, 0)).collect(),
        total_steps: 0,
    };
    for t in traces {
        for s in &t.steps {
            if s.accepted_len == 0 || s.accepted_len > k {
                return Err(LudError::Invariant(format!(
                    "accepted span {} outside 1..={k}",
                    s.accepted_len
                )));
            }
            h.bins[s.accepted_len - 1] += 1;
            *h.halt_reasons.entry(s.halt_reason).or_default() += 1;
            h.total_steps += 1;
        }
    }
    Ok(h)
}

// ---------------------------------------------------------------------------
// Report

/// Everything reported about one decoding run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub beta: Beta,
    pub k: usize,
    pub repetition_check: bool,
    pub n_generations: usize,
    pub n_tokens: usize,
    pub n_forwards: usize,
    pub fcr: f64,
    pub mean_fcr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub war: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement: Option<AgreementSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<QualityTally>,
    pub histogram: SpanHistogram,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportPaths {
    pub summary: PathBuf,
    pub page: PathBuf,
}

const PALETTE: [&str; 6] = ["#fde68a", "#bfdbfe", "#bbf7d0", "#fecaca", "#ddd6fe", "#fed7aa"];

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn render_generation(page: &mut String, nt: &NamedTrace, vocab: &Vocabulary) -> Result<()> {
    let _ = writeln!(page, "<section><h3>{}</h3><pre class=\"gen\">", escape(&nt.item_id));
    let mut rendered = 0usize;
    for step in &nt.trace.steps {
        let probs: Vec<String> = step.proposal.probs.iter().map(|p| format!("{p:.3}")).collect();
        let title = format!(
            "step {} accepted {}/{} ({}) p=[{}]",
            step.forward_index,
            step.accepted_len,
            step.proposal.len(),
            step.halt_reason.as_str(),
            probs.join(", ")
        );
        let mut text = String::new();
        for &t in step.accepted() {
            text.push_str(vocab.token_str(t)?);
        }
        let _ = write!(
            page,
            "<span style=\"background:{}\" title=\"{}\">{}</span>",
            PALETTE[step.forward_index % PALETTE.len()],
            escape(&title),
            escape(&text)
        );
        rendered += step.accepted_len;
    }
    if rendered != nt.trace.output_ids.len() {
        return Err(LudError::Invariant(format!(
            "{}: spans cover {rendered} tokens but the output has {}",
            nt.item_id,
            nt.trace.output_ids.len()
        )));
    }
    let _ = writeln!(
        page,
        "</pre><p>{} tokens in {} forward passes</p></section>",
        rendered,
        nt.trace.n_forwards()
    );
    Ok(())
}

/// Writes `summary.json` and `report.html` into `dir`.
///
/// Output depends only on the arguments, so regenerating from the same trace
/// files gives identical bytes.
pub fn emit_report(runs: &[RunSummary], traces: &[NamedTrace], vocab: &Vocabulary, dir: &Path) -> Result<ReportPaths> {
    fs::create_dir_all(dir).map_err(|e| LudError::io(dir, e))?;
    let paths = ReportPaths {
        summary: dir.join("summary.json"),
        page: dir.join("report.html"),
    };
    let mut summary = serde_json::to_string_pretty(runs)?;
    summary.push('\n');

    let mut page = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>LUD report</title>\n\
         <style>body{font-family:sans-serif;margin:2em}table{border-collapse:collapse}\
         td,th{border:1px solid #999;padding:2px 8px;text-align:right}\
         pre.gen{white-space:pre-wrap;font-size:14px}pre.gen span{border-right:1px solid #888}</style>\n\
         </head><body>\n<h1>Lexical unit decoding</h1>\n",
    );
    if !runs.is_empty() {
        page.push_str(
            "<h2>Runs</h2>\n<table><tr><th>run</th><th>beta</th><th>k</th><th>rep</th><th>tokens</th>\
             <th>forwards</th><th>FCR</th><th>mean FCR</th><th>WAR</th><th>exact match</th><th>token F1</th></tr>\n",
        );
        for r in runs {
            let _ = writeln!(
                page,
                "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{:.4}</td><td>{:.4}</td>\
                 <td>{}</td><td>{}</td><td>{}</td></tr>",
                escape(&r.label),
                r.beta,
                r.k,
                if r.repetition_check { "on" } else { "off" },
                r.n_tokens,
                r.n_forwards,
                r.fcr,
                r.mean_fcr,
                fmt_opt(r.war),
                fmt_opt(r.agreement.as_ref().map(|a| a.exact_match_rate)),
                fmt_opt(r.agreement.as_ref().map(|a| a.mean_token_f1)),
            );
        }
        page.push_str("</table>\n<h2>Accepted span lengths</h2>\n");
        for r in runs {
            let _ = write!(page, "<h3>{}</h3><table><tr><th>len</th>", escape(&r.label));
            for i in 1..=r.histogram.bins.len() {
                let _ = write!(page, "<th>{i}</th>");
            }
            page.push_str("</tr><tr><td>steps</td>");
            for c in &r.histogram.bins {
                let _ = write!(page, "<td>{c}</td>");
            }
            page.push_str("</tr></table><p>halts:");
            for (reason, c) in &r.histogram.halt_reasons {
                let _ = write!(page, " {}={c}", reason.as_str());
            }
            page.push_str("</p>\n");
        }
    }
    if !traces.is_empty() {
        page.push_str("<h2>Generations</h2>\n");
        for nt in traces {
            render_generation(&mut page, nt, vocab)?;
        }
    }
    page.push_str("</body></html>\n");

    fs::write(&paths.summary, summary).map_err(|e| LudError::io(&paths.summary, e))?;
    fs::write(&paths.page, page).map_err(|e| LudError::io(&paths.page, e))?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, TokenizerMode};
    use crate::decode::{DecodeStep, LookaheadProposal};
    use proptest::prelude::*;

    fn stats(n_tokens: usize, n_forwards: usize) -> DecodeStats {
        DecodeStats {
            n_tokens,
            n_forwards,
            wall_time: Duration::ZERO,
        }
    }

    fn trace(spans: &[usize], k: usize) -> DecodeTrace {
        let mut t = DecodeTrace::default();
        let mut next = 3;
        for (i, &len) in spans.iter().enumerate() {
            let tokens: Vec<TokenId> = (0..k)
                .map(|j| {
                    let id = next + j as TokenId;
                    id % 5 + 3
                })
                .collect();
            next += len as TokenId;
            t.output_ids.extend_from_slice(&tokens[..len]);
            t.steps.push(DecodeStep {
                forward_index: i,
                proposal: LookaheadProposal {
                    tokens,
                    probs: vec![0.5; k],
                },
                accepted_len: len,
                halt_reason: if len == k {
                    HaltReason::WindowEnd
                } else {
                    HaltReason::Threshold
                },
            });
        }
        t
    }

    #[test]
    fn formula_examples() {
        assert_eq!(fcr(&stats(37, 37)).unwrap(), 0.0);
        assert_eq!(fcr(&stats(100, 10)).unwrap(), 0.9);
        assert!(fcr(&stats(0, 0)).is_err());
        assert_eq!(war(0.02, 0.02).unwrap(), 0.0);
        assert_eq!(war(0.02, 0.01).unwrap(), 0.5);
        assert!(war(0.0, 0.01).is_err());
        assert!(war(0.01, -1.0).is_err());
        assert_eq!(quality_ratio(&QualityTally { g: 0, s: 7, b: 0 }).unwrap(), 1.0);
        assert_eq!(quality_ratio(&QualityTally { g: 10, s: 5, b: 10 }).unwrap(), 1.0);
        assert!(quality_ratio(&QualityTally::default()).is_err());
    }

    #[test]
    fn agreement_examples() {
        let a = agreement_ids(&[3, 4, 5, 6], &[3, 4, 5, 6]);
        assert!(a.exact_match);
        assert_eq!(a.token_f1, 1.0);
        let d = agreement_ids(&[3, 4], &[5, 6, 7]);
        assert_eq!(d.token_f1, 0.0);
        assert_eq!(d.prefix_match_len, 0);
        let p = agreement_ids(&[3, 4, 9, 6], &[3, 4, 5, 6]);
        assert!(!p.exact_match);
        assert_eq!(p.prefix_match_len, 2);
        assert_eq!(p.token_f1, 0.75);
        // multiset, not set
        assert_eq!(agreement_ids(&[3, 3], &[3]).token_f1, 2.0 * 0.5 / 1.5);
    }

    #[test]
    fn histogram_examples() {
        let empty = span_histogram(std::iter::empty(), 4).unwrap();
        assert_eq!(empty.bins, vec![0; 4]);
        assert_eq!(empty.total_steps, 0);
        let ar = [trace(&[1, 1, 1], 1), trace(&[1], 1)];
        let h = span_histogram(&ar, 1).unwrap();
        assert_eq!(h.bins, vec![4]);
        let sat = [trace(&[4, 4, 4], 4)];
        let h = span_histogram(&sat, 4).unwrap();
        assert_eq!(h.bins, vec![0, 0, 0, 3]);
        assert_eq!(h.halts(HaltReason::WindowEnd), 3);
        assert!(span_histogram(&sat, 3).is_err());
    }

    #[test]
    fn order_swapped_scores() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.jsonl");
        fs::write(
            &path,
            "{\"id\":\"a\",\"order1\":[8,6],\"order2\":[7,7]}\n\
             {\"id\":\"b\",\"order1\":[5,5]}\n\
             {\"id\":\"c\",\"order1\":[6,8],\"order2\":[8,5]}\n\
             {\"id\":\"d\",\"order1\":[9,4],\"order2\":[9,2]}\n",
        )
        .unwrap();
        let recs = load_scores(&path).unwrap();
        // a: lud 7.5 vs 6.5, b: tie, c: 5.5 vs 8, d: 5.5 vs 6.5
        assert_eq!(tally_scores(&recs), QualityTally { g: 1, s: 1, b: 2 });
        fs::write(&path, "{\"id\":\"a\",\"order1\":[8]}\n").unwrap();
        assert!(matches!(load_scores(&path), Err(LudError::Malformed { line: 1, .. })));
    }

    #[test]
    fn report_is_deterministic_and_escaped() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = build_vocabulary(&["a<b&c"], TokenizerMode::Char).unwrap();
        let lt = vocab.id_of("<").unwrap();
        let amp = vocab.id_of("&").unwrap();
        let mut t = trace(&[2, 1], 2);
        t.steps[0].proposal.tokens = vec![lt, amp];
        t.steps[1].proposal.tokens = vec![vocab.eos_id(), lt];
        t.output_ids = vec![lt, amp, vocab.eos_id()];
        let traces = vec![NamedTrace {
            item_id: "x<1>".into(),
            trace: t,
        }];
        let h = span_histogram(traces.iter().map(|t| &t.trace), 2).unwrap();
        let run = RunSummary {
            label: "beta=0.9".into(),
            beta: Beta::Threshold(0.9),
            k: 2,
            repetition_check: true,
            n_generations: 1,
            n_tokens: 3,
            n_forwards: 2,
            fcr: 1.0 / 3.0,
            mean_fcr: 1.0 / 3.0,
            war: None,
            agreement: None,
            quality: None,
            histogram: h,
        };
        let a = emit_report(std::slice::from_ref(&run), &traces, &vocab, &dir.path().join("a")).unwrap();
        let b = emit_report(&[run], &traces, &vocab, &dir.path().join("b")).unwrap();
        let page = fs::read_to_string(&a.page).unwrap();
        assert_eq!(page, fs::read_to_string(&b.page).unwrap());
        assert_eq!(fs::read(&a.summary).unwrap(), fs::read(&b.summary).unwrap());
        assert!(page.contains("x&lt;1&gt;"));
        assert!(page.contains(">&lt;&amp;</span>"));
        assert!(page.contains("&lt;eos&gt;"));
        assert_eq!(page.matches("<span style").count(), 2);

        let empty = emit_report(&[], &[], &vocab, &dir.path().join("e")).unwrap();
        assert_eq!(fs::read_to_string(&empty.summary).unwrap(), "[]\n");
        assert!(!fs::read_to_string(&empty.page).unwrap().contains("<section>"));
    }

    proptest! {
        #[test]
        fn histogram_conserves_steps(spans in proptest::collection::vec(proptest::collection::vec(1usize..=5, 0..8), 0..6)) {
            let traces: Vec<DecodeTrace> = spans.iter().map(|s| trace(s, 5)).collect();
            let h = span_histogram(&traces, 5).unwrap();
            let steps: usize = spans.iter().map(Vec::len).sum();
            prop_assert_eq!(h.bins.iter().sum::<usize>(), steps);
            prop_assert_eq!(h.halt_reasons.values().sum::<usize>(), steps);
            let tokens: usize = spans.iter().flatten().sum();
            prop_assert_eq!(DecodeStats::total(&traces).n_tokens, tokens);
        }

        #[test]
        fn fcr_bounds(n in 1usize..500, f in 1usize..500) {
            prop_assume!(f <= n);
            let v = fcr(&stats(n, f)).unwrap();
            prop_assert!((0.0..=1.0 - 1.0 / n as f64 + 1e-12).contains(&v));
        }
    }
}
