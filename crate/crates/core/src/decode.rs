//! Look-ahead decoding with adaptive span acceptance, and the greedy baseline.
//!
//! Each LUD step feeds `context + (k - 1) PAD` through the model, reads the
//! last `k` distributions, takes the argmax of each and accepts the longest
//! prefix whose probabilities are all `>= beta` (at least one token). With
//! repetition checking on, acceptance also stops before a token that equals
//! its predecessor or is a string suffix of it. There is no attention cache:
//! every forward recomputes the whole prefix.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::Vocabulary;
use crate::error::{LudError, Result};
use crate::jsonl;
use crate::model::CausalLM;
use crate::TokenId;

/// Acceptance threshold, or the sentinel that forces one token per forward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Beta {
    Threshold(f64),
    ForceAr,
}

impl Beta {
    pub fn validate(self) -> Result<Self> {
        match self {
            Beta::Threshold(b) if !(0.0..=1.0).contains(&b) => {
                Err(LudError::InvalidArgument(format!("beta {b} must lie in [0, 1]")))
            }
            _ => Ok(self),
        }
    }

    /// Sort key for sweeps: FORCE_AR behaves like a threshold above 1.
    pub fn order_key(self) -> f64 {
        match self {
            Beta::Threshold(b) => b,
            Beta::ForceAr => f64::INFINITY,
        }
    }
}

impl fmt::Display for Beta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Beta::Threshold(b) => write!(f, "{b}"),
            Beta::ForceAr => f.write_str("force_ar"),
        }
    }
}

impl FromStr for Beta {
    type Err = LudError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "force_ar" | "FORCE_AR" | "ar" => Ok(Beta::ForceAr),
            other => other
                .parse::<f64>()
                .map_err(|_| LudError::InvalidArgument(format!("beta {other:?} is neither a number nor force_ar")))
                .and_then(|b| Beta::Threshold(b).validate()),
        }
    }
}

impl Serialize for Beta {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Beta::Threshold(b) => s.serialize_f64(*b),
            Beta::ForceAr => s.serialize_str("force_ar"),
        }
    }
}

impl<'de> Deserialize<'de> for Beta {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Tag(String),
        }
        let beta = match Repr::deserialize(d)? {
            Repr::Num(b) => Beta::Threshold(b).validate(),
            Repr::Tag(t) => t.parse(),
        };
        beta.map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beta: Beta,
    /// Tokens proposed per forward pass.
    pub k: usize,
    pub max_new_tokens: usize,
    pub repetition_check: bool,
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        self.beta.validate()?;
        if self.k == 0 || self.max_new_tokens == 0 {
            return Err(LudError::InvalidArgument(
                "k and max_new_tokens must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookaheadProposal {
    pub tokens: Vec<TokenId>,
    pub probs: Vec<f64>,
}

impl LookaheadProposal {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltReason {
    Threshold,
    RepetitionId,
    RepetitionSuffix,
    WindowEnd,
    Eos,
}

impl HaltReason {
    pub const ALL: [HaltReason; 5] = [
        HaltReason::Threshold,
        HaltReason::RepetitionId,
        HaltReason::RepetitionSuffix,
        HaltReason::WindowEnd,
        HaltReason::Eos,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HaltReason::Threshold => "threshold",
            HaltReason::RepetitionId => "repetition_id",
            HaltReason::RepetitionSuffix => "repetition_suffix",
            HaltReason::WindowEnd => "window_end",
            HaltReason::Eos => "eos",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeStep {
    pub forward_index: usize,
    pub proposal: LookaheadProposal,
    pub accepted_len: usize,
    pub halt_reason: HaltReason,
}

impl DecodeStep {
    pub fn accepted(&self) -> &[TokenId] {
        &self.proposal.tokens[..self.accepted_len]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub steps: Vec<DecodeStep>,
    /// Generated tokens, including a final EOS when one was produced.
    pub output_ids: Vec<TokenId>,
    /// Duration of the generation loop only.
    pub wall_time: Duration,
    /// Generation stopped because the context reached `max_seq_len`.
    pub overflow: bool,
}

impl DecodeTrace {
    pub fn n_forwards(&self) -> usize {
        self.steps.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.output_ids.len()
    }
}

fn argmax(row: ndarray::ArrayView1<f64>) -> (TokenId, f64) {
    // strict `>` keeps the lowest id on ties
    let mut best = (0, row[0]);
    for (i, &p) in row.iter().enumerate().skip(1) {
        if p > best.1 {
            best = (i as TokenId, p);
        }
    }
    best
}

/// Greedy proposal for the next `k` tokens from `context + (k - 1)` PADs.
pub fn propose_block(
    model: &CausalLM,
    context_ids: &[TokenId],
    k: usize,
    pad_id: TokenId,
) -> Result<LookaheadProposal> {
    if k == 0 || context_ids.is_empty() {
        return Err(LudError::InvalidArgument(
            "propose_block needs k >= 1 and a non-empty context".into(),
        ));
    }
    let mut input = Vec::with_capacity(context_ids.len() + k - 1);
    input.extend_from_slice(context_ids);
    input.extend(std::iter::repeat_n(pad_id, k - 1));
    let probs = model.forward(&input)?;
    let first = input.len() - k;
    let (tokens, probs) = (first..input.len()).map(|r| argmax(probs.row(r))).unzip();
    Ok(LookaheadProposal { tokens, probs })
}

/// Length of the accepted prefix of `proposal` and why acceptance stopped.
///
/// The first token is always accepted. `vocab` supplies token strings for
/// the suffix-repetition rule.
pub fn accept_span(
    proposal: &LookaheadProposal,
    beta: Beta,
    vocab: &Vocabulary,
    repetition_check: bool,
) -> (usize, HaltReason) {
    let k = proposal.len();
    if k == 0 {
        return (0, HaltReason::WindowEnd);
    }
    let (mut len, mut reason) = match beta {
        Beta::ForceAr => (
            1,
            if k == 1 {
                HaltReason::WindowEnd
            } else {
                HaltReason::Threshold
            },
        ),
        Beta::Threshold(b) => {
            let m = proposal.probs.iter().take_while(|&&p| p >= b).count();
            if m == k {
                (k, HaltReason::WindowEnd)
            } else {
                (m.max(1), HaltReason::Threshold)
            }
        }
    };
    if repetition_check {
        let t = &proposal.tokens;
        let halt = (1..len).find_map(|i| {
            if t[i] == t[i - 1] {
                return Some((i, HaltReason::RepetitionId));
            }
            match (vocab.token_str(t[i - 1]), vocab.token_str(t[i])) {
                (Ok(prev), Ok(cur)) if !cur.is_empty() && prev.ends_with(cur) => {
                    Some((i, HaltReason::RepetitionSuffix))
                }
                _ => None,
            }
        });
        if let Some(h) = halt {
            (len, reason) = h;
        }
    }
    (len, reason)
}

fn initial_context(model: &CausalLM, vocab: &Vocabulary, prompt_ids: &[TokenId]) -> Result<Vec<TokenId>> {
    let mut ctx = Vec::with_capacity(model.config().max_seq_len);
    ctx.push(vocab.bos_id());
    ctx.extend_from_slice(prompt_ids);
    if ctx.len() > model.config().max_seq_len {
        return Err(LudError::SequenceTooLong {
            len: ctx.len(),
            max: model.config().max_seq_len,
        });
    }
    Ok(ctx)
}

/// Lexical unit decoding of `prompt_ids` (BOS is prepended here).
///
/// Stops after EOS or `max_new_tokens`; an EOS inside an accepted span
/// truncates the span just after it. The window shrinks near the token
/// budget and the position limit; if the context fills up the trace is
/// returned with `overflow` set.
pub fn decode_lud(
    model: &CausalLM,
    vocab: &Vocabulary,
    prompt_ids: &[TokenId],
    config: &DecodeConfig,
) -> Result<DecodeTrace> {
    config.validate()?;
    let mut ctx = initial_context(model, vocab, prompt_ids)?;
    let max_len = model.config().max_seq_len;
    let mut trace = DecodeTrace::default();
    let start = Instant::now();
    while trace.output_ids.len() < config.max_new_tokens {
        if ctx.len() > max_len {
            trace.overflow = true;
            break;
        }
        let room = max_len + 1 - ctx.len();
        let k = config.k.min(config.max_new_tokens - trace.output_ids.len()).min(room);
        let proposal = propose_block(model, &ctx, k, vocab.pad_id())?;
        let (mut len, mut reason) = accept_span(&proposal, config.beta, vocab, config.repetition_check);
        if let Some(e) = proposal.tokens[..len].iter().position(|&t| t == vocab.eos_id()) {
            (len, reason) = (e + 1, HaltReason::Eos);
        }
        let accepted = &proposal.tokens[..len];
        ctx.extend_from_slice(accepted);
        trace.output_ids.extend_from_slice(accepted);
        trace.steps.push(DecodeStep {
            forward_index: trace.steps.len(),
            proposal,
            accepted_len: len,
            halt_reason: reason,
        });
        if reason == HaltReason::Eos {
            break;
        }
    }
    trace.wall_time = start.elapsed();
    Ok(trace)
}

/// Plain greedy decoding: one forward pass per generated token.
pub fn decode_ar(
    model: &CausalLM,
    vocab: &Vocabulary,
    prompt_ids: &[TokenId],
    max_new_tokens: usize,
) -> Result<DecodeTrace> {
    if max_new_tokens == 0 {
        return Err(LudError::InvalidArgument("max_new_tokens must be at least 1".into()));
    }
    let mut ctx = initial_context(model, vocab, prompt_ids)?;
    let mut trace = DecodeTrace::default();
    let start = Instant::now();
    while trace.output_ids.len() < max_new_tokens {
        if ctx.len() > model.config().max_seq_len {
            trace.overflow = true;
            break;
        }
        let probs = model.forward(&ctx)?;
        let (token, p) = argmax(probs.row(ctx.len() - 1));
        let reason = if token == vocab.eos_id() {
            HaltReason::Eos
        } else {
            HaltReason::WindowEnd
        };
        ctx.push(token);
        trace.output_ids.push(token);
        trace.steps.push(DecodeStep {
            forward_index: trace.steps.len(),
            proposal: LookaheadProposal {
                tokens: vec![token],
                probs: vec![p],
            },
            accepted_len: 1,
            halt_reason: reason,
        });
        if reason == HaltReason::Eos {
            break;
        }
    }
    trace.wall_time = start.elapsed();
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Trace files

/// A trace tagged with the item whose prompt produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTrace {
    pub item_id: String,
    pub trace: DecodeTrace,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum TraceRecord {
    Step {
        item_id: String,
        forward_index: usize,
        tokens: Vec<TokenId>,
        probs: Vec<f64>,
        accepted_len: usize,
        halt_reason: HaltReason,
    },
    End {
        item_id: String,
        output_ids: Vec<TokenId>,
        overflow: bool,
    },
}

/// One line per step plus one `end` line per generation. Wall times are not
/// written so that reruns produce identical files; see [`save_timings`].
pub fn save_traces(path: &Path, traces: &[NamedTrace]) -> Result<()> {
    let mut records = Vec::new();
    for nt in traces {
        for s in &nt.trace.steps {
            records.push(TraceRecord::Step {
                item_id: nt.item_id.clone(),
                forward_index: s.forward_index,
                tokens: s.proposal.tokens.clone(),
                probs: s.proposal.probs.clone(),
                accepted_len: s.accepted_len,
                halt_reason: s.halt_reason,
            });
        }
        records.push(TraceRecord::End {
            item_id: nt.item_id.clone(),
            output_ids: nt.trace.output_ids.clone(),
            overflow: nt.trace.overflow,
        });
    }
    jsonl::write(path, None::<&()>, &records)
}

pub fn load_traces(path: &Path) -> Result<Vec<NamedTrace>> {
    let mut out = Vec::new();
    let mut current: Option<NamedTrace> = None;
    for (line, text) in jsonl::read(path)? {
        match jsonl::parse::<TraceRecord>(path, line, &text)? {
            TraceRecord::Step {
                item_id,
                forward_index,
                tokens,
                probs,
                accepted_len,
                halt_reason,
            } => {
                let nt = current.get_or_insert_with(|| NamedTrace {
                    item_id: item_id.clone(),
                    trace: DecodeTrace::default(),
                });
                if nt.item_id != item_id || forward_index != nt.trace.steps.len() {
                    return Err(jsonl::malformed(path, line, "step out of sequence"));
                }
                if tokens.len() != probs.len() || accepted_len == 0 || accepted_len > tokens.len() {
                    return Err(jsonl::malformed(path, line, "inconsistent step record"));
                }
                nt.trace.steps.push(DecodeStep {
                    forward_index,
                    proposal: LookaheadProposal { tokens, probs },
                    accepted_len,
                    halt_reason,
                });
            }
            TraceRecord::End {
                item_id,
                output_ids,
                overflow,
            } => {
                let mut nt = current.take().unwrap_or_else(|| NamedTrace {
                    item_id: item_id.clone(),
                    trace: DecodeTrace::default(),
                });
                if nt.item_id != item_id {
                    return Err(jsonl::malformed(path, line, "end record for a different item"));
                }
                nt.trace.output_ids = output_ids;
                nt.trace.overflow = overflow;
                out.push(nt);
            }
        }
    }
    if current.is_some() {
        return Err(jsonl::malformed(path, usize::MAX, "trace without end record"));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub item_id: String,
    pub wall_time_secs: f64,
}

/// Per-generation loop wall times, kept apart from the deterministic trace file.
pub fn save_timings(path: &Path, traces: &[NamedTrace]) -> Result<()> {
    let timings: Vec<Timing> = traces
        .iter()
        .map(|nt| Timing {
            item_id: nt.item_id.clone(),
            wall_time_secs: nt.trace.wall_time.as_secs_f64(),
        })
        .collect();
    jsonl::write(path, None::<&()>, &timings)
}

/// Attaches wall times from a timings file to already-loaded traces, by position.
pub fn load_timings(path: &Path, traces: &mut [NamedTrace]) -> Result<()> {
    let lines = jsonl::read(path)?;
    if lines.len() != traces.len() {
        return Err(jsonl::malformed(
            path,
            lines.len() + 1,
            format!("{} timings for {} traces", lines.len(), traces.len()),
        ));
    }
    for ((line, text), nt) in lines.into_iter().zip(traces) {
        let t: Timing = jsonl::parse(path, line, &text)?;
        if t.item_id != nt.item_id {
            return Err(jsonl::malformed(
                path,
                line,
                format!("timing for {} but trace is {}", t.item_id, nt.item_id),
            ));
        }
        nt.trace.wall_time = Duration::from_secs_f64(t.wall_time_secs.max(0.0));
    }
    Ok(())
}
