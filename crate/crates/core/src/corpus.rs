//! Vocabulary, tokenization, synthetic corpora and dataset files.
//!
//! Special ids are pinned: PAD = 0, BOS = 1, EOS = 2. Regular symbols follow
//! in sorted order, so a vocabulary is a pure function of its alphabet.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LudError, Result};
use crate::{jsonl, TokenId};

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;

const SPECIAL_STRINGS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    /// One token per Unicode scalar value.
    #[default]
    Char,
    /// Maximal runs of whitespace or non-whitespace characters.
    Word,
}

impl std::str::FromStr for TokenizerMode {
    type Err = LudError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(TokenizerMode::Char),
            "word" => Ok(TokenizerMode::Word),
            other => Err(LudError::InvalidArgument(format!("unknown tokenizer mode {other:?}"))),
        }
    }
}

impl TokenizerMode {
    fn segment<'a>(&self, text: &'a str) -> Vec<&'a str> {
        match self {
            TokenizerMode::Char => text.char_indices().map(|(i, c)| &text[i..i + c.len_utf8()]).collect(),
            TokenizerMode::Word => {
                let mut out = Vec::new();
                let mut start = 0;
                let mut prev_ws: Option<bool> = None;
                for (i, c) in text.char_indices() {
                    let ws = c.is_whitespace();
                    if prev_ws.is_some_and(|p| p != ws) {
                        out.push(&text[start..i]);
                        start = i;
                    }
                    prev_ws = Some(ws);
                }
                if start < text.len() {
                    out.push(&text[start..]);
                }
                out
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    tokens: Vec<String>,
    pad_id: TokenId,
    bos_id: TokenId,
    eos_id: TokenId,
    #[serde(default)]
    mode: TokenizerMode,
}

/// Ordered token strings plus the reserved special ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    pad_id: TokenId,
    bos_id: TokenId,
    eos_id: TokenId,
    mode: TokenizerMode,
    index: BTreeMap<String, TokenId>,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = LudError;

    fn try_from(r: VocabularyRepr) -> Result<Self> {
        let n = r.tokens.len() as TokenId;
        let ids = [r.pad_id, r.bos_id, r.eos_id];
        if ids.iter().any(|&id| id >= n) || r.pad_id == r.bos_id || r.pad_id == r.eos_id || r.bos_id == r.eos_id {
            return Err(LudError::InvalidArgument(format!(
                "special ids {ids:?} must be distinct and below {n}"
            )));
        }
        let mut index = BTreeMap::new();
        for (id, tok) in r.tokens.iter().enumerate() {
            let id = id as TokenId;
            if ids.contains(&id) {
                continue;
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(LudError::InvalidArgument(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Vocabulary {
            tokens: r.tokens,
            pad_id: r.pad_id,
            bos_id: r.bos_id,
            eos_id: r.eos_id,
            mode: r.mode,
            index,
        })
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            tokens: v.tokens,
            pad_id: v.pad_id,
            bos_id: v.bos_id,
            eos_id: v.eos_id,
            mode: v.mode,
        }
    }
}

/// Builds a vocabulary covering every symbol in `texts`, with PAD/BOS/EOS at 0/1/2.
pub fn build_vocabulary<S: AsRef<str>>(texts: &[S], mode: TokenizerMode) -> Result<Vocabulary> {
    let mut symbols = BTreeSet::new();
    for t in texts {
        symbols.extend(mode.segment(t.as_ref()).into_iter().map(str::to_string));
    }
    if symbols.is_empty() {
        return Err(LudError::EmptyAlphabet);
    }
    if let Some(s) = symbols.iter().find(|s| SPECIAL_STRINGS.contains(&s.as_str())) {
        return Err(LudError::InvalidArgument(format!(
            "symbol {s:?} collides with a reserved token"
        )));
    }
    let tokens = SPECIAL_STRINGS.iter().map(|s| s.to_string()).chain(symbols).collect();
    Vocabulary::try_from(VocabularyRepr {
        tokens,
        pad_id: PAD_ID,
        bos_id: BOS_ID,
        eos_id: EOS_ID,
        mode,
    })
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_id(&self) -> TokenId {
        self.pad_id
    }

    pub fn bos_id(&self) -> TokenId {
        self.bos_id
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.pad_id || id == self.bos_id || id == self.eos_id
    }

    /// The raw string of a token, including the `<pad>`-style names of specials.
    pub fn token_str(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(LudError::UnknownTokenId(id))
    }

    pub fn id_of(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        self.mode
            .segment(text)
            .into_iter()
            .map(|s| {
                self.id_of(s)
                    .ok_or_else(|| LudError::OutOfVocabulary { symbol: s.to_string() })
            })
            .collect()
    }

    /// Concatenates token strings; special tokens render as nothing.
    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let s = self.token_str(id)?;
            if !self.is_special(id) {
                out.push_str(s);
            }
        }
        Ok(out)
    }
}

/// One (prompt, target) example. Targets always end with EOS.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedItem {
    pub item_id: String,
    pub prompt_ids: Vec<TokenId>,
    pub target_ids: Vec<TokenId>,
}

impl TokenizedItem {
    pub fn from_text(item_id: impl Into<String>, prompt: &str, target: &str, vocab: &Vocabulary) -> Result<Self> {
        let mut target_ids = vocab.tokenize(target)?;
        target_ids.push(vocab.eos_id());
        Ok(TokenizedItem {
            item_id: item_id.into(),
            prompt_ids: vocab.tokenize(prompt)?,
            target_ids,
        })
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let n = vocab.len() as TokenId;
        for &id in self.prompt_ids.iter().chain(&self.target_ids) {
            if id >= n {
                return Err(LudError::UnknownTokenId(id));
            }
            if id == vocab.pad_id() {
                return Err(LudError::Invariant(format!("item {} contains PAD", self.item_id)));
            }
        }
        if self.target_ids.last() != Some(&vocab.eos_id()) {
            return Err(LudError::Invariant(format!(
                "item {} target must be non-empty and end with EOS",
                self.item_id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyClass {
    Low,
    High,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    TemplatedCode,
    TemplatedText,
}

impl CorpusKind {
    pub fn entropy_class(self) -> EntropyClass {
        match self {
            CorpusKind::TemplatedCode => EntropyClass::Low,
            CorpusKind::TemplatedText => EntropyClass::High,
        }
    }
}

impl std::str::FromStr for CorpusKind {
    type Err = LudError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "templated_code" | "code" => Ok(CorpusKind::TemplatedCode),
            "templated_text" | "text" => Ok(CorpusKind::TemplatedText),
            other => Err(LudError::InvalidArgument(format!("unknown corpus kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub vocabulary: Vocabulary,
    pub items: Vec<TokenizedItem>,
    pub entropy_class: EntropyClass,
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        self.items.iter().try_for_each(|it| it.validate(&self.vocabulary))
    }

    /// Entropy in bits of the unigram distribution over all target tokens,
    /// i.e. the mean surprisal per target token.
    pub fn unigram_entropy(&self) -> f64 {
        let mut counts: BTreeMap<TokenId, usize> = BTreeMap::new();
        let mut total = 0usize;
        for id in self.items.iter().flat_map(|it| &it.target_ids) {
            *counts.entry(*id).or_default() += 1;
            total += 1;
        }
        if total == 0 {
            return 0.0;
        }
        counts
            .values()
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.log2()
            })
            .sum()
    }
}

// ---------------------------------------------------------------------------
// Synthetic corpora

const CODE_VARS: &[&str] = &["a", "b", "c", "m", "n", "p", "x", "y"];
const CODE_NAMES: &[&str] = &["total", "count", "items", "values", "result", "data", "cache", "queue"];
const CODE_CLASSES: &[&str] = &["Stack", "Queue", "Node", "Tree", "Graph", "Point", "Timer", "Parser"];
const CODE_OPS: &[(&str, &str)] = &[("add", "+"), ("sub", "-"), ("mul", "*")];

const TEXT_NAMES: &[&str] = &[
    "Ava", "Bruno", "Chidi", "Dmitri", "Esme", "Farah", "Gustav", "Hiro", "Ingrid", "Jamal", "Kenji", "Lucia", "Mateo",
    "Nadia", "Oskar", "Priya", "Quinn", "Rafael", "Sofia", "Tariq", "Ulla", "Vikram", "Wren", "Yusuf",
];
const TEXT_ADJS: &[&str] = &[
    "amber", "brisk", "clever", "dusty", "eager", "fuzzy", "gloomy", "hazy", "icy", "jolly", "keen", "lavish", "mossy",
    "nimble", "odd", "plucky", "quiet", "rusty", "shy", "tidy", "vivid", "wary", "young", "zesty",
];
const TEXT_NOUNS: &[&str] = &[
    "badger", "canoe", "dragon", "falcon", "goblet", "harbor", "jacket", "kettle", "lantern", "mango", "nectar",
    "orchid", "parcel", "quartz", "raven", "saddle", "tulip", "umbrella", "violin", "walrus", "yak", "zither",
    "bishop", "cobweb",
];
const TEXT_VERBS: &[&str] = &[
    "admired", "borrowed", "chased", "dropped", "found", "grabbed", "hid", "juggled", "kicked", "lost", "mended",
    "noticed", "painted", "queried", "repaired", "sketched", "traded", "unpacked", "visited", "washed", "yanked",
    "zipped", "fixed", "bought",
];
const TEXT_PLACES: &[&str] = &[
    "Oslo", "Quito", "Hanoi", "Lagos", "Perth", "Dhaka", "Izmir", "Kyoto", "Turin", "Ghent", "Split", "Bergen",
];
const TEXT_MONTHS: &[&str] = &[
    "Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec",
];
const ID_CHARS: &[u8] = b"ABCDEFGHJKLMNPQRSTUVWXYZ0123456789";

fn alphabet_texts(kind: CorpusKind) -> Vec<String> {
    let mut texts: Vec<String> = Vec::new();
    match kind {
        CorpusKind::TemplatedCode => {
            texts.extend(
                CODE_VARS
                    .iter()
                    .chain(CODE_NAMES)
                    .chain(CODE_CLASSES)
                    .map(|s| s.to_string()),
            );
            texts.extend(CODE_OPS.iter().flat_map(|(a, b)| [a.to_string(), b.to_string()]));
            texts.push("0123456789 ".into());
            for t in 0..CODE_TEMPLATES {
                let (p, c) = code_template(t, &CodeSlots::placeholder());
                texts.push(p);
                texts.push(c);
            }
        }
        CorpusKind::TemplatedText => {
            for list in [TEXT_NAMES, TEXT_ADJS, TEXT_NOUNS, TEXT_VERBS, TEXT_PLACES, TEXT_MONTHS] {
                texts.extend(list.iter().map(|s| s.to_string()));
            }
            texts.push(String::from_utf8(ID_CHARS.to_vec()).expect("ascii"));
            texts.push("0123456789 ".into());
            for t in 0..TEXT_TEMPLATES {
                let (p, c) = text_template(t, &TextSlots::placeholder());
                texts.push(p);
                texts.push(c);
            }
        }
    }
    texts
}

const CODE_TEMPLATES: usize = 8;
const TEXT_TEMPLATES: usize = 4;

struct CodeSlots<'a> {
    a: &'a str,
    b: &'a str,
    name: &'a str,
    class: &'a str,
    op: (&'a str, &'a str),
    n: u32,
}

impl CodeSlots<'static> {
    fn placeholder() -> Self {
        CodeSlots {
            a: "a",
            b: "b",
            name: "data",
            class: "Node",
            op: CODE_OPS[0],
            n: 1,
        }
    }

    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let a = *CODE_VARS.choose(rng).expect("non-empty");
        let b = loop {
            let b = *CODE_VARS.choose(rng).expect("non-empty");
            if b != a {
                break b;
            }
        };
        CodeSlots {
            a,
            b,
            name: CODE_NAMES.choose(rng).expect("non-empty"),
            class: CODE_CLASSES.choose(rng).expect("non-empty"),
            op: *CODE_OPS.choose(rng).expect("non-empty"),
            n: rng.random_range(2..10),
        }
    }
}

// Prompts name the task and some slots; loop variables, parameter names and
// bounds are free choices the model cannot infer from the prompt.
fn code_template(t: usize, s: &CodeSlots) -> (String, String) {
    let CodeSlots {
        a,
        b,
        name,
        class,
        op: (op, sym),
        n,
    } = *s;
    match t {
        0 => (
            op.to_string(),
            format!("def {op}({a}, {b}):\n    return {a} {sym} {b}\n"),
        ),
        1 => ("loop".to_string(), format!("for {a} in range({n}):\n    print({a})\n")),
        2 => (
            "max".to_string(),
            format!("def max_of({a}, {b}):\n    if {a} > {b}:\n        return {a}\n    return {b}\n"),
        ),
        3 => (
            format!("fill {name}"),
            format!("{name} = []\nfor {a} in range({n}):\n    {name}.append({a})\n"),
        ),
        4 => (
            format!("class {class}"),
            format!("class {class}:\n    def __init__(self):\n        self.{name} = []\n"),
        ),
        5 => (
            "sum".to_string(),
            format!(
                "def sum_all({name}):\n    total = 0\n    for {a} in {name}:\n        total += {a}\n    return total\n"
            ),
        ),
        6 => (
            "even".to_string(),
            format!("def is_even({a}):\n    return {a} % 2 == 0\n"),
        ),
        _ => (
            format!("read {name}"),
            format!("with open(\"{name}.txt\") as f:\n    {name} = f.read()\n"),
        ),
    }
}

struct TextSlots {
    name: &'static str,
    adj: &'static str,
    noun: &'static str,
    verb: &'static str,
    place: &'static str,
    month: &'static str,
    day: u32,
    code: String,
}

impl TextSlots {
    fn placeholder() -> Self {
        TextSlots {
            name: TEXT_NAMES[0],
            adj: TEXT_ADJS[0],
            noun: TEXT_NOUNS[0],
            verb: TEXT_VERBS[0],
            place: TEXT_PLACES[0],
            month: TEXT_MONTHS[0],
            day: 1,
            code: "A1".into(),
        }
    }

    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let code = (0..4)
            .map(|_| *ID_CHARS.choose(rng).expect("non-empty") as char)
            .collect();
        TextSlots {
            name: TEXT_NAMES.choose(rng).expect("non-empty"),
            adj: TEXT_ADJS.choose(rng).expect("non-empty"),
            noun: TEXT_NOUNS.choose(rng).expect("non-empty"),
            verb: TEXT_VERBS.choose(rng).expect("non-empty"),
            place: TEXT_PLACES.choose(rng).expect("non-empty"),
            month: TEXT_MONTHS.choose(rng).expect("non-empty"),
            day: rng.random_range(1..29),
            code,
        }
    }
}

// Prompts name only the subject; the remaining slots are unpredictable from context.
fn text_template(t: usize, s: &TextSlots) -> (String, String) {
    let TextSlots {
        name,
        adj,
        noun,
        verb,
        place,
        month,
        day,
        ..
    } = *s;
    let code = &s.code;
    match t {
        0 => (
            format!("about {name}"),
            format!("{name} {verb} a {adj} {noun} in {place} on {month} {day}.\n"),
        ),
        1 => (
            format!("order {name}"),
            format!("Order {code} for {name}: one {adj} {noun}, shipped {month} {day} to {place}.\n"),
        ),
        2 => (
            format!("note {noun}"),
            format!("The {adj} {noun} was {verb} by {name} near {place}.\n"),
        ),
        _ => (
            format!("log {place}"),
            format!("{month} {day}: {name} {verb} {code} in {place}; mood {adj}.\n"),
        ),
    }
}

/// Deterministic synthetic corpus: a pure function of `(kind, n_items, seed)`.
///
/// `templated_code` items are small Python snippets: long fixed substrings
/// around a few free identifier and bound choices; `templated_text`
/// items fill most slots at random, so their targets carry more entropy.
pub fn generate_synthetic_corpus(kind: CorpusKind, n_items: usize, seed: u64, mode: TokenizerMode) -> Result<Corpus> {
    if n_items == 0 {
        return Err(LudError::InvalidArgument("n_items must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<(String, String)> = (0..n_items)
        .map(|_| match kind {
            CorpusKind::TemplatedCode => {
                let t = rng.random_range(0..CODE_TEMPLATES);
                code_template(t, &CodeSlots::sample(&mut rng))
            }
            CorpusKind::TemplatedText => {
                let t = rng.random_range(0..TEXT_TEMPLATES);
                text_template(t, &TextSlots::sample(&mut rng))
            }
        })
        .collect();
    // Char-mode vocabularies depend only on the grammar; word mode also needs
    // the glued-together runs that only appear in generated strings.
    let mut texts = alphabet_texts(kind);
    if mode == TokenizerMode::Word {
        texts.extend(pairs.iter().flat_map(|(p, t)| [p.clone(), t.clone()]));
    }
    let vocabulary = build_vocabulary(&texts, mode)?;
    let items = pairs
        .iter()
        .enumerate()
        .map(|(i, (prompt, target))| TokenizedItem::from_text(format!("{i:06}"), prompt, target, &vocabulary))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        vocabulary,
        items,
        entropy_class: kind.entropy_class(),
    })
}

// ---------------------------------------------------------------------------
// Dataset files

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    vocabulary: Vocabulary,
    entropy_class: EntropyClass,
    n_items: usize,
}

/// Writes a header record (vocabulary, entropy class, item count) followed by one item per line.
pub fn save_dataset(corpus: &Corpus, path: &Path) -> Result<()> {
    let header = DatasetHeader {
        vocabulary: corpus.vocabulary.clone(),
        entropy_class: corpus.entropy_class,
        n_items: corpus.items.len(),
    };
    jsonl::write(path, Some(&header), &corpus.items)
}

pub fn load_dataset(path: &Path) -> Result<Corpus> {
    let lines = jsonl::read(path)?;
    let mut lines = lines.into_iter();
    let (hline, htext) = lines
        .next()
        .ok_or_else(|| jsonl::malformed(path, 1, "missing header record"))?;
    let header: DatasetHeader = jsonl::parse(path, hline, &htext)?;
    let mut items = Vec::with_capacity(header.n_items);
    let mut last_line = hline;
    for (line, text) in lines {
        let item: TokenizedItem = jsonl::parse(path, line, &text)?;
        item.validate(&header.vocabulary)
            .map_err(|e| jsonl::malformed(path, line, e.to_string()))?;
        items.push(item);
        last_line = line;
    }
    if items.len() != header.n_items {
        return Err(jsonl::malformed(
            path,
            last_line + 1,
            format!("expected {} items, found {}", header.n_items, items.len()),
        ));
    }
    Ok(Corpus {
        vocabulary: header.vocabulary,
        items,
        entropy_class: header.entropy_class,
    })
}
