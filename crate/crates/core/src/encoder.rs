//! Tokenisation, vocabulary, and a small BERT-shaped transformer encoder.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{uniform, Activation, Bound, ParamSet};
use crate::tape::{self, Tape, Var};
use crate::tensor::Tensor;
use crate::Mode;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
const RESERVED: [&str; 3] = ["[PAD]", "[UNK]", "[CLS]"];

const LN_EPS: f64 = 1e-12;
/// Position embeddings are drawn at this fraction of the token embedding range.
pub const POS_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(extra: impl IntoIterator<Item = String>) -> Self {
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(extra)
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    /// Every token seen at least `min_count` times; ids by descending
    /// frequency, then lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for tok in basic_tokenize(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(&t.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_tokens(entries.into_iter().map(|(t, _)| t)))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// One token per line, reserved entries omitted: line `i` holds id `i + 3`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let vocab = Self::from_tokens(text.lines().map(str::to_string));
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::Data(format!("{}: duplicate vocabulary entries", path.display())));
        }
        Ok(vocab)
    }
}

/// Lowercases and splits on whitespace; punctuation characters become their
/// own tokens.
pub fn basic_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && ch != '_') {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    /// Token ids, CLS first; anything past `len` is PAD.
    pub ids: Vec<usize>,
    /// Real tokens including CLS.
    pub len: usize,
    /// The text produced no tokens and was replaced by `[CLS, UNK]`.
    pub degenerate: bool,
}

impl TokenSeq {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.first() != Some(&CLS) || ids.len() < 2 {
            return Err(Error::Data("token sequence must start with CLS and hold a token".into()));
        }
        let len = ids.iter().rposition(|&i| i != PAD).map_or(0, |p| p + 1);
        Ok(Self {
            ids,
            len,
            degenerate: false,
        })
    }

    /// Copy padded with PAD up to `total` positions.
    pub fn padded(&self, total: usize) -> Self {
        let mut ids = self.ids.clone();
        ids.resize(total.max(ids.len()), PAD);
        Self { ids, ..self.clone() }
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary, max_seq_len: usize) -> TokenSeq {
    let toks = basic_tokenize(text);
    if toks.is_empty() {
        return TokenSeq {
            ids: vec![CLS, UNK],
            len: 2,
            degenerate: true,
        };
    }
    let keep = max_seq_len.saturating_sub(1).max(1);
    let ids: Vec<usize> = std::iter::once(CLS)
        .chain(toks.iter().take(keep).map(|t| vocab.id(t)))
        .collect();
    TokenSeq {
        len: ids.len(),
        ids,
        degenerate: false,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be positive")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must leave room for CLS and one token".into()));
        }
        Ok(())
    }

    pub fn init_params<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) -> Result<()> {
        self.validate()?;
        let d = self.hidden;
        let emb_bound = (3.0 / d as f64).sqrt();
        params.insert("enc.tok_emb", uniform(&[self.vocab_size, d], emb_bound, rng))?;
        // positions start small so token identity survives the first layers
        params.insert("enc.pos_emb", uniform(&[self.max_seq_len, d], POS_INIT_SCALE * emb_bound, rng))?;
        params.add_layer_norm("enc.emb_ln", d)?;
        for l in 0..self.layers {
            let p = format!("enc.l{l}");
            for proj in ["q", "k", "v", "o"] {
                params.add_linear(&format!("{p}.attn.{proj}"), d, d, rng)?;
            }
            params.add_layer_norm(&format!("{p}.attn_ln"), d)?;
            params.add_linear(&format!("{p}.ff1"), d, 4 * d, rng)?;
            params.add_linear(&format!("{p}.ff2"), 4 * d, d, rng)?;
            params.add_layer_norm(&format!("{p}.ff_ln"), d)?;
        }
        Ok(())
    }
}

/// Token-level hidden states of one text, CLS row removed.
#[derive(Clone, Copy, Debug)]
pub struct EncodedSeq<'t> {
    pub hidden: Var<'t>,
}

impl<'t> EncodedSeq<'t> {
    pub fn len(&self) -> usize {
        self.hidden.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

fn layer_norm<'t>(x: Var<'t>, p: &Bound<'t>, prefix: &str) -> Result<Var<'t>> {
    x.layer_norm(
        p.get(&format!("{prefix}.gamma"))?,
        p.get(&format!("{prefix}.beta"))?,
        LN_EPS,
    )
}

/// Encodes one sequence. Attention never looks at PAD keys, so real-token
/// outputs do not depend on how much padding follows.
pub fn encode<'t>(
    seq: &TokenSeq,
    params: &Bound<'t>,
    cfg: &EncoderConfig,
    mode: &mut Mode<'_>,
) -> Result<EncodedSeq<'t>> {
    if let Some(&bad) = seq.ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Data(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let total = seq.ids.len();
    if total > cfg.max_seq_len {
        return Err(Error::Data(format!(
            "sequence of {total} positions exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    let valid = seq.len;
    let d = cfg.hidden;
    let dh = d / cfg.heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let tok = tape::gather(params.get("enc.tok_emb")?, &seq.ids)?;
    let pos = params.get("enc.pos_emb")?.slice_rows(0, total)?;
    let mut x = layer_norm(tok.add(pos)?, params, "enc.emb_ln")?;
    x = mode.dropout(x)?;

    for l in 0..cfg.layers {
        let p = format!("enc.l{l}");
        let q = params.linear(&format!("{p}.attn.q"))?.forward(x, Activation::Identity)?;
        let k = params.linear(&format!("{p}.attn.k"))?.forward(x, Activation::Identity)?;
        let v = params.linear(&format!("{p}.attn.v"))?.forward(x, Activation::Identity)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?;
            let vh = v.slice_cols(h * dh, dh)?;
            let weights = qh.matmul_bt(kh)?.scale(inv_sqrt).masked_softmax_rows(valid)?;
            heads.push(weights.matmul(vh)?);
        }
        let attn = tape::concat_cols(&heads)?;
        let attn = params.linear(&format!("{p}.attn.o"))?.forward(attn, Activation::Identity)?;
        let attn = mode.dropout(attn)?;
        x = layer_norm(x.add(attn)?, params, &format!("{p}.attn_ln"))?;

        let ff = params.linear(&format!("{p}.ff1"))?.forward(x, Activation::Gelu)?;
        let ff = params.linear(&format!("{p}.ff2"))?.forward(ff, Activation::Identity)?;
        let ff = mode.dropout(ff)?;
        x = layer_norm(x.add(ff)?, params, &format!("{p}.ff_ln"))?;
    }
    Ok(EncodedSeq {
        hidden: x.slice_rows(1, valid - 1)?,
    })
}

/// Encodes a batch of sequences onto `tape` and returns plain tensors. Used
/// where encodings are computed once and reused across many forwards.
pub fn encode_values(
    seqs: &[&TokenSeq],
    params: &ParamSet,
    cfg: &EncoderConfig,
) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    seqs.iter()
        .map(|s| Ok(encode(s, &bound, cfg, &mut Mode::Eval)?.hidden.value()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            max_seq_len: 16,
            vocab_size,
        }
    }

    #[test]
    fn vocab_from_small_corpus() {
        let v = Vocabulary::build(&["a b", "a"], 1).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!((v.id("[PAD]"), v.id("[UNK]"), v.id("[CLS]")), (0, 1, 2));
        assert_eq!((v.id("a"), v.id("b")), (3, 4));
        assert_eq!(v.id("zzz"), UNK);
    }

    #[test]
    fn vocab_of_empty_text_is_reserved_only() {
        let v = Vocabulary::build(&[""], 1).unwrap();
        assert_eq!(v.len(), 3);
        let empty: [&str; 0] = [];
        assert!(matches!(Vocabulary::build(&empty, 1), Err(Error::Data(_))));
    }

    #[test]
    fn vocab_is_deterministic_and_ordered() {
        let corpus = ["c b a", "b a", "a", "d d"];
        let v1 = Vocabulary::build(&corpus, 1).unwrap();
        let v2 = Vocabulary::build(&corpus, 1).unwrap();
        assert_eq!(v1, v2);
        // a:3, b:2, d:2, c:1 → ties on 2 ordered lexicographically
        let order: Vec<_> = (3..7).map(|i| v1.token(i).unwrap()).collect();
        assert_eq!(order, ["a", "b", "d", "c"]);
        let v3 = Vocabulary::build(&corpus, 2).unwrap();
        assert_eq!(v3.len(), 6);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocabulary::build(&["x y z", "y"], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next(), Some("y"));
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocabulary::build(&["a b", "a"], 1).unwrap();
        let s = tokenize("A b", &v, 32);
        assert_eq!(s.ids, vec![CLS, 3, 4]);
        assert_eq!(s.len, 3);
        let s = tokenize("zzz", &v, 32);
        assert_eq!(s.ids, vec![CLS, UNK]);
        assert!(!s.degenerate);
        let s = tokenize("  ", &v, 32);
        assert_eq!(s.ids, vec![CLS, UNK]);
        assert!(s.degenerate);
        let long = vec!["a"; 10_000].join(" ");
        assert_eq!(tokenize(&long, &v, 32).ids.len(), 32);
    }

    #[test]
    fn punctuation_splits() {
        assert_eq!(basic_tokenize("Hello, World!"), ["hello", ",", "world", "!"]);
    }

    fn setup() -> (ParamSet, EncoderConfig) {
        let cfg = small_cfg(12);
        let mut ps = ParamSet::new();
        cfg.init_params(&mut ps, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        (ps, cfg)
    }

    #[test]
    fn encode_shape_and_determinism() {
        let (ps, cfg) = setup();
        let seq = TokenSeq::new(vec![CLS, 3, 4, 5, 6]).unwrap();
        let a = encode_values(&[&seq, &seq], &ps, &cfg).unwrap();
        assert_eq!(a[0].shape(), &[4, 8]);
        assert_eq!(a[0], a[1]);
    }

    #[test]
    fn padding_does_not_change_real_rows() {
        let (ps, cfg) = setup();
        let seq = TokenSeq::new(vec![CLS, 3, 9, 5]).unwrap();
        let padded = seq.padded(11);
        let out = encode_values(&[&seq, &padded], &ps, &cfg).unwrap();
        assert_eq!(out[1].shape(), out[0].shape());
        assert!(out[0].max_abs_diff(&out[1]) <= 1e-9);
    }

    #[test]
    fn position_sensitive() {
        let (ps, cfg) = setup();
        let a = TokenSeq::new(vec![CLS, 3, 4, 7, 8]).unwrap();
        let b = TokenSeq::new(vec![CLS, 4, 3, 7, 8]).unwrap();
        let out = encode_values(&[&a, &b], &ps, &cfg).unwrap();
        assert!(out[0].max_abs_diff(&out[1]) > 1e-6);
    }

    #[test]
    fn out_of_vocab_id_is_data_error() {
        let (ps, cfg) = setup();
        let seq = TokenSeq::new(vec![CLS, 40]).unwrap();
        assert!(matches!(encode_values(&[&seq], &ps, &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg(10);
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        cfg.heads = 2;
        cfg.layers = 0;
        assert!(cfg.validate().is_err());
    }
}
