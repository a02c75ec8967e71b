//! Corpus ingestion, character vocabulary, contiguous K-fold splits and
//! deterministic batch sampling.
//!
//! The corpus is one text stream; folds are contiguous spans of the token
//! array (shuffling character positions would destroy the sequences the
//! model is supposed to learn). Fold i holds out the i-th span for
//! validation and trains on the complement, with sampled windows never
//! straddling the excised region.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::sync::Arc;

// ---- corpus -----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Corpus {
    pub text: String,
}

impl Corpus {
    pub fn char_count(&self) -> usize {
        self.text.chars().count()
    }

    pub fn line_count(&self) -> usize {
        self.text.lines().count()
    }
}

/// Read a UTF-8 text corpus fully into memory.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.is_empty() {
        return Err(Error::Corpus(format!(
            "{} is empty — nothing to train on",
            path.display()
        )));
    }
    Ok(Corpus { text })
}

// ---- vocabulary ---------------------------------------------------------------

/// Character vocabulary sorted by code point, so ids are stable across runs
/// and platforms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
}

impl CharVocab {
    pub fn from_text(text: &str) -> Result<Self> {
        let set: std::collections::BTreeSet<char> = text.chars().collect();
        if set.is_empty() {
            return Err(Error::Corpus(
                "cannot build a vocabulary from empty text".into(),
            ));
        }
        Ok(CharVocab {
            chars: set.into_iter().collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.chars.len()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id_of(&self, ch: char) -> Option<u32> {
        self.chars.binary_search(&ch).ok().map(|i| i as u32)
    }

    pub fn char_of(&self, id: u32) -> Option<char> {
        self.chars.get(id as usize).copied()
    }

    /// Map text to token ids; unknown characters name themselves and their
    /// character position.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(text.len());
        for (position, ch) in text.chars().enumerate() {
            match self.id_of(ch) {
                Some(id) => out.push(id),
                None => return Err(Error::Encoding { ch, position }),
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            match self.char_of(id) {
                Some(ch) => out.push(ch),
                None => {
                    return Err(Error::Decoding {
                        id,
                        vocab: self.size(),
                    })
                }
            }
        }
        Ok(out)
    }
}

/// Encode to the compact on-disk token width. Fails for vocabularies beyond
/// 16 bits (cannot happen for character-level corpora of sane size).
pub fn encode_to_u16(vocab: &CharVocab, text: &str) -> Result<Vec<u16>> {
    if vocab.size() > u16::MAX as usize + 1 {
        return Err(Error::Config(format!(
            "vocabulary of {} symbols does not fit in u16 tokens",
            vocab.size()
        )));
    }
    Ok(vocab
        .encode(text)?
        .into_iter()
        .map(|id| id as u16)
        .collect())
}

// ---- folds ---------------------------------------------------------------------

/// One cell of a contiguous K-fold split: val span = the fold_index-th span,
/// train spans = everything else.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub fold_index: usize,
    pub n_tokens: usize,
    pub val_start: usize,
    pub val_end: usize,
}

impl FoldPlan {
    pub fn val_span(&self) -> (usize, usize) {
        (self.val_start, self.val_end)
    }

    pub fn val_len(&self) -> usize {
        self.val_end - self.val_start
    }

    /// The non-empty train spans (at most two: before and after the val span).
    pub fn train_spans(&self) -> Vec<(usize, usize)> {
        let mut spans = Vec::with_capacity(2);
        if self.val_start > 0 {
            spans.push((0, self.val_start));
        }
        if self.val_end < self.n_tokens {
            spans.push((self.val_end, self.n_tokens));
        }
        spans
    }

    /// Start offsets of non-overlapping validation windows of length
    /// `context_len + 1` (inputs plus shifted targets), tiled at `stride`.
    pub fn tiled_val_offsets(&self, context_len: usize, stride: usize) -> Vec<usize> {
        let mut offsets = Vec::new();
        if stride == 0 {
            return offsets;
        }
        let mut s = self.val_start;
        while s + context_len < self.val_end {
            offsets.push(s);
            s += stride;
        }
        offsets
    }
}

/// Split `[0, n_tokens)` into `k` contiguous spans whose lengths differ by
/// at most one; the remainder goes to the lowest-indexed folds.
pub fn make_folds(n_tokens: usize, k: usize) -> Result<Vec<FoldPlan>> {
    if k == 0 {
        return Err(Error::Config("fold count k must be positive".into()));
    }
    if n_tokens < k {
        return Err(Error::Config(format!(
            "cannot split {n_tokens} tokens into {k} folds"
        )));
    }
    let base = n_tokens / k;
    let rem = n_tokens % k;
    let mut plans = Vec::with_capacity(k);
    let mut start = 0usize;
    for i in 0..k {
        let len = base + usize::from(i < rem);
        plans.push(FoldPlan {
            k,
            fold_index: i,
            n_tokens,
            val_start: start,
            val_end: start + len,
        });
        start += len;
    }
    debug_assert_eq!(start, n_tokens);
    Ok(plans)
}

// ---- batch sampling ------------------------------------------------------------

/// Copy one training window: inputs `[offset, offset+t)`, targets shifted by
/// one position.
pub fn window_at(
    tokens: &[u16],
    offset: usize,
    t: usize,
    inputs: &mut Vec<u32>,
    targets: &mut Vec<u32>,
) {
    for j in 0..t {
        inputs.push(tokens[offset + j] as u32);
        targets.push(tokens[offset + j + 1] as u32);
    }
}

/// Uniform sampler over every valid window offset in the train spans of one
/// fold. Deterministic given its seed.
#[derive(Debug)]
pub struct BatchSampler {
    tokens: Arc<Vec<u16>>,
    /// (span_start, offset_count) for each usable train span
    spans: Vec<(usize, usize)>,
    total_offsets: usize,
    batch_size: usize,
    context_len: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(
        tokens: Arc<Vec<u16>>,
        fold: &FoldPlan,
        batch_size: usize,
        context_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if fold.n_tokens != tokens.len() {
            return Err(Error::Config(format!(
                "fold plan covers {} tokens but the stream has {}",
                fold.n_tokens,
                tokens.len()
            )));
        }
        if batch_size == 0 || context_len == 0 {
            return Err(Error::Config(
                "batch_size and context_len must be positive".into(),
            ));
        }
        // a window needs context_len + 1 tokens; spans shorter than that are skipped
        let mut spans = Vec::new();
        let mut total = 0usize;
        for (start, end) in fold.train_spans() {
            let len = end - start;
            if len > context_len {
                let count = len - context_len;
                spans.push((start, count));
                total += count;
            }
        }
        if total == 0 {
            return Err(Error::Config(format!(
                "no valid training offsets: every train span of fold {} is shorter than context_len+1 = {}",
                fold.fold_index,
                context_len + 1
            )));
        }
        Ok(BatchSampler {
            tokens,
            spans,
            total_offsets: total,
            batch_size,
            context_len,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn total_offsets(&self) -> usize {
        self.total_offsets
    }

    /// Map a flat index in `[0, total_offsets)` to an absolute token offset.
    fn offset_for(&self, mut idx: usize) -> usize {
        for &(start, count) in &self.spans {
            if idx < count {
                return start + idx;
            }
            idx -= count;
        }
        unreachable!("index beyond total_offsets");
    }

    /// Draw one batch: `(inputs, targets)`, each `batch_size * context_len`.
    pub fn sample(&mut self) -> (Vec<u32>, Vec<u32>) {
        let t = self.context_len;
        let mut inputs = Vec::with_capacity(self.batch_size * t);
        let mut targets = Vec::with_capacity(self.batch_size * t);
        for _ in 0..self.batch_size {
            let idx = self.rng.gen_range(0..self.total_offsets);
            let offset = self.offset_for(idx);
            window_at(&self.tokens, offset, t, &mut inputs, &mut targets);
        }
        (inputs, targets)
    }

    /// Absolute token offsets this sampler could ever emit (test support).
    pub fn all_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total_offsets);
        for &(start, count) in &self.spans {
            out.extend(start..start + count);
        }
        out
    }
}

// ---- token cache ------------------------------------------------------------------

const TOKEN_CACHE_MAGIC: &[u8; 8] = b"LPATTNTK";
const TOKEN_CACHE_VERSION: u32 = 1;

/// Persist tokens as a little-endian u16 array behind an 8-byte magic and a
/// version word.
pub fn save_token_cache(path: &Path, tokens: &[u16]) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + tokens.len() * 2);
    buf.extend_from_slice(TOKEN_CACHE_MAGIC);
    buf.extend_from_slice(&TOKEN_CACHE_VERSION.to_le_bytes());
    for &t in tokens {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_token_cache(path: &Path) -> Result<Vec<u16>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() < 12 || &raw[..8] != TOKEN_CACHE_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a token cache (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes([raw[8], raw[9], raw[10], raw[11]]);
    if version != TOKEN_CACHE_VERSION {
        return Err(Error::Checkpoint(format!(
            "token cache version {version} unsupported"
        )));
    }
    let payload = &raw[12..];
    if payload.len() % 2 != 0 {
        return Err(Error::Checkpoint(
            "token cache payload has odd length".into(),
        ));
    }
    Ok(payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus_path() -> std::path::PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/tinyshakespeare.txt")
    }

    #[test]
    fn hello_vocab_is_sorted_and_small() {
        let v = CharVocab::from_text("hello\n").unwrap();
        assert_eq!(v.size(), 5);
        assert_eq!(v.chars(), &['\n', 'e', 'h', 'l', 'o']);
    }

    #[test]
    fn encode_simple_string() {
        let v = CharVocab::from_text("ab").unwrap();
        assert_eq!(v.encode("aba").unwrap(), vec![0, 1, 0]);
        assert_eq!(v.decode(&[0, 1, 0]).unwrap(), "aba");
    }

    #[test]
    fn unknown_char_error_names_char_and_position() {
        let v = CharVocab::from_text("xy").unwrap();
        let err = v.encode("xyz").unwrap_err();
        match err {
            Error::Encoding { ch, position } => {
                assert_eq!(ch, 'z');
                assert_eq!(position, 2);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn decode_rejects_out_of_range_ids() {
        let v = CharVocab::from_text("ab").unwrap();
        assert!(v.decode(&[2]).is_err());
    }

    #[test]
    fn corpus_roundtrip_identity() {
        let text = "First Citizen:\nBefore we proceed any further, hear me speak.\n";
        let v = CharVocab::from_text(text).unwrap();
        let ids = v.encode(text).unwrap();
        assert_eq!(v.decode(&ids).unwrap(), text);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.txt");
        std::fs::write(&p, "").unwrap();
        let err = load_corpus(&p).unwrap_err();
        assert!(matches!(err, Error::Corpus(_)));
        assert!(load_corpus(&dir.path().join("missing.txt")).is_err());
    }

    #[test]
    fn tiny_shakespeare_has_the_expected_shape() {
        let corpus = load_corpus(&corpus_path()).unwrap();
        assert_eq!(corpus.char_count(), 1_115_394);
        assert_eq!(corpus.line_count(), 40_000);
        let vocab = CharVocab::from_text(&corpus.text).unwrap();
        assert_eq!(vocab.size(), 65, "Tiny Shakespeare vocabulary");
        // round-trip over the real corpus
        let ids = encode_to_u16(&vocab, &corpus.text).unwrap();
        assert_eq!(ids.len(), corpus.char_count());
        let back: Vec<u32> = ids.iter().map(|&i| i as u32).collect();
        assert_eq!(vocab.decode(&back).unwrap(), corpus.text);
    }

    #[test]
    fn folds_partition_evenly_when_divisible() {
        let folds = make_folds(10, 10).unwrap();
        assert_eq!(folds.len(), 10);
        for (i, f) in folds.iter().enumerate() {
            assert_eq!(f.val_len(), 1);
            assert_eq!(f.val_start, i);
        }
    }

    #[test]
    fn fold_remainder_goes_to_earliest_folds() {
        let folds = make_folds(10, 3).unwrap();
        let lens: Vec<usize> = folds.iter().map(|f| f.val_len()).collect();
        assert_eq!(lens, vec![4, 3, 3]);
        assert_eq!(folds[0].val_span(), (0, 4));
        assert_eq!(folds[1].val_span(), (4, 7));
        assert_eq!(folds[2].val_span(), (7, 10));
    }

    #[test]
    fn folds_cover_stream_exactly_for_many_sizes() {
        for (n, k) in [(10, 10), (11, 3), (1000, 7), (1_115_394, 10), (65, 64)] {
            let folds = make_folds(n, k).unwrap();
            let total: usize = folds.iter().map(|f| f.val_len()).sum();
            assert_eq!(total, n, "n={n} k={k}");
            for w in folds.windows(2) {
                assert_eq!(w[0].val_end, w[1].val_start, "contiguous");
            }
            assert_eq!(folds[0].val_start, 0);
            assert_eq!(folds[k - 1].val_end, n);
            let (min, max) = folds
                .iter()
                .map(|f| f.val_len())
                .fold((usize::MAX, 0), |(lo, hi), l| (lo.min(l), hi.max(l)));
            assert!(max - min <= 1, "lengths differ by at most one");
        }
        assert!(make_folds(5, 6).is_err());
        assert!(make_folds(5, 0).is_err());
    }

    #[test]
    fn train_spans_complement_val_span() {
        let folds = make_folds(100, 4).unwrap();
        assert_eq!(folds[0].train_spans(), vec![(25, 100)]);
        assert_eq!(folds[3].train_spans(), vec![(0, 75)]);
        assert_eq!(folds[1].train_spans(), vec![(0, 25), (50, 100)]);
    }

    #[test]
    fn window_extraction_shifts_targets_by_one() {
        let tokens: Vec<u16> = (0..10).collect();
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        window_at(&tokens, 2, 3, &mut inputs, &mut targets);
        assert_eq!(inputs, vec![2, 3, 4]);
        assert_eq!(targets, vec![3, 4, 5]);
    }

    #[test]
    fn sampler_is_deterministic_per_seed() {
        let tokens: Arc<Vec<u16>> = Arc::new((0..500u16).collect());
        let fold = &make_folds(500, 5).unwrap()[2];
        let draw = |seed: u64| {
            let mut s = BatchSampler::new(tokens.clone(), fold, 4, 8, seed).unwrap();
            (0..5).map(|_| s.sample()).collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    #[test]
    fn sampler_never_touches_the_val_span() {
        // tokens[i] == i, so sampled values reveal their absolute offsets
        let tokens: Arc<Vec<u16>> = Arc::new((0..1000u16).collect());
        let folds = make_folds(1000, 10).unwrap();
        for fold in [&folds[0], &folds[4], &folds[9]] {
            let (vs, ve) = fold.val_span();
            let mut s = BatchSampler::new(tokens.clone(), fold, 10, 16, 123).unwrap();
            // exhaustive over the sampler's reachable offsets
            for off in s.all_offsets() {
                let intersects = off < ve && off + 16 + 1 > vs;
                assert!(
                    !intersects,
                    "offset {off} window would touch val [{vs},{ve})"
                );
            }
            // and over a large number of actual draws
            for _ in 0..200 {
                let (inputs, targets) = s.sample();
                assert_eq!(inputs.len(), 10 * 16);
                for (w_in, w_tg) in inputs.chunks(16).zip(targets.chunks(16)) {
                    let start = w_in[0] as usize;
                    let end = start + 16 + 1; // inputs plus one-shifted target
                    assert!(end <= vs || start >= ve, "window [{start},{end}) leaks");
                    // windows are contiguous runs with targets shifted by one
                    for (j, (&a, &b)) in w_in.iter().zip(w_tg).enumerate() {
                        assert_eq!(a as usize, start + j);
                        assert_eq!(b, a + 1);
                    }
                }
            }
        }
    }

    #[test]
    fn sampler_with_no_valid_offsets_is_a_config_error() {
        let tokens: Arc<Vec<u16>> = Arc::new((0..12u16).collect());
        let folds = make_folds(12, 3).unwrap();
        // train spans are 8 tokens total but each span is 4 long; context 8
        // leaves no room anywhere
        let err = BatchSampler::new(tokens, &folds[1], 2, 8, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn tiled_offsets_are_non_overlapping_and_inside_val() {
        let fold = FoldPlan {
            k: 10,
            fold_index: 0,
            n_tokens: 1000,
            val_start: 100,
            val_end: 200,
        };
        let offs = fold.tiled_val_offsets(16, 16);
        // 100 tokens, window 17, stride 16: starts 100,116,...,180; 181+17>200 excluded
        assert_eq!(offs, vec![100, 116, 132, 148, 164, 180]);
        for w in offs.windows(2) {
            assert!(w[1] - w[0] >= 16, "non-overlapping inputs");
        }
        assert!(offs.iter().all(|&s| s + 17 <= 200));
        // too-small span yields nothing
        let small = FoldPlan {
            k: 10,
            fold_index: 1,
            n_tokens: 1000,
            val_start: 0,
            val_end: 10,
        };
        assert!(small.tiled_val_offsets(16, 16).is_empty());
    }

    #[test]
    fn token_cache_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tokens.bin");
        let tokens: Vec<u16> = vec![0, 1, 65535, 42, 64];
        save_token_cache(&p, &tokens).unwrap();
        assert_eq!(load_token_cache(&p).unwrap(), tokens);

        // bad magic
        let mut raw = std::fs::read(&p).unwrap();
        raw[0] = b'X';
        std::fs::write(&p, &raw).unwrap();
        assert!(load_token_cache(&p).is_err());

        // odd payload
        let mut raw = Vec::new();
        raw.extend_from_slice(b"LPATTNTK");
        raw.extend_from_slice(&1u32.to_le_bytes());
        raw.push(0xFF);
        std::fs::write(&p, &raw).unwrap();
        assert!(load_token_cache(&p).is_err());

        // wrong version
        let mut raw = Vec::new();
        raw.extend_from_slice(b"LPATTNTK");
        raw.extend_from_slice(&9u32.to_le_bytes());
        std::fs::write(&p, &raw).unwrap();
        assert!(load_token_cache(&p).is_err());
    }
}
