//! Byte tokenizer and synthetic data generators.
//!
//! Tokens are raw bytes (0–255) plus three specials, so no tokenizer is
//! ever trained. Two generators produce the training/eval material:
//!
//! * a language-modeling corpus of second-order Markov "text" with a
//!   planted long-range dependency — each document carries a private
//!   32-byte motif, emitted a few times in the body and once right before
//!   the end, always announced by a trigger byte. Within a short window
//!   the re-emission is unpredictable; with access to the distant body it
//!   is a pure copy, so perplexity on document tails directly measures
//!   how much out-of-window context a model actually uses;
//! * a needle-lookup QA set — key→value facts planted in filler along
//!   with decoy facts, with a query that names one key and an answer that
//!   is that key's value span.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
pub const BYTE_VOCAB: usize = 259;

pub fn encode_bytes(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

pub fn encode_str(s: &str) -> Vec<usize> {
    encode_bytes(s.as_bytes())
}

/// Best-effort text rendering: byte tokens pass through, specials become
/// markers, out-of-range ids are rejected upstream.
pub fn decode_to_string(ids: &[usize]) -> String {
    let mut out = Vec::new();
    for &id in ids {
        match id {
            0..=255 => out.push(id as u8),
            BOS => out.extend_from_slice(b"<bos>"),
            EOS => out.extend_from_slice(b"<eos>"),
            _ => out.extend_from_slice(b"<pad>"),
        }
    }
    String::from_utf8_lossy(&out).into_owned()
}

/// Sixteen letters: small enough (256 second-order contexts) that a
/// desk-scale model can learn the filler statistics quickly.
const ALPHABET: &[u8] = b"abcdefghijklmnop";

/// Announces a motif emission; never produced by the filler chain.
pub const TRIGGER: u8 = b'#';

/// Second-order Markov filler over [`ALPHABET`]. Transition tables are
/// implicit: the candidate successors of a byte pair are derived by
/// hashing, so the chain needs no stored table and any (seed, pair)
/// lookup is O(1).
#[derive(Debug, Clone)]
pub struct MarkovChain {
    seed: u64,
}

impl MarkovChain {
    pub fn new(seed: u64) -> Self {
        MarkovChain { seed }
    }

    fn candidate(&self, a: u8, b: u8, slot: u64) -> u8 {
        let mut r = Rng::new(
            self.seed ^ (a as u64) << 32 ^ (b as u64) << 16 ^ slot,
        );
        ALPHABET[r.index(0, ALPHABET.len() - 1)]
    }

    /// Next byte after the pair (a, b): one of four hash-derived
    /// candidates with probabilities 8/16, 4/16, 3/16, 1/16 (≈1.2 nats
    /// per byte).
    pub fn next(&self, a: u8, b: u8, rng: &mut Rng) -> u8 {
        let r = rng.index(0, 15);
        let slot = match r {
            0..=7 => 0,
            8..=11 => 1,
            12..=14 => 2,
            _ => 3,
        };
        self.candidate(a, b, slot)
    }

    pub fn fill(&self, buf: &mut [u8], mut a: u8, mut b: u8, rng: &mut Rng) {
        for slot in buf.iter_mut() {
            let c = self.next(a, b, rng);
            *slot = c;
            a = b;
            b = c;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_docs: usize,
    pub len_lo: usize,
    pub len_hi: usize,
    pub motif_len: usize,
    /// Motif emissions in the document body (the tail re-emission is
    /// always added on top).
    pub body_emissions: usize,
    /// Body emissions never intrude into this many trailing tokens, so a
    /// model confined to a window of that size cannot have seen the motif
    /// when the tail re-emission arrives.
    pub keep_out: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_docs: 64,
            len_lo: 1536,
            len_hi: 2048,
            motif_len: 32,
            body_emissions: 3,
            keep_out: 256 + 40,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmDoc {
    pub tokens: Vec<usize>,
    pub motif: Vec<u8>,
    /// Start offsets of the trigger byte of every emission, body first,
    /// tail re-emission last.
    pub emission_starts: Vec<usize>,
}

/// One emission is the trigger byte followed by the motif.
fn emission_len(spec: &CorpusSpec) -> usize {
    spec.motif_len + 1
}

pub fn gen_lm_corpus(rng: &mut Rng, spec: &CorpusSpec) -> Result<Vec<LmDoc>> {
    let e = emission_len(spec);
    let body_need = spec.body_emissions * (e + 8);
    if spec.len_lo < spec.keep_out + body_need + e + 8 {
        return Err(Error::Config(format!(
            "documents of {} tokens cannot hold {} emissions outside the last {} tokens",
            spec.len_lo, spec.body_emissions, spec.keep_out
        )));
    }
    if spec.len_lo > spec.len_hi || spec.n_docs == 0 || spec.motif_len < 2 {
        return Err(Error::Config("corpus law bounds are empty".into()));
    }
    let chain = MarkovChain::new(rng.derive("markov").next_u64());
    let mut docs = Vec::with_capacity(spec.n_docs);
    for _ in 0..spec.n_docs {
        let len = rng.index(spec.len_lo, spec.len_hi);
        let mut motif = vec![0u8; spec.motif_len];
        for m in motif.iter_mut() {
            *m = ALPHABET[rng.index(0, ALPHABET.len() - 1)];
        }

        // body emissions: one uniform draw inside each of `body_emissions`
        // equal slices of the allowed body, which keeps them disjoint
        let body_end = len - spec.keep_out - e;
        let slice = body_end / spec.body_emissions.max(1);
        let mut starts: Vec<usize> = (0..spec.body_emissions)
            .map(|i| i * slice + rng.index(0, slice - e))
            .collect();
        // tail re-emission: the motif ends a few bytes before the document
        // does, inside any evaluation span over the tail
        starts.push(len - e - rng.index(0, 4));

        let mut buf = vec![0u8; len];
        let (mut a, mut b) = (b' ', b' ');
        let mut i = 0usize;
        let mut next_emission = 0usize;
        while i < len {
            if next_emission < starts.len() && i == starts[next_emission] {
                buf[i] = TRIGGER;
                buf[i + 1..i + e].copy_from_slice(&motif);
                a = motif[spec.motif_len - 2];
                b = motif[spec.motif_len - 1];
                i += e;
                next_emission += 1;
                continue;
            }
            let stop = if next_emission < starts.len() {
                starts[next_emission]
            } else {
                len
            };
            chain.fill(&mut buf[i..stop], a, b, rng);
            if stop - i >= 2 {
                a = buf[stop - 2];
                b = buf[stop - 1];
            } else if stop - i == 1 {
                a = b;
                b = buf[stop - 1];
            }
            i = stop;
        }

        docs.push(LmDoc {
            tokens: encode_bytes(&buf),
            motif,
            emission_starts: starts,
        });
    }
    Ok(docs)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QaSpec {
    pub n_samples: usize,
    pub context_len: usize,
    pub n_decoys: usize,
    /// Allowed range for the needle start; `None` means anywhere in the
    /// context.
    pub offset_range: Option<(usize, usize)>,
}

impl Default for QaSpec {
    fn default() -> Self {
        QaSpec {
            n_samples: 64,
            context_len: 2048,
            n_decoys: 12,
            offset_range: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QASample {
    pub context: Vec<usize>,
    pub needle_offset: usize,
    pub needle_len: usize,
    pub query: Vec<usize>,
    pub answer: Vec<usize>,
}

const KEY_CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

fn code(rng: &mut Rng) -> [u8; 2] {
    [
        KEY_CHARS[rng.index(0, KEY_CHARS.len() - 1)],
        KEY_CHARS[rng.index(0, KEY_CHARS.len() - 1)],
    ]
}

/// "Kab maps to Vcd." — exactly 16 bytes.
fn needle_text(key: [u8; 2], val: [u8; 2]) -> Vec<u8> {
    let mut t = Vec::with_capacity(16);
    t.push(b'K');
    t.extend_from_slice(&key);
    t.extend_from_slice(b" maps to ");
    t.push(b'V');
    t.extend_from_slice(&val);
    t.push(b'.');
    t
}

/// Key→value lookup samples: the true fact plus `n_decoys` same-shaped
/// facts under other keys, planted at disjoint offsets in Markov filler.
/// The query repeats the key phrase; the answer is the 4-byte value span.
pub fn gen_needle_qa(rng: &mut Rng, spec: &QaSpec) -> Result<Vec<QASample>> {
    let nl = 16usize;
    if spec.context_len < (spec.n_decoys + 1) * (nl + 8) {
        return Err(Error::Config(format!(
            "context of {} bytes cannot hold {} disjoint facts",
            spec.context_len,
            spec.n_decoys + 1
        )));
    }
    let (off_lo, off_hi) = match spec.offset_range {
        Some((lo, hi)) => {
            if hi > spec.context_len - nl || lo > hi {
                return Err(Error::Config(format!(
                    "needle offsets [{lo}, {hi}] outside context of {}",
                    spec.context_len
                )));
            }
            (lo, hi)
        }
        None => (0, spec.context_len - nl),
    };
    let chain = MarkovChain::new(rng.derive("qa-markov").next_u64());
    let mut samples = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let key = code(rng);
        let val = code(rng);
        let needle = needle_text(key, val);

        let offset = rng.index(off_lo, off_hi);
        let mut placed: Vec<(usize, Vec<u8>)> = vec![(offset, needle)];
        let mut guard = 0;
        while placed.len() < spec.n_decoys + 1 {
            let dk = code(rng);
            if dk == key {
                continue;
            }
            let d = needle_text(dk, code(rng));
            let o = rng.index(0, spec.context_len - nl);
            if placed
                .iter()
                .all(|(po, _)| o + nl <= *po || po + nl <= o)
            {
                placed.push((o, d));
            }
            guard += 1;
            if guard > 10_000 {
                return Err(Error::Config(
                    "could not place disjoint facts; context too dense".into(),
                ));
            }
        }
        placed.sort_by_key(|(o, _)| *o);

        let mut buf = vec![0u8; spec.context_len];
        let (mut a, mut b) = (b' ', b' ');
        let mut i = 0usize;
        for (o, text) in &placed {
            chain.fill(&mut buf[i..*o], a, b, rng);
            buf[*o..*o + nl].copy_from_slice(text);
            a = text[nl - 2];
            b = text[nl - 1];
            i = o + nl;
        }
        chain.fill(&mut buf[i..], a, b, rng);

        let mut query = Vec::with_capacity(12);
        query.push(b'K');
        query.extend_from_slice(&key);
        query.extend_from_slice(b" maps to ");
        let mut answer = Vec::with_capacity(4);
        answer.push(b'V');
        answer.extend_from_slice(&val);
        answer.push(b'.');

        samples.push(QASample {
            context: encode_bytes(&buf),
            needle_offset: offset,
            needle_len: nl,
            query: encode_bytes(&query),
            answer: encode_bytes(&answer),
        });
    }
    Ok(samples)
}

/// Positions where `pattern` occurs in `hay`.
pub fn find_all(hay: &[usize], pattern: &[usize]) -> Vec<usize> {
    if pattern.is_empty() || hay.len() < pattern.len() {
        return Vec::new();
    }
    (0..=hay.len() - pattern.len())
        .filter(|&i| &hay[i..i + pattern.len()] == pattern)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_round_trip_and_specials() {
        let ids = encode_str("hello");
        assert_eq!(ids, vec![104, 101, 108, 108, 111]);
        assert_eq!(decode_to_string(&ids), "hello");
        assert_eq!(decode_to_string(&[BOS, 104, EOS, PAD]), "<bos>h<eos><pad>");
        assert_eq!(BYTE_VOCAB, 259);
    }

    #[test]
    fn corpus_is_seed_deterministic() {
        let spec = CorpusSpec {
            n_docs: 4,
            ..CorpusSpec::default()
        };
        let a = gen_lm_corpus(&mut Rng::new(9), &spec).unwrap();
        let b = gen_lm_corpus(&mut Rng::new(9), &spec).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.tokens, y.tokens);
            assert_eq!(x.motif, y.motif);
            assert_eq!(x.emission_starts, y.emission_starts);
        }
        let c = gen_lm_corpus(&mut Rng::new(10), &spec).unwrap();
        assert_ne!(a[0].tokens, c[0].tokens);
    }

    #[test]
    fn corpus_obeys_the_length_and_emission_laws() {
        let spec = CorpusSpec {
            n_docs: 24,
            ..CorpusSpec::default()
        };
        let docs = gen_lm_corpus(&mut Rng::new(3), &spec).unwrap();
        for doc in &docs {
            let len = doc.tokens.len();
            assert!(len >= spec.len_lo && len <= spec.len_hi);

            let motif_ids = encode_bytes(&doc.motif);
            let occ = find_all(&doc.tokens, &motif_ids);
            assert_eq!(
                occ.len(),
                spec.body_emissions + 1,
                "motif occurrence count is the configured rate"
            );

            for (i, &s) in doc.emission_starts.iter().enumerate() {
                assert_eq!(doc.tokens[s], TRIGGER as usize);
                assert_eq!(occ[i], s + 1);
            }

            let e = spec.motif_len + 1;
            let body = &doc.emission_starts[..spec.body_emissions];
            for &s in body {
                assert!(
                    s + e <= len - spec.keep_out,
                    "body emission leaked into the keep-out tail"
                );
            }
            let tail = *doc.emission_starts.last().unwrap();
            assert!(tail + e >= len - 4 && tail + e <= len);
        }
    }

    #[test]
    fn emissions_at_tiny_offsets_keep_the_laws() {
        // minimum-legal documents make 0- and 1-byte filler gaps common, so
        // this sweep exercises the Markov-context carry across short spans
        let e = 33;
        let spec = CorpusSpec {
            n_docs: 64,
            len_lo: 64 + 3 * (e + 8) + e + 8,
            len_hi: 64 + 3 * (e + 8) + e + 16,
            motif_len: 32,
            body_emissions: 3,
            keep_out: 64,
        };
        for seed in 0..40 {
            let docs = gen_lm_corpus(&mut Rng::new(seed), &spec).unwrap();
            for doc in &docs {
                let motif_ids = encode_bytes(&doc.motif);
                assert_eq!(find_all(&doc.tokens, &motif_ids).len(), spec.body_emissions + 1);
                for &s in &doc.emission_starts {
                    assert_eq!(doc.tokens[s], TRIGGER as usize);
                }
            }
        }
    }

    #[test]
    fn filler_never_emits_the_trigger() {
        let chain = MarkovChain::new(77);
        let mut rng = Rng::new(5);
        let mut buf = vec![0u8; 4096];
        chain.fill(&mut buf, b' ', b' ', &mut rng);
        assert!(buf.iter().all(|&b| b != TRIGGER));
        assert!(buf.iter().all(|&b| ALPHABET.contains(&b)));
    }

    #[test]
    fn qa_samples_are_unique_and_oracle_recoverable() {
        let spec = QaSpec {
            n_samples: 32,
            context_len: 1024,
            n_decoys: 8,
            offset_range: None,
        };
        let samples = gen_needle_qa(&mut Rng::new(21), &spec).unwrap();
        assert_eq!(samples.len(), 32);
        for s in &samples {
            // the key phrase occurs exactly once
            let key3 = &s.query[..3];
            assert_eq!(find_all(&s.context, key3).len(), 1);

            // string-search oracle: locate the query phrase, read the value
            let hits = find_all(&s.context, &s.query);
            assert_eq!(hits.len(), 1);
            assert_eq!(hits[0], s.needle_offset);
            let val_at = hits[0] + s.query.len();
            assert_eq!(&s.context[val_at..val_at + 4], &s.answer[..]);

            assert_eq!(s.needle_len, 16);
            assert_eq!(s.query.len(), 12);
            assert_eq!(s.answer.len(), 4);
        }
    }

    #[test]
    fn qa_offsets_cover_the_context_uniformly() {
        let spec = QaSpec {
            n_samples: 400,
            context_len: 1024,
            n_decoys: 4,
            offset_range: None,
        };
        let samples = gen_needle_qa(&mut Rng::new(33), &spec).unwrap();
        let hi = spec.context_len - 16;
        let bins = 8usize;
        let mut counts = vec![0usize; bins];
        for s in &samples {
            counts[(s.needle_offset * bins / (hi + 1)).min(bins - 1)] += 1;
        }
        let expect = spec.n_samples / bins;
        for (b, &c) in counts.iter().enumerate() {
            assert!(
                c > expect / 2 && c < expect * 2,
                "bin {b} holds {c} of {} samples",
                spec.n_samples
            );
        }
    }

    #[test]
    fn qa_offset_range_is_respected() {
        let spec = QaSpec {
            n_samples: 40,
            context_len: 2048,
            n_decoys: 6,
            offset_range: Some((0, 1500)),
        };
        let samples = gen_needle_qa(&mut Rng::new(8), &spec).unwrap();
        assert!(samples.iter().all(|s| s.needle_offset <= 1500));
        assert!(matches!(
            gen_needle_qa(
                &mut Rng::new(8),
                &QaSpec {
                    offset_range: Some((0, 9999)),
                    ..spec
                }
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn corpus_rejects_impossible_specs() {
        let spec = CorpusSpec {
            n_docs: 1,
            len_lo: 300,
            len_hi: 300,
            keep_out: 290,
            ..CorpusSpec::default()
        };
        assert!(matches!(
            gen_lm_corpus(&mut Rng::new(0), &spec),
            Err(Error::Config(_))
        ));
    }
}
