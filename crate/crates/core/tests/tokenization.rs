use bytelift_core::tokenization::{
    subword_boundary_mask, train_bpe, BoundaryMask, SubwordVocab, SuffixIndex,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn id_of(v: &SubwordVocab, s: &[u8]) -> u32 {
    v.iter_tokens().find(|(_, t)| *t == s).unwrap().0
}

#[test]
fn overlapping_pair_count_picks_aa() {
    let t = train_bpe(&["aaab"], 258);
    assert_eq!(t.vocab.token_bytes(256), b"aa");
    assert!(!t.truncated);
}

#[test]
fn abab_merges_ab() {
    let t = train_bpe(&["abab"], 258);
    assert_eq!(t.vocab.token_bytes(256), b"ab");
}

#[test]
fn small_corpus_truncates_with_flag() {
    let t = train_bpe(&["abc"], 300);
    assert!(t.truncated);
    assert_eq!(t.vocab.merges().len(), 0);
}

#[test]
fn encode_examples() {
    let v = SubwordVocab::from_merges(vec![(b'a' as u32, b'b' as u32)]).unwrap();
    assert_eq!(v.encode(b"ab"), vec![256]);
    assert_eq!(v.encode(b"ba"), vec![b'b' as u32, b'a' as u32]);
}

#[test]
fn mask_of_two_tokens() {
    let v =
        SubwordVocab::from_merges(vec![(b'a' as u32, b'b' as u32), (b' ' as u32, 256)]).unwrap();
    assert_eq!(v.encode(b"ab ab"), vec![256, 257]);
    let m = subword_boundary_mask(&v, b"ab ab");
    assert_eq!(m.flags, vec![false, true, false, false, true]);
    let single = subword_boundary_mask(&v, b" ab");
    assert_eq!(single.flags, vec![false, false, true]);
}

#[test]
fn suffix_examples() {
    let v = SubwordVocab::from_merges(vec![(b'a' as u32, b'b' as u32), (b'b' as u32, b'c' as u32)])
        .unwrap();
    let idx = SuffixIndex::new(&v);
    assert_eq!(v.token_bytes(idx.longest_suffix_token(b"abc", 1)), b"ab");
    assert_eq!(v.token_bytes(idx.longest_suffix_token(b"abc", 2)), b"bc");
    assert_eq!(idx.longest_suffix_token(b"abc", 0), b'a' as u32);
}

/// Independent trainer over explicit byte-string tokens.
fn naive_bpe(corpus: &[Vec<u8>], merges: usize) -> Vec<Vec<u8>> {
    let mut docs: Vec<Vec<Vec<u8>>> = corpus
        .iter()
        .map(|d| d.iter().map(|&b| vec![b]).collect())
        .collect();
    let mut ids: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let id = |ids: &Vec<Vec<u8>>, t: &Vec<u8>| ids.iter().position(|x| x == t).unwrap();
    let mut out = Vec::new();
    for _ in 0..merges {
        let mut best: Option<((usize, usize), usize)> = None;
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for d in &docs {
            for w in d.windows(2) {
                pairs.push((id(&ids, &w[0]), id(&ids, &w[1])));
            }
        }
        for &p in &pairs {
            let c = pairs.iter().filter(|&&q| q == p).count();
            let better = match best {
                None => true,
                Some((bp, bc)) => c > bc || (c == bc && p < bp),
            };
            if better {
                best = Some((p, c));
            }
        }
        let Some(((a, b), c)) = best else { break };
        if c < 2 {
            break;
        }
        let (ta, tb) = (ids[a].clone(), ids[b].clone());
        let mut merged = ta.clone();
        merged.extend_from_slice(&tb);
        for d in docs.iter_mut() {
            let mut nd = Vec::new();
            let mut i = 0;
            while i < d.len() {
                if i + 1 < d.len() && d[i] == ta && d[i + 1] == tb {
                    nd.push(merged.clone());
                    i += 2;
                } else {
                    nd.push(d[i].clone());
                    i += 1;
                }
            }
            *d = nd;
        }
        ids.push(merged.clone());
        out.push(merged);
    }
    out
}

#[test]
fn trainer_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let corpus: Vec<Vec<u8>> = (0..3)
            .map(|_| {
                (0..rng.gen_range(5..40))
                    .map(|_| b"abcab "[rng.gen_range(0..6)])
                    .collect()
            })
            .collect();
        let n = 12;
        let fast = train_bpe(&corpus, 257 + n).vocab;
        let slow = naive_bpe(&corpus, n);
        let fast_tokens: Vec<Vec<u8>> = (0..fast.merges().len())
            .map(|r| fast.token_bytes(256 + r as u32).to_vec())
            .collect();
        assert_eq!(fast_tokens, slow);
    }
}

fn brute_suffix(v: &SubwordVocab, x: &[u8], i: usize) -> Vec<u8> {
    v.iter_tokens()
        .map(|(_, t)| t)
        .filter(|t| x[..=i].ends_with(t))
        .max_by_key(|t| t.len())
        .unwrap()
        .to_vec()
}

fn trained_vocab() -> SubwordVocab {
    let text = "the flower bed by the flowerbed flowers the bedroom of the room where the bed was \
                the sunflower and the moonlight were bright on the lighthouse";
    train_bpe(&[text], 330).vocab
}

#[test]
fn suffix_lookup_matches_brute_force_on_random_texts() {
    let v = trained_vocab();
    let idx = SuffixIndex::new(&v);
    let alphabet = b"the flowerbd";
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let x: Vec<u8> = (0..rng.gen_range(1..40))
            .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
            .collect();
        for i in 0..x.len() {
            assert_eq!(
                v.token_bytes(idx.longest_suffix_token(&x, i)),
                &brute_suffix(&v, &x, i)[..]
            );
        }
    }
}

#[test]
fn vocab_file_survives_round_trip() {
    let v = trained_vocab();
    assert_eq!(SubwordVocab::from_text(&v.to_text()).unwrap(), v);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn encode_decode_round_trip(x in prop::collection::vec(any::<u8>(), 0..64)) {
        let v = trained_vocab();
        let ids = v.encode(&x);
        prop_assert_eq!(v.decode(&ids).unwrap(), x);
    }

    #[test]
    fn mask_popcount_equals_token_count(x in "[the flowerbd]{1,60}") {
        let v = trained_vocab();
        let ids = v.encode(x.as_bytes());
        let m = subword_boundary_mask(&v, x.as_bytes());
        prop_assert_eq!(m.popcount(), ids.len());
        let lens: Vec<usize> = ids.iter().map(|&i| v.token_bytes(i).len()).collect();
        prop_assert_eq!(m.patch_lengths(), lens);
        prop_assert!(*m.flags.last().unwrap());
    }

    #[test]
    fn rle_round_trip(flags in prop::collection::vec(any::<bool>(), 0..80)) {
        let m = BoundaryMask::new(flags);
        prop_assert_eq!(BoundaryMask::from_rle(&m.to_rle()).unwrap(), m);
    }
}

#[test]
fn decode_rejects_unknown_id() {
    let v = trained_vocab();
    assert!(v.decode(&[v.bos() + 1]).is_err());
    assert_eq!(v.decode(&[v.bos(), id_of(&v, b"t")]).unwrap(), b"t");
}
