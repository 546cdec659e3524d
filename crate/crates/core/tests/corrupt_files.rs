//! Decoders must reject damaged files with an error, never a panic.

use proptest::prelude::*;
use ternvpr::formats::{decode_embeddings, decode_tensor, encode_embeddings, encode_tensor};
use ternvpr::model::{decode_model, encode_model, ViT, ViTConfig};
use ternvpr::quantize::BinaryEmbedding;

fn small_model(quantized: bool) -> Vec<u8> {
    let c = ViTConfig {
        layers: 1,
        heads: 2,
        hidden: 8,
        ffn: 16,
        patch: 4,
        image: 8,
        embed_dim: 16,
        ..ViTConfig::default()
    };
    let m = ViT::init(c, 1).unwrap();
    encode_model(&if quantized { m.to_quantized().unwrap() } else { m })
}

fn small_embeddings() -> Vec<u8> {
    let e = |w: u64| BinaryEmbedding::from_words(100, vec![w, w >> 3]).unwrap();
    encode_embeddings(100, &[(3, e(0xdead_beef)), (9, e(u64::MAX >> 36))]).unwrap()
}

fn small_tensor() -> Vec<u8> {
    encode_tensor(&[3, 2, 2], &[0.5; 12]).unwrap()
}

fn mutate(mut bytes: Vec<u8>, edits: &[(usize, u8)], cut: Option<usize>) -> Vec<u8> {
    for &(pos, v) in edits {
        let n = bytes.len();
        bytes[pos % n] = v;
    }
    if let Some(c) = cut {
        let n = bytes.len();
        bytes.truncate(c % (n + 1));
    }
    bytes
}

#[test]
fn every_truncation_is_an_error() {
    for bytes in [small_model(false), small_model(true), small_embeddings(), small_tensor()] {
        for cut in 0..bytes.len() {
            let b = &bytes[..cut];
            assert!(decode_model(b).is_err() || bytes[..4] != *b"TTRA");
            assert!(decode_embeddings(b).is_err());
            assert!(decode_tensor(b).is_err());
        }
    }
}

#[test]
fn trailing_bytes_are_rejected() {
    for (bytes, kind) in [(small_model(true), 0), (small_embeddings(), 1), (small_tensor(), 2)] {
        let mut b = bytes.clone();
        b.push(0);
        let err = match kind {
            0 => decode_model(&b).is_err(),
            1 => decode_embeddings(&b).is_err(),
            _ => decode_tensor(&b).is_err(),
        };
        assert!(err, "format {kind}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn mutated_model_never_panics(
        quantized in any::<bool>(),
        edits in prop::collection::vec((any::<usize>(), any::<u8>()), 1..6),
        cut in prop::option::of(any::<usize>()),
    ) {
        let _ = decode_model(&mutate(small_model(quantized), &edits, cut));
    }

    #[test]
    fn mutated_embeddings_never_panic(
        edits in prop::collection::vec((any::<usize>(), any::<u8>()), 1..6),
        cut in prop::option::of(any::<usize>()),
    ) {
        let _ = decode_embeddings(&mutate(small_embeddings(), &edits, cut));
    }

    #[test]
    fn mutated_tensors_never_panic(
        edits in prop::collection::vec((any::<usize>(), any::<u8>()), 1..6),
        cut in prop::option::of(any::<usize>()),
    ) {
        let _ = decode_tensor(&mutate(small_tensor(), &edits, cut));
    }

    #[test]
    fn random_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256), magic in 0usize..3) {
        let mut b = bytes;
        let m: &[u8] = [b"TTRA".as_slice(), b"BEMB", b"TNSR"][magic];
        b.splice(0..0, m.iter().copied());
        let _ = decode_model(&b);
        let _ = decode_embeddings(&b);
        let _ = decode_tensor(&b);
    }
}
