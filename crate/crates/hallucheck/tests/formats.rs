use std::path::Path;

use hallucheck::model_file::{from_bytes, to_bytes};
use hallucheck::records::{heatmap_csv, parse_heatmap, Mode, RelevanceRecord, Role};
use hallucheck::Error;
use hallucheck_core::features::{extract, extract_from_rows, FeatureConfig};
use hallucheck_core::lrp::{attention_contributions, token_contributions, LrpConfig};
use hallucheck_core::model::{greedy_decode, ModelConfig, TransformerWeights};
use hallucheck_core::vocab::Vocabulary;

fn tiny() -> (TransformerWeights, Vocabulary) {
    let pairs = [("a b c", "x y z"), ("b c d", "y z w"), ("c d a", "z w x")];
    let vocab = Vocabulary::build(pairs.iter().copied(), 1);
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        encoder_layers: 1,
        decoder_layers: 2,
        d_model: 8,
        heads: 2,
        d_ff: 12,
        max_source_len: 16,
        max_target_len: 16,
        label_smoothing: 0.1,
    };
    (TransformerWeights::init(&cfg, 5).unwrap(), vocab)
}

fn format_error(r: hallucheck::Result<hallucheck::model_file::ModelFile>) -> String {
    match r {
        Err(Error::Format { reason, .. }) => reason,
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("accepted a corrupt file"),
    }
}

#[test]
fn weight_file_round_trip_is_bit_exact() {
    let (w, vocab) = tiny();
    let bytes = to_bytes(&w, &vocab);
    let back = from_bytes(&bytes, Path::new("w")).unwrap();
    for (a, b) in w.tensors().iter().zip(back.weights.tensors()) {
        let bits = |m: &hallucheck_core::Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(back.vocab.tokens(), vocab.tokens());
    assert_eq!(back.vocab.id("y"), vocab.id("y"));
    assert_eq!(to_bytes(&back.weights, &back.vocab), bytes);
}

#[test]
fn corrupt_weight_files_are_rejected() {
    let (w, vocab) = tiny();
    let bytes = to_bytes(&w, &vocab);
    let p = Path::new("w");
    assert!(format_error(from_bytes(&bytes[..bytes.len() - 3], p)).contains("truncated"));
    assert!(format_error(from_bytes(&bytes[..10], p)).contains("magic"));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(format_error(from_bytes(&extra, p)).contains("trailing"));

    // Same-length edit of the config inside the header.
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let needle = "\"label_smoothing\":0.1";
    assert!(text.contains(needle));
    let pos = bytes.windows(needle.len()).position(|win| win == needle.as_bytes()).unwrap();
    let mut edited = bytes.clone();
    edited[pos + needle.len() - 1] = b'2';
    assert!(format_error(from_bytes(&edited, p)).contains("hash"));

    let mut nan = bytes.clone();
    let n = nan.len();
    nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
    assert!(format_error(from_bytes(&nan, p)).contains("non-finite"));
}

#[test]
fn heatmap_reimport_reproduces_features_exactly() {
    let (w, vocab) = tiny();
    let cfg = FeatureConfig {
        k1: 1,
        k2: 2,
        ..FeatureConfig::default()
    };
    let mut records = Vec::new();
    let mut expected = Vec::new();
    let mut scored = 0;
    for (i, text) in ["a b c", "c d a b", "d d a", "b a c d a"].iter().enumerate() {
        let src = vocab.encode_source(text);
        let out = greedy_decode(&w, &src, 8, false).unwrap().output;
        for (mode, r) in [
            (Mode::Lrp, token_contributions(&src, &out, &w, &LrpConfig::default())),
            (Mode::Attention, attention_contributions(&src, &out, &w, None, 40)),
        ] {
            let Ok(r) = r else { continue };
            let Ok(f) = extract(&r, &cfg) else { continue };
            scored += 1;
            let role = if mode == Mode::Lrp { Role::Perturbed } else { Role::Original };
            records.push(RelevanceRecord::new(i as u64, role, mode, &r, |t| vocab.token(t).to_string()));
            expected.push(((i as u64, role.name().to_string()), f, r.source_matrix()));
        }
    }
    assert!(scored >= 4, "only {scored} outputs scored");
    let grids = parse_heatmap(&heatmap_csv(&records), Path::new("h")).unwrap();
    assert_eq!(grids.len(), expected.len());
    for (key, features, matrix) in expected {
        let grid = &grids[&key];
        assert_eq!(grid, &matrix);
        let again = extract_from_rows(grid, features.relative_source.clone(), &cfg).unwrap();
        assert_eq!(again, features);
    }
}

#[test]
fn lrp_and_attention_grids_have_the_same_shape() {
    let (w, vocab) = tiny();
    for text in ["a b c", "c d a b d"] {
        let src = vocab.encode_source(text);
        let out = greedy_decode(&w, &src, 6, false).unwrap().output;
        let a = attention_contributions(&src, &out, &w, None, 40).unwrap();
        if let Ok(l) = token_contributions(&src, &out, &w, &LrpConfig::default()) {
            assert_eq!(l.source_matrix().shape(), a.source_matrix().shape());
            for (x, y) in l.steps.iter().zip(&a.steps) {
                assert_eq!(x.prefix.len(), y.prefix.len());
            }
        }
    }
}
