use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xdlink::biencoder::BiEncoderModel;
use xdlink::corpus::{build_catalog, EntityRecord, MentionRecord, UnifiedCatalog};
use xdlink::encoder::EncoderParams;
use xdlink::eval::{evaluate_linking, LinkOptions};
use xdlink::index::build_index;
use xdlink::tokenizer::{build_vocab, corpus_texts, Vocab, RESERVED};

fn entity(kb: &str, i: usize) -> EntityRecord {
    EntityRecord {
        kb_id: kb.into(),
        entity_id: format!("{kb}{i}"),
        title: format!("title{kb}{i}"),
        description: format!("about{kb}{i}"),
    }
}

fn mention(kb: &str, i: usize, n: usize) -> MentionRecord {
    MentionRecord {
        mention_id: format!("m{kb}{i}-{n}"),
        context_left: String::new(),
        surface: format!("title{kb}{i}"),
        context_right: String::new(),
        gold_kb_id: kb.into(),
        gold_entity_id: format!("{kb}{i}"),
    }
}

/// Each entity owns two tokens; the encoder maps every non-reserved token to its
/// own axis, so a mention's nearest entity is always its gold.
fn separable_world() -> (UnifiedCatalog, Vocab, Vec<MentionRecord>, BiEncoderModel) {
    let general: Vec<_> = (0..6).map(|i| entity("g", i)).collect();
    let specific: Vec<_> = (0..6).map(|i| entity("s", i)).collect();
    let catalog = build_catalog(vec![("g".into(), general), ("s".into(), specific)]).unwrap();
    let mentions: Vec<_> = (0..6)
        .flat_map(|i| [mention("g", i, 0), mention("s", i, 0), mention("s", i, 1)])
        .collect();
    let vocab = build_vocab(&corpus_texts(catalog.entities(), &mentions), 1000).unwrap();
    let (v, d) = (vocab.len(), vocab.len());
    let mut embedding = vec![0.0; v * d];
    for t in RESERVED.len()..v {
        embedding[t * d + t] = 1.0;
    }
    let mut proj_weight = vec![0.0; d * d];
    for i in 0..d {
        proj_weight[i * d + i] = 1.0;
    }
    let params = EncoderParams {
        vocab_size: v,
        d,
        init_seed: 0,
        embedding,
        proj_weight,
        proj_bias: vec![0.0; d],
    };
    let model = BiEncoderModel::from_parts(params.clone(), params).unwrap();
    (catalog, vocab, mentions, model)
}

#[test]
fn separable_world_links_perfectly() {
    let (catalog, vocab, mentions, model) = separable_world();
    let index = build_index(&model, &catalog, &vocab, 128).unwrap();
    let report = evaluate_linking(&model, &index, &mentions, &catalog, &vocab, &LinkOptions::default(), None).unwrap();
    assert_eq!(report.ap_at_1, 1.0);
    assert_eq!(report.map_at_10, 1.0);
    assert!(report.per_mention_rel1.iter().all(|&r| r == 1));
}

#[test]
fn k_one_collapses_map_to_ap1() {
    let (catalog, vocab, mentions, model) = separable_world();
    let scrambled = BiEncoderModel::new(vocab.len(), 16, 3).unwrap();
    for m in [&model, &scrambled] {
        let index = build_index(m, &catalog, &vocab, 128).unwrap();
        let opts = LinkOptions {
            k: 1,
            ..LinkOptions::default()
        };
        let report = evaluate_linking(m, &index, &mentions, &catalog, &vocab, &opts, None).unwrap();
        assert_eq!(report.map_at_10, report.ap_at_1);
    }
}

#[test]
fn report_means_ignore_mention_order() {
    let (catalog, vocab, mut mentions, _) = separable_world();
    let model = BiEncoderModel::new(vocab.len(), 16, 11).unwrap();
    let index = build_index(&model, &catalog, &vocab, 128).unwrap();
    let opts = LinkOptions::default();
    let before = evaluate_linking(&model, &index, &mentions, &catalog, &vocab, &opts, None).unwrap();
    mentions.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
    let after = evaluate_linking(&model, &index, &mentions, &catalog, &vocab, &opts, None).unwrap();
    assert_eq!(before.ap_at_1.to_bits(), after.ap_at_1.to_bits());
    assert_eq!(before.map_at_10.to_bits(), after.map_at_10.to_bits());
    assert!(before.ap_at_1 <= before.map_at_10);
    let mut a = before.per_mention_ap10.clone();
    let mut b = after.per_mention_ap10.clone();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    assert_eq!(a, b);
}
