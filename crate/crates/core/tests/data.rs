use convcap::data::{
    build_examples, read_corpus, read_features, split_train_val, synth_corpus, write_corpus,
    write_features, FeatureSet, ImageFeatures, SpatialGrid, TokenSeq, Vocabulary, END, START,
};
use proptest::prelude::*;

fn f32_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), n)
        .prop_map(|v| v.into_iter().map(f64::from).collect())
}

fn feature_set() -> impl Strategy<Value = FeatureSet> {
    (1usize..4, 1usize..5, 0usize..3, 1usize..4).prop_flat_map(|(images, f, g, c)| {
        let one = (f32_values(f), f32_values(g * g * c)).prop_map(move |(global, sp)| ImageFeatures {
            global,
            spatial: (g > 0).then(|| SpatialGrid::new(g, c, sp).unwrap()),
        });
        prop::collection::vec(one, images).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, f)| (format!("img{i}"), f))
                .collect()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn feature_file_round_trip_is_bit_exact(set in feature_set()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ccf");
        write_features(&set, &path).unwrap();
        let back = read_features(&path).unwrap();
        prop_assert_eq!(back.len(), set.len());
        for (k, v) in &set {
            let b = &back[k];
            let bits = |xs: &[f64]| xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&b.global), bits(&v.global));
            prop_assert_eq!(
                b.spatial.as_ref().map(|s| bits(&s.data)),
                v.spatial.as_ref().map(|s| bits(&s.data))
            );
        }
    }

    #[test]
    fn token_seq_views_line_up(ids in prop::collection::vec(3usize..40, 0..20), max_len in 1usize..16) {
        let s = TokenSeq::from_ids(&ids, max_len);
        let n = ids.len().min(max_len);
        prop_assert_eq!(s.input.len(), max_len + 1);
        prop_assert_eq!(s.target.len(), max_len + 1);
        prop_assert_eq!(s.valid_len, n + 1);
        prop_assert_eq!(s.input[0], START);
        prop_assert_eq!(&s.input[1..=n], &ids[..n]);
        prop_assert_eq!(&s.target[..n], &ids[..n]);
        prop_assert!(s.target[n..].iter().all(|&t| t == END));
        prop_assert_eq!(s.caption_ids(), &ids[..n]);
    }
}

#[test]
fn synthetic_corpus_flows_through_the_files() {
    let sc = synth_corpus(40, 11);
    let dir = tempfile::tempdir().unwrap();
    let (cp, fp, vp) = (
        dir.path().join("corpus.tsv"),
        dir.path().join("features.ccf"),
        dir.path().join("vocab.txt"),
    );
    write_corpus(&sc.records, &cp).unwrap();
    write_features(&sc.features, &fp).unwrap();
    sc.vocab.save(&vp).unwrap();
    let records = read_corpus(&cp).unwrap();
    let features = read_features(&fp).unwrap();
    let vocab = Vocabulary::load(&vp).unwrap();
    assert_eq!(records, sc.records);
    assert_eq!(features, sc.features);
    assert_eq!(vocab, sc.vocab);
    let (train, val) = split_train_val(&records, 0.25);
    assert_eq!((train.len(), val.len()), (30, 10));
    let ex = build_examples(&val, &features, &vocab, 8).unwrap();
    for (e, r) in ex.iter().zip(&val) {
        assert_eq!(vocab.decode(e.seq.caption_ids()), r.caption);
        assert!(e.features.spatial.is_some());
    }
}

#[test]
fn missing_features_are_reported() {
    let sc = synth_corpus(3, 1);
    let mut feats = sc.features.clone();
    feats.remove(&sc.records[1].image_id);
    assert!(build_examples(&sc.records, &feats, &sc.vocab, 8).is_err());
}
