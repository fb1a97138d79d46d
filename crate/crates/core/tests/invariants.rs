use std::collections::HashSet;

use proptest::prelude::*;

use nmtlab_core::corpus::{
    build_vocabs, parse_parallel_tsv, write_parallel_tsv, SynthTask, SynthTaskSpec, TokenScheme,
    Transformation, Vocab,
};
use nmtlab_core::eval::corpus_bleu;
use nmtlab_core::filters::{detection_accuracy, prefilter_corpus, score_corpus};
use nmtlab_core::model::{
    load_checkpoint, save_checkpoint, Checkpoint, ModelParams, ModelShape, OptimState,
};
use nmtlab_core::objectives::{
    time_schedule, truncated_loss, truncation_count, ObjectiveConfig, ObjectiveKind, ScheduleParams,
};
use nmtlab_core::simnoise::{
    derangement, generate_misaligned_corpus, inject_noise, shuffle_misalign, synthesize_embeddings,
    NoiseGenSpec, Scorer, SynthEmbeddingSpec,
};
use nmtlab_core::Provenance;

fn task(size: usize, seed: u64) -> SynthTask {
    SynthTask::new(SynthTaskSpec {
        vocab_size: 15,
        min_len: 2,
        max_len: 6,
        size,
        transformation: Transformation::SubstitutionCipher,
        seed,
        zipf_exponent: 1.0,
    })
    .unwrap()
}

fn scorer(task: &SynthTask, seed: u64) -> Scorer {
    Scorer::Embedding(
        synthesize_embeddings(
            task,
            &SynthEmbeddingSpec {
                dim: 8,
                noise: 1.0,
                seed,
            },
        )
        .unwrap(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn misaligned_corpus_is_a_reassignment(size in 4usize..80, seed in 0u64..1000) {
        let t = task(size, seed);
        let clean = t.generate().unwrap();
        let out = generate_misaligned_corpus(
            &clean,
            &NoiseGenSpec { seed, ..NoiseGenSpec::default() },
            &scorer(&t, seed),
        )
        .unwrap();
        prop_assert_eq!(out.corpus.len(), size);
        prop_assert_eq!(out.assigned.iter().collect::<HashSet<_>>().len(), size);
        for (i, pair) in out.corpus.pairs().iter().enumerate() {
            prop_assert_eq!(pair.source.raw(), clean.pairs()[i].source.raw());
            prop_assert_eq!(pair.target.raw(), clean.pairs()[out.assigned[i]].target.raw());
            prop_assert_ne!(out.assigned[i], i);
            prop_assert!(out.corpus.label(i).is_noisy());
        }
    }

    #[test]
    fn derangements_have_no_fixed_points(n in 2usize..200, seed in any::<u64>()) {
        let d = derangement(n, seed);
        let mut sorted = d.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        prop_assert!(d.iter().enumerate().all(|(i, &j)| i != j));
    }

    #[test]
    fn injection_replaces_the_requested_share(size in 2usize..120, rate in 0.0f64..=1.0, seed in 0u64..1000) {
        let clean = task(size, seed).generate().unwrap();
        let noise = shuffle_misalign(&clean, seed).unwrap();
        let (mixed, mask) = inject_noise(&clean, &noise, rate, seed).unwrap();
        prop_assert_eq!(mask.noisy_count(), (rate * size as f64).round() as usize);
        for i in 0..size {
            let label = mask.labels()[i];
            prop_assert_eq!(mixed.label(i), label);
            let expect = if label == Provenance::Clean { &clean } else { &noise };
            prop_assert_eq!(&mixed.pairs()[i], &expect.pairs()[i]);
            prop_assert_eq!(mask.true_targets()[i].as_ref(), Some(&clean.pairs()[i].target));
        }
    }

    #[test]
    fn filters_flag_and_remove_the_requested_counts(size in 4usize..100, rate in 0.0f64..=1.0, f in 0.0f64..1.0, seed in 0u64..500) {
        let t = task(size, seed);
        let clean = t.generate().unwrap();
        let noise = shuffle_misalign(&clean, seed).unwrap();
        let (mixed, mask) = inject_noise(&clean, &noise, rate, seed).unwrap();
        let scored = score_corpus(&mixed, &scorer(&t, seed)).unwrap();
        let acc = detection_accuracy(&scored, &mask).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        let kept = prefilter_corpus(&scored, f).unwrap();
        prop_assert_eq!(kept.len(), size - (f * size as f64).round() as usize);
    }

    #[test]
    fn truncation_drops_the_top_of_the_ranking(
        values in prop::collection::vec(0.0f64..10.0, 1..200),
        pct in 1usize..50,
        by_el2n in any::<bool>(),
    ) {
        let n = values.len();
        let c = pct as f64 / 100.0;
        prop_assert_eq!(truncation_count(c, n), (pct * n).div_ceil(100));
        let kind = if by_el2n { ObjectiveKind::El2nTrunc } else { ObjectiveKind::LossTrunc };
        let cfg = ObjectiveConfig {
            trunc_fraction: c,
            ..ObjectiveConfig::new(kind, ScheduleParams { total_iters: 10, start_iter: Some(0), ..ScheduleParams::default() })
        };
        let other = vec![1.0; n];
        let (losses, el2n) = if by_el2n { (&other, &values) } else { (&values, &other) };
        let out = truncated_loss(losses, el2n, &cfg, 5).unwrap();
        let dropped: Vec<f64> = (0..n).filter(|&i| !out.keep[i]).map(|i| values[i]).collect();
        let kept_max = (0..n).filter(|&i| out.keep[i]).map(|i| values[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(dropped.len(), truncation_count(c, n));
        prop_assert!(dropped.iter().all(|&d| d >= kept_max));
    }

    #[test]
    fn time_schedule_rises_over_training(a in 0.0f64..=1.0, b in 0.0f64..=1.0, alpha in -1.0f64..0.0, beta in -10.0f64..-0.1) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let t0 = time_schedule(lo * 500.0, 500.0, alpha, beta);
        let t1 = time_schedule(hi * 500.0, 500.0, alpha, beta);
        prop_assert!(t0 <= t1);
        prop_assert!((0.0..=1.0).contains(&t0) && (0.0..=1.0).contains(&t1));
    }

    #[test]
    fn bleu_of_references_is_perfect(size in 1usize..40, seed in 0u64..500) {
        let refs: Vec<_> = task(size, seed).generate().unwrap().targets().cloned().collect();
        let bleu = corpus_bleu(&refs, &refs).unwrap();
        prop_assert!((bleu - 100.0).abs() < 1e-9, "{}", bleu);
    }
}

#[test]
fn corpus_and_vocab_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let clean = task(50, 3).generate().unwrap();
    let path = dir.path().join("train.tsv");
    write_parallel_tsv(&clean, &path).unwrap();
    let back = parse_parallel_tsv(&path, TokenScheme::Whitespace).unwrap();
    assert_eq!(back.pairs(), clean.pairs());

    let (src, _) = build_vocabs(&clean, 1).unwrap();
    let vpath = dir.path().join("src.vocab");
    src.save(&vpath).unwrap();
    let loaded = Vocab::load(&vpath).unwrap();
    assert_eq!(loaded.tokens(), src.tokens());
    assert_eq!(loaded.fingerprint(), src.fingerprint());
}

#[test]
fn checkpoints_round_trip_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let shape = ModelShape {
        src_vocab: 9,
        tgt_vocab: 11,
        d_model: 8,
        d_ff: 16,
        enc_layers: 1,
        dec_layers: 2,
        max_len: 12,
    };
    let params = ModelParams::init(shape, 5).unwrap();
    let optim = OptimState::new(params.len(), 1e-3);
    let ck = Checkpoint::new(params, optim, "src".into(), "tgt".into(), 17);
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let bits = |c: &Checkpoint| c.params.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&ck));
    assert_eq!(back.meta.iteration, 17);
    assert_eq!(back.meta.shape, shape);
}
