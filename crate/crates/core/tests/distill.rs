mod common;

use common::scenarios::{bridge, distill, distill_config, encoder_config, non_decreasing, smooth, strictly_decreasing, task};
use lowres_mt::autodiff::{Graph, Tensor};
use lowres_mt::corpus::{gen_synthetic, ParallelCorpus, SentencePair};
use lowres_mt::distill::{
    cross_lingual_cosine, distill_loss, distill_loss_graph, distill_terms, pretrain_teacher, read_embeddings,
    train_distill, write_embeddings, Bridge, LossNorm, MixtureSampler,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn hand_fixture_loss_is_two() {
    let tm = vec![vec![1.0, 0.0]];
    let ss = vec![vec![0.0, 1.0]];
    let st = vec![vec![1.0, 0.0]];
    assert_eq!(distill_terms(&tm, &ss, &st, LossNorm::SumSquares).unwrap(), vec![(2.0, 0.0)]);
    assert_eq!(distill_loss(&tm, &ss, &st, LossNorm::SumSquares).unwrap(), 2.0);

    let mut g = Graph::<f64>::new();
    let t = |v: &[f64]| Tensor::new(&[1, 2], v.to_vec()).unwrap();
    let (a, b, c) = (g.constant(t(&[1.0, 0.0])), g.constant(t(&[0.0, 1.0])), g.constant(t(&[1.0, 0.0])));
    let l = distill_loss_graph(&mut g, a, b, c, LossNorm::SumSquares).unwrap();
    assert_eq!(g.value(l).item(), 2.0);
}

#[test]
fn perfect_student_has_zero_loss() {
    let e = vec![vec![0.6, 0.8], vec![1.0, 0.0]];
    assert_eq!(distill_loss(&e, &e, &e, LossNorm::SumSquares).unwrap(), 0.0);
}

#[test]
fn loss_terms_are_non_negative_and_separable() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut rows = |n: usize| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    };
    let (tm, ss, st) = (rows(5), rows(5), rows(5));
    let terms = distill_terms(&tm, &ss, &st, LossNorm::SumSquares).unwrap();
    assert!(terms.iter().all(|&(a, b)| a >= 0.0 && b >= 0.0));
    // Swapping the student's two sides moves only the second term.
    let swapped = distill_terms(&tm, &st, &ss, LossNorm::SumSquares).unwrap();
    for (x, y) in terms.iter().zip(&swapped) {
        assert_eq!(x.0, y.1);
        assert_eq!(x.1, y.0);
    }
    let mean = distill_loss(&tm, &ss, &st, LossNorm::MeanSquares).unwrap();
    let sum = distill_loss(&tm, &ss, &st, LossNorm::SumSquares).unwrap();
    assert!((sum / 8.0 - mean).abs() < 1e-12);
}

#[test]
fn distillation_raises_cross_lingual_cosine() {
    let t = task(128, 1);
    let run = distill(&t, &t.corpus, 100, 1);
    let first = &run.history[0];
    let last = run.history.last().unwrap();
    assert_eq!(first.epoch, 0);
    assert_eq!(last.epoch, 100);
    assert!(last.loss < run.history[1].loss);
    assert!(
        last.mean_cosine - first.mean_cosine >= 0.2,
        "cosine {} -> {}",
        first.mean_cosine,
        last.mean_cosine
    );
    assert_eq!(run.teacher_hash_before, run.teacher_hash_after);
}

#[test]
fn zero_epochs_leave_the_student_unchanged() {
    let t = task(16, 2);
    let mc = encoder_config(t.vocab.len());
    let mut cfg = distill_config(0);
    cfg.teacher_epochs = 0;
    let teacher = pretrain_teacher::<f32>(&mc, &t.bpe, &t.vocab, &[], &cfg, 1).unwrap();
    let out = train_distill(&teacher, teacher.clone(), &t.bpe, &t.vocab, &t.corpus, &cfg, 1, |_| {}).unwrap();
    assert_eq!(out.student, teacher);
    assert_eq!(out.history.len(), 1);
}

#[test]
fn same_sentence_on_both_sides_has_cosine_one() {
    let t = task(16, 2);
    let mc = encoder_config(t.vocab.len());
    let mut cfg = distill_config(0);
    cfg.teacher_epochs = 0;
    let enc = pretrain_teacher::<f64>(&mc, &t.bpe, &t.vocab, &[], &cfg, 1).unwrap();
    let same = ParallelCorpus::new(
        "a",
        "a",
        t.corpus.pairs.iter().map(|p| SentencePair::new(p.src.as_str(), p.src.as_str())).collect(),
    );
    for c in cross_lingual_cosine(&enc, &t.bpe, &t.vocab, &same).unwrap() {
        assert!((c - 1.0).abs() < 1e-6);
    }
    for c in cross_lingual_cosine(&enc, &t.bpe, &t.vocab, &t.corpus).unwrap() {
        assert!((-1.0..=1.0).contains(&c));
    }
}

#[test]
fn bridge_is_affine() {
    let b = Bridge::<f64>::new(4, 6, 3);
    let mut b2 = b.clone();
    for x in b2.params.get_mut("bridge.b").unwrap().data_mut() {
        *x = 0.25;
    }
    let x = [0.5, -1.0, 2.0, 0.1];
    let ax: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
    let (y, ya, zero) = (b2.apply(&x), b2.apply(&ax), b2.apply(&[0.0; 4]));
    for i in 0..6 {
        // bridge(αx) = α·bridge(x) − (α − 1)·bias
        assert!((ya[i] - (3.0 * y[i] - 2.0 * zero[i])).abs() < 1e-12);
    }
}

#[test]
fn bridge_stage_reproduces_training_curve_shape() {
    let run = bridge(1);
    let loss: Vec<f64> = run.history.iter().map(|r| r.train_loss).collect();
    let bleu: Vec<f64> = run.history.iter().map(|r| r.bleu).collect();
    assert!(strictly_decreasing(&smooth(&loss, 5)), "loss {loss:?}");
    assert!(non_decreasing(&smooth(&bleu, 5)), "bleu {bleu:?}");
    assert_eq!(run.student_hash_before, run.student_hash_after);
}

#[test]
fn mixture_sampler_respects_ratios() {
    let a = gen_synthetic(100, 1, 24);
    let b = gen_synthetic(100, 2, 24);
    let m = MixtureSampler::new(vec![(a.clone(), 0.5), (b, 0.5)]).unwrap();
    assert_eq!(m.allocation(40), vec![20, 20]);
    let s = m.sample(40, 3);
    assert_eq!(s.len(), 40);
    let from_a = s.pairs.iter().filter(|p| a.pairs.contains(p)).count();
    assert!(from_a >= 20);
    assert_eq!(m.sample(40, 3), s);
    assert!(MixtureSampler::new(vec![(a, 0.0)]).is_err());
}

#[test]
fn embedding_dump_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.bin");
    let rows = vec![vec![0.5, -0.25, 1.0], vec![0.0, 2.0, -3.5]];
    let meta = write_embeddings(&path, &rows, "fr").unwrap();
    assert_eq!((meta.dim, meta.count), (3, 2));
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 2 * 3 * 4);
    let (back_meta, back) = read_embeddings(&path).unwrap();
    assert_eq!(back_meta, meta);
    assert_eq!(back, rows);
}
