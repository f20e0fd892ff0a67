use partcoord::checkpoint::Container;
use partcoord::metrics::{
    diversity, fid, mm_dist, mm_dist_features, mmodality, protocol_run, r_precision, r_precision_features, summarize,
    ContrastiveExtractor, EvalBatch, EvalTriple, ExtractorConfig, FeatureExtractor, MetricRun, MotionGenerator,
    DEFAULT_MMODALITY_REPEATS, DEFAULT_REPEATS,
};
use partcoord::partition::{Layout, Motion};
use partcoord::rng::derive_seed;
use partcoord::tape::Matrix;
use partcoord::Result;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn layout() -> Layout {
    Layout { id: "f2".into(), width: 2 }
}

fn point(x: f64, y: f64) -> Motion {
    Motion::new(layout(), Matrix::from_rows(&[vec![x, y]])).unwrap()
}

/// Motion feature = first frame; prompt `"<x> <y>"` maps to that point.
struct FirstFrame;

impl FeatureExtractor for FirstFrame {
    fn feature_dim(&self) -> usize {
        2
    }

    fn motion_embed(&self, m: &Motion) -> Result<Vec<f64>> {
        Ok(m.features().row(0).to_vec())
    }

    fn text_embed(&self, prompt: &str) -> Result<Vec<f64>> {
        Ok(prompt.split(' ').map(|v| v.parse().unwrap()).collect())
    }
}

fn sample_variance(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0))
}

proptest! {
    #[test]
    fn one_dimensional_fid_matches_closed_form(
        a in prop::collection::vec(-5.0f64..5.0, 2..30),
        b in prop::collection::vec(-5.0f64..5.0, 2..30),
    ) {
        let (ma, va) = sample_variance(&a);
        let (mb, vb) = sample_variance(&b);
        let want = (ma - mb).powi(2) + (va.sqrt() - vb.sqrt()).powi(2);
        let fa = Matrix::from_vec(a.len(), 1, a.clone());
        let fb = Matrix::from_vec(b.len(), 1, b.clone());
        let got = fid(&fa, &fb).unwrap();
        prop_assert!((got - want).abs() < 1e-9 * (1.0 + want), "{} vs {}", got, want);
        prop_assert!((got - fid(&fb, &fa).unwrap()).abs() < 1e-9 * (1.0 + want));
    }

    #[test]
    fn fid_is_symmetric_and_zero_on_itself(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Matrix::from_vec(20, 5, (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let b = Matrix::from_vec(30, 5, (0..150).map(|_| rng.gen_range(-1.0..2.0)).collect());
        prop_assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-9);
        prop_assert!(fid(&a, &a).unwrap().abs() < 1e-9);
    }

    #[test]
    fn diversity_ignores_translation(seed in 0u64..1000, shift in -10.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Matrix::from_vec(12, 3, (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let moved = f.map(|v| v + shift);
        let a = diversity(&f, 5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = diversity(&moved, 5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn wider_top_k_never_scores_lower(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Matrix::from_vec(40, 3, (0..120).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let noisy = t.data().iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect();
        let m = Matrix::from_vec(40, 3, noisy);
        let r = r_precision_features(&t, &m, &[1, 2, 3], &mut rng).unwrap();
        prop_assert!(r[0] <= r[1] && r[1] <= r[2]);
    }

    #[test]
    fn mm_dist_scales_with_features(c in 0.1f64..10.0) {
        let t = Matrix::from_rows(&[vec![0.0, 1.0], vec![2.0, -1.0]]);
        let m = Matrix::from_rows(&[vec![3.0, 4.0], vec![0.5, 0.5]]);
        let base = mm_dist_features(&t, &m).unwrap();
        let scaled = mm_dist_features(&t.map(|v| v * c), &m.map(|v| v * c)).unwrap();
        prop_assert!((scaled - c * base).abs() < 1e-9 * (1.0 + scaled));
    }
}

#[test]
fn diversity_expectation_by_enumeration() {
    // N = 4, d = 1 with features {0, 0, 2, 2}: 8 of the 12 ordered draws pair
    // unequal values, so the expectation is 2 * 8/12.
    let f = Matrix::from_vec(4, 1, vec![0.0, 0.0, 2.0, 2.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws = 20_000;
    let mut total = 0.0;
    for _ in 0..draws {
        let v = diversity(&f, 1, &mut rng).unwrap();
        assert!(v == 0.0 || v == 2.0);
        total += v;
    }
    assert!((total / draws as f64 - 4.0 / 3.0).abs() < 0.03);
    assert_eq!(diversity(&Matrix::filled(6, 2, 1.5), 3, &mut rng).unwrap(), 0.0);
    assert!(diversity(&f, 3, &mut rng).is_err());
}

/// Returns `first` and `second` alternately, or uniformly at random.
struct TwoMotions {
    random: bool,
    calls: usize,
}

impl MotionGenerator for TwoMotions {
    fn is_stochastic(&self) -> bool {
        true
    }

    fn generate(&mut self, _prompt: &str, rng: &mut dyn RngCore) -> Result<Motion> {
        self.calls += 1;
        let second = if self.random { rng.gen_bool(0.5) } else { self.calls % 2 == 0 };
        Ok(if second { point(3.0, 0.0) } else { point(0.0, 0.0) })
    }
}

struct Fixed(bool);

impl MotionGenerator for Fixed {
    fn is_stochastic(&self) -> bool {
        self.0
    }

    fn generate(&mut self, _prompt: &str, _rng: &mut dyn RngCore) -> Result<Motion> {
        Ok(point(1.0, 1.0))
    }
}

#[test]
fn mmodality_of_stub_generators() {
    let prompts = ["0 0", "1 1", "2 2"];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(mmodality(&prompts, &mut Fixed(true), &FirstFrame, 10, &mut rng).unwrap(), 0.0);
    let err = mmodality(&prompts, &mut Fixed(false), &FirstFrame, 10, &mut rng).unwrap_err().to_string();
    assert!(err.contains("stochastic"), "{err}");

    let mut alternating = TwoMotions { random: false, calls: 0 };
    assert_eq!(mmodality(&prompts, &mut alternating, &FirstFrame, 10, &mut rng).unwrap(), 3.0);
    // Random members differ with probability 1/2, so the expectation is 1.5.
    let mut coin = TwoMotions { random: true, calls: 0 };
    let v = mmodality(&prompts, &mut coin, &FirstFrame, 2000, &mut rng).unwrap();
    assert!((v - 1.5).abs() < 0.06, "{v}");
}

fn batch(n: usize, shuffle_seed: Option<u64>) -> EvalBatch {
    let mut items: Vec<EvalTriple> = (0..n)
        .map(|i| {
            let (x, y) = ((i % 7) as f64, (i / 7) as f64);
            EvalTriple {
                id: format!("m{i:03}"),
                prompt: format!("{x} {y}"),
                real: point(x, y),
                generated: point(x + 0.3 * (i % 3) as f64, y - 0.2),
            }
        })
        .collect();
    if let Some(s) = shuffle_seed {
        items.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    }
    EvalBatch::new(items).unwrap()
}

#[test]
fn batch_metrics_ignore_storage_order() {
    let a = batch(40, None);
    let b = batch(40, Some(9));
    let ra = r_precision(&a, &FirstFrame, &[1, 2, 3], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let rb = r_precision(&b, &FirstFrame, &[1, 2, 3], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(mm_dist(&a, &FirstFrame).unwrap(), mm_dist(&b, &FirstFrame).unwrap());
    assert!(EvalBatch::new(Vec::new()).is_err());
}

#[test]
fn oracle_extractor_is_perfect_and_small_batches_are_rejected() {
    let exact = (0..32).map(|i| EvalTriple {
        id: format!("e{i}"),
        prompt: format!("{i} 0"),
        real: point(i as f64, 0.0),
        generated: point(i as f64, 0.0),
    });
    let b = EvalBatch::new(exact.collect()).unwrap();
    assert_eq!(r_precision(&b, &FirstFrame, &[1, 2, 3], &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), vec![1.0; 3]);
    assert_eq!(mm_dist(&b, &FirstFrame).unwrap(), 0.0);
    let small = batch(31, None);
    assert!(r_precision(&small, &FirstFrame, &[1], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn protocol_uses_distinct_derived_seeds() {
    assert_eq!((DEFAULT_REPEATS, DEFAULT_MMODALITY_REPEATS), (20, 5));
    let mut seen = Vec::new();
    let rows = protocol_run(
        vec![
            MetricRun {
                name: "seeds".into(),
                repeats: 4,
                run: Box::new(|s| {
                    seen.push(s);
                    Ok(s as f64)
                }),
            },
            MetricRun { name: "constant".into(), repeats: 20, run: Box::new(|_| Ok(0.5)) },
        ],
        42,
    )
    .unwrap();
    assert_eq!(seen, (0..4).map(|r| derive_seed(42, "eval/seeds", r)).collect::<Vec<_>>());
    assert_eq!(rows[1].half_width, 0.0);
    assert_eq!(rows[1].mean, 0.5);
    assert_eq!(rows[0].repeats, 4);
    let s = summarize("x", &[1.0, 3.0]).unwrap();
    assert_eq!((s.mean, s.half_width), (2.0, 1.96));
}

#[test]
fn contrastive_extractor_round_trips_and_is_deterministic() {
    let cfg = ExtractorConfig::new(2);
    let ex = ContrastiveExtractor::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let m = Motion::new(layout(), Matrix::from_rows(&[vec![0.1, 0.2], vec![0.3, -0.4], vec![1.0, 0.0]])).unwrap();
    let f = ex.motion_embed(&m).unwrap();
    assert_eq!(f.len(), ex.feature_dim());
    assert_eq!(f, ex.motion_embed(&m).unwrap());
    let back =
        ContrastiveExtractor::from_container(&Container::from_bytes(&ex.to_container().to_bytes()).unwrap()).unwrap();
    assert_eq!(back.motion_embed(&m).unwrap(), f);
    assert_eq!(back.text_embed("a person walks").unwrap(), ex.text_embed("a person walks").unwrap());
}
