use partcoord::codec::CodecConfig;
use partcoord::coordinator::{PartCoordStack, PartTokenGrid, StackConfig, TextCondition};
use partcoord::datahub::synth_generate;
use partcoord::metrics::ExtractorConfig;
use partcoord::partition::{PartId, PartitionScheme};
use partcoord::trainer::{
    gradcheck, heldout_nll, split_all, train_codec, train_extractor, train_generator, AugmentationConfig,
    GeneratorOptions, GradcheckOptions, GradcheckTarget, OptimizerConfig, TokenSample, VqvaeOptions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_codec(input_dim: usize) -> CodecConfig {
    CodecConfig {
        input_dim,
        codebook_size: 16,
        code_dim: 8,
        downsample: 4,
        commitment_weight: 1.0,
        velocity_weight: 0.5,
        width: 8,
        res_blocks: 1,
    }
}

fn codec_opt(steps: u64) -> OptimizerConfig {
    let mut o = OptimizerConfig::codec_full().desk(steps);
    o.batch_size = 4;
    o.schedule.initial = 2e-3;
    o.schedule.final_lr = 2e-4;
    o
}

fn toy_stack() -> StackConfig {
    StackConfig {
        streams: 2,
        vocab: 5,
        model_dim: 8,
        layers: 2,
        heads: 2,
        ffn_mult: 2,
        dropout: 0.1,
        max_tokens: 6,
        text_dim: 4,
        text_buckets: 16,
        coordination: true,
        ln_eps: 1e-5,
    }
}

/// Part 1 copies part 0 one position later, so coordination carries signal.
fn token_data(n: usize, seed: u64) -> Vec<TokenSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(2..=6);
            let a: Vec<usize> = (0..len).map(|_| rng.gen_range(0..5)).collect();
            let mut b = vec![0];
            b.extend_from_slice(&a[..len - 1]);
            let cond = TextCondition::new(if i % 2 == 0 { "walk forward" } else { "turn around" });
            TokenSample { grid: PartTokenGrid::new(vec![a, b]).unwrap(), cond }
        })
        .collect()
}

fn gen_opt(steps: u64) -> OptimizerConfig {
    let mut o = OptimizerConfig::generator_full().desk(steps);
    o.batch_size = 4;
    o.schedule.initial = 3e-3;
    o.schedule.final_lr = 3e-4;
    o
}

#[test]
fn codec_training_is_reproducible_and_reduces_loss() {
    let corpus = synth_generate(6, 64, 3).unwrap();
    let parts = split_all(&corpus.motions, &PartitionScheme::smpl22()).unwrap();
    let arm = &parts[PartId::LeftArm.index()];
    let cfg = small_codec(arm[0].features.cols());
    let opts = VqvaeOptions { log_every: 1, ..Default::default() };
    let a = train_codec(PartId::LeftArm, arm, cfg.clone(), &codec_opt(60), &opts).unwrap();
    let b = train_codec(PartId::LeftArm, arm, cfg.clone(), &codec_opt(60), &opts).unwrap();
    assert_eq!(a.loss, b.loss);
    assert_eq!(a.codec.codebook(), b.codec.codebook());
    let first = a.reconstruction.points[0].1;
    let last = a.reconstruction.last().unwrap();
    assert!(last < first, "reconstruction {first} -> {last}");
    let mut other = codec_opt(60);
    other.seed = 1;
    assert_ne!(train_codec(PartId::LeftArm, arm, cfg, &other, &opts).unwrap().loss, a.loss);
}

#[test]
fn codec_training_rejects_bad_windows() {
    let corpus = synth_generate(2, 40, 3).unwrap();
    let parts = split_all(&corpus.motions, &PartitionScheme::smpl22()).unwrap();
    let p = &parts[0];
    let cfg = small_codec(p[0].features.cols());
    for window in [0, 6, 64] {
        let opts = VqvaeOptions { window, ..Default::default() };
        assert!(train_codec(PartId::RightLeg, p, cfg.clone(), &codec_opt(5), &opts).is_err(), "window {window}");
    }
}

#[test]
fn generator_training_is_reproducible_and_learns() {
    let train = token_data(64, 1);
    let val = token_data(16, 2);
    let opts = GeneratorOptions { val_every: 100, log_every: 1, ..Default::default() };
    let aug = AugmentationConfig::default();
    let a = train_generator(&train, &val, toy_stack(), &gen_opt(300), &aug, &opts, None).unwrap();
    let b = train_generator(&train, &val, toy_stack(), &gen_opt(300), &aug, &opts, None).unwrap();
    assert_eq!(a.loss, b.loss);
    assert_eq!(a.val_nll, b.val_nll);
    assert_eq!(a.val_nll.points.iter().map(|p| p.0).collect::<Vec<_>>(), vec![100, 200, 300]);
    let init = PartCoordStack::new(toy_stack(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let before = heldout_nll(&init, &val).unwrap();
    let after = heldout_nll(&a.final_model, &val).unwrap();
    assert!(after < before, "held-out NLL {before} -> {after}");
    assert!(a.best_eval.is_none());
}

#[test]
fn eval_hook_keeps_the_first_lowest_fid() {
    let train = token_data(32, 3);
    let fids = [5.0, 2.0, 3.0, 2.0];
    let mut snapshots = Vec::new();
    let mut calls = 0;
    let mut hook = |m: &PartCoordStack, step: u64| {
        snapshots.push((step, m.clone()));
        calls += 1;
        Ok(fids[calls - 1])
    };
    let opts = GeneratorOptions { eval_every: 10, ..Default::default() };
    let run = train_generator(&train, &[], toy_stack(), &gen_opt(40), &AugmentationConfig::OFF, &opts, Some(&mut hook))
        .unwrap();
    assert_eq!(run.evals.iter().map(|e| e.step).collect::<Vec<_>>(), vec![10, 20, 30, 40]);
    assert_eq!(run.best_eval, Some(1));
    let probe = &train[0];
    let want = snapshots[1].1.forward(&probe.grid, &probe.cond).unwrap();
    assert_eq!(run.best_model.forward(&probe.grid, &probe.cond).unwrap(), want);
    assert_ne!(run.final_model.forward(&probe.grid, &probe.cond).unwrap(), want);
}

#[test]
fn fully_masked_inputs_still_train() {
    let train = token_data(16, 4);
    let aug = AugmentationConfig { token_corrupt_prob: 0.0, part_mask_prob: 1.0 };
    let run =
        train_generator(&train, &[], toy_stack(), &gen_opt(20), &aug, &GeneratorOptions::default(), None).unwrap();
    assert!(run.loss.points.iter().all(|p| p.1.is_finite()));
    let bad = AugmentationConfig { token_corrupt_prob: 1.5, part_mask_prob: 0.0 };
    assert!(train_generator(&train, &[], toy_stack(), &gen_opt(20), &bad, &GeneratorOptions::default(), None).is_err());
}

#[test]
fn extractor_training_reduces_its_loss() {
    let corpus = synth_generate(24, 40, 6).unwrap();
    let pairs: Vec<_> = corpus.motions.into_iter().zip(corpus.prompts).collect();
    let cfg = ExtractorConfig { hidden: 16, feature_dim: 8, text_buckets: 64, ..ExtractorConfig::new(67) };
    let mut opt = OptimizerConfig::codec_full().desk(200);
    opt.batch_size = 8;
    opt.schedule.initial = 3e-3;
    let (_, curve) = train_extractor(&pairs, cfg, &opt).unwrap();
    let head: f64 = curve.points[..3].iter().map(|p| p.1).sum::<f64>() / 3.0;
    let tail: f64 = curve.points[curve.points.len() - 3..].iter().map(|p| p.1).sum::<f64>() / 3.0;
    assert!(tail < head, "extractor loss {head} -> {tail}");
}

#[test]
fn gradient_harness_catches_a_scaled_codec_group() {
    let clean = gradcheck(GradcheckTarget::Codec, &GradcheckOptions::default()).unwrap();
    assert!(clean.passed(), "{}", clean.to_text());
    let name = clean.groups.iter().find(|g| g.name.starts_with("dec")).unwrap().name.clone();
    let faulty =
        gradcheck(GradcheckTarget::Codec, &GradcheckOptions { inject_fault: Some(name.clone()), ..Default::default() })
            .unwrap();
    assert!(!faulty.passed());
    assert!(faulty.groups.iter().filter(|g| !g.passed).all(|g| g.name.contains(&name)));
}
