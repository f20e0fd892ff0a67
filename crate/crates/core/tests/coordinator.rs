use partcoord::checkpoint::Container;
use partcoord::coordinator::{
    count_parameters, nll_loss, softmax, PartCoordStack, PartTokenGrid, SamplingStrategy, StackConfig, Termination,
    TextCondition,
};
use partcoord::tape::Matrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy(streams: usize, layers: usize) -> StackConfig {
    StackConfig {
        streams,
        vocab: 6,
        model_dim: 8,
        layers,
        heads: 2,
        ffn_mult: 2,
        dropout: 0.0,
        max_tokens: 8,
        text_dim: 4,
        text_buckets: 16,
        coordination: true,
        ln_eps: 1e-5,
    }
}

fn stack(cfg: StackConfig, seed: u64) -> PartCoordStack {
    PartCoordStack::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn cond() -> TextCondition {
    TextCondition::new("a person turns around")
}

fn grid_strategy(streams: usize) -> impl Strategy<Value = PartTokenGrid> {
    (1usize..=8).prop_flat_map(move |len| {
        prop::collection::vec(prop::collection::vec(0usize..6, len), streams)
            .prop_map(|parts| PartTokenGrid::new(parts).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn edits_never_reach_earlier_rows(grid in grid_strategy(3), part in 0usize..3, pos_seed in 0usize..100, tok in 0usize..6) {
        let model = stack(toy(3, 3), 1);
        let pos = pos_seed % grid.len();
        let mut edited = grid.clone();
        edited.parts[part][pos] = tok;
        let a = model.forward(&grid, &cond()).unwrap();
        let b = model.forward(&edited, &cond()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for r in 0..=pos {
                let same = x.row(r).iter().zip(y.row(r)).all(|(p, q)| p.to_bits() == q.to_bits());
                prop_assert!(same, "row {} moved after editing position {}", r, pos);
            }
        }
    }

    #[test]
    fn probabilities_normalize(grid in grid_strategy(2)) {
        let model = stack(toy(2, 2), 2);
        for lg in model.forward(&grid, &cond()).unwrap() {
            for r in lg.iter_rows() {
                prop_assert!((softmax(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn loss_is_mean_of_independent_part_losses(grid in grid_strategy(3)) {
        let model = stack(toy(3, 2), 3);
        let logits = model.forward(&grid, &cond()).unwrap();
        let end = 6;
        let mut per_part = Vec::new();
        for (lg, tokens) in logits.iter().zip(&grid.parts) {
            let mut targets = tokens.clone();
            targets.push(end);
            let ce: f64 = targets.iter().enumerate().map(|(r, &t)| -softmax(lg.row(r))[t].ln()).sum();
            per_part.push(ce / targets.len() as f64);
        }
        let want = per_part.iter().sum::<f64>() / 3.0;
        let got = nll_loss(&logits, &grid, Termination::End).unwrap();
        prop_assert!((got - want).abs() < 1e-10, "{} vs {}", got, want);
    }
}

#[test]
fn uniform_logits_over_513_classes() {
    let grid = PartTokenGrid::new(vec![vec![3, 7, 500]; 6]).unwrap();
    let logits = vec![Matrix::zeros(4, 513); 6];
    let loss = nll_loss(&logits, &grid, Termination::End).unwrap();
    assert!((loss - 513f64.ln()).abs() < 1e-12);
    assert!((loss - 6.2402).abs() < 1e-4);
}

#[test]
fn confident_correct_logits_drive_loss_to_zero() {
    let grid = PartTokenGrid::new(vec![vec![1, 0], vec![2, 2]]).unwrap();
    let logits: Vec<Matrix> = grid
        .parts
        .iter()
        .map(|tokens| {
            let mut m = Matrix::zeros(3, 4);
            for (r, &t) in tokens.iter().chain(std::iter::once(&3)).enumerate() {
                m.set(r, t, 1e3);
            }
            m
        })
        .collect();
    assert!(nll_loss(&logits, &grid, Termination::End).unwrap() < 1e-12);
    assert!(nll_loss(&logits, &PartTokenGrid::empty(0), Termination::End).is_err());
}

#[test]
fn greedy_sampling_is_deterministic_and_low_temperature_matches_it() {
    let model = stack(toy(3, 2), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = model.sample(&cond(), 8, SamplingStrategy::Greedy, &mut rng).unwrap();
    let b = model.sample(&cond(), 8, SamplingStrategy::Greedy, &mut rng).unwrap();
    assert_eq!(a, b);
    let cold = model.sample(&cond(), 8, SamplingStrategy::Temperature(1e-6), &mut rng).unwrap();
    assert_eq!(cold, a);
    let s1 =
        model.sample(&cond(), 8, SamplingStrategy::TopK { k: 3, temperature: 1.0 }, &mut ChaCha8Rng::seed_from_u64(5));
    let s2 =
        model.sample(&cond(), 8, SamplingStrategy::TopK { k: 3, temperature: 1.0 }, &mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(s1.unwrap(), s2.unwrap());
    assert!(model.sample(&cond(), 0, SamplingStrategy::Greedy, &mut rng).is_err());
    assert!(model.sample(&cond(), 9, SamplingStrategy::Greedy, &mut rng).is_err());
    assert!(model.sample(&cond(), 4, SamplingStrategy::Temperature(-1.0), &mut rng).is_err());
}

#[test]
fn root_always_ending_gives_an_empty_grid() {
    let mut model = stack(toy(6, 2), 5);
    let root = 5;
    let end = model.config.end_id();
    let bias = model.head_bias_id(root);
    model.params.get_mut(bias).set(0, end, 1e6);
    let grid = model.sample(&cond(), 8, SamplingStrategy::Greedy, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(grid.is_empty());
    assert_eq!(grid.num_parts(), 6);
}

#[test]
fn sampled_grids_are_aligned_and_in_range() {
    let model = stack(toy(4, 2), 6);
    let conds: Vec<TextCondition> =
        ["walk", "run fast", "jump", "sit down"].into_iter().map(TextCondition::new).collect();
    let grids =
        model.sample_batch(&conds, 8, SamplingStrategy::Temperature(1.0), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(grids.len(), 4);
    for g in grids {
        assert!(g.parts.iter().all(|p| p.len() == g.len() && p.iter().all(|&t| t < 6)));
    }
}

#[test]
fn coordination_block_properties() {
    // d_model = 1: normalization removes the input entirely, leaving the bias.
    let cfg = StackConfig { model_dim: 1, heads: 1, ..toy(3, 2) };
    let mut model = stack(cfg, 7);
    let block = model.coord_block(0, 1).unwrap();
    let ln_bias = *block.param_ids().last().unwrap();
    model.params.get_mut(ln_bias).set(0, 0, 0.3);
    for x in [-5.0, 0.0, 2.5] {
        let xs = [Matrix::scalar(x), Matrix::scalar(1.0), Matrix::scalar(-1.0)];
        assert_eq!(model.coordinate(1, &xs).unwrap()[0].item(), 0.3);
    }
    assert!(model.coord_block(0, 0).is_none());
    assert!(model.coord_block(0, 2).is_none());

    // Swapping identical other-part inputs changes nothing; swapping distinct ones does.
    let model = stack(toy(3, 2), 8);
    let x0 = Matrix::from_vec(2, 8, (0..16).map(|i| i as f64 * 0.1).collect());
    let y = Matrix::from_vec(2, 8, (0..16).map(|i| (i as f64).sin()).collect());
    let a = model.coordinate(1, &[x0.clone(), y.clone(), y.clone()]).unwrap();
    let z = Matrix::from_vec(2, 8, (0..16).map(|i| (i as f64).cos()).collect());
    let p = model.coordinate(1, &[x0.clone(), y.clone(), z.clone()]).unwrap();
    let q = model.coordinate(1, &[x0.clone(), z, y.clone()]).unwrap();
    let swapped = model.coordinate(1, &[x0.clone(), y.clone(), y.clone()]).unwrap();
    assert_eq!(a[0], swapped[0]);
    assert!(p[0].max_abs_diff(&q[0]) > 0.0, "concatenation order matters");
}

#[test]
fn block_parameters_act_only_at_their_layer() {
    let model = stack(toy(2, 3), 9);
    let grid = PartTokenGrid::new(vec![vec![1, 2, 3, 4], vec![0, 5, 1, 2]]).unwrap();
    let base = model.forward(&grid, &cond()).unwrap();
    let mut bumped = model.clone();
    let block = bumped.coord_block(0, 2).unwrap();
    let w = block.mlp_param_ids()[4];
    bumped.params.get_mut(w).data_mut().iter_mut().for_each(|v| *v += 0.5);
    let out = bumped.forward(&grid, &cond()).unwrap();
    for r in 0..base[0].rows() {
        let moved = base[0].row(r).iter().zip(out[0].row(r)).any(|(a, b)| a != b);
        assert!(moved, "position {r} unaffected by the shared block");
    }
    // No exchange follows the last block, so part 1 cannot see the change.
    assert!(base[1].max_abs_diff(&out[1]) == 0.0);
    let other = model.coord_block(0, 1).unwrap();
    for id in other.param_ids() {
        assert_eq!(model.params.get(id), bumped.params.get(id));
    }
}

#[test]
fn parameter_counts() {
    let zero = StackConfig { streams: 1, layers: 0, ..toy(1, 0) };
    let (d, v, t) = (8u64, 6u64, 8u64);
    let want = (v + 2) * d + (t + 1) * d + (4 * d + d) + 2 * d + (d * (v + 1) + v + 1) + 16 * 4;
    assert_eq!(count_parameters(&zero), want);
    assert_eq!(stack(zero, 0).count_parameters() as u64, want);
    let c = StackConfig::default();
    assert!(count_parameters(&c) < count_parameters(&c.monolithic(1024)));
}

#[test]
fn context_limit_and_checkpoint_round_trip() {
    let model = stack(toy(2, 2), 10);
    let long = PartTokenGrid::new(vec![vec![0; 9], vec![0; 9]]).unwrap();
    assert!(model.forward(&long, &cond()).is_err());
    let back =
        PartCoordStack::from_container(&Container::from_bytes(&model.to_container().to_bytes()).unwrap()).unwrap();
    let grid = PartTokenGrid::new(vec![vec![1, 2], vec![3, 4]]).unwrap();
    assert_eq!(back.forward(&grid, &cond()).unwrap(), model.forward(&grid, &cond()).unwrap());
    assert_eq!(back.config, model.config);
}
