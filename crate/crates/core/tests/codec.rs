use partcoord::codec::{
    quantize, quantize_rows, straight_through_compose, vqvae_loss, Codebook, CodecConfig, LatentSequence, PartCodec,
};
use partcoord::partition::{PartId, PartMotion};
use partcoord::tape::{Graph, Matrix, ParamStore};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn brute_force(e: &[f64], codes: &Matrix) -> usize {
    let d: Vec<f64> = codes.iter_rows().map(|c| c.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
    let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
    d.iter().position(|&x| x == min).unwrap()
}

/// (latents, codes) with small-integer entries so that ties are frequent.
fn instance() -> impl Strategy<Value = (Matrix, Matrix)> {
    (1usize..40, 1usize..6, 1usize..6).prop_flat_map(|(j, d, rows)| {
        (prop::collection::vec(-2i8..=2, j * d), prop::collection::vec(-2i8..=2, rows * d)).prop_map(move |(c, e)| {
            let f = |v: Vec<i8>, r| Matrix::from_vec(r, d, v.into_iter().map(f64::from).collect());
            (f(e, rows), f(c, j))
        })
    })
}

proptest! {
    #[test]
    fn quantizer_matches_brute_force((latents, codes) in instance()) {
        let got = quantize_rows(&latents, &codes).unwrap();
        for (r, &g) in got.iter().enumerate() {
            prop_assert_eq!(g, brute_force(latents.row(r), &codes));
        }
    }

    #[test]
    fn quantize_is_idempotent_on_its_output((latents, codes) in instance()) {
        let book = Codebook::new(codes).unwrap();
        let q = quantize(&LatentSequence { vectors: latents }, &book).unwrap();
        for (r, &j) in q.indices.iter().enumerate() {
            prop_assert_eq!(q.vectors.row(r), book.codes.row(j));
        }
        let again = quantize(&LatentSequence { vectors: q.vectors.clone() }, &book).unwrap();
        // A duplicated code maps back to its first copy, which holds the same vector.
        prop_assert_eq!(&again.vectors, &q.vectors);
        for (a, b) in again.indices.iter().zip(&q.indices) {
            prop_assert!(a <= b);
        }
    }

    #[test]
    fn loss_terms_sum_and_reconstruction_is_nonnegative(
        p in prop::collection::vec(-3.0f64..3.0, 12),
        r in prop::collection::vec(-3.0f64..3.0, 12),
        e in prop::collection::vec(-1.0f64..1.0, 4),
        q in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        let cfg = config();
        let target = PartMotion { part: PartId::Root, features: Matrix::from_vec(4, 3, p.clone()) };
        let recon = PartMotion { part: PartId::Root, features: Matrix::from_vec(4, 3, r) };
        let lat = LatentSequence { vectors: Matrix::from_vec(1, 4, e) };
        let qs = partcoord::codec::QuantizedSequence { indices: vec![0], vectors: Matrix::from_vec(1, 4, q) };
        let l = vqvae_loss(&target, &recon, &lat, &qs, &cfg).unwrap();
        prop_assert_eq!(((l.reconstruction + l.codebook) + l.commitment) + l.velocity, l.total);
        prop_assert!(l.reconstruction >= 0.0);
        let own = vqvae_loss(&target, &target, &lat, &qs, &cfg).unwrap();
        prop_assert_eq!(own.reconstruction, 0.0);
    }
}

fn config() -> CodecConfig {
    CodecConfig {
        input_dim: 3,
        codebook_size: 16,
        code_dim: 4,
        downsample: 4,
        commitment_weight: 1.0,
        velocity_weight: 0.5,
        width: 8,
        res_blocks: 1,
    }
}

#[test]
fn straight_through_value_and_gradient() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let e = g.input(Matrix::scalar(0.2));
    let q = g.input(Matrix::scalar(0.7));
    let z = straight_through_compose(&mut g, e, q);
    assert_eq!(g.value(z).item(), 0.7);
    // loss = z^2 / 2, so d loss / d z = z = 0.7 and the surrogate passes it to e.
    let sq = g.square(z);
    let loss = g.scale(sq, 0.5);
    let back = g.backward(loss);
    assert!((back.wrt(e).unwrap().item() - 0.7).abs() < 1e-15);
    assert!(back.wrt(q).map_or(true, |m| m.item() == 0.0));
}

#[test]
fn velocity_term_matches_hand_computation() {
    let cfg = CodecConfig { velocity_weight: 0.5, ..config() };
    let target = PartMotion { part: PartId::Root, features: Matrix::zeros(4, 3) };
    // Reconstruction ramps by 1 per frame in every column: each frame difference is 1.
    let ramp: Vec<f64> = (0..4).flat_map(|f| [f as f64; 3]).collect();
    let recon = PartMotion { part: PartId::Root, features: Matrix::from_vec(4, 3, ramp) };
    let lat = LatentSequence { vectors: Matrix::zeros(1, 4) };
    let q = partcoord::codec::QuantizedSequence { indices: vec![0], vectors: Matrix::zeros(1, 4) };
    let l = vqvae_loss(&target, &recon, &lat, &q, &cfg).unwrap();
    assert!((l.velocity - 0.5).abs() < 1e-15);
    let mean_sq = (0.0 + 1.0 + 4.0 + 9.0) / 4.0;
    assert!((l.reconstruction - mean_sq).abs() < 1e-15);
}

#[test]
fn round_trip_preserves_lengths_and_is_deterministic() {
    let codec = PartCodec::new(PartId::LeftArm, config(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let p = PartMotion {
        part: PartId::LeftArm,
        features: Matrix::from_vec(196, 3, (0..196 * 3).map(|i| (i as f64 * 0.01).cos()).collect()),
    };
    let e = codec.encode(&p).unwrap();
    assert_eq!(e.len(), 49);
    let tokens = codec.tokenize(&p).unwrap();
    assert_eq!(tokens, codec.tokenize(&p).unwrap());
    assert!(tokens.iter().all(|&t| t < 16));
    let decoded = codec.decode_indices(&tokens).unwrap();
    assert_eq!(decoded.frames(), 196);
    assert_eq!(decoded, codec.reconstruct(&p).unwrap());
}
