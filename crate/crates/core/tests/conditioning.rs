use degat_core::conditioning::bias::{bucket_indices, pairwise_distances, BiasMatrix, DEFAULT_BUCKETS};
use degat_core::conditioning::camera::{condition_additive, condition_cross_attention, condition_film};
use degat_core::conditioning::{Activation, AttentionBias, Mlp2, MultiHeadAttention, TokenConditioning};
use degat_core::numerics::{Matrix, Vector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn variant_names_round_trip() {
    for v in [TokenConditioning::None, TokenConditioning::Additive, TokenConditioning::Film, TokenConditioning::CrossAttn] {
        assert_eq!(v.to_string().parse::<TokenConditioning>().unwrap(), v);
    }
    for v in [AttentionBias::None, AttentionBias::Bucket, AttentionBias::MlpBias, AttentionBias::LogAffinity] {
        assert_eq!(v.to_string().parse::<AttentionBias>().unwrap(), v);
    }
    assert!("filmic".parse::<TokenConditioning>().is_err());
}

#[test]
fn zero_output_heads_leave_the_token_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let c = 8;
    let base = Vector::random_uniform(c, 1.0, &mut rng);
    let prior = Vector::random_uniform(c, 5.0, &mut rng);
    let tokens = Matrix::random_uniform(12, c, 5.0, &mut rng);
    let add = Mlp2::init_zero_output(c, 2 * c, c, Activation::Gelu, &mut rng);
    let film = Mlp2::init_zero_output(c, 2 * c, 2 * c, Activation::Gelu, &mut rng);
    let attn = MultiHeadAttention::init_zero_output(c, 2, &mut rng).unwrap();
    let ffn = Mlp2::init_zero_output(c, 2 * c, c, Activation::Gelu, &mut rng);
    assert_eq!(condition_additive(&base, &prior, &add).unwrap().conditioned, base);
    assert_eq!(condition_film(&base, &prior, &film).unwrap().conditioned, base);
    assert_eq!(condition_cross_attention(&base, &tokens, &attn, &ffn).unwrap().conditioned, base);
}

#[test]
fn trained_heads_move_the_token() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let base = Vector::random_uniform(4, 1.0, &mut rng);
    let prior = Vector::random_uniform(4, 1.0, &mut rng);
    let film = Mlp2::init(4, 8, 8, Activation::Gelu, &mut rng);
    assert_ne!(condition_film(&base, &prior, &film).unwrap().conditioned, base);
}

#[test]
fn heads_must_divide_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    assert!(MultiHeadAttention::init(6, 4, &mut rng).is_err());
}

#[test]
fn padding_shifts_bias_by_offset() {
    let m = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let padded = BiasMatrix::broadcast(&m, 2).padded(1);
    assert_eq!(padded.n_heads(), 2);
    assert_eq!(padded.heads[1].shape(), (3, 3));
    assert_eq!(padded.heads[1][(2, 1)], 3.0);
    assert_eq!(padded.heads[1][(0, 0)], 0.0);
}

proptest! {
    #[test]
    fn buckets_are_in_range_and_symmetric(l in 2usize..20, c in 1usize..6, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::random_uniform(l, c, 1.0, &mut rng);
        let idx = bucket_indices(&x, DEFAULT_BUCKETS).unwrap();
        let d = pairwise_distances(&x);
        for i in 0..l {
            for j in 0..l {
                prop_assert!(idx.get(i, j) < DEFAULT_BUCKETS);
                prop_assert_eq!(idx.get(i, j), idx.get(j, i));
                prop_assert!((d[(i, j)] - d[(j, i)]).abs() < 1e-15);
            }
        }
    }
}
