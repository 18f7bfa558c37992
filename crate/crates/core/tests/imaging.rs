mod support;

use fundus_core::imaging::{clahe_plane, ClaheParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::clahe_ref::{clahe_reference, global_he};

#[test]
fn two_tone_matches_scalar_reference() {
    let plane: Vec<f32> = (0..256).map(|i| if (i % 16) < 6 || i / 16 > 11 { 0.2 } else { 0.7 }).collect();
    let p = ClaheParams { tiles_x: 2, tiles_y: 2, ..ClaheParams::default() };
    assert_eq!(clahe_plane(&plane, 16, 16, &p).unwrap(), clahe_reference(&plane, 16, 16, &p));
}

#[test]
fn random_images_match_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let (w, h) = (rng.random_range(8..24u32), rng.random_range(8..24u32));
        let plane: Vec<f32> = (0..w * h).map(|_| rng.random::<f32>()).collect();
        let p = ClaheParams {
            tiles_x: rng.random_range(1..5),
            tiles_y: rng.random_range(1..5),
            clip_limit: rng.random_range(0.005..0.2),
            bins: [16, 64, 256][rng.random_range(0..3)],
        };
        assert_eq!(clahe_plane(&plane, w, h, &p).unwrap(), clahe_reference(&plane, w, h, &p), "{w}x{h} {p:?}");
    }
}

#[test]
fn single_tile_is_global_equalisation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let plane: Vec<f32> = (0..300).map(|_| rng.random::<f32>().powi(2)).collect();
    let p = ClaheParams { tiles_x: 1, tiles_y: 1, clip_limit: 1.0, bins: 256 };
    assert_eq!(clahe_plane(&plane, 20, 15, &p).unwrap(), global_he(&plane, 256));
}
