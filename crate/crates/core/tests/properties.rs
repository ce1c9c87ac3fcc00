use capsroute::caps::{attention_scores, caps_dense_forward, coupling, predict, squash, CapsDenseParams, CapsTensor};
use capsroute::data::augment::{augment, shift, AugmentConfig};
use capsroute::data::idx::{encode_idx, parse_idx, IdxArray};
use capsroute::data::multimnist::{compose, frame_overlap, CANVAS_SIDE, DIGIT_SIDE, MAX_SHIFT};
use capsroute::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn caps(n: usize, count: usize, dim: usize, seed: u64) -> CapsTensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CapsTensor::new(Tensor::randn(&[n, count, dim], 1.0, &mut rng)).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // 1 - e^-n rounds to exactly 1 in f64 beyond n of about 37
    #[test]
    fn squash_bounded_and_aligned(count in 1usize..8, dim in 1usize..16, scale in 1e-3f64..4.0, seed: u64) {
        let s = caps(2, count, dim, seed);
        let s = CapsTensor::new(s.values().map(|v| v * scale)).unwrap();
        let v = squash(&s);
        for i in 0..2 {
            for c in 0..count {
                let (a, b) = (s.capsule(i, c), v.capsule(i, c));
                let (na, nb) = (norm(a), norm(b));
                prop_assert!((0.0..1.0).contains(&nb));
                prop_assert!((nb - (1.0 - (-na).exp())).abs() < 1e-12);
                if na >= 1e-6 {
                    let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
                    prop_assert!(cos >= 1.0 - 1e-9);
                }
            }
        }
    }

    #[test]
    fn agreement_symmetric_and_coupling_normalised(
        nl in 1usize..=16, nl1 in 1usize..=16, dl in 1usize..=16, dl1 in 1usize..=16, seed: u64,
    ) {
        let u = caps(1, nl, dl, seed);
        let p = CapsDenseParams::init(nl, dl, nl1, dl1, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let pred = predict(&u, &p.w).unwrap();
        let a = attention_scores(&pred, dl).unwrap();
        let ad = a.data();
        for j in 0..nl {
            for m in 0..nl {
                for k in 0..nl1 {
                    prop_assert!((ad[(j * nl + m) * nl1 + k] - ad[(m * nl + j) * nl1 + k]).abs() <= 1e-6);
                }
            }
        }
        let c = coupling(&a).unwrap();
        for row in c.data().chunks(nl1) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn routing_is_permutation_equivariant(nl in 2usize..8, nl1 in 1usize..6, d in 1usize..6, seed: u64) {
        let u = caps(1, nl, d, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let mut p = CapsDenseParams::init(nl, d, nl1, d, &mut rng);
        p.b = Tensor::randn(&[nl, nl1], 0.3, &mut rng);
        let perm: Vec<usize> = (0..nl).rev().collect();
        let block_u = d;
        let block_w = nl1 * d * d;
        let mut pu = Vec::new();
        let mut pw = Vec::new();
        let mut pb = Vec::new();
        for &j in &perm {
            pu.extend_from_slice(&u.values().data()[j * block_u..(j + 1) * block_u]);
            pw.extend_from_slice(&p.w.data()[j * block_w..(j + 1) * block_w]);
            pb.extend_from_slice(&p.b.data()[j * nl1..(j + 1) * nl1]);
        }
        let u2 = CapsTensor::new(Tensor::new(&[1, nl, d], pu).unwrap()).unwrap();
        let p2 = CapsDenseParams::new(Tensor::new(&[nl, nl1, d, d], pw).unwrap(), Tensor::new(&[nl, nl1], pb).unwrap()).unwrap();
        let (a, _) = caps_dense_forward(&u, &p).unwrap();
        let (b, _) = caps_dense_forward(&u2, &p2).unwrap();
        prop_assert!(a.values().max_abs_diff(b.values()) <= 1e-6);
    }

    #[test]
    fn idx_round_trip(dims in prop::collection::vec(1usize..6, 1..4), seed: u64) {
        let n: usize = dims.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<u8> = (0..n).map(|_| rand::Rng::random(&mut rng)).collect();
        let a = IdxArray { dims, data };
        let bytes = encode_idx(&a).unwrap();
        prop_assert_eq!(parse_idx(&bytes).unwrap(), a.clone());
        prop_assert!(parse_idx(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        prop_assert!(parse_idx(&extra).is_err());
    }

    #[test]
    fn augmentation_stays_in_range(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img: Vec<f32> = (0..784).map(|_| rand::Rng::random(&mut rng)).collect();
        let out = augment(&img, 28, 28, &AugmentConfig::default(), &mut rng);
        prop_assert_eq!(out.len(), 784);
        prop_assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let same = augment(&img, 28, 28, &AugmentConfig::identity(), &mut rng);
        prop_assert_eq!(same, img);
    }

    #[test]
    fn shift_preserves_interior_mass(dx in -2i32..=2, dy in -2i32..=2, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = vec![0.0f32; 784];
        for y in 2..26 {
            for x in 2..26 {
                img[y * 28 + x] = rand::Rng::random(&mut rng);
            }
        }
        let out = shift(&img, 28, 28, dx, dy);
        let (a, b): (f32, f32) = (img.iter().sum(), out.iter().sum());
        prop_assert!((a - b).abs() < 1e-3);
        let back = shift(&out, 28, 28, -dx, -dy);
        prop_assert_eq!(back, img);
    }

    #[test]
    fn overlay_is_pixelwise_max(
        sa in (-MAX_SHIFT..=MAX_SHIFT, -MAX_SHIFT..=MAX_SHIFT),
        sb in (-MAX_SHIFT..=MAX_SHIFT, -MAX_SHIFT..=MAX_SHIFT),
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f32> = (0..DIGIT_SIDE * DIGIT_SIDE).map(|_| rand::Rng::random(&mut rng)).collect();
        let b: Vec<f32> = (0..DIGIT_SIDE * DIGIT_SIDE).map(|_| rand::Rng::random(&mut rng)).collect();
        let s = compose(&a, 1, &b, 2, [sa, sb]).unwrap();
        prop_assert_eq!(s.image.len(), CANVAS_SIDE * CANVAS_SIDE);
        for ((&m, &x), &y) in s.image.iter().zip(&s.aux[0]).zip(&s.aux[1]) {
            prop_assert_eq!(m, x.max(y));
        }
        let o = frame_overlap(sa, sb);
        prop_assert!((0.0..=1.0).contains(&o));
        prop_assert_eq!(o, frame_overlap(sb, sa));
        prop_assert!(compose(&a, 4, &b, 4, [sa, sb]).is_err());
    }
}
