use latentmotion::dataio::{generate_synthetic, LatentDataset, SyntheticSpec, WindowSampler};
use latentmotion::latent_model::{pack_time_major, unpack_time_major, LatentCode, LatentSequence};
use latentmotion::metrics::{eval_acd, frechet_distance, Extractor, GaussianStats};
use latentmotion::motion_transfer::{apply_offset, fit_motion_basis, MotionBasis};
use latentmotion::tensor::Tensor;
use proptest::prelude::*;
use std::sync::OnceLock;

const LAYERS: usize = 2;
const DIM: usize = 4;

fn basis() -> &'static MotionBasis {
    static B: OnceLock<MotionBasis> = OnceLock::new();
    B.get_or_init(|| {
        let ds = generate_synthetic(&SyntheticSpec {
            num_frames: 300,
            layers: LAYERS,
            dim: DIM,
            latent_dim_motion: 3,
            seed: 9,
            ..SyntheticSpec::default()
        })
        .unwrap();
        fit_motion_basis(&ds, 3).unwrap()
    })
}

fn code() -> impl Strategy<Value = LatentCode> {
    prop::collection::vec(-10.0..10.0f64, LAYERS * DIM).prop_map(|v| LatentCode::new(LAYERS, DIM, v).unwrap())
}

fn sequence(max_len: usize) -> impl Strategy<Value = LatentSequence> {
    (1..max_len).prop_flat_map(|t| {
        prop::collection::vec(-10.0..10.0f64, t * LAYERS * DIM)
            .prop_map(|v| LatentSequence::new(LAYERS, DIM, 25.0, v).unwrap())
    })
}

fn gaussian(f: usize) -> impl Strategy<Value = GaussianStats> {
    (
        prop::collection::vec(-3.0..3.0f64, f),
        prop::collection::vec(-1.0..1.0f64, f * f),
    )
        .prop_map(move |(mean, a)| {
            let a = Tensor::from_vec(f, f, a);
            let mut cov = a.matmul_nt(&a);
            for i in 0..f {
                cov.data_mut()[i * f + i] += 0.05;
            }
            GaussianStats {
                mean,
                covariance: cov.into_vec(),
                count: 10,
            }
        })
}

proptest! {
    #[test]
    fn projection_is_idempotent(w in code()) {
        let b = basis();
        let once = b.project(&w).unwrap();
        let twice = b.project(&once).unwrap();
        for (x, y) in once.values.iter().zip(&twice.values) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn offset_is_orthogonal_to_the_basis(w in code()) {
        let b = basis();
        let delta = b.compute_offset(&w).unwrap();
        for d in &b.directions {
            let dot: f64 = d.iter().zip(&delta.values).map(|(a, b)| a * b).sum();
            prop_assert!(dot.abs() <= 1e-5);
        }
    }

    #[test]
    fn zero_offset_is_the_identity(traj in sequence(12)) {
        let moved = apply_offset(&traj, &LatentCode::zeros(LAYERS, DIM)).unwrap();
        prop_assert_eq!(moved, traj);
    }

    #[test]
    fn offsets_shift_every_frame_equally(traj in sequence(12), d in code()) {
        let moved = apply_offset(&traj, &d).unwrap();
        prop_assert_eq!(moved.len(), traj.len());
        for k in 0..traj.len() {
            for j in 0..LAYERS * DIM {
                prop_assert_eq!(moved.frame(k)[j], traj.frame(k)[j] + d.values[j]);
            }
        }
    }

    #[test]
    fn mismatched_offsets_are_rejected(traj in sequence(4)) {
        prop_assert!(apply_offset(&traj, &LatentCode::zeros(LAYERS, DIM + 1)).is_err());
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative(a in gaussian(4), b in gaussian(4)) {
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab));
        prop_assert!(frechet_distance(&a, &a).unwrap() <= 1e-8);
    }

    #[test]
    fn acd_ignores_sample_order(seqs in prop::collection::vec(sequence(8).prop_filter("two frames", |s| s.len() >= 2), 1..5)) {
        let ex = Extractor::IdentityFlatten;
        let forward = eval_acd(&seqs, &ex).unwrap();
        let mut rev = seqs.clone();
        rev.reverse();
        prop_assert!((forward - eval_acd(&rev, &ex).unwrap()).abs() <= 1e-9 * (1.0 + forward));
    }

    #[test]
    fn sampler_epochs_are_permutations(frames in 1usize..60, t in 1usize..10, seed in any::<u64>(), epoch in 0u64..100) {
        prop_assume!(t <= frames);
        let ds = LatentDataset::new(1, 1, 25.0, "p", vec![0.0; frames]).unwrap();
        let s = WindowSampler::new(&ds, t, seed).unwrap();
        let mut order = s.epoch(epoch);
        prop_assert_eq!(&order, &s.epoch(epoch));
        order.sort_unstable();
        prop_assert_eq!(order, (0..frames - t + 1).collect::<Vec<_>>());
    }

    #[test]
    fn time_major_packing_round_trips(seqs in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 3 * LAYERS * DIM), 1..5)) {
        let refs: Vec<&[f64]> = seqs.iter().map(|s| s.as_slice()).collect();
        let packed = pack_time_major(&refs, 3, LAYERS * DIM);
        let back = unpack_time_major(&packed, seqs.len(), LAYERS, DIM, 25.0);
        for (s, b) in seqs.iter().zip(&back) {
            prop_assert_eq!(s.as_slice(), b.data());
        }
    }
}
