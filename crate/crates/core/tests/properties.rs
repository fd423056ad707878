use proptest::prelude::*;

use fginet::bmfe::{expand_mask, sample_mask, MaskSpec};
use fginet::data::{decode_ppm, encode_ppm};
use fginet::head::{cosface_loss, FAKE};
use fginet::nn::ParamStore;
use fginet::train::{apply_override, compute_ap, Checkpoint, RunConfig};
use fginet::wavelet::{dwt2, idwt2};
use fginet::{Purpose, Rng, Tape, Tensor};

fn tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::stream(seed, 3, 0, Purpose::Data);
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Shapes `a`, `b` that broadcast to a common rank-3 shape, with `b` of
/// lower or equal rank.
fn broadcast_pair() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (prop::collection::vec(1usize..4, 3), prop::collection::vec(any::<bool>(), 3), 0usize..3).prop_map(
        |(full, ones, drop)| {
            let b: Vec<usize> = full.iter().zip(&ones).map(|(&d, &o)| if o { 1 } else { d }).collect();
            (full, b[drop..].to_vec())
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn broadcast_add_matches_indexing((sa, sb) in broadcast_pair(), seed in 0u64..1000) {
        let (a, b) = (tensor(&sa, seed), tensor(&sb, seed + 1));
        let mut t = Tape::new();
        let (va, vb) = (t.leaf(a.clone(), true), t.leaf(b.clone(), true));
        let y = t.add(va, vb).unwrap();
        prop_assert_eq!(t.shape(y), &sa[..]);
        let off = sa.len() - sb.len();
        for i in 0..a.len() {
            let idx = [i / (sa[1] * sa[2]), (i / sa[2]) % sa[1], i % sa[2]];
            let mut j = 0;
            for (k, &d) in sb.iter().enumerate() {
                j = j * d + if d == 1 { 0 } else { idx[off + k] };
            }
            prop_assert_eq!(t.value(y).data()[i], a.data()[i] + b.data()[j]);
        }
        // d(sum)/db counts how many outputs each element of b reaches.
        let s = t.sum(y);
        t.backward(s).unwrap();
        let reach = (a.len() / b.len()) as f64;
        prop_assert!(t.grad(vb).unwrap().data().iter().all(|&g| g == reach));
    }

    #[test]
    fn dwt_round_trip_and_energy(c in 1usize..4, h in 1usize..9, w in 1usize..9, seed in 0u64..1000) {
        let x = tensor(&[c, 2 * h, 2 * w], seed);
        let b = dwt2(&x).unwrap();
        prop_assert!(idwt2(&b).unwrap().max_abs_diff(&x) <= 1e-12);
        prop_assert!((b.energy() - x.sq_norm()).abs() <= 1e-10 * x.sq_norm().max(1.0));
        // Constant images have no detail.
        let flat = dwt2(&Tensor::full(&[c, 2 * h, 2 * w], 0.7)).unwrap();
        prop_assert!(flat.hh.data().iter().chain(flat.lh.data()).chain(flat.hl.data()).all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn dwt_is_linear(seed in 0u64..1000, k in -3.0f64..3.0) {
        let (x, y) = (tensor(&[2, 8, 8], seed), tensor(&[2, 8, 8], seed + 7));
        let sum = x.zip_with(&y, |a, b| k * a + b).unwrap();
        let (bx, by, bs) = (dwt2(&x).unwrap(), dwt2(&y).unwrap(), dwt2(&sum).unwrap());
        let lin = bx.hh.zip_with(&by.hh, |a, b| k * a + b).unwrap();
        prop_assert!(lin.max_abs_diff(&bs.hh) <= 1e-12);
    }

    #[test]
    fn expanded_mask_is_constant_per_patch(rho in 0.0f64..=1.0, p in 1usize..5, g in 1usize..5, seed in 0u64..1000) {
        let spec = MaskSpec::new(rho, p, g * p, g * p).unwrap();
        let m = sample_mask(&spec, &mut Rng::stream(seed, 0, 0, Purpose::Mask));
        prop_assert!(m.m.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let up = expand_mask(&m, &spec, 2);
        let side = g * p;
        for (i, &v) in up.data().iter().enumerate() {
            let plane = i / (side * side);
            let (y, x) = ((i / side) % side, i % side);
            prop_assert_eq!(v, m.m.data()[((plane / 2) * g + y / p) * g + x / p]);
        }
    }

    #[test]
    fn mask_extremes(p in 1usize..5, g in 1usize..5, seed in 0u64..100) {
        let spec = |rho| MaskSpec::new(rho, p, g * p, g * p).unwrap();
        let mut rng = Rng::stream(seed, 0, 0, Purpose::Mask);
        prop_assert_eq!(sample_mask(&spec(0.0), &mut rng).keep_rate(), 1.0);
        prop_assert_eq!(sample_mask(&spec(1.0), &mut rng).keep_rate(), 0.0);
    }

    #[test]
    fn cosface_grows_with_margin(cr in -1.0f64..1.0, cf in -1.0f64..1.0, y in 0usize..2, m in 0.0f64..0.5, dm in 0.01f64..0.5) {
        let loss = |m: f64| {
            let mut t = Tape::new();
            let c = t.constant(Tensor::new(&[1, 2], vec![cr, cf]).unwrap());
            let l = cosface_loss(&mut t, c, &[y], 30.0, m).unwrap();
            t.value(l).item()
        };
        let (a, b) = (loss(m), loss(m + dm));
        prop_assert!(a >= 0.0 && b >= a);
    }

    #[test]
    fn ap_bounds_and_rank_invariance(labels in prop::collection::vec(0usize..2, 1..60), seed in 0u64..1000) {
        let mut labels = labels;
        labels[0] = FAKE;
        let n = labels.len();
        let mut rng = Rng::stream(seed, 0, 0, Purpose::Data);
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let ids: Vec<u64> = (0..n as u64).collect();
        let ap = compute_ap(&scores, &labels, &ids).unwrap();
        prop_assert!(ap > 0.0 && ap <= 1.0 + 1e-15);
        // Any strictly increasing map of the scores keeps the ranking.
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 2.0).collect();
        prop_assert_eq!(compute_ap(&warped, &labels, &ids).unwrap(), ap);
        // Scoring by the label itself ranks every positive first.
        let oracle: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        prop_assert!((compute_ap(&oracle, &labels, &ids).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_positive_last_is_one_over_n(n in 1usize..200) {
        let mut labels = vec![0; n];
        labels[n - 1] = FAKE;
        let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
        let ids: Vec<u64> = (0..n as u64).collect();
        prop_assert!((compute_ap(&scores, &labels, &ids).unwrap() - 1.0 / n as f64).abs() < 1e-15);
    }

    #[test]
    fn ppm_round_trip(h in 1usize..12, w in 1usize..12, seed in 0u64..1000) {
        let mut rng = Rng::stream(seed, 0, 0, Purpose::Data);
        let img = Tensor::from_fn(&[3, h, w], |_| rng.below(256) as f64 / 255.0);
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        prop_assert_eq!(back, img);
    }

    #[test]
    fn checkpoint_bytes_are_stable(dims in prop::collection::vec(1usize..5, 1..4), seed in 0u64..1000, step in 0u64..1000) {
        let mut store = ParamStore::new();
        store.add("w", tensor(&dims, seed), true);
        store.add("frozen", tensor(&[3], seed + 1), false);
        store.add_buffer("stats", tensor(&[2], seed + 2));
        let cfg = serde_json::json!({ "seed": seed });
        let bytes = Checkpoint::capture(&store, cfg, step).to_bytes().unwrap();
        let again = Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap();
        prop_assert_eq!(bytes, again);
    }

    #[test]
    fn overrides_round_trip(rho in 0.0f64..=1.0, lr in 1e-6f64..1e-1) {
        let mut v = RunConfig::toy().to_value();
        apply_override(&mut v, &format!("rho={rho}")).unwrap();
        apply_override(&mut v, &format!("optim.lr={lr}")).unwrap();
        let cfg = RunConfig::from_value(v).unwrap();
        prop_assert_eq!(cfg.model.rho, rho);
        prop_assert_eq!(cfg.optim.lr, lr);
    }
}
