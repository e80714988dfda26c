//! Property-based invariants over the shape algebra, softmax, and the
//! stratified split arithmetic.

use proptest::prelude::*;

use secnn::data::{build_index, encode_ppm, RgbImage, Split};
use secnn::optim::softmax;
use secnn::tensor::{conv_out_extent, Tensor};

proptest! {
    /// The closed-form output extent equals a direct enumeration of valid
    /// kernel placements over the padded axis.
    #[test]
    fn conv_out_extent_matches_enumeration(
        input in 1usize..64,
        kernel in 1usize..8,
        stride in 1usize..4,
        padding in 0usize..4,
    ) {
        let padded = input + 2 * padding;
        prop_assume!(padded >= kernel);
        let want = (0..=padded - kernel).step_by(stride).count();
        prop_assert_eq!(conv_out_extent(input, kernel, stride, padding).unwrap(), want);
    }

    /// Shape functions are pure: repeated calls agree.
    #[test]
    fn conv_out_extent_is_pure(
        input in 1usize..128,
        kernel in 1usize..8,
        stride in 1usize..5,
        padding in 0usize..4,
    ) {
        let a = conv_out_extent(input, kernel, stride, padding);
        let b = conv_out_extent(input, kernel, stride, padding);
        prop_assert_eq!(a.is_ok(), b.is_ok());
        if let (Ok(a), Ok(b)) = (a, b) {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn reshape_round_trips(data in prop::collection::vec(-10.0f32..10.0, 1..64)) {
        let n = data.len();
        let t = Tensor::new(vec![n], data).unwrap();
        let back = t.reshape(&[1, n]).unwrap().reshape(&[n]).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn transpose2_is_an_involution(rows in 1usize..8, cols in 1usize..8) {
        let t = Tensor::<f64>::from_fn(&[rows, cols], |i| (i as f64).sin());
        let tt = t.transpose2().unwrap().transpose2().unwrap();
        prop_assert_eq!(tt, t);
    }

    /// Softmax rows are probability vectors and invariant to per-row shifts.
    #[test]
    fn softmax_rows_are_normalized_and_shift_invariant(
        rows in 1usize..5,
        cols in 2usize..8,
        shift in -50.0f64..50.0,
    ) {
        let logits = Tensor::<f64>::from_fn(&[rows, cols], |i| ((i * 13) as f64 * 0.37).sin() * 5.0);
        let probs = softmax(&logits);
        for r in 0..rows {
            let row = &probs.data()[r * cols..(r + 1) * cols];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        let shifted = logits.map(|v| v + shift);
        let probs2 = softmax(&shifted);
        for (a, b) in probs.data().iter().zip(probs2.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    /// The per-class validation cut is floor(val_fraction * n): never more
    /// than one sample away from the exact proportion, and deterministic.
    #[test]
    fn stratified_split_deviation_bounded(
        sizes in prop::collection::vec(1usize..25, 2..5),
        seed in any::<u64>(),
    ) {
        let dir = tempfile::TempDir::new().unwrap();
        let ppm = encode_ppm(&RgbImage::new(1, 1));
        for (c, &n) in sizes.iter().enumerate() {
            let cdir = dir.path().join(format!("c{c}"));
            std::fs::create_dir_all(&cdir).unwrap();
            for i in 0..n {
                std::fs::write(cdir.join(format!("{i}.ppm")), &ppm).unwrap();
            }
        }
        let index = build_index(dir.path(), 0.2, seed).unwrap();
        for (c, &n) in sizes.iter().enumerate() {
            let val = index
                .samples
                .iter()
                .filter(|s| s.class_id == c && s.split == Split::Val)
                .count();
            prop_assert_eq!(val, (0.2 * n as f64).floor() as usize);
            prop_assert!((val as f64 - 0.2 * n as f64).abs() <= 1.0);
        }
        let again = build_index(dir.path(), 0.2, seed).unwrap();
        for (a, b) in index.samples.iter().zip(&again.samples) {
            prop_assert_eq!(&a.path, &b.path);
            prop_assert_eq!(a.split, b.split);
        }
    }
}
