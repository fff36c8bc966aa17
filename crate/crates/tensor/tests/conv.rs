mod common;

use avsr_tensor::{conv_out_len, Tape, Tensor, TensorError};
use common::{brute_conv3d, max_abs_diff, randn};
use proptest::prelude::*;

fn run_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: &[usize], pad: &[usize]) -> Tensor<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let kv = tape.constant(k.clone());
    let bv = b.map(|b| tape.constant(b.clone()));
    let y = tape.conv(xv, kv, bv, stride, pad).unwrap();
    tape.value(y).clone()
}

#[test]
fn conv1d_length_100_k5_s2() {
    let x = randn(&[1, 1, 100], 1);
    let k = randn(&[1, 1, 5], 2);
    let y = run_conv(&x, &k, None, &[2], &[0]);
    assert_eq!(y.shape(), &[1, 1, 48]);
    let (want, _) = brute_conv3d(x.data(), [1, 1, 1, 1, 100], k.data(), [1, 1, 1, 1, 5], None, [1, 1, 2], [0, 0, 0]);
    assert!(max_abs_diff(y.data(), &want) < 1e-12);
}

#[test]
fn raw_waveform_first_layer_length() {
    // 1.16 s at 16 kHz, 5 ms kernel, 0.25 ms stride
    assert_eq!(conv_out_len(18560, 80, 4, 0), Some(4621));
    let x = Tensor::<f32>::zeros(vec![1, 1, 18560]);
    let k = Tensor::<f32>::zeros(vec![2, 1, 80]);
    let mut tape = Tape::new();
    let (xv, kv) = (tape.constant(x), tape.constant(k));
    let y = tape.conv(xv, kv, None, &[4], &[0]).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 4621]);
}

#[test]
fn identity_kernel_preserves_input() {
    for dims in 1..=3usize {
        let spatial: Vec<usize> = [5, 6, 7][..dims].to_vec();
        let mut xs = vec![2, 3];
        xs.extend(&spatial);
        let x = randn(&xs, 3);
        let mut ks = vec![3, 3];
        ks.extend(std::iter::repeat_n(3, dims));
        let taps = 3usize.pow(dims as u32);
        let mut k = vec![0.0; 9 * taps];
        for c in 0..3 {
            k[(c * 3 + c) * taps + taps / 2] = 1.0;
        }
        let k = Tensor::new(ks, k).unwrap();
        let y = run_conv(&x, &k, None, &vec![1; dims], &vec![1; dims]);
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }
}

#[test]
fn channel_mismatch_names_dimension() {
    let x = randn(&[1, 2, 10], 4);
    let k = randn(&[3, 4, 3], 5);
    let mut tape = Tape::new();
    let (xv, kv) = (tape.constant(x), tape.constant(k));
    let err = tape.conv(xv, kv, None, &[1], &[0]).unwrap_err();
    assert!(matches!(&err, TensorError::Shape { detail, .. } if detail.contains("channel")), "{err}");
}

#[test]
fn oversized_kernel_rejected_with_dimension() {
    let x = randn(&[1, 1, 6, 4], 6);
    let k = randn(&[1, 1, 3, 7], 7);
    let mut tape = Tape::new();
    let (xv, kv) = (tape.constant(x), tape.constant(k));
    let err = tape.conv(xv, kv, None, &[1, 1], &[0, 1]).unwrap_err();
    assert!(err.to_string().contains("spatial dim 1"), "{err}");
}

#[test]
fn conv3d_matches_brute_force_with_bias() {
    let x = randn(&[2, 2, 7, 9, 8], 8);
    let k = randn(&[3, 2, 5, 7, 7], 9);
    let b = randn(&[3], 10);
    let y = run_conv(&x, &k, Some(&b), &[1, 2, 2], &[2, 3, 3]);
    let (want, shape) = brute_conv3d(x.data(), [2, 2, 7, 9, 8], k.data(), [3, 2, 5, 7, 7], Some(b.data()), [1, 2, 2], [2, 3, 3]);
    assert_eq!(y.shape(), &shape[..]);
    assert!(max_abs_diff(y.data(), &want) < 1e-10);
}

#[test]
fn many_small_images_pack_into_chunks() {
    // 2x2 outputs force several images per GEMM chunk
    let x = randn(&[700, 3, 4, 4], 11);
    let k = randn(&[5, 3, 3, 3], 12);
    let y = run_conv(&x, &k, None, &[2, 2], &[1, 1]);
    let (want, shape) = brute_conv3d(x.data(), [700, 3, 1, 4, 4], k.data(), [5, 3, 1, 3, 3], None, [1, 2, 2], [0, 1, 1]);
    assert_eq!(y.shape(), &[700, 5, 2, 2]);
    assert_eq!(shape, [700, 5, 1, 2, 2]);
    assert!(max_abs_diff(y.data(), &want) < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn output_shape_matches_sliding_window_count(
        len in 1usize..64, k in 1usize..9, stride in 1usize..5, pad in 0usize..4,
    ) {
        // count window placements directly
        let padded = len + 2 * pad;
        let mut count = 0;
        let mut start = 0;
        while start + k <= padded {
            count += 1;
            start += stride;
        }
        let want = (count > 0).then_some(count);
        prop_assert_eq!(conv_out_len(len, k, stride, pad), want);
    }

    #[test]
    fn conv2d_values_match_brute_force(
        h in 3usize..9, w in 3usize..9, kh in 1usize..4, kw in 1usize..4,
        sh in 1usize..3, sw in 1usize..3, ph in 0usize..2, pw in 0usize..2,
        seed in 0u64..1000,
    ) {
        let x = randn(&[2, 2, h, w], seed);
        let k = randn(&[3, 2, kh, kw], seed + 1);
        let y = run_conv(&x, &k, None, &[sh, sw], &[ph, pw]);
        let (want, shape) = brute_conv3d(x.data(), [2, 2, 1, h, w], k.data(), [3, 2, 1, kh, kw], None, [1, sh, sw], [0, ph, pw]);
        prop_assert_eq!(y.shape(), &[2, 3, shape[3], shape[4]][..]);
        prop_assert!(max_abs_diff(y.data(), &want) < 1e-10);
    }
}
