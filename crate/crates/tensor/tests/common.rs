#![allow(dead_code)]

use avsr_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

/// Direct sliding-window convolution over (batch, cin, d, h, w) in f64.
#[allow(clippy::too_many_arguments)]
pub fn brute_conv3d(
    x: &[f64],
    xs: [usize; 5],
    k: &[f64],
    ks: [usize; 5],
    bias: Option<&[f64]>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> (Vec<f64>, [usize; 5]) {
    let [b, ci, d, h, w] = xs;
    let [co, _, kd, kh, kw] = ks;
    let od = (d + 2 * pad[0] - kd) / stride[0] + 1;
    let oh = (h + 2 * pad[1] - kh) / stride[1] + 1;
    let ow = (w + 2 * pad[2] - kw) / stride[2] + 1;
    let mut out = vec![0.0; b * co * od * oh * ow];
    for n in 0..b {
        for o in 0..co {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = bias.map_or(0.0, |bb| bb[o]);
                        for c in 0..ci {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for cc in 0..kw {
                                        let iz = (z * stride[0] + a) as isize - pad[0] as isize;
                                        let iy = (y * stride[1] + bb) as isize - pad[1] as isize;
                                        let ix = (xx * stride[2] + cc) as isize - pad[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = (((n * ci + c) * d + iz as usize) * h + iy as usize) * w + ix as usize;
                                        let ki = (((o * ci + c) * kd + a) * kh + bb) * kw + cc;
                                        acc += x[xi] * k[ki];
                                    }
                                }
                            }
                        }
                        out[(((n * co + o) * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    (out, [b, co, od, oh, ow])
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
