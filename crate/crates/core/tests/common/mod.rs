//! Reference implementations the library is checked against. Nothing here
//! calls into the code path it verifies.

#![allow(dead_code)]

use qrs_core::cnn::{
    softmax_cross_entropy, CnnModel, ConvLayer, FeatureMap, Gradients, LogitPlane,
};
use qrs_core::preprocess::BinaryMask;

const REWRITES: [(&[u8], &[u8]); 4] = [
    (&[1, 1, 0, 1, 1], &[1, 1, 1, 1, 1]),
    (&[1, 1, 0, 1], &[1, 1, 1, 1]),
    (&[0, 0, 1, 0, 0], &[0, 0, 0, 0, 0]),
    (&[0, 0, 1, 0], &[0, 0, 0, 0]),
];

/// Applies one rewrite at a time (highest-priority pattern, leftmost
/// occurrence) and restarts the search until no pattern occurs anywhere.
pub fn salt_pepper_fixed_point(bits: &[u8]) -> Vec<u8> {
    let mut v = bits.to_vec();
    'outer: loop {
        for (pat, rep) in REWRITES {
            if v.len() < pat.len() {
                continue;
            }
            if let Some(i) = (0..=v.len() - pat.len()).find(|&i| &v[i..i + pat.len()] == pat) {
                v[i..i + pat.len()].copy_from_slice(rep);
                continue 'outer;
            }
        }
        return v;
    }
}

/// Every binary string of length 1..=max_len.
pub fn all_bit_strings(max_len: usize) -> impl Iterator<Item = Vec<u8>> {
    (1..=max_len).flat_map(|len| {
        (0u32..(1 << len)).map(move |code| (0..len).map(|i| ((code >> i) & 1) as u8).collect())
    })
}

/// `(start, len)` of every run of ones.
pub fn runs(bits: &[u8]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < bits.len() {
        if bits[i] == 1 {
            let s = i;
            while i < bits.len() && bits[i] == 1 {
                i += 1;
            }
            out.push((s, i - s));
        } else {
            i += 1;
        }
    }
    out
}

/// Triple-loop same-padded cross-correlation.
pub fn naive_conv(input: &FeatureMap, layer: &ConvLayer) -> Vec<f64> {
    let len = input.len as isize;
    let half = (layer.kernel_len / 2) as isize;
    let mut out = vec![0.0; layer.out_ch * input.len];
    for o in 0..layer.out_ch {
        for t in 0..len {
            let mut acc = layer.bias[o] as f64;
            for c in 0..layer.in_ch {
                for j in 0..layer.kernel_len {
                    let s = t + j as isize - half;
                    if (0..len).contains(&s) {
                        acc +=
                            layer.weight(o, c, j) as f64 * input.data[c * input.len + s as usize];
                    }
                }
            }
            out[o * input.len + t as usize] = acc;
        }
    }
    out
}

fn loss(model: &CnnModel, x: &[f32], mask: &BinaryMask) -> f64 {
    let logits: LogitPlane = model.forward(x).unwrap();
    softmax_cross_entropy(&logits, mask, x.len()).unwrap().0
}

pub struct GradCheck {
    pub checked: usize,
    pub worst_rel: f64,
}

/// Central finite differences over every parameter. The step is applied to
/// the stored `f32` values and the realised step is used as the divisor.
/// Relative error uses `max(|analytic|, |numeric|, floor)` as the scale.
pub fn gradient_check(
    model: &CnnModel,
    x: &[f32],
    mask: &BinaryMask,
    eps: f32,
    floor: f64,
) -> GradCheck {
    let (logits, cache) = model.forward_train(x).unwrap();
    let (_, dlogits) = softmax_cross_entropy(&logits, mask, x.len()).unwrap();
    let analytic: Gradients = model.backward(&cache, &dlogits).unwrap();

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for li in 0..model.layers.len() {
        let n_w = model.layers[li].weights.len();
        let n_b = model.layers[li].bias.len();
        for k in 0..n_w + n_b {
            let mut plus = model.clone();
            let mut minus = model.clone();
            let (p, m, an) = if k < n_w {
                let w = model.layers[li].weights[k];
                plus.layers[li].weights[k] = w + eps;
                minus.layers[li].weights[k] = w - eps;
                (
                    plus.layers[li].weights[k],
                    minus.layers[li].weights[k],
                    analytic.layers[li].weights[k],
                )
            } else {
                let b = model.layers[li].bias[k - n_w];
                plus.layers[li].bias[k - n_w] = b + eps;
                minus.layers[li].bias[k - n_w] = b - eps;
                (
                    plus.layers[li].bias[k - n_w],
                    minus.layers[li].bias[k - n_w],
                    analytic.layers[li].bias[k - n_w],
                )
            };
            let step = p as f64 - m as f64;
            let fd = (loss(&plus, x, mask) - loss(&minus, x, mask)) / step;
            let scale = an.abs().max(fd.abs()).max(floor);
            worst = worst.max((an - fd).abs() / scale);
            checked += 1;
        }
    }
    GradCheck {
        checked,
        worst_rel: worst,
    }
}

/// Seeded He-initialised model with small nonzero biases. Zero biases put
/// every fully-dead receptive field exactly on the ReLU kink, where central
/// differences and the subgradient legitimately disagree.
pub fn gradcheck_model(depth: usize, channels: usize, seed: u64) -> CnnModel {
    use rand::Rng;
    let mut model = qrs_core::cnn::init_model(qrs_core::cnn::ModelConfig {
        depth,
        channels,
        seed,
        ..Default::default()
    })
    .unwrap();
    let mut rng = qrs_core::rng::seeded(seed ^ 0xb1a5);
    for layer in &mut model.layers {
        for b in &mut layer.bias {
            *b = rng.random_range(0.05..0.2) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        }
    }
    model
}

/// Random length-`len` input and mask for a gradient check.
pub fn gradcheck_sample(len: usize, seed: u64) -> (Vec<f32>, BinaryMask) {
    use rand::Rng;
    let mut rng = qrs_core::rng::seeded(seed);
    let x = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mask = BinaryMask {
        values: (0..len).map(|_| rng.random_range(0..2)).collect(),
    };
    (x, mask)
}
