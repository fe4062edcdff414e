//! Small untaped vector math used by the incremental (search-time) forward
//! paths. Dot products and normalizers accumulate in f64.

pub const LOG_ZERO: f64 = -1.0e30;

/// y = x * W + b, with x a row vector of length `in_dim` and W `in_dim x out_dim`.
pub fn affine(x: &[f32], w: &[f32], b: Option<&[f32]>, in_dim: usize, out_dim: usize) -> Vec<f32> {
    debug_assert_eq!(x.len(), in_dim);
    debug_assert_eq!(w.len(), in_dim * out_dim);
    let mut out = vec![0.0f32; out_dim];
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for i in 0..in_dim {
            acc += x[i] as f64 * w[i * out_dim + j] as f64;
        }
        if let Some(b) = b {
            acc += b[j] as f64;
        }
        *o = acc as f32;
    }
    out
}

pub fn add_in_place(a: &mut [f32], b: &[f32]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn relu_in_place(x: &mut [f32]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

pub fn layer_norm_vec(x: &[f32], gain: &[f32], bias: &[f32], eps: f64) -> Vec<f32> {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, &v)| (((v as f64 - mean) * inv) * gain[i] as f64 + bias[i] as f64) as f32)
        .collect()
}

pub fn log_softmax_f64(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&v| (v - m).exp()).sum();
    let lz = m + z.ln();
    logits.iter().map(|&v| v - lz).collect()
}

pub fn log_softmax_vec(logits: &[f32]) -> Vec<f32> {
    let l64: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    log_softmax_f64(&l64).into_iter().map(|v| v as f32).collect()
}

pub fn softmax_vec(logits: &[f32]) -> Vec<f32> {
    log_softmax_vec(logits).into_iter().map(|v| v.exp()).collect()
}

/// log(exp(a) + exp(b)) with the `LOG_ZERO` sentinel treated as -inf.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a <= LOG_ZERO {
        return b;
    }
    if b <= LOG_ZERO {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn log_sum_exp(vals: impl IntoIterator<Item = f64>) -> f64 {
    vals.into_iter().fold(LOG_ZERO, log_add)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_add_handles_sentinel() {
        assert_eq!(log_add(LOG_ZERO, -1.5), -1.5);
        assert_eq!(log_add(LOG_ZERO, LOG_ZERO), LOG_ZERO);
        let v = log_add(0.0f64.ln(), 1.0f64.ln());
        assert!(v.is_finite());
    }

    #[test]
    fn log_sum_exp_matches_direct() {
        let vals = [-1.0f64, -2.0, -0.5];
        let direct = vals.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(vals.iter().cloned()) - direct).abs() < 1e-12);
    }

    #[test]
    fn affine_identity() {
        // 2x2 identity
        let w = [1.0, 0.0, 0.0, 1.0];
        let y = affine(&[3.0, -4.0], &w, None, 2, 2);
        assert_eq!(y, vec![3.0, -4.0]);
    }
}
