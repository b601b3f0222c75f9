//! Naive reference implementations in `f64`.
//!
//! Everything here is written as explicit loops over plain slices and does
//! not touch the tensor engine, so agreement between the two is evidence
//! rather than tautology. [`suite`] runs the comparisons.

pub mod suite;

use crate::model::NetworkSpec;

/// Outcome of one comparison case.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub case_id: String,
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    /// `max_rel_diff` is normwise: the largest absolute difference over the
    /// largest reference magnitude.
    pub fn compare(case_id: impl Into<String>, engine: &[f64], reference: &[f64], tolerance: f64) -> Self {
        let case_id = case_id.into();
        if engine.len() != reference.len() {
            return Self {
                case_id,
                max_abs_diff: f64::INFINITY,
                max_rel_diff: f64::INFINITY,
                tolerance,
                pass: false,
            };
        }
        let mut abs = 0.0f64;
        let mut scale = 0.0f64;
        for (e, r) in engine.iter().zip(reference) {
            let d = (e - r).abs();
            abs = if d.is_nan() { f64::INFINITY } else { abs.max(d) };
            scale = scale.max(r.abs());
        }
        let rel = if abs == 0.0 { 0.0 } else { abs / scale.max(1e-12) };
        Self {
            case_id,
            max_abs_diff: abs,
            max_rel_diff: rel,
            tolerance,
            pass: rel <= tolerance,
        }
    }

    /// Gradient comparison: `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, 1e-8)`.
    pub fn compare_grad(case_id: impl Into<String>, analytic: &[f64], numeric: &[f64], tolerance: f64) -> Self {
        let case_id = case_id.into();
        let mut diff = 0.0f64;
        let (mut na, mut nn) = (0.0f64, 0.0f64);
        let mut abs = 0.0f64;
        for (a, n) in analytic.iter().zip(numeric) {
            diff += (a - n) * (a - n);
            na += a * a;
            nn += n * n;
            abs = abs.max((a - n).abs());
        }
        let rel = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-8);
        let ok = analytic.len() == numeric.len() && rel.is_finite();
        Self {
            case_id,
            max_abs_diff: abs,
            max_rel_diff: rel,
            tolerance,
            pass: ok && rel <= tolerance,
        }
    }
}

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    assert!(step > 0.0, "finite difference step must be positive");
    let mut probe = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        g.push((up - down) / (2.0 * step));
    }
    g
}

/// Spatial mean per `(sample, channel)` of an `[n, c, h, w]` map.
pub fn oracle_channel_weights(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        for j in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for z in 0..w {
                    s += x[((i * c + j) * h + y) * w + z];
                }
            }
            out[i * c + j] = s / (h * w) as f64;
        }
    }
    out
}

/// `Σ (ws − wt)² / (n·c)` over `[n, c]` weights.
pub fn oracle_cd(ws: &[f64], wt: &[f64], n: usize, c: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..c {
            let d = ws[i * c + j] - wt[i * c + j];
            s += d * d;
        }
    }
    s / (n * c) as f64
}

fn softmax_row(row: &[f64], t: f64) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &v in row {
        if v / t > m {
            m = v / t;
        }
    }
    let mut e: Vec<f64> = row.iter().map(|&v| (v / t - m).exp()).collect();
    let z: f64 = e.iter().sum();
    for v in &mut e {
        *v /= z;
    }
    e
}

fn clamp_ln(p: f64) -> f64 {
    p.max(1e-12).ln()
}

fn kl_row(s: &[f64], t: &[f64], temp: f64) -> f64 {
    let ps = softmax_row(s, temp);
    let pt = softmax_row(t, temp);
    let mut kl = 0.0;
    for j in 0..s.len() {
        kl += pt[j] * (clamp_ln(pt[j]) - clamp_ln(ps[j]));
    }
    kl
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for j in 1..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}

/// `(1/n) Σ_i KL(softmax(t_i/T) ‖ softmax(s_i/T))` over `[n, k]` logits.
pub fn oracle_kd(s: &[f64], t: &[f64], n: usize, k: usize, temperature: f64) -> f64 {
    let mut sum = 0.0;
    for i in 0..n {
        sum += kl_row(&s[i * k..(i + 1) * k], &t[i * k..(i + 1) * k], temperature);
    }
    sum / n as f64
}

/// KD averaged over the rows whose teacher argmax equals the label; 0 if
/// there are none.
pub fn oracle_gkd(s: &[f64], t: &[f64], labels: &[usize], n: usize, k: usize, temperature: f64) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        let tr = &t[i * k..(i + 1) * k];
        if argmax(tr) == labels[i] {
            sum += kl_row(&s[i * k..(i + 1) * k], tr, temperature);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Mean of `−ln softmax(s_i)[label_i]`.
pub fn oracle_ce(s: &[f64], labels: &[usize], n: usize, k: usize) -> f64 {
    let mut sum = 0.0;
    for i in 0..n {
        let p = softmax_row(&s[i * k..(i + 1) * k], 1.0);
        sum -= clamp_ln(p[labels[i]]);
    }
    sum / n as f64
}

/// Direct 6-loop cross-correlation with zero padding and floor output size.
/// Returns the output and its `[n, o, ho, wo]` shape.
pub fn oracle_conv2d(
    x: &[f64],
    xs: [usize; 4],
    k: &[f64],
    ks: [usize; 4],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = xs;
    let [o, kc, kh, kw] = ks;
    assert_eq!(c, kc, "oracle_conv2d: channel mismatch");
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..ho {
                for z in 0..wo {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for dy in 0..kh {
                            for dz in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let iz = (z * stride + dz) as isize - pad as isize;
                                if iy < 0 || iz < 0 || iy >= h as isize || iz >= w as isize {
                                    continue;
                                }
                                s += x[((b * c + ic) * h + iy as usize) * w + iz as usize]
                                    * k[((oc * c + ic) * kh + dy) * kw + dz];
                            }
                        }
                    }
                    out[((b * o + oc) * ho + y) * wo + z] = s;
                }
            }
        }
    }
    (out, [n, o, ho, wo])
}

/// `[m, k] × [k, n]`.
pub fn oracle_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn oracle_softmax(x: &[f64], n: usize, k: usize, temperature: f64) -> Vec<f64> {
    (0..n).flat_map(|i| softmax_row(&x[i * k..(i + 1) * k], temperature)).collect()
}

/// `edt_weight · mean(cd_terms) + gkd + ce`.
pub fn oracle_total(cd_terms: &[f64], gkd: f64, ce: f64, edt_weight: f64) -> f64 {
    let cd = if cd_terms.is_empty() {
        0.0
    } else {
        cd_terms.iter().sum::<f64>() / cd_terms.len() as f64
    };
    edt_weight * cd + gkd + ce
}

/// A named parameter for [`oracle_forward`]: `(name, shape, values)`.
pub type OracleParam = (String, Vec<usize>, Vec<f64>);

fn find<'a>(params: &'a [OracleParam], name: &str) -> Option<&'a OracleParam> {
    params.iter().find(|p| p.0 == name)
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn conv_named(x: &[f64], xs: [usize; 4], p: &OracleParam, stride: usize, pad: usize) -> (Vec<f64>, [usize; 4]) {
    let s = &p.1;
    oracle_conv2d(x, xs, &p.2, [s[0], s[1], s[2], s[3]], stride, pad)
}

/// Output of [`oracle_forward`].
#[derive(Clone, Debug)]
pub struct OracleForward {
    pub logits: Vec<f64>,
    /// `(values, [n, c, h, w])` after each downsampling stage.
    pub taps: Vec<(Vec<f64>, [usize; 4])>,
}

/// Forward pass of the residual/plain CNN family written out from its
/// description: 3×3 stem + ReLU; residual blocks `relu(conv_b(relu(conv_a(x)))
/// + skip)` with a 1×1 projection skip when stride or width changes; plain
/// blocks `relu(conv(x))`; the first block of a downsampling stage has
/// stride 2; global average pool; dense head.
pub fn oracle_forward(spec: &NetworkSpec, params: &[OracleParam], x: &[f64], xs: [usize; 4]) -> OracleForward {
    let get = |name: &str| find(params, name).unwrap_or_else(|| panic!("oracle_forward: missing {name}"));
    let (mut h, mut hs) = conv_named(x, xs, get("stem"), 1, 1);
    relu_in_place(&mut h);
    let mut taps = Vec::new();
    for (si, st) in spec.stages.iter().enumerate() {
        for b in 0..st.blocks {
            let stride = if b == 0 && st.downsample { 2 } else { 1 };
            let p = format!("s{si}.b{b}");
            if spec.residual {
                let (mut a, as_) = conv_named(&h, hs, get(&format!("{p}.conv_a")), stride, 1);
                relu_in_place(&mut a);
                let (mut y, ys) = conv_named(&a, as_, get(&format!("{p}.conv_b")), 1, 1);
                let skip = match find(params, &format!("{p}.shortcut")) {
                    Some(sc) => conv_named(&h, hs, sc, stride, 0).0,
                    None => h.clone(),
                };
                for (v, s) in y.iter_mut().zip(&skip) {
                    *v += s;
                }
                relu_in_place(&mut y);
                h = y;
                hs = ys;
            } else {
                let (mut y, ys) = conv_named(&h, hs, get(&format!("{p}.conv")), stride, 1);
                relu_in_place(&mut y);
                h = y;
                hs = ys;
            }
        }
        if st.downsample {
            taps.push((h.clone(), hs));
        }
    }
    let [n, c, hh, ww] = hs;
    let pooled = oracle_channel_weights(&h, n, c, hh, ww);
    let fc = get("fc.weight");
    let bias = get("fc.bias");
    let k = fc.1[1];
    let mut logits = oracle_matmul(&pooled, &fc.2, n, c, k);
    for i in 0..n {
        for j in 0..k {
            logits[i * k + j] += bias.2[j];
        }
    }
    OracleForward { logits, taps }
}

/// Top-k error in percent with the rank rule `#{j : l_j > l_y or (l_j = l_y
/// and j < y)} < k`.
pub fn oracle_topk_error(logits: &[f64], labels: &[usize], k_classes: usize, k: usize) -> f64 {
    let n = labels.len();
    let mut wrong = 0usize;
    for i in 0..n {
        let row = &logits[i * k_classes..(i + 1) * k_classes];
        let y = labels[i];
        let mut rank = 0;
        for j in 0..k_classes {
            if row[j] > row[y] || (row[j] == row[y] && j < y) {
                rank += 1;
            }
        }
        if rank >= k {
            wrong += 1;
        }
    }
    100.0 * wrong as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_of_sum_and_half_norm() {
        let x = [0.3, -1.2, 2.0];
        let g = finite_diff_grad(|v| v.iter().sum(), &x, 1e-3);
        assert!(g.iter().all(|&v| (v - 1.0).abs() < 1e-9));
        let g = finite_diff_grad(|v| 0.5 * v.iter().map(|a| a * a).sum::<f64>(), &x, 1e-3);
        for (a, b) in g.iter().zip(&x) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn trivial_losses() {
        let w = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(oracle_cd(&w, &w, 2, 2), 0.0);
        let t = [5.0, 0.0, 0.0, 5.0];
        let s = [0.0, 1.0, 1.0, 0.0];
        assert_eq!(oracle_gkd(&s, &t, &[1, 0], 2, 2, 4.0), 0.0);
        assert!((oracle_ce(&[0.0, 0.0], &[1], 1, 2) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn conv_identity_kernel() {
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let (y, s) = oracle_conv2d(&x, [1, 1, 4, 4], &[1.0], [1, 1, 1, 1], 1, 0);
        assert_eq!(s, [1, 1, 4, 4]);
        assert_eq!(y, x);
        let (_, s) = oracle_conv2d(&x, [1, 1, 4, 4], &[0.0; 9], [1, 1, 3, 3], 2, 1);
        assert_eq!(s, [1, 1, 2, 2]);
    }

    #[test]
    fn topk_rank_rule() {
        let logits = [3.0, 2.0, 1.0, 0.0];
        assert_eq!(oracle_topk_error(&logits, &[2], 4, 1), 100.0);
        assert_eq!(oracle_topk_error(&logits, &[2], 4, 3), 0.0);
    }
}
