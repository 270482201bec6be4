//! Independent reference implementations used by the integration and
//! acceptance tests. Written as plain loops with no shared code paths.

#![allow(dead_code)]

use evblur_core::attention::AttentionParams;
use evblur_core::{Event, EventStream, Polarity};
use rand::Rng;

/// SCER by a double loop over (channel, event), with each sample instant
/// represented as the exact fraction `t_start + i T / 2N`.
pub fn scer_bruteforce(stream: &EventStream, n: usize) -> Vec<f64> {
    let (w, h) = stream.dims();
    let plane = w * h;
    let two_n = 2 * n as i128;
    let t0 = stream.t_start() as i128;
    let span = stream.duration() as i128;
    // compares an event time against sample instant i without division
    let at_or_after = |t: u64, i: usize| two_n * (t as i128 - t0) >= i as i128 * span;
    let at_or_before = |t: u64, i: usize| two_n * (t as i128 - t0) <= i as i128 * span;
    let mut out = vec![0.0; 2 * n * plane];
    for k in 0..2 * n {
        for e in stream.events() {
            let pix = e.y as usize * w + e.x as usize;
            let p = e.p.sign() as f64;
            if k < n {
                if at_or_after(e.t, k) && at_or_before(e.t, n) {
                    out[k * plane + pix] -= p;
                }
            } else if at_or_after(e.t, n) && at_or_before(e.t, k + 1) {
                out[k * plane + pix] += p;
            }
        }
    }
    out
}

/// Whether any event sits on an interior sample instant `t_i`, `0 < i < 2N`.
pub fn hits_interior_boundary(stream: &EventStream, n: usize) -> bool {
    let span = stream.duration() as u128;
    stream.events().iter().any(|e| {
        let q = 2 * n as u128 * (e.t - stream.t_start()) as u128;
        q.is_multiple_of(span) && q > 0 && q < 2 * n as u128 * span
    })
}

/// Events exactly at the window midpoint.
pub fn midpoint_events(stream: &EventStream) -> Vec<Event> {
    let twice = |t: u64| 2 * (t - stream.t_start()) as u128;
    stream
        .events()
        .iter()
        .filter(|e| twice(e.t) == stream.duration() as u128)
        .copied()
        .collect()
}

/// Random stream up to `max_side` square and `max_events` events. Windows are
/// often multiples of `2N` and events often land on sample instants so the
/// closed-interval edge cases get exercised.
pub fn random_stream(rng: &mut impl Rng, max_side: u16, max_events: usize, n: usize) -> EventStream {
    let w = rng.random_range(1..=max_side);
    let h = rng.random_range(1..=max_side);
    let t_start = rng.random_range(0..1_000_000u64);
    let span = if rng.random_bool(0.5) {
        2 * n as u64 * rng.random_range(1..5_000u64)
    } else {
        rng.random_range(1..100_000u64)
    };
    let t_end = t_start + span;
    let count = rng.random_range(0..=max_events);
    let on_boundary = rng.random_bool(0.3);
    let events = (0..count)
        .map(|_| {
            let t = if on_boundary && rng.random_bool(0.3) {
                let i = rng.random_range(0..=2 * n as u64);
                t_start + (i * span).div_ceil(2 * n as u64)
            } else {
                rng.random_range(t_start..=t_end)
            };
            let p = if rng.random_bool(0.5) {
                Polarity::Positive
            } else {
                Polarity::Negative
            };
            Event::new(t, rng.random_range(0..w), rng.random_range(0..h), p)
        })
        .collect();
    EventStream::new(w, h, t_start, t_end, events).unwrap()
}

/// Exact crossing times of a piecewise-linear, strictly monotone log signal
/// sampled at `times`: level `s0 + k c` for `k = 1..=floor(|Δ| / c)`.
pub fn ramp_crossings(signal: &[f64], times: &[u64], c: f64) -> Vec<f64> {
    let first = signal[0];
    let last = *signal.last().unwrap();
    let dir = (last - first).signum();
    let count = ((last - first).abs() / c).floor() as usize;
    (1..=count)
        .map(|k| {
            let level = first + dir * k as f64 * c;
            let seg = (0..signal.len() - 1)
                .find(|&s| (level - signal[s]) * dir >= 0.0 && (signal[s + 1] - level) * dir >= 0.0)
                .expect("level inside the ramp");
            let frac = (level - signal[seg]) / (signal[seg + 1] - signal[seg]);
            times[seg] as f64 + frac * (times[seg + 1] - times[seg]) as f64
        })
        .collect()
}

/// erf by Maclaurin series for |x| <= 3, continued fraction for erfc beyond.
pub fn erf(x: f64) -> f64 {
    let a = x.abs();
    let v = if a <= 3.0 {
        let mut term = a;
        let mut sum = a;
        let mut k = 0.0;
        loop {
            k += 1.0;
            term *= -a * a / k;
            let add = term / (2.0 * k + 1.0);
            sum += add;
            if add.abs() < 1e-18 {
                break;
            }
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    } else {
        // erfc(a) = exp(-a^2)/sqrt(pi) * 1/(a + 1/2/(a + 1/(a + 3/2/(a + ...))))
        let mut f = 0.0;
        for k in (1..200).rev() {
            f = (k as f64 / 2.0) / (a + f);
        }
        1.0 - (-a * a).exp() / std::f64::consts::PI.sqrt() / (a + f)
    };
    v.copysign(x)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_prime(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2)) + x * pdf
}

fn normalize(x: &[Vec<f64>], gain: &[f64], bias: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let m = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / row.len() as f64;
            let s = (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - m) / s * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

fn row(m: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    (0..m.ncols()).map(|j| m[(0, j)]).collect()
}

fn project(x: &[Vec<f64>], w: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| {
            (0..w.ncols())
                .map(|j| b[(0, j)] + (0..w.nrows()).map(|i| r[i] * w[(i, j)]).sum::<f64>())
                .collect()
        })
        .collect()
}

/// Pixel-major rows (one per pixel, `C` wide).
pub fn rows(values: &[f64], channels: usize) -> Vec<Vec<f64>> {
    values.chunks(channels).map(|c| c.to_vec()).collect()
}

/// Cross-modal attention block in plain loops. Returns the output rows and
/// the `c x c` attention map.
pub fn attention_forward(img: &[Vec<f64>], evt: &[Vec<f64>], p: &AttentionParams) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let hw = img.len();
    let xn = normalize(img, &row(&p.img_gain), &row(&p.img_bias));
    let yn = normalize(evt, &row(&p.evt_gain), &row(&p.evt_bias));
    let q = project(&xn, &p.w_q, &p.b_q);
    let k = project(&yn, &p.w_k, &p.b_k);
    let v = project(&yn, &p.w_v, &p.b_v);
    let c = p.w_q.ncols();
    let d_k = p.d_k.unwrap_or(hw as f64);
    let size = c / p.heads;

    let mut attn = vec![vec![0.0; c]; c];
    for j in 0..c {
        let head = j / size;
        let block: Vec<usize> = (head * size..(head + 1) * size).collect();
        let logit = |i: usize| (0..hw).map(|t| q[t][i] * k[t][j]).sum::<f64>() / d_k.sqrt();
        let ls: Vec<f64> = block.iter().map(|&i| logit(i)).collect();
        let max = ls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = ls.iter().map(|l| (l - max).exp()).sum();
        for (&i, l) in block.iter().zip(&ls) {
            attn[i][j] = (l - max).exp() / total;
        }
    }
    let o: Vec<Vec<f64>> = (0..hw)
        .map(|t| (0..c).map(|j| (0..c).map(|i| v[t][i] * attn[i][j]).sum()).collect())
        .collect();
    let proj = project(&o, &p.w_o, &p.b_o);
    let z: Vec<Vec<f64>> = img
        .iter()
        .zip(&proj)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    (mlp_forward(&z, p), attn)
}

/// `z + GELU(z W1 + b1) W2 + b2`.
pub fn mlp_forward(z: &[Vec<f64>], p: &AttentionParams) -> Vec<Vec<f64>> {
    let hidden = project(z, &p.w_1, &p.b_1);
    let act: Vec<Vec<f64>> = hidden.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    let out = project(&act, &p.w_2, &p.b_2);
    z.iter()
        .zip(&out)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect()
}

pub struct MlpGrads {
    pub x: Vec<Vec<f64>>,
    pub w_1: Vec<Vec<f64>>,
    pub b_1: Vec<f64>,
    pub w_2: Vec<Vec<f64>>,
    pub b_2: Vec<f64>,
}

/// Hand-derived gradients of `Σ mlp_forward(x)`.
pub fn mlp_grads(x: &[Vec<f64>], p: &AttentionParams) -> MlpGrads {
    let hw = x.len();
    let cc = p.w_1.nrows();
    let hid = p.w_1.ncols();
    let pre = project(x, &p.w_1, &p.b_1);
    // d loss / d act[t][m] = Σ_j W2[m][j]
    let w2_row_sums: Vec<f64> = (0..hid).map(|m| (0..cc).map(|j| p.w_2[(m, j)]).sum()).collect();
    let dpre: Vec<Vec<f64>> = pre
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(m, &v)| w2_row_sums[m] * gelu_prime(v))
                .collect()
        })
        .collect();
    let w_2 = (0..hid)
        .map(|m| vec![(0..hw).map(|t| gelu(pre[t][m])).sum::<f64>(); cc])
        .collect();
    let b_2 = vec![hw as f64; cc];
    let w_1 = (0..cc)
        .map(|i| (0..hid).map(|m| (0..hw).map(|t| x[t][i] * dpre[t][m]).sum()).collect())
        .collect();
    let b_1 = (0..hid).map(|m| (0..hw).map(|t| dpre[t][m]).sum()).collect();
    let dx = (0..hw)
        .map(|t| {
            (0..cc)
                .map(|i| 1.0 + (0..hid).map(|m| dpre[t][m] * p.w_1[(i, m)]).sum::<f64>())
                .collect()
        })
        .collect();
    MlpGrads {
        x: dx,
        w_1,
        b_1,
        w_2,
        b_2,
    }
}
