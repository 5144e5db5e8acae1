//! Monotone rational-quadratic splines on `[-B, B]` with identity tails.
//!
//! Raw network outputs for one transformed coordinate are laid out as
//! `K` width logits, `K` height logits and `K - 1` interior derivative
//! pre-activations. Boundary derivatives are fixed to 1 so the spline joins
//! the identity tails with a continuous slope.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplineConfig {
    pub bins: usize,
    pub tail_bound: f64,
    pub min_bin_width: f64,
    pub min_bin_height: f64,
    pub min_derivative: f64,
}

impl Default for SplineConfig {
    fn default() -> Self {
        Self {
            bins: 8,
            tail_bound: 3.0,
            min_bin_width: 1e-3,
            min_bin_height: 1e-3,
            min_derivative: 1e-3,
        }
    }
}

impl SplineConfig {
    /// Raw parameters consumed per transformed coordinate.
    pub fn params_per_dim(&self) -> usize {
        3 * self.bins - 1
    }

    /// Offset added to derivative pre-activations so a raw value of 0 yields
    /// a derivative of exactly 1.
    fn derivative_offset(&self) -> f64 {
        (1.0 - self.min_derivative).exp_m1().ln()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(raw: &[f64]) -> Vec<f64> {
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = raw.iter().map(|r| (r - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Knot positions built from positive bin sizes summing to `2B`.
fn knots(sizes: &[f64], bound: f64) -> Vec<f64> {
    let k = sizes.len();
    let mut out = Vec::with_capacity(k + 1);
    out.push(-bound);
    let mut acc = -bound;
    for &s in &sizes[..k - 1] {
        acc += s;
        out.push(acc);
    }
    out.push(bound);
    out
}

/// A materialized spline: knots `xs`, `ys` and knot derivatives `ds`, each of
/// length `K + 1`.
#[derive(Debug, Clone)]
pub struct Spline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    ds: Vec<f64>,
    bound: f64,
    // Softmax outputs and derivative pre-activations retained for the
    // backward pass when built from raw parameters.
    width_probs: Vec<f64>,
    height_probs: Vec<f64>,
    deriv_pre: Vec<f64>,
    floors: (f64, f64),
}

/// Forward quantities inside a bin, shared by the value and gradient paths.
struct BinEval {
    bin: usize,
    xi: f64,
    w: f64,
    h: f64,
    s: f64,
    d0: f64,
    d1: f64,
    num: f64,
    den: f64,
    q: f64,
}

impl Spline {
    pub fn from_raw(raw: &[f64], cfg: &SplineConfig) -> Self {
        let k = cfg.bins;
        debug_assert_eq!(raw.len(), cfg.params_per_dim());
        let span = 2.0 * cfg.tail_bound;
        let width_probs = softmax(&raw[..k]);
        let height_probs = softmax(&raw[k..2 * k]);
        let widths: Vec<f64> = width_probs
            .iter()
            .map(|p| span * (cfg.min_bin_width + (1.0 - k as f64 * cfg.min_bin_width) * p))
            .collect();
        let heights: Vec<f64> = height_probs
            .iter()
            .map(|p| span * (cfg.min_bin_height + (1.0 - k as f64 * cfg.min_bin_height) * p))
            .collect();
        let offset = cfg.derivative_offset();
        let deriv_pre: Vec<f64> = raw[2 * k..].iter().map(|r| r + offset).collect();
        let mut ds = Vec::with_capacity(k + 1);
        ds.push(1.0);
        ds.extend(deriv_pre.iter().map(|&p| cfg.min_derivative + softplus(p)));
        ds.push(1.0);
        Self {
            xs: knots(&widths, cfg.tail_bound),
            ys: knots(&heights, cfg.tail_bound),
            ds,
            bound: cfg.tail_bound,
            width_probs,
            height_probs,
            deriv_pre,
            floors: (cfg.min_bin_width, cfg.min_bin_height),
        }
    }

    /// Builds a spline from already-normalized bin widths and heights and the
    /// `K - 1` interior derivatives. Sizes and derivatives below the floors in
    /// `cfg` are clamped and the sizes rescaled to span `2B` again.
    pub fn from_normalized(widths: &[f64], heights: &[f64], derivatives: &[f64], cfg: &SplineConfig) -> Self {
        let span = 2.0 * cfg.tail_bound;
        let fix = |v: &[f64], floor: f64| -> Vec<f64> {
            let floor = floor * span;
            let c: Vec<f64> = v.iter().map(|x| x.max(floor)).collect();
            let total: f64 = c.iter().sum();
            c.into_iter().map(|x| x * span / total).collect()
        };
        let widths = fix(widths, cfg.min_bin_width);
        let heights = fix(heights, cfg.min_bin_height);
        let mut ds = Vec::with_capacity(widths.len() + 1);
        ds.push(1.0);
        ds.extend(derivatives.iter().map(|d| d.max(cfg.min_derivative)));
        ds.push(1.0);
        Self {
            xs: knots(&widths, cfg.tail_bound),
            ys: knots(&heights, cfg.tail_bound),
            ds,
            bound: cfg.tail_bound,
            width_probs: Vec::new(),
            height_probs: Vec::new(),
            deriv_pre: Vec::new(),
            floors: (cfg.min_bin_width, cfg.min_bin_height),
        }
    }

    fn in_support(&self, x: f64) -> bool {
        x >= -self.bound && x <= self.bound
    }

    fn locate(knots: &[f64], x: f64) -> usize {
        let k = knots.len() - 1;
        // Linear scan: K is small and this keeps boundary handling explicit.
        let mut bin = 0;
        while bin + 1 < k && x >= knots[bin + 1] {
            bin += 1;
        }
        bin
    }

    fn eval_bin(&self, bin: usize, xi: f64) -> BinEval {
        let w = self.xs[bin + 1] - self.xs[bin];
        let h = self.ys[bin + 1] - self.ys[bin];
        let s = h / w;
        let (d0, d1) = (self.ds[bin], self.ds[bin + 1]);
        let t = xi * (1.0 - xi);
        let num = h * (s * xi * xi + d0 * t);
        let den = s + (d1 + d0 - 2.0 * s) * t;
        let q = d1 * xi * xi + 2.0 * s * t + d0 * (1.0 - xi) * (1.0 - xi);
        BinEval {
            bin,
            xi,
            w,
            h,
            s,
            d0,
            d1,
            num,
            den,
            q,
        }
    }

    fn eval(&self, x: f64) -> BinEval {
        let bin = Self::locate(&self.xs, x);
        let w = self.xs[bin + 1] - self.xs[bin];
        let xi = ((x - self.xs[bin]) / w).clamp(0.0, 1.0);
        self.eval_bin(bin, xi)
    }

    fn output(&self, e: &BinEval) -> (f64, f64) {
        let y = self.ys[e.bin] + e.num / e.den;
        let logdet = 2.0 * e.s.ln() + e.q.ln() - 2.0 * e.den.ln();
        (y, logdet)
    }

    /// `(y, log dy/dx)`.
    pub fn forward(&self, x: f64) -> (f64, f64) {
        if !self.in_support(x) {
            return (x, 0.0);
        }
        self.output(&self.eval(x))
    }

    /// Analytic inverse; returns `(x, log dy/dx at x)`.
    pub fn inverse(&self, y: f64) -> (f64, f64) {
        if !self.in_support(y) {
            return (y, 0.0);
        }
        let bin = Self::locate(&self.ys, y);
        let w = self.xs[bin + 1] - self.xs[bin];
        let h = self.ys[bin + 1] - self.ys[bin];
        let s = h / w;
        let (d0, d1) = (self.ds[bin], self.ds[bin + 1]);
        let dy = y - self.ys[bin];
        let c = d1 + d0 - 2.0 * s;
        let a = h * (s - d0) + dy * c;
        let b = h * d0 - dy * c;
        let cc = -s * dy;
        let disc = (b * b - 4.0 * a * cc).max(0.0);
        let xi = (2.0 * cc / (-b - disc.sqrt())).clamp(0.0, 1.0);
        let x = xi * w + self.xs[bin];
        let (_, logdet) = self.output(&self.eval_bin(bin, xi));
        (x, logdet)
    }

    /// Reverse pass for `L = a·y + b·log dy/dx` at input `x`. Returns `∂L/∂x`
    /// and, when the spline was built from raw parameters, adds `∂L/∂raw`
    /// into `raw_grad`.
    pub fn backward(&self, x: f64, a: f64, b: f64, raw_grad: &mut [f64]) -> f64 {
        if !self.in_support(x) {
            return a;
        }
        let e = self.eval(x);
        let BinEval {
            bin,
            xi,
            w,
            h,
            s,
            d0,
            d1,
            num,
            den,
            q,
        } = e;
        let t = xi * (1.0 - xi);
        let g_num = a / den;
        let g_den = -a * num / (den * den) - 2.0 * b / den;
        let g_q = b / q;
        let g_s = 2.0 * b / s + 2.0 * t * g_q + g_num * h * xi * xi + g_den * (1.0 - 2.0 * t);
        let g_xi = g_num * h * (2.0 * s * xi + d0 * (1.0 - 2.0 * xi))
            + g_den * (d1 + d0 - 2.0 * s) * (1.0 - 2.0 * xi)
            + g_q * (2.0 * d1 * xi + 2.0 * s * (1.0 - 2.0 * xi) - 2.0 * d0 * (1.0 - xi));
        let g_d0 = g_num * h * t + g_den * t + g_q * (1.0 - xi) * (1.0 - xi);
        let g_d1 = g_den * t + g_q * xi * xi;
        let g_h = g_num * (s * xi * xi + d0 * t) + g_s / w;
        let g_w = -g_s * s / w - g_xi * xi / w;
        let g_x = g_xi / w;

        if !raw_grad.is_empty() && !self.width_probs.is_empty() {
            let k = self.xs.len() - 1;
            let mut g_xs = vec![0.0; k + 1];
            g_xs[bin] += -g_xi / w - g_w;
            g_xs[bin + 1] += g_w;
            let mut g_ys = vec![0.0; k + 1];
            g_ys[bin] += a - g_h;
            g_ys[bin + 1] += g_h;
            let mut g_ds = vec![0.0; k + 1];
            g_ds[bin] += g_d0;
            g_ds[bin + 1] += g_d1;
            self.chain_to_raw(&g_xs, &g_ys, &g_ds, raw_grad);
        }
        g_x
    }

    fn chain_to_raw(&self, g_xs: &[f64], g_ys: &[f64], g_ds: &[f64], raw_grad: &mut [f64]) {
        let k = self.xs.len() - 1;
        let span = 2.0 * self.bound;
        // Knot j (0 < j < K) is the running sum of sizes 0..j; the end knots
        // are constants.
        let size_grads = |g_knots: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; k];
            let mut acc = 0.0;
            for i in (0..k).rev() {
                if i + 1 < k {
                    acc += g_knots[i + 1];
                }
                out[i] = acc;
            }
            out
        };
        let softmax_back = |g_sizes: &[f64], probs: &[f64], min: f64, out: &mut [f64]| {
            let scale = span * (1.0 - k as f64 * min);
            let g_p: Vec<f64> = g_sizes.iter().map(|g| g * scale).collect();
            let dotp: f64 = g_p.iter().zip(probs).map(|(g, p)| g * p).sum();
            for i in 0..k {
                out[i] += probs[i] * (g_p[i] - dotp);
            }
        };
        let (min_w, min_h) = self.floors;
        let gw = size_grads(g_xs);
        let gh = size_grads(g_ys);
        let (w_part, rest) = raw_grad.split_at_mut(k);
        let (h_part, d_part) = rest.split_at_mut(k);
        softmax_back(&gw, &self.width_probs, min_w, w_part);
        softmax_back(&gh, &self.height_probs, min_h, h_part);
        for i in 0..k - 1 {
            d_part[i] += g_ds[i + 1] * sigmoid(self.deriv_pre[i]);
        }
    }

    pub fn knots_x(&self) -> &[f64] {
        &self.xs
    }

    pub fn knots_y(&self) -> &[f64] {
        &self.ys
    }

    pub fn derivatives(&self) -> &[f64] {
        &self.ds
    }
}

/// Evaluates a spline given normalized bin widths and heights (each summing
/// to `2·tail_bound`) and `K - 1` positive interior derivatives.
pub fn rqs_transform(
    x: f64,
    widths: &[f64],
    heights: &[f64],
    derivatives: &[f64],
    tail_bound: f64,
) -> (f64, f64) {
    let cfg = SplineConfig {
        bins: widths.len(),
        tail_bound,
        ..SplineConfig::default()
    };
    assert!(cfg.bins >= 2, "a spline needs at least two bins");
    assert_eq!(heights.len(), cfg.bins);
    assert_eq!(derivatives.len(), cfg.bins - 1);
    Spline::from_normalized(widths, heights, derivatives, &cfg).forward(x)
}
