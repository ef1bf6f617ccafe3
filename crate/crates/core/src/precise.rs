//! Double-double arithmetic and extended-precision reference objectives.
//!
//! Central differences in plain `f64` cannot resolve gradient components
//! much below `1e-8` for an O(1) loss: the rounding noise of each
//! evaluation (~`1e-16 * |f|`) divided by `2h` swamps them. Evaluating the
//! objective with ~32 significant digits instead removes that floor. The
//! objectives here are written directly against slices, without the
//! autodiff graph, so they double as an independent implementation.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::attention::ScaleMode;
use crate::rope::RopeConfig;
use crate::toy::{Episode, TaskConfig};

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn new(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    /// `a + b` held exactly.
    pub fn sum_exact(a: f64, b: f64) -> Self {
        let (hi, lo) = two_sum(a, b);
        Self { hi, lo }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn ldexp(self, k: i32) -> Self {
        let s = 2f64.powi(k);
        Self {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }

    pub fn exp(self) -> Self {
        if self.hi < -745.0 {
            return Self::ZERO;
        }
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * Dd::new(k)).ldexp(-10);
        // Taylor series of exp(r) - 1; |r| < 4e-4, so 14 terms is ample.
        let mut term = r;
        let mut sum = r;
        for i in 2..=14 {
            term = term * r / Dd::new(i as f64);
            sum = sum + term;
        }
        // (1 + s)^2 - 1 = s * (2 + s), applied ten times.
        for _ in 0..10 {
            sum = sum * (sum + Dd::new(2.0));
        }
        (sum + Dd::ONE).ldexp(k as i32)
    }

    pub fn ln(self) -> Self {
        assert!(self.hi > 0.0, "ln of non-positive value");
        let mut y = Dd::new(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Dd::ONE;
        }
        y
    }
}

impl From<f64> for Dd {
    fn from(x: f64) -> Self {
        Dd::new(x)
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::new(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::new(q2);
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + Dd::new(q3)
    }
}

fn dot(a: &[Dd], b: &[Dd]) -> Dd {
    a.iter().zip(b).fold(Dd::ZERO, |acc, (&x, &y)| acc + x * y)
}

/// Rotates `v` by `position` with the same `f64` sines and cosines the
/// library uses.
fn rotate(v: &mut [Dd], position: f64, rope: &RopeConfig) {
    for (i, theta) in rope.thetas().into_iter().enumerate() {
        let (a, b) = rope.pair(i);
        let (sin, cos) = (position * theta).sin_cos();
        let (sin, cos) = (Dd::new(sin), Dd::new(cos));
        let (x, y) = (v[a], v[b]);
        v[a] = x * cos - y * sin;
        v[b] = x * sin + y * cos;
    }
}

fn softmax(scores: &[Dd]) -> Vec<Dd> {
    let m = Dd::new(scores.iter().map(|s| s.hi).fold(f64::NEG_INFINITY, f64::max));
    let e: Vec<Dd> = scores.iter().map(|&s| (s - m).exp()).collect();
    let z = e.iter().fold(Dd::ZERO, |acc, &x| acc + x);
    e.into_iter().map(|x| x / z).collect()
}

/// Attention output for one query over `keys`/`values` rows of width `d`.
/// `positions` (with `rope`) rotates the keys; the query is rotated by
/// `query_position`.
#[allow(clippy::too_many_arguments)]
pub fn attend(
    query: &[Dd],
    keys: &[Dd],
    values: &[Dd],
    d: usize,
    positions: &[usize],
    query_position: usize,
    rope: Option<&RopeConfig>,
    scale: ScaleMode,
) -> Vec<Dd> {
    let factor = Dd::new(scale.factor(d));
    let mut q = query.to_vec();
    if let (Some(cfg), true) = (rope, query_position != 0) {
        rotate(&mut q, query_position as f64, cfg);
    }
    let scores: Vec<Dd> = keys
        .chunks(d)
        .enumerate()
        .map(|(j, k)| {
            let mut k = k.to_vec();
            if let Some(cfg) = rope {
                rotate(&mut k, positions[j] as f64, cfg);
            }
            dot(&k, &q) * factor
        })
        .collect();
    let w = softmax(&scores);
    let dv = values.len() / w.len();
    let mut out = vec![Dd::ZERO; dv];
    for (wj, row) in w.iter().zip(values.chunks(dv)) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + *wj * v;
        }
    }
    out
}

/// Retrieval loss of one episode, with Q, K, V given row-major.
pub fn toy_loss(queries: &[Dd], keys: &[Dd], values: &[Dd], episode: &Episode, config: &TaskConfig) -> Dd {
    let d = config.head_dim;
    let row = |t: &[Dd], r: usize| t[r * d..(r + 1) * d].to_vec();
    let q = row(queries, episode.target);
    let ks: Vec<Dd> = episode.subset.iter().flat_map(|&j| row(keys, j)).collect();
    let vs: Vec<Dd> = episode.subset.iter().flat_map(|&j| row(values, j)).collect();
    let rope = config.rope();
    let a = attend(&q, &ks, &vs, d, &episode.positions, 0, rope.as_ref(), config.scale_mode);
    let logits: Vec<Dd> = values.chunks(d).map(|v| dot(v, &a)).collect();
    let m = Dd::new(logits.iter().map(|l| l.hi).fold(f64::NEG_INFINITY, f64::max));
    let z = logits.iter().fold(Dd::ZERO, |acc, &l| acc + (l - m).exp());
    -(logits[episode.target] - m - z.ln())
}

/// One recorded head instance in extended precision.
pub struct HeadInstance<'a> {
    pub query: &'a [f64],
    pub keys: &'a [f64],
    pub values: &'a [f64],
    pub positions: &'a [usize],
    pub query_position: usize,
    pub rope: Option<&'a RopeConfig>,
    pub scale: ScaleMode,
}

/// Mean squared output distortion of masking the query with `u`, plus
/// `alpha * sum(u)`.
pub fn mask_objective(u: &[Dd], heads: &[HeadInstance<'_>], alpha: f64) -> Dd {
    let lift = |x: &[f64]| x.iter().map(|&v| Dd::new(v)).collect::<Vec<_>>();
    let mut total = Dd::ZERO;
    for h in heads {
        let d = h.query.len();
        let (q, k, v) = (lift(h.query), lift(h.keys), lift(h.values));
        let reference = attend(&q, &k, &v, d, h.positions, h.query_position, h.rope, h.scale);
        let qm: Vec<Dd> = q.iter().zip(u).map(|(&a, &b)| a * b).collect();
        let masked = attend(&qm, &k, &v, d, h.positions, h.query_position, h.rope, h.scale);
        total = total
            + reference
                .iter()
                .zip(&masked)
                .fold(Dd::ZERO, |acc, (&r, &m)| acc + (r - m) * (r - m));
    }
    let l1 = u.iter().fold(Dd::ZERO, |acc, &x| acc + x);
    total / Dd::new(heads.len() as f64) + Dd::new(alpha) * l1
}
