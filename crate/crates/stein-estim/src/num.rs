//! Small numeric utilities shared across the crate: compensated summation,
//! central finite differences, and one-dimensional quadrature.

/// Compensated (Neumaier) accumulator. Keeps pair-loop sums accurate enough
/// that exact-math oracle comparisons at 1e-12 relative stay meaningful for
/// samples in the thousands.
#[derive(Clone, Copy, Debug)]
pub struct Accumulator {
    sum: f64,
    comp: f64,
}

impl Accumulator {
    pub fn new() -> Self {
        Accumulator { sum: 0.0, comp: 0.0 }
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl Default for Accumulator {
    fn default() -> Self {
        Self::new()
    }
}

/// Compensated accumulator over a fixed-length vector of components.
#[derive(Clone, Debug)]
pub struct VecAccumulator {
    sum: Vec<f64>,
    comp: Vec<f64>,
}

impl VecAccumulator {
    pub fn new(len: usize) -> Self {
        VecAccumulator { sum: vec![0.0; len], comp: vec![0.0; len] }
    }

    #[inline]
    pub fn add_slice(&mut self, xs: &[f64]) {
        debug_assert_eq!(xs.len(), self.sum.len());
        for (k, &x) in xs.iter().enumerate() {
            let s = self.sum[k];
            let t = s + x;
            if s.abs() >= x.abs() {
                self.comp[k] += (s - t) + x;
            } else {
                self.comp[k] += (x - t) + s;
            }
            self.sum[k] = t;
        }
    }

    pub fn value(&self) -> Vec<f64> {
        self.sum.iter().zip(&self.comp).map(|(s, c)| s + c).collect()
    }
}

/// Step size for first-order central differences at a coordinate value,
/// h = eps^(1/3) * max(1, |coord|).
#[inline]
pub fn fd_step(coord: f64) -> f64 {
    f64::EPSILON.cbrt() * coord.abs().max(1.0)
}

/// Step size for second-difference stencils, h = eps^(1/4) * max(1, |coord|).
/// The first-order step squared would sit at the rounding floor.
#[inline]
pub fn fd_step2(coord: f64) -> f64 {
    f64::EPSILON.powf(0.25) * coord.abs().max(1.0)
}

/// Step size for differencing an already-differenced quantity,
/// h = eps^(1/6) * max(1, |coord|): balances truncation against the ~eps^(1/2)
/// noise carried by the inner stencil.
#[inline]
pub fn fd_step3(coord: f64) -> f64 {
    f64::EPSILON.powf(1.0 / 6.0) * coord.abs().max(1.0)
}

/// First central difference of a scalar function of one coordinate.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    let h = fd_step(x);
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Composite Simpson quadrature of `f` over `[a, b]` with `n` subintervals
/// (`n` is rounded up to even).
pub fn simpson(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = if n % 2 == 0 { n.max(2) } else { n + 1 };
    let h = (b - a) / n as f64;
    let mut acc = Accumulator::new();
    acc.add(f(a));
    acc.add(f(b));
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc.add(w * f(a + i as f64 * h));
    }
    acc.value() * h / 3.0
}

/// Relative error normalized as |a-b| / (1 + max(|a|,|b|)); the +1 keeps the
/// comparison meaningful near zero.
#[inline]
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs().max(b.abs()))
}
