//! Smooth activations and their derivatives of arbitrary order.
//!
//! Second- and third-order training objectives differentiate through the
//! derivative of an activation, so every derivative has to be available as a
//! differentiable op in turn. Both families admit closed forms:
//!
//! * GELU, `x·Φ(x)`: the first derivative is `Φ(x) + x·φ(x)` and every higher
//!   derivative is `P_k(x)·φ(x)` with `P_2 = 2 − x²` and
//!   `P_{k+1} = P_k' − x·P_k`.
//! * SiLU, `x·σ(x)`: `silu⁽ᵏ⁾ = x·σ⁽ᵏ⁾ + k·σ⁽ᵏ⁻¹⁾`, where `σ⁽ʲ⁾ = Q_j(σ)` with
//!   `Q_0(s) = s` and `Q_{j+1}(s) = Q_j'(s)·s(1 − s)`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Gelu,
    Silu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Silu => "silu",
        }
    }

    /// Returns a closure evaluating the `order`-th derivative.
    pub fn derivative(self, order: u32) -> Box<dyn Fn(f64) -> f64> {
        match self {
            Activation::Gelu => gelu_derivative(order),
            Activation::Silu => silu_derivative(order),
        }
    }
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Polynomial coefficients, lowest degree first.
type Poly = Vec<f64>;

fn poly_eval(p: &[f64], x: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

fn poly_derive(p: &[f64]) -> Poly {
    p.iter()
        .enumerate()
        .skip(1)
        .map(|(i, &c)| c * i as f64)
        .collect()
}

fn poly_mul(a: &[f64], b: &[f64]) -> Poly {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_sub(a: &[f64], b: &[f64]) -> Poly {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| a.get(i).copied().unwrap_or(0.0) - b.get(i).copied().unwrap_or(0.0))
        .collect()
}

fn gelu_poly(order: u32) -> Poly {
    let mut p: Poly = vec![2.0, 0.0, -1.0];
    for _ in 2..order {
        let shifted = poly_mul(&p, &[0.0, 1.0]);
        p = poly_sub(&poly_derive(&p), &shifted);
    }
    p
}

fn gelu_derivative(order: u32) -> Box<dyn Fn(f64) -> f64> {
    match order {
        0 => Box::new(|x| x * normal_cdf(x)),
        1 => Box::new(|x| normal_cdf(x) + x * normal_pdf(x)),
        k => {
            let p = gelu_poly(k);
            Box::new(move |x| poly_eval(&p, x) * normal_pdf(x))
        }
    }
}

/// `σ⁽ʲ⁾` as a polynomial in `σ`, for `j = 0..=order`.
fn sigmoid_polys(order: u32) -> Vec<Poly> {
    let mut out = vec![vec![0.0, 1.0]];
    for j in 0..order as usize {
        let next = poly_mul(&poly_derive(&out[j]), &[0.0, 1.0, -1.0]);
        out.push(next);
    }
    out
}

fn silu_derivative(order: u32) -> Box<dyn Fn(f64) -> f64> {
    let q = sigmoid_polys(order);
    let k = order as usize;
    Box::new(move |x| {
        let s = sigmoid(x);
        let mut v = x * poly_eval(&q[k], s);
        if k > 0 {
            v += k as f64 * poly_eval(&q[k - 1], s);
        }
        v
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central(f: &dyn Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn gelu_known_forms() {
        let d2 = gelu_derivative(2);
        let d3 = gelu_derivative(3);
        let d4 = gelu_derivative(4);
        for &x in &[-1.7, -0.2, 0.0, 0.9, 2.3] {
            let phi = normal_pdf(x);
            assert!((d2(x) - (2.0 - x * x) * phi).abs() < 1e-14);
            assert!((d3(x) - (x.powi(3) - 4.0 * x) * phi).abs() < 1e-14);
            assert!((d4(x) - (-x.powi(4) + 7.0 * x * x - 4.0) * phi).abs() < 1e-14);
        }
    }

    #[test]
    fn each_derivative_matches_difference_of_previous() {
        for act in [Activation::Gelu, Activation::Silu] {
            for k in 0..5 {
                let f = act.derivative(k);
                let df = act.derivative(k + 1);
                for &x in &[-2.0, -0.7, 0.0, 0.4, 1.9] {
                    let fd = central(&*f, x);
                    assert!(
                        (fd - df(x)).abs() < 1e-8,
                        "{} order {k} at {x}: fd {fd} vs {}",
                        act.name(),
                        df(x)
                    );
                }
            }
        }
    }

    #[test]
    fn silu_first_derivative() {
        let d1 = silu_derivative(1);
        let x: f64 = 0.8;
        let s = sigmoid(x);
        assert!((d1(x) - (s + x * s * (1.0 - s))).abs() < 1e-15);
    }
}
