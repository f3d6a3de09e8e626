//! Link functions g with first and second derivatives.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::sync::Arc;

/// Link family selector used in configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    #[default]
    Expit,
    Probit,
    Custom,
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A smooth monotone map from the real line to (0, 1).
#[derive(Clone)]
pub struct Link {
    kind: LinkKind,
    custom: Option<[ScalarFn; 3]>,
}

impl fmt::Debug for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Link({:?})", self.kind)
    }
}

impl Default for Link {
    fn default() -> Self {
        Link::expit()
    }
}

impl Link {
    pub fn expit() -> Self {
        Link { kind: LinkKind::Expit, custom: None }
    }

    pub fn probit() -> Self {
        Link { kind: LinkKind::Probit, custom: None }
    }

    /// User-supplied g, g' and g''. No range check is made, so diagnostic
    /// links such as the identity are accepted.
    pub fn custom(
        g: impl Fn(f64) -> f64 + Send + Sync + 'static,
        gdot: impl Fn(f64) -> f64 + Send + Sync + 'static,
        gddot: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Link { kind: LinkKind::Custom, custom: Some([Arc::new(g), Arc::new(gdot), Arc::new(gddot)]) }
    }

    /// Identity link, for checking solvers against closed-form least squares.
    pub fn identity() -> Self {
        Link::custom(|a| a, |_| 1.0, |_| 0.0)
    }

    /// Builds a link from its kind; `Custom` requires [`Link::custom`].
    pub fn from_kind(kind: LinkKind) -> Option<Self> {
        match kind {
            LinkKind::Expit => Some(Link::expit()),
            LinkKind::Probit => Some(Link::probit()),
            LinkKind::Custom => None,
        }
    }

    pub fn kind(&self) -> LinkKind {
        self.kind
    }

    #[inline]
    pub fn g(&self, a: f64) -> f64 {
        match self.kind {
            LinkKind::Expit => expit(a),
            LinkKind::Probit => normal_cdf(a),
            LinkKind::Custom => (self.custom.as_ref().unwrap()[0])(a),
        }
    }

    #[inline]
    pub fn gdot(&self, a: f64) -> f64 {
        match self.kind {
            LinkKind::Expit => {
                let p = expit(a);
                p * (1.0 - p)
            }
            LinkKind::Probit => normal_pdf(a),
            LinkKind::Custom => (self.custom.as_ref().unwrap()[1])(a),
        }
    }

    #[inline]
    pub fn gddot(&self, a: f64) -> f64 {
        match self.kind {
            LinkKind::Expit => {
                let p = expit(a);
                p * (1.0 - p) * (1.0 - 2.0 * p)
            }
            LinkKind::Probit => -a * normal_pdf(a),
            LinkKind::Custom => (self.custom.as_ref().unwrap()[2])(a),
        }
    }

    /// g and g' together.
    #[inline]
    pub fn g_gdot(&self, a: f64) -> (f64, f64) {
        match self.kind {
            LinkKind::Expit => {
                let p = expit(a);
                (p, p * (1.0 - p))
            }
            _ => (self.g(a), self.gdot(a)),
        }
    }

    /// Inverse of g for the built-in links.
    pub fn inverse(&self, p: f64) -> f64 {
        match self.kind {
            LinkKind::Expit => (p / (1.0 - p)).ln(),
            LinkKind::Probit => normal_quantile(p),
            LinkKind::Custom => {
                // bisection on the monotone custom link
                let (mut lo, mut hi) = (-50.0, 50.0);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.g(mid) < p {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            }
        }
    }
}

#[inline]
pub fn expit(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn normal_pdf(a: f64) -> f64 {
    (-0.5 * a * a).exp() / (2.0 * PI).sqrt()
}

#[inline]
pub fn normal_cdf(a: f64) -> f64 {
    0.5 * erfc(-a * FRAC_1_SQRT_2)
}

pub fn normal_quantile(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let mut x = Normal::standard().inverse_cdf(p);
    // Newton polish of the library value
    for _ in 0..2 {
        if x.is_finite() {
            let d = normal_pdf(x);
            if d > 0.0 {
                x -= (normal_cdf(x) - p) / d;
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expit_derivatives_match_finite_differences() {
        let link = Link::expit();
        for &a in &[-4.0, -0.3, 0.0, 1.7, 6.0] {
            let h = 1e-5;
            let fd1 = (link.g(a + h) - link.g(a - h)) / (2.0 * h);
            let fd2 = (link.gdot(a + h) - link.gdot(a - h)) / (2.0 * h);
            assert!((fd1 - link.gdot(a)).abs() < 1e-9);
            assert!((fd2 - link.gddot(a)).abs() < 1e-9);
        }
    }

    #[test]
    fn probit_derivatives_match_finite_differences() {
        let link = Link::probit();
        for &a in &[-3.0, -0.5, 0.0, 0.8, 2.5] {
            let h = 1e-5;
            let fd1 = (link.g(a + h) - link.g(a - h)) / (2.0 * h);
            let fd2 = (link.gdot(a + h) - link.gdot(a - h)) / (2.0 * h);
            assert!((fd1 - link.gdot(a)).abs() < 1e-9);
            assert!((fd2 - link.gddot(a)).abs() < 1e-9);
        }
        assert!((link.g(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn expit_is_stable_in_tails() {
        assert_eq!(expit(-800.0), 0.0);
        assert_eq!(expit(800.0), 1.0);
        assert!((expit(3.0f64.ln()) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn inverse_round_trips() {
        for link in [Link::expit(), Link::probit()] {
            for &p in &[0.1, 0.3, 0.5, 0.9] {
                assert!((link.g(link.inverse(p)) - p).abs() < 1e-12);
            }
        }
        let id = Link::custom(expit, |a| expit(a) * (1.0 - expit(a)), |_| 0.0);
        assert!((id.inverse(0.3) - Link::expit().inverse(0.3)).abs() < 1e-9);
    }
}
