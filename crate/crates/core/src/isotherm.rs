//! Langmuir isotherm `f(u) = αu/(1+βu)` with a linear extension below zero,
//! and the scalar inversions built on it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::CellGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Isotherm {
    pub alpha: f64,
    pub beta: f64,
}

/// `(f, f', F)` at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsothermValue {
    pub f: f64,
    pub fprime: f64,
    pub primitive: f64,
}

impl Default for Isotherm {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }
}

impl Isotherm {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Coefficient(format!("alpha must be positive, got {alpha}")));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Coefficient(format!("beta must be non-negative, got {beta}")));
        }
        Ok(Self { alpha, beta })
    }

    pub fn linear(alpha: f64) -> Self {
        Self { alpha, beta: 0.0 }
    }

    pub fn f(&self, u: f64) -> f64 {
        if u <= 0.0 {
            self.alpha * u
        } else {
            self.alpha * u / (1.0 + self.beta * u)
        }
    }

    pub fn fprime(&self, u: f64) -> f64 {
        if u <= 0.0 {
            self.alpha
        } else {
            let d = 1.0 + self.beta * u;
            self.alpha / (d * d)
        }
    }

    /// `F(u) = ∫₀ᵘ f`.
    pub fn primitive(&self, u: f64) -> f64 {
        if u <= 0.0 || self.beta == 0.0 {
            return 0.5 * self.alpha * u * u;
        }
        let bu = self.beta * u;
        // u − ln(1+βu)/β loses digits for small βu; use the series there
        let bracket = if bu < 1e-4 {
            u * (bu / 2.0 - bu * bu / 3.0 + bu * bu * bu / 4.0)
        } else {
            u - bu.ln_1p() / self.beta
        };
        self.alpha / self.beta * bracket
    }

    pub fn eval(&self, u: f64) -> IsothermValue {
        IsothermValue {
            f: self.f(u),
            fprime: self.fprime(u),
            primitive: self.primitive(u),
        }
    }

    /// Conserved density `|Y⁰|u + |∂Σ⁰|f(u)`.
    pub fn density(&self, geometry: &CellGeometry, u: f64) -> f64 {
        geometry.fluid_area * u + geometry.surface_length * self.f(u)
    }

    /// Solve `|Y⁰|u + |∂Σ⁰|f(u) = z` for `u ≥ 0`.
    pub fn invert_density(&self, geometry: &CellGeometry, z: f64) -> Result<f64> {
        if !(z >= 0.0) || !z.is_finite() {
            return Err(Error::Domain(format!("density must be finite and non-negative, got {z}")));
        }
        if z == 0.0 {
            return Ok(0.0);
        }
        let y0 = geometry.fluid_area;
        let s = geometry.surface_length;
        let tol = 1e-12 * z.max(1.0);
        let g = |u: f64| y0 * u + s * self.f(u) - z;
        let (mut lo, mut hi) = (0.0, z / y0);
        // start from the linearization at 0, clipped into the bracket
        let mut u = (z / (y0 + s * self.alpha)).clamp(lo, hi);
        for _ in 0..200 {
            let r = g(u);
            if r.abs() <= tol {
                return Ok(u);
            }
            if r > 0.0 {
                hi = u;
            } else {
                lo = u;
            }
            let next = u - r / (y0 + s * self.fprime(u));
            u = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
            if hi - lo <= f64::EPSILON * hi {
                return Ok(u);
            }
        }
        Err(Error::Newton {
            iterations: 200,
            residual: g(u).abs(),
        })
    }

    /// Surface initial datum that makes `(u_in, v_in)` well prepared.
    ///
    /// `H(v) = |Y⁰|F(u_in) + ½|∂Σ⁰|v² − |Y⁰|F(u(v)) − ½|∂Σ⁰|f(u(v))²`, with
    /// `u(v)` the homogenized datum of `(u_in, v)`, has a double root, so the
    /// safeguarded Newton iteration runs on its stationarity condition
    /// `g(v) = v − f(u(v)) = 0` instead.
    pub fn well_prepared_vin(&self, geometry: &CellGeometry, u_in: f64) -> Result<f64> {
        if !(u_in >= 0.0) || !u_in.is_finite() {
            return Err(Error::Domain(format!("u_in must be finite and non-negative, got {u_in}")));
        }
        let y0 = geometry.fluid_area;
        let s = geometry.surface_length;
        let u_of = |v: f64| self.invert_density(geometry, y0 * u_in + s * v);
        let g = |v: f64| -> Result<(f64, f64)> {
            let u = u_of(v)?;
            let fp = self.fprime(u);
            // du/dv = s / (y0 + s f'(u))
            Ok((v - self.f(u), 1.0 - fp * s / (y0 + s * fp)))
        };
        // g(0) ≤ 0 and g(α u_in) ≥ 0 since f(u) ≤ αu
        let (mut lo, mut hi) = (0.0, self.alpha * u_in);
        let mut v = self.f(u_in).clamp(lo, hi);
        let tol = 1e-14 * u_in.max(1.0);
        for _ in 0..100 {
            let (r, dr) = g(v)?;
            if r.abs() <= tol {
                return Ok(v);
            }
            if r > 0.0 {
                hi = v;
            } else {
                lo = v;
            }
            let next = v - r / dr;
            v = if next >= lo && next <= hi { next } else { 0.5 * (lo + hi) };
            if hi - lo <= 4.0 * f64::EPSILON * hi.max(1.0) {
                return Ok(v);
            }
        }
        Err(Error::Newton {
            iterations: 100,
            residual: g(v)?.0.abs(),
        })
    }

    /// `H(u_in, v_in)`, the energy defect between the two-field initial data
    /// and the homogenized initial datum; zero exactly at the well-prepared
    /// root and positive elsewhere.
    pub fn energy_defect(&self, geometry: &CellGeometry, u_in: f64, v_in: f64) -> Result<f64> {
        let y0 = geometry.fluid_area;
        let s = geometry.surface_length;
        let u = self.invert_density(geometry, y0 * u_in + s * v_in)?;
        let fu = self.f(u);
        Ok(y0 * (self.primitive(u_in) - self.primitive(u)) + 0.5 * s * (v_in * v_in - fu * fu))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_geometry() -> CellGeometry {
        CellGeometry {
            obstacle_center: [0.5, 0.5],
            obstacle_radius: 0.2,
            fluid_area: 1.0,
            surface_length: 1.0,
            eta: 1.0,
        }
    }

    #[test]
    fn langmuir_values_at_one() {
        let v = Isotherm::default().eval(1.0);
        assert!((v.f - 0.5).abs() < 1e-15);
        assert!((v.fprime - 0.25).abs() < 1e-15);
        assert!((v.primitive - (1.0 - 2f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn values_at_zero_and_saturation() {
        let iso = Isotherm::new(2.0, 3.0).unwrap();
        let v = iso.eval(0.0);
        assert_eq!((v.f, v.fprime, v.primitive), (0.0, 2.0, 0.0));
        let v = iso.eval(1e8);
        assert!((v.f - 2.0 / 3.0).abs() < 1e-7);
        assert!(v.fprime < 1e-7);
    }

    #[test]
    fn linear_extension_below_zero() {
        let iso = Isotherm::default();
        assert_eq!(iso.f(-2.0), -2.0);
        assert_eq!(iso.fprime(-2.0), 1.0);
        assert_eq!(iso.primitive(-2.0), 2.0);
    }

    #[test]
    fn primitive_is_antiderivative() {
        let iso = Isotherm::new(1.5, 0.7).unwrap();
        for &u in &[1e-6, 1e-3, 0.1, 1.0, 10.0, 1e3] {
            let h = 1e-4 * u;
            let d = (iso.primitive(u + h) - iso.primitive(u - h)) / (2.0 * h);
            assert!((d - iso.f(u)).abs() < 1e-6 * iso.f(u).max(1e-12), "u={u}");
        }
    }

    #[test]
    fn invert_density_round_trip() {
        let iso = Isotherm::default();
        let g = unit_geometry();
        assert_eq!(iso.invert_density(&g, 0.0).unwrap(), 0.0);
        assert!((iso.invert_density(&g, 1.5).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(iso.invert_density(&g, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn well_prepared_examples() {
        let g = CellGeometry::centered_disk();
        let iso = Isotherm::default();
        assert_eq!(iso.well_prepared_vin(&g, 0.0).unwrap(), 0.0);
        assert!((iso.well_prepared_vin(&g, 3.0).unwrap() - 0.75).abs() < 1e-10);
        let lin = Isotherm::linear(2.0);
        assert!((lin.well_prepared_vin(&g, 1.3).unwrap() - 2.6).abs() < 1e-10);
    }

    #[test]
    fn energy_defect_vanishes_only_at_root() {
        let g = CellGeometry::centered_disk();
        let iso = Isotherm::default();
        let v = iso.well_prepared_vin(&g, 3.0).unwrap();
        assert!(iso.energy_defect(&g, 3.0, v).unwrap().abs() < 1e-12);
        assert!(iso.energy_defect(&g, 3.0, v + 0.1).unwrap() > 0.0);
        assert!(iso.energy_defect(&g, 3.0, v - 0.1).unwrap() > 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn density_inversion_round_trips(z in 0.0f64..100.0, alpha in 0.1f64..5.0, beta in 0.0f64..5.0) {
                let iso = Isotherm::new(alpha, beta).unwrap();
                let g = CellGeometry::centered_disk();
                let u = iso.invert_density(&g, z).unwrap();
                prop_assert!(u >= 0.0);
                prop_assert!((iso.density(&g, u) - z).abs() <= 1e-11 * z.max(1.0));
            }

            #[test]
            fn isotherm_bounds(u in 0.0f64..1e4, alpha in 0.1f64..5.0, beta in 0.01f64..5.0) {
                let iso = Isotherm::new(alpha, beta).unwrap();
                let v = iso.eval(u);
                prop_assert!(v.f >= 0.0 && v.f <= alpha / beta * (1.0 + 1e-15));
                prop_assert!(v.f <= alpha * u * (1.0 + 1e-15));
                prop_assert!(v.fprime > 0.0 && v.fprime <= alpha);
                prop_assert!(v.primitive >= 0.0);
            }

            #[test]
            fn well_prepared_root_is_f(u in 0.0f64..50.0, alpha in 0.1f64..5.0, beta in 0.0f64..5.0) {
                let iso = Isotherm::new(alpha, beta).unwrap();
                let g = CellGeometry::centered_disk();
                let v = iso.well_prepared_vin(&g, u).unwrap();
                prop_assert!((v - iso.f(u)).abs() <= 1e-10 * iso.f(u).max(1.0));
            }
        }
    }
}
