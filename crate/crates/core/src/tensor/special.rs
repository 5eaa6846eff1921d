//! Error function and its inverse.

use std::f64::consts::PI;

/// Gauss error function, `erf(x) = 2/√π ∫₀ˣ e^{−t²} dt`.
#[inline]
pub fn erf_scalar(x: f64) -> f64 {
    libm::erf(x)
}

/// `d/dx erf(x) = 2/√π · e^{−x²}`.
#[inline]
pub fn erf_derivative(x: f64) -> f64 {
    2.0 / PI.sqrt() * (-x * x).exp()
}

/// Inverse error function on `(-1, 1)`.
///
/// Starts from Giles' single-precision polynomial and refines with two Newton
/// steps on `erf`. Returns `±inf` at `±1` and NaN outside `[-1, 1]`.
pub fn erf_inv_scalar(s: f64) -> f64 {
    if s.is_nan() || s.abs() > 1.0 {
        return f64::NAN;
    }
    if s == 1.0 {
        return f64::INFINITY;
    }
    if s == -1.0 {
        return f64::NEG_INFINITY;
    }
    if s == 0.0 {
        return 0.0;
    }
    let mut x = giles_initial(s);
    for _ in 0..2 {
        let d = erf_derivative(x);
        if d == 0.0 {
            break;
        }
        x -= (erf_scalar(x) - s) / d;
    }
    x
}

fn giles_initial(s: f64) -> f64 {
    let mut w = -((1.0 - s) * (1.0 + s)).ln();
    let p = if w < 5.0 {
        w -= 2.5;
        let mut p = 2.810_226_36e-08;
        p = 3.432_739_39e-07 + p * w;
        p = -3.523_387_7e-06 + p * w;
        p = -4.391_506_54e-06 + p * w;
        p = 0.000_218_580_87 + p * w;
        p = -0.001_253_725_03 + p * w;
        p = -0.004_177_681_64 + p * w;
        p = 0.246_640_727 + p * w;
        1.501_409_41 + p * w
    } else {
        w = w.sqrt() - 3.0;
        let mut p = -0.000_200_214_257;
        p = 0.000_100_950_558 + p * w;
        p = 0.001_349_343_22 + p * w;
        p = -0.003_673_428_44 + p * w;
        p = 0.005_739_507_73 + p * w;
        p = -0.007_622_461_3 + p * w;
        p = 0.009_438_870_47 + p * w;
        p = 1.001_674_06 + p * w;
        2.832_976_82 + p * w
    };
    p * s
}
