//! Per-fragment opacity in the two supported modes and front-to-back alpha
//! blending.
//!
//! In the material-aware mode a splat behaves like a slab of absorbing
//! particles: number density `o·G(x)`, cross section `σ = f(m)` and unit path
//! length, so its opacity is `1 − exp(−o·G·σ)`.

use serde::{Deserialize, Serialize};

use crate::crossnet::sigmoid;
use crate::error::{Error, Result};

/// Upper clamp on any single fragment's alpha.
pub const ALPHA_MAX: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpacityMode {
    /// `α = o·G`.
    Baseline,
    /// `α = 1 − exp(−o·G·σ)`.
    Omg,
}

impl std::fmt::Display for OpacityMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OpacityMode::Baseline => "baseline",
            OpacityMode::Omg => "omg",
        })
    }
}

impl std::str::FromStr for OpacityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(OpacityMode::Baseline),
            "omg" => Ok(OpacityMode::Omg),
            _ => Err(Error::invalid(format!("unknown opacity mode `{s}`"))),
        }
    }
}

/// Map from the unconstrained per-Gaussian parameter to the opacity `o`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpacityActivation {
    /// `o ∈ (0, 1)`; caps OMG alpha at `1 − e⁻¹`.
    #[default]
    Sigmoid,
    /// `o ∈ (0, ∞)`, an unbounded density.
    Softplus,
}

impl OpacityActivation {
    pub fn apply(self, raw: f64) -> f64 {
        match self {
            OpacityActivation::Sigmoid => sigmoid(raw),
            OpacityActivation::Softplus => {
                if raw > 30.0 {
                    raw + (-raw).exp().ln_1p()
                } else {
                    raw.exp().ln_1p()
                }
            }
        }
    }

    pub fn derivative(self, raw: f64) -> f64 {
        match self {
            OpacityActivation::Sigmoid => {
                let s = sigmoid(raw);
                s * (1.0 - s)
            }
            OpacityActivation::Softplus => sigmoid(raw),
        }
    }
}

/// Fragment-level thresholds of the fast blending path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cutoffs {
    /// Fragments with `α` below this are skipped.
    pub alpha_skip: f64,
    /// Blending stops once transmittance drops below this.
    pub t_min: f64,
}

impl Cutoffs {
    /// No skipping and no early termination.
    pub const EXACT: Cutoffs = Cutoffs {
        alpha_skip: 0.0,
        t_min: 0.0,
    };

    /// The usual rasterizer thresholds (`1/255`, `1e-4`). Faster, but the
    /// result can differ from exact blending by up to about `1e-2`.
    pub const SPLATTING: Cutoffs = Cutoffs {
        alpha_skip: 1.0 / 255.0,
        t_min: 1e-4,
    };
}

impl Default for Cutoffs {
    /// Thresholds small enough that skipped work changes a pixel by well under `1e-6`.
    fn default() -> Self {
        Cutoffs {
            alpha_skip: 1e-10,
            t_min: 1e-9,
        }
    }
}

/// Optical depth `o·G·σ`, the exponent of the material-aware alpha.
#[inline]
pub fn optical_depth(o: f64, g: f64, sigma: f64) -> f64 {
    o * g * sigma
}

#[inline]
pub fn alpha_baseline_unclamped(o: f64, g: f64) -> f64 {
    o * g
}

#[inline]
pub fn alpha_omg_unclamped(o: f64, g: f64, sigma: f64) -> f64 {
    -(-optical_depth(o, g, sigma)).exp_m1()
}

pub fn alpha_baseline(o: f64, g: f64) -> f64 {
    alpha_baseline_unclamped(o, g).min(ALPHA_MAX)
}

pub fn alpha_omg(o: f64, g: f64, sigma: f64) -> f64 {
    alpha_omg_unclamped(o, g, sigma).min(ALPHA_MAX)
}

/// Alpha of a ray segment with density `sigma_density` and length `delta`.
pub fn nerf_alpha(sigma_density: f64, delta: f64) -> f64 {
    -(-(sigma_density * delta)).exp_m1()
}

/// `t − (1 − e^(−t))`, the gap between the linear and exponential alpha.
/// Lies in `[0, t²/2]`.
pub fn taylor_gap(t: f64) -> f64 {
    if t < 0.5 {
        // t² · Σ_{k≥0} (−t)^k / (k+2)!, every partial bracket stays in [0, 1/2]
        let mut acc = 0.0;
        let mut fact = 1.0;
        let coeffs: Vec<f64> = (2..=22)
            .map(|k| {
                fact *= k as f64;
                1.0 / fact
            })
            .collect();
        for c in coeffs.iter().rev() {
            acc = c - t * acc;
        }
        t * t * acc
    } else {
        t + (-t).exp_m1()
    }
}

/// Alpha of one fragment together with whether the clamp was hit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaEval {
    pub value: f64,
    pub clamped: bool,
}

pub fn evaluate_alpha(mode: OpacityMode, o: f64, g: f64, sigma: f64) -> AlphaEval {
    let raw = match mode {
        OpacityMode::Baseline => alpha_baseline_unclamped(o, g),
        OpacityMode::Omg => alpha_omg_unclamped(o, g, sigma),
    };
    if raw >= ALPHA_MAX {
        AlphaEval {
            value: ALPHA_MAX,
            clamped: true,
        }
    } else {
        AlphaEval {
            value: raw,
            clamped: false,
        }
    }
}

/// Partial derivatives of a fragment's alpha.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AlphaPartials {
    pub d_opacity: f64,
    pub d_weight: f64,
    pub d_sigma: f64,
}

/// `∂α/∂o`, `∂α/∂G`, `∂α/∂σ`. Clamped fragments get zero.
///
/// Material-aware mode: `∂α/∂o = G·σ·(1 − α)` and symmetrically for `G`, `σ`.
pub fn dalpha_dparams(mode: OpacityMode, o: f64, g: f64, sigma: f64) -> AlphaPartials {
    let eval = evaluate_alpha(mode, o, g, sigma);
    if eval.clamped {
        return AlphaPartials::default();
    }
    match mode {
        OpacityMode::Baseline => AlphaPartials {
            d_opacity: g,
            d_weight: o,
            d_sigma: 0.0,
        },
        OpacityMode::Omg => {
            let survive = 1.0 - eval.value;
            AlphaPartials {
                d_opacity: g * sigma * survive,
                d_weight: o * sigma * survive,
                d_sigma: o * g * survive,
            }
        }
    }
}

/// One depth-ordered input to [`composite_pixel`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Layer {
    pub depth: f64,
    pub alpha: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelComposite {
    pub color: [f64; 3],
    pub transmittance: f64,
    pub contributing: usize,
}

/// Front-to-back blending `Ĉ = Σ cᵢ αᵢ Tᵢ + T·background`, `Tᵢ = Π_{j<i} (1 − αⱼ)`.
pub fn composite_pixel(
    layers: &[Layer],
    background: [f64; 3],
    cutoffs: Cutoffs,
) -> Result<PixelComposite> {
    if layers.windows(2).any(|w| !(w[0].depth <= w[1].depth)) {
        return Err(Error::invalid("fragments are not sorted by depth"));
    }
    if let Some(l) = layers
        .iter()
        .find(|l| !(0.0..=ALPHA_MAX).contains(&l.alpha))
    {
        return Err(Error::invalid(format!(
            "fragment alpha {} outside [0, {ALPHA_MAX}]",
            l.alpha
        )));
    }
    let mut color = [0.0; 3];
    let mut t = 1.0;
    let mut contributing = 0;
    for layer in layers {
        if layer.alpha < cutoffs.alpha_skip {
            continue;
        }
        let w = layer.alpha * t;
        for (acc, c) in color.iter_mut().zip(&layer.color) {
            *acc += c * w;
        }
        t *= 1.0 - layer.alpha;
        contributing += 1;
        if t < cutoffs.t_min {
            break;
        }
    }
    for (acc, b) in color.iter_mut().zip(&background) {
        *acc += t * b;
    }
    Ok(PixelComposite {
        color,
        transmittance: t,
        contributing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn baseline_examples() {
        assert_eq!(alpha_baseline(0.8, 1.0), 0.8);
        assert_eq!(alpha_baseline(0.0, 0.37), 0.0);
        assert!(close(alpha_baseline(0.5, (-0.5f64).exp()), 0.303265, 1e-6));
        assert_eq!(alpha_baseline(1.0, 1.0), ALPHA_MAX);
    }

    #[test]
    fn omg_examples() {
        assert_eq!(alpha_omg(0.0, 1.0, 0.7), 0.0);
        assert!(close(alpha_omg(2f64.ln(), 1.0, 1.0), 0.5, 1e-15));
        assert!(close(alpha_omg(1.0, 1.0, 1.0), 0.632121, 1e-6));
    }

    #[test]
    fn nerf_examples() {
        assert_eq!(nerf_alpha(3.0, 0.0), 0.0);
        assert!(close(nerf_alpha(2f64.ln(), 1.0), 0.5, 1e-15));
        assert!(close(nerf_alpha(2.0, 0.3), 0.451188, 1e-6));
    }

    #[test]
    fn taylor_examples() {
        assert_eq!(taylor_gap(0.0), 0.0);
        let g = taylor_gap(0.1);
        assert!(close(g, 0.1 - (1.0 - (-0.1f64).exp()), 1e-16));
        assert!(close(g, 0.00484, 1e-5) && g <= 0.005);
        assert!(close(taylor_gap(1.0), (-1.0f64).exp(), 1e-15));
        // both branches agree at the switch point
        let t = 0.5 - 1e-12;
        assert!(close(taylor_gap(t), t + (-t).exp_m1(), 1e-15));
    }

    #[test]
    fn alpha_partials_examples() {
        let p = dalpha_dparams(OpacityMode::Omg, 0.0, 1.0, 1.0);
        assert_eq!(p.d_opacity, 1.0);
        let p = dalpha_dparams(OpacityMode::Baseline, 0.4, 0.7, 0.3);
        assert_eq!((p.d_opacity, p.d_weight, p.d_sigma), (0.7, 0.4, 0.0));
        let p = dalpha_dparams(OpacityMode::Omg, 2f64.ln(), 1.0, 1.0);
        assert!(close(p.d_opacity, 0.5, 1e-15));
        assert_eq!(
            dalpha_dparams(OpacityMode::Baseline, 1.0, 1.0, 1.0),
            AlphaPartials::default()
        );
    }

    #[test]
    fn composite_examples() {
        let empty = composite_pixel(&[], [0.2, 0.3, 0.4], Cutoffs::EXACT).unwrap();
        assert_eq!(empty.color, [0.2, 0.3, 0.4]);
        assert_eq!(empty.transmittance, 1.0);

        let one = [Layer {
            depth: 1.0,
            alpha: 0.5,
            color: [1.0; 3],
        }];
        let c = composite_pixel(&one, [0.0; 3], Cutoffs::EXACT).unwrap();
        assert_eq!(c.color, [0.5; 3]);
        assert_eq!(c.transmittance, 0.5);

        let two = [
            Layer {
                depth: 1.0,
                alpha: 0.5,
                color: [1.0; 3],
            },
            Layer {
                depth: 2.0,
                alpha: 0.5,
                color: [0.0; 3],
            },
        ];
        let c = composite_pixel(&two, [1.0; 3], Cutoffs::EXACT).unwrap();
        assert_eq!(c.color, [0.75; 3]);
        assert_eq!(c.transmittance, 0.25);
        assert_eq!(c.contributing, 2);
    }

    #[test]
    fn unsorted_and_out_of_range_rejected() {
        let bad = [
            Layer {
                depth: 2.0,
                alpha: 0.5,
                color: [1.0; 3],
            },
            Layer {
                depth: 1.0,
                alpha: 0.5,
                color: [0.0; 3],
            },
        ];
        assert!(composite_pixel(&bad, [0.0; 3], Cutoffs::EXACT).is_err());
        let over = [Layer {
            depth: 1.0,
            alpha: 0.995,
            color: [1.0; 3],
        }];
        assert!(composite_pixel(&over, [0.0; 3], Cutoffs::EXACT).is_err());
    }

    #[test]
    fn early_termination_and_skip() {
        let layers: Vec<_> = (0..10)
            .map(|i| Layer {
                depth: i as f64,
                alpha: 0.9,
                color: [1.0; 3],
            })
            .collect();
        let cut = Cutoffs {
            alpha_skip: 0.0,
            t_min: 1e-4,
        };
        let c = composite_pixel(&layers, [0.0; 3], cut).unwrap();
        assert_eq!(c.contributing, 4);
        assert!(c.transmittance < 1e-4);
        let faint = [Layer {
            depth: 0.0,
            alpha: 1e-3,
            color: [1.0; 3],
        }];
        let c = composite_pixel(&faint, [0.0; 3], Cutoffs::SPLATTING).unwrap();
        assert_eq!((c.contributing, c.transmittance), (0, 1.0));
    }

    #[test]
    fn softplus_activation() {
        let a = OpacityActivation::Softplus;
        assert!(close(a.apply(0.0), 2f64.ln(), 1e-15));
        assert!(a.apply(5.0) > 5.0);
        assert!(close(a.apply(100.0), 100.0, 1e-12));
        let h = 1e-6;
        for x in [-3.0, 0.2, 4.0, 40.0] {
            let n = (a.apply(x + h) - a.apply(x - h)) / (2.0 * h);
            assert!(close(a.derivative(x), n, 1e-8));
        }
    }

    fn unit() -> impl Strategy<Value = f64> {
        (1e-6f64..1.0).prop_map(|v| v)
    }

    proptest! {
        #[test]
        fn alphas_in_range(o in 0.0f64..1.0, g in 0.0f64..=1.0, s in 0.0f64..1.0) {
            for a in [alpha_baseline(o, g), alpha_omg(o, g, s)] {
                prop_assert!((0.0..=ALPHA_MAX).contains(&a));
            }
        }

        #[test]
        fn omg_below_baseline(o in unit(), g in unit(), s in unit()) {
            prop_assert!(alpha_omg(o, g, s) <= alpha_baseline(o, g));
        }

        #[test]
        fn omg_monotone(o in 0.01f64..0.9, g in 0.01f64..0.9, s in 0.01f64..0.9, d in 0.01f64..0.1) {
            let base = alpha_omg_unclamped(o, g, s);
            prop_assert!(alpha_omg_unclamped(o + d, g, s) > base);
            prop_assert!(alpha_omg_unclamped(o, g + d, s) > base);
            prop_assert!(alpha_omg_unclamped(o, g, s + d) > base);
        }

        #[test]
        fn taylor_bound(t in 0.0f64..10.0) {
            let gap = taylor_gap(t);
            prop_assert!(gap >= 0.0 && gap <= t * t / 2.0);
        }

        #[test]
        fn nerf_identity(o in 0.0f64..1.0, g in 0.0f64..1.0, s in 0.0f64..1.0) {
            prop_assert_eq!(alpha_omg_unclamped(o, g, s).to_bits(), nerf_alpha(o * g * s, 1.0).to_bits());
        }

        #[test]
        fn white_conservation(alphas in proptest::collection::vec(0.0f64..ALPHA_MAX, 0..40)) {
            let layers: Vec<_> = alphas.iter().enumerate()
                .map(|(i, a)| Layer { depth: i as f64, alpha: *a, color: [1.0; 3] })
                .collect();
            let c = composite_pixel(&layers, [0.0; 3], Cutoffs::EXACT).unwrap();
            let prod: f64 = alphas.iter().map(|a| 1.0 - a).product();
            prop_assert!((c.transmittance - prod).abs() <= 1e-12);
            for ch in c.color {
                prop_assert!((ch - (1.0 - c.transmittance)).abs() <= 1e-12);
            }
        }
    }
}
