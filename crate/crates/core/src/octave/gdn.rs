//! Generalized divisive normalization and its inverse:
//!
//! ```text
//! gdn(x)_i  = x_i / sqrt(β_i + Σ_j γ_ij x_j²)
//! igdn(x)_i = x_i · sqrt(β_i + Σ_j γ_ij x_j²)
//! ```
//!
//! β and γ are stored as surrogates with `β = β_s² + BETA_FLOOR` and
//! `γ = γ_s²`, so both constraints hold after any optimizer step.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::tensor::{ConvSpec, ParamId, ParamStore, ParamVars, Real, Tape, Tensor, Var};

pub const BETA_FLOOR: f64 = 1e-6;

const GAMMA_DIAG_INIT: f64 = 0.1;
/// Off-diagonal surrogate start. A surrogate of exactly zero would receive a
/// zero gradient forever.
const GAMMA_OFF_SURROGATE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GdnParams {
    /// Surrogate of β, shape `[c]`.
    pub beta: ParamId,
    /// Surrogate of γ, shape `[c, c, 1, 1]` (row = output channel).
    pub gamma: ParamId,
    pub channels: usize,
}

impl GdnParams {
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        _rng: &mut R,
        name: &str,
        channels: usize,
    ) -> Self {
        let b0 = T::lit((1.0 - BETA_FLOOR).sqrt());
        let beta = store.add(format!("{name}.beta"), Tensor::full(&[channels], b0));
        let diag = T::lit(GAMMA_DIAG_INIT.sqrt());
        let off = T::lit(GAMMA_OFF_SURROGATE);
        let gamma = store.add(
            format!("{name}.gamma"),
            Tensor::from_fn(&[channels, channels, 1, 1], |i| {
                if i / channels == i % channels {
                    diag
                } else {
                    off
                }
            }),
        );
        Self {
            beta,
            gamma,
            channels,
        }
    }

    /// Effective β values.
    pub fn beta<T: Real>(&self, store: &ParamStore<T>) -> Vec<f64> {
        store
            .value(self.beta)
            .data()
            .iter()
            .map(|v| v.as_f64() * v.as_f64() + BETA_FLOOR)
            .collect()
    }

    /// Effective γ values, row-major `c × c`.
    pub fn gamma<T: Real>(&self, store: &ParamStore<T>) -> Vec<f64> {
        store
            .value(self.gamma)
            .data()
            .iter()
            .map(|v| v.as_f64() * v.as_f64())
            .collect()
    }
}

fn normalize<T: Real>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    x: Var,
    p: &GdnParams,
    exponent: f64,
) -> Result<Var> {
    let (_, c, _, _) = tape.value(x).dims4()?;
    if c != p.channels {
        return Err(crate::Error::Contract(format!(
            "normalization expects {} channels, input has {c}",
            p.channels
        )));
    }
    let bs = pv.get(p.beta);
    let gs = pv.get(p.gamma);
    if tape.shape(bs) != [c] || tape.shape(gs) != [c, c, 1, 1] {
        return shape_err("normalization parameters do not match their channel count");
    }
    let b2 = tape.square(bs);
    let beta = tape.add_scalar(b2, BETA_FLOOR);
    let gamma = tape.square(gs);
    let x2 = tape.square(x);
    let pool = tape.conv2d(x2, gamma, Some(beta), ConvSpec::new(1, 0))?;
    let scale = tape.pow(pool, exponent);
    tape.mul(x, scale)
}

pub fn gdn<T: Real>(tape: &mut Tape<T>, pv: &ParamVars, x: Var, p: &GdnParams) -> Result<Var> {
    normalize(tape, pv, x, p, -0.5)
}

pub fn igdn<T: Real>(tape: &mut Tape<T>, pv: &ParamVars, x: Var, p: &GdnParams) -> Result<Var> {
    normalize(tape, pv, x, p, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(x: f64, beta: f64, gamma: f64, inverse: bool) -> f64 {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = GdnParams::init(&mut store, &mut rng, "n", 1);
        store.get_mut(p.beta).value = Tensor::scalar((beta - BETA_FLOOR).sqrt());
        store.get_mut(p.gamma).value = Tensor::new(&[1, 1, 1, 1], vec![gamma.sqrt()]).unwrap();
        let mut tape = Tape::new();
        let pv = tape.bind_params(&store);
        let xv = tape.constant(Tensor::new(&[1, 1, 1, 1], vec![x]).unwrap());
        let y = if inverse {
            igdn(&mut tape, &pv, xv, &p).unwrap()
        } else {
            gdn(&mut tape, &pv, xv, &p).unwrap()
        };
        tape.value(y).data()[0]
    }

    #[test]
    fn unit_denominator_is_identity() {
        assert!((single(0.37, 1.0, 0.0, false) - 0.37).abs() < 1e-12);
        assert!((single(-2.5, 1.0, 0.0, true) + 2.5).abs() < 1e-12);
    }

    #[test]
    fn direct_substitution() {
        assert!((single(3.0, 1.0, 1.0, false) - 3.0 / 10f64.sqrt()).abs() < 1e-9);
        assert!((single(3.0, 1.0, 1.0, true) - 3.0 * 10f64.sqrt()).abs() < 1e-9);
        assert!((single(3.0, 1.0, 1.0, false) - 0.94868).abs() < 1e-5);
        assert!((single(3.0, 1.0, 1.0, true) - 9.4868).abs() < 1e-4);
    }

    #[test]
    fn initial_parameters_respect_constraints() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = GdnParams::init(&mut store, &mut rng, "n", 4);
        assert!(p.beta(&store).iter().all(|&b| (b - 1.0).abs() < 1e-6));
        let g = p.gamma(&store);
        for i in 0..4 {
            assert!((g[i * 4 + i] - 0.1).abs() < 1e-6);
        }
        assert!(g.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = GdnParams::init(&mut store, &mut rng, "n", 3);
        let mut tape = Tape::new();
        let pv = tape.bind_params(&store);
        let x = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(matches!(
            gdn(&mut tape, &pv, x, &p),
            Err(crate::Error::Contract(_))
        ));
    }
}
