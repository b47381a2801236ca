//! Dense-network numerics used by every actor and critic: MLPs with
//! exact gradients, Adam, seedable Gaussian sampling and Polyak averaging.
//! All math is `f64`.

pub mod adam;
pub mod mlp;
pub mod rng;

pub use adam::{adam_step, AdamState};
pub use mlp::{backward, forward_tape, mlp_forward, mlp_grad, mlp_init, Activation, Mlp, MlpSpec, ParamVector, Tape};
pub use rng::{gaussian_sample, shift_scale, SimRng};

use crate::error::{Error, Result};

/// `target' = (1 - tau) * target + tau * online`.
pub fn polyak_update(target: &ParamVector, online: &ParamVector, tau: f64) -> Result<ParamVector> {
    let mut out = target.clone();
    polyak_in_place(&mut out, online, tau)?;
    Ok(out)
}

pub fn polyak_in_place(target: &mut ParamVector, online: &ParamVector, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!("polyak tau must be in (0, 1], got {tau}")));
    }
    if !target.same_shape(online) {
        return Err(Error::DimensionMismatch {
            what: "polyak target",
            expected: online.len(),
            got: target.len(),
        });
    }
    if tau == 1.0 {
        target.values.copy_from_slice(&online.values);
        return Ok(());
    }
    for (t, o) in target.values.iter_mut().zip(&online.values) {
        *t = (1.0 - tau) * *t + tau * o;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> ParamVector {
        ParamVector {
            values: vec![v],
            layout: vec![],
        }
    }

    #[test]
    fn tau_one_copies_online() {
        let t = ParamVector { values: vec![1.0, 2.0], layout: vec![] };
        let o = ParamVector { values: vec![-3.0, 0.25], layout: vec![] };
        assert_eq!(polyak_update(&t, &o, 1.0).unwrap(), o);
    }

    #[test]
    fn small_tau_arithmetic() {
        let out = polyak_update(&scalar(0.0), &scalar(1.0), 0.005).unwrap();
        assert!((out.values[0] - 0.005).abs() < 1e-18);
    }

    #[test]
    fn repeated_updates_converge_geometrically() {
        let tau = 0.1;
        let mut t = scalar(0.0);
        let o = scalar(1.0);
        for k in 1..=100 {
            polyak_in_place(&mut t, &o, tau).unwrap();
            let expected_gap = (1.0 - tau).powi(k);
            assert!(((1.0 - t.values[0]) - expected_gap).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_tau_and_shapes() {
        assert!(polyak_update(&scalar(0.0), &scalar(1.0), 0.0).is_err());
        assert!(polyak_update(&scalar(0.0), &scalar(1.0), 1.5).is_err());
        let two = ParamVector { values: vec![0.0, 0.0], layout: vec![] };
        assert!(polyak_update(&scalar(0.0), &two, 0.5).is_err());
    }
}
