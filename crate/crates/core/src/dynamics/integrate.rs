//! Fixed-step integrators on batched states `B x 2D`, `z = (q, p)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Rk4,
    /// Kick-drift-kick. Only correct for separable `H(q, p) = K(p) + V(q)`.
    Leapfrog,
}

/// Splits a `B x 2D` state into `(q, p)`.
pub fn split_state(z: &Tensor) -> Result<(Tensor, Tensor)> {
    let c = z.cols();
    if !c.is_multiple_of(2) {
        return Err(Error::Shape {
            op: "split_state",
            lhs: z.shape().to_vec(),
            rhs: vec![2],
        });
    }
    Ok((z.slice_cols(0, c / 2)?, z.slice_cols(c / 2, c)?))
}

/// `(dH/dp, -dH/dq)` for a Hamiltonian returning one value per batch row.
///
/// `create_graph` keeps the result differentiable (needed when training
/// through the integrator).
pub fn hamilton_rhs(h: &dyn Fn(&Tensor, &Tensor) -> Result<Tensor>, z: &Tensor, create_graph: bool) -> Result<Tensor> {
    let (q, p) = split_state(z)?;
    let q = if q.tracks_grad() { q } else { q.requires_grad() };
    let p = if p.tracks_grad() { p } else { p.requires_grad() };
    let energy = h(&q, &p)?;
    if energy.shape() != [z.rows(), 1] {
        return Err(Error::Shape {
            op: "hamilton_rhs",
            lhs: energy.shape().to_vec(),
            rhs: vec![z.rows(), 1],
        });
    }
    let g = grad(&energy.reduce_sum(), &[&q, &p], create_graph)?;
    let (dq, dp) = (&g[0], &g[1]);
    let (dq, dp) = if create_graph { (dq.clone(), dp.clone()) } else { (dq.detach(), dp.detach()) };
    Tensor::concat_cols(&[dp, dq.neg()])
}

fn check(z: &Tensor, step: usize) -> Result<()> {
    if z.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { step })
    }
}

fn rk4_step(rhs: &dyn Fn(&Tensor) -> Result<Tensor>, z: &Tensor, dt: f64) -> Result<Tensor> {
    let k1 = rhs(z)?;
    let k2 = rhs(&z.add(&k1.scale(dt / 2.0))?)?;
    let k3 = rhs(&z.add(&k2.scale(dt / 2.0))?)?;
    let k4 = rhs(&z.add(&k3.scale(dt))?)?;
    let sum = k1.add(&k2.scale(2.0))?.add(&k3.scale(2.0))?.add(&k4)?;
    z.add(&sum.scale(dt / 6.0))
}

fn leapfrog_step(rhs: &dyn Fn(&Tensor) -> Result<Tensor>, z: &Tensor, dt: f64) -> Result<Tensor> {
    let (q, p) = split_state(z)?;
    let d = q.cols();
    let dp = rhs(z)?.slice_cols(d, 2 * d)?;
    let p = p.add(&dp.scale(dt / 2.0))?;
    let dq = rhs(&Tensor::concat_cols(&[q.clone(), p.clone()])?)?.slice_cols(0, d)?;
    let q = q.add(&dq.scale(dt))?;
    let dp = rhs(&Tensor::concat_cols(&[q.clone(), p.clone()])?)?.slice_cols(d, 2 * d)?;
    let p = p.add(&dp.scale(dt / 2.0))?;
    Tensor::concat_cols(&[q, p])
}

/// States `z_0, ..., z_steps`; each step is split into `substeps` equal
/// sub-steps whose intermediate states are not returned.
pub fn integrate_substeps(
    rhs: &dyn Fn(&Tensor) -> Result<Tensor>,
    z0: &Tensor,
    dt: f64,
    steps: usize,
    substeps: usize,
    method: Method,
) -> Result<Vec<Tensor>> {
    if !(dt > 0.0) || substeps == 0 {
        return Err(Error::Config(format!("need dt > 0 and substeps >= 1, got {dt}, {substeps}")));
    }
    check(z0, 0)?;
    let h = dt / substeps as f64;
    let mut out = Vec::with_capacity(steps + 1);
    out.push(z0.clone());
    let mut z = z0.clone();
    for step in 1..=steps {
        for _ in 0..substeps {
            z = match method {
                Method::Rk4 => rk4_step(rhs, &z, h)?,
                Method::Leapfrog => leapfrog_step(rhs, &z, h)?,
            };
        }
        check(&z, step)?;
        out.push(z.clone());
    }
    Ok(out)
}

/// Fixed-step integration, returning `steps + 1` states.
pub fn integrate(rhs: &dyn Fn(&Tensor) -> Result<Tensor>, z0: &Tensor, dt: f64, steps: usize, method: Method) -> Result<Vec<Tensor>> {
    integrate_substeps(rhs, z0, dt, steps, 1, method)
}
