//! Fixed-grid explicit steppers with Euler–Maruyama diffusion.
//!
//! The same stepping code drives plain matrices (inference) and tape
//! variables (training); both go through [`StateAlgebra::axpy`], which
//! evaluates `a + s · b` with identical floating-point operations in
//! either setting.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{Mat, Tape, Var};
use crate::rng::{self, Stream};
#[allow(unused_imports)] // test builds link std, whose inherent methods take precedence
use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StepMethod {
    Euler,
    Heun,
    Rk4,
    Dopri5,
}

impl StepMethod {
    pub const ALL: [StepMethod; 4] = [StepMethod::Euler, StepMethod::Heun, StepMethod::Rk4, StepMethod::Dopri5];

    pub fn name(self) -> &'static str {
        match self {
            StepMethod::Euler => "euler",
            StepMethod::Heun => "heun",
            StepMethod::Rk4 => "rk4",
            StepMethod::Dopri5 => "dopri5",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Nominal global order of accuracy.
    pub fn order(self) -> u32 {
        match self {
            StepMethod::Euler => 1,
            StepMethod::Heun => 2,
            StepMethod::Rk4 => 4,
            StepMethod::Dopri5 => 5,
        }
    }
}

/// Uniform grid on `[t0, t1]` with `n_steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, n_steps: usize) -> Result<Self> {
        if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
            return Err(Error::InvalidInput(alloc::format!("time grid needs t1 > t0, got [{t0}, {t1}]")));
        }
        if n_steps == 0 {
            return Err(Error::InvalidInput("time grid needs at least one step".into()));
        }
        Ok(Self { t0, t1, n_steps })
    }

    /// The unit interval `[0, 1]`.
    pub fn unit(n_steps: usize) -> Result<Self> {
        Self::new(0.0, 1.0, n_steps)
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt()
    }
}

/// Arithmetic the steppers need from a state representation.
pub trait StateAlgebra {
    type State: Clone;

    /// `a + s · b`.
    fn axpy(&mut self, a: &Self::State, b: &Self::State, s: f64) -> Self::State;

    /// Value view of a state, used for finiteness checks and diagnostics.
    fn view<'a>(&'a self, a: &'a Self::State) -> &'a Mat;
}

/// Plain matrices, no recording.
#[derive(Debug, Default, Clone, Copy)]
pub struct Plain;

impl StateAlgebra for Plain {
    type State = Mat;

    fn axpy(&mut self, a: &Mat, b: &Mat, s: f64) -> Mat {
        a.add_scaled(b, s)
    }

    fn view<'a>(&'a self, a: &'a Mat) -> &'a Mat {
        a
    }
}

impl StateAlgebra for Tape {
    type State = Var;

    fn axpy(&mut self, a: &Var, b: &Var, s: f64) -> Var {
        self.add_scaled(*a, *b, s)
    }

    fn view<'a>(&'a self, a: &'a Var) -> &'a Mat {
        self.value(*a)
    }
}

fn frobenius(m: &Mat) -> f64 {
    m.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check<A: StateAlgebra>(alg: &A, s: &A::State) -> Result<()> {
    let m = alg.view(s);
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::StepDiverged { step: 0, norm: frobenius(m) })
    }
}

/// `z + dt Σ_j coef_j k_j`, skipping zero coefficients.
fn combine<A: StateAlgebra>(alg: &mut A, z: &A::State, ks: &[A::State], coefs: &[f64], dt: f64) -> A::State {
    let mut acc = z.clone();
    for (k, &c) in ks.iter().zip(coefs) {
        if c != 0.0 {
            acc = alg.axpy(&acc, k, c * dt);
        }
    }
    acc
}

const DP_A: [&[f64]; 6] = [
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// One step of `method` for `dz/dt = drift(z, t)`.
pub fn step_deterministic<A, F>(alg: &mut A, method: StepMethod, drift: &mut F, z: &A::State, t: f64, dt: f64) -> Result<A::State>
where
    A: StateAlgebra,
    F: FnMut(&mut A, &A::State, f64) -> Result<A::State>,
{
    let mut eval = |alg: &mut A, s: &A::State, t: f64| -> Result<A::State> {
        let k = drift(alg, s, t)?;
        check(alg, &k)?;
        Ok(k)
    };
    let out = match method {
        StepMethod::Euler => {
            let k1 = eval(alg, z, t)?;
            alg.axpy(z, &k1, dt)
        }
        StepMethod::Heun => {
            let k1 = eval(alg, z, t)?;
            let pred = alg.axpy(z, &k1, dt);
            let k2 = eval(alg, &pred, t + dt)?;
            combine(alg, z, &[k1, k2], &[0.5, 0.5], dt)
        }
        StepMethod::Rk4 => {
            let k1 = eval(alg, z, t)?;
            let s2 = alg.axpy(z, &k1, 0.5 * dt);
            let k2 = eval(alg, &s2, t + 0.5 * dt)?;
            let s3 = alg.axpy(z, &k2, 0.5 * dt);
            let k3 = eval(alg, &s3, t + 0.5 * dt)?;
            let s4 = alg.axpy(z, &k3, dt);
            let k4 = eval(alg, &s4, t + dt)?;
            combine(alg, z, &[k1, k2, k3, k4], &[1.0 / 6.0, 2.0 / 6.0, 2.0 / 6.0, 1.0 / 6.0], dt)
        }
        StepMethod::Dopri5 => dopri5(alg, &mut eval, z, t, dt, false)?.0,
    };
    check(alg, &out)?;
    Ok(out)
}

type Dopri5Out<S> = (S, Option<S>);

fn dopri5<A, F>(alg: &mut A, eval: &mut F, z: &A::State, t: f64, dt: f64, with_error: bool) -> Result<Dopri5Out<A::State>>
where
    A: StateAlgebra,
    F: FnMut(&mut A, &A::State, f64) -> Result<A::State>,
{
    let mut ks: Vec<A::State> = Vec::with_capacity(7);
    ks.push(eval(alg, z, t)?);
    for (i, row) in DP_A.iter().enumerate().take(5) {
        let s = combine(alg, z, &ks, row, dt);
        ks.push(eval(alg, &s, t + DP_C[i + 1] * dt)?);
    }
    let y5 = combine(alg, z, &ks, DP_A[5], dt);
    if !with_error {
        return Ok((y5, None));
    }
    ks.push(eval(alg, &y5, t + dt)?);
    let y4 = combine(alg, z, &ks, &DP_B4, dt);
    let err = alg.axpy(&y5, &y4, -1.0);
    Ok((y5, Some(err)))
}

/// Dormand–Prince step returning the 5th-order solution and the embedded
/// error estimate `y5 - y4` (uses the seventh, first-same-as-last stage).
pub fn dopri5_with_error<F>(drift: &mut F, z: &Mat, t: f64, dt: f64) -> Result<(Mat, Mat)>
where
    F: FnMut(&mut Plain, &Mat, f64) -> Result<Mat>,
{
    let mut alg = Plain;
    let mut eval = |alg: &mut Plain, s: &Mat, t: f64| -> Result<Mat> {
        let k = drift(alg, s, t)?;
        check(alg, &k)?;
        Ok(k)
    };
    let (y, err) = dopri5(&mut alg, &mut eval, z, t, dt, true)?;
    Ok((y, err.expect("error estimate requested")))
}

/// Euler–Maruyama diffusion increment `z + g ΔW`.
pub fn attach_diffusion(z: &[f64], g: f64, dw: &[f64]) -> alloc::vec::Vec<f64> {
    if g == 0.0 {
        return z.to_vec();
    }
    z.iter().zip(dw).map(|(z, w)| z + g * w).collect()
}

/// Adds `scale[r] · dw[r, :]` to every row `r`; rows with zero scale are untouched.
pub fn attach_diffusion_rows(z: &Mat, scale: &[f64], dw: &Mat) -> Mat {
    let mut out = z.clone();
    for (r, &s) in scale.iter().enumerate().take(z.rows()) {
        if s == 0.0 {
            continue;
        }
        for (o, w) in out.row_mut(r).iter_mut().zip(dw.row(r)) {
            *o += s * w;
        }
    }
    out
}

/// Draws `ΔW ~ N(0, dt I)`, one row per stream.
pub fn brownian_increment(streams: &mut [Stream], cols: usize, dt: f64) -> Mat {
    let sq = dt.sqrt();
    let mut out = Mat::zeros(streams.len(), cols);
    for (r, s) in streams.iter_mut().enumerate() {
        for v in out.row_mut(r) {
            *v = sq * rng::normal(s);
        }
    }
    out
}

/// Integrates `dz = drift(z, t) dt + g(t) dW` on `grid`, one stream per row
/// of `z0`. Noise is drawn every step, whatever the method or `g`.
pub fn integrate_path<F, G>(method: StepMethod, mut drift: F, diffusion: G, z0: &Mat, grid: &TimeGrid, streams: &mut [Stream]) -> Result<Vec<Mat>>
where
    F: FnMut(&mut Plain, &Mat, f64) -> Result<Mat>,
    G: Fn(f64) -> f64,
{
    if streams.len() != z0.rows() {
        return Err(Error::LengthMismatch { left: streams.len(), right: z0.rows() });
    }
    let dt = grid.dt();
    let mut path = Vec::with_capacity(grid.n_steps + 1);
    path.push(z0.clone());
    let mut z = z0.clone();
    for k in 0..grid.n_steps {
        let t = grid.time(k);
        let det = step_deterministic(&mut Plain, method, &mut drift, &z, t, dt).map_err(|e| match e {
            Error::StepDiverged { norm, .. } => Error::StepDiverged { step: k + 1, norm },
            other => other,
        })?;
        let dw = brownian_increment(streams, z.cols(), dt);
        let g = diffusion(t);
        z = attach_diffusion_rows(&det, &alloc::vec![g; z.rows()], &dw);
        if !z.is_finite() {
            return Err(Error::StepDiverged { step: k + 1, norm: frobenius(&z) });
        }
        path.push(z.clone());
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn linear(a: f64) -> impl FnMut(&mut Plain, &Mat, f64) -> Result<Mat> {
        move |_, z, _| Ok(z.map(|v| a * v))
    }

    fn solve(method: StepMethod, a: f64, n: usize) -> f64 {
        let grid = TimeGrid::unit(n).unwrap();
        let mut z = Mat::scalar(1.0);
        let mut f = linear(a);
        for k in 0..n {
            z = step_deterministic(&mut Plain, method, &mut f, &z, grid.time(k), grid.dt()).unwrap();
        }
        z.item()
    }

    #[test]
    fn zero_drift_leaves_state_unchanged() {
        let z = Mat::from_vec(2, 2, vec![0.3, -1.2, 4.0, 0.0]);
        for m in StepMethod::ALL {
            let mut f = |_: &mut Plain, z: &Mat, _| Ok(Mat::zeros(z.rows(), z.cols()));
            assert_eq!(step_deterministic(&mut Plain, m, &mut f, &z, 0.0, 0.1).unwrap(), z);
        }
    }

    #[test]
    fn single_step_examples() {
        let mut f = linear(1.0);
        let e = step_deterministic(&mut Plain, StepMethod::Euler, &mut f, &Mat::scalar(1.0), 0.0, 0.1).unwrap();
        assert_eq!(e.item(), 1.1);
        let r = step_deterministic(&mut Plain, StepMethod::Rk4, &mut f, &Mat::scalar(1.0), 0.0, 0.1).unwrap();
        // truncated Taylor series of e^0.1 through h^4/24
        let taylor = 1.0 + 0.1 + 0.01 / 2.0 + 0.001 / 6.0 + 0.0001 / 24.0;
        assert!((r.item() - taylor).abs() < 1e-15);
        assert!((r.item() - 0.1f64.exp()).abs() < 1e-7);
    }

    #[test]
    fn rk4_decay_over_unit_interval() {
        assert!((solve(StepMethod::Rk4, -1.0, 100) - (-1.0f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn convergence_orders() {
        for m in StepMethod::ALL {
            let n = match m {
                StepMethod::Euler | StepMethod::Heun => 64,
                _ => 8,
            };
            let exact = (-1.0f64).exp();
            let e1 = (solve(m, -1.0, n) - exact).abs();
            let e2 = (solve(m, -1.0, 2 * n) - exact).abs();
            let order = (e1 / e2).log2();
            assert!((order - m.order() as f64).abs() < 0.3, "{m:?}: measured order {order}");
        }
    }

    #[test]
    fn dopri5_error_estimate_is_small_and_consistent() {
        let mut f = linear(-1.0);
        let (y, err) = dopri5_with_error(&mut f, &Mat::scalar(1.0), 0.0, 0.1).unwrap();
        let mut g = linear(-1.0);
        let y2 = step_deterministic(&mut Plain, StepMethod::Dopri5, &mut g, &Mat::scalar(1.0), 0.0, 0.1).unwrap();
        assert_eq!(y, y2);
        assert!(err.item().abs() < 1e-6 && err.item() != 0.0);
    }

    #[test]
    fn non_finite_stage_is_reported() {
        let mut f = |_: &mut Plain, z: &Mat, _| Ok(z.map(|_| f64::NAN));
        let r = step_deterministic(&mut Plain, StepMethod::Rk4, &mut f, &Mat::scalar(1.0), 0.0, 0.1);
        assert!(matches!(r, Err(Error::StepDiverged { .. })));
    }

    #[test]
    fn diffusion_examples() {
        assert_eq!(attach_diffusion(&[1.0, 2.0], 0.0, &[5.0, 5.0]), vec![1.0, 2.0]);
        assert_eq!(attach_diffusion(&[0.0, 0.0], 1.0, &[0.3, -0.2]), vec![0.3, -0.2]);
    }

    #[test]
    fn one_step_diffusion_variance() {
        let n = 100_000;
        let mut streams: Vec<Stream> = (0..n).map(|i| rng::substream(11, 0, i as u64)).collect();
        let (g, dt) = (0.7, 0.04);
        let dw = brownian_increment(&mut streams, 2, dt);
        let z = attach_diffusion_rows(&Mat::zeros(n, 2), &vec![g; n], &dw);
        for c in 0..2 {
            let col: Vec<f64> = (0..n).map(|r| z.get(r, c)).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((var / (g * g * dt) - 1.0).abs() < 0.05, "variance {var}");
        }
    }

    #[test]
    fn path_examples() {
        let grid = TimeGrid::new(0.0, 2.0, 10).unwrap();
        let z0 = Mat::from_vec(1, 2, vec![1.0, -1.0]);
        let mut s = vec![rng::substream(1, 1, 1)];
        let still = integrate_path(StepMethod::Rk4, |_, z: &Mat, _| Ok(Mat::zeros(z.rows(), 2)), |_| 0.0, &z0, &grid, &mut s).unwrap();
        assert!(still.iter().all(|p| *p == z0));

        let c = [0.5, -2.0];
        let mut s = vec![rng::substream(1, 1, 1)];
        let path = integrate_path(StepMethod::Euler, |_, z: &Mat, _| Ok(Mat::from_fn(z.rows(), 2, |_, j| c[j])), |_| 0.0, &z0, &grid, &mut s).unwrap();
        for (k, p) in path.iter().enumerate() {
            let t = k as f64 * 0.2;
            assert!((p.get(0, 0) - (1.0 + t * c[0])).abs() < 1e-14);
            assert!((p.get(0, 1) - (-1.0 + t * c[1])).abs() < 1e-14);
        }
        let mut s = vec![rng::substream(1, 1, 1)];
        let decay = integrate_path(StepMethod::Rk4, linear(-1.0), |_| 0.0, &Mat::scalar(1.0), &TimeGrid::unit(100).unwrap(), &mut s).unwrap();
        assert!((decay[100].item() - 0.367_879_441_171_442_3).abs() < 1e-8);
    }

    #[test]
    fn methods_share_noise_and_agree_without_drift() {
        let grid = TimeGrid::unit(20).unwrap();
        let z0 = Mat::zeros(3, 2);
        let mut finals = Vec::new();
        for m in StepMethod::ALL {
            let mut s: Vec<Stream> = (0..3).map(|i| rng::substream(5, 0, i)).collect();
            let p = integrate_path(m, |_, z: &Mat, _| Ok(Mat::zeros(z.rows(), 2)), |t| 1.0 - t, &z0, &grid, &mut s).unwrap();
            finals.push(p[20].clone());
        }
        assert!(finals.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn weak_convergence_of_pure_diffusion() {
        let n = 20_000;
        let grid = TimeGrid::new(0.0, 0.5, 10).unwrap();
        let mut s: Vec<Stream> = (0..n).map(|i| rng::substream(8, 0, i as u64)).collect();
        let p = integrate_path(StepMethod::Euler, |_, z: &Mat, _| Ok(Mat::zeros(z.rows(), 2)), |_| 0.8, &Mat::zeros(n, 2), &grid, &mut s).unwrap();
        let last = &p[10];
        let xs: Vec<f64> = (0..n).map(|r| last.get(r, 0)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02);
        assert!((var / (0.64 * 0.5) - 1.0).abs() < 0.05);
    }

    #[test]
    fn tape_and_plain_steps_are_bit_identical() {
        let z = Mat::from_vec(2, 2, vec![0.3, -0.7, 1.1, 0.2]);
        for m in StepMethod::ALL {
            let mut f = |_: &mut Plain, z: &Mat, t: f64| Ok(z.map(|v| (v * (1.0 + t)).sin()));
            let plain = step_deterministic(&mut Plain, m, &mut f, &z, 0.1, 0.05).unwrap();
            let mut tape = Tape::new();
            let zv = tape.constant(z.clone());
            let mut g = |t: &mut Tape, z: &Var, tt: f64| {
                let s = t.scale(*z, 1.0 + tt);
                Ok(t.sin(s))
            };
            let v = step_deterministic(&mut tape, m, &mut g, &zv, 0.1, 0.05).unwrap();
            assert_eq!(tape.value(v), &plain, "{m:?}");
        }
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(1.0, 1.0, 4).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        assert_eq!(TimeGrid::new(0.0, 2.0, 4).unwrap().dt(), 0.5);
    }
}
