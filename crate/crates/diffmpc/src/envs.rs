//! Experiment dynamics and costs: a linear system, pendulum and cartpole
//! with smooth angle embeddings, and the weighted goal cost.
//!
//! Angles live as `(cos, sin)` pairs so trajectories never hit a wrap
//! discontinuity; every step renormalizes the pair, and the Jacobians
//! include the normalization chain so they stay exact off the unit circle.

use crate::mpc::{CostModel, DynModel, ParamDyn};
use nalgebra::{DMatrix, DVector};

/// Physical parameters (masses, lengths, gravity) stay at or above this
/// floor under `project_params`, keeping optimizer iterates physical.
const MIN_PHYS_PARAM: f64 = 1e-3;

/// Strictly linear dynamics `f(x, u) = A x + B u`.
#[derive(Debug, Clone)]
pub struct LinearDyn {
    pub a_mat: DMatrix<f64>,
    pub b_mat: DMatrix<f64>,
}

impl LinearDyn {
    /// Panics if `a_mat` is not square or row counts disagree; these are
    /// construction-site programming errors, not runtime conditions.
    pub fn new(a_mat: DMatrix<f64>, b_mat: DMatrix<f64>) -> Self {
        assert!(a_mat.is_square(), "state matrix must be square");
        assert_eq!(
            a_mat.nrows(),
            b_mat.nrows(),
            "state and control matrices must have equal row counts"
        );
        LinearDyn { a_mat, b_mat }
    }
}

impl DynModel for LinearDyn {
    fn n_state(&self) -> usize {
        self.a_mat.nrows()
    }
    fn n_ctrl(&self) -> usize {
        self.b_mat.ncols()
    }
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a_mat * x + &self.b_mat * u
    }
    fn jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        let (n, m) = (self.n_state(), self.n_ctrl());
        let mut jac = DMatrix::zeros(n, n + m);
        jac.view_range_mut(0..n, 0..n).copy_from(&self.a_mat);
        jac.view_range_mut(0..n, n..n + m).copy_from(&self.b_mat);
        jac
    }
}

impl ParamDyn for LinearDyn {
    /// Row-major entries of `A` followed by row-major entries of `B`.
    fn params(&self) -> Vec<f64> {
        let (n, m) = (self.n_state(), self.n_ctrl());
        let mut out = Vec::with_capacity(n * n + n * m);
        for i in 0..n {
            for j in 0..n {
                out.push(self.a_mat[(i, j)]);
            }
        }
        for i in 0..n {
            for j in 0..m {
                out.push(self.b_mat[(i, j)]);
            }
        }
        out
    }
    fn with_params(&self, params: &[f64]) -> Self {
        let (n, m) = (self.n_state(), self.n_ctrl());
        assert_eq!(params.len(), n * n + n * m, "parameter count mismatch");
        let a_mat = DMatrix::from_fn(n, n, |i, j| params[i * n + j]);
        let b_mat = DMatrix::from_fn(n, m, |i, j| params[n * n + i * m + j]);
        LinearDyn { a_mat, b_mat }
    }
}

/// Pendulum with state `[cos th, sin th, omega]` and torque control.
/// Damping and wind are zero in the learner class; the non-realizable
/// expert sets them nonzero.
#[derive(Debug, Clone)]
pub struct Pendulum {
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub damping: f64,
    pub wind: f64,
    pub dt: f64,
}

impl Pendulum {
    pub fn new(mass: f64, length: f64, gravity: f64) -> Self {
        assert!(mass > 0.0 && length > 0.0 && gravity >= 0.0, "invalid pendulum parameters");
        Pendulum { mass, length, gravity, damping: 0.0, wind: 0.0, dt: 0.05 }
    }

    pub fn with_damping(mut self, damping: f64) -> Self {
        self.damping = damping;
        self
    }

    pub fn with_wind(mut self, wind: f64) -> Self {
        self.wind = wind;
        self
    }
}

impl DynModel for Pendulum {
    fn n_state(&self) -> usize {
        3
    }
    fn n_ctrl(&self) -> usize {
        1
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let r = x[0].hypot(x[1]);
        let (c, s) = (x[0] / r, x[1] / r);
        let om = x[2];
        let acc = 1.5 * self.gravity / self.length * s
            + 3.0 / (self.mass * self.length * self.length) * u[0]
            - self.damping * om
            + 3.0 * self.wind / (self.mass * self.length) * c;
        let om_next = om + self.dt * acc;
        let (sin_d, cos_d) = (self.dt * om_next).sin_cos();
        DVector::from_vec(vec![c * cos_d - s * sin_d, s * cos_d + c * sin_d, om_next])
    }

    fn jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let r = x[0].hypot(x[1]);
        let (c, s) = (x[0] / r, x[1] / r);
        let om = x[2];
        let acc = 1.5 * self.gravity / self.length * s
            + 3.0 / (self.mass * self.length * self.length) * u[0]
            - self.damping * om
            + 3.0 * self.wind / (self.mass * self.length) * c;
        let om_next = om + self.dt * acc;
        let (sin_d, cos_d) = (self.dt * om_next).sin_cos();
        let r3 = r * r * r;

        // forward-mode sweep of the step recurrence, one unit seed per input
        let mut jac = DMatrix::zeros(3, 4);
        for col in 0..4 {
            let dc0 = if col == 0 { 1.0 } else { 0.0 };
            let ds0 = if col == 1 { 1.0 } else { 0.0 };
            let dom = if col == 2 { 1.0 } else { 0.0 };
            let du = if col == 3 { 1.0 } else { 0.0 };
            let dc = x[1] * x[1] / r3 * dc0 - x[0] * x[1] / r3 * ds0;
            let ds = -x[0] * x[1] / r3 * dc0 + x[0] * x[0] / r3 * ds0;
            let dacc = 1.5 * self.gravity / self.length * ds
                + 3.0 / (self.mass * self.length * self.length) * du
                - self.damping * dom
                + 3.0 * self.wind / (self.mass * self.length) * dc;
            let dom_next = dom + self.dt * dacc;
            let ddth = self.dt * dom_next;
            jac[(0, col)] = cos_d * dc - sin_d * ds + (-c * sin_d - s * cos_d) * ddth;
            jac[(1, col)] = cos_d * ds + sin_d * dc + (c * cos_d - s * sin_d) * ddth;
            jac[(2, col)] = dom_next;
        }
        jac
    }
}

impl ParamDyn for Pendulum {
    /// Learnable physical parameters: mass, length, gravity.  Damping, wind,
    /// and `dt` belong to the model class, not the parameter vector.
    fn params(&self) -> Vec<f64> {
        vec![self.mass, self.length, self.gravity]
    }
    fn with_params(&self, params: &[f64]) -> Self {
        assert_eq!(params.len(), 3, "pendulum has 3 learnable parameters");
        Pendulum {
            mass: params[0],
            length: params[1],
            gravity: params[2],
            ..self.clone()
        }
    }
    fn project_params(&self, params: &mut [f64]) {
        for p in params.iter_mut() {
            *p = p.max(MIN_PHYS_PARAM);
        }
    }
}

/// Cartpole with state `[pos, vel, cos th, sin th, omega]` and horizontal
/// force control; `th = 0` is the upright pole.
#[derive(Debug, Clone)]
pub struct Cartpole {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub gravity: f64,
    pub length: f64,
    pub dt: f64,
}

impl Cartpole {
    pub fn new(cart_mass: f64, pole_mass: f64, gravity: f64, length: f64) -> Self {
        assert!(
            cart_mass > 0.0 && pole_mass > 0.0 && length > 0.0 && gravity >= 0.0,
            "invalid cartpole parameters"
        );
        Cartpole { cart_mass, pole_mass, gravity, length, dt: 0.05 }
    }
}

impl DynModel for Cartpole {
    fn n_state(&self) -> usize {
        5
    }
    fn n_ctrl(&self) -> usize {
        1
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let (pos, vel, om) = (x[0], x[1], x[4]);
        let r = x[2].hypot(x[3]);
        let (c, s) = (x[2] / r, x[3] / r);
        let total = self.cart_mass + self.pole_mass;
        let tmp = (u[0] + self.pole_mass * self.length * om * om * s) / total;
        let acc_th = (self.gravity * s - c * tmp)
            / (self.length * (4.0 / 3.0 - self.pole_mass * c * c / total));
        let acc_x = tmp - self.pole_mass * self.length * acc_th * c / total;
        let om_next = om + self.dt * acc_th;
        let (sin_d, cos_d) = (self.dt * om_next).sin_cos();
        DVector::from_vec(vec![
            pos + self.dt * vel,
            vel + self.dt * acc_x,
            c * cos_d - s * sin_d,
            s * cos_d + c * sin_d,
            om_next,
        ])
    }

    fn jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let om = x[4];
        let r = x[2].hypot(x[3]);
        let (c, s) = (x[2] / r, x[3] / r);
        let r3 = r * r * r;
        let total = self.cart_mass + self.pole_mass;
        let tmp = (u[0] + self.pole_mass * self.length * om * om * s) / total;
        let num = self.gravity * s - c * tmp;
        let den = self.length * (4.0 / 3.0 - self.pole_mass * c * c / total);
        let acc_th = num / den;
        let om_next = om + self.dt * acc_th;
        let (sin_d, cos_d) = (self.dt * om_next).sin_cos();

        let mut jac = DMatrix::zeros(5, 6);
        for col in 0..6 {
            let dpos = if col == 0 { 1.0 } else { 0.0 };
            let dvel = if col == 1 { 1.0 } else { 0.0 };
            let dc0 = if col == 2 { 1.0 } else { 0.0 };
            let ds0 = if col == 3 { 1.0 } else { 0.0 };
            let dom = if col == 4 { 1.0 } else { 0.0 };
            let du = if col == 5 { 1.0 } else { 0.0 };
            let dc = x[3] * x[3] / r3 * dc0 - x[2] * x[3] / r3 * ds0;
            let ds = -x[2] * x[3] / r3 * dc0 + x[2] * x[2] / r3 * ds0;
            let dtmp = (du
                + self.pole_mass * self.length * (2.0 * om * dom * s + om * om * ds))
                / total;
            let dnum = self.gravity * ds - dc * tmp - c * dtmp;
            let dden = -2.0 * self.length * self.pole_mass * c * dc / total;
            let dacc_th = (dnum * den - num * dden) / (den * den);
            let dacc_x =
                dtmp - self.pole_mass * self.length / total * (dacc_th * c + acc_th * dc);
            let dom_next = dom + self.dt * dacc_th;
            let ddth = self.dt * dom_next;
            jac[(0, col)] = dpos + self.dt * dvel;
            jac[(1, col)] = dvel + self.dt * dacc_x;
            jac[(2, col)] = cos_d * dc - sin_d * ds + (-c * sin_d - s * cos_d) * ddth;
            jac[(3, col)] = cos_d * ds + sin_d * dc + (c * cos_d - s * sin_d) * ddth;
            jac[(4, col)] = dom_next;
        }
        jac
    }
}

impl ParamDyn for Cartpole {
    /// Learnable physical parameters: cart mass, pole mass, gravity, length.
    fn params(&self) -> Vec<f64> {
        vec![self.cart_mass, self.pole_mass, self.gravity, self.length]
    }
    fn with_params(&self, params: &[f64]) -> Self {
        assert_eq!(params.len(), 4, "cartpole has 4 learnable parameters");
        Cartpole {
            cart_mass: params[0],
            pole_mass: params[1],
            gravity: params[2],
            length: params[3],
            dt: self.dt,
        }
    }
    fn project_params(&self, params: &mut [f64]) {
        for p in params.iter_mut() {
            *p = p.max(MIN_PHYS_PARAM);
        }
    }
}

/// Weighted squared distance to a goal point over the joint vector:
/// `sum_i w_i^2 (tau_i - goal_i)^2`.
#[derive(Debug, Clone)]
pub struct GoalCost {
    pub weights: DVector<f64>,
    pub goal: DVector<f64>,
}

impl GoalCost {
    pub fn new(weights: DVector<f64>, goal: DVector<f64>) -> Self {
        assert_eq!(weights.len(), goal.len(), "weights and goal must have equal lengths");
        assert!(weights.iter().all(|&w| w >= 0.0), "weights must be nonnegative");
        GoalCost { weights, goal }
    }
}

impl CostModel for GoalCost {
    fn value(&self, tau: &DVector<f64>, _t: usize) -> f64 {
        (0..tau.len())
            .map(|i| {
                let d = tau[i] - self.goal[i];
                self.weights[i] * self.weights[i] * d * d
            })
            .sum()
    }

    fn expansion(&self, tau: &DVector<f64>, _t: usize) -> (DMatrix<f64>, DVector<f64>) {
        let w2 = self.weights.map(|w| w * w);
        let hess = DMatrix::from_diagonal(&(&w2 * 2.0));
        let grad = DVector::from_fn(tau.len(), |i, _| 2.0 * w2[i] * (tau[i] - self.goal[i]));
        (hess, grad)
    }
}

/// Time-invariant quadratic stage cost `0.5 tau' Q tau + q' tau`.
#[derive(Debug, Clone)]
pub struct QuadCost {
    pub quad: DMatrix<f64>,
    pub lin: DVector<f64>,
}

impl QuadCost {
    pub fn new(quad: DMatrix<f64>, lin: DVector<f64>) -> Self {
        assert!(quad.is_square() && quad.nrows() == lin.len(), "cost shapes disagree");
        let quad_t = quad.transpose();
        QuadCost { quad: (quad + quad_t) * 0.5, lin }
    }

    /// The unit quadratic `0.5 |tau|^2` on an `n_tau`-dimensional joint vector.
    pub fn identity(n_tau: usize) -> Self {
        QuadCost { quad: DMatrix::identity(n_tau, n_tau), lin: DVector::zeros(n_tau) }
    }
}

impl CostModel for QuadCost {
    fn value(&self, tau: &DVector<f64>, _t: usize) -> f64 {
        0.5 * tau.dot(&(&self.quad * tau)) + self.lin.dot(tau)
    }
    fn expansion(&self, tau: &DVector<f64>, _t: usize) -> (DMatrix<f64>, DVector<f64>) {
        (self.quad.clone(), &self.quad * tau + &self.lin)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_jacobian<D: DynModel>(
        model: &D,
        x: &DVector<f64>,
        u: &DVector<f64>,
        h: f64,
    ) -> DMatrix<f64> {
        let (n, m) = (model.n_state(), model.n_ctrl());
        DMatrix::from_fn(n, n + m, |i, j| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            let mut up = u.clone();
            let mut um = u.clone();
            if j < n {
                xp[j] += h;
                xm[j] -= h;
            } else {
                up[j - n] += h;
                um[j - n] -= h;
            }
            (model.step(&xp, &up)[i] - model.step(&xm, &um)[i]) / (2.0 * h)
        })
    }

    fn jac_close<D: DynModel>(model: &D, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let analytic = model.jacobian(x, u);
        let fd = fd_jacobian(model, x, u, 1e-6);
        (analytic - &fd).abs().max() / fd.abs().max().max(1e-6)
    }

    #[test]
    fn pendulum_equilibria_are_fixed_points() {
        let p = Pendulum::new(1.0, 1.0, 10.0);
        for x in [
            DVector::from_vec(vec![1.0, 0.0, 0.0]),
            DVector::from_vec(vec![-1.0, 0.0, 0.0]),
        ] {
            let next = p.step(&x, &DVector::zeros(1));
            assert_eq!(next, x);
        }
    }

    #[test]
    fn pendulum_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let plain = Pendulum::new(1.3, 0.8, 9.81);
        let damped = Pendulum::new(1.0, 1.0, 10.0).with_damping(0.1).with_wind(0.5);
        for trial in 0..100 {
            let angle = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let scale = rng.gen_range(0.9..1.1); // off the unit circle on purpose
            let x = DVector::from_vec(vec![
                scale * angle.cos(),
                scale * angle.sin(),
                rng.gen_range(-2.0..2.0),
            ]);
            let u = DVector::from_vec(vec![rng.gen_range(-2.0..2.0)]);
            let err = if trial % 2 == 0 {
                jac_close(&plain, &x, &u)
            } else {
                jac_close(&damped, &x, &u)
            };
            assert!(err <= 1e-4, "trial {trial}: jacobian off by {err:.3e}");
        }
    }

    #[test]
    fn cartpole_balanced_rest_is_fixed_point() {
        let cp = Cartpole::new(1.0, 0.1, 10.0, 0.5);
        let x = DVector::from_vec(vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let next = cp.step(&x, &DVector::zeros(1));
        assert_eq!(next, x);
    }

    #[test]
    fn cartpole_push_moves_velocity_before_position() {
        let cp = Cartpole::new(1.0, 0.1, 10.0, 0.5);
        let x = DVector::from_vec(vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let next = cp.step(&x, &DVector::from_vec(vec![1.0]));
        assert_eq!(next[0], 0.0, "position updates with pre-step velocity");
        assert!(next[1] > 0.0, "velocity must respond to the push");
    }

    #[test]
    fn cartpole_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let cp = Cartpole::new(1.0, 0.1, 10.0, 0.5);
        for trial in 0..100 {
            let angle = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let scale = rng.gen_range(0.9..1.1);
            let x = DVector::from_vec(vec![
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                scale * angle.cos(),
                scale * angle.sin(),
                rng.gen_range(-2.0..2.0),
            ]);
            let u = DVector::from_vec(vec![rng.gen_range(-2.0..2.0)]);
            let err = jac_close(&cp, &x, &u);
            assert!(err <= 1e-4, "trial {trial}: jacobian off by {err:.3e}");
        }
    }

    #[test]
    fn linear_dyn_jacobian_is_exact_and_params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let b = DMatrix::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0));
        let lin = LinearDyn::new(a, b);
        let x = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let u = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
        let fd = fd_jacobian(&lin, &x, &u, 1e-6);
        assert!((lin.jacobian(&x, &u) - fd).abs().max() <= 1e-8);

        let rebuilt = lin.with_params(&lin.params());
        assert_eq!(rebuilt.a_mat, lin.a_mat);
        assert_eq!(rebuilt.b_mat, lin.b_mat);
    }

    #[test]
    fn angle_embedding_stays_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let p = Pendulum::new(1.0, 1.0, 10.0);
        let cp = Cartpole::new(1.0, 0.1, 10.0, 0.5);
        let mut xp = DVector::from_vec(vec![0.6, 0.8, 0.3]);
        let mut xc = DVector::from_vec(vec![0.1, -0.2, 0.6, 0.8, -0.4]);
        for _ in 0..50 {
            let u = DVector::from_vec(vec![rng.gen_range(-2.0..2.0)]);
            xp = p.step(&xp, &u);
            xc = cp.step(&xc, &u);
            assert!((xp[0].hypot(xp[1]) - 1.0).abs() <= 1e-12);
            assert!((xc[2].hypot(xc[3]) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_damping_and_wind_expert_matches_learner_class() {
        let learner = Pendulum::new(1.0, 1.0, 10.0);
        let expert = Pendulum::new(1.0, 1.0, 10.0).with_damping(0.0).with_wind(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut x = DVector::from_vec(vec![0.6, 0.8, 0.1]);
        for _ in 0..30 {
            let u = DVector::from_vec(vec![rng.gen_range(-2.0..2.0)]);
            let a = learner.step(&x, &u);
            let b = expert.step(&x, &u);
            assert_eq!(a, b);
            x = a;
        }
    }

    #[test]
    fn pendulum_params_round_trip_preserves_model_class() {
        let expert = Pendulum::new(1.0, 1.0, 10.0).with_damping(0.1).with_wind(0.5);
        let rebuilt = expert.with_params(&[1.2, 0.9, 9.8]);
        assert_eq!(rebuilt.mass, 1.2);
        assert_eq!(rebuilt.length, 0.9);
        assert_eq!(rebuilt.gravity, 9.8);
        assert_eq!(rebuilt.damping, 0.1, "damping belongs to the class, not the params");
        assert_eq!(rebuilt.wind, 0.5);
        assert_eq!(rebuilt.dt, expert.dt);
    }

    #[test]
    fn goal_cost_expansion_is_exact_quadratic_model() {
        let unit = GoalCost::new(DVector::from_element(3, 1.0), DVector::zeros(3));
        let (h, p) = unit.expansion(&DVector::zeros(3), 0);
        assert_eq!(h, DMatrix::identity(3, 3) * 2.0);
        assert_eq!(p, DVector::zeros(3));

        let zero = GoalCost::new(DVector::zeros(3), DVector::from_element(3, 1.0));
        let (h, p) = zero.expansion(&DVector::from_element(3, 0.5), 0);
        assert_eq!(h.abs().max(), 0.0);
        assert_eq!(p.abs().max(), 0.0);

        // a quadratic is its own second-order model: reconstruct the value
        // at a distant point from the expansion
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let cost = GoalCost::new(
            DVector::from_fn(4, |_, _| rng.gen_range(0.0..2.0)),
            DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0)),
        );
        let tau0 = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        let tau1 = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        let (h, p) = cost.expansion(&tau0, 0);
        let d = &tau1 - &tau0;
        let rebuilt = cost.value(&tau0, 0) + p.dot(&d) + 0.5 * d.dot(&(&h * &d));
        assert!((rebuilt - cost.value(&tau1, 0)).abs() <= 1e-12);
    }

    #[test]
    fn quad_cost_expansion_matches_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let q = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let cost = QuadCost::new(q, DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0)));
        let tau = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let (h, grad) = cost.expansion(&tau, 0);
        // gradient check against central differences
        for i in 0..3 {
            let mut tp = tau.clone();
            let mut tm = tau.clone();
            tp[i] += 1e-6;
            tm[i] -= 1e-6;
            let fd = (cost.value(&tp, 0) - cost.value(&tm, 0)) / 2e-6;
            assert!((fd - grad[i]).abs() <= 1e-8);
        }
        assert_eq!(h, cost.quad);
    }
}
