//! Multinomial NUTS transition with a generalized no-U-turn criterion.

use rand::Rng;
use rand_distr::StandardNormal;

use super::LogDensity;
use crate::error::{Error, Result};

/// Energy error beyond which a trajectory is declared divergent.
const MAX_DELTA_H: f64 = 1000.0;

#[derive(Clone)]
struct Point {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    lp: f64,
}

pub(crate) struct Transition {
    pub accept_stat: f64,
    pub divergent: bool,
    pub depth: u32,
    pub leapfrog: usize,
}

/// Running totals of one tree expansion.
struct TreeState {
    h0: f64,
    direction: f64,
    leapfrog: usize,
    sum_metro: f64,
    divergent: bool,
}

/// Outputs of a subtree: its two edge momenta and their velocities.
struct Edges {
    p_beg: Vec<f64>,
    p_end: Vec<f64>,
    v_beg: Vec<f64>,
    v_end: Vec<f64>,
}

pub(crate) struct Nuts<'a, D: LogDensity + ?Sized> {
    density: &'a D,
    current: Point,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    max_depth: u32,
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn no_u_turn(v_minus: &[f64], v_plus: &[f64], rho: &[f64]) -> bool {
    dot(v_plus, rho) > 0.0 && dot(v_minus, rho) > 0.0
}

impl<'a, D: LogDensity + ?Sized> Nuts<'a, D> {
    pub fn new(density: &'a D, q: Vec<f64>, max_depth: u32) -> Self {
        let dim = q.len();
        let mut grad = vec![0.0; dim];
        let lp = density.log_density_grad(&q, &mut grad);
        Self {
            density,
            current: Point { q, p: vec![0.0; dim], grad, lp },
            step_size: 1.0,
            inv_metric: vec![1.0; dim],
            max_depth,
        }
    }

    pub fn position(&self) -> &[f64] {
        &self.current.q
    }

    fn hamiltonian(&self, z: &Point) -> f64 {
        let kinetic: f64 = z.p.iter().zip(&self.inv_metric).map(|(p, m)| p * p * m).sum::<f64>() * 0.5;
        let h = kinetic - z.lp;
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn velocity(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_metric).map(|(p, m)| p * m).collect()
    }

    fn sample_momentum<R: Rng>(&self, z: &mut Point, rng: &mut R) {
        for (p, m) in z.p.iter_mut().zip(&self.inv_metric) {
            let n: f64 = rng.sample(StandardNormal);
            *p = n / m.sqrt();
        }
    }

    fn leapfrog(&self, z: &mut Point, eps: f64) {
        let half = 0.5 * eps;
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += half * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(&self.inv_metric) {
            *q += eps * m * p;
        }
        z.lp = self.density.log_density_grad(&z.q, &mut z.grad);
        if !z.lp.is_finite() || z.grad.iter().any(|g| !g.is_finite()) {
            z.lp = f64::NEG_INFINITY;
            return;
        }
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += half * g;
        }
    }

    /// Heuristic initial step size: double or halve until the acceptance
    /// of a single leapfrog step crosses 0.8.
    pub fn init_step_size<R: Rng>(&mut self, rng: &mut R) -> Result<()> {
        let threshold = 0.8_f64.ln();
        let mut z = self.current.clone();
        self.sample_momentum(&mut z, rng);
        let h0 = self.hamiltonian(&z);
        self.leapfrog(&mut z, self.step_size);
        let delta = h0 - self.hamiltonian(&z);
        let direction = if delta > threshold { 1.0 } else { -1.0 };
        loop {
            let mut z = self.current.clone();
            self.sample_momentum(&mut z, rng);
            let h0 = self.hamiltonian(&z);
            self.leapfrog(&mut z, self.step_size);
            let delta = h0 - self.hamiltonian(&z);
            if direction > 0.0 && !(delta > threshold) || direction < 0.0 && !(delta < threshold) {
                return Ok(());
            }
            self.step_size = if direction > 0.0 { 2.0 * self.step_size } else { 0.5 * self.step_size };
            if self.step_size > 1e7 {
                return Err(Error::numerical("step size diverged; the posterior may be improper"));
            }
            if self.step_size < 1e-300 {
                return Err(Error::numerical("step size collapsed to zero"));
            }
        }
    }

    pub fn transition<R: Rng>(&mut self, rng: &mut R) -> Transition {
        let mut z = self.current.clone();
        self.sample_momentum(&mut z, rng);
        let v0 = self.velocity(&z.p);
        let mut st =
            TreeState { h0: self.hamiltonian(&z), direction: 1.0, leapfrog: 0, sum_metro: 0.0, divergent: false };

        let mut z_fwd = z.clone();
        let mut z_bck = z.clone();
        let mut sample = z.clone();
        // per side: `*_beg` is the edge facing the start point, `*_end` the outer edge
        let mut fwd = Edges { p_beg: z.p.clone(), p_end: z.p.clone(), v_beg: v0.clone(), v_end: v0.clone() };
        let mut bck = Edges { p_beg: z.p.clone(), p_end: z.p.clone(), v_beg: v0.clone(), v_end: v0 };
        let mut rho = z.p.clone();
        let mut log_sum_w = 0.0;
        let mut depth = 0;
        let dim = z.q.len();

        while depth < self.max_depth {
            let mut rho_fwd = vec![0.0; dim];
            let mut rho_bck = vec![0.0; dim];
            let mut lsw_sub = f64::NEG_INFINITY;
            let mut propose = z.clone();
            let valid = if rng.random::<f64>() > 0.5 {
                rho_bck.clone_from(&rho);
                // the old tree becomes the backward part; its inner edge is the old forward end
                bck.p_beg.clone_from(&fwd.p_end);
                bck.v_beg.clone_from(&fwd.v_end);
                st.direction = 1.0;
                self.build_tree(depth, &mut z_fwd, &mut propose, &mut fwd, &mut rho_fwd, &mut lsw_sub, &mut st, rng)
            } else {
                rho_fwd.clone_from(&rho);
                fwd.p_beg.clone_from(&bck.p_end);
                fwd.v_beg.clone_from(&bck.v_end);
                st.direction = -1.0;
                self.build_tree(depth, &mut z_bck, &mut propose, &mut bck, &mut rho_bck, &mut lsw_sub, &mut st, rng)
            };
            if !valid {
                break;
            }
            depth += 1;
            if lsw_sub > log_sum_w {
                sample = propose;
            } else if rng.random::<f64>() < (lsw_sub - log_sum_w).exp() {
                sample = propose;
            }
            log_sum_w = log_sum_exp(log_sum_w, lsw_sub);
            rho = add(&rho_bck, &rho_fwd);
            // fwd.v_end / bck.v_end are the outermost velocities, *.v_beg the innermost
            let mut persist = no_u_turn(&bck.v_end, &fwd.v_end, &rho);
            persist &= no_u_turn(&bck.v_end, &fwd.v_beg, &add(&rho_bck, &fwd.p_beg));
            persist &= no_u_turn(&bck.v_beg, &fwd.v_end, &add(&rho_fwd, &bck.p_beg));
            if !persist {
                break;
            }
        }
        self.current = sample;
        Transition {
            accept_stat: if st.leapfrog > 0 { st.sum_metro / st.leapfrog as f64 } else { 0.0 },
            divergent: st.divergent,
            depth,
            leapfrog: st.leapfrog,
        }
    }

    /// Extend the trajectory from `edge` by `2^depth` steps in the current
    /// direction. `edge` is advanced in place; `propose` receives the
    /// multinomial sample of the new subtree.
    #[allow(clippy::too_many_arguments)]
    fn build_tree<R: Rng>(
        &self,
        depth: u32,
        edge: &mut Point,
        propose: &mut Point,
        edges: &mut Edges,
        rho: &mut [f64],
        log_sum_w: &mut f64,
        st: &mut TreeState,
        rng: &mut R,
    ) -> bool {
        if depth == 0 {
            self.leapfrog(edge, st.direction * self.step_size);
            st.leapfrog += 1;
            let h = self.hamiltonian(edge);
            if h - st.h0 > MAX_DELTA_H {
                st.divergent = true;
            }
            let delta = st.h0 - h;
            *log_sum_w = log_sum_exp(*log_sum_w, delta);
            st.sum_metro += if delta > 0.0 { 1.0 } else { delta.exp() };
            propose.clone_from(edge);
            let v = self.velocity(&edge.p);
            edges.v_beg.clone_from(&v);
            edges.v_end = v;
            edges.p_beg.clone_from(&edge.p);
            edges.p_end.clone_from(&edge.p);
            for (r, p) in rho.iter_mut().zip(&edge.p) {
                *r += p;
            }
            return !st.divergent;
        }
        let dim = rho.len();
        // first half: fills the beginning edge of `edges`
        let mut init = Edges { p_beg: Vec::new(), p_end: Vec::new(), v_beg: Vec::new(), v_end: Vec::new() };
        let mut rho_init = vec![0.0; dim];
        let mut lsw_init = f64::NEG_INFINITY;
        if !self.build_tree(depth - 1, edge, propose, &mut init, &mut rho_init, &mut lsw_init, st, rng) {
            return false;
        }
        let mut propose_final = edge.clone();
        let mut fin = Edges { p_beg: Vec::new(), p_end: Vec::new(), v_beg: Vec::new(), v_end: Vec::new() };
        let mut rho_final = vec![0.0; dim];
        let mut lsw_final = f64::NEG_INFINITY;
        if !self.build_tree(depth - 1, edge, &mut propose_final, &mut fin, &mut rho_final, &mut lsw_final, st, rng) {
            return false;
        }
        let lsw_subtree = log_sum_exp(lsw_init, lsw_final);
        *log_sum_w = log_sum_exp(*log_sum_w, lsw_subtree);
        if lsw_final > lsw_subtree || rng.random::<f64>() < (lsw_final - lsw_subtree).exp() {
            *propose = propose_final;
        }
        let rho_subtree = add(&rho_init, &rho_final);
        for (r, s) in rho.iter_mut().zip(&rho_subtree) {
            *r += s;
        }
        let mut persist = no_u_turn(&init.v_beg, &fin.v_end, &rho_subtree);
        persist &= no_u_turn(&init.v_beg, &fin.v_beg, &add(&rho_init, &fin.p_beg));
        persist &= no_u_turn(&init.v_end, &fin.v_end, &add(&rho_final, &init.p_end));
        *edges = Edges { p_beg: init.p_beg, p_end: fin.p_end, v_beg: init.v_beg, v_end: fin.v_end };
        persist
    }
}
