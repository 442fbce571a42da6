//! Gated recurrent unit without biases:
//!
//! ```text
//! r  = σ(W_r x + U_r h)
//! u  = σ(W_u x + U_u h)
//! h~ = tanh(W x + U (r ⊙ h))
//! h' = u ⊙ h + (1 - u) ⊙ h~
//! ```

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Zip};

#[derive(Debug, Clone, PartialEq)]
pub struct Gru {
    pub w_reset: Array2<f64>,
    pub w_update: Array2<f64>,
    pub w_cand: Array2<f64>,
    pub u_reset: Array2<f64>,
    pub u_update: Array2<f64>,
    pub u_cand: Array2<f64>,
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone)]
pub struct GruStep {
    pub x: Array1<f64>,
    pub h_prev: Array1<f64>,
    pub reset: Array1<f64>,
    pub update: Array1<f64>,
    pub cand: Array1<f64>,
    pub reset_h: Array1<f64>,
    pub h: Array1<f64>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `m += a bᵀ`
pub(crate) fn add_outer(mut m: ArrayViewMut2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    Zip::from(m.rows_mut()).and(&a).for_each(|mut row, &ai| {
        if ai != 0.0 {
            row.scaled_add(ai, &b);
        }
    });
}

/// `mᵀ v`, accumulated row by row so the matrix is read contiguously.
pub(crate) fn t_dot(m: &Array2<f64>, v: ArrayView1<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(m.ncols());
    for (row, &vi) in m.rows().into_iter().zip(&v) {
        if vi != 0.0 {
            out.scaled_add(vi, &row);
        }
    }
    out
}

impl Gru {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        let w = || Array2::zeros((hidden, input));
        let u = || Array2::zeros((hidden, hidden));
        Gru { w_reset: w(), w_update: w(), w_cand: w(), u_reset: u(), u_update: u(), u_cand: u() }
    }

    pub fn hidden(&self) -> usize {
        self.u_reset.nrows()
    }

    pub fn input(&self) -> usize {
        self.w_reset.ncols()
    }

    pub fn matrices(&self) -> [&Array2<f64>; 6] {
        [&self.w_reset, &self.w_update, &self.w_cand, &self.u_reset, &self.u_update, &self.u_cand]
    }

    pub fn matrices_mut(&mut self) -> [&mut Array2<f64>; 6] {
        [
            &mut self.w_reset,
            &mut self.w_update,
            &mut self.w_cand,
            &mut self.u_reset,
            &mut self.u_update,
            &mut self.u_cand,
        ]
    }

    pub fn step(&self, x: ArrayView1<f64>, h_prev: ArrayView1<f64>) -> GruStep {
        let reset = (self.w_reset.dot(&x) + self.u_reset.dot(&h_prev)).mapv_into(sigmoid);
        let update = (self.w_update.dot(&x) + self.u_update.dot(&h_prev)).mapv_into(sigmoid);
        let reset_h = &reset * &h_prev;
        let cand = (self.w_cand.dot(&x) + self.u_cand.dot(&reset_h)).mapv_into(f64::tanh);
        let mut h = Array1::zeros(self.hidden());
        Zip::from(&mut h).and(&update).and(&h_prev).and(&cand).for_each(|h, &u, &hp, &c| *h = u * hp + (1.0 - u) * c);
        GruStep { x: x.to_owned(), h_prev: h_prev.to_owned(), reset, update, cand, reset_h, h }
    }

    /// Forward step for a batch of rows (`x` is `rows × input`, `h_prev` is
    /// `rows × hidden`); returns the new states without a backward trace.
    pub fn step_rows(&self, x: ArrayView2<f64>, h_prev: ArrayView2<f64>) -> Array2<f64> {
        let reset = (x.dot(&self.w_reset.t()) + h_prev.dot(&self.u_reset.t())).mapv_into(sigmoid);
        let update = (x.dot(&self.w_update.t()) + h_prev.dot(&self.u_update.t())).mapv_into(sigmoid);
        let reset_h = &reset * &h_prev;
        let cand = (x.dot(&self.w_cand.t()) + reset_h.dot(&self.u_cand.t())).mapv_into(f64::tanh);
        let mut h = Array2::zeros(h_prev.raw_dim());
        Zip::from(&mut h).and(&update).and(&h_prev).and(&cand).for_each(|h, &u, &hp, &c| *h = u * hp + (1.0 - u) * c);
        h
    }

    /// Backpropagates `dh` (gradient of the loss with respect to `step.h`)
    /// into `grad`; returns the gradients for the input and previous state.
    pub fn backward(&self, step: &GruStep, dh: ArrayView1<f64>, grad: &mut Gru) -> (Array1<f64>, Array1<f64>) {
        let n = self.hidden();
        let mut d_update_pre = Array1::zeros(n);
        let mut d_cand_pre = Array1::zeros(n);
        for i in 0..n {
            let u = step.update[i];
            let c = step.cand[i];
            d_update_pre[i] = dh[i] * (step.h_prev[i] - c) * u * (1.0 - u);
            d_cand_pre[i] = dh[i] * (1.0 - u) * (1.0 - c * c);
        }
        let d_reset_h = t_dot(&self.u_cand, d_cand_pre.view());
        let d_reset_pre = Zip::from(&d_reset_h)
            .and(&step.h_prev)
            .and(&step.reset)
            .map_collect(|&drh, &hp, &r| drh * hp * r * (1.0 - r));

        add_outer(grad.w_cand.view_mut(), d_cand_pre.view(), step.x.view());
        add_outer(grad.u_cand.view_mut(), d_cand_pre.view(), step.reset_h.view());
        add_outer(grad.w_update.view_mut(), d_update_pre.view(), step.x.view());
        add_outer(grad.u_update.view_mut(), d_update_pre.view(), step.h_prev.view());
        add_outer(grad.w_reset.view_mut(), d_reset_pre.view(), step.x.view());
        add_outer(grad.u_reset.view_mut(), d_reset_pre.view(), step.h_prev.view());

        let mut dx = t_dot(&self.w_cand, d_cand_pre.view());
        dx += &t_dot(&self.w_update, d_update_pre.view());
        dx += &t_dot(&self.w_reset, d_reset_pre.view());

        let mut dh_prev = &dh * &step.update + &d_reset_h * &step.reset;
        dh_prev += &t_dot(&self.u_update, d_update_pre.view());
        dh_prev += &t_dot(&self.u_reset, d_reset_pre.view());
        (dx, dh_prev)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gru(hidden: usize, input: usize, seed: u64) -> Gru {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gru = Gru::zeros(hidden, input);
        for m in gru.matrices_mut() {
            m.mapv_inplace(|_| rng.random_range(-0.8..0.8));
        }
        gru
    }

    #[test]
    fn zero_weights_fixed_point() {
        let gru = Gru::zeros(3, 2);
        let step = gru.step(array![0.0, 0.0].view(), array![0.0, 0.0, 0.0].view());
        assert_eq!(step.update, array![0.5, 0.5, 0.5]);
        assert_eq!(step.h, array![0.0, 0.0, 0.0]);
    }

    #[test]
    fn step_matches_scalar_formula() {
        let gru = random_gru(2, 3, 1);
        let x = array![0.3, -0.2, 0.9];
        let h = array![0.1, -0.4];
        let step = gru.step(x.view(), h.view());
        for i in 0..2 {
            let dot = |m: &Array2<f64>, v: &Array1<f64>| (0..v.len()).map(|j| m[[i, j]] * v[j]).sum::<f64>();
            let r = sigmoid(dot(&gru.w_reset, &x) + dot(&gru.u_reset, &h));
            let u = sigmoid(dot(&gru.w_update, &x) + dot(&gru.u_update, &h));
            let rh = array![step.reset[0] * h[0], step.reset[1] * h[1]];
            let c = (dot(&gru.w_cand, &x) + dot(&gru.u_cand, &rh)).tanh();
            assert!((step.reset[i] - r).abs() < 1e-15);
            assert!((step.h[i] - (u * h[i] + (1.0 - u) * c)).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let gru = random_gru(4, 3, 9);
        let x = array![0.5, -0.1, 0.2];
        let h = array![0.3, -0.6, 0.1, 0.7];
        let weights = array![0.7, -1.1, 0.4, 2.0];
        let loss = |g: &Gru, x: &Array1<f64>, h: &Array1<f64>| g.step(x.view(), h.view()).h.dot(&weights);

        let step = gru.step(x.view(), h.view());
        let mut grad = Gru::zeros(4, 3);
        let (dx, dh) = gru.backward(&step, weights.view(), &mut grad);
        let eps = 1e-6;
        for j in 0..3 {
            let (mut up, mut dn) = (x.clone(), x.clone());
            up[j] += eps;
            dn[j] -= eps;
            let fd = (loss(&gru, &up, &h) - loss(&gru, &dn, &h)) / (2.0 * eps);
            assert!((fd - dx[j]).abs() < 1e-8);
        }
        for j in 0..4 {
            let (mut up, mut dn) = (h.clone(), h.clone());
            up[j] += eps;
            dn[j] -= eps;
            let fd = (loss(&gru, &x, &up) - loss(&gru, &x, &dn)) / (2.0 * eps);
            assert!((fd - dh[j]).abs() < 1e-8);
        }
        for (m, g) in (0..6).zip(grad.matrices()) {
            for idx in ndarray::indices(g.dim()) {
                let (mut up, mut dn) = (gru.clone(), gru.clone());
                up.matrices_mut()[m][idx] += eps;
                dn.matrices_mut()[m][idx] -= eps;
                let fd = (loss(&up, &x, &h) - loss(&dn, &x, &h)) / (2.0 * eps);
                assert!((fd - g[idx]).abs() < 1e-8, "matrix {m} at {idx:?}");
            }
        }
    }
}
