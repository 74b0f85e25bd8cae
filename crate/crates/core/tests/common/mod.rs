#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stamp::autograd::{Tape, Var};
use stamp::nn::ParamStore;
use stamp::tensor::Mat;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_mat(rows: usize, cols: usize, scale: f64, r: &mut impl Rng) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| scale * (2.0 * r.gen::<f64>() - 1.0)).collect())
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-6)`. The floor covers gradients that vanish
/// analytically (key biases under softmax), where differences are pure noise.
pub fn rel_err(a: &Mat, b: &Mat) -> f64 {
    let mut d = a.clone();
    d.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x -= y);
    d.norm() / a.norm().max(b.norm()).max(1e-6)
}

/// Builds `sum(w ⊙ f(x))` for a fixed random `w`, so every output entry is
/// exercised.
pub struct Probe<F> {
    pub build: F,
    pub weights: Mat,
}

impl<F: Fn(&mut Tape, &ParamStore, Var) -> Var> Probe<F> {
    pub fn new(build: F, store: &ParamStore, x: &Mat, seed: u64) -> Self {
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let out = build(&mut t, store, xv);
        let (r, c) = t.shape(out);
        let weights = rand_mat(r, c, 1.0, &mut rng(seed));
        Probe { build, weights }
    }

    pub fn loss(&self, store: &ParamStore, x: &Mat) -> f64 {
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let out = (self.build)(&mut t, store, xv);
        let w = t.constant(self.weights.clone());
        let l = t.mul(out, w);
        let l = t.sum(l);
        t.scalar(l)
    }

    /// Analytic gradients w.r.t. the input and every parameter.
    pub fn grads(&self, store: &ParamStore, x: &Mat) -> (Mat, Vec<Mat>) {
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let out = (self.build)(&mut t, store, xv);
        let w = t.constant(self.weights.clone());
        let l = t.mul(out, w);
        let l = t.sum(l);
        let g = t.backward(l);
        let gx = g.wrt_or_zeros(xv, x.rows, x.cols);
        let gp = store
            .ids()
            .map(|id| {
                let v = store.value(id);
                g.param(id).cloned().unwrap_or_else(|| Mat::zeros(v.rows, v.cols))
            })
            .collect();
        (gx, gp)
    }

    /// Central differences w.r.t. the input and every parameter.
    pub fn finite_diff(&self, store: &ParamStore, x: &Mat, h: f64) -> (Mat, Vec<Mat>) {
        let mut gx = Mat::zeros(x.rows, x.cols);
        let mut xp = x.clone();
        for i in 0..x.len() {
            let x0 = xp.data[i];
            xp.data[i] = x0 + h;
            let up = self.loss(store, &xp);
            xp.data[i] = x0 - h;
            let dn = self.loss(store, &xp);
            xp.data[i] = x0;
            gx.data[i] = (up - dn) / (2.0 * h);
        }
        let mut s = store.clone();
        let ids: Vec<_> = store.ids().collect();
        let gp = ids
            .into_iter()
            .map(|id| {
                let n = s.value(id).len();
                let mut g = Mat::zeros(s.value(id).rows, s.value(id).cols);
                for i in 0..n {
                    let p0 = s.value(id).data[i];
                    s.value_mut(id).data[i] = p0 + h;
                    let up = self.loss(&s, x);
                    s.value_mut(id).data[i] = p0 - h;
                    let dn = self.loss(&s, x);
                    s.value_mut(id).data[i] = p0;
                    g.data[i] = (up - dn) / (2.0 * h);
                }
                g
            })
            .collect();
        (gx, gp)
    }

    /// Largest relative error over the input and all parameter tensors.
    pub fn max_rel_err(&self, store: &ParamStore, x: &Mat) -> (f64, String) {
        let (ax, ap) = self.grads(store, x);
        let (nx, np) = self.finite_diff(store, x, 1e-5);
        let mut worst = (rel_err(&ax, &nx), "input".to_string());
        for (id, (a, n)) in store.ids().zip(ap.iter().zip(&np)) {
            let e = rel_err(a, n);
            if e > worst.0 {
                worst = (e, store.name(id).to_string());
            }
        }
        worst
    }
}

/// Perturbs every parameter off the initial values (zero biases, unit norms)
/// so that no gradient path is trivially symmetric.
pub fn jitter_params(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data.iter_mut() {
            *v += 0.3 * (2.0 * r.gen::<f64>() - 1.0);
        }
    }
}
