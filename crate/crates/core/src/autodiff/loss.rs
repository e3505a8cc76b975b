//! Losses and the mixture-Gaussian latent used by the variational autoencoder.

use ndarray::{ArrayD, Axis, IxDyn, Zip};

use super::{shape_err, Real, Result, Var};

pub const BCE_EPS: f64 = 1e-7;

/// How the decoder input is drawn from the per-dimension mixture.
#[derive(Debug, Clone)]
pub enum LatentMode<T> {
    /// `z = Σ_k w_k μ_k`; deterministic.
    Mean,
    /// One component per dimension (`choice`, `B×D`) and standard normal
    /// noise `eps` (`B×D×K`). Gaussian part reparameterized, mixture weights
    /// receive a straight-through gradient.
    Sample {
        choice: Vec<usize>,
        eps: ArrayD<T>,
    },
}

fn log_softmax_k<T: Real>(logits: &ArrayD<T>) -> ArrayD<T> {
    let mut out = logits.clone();
    for mut lane in out.lanes_mut(Axis(logits.ndim() - 1)) {
        let max = lane.fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = max + lane.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        lane.mapv_inplace(|v| v - lse);
    }
    out
}

fn check_mixture<T: Real>(op: &'static str, l: &ArrayD<T>, m: &ArrayD<T>, v: &ArrayD<T>) -> Result<(usize, usize, usize)> {
    if l.ndim() != 3 || l.shape() != m.shape() || l.shape() != v.shape() || l.shape()[2] == 0 {
        return Err(shape_err(op, format!("logits {:?}, mu {:?}, logvar {:?}", l.shape(), m.shape(), v.shape())));
    }
    Ok((l.shape()[0], l.shape()[1], l.shape()[2]))
}

impl<'t, T: Real> Var<'t, T> {
    /// Mean binary cross-entropy of probabilities `self` against labels in {0,1}.
    /// Probabilities are clipped to `[ε, 1−ε]`; clipped entries pass no gradient.
    pub fn bce(self, labels: &[T]) -> Var<'t, T> {
        let p = self.value();
        assert_eq!(p.len(), labels.len(), "bce: one label per probability");
        let eps = T::of(BCE_EPS);
        let n = T::of(labels.len().max(1) as f64);
        let mut total = T::zero();
        for (&pi, &yi) in p.iter().zip(labels) {
            let pc = if pi.is_nan() { pi } else { pi.max(eps).min(T::one() - eps) };
            total -= yi * pc.ln() + (T::one() - yi) * (T::one() - pc).ln();
        }
        let labels = labels.to_vec();
        self.tape.push_op(
            ArrayD::from_elem(IxDyn(&[]), total / n),
            &[self],
            Box::new(move |g, _| {
                let gv = g.iter().copied().next().unwrap_or_else(T::zero) / n;
                let mut d = ArrayD::<T>::zeros(p.raw_dim());
                for ((d, &pi), &yi) in d.iter_mut().zip(p.iter()).zip(&labels) {
                    if pi > eps && pi < T::one() - eps {
                        *d = gv * (-yi / pi + (T::one() - yi) / (T::one() - pi));
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// KL divergence of a per-dimension Gaussian mixture from `N(0,1)`:
    /// `Σ_d [Σ_k w_k KL(N(μ_k,σ_k²) ‖ N(0,1)) + KL(w ‖ Uniform(K))]`, averaged
    /// over the batch. All inputs `B×D×K`; `w = softmax(mix_logits)`.
    pub fn kld_mixture(self, mu: Var<'t, T>, logvar: Var<'t, T>) -> Result<Var<'t, T>> {
        let l = self.value();
        let m = mu.value();
        let v = logvar.value();
        let (b, _, k) = check_mixture("kld_mixture", &l, &m, &v)?;
        let logw = log_softmax_k(&l);
        let w = logw.mapv(|x| x.exp());
        let half = T::of(0.5);
        let ln_k = T::of((k as f64).ln());
        // per-component Gaussian KL and categorical log-ratio
        let mut gauss = m.as_ref().clone();
        Zip::from(&mut gauss)
            .and(&*m)
            .and(&*v)
            .for_each(|g, &mu, &lv| *g = half * (mu * mu + lv.exp() - T::one() - lv));
        let mut total = T::zero();
        Zip::from(&w).and(&gauss).and(&logw).for_each(|&w, &g, &lw| {
            total += w * (g + lw + ln_k);
        });
        let bn = T::of(b.max(1) as f64);
        Ok(self.tape.push_op(
            ArrayD::from_elem(IxDyn(&[]), total / bn),
            &[self, mu, logvar],
            Box::new(move |g, needs| {
                let gv = g.iter().copied().next().unwrap_or_else(T::zero) / bn;
                let dlogits = needs[0].then(|| {
                    // a_k = g_k + ln(K w_k); dl_k = w_k (a_k − Σ_j w_j a_j)
                    let mut a = gauss.clone();
                    Zip::from(&mut a).and(&logw).for_each(|a, &lw| *a += lw + ln_k);
                    let mut d = a.clone();
                    let ax = Axis(2);
                    for (mut dl, (al, wl)) in d
                        .lanes_mut(ax)
                        .into_iter()
                        .zip(a.lanes(ax).into_iter().zip(w.lanes(ax)))
                    {
                        let mean: T = al.iter().zip(wl.iter()).map(|(&a, &w)| a * w).sum();
                        Zip::from(&mut dl)
                            .and(&al)
                            .and(&wl)
                            .for_each(|d, &a, &w| *d = gv * w * (a - mean));
                    }
                    d
                });
                let dmu = needs[1].then(|| {
                    let mut d = m.as_ref().clone();
                    Zip::from(&mut d).and(&w).for_each(|d, &w| *d = gv * w * *d);
                    d
                });
                let dlv = needs[2].then(|| {
                    let mut d = v.as_ref().clone();
                    Zip::from(&mut d)
                        .and(&w)
                        .for_each(|d, &w| *d = gv * w * half * (d.exp() - T::one()));
                    d
                });
                vec![dlogits, dmu, dlv]
            }),
        ))
    }

    /// Draws the `B×D` decoder input from a mixture given as
    /// `(self = mix_logits, mu, logvar)`, each `B×D×K`.
    pub fn mixture_latent(self, mu: Var<'t, T>, logvar: Var<'t, T>, mode: &LatentMode<T>) -> Result<Var<'t, T>> {
        let l = self.value();
        let m = mu.value();
        let v = logvar.value();
        let (b, d, k) = check_mixture("mixture_latent", &l, &m, &v)?;
        let w = log_softmax_k(&l).mapv(|x| x.exp());
        let half = T::of(0.5);
        // comp_k = μ_k + σ_k ε_k, onehot from choice (or the weights in mean mode)
        let (comp, sel, eps) = match mode {
            LatentMode::Mean => (m.as_ref().clone(), w.clone(), None),
            LatentMode::Sample { choice, eps } => {
                if choice.len() != b * d || eps.shape() != l.shape() {
                    return Err(shape_err(
                        "mixture_latent",
                        format!("choice {} vs {}, eps {:?}", choice.len(), b * d, eps.shape()),
                    ));
                }
                let mut comp = m.as_ref().clone();
                Zip::from(&mut comp)
                    .and(&*v)
                    .and(eps)
                    .for_each(|c, &lv, &e| *c += (half * lv).exp() * e);
                let mut sel = ArrayD::<T>::zeros(l.raw_dim());
                for bi in 0..b {
                    for di in 0..d {
                        let c = choice[bi * d + di];
                        if c >= k {
                            return Err(shape_err("mixture_latent", format!("component {c} >= {k}")));
                        }
                        sel[[bi, di, c]] = T::one();
                    }
                }
                (comp, sel, Some(eps.clone()))
            }
        };
        let z = (&sel * &comp).sum_axis(Axis(2));
        Ok(self.tape.push_op(
            z,
            &[self, mu, logvar],
            Box::new(move |g, needs| {
                let gz = g.clone().insert_axis(Axis(2));
                // dw_k = g·comp_k (straight-through in sample mode, exact in mean mode)
                let dlogits = needs[0].then(|| {
                    let dw = &gz * &comp;
                    let mut out = dw.clone();
                    let ax = Axis(2);
                    for (mut o, (dwl, wl)) in out
                        .lanes_mut(ax)
                        .into_iter()
                        .zip(dw.lanes(ax).into_iter().zip(w.lanes(ax)))
                    {
                        let dot: T = dwl.iter().zip(wl.iter()).map(|(&a, &b)| a * b).sum();
                        Zip::from(&mut o).and(&dwl).and(&wl).for_each(|o, &a, &w| *o = w * (a - dot));
                    }
                    out
                });
                let dcomp = &gz * &sel;
                let dmu = needs[1].then(|| dcomp.clone());
                let dlv = needs[2].then(|| match &eps {
                    None => ArrayD::zeros(dcomp.raw_dim()),
                    Some(e) => {
                        let mut d = dcomp.clone();
                        Zip::from(&mut d)
                            .and(&*v)
                            .and(e)
                            .for_each(|d, &lv, &e| *d *= half * (half * lv).exp() * e);
                        d
                    }
                });
                vec![dlogits, dmu, dlv]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;
    use ndarray::arr1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bce_reference_values() {
        let tape = Tape::<f64>::new();
        let p = tape.var(arr1(&[0.5, 0.5]).into_dyn());
        assert!((p.bce(&[1.0, 0.0]).scalar() - std::f64::consts::LN_2).abs() < 1e-12);
        let p = tape.var(arr1(&[1.0]).into_dyn());
        let l = p.bce(&[1.0]).scalar();
        assert!(l >= 0.0 && l < 1e-6);
    }

    #[test]
    fn kld_zero_at_prior_and_half_mu_squared() {
        let tape = Tape::<f64>::new();
        let z = tape.var(ArrayD::zeros(IxDyn(&[2, 3, 4])));
        assert!(z.kld_mixture(z, z).unwrap().scalar().abs() < 1e-12);
        let l = tape.var(ArrayD::zeros(IxDyn(&[1, 5, 1])));
        let mu = tape.var(ArrayD::ones(IxDyn(&[1, 5, 1])));
        let lv = tape.var(ArrayD::zeros(IxDyn(&[1, 5, 1])));
        assert!((l.kld_mixture(mu, lv).unwrap().scalar() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn kld_is_nonnegative_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let tape = Tape::<f64>::new();
            let mut draw = |s: f64| ArrayD::from_shape_fn(IxDyn(&[1, 2, 3]), |_| rng.random_range(-s..s));
            let l = tape.var(draw(4.0));
            let mu = tape.var(draw(2.0));
            let lv = tape.var(draw(3.0));
            assert!(l.kld_mixture(mu, lv).unwrap().scalar() >= -1e-12);
        }
    }

    #[test]
    fn sample_mode_picks_selected_component() {
        let tape = Tape::<f64>::new();
        let l = tape.var(ArrayD::zeros(IxDyn(&[1, 2, 3])));
        let mu = tape.var(ArrayD::from_shape_vec(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let lv = tape.var(ArrayD::zeros(IxDyn(&[1, 2, 3])));
        let mode = LatentMode::Sample {
            choice: vec![2, 0],
            eps: ArrayD::zeros(IxDyn(&[1, 2, 3])),
        };
        let z = l.mixture_latent(mu, lv, &mode).unwrap().value();
        assert_eq!(z.as_slice().unwrap(), &[3.0, 4.0]);
        let z = l.mixture_latent(mu, lv, &LatentMode::Mean).unwrap().value();
        assert!((z[[0, 0]] - 2.0).abs() < 1e-12 && (z[[0, 1]] - 5.0).abs() < 1e-12);
    }
}
