//! Softmax, layer normalization and fused multi-head scaled dot-product attention.

use ndarray::{s, Array2, Array4, ArrayView2, Axis, Zip};

use super::ops::{into_dyn2, view2};
use super::{shape_err, Real, Result, Var};

/// Output of [`Var::multi_head_attention`].
pub struct AttentionOutput<'t, T: Real> {
    /// `B×S×D` context vectors, heads concatenated along the feature axis.
    pub context: Var<'t, T>,
    /// `B×H×S×S` softmax weights; row = query, column = key.
    pub weights: Array4<T>,
}

fn softmax_rows<T: Real>(scores: &mut Array2<T>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// `dS = A ⊙ (dA − rowsum(dA ⊙ A))`.
fn softmax_rows_backward<T: Real>(a: ArrayView2<'_, T>, da: &Array2<T>) -> Array2<T> {
    let mut ds = da.clone();
    for (mut drow, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
        let dot: T = drow.iter().zip(arow.iter()).map(|(&d, &p)| d * p).sum();
        Zip::from(&mut drow).and(&arow).for_each(|d, &p| *d = p * (*d - dot));
    }
    ds
}

impl<'t, T: Real> Var<'t, T> {
    /// Softmax over the last axis.
    pub fn softmax_last(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = *shape.last().expect("rank >= 1");
        let rows = x.len() / n.max(1);
        let mut y = view2(&x, rows, n).to_owned();
        softmax_rows(&mut y);
        let a = y.clone();
        let value = into_dyn2(y, &shape);
        self.tape.push_op(
            value,
            &[self],
            Box::new(move |g, _| {
                let g2 = view2(g, rows, n).to_owned();
                vec![Some(into_dyn2(softmax_rows_backward(a.view(), &g2), &shape))]
            }),
        )
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>, eps: f64) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let d = *shape.last().expect("rank >= 1");
        let rows = x.len() / d.max(1);
        let gv = gain.value();
        let bv = bias.value();
        assert_eq!(gv.shape(), &[d], "layer_norm gain shape");
        assert_eq!(bv.shape(), &[d], "layer_norm bias shape");
        let eps = T::of(eps);
        let dt = T::of(d as f64);
        let x2 = view2(&x, rows, d);
        let mut xhat = Array2::<T>::zeros((rows, d));
        let mut inv_std = vec![T::zero(); rows];
        for (r, (xr, mut hr)) in x2.rows().into_iter().zip(xhat.rows_mut()).enumerate() {
            let mean = xr.sum() / dt;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            Zip::from(&mut hr).and(&xr).for_each(|h, &v| *h = (v - mean) * is);
        }
        let g1 = gv.view().into_shape_with_order(d).expect("1-d");
        let b1 = bv.view().into_shape_with_order(d).expect("1-d");
        let y = &xhat * &g1 + &b1;
        let value = into_dyn2(y, &shape);
        self.tape.push_op(
            value,
            &[self, gain, bias],
            Box::new(move |g, needs| {
                let g2 = view2(g, rows, d);
                let dgain = needs[1].then(|| (&g2 * &xhat).sum_axis(Axis(0)).into_dyn());
                let dbias = needs[2].then(|| g2.sum_axis(Axis(0)).into_dyn());
                let dx = needs[0].then(|| {
                    let gain1 = gv.view().into_shape_with_order(d).expect("1-d");
                    let dxhat = &g2 * &gain1;
                    let mut dx = Array2::<T>::zeros((rows, d));
                    for r in 0..rows {
                        let dh = dxhat.row(r);
                        let h = xhat.row(r);
                        let mean_dh = dh.sum() / dt;
                        let mean_dh_h = dh.iter().zip(h.iter()).map(|(&a, &b)| a * b).sum::<T>() / dt;
                        let is = inv_std[r];
                        Zip::from(dx.row_mut(r))
                            .and(&dh)
                            .and(&h)
                            .for_each(|o, &a, &b| *o = is * (a - mean_dh - b * mean_dh_h));
                    }
                    into_dyn2(dx, &shape)
                });
                vec![dx, dgain, dbias]
            }),
        )
    }

    /// Scaled dot-product attention over `heads` equal slices of the
    /// feature axis. `self` is the query projection; all inputs `B×S×D`.
    pub fn multi_head_attention(
        self,
        key: Var<'t, T>,
        value: Var<'t, T>,
        heads: usize,
    ) -> Result<AttentionOutput<'t, T>> {
        let q = self.value();
        let k = key.value();
        let v = value.value();
        if q.ndim() != 3 || q.shape() != k.shape() || q.shape() != v.shape() {
            return Err(shape_err(
                "multi_head_attention",
                format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
            ));
        }
        let (b, seq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        if heads == 0 || d % heads != 0 {
            return Err(shape_err(
                "multi_head_attention",
                format!("model width {d} not divisible by {heads} heads"),
            ));
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let q3 = q.view().into_dimensionality::<ndarray::Ix3>().expect("rank 3");
        let k3 = k.view().into_dimensionality::<ndarray::Ix3>().expect("rank 3");
        let v3 = v.view().into_dimensionality::<ndarray::Ix3>().expect("rank 3");
        let mut weights = Array4::<T>::zeros((b, heads, seq, seq));
        let mut ctx = ndarray::Array3::<T>::zeros((b, seq, d));
        for bi in 0..b {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = q3.slice(s![bi, .., cols.clone()]);
                let kh = k3.slice(s![bi, .., cols.clone()]);
                let vh = v3.slice(s![bi, .., cols.clone()]);
                let mut sc = qh.dot(&kh.t());
                sc.mapv_inplace(|x| x * scale);
                softmax_rows(&mut sc);
                ctx.slice_mut(s![bi, .., cols]).assign(&sc.dot(&vh));
                weights.slice_mut(s![bi, h, .., ..]).assign(&sc);
            }
        }
        let probs = weights.clone();
        let node = self.tape.push_op(
            ctx.into_dyn(),
            &[self, key, value],
            Box::new(move |g, needs| {
                let g3 = g.view().into_dimensionality::<ndarray::Ix3>().expect("rank 3");
                let q3 = q.view().into_dimensionality::<ndarray::Ix3>().expect("rank 3");
                let k3 = k.view().into_dimensionality::<ndarray::Ix3>().expect("rank 3");
                let v3 = v.view().into_dimensionality::<ndarray::Ix3>().expect("rank 3");
                let mut dq = ndarray::Array3::<T>::zeros((b, seq, d));
                let mut dk = ndarray::Array3::<T>::zeros((b, seq, d));
                let mut dv = ndarray::Array3::<T>::zeros((b, seq, d));
                for bi in 0..b {
                    for h in 0..heads {
                        let cols = h * dh..(h + 1) * dh;
                        let a = probs.slice(s![bi, h, .., ..]);
                        let go = g3.slice(s![bi, .., cols.clone()]);
                        let qh = q3.slice(s![bi, .., cols.clone()]);
                        let kh = k3.slice(s![bi, .., cols.clone()]);
                        let vh = v3.slice(s![bi, .., cols.clone()]);
                        if needs[2] {
                            dv.slice_mut(s![bi, .., cols.clone()]).assign(&a.t().dot(&go));
                        }
                        let da = go.dot(&vh.t());
                        let mut ds = softmax_rows_backward(a, &da);
                        ds.mapv_inplace(|x| x * scale);
                        if needs[0] {
                            dq.slice_mut(s![bi, .., cols.clone()]).assign(&ds.dot(&kh));
                        }
                        if needs[1] {
                            dk.slice_mut(s![bi, .., cols]).assign(&ds.t().dot(&qh));
                        }
                    }
                }
                vec![
                    needs[0].then(|| dq.into_dyn()),
                    needs[1].then(|| dk.into_dyn()),
                    needs[2].then(|| dv.into_dyn()),
                ]
            }),
        );
        Ok(AttentionOutput {
            context: node,
            weights,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use ndarray::{arr1, Array3, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::<f64>::new();
        let x = tape.var(random(&[3, 4, 7], 1).mapv(|v| v * 20.0));
        let y = x.softmax_last().value();
        for row in y.to_shape((12, 7)).unwrap().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn layer_norm_standardizes_before_affine() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(random(&[5, 16], 2).mapv(|v| 3.0 * v + 1.0));
        let g = tape.var(arr1(&[1.0; 16]).into_dyn());
        let b = tape.var(arr1(&[0.0; 16]).into_dyn());
        let y = x.layer_norm(g, b, 1e-5).value();
        for row in y.to_shape((5, 16)).unwrap().rows() {
            let mean = row.sum() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-5);
            assert!((var - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn equal_keys_give_uniform_attention() {
        let tape = Tape::<f64>::new();
        let q = tape.var(random(&[2, 5, 4], 3));
        let k = tape.var(Array3::from_elem((2, 5, 4), 0.3).into_dyn());
        let v = tape.var(random(&[2, 5, 4], 4));
        let out = q.multi_head_attention(k, v, 2).unwrap();
        assert!(out.weights.iter().all(|&w| (w - 0.2).abs() < 1e-12));
    }

    #[test]
    fn indivisible_width_is_rejected() {
        let tape = Tape::<f64>::new();
        let q = tape.var(random(&[1, 3, 6], 5));
        assert!(q.multi_head_attention(q, q, 4).is_err());
    }
}
