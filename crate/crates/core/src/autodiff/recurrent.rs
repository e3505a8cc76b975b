//! Fused single-direction LSTM and GRU sequence kernels with backpropagation
//! through time.
//!
//! Gate layouts follow the common column-block convention: LSTM `[i f g o]`,
//! GRU `[z r n]` with the reset gate applied after the recurrent matmul.
//! With `reverse` set the sequence is consumed from the last step to the
//! first and each output is written back at its original time index.

use ndarray::{s, Array2, Array3, ArrayD, Axis, Zip};

use super::ops::{into_dyn2, sigmoid, view2};
use super::{shape_err, Real, Result, Var};

fn order(t: usize, reverse: bool) -> Vec<usize> {
    if reverse {
        (0..t).rev().collect()
    } else {
        (0..t).collect()
    }
}

fn check_rnn<T: Real>(
    op: &'static str,
    x: &ArrayD<T>,
    w_in: &ArrayD<T>,
    w_rec: &ArrayD<T>,
    gates: usize,
) -> Result<(usize, usize, usize, usize)> {
    if x.ndim() != 3 || w_in.ndim() != 2 || w_rec.ndim() != 2 {
        return Err(shape_err(op, format!("x {:?}, w {:?}, u {:?}", x.shape(), w_in.shape(), w_rec.shape())));
    }
    let (b, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let u = w_rec.shape()[0];
    if w_in.shape() != [c, gates * u] || w_rec.shape() != [u, gates * u] || u == 0 {
        return Err(shape_err(op, format!("x {:?}, w {:?}, u {:?}", x.shape(), w_in.shape(), w_rec.shape())));
    }
    Ok((b, t, c, u))
}

impl<'t, T: Real> Var<'t, T> {
    /// `x: B×T×C`, `w_in: C×4U`, `w_rec: U×4U`, `bias: 4U` → hidden states `B×T×U`.
    pub fn lstm(self, w_in: Var<'t, T>, w_rec: Var<'t, T>, bias: Var<'t, T>, reverse: bool) -> Result<Var<'t, T>> {
        let x = self.value();
        let wi = w_in.value();
        let wr = w_rec.value();
        let bv = bias.value();
        let (b, t, c, u) = check_rnn("lstm", &x, &wi, &wr, 4)?;
        if bv.shape() != [4 * u] {
            return Err(shape_err("lstm", format!("bias {:?}", bv.shape())));
        }
        let b1 = bv.view().into_shape_with_order(4 * u).expect("1-d");
        let xw = (view2(&x, b * t, c).dot(&view2(&wi, c, 4 * u)) + &b1)
            .into_shape_with_order((b, t, 4 * u))
            .expect("sized");
        let wr2 = view2(&wr, u, 4 * u).to_owned();
        // Per processing step caches, indexed by time.
        let mut gates = Array3::<T>::zeros((t, b, 4 * u));
        let mut cells = Array3::<T>::zeros((t, b, u));
        let mut hs = Array3::<T>::zeros((b, t, u));
        let mut h = Array2::<T>::zeros((b, u));
        let mut cst = Array2::<T>::zeros((b, u));
        for &ti in &order(t, reverse) {
            let mut z = xw.slice(s![.., ti, ..]).to_owned() + h.dot(&wr2);
            z.slice_mut(s![.., 0..2 * u]).mapv_inplace(sigmoid);
            z.slice_mut(s![.., 2 * u..3 * u]).mapv_inplace(|v| v.tanh());
            z.slice_mut(s![.., 3 * u..]).mapv_inplace(sigmoid);
            let i = z.slice(s![.., 0..u]);
            let f = z.slice(s![.., u..2 * u]);
            let g = z.slice(s![.., 2 * u..3 * u]);
            let o = z.slice(s![.., 3 * u..]);
            cst = &f * &cst + &i * &g;
            h = &o * &cst.mapv(|v| v.tanh());
            gates.slice_mut(s![ti, .., ..]).assign(&z);
            cells.slice_mut(s![ti, .., ..]).assign(&cst);
            hs.slice_mut(s![.., ti, ..]).assign(&h);
        }
        let hs_keep = hs.clone();
        Ok(self.tape.push_op(
            hs.into_dyn(),
            &[self, w_in, w_rec, bias],
            Box::new(move |gy, needs| {
                let gy3 = gy.view().into_dimensionality::<ndarray::Ix3>().expect("rank 3");
                let mut dxw = Array3::<T>::zeros((b, t, 4 * u));
                let mut dwr = Array2::<T>::zeros((u, 4 * u));
                let mut dh_next = Array2::<T>::zeros((b, u));
                let mut dc_next = Array2::<T>::zeros((b, u));
                let steps = order(t, reverse);
                for (pos, &ti) in steps.iter().enumerate().rev() {
                    let z = gates.slice(s![ti, .., ..]);
                    let (i, f, g, o) = (
                        z.slice(s![.., 0..u]),
                        z.slice(s![.., u..2 * u]),
                        z.slice(s![.., 2 * u..3 * u]),
                        z.slice(s![.., 3 * u..]),
                    );
                    let c = cells.slice(s![ti, .., ..]);
                    let tc = c.mapv(|v| v.tanh());
                    let (h_prev, c_prev) = if pos == 0 {
                        (Array2::zeros((b, u)), Array2::zeros((b, u)))
                    } else {
                        let p = steps[pos - 1];
                        (
                            hs_keep.slice(s![.., p, ..]).to_owned(),
                            cells.slice(s![p, .., ..]).to_owned(),
                        )
                    };
                    let dh = &gy3.slice(s![.., ti, ..]) + &dh_next;
                    let mut dz = Array2::<T>::zeros((b, 4 * u));
                    let mut dc = dc_next.clone();
                    Zip::from(&mut dc)
                        .and(&dh)
                        .and(&o)
                        .and(&tc)
                        .for_each(|dc, &dh, &o, &tc| *dc += dh * o * (T::one() - tc * tc));
                    Zip::from(dz.slice_mut(s![.., 3 * u..]))
                        .and(&dh)
                        .and(&tc)
                        .and(&o)
                        .for_each(|d, &dh, &tc, &o| *d = dh * tc * o * (T::one() - o));
                    Zip::from(dz.slice_mut(s![.., 0..u]))
                        .and(&dc)
                        .and(&g)
                        .and(&i)
                        .for_each(|d, &dc, &g, &i| *d = dc * g * i * (T::one() - i));
                    Zip::from(dz.slice_mut(s![.., u..2 * u]))
                        .and(&dc)
                        .and(&c_prev)
                        .and(&f)
                        .for_each(|d, &dc, &cp, &f| *d = dc * cp * f * (T::one() - f));
                    Zip::from(dz.slice_mut(s![.., 2 * u..3 * u]))
                        .and(&dc)
                        .and(&i)
                        .and(&g)
                        .for_each(|d, &dc, &i, &g| *d = dc * i * (T::one() - g * g));
                    dc_next = &dc * &f;
                    if needs[2] {
                        dwr += &h_prev.t().dot(&dz);
                    }
                    dh_next = dz.dot(&wr2.t());
                    dxw.slice_mut(s![.., ti, ..]).assign(&dz);
                }
                let dxw2 = dxw.into_shape_with_order((b * t, 4 * u)).expect("sized");
                vec![
                    needs[0].then(|| into_dyn2(dxw2.dot(&view2(&wi, c, 4 * u).t()), &[b, t, c])),
                    needs[1].then(|| view2(&x, b * t, c).t().dot(&dxw2).into_dyn()),
                    needs[2].then(|| dwr.into_dyn()),
                    needs[3].then(|| dxw2.sum_axis(Axis(0)).into_dyn()),
                ]
            }),
        ))
    }

    /// `x: B×T×C`, `w_in: C×3U`, `w_rec: U×3U`, `b_in: 3U`, `b_rec: 3U` → `B×T×U`.
    pub fn gru(
        self,
        w_in: Var<'t, T>,
        w_rec: Var<'t, T>,
        b_in: Var<'t, T>,
        b_rec: Var<'t, T>,
        reverse: bool,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let wi = w_in.value();
        let wr = w_rec.value();
        let bi = b_in.value();
        let br = b_rec.value();
        let (b, t, c, u) = check_rnn("gru", &x, &wi, &wr, 3)?;
        if bi.shape() != [3 * u] || br.shape() != [3 * u] {
            return Err(shape_err("gru", format!("biases {:?}, {:?}", bi.shape(), br.shape())));
        }
        let bi1 = bi.view().into_shape_with_order(3 * u).expect("1-d");
        let br1 = br.view().into_shape_with_order(3 * u).expect("1-d").to_owned();
        let xw = (view2(&x, b * t, c).dot(&view2(&wi, c, 3 * u)) + &bi1)
            .into_shape_with_order((b, t, 3 * u))
            .expect("sized");
        let wr2 = view2(&wr, u, 3 * u).to_owned();
        // gates: z, r, n (activated); rec_n: recurrent n pre-activation (h·U_n + b_n).
        let mut gates = Array3::<T>::zeros((t, b, 3 * u));
        let mut rec_n = Array3::<T>::zeros((t, b, u));
        let mut hs = Array3::<T>::zeros((b, t, u));
        let mut h = Array2::<T>::zeros((b, u));
        for &ti in &order(t, reverse) {
            let hu = h.dot(&wr2) + &br1;
            let xt = xw.slice(s![.., ti, ..]);
            let mut zr = &xt.slice(s![.., 0..2 * u]) + &hu.slice(s![.., 0..2 * u]);
            zr.mapv_inplace(sigmoid);
            let r = zr.slice(s![.., u..2 * u]);
            let hn = hu.slice(s![.., 2 * u..]);
            let n = (&xt.slice(s![.., 2 * u..]) + &(&r * &hn)).mapv(|v| v.tanh());
            let z = zr.slice(s![.., 0..u]);
            let one_minus_z = z.mapv(|v| T::one() - v);
            h = &z * &h + &one_minus_z * &n;
            gates.slice_mut(s![ti, .., 0..2 * u]).assign(&zr);
            gates.slice_mut(s![ti, .., 2 * u..]).assign(&n);
            rec_n.slice_mut(s![ti, .., ..]).assign(&hn);
            hs.slice_mut(s![.., ti, ..]).assign(&h);
        }
        let hs_keep = hs.clone();
        Ok(self.tape.push_op(
            hs.into_dyn(),
            &[self, w_in, w_rec, b_in, b_rec],
            Box::new(move |gy, needs| {
                let gy3 = gy.view().into_dimensionality::<ndarray::Ix3>().expect("rank 3");
                let mut dxw = Array3::<T>::zeros((b, t, 3 * u));
                let mut dhu_all = Array3::<T>::zeros((b, t, 3 * u));
                let mut dwr = Array2::<T>::zeros((u, 3 * u));
                let mut dh_next = Array2::<T>::zeros((b, u));
                let steps = order(t, reverse);
                for (pos, &ti) in steps.iter().enumerate().rev() {
                    let gt = gates.slice(s![ti, .., ..]);
                    let (z, r, n) = (
                        gt.slice(s![.., 0..u]),
                        gt.slice(s![.., u..2 * u]),
                        gt.slice(s![.., 2 * u..]),
                    );
                    let hn = rec_n.slice(s![ti, .., ..]);
                    let h_prev = if pos == 0 {
                        Array2::zeros((b, u))
                    } else {
                        hs_keep.slice(s![.., steps[pos - 1], ..]).to_owned()
                    };
                    let dh = &gy3.slice(s![.., ti, ..]) + &dh_next;
                    let mut dx_t = Array2::<T>::zeros((b, 3 * u));
                    let mut dhu = Array2::<T>::zeros((b, 3 * u));
                    // n-gate pre-activation gradient
                    let mut dan = Array2::<T>::zeros((b, u));
                    Zip::from(&mut dan)
                        .and(&dh)
                        .and(&z)
                        .and(&n)
                        .for_each(|d, &dh, &z, &n| *d = dh * (T::one() - z) * (T::one() - n * n));
                    Zip::from(dx_t.slice_mut(s![.., 0..u]))
                        .and(&dh)
                        .and(&h_prev)
                        .and(&n)
                        .and(&z)
                        .for_each(|d, &dh, &hp, &n, &z| *d = dh * (hp - n) * z * (T::one() - z));
                    Zip::from(dx_t.slice_mut(s![.., u..2 * u]))
                        .and(&dan)
                        .and(&hn)
                        .and(&r)
                        .for_each(|d, &dan, &hn, &r| *d = dan * hn * r * (T::one() - r));
                    dx_t.slice_mut(s![.., 2 * u..]).assign(&dan);
                    dhu.slice_mut(s![.., 0..2 * u]).assign(&dx_t.slice(s![.., 0..2 * u]));
                    dhu.slice_mut(s![.., 2 * u..]).assign(&(&dan * &r));
                    if needs[2] {
                        dwr += &h_prev.t().dot(&dhu);
                    }
                    dh_next = dhu.dot(&wr2.t()) + &(&dh * &z);
                    dxw.slice_mut(s![.., ti, ..]).assign(&dx_t);
                    dhu_all.slice_mut(s![.., ti, ..]).assign(&dhu);
                }
                let dxw2 = dxw.into_shape_with_order((b * t, 3 * u)).expect("sized");
                let dhu2 = dhu_all.into_shape_with_order((b * t, 3 * u)).expect("sized");
                vec![
                    needs[0].then(|| into_dyn2(dxw2.dot(&view2(&wi, c, 3 * u).t()), &[b, t, c])),
                    needs[1].then(|| view2(&x, b * t, c).t().dot(&dxw2).into_dyn()),
                    needs[2].then(|| dwr.into_dyn()),
                    needs[3].then(|| dxw2.sum_axis(Axis(0)).into_dyn()),
                    needs[4].then(|| dhu2.sum_axis(Axis(0)).into_dyn()),
                ]
            }),
        ))
    }
}
