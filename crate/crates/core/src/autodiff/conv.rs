//! Strided 1-D convolution and its transpose over `B×T×C` tensors.
//!
//! Convolution is cross-correlation with symmetric zero padding chosen so
//! that the output length is `⌈T/s⌉`; when the total padding is odd the
//! extra zero goes on the right. The transposed kernel is the exact adjoint
//! of that map for an input of length `T·s`.

use ndarray::{Array2, ArrayD, ArrayView3, Axis};

use super::ops::{into_dyn2, view2};
use super::{shape_err, Real, Result, Var};

/// Output length and left padding for a same-padded strided window.
pub fn same_padding(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(len);
    (out, total / 2)
}

fn im2col<T: Real>(
    x: ArrayView3<'_, T>,
    kernel: usize,
    stride: usize,
    pad_left: usize,
    t_out: usize,
) -> Array2<T> {
    let (b, t_in, c) = x.dim();
    let mut cols = Array2::<T>::zeros((b * t_out, kernel * c));
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let cols_s = cols.as_slice_mut().expect("fresh array");
    let row_len = kernel * c;
    for bi in 0..b {
        for to in 0..t_out {
            let row = &mut cols_s[(bi * t_out + to) * row_len..][..row_len];
            for k in 0..kernel {
                let ti = (to * stride + k) as isize - pad_left as isize;
                if ti < 0 || ti >= t_in as isize {
                    continue;
                }
                let src = &xs[(bi * t_in + ti as usize) * c..][..c];
                row[k * c..(k + 1) * c].copy_from_slice(src);
            }
        }
    }
    cols
}

fn col2im<T: Real>(
    cols: &Array2<T>,
    b: usize,
    t_len: usize,
    c: usize,
    kernel: usize,
    stride: usize,
    pad_left: usize,
    t_out: usize,
) -> ArrayD<T> {
    let mut out = vec![T::zero(); b * t_len * c];
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let row_len = kernel * c;
    for bi in 0..b {
        for to in 0..t_out {
            let row = &cs[(bi * t_out + to) * row_len..][..row_len];
            for k in 0..kernel {
                let ti = (to * stride + k) as isize - pad_left as isize;
                if ti < 0 || ti >= t_len as isize {
                    continue;
                }
                let dst = &mut out[(bi * t_len + ti as usize) * c..][..c];
                for (d, &s) in dst.iter_mut().zip(&row[k * c..(k + 1) * c]) {
                    *d += s;
                }
            }
        }
    }
    ArrayD::from_shape_vec(vec![b, t_len, c], out).expect("sized buffer")
}

fn as3<T: Real>(a: &ArrayD<T>) -> ArrayView3<'_, T> {
    a.view()
        .into_dimensionality()
        .expect("rank-3 tensor")
}

impl<'t, T: Real> Var<'t, T> {
    /// `x: B×T×Cin`, `kernel: K×Cin×Cout`, `bias: Cout` → `B×⌈T/s⌉×Cout`.
    pub fn conv1d(self, kernel: Var<'t, T>, bias: Option<Var<'t, T>>, stride: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = kernel.value();
        if x.ndim() != 3 || w.ndim() != 3 {
            return Err(shape_err("conv1d", format!("x {:?}, kernel {:?}", x.shape(), w.shape())));
        }
        let (b, t_in, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (k, wcin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if wcin != cin || k == 0 || stride == 0 || t_in == 0 {
            return Err(shape_err(
                "conv1d",
                format!("x {:?}, kernel {:?}, stride {stride}", x.shape(), w.shape()),
            ));
        }
        if let Some(bv) = bias.map(|b| b.value()) {
            if bv.shape() != [cout] {
                return Err(shape_err("conv1d", format!("bias {:?} vs Cout {cout}", bv.shape())));
            }
        }
        let (t_out, pad) = same_padding(t_in, k, stride);
        let cols = im2col(as3(&x), k, stride, pad, t_out);
        let w2 = view2(&w, k * cin, cout);
        let mut y = cols.dot(&w2);
        if let Some(bv) = bias.map(|b| b.value()) {
            y += &bv.view().into_shape_with_order(cout).expect("1-d bias");
        }
        let value = into_dyn2(y, &[b, t_out, cout]);
        let mut parents = vec![self, kernel];
        parents.extend(bias);
        Ok(self.tape.push_op(
            value,
            &parents,
            Box::new(move |g, needs| {
                let g2 = view2(g, b * t_out, cout);
                let dx = needs[0].then(|| {
                    let dcols = g2.dot(&view2(&w, k * cin, cout).t());
                    col2im(&dcols, b, t_in, cin, k, stride, pad, t_out)
                });
                let dw = needs[1].then(|| into_dyn2(cols.t().dot(&g2), &[k, cin, cout]));
                let mut out = vec![dx, dw];
                if needs.len() > 2 {
                    out.push(needs[2].then(|| g2.sum_axis(Axis(0)).into_dyn()));
                }
                out
            }),
        ))
    }

    /// `x: B×T×Cin`, `kernel: K×Cout×Cin`, `bias: Cout` → `B×(T·s)×Cout`.
    ///
    /// Forward equals the input-gradient of [`Var::conv1d`] with the same
    /// kernel (read as `K×Cout×Cin`), plus bias.
    pub fn conv1d_transpose(
        self,
        kernel: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = kernel.value();
        if x.ndim() != 3 || w.ndim() != 3 {
            return Err(shape_err(
                "conv1d_transpose",
                format!("x {:?}, kernel {:?}", x.shape(), w.shape()),
            ));
        }
        let (b, t_in, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (k, cout, wcin) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if wcin != cin || k == 0 || stride == 0 || t_in == 0 {
            return Err(shape_err(
                "conv1d_transpose",
                format!("x {:?}, kernel {:?}, stride {stride}", x.shape(), w.shape()),
            ));
        }
        if let Some(bv) = bias.map(|b| b.value()) {
            if bv.shape() != [cout] {
                return Err(shape_err(
                    "conv1d_transpose",
                    format!("bias {:?} vs Cout {cout}", bv.shape()),
                ));
            }
        }
        let t_out = t_in * stride;
        let (check, pad) = same_padding(t_out, k, stride);
        debug_assert_eq!(check, t_in);
        let x2 = view2(&x, b * t_in, cin);
        let w2 = view2(&w, k * cout, cin);
        let cols = x2.dot(&w2.t());
        let mut value = col2im(&cols, b, t_out, cout, k, stride, pad, t_in);
        if let Some(bv) = bias.map(|b| b.value()) {
            value += &bv.view().into_shape_with_order(cout).expect("1-d bias");
        }
        let mut parents = vec![self, kernel];
        parents.extend(bias);
        Ok(self.tape.push_op(
            value,
            &parents,
            Box::new(move |g, needs| {
                let dcols = im2col(as3(g), k, stride, pad, t_in);
                let dx = needs[0]
                    .then(|| into_dyn2(dcols.dot(&view2(&w, k * cout, cin)), &[b, t_in, cin]));
                let dw = needs[1].then(|| {
                    into_dyn2(dcols.t().dot(&view2(&x, b * t_in, cin)), &[k, cout, cin])
                });
                let mut out = vec![dx, dw];
                if needs.len() > 2 {
                    out.push(needs[2].then(|| {
                        view2(g, b * t_out, cout).sum_axis(Axis(0)).into_dyn()
                    }));
                }
                out
            }),
        ))
    }
}
