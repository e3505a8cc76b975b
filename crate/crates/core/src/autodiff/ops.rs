//! Elementwise, reduction, reshaping and dense kernels.

use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn, Zip};
use rand::Rng;

use super::{Real, Var};

pub(crate) fn view2<T: Real>(a: &ArrayD<T>, rows: usize, cols: usize) -> ArrayView2<'_, T> {
    a.view()
        .into_shape_with_order((rows, cols))
        .expect("standard layout with matching element count")
}

pub(crate) fn into_dyn2<T: Real>(a: Array2<T>, shape: &[usize]) -> ArrayD<T> {
    let a = if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    };
    a.into_shape_with_order(IxDyn(shape))
        .expect("element count preserved")
}

fn assert_same<T: Real>(op: &str, a: &Var<'_, T>, b: &Var<'_, T>) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: operand shapes must match ({:?} vs {:?})",
        a.shape(),
        b.shape()
    );
}

impl<'t, T: Real> Var<'t, T> {
    pub fn add(self, other: Var<'t, T>) -> Var<'t, T> {
        assert_same("add", &self, &other);
        let value = &*self.value() + &*other.value();
        self.tape.push_op(
            value,
            &[self, other],
            Box::new(|g, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| g.clone()),
                ]
            }),
        )
    }

    pub fn sub(self, other: Var<'t, T>) -> Var<'t, T> {
        assert_same("sub", &self, &other);
        let value = &*self.value() - &*other.value();
        self.tape.push_op(
            value,
            &[self, other],
            Box::new(|g, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.mapv(|v| -v))]),
        )
    }

    pub fn mul(self, other: Var<'t, T>) -> Var<'t, T> {
        assert_same("mul", &self, &other);
        let a = self.value();
        let b = other.value();
        let value = &*a * &*b;
        self.tape.push_op(
            value,
            &[self, other],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g * &*b),
                    needs[1].then(|| g * &*a),
                ]
            }),
        )
    }

    pub fn scale(self, factor: f64) -> Var<'t, T> {
        let c = T::of(factor);
        let value = self.value().mapv(|v| v * c);
        self.tape
            .push_op(value, &[self], Box::new(move |g, _| vec![Some(g.mapv(|v| v * c))]))
    }

    pub fn relu(self) -> Var<'t, T> {
        let x = self.value();
        let value = x.mapv(|v| if v > T::zero() || v.is_nan() { v } else { T::zero() });
        self.tape.push_op(
            value,
            &[self],
            Box::new(move |g, _| {
                let mut d = g.clone();
                Zip::from(&mut d).and(&*x).for_each(|d, &x| {
                    if x <= T::zero() {
                        *d = T::zero();
                    }
                });
                vec![Some(d)]
            }),
        )
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let value = self.value().mapv(sigmoid);
        let y = value.clone();
        self.tape.push_op(
            value,
            &[self],
            Box::new(move |g, _| {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&y)
                    .for_each(|d, &y| *d *= y * (T::one() - y));
                vec![Some(d)]
            }),
        )
    }

    pub fn tanh(self) -> Var<'t, T> {
        let value = self.value().mapv(|v| v.tanh());
        let y = value.clone();
        self.tape.push_op(
            value,
            &[self],
            Box::new(move |g, _| {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&y)
                    .for_each(|d, &y| *d *= T::one() - y * y);
                vec![Some(d)]
            }),
        )
    }

    /// Sum of all elements, as a 0-d array.
    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let value = ArrayD::from_elem(IxDyn(&[]), x.sum());
        self.tape.push_op(
            value,
            &[self],
            Box::new(move |g, _| {
                let gv = g.iter().copied().next().unwrap_or_else(T::zero);
                vec![Some(ArrayD::from_elem(IxDyn(&shape), gv))]
            }),
        )
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Weighted sum `Σ x·w` with a constant weight array.
    pub fn dot_const(self, weights: &ArrayD<T>) -> Var<'t, T> {
        let w = self.tape.constant(weights.clone());
        self.mul(w).sum()
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        let value = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("reshape {:?} -> {:?}", old, shape));
        self.tape.push_op(
            value,
            &[self],
            Box::new(move |g, _| {
                vec![Some(
                    g.as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(&old))
                        .expect("reshape back"),
                )]
            }),
        )
    }

    /// Concatenation along the last axis.
    pub fn concat_last(self, other: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        let ax = Axis(a.ndim() - 1);
        assert_eq!(a.ndim(), b.ndim(), "concat_last rank mismatch");
        let split = a.shape()[ax.0];
        let value = ndarray::concatenate(ax, &[a.view(), b.view()])
            .expect("concat_last leading extents match")
            .as_standard_layout()
            .into_owned();
        self.tape.push_op(
            value,
            &[self, other],
            Box::new(move |g, needs| {
                let (ga, gb) = g.view().split_at(ax, split);
                vec![
                    needs[0].then(|| ga.as_standard_layout().into_owned()),
                    needs[1].then(|| gb.as_standard_layout().into_owned()),
                ]
            }),
        )
    }

    /// Affine map over the last axis: `x[..., Din] · w[Din, Dout] + b[Dout]`.
    pub fn dense(self, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Var<'t, T> {
        let x = self.value();
        let wv = w.value();
        let din = *x.shape().last().expect("dense input rank >= 1");
        assert_eq!(wv.ndim(), 2, "dense weight must be 2-d");
        assert_eq!(wv.shape()[0], din, "dense: input width {din} vs weight {:?}", wv.shape());
        let dout = wv.shape()[1];
        let rows = x.len() / din.max(1);
        let mut y = view2(&x, rows, din).dot(&view2(&wv, din, dout));
        if let Some(b) = b {
            let bv = b.value();
            assert_eq!(bv.shape(), &[dout], "dense bias shape");
            let bv1 = bv.view().into_shape_with_order(dout).expect("1-d bias");
            y += &bv1;
        }
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().expect("rank >= 1") = dout;
        let value = into_dyn2(y, &out_shape);
        let in_shape = x.shape().to_vec();
        let mut parents = vec![self, w];
        parents.extend(b);
        self.tape.push_op(
            value,
            &parents,
            Box::new(move |g, needs| {
                let g2 = view2(g, rows, dout);
                let dx = needs[0].then(|| into_dyn2(g2.dot(&view2(&wv, din, dout).t()), &in_shape));
                let dw = needs[1].then(|| view2(&x, rows, din).t().dot(&g2).into_dyn());
                let mut out = vec![dx, dw];
                if needs.len() > 2 {
                    out.push(needs[2].then(|| g2.sum_axis(Axis(0)).into_dyn()));
                }
                out
            }),
        )
    }

    /// Mean over axis 1 of a `B×S×D` tensor.
    pub fn global_avg_pool(self) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(x.ndim(), 3, "global_avg_pool expects B×S×D");
        let shape = x.shape().to_vec();
        let s = shape[1];
        let value = x
            .mean_axis(Axis(1))
            .expect("S >= 1")
            .as_standard_layout()
            .into_owned();
        self.tape.push_op(
            value,
            &[self],
            Box::new(move |g, _| {
                let inv = T::one() / T::of(s as f64);
                let scaled = g.mapv(|v| v * inv).insert_axis(Axis(1));
                let full = scaled
                    .broadcast(IxDyn(&shape))
                    .expect("broadcast over time")
                    .to_owned();
                vec![Some(full)]
            }),
        )
    }

    /// Repeats a `B×D` tensor along a new time axis: `B×steps×D`.
    pub fn repeat_time(self, steps: usize) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(x.ndim(), 2, "repeat_time expects B×D");
        let (b, d) = (x.shape()[0], x.shape()[1]);
        let value = x
            .view()
            .insert_axis(Axis(1))
            .broadcast(IxDyn(&[b, steps, d]))
            .expect("broadcast over time")
            .to_owned();
        self.tape.push_op(
            value,
            &[self],
            Box::new(move |g, _| vec![Some(g.sum_axis(Axis(1)))]),
        )
    }

    /// Adds a constant `S×D` table to every sample of a `B×S×D` tensor.
    pub fn add_table(self, table: &Array2<T>) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(x.ndim(), 3, "add_table expects B×S×D");
        assert_eq!(&x.shape()[1..], table.shape(), "add_table: table shape");
        let value = &*x + &table.view().insert_axis(Axis(0));
        self.tape
            .push_op(value, &[self], Box::new(|g, _| vec![Some(g.clone())]))
    }

    /// Mean squared difference against a same-shaped node.
    pub fn mse(self, target: Var<'t, T>) -> Var<'t, T> {
        let d = self.sub(target);
        d.mul(d).mean()
    }

    /// Inverted dropout; identity when `rate` is zero.
    pub fn dropout<R: Rng>(self, rate: f64, rng: &mut R) -> Var<'t, T> {
        if rate <= 0.0 {
            return self;
        }
        let keep = 1.0 - rate;
        let shape = self.shape();
        let inv = T::of(1.0 / keep);
        let mask = ArrayD::from_shape_fn(IxDyn(&shape), |_| {
            if rng.random::<f64>() < keep {
                inv
            } else {
                T::zero()
            }
        });
        let m = self.tape.constant(mask);
        self.mul(m)
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use ndarray::{arr2, array};

    #[test]
    fn gap_of_constant_sequence_is_the_constant() {
        let tape = Tape::<f64>::new();
        let x = tape.var(ndarray::Array3::from_elem((2, 5, 3), 1.5).into_dyn());
        let y = x.global_avg_pool();
        assert!(y.value().iter().all(|&v| v == 1.5));
        assert_eq!(y.shape(), vec![2, 3]);
    }

    #[test]
    fn gap_two_values() {
        let tape = Tape::<f64>::new();
        let x = tape.var(array![[[1.0], [3.0]]].into_dyn());
        let y = x.global_avg_pool();
        assert_eq!(y.value()[[0, 0]], 2.0);
        let g = tape.backward(y.sum()).unwrap();
        assert!(g.get(x).unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn dense_single_output_counts() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(arr2(&[[1.0, 2.0]]).into_dyn());
        let w = tape.var(arr2(&[[0.5], [0.25]]).into_dyn());
        let b = tape.var(ndarray::arr1(&[1.0]).into_dyn());
        let y = x.dense(w, Some(b));
        assert_eq!(y.value()[[0, 0]], 2.0);
    }

    #[test]
    fn repeat_time_sums_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.var(arr2(&[[1.0, 2.0]]).into_dyn());
        let y = x.repeat_time(3);
        assert_eq!(y.shape(), vec![1, 3, 2]);
        assert_eq!(y.value()[[0, 2, 1]], 2.0);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().as_slice().unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn concat_splits_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.var(arr2(&[[1.0, 2.0]]).into_dyn());
        let b = tape.var(arr2(&[[3.0]]).into_dyn());
        let c = a.concat_last(b);
        assert_eq!(c.shape(), vec![1, 3]);
        let w = arr2(&[[1.0, 10.0, 100.0]]).into_dyn();
        let g = tape.backward(c.dot_const(&w)).unwrap();
        assert_eq!(g.get(a).unwrap().as_slice().unwrap(), &[1.0, 10.0]);
        assert_eq!(g.get(b).unwrap().as_slice().unwrap(), &[100.0]);
    }
}
