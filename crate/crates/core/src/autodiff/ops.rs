//! Differentiable operations recorded on the tape.
//!
//! Every method computes its forward value through the kernels in
//! [`crate::kernels`] and, when an input is tracked, registers a closure
//! that maps the upstream gradient to input-gradient contributions.

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{BackFn, Tape, Var};

impl<T: Scalar> Tape<T> {
    // ── elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "add: lhs {:?} vs rhs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_vec(av.shape().to_vec(), data)?;
        let (na, nb) = (self.needs(a), self.needs(b));
        let n = av.numel();
        let back: Option<BackFn<T>> = if na || nb {
            Some(Box::new(move |up, store| {
                if na {
                    let s = store.slot(a, n);
                    for (g, &u) in s.iter_mut().zip(up) {
                        *g = *g + u;
                    }
                }
                if nb {
                    let s = store.slot(b, n);
                    for (g, &u) in s.iter_mut().zip(up) {
                        *g = *g + u;
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(out, na || nb, back))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "mul: lhs {:?} vs rhs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(av.shape().to_vec(), data)?;
        let (na, nb) = (self.needs(a), self.needs(b));
        let n = av.numel();
        let back: Option<BackFn<T>> = if na || nb {
            Some(Box::new(move |up, store| {
                if na {
                    let s = store.slot(a, n);
                    for i in 0..n {
                        s[i] = s[i] + up[i] * bv.data()[i];
                    }
                }
                if nb {
                    let s = store.slot(b, n);
                    for i in 0..n {
                        s[i] = s[i] + up[i] * av.data()[i];
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(out, na || nb, back))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let av = self.value(a).clone();
        let out = av.map(|x| x * c);
        let na = self.needs(a);
        let n = av.numel();
        let back: Option<BackFn<T>> = na.then(|| {
            Box::new(move |up: &[T], store: &mut super::GradStore<T>| {
                let s = store.slot(a, n);
                for i in 0..n {
                    s[i] = s[i] + up[i] * c;
                }
            }) as BackFn<T>
        });
        self.push(out, na, back)
    }

    /// Multiply a tensor by a one-element tracked scalar.
    pub fn scale_var(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).clone();
        if sv.numel() != 1 {
            return Err(Error::shape(format!(
                "scale_var: scale must be one element, got {:?}",
                sv.shape()
            )));
        }
        let av = self.value(a).clone();
        let c = sv.data()[0];
        let out = av.map(|x| x * c);
        let (na, ns) = (self.needs(a), self.needs(s));
        let n = av.numel();
        let back: Option<BackFn<T>> = (na || ns).then(|| {
            Box::new(move |up: &[T], store: &mut super::GradStore<T>| {
                if na {
                    let slot = store.slot(a, n);
                    for i in 0..n {
                        slot[i] = slot[i] + up[i] * c;
                    }
                }
                if ns {
                    let mut acc = T::zero();
                    for i in 0..n {
                        acc = acc + up[i] * av.data()[i];
                    }
                    let slot = store.slot(s, 1);
                    slot[0] = slot[0] + acc;
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, na || ns, back))
    }

    /// Add a one-element tracked scalar to every element.
    pub fn add_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).clone();
        if sv.numel() != 1 {
            return Err(Error::shape(format!(
                "add_scalar_var: addend must be one element, got {:?}",
                sv.shape()
            )));
        }
        let av = self.value(a).clone();
        let c = sv.data()[0];
        let out = av.map(|x| x + c);
        let (na, ns) = (self.needs(a), self.needs(s));
        let n = av.numel();
        let back: Option<BackFn<T>> = (na || ns).then(|| {
            Box::new(move |up: &[T], store: &mut super::GradStore<T>| {
                if na {
                    let slot = store.slot(a, n);
                    for i in 0..n {
                        slot[i] = slot[i] + up[i];
                    }
                }
                if ns {
                    let mut acc = T::zero();
                    for &u in up {
                        acc = acc + u;
                    }
                    let slot = store.slot(s, 1);
                    slot[0] = slot[0] + acc;
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, na || ns, back))
    }

    /// Elementwise absolute value; subgradient 0 at the origin.
    pub fn abs(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let out = av.map(|x| x.abs());
        let na = self.needs(a);
        let n = av.numel();
        let back: Option<BackFn<T>> = na.then(|| {
            Box::new(move |up: &[T], store: &mut super::GradStore<T>| {
                let s = store.slot(a, n);
                for i in 0..n {
                    let x = av.data()[i];
                    let sign = if x > T::zero() {
                        T::one()
                    } else if x < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    s[i] = s[i] + up[i] * sign;
                }
            }) as BackFn<T>
        });
        self.push(out, na, back)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let out = av.map(kernels::gelu);
        let na = self.needs(a);
        let n = av.numel();
        let back: Option<BackFn<T>> = na.then(|| {
            Box::new(move |up: &[T], store: &mut super::GradStore<T>| {
                let s = store.slot(a, n);
                for i in 0..n {
                    s[i] = s[i] + up[i] * kernels::gelu_deriv(av.data()[i]);
                }
            }) as BackFn<T>
        });
        self.push(out, na, back)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let mut acc = T::zero();
        for &v in av.data() {
            acc = acc + v;
        }
        let out = Tensor::scalar(acc);
        let na = self.needs(a);
        let n = av.numel();
        let back: Option<BackFn<T>> = na.then(|| {
            Box::new(move |up: &[T], store: &mut super::GradStore<T>| {
                let u = up[0];
                let s = store.slot(a, n);
                for g in s.iter_mut() {
                    *g = *g + u;
                }
            }) as BackFn<T>
        });
        self.push(out, na, back)
    }

    // ── shape & data movement ────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let av = self.value(a).clone();
        let out = av.reshaped(shape)?;
        let na = self.needs(a);
        let n = av.numel();
        let back: Option<BackFn<T>> = na.then(|| {
            Box::new(move |up: &[T], store: &mut super::GradStore<T>| {
                let s = store.slot(a, n);
                for i in 0..n {
                    s[i] = s[i] + up[i];
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, na, back))
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a).clone();
        if av.rank() != 2 {
            return Err(Error::shape(format!(
                "transpose2d expects rank 2, got {:?}",
                av.shape()
            )));
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = av.data()[i * n + j];
            }
        }
        let out = Tensor::from_vec(vec![n, m], data)?;
        let na = self.needs(a);
        let back: Option<BackFn<T>> = na.then(|| {
            Box::new(move |up: &[T], store: &mut super::GradStore<T>| {
                let s = store.slot(a, m * n);
                for j in 0..n {
                    for i in 0..m {
                        s[i * n + j] = s[i * n + j] + up[j * m + i];
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, na, back))
    }

    /// Reorder the leading dimension: out[r] = in[perm[r]].
    pub fn permute_rows(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let av = self.value(a).clone();
        let rows = av.shape()[0];
        if perm.len() != rows {
            return Err(Error::shape(format!(
                "permute_rows: {} indices for {} rows",
                perm.len(),
                rows
            )));
        }
        let rl = av.numel() / rows;
        let mut data = vec![T::zero(); av.numel()];
        for (r, &src) in perm.iter().enumerate() {
            debug_assert!(src < rows);
            data[r * rl..(r + 1) * rl].copy_from_slice(&av.data()[src * rl..(src + 1) * rl]);
        }
        let out = Tensor::from_vec(av.shape().to_vec(), data)?;
        let na = self.needs(a);
        let numel = av.numel();
        let perm_owned = perm.to_vec();
        let back: Option<BackFn<T>> = na.then(|| {
            Box::new(move |up: &[T], store: &mut super::GradStore<T>| {
                let s = store.slot(a, numel);
                for (r, &src) in perm_owned.iter().enumerate() {
                    for i in 0..rl {
                        s[src * rl + i] = s[src * rl + i] + up[r * rl + i];
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, na, back))
    }

    /// Columns [start, start+len) of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a).clone();
        if av.rank() != 2 {
            return Err(Error::shape(format!(
                "slice_cols expects rank 2, got {:?}",
                av.shape()
            )));
        }
        let (rows, cols) = (av.shape()[0], av.shape()[1]);
        if start + len > cols {
            return Err(Error::shape(format!(
                "slice_cols: columns [{start}, {}) out of 0..{cols}",
                start + len
            )));
        }
        let mut data = vec![T::zero(); rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&av.data()[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::from_vec(vec![rows, len], data)?;
        let na = self.needs(a);
        let back: Option<BackFn<T>> = na.then(|| {
            Box::new(move |up: &[T], store: &mut super::GradStore<T>| {
                let s = store.slot(a, rows * cols);
                for r in 0..rows {
                    for i in 0..len {
                        s[r * cols + start + i] = s[r * cols + start + i] + up[r * len + i];
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, na, back))
    }

    /// Rows [start, start+len) of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a).clone();
        if av.rank() != 2 {
            return Err(Error::shape(format!(
                "slice_rows expects rank 2, got {:?}",
                av.shape()
            )));
        }
        let (rows, cols) = (av.shape()[0], av.shape()[1]);
        if start + len > rows {
            return Err(Error::shape(format!(
                "slice_rows: rows [{start}, {}) out of 0..{rows}",
                start + len
            )));
        }
        let data = av.data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::from_vec(vec![len, cols], data)?;
        let na = self.needs(a);
        let back: Option<BackFn<T>> = na.then(|| {
            Box::new(move |up: &[T], store: &mut super::GradStore<T>| {
                let s = store.slot(a, rows * cols);
                for i in 0..len * cols {
                    s[start * cols + i] = s[start * cols + i] + up[i];
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, na, back))
    }

    /// Concatenate rank-2 tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::usage("concat_cols needs at least one input"));
        }
        let rows = self.value(parts[0]).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.shape()[0] != rows {
                return Err(Error::shape(format!(
                    "concat_cols: part {:?} incompatible with {} rows",
                    v.shape(),
                    rows
                )));
            }
            widths.push(v.shape()[1]);
            total += v.shape()[1];
        }
        let mut data = vec![T::zero(); rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for r in 0..rows {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&pv.data()[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let out = Tensor::from_vec(vec![rows, total], data)?;
        let needs: Vec<bool> = parts.iter().map(|&p| self.needs(p)).collect();
        let any = needs.iter().any(|&b| b);
        let parts_owned = parts.to_vec();
        let back: Option<BackFn<T>> = any.then(|| {
            Box::new(move |up: &[T], store: &mut super::GradStore<T>| {
                let mut off = 0;
                for ((&p, &w), &ng) in parts_owned.iter().zip(&widths).zip(&needs) {
                    if ng {
                        let s = store.slot(p, rows * w);
                        for r in 0..rows {
                            for i in 0..w {
                                s[r * w + i] = s[r * w + i] + up[r * total + off + i];
                            }
                        }
                    }
                    off += w;
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, any, back))
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape(format!(
                "matmul: lhs {:?} incompatible with rhs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut data = vec![T::zero(); m * n];
        kernels::mm(av.data(), bv.data(), m, k, n, &mut data);
        let out = Tensor::from_vec(vec![m, n], data)?;
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn<T>> = (na || nb).then(|| {
            Box::new(move |up: &[T], store: &mut super::GradStore<T>| {
                if na {
                    // dA = G · Bᵀ
                    let s = store.slot(a, m * k);
                    kernels::mm_nt(up, bv.data(), m, n, k, s);
                }
                if nb {
                    // dB = Aᵀ · G
                    let s = store.slot(b, k * n);
                    kernels::mm_tn(av.data(), up, k, m, n, s);
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, na || nb, back))
    }

    /// Batched matmul: [B,m,k] · [B,k,n] -> [B,m,n].
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        if av.rank() != 3
            || bv.rank() != 3
            || av.shape()[0] != bv.shape()[0]
            || av.shape()[2] != bv.shape()[1]
        {
            return Err(Error::shape(format!(
                "bmm: lhs {:?} incompatible with rhs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (bsz, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let n = bv.shape()[2];
        let mut data = vec![T::zero(); bsz * m * n];
        for i in 0..bsz {
            kernels::mm(
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut data[i * m * n..(i + 1) * m * n],
            );
        }
        let out = Tensor::from_vec(vec![bsz, m, n], data)?;
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn<T>> = (na || nb).then(|| {
            Box::new(move |up: &[T], store: &mut super::GradStore<T>| {
                if na {
                    let s = store.slot(a, bsz * m * k);
                    for i in 0..bsz {
                        kernels::mm_nt(
                            &up[i * m * n..(i + 1) * m * n],
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut s[i * m * k..(i + 1) * m * k],
                        );
                    }
                }
                if nb {
                    let s = store.slot(b, bsz * k * n);
                    for i in 0..bsz {
                        kernels::mm_tn(
                            &av.data()[i * m * k..(i + 1) * m * k],
                            &up[i * m * n..(i + 1) * m * n],
                            k,
                            m,
                            n,
                            &mut s[i * k * n..(i + 1) * k * n],
                        );
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, na || nb, back))
    }

    /// Batched matmul against a transposed right operand:
    /// [B,m,k] · [B,n,k]ᵀ -> [B,m,n]. This is the attention-score product.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        if av.rank() != 3
            || bv.rank() != 3
            || av.shape()[0] != bv.shape()[0]
            || av.shape()[2] != bv.shape()[2]
        {
            return Err(Error::shape(format!(
                "bmm_nt: lhs {:?} incompatible with rhs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (bsz, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let n = bv.shape()[1];
        let mut data = vec![T::zero(); bsz * m * n];
        for i in 0..bsz {
            kernels::mm_nt(
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * n * k..(i + 1) * n * k],
                m,
                k,
                n,
                &mut data[i * m * n..(i + 1) * m * n],
            );
        }
        let out = Tensor::from_vec(vec![bsz, m, n], data)?;
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn<T>> = (na || nb).then(|| {
            Box::new(move |up: &[T], store: &mut super::GradStore<T>| {
                if na {
                    // dA_b = G_b · B_b
                    let s = store.slot(a, bsz * m * k);
                    for i in 0..bsz {
                        kernels::mm(
                            &up[i * m * n..(i + 1) * m * n],
                            &bv.data()[i * n * k..(i + 1) * n * k],
                            m,
                            n,
                            k,
                            &mut s[i * m * k..(i + 1) * m * k],
                        );
                    }
                }
                if nb {
                    // dB_b = G_bᵀ · A_b
                    let s = store.slot(b, bsz * n * k);
                    for i in 0..bsz {
                        kernels::mm_tn(
                            &up[i * m * n..(i + 1) * m * n],
                            &av.data()[i * m * k..(i + 1) * m * k],
                            n,
                            m,
                            k,
                            &mut s[i * n * k..(i + 1) * n * k],
                        );
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, na || nb, back))
    }

    /// Broadcast-add a length-C bias over the rows of a [..., C] tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(bias).clone());
        let c = *av.shape().last().unwrap();
        if bv.rank() != 1 || bv.shape()[0] != c {
            return Err(Error::shape(format!(
                "add_bias: bias {:?} does not match trailing dim of {:?}",
                bv.shape(),
                av.shape()
            )));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (x, &b) in row.iter_mut().zip(bv.data()) {
                *x = *x + b;
            }
        }
        let out = Tensor::from_vec(av.shape().to_vec(), data)?;
        let (na, nb) = (self.needs(a), self.needs(bias));
        let n = av.numel();
        let back: Option<BackFn<T>> = (na || nb).then(|| {
            Box::new(move |up: &[T], store: &mut super::GradStore<T>| {
                if na {
                    let s = store.slot(a, n);
                    for i in 0..n {
                        s[i] = s[i] + up[i];
                    }
                }
                if nb {
                    let s = store.slot(bias, c);
                    for row in up.chunks_exact(c) {
                        for (g, &u) in s.iter_mut().zip(row) {
                            *g = *g + u;
                        }
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, na || nb, back))
    }

    /// Per-channel bias for a [C,H,W] feature map.
    pub fn add_chan_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(bias).clone());
        if av.rank() != 3 || bv.rank() != 1 || bv.shape()[0] != av.shape()[0] {
            return Err(Error::shape(format!(
                "add_chan_bias: bias {:?} does not match channels of {:?}",
                bv.shape(),
                av.shape()
            )));
        }
        let (c, plane) = (av.shape()[0], av.shape()[1] * av.shape()[2]);
        let mut data = av.data().to_vec();
        for ch in 0..c {
            let b = bv.data()[ch];
            for x in data[ch * plane..(ch + 1) * plane].iter_mut() {
                *x = *x + b;
            }
        }
        let out = Tensor::from_vec(av.shape().to_vec(), data)?;
        let (na, nb) = (self.needs(a), self.needs(bias));
        let n = av.numel();
        let back: Option<BackFn<T>> = (na || nb).then(|| {
            Box::new(move |up: &[T], store: &mut super::GradStore<T>| {
                if na {
                    let s = store.slot(a, n);
                    for i in 0..n {
                        s[i] = s[i] + up[i];
                    }
                }
                if nb {
                    let s = store.slot(bias, c);
                    for ch in 0..c {
                        let mut acc = T::zero();
                        for &u in &up[ch * plane..(ch + 1) * plane] {
                            acc = acc + u;
                        }
                        s[ch] = s[ch] + acc;
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, na || nb, back))
    }

    // ── attention / network primitives ───────────────────────────────

    /// Stable softmax over the trailing dimension.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a).clone();
        if !av.is_finite() {
            return Err(Error::domain("softmax_rows requires finite inputs"));
        }
        let row = *av.shape().last().unwrap();
        let mut data = vec![T::zero(); av.numel()];
        kernels::softmax_rows(av.data(), row, &mut data);
        let out = Tensor::from_vec(av.shape().to_vec(), data.clone())?;
        let na = self.needs(a);
        let n = av.numel();
        let back: Option<BackFn<T>> = na.then(|| {
            Box::new(move |up: &[T], store: &mut super::GradStore<T>| {
                let s = store.slot(a, n);
                for r in 0..n / row {
                    let y = &data[r * row..(r + 1) * row];
                    let u = &up[r * row..(r + 1) * row];
                    let mut dot = T::zero();
                    for i in 0..row {
                        dot = dot + u[i] * y[i];
                    }
                    let sr = &mut s[r * row..(r + 1) * row];
                    for i in 0..row {
                        sr[i] = sr[i] + y[i] * (u[i] - dot);
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, na, back))
    }

    /// Elementwise beta^g computed as exp(g·ln beta).
    ///
    /// Requires beta in (0,1] and g >= 0, so outputs lie in (0,1] and equal
    /// 1 exactly where g is 0.
    pub fn exp_decay(&mut self, g: Var, beta: f64) -> Result<Var> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::param(format!(
                "decay rate beta must lie in (0, 1], got {beta}"
            )));
        }
        let gv = self.value(g).clone();
        if let Some(bad) = gv.data().iter().find(|v| **v < T::zero()) {
            return Err(Error::domain(format!(
                "exp_decay requires nonnegative exponents, found {bad}"
            )));
        }
        let lnb = T::from_f64(beta.ln());
        let out = gv.map(|x| (x * lnb).exp());
        let ng = self.needs(g);
        let n = gv.numel();
        let out_data = out.clone();
        let back: Option<BackFn<T>> = ng.then(|| {
            Box::new(move |up: &[T], store: &mut super::GradStore<T>| {
                let s = store.slot(g, n);
                for i in 0..n {
                    s[i] = s[i] + up[i] * lnb * out_data.data()[i];
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, ng, back))
    }

    /// Average pooling of a [H,W] map. Non-overlapping windows
    /// (kh == sh, kw == sw) require exact divisibility.
    pub fn avg_pool2d(
        &mut self,
        x: Var,
        kh: usize,
        kw: usize,
        sh: usize,
        sw: usize,
    ) -> Result<Var> {
        let xv = self.value(x).clone();
        if xv.rank() != 2 {
            return Err(Error::shape(format!(
                "avg_pool2d expects a [H,W] map, got {:?}",
                xv.shape()
            )));
        }
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(Error::param("avg_pool2d: window and stride must be >= 1"));
        }
        let (h, w) = (xv.shape()[0], xv.shape()[1]);
        if kh == sh && kw == sw && (h % sh != 0 || w % sw != 0) {
            return Err(Error::shape(format!(
                "avg_pool2d: input {h}x{w} not divisible by non-overlapping window {kh}x{kw}"
            )));
        }
        if h < kh || w < kw {
            return Err(Error::shape(format!(
                "avg_pool2d: input {h}x{w} smaller than window {kh}x{kw}"
            )));
        }
        let (ho, wo) = ((h - kh) / sh + 1, (w - kw) / sw + 1);
        let mut data = vec![T::zero(); ho * wo];
        kernels::avg_pool2d(xv.data(), h, w, kh, kw, sh, sw, ho, wo, &mut data);
        let out = Tensor::from_vec(vec![ho, wo], data)?;
        let nx = self.needs(x);
        let back: Option<BackFn<T>> = nx.then(|| {
            Box::new(move |up: &[T], store: &mut super::GradStore<T>| {
                let inv = T::from_f64(1.0 / (kh * kw) as f64);
                let s = store.slot(x, h * w);
                for oy in 0..ho {
                    for ox in 0..wo {
                        let u = up[oy * wo + ox] * inv;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let idx = (oy * sh + ky) * w + ox * sw + kx;
                                s[idx] = s[idx] + u;
                            }
                        }
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, nx, back))
    }

    /// 2-D cross-correlation: x [Cin,H,W] with w [Cout,Cin,kh,kw].
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x).clone(), self.value(w).clone());
        if xv.rank() != 3 || wv.rank() != 4 || xv.shape()[0] != wv.shape()[1] {
            return Err(Error::shape(format!(
                "conv2d: input {:?} incompatible with kernel {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::param("conv2d: stride must be >= 1"));
        }
        let (ci, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (co, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(format!(
                "conv2d: padded input {}x{} smaller than kernel {kh}x{kw}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut data = vec![T::zero(); co * ho * wo];
        kernels::conv2d(
            xv.data(),
            wv.data(),
            ci,
            h,
            wd,
            co,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
            &mut data,
        );
        let out = Tensor::from_vec(vec![co, ho, wo], data)?;
        let (nx, nw) = (self.needs(x), self.needs(w));
        let back: Option<BackFn<T>> = (nx || nw).then(|| {
            Box::new(move |up: &[T], store: &mut super::GradStore<T>| {
                // Scatter over the forward index space; same cost as forward.
                let mut dx = nx.then(|| vec![T::zero(); ci * h * wd]);
                let mut dw = nw.then(|| vec![T::zero(); co * ci * kh * kw]);
                for oc in 0..co {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let u = up[(oc * ho + oy) * wo + ox];
                            for ic in 0..ci {
                                let xo = ic * h * wd;
                                let ko = (oc * ci + ic) * kh * kw;
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = xo + iy as usize * wd + ix as usize;
                                        if let Some(dx) = dx.as_mut() {
                                            dx[xi] = dx[xi] + u * wv.data()[ko + ky * kw + kx];
                                        }
                                        if let Some(dw) = dw.as_mut() {
                                            dw[ko + ky * kw + kx] =
                                                dw[ko + ky * kw + kx] + u * xv.data()[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    let s = store.slot(x, ci * h * wd);
                    for (g, d) in s.iter_mut().zip(dx) {
                        *g = *g + d;
                    }
                }
                if let Some(dw) = dw {
                    let s = store.slot(w, co * ci * kh * kw);
                    for (g, d) in s.iter_mut().zip(dw) {
                        *g = *g + d;
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, nx || nw, back))
    }

    /// Layer normalization over the trailing dimension with affine params.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, shift: Var, eps: f64) -> Result<Var> {
        let (xv, gv, sv) = (
            self.value(x).clone(),
            self.value(gamma).clone(),
            self.value(shift).clone(),
        );
        let c = *xv.shape().last().unwrap();
        if gv.shape() != [c] || sv.shape() != [c] {
            return Err(Error::shape(format!(
                "layer_norm: gamma {:?} / shift {:?} do not match trailing dim {c}",
                gv.shape(),
                sv.shape()
            )));
        }
        let rows = xv.numel() / c;
        let epst = T::from_f64(eps);
        let invc = T::from_f64(1.0 / c as f64);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut data = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let xr = &xv.data()[r * c..(r + 1) * c];
            let mut mean = T::zero();
            for &v in xr {
                mean = mean + v;
            }
            mean = mean * invc;
            let mut var = T::zero();
            for &v in xr {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * invc;
            let istd = T::one() / (var + epst).sqrt();
            inv_std[r] = istd;
            for i in 0..c {
                let xh = (xr[i] - mean) * istd;
                xhat[r * c + i] = xh;
                data[r * c + i] = gv.data()[i] * xh + sv.data()[i];
            }
        }
        let out = Tensor::from_vec(xv.shape().to_vec(), data)?;
        let (nx, ng, ns) = (self.needs(x), self.needs(gamma), self.needs(shift));
        let n = xv.numel();
        let back: Option<BackFn<T>> = (nx || ng || ns).then(|| {
            Box::new(move |up: &[T], store: &mut super::GradStore<T>| {
                if nx {
                    let s = store.slot(x, n);
                    for r in 0..rows {
                        let u = &up[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut mean_gg = T::zero();
                        let mut mean_ggx = T::zero();
                        for i in 0..c {
                            let gg = u[i] * gv.data()[i];
                            mean_gg = mean_gg + gg;
                            mean_ggx = mean_ggx + gg * xh[i];
                        }
                        mean_gg = mean_gg * invc;
                        mean_ggx = mean_ggx * invc;
                        let istd = inv_std[r];
                        let sr = &mut s[r * c..(r + 1) * c];
                        for i in 0..c {
                            let gg = u[i] * gv.data()[i];
                            sr[i] = sr[i] + istd * (gg - mean_gg - xh[i] * mean_ggx);
                        }
                    }
                }
                if ng {
                    let s = store.slot(gamma, c);
                    for r in 0..rows {
                        for i in 0..c {
                            s[i] = s[i] + up[r * c + i] * xhat[r * c + i];
                        }
                    }
                }
                if ns {
                    let s = store.slot(shift, c);
                    for r in 0..rows {
                        for i in 0..c {
                            s[i] = s[i] + up[r * c + i];
                        }
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, nx || ng || ns, back))
    }

    /// Mean negative log-softmax over rows whose label is not `ignore`.
    /// Returns exactly 0 (with zero gradient) when every row is ignored.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
        let lv = self.value(logits).clone();
        if lv.rank() != 2 {
            return Err(Error::shape(format!(
                "cross_entropy expects [N,K] logits, got {:?}",
                lv.shape()
            )));
        }
        let (rows, k) = (lv.shape()[0], lv.shape()[1]);
        if labels.len() != rows {
            return Err(Error::shape(format!(
                "cross_entropy: {} labels for {} rows",
                labels.len(),
                rows
            )));
        }
        for (i, &lab) in labels.iter().enumerate() {
            if lab != ignore && lab as usize >= k {
                return Err(Error::data(format!(
                    "label {lab} out of range for {k} classes at position {i}"
                )));
            }
        }
        let active: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != ignore)
            .map(|(i, _)| i)
            .collect();
        let m = active.len();
        let mut probs = vec![T::zero(); rows * k];
        kernels::softmax_rows(lv.data(), k, &mut probs);
        let mut loss = T::zero();
        if m > 0 {
            let inv_m = T::from_f64(1.0 / m as f64);
            for &r in &active {
                let xr = &lv.data()[r * k..(r + 1) * k];
                let mut mx = xr[0];
                for &v in xr {
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = T::zero();
                for &v in xr {
                    sum = sum + (v - mx).exp();
                }
                let lse = mx + sum.ln();
                loss = loss + (lse - xr[labels[r] as usize]) * inv_m;
            }
        }
        let out = Tensor::scalar(loss);
        let nl = self.needs(logits);
        let labels_owned = labels.to_vec();
        let back: Option<BackFn<T>> = (nl && m > 0).then(|| {
            Box::new(move |up: &[T], store: &mut super::GradStore<T>| {
                let u = up[0] * T::from_f64(1.0 / m as f64);
                let s = store.slot(logits, rows * k);
                for &r in &active {
                    let lab = labels_owned[r] as usize;
                    for i in 0..k {
                        let ind = if i == lab { T::one() } else { T::zero() };
                        s[r * k + i] = s[r * k + i] + u * (probs[r * k + i] - ind);
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, nl, back))
    }

    /// Bilinear upsampling of a [C,h,w] map to (oh, ow), align_corners=false.
    pub fn bilinear_upsample(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let xv = self.value(x).clone();
        if xv.rank() != 3 {
            return Err(Error::shape(format!(
                "bilinear_upsample expects [C,h,w], got {:?}",
                xv.shape()
            )));
        }
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut data = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            data.extend(kernels::bilinear_resize2d(
                &xv.data()[ch * h * w..(ch + 1) * h * w],
                h,
                w,
                oh,
                ow,
            ));
        }
        let out = Tensor::from_vec(vec![c, oh, ow], data)?;
        let nx = self.needs(x);
        let back: Option<BackFn<T>> = nx.then(|| {
            Box::new(move |up: &[T], store: &mut super::GradStore<T>| {
                let s = store.slot(x, c * h * w);
                let sy = h as f64 / oh as f64;
                let sx = w as f64 / ow as f64;
                for ch in 0..c {
                    let so = ch * h * w;
                    let uo = ch * oh * ow;
                    for oy in 0..oh {
                        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
                        let y0 = fy.floor() as usize;
                        let y1 = (y0 + 1).min(h - 1);
                        let wy = T::from_f64(fy - y0 as f64);
                        for ox in 0..ow {
                            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                            let x0 = fx.floor() as usize;
                            let x1 = (x0 + 1).min(w - 1);
                            let wx = T::from_f64(fx - x0 as f64);
                            let u = up[uo + oy * ow + ox];
                            let one = T::one();
                            s[so + y0 * w + x0] =
                                s[so + y0 * w + x0] + u * (one - wx) * (one - wy);
                            s[so + y0 * w + x1] = s[so + y0 * w + x1] + u * wx * (one - wy);
                            s[so + y1 * w + x0] = s[so + y1 * w + x0] + u * (one - wx) * wy;
                            s[so + y1 * w + x1] = s[so + y1 * w + x1] + u * wx * wy;
                        }
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, nx, back))
    }
}
