//! Single-level orthonormal 2-D Haar transform, channelwise.
//!
//! For each 2x2 block `[[a, b], [c, d]]`:
//! `ll = (a+b+c+d)/2`, `lh = (a+b-c-d)/2`, `hl = (a-b+c-d)/2`, `hh = (a-b-c+d)/2`.
//! `lh` responds to horizontal edges, `hl` to vertical ones.

use num_traits::Num;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// The four subbands of a `[C, H, W]` map, each `[C, H/2, W/2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPyramid<S> {
    pub ll: Tensor<S>,
    pub lh: Tensor<S>,
    pub hl: Tensor<S>,
    pub hh: Tensor<S>,
}

/// Forward transform on raw channel-major data. Works for any exact or
/// floating number type; `h` and `w` must be even.
pub fn dwt2_raw<T: Num + Copy>(c: usize, h: usize, w: usize, x: &[T]) -> [Vec<T>; 4] {
    assert!(h % 2 == 0 && w % 2 == 0 && x.len() == c * h * w);
    let two = T::one() + T::one();
    let (h2, w2) = (h / 2, w / 2);
    let mut bands: [Vec<T>; 4] = std::array::from_fn(|_| Vec::with_capacity(c * h2 * w2));
    for ch in 0..c {
        for by in 0..h2 {
            for bx in 0..w2 {
                let at = |dy: usize, dx: usize| x[(ch * h + 2 * by + dy) * w + 2 * bx + dx];
                let (a, b, cc, d) = (at(0, 0), at(0, 1), at(1, 0), at(1, 1));
                bands[0].push((a + b + cc + d) / two);
                bands[1].push((a + b - cc - d) / two);
                bands[2].push((a - b + cc - d) / two);
                bands[3].push((a - b - cc + d) / two);
            }
        }
    }
    bands
}

/// Exact inverse of [`dwt2_raw`]; returns `[C, 2h, 2w]` data.
pub fn idwt2_raw<T: Num + Copy>(c: usize, h2: usize, w2: usize, bands: [&[T]; 4]) -> Vec<T> {
    let n = c * h2 * w2;
    assert!(bands.iter().all(|b| b.len() == n));
    let two = T::one() + T::one();
    let (h, w) = (2 * h2, 2 * w2);
    let mut x = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for by in 0..h2 {
            for bx in 0..w2 {
                let i = (ch * h2 + by) * w2 + bx;
                let (ll, lh, hl, hh) = (bands[0][i], bands[1][i], bands[2][i], bands[3][i]);
                let base = (ch * h + 2 * by) * w + 2 * bx;
                x[base] = (ll + lh + hl + hh) / two;
                x[base + 1] = (ll + lh - hl - hh) / two;
                x[base + w] = (ll - lh + hl - hh) / two;
                x[base + w + 1] = (ll - lh - hl + hh) / two;
            }
        }
    }
    x
}

fn check_map(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] if c > 0 && h > 0 && w > 0 && h % 2 == 0 && w % 2 == 0 => Ok((c, h, w)),
        _ => Err(Error::dim(op, shape, &[])),
    }
}

pub fn dwt2<S: Scalar>(x: &Tensor<S>) -> Result<WaveletPyramid<S>> {
    let (c, h, w) = check_map("dwt2", x.shape())?;
    let [ll, lh, hl, hh] = dwt2_raw(c, h, w, x.data());
    let shape = [c, h / 2, w / 2];
    Ok(WaveletPyramid {
        ll: Tensor::from_vec(&shape, ll)?,
        lh: Tensor::from_vec(&shape, lh)?,
        hl: Tensor::from_vec(&shape, hl)?,
        hh: Tensor::from_vec(&shape, hh)?,
    })
}

pub fn idwt2<S: Scalar>(p: &WaveletPyramid<S>) -> Result<Tensor<S>> {
    let shape = p.ll.shape();
    for band in [&p.lh, &p.hl, &p.hh] {
        if band.shape() != shape {
            return Err(Error::dim("idwt2", shape, band.shape()));
        }
    }
    let (c, h2, w2) = match *shape {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::dim("idwt2", shape, &[])),
    };
    let x = idwt2_raw(c, h2, w2, [p.ll.data(), p.lh.data(), p.hl.data(), p.hh.data()]);
    Tensor::from_vec(&[c, 2 * h2, 2 * w2], x)
}

/// Stacks subbands along channels: `[4C, h, w]` in LL, LH, HL, HH order.
fn stack<S: Scalar>(c: usize, h2: usize, w2: usize, bands: [Vec<S>; 4]) -> Tensor<S> {
    let data = bands.concat();
    Tensor::from_vec(&[4 * c, h2, w2], data).expect("stacked subbands")
}

fn split<S>(t: &[S], n: usize) -> [&[S]; 4] {
    [&t[..n], &t[n..2 * n], &t[2 * n..3 * n], &t[3 * n..]]
}

impl<'p, S: Scalar> Graph<'p, S> {
    /// Differentiable Haar analysis of `[C, H, W]` (even extents) into a
    /// stacked `[4C, H/2, W/2]` tensor. The transform is orthonormal, so its
    /// adjoint is the synthesis step.
    pub fn dwt2(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (c, h, w) = check_map("dwt2", xv.shape())?;
        let (h2, w2) = (h / 2, w / 2);
        let y = stack(c, h2, w2, dwt2_raw(c, h, w, xv.data()));
        Ok(self.push_op(y, &[x], move |g, _| {
            let n = c * h2 * w2;
            let data = idwt2_raw(c, h2, w2, split(g.data(), n));
            vec![Some(Tensor::from_vec(&[c, h, w], data).expect("dwt2 grad"))]
        }))
    }

    /// Differentiable Haar synthesis of a stacked `[4C, h, w]` tensor.
    pub fn idwt2(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (c4, h2, w2) = match *xv.shape() {
            [c4, h, w] if c4 % 4 == 0 && c4 > 0 => (c4, h, w),
            _ => return Err(Error::dim("idwt2", xv.shape(), &[])),
        };
        let c = c4 / 4;
        let n = c * h2 * w2;
        let y = Tensor::from_vec(&[c, 2 * h2, 2 * w2], idwt2_raw(c, h2, w2, split(xv.data(), n)))?;
        Ok(self.push_op(y, &[x], move |g, _| {
            vec![Some(stack(c, h2, w2, dwt2_raw(c, 2 * h2, 2 * w2, g.data())))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_example() {
        let x = Tensor::<f64>::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = dwt2(&x).unwrap();
        assert_eq!(p.ll.data(), &[5.0]);
        assert_eq!(p.lh.data(), &[-2.0]);
        assert_eq!(p.hl.data(), &[-1.0]);
        assert_eq!(p.hh.data(), &[0.0]);
    }

    #[test]
    fn constant_image_has_only_ll() {
        let x = Tensor::<f64>::full(&[2, 6, 4], 0.75);
        let p = dwt2(&x).unwrap();
        assert!(p.ll.data().iter().all(|&v| v == 1.5));
        for band in [&p.lh, &p.hl, &p.hh] {
            assert!(band.data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(idwt2(&p).unwrap(), x);
    }

    #[test]
    fn vertical_step_only_excites_hl_on_the_step() {
        // 4x6 image, columns 0..3 zero, 3..6 one: the step falls inside block column 1
        let (h, w) = (4, 6);
        let data: Vec<f64> = (0..h * w).map(|i| if i % w >= 3 { 1.0 } else { 0.0 }).collect();
        let p = dwt2(&Tensor::from_vec(&[1, h, w], data).unwrap()).unwrap();
        assert!(p.lh.data().iter().all(|&v| v == 0.0));
        assert!(p.hh.data().iter().all(|&v| v == 0.0));
        for by in 0..2 {
            for bx in 0..3 {
                let v = p.hl.at(&[0, by, bx]);
                if bx == 1 {
                    assert_eq!(v, -1.0);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_pyramid_inverts_to_zero() {
        let z = Tensor::<f64>::zeros(&[3, 2, 5]);
        let p = WaveletPyramid {
            ll: z.clone(),
            lh: z.clone(),
            hl: z.clone(),
            hh: z,
        };
        assert!(idwt2(&p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_odd_and_empty_extents() {
        assert!(dwt2(&Tensor::<f64>::zeros(&[1, 3, 4])).is_err());
        assert!(dwt2(&Tensor::<f64>::zeros(&[1, 0, 4])).is_err());
        let bad = WaveletPyramid {
            ll: Tensor::<f64>::zeros(&[1, 2, 2]),
            lh: Tensor::zeros(&[1, 2, 2]),
            hl: Tensor::zeros(&[1, 2, 3]),
            hh: Tensor::zeros(&[1, 2, 2]),
        };
        assert!(idwt2(&bad).is_err());
    }

    #[test]
    fn graph_ops_match_tensor_functions() {
        let x = Tensor::<f64>::from_vec(&[2, 4, 4], (0..32).map(|i| (i * 7 % 11) as f64).collect()).unwrap();
        let g = Graph::<f64>::standalone();
        let xv = g.leaf(x.clone(), true);
        let s = g.dwt2(xv).unwrap();
        let p = dwt2(&x).unwrap();
        let stacked = g.value(s);
        let expect = [p.ll.data(), p.lh.data(), p.hl.data(), p.hh.data()].concat();
        assert_eq!(stacked.data(), &expect[..]);
        let back = g.idwt2(s).unwrap();
        assert_eq!(*g.value(back), x);
    }
}
