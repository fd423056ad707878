//! Single-level orthonormal 2D Haar transform.
//!
//! For each 2×2 block `[[a, b], [c, d]]` (rows top to bottom):
//!
//! ```text
//! LL = (a + b + c + d) / 2
//! LH = (a + b - c - d) / 2    low-pass along width, high-pass along height
//! HL = (a - b + c - d) / 2    high-pass along width, low-pass along height
//! HH = (a - b - c + d) / 2
//! ```
//!
//! The block matrix is symmetric and orthogonal, so the inverse applies the
//! same formulas to `(LL, LH, HL, HH)` and the energy is preserved.

use crate::tensor::{CustomOp, Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct SubBands {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
    pub source_shape: [usize; 3],
}

impl SubBands {
    pub fn energy(&self) -> f64 {
        self.ll.sq_norm() + self.lh.sq_norm() + self.hl.sq_norm() + self.hh.sq_norm()
    }
}

/// High-frequency bands concatenated on the channel axis: `[LH | HL | HH]`,
/// each a contiguous slab of `C` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct BandStack {
    pub data: Tensor,
    pub channels_per_band: usize,
    pub h_f: usize,
    pub w_f: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Lh,
    Hl,
    Hh,
}

impl Band {
    pub const ORDER: [Band; 3] = [Band::Lh, Band::Hl, Band::Hh];
}

impl BandStack {
    pub fn band(&self, band: Band) -> Result<Tensor> {
        let idx = Band::ORDER.iter().position(|&b| b == band).unwrap();
        let c = self.channels_per_band;
        self.data.narrow(0, idx * c, c)
    }
}

fn check_even(shape: &[usize]) -> Result<()> {
    let n = shape.len();
    if n < 2 || shape[n - 1] % 2 != 0 || shape[n - 2] % 2 != 0 {
        return Err(TensorError::InvalidArgument {
            op: "dwt2",
            detail: format!("spatial dims must be even, got {shape:?}"),
        });
    }
    Ok(())
}

#[inline]
fn butterfly(a: f64, b: f64, c: f64, d: f64) -> [f64; 4] {
    [
        (a + b + c + d) * 0.5,
        (a + b - c - d) * 0.5,
        (a - b + c - d) * 0.5,
        (a - b - c + d) * 0.5,
    ]
}

/// Forward transform of `[..., C, H, W]` planes into `[..., 4C, H/2, W/2]`
/// with slabs ordered LL, LH, HL, HH.
fn forward_planes(x: &Tensor) -> Result<Tensor> {
    check_even(x.shape())?;
    let n = x.ndim();
    if n < 3 {
        return Err(TensorError::InvalidArgument {
            op: "dwt2",
            detail: format!("expected [..., C, H, W], got {:?}", x.shape()),
        });
    }
    let (c, h, w) = (x.shape()[n - 3], x.shape()[n - 2], x.shape()[n - 1]);
    let (hh, wh) = (h / 2, w / 2);
    let batch = x.len() / (c * h * w);
    let mut out = vec![0.0; x.len()];
    let slab = c * hh * wh;
    for b in 0..batch {
        let src = &x.data()[b * c * h * w..(b + 1) * c * h * w];
        let dst = &mut out[b * 4 * slab..(b + 1) * 4 * slab];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for i in 0..hh {
                let top = &plane[2 * i * w..(2 * i + 1) * w];
                let bot = &plane[(2 * i + 1) * w..(2 * i + 2) * w];
                for j in 0..wh {
                    let v = butterfly(top[2 * j], top[2 * j + 1], bot[2 * j], bot[2 * j + 1]);
                    let o = (ch * hh + i) * wh + j;
                    for (k, val) in v.into_iter().enumerate() {
                        dst[k * slab + o] = val;
                    }
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[n - 3] = 4 * c;
    shape[n - 2] = hh;
    shape[n - 1] = wh;
    Tensor::new(&shape, out)
}

/// Inverse of [`forward_planes`].
fn inverse_planes(bands: &Tensor) -> Result<Tensor> {
    let n = bands.ndim();
    if n < 3 || bands.shape()[n - 3] % 4 != 0 {
        return Err(TensorError::InvalidArgument {
            op: "idwt2",
            detail: format!("expected [..., 4C, H/2, W/2], got {:?}", bands.shape()),
        });
    }
    let (c, hh, wh) = (bands.shape()[n - 3] / 4, bands.shape()[n - 2], bands.shape()[n - 1]);
    let (h, w) = (2 * hh, 2 * wh);
    let slab = c * hh * wh;
    let batch = bands.len() / (4 * slab);
    let mut out = vec![0.0; bands.len()];
    for b in 0..batch {
        let src = &bands.data()[b * 4 * slab..(b + 1) * 4 * slab];
        let dst = &mut out[b * c * h * w..(b + 1) * c * h * w];
        for ch in 0..c {
            for i in 0..hh {
                for j in 0..wh {
                    let o = (ch * hh + i) * wh + j;
                    let [a, bb, cc, d] = butterfly(src[o], src[slab + o], src[2 * slab + o], src[3 * slab + o]);
                    let base = ch * h * w;
                    dst[base + 2 * i * w + 2 * j] = a;
                    dst[base + 2 * i * w + 2 * j + 1] = bb;
                    dst[base + (2 * i + 1) * w + 2 * j] = cc;
                    dst[base + (2 * i + 1) * w + 2 * j + 1] = d;
                }
            }
        }
    }
    let mut shape = bands.shape().to_vec();
    shape[n - 3] = c;
    shape[n - 2] = h;
    shape[n - 1] = w;
    Tensor::new(&shape, out)
}

/// Decompose a `[C, H, W]` image into its four sub-bands.
pub fn dwt2(x: &Tensor) -> Result<SubBands> {
    let [c, h, w] = *x.shape() else {
        return Err(TensorError::InvalidArgument {
            op: "dwt2",
            detail: format!("expected [C, H, W], got {:?}", x.shape()),
        });
    };
    let all = forward_planes(x)?;
    Ok(SubBands {
        ll: all.narrow(0, 0, c)?,
        lh: all.narrow(0, c, c)?,
        hl: all.narrow(0, 2 * c, c)?,
        hh: all.narrow(0, 3 * c, c)?,
        source_shape: [c, h, w],
    })
}

pub fn idwt2(bands: &SubBands) -> Result<Tensor> {
    let s = bands.ll.shape();
    for b in [&bands.lh, &bands.hl, &bands.hh] {
        if b.shape() != s {
            return Err(TensorError::ShapeMismatch {
                op: "idwt2",
                lhs: s.to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    if s.len() != 3 {
        return Err(TensorError::InvalidArgument {
            op: "idwt2",
            detail: format!("bands must be [C, H/2, W/2], got {s:?}"),
        });
    }
    let all = Tensor::concat(&[&bands.ll, &bands.lh, &bands.hl, &bands.hh], 0)?;
    inverse_planes(&all)
}

/// Drop LL and concatenate the detail bands as `[LH | HL | HH]`.
pub fn stack_hf(bands: &SubBands) -> Result<BandStack> {
    let data = Tensor::concat(&[&bands.lh, &bands.hl, &bands.hh], 0)?;
    let [c, h_f, w_f] = *bands.lh.shape() else {
        unreachable!("validated sub-band shape")
    };
    Ok(BandStack {
        data,
        channels_per_band: c,
        h_f,
        w_f,
    })
}

struct HaarOp;

impl CustomOp for HaarOp {
    fn name(&self) -> &'static str {
        "haar_dwt"
    }

    // The transform is orthogonal, so its adjoint is the inverse.
    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(inverse_planes(grad)?)])
    }
}

/// Differentiable Haar transform of `[..., C, H, W]` to `[..., 4C, H/2, W/2]`
/// (slabs LL, LH, HL, HH).
pub fn haar_dwt(tape: &mut Tape, x: Var) -> Result<Var> {
    let value = forward_planes(tape.value(x))?;
    Ok(tape.custom(Box::new(HaarOp), &[x], value))
}

/// Differentiable high-frequency stack of a batch `[B, C, H, W]` →
/// `[B, 3C, H/2, W/2]`.
pub fn haar_hf_stack(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.shape(x).len();
    let c = tape.shape(x)[n - 3];
    let all = haar_dwt(tape, x)?;
    tape.narrow(all, n - 3, c, 3 * c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_no_detail() {
        let bands = dwt2(&Tensor::ones(&[1, 4, 4])).unwrap();
        assert!(bands.ll.data().iter().all(|&v| v == 2.0));
        for b in [&bands.lh, &bands.hl, &bands.hh] {
            assert!(b.data().iter().all(|&v| v == 0.0));
        }
        let stack = stack_hf(&bands).unwrap();
        assert!(stack.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_block_closed_form() {
        let x = Tensor::new(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = dwt2(&x).unwrap();
        assert_eq!(b.ll.data(), &[5.0]);
        assert_eq!(b.lh.data(), &[-2.0]);
        assert_eq!(b.hl.data(), &[-1.0]);
        assert_eq!(b.hh.data(), &[0.0]);
        assert_eq!(idwt2(&b).unwrap(), x);
    }

    #[test]
    fn checkerboard_lands_in_hh() {
        let x = Tensor::from_fn(&[1, 4, 4], |i| if (i / 4 + i % 4) % 2 == 0 { 1.0 } else { -1.0 });
        let b = dwt2(&x).unwrap();
        assert!(b.hh.data().iter().all(|&v| v == 2.0));
        for band in [&b.ll, &b.lh, &b.hl] {
            assert!(band.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn odd_dims_are_rejected() {
        assert!(dwt2(&Tensor::zeros(&[1, 3, 4])).is_err());
        assert!(dwt2(&Tensor::zeros(&[1, 4, 5])).is_err());
    }

    #[test]
    fn zero_bands_reconstruct_zero() {
        let z = Tensor::zeros(&[2, 3, 3]);
        let b = SubBands {
            ll: z.clone(),
            lh: z.clone(),
            hl: z.clone(),
            hh: z,
            source_shape: [2, 6, 6],
        };
        assert!(idwt2(&b).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stack_layout() {
        let x = Tensor::from_fn(&[3, 64, 64], |i| (i as f64 * 0.1).sin());
        let b = dwt2(&x).unwrap();
        let s = stack_hf(&b).unwrap();
        assert_eq!(s.data.shape(), &[9, 32, 32]);
        assert_eq!(s.band(Band::Lh).unwrap(), b.lh);
        assert_eq!(s.band(Band::Hl).unwrap(), b.hl);
        assert_eq!(s.band(Band::Hh).unwrap(), b.hh);
        let one = stack_hf(&dwt2(&Tensor::zeros(&[1, 8, 6])).unwrap()).unwrap();
        assert_eq!(one.data.shape(), &[3, 4, 3]);
    }

    #[test]
    fn mismatched_bands_rejected() {
        let b = SubBands {
            ll: Tensor::zeros(&[1, 2, 2]),
            lh: Tensor::zeros(&[1, 2, 2]),
            hl: Tensor::zeros(&[1, 2, 3]),
            hh: Tensor::zeros(&[1, 2, 2]),
            source_shape: [1, 4, 4],
        };
        assert!(idwt2(&b).is_err());
    }
}
