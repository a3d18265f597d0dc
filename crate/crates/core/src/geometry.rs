//! Convolution geometry and the sliding-window description used by the
//! shape transforms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of a stride-1, dilation-1 convolution layer without bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub k_h: usize,
    pub k_w: usize,
    /// Zero padding applied on every side of the input.
    pub pad: usize,
}

impl ConvSpec {
    pub fn new(
        c_in: usize,
        h_in: usize,
        w_in: usize,
        c_out: usize,
        k_h: usize,
        k_w: usize,
        pad: usize,
    ) -> Result<Self> {
        let spec = Self { c_in, h_in, w_in, c_out, k_h, k_w, pad };
        spec.validate()?;
        Ok(spec)
    }

    /// A 1x1 convolution over a `c_in x h x w` input.
    pub fn pointwise(c_in: usize, h: usize, w: usize, c_out: usize) -> Result<Self> {
        Self::new(c_in, h, w, c_out, 1, 1, 0)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.c_in, self.h_in, self.w_in, self.c_out, self.k_h, self.k_w];
        if dims.contains(&0) {
            return Err(Error::Geometry(format!("all counts must be positive: {self:?}")));
        }
        if self.k_h > self.h_in + 2 * self.pad || self.k_w > self.w_in + 2 * self.pad {
            return Err(Error::Geometry(format!(
                "{}x{} filter does not fit a {}x{} input with padding {}",
                self.k_h, self.k_w, self.h_in, self.w_in, self.pad
            )));
        }
        Ok(())
    }

    pub fn h_out(&self) -> usize {
        self.h_in + 2 * self.pad + 1 - self.k_h
    }

    pub fn w_out(&self) -> usize {
        self.w_in + 2 * self.pad + 1 - self.k_w
    }

    pub fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1
    }

    /// Elements under one filter window: `k_h * k_w * c_in`.
    pub fn window_len(&self) -> usize {
        self.k_h * self.k_w * self.c_in
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.window_len()
    }

    /// Multiply-accumulates of one forward pass (each backward step costs the same).
    pub fn macs(&self) -> u64 {
        (self.h_out() * self.w_out() * self.c_out * self.window_len()) as u64
    }

    /// Window over the input activation used by the forward and weight-gradient steps.
    pub fn forward_window(&self) -> WindowGeom {
        WindowGeom {
            channels: self.c_in,
            in_h: self.h_in,
            in_w: self.w_in,
            k_h: self.k_h,
            k_w: self.k_w,
            out_h: self.h_out(),
            out_w: self.w_out(),
            off_h: self.pad as isize,
            off_w: self.pad as isize,
        }
    }

    /// Window over the output gradient for the input-gradient step. The output
    /// gradient is implicitly bordered by `k - 1 - pad` zeros per side (a crop
    /// when that count is negative), so the result has the input's spatial size.
    pub fn backward_input_window(&self) -> WindowGeom {
        WindowGeom {
            channels: self.c_out,
            in_h: self.h_out(),
            in_w: self.w_out(),
            k_h: self.k_h,
            k_w: self.k_w,
            out_h: self.h_in,
            out_w: self.w_in,
            off_h: self.k_h as isize - 1 - self.pad as isize,
            off_w: self.k_w as isize - 1 - self.pad as isize,
        }
    }
}

/// A dense sliding window: output position `(oh, ow)` with filter tap
/// `(kh, kw)` reads input `(oh + kh - off_h, ow + kw - off_w)`, and reads
/// outside `[0, in_h) x [0, in_w)` are zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub off_h: isize,
    pub off_w: isize,
}

impl WindowGeom {
    pub fn windows(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn window_len(&self) -> usize {
        self.k_h * self.k_w * self.channels
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.in_h * self.in_w
    }

    #[inline]
    pub(crate) fn in_row(&self, oh: usize, kh: usize) -> Option<usize> {
        let r = oh as isize + kh as isize - self.off_h;
        (r >= 0 && (r as usize) < self.in_h).then_some(r as usize)
    }

    #[inline]
    pub(crate) fn in_col(&self, ow: usize, kw: usize) -> Option<usize> {
        let c = ow as isize + kw as isize - self.off_w;
        (c >= 0 && (c as usize) < self.in_w).then_some(c as usize)
    }

    /// True when no window of this geometry touches the zero border.
    pub fn is_unpadded(&self) -> bool {
        self.off_h == 0
            && self.off_w == 0
            && self.out_h + self.k_h - 1 <= self.in_h
            && self.out_w + self.k_w - 1 <= self.in_w
    }
}
