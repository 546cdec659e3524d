//! Planar `f32` images, channel-major (`C×H×W`), values nominally in [0, 1].

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dims {channels}x{height}x{width} must be positive"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "Image::new",
                format!("{} values for {channels}x{height}x{width}", data.len()),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Bilinear resample of the window `[y0, y0+h) × [x0, x0+w)` (in
    /// fractional source pixels) to `out_h × out_w`, pixel-center aligned.
    pub fn resample(&self, y0: f32, x0: f32, h: f32, w: f32, out_h: usize, out_w: usize) -> Self {
        let mut out = Self::filled(self.channels, out_h, out_w, 0.0);
        let sy = h / out_h as f32;
        let sx = w / out_w as f32;
        for oy in 0..out_h {
            let fy = (y0 + (oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y_lo = fy.floor() as usize;
            let y_hi = (y_lo + 1).min(self.height - 1);
            let ty = fy - y_lo as f32;
            for ox in 0..out_w {
                let fx = (x0 + (ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x_lo = fx.floor() as usize;
                let x_hi = (x_lo + 1).min(self.width - 1);
                let tx = fx - x_lo as f32;
                for c in 0..self.channels {
                    let top = self.get(c, y_lo, x_lo) * (1.0 - tx) + self.get(c, y_lo, x_hi) * tx;
                    let bot = self.get(c, y_hi, x_lo) * (1.0 - tx) + self.get(c, y_hi, x_hi) * tx;
                    out.set(c, oy, ox, top * (1.0 - ty) + bot * ty);
                }
            }
        }
        out
    }

    /// Resize to `out_h × out_w` over the whole frame.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Self {
        if (out_h, out_w) == (self.height, self.width) {
            return self.clone();
        }
        self.resample(0.0, 0.0, self.height as f32, self.width as f32, out_h, out_w)
    }

    /// Centre crop to a square, then resize to `size × size`.
    pub fn fit_square(&self, size: usize) -> Self {
        let side = self.height.min(self.width);
        let y0 = (self.height - side) as f32 / 2.0;
        let x0 = (self.width - side) as f32 / 2.0;
        if side == size && self.height == self.width {
            return self.clone();
        }
        self.resample(y0, x0, side as f32, side as f32, size, size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize_is_exact() {
        let img = Image::new(2, 3, 4, (0..24).map(|v| v as f32 / 24.0).collect()).unwrap();
        assert_eq!(img.resize(3, 4), img);
        assert_eq!(
            img.resample(0.0, 0.0, 3.0, 4.0, 3, 4),
            img,
            "pixel-centred resample with unit scale must be the identity"
        );
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::filled(3, 10, 7, 0.25);
        let out = img.fit_square(5);
        assert_eq!(out.dims(), (3, 5, 5));
        assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(Image::new(0, 1, 1, vec![]).is_err());
        assert!(Image::new(1, 2, 2, vec![0.0; 3]).is_err());
    }
}
