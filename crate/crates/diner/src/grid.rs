//! Dense H x W x C maps of f64 with bilinear sampling.
//!
//! Pixel centers sit at integer coordinates; sampling outside the grid
//! clamps to the border, matching the border-replication semantics used for
//! padded source images.

/// Row-major H x W x C buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut g = Self::zeros(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    g.data[(y * width + x) * channels + c] = f(y, x, c);
                }
            }
        }
        g
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn texel(&self, y: usize, x: usize) -> &[f64] {
        debug_assert!(y < self.height && x < self.width);
        let base = (y * self.width + x) * self.channels;
        &self.data[base..base + self.channels]
    }

    #[inline]
    pub fn texel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        debug_assert!(y < self.height && x < self.width);
        let base = (y * self.width + x) * self.channels;
        &mut self.data[base..base + self.channels]
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.texel(y, x)[c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.texel_mut(y, x)[c] = v;
    }

    /// The four texels and weights that a bilinear lookup at (u, v) blends,
    /// after clamping to the border. Weights sum to 1.
    #[inline]
    pub fn bilinear_footprint(&self, u: f64, v: f64) -> BilinearFootprint {
        let cu = u.clamp(0.0, (self.width - 1) as f64);
        let cv = v.clamp(0.0, (self.height - 1) as f64);
        let x0 = (cu.floor() as usize).min(self.width - 1);
        let y0 = (cv.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = cu - x0 as f64;
        let fy = cv - y0 as f64;
        BilinearFootprint {
            texels: [(y0, x0), (y0, x1), (y1, x0), (y1, x1)],
            weights: [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ],
        }
    }

    /// Bilinear blend of all channels at continuous pixel coordinates (u, v).
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.sample_bilinear_into(u, v, &mut out);
        out
    }

    pub fn sample_bilinear_into(&self, u: f64, v: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        let fp = self.bilinear_footprint(u, v);
        out.fill(0.0);
        for (w, &(y, x)) in fp.weights.iter().zip(fp.texels.iter()) {
            let t = self.texel(y, x);
            for (o, &val) in out.iter_mut().zip(t.iter()) {
                *o += w * val;
            }
        }
    }

    /// Copies a rectangular window.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Grid {
        assert!(y0 + h <= self.height && x0 + w <= self.width);
        let mut out = Grid::zeros(h, w, self.channels);
        for y in 0..h {
            let src = (y0 + y) * self.width + x0;
            let dst = y * w;
            out.data[dst * self.channels..(dst + w) * self.channels].copy_from_slice(
                &self.data[src * self.channels..(src + w) * self.channels],
            );
        }
        out
    }

    /// Single-channel fast path.
    #[inline]
    pub fn sample_bilinear_scalar(&self, u: f64, v: f64) -> f64 {
        debug_assert_eq!(self.channels, 1);
        let fp = self.bilinear_footprint(u, v);
        fp.weights
            .iter()
            .zip(fp.texels.iter())
            .map(|(w, &(y, x))| w * self.data[y * self.width + x])
            .sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BilinearFootprint {
    pub texels: [(usize, usize); 4],
    pub weights: [f64; 4],
}
