//! Bayer mosaics: pattern unification, geometric augmentation, 4-channel
//! packing and the minimalist ISP used for RGB-domain losses and metrics.

pub mod io;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::noise::NoiseParams;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CfaColor {
    Red,
    Green,
    Blue,
}

/// 2x2 color filter layout, named by the colors at (0,0), (0,1), (1,0), (1,1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CfaPattern {
    Rggb,
    Grbg,
    Gbrg,
    Bggr,
}

impl CfaPattern {
    pub const ALL: [CfaPattern; 4] = [Self::Rggb, Self::Grbg, Self::Gbrg, Self::Bggr];

    fn tile(self) -> [CfaColor; 4] {
        use CfaColor::*;
        match self {
            Self::Rggb => [Red, Green, Green, Blue],
            Self::Grbg => [Green, Red, Blue, Green],
            Self::Gbrg => [Green, Blue, Red, Green],
            Self::Bggr => [Blue, Green, Green, Red],
        }
    }

    pub fn color_at(self, y: usize, x: usize) -> CfaColor {
        self.tile()[(y % 2) * 2 + x % 2]
    }

    fn from_tile(tile: [CfaColor; 4]) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.tile() == tile)
    }

    /// Leading (rows, cols) to drop so the remaining mosaic starts on an R site.
    fn rggb_offset(self) -> (usize, usize) {
        match self {
            Self::Rggb => (0, 0),
            Self::Grbg => (0, 1),
            Self::Gbrg => (1, 0),
            Self::Bggr => (1, 1),
        }
    }
}

/// Capture metadata carried with a RAW frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BayerMeta {
    pub gain: f32,
    pub noise: Option<NoiseParams>,
    pub wb_gains: [f32; 3],
}

impl Default for BayerMeta {
    fn default() -> Self {
        Self {
            gain: 1.0,
            noise: None,
            wb_gains: IspParams::DEFAULT_WB,
        }
    }
}

/// Single-plane mosaiced RAW frame with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BayerImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
    pub pattern: CfaPattern,
    pub meta: BayerMeta,
}

impl BayerImage {
    pub fn new(
        height: usize,
        width: usize,
        data: Vec<f32>,
        pattern: CfaPattern,
        meta: BayerMeta,
    ) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err!(
                "bayer plane has {} values for {height}x{width}",
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            data,
            pattern,
            meta,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        pattern: CfaPattern,
        f: impl Fn(usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
            pattern,
            meta: BayerMeta::default(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(
            self.height,
            self.width,
            data,
            self.pattern,
            self.meta.clone(),
        )
    }

    pub fn clip(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Window `[y0, y0+h) x [x0, x0+w)`. Odd offsets shift the mosaic phase.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(shape_err!(
                "crop {h}x{w}+{y0}+{x0} exceeds {}x{}",
                self.height,
                self.width
            ));
        }
        let mut data = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        let tile = [
            self.pattern.color_at(y0, x0),
            self.pattern.color_at(y0, x0 + 1),
            self.pattern.color_at(y0 + 1, x0),
            self.pattern.color_at(y0 + 1, x0 + 1),
        ];
        let pattern =
            CfaPattern::from_tile(tile).expect("crop of a valid mosaic is a valid mosaic");
        Self::new(h, w, data, pattern, self.meta.clone())
    }

    fn remap(
        &self,
        height: usize,
        width: usize,
        src: impl Fn(usize, usize) -> (usize, usize),
    ) -> Self {
        let mut data = Vec::with_capacity(height * width);
        let mut tile = [CfaColor::Red; 4];
        for y in 0..height {
            for x in 0..width {
                let (sy, sx) = src(y, x);
                data.push(self.at(sy, sx));
                if y < 2 && x < 2 {
                    tile[y * 2 + x] = self.pattern.color_at(sy, sx);
                }
            }
        }
        Self {
            height,
            width,
            data,
            pattern: CfaPattern::from_tile(tile).expect("geometric remap preserves a 2x2 mosaic"),
            meta: self.meta.clone(),
        }
    }
}

/// Crops 0 or 1 leading rows/cols so the image presents an RGGB phase, then
/// trims trailing rows/cols so both dims are even.
pub fn unify_bayer(img: &BayerImage) -> Result<BayerImage> {
    let (dy, dx) = img.pattern.rggb_offset();
    let h = img.height.saturating_sub(dy) & !1;
    let w = img.width.saturating_sub(dx) & !1;
    if h < 2 || w < 2 {
        return Err(shape_err!(
            "{}x{} {:?} image is too small to unify",
            img.height,
            img.width,
            img.pattern
        ));
    }
    let out = img.crop(dy, dx, h, w)?;
    debug_assert_eq!(out.pattern, CfaPattern::Rggb);
    Ok(out)
}

/// Flips and/or transposes an RGGB frame, then re-unifies it to RGGB.
pub fn augment_bayer(
    img: &BayerImage,
    flip_h: bool,
    flip_v: bool,
    transpose: bool,
) -> Result<BayerImage> {
    if img.pattern != CfaPattern::Rggb {
        return Err(config_err!(
            "augment_bayer expects RGGB input, got {:?}",
            img.pattern
        ));
    }
    if !(flip_h || flip_v || transpose) {
        return Ok(img.clone());
    }
    let (h, w) = (img.height, img.width);
    let mut out = img.remap(h, w, |y, x| {
        (
            if flip_v { h - 1 - y } else { y },
            if flip_h { w - 1 - x } else { x },
        )
    });
    if transpose {
        out = out.remap(w, h, |y, x| (x, y));
    }
    unify_bayer(&out)
}

/// Packs an RGGB frame into `(1, 4, H/2, W/2)` with channels (R, G_r, G_b, B).
pub fn pack(img: &BayerImage) -> Result<Tensor<f32>> {
    if img.pattern != CfaPattern::Rggb {
        return Err(config_err!(
            "pack expects RGGB input, got {:?}",
            img.pattern
        ));
    }
    if !img.height.is_multiple_of(2) || !img.width.is_multiple_of(2) {
        return Err(shape_err!(
            "pack needs even dims, got {}x{}",
            img.height,
            img.width
        ));
    }
    let (h, w) = (img.height / 2, img.width / 2);
    Ok(Tensor::from_fn([1, 4, h, w], |[_, c, y, x]| {
        img.at(2 * y + c / 2, 2 * x + c % 2)
    }))
}

/// Inverse of [`pack`] for sample `n` of a packed batch.
pub fn unpack_sample(t: &Tensor<f32>, n: usize, meta: BayerMeta) -> Result<BayerImage> {
    let [batch, c, h, w] = t.dims();
    if c != 4 || n >= batch {
        return Err(shape_err!(
            "unpack expects (N, 4, h, w) with n < N, got {:?}",
            t.dims()
        ));
    }
    let (hh, ww) = (2 * h, 2 * w);
    let mut data = vec![0.0; hh * ww];
    for ch in 0..4 {
        for y in 0..h {
            for x in 0..w {
                data[(2 * y + ch / 2) * ww + 2 * x + ch % 2] = t.at(n, ch, y, x);
            }
        }
    }
    BayerImage::new(hh, ww, data, CfaPattern::Rggb, meta)
}

pub fn unpack(t: &Tensor<f32>) -> Result<BayerImage> {
    unpack_sample(t, 0, BayerMeta::default())
}

#[inline]
fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    let r = if i < 0 {
        -i
    } else if i >= len {
        2 * (len - 1) - i
    } else {
        i
    };
    r as usize
}

/// Enumerates the bilinear demosaic of packed RGGB `(n, 4, h, w)` into RGB
/// `(n, 3, 2h, 2w)` as `(output index, input index, weight)` triples.
/// Borders mirror without repeating the edge, which preserves mosaic phase.
pub(crate) fn demosaic_stencil(n: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, f64)) {
    let (hh, ww) = (2 * h, 2 * w);
    for s in 0..n {
        let src = |y: isize, x: isize| {
            let (y, x) = (reflect(y, hh), reflect(x, ww));
            let ch = (y % 2) * 2 + x % 2;
            ((s * 4 + ch) * h + y / 2) * w + x / 2
        };
        for y in 0..hh {
            for x in 0..ww {
                let (yi, xi) = (y as isize, x as isize);
                let out = |color: usize| ((s * 3 + color) * hh + y) * ww + x;
                let cross = [(yi - 1, xi), (yi + 1, xi), (yi, xi - 1), (yi, xi + 1)];
                let diag = [
                    (yi - 1, xi - 1),
                    (yi - 1, xi + 1),
                    (yi + 1, xi - 1),
                    (yi + 1, xi + 1),
                ];
                let horiz = [(yi, xi - 1), (yi, xi + 1)];
                let vert = [(yi - 1, xi), (yi + 1, xi)];
                let own = [(yi, xi)];
                let mut emit = |color: usize, taps: &[(isize, isize)]| {
                    let wt = 1.0 / taps.len() as f64;
                    for &(ty, tx) in taps {
                        f(out(color), src(ty, tx), wt);
                    }
                };
                match (y % 2, x % 2) {
                    (0, 0) => {
                        emit(0, &own);
                        emit(1, &cross);
                        emit(2, &diag);
                    }
                    (0, 1) => {
                        emit(0, &horiz);
                        emit(1, &own);
                        emit(2, &vert);
                    }
                    (1, 0) => {
                        emit(0, &vert);
                        emit(1, &own);
                        emit(2, &horiz);
                    }
                    _ => {
                        emit(0, &diag);
                        emit(1, &cross);
                        emit(2, &own);
                    }
                }
            }
        }
    }
}

/// Index into an RGB `(N, 3, H, W)` buffer of the site feeding packed channel `ch` at `(y, x)`.
#[inline]
pub(crate) fn mosaic_index(s: usize, ch: usize, y: usize, x: usize, h: usize, w: usize) -> usize {
    let color = [0, 1, 1, 2][ch];
    let (yy, xx) = (2 * y + ch / 2, 2 * x + ch % 2);
    ((s * 3 + color) * h + yy) * w + xx
}

/// Planar RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    /// Planar `3 x H x W`.
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec([1, 3, self.height, self.width], self.data.clone())
            .expect("rgb buffer is 3 x H x W")
    }
}

/// Minimalist ISP settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IspParams {
    pub wb_gains: [f32; 3],
    /// Row-major 3x3 color correction matrix applied to linear RGB.
    pub ccm: [[f32; 3]; 3],
    pub gamma: bool,
}

impl IspParams {
    pub const DEFAULT_WB: [f32; 3] = [2.0, 1.0, 1.6];
    pub const IDENTITY_CCM: [[f32; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    pub fn validate(&self) -> Result<()> {
        if self.wb_gains.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
            return Err(config_err!(
                "white balance gains must be positive, got {:?}",
                self.wb_gains
            ));
        }
        if self.ccm.iter().flatten().any(|v| !v.is_finite()) {
            return Err(config_err!("color matrix must be finite"));
        }
        Ok(())
    }

    /// Linear pass-through: unit gains, identity matrix, no transfer curve.
    pub fn linear() -> Self {
        Self {
            wb_gains: [1.0; 3],
            ccm: Self::IDENTITY_CCM,
            gamma: false,
        }
    }
}

impl Default for IspParams {
    fn default() -> Self {
        Self {
            wb_gains: Self::DEFAULT_WB,
            ccm: Self::IDENTITY_CCM,
            gamma: true,
        }
    }
}

/// Records the ISP on a graph: packed RGGB `(N, 4, h, w)` in, RGB `(N, 3, 2h, 2w)` out.
pub fn isp_graph<T: Real>(g: &mut Graph<T>, packed: Var, p: &IspParams) -> Result<Var> {
    p.validate()?;
    let [r, gg, b] = p.wb_gains.map(|v| T::lit(v as f64));
    let x = g.scale_channels(packed, &[r, gg, gg, b])?;
    let x = g.clamp(x, T::zero(), T::one());
    let x = g.demosaic(x)?;
    let ccm = Tensor::from_fn([3, 3, 1, 1], |[o, i, _, _]| T::lit(p.ccm[o][i] as f64));
    let ccm = g.constant(ccm);
    let x = g.conv2d(x, ccm, None, 1, 0, 1)?;
    let x = g.clamp(x, T::zero(), T::one());
    Ok(if p.gamma { g.srgb(x) } else { x })
}

/// WB (clipped) -> bilinear demosaic -> CCM -> sRGB transfer, clipped to `[0, 1]`.
pub fn isp(raw: &BayerImage, p: &IspParams) -> Result<RgbImage> {
    let mut g = Graph::<f32>::new();
    let x = g.constant(pack(raw)?);
    let y = isp_graph(&mut g, x, p)?;
    let t = g.value(y);
    Ok(RgbImage {
        height: t.h(),
        width: t.w(),
        data: t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    })
}

pub fn srgb_to_linear(v: f32) -> f32 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// Simplified unprocessing: inverse transfer curve, inverse white balance,
/// RGGB mosaic. The color matrix is not inverted.
pub fn simple_unprocess(rgb: &RgbImage, p: &IspParams) -> Result<BayerImage> {
    p.validate()?;
    if !rgb.height.is_multiple_of(2) || !rgb.width.is_multiple_of(2) {
        return Err(shape_err!(
            "unprocess needs even dims, got {}x{}",
            rgb.height,
            rgb.width
        ));
    }
    let linear = |c: usize, y: usize, x: usize| {
        let v = rgb.at(c, y, x).clamp(0.0, 1.0);
        let v = if p.gamma { srgb_to_linear(v) } else { v };
        v / p.wb_gains[c]
    };
    let mut img = BayerImage::from_fn(rgb.height, rgb.width, CfaPattern::Rggb, |y, x| {
        let c = match (y % 2, x % 2) {
            (0, 0) => 0,
            (1, 1) => 2,
            _ => 1,
        };
        linear(c, y, x)
    });
    img.meta.wb_gains = p.wb_gains;
    Ok(img)
}
