//! Paired-exposure alignment: Shi-Tomasi corners, iterative Lucas-Kanade
//! tracking, and a global translation correction that keeps the Bayer phase.

use serde::{Deserialize, Serialize};

use crate::bayer::{unify_bayer, BayerImage};
use crate::error::{shape_err, Error, Result};

/// Single-channel float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Self {
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
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample with edge clamping.
    pub fn sample(&self, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let p = |yy, xx| self.at(yy, xx) as f64;
        (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1))
            + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1))
    }

    fn scaled(&self, s: f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    fn median(&self) -> f32 {
        let mut v = self.data.clone();
        let mid = v.len() / 2;
        *v.select_nth_unstable_by(mid, f32::total_cmp).1
    }
}

/// Tracked points, their flows `(dx, dy)`, and the mean translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowEstimate {
    pub points: Vec<(f32, f32)>,
    pub flows: Vec<(f32, f32)>,
    pub global: (f64, f64),
}

impl FlowEstimate {
    /// Keeps the successfully tracked points and averages their flows.
    pub fn from_tracks(points: &[(f32, f32)], tracks: &[Option<(f32, f32)>]) -> Self {
        let (points, flows): (Vec<_>, Vec<_>) = points
            .iter()
            .zip(tracks)
            .filter_map(|(&p, t)| t.map(|f| (p, f)))
            .unzip();
        let n = flows.len().max(1) as f64;
        let global = (
            flows.iter().map(|f| f.0 as f64).sum::<f64>() / n,
            flows.iter().map(|f| f.1 as f64).sum::<f64>() / n,
        );
        Self {
            points,
            flows,
            global,
        }
    }
}

/// Minimum eigenvalue of the gradient structure tensor summed over 3x3.
fn corner_score(img: &Plane) -> Vec<f64> {
    let (h, w) = (img.height, img.width);
    let mut gxx = vec![0.0f64; h * w];
    let mut gxy = vec![0.0f64; h * w];
    let mut gyy = vec![0.0f64; h * w];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let ix = (img.at(y, x + 1) - img.at(y, x - 1)) as f64 * 0.5;
            let iy = (img.at(y + 1, x) - img.at(y - 1, x)) as f64 * 0.5;
            let i = y * w + x;
            gxx[i] = ix * ix;
            gxy[i] = ix * iy;
            gyy[i] = iy * iy;
        }
    }
    let mut score = vec![0.0f64; h * w];
    for y in 2..h - 2 {
        for x in 2..w - 2 {
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for yy in y - 1..=y + 1 {
                for xx in x - 1..=x + 1 {
                    let i = yy * w + xx;
                    a += gxx[i];
                    b += gxy[i];
                    c += gyy[i];
                }
            }
            score[y * w + x] = 0.5 * (a + c - ((a - c).powi(2) + 4.0 * b * b).sqrt());
        }
    }
    score
}

/// Shi-Tomasi corners: 3x3 local maxima of the min-eigenvalue score above
/// `quality * max`, strongest first, greedily thinned to `min_dist`.
pub fn detect_corners(
    gray: &Plane,
    max_points: usize,
    quality: f64,
    min_dist: f64,
) -> Result<Vec<(f32, f32)>> {
    if gray.height < 16 || gray.width < 16 {
        return Err(shape_err!(
            "corner detection needs at least 16x16, got {}x{}",
            gray.height,
            gray.width
        ));
    }
    let (h, w) = (gray.height, gray.width);
    let score = corner_score(gray);
    let max = score.iter().cloned().fold(0.0, f64::max);
    if max <= 1e-12 {
        return Ok(Vec::new());
    }
    let thresh = quality * max;
    let mut cands = Vec::new();
    for y in 3..h - 3 {
        for x in 3..w - 3 {
            let s = score[y * w + x];
            if s <= thresh {
                continue;
            }
            let is_max =
                (y - 1..=y + 1).all(|yy| (x - 1..=x + 1).all(|xx| score[yy * w + xx] <= s));
            if is_max {
                cands.push((s, y, x));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut out: Vec<(f32, f32)> = Vec::new();
    let d2 = min_dist * min_dist;
    for (_, y, x) in cands {
        if out.len() >= max_points {
            break;
        }
        let far = out
            .iter()
            .all(|&(px, py)| (px as f64 - x as f64).powi(2) + (py as f64 - y as f64).powi(2) >= d2);
        if far {
            out.push((x as f32, y as f32));
        }
    }
    Ok(out)
}

/// Iterative Lucas-Kanade on a `window`-square patch. Returns `(dx, dy)` with
/// `next(p + d) ~ prev(p)` per point, or `None` when the point is too close to
/// the border, its structure tensor is near singular, or tracking diverges.
pub fn lucas_kanade(
    prev: &Plane,
    next: &Plane,
    points: &[(f32, f32)],
    window: usize,
    iters: usize,
) -> Result<Vec<Option<(f32, f32)>>> {
    if (prev.height, prev.width) != (next.height, next.width) {
        return Err(shape_err!(
            "frames differ: {}x{} vs {}x{}",
            prev.height,
            prev.width,
            next.height,
            next.width
        ));
    }
    if window < 3 || window.is_multiple_of(2) {
        return Err(shape_err!("window must be odd and >= 3, got {window}"));
    }
    let r = (window / 2) as isize;
    let (h, w) = (prev.height as f64, prev.width as f64);
    let margin = r as f64 + 1.0;
    let track = |&(px, py): &(f32, f32)| -> Option<(f32, f32)> {
        let (px, py) = (px as f64, py as f64);
        if px < margin || py < margin || px > w - 1.0 - margin || py > h - 1.0 - margin {
            return None;
        }
        let mut tpl = Vec::with_capacity(window * window);
        let (mut gxx, mut gxy, mut gyy) = (0.0, 0.0, 0.0);
        for dy in -r..=r {
            for dx in -r..=r {
                let (y, x) = (py + dy as f64, px + dx as f64);
                let ix = 0.5 * (prev.sample(y, x + 1.0) - prev.sample(y, x - 1.0));
                let iy = 0.5 * (prev.sample(y + 1.0, x) - prev.sample(y - 1.0, x));
                gxx += ix * ix;
                gxy += ix * iy;
                gyy += iy * iy;
                tpl.push((prev.sample(y, x), ix, iy));
            }
        }
        let n = (window * window) as f64;
        let min_eig = 0.5 * (gxx + gyy - ((gxx - gyy).powi(2) + 4.0 * gxy * gxy).sqrt()) / n;
        let det = gxx * gyy - gxy * gxy;
        if min_eig < 1e-7 || det.abs() < 1e-18 {
            return None;
        }
        let (mut ux, mut uy) = (0.0f64, 0.0f64);
        for _ in 0..iters {
            let (mut bx, mut by) = (0.0, 0.0);
            let mut k = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (t, ix, iy) = tpl[k];
                    k += 1;
                    let diff = t - next.sample(py + dy as f64 + uy, px + dx as f64 + ux);
                    bx += diff * ix;
                    by += diff * iy;
                }
            }
            let sx = (gyy * bx - gxy * by) / det;
            let sy = (gxx * by - gxy * bx) / det;
            ux += sx;
            uy += sy;
            if !(ux.is_finite() && uy.is_finite()) || ux.abs() > r as f64 || uy.abs() > r as f64 {
                return None;
            }
            if sx * sx + sy * sy < 1e-6 {
                break;
            }
        }
        Some((ux as f32, uy as f32))
    };
    Ok(points.iter().map(track).collect())
}

/// Half-resolution green plane of an RGGB mosaic: the mean of both green sites
/// of each 2x2 tile.
pub fn green_proxy(img: &BayerImage) -> Result<Plane> {
    let u = unify_bayer(img)?;
    let (h, w) = (u.height() / 2, u.width() / 2);
    Ok(Plane::from_fn(h, w, |y, x| {
        0.5 * (u.at(2 * y, 2 * x + 1) + u.at(2 * y + 1, 2 * x))
    }))
}

/// Tracking settings for [`align_pair`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignParams {
    pub max_points: usize,
    pub quality: f64,
    pub min_dist: f64,
    pub window: usize,
    pub iters: usize,
    pub min_tracked: usize,
}

impl Default for AlignParams {
    fn default() -> Self {
        Self {
            max_points: 200,
            quality: 0.01,
            min_dist: 5.0,
            window: 21,
            iters: 10,
            min_tracked: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aligned {
    pub noisy: BayerImage,
    pub clean: BayerImage,
    /// Flow in full-resolution pixels, from clean to noisy.
    pub flow: FlowEstimate,
    /// Applied integer shift `(dx, dy)`, both even.
    pub shift: (i64, i64),
}

/// Estimates the translation from `clean` to `noisy` on green proxies after
/// median brightness matching, rounds it to even pixels, and crops both frames
/// to their overlap so that `noisy[p + shift] ~ clean[p]`.
pub fn align_pair(noisy: &BayerImage, clean: &BayerImage, params: &AlignParams) -> Result<Aligned> {
    if (noisy.height(), noisy.width()) != (clean.height(), clean.width()) {
        return Err(shape_err!(
            "pair differs in size: {}x{} vs {}x{}",
            noisy.height(),
            noisy.width(),
            clean.height(),
            clean.width()
        ));
    }
    let n = unify_bayer(noisy)?;
    let c = unify_bayer(clean)?;
    let gc = green_proxy(&c)?;
    let mut gn = green_proxy(&n)?;
    let (mc, mn) = (gc.median(), gn.median());
    if mn > 0.0 && mc > 0.0 {
        gn = gn.scaled(mc / mn);
    }
    let pts = detect_corners(&gc, params.max_points, params.quality, params.min_dist)?;
    let tracks = lucas_kanade(&gc, &gn, &pts, params.window, params.iters)?;
    let half = FlowEstimate::from_tracks(&pts, &tracks);
    if half.flows.len() < params.min_tracked {
        return Err(Error::Alignment(format!(
            "only {} of {} corners tracked, need {}",
            half.flows.len(),
            pts.len(),
            params.min_tracked
        )));
    }
    let flow = FlowEstimate {
        points: half
            .points
            .iter()
            .map(|&(x, y)| (2.0 * x + 0.5, 2.0 * y + 0.5))
            .collect(),
        flows: half
            .flows
            .iter()
            .map(|&(x, y)| (2.0 * x, 2.0 * y))
            .collect(),
        global: (2.0 * half.global.0, 2.0 * half.global.1),
    };
    let even = |v: f64| 2 * (v / 2.0).round() as i64;
    let (sx, sy) = (even(flow.global.0), even(flow.global.1));
    let (h, w) = (c.height() as i64, c.width() as i64);
    let (oh, ow) = (h - sy.abs(), w - sx.abs());
    if oh < 2 || ow < 2 {
        return Err(Error::Alignment(format!(
            "shift ({sx}, {sy}) leaves no overlap"
        )));
    }
    let (cy, cx) = ((-sy).max(0), (-sx).max(0));
    let clean_out = c.crop(cy as usize, cx as usize, oh as usize, ow as usize)?;
    let noisy_out = n.crop(
        (cy + sy) as usize,
        (cx + sx) as usize,
        oh as usize,
        ow as usize,
    )?;
    Ok(Aligned {
        noisy: noisy_out,
        clean: clean_out,
        flow,
        shift: (sx, sy),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayer::CfaPattern;

    /// Smooth blob texture, continuous in (y, x).
    fn texture(y: f64, x: f64) -> f64 {
        let mut v = 0.3 + 0.05 * (0.11 * x).sin() + 0.05 * (0.07 * y + 1.0).cos();
        for k in 0..40 {
            let k = k as f64;
            let (cy, cx) = ((k * 37.3) % 120.0 + 4.0, (k * 53.9) % 120.0 + 4.0);
            let s = 2.5 + (k * 1.7) % 3.0;
            let amp = if (k as usize).is_multiple_of(2) {
                0.3
            } else {
                -0.2
            };
            v += amp * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp();
        }
        v
    }

    fn plane(dx: f64, dy: f64) -> Plane {
        Plane::from_fn(128, 128, |y, x| {
            texture(y as f64 - dy, x as f64 - dx) as f32
        })
    }

    fn bayer(dx: f64, dy: f64) -> BayerImage {
        let gains = [0.6, 1.0, 1.0, 0.8];
        BayerImage::from_fn(256, 256, CfaPattern::Rggb, |y, x| {
            let g = gains[(y % 2) * 2 + x % 2];
            (g * texture((y as f64 - dy) / 2.0, (x as f64 - dx) / 2.0)) as f32
        })
    }

    #[test]
    fn constant_image_has_no_corners() {
        let p = Plane::from_fn(32, 32, |_, _| 0.4);
        assert!(detect_corners(&p, 50, 0.01, 3.0).unwrap().is_empty());
        assert!(detect_corners(&Plane::from_fn(8, 32, |_, _| 0.0), 5, 0.1, 1.0).is_err());
    }

    #[test]
    fn square_has_four_corner_regions() {
        let p = Plane::from_fn(64, 64, |y, x| {
            if (20..44).contains(&y) && (20..44).contains(&x) {
                1.0
            } else {
                0.0
            }
        });
        let pts = detect_corners(&p, 100, 0.1, 5.0).unwrap();
        assert_eq!(pts.len(), 4, "{pts:?}");
        for (cy, cx) in [(20.0, 20.0), (20.0, 43.0), (43.0, 20.0), (43.0, 43.0)] {
            assert!(pts
                .iter()
                .any(|&(x, y)| (x - cx as f32).abs() <= 2.5 && (y - cy as f32).abs() <= 2.5));
        }
    }

    #[test]
    fn corners_respect_min_dist() {
        let p = plane(0.0, 0.0);
        let pts = detect_corners(&p, 500, 0.01, 7.0).unwrap();
        assert!(pts.len() > 10);
        for (i, a) in pts.iter().enumerate() {
            for b in &pts[i + 1..] {
                assert!(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() >= 7.0);
            }
        }
    }

    fn mean_flow(dx: f64, dy: f64) -> (FlowEstimate, usize) {
        let a = plane(0.0, 0.0);
        let b = plane(dx, dy);
        let pts = detect_corners(&a, 200, 0.01, 5.0).unwrap();
        let tr = lucas_kanade(&a, &b, &pts, 21, 10).unwrap();
        (FlowEstimate::from_tracks(&pts, &tr), pts.len())
    }

    #[test]
    fn lk_recovers_integer_and_subpixel_shifts() {
        let (f, _) = mean_flow(0.0, 0.0);
        assert!(f
            .flows
            .iter()
            .all(|&(x, y)| x.abs() < 1e-4 && y.abs() < 1e-4));
        let (f, _) = mean_flow(2.0, 0.0);
        assert!(f.flows.len() >= 8);
        assert!(
            (f.global.0 - 2.0).abs() < 0.25 && f.global.1.abs() < 0.25,
            "{:?}",
            f.global
        );
        let (f, _) = mean_flow(0.5, 0.0);
        assert!(
            (f.global.0 - 0.5).abs() < 0.15 && f.global.1.abs() < 0.15,
            "{:?}",
            f.global
        );
    }

    #[test]
    fn flat_window_is_dropped() {
        let a = Plane::from_fn(64, 64, |_, x| x as f32 * 0.01);
        let tr = lucas_kanade(&a, &a, &[(32.0, 32.0), (2.0, 2.0)], 21, 10).unwrap();
        assert_eq!(tr, vec![None, None]);
    }

    #[test]
    fn align_corrects_even_shift_and_keeps_phase() {
        let clean = bayer(0.0, 0.0);
        let noisy = bayer(4.0, -2.0)
            .with_data(bayer(4.0, -2.0).data().iter().map(|v| v * 0.5).collect())
            .unwrap();
        let a = align_pair(&noisy, &clean, &AlignParams::default()).unwrap();
        assert!((a.flow.global.0 - 4.0).abs() < 0.25 && (a.flow.global.1 + 2.0).abs() < 0.25);
        assert_eq!(a.shift, (4, -2));
        assert_eq!(
            (a.clean.pattern, a.noisy.pattern),
            (CfaPattern::Rggb, CfaPattern::Rggb)
        );
        assert_eq!((a.clean.height(), a.clean.width()), (254, 252));
        // aligned content matches up to the brightness ratio
        for y in 0..a.clean.height() {
            for x in 0..a.clean.width() {
                assert!((a.noisy.at(y, x) * 2.0 - a.clean.at(y, x)).abs() < 1e-5);
            }
        }
        let again = align_pair(&a.noisy, &a.clean, &AlignParams::default()).unwrap();
        assert!(again.flow.global.0.abs() < 0.25 && again.flow.global.1.abs() < 0.25);
    }

    #[test]
    fn zero_shift_is_identity_and_swap_is_antisymmetric() {
        let clean = bayer(0.0, 0.0);
        let a = align_pair(&clean, &clean, &AlignParams::default()).unwrap();
        assert_eq!(a.shift, (0, 0));
        assert_eq!(a.clean, clean);
        let noisy = bayer(2.0, 0.0);
        let f = align_pair(&noisy, &clean, &AlignParams::default())
            .unwrap()
            .flow
            .global;
        let b = align_pair(&clean, &noisy, &AlignParams::default())
            .unwrap()
            .flow
            .global;
        assert!(
            (f.0 + b.0).abs() < 0.1 && (f.1 + b.1).abs() < 0.1,
            "{f:?} {b:?}"
        );
    }

    #[test]
    fn featureless_pair_fails() {
        let flat = BayerImage::from_fn(64, 64, CfaPattern::Rggb, |_, _| 0.3);
        assert!(matches!(
            align_pair(&flat, &flat, &AlignParams::default()),
            Err(Error::Alignment(_))
        ));
    }
}
