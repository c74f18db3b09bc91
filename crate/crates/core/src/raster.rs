//! Raster primitives shared by the coarse and fine detection stages.
//!
//! Images are row-major with `(u, v)` = (column, row). Pixel `(u, v)` spans
//! `[u, u + 1) × [v, v + 1)`, so blob centroids are reported at pixel centres.

use std::collections::VecDeque;

use crate::camera::{DepthImage, FilterConfig};
use crate::error::{Error, Result};
use crate::pgm;

/// Filtered projection.
///
/// `intensity` is the blurred closed validity mask ("support") in `[0, 1]`.
/// `depth` is the depth smoothed over closed-mask pixels only, 0 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub intensity: Vec<f64>,
    pub mask: Vec<bool>,
    pub depth: Vec<f64>,
}

impl GrayImage {
    /// Intensity-only image; every pixel counts as valid with zero depth.
    pub fn from_intensity(width: usize, height: usize, intensity: Vec<f64>) -> Self {
        assert_eq!(intensity.len(), width * height);
        GrayImage {
            width,
            height,
            mask: vec![true; width * height],
            depth: vec![0.0; width * height],
            intensity,
        }
    }

    pub fn write_pgm(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let data: Vec<u8> = self
            .intensity
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        pgm::write_pgm8(path, self.width, self.height, &data, &["support".into()])
    }
}

/// `true` = white (material), `false` = black (void).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryImage {
    pub fn get(&self, u: usize, v: usize) -> bool {
        self.data[v * self.width + u]
    }

    pub fn count(&self, white: bool) -> usize {
        self.data.iter().filter(|p| **p == white).count()
    }

    pub fn write_pgm(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let data: Vec<u8> = self.data.iter().map(|w| if *w { 255 } else { 0 }).collect();
        pgm::write_pgm8(path, self.width, self.height, &data, &[])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientImage {
    pub width: usize,
    pub height: usize,
    pub magnitude: Vec<f64>,
    /// Unit direction where magnitude > 0, zero otherwise.
    pub gx: Vec<f64>,
    pub gy: Vec<f64>,
}

impl GradientImage {
    pub fn max_magnitude(&self) -> f64 {
        self.magnitude.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub pixels: Vec<(usize, usize)>,
    pub area: usize,
    /// Mean pixel centre `(u + 0.5, v + 0.5)`.
    pub centroid: (f64, f64),
    /// Inclusive `(u_min, v_min, u_max, v_max)`.
    pub bbox: (usize, usize, usize, usize),
    pub touches_border: bool,
}

impl Blob {
    pub fn bbox_contains(&self, u: f64, v: f64) -> bool {
        let (u0, v0, u1, v1) = self.bbox;
        u >= u0 as f64 && v >= v0 as f64 && u <= (u1 + 1) as f64 && v <= (v1 + 1) as f64
    }
}

/// Sliding min or max over a square window of side `k`; pixels outside the
/// image read as `outside`.
fn square_extremum(w: usize, h: usize, src: &[bool], k: usize, want: bool, outside: bool) -> Vec<bool> {
    let r = (k / 2) as isize;
    let pass = |src: &[bool], horizontal: bool| -> Vec<bool> {
        let mut out = vec![!want; w * h];
        for v in 0..h {
            for u in 0..w {
                let hit = (-r..=r).any(|d| {
                    let (uu, vv) = if horizontal {
                        (u as isize + d, v as isize)
                    } else {
                        (u as isize, v as isize + d)
                    };
                    if uu < 0 || vv < 0 || uu >= w as isize || vv >= h as isize {
                        outside == want
                    } else {
                        src[vv as usize * w + uu as usize] == want
                    }
                });
                out[v * w + u] = if hit { want } else { !want };
            }
        }
        out
    };
    let tmp = pass(src, true);
    pass(&tmp, false)
}

/// Morphological closing with a `k × k` square; the image border does not erode.
pub fn close_mask(w: usize, h: usize, mask: &[bool], k: usize) -> Vec<bool> {
    if k <= 1 {
        return mask.to_vec();
    }
    let dilated = square_extremum(w, h, mask, k, true, false);
    square_extremum(w, h, &dilated, k, false, true)
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as isize;
    if sigma <= 0.0 || size <= 1 {
        let mut k = vec![0.0; size.max(1)];
        k[size.max(1) / 2] = 1.0;
        return k;
    }
    let k: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|x| x / s).collect()
}

/// Separable weighted convolution of `values`, counting only pixels where
/// `weight_mask` holds and renormalizing by the weight that landed.
/// Returns (smoothed, accumulated weight).
fn masked_convolve(w: usize, h: usize, values: &[f64], weight_mask: &[bool], kernel: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let r = (kernel.len() / 2) as isize;
    let mut num = vec![0.0; w * h];
    let mut den = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            let (mut n, mut d) = (0.0, 0.0);
            for (j, kw) in kernel.iter().enumerate() {
                let uu = u as isize + j as isize - r;
                if uu < 0 || uu >= w as isize {
                    continue;
                }
                let i = v * w + uu as usize;
                if weight_mask[i] {
                    n += kw * values[i];
                    d += kw;
                }
            }
            num[v * w + u] = n;
            den[v * w + u] = d;
        }
    }
    let mut out_n = vec![0.0; w * h];
    let mut out_d = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            let (mut n, mut d) = (0.0, 0.0);
            for (j, kw) in kernel.iter().enumerate() {
                let vv = v as isize + j as isize - r;
                if vv < 0 || vv >= h as isize {
                    continue;
                }
                let i = vv as usize * w + u;
                n += kw * num[i];
                d += kw * den[i];
            }
            out_n[v * w + u] = n;
            out_d[v * w + u] = d;
        }
    }
    (out_n, out_d)
}

/// Plain separable Gaussian blur with zero padding.
///
/// Scatters from non-zero samples only, so sparse vote maps blur cheaply.
pub fn gaussian_blur(w: usize, h: usize, values: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(size, sigma);
    let r = kernel.len() / 2;
    let mut tmp = vec![0.0; w * h];
    for v in 0..h {
        let row = &values[v * w..(v + 1) * w];
        let out = &mut tmp[v * w..(v + 1) * w];
        for (u, &x) in row.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let lo = u.saturating_sub(r);
            let hi = (u + r + 1).min(w);
            for (uu, o) in out[lo..hi].iter_mut().enumerate() {
                *o += kernel[lo + uu + r - u] * x;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for v in 0..h {
        let lo = v.saturating_sub(r);
        let hi = (v + r + 1).min(h);
        for vv in lo..hi {
            let kw = kernel[vv + r - v];
            let (src, dst) = (&tmp[v * w..(v + 1) * w], vv * w);
            for (u, &x) in src.iter().enumerate() {
                out[dst + u] += kw * x;
            }
        }
    }
    out
}

/// Closing on the validity mask, then Gaussian blur.
///
/// Newly closed pixels take the mean depth of valid pixels in their window;
/// depth is then blurred over the closed mask with renormalized weights.
pub fn close_and_blur(img: &DepthImage, f: &FilterConfig) -> Result<GrayImage> {
    f.validate()?;
    let (w, h) = (img.width, img.height);
    if f.morph_kernel > w.min(h) || f.blur_kernel > w.min(h) {
        return Err(Error::Config(format!(
            "filter kernels {}/{} exceed image size {w}x{h}",
            f.morph_kernel, f.blur_kernel
        )));
    }
    let mask = close_mask(w, h, &img.valid, f.morph_kernel);

    let boxk = vec![1.0; f.morph_kernel];
    let (bn, bd) = masked_convolve(w, h, &img.depth, &img.valid, &boxk);
    let filled: Vec<f64> = (0..w * h)
        .map(|i| {
            if img.valid[i] {
                img.depth[i]
            } else if mask[i] && bd[i] > 0.0 {
                bn[i] / bd[i]
            } else {
                0.0
            }
        })
        .collect();
    // A closed pixel with no valid neighbour in its window cannot get a depth.
    let mask: Vec<bool> = (0..w * h).map(|i| mask[i] && (img.valid[i] || bd[i] > 0.0)).collect();

    let g = gaussian_kernel(f.blur_kernel, f.blur_sigma);
    let (dn, dd) = masked_convolve(w, h, &filled, &mask, &g);
    let depth: Vec<f64> = (0..w * h)
        .map(|i| if mask[i] && dd[i] > 0.0 { dn[i] / dd[i] } else { 0.0 })
        .collect();
    let ones: Vec<f64> = mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect();
    let intensity = gaussian_blur(w, h, &ones, f.blur_kernel, f.blur_sigma)
        .into_iter()
        .map(|x| x.clamp(0.0, 1.0))
        .collect();
    Ok(GrayImage {
        width: w,
        height: h,
        intensity,
        mask,
        depth,
    })
}

/// White where support is positive and at least `threshold`.
pub fn binarize(img: &GrayImage, threshold: f64) -> BinaryImage {
    BinaryImage {
        width: img.width,
        height: img.height,
        data: img.intensity.iter().map(|&s| s > 0.0 && s >= threshold).collect(),
    }
}

/// 3×3 Sobel on arbitrary samples; border pixels get zero gradient.
pub fn sobel_raw(w: usize, h: usize, values: &[f64]) -> GradientImage {
    let mut out = GradientImage {
        width: w,
        height: h,
        magnitude: vec![0.0; w * h],
        gx: vec![0.0; w * h],
        gy: vec![0.0; w * h],
    };
    if w < 3 || h < 3 {
        return out;
    }
    let at = |u: usize, v: usize| values[v * w + u];
    for v in 1..h - 1 {
        for u in 1..w - 1 {
            let gx = (at(u + 1, v - 1) + 2.0 * at(u + 1, v) + at(u + 1, v + 1))
                - (at(u - 1, v - 1) + 2.0 * at(u - 1, v) + at(u - 1, v + 1));
            let gy = (at(u - 1, v + 1) + 2.0 * at(u, v + 1) + at(u + 1, v + 1))
                - (at(u - 1, v - 1) + 2.0 * at(u, v - 1) + at(u + 1, v - 1));
            let m = (gx * gx + gy * gy).sqrt();
            let i = v * w + u;
            if m > 1e-12 {
                out.magnitude[i] = m;
                out.gx[i] = gx / m;
                out.gy[i] = gy / m;
            }
        }
    }
    out
}

pub fn sobel(img: &GrayImage) -> GradientImage {
    sobel_raw(img.width, img.height, &img.intensity)
}

/// 8-connected components of one colour, largest first.
pub fn components(img: &BinaryImage, white: bool) -> Vec<Blob> {
    let (w, h) = (img.width, img.height);
    let mut seen = vec![false; w * h];
    let mut blobs = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if seen[start] || img.data[start] != white {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        let (mut su, mut sv) = (0.0, 0.0);
        let (mut u0, mut v0, mut u1, mut v1) = (usize::MAX, usize::MAX, 0, 0);
        let mut border = false;
        while let Some(i) = queue.pop_front() {
            let (u, v) = (i % w, i / w);
            pixels.push((u, v));
            su += u as f64 + 0.5;
            sv += v as f64 + 0.5;
            u0 = u0.min(u);
            v0 = v0.min(v);
            u1 = u1.max(u);
            v1 = v1.max(v);
            border |= u == 0 || v == 0 || u + 1 == w || v + 1 == h;
            for dv in -1isize..=1 {
                for du in -1isize..=1 {
                    let (uu, vv) = (u as isize + du, v as isize + dv);
                    if uu < 0 || vv < 0 || uu >= w as isize || vv >= h as isize {
                        continue;
                    }
                    let j = vv as usize * w + uu as usize;
                    if !seen[j] && img.data[j] == white {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        let n = pixels.len();
        blobs.push(Blob {
            area: n,
            centroid: (su / n as f64, sv / n as f64),
            bbox: (u0, v0, u1, v1),
            touches_border: border,
            pixels,
        });
    }
    // Stable sort keeps scan order among equal areas.
    blobs.sort_by(|a, b| b.area.cmp(&a.area));
    blobs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraSettings;
    use crate::geometry::RigidTransform;
    use proptest::prelude::*;

    fn depth_image(w: usize, h: usize, valid: Vec<bool>) -> DepthImage {
        DepthImage {
            width: w,
            height: h,
            depth: valid.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect(),
            valid,
            settings: CameraSettings::new(1.0, 90.0, w, h).unwrap(),
            camera_pose: RigidTransform::identity(),
        }
    }

    fn filter(morph: usize, blur: usize, sigma: f64) -> FilterConfig {
        FilterConfig {
            morph_kernel: morph,
            blur_kernel: blur,
            blur_sigma: sigma,
            binary_threshold: 0.5,
        }
    }

    /// Closing by definition: a pixel survives iff every k-window containing
    /// it holds a set pixel (with out-of-image pixels read as set).
    fn brute_close(w: usize, h: usize, m: &[bool], k: usize) -> Vec<bool> {
        let r = (k / 2) as isize;
        let get = |u: isize, v: isize, img: &[bool], out: bool| {
            if u < 0 || v < 0 || u >= w as isize || v >= h as isize {
                out
            } else {
                img[v as usize * w + u as usize]
            }
        };
        let mut dil = vec![false; w * h];
        for v in 0..h as isize {
            for u in 0..w as isize {
                dil[v as usize * w + u as usize] =
                    (-r..=r).any(|dv| (-r..=r).any(|du| get(u + du, v + dv, m, false)));
            }
        }
        let mut out = vec![false; w * h];
        for v in 0..h as isize {
            for u in 0..w as isize {
                out[v as usize * w + u as usize] =
                    (-r..=r).all(|dv| (-r..=r).all(|du| get(u + du, v + dv, &dil, true)));
            }
        }
        out
    }

    #[test]
    fn checkerboard_closes_to_full() {
        let valid: Vec<bool> = (0..64).map(|i| (i % 8 + i / 8) % 2 == 0).collect();
        assert_eq!(brute_close(8, 8, &valid, 3), vec![true; 64]);
        let g = close_and_blur(&depth_image(8, 8, valid), &filter(3, 1, 0.0)).unwrap();
        assert!(g.mask.iter().all(|m| *m));
        assert!(g.intensity.iter().all(|s| (*s - 1.0).abs() < 1e-12));
        assert!(g.depth.iter().all(|d| (*d - 1.0).abs() < 1e-12));
    }

    #[test]
    fn unit_kernels_are_identity() {
        let valid: Vec<bool> = (0..100).map(|i| i % 7 == 0 || i % 3 == 1).collect();
        let img = depth_image(10, 10, valid.clone());
        let g = close_and_blur(&img, &filter(1, 1, 0.0)).unwrap();
        assert_eq!(g.mask, valid);
        assert_eq!(g.depth, img.depth);
    }

    #[test]
    fn oversized_kernel_is_config_error() {
        let img = depth_image(4, 4, vec![true; 16]);
        assert!(matches!(close_and_blur(&img, &filter(5, 1, 0.0)), Err(Error::Config(_))));
    }

    #[test]
    fn dense_image_only_blurs_at_border() {
        let img = depth_image(12, 12, vec![true; 144]);
        let g = close_and_blur(&img, &filter(5, 5, 1.0)).unwrap();
        assert!(g.mask.iter().all(|m| *m));
        assert!(g.depth.iter().all(|d| (*d - 1.0).abs() < 1e-12));
        assert!((g.intensity[6 * 12 + 6] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn binarize_extremes() {
        let solid = GrayImage::from_intensity(5, 5, vec![1.0; 25]);
        assert_eq!(binarize(&solid, 0.5).count(true), 25);
        let empty = GrayImage::from_intensity(5, 5, vec![0.0; 25]);
        assert_eq!(binarize(&empty, 0.0).count(true), 0);
    }

    #[test]
    fn sobel_constant_and_step() {
        let g = sobel_raw(6, 6, &vec![3.0; 36]);
        assert!(g.magnitude.iter().all(|m| *m == 0.0));
        let step: Vec<f64> = (0..36).map(|i| if i % 6 >= 3 { 1.0 } else { 0.0 }).collect();
        let g = sobel_raw(6, 6, &step);
        let i = 2 * 6 + 3;
        assert!(g.magnitude[i] > 0.0);
        assert_eq!((g.gx[i], g.gy[i]), (1.0, 0.0));
        for u in 0..6 {
            assert_eq!(g.magnitude[u], 0.0);
        }
    }

    fn disk(w: usize, cx: f64, cy: f64, r: f64) -> Vec<f64> {
        (0..w * w)
            .map(|i| {
                let (u, v) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
                if (u - cx).hypot(v - cy) <= r {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    #[test]
    fn disk_gradient_peaks_on_rim() {
        let (w, r) = (32, 9.0);
        let g = sobel_raw(w, w, &disk(w, 16.0, 16.0, r));
        let max = g.max_magnitude();
        for (i, m) in g.magnitude.iter().enumerate() {
            if *m >= 0.99 * max {
                let (u, v) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
                let d = (u - 16.0).hypot(v - 16.0);
                assert!((d - r).abs() <= 1.5, "max at distance {d}");
            }
        }
    }

    #[test]
    fn mirrored_image_mirrors_gx() {
        let w = 11;
        let src: Vec<f64> = (0..w * w).map(|i| ((i * 37) % 11) as f64).collect();
        let mirrored: Vec<f64> = (0..w * w).map(|i| src[(i / w) * w + (w - 1 - i % w)]).collect();
        let (a, b) = (sobel_raw(w, w, &src), sobel_raw(w, w, &mirrored));
        for v in 0..w {
            for u in 0..w {
                let (i, j) = (v * w + u, v * w + (w - 1 - u));
                assert!((a.magnitude[i] - b.magnitude[j]).abs() < 1e-12);
                assert!((a.gx[i] + b.gx[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn disk_and_annulus_components() {
        let w = 40;
        let img = BinaryImage {
            width: w,
            height: w,
            data: disk(w, 12.0, 20.0, 6.0).iter().zip(disk(w, 29.0, 20.0, 5.0)).map(|(a, b)| *a > 0.0 || b > 0.0).collect(),
        };
        let blobs = components(&img, true);
        assert_eq!(blobs.len(), 2);
        assert!((blobs[0].centroid.0 - 12.0).abs() < 0.5 && (blobs[0].centroid.1 - 20.0).abs() < 0.5);

        // White plate with a central void: largest white blob is the plate, the
        // void sits inside its box and away from the border.
        let plate: Vec<bool> = disk(w, 20.0, 20.0, 16.0)
            .iter()
            .zip(disk(w, 20.0, 20.0, 4.0))
            .map(|(a, b)| *a > 0.0 && b == 0.0)
            .collect();
        let img = BinaryImage { width: w, height: w, data: plate };
        let white = components(&img, true);
        let black = components(&img, false);
        assert_eq!(white.len(), 1);
        let void = black.iter().find(|b| !b.touches_border).unwrap();
        assert!(white[0].bbox_contains(void.centroid.0, void.centroid.1));
        assert!((void.centroid.0 - 20.0).abs() < 0.5);
    }

    proptest! {
        #[test]
        fn closing_matches_definition_and_is_idempotent(bits in prop::collection::vec(any::<bool>(), 144), k in prop::sample::select(vec![1usize, 3, 5])) {
            let once = close_mask(12, 12, &bits, k);
            prop_assert_eq!(&once, &brute_close(12, 12, &bits, k));
            prop_assert_eq!(close_mask(12, 12, &once, k), once);
        }

        #[test]
        fn blob_areas_partition_colour(bits in prop::collection::vec(any::<bool>(), 100)) {
            let img = BinaryImage { width: 10, height: 10, data: bits };
            for colour in [true, false] {
                let blobs = components(&img, colour);
                prop_assert_eq!(blobs.iter().map(|b| b.area).sum::<usize>(), img.count(colour));
                for b in &blobs {
                    prop_assert!(b.bbox_contains(b.centroid.0, b.centroid.1));
                }
            }
        }
    }
}
