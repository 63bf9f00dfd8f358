//! Pixel-space set averaging, 2-D FFT magnitude analysis, low-frequency
//! energy ratios, and PPM montage export.

use crate::kkt::SyntheticSet;
use crate::nn::atomic_write;
use crate::tensor::kernels::bilinear_resize_chan;
use crate::tensor::{Tensor, TensorError};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("set mismatch: {0}")]
    Mismatch(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("i/o at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Pixelwise mean of two sets with identical shapes and label sequences.
/// The result carries zero multipliers: averaging invalidates them.
pub fn average_sets(a: &SyntheticSet, b: &SyntheticSet) -> Result<SyntheticSet, AnalysisError> {
    if a.images.shape() != b.images.shape() {
        return Err(AnalysisError::Mismatch(format!(
            "image shapes {:?} vs {:?}",
            a.images.shape(),
            b.images.shape()
        )));
    }
    if a.labels != b.labels {
        return Err(AnalysisError::Mismatch("label sequences differ".into()));
    }
    let data: Vec<f64> = a
        .images
        .data()
        .iter()
        .zip(b.images.data())
        .map(|(x, y)| (x + y) / 2.0)
        .collect();
    let images = Tensor::from_vec(a.images.shape().to_vec(), data)?;
    Ok(SyntheticSet { images, labels: a.labels.clone(), lambdas: vec![0.0; a.labels.len()] })
}

fn is_pow2(n: usize) -> bool {
    n >= 1 && n & (n - 1) == 0
}

fn next_pow2(n: usize) -> usize {
    let mut p = 1;
    while p < n {
        p <<= 1;
    }
    p
}

/// In-place radix-2 Cooley-Tukey over interleaved (re, im) pairs.
fn fft_inplace(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert!(is_pow2(n));
    // bit-reversal permutation
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2usize;
    while len <= n {
        let ang = -2.0 * std::f64::consts::PI / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        let mut start = 0usize;
        while start < n {
            let (mut cr, mut ci) = (1.0f64, 0.0f64);
            for k in 0..len / 2 {
                let (ur, ui) = (re[start + k], im[start + k]);
                let (vr0, vi0) = (re[start + k + len / 2], im[start + k + len / 2]);
                let vr = vr0 * cr - vi0 * ci;
                let vi = vr0 * ci + vi0 * cr;
                re[start + k] = ur + vr;
                im[start + k] = ui + vi;
                re[start + k + len / 2] = ur - vr;
                im[start + k + len / 2] = ui - vi;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
            start += len;
        }
        len <<= 1;
    }
}

/// Complex 2-D FFT of a real channel; dimensions must be powers of two.
fn fft2(chan: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = chan.to_vec();
    let mut im = vec![0.0; h * w];
    // rows
    for y in 0..h {
        fft_inplace(&mut re[y * w..(y + 1) * w], &mut im[y * w..(y + 1) * w]);
    }
    // columns
    let mut cr = vec![0.0; h];
    let mut ci = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            cr[y] = re[y * w + x];
            ci[y] = im[y * w + x];
        }
        fft_inplace(&mut cr, &mut ci);
        for y in 0..h {
            re[y * w + x] = cr[y];
            im[y * w + x] = ci[y];
        }
    }
    (re, im)
}

fn fftshift(data: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[((y + h / 2) % h) * w + (x + w / 2) % w] = data[y * w + x];
        }
    }
    out
}

/// Magnitude spectrum of one channel with the DC bin at the center.
/// Non-power-of-two inputs are bilinearly resampled up to the next power of
/// two first.
pub fn fft2_magnitude(chan: &Tensor) -> Result<Tensor, AnalysisError> {
    let s = chan.shape();
    if s.len() != 2 {
        return Err(AnalysisError::Invalid(format!("expected (h, w), got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let (data, h, w) = if is_pow2(h) && is_pow2(w) {
        (chan.data().to_vec(), h, w)
    } else {
        let (nh, nw) = (next_pow2(h), next_pow2(w));
        (bilinear_resize_chan(chan.data(), h, w, nh, nw), nh, nw)
    };
    let (re, im) = fft2(&data, h, w);
    let mag: Vec<f64> = re
        .iter()
        .zip(&im)
        .map(|(r, i)| (r * r + i * i).sqrt())
        .collect();
    Ok(Tensor::from_vec(vec![h, w], fftshift(&mag, h, w))?)
}

/// Fraction of spectral energy (squared magnitudes, DC included) inside the
/// centered disc whose radius is `radius_frac` of the full corner distance.
pub fn low_freq_energy_ratio(chan: &Tensor, radius_frac: f64) -> Result<f64, AnalysisError> {
    if !(radius_frac > 0.0 && radius_frac <= 1.0) {
        return Err(AnalysisError::Invalid(format!(
            "radius fraction {radius_frac} outside (0, 1]"
        )));
    }
    let mag = fft2_magnitude(chan)?;
    let s = mag.shape();
    let (h, w) = (s[0], s[1]);
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let r_max = (cy * cy + cx * cx).sqrt();
    let r_cut = radius_frac * r_max;
    let mut inside = 0.0f64;
    let mut total = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let e = mag.data()[y * w + x].powi(2);
            total += e;
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            if d <= r_cut {
                inside += e;
            }
        }
    }
    if total == 0.0 {
        // an all-zero image has no energy anywhere; call it all low-frequency
        return Ok(1.0);
    }
    Ok(inside / total)
}

/// Montage grid layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub rows: usize,
    pub cols: usize,
}

/// Per-image min-max normalization to [0, 255]; zero-range images map to
/// mid-gray 128.
fn normalize_to_u8(img: &[f64]) -> Vec<u8> {
    let lo = img.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = img.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if hi <= lo {
        return vec![128u8; img.len()];
    }
    img.iter()
        .map(|&v| (255.0 * (v - lo) / (hi - lo)).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Write the set as a binary PPM (P6) montage; grayscale channels are
/// replicated to RGB, 3-channel images are written as-is.
pub fn export_images(
    set: &SyntheticSet,
    path: &Path,
    layout: Layout,
) -> Result<(), AnalysisError> {
    let s = set.images.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if layout.rows * layout.cols < n {
        return Err(AnalysisError::Invalid(format!(
            "layout {}x{} cannot hold {n} images",
            layout.rows, layout.cols
        )));
    }
    if c != 1 && c != 3 {
        return Err(AnalysisError::Invalid(format!(
            "PPM export needs 1 or 3 channels, got {c}"
        )));
    }
    let (out_h, out_w) = (layout.rows * h, layout.cols * w);
    let mut rgb = vec![0u8; out_h * out_w * 3];
    for i in 0..n {
        let norm = normalize_to_u8(&set.images.data()[i * c * h * w..(i + 1) * c * h * w]);
        let (gy, gx) = (i / layout.cols, i % layout.cols);
        for y in 0..h {
            for x in 0..w {
                let dst = (((gy * h + y) * out_w) + gx * w + x) * 3;
                for ch in 0..3 {
                    let src = if c == 1 { y * w + x } else { (ch * h + y) * w + x };
                    rgb[dst + ch] = norm[src];
                }
            }
        }
    }
    let mut bytes = format!("P6\n{out_w} {out_h}\n255\n").into_bytes();
    bytes.extend_from_slice(&rgb);
    atomic_write(path, &bytes).map_err(|source| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parse a P6 header, returning (width, height, max value).
pub fn read_ppm_header(path: &Path) -> Result<(usize, usize, usize), AnalysisError> {
    let bytes = std::fs::read(path).map_err(|source| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let header = String::from_utf8_lossy(&bytes[..bytes.len().min(64)]).to_string();
    let mut fields = header.split_ascii_whitespace();
    let magic = fields.next().unwrap_or("");
    if magic != "P6" {
        return Err(AnalysisError::Invalid(format!("not a P6 file: magic {magic:?}")));
    }
    let mut next_num = || -> Result<usize, AnalysisError> {
        fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| AnalysisError::Invalid("bad PPM header".into()))
    };
    let w = next_num()?;
    let h = next_num()?;
    let maxv = next_num()?;
    Ok((w, h, maxv))
}

/// Naive O(N^4) direct DFT magnitude with the DC bin centered — the oracle
/// for `fft2_magnitude` on power-of-two inputs.
pub fn naive_dft_magnitude(chan: &Tensor) -> Result<Tensor, AnalysisError> {
    let s = chan.shape();
    if s.len() != 2 {
        return Err(AnalysisError::Invalid(format!("expected (h, w), got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let mut mag = vec![0.0; h * w];
    for ky in 0..h {
        for kx in 0..w {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for y in 0..h {
                for x in 0..w {
                    let phase = -2.0
                        * std::f64::consts::PI
                        * (ky as f64 * y as f64 / h as f64 + kx as f64 * x as f64 / w as f64);
                    let v = chan.data()[y * w + x];
                    re += v * phase.cos();
                    im += v * phase.sin();
                }
            }
            mag[ky * w + kx] = (re * re + im * im).sqrt();
        }
    }
    Ok(Tensor::from_vec(vec![h, w], fftshift(&mag, h, w))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn set_of(images: Tensor, labels: Vec<usize>) -> SyntheticSet {
        let n = labels.len();
        SyntheticSet { images, labels, lambdas: vec![0.1; n] }
    }

    #[test]
    fn average_identities() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 1, 4, 4], &mut r);
        let a = set_of(x.clone(), vec![0, 1, 2]);

        let same = average_sets(&a, &a).unwrap();
        assert!(same.images.bit_eq(&x));
        assert_eq!(same.lambdas, vec![0.0; 3]);

        let neg = set_of(x.map(|v| -v), vec![0, 1, 2]);
        let zero = average_sets(&a, &neg).unwrap();
        assert!(zero.images.data().iter().all(|&v| v == 0.0));

        let b = set_of(Tensor::randn(&[3, 1, 4, 4], &mut r), vec![0, 1, 2]);
        let ab = average_sets(&a, &b).unwrap();
        let ba = average_sets(&b, &a).unwrap();
        assert!(ab.images.bit_eq(&ba.images));

        let mismatched = set_of(Tensor::randn(&[3, 1, 4, 4], &mut r), vec![0, 1, 1]);
        assert!(average_sets(&a, &mismatched).is_err());
    }

    #[test]
    fn fft_constant_and_impulse() {
        let constant = Tensor::full(&[8, 8], 3.0);
        let mag = fft2_magnitude(&constant).unwrap();
        // all energy at the centered DC bin
        for y in 0..8 {
            for x in 0..8 {
                let v = mag.data()[y * 8 + x];
                if (y, x) == (4, 4) {
                    assert!((v - 3.0 * 64.0).abs() <= 1e-9);
                } else {
                    assert!(v.abs() <= 1e-9);
                }
            }
        }

        let mut impulse = vec![0.0; 64];
        impulse[2 * 8 + 5] = 1.0;
        let mag = fft2_magnitude(&Tensor::from_vec(vec![8, 8], impulse).unwrap()).unwrap();
        for &v in mag.data() {
            assert!((v - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn fft_matches_naive_dft_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let chan = Tensor::randn(&[8, 8], &mut r);
        let fast = fft2_magnitude(&chan).unwrap();
        let slow = naive_dft_magnitude(&chan).unwrap();
        assert!(fast.max_abs_diff(&slow) <= 1e-9);
    }

    #[test]
    fn parseval_holds() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let chan = Tensor::randn(&[16, 16], &mut r);
        let mag = fft2_magnitude(&chan).unwrap();
        let pixel_energy: f64 = chan.data().iter().map(|v| v * v).sum();
        let bin_energy: f64 = mag.data().iter().map(|v| v * v).sum::<f64>() / 256.0;
        assert!((pixel_energy - bin_energy).abs() / pixel_energy <= 1e-9);
    }

    #[test]
    fn spectrum_of_real_input_is_point_symmetric() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let chan = Tensor::randn(&[8, 8], &mut r);
        let mag = fft2_magnitude(&chan).unwrap();
        // conjugate symmetry: |F(u, v)| = |F(-u, -v)|; after the shift the
        // non-Nyquist bins mirror through the center
        for y in 1..8 {
            for x in 1..8 {
                let a = mag.data()[y * 8 + x];
                let b = mag.data()[(8 - y) % 8 * 8 + (8 - x) % 8];
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn low_freq_ratio_limits_and_monotonicity() {
        let constant = Tensor::full(&[8, 8], 2.5);
        assert!((low_freq_energy_ratio(&constant, 0.1).unwrap() - 1.0).abs() <= 1e-12);

        let mut r = ChaCha8Rng::seed_from_u64(5);
        let noise = Tensor::randn(&[8, 8], &mut r);
        assert!((low_freq_energy_ratio(&noise, 1.0).unwrap() - 1.0).abs() <= 1e-12);

        // checkerboard at Nyquist: tiny radius excludes the corners
        let board: Vec<f64> = (0..64)
            .map(|i| if (i / 8 + i % 8) % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let board = Tensor::from_vec(vec![8, 8], board).unwrap();
        let ratio = low_freq_energy_ratio(&board, 0.2).unwrap();
        assert!(ratio <= 1e-12, "checkerboard low-frequency ratio {ratio}");

        let mut last = 0.0;
        for k in 1..=10 {
            let r = low_freq_energy_ratio(&noise, k as f64 / 10.0).unwrap();
            assert!(r >= last - 1e-15, "not monotone at {k}");
            last = r;
        }

        assert!(low_freq_energy_ratio(&noise, 0.0).is_err());
        assert!(low_freq_energy_ratio(&noise, 1.5).is_err());
    }

    #[test]
    fn non_pow2_inputs_are_resampled() {
        let chan = Tensor::full(&[6, 6], 1.0);
        let mag = fft2_magnitude(&chan).unwrap();
        assert_eq!(mag.shape(), &[8, 8]);
    }

    #[test]
    fn montage_layout_and_reparse() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("grid.ppm");
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let set = set_of(Tensor::randn(&[10, 1, 5, 7], &mut r), (0..10).collect());
        export_images(&set, &path, Layout { rows: 1, cols: 10 }).unwrap();
        let (w, h, maxv) = read_ppm_header(&path).unwrap();
        assert_eq!((w, h, maxv), (70, 5, 255));

        // constant image exports as mid-gray
        let flat = set_of(Tensor::full(&[1, 1, 2, 2], 7.0), vec![0]);
        export_images(&flat, &path, Layout { rows: 1, cols: 1 }).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes[bytes.len() - 1], 128);

        // undersized layout is rejected
        assert!(export_images(&set, &path, Layout { rows: 1, cols: 3 }).is_err());
    }
}
