//! Separable Gaussian smoothing on masked grids.

/// Normalised 1-D Gaussian kernel truncated at `4 * sigma`.
fn kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|x| x / s).collect()
}

fn convolve_rows(src: &[f64], n_lat: usize, n_lon: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; src.len()];
    for i in 0..n_lat {
        let row = &src[i * n_lon..(i + 1) * n_lon];
        for j in 0..n_lon {
            let mut acc = 0.0;
            for (t, &w) in k.iter().enumerate() {
                let jj = j as isize + t as isize - r;
                if jj >= 0 && (jj as usize) < n_lon {
                    acc += w * row[jj as usize];
                }
            }
            out[i * n_lon + j] = acc;
        }
    }
    out
}

fn convolve_cols(src: &[f64], n_lat: usize, n_lon: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; src.len()];
    for i in 0..n_lat {
        for (t, &w) in k.iter().enumerate() {
            let ii = i as isize + t as isize - r;
            if ii < 0 || ii as usize >= n_lat {
                continue;
            }
            let src_row = &src[ii as usize * n_lon..(ii as usize + 1) * n_lon];
            let dst = &mut out[i * n_lon..(i + 1) * n_lon];
            for (d, s) in dst.iter_mut().zip(src_row) {
                *d += w * s;
            }
        }
    }
    out
}

/// Plain separable Gaussian blur with zero padding.
pub fn gaussian_blur(values: &[f64], n_lat: usize, n_lon: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let k = kernel(sigma);
    let tmp = convolve_rows(values, n_lat, n_lon, &k);
    convolve_cols(&tmp, n_lat, n_lon, &k)
}

/// Normalised convolution: only mask-true cells contribute, and the result is
/// renormalised by the blurred mask. Masked-out cells keep their input value.
pub fn masked_gaussian_blur(values: &[f64], mask: &[bool], n_lat: usize, n_lon: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let weighted: Vec<f64> = values
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let num = gaussian_blur(&weighted, n_lat, n_lon, sigma);
    let den = gaussian_blur(&weights, n_lat, n_lon, sigma);
    values
        .iter()
        .zip(mask)
        .zip(num.iter().zip(&den))
        .map(|((&v, &m), (&n, &d))| if m && d > 1e-12 { n / d } else { v })
        .collect()
}

/// Smooth standard-normal-ish random field: blurred white noise rescaled to
/// unit sample std.
pub fn smooth_noise<R: rand::Rng>(rng: &mut R, n_lat: usize, n_lon: usize, sigma: f64) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let white: Vec<f64> = (0..n_lat * n_lon).map(|_| StandardNormal.sample(rng)).collect();
    let mut f = gaussian_blur(&white, n_lat, n_lon, sigma);
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let std = (f.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std > 0.0 {
        for x in &mut f {
            *x = (*x - mean) / std;
        }
    }
    f
}
