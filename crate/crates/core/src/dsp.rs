//! Audio frontend: Hamming window, radix-2 FFT, HTK mel filterbank, and the
//! log-mel spectrogram. Also a DFT-mask band-pass used for EEG preprocessing
//! outside the training path.
//!
//! Frame convention: the waveform is reflect-padded by win/2 on both ends
//! and frames start every hop, so frame count is ceil(len/hop). At 16 kHz
//! with a 10 ms hop, t seconds give exactly 100*t frames.

use alloc::vec;
use alloc::vec::Vec;

use crate::array::Array;
use crate::error::{degenerate_err, Error, Result};

pub const LOG_FLOOR: f64 = 1e-10;

/// Symmetric Hamming window, the 0.54/0.46 form.
pub fn hamming_window(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * libm::cos(2.0 * core::f64::consts::PI * i as f64 / (n - 1) as f64))
        .collect()
}

/// In-place iterative radix-2 FFT. Length must be a power of two.
pub fn fft_radix2(re: &mut [f64], im: &mut [f64]) -> Result<()> {
    let n = re.len();
    if n != im.len() {
        return Err(Error::Usage("fft re/im length mismatch".into()));
    }
    if n == 0 || n & (n - 1) != 0 {
        return Err(Error::Usage("fft length must be a power of two".into()));
    }
    // Bit-reversal permutation.
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
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * core::f64::consts::PI / len as f64;
        let (wr, wi) = (libm::cos(ang), libm::sin(ang));
        let mut i = 0;
        while i < n {
            let (mut cr, mut ci) = (1.0f64, 0.0f64);
            for k in 0..len / 2 {
                let (ur, ui) = (re[i + k], im[i + k]);
                let (vr0, vi0) = (re[i + k + len / 2], im[i + k + len / 2]);
                let vr = vr0 * cr - vi0 * ci;
                let vi = vr0 * ci + vi0 * cr;
                re[i + k] = ur + vr;
                im[i + k] = ui + vi;
                re[i + k + len / 2] = ur - vr;
                im[i + k + len / 2] = ui - vi;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
            i += len;
        }
        len <<= 1;
    }
    Ok(())
}

/// Power spectrum |X_k|^2 for k = 0..n/2 of a real frame zero-padded to
/// n_fft.
pub fn power_spectrum(frame: &[f64], n_fft: usize) -> Result<Vec<f64>> {
    if frame.len() > n_fft {
        return Err(Error::Usage("frame longer than n_fft".into()));
    }
    let mut re = vec![0.0; n_fft];
    let mut im = vec![0.0; n_fft];
    re[..frame.len()].copy_from_slice(frame);
    fft_radix2(&mut re, &mut im)?;
    Ok((0..=n_fft / 2)
        .map(|k| re[k] * re[k] + im[k] * im[k])
        .collect())
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * libm::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (libm::pow(10.0, mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank, triangles computed in mel space (HTK style),
/// spanning 0 Hz to sr/2. Returns n_mels rows of n_fft/2+1 weights.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Array<f64> {
    let n_bins = n_fft / 2 + 1;
    let mel_max = hz_to_mel(sample_rate as f64 / 2.0);
    let grid: Vec<f64> = (0..n_mels + 2)
        .map(|j| mel_max * j as f64 / (n_mels + 1) as f64)
        .collect();
    let mut fb = Array::zeros(n_mels, n_bins);
    for k in 0..n_bins {
        let mel_k = hz_to_mel(k as f64 * sample_rate as f64 / n_fft as f64);
        for m in 0..n_mels {
            let (lo, mid, hi) = (grid[m], grid[m + 1], grid[m + 2]);
            let w = if mel_k >= lo && mel_k <= mid {
                (mel_k - lo) / (mid - lo)
            } else if mel_k > mid && mel_k <= hi {
                (hi - mel_k) / (hi - mid)
            } else {
                0.0
            };
            if w > 0.0 {
                *fb.at_mut(m, k) = w;
            }
        }
    }
    fb
}

/// Reflect padding without repeating the edge sample. Needs pad <= len-1.
fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    for i in 0..pad {
        out.push(x[pad - i]);
    }
    out.extend_from_slice(x);
    for i in 0..pad {
        out.push(x[n - 2 - i]);
    }
    out
}

#[derive(Debug, Clone)]
pub struct Spectrogram {
    /// n_mels x frames log energies.
    pub values: Array<f64>,
    pub sample_rate: u32,
    pub win_ms: u32,
    pub hop_ms: u32,
}

impl Spectrogram {
    pub fn n_mels(&self) -> usize {
        self.values.rows()
    }
    pub fn frames(&self) -> usize {
        self.values.cols()
    }
}

fn next_pow2(n: usize) -> usize {
    let mut p = 1;
    while p < n {
        p <<= 1;
    }
    p
}

/// Log mel spectrogram of mono PCM samples. Window and hop are given in
/// milliseconds; defaults elsewhere are 25/10 with 128 mel bins.
pub fn log_mel_spectrogram(
    samples: &[f64],
    sample_rate: u32,
    n_mels: usize,
    win_ms: u32,
    hop_ms: u32,
) -> Result<Spectrogram> {
    if sample_rate == 0 || n_mels == 0 || win_ms == 0 || hop_ms == 0 {
        return Err(Error::Config("spectrogram settings must be positive".into()));
    }
    let win = (sample_rate as usize * win_ms as usize) / 1000;
    let hop = (sample_rate as usize * hop_ms as usize) / 1000;
    if samples.len() < win {
        return Err(degenerate_err!(
            "waveform of {} samples is shorter than one {win}-sample window",
            samples.len()
        ));
    }
    let padded = reflect_pad(samples, win / 2);
    let frames = samples.len().div_ceil(hop);
    let n_fft = next_pow2(win);
    let window = hamming_window(win);
    let fb = mel_filterbank(n_mels, n_fft, sample_rate);

    let mut values = Array::zeros(n_mels, frames);
    let mut frame = vec![0.0; win];
    for t in 0..frames {
        let start = t * hop;
        for i in 0..win {
            frame[i] = padded[start + i] * window[i];
        }
        let power = power_spectrum(&frame, n_fft)?;
        for m in 0..n_mels {
            let mut acc = 0.0;
            for (k, &p) in power.iter().enumerate() {
                acc += fb.at(m, k) * p;
            }
            *values.at_mut(m, t) = libm::log(acc.max(LOG_FLOOR));
        }
    }
    Ok(Spectrogram {
        values,
        sample_rate,
        win_ms,
        hop_ms,
    })
}

/// Zero every DFT bin outside [lo_hz, hi_hz] and invert. Exact O(n^2) DFT;
/// this is a preprocessing utility, not a training-path op.
pub fn bandpass_dft_mask(signal: &[f64], sample_rate: u32, lo_hz: f64, hi_hz: f64) -> Vec<f64> {
    let n = signal.len();
    if n == 0 {
        return Vec::new();
    }
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for k in 0..n {
        let mut sr = 0.0;
        let mut si = 0.0;
        for (t, &x) in signal.iter().enumerate() {
            let ang = -2.0 * core::f64::consts::PI * k as f64 * t as f64 / n as f64;
            sr += x * libm::cos(ang);
            si += x * libm::sin(ang);
        }
        re[k] = sr;
        im[k] = si;
    }
    for k in 0..n {
        // Bin k aliases with bin n-k; both map to the same |frequency|.
        let freq = k.min(n - k) as f64 * sample_rate as f64 / n as f64;
        if freq < lo_hz || freq > hi_hz {
            re[k] = 0.0;
            im[k] = 0.0;
        }
    }
    let mut out = vec![0.0; n];
    for (t, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for k in 0..n {
            let ang = 2.0 * core::f64::consts::PI * k as f64 * t as f64 / n as f64;
            acc += re[k] * libm::cos(ang) - im[k] * libm::sin(ang);
        }
        *o = acc / n as f64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::naive_dft;
    use crate::rng::Rng;

    #[test]
    fn fft_matches_naive_dft() {
        let mut rng = Rng::from_seed(42);
        let x: Vec<f64> = (0..64).map(|_| rng.normal_f64()).collect();
        let mut re = x.clone();
        let mut im = vec![0.0; 64];
        fft_radix2(&mut re, &mut im).unwrap();
        let (wre, wim) = naive_dft(&x);
        for k in 0..64 {
            assert!((re[k] - wre[k]).abs() < 1e-9, "re bin {k}");
            assert!((im[k] - wim[k]).abs() < 1e-9, "im bin {k}");
        }
    }

    #[test]
    fn fft_rejects_non_power_of_two() {
        let mut re = vec![0.0; 12];
        let mut im = vec![0.0; 12];
        assert!(fft_radix2(&mut re, &mut im).is_err());
    }

    #[test]
    fn hamming_is_symmetric_with_positive_taper() {
        let w = hamming_window(400);
        assert!((w[0] - 0.08).abs() < 1e-12);
        for i in 0..400 {
            assert!((w[i] - w[399 - i]).abs() < 1e-12);
            assert!(w[i] > 0.0);
        }
    }

    #[test]
    fn frame_counts_are_one_hundred_per_second() {
        for t in [1usize, 2, 5] {
            let samples = vec![0.01; 16_000 * t];
            let spec = log_mel_spectrogram(&samples, 16_000, 16, 25, 10).unwrap();
            assert_eq!(spec.frames(), 100 * t, "t = {t}s");
        }
    }

    #[test]
    fn too_short_waveform_is_degenerate() {
        let samples = vec![0.0; 399];
        assert!(matches!(
            log_mel_spectrogram(&samples, 16_000, 16, 25, 10),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn silence_hits_the_log_floor_everywhere() {
        let samples = vec![0.0; 16_000];
        let spec = log_mel_spectrogram(&samples, 16_000, 16, 25, 10).unwrap();
        let floor = libm::log(LOG_FLOOR);
        for &v in spec.values.data() {
            assert_eq!(v, floor);
        }
    }

    #[test]
    fn pure_tone_peaks_at_the_nearest_mel_center() {
        let freq = 1000.0;
        let n = 16_000;
        let samples: Vec<f64> = (0..n)
            .map(|i| libm::sin(2.0 * core::f64::consts::PI * freq * i as f64 / 16_000.0))
            .collect();
        let n_mels = 32;
        let spec = log_mel_spectrogram(&samples, 16_000, n_mels, 25, 10).unwrap();
        // Average energy per mel bin over all frames, then argmax.
        let mut best = (0usize, f64::NEG_INFINITY);
        for m in 0..n_mels {
            let e: f64 = spec.values.row_slice(m).iter().sum();
            if e > best.1 {
                best = (m, e);
            }
        }
        // The mel center (grid point m+1) nearest 1 kHz.
        let mel_max = hz_to_mel(8000.0);
        let mut want = (0usize, f64::INFINITY);
        for m in 0..n_mels {
            let center = mel_to_hz(mel_max * (m + 1) as f64 / (n_mels + 1) as f64);
            let dist = (center - freq).abs();
            if dist < want.1 {
                want = (m, dist);
            }
        }
        assert_eq!(best.0, want.0);
    }

    #[test]
    fn filterbank_weights_cover_all_but_the_dc_triangle() {
        // At 128 mels over a 512-point FFT the first triangle ends below the
        // first non-DC bin, so filter 0 alone may be empty.
        let fb = mel_filterbank(128, 512, 16_000);
        for m in 0..128 {
            let row = fb.row_slice(m);
            assert!(row.iter().all(|&w| w >= 0.0));
            let s: f64 = row.iter().sum();
            if m > 0 {
                assert!(s > 0.0, "mel filter {m} is empty");
            }
        }
    }

    #[test]
    fn bandpass_keeps_in_band_and_kills_out_of_band() {
        let n = 200;
        let sr = 200;
        // 10 Hz (in band) + 80 Hz (out of band), 1 second.
        let x: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / sr as f64;
                libm::sin(2.0 * core::f64::consts::PI * 10.0 * t)
                    + libm::sin(2.0 * core::f64::consts::PI * 80.0 * t)
            })
            .collect();
        let y = bandpass_dft_mask(&x, sr, 5.0, 40.0);
        let pure: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / sr as f64;
                libm::sin(2.0 * core::f64::consts::PI * 10.0 * t)
            })
            .collect();
        for (a, b) in y.iter().zip(&pure) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
