//! Rational-ratio windowed-sinc resampling and the resampling baseline.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::network::SeparationModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Best,
    Fast,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResampleQuality {
    pub tier: Tier,
    /// Sinc zero crossings on each side of the centre tap.
    pub zero_crossings: usize,
    pub window_beta: f64,
    /// Cutoff as a fraction of the lower Nyquist frequency.
    pub rolloff: f64,
}

impl ResampleQuality {
    pub const BEST: Self = Self {
        tier: Tier::Best,
        zero_crossings: 64,
        window_beta: 14.769656459379492,
        rolloff: 0.9475937167399596,
    };

    pub const FAST: Self = Self {
        tier: Tier::Fast,
        zero_crossings: 16,
        window_beta: 8.555504641634386,
        rolloff: 0.85,
    };

    pub fn of(tier: Tier) -> Self {
        match tier {
            Tier::Best => Self::BEST,
            Tier::Fast => Self::FAST,
        }
    }
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..500 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Number of output samples, `⌈L·fs_out/fs_in⌉`.
pub fn output_len(len: usize, fs_in: u32, fs_out: u32) -> usize {
    ((len as u128 * fs_out as u128).div_ceil(fs_in as u128)) as usize
}

struct Interpolator {
    up: u64,
    down: u64,
    half: usize,
    /// `up` phases of `2·half` taps each (tap `j` weights input `k0 + 1 − half + j`).
    table: Vec<Vec<f64>>,
}

impl Interpolator {
    fn new(fs_in: u32, fs_out: u32, q: &ResampleQuality) -> Self {
        let g = gcd(fs_in as u64, fs_out as u64);
        let (up, down) = (fs_out as u64 / g, fs_in as u64 / g);
        let scale = (fs_out as f64 / fs_in as f64).min(1.0);
        let cutoff = scale * q.rolloff;
        let half = (q.zero_crossings as f64 / scale).ceil() as usize;
        let span = q.zero_crossings as f64 / scale;
        let norm = bessel_i0(q.window_beta);
        let table = (0..up)
            .map(|phase| {
                let frac = phase as f64 / up as f64;
                let mut w: Vec<f64> = (0..2 * half)
                    .map(|j| {
                        let tau = frac + half as f64 - 1.0 - j as f64;
                        let u = tau / span;
                        if u.abs() > 1.0 {
                            0.0
                        } else {
                            cutoff * sinc(cutoff * tau) * bessel_i0(q.window_beta * (1.0 - u * u).sqrt()) / norm
                        }
                    })
                    .collect();
                // unit gain at DC for every phase
                let total: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= total);
                w
            })
            .collect();
        Self { up, down, half, table }
    }

    fn run(&self, x: &[f64], out_len: usize) -> Vec<f64> {
        let len = x.len() as i64;
        (0..out_len as u64)
            .map(|n| {
                let pos = n * self.down;
                let k0 = (pos / self.up) as i64;
                let taps = &self.table[(pos % self.up) as usize];
                let first = k0 + 1 - self.half as i64;
                let lo = (-first).max(0) as usize;
                let hi = ((len - first).max(0) as usize).min(taps.len());
                (lo..hi).map(|j| taps[j] * x[(first + j as i64) as usize]).sum()
            })
            .collect()
    }
}

/// Resamples `x` from `fs_in` to `fs_out` with zero-padded edges.
pub fn resample(x: &[f64], fs_in: u32, fs_out: u32, q: ResampleQuality) -> Result<Vec<f64>> {
    if fs_in == 0 || fs_out == 0 {
        return invalid("sampling frequencies must be positive");
    }
    if fs_in == fs_out {
        return Ok(x.to_vec());
    }
    let interp = Interpolator::new(fs_in, fs_out, &q);
    Ok(interp.run(x, output_len(x.len(), fs_in, fs_out)))
}

/// Resamples the mixture to the training rate, separates there with the
/// training geometry, and resamples every output back to `fs`.
pub fn baseline_separate(model: &SeparationModel, x: &[f64], fs: u32, q: ResampleQuality) -> Result<Vec<Vec<f64>>> {
    let fs_train = model.config().fs_train;
    let at_train = resample(x, fs, fs_train, q)?;
    let outputs = model.separate(&at_train, fs_train)?;
    outputs
        .iter()
        .map(|y| {
            let mut back = resample(y, fs_train, fs, q)?;
            back.resize(x.len(), 0.0);
            Ok(back)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, fs: u32, len: usize) -> Vec<f64> {
        (0..len)
            .map(|n| (2.0 * std::f64::consts::PI * freq * n as f64 / fs as f64).sin())
            .collect()
    }

    fn interior_snr(reference: &[f64], estimate: &[f64]) -> f64 {
        let skip = reference.len() / 20;
        let r = &reference[skip..reference.len() - skip];
        let e = &estimate[skip..reference.len() - skip];
        let sig: f64 = r.iter().map(|v| v * v).sum();
        let err: f64 = r.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        10.0 * (sig / err).log10()
    }

    #[test]
    fn identity_rate_is_exact() {
        let x = sine(300.0, 8000, 100);
        assert_eq!(resample(&x, 8000, 8000, ResampleQuality::FAST).unwrap(), x);
        assert!(resample(&x, 0, 8000, ResampleQuality::FAST).is_err());
    }

    #[test]
    fn dc_passes_with_unit_gain() {
        let x = vec![1.0; 2000];
        for q in [ResampleQuality::BEST, ResampleQuality::FAST] {
            for (a, b) in [(8000, 48000), (48000, 8000), (8000, 6000), (44100, 8000)] {
                let y = resample(&x, a, b, q).unwrap();
                let n = y.len();
                for v in &y[n / 4..3 * n / 4] {
                    assert!((v - 1.0).abs() < 1e-3, "{a}->{b}: {v}");
                }
            }
        }
    }

    #[test]
    fn lengths() {
        assert_eq!(output_len(8000, 8000, 48000), 48000);
        assert_eq!(output_len(1001, 48000, 8000), 167);
        let y = resample(&vec![0.0; 1001], 48000, 8000, ResampleQuality::FAST).unwrap();
        assert_eq!(y.len(), 167);
    }

    #[test]
    fn round_trip_sine() {
        let x = sine(1000.0, 8000, 8000);
        for (q, floor) in [(ResampleQuality::BEST, 60.0), (ResampleQuality::FAST, 30.0)] {
            let up = resample(&x, 8000, 48000, q).unwrap();
            let back = resample(&up, 48000, 8000, q).unwrap();
            assert!(interior_snr(&x, &back) >= floor);
        }
    }

    #[test]
    fn bessel_reference_values() {
        assert_eq!(bessel_i0(0.0), 1.0);
        assert!((bessel_i0(1.0) - 1.2660658777520082).abs() < 1e-14);
        assert!((bessel_i0(5.0) - 27.239871823604442).abs() < 1e-11);
    }
}
