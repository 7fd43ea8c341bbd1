use std::f64::consts::PI;

use mtrans::kspace::{
    degrade_lr, fft2, ifft2, make_mask, undersample, zero_fill, ComplexGrid, MaskKind, SamplingMask,
};
use mtrans::rng::{rng_from_seed, uniform};
use mtrans::Image;
use num_complex::Complex64;
use proptest::prelude::*;

fn random_grid(seed: u64, h: usize, w: usize) -> ComplexGrid<f64> {
    let mut rng = rng_from_seed(seed);
    let values = (0..h * w)
        .map(|_| Complex64::new(uniform(&mut rng, -1.0, 1.0), uniform(&mut rng, -1.0, 1.0)))
        .collect();
    ComplexGrid::new(h, w, values).unwrap()
}

fn random_image(seed: u64, h: usize, w: usize) -> Image<f64> {
    let mut rng = rng_from_seed(seed);
    Image::from_fn(h, w, |_, _| uniform(&mut rng, 0.0, 1.0))
}

/// Centered unitary DFT by direct summation, frequencies and positions
/// both indexed from `-N/2`.
fn dft(x: &ComplexGrid<f64>, sign: f64) -> ComplexGrid<f64> {
    let (h, w) = (x.height(), x.width());
    let norm = 1.0 / ((h * w) as f64).sqrt();
    let mut out = Vec::with_capacity(h * w);
    for ky in 0..h {
        for kx in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for ny in 0..h {
                for nx in 0..w {
                    let phase = (ky as f64 - (h / 2) as f64) * (ny as f64 - (h / 2) as f64) / h as f64
                        + (kx as f64 - (w / 2) as f64) * (nx as f64 - (w / 2) as f64) / w as f64;
                    acc += x.get(ny, nx) * Complex64::from_polar(1.0, sign * 2.0 * PI * phase);
                }
            }
            out.push(acc * norm);
        }
    }
    ComplexGrid::new(h, w, out).unwrap()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn fft_matches_dft_matrix() {
    for (h, w) in [(8, 8), (16, 16), (8, 16)] {
        let x = random_grid(h as u64 * 31 + w as u64, h, w);
        assert!(fft2(&x).unwrap().max_abs_diff(&dft(&x, -1.0)) < 1e-12);
        assert!(ifft2(&x).unwrap().max_abs_diff(&dft(&x, 1.0)) < 1e-12);
    }
}

#[test]
fn fft_identities() {
    for n in [8, 32, 64] {
        let x = random_grid(n as u64, n, n);
        let y = fft2(&x).unwrap();
        assert!(ifft2(&y).unwrap().max_abs_diff(&x) < 1e-12);
        assert!((y.energy() - x.energy()).abs() <= 1e-12 * x.energy());
    }
    // A unit impulse at the centre has a flat spectrum.
    let mut delta = ComplexGrid::<f64>::zeros(8, 8);
    delta.values_mut()[4 * 8 + 4] = Complex64::new(1.0, 0.0);
    let y = fft2(&delta).unwrap();
    assert!(y.values().iter().all(|v| (v - Complex64::new(0.125, 0.0)).norm() < 1e-15));
    assert!(fft2(&ComplexGrid::<f64>::zeros(6, 8)).is_err());
}

#[test]
fn undersample_matches_loop() {
    let y = random_grid(3, 16, 16);
    let mask = make_mask(MaskKind::Random, 4, 0.08, 16, 11).unwrap();
    let masked = undersample(&y, &mask).unwrap();
    for r in 0..16 {
        for c in 0..16 {
            let expect = if mask.columns[c] { y.get(r, c) } else { Complex64::new(0.0, 0.0) };
            assert_eq!(masked.get(r, c), expect);
        }
    }
    assert!(undersample(&y, &SamplingMask::full(8)).is_err());
}

#[test]
fn zero_fill_matches_dft_oracle() {
    for n in [8, 16] {
        let x = random_image(n as u64, n, n);
        let y = fft2(&ComplexGrid::from_real(&x)).unwrap();
        let mask = make_mask(MaskKind::Equispaced, 2, 0.125, n, 2).unwrap();
        let masked = undersample(&y, &mask).unwrap();
        let got = zero_fill(&masked).unwrap();
        let oracle = dft(&masked, 1.0).magnitude();
        assert!(max_abs(got.data(), oracle.data()) < 1e-12);
        let full = zero_fill(&undersample(&y, &SamplingMask::full(n)).unwrap()).unwrap();
        assert!(max_abs(full.data(), x.data()) < 1e-12);
    }
}

#[test]
fn degrade_lr_matches_dft_oracle() {
    for n in [8, 16] {
        let x = random_image(100 + n as u64, n, n);
        let y = fft2(&ComplexGrid::from_real(&x)).unwrap();
        let got = degrade_lr(&y, 2).unwrap();
        assert_eq!(got.dims(), (n / 2, n / 2));
        // Crop the oracle spectrum, invert at the reduced size, divide by s.
        let spec = dft(&ComplexGrid::from_real(&x), -1.0);
        let m = n / 2;
        let off = n / 2 - m / 2;
        let crop: Vec<Complex64> = (0..m * m).map(|i| spec.get(off + i / m, off + i % m)).collect();
        let oracle = dft(&ComplexGrid::new(m, m, crop).unwrap(), 1.0).magnitude().map(|v| v / 2.0);
        assert!(max_abs(got.data(), oracle.data()) < 1e-12);
        assert!(degrade_lr(&y, 1).unwrap().max_abs_diff(&x) < 1e-12);
    }
    let c = Image::<f64>::constant(16, 16, 0.7);
    let y = fft2(&ComplexGrid::from_real(&c)).unwrap();
    for s in [2, 4] {
        assert!(degrade_lr(&y, s).unwrap().data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }
    assert!(degrade_lr(&y, 3).is_err());
}

#[test]
fn masks_are_seeded_and_budgeted() {
    for (r, cf) in [(4, 0.08), (6, 0.06), (8, 0.04)] {
        for kind in [MaskKind::Random, MaskKind::Equispaced] {
            let a = make_mask(kind, r, cf, 128, 7).unwrap();
            assert_eq!(a.count(), 128 / r as usize);
            assert_eq!(a, make_mask(kind, r, cf, 128, 7).unwrap());
        }
    }
    assert!(make_mask(MaskKind::Random, 1, 0.08, 32, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fft_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (x, y) = (random_grid(seed, 16, 8), random_grid(seed ^ 1, 16, 8));
        let combo: Vec<Complex64> = x.values().iter().zip(y.values()).map(|(u, v)| u * a + v * b).collect();
        let lhs = fft2(&ComplexGrid::new(16, 8, combo).unwrap()).unwrap();
        let (fx, fy) = (fft2(&x).unwrap(), fft2(&y).unwrap());
        let rhs: Vec<Complex64> = fx.values().iter().zip(fy.values()).map(|(u, v)| u * a + v * b).collect();
        prop_assert!(lhs.max_abs_diff(&ComplexGrid::new(16, 8, rhs).unwrap()) < 1e-12);
    }

    #[test]
    fn parseval_and_round_trip(seed in any::<u64>(), lh in 1u32..6, lw in 1u32..6) {
        let (h, w) = (1usize << lh, 1usize << lw);
        let x = random_grid(seed, h, w);
        let y = fft2(&x).unwrap();
        prop_assert!((y.energy() - x.energy()).abs() <= 1e-12 * x.energy().max(1.0));
        prop_assert!(ifft2(&y).unwrap().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn full_mask_round_trip_is_identity(seed in any::<u64>()) {
        let x = random_image(seed, 16, 16);
        let y = fft2(&ComplexGrid::from_real(&x)).unwrap();
        let back = zero_fill(&undersample(&y, &SamplingMask::full(16)).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&x) < 1e-12);
    }
}
