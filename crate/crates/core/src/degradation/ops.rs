use candle_core::{DType, Device, Tensor};

use super::Kernel;
use crate::error::{domain, Result};
use crate::image::ImagePlane;
use crate::nn::{conv2d, flip_spatial, reflect_pad};

/// Differentiable `(x * k)↓s` on tensors.
///
/// `x` is `(N, C, H, W)` and `k` is `(kh, kw)`; gradients flow to both. The
/// image is reflect-padded, convolved channel-wise with `k` (true
/// convolution, anchor tap at `((kh-1)/2, (kw-1)/2)`), and sampled at rows and
/// columns `0, s, 2s, ...`. Output is `(N, C, H/s, W/s)` with floor division.
pub fn downscale(x: &Tensor, k: &Tensor, s: usize) -> Result<Tensor> {
    if s == 0 {
        return Err(domain!("scale factor must be >= 1"));
    }
    let (n, c, h, w) = x.dims4()?;
    let (kh, kw) = k.dims2()?;
    if kh > h || kw > w {
        return Err(domain!("kernel {kh}x{kw} larger than image {h}x{w}"));
    }
    let (ho, wo) = (h / s, w / s);
    if ho == 0 || wo == 0 {
        return Err(domain!("image {h}x{w} smaller than scale {s}"));
    }
    let (ay, ax) = ((kh - 1) / 2, (kw - 1) / 2);
    let planes = x.reshape((n * c, 1, h, w))?;
    let padded = reflect_pad(&planes, kh - 1 - ay, ay, kw - 1 - ax, ax)?;
    let kernel = flip_spatial(&k.reshape((1, 1, kh, kw))?)?;
    let y = conv2d(&padded, &kernel.to_dtype(x.dtype())?, s, 0)?;
    let y = y.narrow(2, 0, ho)?.narrow(3, 0, wo)?;
    Ok(y.reshape((n, c, ho, wo))?)
}

pub fn kernel_tensor(k: &Kernel, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_slice(k.values(), k.size(), device)?.to_dtype(dtype)?)
}

/// The degradation model `I_LR = (I_HR * k)↓s` on an [`ImagePlane`]; the
/// output keeps the input's range tag. Computed in f64 by the same operator
/// used inside the reconstruction loss.
pub fn convolve_downsample(img: &ImagePlane, k: &Kernel, s: usize) -> Result<ImagePlane> {
    let dev = Device::Cpu;
    let x = img.to_tensor(DType::F64, &dev)?;
    let y = downscale(&x, &kernel_tensor(k, DType::F64, &dev)?, s)?;
    ImagePlane::from_tensor(&y, img.range())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ValueRange;
    use crate::nn::reflect_index;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Direct nested-loop evaluation of the degradation model.
    fn oracle(img: &ImagePlane, k: &Kernel, s: usize) -> Vec<f64> {
        let (h, w) = (img.height(), img.width());
        let (ay, ax) = k.anchor();
        let mut out = Vec::new();
        for c in 0..img.channels() {
            for i in 0..h / s {
                for j in 0..w / s {
                    let mut acc = 0.0;
                    for a in 0..k.height() {
                        for b in 0..k.width() {
                            let y = reflect_index((s * i + ay) as isize - a as isize, h);
                            let x = reflect_index((s * j + ax) as isize - b as isize, w);
                            acc += k.at(a, b) * img.get(c, y, x);
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    fn random_image(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> ImagePlane {
        ImagePlane::from_fn(h, w, c, ValueRange::Unit, |_, _, _| rng.random::<f64>()).unwrap()
    }

    fn random_kernel(rng: &mut impl Rng, h: usize, w: usize) -> Kernel {
        Kernel::from_fn(h, w, |_, _| rng.random::<f64>()).unwrap().normalized().unwrap()
    }

    #[test]
    fn delta_kernel_is_identity_at_unit_scale() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 9, 7, 3);
        let out = convolve_downsample(&img, &Kernel::delta(3, 3, 0, 0).unwrap(), 1).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn delta_kernel_subsamples_at_lattice_origin() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 8, 10, 1);
        let out = convolve_downsample(&img, &Kernel::delta(5, 5, 0, 0).unwrap(), 2).unwrap();
        assert_eq!((out.height(), out.width()), (4, 5));
        for i in 0..4 {
            for j in 0..5 {
                assert!((out.get(0, i, j) - img.get(0, 2 * i, 2 * j)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn shifted_delta_translates_image() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 12, 12, 1);
        let out = convolve_downsample(&img, &Kernel::delta(5, 5, 1, 2).unwrap(), 1).unwrap();
        for y in 1..12 {
            for x in 2..12 {
                assert!((out.get(0, y, x) - img.get(0, y - 1, x - 2)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn random_8x8_matches_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 8, 8, 1);
        let k = random_kernel(&mut rng, 3, 3);
        let out = convolve_downsample(&img, &k, 2).unwrap();
        for (a, b) in out.data().iter().zip(oracle(&img, &k, 2)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn error_paths() {
        let img = ImagePlane::filled(4, 4, 1, 0.5, ValueRange::Unit).unwrap();
        assert!(convolve_downsample(&img, &Kernel::delta(5, 5, 0, 0).unwrap(), 1).is_err());
        assert!(convolve_downsample(&img, &Kernel::delta(3, 3, 0, 0).unwrap(), 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn matches_oracle_on_small_inputs(
            h in 5usize..=16, w in 5usize..=16, kh in 1usize..=5, kw in 1usize..=5,
            s in prop::sample::select(vec![1usize, 2, 4]), c in prop::sample::select(vec![1usize, 3]),
            seed in any::<u64>(),
        ) {
            prop_assume!(h / s > 0 && w / s > 0);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let img = random_image(&mut rng, h, w, c);
            let k = random_kernel(&mut rng, kh, kw);
            let out = convolve_downsample(&img, &k, s).unwrap();
            for (a, b) in out.data().iter().zip(oracle(&img, &k, s)) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn constant_images_are_preserved(
            value in 0.0f64..1.0, kh in 1usize..=5, kw in 1usize..=5, s in 1usize..=4, seed in any::<u64>(),
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let img = ImagePlane::filled(16, 16, 1, value, ValueRange::Unit).unwrap();
            let out = convolve_downsample(&img, &random_kernel(&mut rng, kh, kw), s).unwrap();
            prop_assert!(out.data().iter().all(|v| (v - value).abs() <= 1e-6));
        }

        #[test]
        fn operator_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let i1 = random_image(&mut rng, 12, 12, 3);
            let i2 = random_image(&mut rng, 12, 12, 3);
            let k = random_kernel(&mut rng, 3, 4);
            let mix = ImagePlane::from_fn(12, 12, 3, ValueRange::Unit, |c, y, x| a * i1.get(c, y, x) + b * i2.get(c, y, x)).unwrap();
            let lhs = convolve_downsample(&mix, &k, 2).unwrap();
            let r1 = convolve_downsample(&i1, &k, 2).unwrap();
            let r2 = convolve_downsample(&i2, &k, 2).unwrap();
            for ((l, x), y) in lhs.data().iter().zip(r1.data()).zip(r2.data()) {
                prop_assert!((l - (a * x + b * y)).abs() <= 1e-5);
            }
        }
    }
}
