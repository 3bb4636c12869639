//! Tape-free forms of the tensor primitives, for code that only needs values.

use crate::autodiff::Tape;
use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

pub use crate::autodiff::downsample_avg;

pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
    let tape = Tape::new();
    let x = tape.constant(input.clone());
    let w = tape.constant(weight.clone());
    let b = bias.map(|b| tape.constant(b.clone()));
    Ok((*x.conv2d(w, b, stride, padding)?.value()).clone())
}

pub fn conv1x1(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let ws = weight.shape();
    if ws.len() != 4 || ws[2] != 1 || ws[3] != 1 {
        return Err(shape_err!("conv1x1 needs an [out, in, 1, 1] weight, got {:?}", ws));
    }
    conv2d(input, weight, bias, 1, 0)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h * w < 2 {
        return Err(Error::Degenerate(format!(
            "instance norm over a single spatial position (shape {:?})",
            x.shape()
        )));
    }
    let (out, _) = kernels::instance_norm_forward(x.data(), n * c, h * w, eps);
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn nn_upsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(shape_err!("upsample factor must be positive"));
    }
    let (n, c, h, w) = x.dims4()?;
    Ok(Tensor::from_parts(
        vec![n, c, h * factor, w * factor],
        kernels::nn_upsample(x.data(), n * c, h, w, factor),
    ))
}

/// Depthwise blur with a normalized Gaussian truncated at radius
/// `ceil(3 sigma)`. Borders fold back with half-sample symmetry, which keeps
/// every plane's sum unchanged.
pub fn gaussian_blur(x: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("blur sigma must be positive, got {sigma}")));
    }
    let (_, _, h, w) = x.dims4()?;
    let taps = kernels::gaussian_kernel_1d(sigma);
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        kernels::blur_planes(x.data(), h, w, &taps),
    ))
}

/// Spatial soft-max of every plane, computed with the maximum subtracted.
pub fn softmax_spatial(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        kernels::softmax_planes(x.data(), h * w),
    ))
}

/// `log(sum(exp(x)))` of each plane.
pub fn logsumexp_planes(x: &Tensor) -> Result<Vec<f64>> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.data()
        .chunks(h * w)
        .map(|p| {
            let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + p.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        })
        .collect())
}

pub fn bilinear_resize(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if oh == 0 || ow == 0 {
        return Err(shape_err!("cannot resize to {}x{}", oh, ow));
    }
    Ok(Tensor::from_parts(
        vec![n, c, oh, ow],
        kernels::bilinear_resize(x.data(), n * c, h, w, oh, ow),
    ))
}

/// Concatenates 4-D tensors along channels.
pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
    let tape = Tape::new();
    let vars: Vec<_> = parts.iter().map(|p| tape.constant(p.clone())).collect();
    Ok((*tape.concat_channels(&vars)?.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(h: usize, w: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![1, 1, h, w], v.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_conv() {
        let x = t4(3, 3, &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let w = t4(1, 1, &[1.0]);
        let b = Tensor::new(vec![1], vec![0.0]).unwrap();
        assert_eq!(conv2d(&x, &w, Some(&b), 1, 0).unwrap(), x);
    }

    #[test]
    fn sum_kernel_conv() {
        let x = t4(2, 2, &[1., 2., 3., 4.]);
        let w = t4(2, 2, &[1.0; 4]);
        let b = Tensor::new(vec![1], vec![0.0]).unwrap();
        let y = conv2d(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn conv_output_extents() {
        let x = Tensor::zeros(&[1, 2, 9, 7]);
        let w = Tensor::zeros(&[3, 2, 4, 4]);
        let y = conv2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, (9 + 2 - 4) / 2 + 1, (7 + 2 - 4) / 2 + 1]);
    }

    #[test]
    fn conv1x1_identity_and_channel_sum() {
        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64 - 3.0);
        let eye = Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(conv1x1(&x, &eye, None).unwrap(), x);
        let sum = Tensor::new(vec![1, 2, 1, 1], vec![1.0, 1.0]).unwrap();
        let y = conv1x1(&x, &sum, None).unwrap();
        let expect: Vec<f64> = (0..4).map(|i| x.data()[i] + x.data()[4 + i]).collect();
        assert_eq!(y.data(), expect.as_slice());
        assert!(conv1x1(&x, &Tensor::zeros(&[1, 2, 3, 3]), None).is_err());
    }

    #[test]
    fn rectifiers() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let x = Tensor::new(vec![2], vec![-2.0, 3.0]).unwrap();
        let y = leaky_relu(&x, 0.2);
        assert!((y.data()[0] + 0.4).abs() < 1e-15);
        assert_eq!(y.data()[1], 3.0);
    }

    #[test]
    fn instance_norm_cases() {
        let c = Tensor::full(&[1, 1, 3, 3], 5.0);
        assert!(instance_norm(&c, 1e-5).unwrap().data().iter().all(|&v| v == 0.0));
        let p = t4(1, 2, &[-1.0, 1.0]);
        let y = instance_norm(&p, 1e-300).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);
        let single = Tensor::zeros(&[1, 1, 1, 1]);
        assert!(matches!(instance_norm(&single, 1e-5), Err(Error::Degenerate(_))));
    }

    #[test]
    fn upsample_and_downsample() {
        let x = t4(1, 2, &[3.0, 7.0]);
        assert_eq!(nn_upsample(&x, 1).unwrap(), x);
        let up = nn_upsample(&x, 2).unwrap();
        assert_eq!(up.data(), &[3.0, 3.0, 7.0, 7.0, 3.0, 3.0, 7.0, 7.0]);
        assert_eq!(up.sum(), 4.0 * x.sum());
        let y = t4(2, 2, &[1.0, 3.0, 5.0, 7.0]);
        assert_eq!(downsample_avg(&y, 2).unwrap().data(), &[4.0]);
        assert_eq!(downsample_avg(&y, 1).unwrap(), y);
        assert!(downsample_avg(&Tensor::zeros(&[1, 1, 3, 4]), 2).is_err());
    }

    #[test]
    fn softmax_examples() {
        let z = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(softmax_spatial(&z).unwrap().data().iter().all(|&v| v == 0.25));
        let s = t4(2, 2, &[2f64.ln(), 0.0, 0.0, 0.0]);
        let p = softmax_spatial(&s).unwrap();
        for (a, b) in p.data().iter().zip([0.4, 0.2, 0.2, 0.2]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn blur_rejects_nonpositive_sigma() {
        assert!(matches!(gaussian_blur(&Tensor::zeros(&[1, 1, 2, 2]), 0.0), Err(Error::Domain(_))));
    }
}
