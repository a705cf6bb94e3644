//! 3D convolution over (channels, time, height, width) volumes.
//!
//! No padding; each output cell is the exact sum of elementwise products of
//! the kernel with the input window. Gradients are defined with respect to
//! both the input and the kernel.

use crate::error::{Error, Result};
use crate::tensor::{counter, Tensor};

fn out_extent(op: &'static str, extent: usize, k: usize, stride: usize) -> Result<usize> {
    if k == 0 || stride == 0 {
        return Err(Error::contract(op, "kernel and stride must be positive"));
    }
    if extent < k {
        return Err(Error::contract(op, format!("extent {extent} < kernel {k}")));
    }
    Ok((extent - k) / stride + 1)
}

/// Cubic-kernel convolution with one stride for all three axes.
pub fn conv3d(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    conv3d_strided(input, kernel, (stride, stride, stride))
}

/// General form: kernel (c_out, c_in, kt, kh, kw), per-axis strides.
pub fn conv3d_strided(
    input: &Tensor,
    kernel: &Tensor,
    strides: (usize, usize, usize),
) -> Result<Tensor> {
    let (c_in, t, h, w) = input.dims4("conv3d")?;
    let kshape = kernel.shape().to_vec();
    let [c_out, kc_in, kt, kh, kw] = match kshape[..] {
        [a, b, c, d, e] => [a, b, c, d, e],
        _ => {
            return Err(Error::shape(
                "conv3d",
                format!("kernel must be 5-D, got {:?}", kernel.shape()),
            ))
        }
    };
    if kc_in != c_in {
        return Err(Error::shape(
            "conv3d",
            format!("input channels {c_in} vs kernel {kc_in}"),
        ));
    }
    let (st, sh, sw) = strides;
    let ot = out_extent("conv3d", t, kt, st)?;
    let oh = out_extent("conv3d", h, kh, sh)?;
    let ow = out_extent("conv3d", w, kw, sw)?;

    let id = input.data();
    let kd = kernel.data();
    let mut out = vec![0.0; c_out * ot * oh * ow];
    let in_plane = h * w;
    let in_vol = t * in_plane;
    for oc in 0..c_out {
        for zt in 0..ot {
            for zy in 0..oh {
                for zx in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c_in {
                        for dt in 0..kt {
                            for dy in 0..kh {
                                let ibase = ic * in_vol
                                    + (zt * st + dt) * in_plane
                                    + (zy * sh + dy) * w
                                    + zx * sw;
                                let kbase = ((((oc * c_in + ic) * kt + dt) * kh) + dy) * kw;
                                for dx in 0..kw {
                                    acc += id[ibase + dx] * kd[kbase + dx];
                                }
                            }
                        }
                    }
                    out[((oc * ot + zt) * oh + zy) * ow + zx] = acc;
                }
            }
        }
    }
    drop(id);
    drop(kd);
    counter::add_macs((c_out * ot * oh * ow * c_in * kt * kh * kw) as u64);

    Tensor::from_op(
        "conv3d",
        vec![c_out, ot, oh, ow],
        out,
        &[input, kernel],
        move |g, parents| {
            let input = &parents[0];
            let kernel = &parents[1];
            let id = input.data();
            let kd = kernel.data();
            let mut din = vec![0.0; c_in * in_vol];
            let mut dker = vec![0.0; c_out * c_in * kt * kh * kw];
            for oc in 0..c_out {
                for zt in 0..ot {
                    for zy in 0..oh {
                        for zx in 0..ow {
                            let gv = g[((oc * ot + zt) * oh + zy) * ow + zx];
                            if gv == 0.0 {
                                continue;
                            }
                            for ic in 0..c_in {
                                for dt in 0..kt {
                                    for dy in 0..kh {
                                        let ibase = ic * in_vol
                                            + (zt * st + dt) * in_plane
                                            + (zy * sh + dy) * w
                                            + zx * sw;
                                        let kbase =
                                            ((((oc * c_in + ic) * kt + dt) * kh) + dy) * kw;
                                        for dx in 0..kw {
                                            din[ibase + dx] += gv * kd[kbase + dx];
                                            dker[kbase + dx] += gv * id[ibase + dx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            drop(id);
            drop(kd);
            input.accumulate_grad(&din);
            kernel.accumulate_grad(&dker);
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{gradcheck_params, DEFAULT_STEP};
    use crate::tensor::ops::sum_all;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Direct summation over the full window, kept free of the conv loop
    // structure above.
    fn brute_force_single_cell(input: &[f64], kernel: &[f64]) -> f64 {
        input.iter().zip(kernel).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn full_window_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let idata: Vec<f64> = (0..27).map(|_| rng.random_range(-2.0..2.0)).collect();
        let kdata: Vec<f64> = (0..27).map(|_| rng.random_range(-2.0..2.0)).collect();
        let input = Tensor::from_vec(&[1, 3, 3, 3], idata.clone()).unwrap();
        let kernel = Tensor::from_vec(&[1, 1, 3, 3, 3], kdata.clone()).unwrap();
        let out = conv3d(&input, &kernel, 1).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        let expected = brute_force_single_cell(&idata, &kdata);
        assert!((out.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn delta_kernel_extracts_center_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (t, h, w) = (5, 6, 7);
        let idata: Vec<f64> = (0..t * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let input = Tensor::from_vec(&[1, t, h, w], idata.clone()).unwrap();
        let mut kdata = vec![0.0; 27];
        kdata[13] = 1.0; // center of a 3x3x3 kernel
        let kernel = Tensor::from_vec(&[1, 1, 3, 3, 3], kdata).unwrap();
        let out = conv3d(&input, &kernel, 1).unwrap();
        assert_eq!(out.shape(), &[1, t - 2, h - 2, w - 2]);
        for zt in 0..t - 2 {
            for zy in 0..h - 2 {
                for zx in 0..w - 2 {
                    let got = out.data()[(zt * (h - 2) + zy) * (w - 2) + zx];
                    let want = idata[(zt + 1) * h * w + (zy + 1) * w + (zx + 1)];
                    assert_eq!(got, want);
                }
            }
        }
    }

    #[test]
    fn output_extent_formula() {
        let input = Tensor::zeros(&[1, 12, 8, 8]);
        let k7 = Tensor::zeros(&[1, 1, 7, 7, 7]);
        let out = conv3d(&input, &k7, 7).unwrap();
        assert_eq!(out.shape()[1], 1);
        let k2 = Tensor::zeros(&[1, 1, 2, 2, 2]);
        let out = conv3d(&input, &k2, 2).unwrap();
        assert_eq!(out.shape(), &[1, 6, 4, 4]);
    }

    #[test]
    fn small_extent_is_contract_violation() {
        let input = Tensor::zeros(&[1, 2, 8, 8]);
        let kernel = Tensor::zeros(&[1, 1, 3, 3, 3]);
        assert!(matches!(
            conv3d(&input, &kernel, 1),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn conv3d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let input =
            Tensor::param(&[2, 4, 4, 4], (0..128).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
        let kernel = Tensor::param(
            &[3, 2, 2, 2, 2],
            (0..48).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let err = gradcheck_params(
            &|| {
                let y = conv3d_strided(&input, &kernel, (2, 1, 2))?;
                sum_all(&crate::tensor::ops::mul(&y, &y)?)
            },
            &[&input, &kernel],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "conv3d gradcheck error {err}");
    }
}
