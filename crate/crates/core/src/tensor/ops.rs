//! Differentiable operations.
//!
//! Each op computes its result eagerly and records a closure that routes the
//! upstream gradient to every tracked parent. Matrix products and convolutions
//! share the three raw kernels at the bottom of the file; convolution lowers
//! to im2col + matmul.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Result, Tensor, TensorError};
use crate::math::F64Ext;

impl Tensor {
    fn tracked(&self) -> bool {
        self.inner.tracked
    }

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(TensorError::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x + y).collect()));
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![pa.clone(), pb.clone()],
            alloc::boxed::Box::new(move |g| {
                if pa.tracked() {
                    pa.accumulate_grad(g);
                }
                if pb.tracked() {
                    pb.accumulate_grad(g);
                }
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x - y).collect()));
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![pa.clone(), pb.clone()],
            alloc::boxed::Box::new(move |g| {
                if pa.tracked() {
                    pa.accumulate_grad(g);
                }
                if pb.tracked() {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    pb.accumulate_grad(&neg);
                }
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul")?;
        let data = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x * y).collect()));
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![pa.clone(), pb.clone()],
            alloc::boxed::Box::new(move |g| {
                if pa.tracked() {
                    let ga: Vec<f64> = pb.with_data(|b| g.iter().zip(b).map(|(gi, bi)| gi * bi).collect());
                    pa.accumulate_grad(&ga);
                }
                if pb.tracked() {
                    let gb: Vec<f64> = pa.with_data(|a| g.iter().zip(a).map(|(gi, ai)| gi * ai).collect());
                    pb.accumulate_grad(&gb);
                }
            }),
        ))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let data = self.with_data(|a| a.iter().map(|x| x * s).collect());
        let p = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![p.clone()],
            alloc::boxed::Box::new(move |g| {
                let gp: Vec<f64> = g.iter().map(|x| x * s).collect();
                p.accumulate_grad(&gp);
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        let data: Vec<f64> = self.with_data(|a| a.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect());
        let p = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![p.clone()],
            alloc::boxed::Box::new(move |g| {
                let gp: Vec<f64> =
                    p.with_data(|a| g.iter().zip(a).map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 }).collect());
                p.accumulate_grad(&gp);
            }),
        )
    }

    /// x * sigmoid(x); smooth everywhere, which keeps finite-difference
    /// gradient checks tight.
    pub fn silu(&self) -> Tensor {
        let data: Vec<f64> = self.with_data(|a| {
            a.iter()
                .map(|&x| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    x * s
                })
                .collect()
        });
        let p = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![p.clone()],
            alloc::boxed::Box::new(move |g| {
                let gp: Vec<f64> = p.with_data(|a| {
                    g.iter()
                        .zip(a)
                        .map(|(gi, &x)| {
                            let s = 1.0 / (1.0 + (-x).exp());
                            gi * (s + x * s * (1.0 - s))
                        })
                        .collect()
                });
                p.accumulate_grad(&gp);
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let total: f64 = self.with_data(|a| a.iter().sum());
        let p = self.clone();
        let n = self.len();
        Tensor::from_op(
            vec![1],
            vec![total],
            vec![p.clone()],
            alloc::boxed::Box::new(move |g| {
                p.accumulate_grad(&vec![g[0]; n]);
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len();
        let total: f64 = self.with_data(|a| a.iter().sum());
        let p = self.clone();
        Tensor::from_op(
            vec![1],
            vec![total / n as f64],
            vec![p.clone()],
            alloc::boxed::Box::new(move |g| {
                p.accumulate_grad(&vec![g[0] / n as f64; n]);
            }),
        )
    }

    /// Mean squared difference, the training-loss primitive.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        let d = self.sub(target)?;
        Ok(d.mul(&d)?.mean_all())
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(TensorError::Shape(format!(
                "reshape {:?} -> {:?}",
                self.shape(),
                shape
            )));
        }
        let p = self.clone();
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![p.clone()],
            alloc::boxed::Box::new(move |g| {
                p.accumulate_grad(g);
            }),
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        let [m, n] = two_dims(self, "transpose")?;
        let data = self.with_data(|a| {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = a[i * n + j];
                }
            }
            out
        });
        let p = self.clone();
        Ok(Tensor::from_op(
            vec![n, m],
            data,
            vec![p.clone()],
            alloc::boxed::Box::new(move |g| {
                let mut gp = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        gp[i * n + j] = g[j * m + i];
                    }
                }
                p.accumulate_grad(&gp);
            }),
        ))
    }

    /// Standard matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let [m, k] = two_dims(self, "matmul lhs")?;
        let [k2, n] = two_dims(other, "matmul rhs")?;
        if k != k2 {
            return Err(TensorError::Shape(format!(
                "matmul: inner dimensions disagree, {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self.with_data(|a| other.with_data(|b| mm(a, b, m, k, n)));
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![pa.clone(), pb.clone()],
            alloc::boxed::Box::new(move |g| {
                if pa.tracked() {
                    // dA = G x B^T
                    let ga = pb.with_data(|b| mm_a_bt(g, b, m, n, k));
                    pa.accumulate_grad(&ga);
                }
                if pb.tracked() {
                    // dB = A^T x G
                    let gb = pa.with_data(|a| mm_at_b(a, g, m, k, n));
                    pb.accumulate_grad(&gb);
                }
            }),
        ))
    }

    /// Row-wise softmax with max-subtraction stabilization.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let [m, n] = two_dims(self, "softmax_rows")?;
        if self.with_data(|a| a.iter().any(|x| x.is_nan())) {
            return Err(TensorError::Numeric("softmax_rows: NaN input".into()));
        }
        let data = self.with_data(|a| {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &a[i * n..(i + 1) * n];
                let mx = row.iter().fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (row[j] - mx).exp();
                    out[i * n + j] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[i * n + j] /= sum;
                }
            }
            out
        });
        let p = self.clone();
        let y = data.clone();
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![p.clone()],
            alloc::boxed::Box::new(move |g| {
                let mut gp = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gp[i * n + j] = (gr[j] - dot) * yr[j];
                    }
                }
                p.accumulate_grad(&gp);
            }),
        ))
    }

    /// Per-row layer normalization with learnable gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let [m, d] = two_dims(self, "layer_norm")?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(TensorError::Shape(format!(
                "layer_norm: gain/bias {:?}/{:?} vs width {d}",
                gain.shape(),
                bias.shape()
            )));
        }
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let data = self.with_data(|x| {
            gain.with_data(|g| {
                bias.with_data(|b| {
                    let mut out = vec![0.0; m * d];
                    for i in 0..m {
                        let row = &x[i * d..(i + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let istd = 1.0 / (var + eps).sqrt();
                        inv_std[i] = istd;
                        for j in 0..d {
                            let xh = (row[j] - mean) * istd;
                            xhat[i * d + j] = xh;
                            out[i * d + j] = xh * g[j] + b[j];
                        }
                    }
                    out
                })
            })
        });
        let (px, pg, pb) = (self.clone(), gain.clone(), bias.clone());
        Ok(Tensor::from_op(
            vec![m, d],
            data,
            vec![px.clone(), pg.clone(), pb.clone()],
            alloc::boxed::Box::new(move |gout| {
                if px.tracked() {
                    let gx = pg.with_data(|g| {
                        let mut gx = vec![0.0; m * d];
                        for i in 0..m {
                            let xh = &xhat[i * d..(i + 1) * d];
                            let go = &gout[i * d..(i + 1) * d];
                            // dxhat = dy * gain; fold the mean/variance terms.
                            let mut sum_dxh = 0.0;
                            let mut sum_dxh_xh = 0.0;
                            for j in 0..d {
                                let dxh = go[j] * g[j];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh[j];
                            }
                            let istd = inv_std[i];
                            for j in 0..d {
                                let dxh = go[j] * g[j];
                                gx[i * d + j] =
                                    istd * (dxh - sum_dxh / d as f64 - xh[j] * sum_dxh_xh / d as f64);
                            }
                        }
                        gx
                    });
                    px.accumulate_grad(&gx);
                }
                if pg.tracked() {
                    let mut gg = vec![0.0; d];
                    for i in 0..m {
                        for j in 0..d {
                            gg[j] += gout[i * d + j] * xhat[i * d + j];
                        }
                    }
                    pg.accumulate_grad(&gg);
                }
                if pb.tracked() {
                    let mut gb = vec![0.0; d];
                    for i in 0..m {
                        for j in 0..d {
                            gb[j] += gout[i * d + j];
                        }
                    }
                    pb.accumulate_grad(&gb);
                }
            }),
        ))
    }

    /// Group normalization over `[C,H,W]` with per-channel affine.
    pub fn group_norm(&self, groups: usize, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let [c, h, w] = three_dims(self, "group_norm")?;
        if c % groups != 0 {
            return Err(TensorError::Shape(format!(
                "group_norm: {c} channels not divisible by {groups} groups"
            )));
        }
        if gain.shape() != [c] || bias.shape() != [c] {
            return Err(TensorError::Shape(format!(
                "group_norm: gain/bias {:?}/{:?} vs {c} channels",
                gain.shape(),
                bias.shape()
            )));
        }
        let hw = h * w;
        let per = c / groups; // channels per group
        let gsize = per * hw;
        let mut xhat = vec![0.0; c * hw];
        let mut inv_std = vec![0.0; groups];
        let data = self.with_data(|x| {
            gain.with_data(|g| {
                bias.with_data(|b| {
                    let mut out = vec![0.0; c * hw];
                    for grp in 0..groups {
                        let base = grp * gsize;
                        let chunk = &x[base..base + gsize];
                        let mean = chunk.iter().sum::<f64>() / gsize as f64;
                        let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / gsize as f64;
                        let istd = 1.0 / (var + eps).sqrt();
                        inv_std[grp] = istd;
                        for k in 0..gsize {
                            let ch = grp * per + k / hw;
                            let xh = (chunk[k] - mean) * istd;
                            xhat[base + k] = xh;
                            out[base + k] = xh * g[ch] + b[ch];
                        }
                    }
                    out
                })
            })
        });
        let (px, pg, pb) = (self.clone(), gain.clone(), bias.clone());
        Ok(Tensor::from_op(
            vec![c, h, w],
            data,
            vec![px.clone(), pg.clone(), pb.clone()],
            alloc::boxed::Box::new(move |gout| {
                if px.tracked() {
                    let gx = pg.with_data(|g| {
                        let mut gx = vec![0.0; c * hw];
                        for grp in 0..groups {
                            let base = grp * gsize;
                            let mut sum_dxh = 0.0;
                            let mut sum_dxh_xh = 0.0;
                            for k in 0..gsize {
                                let ch = grp * per + k / hw;
                                let dxh = gout[base + k] * g[ch];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xhat[base + k];
                            }
                            let istd = inv_std[grp];
                            for k in 0..gsize {
                                let ch = grp * per + k / hw;
                                let dxh = gout[base + k] * g[ch];
                                gx[base + k] = istd
                                    * (dxh
                                        - sum_dxh / gsize as f64
                                        - xhat[base + k] * sum_dxh_xh / gsize as f64);
                            }
                        }
                        gx
                    });
                    px.accumulate_grad(&gx);
                }
                if pg.tracked() {
                    let mut gg = vec![0.0; c];
                    for ch in 0..c {
                        for k in 0..hw {
                            gg[ch] += gout[ch * hw + k] * xhat[ch * hw + k];
                        }
                    }
                    pg.accumulate_grad(&gg);
                }
                if pb.tracked() {
                    let mut gb = vec![0.0; c];
                    for ch in 0..c {
                        for k in 0..hw {
                            gb[ch] += gout[ch * hw + k];
                        }
                    }
                    pb.accumulate_grad(&gb);
                }
            }),
        ))
    }

    /// `[m,n] + [n]`, broadcast over rows (linear-layer bias).
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let [m, n] = two_dims(self, "add_row_bias")?;
        if bias.shape() != [n] {
            return Err(TensorError::Shape(format!(
                "add_row_bias: {:?} + {:?}",
                self.shape(),
                bias.shape()
            )));
        }
        let data = self.with_data(|a| {
            bias.with_data(|b| {
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] = a[i * n + j] + b[j];
                    }
                }
                out
            })
        });
        let (pa, pb) = (self.clone(), bias.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![pa.clone(), pb.clone()],
            alloc::boxed::Box::new(move |g| {
                if pa.tracked() {
                    pa.accumulate_grad(g);
                }
                if pb.tracked() {
                    let mut gb = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                    pb.accumulate_grad(&gb);
                }
            }),
        ))
    }

    /// `[C,H,W] + [C]`, broadcast over spatial positions (conv bias,
    /// timestep-embedding injection).
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let [c, h, w] = three_dims(self, "add_channel_bias")?;
        if bias.shape() != [c] {
            return Err(TensorError::Shape(format!(
                "add_channel_bias: {:?} + {:?}",
                self.shape(),
                bias.shape()
            )));
        }
        let hw = h * w;
        let data = self.with_data(|a| {
            bias.with_data(|b| {
                let mut out = vec![0.0; c * hw];
                for ch in 0..c {
                    for k in 0..hw {
                        out[ch * hw + k] = a[ch * hw + k] + b[ch];
                    }
                }
                out
            })
        });
        let (pa, pb) = (self.clone(), bias.clone());
        Ok(Tensor::from_op(
            vec![c, h, w],
            data,
            vec![pa.clone(), pb.clone()],
            alloc::boxed::Box::new(move |g| {
                if pa.tracked() {
                    pa.accumulate_grad(g);
                }
                if pb.tracked() {
                    let mut gb = vec![0.0; c];
                    for ch in 0..c {
                        for k in 0..hw {
                            gb[ch] += g[ch * hw + k];
                        }
                    }
                    pb.accumulate_grad(&gb);
                }
            }),
        ))
    }

    /// Scale each row of `[m,n]` by `mask[m]` (pad-token zeroing).
    pub fn mul_row_mask(&self, mask: &Tensor) -> Result<Tensor> {
        let [m, n] = two_dims(self, "mul_row_mask")?;
        if mask.shape() != [m] {
            return Err(TensorError::Shape(format!(
                "mul_row_mask: {:?} * {:?}",
                self.shape(),
                mask.shape()
            )));
        }
        let data = self.with_data(|a| {
            mask.with_data(|mk| {
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] = a[i * n + j] * mk[i];
                    }
                }
                out
            })
        });
        let (pa, pm) = (self.clone(), mask.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![pa.clone(), pm.clone()],
            alloc::boxed::Box::new(move |g| {
                if pa.tracked() {
                    let ga = pm.with_data(|mk| {
                        let mut ga = vec![0.0; m * n];
                        for i in 0..m {
                            for j in 0..n {
                                ga[i * n + j] = g[i * n + j] * mk[i];
                            }
                        }
                        ga
                    });
                    pa.accumulate_grad(&ga);
                }
                if pm.tracked() {
                    let gm = pa.with_data(|a| {
                        let mut gm = vec![0.0; m];
                        for i in 0..m {
                            for j in 0..n {
                                gm[i] += g[i * n + j] * a[i * n + j];
                            }
                        }
                        gm
                    });
                    pm.accumulate_grad(&gm);
                }
            }),
        ))
    }

    /// Gather rows of an embedding table: `table[V,d]`, `ids[L] -> [L,d]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let [v, d] = two_dims(self, "gather_rows")?;
        for &id in ids {
            if id >= v {
                return Err(TensorError::Shape(format!("gather_rows: id {id} >= table rows {v}")));
            }
        }
        let l = ids.len();
        let data = self.with_data(|t| {
            let mut out = vec![0.0; l * d];
            for (i, &id) in ids.iter().enumerate() {
                out[i * d..(i + 1) * d].copy_from_slice(&t[id * d..(id + 1) * d]);
            }
            out
        });
        let p = self.clone();
        let ids: Vec<usize> = ids.to_vec();
        Ok(Tensor::from_op(
            vec![l, d],
            data,
            vec![p.clone()],
            alloc::boxed::Box::new(move |g| {
                let mut gp = vec![0.0; v * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gp[id * d + j] += g[i * d + j];
                    }
                }
                p.accumulate_grad(&gp);
            }),
        ))
    }

    /// Concatenate along the channel axis: `[C1,H,W] ++ [C2,H,W]`.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        let [c1, h, w] = three_dims(self, "concat_channels lhs")?;
        let [c2, h2, w2] = three_dims(other, "concat_channels rhs")?;
        if h != h2 || w != w2 {
            return Err(TensorError::Shape(format!(
                "concat_channels: {:?} ++ {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut data = self.to_vec();
        data.extend_from_slice(&other.to_vec());
        let (pa, pb) = (self.clone(), other.clone());
        let split = c1 * h * w;
        Ok(Tensor::from_op(
            vec![c1 + c2, h, w],
            data,
            vec![pa.clone(), pb.clone()],
            alloc::boxed::Box::new(move |g| {
                if pa.tracked() {
                    pa.accumulate_grad(&g[..split]);
                }
                if pb.tracked() {
                    pb.accumulate_grad(&g[split..]);
                }
            }),
        ))
    }

    /// Nearest-neighbor 2x upsample of `[C,H,W]`.
    pub fn upsample2x(&self) -> Result<Tensor> {
        let [c, h, w] = three_dims(self, "upsample2x")?;
        let (h2, w2) = (2 * h, 2 * w);
        let data = self.with_data(|a| {
            let mut out = vec![0.0; c * h2 * w2];
            for ch in 0..c {
                for y in 0..h2 {
                    for x in 0..w2 {
                        out[ch * h2 * w2 + y * w2 + x] = a[ch * h * w + (y / 2) * w + x / 2];
                    }
                }
            }
            out
        });
        let p = self.clone();
        Ok(Tensor::from_op(
            vec![c, h2, w2],
            data,
            vec![p.clone()],
            alloc::boxed::Box::new(move |g| {
                let mut gp = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h2 {
                        for x in 0..w2 {
                            gp[ch * h * w + (y / 2) * w + x / 2] += g[ch * h2 * w2 + y * w2 + x];
                        }
                    }
                }
                p.accumulate_grad(&gp);
            }),
        ))
    }

    /// Spatial mean per channel: `[C,H,W] -> [C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let [c, h, w] = three_dims(self, "global_avg_pool")?;
        let hw = (h * w) as f64;
        let data = self.with_data(|a| {
            (0..c)
                .map(|ch| a[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / hw)
                .collect()
        });
        let p = self.clone();
        Ok(Tensor::from_op(
            vec![c],
            data,
            vec![p.clone()],
            alloc::boxed::Box::new(move |g| {
                let mut gp = vec![0.0; c * h * w];
                for ch in 0..c {
                    let gv = g[ch] / hw;
                    for k in 0..h * w {
                        gp[ch * h * w + k] = gv;
                    }
                }
                p.accumulate_grad(&gp);
            }),
        ))
    }

    /// 2-D cross-correlation of `[Cin,H,W]` with `[Cout,Cin,kh,kw]` kernels.
    ///
    /// Output extents must divide exactly: `H' = (H + 2p - kh)/stride + 1`.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let [cin, h, w] = three_dims(self, "conv2d input")?;
        let ws = weight.shape();
        if ws.len() != 4 || ws[1] != cin {
            return Err(TensorError::Shape(format!(
                "conv2d: weight {:?} vs input {:?}",
                ws,
                self.shape()
            )));
        }
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if bias.shape() != [cout] {
            return Err(TensorError::Shape(format!(
                "conv2d: bias {:?} vs {cout} filters",
                bias.shape()
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(TensorError::Shape(format!(
                "conv2d: kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        if (h + 2 * padding - kh) % stride != 0 || (w + 2 * padding - kw) % stride != 0 {
            return Err(TensorError::Shape(format!(
                "conv2d: non-integral output extent for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
            )));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let ckk = cin * kh * kw;

        let cols = self.with_data(|x| im2col(x, cin, h, w, kh, kw, stride, padding, ho, wo));
        let mut data = weight.with_data(|wm| mm(wm, &cols, cout, ckk, ho * wo));
        bias.with_data(|b| {
            for co in 0..cout {
                for k in 0..ho * wo {
                    data[co * ho * wo + k] += b[co];
                }
            }
        });

        let (px, pw, pb) = (self.clone(), weight.clone(), bias.clone());
        Ok(Tensor::from_op(
            vec![cout, ho, wo],
            data,
            vec![px.clone(), pw.clone(), pb.clone()],
            alloc::boxed::Box::new(move |g| {
                if pw.tracked() {
                    // dW = G x cols^T
                    let gw = mm_a_bt(g, &cols, cout, ho * wo, ckk);
                    pw.accumulate_grad(&gw);
                }
                if pb.tracked() {
                    let mut gb = vec![0.0; cout];
                    for co in 0..cout {
                        gb[co] = g[co * ho * wo..(co + 1) * ho * wo].iter().sum();
                    }
                    pb.accumulate_grad(&gb);
                }
                if px.tracked() {
                    // dcols = W^T x G, then fold back onto the input grid.
                    let dcols = pw.with_data(|wm| mm_at_b(wm, g, cout, ckk, ho * wo));
                    let gx = col2im(&dcols, cin, h, w, kh, kw, stride, padding, ho, wo);
                    px.accumulate_grad(&gx);
                }
            }),
        ))
    }
}

fn two_dims(t: &Tensor, op: &str) -> Result<[usize; 2]> {
    match t.shape() {
        [m, n] => Ok([*m, *n]),
        s => Err(TensorError::Shape(format!("{op}: expected 2-D, got {s:?}"))),
    }
}

fn three_dims(t: &Tensor, op: &str) -> Result<[usize; 3]> {
    match t.shape() {
        [c, h, w] => Ok([*c, *h, *w]),
        s => Err(TensorError::Shape(format!("{op}: expected 3-D, got {s:?}"))),
    }
}

/// `[m,k] x [k,n]`, accumulating over k in the middle loop so the inner loop
/// streams both rows.
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `[m,k] x [n,k]^T -> [m,n]` (row-by-row dot products).
pub(crate) fn mm_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `[k,m]^T x [k,n] -> [m,n]`.
pub(crate) fn mm_at_b(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for t in 0..k {
        let arow = &a[t * m..(t + 1) * m];
        let brow = &b[t * n..(t + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut cols = vec![0.0; c * kh * kw * ho * wo];
    let owidth = ho * wo;
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let out = &mut cols[row * owidth..(row + 1) * owidth];
                for oi in 0..ho {
                    let iy = (oi * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[ch * h * w + iy as usize * w..ch * h * w + (iy as usize + 1) * w];
                    for oj in 0..wo {
                        let ix = (oj * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[oi * wo + oj] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut x = vec![0.0; c * h * w];
    let owidth = ho * wo;
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let src = &cols[row * owidth..(row + 1) * owidth];
                for oi in 0..ho {
                    let iy = (oi * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut x[ch * h * w + iy as usize * w..ch * h * w + (iy as usize + 1) * w];
                    for oj in 0..wo {
                        let ix = (oj * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn matmul_identity() {
        let a = Tensor::new(&[2, 2], vec![3.0, -1.0, 2.0, 5.0]).unwrap();
        let i2 = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = i2.matmul(&a).unwrap();
        assert_eq!(out.to_vec(), a.to_vec());
    }

    #[test]
    fn matmul_forced() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.to_vec(), vec![2.0, 4.0]);
        assert_eq!(out.shape(), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let a = Tensor::new(&[2, 3], vec![0.0; 6]).unwrap();
        let b = Tensor::new(&[2, 2], vec![0.0; 4]).unwrap();
        let err = a.matmul(&b).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_row() {
        let x = Tensor::new(&[1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let y = x.softmax_rows().unwrap();
        for v in y.to_vec() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_gap_is_stable() {
        let x = Tensor::new(&[1, 2], vec![1000.0, 0.0]).unwrap();
        let y = x.softmax_rows().unwrap().to_vec();
        assert!((y[0] - 1.0).abs() < 1e-12);
        assert!(y[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_known_pair() {
        // exp(1)/(exp(1)+exp(2)) and its complement.
        let x = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let y = x.softmax_rows().unwrap().to_vec();
        assert!((y[0] - 0.2689414213699951).abs() < 1e-12);
        assert!((y[1] - 0.7310585786300049).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = Tensor::new(&[1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(x.softmax_rows(), Err(TensorError::Numeric(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::Rng::new(11);
        let data: Vec<f64> = (0..40).map(|_| rng.uniform_in(-30.0, 30.0)).collect();
        let x = Tensor::new(&[5, 8], data).unwrap();
        let y = x.softmax_rows().unwrap();
        y.with_data(|d| {
            for i in 0..5 {
                let s: f64 = d[i * 8..(i + 1) * 8].iter().sum();
                assert!((s - 1.0).abs() <= 1e-12);
            }
        });
    }

    #[test]
    fn conv2d_zero_weights_zero_output() {
        let x = Tensor::new(&[1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let w = Tensor::zeros(&[2, 1, 3, 3]);
        let b = Tensor::zeros(&[2]);
        let y = x.conv2d(&w, &b, 1, 1).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), &[2, 4, 4]);
    }

    #[test]
    fn conv2d_one_by_one_identity() {
        let x = Tensor::new(&[1, 3, 3], (0..9).map(|v| v as f64).collect()).unwrap();
        let w = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = x.conv2d(&w, &b, 1, 0).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn conv2d_averaging_preserves_constant_interior() {
        let x = Tensor::new(&[1, 5, 5], vec![2.5; 25]).unwrap();
        let w = Tensor::new(&[1, 1, 3, 3], vec![1.0 / 9.0; 9]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = x.conv2d(&w, &b, 1, 1).unwrap();
        y.with_data(|d| {
            for i in 1..4 {
                for j in 1..4 {
                    assert!((d[i * 5 + j] - 2.5).abs() < 1e-12);
                }
            }
        });
    }

    #[test]
    fn conv2d_non_integral_extent_rejected() {
        let x = Tensor::new(&[1, 5, 5], vec![0.0; 25]).unwrap();
        let w = Tensor::zeros(&[1, 1, 2, 2]);
        let b = Tensor::zeros(&[1]);
        assert!(matches!(x.conv2d(&w, &b, 2, 0), Err(TensorError::Shape(_))));
    }

    #[test]
    fn concat_and_split_gradients() {
        let a = Tensor::param(&[1, 2, 2], vec![1.0; 4]).unwrap();
        let b = Tensor::param(&[2, 2, 2], vec![2.0; 8]).unwrap();
        let y = a.concat_channels(&b).unwrap();
        assert_eq!(y.shape(), &[3, 2, 2]);
        y.sum_all().backward();
        assert_eq!(a.grad().unwrap(), vec![1.0; 4]);
        assert_eq!(b.grad().unwrap(), vec![1.0; 8]);
    }

    #[test]
    fn gather_routes_gradient_to_picked_rows() {
        let table = Tensor::param(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let picked = table.gather_rows(&[2, 0]).unwrap();
        assert_eq!(picked.to_vec(), vec![5.0, 6.0, 1.0, 2.0]);
        picked.sum_all().backward();
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }
}
