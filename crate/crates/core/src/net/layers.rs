//! Trainable layers: dense, 3x3 same-padding convolution, ReLU, flatten,
//! and global average pooling.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::FeatureMap;

/// Fully-connected layer on `(B, in, 1, 1)` maps, weights `[out][in]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub grad_weight: Vec<f64>,
    pub grad_bias: Vec<f64>,
    cache: Option<FeatureMap>,
}

impl Dense {
    /// Weights drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// biases zero.
    pub fn new(in_features: usize, out_features: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = (0..in_features * out_features)
            .map(|_| rng.gen_symmetric(bound))
            .collect();
        Self {
            in_features,
            out_features,
            weight,
            bias: vec![0.0; out_features],
            grad_weight: vec![0.0; in_features * out_features],
            grad_bias: vec![0.0; out_features],
            cache: None,
        }
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        if x.channels() != self.in_features || x.height() != 1 || x.width() != 1 {
            return Err(Error::ShapeMismatch {
                expected: format!("(B, {}, 1, 1)", self.in_features),
                got: format!("{:?}", x.shape()),
            });
        }
        Ok(())
    }

    pub fn eval_forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.check_input(x)?;
        let b_n = x.batch();
        let (fi, fo) = (self.in_features, self.out_features);
        let xd = x.data();
        let mut out = vec![0.0f64; b_n * fo];
        for b in 0..b_n {
            let row = &xd[b * fi..(b + 1) * fi];
            for o in 0..fo {
                let wrow = &self.weight[o * fi..(o + 1) * fi];
                let dot: f64 = wrow.iter().zip(row).map(|(w, x)| w * x).sum();
                out[b * fo + o] = dot + self.bias[o];
            }
        }
        FeatureMap::new([b_n, fo, 1, 1], out)
    }

    pub fn train_forward(&mut self, x: &FeatureMap) -> Result<FeatureMap> {
        let y = self.eval_forward(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &FeatureMap) -> Result<FeatureMap> {
        let x = self.cache.as_ref().ok_or(Error::BackwardWithoutForward)?;
        let b_n = x.batch();
        let (fi, fo) = (self.in_features, self.out_features);
        let g = grad_out.data();
        let xd = x.data();
        let mut dx = vec![0.0f64; b_n * fi];
        for b in 0..b_n {
            let xrow = &xd[b * fi..(b + 1) * fi];
            let dxrow = &mut dx[b * fi..(b + 1) * fi];
            for o in 0..fo {
                let go = g[b * fo + o];
                self.grad_bias[o] += go;
                let wrow = &self.weight[o * fi..(o + 1) * fi];
                let gwrow = &mut self.grad_weight[o * fi..(o + 1) * fi];
                for i in 0..fi {
                    gwrow[i] += go * xrow[i];
                    dxrow[i] += go * wrow[i];
                }
            }
        }
        FeatureMap::new([b_n, fi, 1, 1], dx)
    }
}

/// 3x3 convolution, stride 1, zero padding 1 (spatial size preserved).
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub c_in: usize,
    pub c_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub grad_weight: Vec<f64>,
    pub grad_bias: Vec<f64>,
    cache: Option<FeatureMap>,
}

impl Conv3x3 {
    pub fn new(c_in: usize, c_out: usize, rng: &mut SeededRng) -> Self {
        let fan_in = (c_in * 9) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = (0..c_out * c_in * 9)
            .map(|_| rng.gen_symmetric(bound))
            .collect();
        Self {
            c_in,
            c_out,
            weight,
            bias: vec![0.0; c_out],
            grad_weight: vec![0.0; c_out * c_in * 9],
            grad_bias: vec![0.0; c_out],
            cache: None,
        }
    }

    fn w_at(&self, co: usize, ci: usize, kh: usize, kw: usize) -> f64 {
        self.weight[((co * self.c_in + ci) * 3 + kh) * 3 + kw]
    }

    pub fn eval_forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        if x.channels() != self.c_in {
            return Err(Error::ShapeMismatch {
                expected: format!("{} input channels", self.c_in),
                got: format!("{:?}", x.shape()),
            });
        }
        let [b_n, _, h_n, w_n] = x.shape();
        let mut out = FeatureMap::zeros([b_n, self.c_out, h_n, w_n]);
        for b in 0..b_n {
            for co in 0..self.c_out {
                for h in 0..h_n {
                    for w in 0..w_n {
                        let mut acc = self.bias[co];
                        for ci in 0..self.c_in {
                            for kh in 0..3 {
                                let ih = h as isize + kh as isize - 1;
                                if ih < 0 || ih >= h_n as isize {
                                    continue;
                                }
                                for kw in 0..3 {
                                    let iw = w as isize + kw as isize - 1;
                                    if iw < 0 || iw >= w_n as isize {
                                        continue;
                                    }
                                    acc += self.w_at(co, ci, kh, kw)
                                        * x.at(b, ci, ih as usize, iw as usize);
                                }
                            }
                        }
                        let idx = out.index_of(b, co, h, w);
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn train_forward(&mut self, x: &FeatureMap) -> Result<FeatureMap> {
        let y = self.eval_forward(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &FeatureMap) -> Result<FeatureMap> {
        let x = self.cache.as_ref().ok_or(Error::BackwardWithoutForward)?;
        let [b_n, _, h_n, w_n] = x.shape();
        let mut dx = FeatureMap::zeros(x.shape());
        for b in 0..b_n {
            for co in 0..self.c_out {
                for h in 0..h_n {
                    for w in 0..w_n {
                        let go = grad_out.at(b, co, h, w);
                        self.grad_bias[co] += go;
                        for ci in 0..self.c_in {
                            for kh in 0..3 {
                                let ih = h as isize + kh as isize - 1;
                                if ih < 0 || ih >= h_n as isize {
                                    continue;
                                }
                                for kw in 0..3 {
                                    let iw = w as isize + kw as isize - 1;
                                    if iw < 0 || iw >= w_n as isize {
                                        continue;
                                    }
                                    let widx = ((co * self.c_in + ci) * 3 + kh) * 3 + kw;
                                    self.grad_weight[widx] +=
                                        go * x.at(b, ci, ih as usize, iw as usize);
                                    let didx = dx.index_of(b, ci, ih as usize, iw as usize);
                                    dx.data_mut()[didx] += go * self.weight[widx];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(dx)
    }
}

/// Elementwise `max(0, x)`.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
    /// Minimum `|pre-activation|` from the last train forward; gradient
    /// checks use it to stay clear of the kink.
    pub last_min_magnitude: f64,
}

impl Relu {
    pub fn new() -> Self {
        Self {
            mask: None,
            last_min_magnitude: f64::INFINITY,
        }
    }

    pub fn eval_forward(&self, x: &FeatureMap) -> FeatureMap {
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        FeatureMap::new(x.shape(), data).expect("shape preserved")
    }

    pub fn train_forward(&mut self, x: &FeatureMap) -> FeatureMap {
        self.mask = Some(x.data().iter().map(|&v| v > 0.0).collect());
        self.last_min_magnitude = x.data().iter().fold(f64::INFINITY, |m, &v| m.min(v.abs()));
        self.eval_forward(x)
    }

    pub fn backward(&self, grad_out: &FeatureMap) -> Result<FeatureMap> {
        let mask = self.mask.as_ref().ok_or(Error::BackwardWithoutForward)?;
        let data = grad_out
            .data()
            .iter()
            .zip(mask)
            .map(|(&g, &m)| if m { g } else { 0.0 })
            .collect();
        FeatureMap::new(grad_out.shape(), data)
    }
}

/// Reshapes `(B, C, H, W)` to `(B, C*H*W, 1, 1)`.
#[derive(Debug, Clone, Default)]
pub struct Flatten {
    from: Option<[usize; 4]>,
}

impl Flatten {
    pub fn forward(&mut self, x: &FeatureMap, remember: bool) -> FeatureMap {
        let [b, c, h, w] = x.shape();
        if remember {
            self.from = Some(x.shape());
        }
        FeatureMap::new([b, c * h * w, 1, 1], x.data().to_vec()).expect("same element count")
    }

    pub fn backward(&self, grad_out: &FeatureMap) -> Result<FeatureMap> {
        let from = self.from.ok_or(Error::BackwardWithoutForward)?;
        FeatureMap::new(from, grad_out.data().to_vec())
    }
}

/// Mean over the spatial plane: `(B, C, H, W)` to `(B, C, 1, 1)`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    from: Option<[usize; 4]>,
}

impl GlobalAvgPool {
    pub fn forward(&mut self, x: &FeatureMap, remember: bool) -> FeatureMap {
        let [b_n, c_n, _, _] = x.shape();
        if remember {
            self.from = Some(x.shape());
        }
        let plane = x.plane_len() as f64;
        let mut out = vec![0.0f64; b_n * c_n];
        for b in 0..b_n {
            for c in 0..c_n {
                let sum: f64 = x.plane(b, c).iter().sum();
                out[b * c_n + c] = sum / plane;
            }
        }
        FeatureMap::new([b_n, c_n, 1, 1], out).expect("valid shape")
    }

    pub fn backward(&self, grad_out: &FeatureMap) -> Result<FeatureMap> {
        let from = self.from.ok_or(Error::BackwardWithoutForward)?;
        let [b_n, c_n, h_n, w_n] = from;
        let plane = (h_n * w_n) as f64;
        let mut dx = FeatureMap::zeros(from);
        for b in 0..b_n {
            for c in 0..c_n {
                let g = grad_out.at(b, c, 0, 0) / plane;
                let start = dx.index_of(b, c, 0, 0);
                for i in start..start + h_n * w_n {
                    dx.data_mut()[i] = g;
                }
            }
        }
        Ok(dx)
    }
}
