//! Dense rank-4 activation arrays and axis reductions.
//!
//! A [`FeatureMap`] holds a mini-batch of activations laid out as
//! `(batch, channel, height, width)` in row-major order, so every
//! `(b, c)` spatial plane is contiguous. MLP activations use `H = W = 1`.

use crate::error::{Error, Result};

/// One of the four tensor axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Axis {
    Batch,
    Channel,
    Height,
    Width,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::Batch => 0,
            Axis::Channel => 1,
            Axis::Height => 2,
            Axis::Width => 3,
        }
    }
}

/// A dense `(B, C, H, W)` activation tensor in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl FeatureMap {
    /// Builds a feature map from raw data; all dimensions must be at least 1
    /// and the element count must equal `B*C*H*W`.
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                expected: "all dimensions >= 1".into(),
                got: format!("{shape:?}"),
            });
        }
        let count: usize = shape.iter().product();
        if data.len() != count {
            return Err(Error::ShapeMismatch {
                expected: format!("{count} elements for shape {shape:?}"),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        let count = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; count],
        }
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        let count = shape.iter().product();
        Self {
            shape,
            data: vec![value; count],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Elements per `(b, c)` spatial plane.
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn index_of(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index_of(b, c, h, w)]
    }

    /// The contiguous spatial plane of sample `b`, channel `c`.
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let start = self.index_of(b, c, 0, 0);
        &self.data[start..start + self.plane_len()]
    }

    /// Stacks feature maps along the batch axis.
    pub fn concat_batch(parts: &[&FeatureMap]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyReduction)?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut batch = 0;
        for p in parts {
            if p.shape[1..] != [c, h, w] {
                return Err(Error::ShapeMismatch {
                    expected: format!("(*, {c}, {h}, {w})"),
                    got: format!("{:?}", p.shape),
                });
            }
            batch += p.batch();
            data.extend_from_slice(&p.data);
        }
        FeatureMap::new([batch, c, h, w], data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-axis mean and population variance, keeping reduced axes at size 1.
#[derive(Debug, Clone)]
pub struct Moments {
    /// Shape of the reduced tensor; reduced axes have size 1.
    pub shape: [usize; 4],
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Arithmetic mean and population variance over the given axis set.
///
/// Variance divides by the reduced element count (no Bessel correction) and
/// is computed from centered squares in a second sweep, so it is always
/// nonnegative. Elements are visited in a fixed order; two algebraic routes
/// agree to about 1e-9 in double precision.
pub fn reduce_mean_var(x: &FeatureMap, axes: &[Axis]) -> Result<Moments> {
    if axes.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let mut reduced = [false; 4];
    for ax in axes {
        if reduced[ax.index()] {
            return Err(Error::InvalidAxes(format!("duplicate axis {ax:?}")));
        }
        reduced[ax.index()] = true;
    }

    let shape = x.shape();
    let mut out_shape = shape;
    for (i, r) in reduced.iter().enumerate() {
        if *r {
            out_shape[i] = 1;
        }
    }
    let out_len: usize = out_shape.iter().product();
    let group_len: usize = (0..4).filter(|&i| reduced[i]).map(|i| shape[i]).product();

    let out_index = |b: usize, c: usize, h: usize, w: usize| -> usize {
        let bb = if reduced[0] { 0 } else { b };
        let cc = if reduced[1] { 0 } else { c };
        let hh = if reduced[2] { 0 } else { h };
        let ww = if reduced[3] { 0 } else { w };
        ((bb * out_shape[1] + cc) * out_shape[2] + hh) * out_shape[3] + ww
    };

    let mut mean = vec![0.0f64; out_len];
    let data = x.data();
    let [bn, cn, hn, wn] = shape;
    let mut idx = 0;
    for b in 0..bn {
        for c in 0..cn {
            for h in 0..hn {
                for w in 0..wn {
                    mean[out_index(b, c, h, w)] += data[idx];
                    idx += 1;
                }
            }
        }
    }
    let inv = 1.0 / group_len as f64;
    for m in &mut mean {
        *m *= inv;
    }

    let mut var = vec![0.0f64; out_len];
    idx = 0;
    for b in 0..bn {
        for c in 0..cn {
            for h in 0..hn {
                for w in 0..wn {
                    let o = out_index(b, c, h, w);
                    let d = data[idx] - mean[o];
                    var[o] += d * d;
                    idx += 1;
                }
            }
        }
    }
    for v in &mut var {
        *v *= inv;
    }

    Ok(Moments {
        shape: out_shape,
        mean,
        var,
    })
}
