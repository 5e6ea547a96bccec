//! Small fully-connected networks with hand-written backpropagation.
//!
//! Samples are columns: an input batch is a `in_dim × B` matrix. Hidden
//! layers use `tanh`; the output is either linear or `scale · tanh(z)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputKind {
    Linear,
    /// `scale · tanh(z)`, bounded to `[-scale, scale]`.
    TanhScaled(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub output: OutputKind,
}

/// Per-layer parameter gradients, laid out like [`Mlp::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<Layer>,
}

pub struct Cache {
    /// Input to each layer; `acts[0]` is the network input.
    acts: Vec<DMatrix<f64>>,
    pub out: DMatrix<f64>,
}

/// `tanh` via one `exp`; agrees with `f64::tanh` to a few ulp and is
/// noticeably cheaper on the hot path.
#[inline]
pub fn tanh(x: f64) -> f64 {
    if x.abs() > 20.0 {
        return x.signum();
    }
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

fn add_bias(z: &mut DMatrix<f64>, b: &DVector<f64>) {
    for mut col in z.column_iter_mut() {
        col += b;
    }
}

impl Mlp {
    /// `sizes = [in, hidden.., out]`, weights uniform in `±1/√fan_in`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], output: OutputKind, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Layer {
                    w: DMatrix::from_fn(w[1], w[0], |_, _| rng.random_range(-bound..bound)),
                    b: DVector::from_fn(w[1], |_, _| rng.random_range(-bound..bound)),
                }
            })
            .collect();
        Mlp { layers, output }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_cached(x).out
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> Cache {
        assert_eq!(x.nrows(), self.input_dim(), "input dimension");
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.w * &a;
            add_bias(&mut z, &layer.b);
            acts.push(a);
            a = if i < last {
                z.map(tanh)
            } else {
                match self.output {
                    OutputKind::Linear => z,
                    OutputKind::TanhScaled(s) => z.map(|v| s * tanh(v)),
                }
            };
        }
        Cache { acts, out: a }
    }

    /// Backpropagates `dout = ∂L/∂out` and returns parameter gradients and
    /// `∂L/∂input`.
    pub fn backward(&self, cache: &Cache, dout: &DMatrix<f64>) -> (Grads, DMatrix<f64>) {
        let mut dz = match self.output {
            OutputKind::Linear => dout.clone(),
            OutputKind::TanhScaled(s) => dout.zip_map(&cache.out, |g, y| g * (s - y * y / s)),
        };
        let mut grads = vec![None; self.layers.len()];
        let mut dx = DMatrix::zeros(0, 0);
        for i in (0..self.layers.len()).rev() {
            let a = &cache.acts[i];
            let w = &self.layers[i].w;
            grads[i] = Some(Layer { w: &dz * a.transpose(), b: dz.column_sum() });
            let da = w.transpose() * &dz;
            if i == 0 {
                dx = da;
            } else {
                dz = da.zip_map(a, |g, h| g * (1.0 - h * h));
            }
        }
        (Grads { layers: grads.into_iter().map(Option::unwrap).collect() }, dx)
    }

    /// Parameters flattened layer by layer: `W` (column-major) then `b`.
    pub fn flat_params(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params(), "parameter count");
        let mut off = 0;
        for l in &mut self.layers {
            for s in [l.w.as_mut_slice(), l.b.as_mut_slice()] {
                s.copy_from_slice(&flat[off..off + s.len()]);
                off += s.len();
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    /// `self ← τ·online + (1−τ)·self`.
    pub fn polyak_from(&mut self, online: &Mlp, tau: f64) {
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            t.w.zip_apply(&o.w, |t, o| *t = tau * o + (1.0 - tau) * *t);
            t.b.zip_apply(&o.b, |t, o| *t = tau * o + (1.0 - tau) * *t);
        }
    }
}

impl Grads {
    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w += &b.w;
            a.b += &b.b;
        }
    }
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()).copied()).collect()
}

/// Adam over all parameters of one network.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        let n = net.n_params();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Grads) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut off = 0;
        for (l, g) in net.layers.iter_mut().zip(&grads.layers) {
            for (p, g) in [(l.w.as_mut_slice(), g.w.as_slice()), (l.b.as_mut_slice(), g.b.as_slice())] {
                for (i, (p, g)) in p.iter_mut().zip(g).enumerate() {
                    let m = &mut self.m[off + i];
                    let v = &mut self.v[off + i];
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                }
                off += g.len();
            }
        }
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"SLNET\0";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a network checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint malformed: {0}")]
    Malformed(String),
}

/// Layout (little-endian): magic, `u16` version, `u8` output kind
/// (0 linear, 1 tanh-scaled), `f64` scale, `u32` layer count, per layer
/// `u32` rows and `u32` cols, `u64` parameter count, then the flat `f64`
/// parameters.
pub fn encode_checkpoint(net: &Mlp) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 8 * net.n_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let (kind, scale) = match net.output {
        OutputKind::Linear => (0u8, 0.0),
        OutputKind::TanhScaled(s) => (1u8, s),
    };
    out.push(kind);
    out.extend_from_slice(&scale.to_le_bytes());
    out.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
    for l in &net.layers {
        out.extend_from_slice(&(l.w.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(l.w.ncols() as u32).to_le_bytes());
    }
    let flat = net.flat_params();
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        if self.0.len() < N {
            return Err(CheckpointError::Truncated);
        }
        let (head, rest) = self.0.split_at(N);
        self.0 = rest;
        Ok(head.try_into().unwrap())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Mlp, CheckpointError> {
    let mut r = Reader(bytes);
    if &r.take::<6>()? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u16::from_le_bytes(r.take()?);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let kind = r.take::<1>()?[0];
    let scale = f64::from_le_bytes(r.take()?);
    let output = match kind {
        0 => OutputKind::Linear,
        1 if scale.is_finite() && scale > 0.0 => OutputKind::TanhScaled(scale),
        _ => return Err(CheckpointError::Malformed(format!("output kind {kind} scale {scale}"))),
    };
    let n_layers = u32::from_le_bytes(r.take()?) as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(CheckpointError::Malformed(format!("{n_layers} layers")));
    }
    let mut shapes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let rows = u32::from_le_bytes(r.take()?) as usize;
        let cols = u32::from_le_bytes(r.take()?) as usize;
        if rows == 0 || cols == 0 || rows > 1 << 16 || cols > 1 << 16 {
            return Err(CheckpointError::Malformed(format!("layer shape {rows}x{cols}")));
        }
        if let Some(&(prev_rows, _)) = shapes.last() {
            if prev_rows != cols {
                return Err(CheckpointError::Malformed("layer shapes do not chain".into()));
            }
        }
        shapes.push((rows, cols));
    }
    let count = u64::from_le_bytes(r.take()?) as usize;
    let expected: usize = shapes.iter().map(|(r, c)| r * c + r).sum();
    if count != expected {
        return Err(CheckpointError::Malformed(format!("{count} parameters, shapes need {expected}")));
    }
    if r.0.len() < count * 8 {
        return Err(CheckpointError::Truncated);
    }
    if r.0.len() > count * 8 {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    let flat: Vec<f64> = r.0.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(CheckpointError::Malformed("non-finite parameter".into()));
    }
    let mut net = Mlp {
        layers: shapes.iter().map(|&(r, c)| Layer { w: DMatrix::zeros(r, c), b: DVector::zeros(r) }).collect(),
        output,
    };
    net.set_flat_params(&flat);
    Ok(net)
}
