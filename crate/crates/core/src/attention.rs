//! Reference event-image cross-modal channel attention block.
//!
//! Forward pass, per pixel `p` and with `X` the image features and `Y` the
//! event features (both `hw x C`):
//!
//! 1. `Xn = LN_img(X)`, `Yn = LN_evt(Y)`: per-pixel standardization over the
//!    `C` channels followed by a learned gain and bias.
//! 2. `Q = Xn Wq + bq`, `K = Yn Wk + bk`, `V = Yn Wv + bv`, each `hw x c`.
//! 3. `A = softmax(Qᵀ K / sqrt(d_k))`, `c x c`, normalized down each column so
//!    column `j` is a distribution over value channels. `d_k` defaults to `hw`.
//! 4. `O = V A`.
//! 5. `Z = X + O Wo + bo`.
//! 6. `out = Z + GELU(Z W1 + b1) W2 + b2`.
//!
//! With several heads the `c` channels are split evenly and `A` is block
//! diagonal. The map is always `c x c`, whatever the spatial size.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fs;
use std::path::Path;

use libm::erf;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Variance floor inside the per-pixel normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Denominator floor for the gradient check's relative error.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub const ATP1_MAGIC: &[u8; 4] = b"ATP1";

/// `h x w x C` feature map, stored pixel-major (`values[(y * w + x) * C + ch]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::param(format!("empty feature grid {height}x{width}x{channels}")));
        }
        if values.len() != height * width * channels {
            return Err(Error::dims(format!(
                "{height}x{width}x{channels} features need {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("feature grid has non-finite values".into()));
        }
        Ok(FeatureGrid {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn random(height: usize, width: usize, channels: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let values = (0..height * width * channels)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Self::new(height, width, channels, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// The `hw x C` matrix view used by the kernel.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.pixels(), self.channels, &self.values)
    }

    pub fn from_matrix(height: usize, width: usize, m: &DMatrix<f64>) -> Result<Self> {
        let values = m.transpose().as_slice().to_vec();
        Self::new(height, width, m.ncols(), values)
    }
}

/// Learnable parameters of one attention block. Biases and gains are `1 x n`
/// row matrices so every group is handled uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    /// Overrides the softmax scale `sqrt(d_k)`; `None` uses `d_k = hw`.
    pub d_k: Option<f64>,
    pub img_gain: DMatrix<f64>,
    pub img_bias: DMatrix<f64>,
    pub evt_gain: DMatrix<f64>,
    pub evt_bias: DMatrix<f64>,
    pub w_q: DMatrix<f64>,
    pub b_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub b_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
    pub b_v: DMatrix<f64>,
    pub w_o: DMatrix<f64>,
    pub b_o: DMatrix<f64>,
    pub w_1: DMatrix<f64>,
    pub b_1: DMatrix<f64>,
    pub w_2: DMatrix<f64>,
    pub b_2: DMatrix<f64>,
}

pub const PARAM_GROUPS: [&str; 16] = [
    "img_gain", "img_bias", "evt_gain", "evt_bias", "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o", "w_1",
    "b_1", "w_2", "b_2",
];

impl AttentionParams {
    /// All-zero parameters with identity normalization gains.
    pub fn zeros(channels: usize, inner: usize, expansion: usize, heads: usize) -> Result<Self> {
        if channels == 0 || inner == 0 || expansion == 0 {
            return Err(Error::param("channel counts and expansion ratio must be positive"));
        }
        if heads == 0 || !inner.is_multiple_of(heads) {
            return Err(Error::param(format!(
                "{heads} heads do not split {inner} channels evenly"
            )));
        }
        let hidden = channels * expansion;
        let z = DMatrix::zeros;
        Ok(AttentionParams {
            heads,
            d_k: None,
            img_gain: DMatrix::from_element(1, channels, 1.0),
            img_bias: z(1, channels),
            evt_gain: DMatrix::from_element(1, channels, 1.0),
            evt_bias: z(1, channels),
            w_q: z(channels, inner),
            b_q: z(1, inner),
            w_k: z(channels, inner),
            b_k: z(1, inner),
            w_v: z(channels, inner),
            b_v: z(1, inner),
            w_o: z(inner, channels),
            b_o: z(1, channels),
            w_1: z(channels, hidden),
            b_1: z(1, hidden),
            w_2: z(hidden, channels),
            b_2: z(1, channels),
        })
    }

    /// Seeded random initialization: weights `N(0, 1/fan_in)`, biases
    /// `N(0, 0.1^2)`, gains `1 + N(0, 0.1^2)`.
    pub fn random(channels: usize, inner: usize, expansion: usize, heads: usize, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(channels, inner, expansion, heads)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).unwrap();
        for (name, m) in p.groups_mut() {
            let fan_in = m.nrows() as f64;
            let (scale, offset) = match name {
                "img_gain" | "evt_gain" => (0.1, 1.0),
                n if n.starts_with('w') => (1.0 / fan_in.sqrt(), 0.0),
                _ => (0.1, 0.0),
            };
            for v in m.iter_mut() {
                *v = offset + scale * unit.sample(&mut rng);
            }
        }
        Ok(p)
    }

    /// `C`.
    pub fn channels(&self) -> usize {
        self.w_q.nrows()
    }

    /// `c`, the projected channel count.
    pub fn inner(&self) -> usize {
        self.w_q.ncols()
    }

    pub fn expansion(&self) -> usize {
        self.w_1.ncols() / self.channels()
    }

    pub fn groups(&self) -> [(&'static str, &DMatrix<f64>); 16] {
        [
            ("img_gain", &self.img_gain),
            ("img_bias", &self.img_bias),
            ("evt_gain", &self.evt_gain),
            ("evt_bias", &self.evt_bias),
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
            ("w_k", &self.w_k),
            ("b_k", &self.b_k),
            ("w_v", &self.w_v),
            ("b_v", &self.b_v),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("w_1", &self.w_1),
            ("b_1", &self.b_1),
            ("w_2", &self.w_2),
            ("b_2", &self.b_2),
        ]
    }

    pub fn groups_mut(&mut self) -> [(&'static str, &mut DMatrix<f64>); 16] {
        [
            ("img_gain", &mut self.img_gain),
            ("img_bias", &mut self.img_bias),
            ("evt_gain", &mut self.evt_gain),
            ("evt_bias", &mut self.evt_bias),
            ("w_q", &mut self.w_q),
            ("b_q", &mut self.b_q),
            ("w_k", &mut self.w_k),
            ("b_k", &mut self.b_k),
            ("w_v", &mut self.w_v),
            ("b_v", &mut self.b_v),
            ("w_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
            ("w_1", &mut self.w_1),
            ("b_1", &mut self.b_1),
            ("w_2", &mut self.w_2),
            ("b_2", &mut self.b_2),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let (cc, ci, hidden) = (self.channels(), self.inner(), self.w_1.ncols());
        if cc == 0 || ci == 0 || hidden == 0 {
            return Err(Error::param("empty parameter shapes"));
        }
        if self.heads == 0 || ci % self.heads != 0 {
            return Err(Error::param(format!(
                "{} heads do not split {ci} channels evenly",
                self.heads
            )));
        }
        let expected: [(usize, usize); 16] = [
            (1, cc),
            (1, cc),
            (1, cc),
            (1, cc),
            (cc, ci),
            (1, ci),
            (cc, ci),
            (1, ci),
            (cc, ci),
            (1, ci),
            (ci, cc),
            (1, cc),
            (cc, hidden),
            (1, hidden),
            (hidden, cc),
            (1, cc),
        ];
        for ((name, m), shape) in self.groups().iter().zip(expected) {
            if m.shape() != shape {
                return Err(Error::dims(format!("{name} is {:?}, expected {shape:?}", m.shape())));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidValue(format!("{name} has non-finite entries")));
            }
        }
        if let Some(d) = self.d_k {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::param(format!("d_k must be positive, got {d}")));
            }
        }
        Ok(())
    }

    /// `ATP1` container: magic, `C | c | hidden | heads` as u16, `d_k` as
    /// f64 (0 for the default), then every group row-major as f64 LE in
    /// [`PARAM_GROUPS`] order.
    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = ATP1_MAGIC.to_vec();
        for v in [self.channels(), self.inner(), self.w_1.ncols(), self.heads] {
            let v = u16::try_from(v).map_err(|_| Error::Unsupported(format!("dimension {v} exceeds 16 bits")))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.d_k.unwrap_or(0.0).to_le_bytes());
        for (_, m) in self.groups() {
            for v in m.transpose().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != ATP1_MAGIC {
            return Err(Error::Unsupported("not an ATP1 parameter file".into()));
        }
        let dim = |i: usize| u16::from_le_bytes([bytes[4 + 2 * i], bytes[5 + 2 * i]]) as usize;
        let (cc, ci, hidden, heads) = (dim(0), dim(1), dim(2), dim(3));
        if cc == 0 || hidden % cc != 0 {
            return Err(Error::MalformedHeader(format!(
                "hidden width {hidden} is not a multiple of {cc}"
            )));
        }
        let mut p = Self::zeros(cc, ci, hidden / cc, heads)?;
        let d_k = f64::from_le_bytes(bytes[12..20].try_into().unwrap());
        p.d_k = (d_k != 0.0).then_some(d_k);
        let mut payload = bytes[20..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for (name, m) in p.groups_mut() {
            let (r, c) = m.shape();
            for i in 0..r {
                for j in 0..c {
                    m[(i, j)] = payload
                        .next()
                        .ok_or_else(|| Error::MalformedHeader(format!("truncated at group {name}")))?;
                }
            }
        }
        if payload.next().is_some() || !(bytes.len() - 20).is_multiple_of(8) {
            return Err(Error::MalformedHeader("trailing bytes after parameters".into()));
        }
        p.validate()?;
        Ok(p)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AttentionOptions {
    /// Reject `c >= hw` instead of warning.
    pub strict: bool,
    /// Skip the attention branch so that `Z = X`; used to isolate the MLP.
    pub bypass_attention: bool,
}

/// Exact GELU, `x Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

fn add_row(m: &DMatrix<f64>, row: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut r in out.row_iter_mut() {
        r += row.row(0);
    }
    out
}

fn col_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(1, m.ncols(), |_, j| m.column(j).sum())
}

struct Normalized {
    out: DMatrix<f64>,
    xhat: DMatrix<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &DMatrix<f64>, gain: &DMatrix<f64>, bias: &DMatrix<f64>) -> Normalized {
    let (rows, cols) = x.shape();
    let mut xhat = DMatrix::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    for p in 0..rows {
        let row = x.row(p);
        let mean = row.mean();
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        let s = 1.0 / (var + NORM_EPS).sqrt();
        for j in 0..cols {
            xhat[(p, j)] = (x[(p, j)] - mean) * s;
        }
        inv_std.push(s);
    }
    let mut out = xhat.clone();
    for p in 0..rows {
        for j in 0..cols {
            out[(p, j)] = out[(p, j)] * gain[(0, j)] + bias[(0, j)];
        }
    }
    Normalized { out, xhat, inv_std }
}

/// Returns `(dx, dgain, dbias)`.
fn layer_norm_backward(
    upstream: &DMatrix<f64>,
    norm: &Normalized,
    gain: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (rows, cols) = upstream.shape();
    let dgain = DMatrix::from_fn(1, cols, |_, j| {
        (0..rows).map(|p| upstream[(p, j)] * norm.xhat[(p, j)]).sum()
    });
    let dbias = col_sums(upstream);
    let mut dx = DMatrix::zeros(rows, cols);
    for p in 0..rows {
        let dxhat: Vec<f64> = (0..cols).map(|j| upstream[(p, j)] * gain[(0, j)]).collect();
        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
        let mean_dx = (0..cols).map(|j| dxhat[j] * norm.xhat[(p, j)]).sum::<f64>() / cols as f64;
        for j in 0..cols {
            dx[(p, j)] = norm.inv_std[p] * (dxhat[j] - mean_d - norm.xhat[(p, j)] * mean_dx);
        }
    }
    (dx, dgain, dbias)
}

/// Column softmax restricted to each head's diagonal block; off-block entries
/// are zero.
fn block_column_softmax(logits: &DMatrix<f64>, heads: usize) -> DMatrix<f64> {
    let c = logits.nrows();
    let size = c / heads;
    let mut a = DMatrix::zeros(c, c);
    for j in 0..c {
        let lo = (j / size) * size;
        let block = lo..lo + size;
        let max = block.clone().map(|i| logits[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = block.clone().map(|i| (logits[(i, j)] - max).exp()).sum();
        for i in block {
            a[(i, j)] = (logits[(i, j)] - max).exp() / total;
        }
    }
    a
}

/// Intermediate values of one forward pass.
pub struct ForwardPass {
    x: DMatrix<f64>,
    img_norm: Normalized,
    evt_norm: Normalized,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    scale: f64,
    attention: DMatrix<f64>,
    o: DMatrix<f64>,
    z: DMatrix<f64>,
    hidden: DMatrix<f64>,
    activated: DMatrix<f64>,
    output: DMatrix<f64>,
    height: usize,
    width: usize,
    bypass: bool,
}

impl ForwardPass {
    /// The `c x c` attention map.
    pub fn attention(&self) -> &DMatrix<f64> {
        &self.attention
    }

    /// Pre-softmax logits `Qᵀ K / sqrt(d_k)`.
    pub fn logits(&self) -> DMatrix<f64> {
        self.q.transpose() * &self.k / self.scale
    }

    pub fn output_matrix(&self) -> &DMatrix<f64> {
        &self.output
    }

    pub fn output(&self) -> FeatureGrid {
        FeatureGrid::from_matrix(self.height, self.width, &self.output).expect("forward output is finite")
    }

    /// `O = V A`, the attended values before the output projection.
    pub fn attended(&self) -> &DMatrix<f64> {
        &self.o
    }
}

fn check_shapes(img: &FeatureGrid, evt: &FeatureGrid, p: &AttentionParams, opts: AttentionOptions) -> Result<()> {
    p.validate()?;
    if (img.height, img.width) != (evt.height, evt.width) {
        return Err(Error::dims(format!(
            "image features are {}x{}, event features are {}x{}",
            img.height, img.width, evt.height, evt.width
        )));
    }
    if img.channels != p.channels() || evt.channels != p.channels() {
        return Err(Error::dims(format!(
            "parameters expect {} channels, got image {} and events {}",
            p.channels(),
            img.channels,
            evt.channels
        )));
    }
    let hw = img.pixels();
    if p.inner() >= hw {
        if opts.strict {
            return Err(Error::param(format!(
                "projected channels c = {} must be below h*w = {hw}",
                p.inner()
            )));
        }
        log::warn!("projected channels c = {} is not below h*w = {hw}", p.inner());
    }
    Ok(())
}

pub fn forward_pass(
    img: &FeatureGrid,
    evt: &FeatureGrid,
    p: &AttentionParams,
    opts: AttentionOptions,
) -> Result<ForwardPass> {
    check_shapes(img, evt, p, opts)?;
    let x = img.to_matrix();
    let y = evt.to_matrix();
    let img_norm = layer_norm(&x, &p.img_gain, &p.img_bias);
    let evt_norm = layer_norm(&y, &p.evt_gain, &p.evt_bias);
    let q = add_row(&(&img_norm.out * &p.w_q), &p.b_q);
    let k = add_row(&(&evt_norm.out * &p.w_k), &p.b_k);
    let v = add_row(&(&evt_norm.out * &p.w_v), &p.b_v);
    let scale = p.d_k.unwrap_or(img.pixels() as f64).sqrt();
    let logits = q.transpose() * &k / scale;
    let attention = block_column_softmax(&logits, p.heads);
    let o = &v * &attention;
    let z = if opts.bypass_attention {
        x.clone()
    } else {
        &x + add_row(&(&o * &p.w_o), &p.b_o)
    };
    let hidden = add_row(&(&z * &p.w_1), &p.b_1);
    let activated = hidden.map(gelu);
    let output = &z + add_row(&(&activated * &p.w_2), &p.b_2);
    Ok(ForwardPass {
        x,
        img_norm,
        evt_norm,
        q,
        k,
        v,
        scale,
        attention,
        o,
        z,
        hidden,
        activated,
        output,
        height: img.height,
        width: img.width,
        bypass: opts.bypass_attention,
    })
}

/// Forward pass with default options; returns the fused features and the
/// `c x c` attention map.
pub fn eica_forward(img: &FeatureGrid, evt: &FeatureGrid, p: &AttentionParams) -> Result<(FeatureGrid, DMatrix<f64>)> {
    let pass = forward_pass(img, evt, p, AttentionOptions::default())?;
    Ok((pass.output(), pass.attention.clone()))
}

/// Gradients of a scalar loss with respect to both inputs and every
/// parameter. `params` reuses the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub img: DMatrix<f64>,
    pub evt: DMatrix<f64>,
    pub params: AttentionParams,
}

impl AttentionGrads {
    /// Every gradient group, inputs first.
    pub fn groups(&self) -> Vec<(&'static str, &DMatrix<f64>)> {
        let mut out = vec![("img", &self.img), ("evt", &self.evt)];
        out.extend(self.params.groups());
        out
    }

    pub fn is_zero(&self) -> bool {
        self.groups().iter().all(|(_, m)| m.iter().all(|&v| v == 0.0))
    }
}

pub fn backward_pass(pass: &ForwardPass, p: &AttentionParams, upstream: &DMatrix<f64>) -> Result<AttentionGrads> {
    if upstream.shape() != pass.output.shape() {
        return Err(Error::dims(format!(
            "upstream gradient is {:?}, output is {:?}",
            upstream.shape(),
            pass.output.shape()
        )));
    }
    let mut g = AttentionParams::zeros(p.channels(), p.inner(), p.expansion(), p.heads)?;
    for (_, m) in g.groups_mut() {
        m.fill(0.0);
    }
    g.d_k = p.d_k;

    // out = Z + GELU(Z W1 + b1) W2 + b2
    g.w_2 = pass.activated.transpose() * upstream;
    g.b_2 = col_sums(upstream);
    let d_act = upstream * p.w_2.transpose();
    let d_hidden = d_act.zip_map(&pass.hidden, |d, h| d * gelu_grad(h));
    g.w_1 = pass.z.transpose() * &d_hidden;
    g.b_1 = col_sums(&d_hidden);
    let dz = upstream + &d_hidden * p.w_1.transpose();

    let mut dx = dz.clone();
    let mut dy = DMatrix::zeros(pass.x.nrows(), pass.x.ncols());
    if !pass.bypass {
        // Z = X + O Wo + bo
        g.w_o = pass.o.transpose() * &dz;
        g.b_o = col_sums(&dz);
        let d_o = &dz * p.w_o.transpose();

        // O = V A
        let d_v = &d_o * pass.attention.transpose();
        let d_a = pass.v.transpose() * &d_o;

        // column softmax: dS[:, j] = A[:, j] ⊙ (dA[:, j] - <A[:, j], dA[:, j]>)
        let c = d_a.nrows();
        let mut d_s = DMatrix::zeros(c, c);
        for j in 0..c {
            let dot: f64 = (0..c).map(|i| pass.attention[(i, j)] * d_a[(i, j)]).sum();
            for i in 0..c {
                d_s[(i, j)] = pass.attention[(i, j)] * (d_a[(i, j)] - dot);
            }
        }
        let d_s = d_s / pass.scale;

        // S = Qᵀ K
        let d_q = &pass.k * d_s.transpose();
        let d_k = &pass.q * &d_s;

        g.w_q = pass.img_norm.out.transpose() * &d_q;
        g.b_q = col_sums(&d_q);
        g.w_k = pass.evt_norm.out.transpose() * &d_k;
        g.b_k = col_sums(&d_k);
        g.w_v = pass.evt_norm.out.transpose() * &d_v;
        g.b_v = col_sums(&d_v);

        let d_xn = &d_q * p.w_q.transpose();
        let d_yn = &d_k * p.w_k.transpose() + &d_v * p.w_v.transpose();
        let (dx_norm, dg, db) = layer_norm_backward(&d_xn, &pass.img_norm, &p.img_gain);
        g.img_gain = dg;
        g.img_bias = db;
        dx += dx_norm;
        let (dy_norm, dg, db) = layer_norm_backward(&d_yn, &pass.evt_norm, &p.evt_gain);
        g.evt_gain = dg;
        g.evt_bias = db;
        dy = dy_norm;
    }
    Ok(AttentionGrads {
        img: dx,
        evt: dy,
        params: g,
    })
}

/// Gradients of `Σ upstream ⊙ forward(img, evt)`.
pub fn eica_backward(
    img: &FeatureGrid,
    evt: &FeatureGrid,
    p: &AttentionParams,
    upstream: &FeatureGrid,
) -> Result<AttentionGrads> {
    eica_backward_with(img, evt, p, upstream, AttentionOptions::default())
}

pub fn eica_backward_with(
    img: &FeatureGrid,
    evt: &FeatureGrid,
    p: &AttentionParams,
    upstream: &FeatureGrid,
    opts: AttentionOptions,
) -> Result<AttentionGrads> {
    let pass = forward_pass(img, evt, p, opts)?;
    if (upstream.height, upstream.width, upstream.channels) != (img.height, img.width, img.channels) {
        return Err(Error::dims("upstream gradient must match the output shape"));
    }
    backward_pass(&pass, p, &upstream.to_matrix())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Group and flat (row-major) index of the worst entry.
    pub worst: (&'static str, usize),
    pub groups: Vec<GroupReport>,
    pub tol: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub height: usize,
    pub width: usize,
    pub step: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            height: 4,
            width: 4,
            step: 1e-5,
            tol: 1e-5,
            seed: 7,
        }
    }
}

/// `|analytic - numeric| / max(|analytic|, |numeric|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic gradients of `loss = Σ output` against central finite
/// differences over both inputs and every parameter group. Inputs are drawn
/// from `seed`.
pub fn grad_check(p: &AttentionParams, shape: (usize, usize), tol: f64, seed: u64) -> Result<GradCheckReport> {
    let config = GradCheckConfig {
        height: shape.0,
        width: shape.1,
        tol,
        seed,
        ..GradCheckConfig::default()
    };
    grad_check_with(p, &config, |_| {})
}

/// [`grad_check`] with a hook that may tamper with the analytic gradients
/// before comparison.
pub fn grad_check_with(
    p: &AttentionParams,
    config: &GradCheckConfig,
    mutate: impl FnOnce(&mut AttentionGrads),
) -> Result<GradCheckReport> {
    if config.tol.is_nan() || config.tol <= 0.0 {
        return Err(Error::param(format!("tolerance must be positive, got {}", config.tol)));
    }
    if !(config.step > 0.0 && config.step.is_finite()) {
        return Err(Error::param(format!(
            "finite-difference step must be positive, got {}",
            config.step
        )));
    }
    let (h, w) = (config.height, config.width);
    let img = FeatureGrid::random(h, w, p.channels(), config.seed)?;
    let evt = FeatureGrid::random(h, w, p.channels(), config.seed.wrapping_add(1))?;
    let opts = AttentionOptions::default();

    let pass = forward_pass(&img, &evt, p, opts)?;
    let ones = DMatrix::from_element(pass.output.nrows(), pass.output.ncols(), 1.0);
    let mut grads = backward_pass(&pass, p, &ones)?;
    mutate(&mut grads);

    let loss = |img: &FeatureGrid, evt: &FeatureGrid, p: &AttentionParams| -> Result<f64> {
        Ok(forward_pass(img, evt, p, opts)?.output.sum())
    };
    let step = config.step;
    let mut groups = Vec::new();

    let mut check_group =
        |name: &'static str, analytic: &DMatrix<f64>, f: &mut dyn FnMut(usize, f64) -> Result<f64>| {
            let mut rel = 0.0f64;
            let mut abs = 0.0f64;
            let mut worst = 0;
            // row-major walk so indices match the ATP1 layout
            let (rows, cols) = analytic.shape();
            for i in 0..rows {
                for j in 0..cols {
                    let flat = i * cols + j;
                    let numeric = (f(flat, step)? - f(flat, -step)?) / (2.0 * step);
                    let a = analytic[(i, j)];
                    let r = relative_error(a, numeric);
                    if r.is_nan() || r > rel {
                        rel = r;
                        worst = flat;
                    }
                    abs = abs.max((a - numeric).abs());
                }
            }
            groups.push((
                GroupReport {
                    name,
                    max_rel_err: rel,
                    max_abs_err: abs,
                },
                worst,
            ));
            Ok::<(), Error>(())
        };

    let cc = p.channels();
    check_group("img", &grads.img, &mut |flat, d| {
        let mut v = img.values.clone();
        v[flat] += d;
        loss(&FeatureGrid::new(h, w, cc, v)?, &evt, p)
    })?;
    check_group("evt", &grads.evt, &mut |flat, d| {
        let mut v = evt.values.clone();
        v[flat] += d;
        loss(&img, &FeatureGrid::new(h, w, cc, v)?, p)
    })?;
    for (gi, name) in PARAM_GROUPS.iter().enumerate() {
        let analytic = grads.params.groups()[gi].1.clone();
        check_group(name, &analytic, &mut |flat, d| {
            let mut q = p.clone();
            let (_, m) = q.groups_mut().into_iter().nth(gi).expect("group index in range");
            let cols = m.ncols();
            m[(flat / cols, flat % cols)] += d;
            loss(&img, &evt, &q)
        })?;
    }

    let mut max_rel_err = 0.0f64;
    let mut max_abs_err = 0.0f64;
    let mut worst = ("img", 0);
    for (g, idx) in &groups {
        if g.max_rel_err.is_nan() || g.max_rel_err > max_rel_err {
            max_rel_err = g.max_rel_err;
            worst = (g.name, *idx);
        }
        max_abs_err = max_abs_err.max(g.max_abs_err);
    }
    Ok(GradCheckReport {
        max_rel_err,
        max_abs_err,
        worst,
        groups: groups.into_iter().map(|(g, _)| g).collect(),
        tol: config.tol,
        pass: max_rel_err <= config.tol,
    })
}
