//! Per-agent trainable feature map: a fixed-topology MLP with rectified
//! linear hidden layers, a linear output layer, and column-wise unit
//! normalization. Also the encoder-free mode where the feature matrix is
//! the optimization variable itself.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{dot, DenseMatrix};
use crate::rate::FeatureMatrix;
use crate::scalar::Scalar;
use crate::util::{read_f64_le, read_u16_le, read_u32_le, write_f64_le, write_u16_le, write_u32_le};

const PARAMS_MAGIC: &[u8; 4] = b"MCRP";
const PARAMS_VERSION: u16 = 1;

/// One affine layer, weights out_dim x in_dim.
#[derive(Debug, Clone)]
pub struct DenseLayer<S> {
    pub weight: DenseMatrix<S>,
    pub bias: Vec<S>,
}

/// Encoder parameters: affine layers with rectified-linear activations on
/// all but the last, followed by unit normalization of each output column.
#[derive(Debug, Clone)]
pub struct EncoderParams<S> {
    layers: Vec<DenseLayer<S>>,
}

impl<S: Scalar> EncoderParams<S> {
    pub fn new(layers: Vec<DenseLayer<S>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ConfigError("encoder needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].weight.rows() != w[1].weight.cols() {
                return Err(Error::DimensionMismatch(format!(
                    "layer output {} feeds layer input {}",
                    w[0].weight.rows(),
                    w[1].weight.cols()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.rows() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {i} bias length {} vs {} rows",
                    l.bias.len(),
                    l.weight.rows()
                )));
            }
            if !l.weight.is_finite() || !l.bias.iter().all(|x| x.is_finite()) {
                return Err(Error::InvalidMatrix(format!("layer {i} non-finite")));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer<S>] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.rows()
    }

    /// Layer size chain input → hidden… → output.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.weight.rows()));
        dims
    }
}

/// Kaiming-style scaled Gaussian initialization, seed-controlled.
pub fn init_encoder<S: Scalar>(dims: &[usize], seed: u64) -> Result<EncoderParams<S>> {
    if dims.len() < 2 {
        return Err(Error::ConfigError("need input and output dims".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for l in 0..dims.len() - 1 {
        let fan_in = dims[l];
        let gain = if l + 2 < dims.len() { 2.0 } else { 1.0 };
        let std = (gain / fan_in as f64).sqrt();
        let weight = DenseMatrix::from_fn(dims[l + 1], fan_in, |_, _| {
            S::of(rng.sample::<f64, _>(StandardNormal) * std)
        });
        layers.push(DenseLayer {
            weight,
            bias: vec![S::zero(); dims[l + 1]],
        });
    }
    EncoderParams::new(layers)
}

/// Intermediate activations kept for the backward pass.
struct ForwardCache<S> {
    /// Input and post-activation output of every layer (pre-normalization
    /// for the last).
    activations: Vec<DenseMatrix<S>>,
    /// Column norms of the last layer's output.
    norms: Vec<S>,
}

fn forward_cached<S: Scalar>(
    params: &EncoderParams<S>,
    x: &DenseMatrix<S>,
) -> Result<(FeatureMatrix<S>, ForwardCache<S>)> {
    if x.rows() != params.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "encoder input dim {}, batch has {}",
            params.input_dim(),
            x.rows()
        )));
    }
    let n_layers = params.layers.len();
    let mut activations = Vec::with_capacity(n_layers + 1);
    activations.push(x.clone());
    let mut cur = x.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let mut pre = layer.weight.matmul(&cur)?;
        for c in 0..pre.cols() {
            let col = pre.col_mut(c);
            for (i, b) in layer.bias.iter().enumerate() {
                col[i] += *b;
            }
        }
        if l + 1 < n_layers {
            for v in 0..pre.cols() {
                for x in pre.col_mut(v) {
                    if *x < S::zero() {
                        *x = S::zero();
                    }
                }
            }
        }
        activations.push(pre.clone());
        cur = pre;
    }
    // Unit normalization; an exactly-zero column maps to e1 with zero
    // gradient flow.
    let mut norms = Vec::with_capacity(cur.cols());
    let mut z = cur.clone();
    for c in 0..z.cols() {
        let norm = dot(z.col(c), z.col(c)).sqrt();
        norms.push(norm);
        let col = z.col_mut(c);
        if norm > S::zero() {
            let inv = S::one() / norm;
            for x in col.iter_mut() {
                *x *= inv;
            }
        } else {
            col[0] = S::one();
        }
    }
    let features = FeatureMatrix::new(z)
        .map_err(|e| Error::NumericalFailure(format!("normalization failed: {e}")))?;
    Ok((features, ForwardCache { activations, norms }))
}

/// Encoder forward pass: unit-norm feature columns.
pub fn forward<S: Scalar>(
    params: &EncoderParams<S>,
    x: &DenseMatrix<S>,
) -> Result<FeatureMatrix<S>> {
    Ok(forward_cached(params, x)?.0)
}

/// Parameter gradients, shaped like the encoder.
#[derive(Debug, Clone)]
pub struct EncoderGrads<S> {
    pub layers: Vec<DenseLayer<S>>,
}

/// Backpropagates an upstream feature gradient `∂loss/∂Z` to parameter
/// gradients. The normalization Jacobian `(I - ẑ ẑ^T)/‖a‖` projects the
/// upstream gradient onto the sphere tangent, so radial components vanish.
pub fn backward<S: Scalar>(
    params: &EncoderParams<S>,
    x: &DenseMatrix<S>,
    upstream: &DenseMatrix<S>,
) -> Result<EncoderGrads<S>> {
    let (features, cache) = forward_cached(params, x)?;
    if upstream.rows() != params.output_dim() || upstream.cols() != x.cols() {
        return Err(Error::DimensionMismatch(format!(
            "upstream gradient {}x{}, expected {}x{}",
            upstream.rows(),
            upstream.cols(),
            params.output_dim(),
            x.cols()
        )));
    }
    let n_layers = params.layers.len();
    let z = features.matrix();

    // Through normalization.
    let mut g = DenseMatrix::zeros(upstream.rows(), upstream.cols());
    for c in 0..upstream.cols() {
        let norm = cache.norms[c];
        if norm <= S::zero() {
            continue; // zero-output column: gradient is cut
        }
        let radial = dot(z.col(c), upstream.col(c));
        let zc = z.col(c);
        let uc = upstream.col(c);
        let gc = g.col_mut(c);
        let inv = S::one() / norm;
        for i in 0..gc.len() {
            gc[i] = (uc[i] - zc[i] * radial) * inv;
        }
    }

    let mut grads: Vec<DenseLayer<S>> = params
        .layers
        .iter()
        .map(|l| DenseLayer {
            weight: DenseMatrix::zeros(l.weight.rows(), l.weight.cols()),
            bias: vec![S::zero(); l.bias.len()],
        })
        .collect();

    for l in (0..n_layers).rev() {
        let input = &cache.activations[l];
        // dW = g · input^T, db = row sums of g
        grads[l].weight = g.matmul(&input.transpose())?;
        for c in 0..g.cols() {
            let col = g.col(c);
            for (i, b) in grads[l].bias.iter_mut().enumerate() {
                *b += col[i];
            }
        }
        if !grads[l].weight.is_finite() || !grads[l].bias.iter().all(|x| x.is_finite()) {
            return Err(Error::NumericalFailure(format!(
                "non-finite gradient at layer {l}"
            )));
        }
        if l > 0 {
            let mut back = params.layers[l].weight.transpose().matmul(&g)?;
            // Rectifier mask from the post-activation values.
            let act = &cache.activations[l];
            for c in 0..back.cols() {
                let acol = act.col(c);
                let bcol = back.col_mut(c);
                for i in 0..bcol.len() {
                    if acol[i] <= S::zero() {
                        bcol[i] = S::zero();
                    }
                }
            }
            g = back;
        }
    }
    Ok(EncoderGrads { layers: grads })
}

/// Optimizer family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptMethod {
    Adam,
    Sgd,
}

/// Optimizer state with first/second moment accumulators shaped like the
/// parameters. Weight decay is decoupled from the adaptive step.
#[derive(Debug, Clone)]
pub struct OptimizerState<S> {
    pub method: OptMethod,
    pub learning_rate: S,
    pub weight_decay: S,
    pub step: u64,
    beta1: S,
    beta2: S,
    eps: S,
    m: Vec<DenseLayer<S>>,
    v: Vec<DenseLayer<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(
        method: OptMethod,
        learning_rate: S,
        weight_decay: S,
        params: &EncoderParams<S>,
    ) -> Self {
        let zeros = || -> Vec<DenseLayer<S>> {
            params
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: DenseMatrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![S::zero(); l.bias.len()],
                })
                .collect()
        };
        Self {
            method,
            learning_rate,
            weight_decay,
            step: 0,
            beta1: S::of(0.9),
            beta2: S::of(0.999),
            eps: S::of(1e-8),
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One optimizer update; deterministic given state, params and grads.
pub fn optimizer_step<S: Scalar>(
    state: &mut OptimizerState<S>,
    params: &mut EncoderParams<S>,
    grads: &EncoderGrads<S>,
) {
    state.step += 1;
    let lr = state.learning_rate;
    let wd = state.weight_decay;
    match state.method {
        OptMethod::Sgd => {
            for (layer, g) in params.layers.iter_mut().zip(&grads.layers) {
                update_slices(layer, g, |p, g| p - lr * (g + wd * p));
            }
        }
        OptMethod::Adam => {
            let b1 = state.beta1;
            let b2 = state.beta2;
            let eps = state.eps;
            let bc1 = S::one() - b1.powi(state.step as i32);
            let bc2 = S::one() - b2.powi(state.step as i32);
            for (((layer, g), m), v) in params
                .layers
                .iter_mut()
                .zip(&grads.layers)
                .zip(&mut state.m)
                .zip(&mut state.v)
            {
                for i in 0..layer.weight.cols() {
                    let pw = layer.weight.col_mut(i);
                    let gw = g.weight.col(i);
                    let mw = m.weight.col_mut(i);
                    let vw = v.weight.col_mut(i);
                    for j in 0..pw.len() {
                        mw[j] = b1 * mw[j] + (S::one() - b1) * gw[j];
                        vw[j] = b2 * vw[j] + (S::one() - b2) * gw[j] * gw[j];
                        let mh = mw[j] / bc1;
                        let vh = vw[j] / bc2;
                        pw[j] = pw[j] - lr * (mh / (vh.sqrt() + eps) + wd * pw[j]);
                    }
                }
                for j in 0..layer.bias.len() {
                    let gb = g.bias[j];
                    m.bias[j] = b1 * m.bias[j] + (S::one() - b1) * gb;
                    v.bias[j] = b2 * v.bias[j] + (S::one() - b2) * gb * gb;
                    let mh = m.bias[j] / bc1;
                    let vh = v.bias[j] / bc2;
                    layer.bias[j] = layer.bias[j] - lr * (mh / (vh.sqrt() + eps) + wd * layer.bias[j]);
                }
            }
        }
    }
}

fn update_slices<S: Scalar>(layer: &mut DenseLayer<S>, g: &DenseLayer<S>, f: impl Fn(S, S) -> S) {
    for c in 0..layer.weight.cols() {
        let pw = layer.weight.col_mut(c);
        let gw = g.weight.col(c);
        for j in 0..pw.len() {
            pw[j] = f(pw[j], gw[j]);
        }
    }
    for (p, g) in layer.bias.iter_mut().zip(&g.bias) {
        *p = f(*p, *g);
    }
}

/// Encoder-free update: descend on the features and renormalize columns.
pub fn direct_feature_step<S: Scalar>(
    z: &FeatureMatrix<S>,
    grad: &DenseMatrix<S>,
    step_size: S,
) -> Result<FeatureMatrix<S>> {
    if grad.rows() != z.feature_dim() || grad.cols() != z.sample_count() {
        return Err(Error::DimensionMismatch(format!(
            "gradient {}x{} for features {}x{}",
            grad.rows(),
            grad.cols(),
            z.feature_dim(),
            z.sample_count()
        )));
    }
    if step_size == S::zero() || grad.max_abs() == S::zero() {
        return Ok(z.clone());
    }
    let moved = z.matrix().add_scaled(grad, -step_size)?;
    Ok(FeatureMatrix::from_normalized(&moved))
}

/// Writes encoder parameters: versioned header, layer count, per-layer
/// dims and row-major 64-bit floats.
pub fn write_params<S: Scalar, W: Write>(w: &mut W, params: &EncoderParams<S>) -> Result<()> {
    w.write_all(PARAMS_MAGIC)?;
    write_u16_le(w, PARAMS_VERSION)?;
    write_u32_le(w, params.layers.len() as u32)?;
    for layer in &params.layers {
        write_u32_le(w, layer.weight.rows() as u32)?;
        write_u32_le(w, layer.weight.cols() as u32)?;
        for r in 0..layer.weight.rows() {
            for c in 0..layer.weight.cols() {
                write_f64_le(w, layer.weight.get(r, c).to_f64_lossy())?;
            }
        }
        for b in &layer.bias {
            write_f64_le(w, b.to_f64_lossy())?;
        }
    }
    Ok(())
}

/// Reads encoder parameters written by [`write_params`].
pub fn read_params<S: Scalar, R: Read>(r: &mut R) -> Result<EncoderParams<S>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PARAMS_MAGIC {
        return Err(Error::CorruptMessage(format!(
            "bad checkpoint magic {magic:02x?}"
        )));
    }
    let version = read_u16_le(r)?;
    if version != PARAMS_VERSION {
        return Err(Error::CorruptMessage(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let n_layers = read_u32_le(r)? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(Error::CorruptMessage(format!(
            "implausible layer count {n_layers}"
        )));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let rows = read_u32_le(r)? as usize;
        let cols = read_u32_le(r)? as usize;
        if rows == 0 || cols == 0 || rows * cols > (1 << 26) {
            return Err(Error::CorruptMessage(format!(
                "implausible layer shape {rows}x{cols}"
            )));
        }
        let mut weight = DenseMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let x = read_f64_le(r)?;
                if !x.is_finite() {
                    return Err(Error::CorruptMessage("non-finite weight".into()));
                }
                weight.set(i, j, S::of(x));
            }
        }
        let mut bias = Vec::with_capacity(rows);
        for _ in 0..rows {
            let x = read_f64_le(r)?;
            if !x.is_finite() {
                return Err(Error::CorruptMessage("non-finite bias".into()));
            }
            bias.push(S::of(x));
        }
        layers.push(DenseLayer { weight, bias });
    }
    EncoderParams::new(layers)
}

/// Convenience file wrappers.
pub fn save_params<S: Scalar>(params: &EncoderParams<S>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_params<S: Scalar>(path: &Path) -> Result<EncoderParams<S>> {
    read_params(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> EncoderParams<f64> {
        init_encoder(&[3, 5, 2], seed).unwrap()
    }

    #[test]
    fn zero_weights_with_bias_emit_the_bias_direction() {
        let layers = vec![DenseLayer {
            weight: DenseMatrix::zeros(2, 3),
            bias: vec![1.0, 0.0],
        }];
        let params = EncoderParams::new(layers).unwrap();
        let x = DenseMatrix::from_fn(3, 4, |r, c| (r + c) as f64);
        let z = forward(&params, &x).unwrap();
        for c in 0..4 {
            assert_eq!(z.matrix().get(0, c), 1.0);
            assert_eq!(z.matrix().get(1, c), 0.0);
        }
    }

    #[test]
    fn outputs_are_unit_norm() {
        let params = tiny(17);
        let x = DenseMatrix::from_fn(3, 6, |r, c| ((r * 7 + c * 3) % 5) as f64 - 2.0);
        let z = forward(&params, &x).unwrap();
        for c in 0..6 {
            let n = dot(z.matrix().col(c), z.matrix().col(c)).sqrt();
            assert!((n - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let params = tiny(3);
        let x = DenseMatrix::from_fn(3, 4, |r, c| (r as f64 - c as f64) * 0.37);
        let a = forward(&params, &x).unwrap();
        let b = forward(&params, &x).unwrap();
        assert_eq!(a.matrix().data(), b.matrix().data());
    }

    #[test]
    fn radial_upstream_gradient_is_annihilated() {
        let params = tiny(5);
        let x = DenseMatrix::from_fn(3, 2, |r, c| 0.5 + (r + 2 * c) as f64 * 0.25);
        let z = forward(&params, &x).unwrap();
        // Upstream gradient parallel to the outputs themselves.
        let g = backward(&params, &x, z.matrix()).unwrap();
        for layer in &g.layers {
            assert!(layer.weight.max_abs() < 1e-12);
            assert!(layer.bias.iter().all(|b| b.abs() < 1e-12));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_parameter_gradient() {
        let params = tiny(11);
        let x = DenseMatrix::from_fn(3, 4, |r, c| (r * c) as f64 * 0.1 - 0.2);
        let zero = DenseMatrix::zeros(2, 4);
        let g = backward(&params, &x, &zero).unwrap();
        for layer in &g.layers {
            assert_eq!(layer.weight.max_abs(), 0.0);
        }
    }

    #[test]
    fn scaling_pre_normalization_columns_is_invariant() {
        // Double every weight in the last (linear) layer: outputs scale by
        // 2 pre-normalization, so normalized features are unchanged.
        let params = tiny(23);
        let mut scaled = params.clone();
        let last = scaled.layers.len() - 1;
        scaled.layers[last].weight = scaled.layers[last].weight.scale(2.0);
        for b in &mut scaled.layers[last].bias {
            *b *= 2.0;
        }
        let x = DenseMatrix::from_fn(3, 3, |r, c| 0.3 * (r as f64) - 0.2 * (c as f64) + 0.5);
        let a = forward(&params, &x).unwrap();
        let b = forward(&scaled, &x).unwrap();
        let diff = a.matrix().add_scaled(b.matrix(), -1.0).unwrap();
        assert!(diff.max_abs() < 1e-8);
    }

    #[test]
    fn adam_step_is_sign_like_from_zero_moments() {
        // Single 1x1 layer, gradient g: first Adam step ≈ -lr·sign(g).
        let params = EncoderParams::new(vec![DenseLayer {
            weight: DenseMatrix::new(1, 1, vec![0.5]).unwrap(),
            bias: vec![0.0],
        }])
        .unwrap();
        let mut p = params.clone();
        let mut st = OptimizerState::new(OptMethod::Adam, 0.01, 0.0, &p);
        let g = EncoderGrads {
            layers: vec![DenseLayer {
                weight: DenseMatrix::new(1, 1, vec![3.7]).unwrap(),
                bias: vec![0.0],
            }],
        };
        optimizer_step(&mut st, &mut p, &g);
        let delta: f64 = p.layers[0].weight.get(0, 0) - 0.5;
        // m̂ = g, v̂ = g² → Δ = -lr·g/(|g|+eps) ≈ -lr
        assert!((delta + 0.01).abs() < 1e-6);
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let mut p = tiny(2);
        let before = p.clone();
        let mut st = OptimizerState::new(OptMethod::Adam, 0.1, 0.0, &p);
        let g = EncoderGrads {
            layers: p
                .layers()
                .iter()
                .map(|l| DenseLayer {
                    weight: DenseMatrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        };
        optimizer_step(&mut st, &mut p, &g);
        for (a, b) in p.layers().iter().zip(before.layers()) {
            assert_eq!(a.weight.data(), b.weight.data());
        }
    }

    #[test]
    fn weight_decay_only_shrinks_multiplicatively() {
        let mut p = EncoderParams::new(vec![DenseLayer {
            weight: DenseMatrix::new(1, 1, vec![2.0f64]).unwrap(),
            bias: vec![0.0],
        }])
        .unwrap();
        let mut st = OptimizerState::new(OptMethod::Sgd, 0.1, 0.5, &p);
        let g = EncoderGrads {
            layers: vec![DenseLayer {
                weight: DenseMatrix::zeros(1, 1),
                bias: vec![0.0],
            }],
        };
        optimizer_step(&mut st, &mut p, &g);
        // p ← p(1 - lr·wd) = 2.0 · 0.95
        assert!((p.layers()[0].weight.get(0, 0) - 1.9).abs() < 1e-12);
    }

    #[test]
    fn direct_step_cases() {
        let z = FeatureMatrix::from_normalized(&DenseMatrix::from_fn(3, 2, |r, c| {
            if r == c {
                1.0
            } else {
                0.1
            }
        }));
        // Zero gradient: unchanged.
        let zero = DenseMatrix::zeros(3, 2);
        let z2 = direct_feature_step(&z, &zero, 0.1).unwrap();
        assert_eq!(z.matrix().data(), z2.matrix().data());
        // Radial gradient: renormalization undoes it.
        let radial = z.matrix().scale(0.5);
        let z3 = direct_feature_step(&z, &radial, 0.1).unwrap();
        let diff = z.matrix().add_scaled(z3.matrix(), -1.0).unwrap();
        assert!(diff.max_abs() < 1e-12);
    }

    #[test]
    fn params_round_trip_bit_exact() {
        let p = tiny(41);
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();
        let q: EncoderParams<f64> = read_params(&mut &buf[..]).unwrap();
        for (a, b) in p.layers().iter().zip(q.layers()) {
            assert_eq!(a.weight.data(), b.weight.data());
            assert_eq!(a.bias, b.bias);
        }
    }
}
