//! Bias-free ReLU networks with a fixed averaging read-out.
//!
//! A trunk maps `x ∈ R^{K_0}` through `L` ReLU layers and returns the mean of
//! the last hidden layer:
//!
//! ```text
//! out(x) = (1/K_L) · 1ᵀ σ(θ_Lᵀ σ(θ_{L-1}ᵀ … σ(θ_1ᵀ x)))
//! ```
//!
//! The read-out is not trainable. A vector-valued network (a successor
//! feature with `head_dim = d`) is `d` independent trunks of identical shape;
//! coordinate `k` of the output is trunk `k` evaluated on `x`.
//!
//! All parameters live in one flat buffer: trunks back to back, layers back to
//! back inside a trunk, and each layer stored neuron-major (row `j` holds the
//! incoming weights of unit `j`). Gradients use the same layout, so a gradient
//! is itself a [`NetworkParams`].

use crate::codec;
use crate::error::{ensure, Error, Result};
use crate::linalg;
use crate::rng::{self, Rng};

/// Layer widths of one trunk. `widths[l]` is `K_{l+1}`; the input is `K_0`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetShape {
    input_dim: usize,
    widths: Vec<usize>,
}

impl NetShape {
    pub fn new(input_dim: usize, widths: Vec<usize>) -> Result<Self> {
        ensure(input_dim >= 1, || "input dimension must be at least 1".into())?;
        ensure(!widths.is_empty(), || "a trunk needs at least one hidden layer".into())?;
        ensure(widths.iter().all(|&k| k >= 1), || {
            format!("all layer widths must be >= 1, got {widths:?}")
        })?;
        Ok(Self { input_dim, widths })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Number of hidden layers `L`.
    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// `(fan_out, fan_in)` of layer `l` (0-based).
    pub fn layer_dims(&self, l: usize) -> (usize, usize) {
        let fan_in = if l == 0 { self.input_dim } else { self.widths[l - 1] };
        (self.widths[l], fan_in)
    }

    fn layer_offset(&self, l: usize) -> usize {
        (0..l)
            .map(|i| {
                let (o, n) = self.layer_dims(i);
                o * n
            })
            .sum()
    }

    /// Range of layer `l` inside one trunk's parameter block.
    pub fn layer_range(&self, l: usize) -> std::ops::Range<usize> {
        let (o, n) = self.layer_dims(l);
        let start = self.layer_offset(l);
        start..start + o * n
    }

    /// Parameter count of a single trunk.
    pub fn trunk_len(&self) -> usize {
        self.layer_offset(self.depth())
    }
}

/// A state-action feature `x(s,a)` with Euclidean norm at most one.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        ensure(values.iter().all(|v| v.is_finite()), || "feature has non-finite entries".into())?;
        let n = linalg::norm(&values);
        ensure(n <= 1.0 + 1e-12, || format!("feature norm {n} exceeds 1"))?;
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Weights of `head_dim` identically shaped trunks.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    shape: NetShape,
    head_dim: usize,
    data: Vec<f64>,
}

/// Activations of one forward pass through a trunk, kept for backprop.
#[derive(Clone, Debug)]
pub struct TrunkPass {
    /// `post[0]` is the input; `post[l + 1] = σ(pre[l])`.
    post: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    output: f64,
}

impl TrunkPass {
    pub fn output(&self) -> f64 {
        self.output
    }

    /// Smallest |pre-activation| over all hidden units of this pass.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.pre
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }

    /// Active flag of every hidden unit, layer by layer.
    pub fn activity(&self) -> Vec<bool> {
        self.pre.iter().flatten().map(|&z| z > 0.0).collect()
    }
}

#[inline]
fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

// σ'(0) := 0, same as an inactive unit.
#[inline]
fn relu_prime(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        0.0
    }
}

impl NetworkParams {
    pub fn new(shape: NetShape, head_dim: usize, data: Vec<f64>) -> Result<Self> {
        ensure(head_dim >= 1, || "head_dim must be >= 1".into())?;
        let want = shape.trunk_len() * head_dim;
        if data.len() != want {
            return Err(Error::Shape(format!(
                "expected {want} parameters for {head_dim} trunk(s) of {shape:?}, got {}",
                data.len()
            )));
        }
        ensure(data.iter().all(|v| v.is_finite()), || "weights must be finite".into())?;
        Ok(Self { shape, head_dim, data })
    }

    pub fn zeros(shape: NetShape, head_dim: usize) -> Self {
        let n = shape.trunk_len() * head_dim.max(1);
        Self { shape, head_dim: head_dim.max(1), data: vec![0.0; n] }
    }

    /// He-style Gaussian initialization, `N(0, 2 / fan_in)` per entry.
    pub fn random(shape: NetShape, head_dim: usize, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(shape, head_dim);
        for k in 0..p.head_dim {
            for l in 0..p.shape.depth() {
                let (_, fan_in) = p.shape.layer_dims(l);
                let std = (2.0 / fan_in as f64).sqrt();
                let range = p.layer_range_in(k, l);
                for v in &mut p.data[range] {
                    *v = std * rng::normal(rng);
                }
            }
        }
        p
    }

    /// Identity matrix helper for hand-built examples: a one-layer trunk whose
    /// weight matrix is `I_n`.
    pub fn identity(n: usize) -> Self {
        let shape = NetShape::new(n, vec![n]).expect("n >= 1");
        let mut p = Self::zeros(shape, 1);
        for i in 0..n {
            p.data[i * n + i] = 1.0;
        }
        p
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn trunk_range(&self, k: usize) -> std::ops::Range<usize> {
        let n = self.shape.trunk_len();
        k * n..(k + 1) * n
    }

    /// Range of layer `l` of trunk `k` in the flat buffer.
    pub fn layer_range_in(&self, k: usize, l: usize) -> std::ops::Range<usize> {
        let base = self.trunk_range(k).start;
        let r = self.shape.layer_range(l);
        base + r.start..base + r.end
    }

    pub fn trunk(&self, k: usize) -> &[f64] {
        &self.data[self.trunk_range(k)]
    }

    /// Trunk `k` as a standalone scalar network.
    pub fn trunk_params(&self, k: usize) -> Result<NetworkParams> {
        if k >= self.head_dim {
            return Err(Error::Shape(format!("trunk {k} out of range (head_dim {})", self.head_dim)));
        }
        Ok(Self { shape: self.shape.clone(), head_dim: 1, data: self.trunk(k).to_vec() })
    }

    /// Stacks scalar trunks into one vector-valued network.
    pub fn stack(trunks: &[NetworkParams]) -> Result<NetworkParams> {
        let first = trunks
            .first()
            .ok_or_else(|| Error::Validation("cannot stack zero trunks".into()))?;
        let mut data = Vec::with_capacity(first.len() * trunks.len());
        for t in trunks {
            if t.shape != first.shape || t.head_dim != 1 {
                return Err(Error::Shape("stacked trunks must be scalar and share a shape".into()));
            }
            data.extend_from_slice(&t.data);
        }
        NetworkParams::new(first.shape.clone(), trunks.len(), data)
    }

    pub fn same_layout(&self, other: &NetworkParams) -> bool {
        self.shape == other.shape && self.head_dim == other.head_dim
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.shape.input_dim {
            return Err(Error::Shape(format!(
                "input has length {}, network expects {}",
                x.len(),
                self.shape.input_dim
            )));
        }
        ensure(x.iter().all(|v| v.is_finite()), || "input has non-finite entries".into())
    }

    /// Forward pass through trunk `k`, keeping the activations.
    pub fn trunk_pass(&self, k: usize, x: &[f64]) -> TrunkPass {
        let theta = self.trunk(k);
        let depth = self.shape.depth();
        let mut post = Vec::with_capacity(depth + 1);
        let mut pre = Vec::with_capacity(depth);
        post.push(x.to_vec());
        for l in 0..depth {
            let (fan_out, fan_in) = self.shape.layer_dims(l);
            let w = &theta[self.shape.layer_range(l)];
            let input = &post[l];
            let z: Vec<f64> = (0..fan_out)
                .map(|j| linalg::dot(&w[j * fan_in..(j + 1) * fan_in], input))
                .collect();
            post.push(z.iter().map(|&v| relu(v)).collect());
            pre.push(z);
        }
        let last = &post[depth];
        let output = last.iter().sum::<f64>() / last.len() as f64;
        TrunkPass { post, pre, output }
    }

    /// Trunk output without keeping activations.
    pub fn trunk_output(&self, k: usize, x: &[f64]) -> f64 {
        let theta = self.trunk(k);
        let depth = self.shape.depth();
        let mut h = x.to_vec();
        for l in 0..depth {
            let (fan_out, fan_in) = self.shape.layer_dims(l);
            let w = &theta[self.shape.layer_range(l)];
            h = (0..fan_out)
                .map(|j| relu(linalg::dot(&w[j * fan_in..(j + 1) * fan_in], &h)))
                .collect();
        }
        h.iter().sum::<f64>() / h.len() as f64
    }

    /// Adds `scale · ∂out_k/∂θ` for trunk `k` into `grad` (same layout as
    /// `self`).
    pub fn accumulate_trunk_grad(&self, k: usize, pass: &TrunkPass, scale: f64, grad: &mut [f64]) {
        if scale == 0.0 {
            return;
        }
        let theta = self.trunk(k);
        let base = self.trunk_range(k).start;
        let depth = self.shape.depth();
        let k_last = self.shape.widths[depth - 1] as f64;
        let mut delta: Vec<f64> = pass.pre[depth - 1]
            .iter()
            .map(|&z| relu_prime(z) * scale / k_last)
            .collect();
        for l in (0..depth).rev() {
            let (fan_out, fan_in) = self.shape.layer_dims(l);
            let range = self.shape.layer_range(l);
            let input = &pass.post[l];
            let g = &mut grad[base + range.start..base + range.end];
            for j in 0..fan_out {
                if delta[j] != 0.0 {
                    linalg::axpy(delta[j], input, &mut g[j * fan_in..(j + 1) * fan_in]);
                }
            }
            if l > 0 {
                let w = &theta[range];
                let mut next = vec![0.0; fan_in];
                for j in 0..fan_out {
                    if delta[j] != 0.0 {
                        linalg::axpy(delta[j], &w[j * fan_in..(j + 1) * fan_in], &mut next);
                    }
                }
                for (n, z) in next.iter_mut().zip(&pass.pre[l - 1]) {
                    *n *= relu_prime(*z);
                }
                delta = next;
            }
        }
    }

    /// Scalar network output. Requires `head_dim == 1`.
    pub fn forward_scalar(&self, x: &[f64]) -> Result<f64> {
        self.require_scalar()?;
        self.check_input(x)?;
        Ok(self.trunk_output(0, x))
    }

    /// Successor-feature output: one coordinate per trunk.
    pub fn forward_sf(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        (0..self.head_dim).map(|k| self.trunk_output(k, x)).collect()
    }

    /// `⟨ψ(x), w⟩` without allocating the output vector.
    pub(crate) fn forward_dot(&self, x: &[f64], w: &[f64]) -> f64 {
        (0..self.head_dim).map(|k| self.trunk_output(k, x) * w[k]).sum()
    }

    /// Gradient of the scalar output with respect to every weight.
    pub fn grad_scalar(&self, x: &[f64]) -> Result<NetworkParams> {
        self.require_scalar()?;
        self.grad_sf(x, &[1.0])
    }

    /// Gradient of `upstreamᵀ ψ(x)`: trunk `k` receives `upstream[k]` times
    /// its own scalar gradient.
    pub fn grad_sf(&self, x: &[f64], upstream: &[f64]) -> Result<NetworkParams> {
        self.check_input(x)?;
        if upstream.len() != self.head_dim {
            return Err(Error::Validation(format!(
                "upstream has length {}, head_dim is {}",
                upstream.len(),
                self.head_dim
            )));
        }
        ensure(upstream.iter().all(|v| v.is_finite()), || "upstream must be finite".into())?;
        let mut grad = NetworkParams::zeros(self.shape.clone(), self.head_dim);
        for (k, &u) in upstream.iter().enumerate() {
            if u != 0.0 {
                let pass = self.trunk_pass(k, x);
                self.accumulate_trunk_grad(k, &pass, u, &mut grad.data);
            }
        }
        Ok(grad)
    }

    /// Smallest |pre-activation| over every unit of every trunk at input `x`.
    pub fn min_abs_preactivation(&self, x: &[f64]) -> f64 {
        (0..self.head_dim)
            .map(|k| self.trunk_pass(k, x).min_abs_preactivation())
            .fold(f64::INFINITY, f64::min)
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &NetworkParams) -> Result<()> {
        self.require_same_layout(other)?;
        linalg::axpy(alpha, &other.data, &mut self.data);
        Ok(())
    }

    fn require_scalar(&self) -> Result<()> {
        if self.head_dim != 1 {
            return Err(Error::Shape(format!(
                "scalar network required, head_dim is {}",
                self.head_dim
            )));
        }
        Ok(())
    }

    fn require_same_layout(&self, other: &NetworkParams) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::Shape(format!(
                "layouts differ: {:?}x{} vs {:?}x{}",
                self.shape, self.head_dim, other.shape, other.head_dim
            )));
        }
        Ok(())
    }

    /// Appends the binary record: magic, version, `L`, `K_0..K_L`,
    /// `head_dim`, then all weights as little-endian `f64`.
    pub fn encode(&self, out: &mut Vec<u8>) -> Result<()> {
        out.extend_from_slice(b"SFNP");
        codec::put_u32(out, 1);
        codec::put_len(out, self.shape.depth())?;
        codec::put_len(out, self.shape.input_dim)?;
        for &k in &self.shape.widths {
            codec::put_len(out, k)?;
        }
        codec::put_len(out, self.head_dim)?;
        codec::put_f64s(out, &self.data);
        Ok(())
    }

    pub fn decode(input: &mut &[u8]) -> Result<NetworkParams> {
        codec::expect_magic(input, b"SFNP")?;
        let version = codec::get_u32(input)?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported network record version {version}")));
        }
        let depth = codec::get_len(input)?;
        let input_dim = codec::get_len(input)?;
        let widths = (0..depth)
            .map(|_| codec::get_len(input))
            .collect::<Result<Vec<_>>>()?;
        let head_dim = codec::get_len(input)?;
        let shape = NetShape::new(input_dim, widths).map_err(|e| Error::Format(e.to_string()))?;
        let data = codec::get_f64s(input, shape.trunk_len() * head_dim)?;
        NetworkParams::new(shape, head_dim, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode(&mut out).expect("network dimensions fit in u32");
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<NetworkParams> {
        let p = Self::decode(&mut bytes)?;
        if !bytes.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after network record", bytes.len())));
        }
        Ok(p)
    }
}

/// Euclidean norm of the difference of all concatenated weights (equal to the
/// Frobenius norm summed over layers and trunks).
pub fn param_distance(a: &NetworkParams, b: &NetworkParams) -> Result<f64> {
    a.require_same_layout(b)?;
    Ok(linalg::distance(&a.data, &b.data))
}

/// A point drawn uniformly on the sphere of `radius` around `target`
/// (pulled inward by rounding if needed so the distance never exceeds
/// `radius`).
pub fn init_near(target: &NetworkParams, radius: f64, seed: u64) -> Result<NetworkParams> {
    ensure(radius >= 0.0 && radius.is_finite(), || {
        format!("radius must be finite and non-negative, got {radius}")
    })?;
    if radius == 0.0 {
        return Ok(target.clone());
    }
    let mut rng = rng::from_seed(seed);
    let dir = rng::unit_vector(&mut rng, target.len());
    let mut scale = radius;
    loop {
        let mut out = target.clone();
        linalg::axpy(scale, &dir, &mut out.data);
        let d = linalg::distance(&out.data, &target.data);
        if d <= radius {
            return Ok(out);
        }
        scale *= radius / d * (1.0 - 4.0 * f64::EPSILON);
    }
}
