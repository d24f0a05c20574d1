//! Feedforward networks with a smooth activation: parameter storage, forward
//! realization, spatial gradients, and reverse-mode parameter gradients of
//! batch scalars built from values and spatial gradients.
//!
//! Parameters are stored flat, layer by layer (`A_l` row-major, then `b_l`),
//! which keeps optimizer updates and checkpointing trivial. The parameter
//! gradient of a batch functional differentiates through the spatial-gradient
//! computation by running a forward tangent sweep in the cotangent direction
//! of each point's gradient and reverse-accumulating over the combined
//! computation.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::ops::Range;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::estimators::{BatchEval, BatchFunctional, DiffusionData, EstimatorError};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid architecture: {0}")]
    BadArchitecture(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("operation requires a scalar output layer, architecture ends in {got}")]
    ScalarOutputRequired { got: usize },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// C1 activation applied componentwise on hidden layers.
///
/// `slope` and `curvature` receive previously computed quantities at the same
/// pre-activation so implementations like tanh can avoid re-evaluating the
/// transcendental.
pub trait Activation: Send + Sync {
    fn value(&self, z: f64) -> f64;
    /// First derivative at `z`; `value` is the activation already computed there.
    fn slope(&self, z: f64, value: f64) -> f64;
    /// Second derivative at `z`, given the activation value and slope there.
    fn curvature(&self, z: f64, value: f64, slope: f64) -> f64;
}

/// Hyperbolic tangent, the shipped activation.
#[derive(Debug, Clone, Copy, Default)]
pub struct Tanh;

impl Activation for Tanh {
    fn value(&self, z: f64) -> f64 {
        z.tanh()
    }

    fn slope(&self, _z: f64, value: f64) -> f64 {
        1.0 - value * value
    }

    fn curvature(&self, _z: f64, value: f64, slope: f64) -> f64 {
        -2.0 * value * slope
    }
}

/// Layer-size list `(N_0, ..., N_L)` with the derived flat-parameter layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkArchitecture {
    sizes: Vec<usize>,
    weight_offsets: Vec<usize>,
    bias_offsets: Vec<usize>,
    param_count: usize,
}

impl NetworkArchitecture {
    pub fn new(sizes: Vec<usize>) -> Result<Self, NetworkError> {
        if sizes.len() < 2 {
            return Err(NetworkError::BadArchitecture(format!(
                "need at least input and output layers, got {sizes:?}"
            )));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(NetworkError::BadArchitecture(format!("zero-width layer in {sizes:?}")));
        }
        let mut weight_offsets = Vec::with_capacity(sizes.len() - 1);
        let mut bias_offsets = Vec::with_capacity(sizes.len() - 1);
        let mut off = 0;
        for l in 1..sizes.len() {
            weight_offsets.push(off);
            off += sizes[l] * sizes[l - 1];
            bias_offsets.push(off);
            off += sizes[l];
        }
        Ok(Self { sizes, weight_offsets, bias_offsets, param_count: off })
    }

    /// Input dim `d` and hidden widths, output width 1.
    pub fn scalar(input_dim: usize, hidden: &[usize]) -> Result<Self, NetworkError> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self::new(sizes)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Number of weighted layers `L`.
    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Total parameter count `sum_l N_l (N_{l-1} + 1)`.
    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// Total number of hidden units, the per-point trace size.
    pub fn hidden_units(&self) -> usize {
        self.sizes[1..self.sizes.len() - 1].iter().sum()
    }

    fn max_width(&self) -> usize {
        *self.sizes.iter().max().unwrap()
    }

    /// Flat range of `A_l`, `l` in `1..=L`.
    fn weight_range(&self, l: usize) -> Range<usize> {
        let start = self.weight_offsets[l - 1];
        start..start + self.sizes[l] * self.sizes[l - 1]
    }

    fn bias_range(&self, l: usize) -> Range<usize> {
        let start = self.bias_offsets[l - 1];
        start..start + self.sizes[l]
    }

    /// Offset of hidden layer `l`'s units within a per-point trace row.
    fn hidden_offset(&self, l: usize) -> usize {
        self.sizes[1..l].iter().sum()
    }
}

/// Flat parameter vector of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    arch: NetworkArchitecture,
    data: Vec<f64>,
}

impl NetworkParams {
    pub fn zeros(arch: NetworkArchitecture) -> Self {
        let n = arch.param_count();
        Self { arch, data: vec![0.0; n] }
    }

    pub fn from_flat(arch: NetworkArchitecture, data: Vec<f64>) -> Result<Self, NetworkError> {
        if data.len() != arch.param_count() {
            return Err(NetworkError::DimensionMismatch {
                expected: arch.param_count(),
                got: data.len(),
            });
        }
        Ok(Self { arch, data })
    }

    pub fn arch(&self) -> &NetworkArchitecture {
        &self.arch
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn weights(&self, l: usize) -> &[f64] {
        &self.data[self.arch.weight_range(l)]
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut [f64] {
        let r = self.arch.weight_range(l);
        &mut self.data[r]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        &self.data[self.arch.bias_range(l)]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let r = self.arch.bias_range(l);
        &mut self.data[r]
    }

    /// Evaluate the realization at one point (tanh hidden layers, affine
    /// output).
    pub fn realize(&self, x: &[f64]) -> Result<f64, NetworkError> {
        self.realize_with(&Tanh, x)
    }

    pub fn realize_with<A: Activation>(&self, act: &A, x: &[f64]) -> Result<f64, NetworkError> {
        let mut values = [0.0];
        let mut grads = vec![0.0; x.len()];
        forward_batch_impl(self, act, x, x.len(), &mut values, Some(&mut grads), None, false)?;
        Ok(values[0])
    }

    /// Value together with the spatial gradient, by one reverse sweep through
    /// the layer stack.
    pub fn realize_with_spatial_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), NetworkError> {
        self.realize_with_spatial_grad_act(&Tanh, x)
    }

    pub fn realize_with_spatial_grad_act<A: Activation>(
        &self,
        act: &A,
        x: &[f64],
    ) -> Result<(f64, Vec<f64>), NetworkError> {
        let mut values = [0.0];
        let mut grads = vec![0.0; x.len()];
        forward_batch_impl(self, act, x, x.len(), &mut values, Some(&mut grads), None, true)?;
        Ok((values[0], grads))
    }
}

/// Parameter initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// `A_l` entries uniform on `[-1/sqrt(N_{l-1}), 1/sqrt(N_{l-1})]`, zero
    /// biases.
    UniformFanIn,
}

/// Deterministic parameter initialization.
pub fn init_params(arch: &NetworkArchitecture, seed: u64, scheme: InitScheme) -> NetworkParams {
    let mut params = NetworkParams::zeros(arch.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match scheme {
        InitScheme::UniformFanIn => {
            for l in 1..=arch.num_layers() {
                let bound = 1.0 / (arch.sizes[l - 1] as f64).sqrt();
                for w in params.weights_mut(l) {
                    *w = rng.random_range(-bound..bound);
                }
            }
        }
    }
    params
}

/// Stored hidden-layer pre-activations and activations for a batch, enabling
/// gradient replay without re-evaluating the activation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    batch: usize,
    units: usize,
    pre: Vec<f64>,
    act: Vec<f64>,
}

impl ForwardTrace {
    pub fn new(arch: &NetworkArchitecture, batch: usize) -> Self {
        let units = arch.hidden_units();
        Self { batch, units, pre: vec![0.0; batch * units], act: vec![0.0; batch * units] }
    }

    fn row_pre(&self, p: usize) -> &[f64] {
        &self.pre[p * self.units..(p + 1) * self.units]
    }

    fn row_act(&self, p: usize) -> &[f64] {
        &self.act[p * self.units..(p + 1) * self.units]
    }
}

/// `y += A x` with `A` row-major `rows x cols`.
fn matvec_add(a: &[f64], x: &[f64], y: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &a[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        y[r] += acc;
    }
}

/// `y += A^T x` with `A` row-major `rows x cols`.
fn matvec_t_add(a: &[f64], x: &[f64], y: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &a[r * cols..(r + 1) * cols];
        let xr = x[r];
        for c in 0..cols {
            y[c] += row[c] * xr;
        }
    }
}

/// Forward pass over a batch of points for one scalar-output network.
///
/// Writes values, optionally spatial gradients, and optionally the hidden
/// trace for later gradient replay.
pub fn forward_batch<A: Activation>(
    params: &NetworkParams,
    act: &A,
    states: &[f64],
    dim: usize,
    values: &mut [f64],
    grads: &mut [f64],
    trace: Option<&mut ForwardTrace>,
) -> Result<(), NetworkError> {
    forward_batch_impl(params, act, states, dim, values, Some(grads), trace, true)
}

#[allow(clippy::too_many_arguments)]
fn forward_batch_impl<A: Activation>(
    params: &NetworkParams,
    act: &A,
    states: &[f64],
    dim: usize,
    values: &mut [f64],
    mut grads: Option<&mut [f64]>,
    mut trace: Option<&mut ForwardTrace>,
    want_grads: bool,
) -> Result<(), NetworkError> {
    let arch = &params.arch;
    if arch.output_dim() != 1 {
        return Err(NetworkError::ScalarOutputRequired { got: arch.output_dim() });
    }
    if dim != arch.input_dim() {
        return Err(NetworkError::DimensionMismatch { expected: arch.input_dim(), got: dim });
    }
    if states.len() != values.len() * dim {
        return Err(NetworkError::DimensionMismatch {
            expected: values.len() * dim,
            got: states.len(),
        });
    }
    if let Some(g) = grads.as_deref() {
        if g.len() != values.len() * dim {
            return Err(NetworkError::DimensionMismatch {
                expected: values.len() * dim,
                got: g.len(),
            });
        }
    }
    if let Some(t) = trace.as_deref() {
        if t.batch != values.len() || t.units != arch.hidden_units() {
            return Err(NetworkError::DimensionMismatch {
                expected: values.len() * arch.hidden_units(),
                got: t.batch * t.units,
            });
        }
    }

    let l_total = arch.num_layers();
    let width = arch.max_width();
    let mut z = vec![0.0; width];
    let mut local_pre = vec![0.0; arch.hidden_units()];
    let mut local_act = vec![0.0; arch.hidden_units()];
    let mut back_cur = vec![0.0; width];
    let mut back_next = vec![0.0; width];

    for p in 0..values.len() {
        let x = &states[p * dim..(p + 1) * dim];

        // Forward through the hidden layers.
        for l in 1..l_total {
            let rows = arch.sizes[l];
            let cols = arch.sizes[l - 1];
            let off = arch.hidden_offset(l);
            z[..rows].copy_from_slice(params.bias(l));
            {
                let input: &[f64] =
                    if l == 1 { x } else { &local_act[arch.hidden_offset(l - 1)..off] };
                matvec_add(params.weights(l), input, &mut z[..rows], rows, cols);
            }
            for j in 0..rows {
                local_pre[off + j] = z[j];
                local_act[off + j] = act.value(z[j]);
            }
        }

        // Affine output layer.
        let rows = 1;
        let cols = arch.sizes[l_total - 1];
        let mut y = params.bias(l_total)[0];
        {
            let input: &[f64] = if l_total == 1 {
                x
            } else {
                &local_act[arch.hidden_offset(l_total - 1)..arch.hidden_units()]
            };
            let mut acc = [0.0];
            matvec_add(params.weights(l_total), input, &mut acc, rows, cols);
            y += acc[0];
        }
        values[p] = y;

        // Reverse sweep dy/dx.
        if want_grads {
            if let Some(g) = grads.as_deref_mut() {
                back_cur[..cols].copy_from_slice(params.weights(l_total));
                for l in (1..l_total).rev() {
                    let rows = arch.sizes[l];
                    let cols_prev = arch.sizes[l - 1];
                    let off = arch.hidden_offset(l);
                    for j in 0..rows {
                        let h = local_act[off + j];
                        back_cur[j] *= act.slope(local_pre[off + j], h);
                    }
                    back_next[..cols_prev].fill(0.0);
                    matvec_t_add(
                        params.weights(l),
                        &back_cur[..rows],
                        &mut back_next[..cols_prev],
                        rows,
                        cols_prev,
                    );
                    std::mem::swap(&mut back_cur, &mut back_next);
                }
                g[p * dim..(p + 1) * dim].copy_from_slice(&back_cur[..dim]);
            }
        }

        if let Some(t) = trace.as_deref_mut() {
            t.pre[p * t.units..(p + 1) * t.units].copy_from_slice(&local_pre);
            t.act[p * t.units..(p + 1) * t.units].copy_from_slice(&local_act);
        }
    }
    Ok(())
}

/// Parameter gradient of a batch functional of `K` networks.
///
/// Builds the per-point values and spatial gradients of every network,
/// obtains the functional's cotangents with respect to them, and
/// reverse-accumulates each point's combined value-and-gradient computation
/// into flat per-network parameter gradients (aligned with
/// [`NetworkParams::data`]).
pub fn batch_loss_param_gradient<A: Activation, F: BatchFunctional + ?Sized>(
    networks: &[NetworkParams],
    act: &A,
    states: &[f64],
    dim: usize,
    weights: &[f64],
    diffusion: DiffusionData,
    functional: &F,
) -> Result<(f64, Vec<Vec<f64>>), NetworkError> {
    let (loss, _eval, grads) =
        batch_loss_param_gradient_full(networks, act, states, dim, weights, diffusion, functional)?;
    Ok((loss, grads))
}

/// As [`batch_loss_param_gradient`], also returning the batch evaluation so
/// callers can reuse the per-point values for diagnostics.
pub fn batch_loss_param_gradient_full<A: Activation, F: BatchFunctional + ?Sized>(
    networks: &[NetworkParams],
    act: &A,
    states: &[f64],
    dim: usize,
    weights: &[f64],
    diffusion: DiffusionData,
    functional: &F,
) -> Result<(f64, BatchEval, Vec<Vec<f64>>), NetworkError> {
    let k = networks.len();
    let batch = weights.len();
    if states.len() != batch * dim {
        return Err(NetworkError::DimensionMismatch { expected: batch * dim, got: states.len() });
    }

    let mut eval = BatchEval::zeros(k, batch, dim);
    eval.weights.copy_from_slice(weights);
    eval.diffusion = diffusion;

    let mut traces: Vec<ForwardTrace> = Vec::with_capacity(k);
    for (i, net) in networks.iter().enumerate() {
        let mut trace = ForwardTrace::new(net.arch(), batch);
        let (values, grads) = eval.values_and_grads_of_mut(i);
        forward_batch(net, act, states, dim, values, grads, Some(&mut trace))?;
        traces.push(trace);
    }

    let (loss, cotangents) = functional.eval_with_cotangents(&eval)?;

    let mut gradients = Vec::with_capacity(k);
    for (i, net) in networks.iter().enumerate() {
        let mut grad = vec![0.0; net.arch().param_count()];
        accumulate_functional_gradient(
            net,
            act,
            states,
            dim,
            &traces[i],
            cotangents.d_values_of(i, batch),
            cotangents.d_grads_of(i, batch, dim),
            &mut grad,
        );
        gradients.push(grad);
    }
    Ok((loss, eval, gradients))
}

/// Reverse accumulation over the combined value + spatial-gradient forward
/// computation of one network, for every point of the batch.
///
/// For each point the spatial-gradient cotangent `w` seeds a forward tangent
/// sweep (so the tangent output equals `w . grad`), and one reverse sweep
/// through that augmented computation yields the exact parameter derivative
/// of `vy * value + w . grad`. Adds into `grad_out`, which must be aligned
/// with [`NetworkParams::data`]. `trace` must come from a [`forward_batch`]
/// call on the same parameters and states.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_functional_gradient<A: Activation>(
    params: &NetworkParams,
    act: &A,
    states: &[f64],
    dim: usize,
    trace: &ForwardTrace,
    d_values: &[f64],
    d_grads: &[f64],
    grad_out: &mut [f64],
) {
    let arch = &params.arch;
    let l_total = arch.num_layers();
    let units = arch.hidden_units();
    let width = arch.max_width();

    // Tangent state per point (all hidden layers), reverse buffers per layer.
    let mut tan_pre = vec![0.0; units]; // u_l
    let mut tan_act = vec![0.0; units]; // t_l
    let mut hbar = vec![0.0; width];
    let mut tbar = vec![0.0; width];
    let mut zbar = vec![0.0; width];
    let mut ubar = vec![0.0; width];
    let mut hbar_prev = vec![0.0; width];
    let mut tbar_prev = vec![0.0; width];

    for p in 0..trace.batch {
        let x = &states[p * dim..(p + 1) * dim];
        let w = &d_grads[p * dim..(p + 1) * dim];
        let vy = d_values[p];
        let pre = trace.row_pre(p);
        let hid = trace.row_act(p);

        // Forward tangent sweep seeded with w.
        for l in 1..l_total {
            let rows = arch.sizes[l];
            let cols = arch.sizes[l - 1];
            let off = arch.hidden_offset(l);
            let input: &[f64] = if l == 1 { w } else { &tan_act[arch.hidden_offset(l - 1)..off] };
            tan_pre[off..off + rows].fill(0.0);
            matvec_add(params.weights(l), input, &mut tan_pre[off..off + rows], rows, cols);
            for j in 0..rows {
                let s = act.slope(pre[off + j], hid[off + j]);
                tan_act[off + j] = s * tan_pre[off + j];
            }
        }

        // Output layer: y = A_L h + b_L, ydot = A_L t.
        {
            let cols = arch.sizes[l_total - 1];
            let (h_in, t_in): (&[f64], &[f64]) = if l_total == 1 {
                (x, w)
            } else {
                let off = arch.hidden_offset(l_total - 1);
                (&hid[off..off + cols], &tan_act[off..off + cols])
            };
            let wl = arch.weight_range(l_total);
            let gw = &mut grad_out[wl];
            for c in 0..cols {
                gw[c] += vy * h_in[c] + t_in[c];
            }
            grad_out[arch.bias_range(l_total)][0] += vy;

            let a_l = params.weights(l_total);
            for c in 0..cols {
                hbar[c] = vy * a_l[c];
                tbar[c] = a_l[c];
            }
        }

        // Reverse through the hidden layers.
        for l in (1..l_total).rev() {
            let rows = arch.sizes[l];
            let cols = arch.sizes[l - 1];
            let off = arch.hidden_offset(l);
            for j in 0..rows {
                let h = hid[off + j];
                let s = act.slope(pre[off + j], h);
                let c2 = act.curvature(pre[off + j], h, s);
                ubar[j] = s * tbar[j];
                zbar[j] = c2 * tan_pre[off + j] * tbar[j] + s * hbar[j];
            }
            let (h_in, t_in): (&[f64], &[f64]) = if l == 1 {
                (x, w)
            } else {
                let off_prev = arch.hidden_offset(l - 1);
                (&hid[off_prev..off_prev + cols], &tan_act[off_prev..off_prev + cols])
            };
            {
                let wl = arch.weight_range(l);
                let gw = &mut grad_out[wl];
                for j in 0..rows {
                    let row = &mut gw[j * cols..(j + 1) * cols];
                    let zj = zbar[j];
                    let uj = ubar[j];
                    for c in 0..cols {
                        row[c] += zj * h_in[c] + uj * t_in[c];
                    }
                }
            }
            {
                let bl = arch.bias_range(l);
                let gb = &mut grad_out[bl];
                for j in 0..rows {
                    gb[j] += zbar[j];
                }
            }
            if l > 1 {
                hbar_prev[..cols].fill(0.0);
                tbar_prev[..cols].fill(0.0);
                matvec_t_add(params.weights(l), &zbar[..rows], &mut hbar_prev[..cols], rows, cols);
                matvec_t_add(params.weights(l), &ubar[..rows], &mut tbar_prev[..cols], rows, cols);
                std::mem::swap(&mut hbar, &mut hbar_prev);
                std::mem::swap(&mut tbar, &mut tbar_prev);
            }
        }
    }
}

const CHECKPOINT_MAGIC: &str = "EIGNET v1";

/// Write the checkpoint format: header `EIGNET v1; arch=N0,...,NL` followed
/// by little-endian f64 parameters, layers in order, `A_l` row-major then
/// `b_l`.
pub fn write_checkpoint(w: impl Write, params: &NetworkParams) -> Result<(), NetworkError> {
    let mut w = BufWriter::new(w);
    let arch: Vec<String> = params.arch.sizes().iter().map(|s| s.to_string()).collect();
    writeln!(w, "{CHECKPOINT_MAGIC}; arch={}", arch.join(","))?;
    for &v in &params.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint(r: impl Read) -> Result<NetworkParams, NetworkError> {
    let mut r = BufReader::new(r);
    let mut header = String::new();
    r.read_line(&mut header)?;
    let header = header.trim_end();
    let rest = header
        .strip_prefix(CHECKPOINT_MAGIC)
        .and_then(|s| s.strip_prefix("; arch="))
        .ok_or_else(|| NetworkError::Format(format!("bad header '{header}'")))?;
    let sizes: Vec<usize> = rest
        .split(',')
        .map(|s| s.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| NetworkError::Format(e.to_string()))?;
    let arch = NetworkArchitecture::new(sizes)?;
    let mut data = vec![0.0; arch.param_count()];
    let mut buf = [0u8; 8];
    for v in &mut data {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    NetworkParams::from_flat(arch, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{BatchCotangents, MeanFunctional, VarianceFunctional};
    use rand::Rng;

    fn random_params(sizes: &[usize], seed: u64) -> NetworkParams {
        let arch = NetworkArchitecture::new(sizes.to_vec()).unwrap();
        let mut params = init_params(&arch, seed, InitScheme::UniformFanIn);
        // Give the biases some life too; init leaves them at zero.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
        for l in 1..=params.arch().num_layers() {
            for b in params.bias_mut(l) {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        params
    }

    #[test]
    fn param_count_matches_formula() {
        let arch = NetworkArchitecture::new(vec![2, 20, 20, 20, 1]).unwrap();
        assert_eq!(arch.param_count(), 20 * 3 + 20 * 21 * 2 + 21);
    }

    #[test]
    fn zero_params_realize_to_zero() {
        let arch = NetworkArchitecture::new(vec![3, 5, 1]).unwrap();
        let params = NetworkParams::zeros(arch);
        for x in [[0.0, 0.0, 0.0], [1.0, -2.0, 0.5]] {
            assert_eq!(params.realize(&x).unwrap(), 0.0);
        }
    }

    #[test]
    fn single_layer_is_affine() {
        let arch = NetworkArchitecture::new(vec![2, 1]).unwrap();
        let mut params = NetworkParams::zeros(arch);
        params.weights_mut(1).copy_from_slice(&[3.0, -2.0]);
        params.bias_mut(1)[0] = 0.5;
        let (y, g) = params.realize_with_spatial_grad(&[1.0, 1.0]).unwrap();
        assert_eq!(y, 1.5);
        assert_eq!(g, vec![3.0, -2.0]);
    }

    #[test]
    fn realization_matches_straight_line_reimplementation() {
        // Independent re-implementation of the layer scheme, kept deliberately
        // naive.
        let params = random_params(&[2, 3, 1], 7);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..50 {
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let a1 = params.weights(1);
            let b1 = params.bias(1);
            let mut h = [0.0; 3];
            for j in 0..3 {
                h[j] = (a1[j * 2] * x[0] + a1[j * 2 + 1] * x[1] + b1[j]).tanh();
            }
            let a2 = params.weights(2);
            let expected = a2[0] * h[0] + a2[1] * h[1] + a2[2] * h[2] + params.bias(2)[0];
            let got = params.realize(&x).unwrap();
            assert!((got - expected).abs() <= 1e-14, "{got} vs {expected}");
        }
    }

    #[test]
    fn constant_network_has_zero_spatial_grad() {
        let arch = NetworkArchitecture::new(vec![2, 4, 1]).unwrap();
        let mut params = NetworkParams::zeros(arch);
        params.bias_mut(1).copy_from_slice(&[0.3, -0.7, 1.1, 0.0]);
        params.bias_mut(2)[0] = 2.5;
        let (y, g) = params.realize_with_spatial_grad(&[0.4, -0.9]).unwrap();
        assert!((y - 2.5).abs() < 1e-15);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn output_bias_shift_is_exact_translation() {
        let mut params = random_params(&[2, 8, 8, 1], 3);
        let x = [0.2, -1.3];
        let y0 = params.realize(&x).unwrap();
        let l = params.arch().num_layers();
        params.bias_mut(l)[0] += 2.25;
        let y1 = params.realize(&x).unwrap();
        assert_eq!(y1, y0 + 2.25);
    }

    #[test]
    fn spatial_grad_matches_finite_differences() {
        // 100 random (params, x) pairs per architecture, step 1e-4,
        // componentwise relative error <= 1e-5 against max(|grad|, 1e-8).
        for sizes in [vec![2usize, 20, 20, 20, 1], vec![50, 20, 20, 20, 1]] {
            let d = sizes[0];
            for inst in 0..100u64 {
                let params = random_params(&sizes, 1000 + inst);
                let mut rng = ChaCha8Rng::seed_from_u64(77 + inst);
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
                let (_, g) = params.realize_with_spatial_grad(&x).unwrap();
                let h = 1e-4;
                let mut xp = x.clone();
                for c in 0..d {
                    xp[c] = x[c] + h;
                    let fp = params.realize(&xp).unwrap();
                    xp[c] = x[c] - h;
                    let fm = params.realize(&xp).unwrap();
                    xp[c] = x[c];
                    let fd = (fp - fm) / (2.0 * h);
                    let denom = g[c].abs().max(1e-8);
                    assert!(
                        (g[c] - fd).abs() / denom <= 1e-5,
                        "arch {sizes:?} inst {inst} comp {c}: {} vs {}",
                        g[c],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn saturated_preactivations_stay_finite() {
        let arch = NetworkArchitecture::new(vec![2, 4, 1]).unwrap();
        let mut params = NetworkParams::zeros(arch);
        params.weights_mut(1).copy_from_slice(&[10.0, 0.0, -10.0, 0.0, 0.0, 10.0, 0.0, -10.0]);
        params.bias_mut(1).copy_from_slice(&[20.0, -20.0, 20.0, -20.0]);
        params.weights_mut(2).copy_from_slice(&[1.0, 1.0, 1.0, 1.0]);
        let (y, g) = params.realize_with_spatial_grad(&[0.0, 0.0]).unwrap();
        assert!(y.is_finite());
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let arch = NetworkArchitecture::new(vec![4, 16, 1]).unwrap();
        let a = init_params(&arch, 5, InitScheme::UniformFanIn);
        let b = init_params(&arch, 5, InitScheme::UniformFanIn);
        assert_eq!(a.data(), b.data());
        assert!(a.bias(1).iter().all(|&v| v == 0.0));
        assert!(a.bias(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_weight_std_matches_uniform_moment() {
        // U[-a, a] has standard deviation a / sqrt(3).
        let arch = NetworkArchitecture::new(vec![100, 100, 1]).unwrap();
        let params = init_params(&arch, 11, InitScheme::UniformFanIn);
        let w = params.weights(1);
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64).sqrt();
        let expected = 0.1 / 3.0f64.sqrt();
        assert!((std - expected).abs() / expected <= 0.05, "std {std} vs {expected}");
    }

    #[test]
    fn checkpoint_roundtrips_bitwise() {
        let params = random_params(&[3, 7, 5, 1], 21);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &params).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.arch().sizes(), params.arch().sizes());
        assert_eq!(back.data(), params.data());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let params = random_params(&[3, 4, 1], 2);
        assert!(matches!(
            params.realize(&[1.0, 2.0]),
            Err(NetworkError::DimensionMismatch { expected: 3, got: 2 })
        ));
    }

    /// Central finite difference of a batch functional in parameter space.
    fn fd_param_gradient<F: BatchFunctional>(
        networks: &[NetworkParams],
        states: &[f64],
        dim: usize,
        weights: &[f64],
        functional: &F,
        net: usize,
        idx: usize,
        h: f64,
    ) -> f64 {
        let eval_loss = |nets: &[NetworkParams]| -> f64 {
            let b = weights.len();
            let mut eval = BatchEval::zeros(nets.len(), b, dim);
            eval.weights.copy_from_slice(weights);
            for (i, n) in nets.iter().enumerate() {
                let (values, grads) = eval.values_and_grads_of_mut(i);
                forward_batch(n, &Tanh, states, dim, values, grads, None).unwrap();
            }
            functional.eval(&eval).unwrap()
        };
        let mut nets = networks.to_vec();
        nets[net].data_mut()[idx] += h;
        let fp = eval_loss(&nets);
        nets[net].data_mut()[idx] -= 2.0 * h;
        let fm = eval_loss(&nets);
        (fp - fm) / (2.0 * h)
    }

    #[test]
    fn mean_loss_gradient_decomposes_into_per_point_sweeps() {
        let params = random_params(&[2, 4, 1], 9);
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let b = 6;
        let states: Vec<f64> = (0..b * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let weights: Vec<f64> = (0..b).map(|_| rng.random_range(0.5..2.0)).collect();
        let functional = MeanFunctional { func: 0 };
        let (_, grads) = batch_loss_param_gradient(
            std::slice::from_ref(&params),
            &Tanh,
            &states,
            2,
            &weights,
            DiffusionData::Identity,
            &functional,
        )
        .unwrap();

        // Sum of single-point value backprops, weighted by v_b / sum v.
        let wsum: f64 = weights.iter().sum();
        let mut manual = vec![0.0; params.arch().param_count()];
        for p in 0..b {
            let trace_states = &states[p * 2..(p + 1) * 2];
            let mut trace = ForwardTrace::new(params.arch(), 1);
            let mut values = [0.0];
            let mut g = [0.0; 2];
            forward_batch(&params, &Tanh, trace_states, 2, &mut values, &mut g, Some(&mut trace))
                .unwrap();
            let d_values = [weights[p] / wsum];
            let d_grads = [0.0, 0.0];
            accumulate_functional_gradient(
                &params,
                &Tanh,
                trace_states,
                2,
                &trace,
                &d_values,
                &d_grads,
                &mut manual,
            );
        }
        for (a, m) in grads[0].iter().zip(&manual) {
            assert!((a - m).abs() <= 1e-12, "{a} vs {m}");
        }
    }

    #[test]
    fn variance_gradient_of_constant_network_ignores_output_bias() {
        let arch = NetworkArchitecture::new(vec![2, 4, 1]).unwrap();
        let mut params = NetworkParams::zeros(arch);
        params.bias_mut(2)[0] = 1.4;
        let states = [0.1, 0.2, -0.4, 0.6, 0.9, -0.1];
        let weights = [1.0, 1.0, 1.0];
        let (_, grads) = batch_loss_param_gradient(
            std::slice::from_ref(&params),
            &Tanh,
            &states,
            2,
            &weights,
            DiffusionData::Identity,
            &VarianceFunctional { func: 0 },
        )
        .unwrap();
        let l = params.arch().num_layers();
        let bias_idx = params.arch().bias_range(l).start;
        // Shift invariance of the variance makes this zero up to the roundoff
        // of the weighted mean.
        assert!(grads[0][bias_idx].abs() <= 1e-15);
    }

    #[test]
    fn mean_and_variance_gradients_match_finite_differences() {
        let params = random_params(&[2, 4, 4, 1], 31);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let b = 16;
        let states: Vec<f64> = (0..b * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let weights: Vec<f64> = (0..b).map(|_| rng.random_range(0.5..2.0)).collect();
        for functional in [
            Box::new(MeanFunctional { func: 0 }) as Box<dyn BatchFunctional>,
            Box::new(VarianceFunctional { func: 0 }),
        ] {
            let (_, grads) = batch_loss_param_gradient(
                std::slice::from_ref(&params),
                &Tanh,
                &states,
                2,
                &weights,
                DiffusionData::Identity,
                functional.as_ref(),
            )
            .unwrap();
            for idx in (0..params.arch().param_count()).step_by(3) {
                let fd = fd_param_gradient(
                    std::slice::from_ref(&params),
                    &states,
                    2,
                    &weights,
                    &functional,
                    0,
                    idx,
                    1e-4,
                );
                let denom = grads[0][idx].abs().max(fd.abs()).max(1e-6);
                assert!(
                    (grads[0][idx] - fd).abs() / denom <= 1e-4,
                    "idx {idx}: {} vs {}",
                    grads[0][idx],
                    fd
                );
            }
        }
    }

    impl BatchFunctional for Box<dyn BatchFunctional> {
        fn eval(&self, eval: &BatchEval) -> Result<f64, EstimatorError> {
            self.as_ref().eval(eval)
        }

        fn eval_with_cotangents(
            &self,
            eval: &BatchEval,
        ) -> Result<(f64, BatchCotangents), EstimatorError> {
            self.as_ref().eval_with_cotangents(eval)
        }
    }
}
