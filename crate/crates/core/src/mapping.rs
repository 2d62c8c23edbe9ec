//! Descriptor-to-parameter mappings: bounded multilinear regression and a
//! multilayer perceptron, with the Jacobian-transpose actions used to turn
//! parameter-map gradients into control gradients.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::GradientFields;
use crate::error::{Error, Result};
use crate::grid::{DescriptorStack, DrainagePlan};
use crate::model::{Bounds, ParameterFields, N_PARAMS, PARAM_NAMES};

#[inline]
fn logistic(y: f64) -> f64 {
    if y >= 0.0 {
        1.0 / (1.0 + (-y).exp())
    } else {
        let e = y.exp();
        e / (1.0 + e)
    }
}

/// Maps an unbounded value into `(lower_k, upper_k)` with a logistic curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidScaler {
    pub bounds: Bounds,
}

impl SigmoidScaler {
    pub fn new(bounds: Bounds) -> Self {
        Self { bounds }
    }

    /// `l + (u - l) / (1 + exp(-y))`, kept strictly inside the bounds even
    /// where the logistic saturates in floating point.
    pub fn scale(&self, y: f64, k: usize) -> f64 {
        let (l, u) = (self.bounds.lower[k], self.bounds.upper[k]);
        let z = l + (u - l) * logistic(y);
        z.clamp(l.next_up(), u.next_down())
    }

    /// `d scale / dy`.
    pub fn derivative(&self, y: f64, k: usize) -> f64 {
        let s = logistic(y);
        self.bounds.span(k) * s * (1.0 - s)
    }

    /// `ln((z - l) / (u - z))`.
    pub fn inverse(&self, z: f64, k: usize) -> Result<f64> {
        let (l, u) = (self.bounds.lower[k], self.bounds.upper[k]);
        if !(z > l && z < u) {
            return Err(Error::OutOfOpenInterval {
                value: z,
                lower: l,
                upper: u,
            });
        }
        Ok(((z - l) / (u - z)).ln())
    }
}

pub fn sigmoid_scale(scaler: &SigmoidScaler, y: f64, k: usize) -> f64 {
    scaler.scale(y, k)
}

pub fn inverse_sigmoid(scaler: &SigmoidScaler, z: f64, k: usize) -> Result<f64> {
    scaler.inverse(z, k)
}

/// Coefficients of `theta_k = s_k(alpha_k0 + sum_d alpha_kd D_d^beta_kd)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionControl {
    pub n_desc: usize,
    /// `alpha[k][0]` is the intercept, `alpha[k][d + 1]` the slope of
    /// descriptor `d`.
    pub alpha: Vec<Vec<f64>>,
    /// Descriptor exponents; held at 1.
    pub beta: Vec<Vec<f64>>,
}

impl RegressionControl {
    pub fn zeros(n_desc: usize) -> Self {
        Self {
            n_desc,
            alpha: vec![vec![0.0; n_desc + 1]; N_PARAMS],
            beta: vec![vec![1.0; n_desc]; N_PARAMS],
        }
    }

    pub fn len(&self) -> usize {
        N_PARAMS * (self.n_desc + 1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.alpha.iter().flatten().copied().collect()
    }

    pub fn set_from_slice(&mut self, v: &[f64]) {
        for (row, chunk) in self.alpha.iter_mut().zip(v.chunks(self.n_desc + 1)) {
            row.copy_from_slice(chunk);
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.alpha.len() == N_PARAMS
            && self.beta.len() == N_PARAMS
            && self.alpha.iter().all(|r| r.len() == self.n_desc + 1)
            && self.beta.iter().all(|r| r.len() == self.n_desc);
        if !ok {
            return Err(Error::DimensionMismatch(format!(
                "regression control is not {N_PARAMS} x ({} + 1)",
                self.n_desc
            )));
        }
        Ok(())
    }

    #[inline]
    fn raw(&self, k: usize, d: impl Iterator<Item = f64>) -> f64 {
        let row = &self.alpha[k];
        let mut y = row[0];
        for (i, x) in d.enumerate() {
            let b = self.beta[k][i];
            y += row[i + 1] * if b == 1.0 { x } else { x.powf(b) };
        }
        y
    }
}

fn check_desc(desc: &DescriptorStack, n_desc: usize, n_cells: usize) -> Result<()> {
    if desc.n_desc() != n_desc {
        return Err(Error::DimensionMismatch(format!(
            "control expects {n_desc} descriptors, got {}",
            desc.n_desc()
        )));
    }
    if desc.maps.iter().any(|m| m.len() != n_cells) {
        return Err(Error::DimensionMismatch("descriptor grid size".into()));
    }
    Ok(())
}

/// Parameter maps from the multilinear mapping.
pub fn apply_multilinear(
    plan: &DrainagePlan,
    desc: &DescriptorStack,
    ctrl: &RegressionControl,
    scaler: &SigmoidScaler,
) -> Result<ParameterFields> {
    ctrl.validate()?;
    check_desc(desc, ctrl.n_desc, plan.n_cells())?;
    let mut out = ParameterFields::uniform(plan.n_cells(), scaler.bounds.midpoint(), scaler.bounds);
    for &c in plan.active_cells() {
        for k in 0..N_PARAMS {
            out.maps[k][c] = scaler.scale(ctrl.raw(k, desc.at(c)), k);
        }
    }
    Ok(out)
}

/// `(d theta / d alpha)^T grad` for the multilinear mapping, flattened like
/// [`RegressionControl::to_vec`].
pub fn multilinear_backprop(
    plan: &DrainagePlan,
    desc: &DescriptorStack,
    ctrl: &RegressionControl,
    scaler: &SigmoidScaler,
    grad: &GradientFields,
) -> Result<Vec<f64>> {
    ctrl.validate()?;
    check_desc(desc, ctrl.n_desc, plan.n_cells())?;
    let w = ctrl.n_desc + 1;
    let mut out = vec![0.0; ctrl.len()];
    for &c in plan.active_cells() {
        for k in 0..N_PARAMS {
            let g = grad.maps[k][c];
            if g == 0.0 {
                continue;
            }
            let a = g * scaler.derivative(ctrl.raw(k, desc.at(c)), k);
            out[k * w] += a;
            for (d, x) in desc.at(c).enumerate() {
                let b = ctrl.beta[k][d];
                out[k * w + d + 1] += a * if b == 1.0 { x } else { x.powf(b) };
            }
        }
    }
    Ok(out)
}

/// Background control reproducing a spatially uniform prior.
pub fn background_from_prior(
    prior: [f64; N_PARAMS],
    scaler: &SigmoidScaler,
    n_desc: usize,
) -> Result<RegressionControl> {
    let mut ctrl = RegressionControl::zeros(n_desc);
    for k in 0..N_PARAMS {
        ctrl.alpha[k][0] = scaler
            .inverse(prior[k], k)
            .map_err(|_| Error::PriorOnBound {
                param: PARAM_NAMES[k],
                value: prior[k],
            })?;
    }
    Ok(ctrl)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Dense layer, `weights` row-major `n_out x n_in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Gradient of the cost with respect to one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpControl {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub scaler: SigmoidScaler,
}

impl MlpControl {
    /// Glorot-uniform weights and zero biases; `sizes` runs from the
    /// descriptor count to [`N_PARAMS`].
    pub fn new(sizes: &[usize], activation: Activation, bounds: Bounds, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || *sizes.last().unwrap() != N_PARAMS || sizes.contains(&0) {
            return Err(Error::DimensionMismatch(format!(
                "layer sizes {sizes:?} must start at the descriptor count and end at {N_PARAMS}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let limit = (6.0 / (n_in + n_out) as f64).sqrt();
                let mut layer = Layer::zeros(n_in, n_out);
                for v in &mut layer.weights {
                    *v = rng.random_range(-limit..limit);
                }
                layer
            })
            .collect();
        Ok(Self {
            layers,
            activation,
            scaler: SigmoidScaler::new(bounds),
        })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].n_in];
        s.extend(self.layers.iter().map(|l| l.n_out));
        s
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum()
    }

    fn validate(&self) -> Result<()> {
        let ok = !self.layers.is_empty()
            && self.layers.last().unwrap().n_out == N_PARAMS
            && self.layers.windows(2).all(|w| w[0].n_out == w[1].n_in)
            && self
                .layers
                .iter()
                .all(|l| l.weights.len() == l.n_in * l.n_out && l.bias.len() == l.n_out);
        if !ok {
            return Err(Error::DimensionMismatch(
                "inconsistent MLP layer shapes".into(),
            ));
        }
        Ok(())
    }

    /// Weights then biases of each layer, in layer order.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            v.extend_from_slice(&l.weights);
            v.extend_from_slice(&l.bias);
        }
        v
    }

    pub fn set_from_slice(&mut self, v: &[f64]) {
        let mut i = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&v[i..i + nw]);
            i += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&v[i..i + nb]);
            i += nb;
        }
    }

    /// Raw (pre-scaler) network output for one input vector.
    fn raw_output(&self, input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        let last = self.layers.len() - 1;
        for (j, l) in self.layers.iter().enumerate() {
            let mut y = l.bias.clone();
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &l.weights[o * l.n_in..(o + 1) * l.n_in];
                for (w, xi) in row.iter().zip(&x) {
                    *yo += w * xi;
                }
            }
            if j < last {
                for v in &mut y {
                    *v = self.activation.apply(*v);
                }
            }
            x = y;
        }
        x
    }

    /// Runs every active cell through the network, keeping the activations
    /// needed by the backward pass.
    pub fn forward_tape(&self, plan: &DrainagePlan, desc: &DescriptorStack) -> Result<MlpTape> {
        self.validate()?;
        check_desc(desc, self.layers[0].n_in, plan.n_cells())?;
        let cells = plan.active_cells().to_vec();
        let n = cells.len();
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut input = Vec::with_capacity(n * self.layers[0].n_in);
        for &c in &cells {
            input.extend(desc.at(c));
        }
        acts.push(input);
        for (j, l) in self.layers.iter().enumerate() {
            let x = &acts[j];
            let mut y = vec![0.0; n * l.n_out];
            for i in 0..n {
                let xi = &x[i * l.n_in..(i + 1) * l.n_in];
                for o in 0..l.n_out {
                    let row = &l.weights[o * l.n_in..(o + 1) * l.n_in];
                    let mut s = l.bias[o];
                    for (w, v) in row.iter().zip(xi) {
                        s += w * v;
                    }
                    y[i * l.n_out + o] = if j < last {
                        self.activation.apply(s)
                    } else {
                        s
                    };
                }
            }
            acts.push(y);
        }
        Ok(MlpTape { cells, acts })
    }

    /// Parameter maps from a tape.
    pub fn params_from_tape(&self, plan: &DrainagePlan, tape: &MlpTape) -> ParameterFields {
        let mut out = ParameterFields::uniform(
            plan.n_cells(),
            self.scaler.bounds.midpoint(),
            self.scaler.bounds,
        );
        let raw = tape.acts.last().unwrap();
        for (i, &c) in tape.cells.iter().enumerate() {
            for k in 0..N_PARAMS {
                out.maps[k][c] = self.scaler.scale(raw[i * N_PARAMS + k], k);
            }
        }
        out
    }

    /// `dJ/d(raw output)` per cell: the map gradient through the scaler.
    pub fn output_delta(&self, tape: &MlpTape, grad: &GradientFields) -> Vec<f64> {
        let raw = tape.acts.last().unwrap();
        let mut delta = vec![0.0; raw.len()];
        for (i, &c) in tape.cells.iter().enumerate() {
            for k in 0..N_PARAMS {
                let y = raw[i * N_PARAMS + k];
                delta[i * N_PARAMS + k] = grad.maps[k][c] * self.scaler.derivative(y, k);
            }
        }
        delta
    }

    /// Gradient of layer `j` given `delta = dJ/d(pre-activation of layer j)`,
    /// summed over cells in tape order.
    pub fn layer_gradient(&self, tape: &MlpTape, j: usize, delta: &[f64]) -> LayerGrad {
        let l = &self.layers[j];
        let x = &tape.acts[j];
        let mut g = LayerGrad {
            weights: vec![0.0; l.weights.len()],
            bias: vec![0.0; l.n_out],
        };
        for i in 0..tape.cells.len() {
            let xi = &x[i * l.n_in..(i + 1) * l.n_in];
            for o in 0..l.n_out {
                let d = delta[i * l.n_out + o];
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * l.n_in..(o + 1) * l.n_in];
                for (w, v) in row.iter_mut().zip(xi) {
                    *w += d * v;
                }
            }
        }
        g
    }

    /// Carries `delta` from layer `j` to layer `j - 1`: multiply by
    /// `W_j^T`, then by the hidden activation derivative.
    pub fn propagate(&self, tape: &MlpTape, j: usize, delta: &[f64]) -> Vec<f64> {
        assert!(j > 0, "nothing below the first layer");
        let l = &self.layers[j];
        let below = &tape.acts[j];
        let n = tape.cells.len();
        let mut out = vec![0.0; n * l.n_in];
        for i in 0..n {
            let oi = &mut out[i * l.n_in..(i + 1) * l.n_in];
            for o in 0..l.n_out {
                let d = delta[i * l.n_out + o];
                if d == 0.0 {
                    continue;
                }
                let row = &l.weights[o * l.n_in..(o + 1) * l.n_in];
                for (acc, w) in oi.iter_mut().zip(row) {
                    *acc += d * w;
                }
            }
            for (acc, y) in oi.iter_mut().zip(&below[i * l.n_in..(i + 1) * l.n_in]) {
                *acc *= self.activation.derivative_from_output(*y);
            }
        }
        out
    }
}

/// Activations of a forward pass over the active cells.
#[derive(Debug, Clone)]
pub struct MlpTape {
    pub cells: Vec<usize>,
    /// `acts[0]` is the input; `acts[j + 1]` the output of layer `j`
    /// (pre-scaler for the last layer), each `n_cells x width`.
    pub acts: Vec<Vec<f64>>,
}

/// Parameter maps from the MLP mapping.
pub fn apply_mlp(
    plan: &DrainagePlan,
    desc: &DescriptorStack,
    ctrl: &MlpControl,
) -> Result<ParameterFields> {
    let tape = ctrl.forward_tape(plan, desc)?;
    Ok(ctrl.params_from_tape(plan, &tape))
}

/// `dJ/drho_j` for every layer given the parameter-map gradient, last layer
/// first as in the backward pass.
pub fn mlp_backprop(
    plan: &DrainagePlan,
    desc: &DescriptorStack,
    ctrl: &MlpControl,
    grad: &GradientFields,
) -> Result<Vec<LayerGrad>> {
    let tape = ctrl.forward_tape(plan, desc)?;
    let mut delta = ctrl.output_delta(&tape, grad);
    let mut grads = vec![None; ctrl.layers.len()];
    for j in (0..ctrl.layers.len()).rev() {
        grads[j] = Some(ctrl.layer_gradient(&tape, j, &delta));
        if j > 0 {
            delta = ctrl.propagate(&tape, j, &delta);
        }
    }
    Ok(grads.into_iter().map(Option::unwrap).collect())
}

/// Single-cell raw network output, for checks.
pub fn mlp_raw_output(ctrl: &MlpControl, input: &[f64]) -> Vec<f64> {
    ctrl.raw_output(input)
}

/// Calibration control, one variant per calibration method family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlVector {
    Uniform { values: [f64; N_PARAMS] },
    Distributed { maps: [Vec<f64>; N_PARAMS] },
    Multilinear(RegressionControl),
    Mlp(MlpControl),
}

impl ControlVector {
    /// Parameter maps emitted by this control.
    pub fn to_params(
        &self,
        plan: &DrainagePlan,
        desc: &DescriptorStack,
        bounds: Bounds,
    ) -> Result<ParameterFields> {
        match self {
            ControlVector::Uniform { values } => {
                Ok(ParameterFields::uniform(plan.n_cells(), *values, bounds))
            }
            ControlVector::Distributed { maps } => Ok(ParameterFields {
                maps: maps.clone(),
                bounds,
            }),
            ControlVector::Multilinear(c) => {
                apply_multilinear(plan, desc, c, &SigmoidScaler::new(bounds))
            }
            ControlVector::Mlp(c) => apply_mlp(plan, desc, c),
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            ControlVector::Uniform { values } => values.to_vec(),
            ControlVector::Distributed { maps } => maps.iter().flatten().copied().collect(),
            ControlVector::Multilinear(c) => c.to_vec(),
            ControlVector::Mlp(c) => c.to_vec(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ControlVector::Uniform { .. } => "uniform",
            ControlVector::Distributed { .. } => "distributed",
            ControlVector::Multilinear(_) => "multilinear",
            ControlVector::Mlp(_) => "mlp",
        }
    }
}

pub const CONTROL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControlFile {
    version: u32,
    bounds: Bounds,
    control: ControlVector,
}

/// Versioned JSON form of a control; floats round-trip exactly.
pub fn control_to_json(control: &ControlVector, bounds: &Bounds) -> String {
    let file = ControlFile {
        version: CONTROL_FORMAT_VERSION,
        bounds: *bounds,
        control: control.clone(),
    };
    serde_json::to_string_pretty(&file).expect("controls serialize")
}

pub fn control_from_json(text: &str) -> Result<(ControlVector, Bounds)> {
    let file: ControlFile =
        serde_json::from_str(text).map_err(|e| Error::Config(format!("control file: {e}")))?;
    if file.version != CONTROL_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported control format version {}",
            file.version
        )));
    }
    Ok((file.control, file.bounds))
}

pub fn write_control(control: &ControlVector, bounds: &Bounds, path: &Path) -> Result<()> {
    crate::io::write_text(path, &control_to_json(control, bounds))
}

pub fn read_control(path: &Path) -> Result<(ControlVector, Bounds)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    control_from_json(&text).map_err(|e| Error::parse(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::OUTLET;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit_bounds() -> Bounds {
        Bounds {
            lower: [0.0; N_PARAMS],
            upper: [1.0; N_PARAMS],
        }
    }

    fn row_plan(n: usize) -> DrainagePlan {
        DrainagePlan::new(1, n, 1000.0, vec![Some(OUTLET); n]).unwrap()
    }

    #[test]
    fn sigmoid_examples() {
        let b = Bounds {
            lower: [0.0, 1.0, 0.0, 0.0],
            upper: [2000.0, 1000.0, 1.0, 1.0],
        };
        let s = SigmoidScaler::new(b);
        assert_eq!(s.scale(0.0, 0), 1000.0);
        let near = s.scale(50.0, 0);
        assert!(near < 2000.0 && near > 1999.999);
        assert_relative_eq!(s.scale(3f64.ln(), 2), 0.75, max_relative = 1e-15);
        assert_eq!(s.inverse(0.5, 2).unwrap(), 0.0);
        assert_relative_eq!(
            s.inverse(470.88, 1).unwrap(),
            (469.88f64 / 529.12).ln(),
            max_relative = 1e-14
        );
        assert_relative_eq!(s.inverse(470.88, 1).unwrap(), -0.118738, epsilon = 1e-6);
        assert!(matches!(
            s.inverse(1000.0, 1),
            Err(Error::OutOfOpenInterval { .. })
        ));
    }

    proptest! {
        #[test]
        fn sigmoid_inverse_round_trips(z in 1.001f64..999.999) {
            let s = SigmoidScaler::new(Bounds::default());
            let y = s.inverse(z, 1).unwrap();
            prop_assert!((s.scale(y, 1) - z).abs() <= 1e-10 * z.abs());
        }

        #[test]
        fn scaled_values_stay_inside(y in proptest::num::f64::NORMAL) {
            let s = SigmoidScaler::new(Bounds::default());
            for k in 0..N_PARAMS {
                let z = s.scale(y, k);
                prop_assert!(z > s.bounds.lower[k] && z < s.bounds.upper[k]);
            }
        }
    }

    #[test]
    fn background_reproduces_uniform_prior() {
        let plan = row_plan(3);
        let desc = DescriptorStack::new(
            vec!["a".into(), "b".into()],
            vec![vec![0.0, 0.3, 1.0], vec![1.0, 0.5, 0.0]],
        )
        .unwrap();
        let scaler = SigmoidScaler::new(Bounds::default());
        let prior = [350.0, 120.0, -3.0, 55.0];
        let ctrl = background_from_prior(prior, &scaler, 2).unwrap();
        let params = apply_multilinear(&plan, &desc, &ctrl, &scaler).unwrap();
        for k in 0..N_PARAMS {
            for c in 0..3 {
                assert_relative_eq!(params.maps[k][c], prior[k], max_relative = 1e-10);
            }
        }
        let mid = background_from_prior(Bounds::default().midpoint(), &scaler, 2).unwrap();
        assert!(mid.to_vec().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn prior_on_bound_is_rejected() {
        let scaler = SigmoidScaler::new(Bounds::default());
        let err = background_from_prior([2000.0, 470.88, 3.04, 55.12], &scaler, 7).unwrap_err();
        assert!(matches!(err, Error::PriorOnBound { param: "cp", .. }));
        let ok = background_from_prior([1917.74, 470.88, 3.04, 55.12], &scaler, 7).unwrap();
        assert!(ok.to_vec().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_descriptor_closed_form() {
        let plan = row_plan(2);
        let desc = DescriptorStack::new(vec!["a".into()], vec![vec![0.5, 0.5]]).unwrap();
        let scaler = SigmoidScaler::new(Bounds::default());
        let mut ctrl = RegressionControl::zeros(1);
        for k in 0..N_PARAMS {
            ctrl.alpha[k] = vec![0.0, 2.0];
        }
        let p = apply_multilinear(&plan, &desc, &ctrl, &scaler).unwrap();
        for k in 0..N_PARAMS {
            let (l, u) = (scaler.bounds.lower[k], scaler.bounds.upper[k]);
            assert_relative_eq!(
                p.maps[k][0],
                l + (u - l) / (1.0 + (-1.0f64).exp()),
                max_relative = 1e-15
            );
        }
    }

    #[test]
    fn multilinear_is_monotone_in_positive_slope() {
        let plan = row_plan(2);
        let desc = DescriptorStack::new(vec!["a".into()], vec![vec![0.0, 1.0]]).unwrap();
        let scaler = SigmoidScaler::new(Bounds::default());
        let mut ctrl = RegressionControl::zeros(1);
        ctrl.alpha[0] = vec![-1.0, 0.7];
        let p = apply_multilinear(&plan, &desc, &ctrl, &scaler).unwrap();
        assert!(p.maps[0][1] > p.maps[0][0]);
        let wrong = DescriptorStack::new(vec![], vec![]).unwrap();
        assert!(matches!(
            apply_multilinear(&plan, &wrong, &ctrl, &scaler),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn zero_network_sits_at_mid_bounds() {
        let plan = row_plan(3);
        let desc = DescriptorStack::new(
            vec!["a".into(), "b".into()],
            vec![vec![0.1, 0.5, 0.9], vec![0.3, 0.2, 0.0]],
        )
        .unwrap();
        let mut mlp = MlpControl::new(&[2, 5, 4], Activation::Tanh, Bounds::default(), 1).unwrap();
        let zeros = vec![0.0; mlp.n_params()];
        mlp.set_from_slice(&zeros);
        let p = apply_mlp(&plan, &desc, &mlp).unwrap();
        let mid = Bounds::default().midpoint();
        for k in 0..N_PARAMS {
            assert!(p.maps[k].iter().all(|&v| v == mid[k]));
        }
    }

    #[test]
    fn identical_descriptors_give_identical_parameters() {
        let plan = row_plan(3);
        let desc = DescriptorStack::new(vec!["a".into()], vec![vec![0.4, 0.9, 0.4]]).unwrap();
        let mlp = MlpControl::new(&[1, 8, 8, 4], Activation::Tanh, Bounds::default(), 3).unwrap();
        let p = apply_mlp(&plan, &desc, &mlp).unwrap();
        for k in 0..N_PARAMS {
            assert_eq!(p.maps[k][0], p.maps[k][2]);
        }
    }

    #[test]
    fn hand_computed_forward_pass() {
        // 2 inputs -> 2 tanh units -> 4 outputs
        let mut mlp = MlpControl::new(&[2, 2, 4], Activation::Tanh, unit_bounds(), 0).unwrap();
        mlp.layers[0].weights = vec![0.5, -1.0, 2.0, 0.25];
        mlp.layers[0].bias = vec![0.1, -0.2];
        mlp.layers[1].weights = vec![1.0, 0.0, 0.0, 1.0, -1.0, 1.0, 0.5, 0.5];
        mlp.layers[1].bias = vec![0.0, 0.1, 0.0, -0.3];
        let x = [0.2, 0.6];
        // h0 = tanh(0.1 + 0.1 - 0.6) = tanh(-0.4), h1 = tanh(-0.2 + 0.4 + 0.15) = tanh(0.35)
        let h0 = (-0.4f64).tanh();
        let h1 = 0.35f64.tanh();
        let raw = mlp_raw_output(&mlp, &x);
        let expected = [h0, h1 + 0.1, -h0 + h1, 0.5 * h0 + 0.5 * h1 - 0.3];
        for k in 0..4 {
            assert_relative_eq!(raw[k], expected[k], max_relative = 1e-14);
        }
        let plan = row_plan(1);
        let desc =
            DescriptorStack::new(vec!["a".into(), "b".into()], vec![vec![0.2], vec![0.6]]).unwrap();
        let p = apply_mlp(&plan, &desc, &mlp).unwrap();
        for k in 0..4 {
            assert_relative_eq!(
                p.maps[k][0],
                1.0 / (1.0 + (-expected[k]).exp()),
                max_relative = 1e-14
            );
        }
    }

    #[test]
    fn single_layer_identity_backprop_matches_calculus() {
        let plan = row_plan(1);
        let desc =
            DescriptorStack::new(vec!["a".into(), "b".into()], vec![vec![0.3], vec![0.8]]).unwrap();
        let mut mlp = MlpControl::new(&[2, 4], Activation::Identity, unit_bounds(), 0).unwrap();
        mlp.layers[0].weights = vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.0, 1.0];
        mlp.layers[0].bias = vec![0.0, 0.1, 0.2, 0.3];
        let mut grad = GradientFields::zeros(1);
        let gt = [1.0, -2.0, 0.5, 3.0];
        for k in 0..4 {
            grad.maps[k][0] = gt[k];
        }
        let grads = mlp_backprop(&plan, &desc, &mlp, &grad).unwrap();
        let x = [0.3, 0.8];
        for k in 0..4 {
            let y = mlp.layers[0].bias[k]
                + mlp.layers[0].weights[2 * k] * x[0]
                + mlp.layers[0].weights[2 * k + 1] * x[1];
            let s = 1.0 / (1.0 + (-y).exp());
            let ds = s * (1.0 - s);
            assert_relative_eq!(grads[0].bias[k], gt[k] * ds, max_relative = 1e-14);
            for d in 0..2 {
                assert_relative_eq!(
                    grads[0].weights[2 * k + d],
                    gt[k] * ds * x[d],
                    max_relative = 1e-14
                );
            }
        }
    }

    #[test]
    fn zero_map_gradient_gives_zero_layer_gradients() {
        let plan = row_plan(2);
        let desc = DescriptorStack::new(vec!["a".into()], vec![vec![0.0, 1.0]]).unwrap();
        let mlp = MlpControl::new(&[1, 6, 4], Activation::Tanh, Bounds::default(), 9).unwrap();
        let grads = mlp_backprop(&plan, &desc, &mlp, &GradientFields::zeros(2)).unwrap();
        assert!(grads
            .iter()
            .all(|g| g.weights.iter().chain(&g.bias).all(|v| *v == 0.0)));
    }

    /// `J = sum_k sum_x c_k(x) theta_k(x)` is linear in the maps, so its map
    /// gradient is `c` and central differences of the mapping check the
    /// Jacobian-transpose action.
    fn jacobian_fd_check(
        params_of: &dyn Fn(&[f64]) -> ParameterFields,
        backprop: &dyn Fn(&GradientFields) -> Vec<f64>,
        x0: &[f64],
        n_cells: usize,
    ) {
        let mut grad = GradientFields::zeros(n_cells);
        for k in 0..N_PARAMS {
            for c in 0..n_cells {
                grad.maps[k][c] = ((k * 7 + c * 3) % 5) as f64 - 2.0;
            }
        }
        let j = |v: &[f64]| {
            let p = params_of(v);
            let mut s = 0.0;
            for k in 0..N_PARAMS {
                s += p.maps[k]
                    .iter()
                    .zip(&grad.maps[k])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
            s
        };
        let analytic = backprop(&grad);
        let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..x0.len() {
            let h = 1e-6;
            let mut up = x0.to_vec();
            up[i] += h;
            let mut dn = x0.to_vec();
            dn[i] -= h;
            let fd = (j(&up) - j(&dn)) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / fd.abs().max(scale);
            assert!(err < 1e-7, "component {i}: fd {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn multilinear_jacobian_matches_differences() {
        let plan = row_plan(4);
        let desc = DescriptorStack::new(
            vec!["a".into(), "b".into()],
            vec![vec![0.0, 0.2, 0.7, 1.0], vec![0.9, 0.1, 0.5, 0.3]],
        )
        .unwrap();
        let scaler = SigmoidScaler::new(Bounds::default());
        let mut ctrl = RegressionControl::zeros(2);
        ctrl.set_from_slice(&[
            0.3, -0.5, 0.8, -1.0, 0.2, 0.1, 0.0, 0.4, -0.4, 0.6, 0.7, -0.2,
        ]);
        let x0 = ctrl.to_vec();
        let params_of = |v: &[f64]| {
            let mut c = ctrl.clone();
            c.set_from_slice(v);
            apply_multilinear(&plan, &desc, &c, &scaler).unwrap()
        };
        let backprop =
            |g: &GradientFields| multilinear_backprop(&plan, &desc, &ctrl, &scaler, g).unwrap();
        jacobian_fd_check(&params_of, &backprop, &x0, 4);
    }

    #[test]
    fn mlp_jacobian_matches_differences() {
        let plan = row_plan(3);
        let desc = DescriptorStack::new(
            vec!["a".into(), "b".into()],
            vec![vec![0.0, 0.4, 1.0], vec![0.7, 0.2, 0.5]],
        )
        .unwrap();
        let mlp = MlpControl::new(&[2, 5, 3, 4], Activation::Tanh, unit_bounds(), 11).unwrap();
        let x0 = mlp.to_vec();
        let params_of = |v: &[f64]| {
            let mut c = mlp.clone();
            c.set_from_slice(v);
            apply_mlp(&plan, &desc, &c).unwrap()
        };
        let backprop = |g: &GradientFields| {
            mlp_backprop(&plan, &desc, &mlp, g)
                .unwrap()
                .into_iter()
                .flat_map(|l| l.weights.into_iter().chain(l.bias))
                .collect::<Vec<_>>()
        };
        jacobian_fd_check(&params_of, &backprop, &x0, 3);
    }

    #[test]
    fn controls_round_trip_bit_exactly() {
        let mlp = MlpControl::new(&[3, 4, 4], Activation::Tanh, Bounds::default(), 5).unwrap();
        let mut reg = RegressionControl::zeros(3);
        reg.set_from_slice(
            &(0..16)
                .map(|i| (i as f64 * 0.1).sin() / 3.0)
                .collect::<Vec<_>>(),
        );
        for ctrl in [
            ControlVector::Mlp(mlp),
            ControlVector::Multilinear(reg),
            ControlVector::Uniform {
                values: [1.0 / 3.0, 2.0 / 7.0, -0.1, 55.12],
            },
        ] {
            let text = control_to_json(&ctrl, &Bounds::default());
            let (back, bounds) = control_from_json(&text).unwrap();
            assert_eq!(bounds, Bounds::default());
            let (a, b) = (ctrl.to_vec(), back.to_vec());
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(control_from_json(r#"{"version": 2, "bounds": {"lower":[0,0,0,0],"upper":[1,1,1,1]}, "control": {"kind":"uniform","values":[0,0,0,0]}}"#).is_err());
    }
}
