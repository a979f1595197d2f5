//! Affine-coupling normalizing flows.
//!
//! A [`FlowModel`] is the map `t: R^p -> R^p` from latent noise `u` to data
//! `x`. Each [`CouplingLayer`] keeps the coordinates selected by its mask
//! and applies `x = u * exp(s) + b` to the rest, with `(s, b)` produced by
//! an MLP conditioner that only sees the kept coordinates. Masks alternate
//! between even and odd coordinates.

mod checkpoint;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, RngState, Tape, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, FlowCheckpoint, CHECKPOINT_FORMAT};

/// Rows evaluated per tape when no gradient is needed.
const EVAL_CHUNK: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowArch {
    pub layers: usize,
    /// Hidden widths of every conditioner MLP.
    pub hidden: Vec<usize>,
    /// Bound on the per-coordinate log-scale.
    pub s_max: f64,
}

impl Default for FlowArch {
    fn default() -> Self {
        Self {
            layers: 16,
            hidden: vec![128, 128],
            s_max: 5.0,
        }
    }
}

/// Standard normal `N(0, I_p)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaseDistribution {
    pub dim: usize,
}

impl BaseDistribution {
    pub fn log_density(&self, u: &[f64]) -> f64 {
        debug_assert_eq!(u.len(), self.dim);
        let sq: f64 = u.iter().map(|v| v * v).sum();
        -0.5 * sq - 0.5 * self.dim as f64 * (2.0 * PI).ln()
    }

    pub fn sample(&self, n: usize, rng: &mut RngState) -> DenseMatrix {
        rng.standard_normal_matrix(n, self.dim)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `in x out`
    pub weight: DenseMatrix,
    /// `1 x out`
    pub bias: DenseMatrix,
}

impl Linear {
    fn uniform_init(fan_in: usize, fan_out: usize, rng: &mut RngState) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut draw = |r, c| DenseMatrix::from_fn(r, c, |_, _| rng.uniform_range(-bound, bound));
        let weight = draw(fan_in, fan_out);
        let bias = draw(1, fan_out);
        Self { weight, bias }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: DenseMatrix::zeros(fan_in, fan_out),
            bias: DenseMatrix::zeros(1, fan_out),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    /// 1.0 for coordinates passed through unchanged, 0.0 for transformed ones.
    pub mask: Vec<f64>,
    pub hidden: Vec<Linear>,
    pub scale_head: Linear,
    pub shift_head: Linear,
    pub s_max: f64,
}

/// Alternating even/odd mask for layer `k`.
pub fn coupling_mask(dim: usize, k: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| if j % 2 == k % 2 { 1.0 } else { 0.0 })
        .collect()
}

impl CouplingLayer {
    /// Random hidden layers with zeroed output heads, so the layer starts at
    /// the identity map.
    pub fn new(dim: usize, k: usize, arch: &FlowArch, rng: &mut RngState) -> Self {
        let mut hidden = Vec::with_capacity(arch.hidden.len());
        let mut fan_in = dim;
        for &w in &arch.hidden {
            hidden.push(Linear::uniform_init(fan_in, w, rng));
            fan_in = w;
        }
        Self {
            mask: coupling_mask(dim, k),
            hidden,
            scale_head: Linear::zeros(fan_in, dim),
            shift_head: Linear::zeros(fan_in, dim),
            s_max: arch.s_max,
        }
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    pub fn params(&self) -> Vec<&DenseMatrix> {
        let mut out = Vec::with_capacity(2 * self.hidden.len() + 4);
        for l in &self.hidden {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.extend([
            &self.scale_head.weight,
            &self.scale_head.bias,
            &self.shift_head.weight,
            &self.shift_head.bias,
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out = Vec::with_capacity(2 * self.hidden.len() + 4);
        for l in &mut self.hidden {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.scale_head.weight);
        out.push(&mut self.scale_head.bias);
        out.push(&mut self.shift_head.weight);
        out.push(&mut self.shift_head.bias);
        out
    }

    fn param_names(&self, k: usize) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.hidden.len() {
            out.push(format!("layer{k}.hidden{i}.weight"));
            out.push(format!("layer{k}.hidden{i}.bias"));
        }
        for head in ["scale", "shift"] {
            out.push(format!("layer{k}.{head}.weight"));
            out.push(format!("layer{k}.{head}.bias"));
        }
        out
    }

    /// Log-scale and shift for input `z`; both are zero on kept coordinates.
    fn conditioner(&self, tape: &mut Tape, p: &[Var], z: Var) -> (Var, Var) {
        let dim = self.dim();
        let mask = tape.constant(DenseMatrix::new(1, dim, self.mask.clone()).expect("mask row"));
        let inv_mask = tape.constant(
            DenseMatrix::new(1, dim, self.mask.iter().map(|m| 1.0 - m).collect())
                .expect("mask row"),
        );
        let mut h = tape.mul_row(z, mask);
        let nh = self.hidden.len();
        for i in 0..nh {
            let a = tape.matmul(h, p[2 * i]);
            let a = tape.add_row(a, p[2 * i + 1]);
            h = tape.swish(a);
        }
        let s_raw = tape.matmul(h, p[2 * nh]);
        let s_raw = tape.add_row(s_raw, p[2 * nh + 1]);
        let s = tape.scale(s_raw, 1.0 / self.s_max);
        let s = tape.tanh(s);
        let s = tape.scale(s, self.s_max);
        let s = tape.mul_row(s, inv_mask);
        let b = tape.matmul(h, p[2 * nh + 2]);
        let b = tape.add_row(b, p[2 * nh + 3]);
        let b = tape.mul_row(b, inv_mask);
        (s, b)
    }

    /// `u -> x`, returning `(x, log|det J|)` with the log-det as an `n x 1` node.
    pub fn forward_on_tape(&self, tape: &mut Tape, p: &[Var], u: Var) -> (Var, Var) {
        let (s, b) = self.conditioner(tape, p, u);
        let e = tape.exp(s);
        let x = tape.mul(u, e);
        let x = tape.add(x, b);
        let ld = tape.row_sum(s);
        (x, ld)
    }

    /// `x -> u`, returning `(u, log|det J_inv|)`.
    pub fn inverse_on_tape(&self, tape: &mut Tape, p: &[Var], x: Var) -> (Var, Var) {
        let (s, b) = self.conditioner(tape, p, x);
        let ns = tape.neg(s);
        let e = tape.exp(ns);
        let d = tape.sub(x, b);
        let u = tape.mul(d, e);
        let ld = tape.row_sum(ns);
        (u, ld)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    pub dim: usize,
    pub arch: FlowArch,
    pub layers: Vec<CouplingLayer>,
}

impl FlowModel {
    pub fn new(dim: usize, arch: &FlowArch, rng: &mut RngState) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter(
                "flow dimension must be positive".into(),
            ));
        }
        if !(arch.s_max > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "s_max must be positive, got {}",
                arch.s_max
            )));
        }
        let layers = (0..arch.layers)
            .map(|k| CouplingLayer::new(dim, k, arch, rng))
            .collect();
        Ok(Self {
            dim,
            arch: arch.clone(),
            layers,
        })
    }

    pub fn base(&self) -> BaseDistribution {
        BaseDistribution { dim: self.dim }
    }

    pub fn params(&self) -> Vec<&DenseMatrix> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut DenseMatrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(k, l)| l.param_names(k))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params().iter().map(|m| m.as_slice().len()).sum()
    }

    /// Puts every parameter on the tape as a gradient-receiving leaf.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params()
            .into_iter()
            .zip(self.param_names())
            .map(|(m, name)| tape.param(name, m.clone()))
            .collect()
    }

    /// Puts every parameter on the tape as a constant.
    pub fn register_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|m| tape.constant(m.clone()))
            .collect()
    }

    fn per_layer<'a>(&self, vars: &'a [Var]) -> Vec<&'a [Var]> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for l in &self.layers {
            let n = 2 * l.hidden.len() + 4;
            out.push(&vars[offset..offset + n]);
            offset += n;
        }
        out
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, params: &[Var], u: Var) -> (Var, Var) {
        let groups = self.per_layer(params);
        let mut z = u;
        let mut total: Option<Var> = None;
        for (layer, p) in self.layers.iter().zip(groups) {
            let (next, ld) = layer.forward_on_tape(tape, p, z);
            z = next;
            total = Some(match total {
                Some(t) => tape.add(t, ld),
                None => ld,
            });
        }
        let total = total.unwrap_or_else(|| {
            let n = tape.shape(u).0;
            tape.constant(DenseMatrix::zeros(n, 1))
        });
        (z, total)
    }

    /// `x -> u = t^{-1}(x)` with `log|det J_{t^{-1}}(x)|` per row.
    pub fn inverse_on_tape(&self, tape: &mut Tape, params: &[Var], x: Var) -> (Var, Var) {
        let groups = self.per_layer(params);
        let mut z = x;
        let mut total: Option<Var> = None;
        for (layer, p) in self.layers.iter().zip(groups).rev() {
            let (next, ld) = layer.inverse_on_tape(tape, p, z);
            z = next;
            total = Some(match total {
                Some(t) => tape.add(t, ld),
                None => ld,
            });
        }
        let total = total.unwrap_or_else(|| {
            let n = tape.shape(x).0;
            tape.constant(DenseMatrix::zeros(n, 1))
        });
        (z, total)
    }

    fn check_width(&self, m: &DenseMatrix) -> Result<()> {
        if m.cols() != self.dim {
            return Err(Error::Shape(format!(
                "flow of dimension {} applied to {} columns",
                self.dim,
                m.cols()
            )));
        }
        Ok(())
    }

    fn evaluate(&self, input: &DenseMatrix, inverse: bool) -> Result<(DenseMatrix, Vec<f64>)> {
        self.check_width(input)?;
        let n = input.rows();
        let mut out = DenseMatrix::zeros(n, self.dim);
        let mut lds = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let mut tape = Tape::new();
            let params = self.register_frozen(&mut tape);
            let z = tape.constant(input.select_rows(&idx));
            let (y, ld) = if inverse {
                self.inverse_on_tape(&mut tape, &params, z)
            } else {
                self.forward_on_tape(&mut tape, &params, z)
            };
            for (k, i) in idx.iter().enumerate() {
                out.row_mut(*i).copy_from_slice(tape.value(y).row(k));
            }
            lds.extend_from_slice(tape.value(ld).as_slice());
            start = end;
        }
        Ok((out, lds))
    }

    /// `x = t(u)` and `log|det J_t(u)|` per row.
    pub fn forward(&self, u: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>)> {
        self.evaluate(u, false)
    }

    /// `u = t^{-1}(x)` and `log|det J_{t^{-1}}(x)|` per row.
    pub fn inverse(&self, x: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>)> {
        self.evaluate(x, true)
    }

    /// Per-row `log p_x(x)` under a standard-normal base.
    pub fn log_prob_iid(&self, x: &DenseMatrix) -> Result<Vec<f64>> {
        let (u, ld) = self.inverse(x)?;
        let base = self.base();
        Ok((0..u.rows())
            .map(|i| base.log_density(u.row(i)) + ld[i])
            .collect())
    }

    pub fn sample(&self, n: usize, rng: &mut RngState) -> Result<DenseMatrix> {
        let u = self.base().sample(n, rng);
        Ok(self.forward(&u)?.0)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    fn small_arch() -> FlowArch {
        FlowArch {
            layers: 4,
            hidden: vec![8, 8],
            s_max: 5.0,
        }
    }

    /// Random flow with nonzero heads so it is far from the identity.
    pub(crate) fn random_flow(dim: usize, seed: u64) -> FlowModel {
        let mut rng = RngState::new(seed);
        let mut flow = FlowModel::new(dim, &small_arch(), &mut rng).unwrap();
        for p in flow.params_mut() {
            for v in p.as_mut_slice() {
                *v = 0.4 * rng.standard_normal();
            }
        }
        flow
    }

    #[test]
    fn fresh_flow_is_identity() {
        let flow = FlowModel::new(2, &small_arch(), &mut RngState::new(0)).unwrap();
        let u = RngState::new(1).standard_normal_matrix(10, 2);
        let (x, ld) = flow.forward(&u).unwrap();
        assert_eq!(x, u);
        assert!(ld.iter().all(|&v| v == 0.0));
        let (back, ild) = flow.inverse(&u).unwrap();
        assert_eq!(back, u);
        assert!(ild.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_layer_scaling_by_e() {
        let arch = FlowArch {
            layers: 2,
            hidden: vec![4],
            s_max: 5.0,
        };
        let mut flow = FlowModel::new(2, &arch, &mut RngState::new(0)).unwrap();
        flow.layers.truncate(1);
        // layer 0 keeps coordinate 0 and transforms coordinate 1
        let target = 5.0 * (1.0f64 / 5.0).atanh();
        flow.layers[0].scale_head.bias = DenseMatrix::from_rows(&[[0.0, target]]).unwrap();
        let u = DenseMatrix::from_rows(&[[0.3, 2.0], [-1.0, 0.5]]).unwrap();
        let (x, ld) = flow.forward(&u).unwrap();
        for (i, l) in ld.iter().enumerate() {
            assert!((l - 1.0).abs() < 1e-12);
            assert_eq!(x[(i, 0)], u[(i, 0)]);
            assert!((x[(i, 1)] - u[(i, 1)] * 1f64.exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn roundtrip_random_flow() {
        let flow = random_flow(3, 9);
        let u = RngState::new(2).standard_normal_matrix(1000, 3);
        let (x, fld) = flow.forward(&u).unwrap();
        let (back, ild) = flow.inverse(&x).unwrap();
        let err = back.sub(&u).unwrap().max_abs();
        assert!(err <= 1e-8, "roundtrip {err}");
        for (a, b) in fld.iter().zip(&ild) {
            assert!((a + b).abs() <= 1e-8);
        }
    }

    #[test]
    fn identity_log_prob_values() {
        let flow = FlowModel::new(2, &small_arch(), &mut RngState::new(0)).unwrap();
        let x = DenseMatrix::from_rows(&[[0.0, 0.0], [1.0, 0.0]]).unwrap();
        let lp = flow.log_prob_iid(&x).unwrap();
        let c = (2.0 * PI).ln();
        assert!((lp[0] + c).abs() < 1e-12);
        assert!((lp[1] + c + 0.5).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let flow = random_flow(2, 0);
        let x = DenseMatrix::zeros(3, 3);
        assert!(matches!(flow.forward(&x), Err(Error::Shape(_))));
        assert!(matches!(flow.inverse(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn empty_sample_keeps_width() {
        let flow = random_flow(2, 0);
        let s = flow.sample(0, &mut RngState::new(0)).unwrap();
        assert_eq!(s.shape(), (0, 2));
    }

    #[test]
    fn sample_is_deterministic() {
        let flow = random_flow(2, 4);
        let a = flow.sample(50, &mut RngState::new(8)).unwrap();
        let b = flow.sample(50, &mut RngState::new(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn masks_alternate() {
        assert_eq!(coupling_mask(3, 0), vec![1.0, 0.0, 1.0]);
        assert_eq!(coupling_mask(3, 1), vec![0.0, 1.0, 0.0]);
    }
}
