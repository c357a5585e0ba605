//! Parameters, layers, the MLP backbone and the Adam optimizer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LeafError, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Tape handles for every parameter of a store, bound for one step.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Wraps handles already on a tape, one per store entry in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Pushes every parameter onto `tape` as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|t| tape.var(t.clone())).collect(),
        }
    }

    /// Pushes every parameter as a constant, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    /// Gradient for each parameter in store order; unreachable ones are zero.
    pub fn collect_grads(&self, bound: &BoundParams, grads: &Gradients) -> Vec<Tensor> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, &v)| grads.get_or_zeros(v, t.shape()))
            .collect()
    }

    const MAGIC: &'static [u8; 8] = b"LEAFCKPT";
    const VERSION: u32 = 1;

    /// Writes the versioned checkpoint format: magic, version, count, then
    /// for each parameter its name, shape and little-endian f64 payload.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rows() as u32).to_le_bytes())?;
            w.write_all(&(t.cols() as u32).to_le_bytes())?;
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(LeafError::Format("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != Self::VERSION {
            return Err(LeafError::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = read_u32(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| LeafError::Format("parameter name is not UTF-8".into()))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            store.add(name, Tensor::new(rows, cols, data)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_checkpoint(BufReader::new(File::open(path)?))
    }

    /// Replaces values from `other`, matching by name and shape.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.names != self.names {
            return Err(LeafError::Format(
                "checkpoint parameter names do not match the model".into(),
            ));
        }
        for (mine, theirs) in self.tensors.iter_mut().zip(&other.tensors) {
            if mine.shape() != theirs.shape() {
                return Err(LeafError::Format("checkpoint shape mismatch".into()));
            }
            *mine = theirs.clone();
        }
        Ok(())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::new(fan_in, fan_out, data).expect("shape matches")
}

/// Weight and bias for a fresh `fan_in -> fan_out` layer from a bare seed.
pub fn init_params(seed: u64, fan_in: usize, fan_out: usize) -> Result<(Tensor, Tensor)> {
    if fan_in == 0 || fan_out == 0 {
        return Err(LeafError::param("layer dimensions must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((xavier_uniform(&mut rng, fan_in, fan_out), Tensor::zeros(1, fan_out)))
}

/// Affine map `x W + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LinearLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if fan_in == 0 || fan_out == 0 {
            return Err(LeafError::param(format!(
                "{name}: layer dimensions must be >= 1, got {fan_in}x{fan_out}"
            )));
        }
        let weight = store.add(format!("{name}.weight"), xavier_uniform(rng, fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out));
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        let h = tape.matmul(x, params.get(self.weight))?;
        tape.add(h, params.get(self.bias))
    }
}

/// Stack of `Linear -> ReLU` blocks standing in for a pretrained backbone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpEncoder {
    layers: Vec<LinearLayer>,
    input_dim: usize,
}

impl MlpEncoder {
    /// `widths` lists every layer's output width; the last one is the feature
    /// dimension. An empty list gives the identity encoder.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        input_dim: usize,
        widths: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = input_dim;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(LinearLayer::new(store, &format!("encoder.{i}"), prev, w, rng)?);
            prev = w;
        }
        Ok(Self { layers, input_dim })
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.fan_out)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        let width = tape.shape(x).1;
        if width != self.input_dim {
            return Err(LeafError::Shape {
                op: "encode",
                left: tape.shape(x),
                right: (self.input_dim, self.output_dim()),
            });
        }
        let mut h = x;
        for layer in &self.layers {
            let z = layer.forward(tape, params, h)?;
            h = tape.relu(z)?;
        }
        Ok(h)
    }
}

/// Mean cross-entropy of `logits` (batch x k) against integer labels,
/// computed through a log-softmax.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let n = labels.len();
    let weights = vec![1.0; n];
    weighted_cross_entropy(tape, logits, labels, &weights, n as f64)
}

/// `Σ_i w_i · CE_i / denom`. Rows with zero weight contribute nothing.
pub fn weighted_cross_entropy(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    weights: &[f64],
    denom: f64,
) -> Result<Var> {
    let (rows, k) = tape.shape(logits);
    if labels.len() != rows || weights.len() != rows {
        return Err(LeafError::Shape {
            op: "cross_entropy",
            left: (rows, k),
            right: (labels.len(), 1),
        });
    }
    if !(denom > 0.0) {
        return Err(LeafError::param("cross-entropy denominator must be > 0"));
    }
    let mut target = Tensor::zeros(rows, k);
    for (r, (&y, &w)) in labels.iter().zip(weights).enumerate() {
        if y >= k {
            return Err(LeafError::param(format!("label {y} out of range for {k} classes")));
        }
        target.set(r, y, -w / denom);
    }
    let logp = tape.log_softmax_rows(logits)?;
    let target = tape.constant(target);
    let picked = tape.mul(logp, target)?;
    tape.sum_all(picked)
}

/// Adam hyperparameters and moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub const DEFAULT_LR: f64 = 5e-4;

    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: store
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
            second: store
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Nothing changes if any gradient is
    /// non-finite or mis-shaped.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(LeafError::contract(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (i, (g, p)) in grads.iter().zip(store.tensors()).enumerate() {
            if g.shape() != p.shape() {
                return Err(LeafError::Shape {
                    op: "adam_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            if !g.is_finite() {
                return Err(LeafError::NonFiniteGradient(
                    store.name(ParamId(i)).to_string(),
                ));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = store.tensors[i].data_mut();
            for j in 0..g.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_many;

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let (w1, b1) = init_params(7, 5, 3).unwrap();
        let (w2, _) = init_params(7, 5, 3).unwrap();
        assert_eq!(w1, w2);
        assert!(b1.data().iter().all(|&b| b == 0.0));
        let bound = (6.0f64 / 8.0).sqrt();
        assert!(w1.data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn init_mean_is_near_zero() {
        // Uniform on ±a has sd a/√3; the mean of n draws has sd a/√(3n).
        let (w, _) = init_params(3, 100, 100).unwrap();
        let n = w.len() as f64;
        let a = (6.0f64 / 200.0).sqrt();
        let mean = w.data().iter().sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * a / (3.0 * n).sqrt(), "mean {mean}");
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row_vector(&[1.0, -2.0]));
        let before = store.clone();
        let mut adam = AdamState::new(&store, 5e-4);
        adam.step(&mut store, &[Tensor::zeros(1, 2)]).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn one_step_matches_hand_computation() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row_vector(&[0.5]));
        let mut adam = AdamState::new(&store, 0.1);
        adam.step(&mut store, &[Tensor::row_vector(&[2.0])]).unwrap();
        // m = 0.2, v = 0.004; m̂ = 2, v̂ = 4 -> step = 0.1 * 2 / (2 + 1e-8)
        let expected = 0.5 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((store.tensors()[0].data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(0.0));
        let mut adam = AdamState::new(&store, 1e-3);
        let mut prev = 0.0;
        for _ in 0..2000 {
            adam.step(&mut store, &[Tensor::scalar(0.37)]).unwrap();
            let now = store.tensors()[0].data()[0];
            let delta = prev - now;
            assert!((delta - 1e-3).abs() < 1e-6, "delta {delta}");
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(1.0));
        let before = store.clone();
        let mut adam = AdamState::new(&store, 1e-3);
        let err = adam.step(&mut store, &[Tensor::scalar(f64::NAN)]).unwrap_err();
        assert!(err.to_string().contains("w"));
        assert_eq!(store, before);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn zero_depth_encoder_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = MlpEncoder::new(&mut store, 4, &[], &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::row_vector(&[1.0, -2.0, 3.0, 0.5]));
        let f = enc.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(f).data(), &[1.0, -2.0, 3.0, 0.5]);
    }

    #[test]
    fn encoder_rejects_wrong_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = MlpEncoder::new(&mut store, 4, &[8], &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(2, 3));
        assert!(matches!(enc.forward(&mut tape, &p, x), Err(LeafError::Shape { .. })));
    }

    #[test]
    fn cross_entropy_gradient_checks() {
        let logits = Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![1.5, 0.2, -0.7]]).unwrap();
        let err = grad_check_many(
            |t, v| cross_entropy(t, v[0], &[2, 0]),
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn cross_entropy_value() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row_vector(&[0.0, 0.0, 0.0, 0.0]));
        let l = cross_entropy(&mut t, x, &[1]).unwrap();
        assert!((t.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        store.add("a.weight", Tensor::row_vector(&[0.1, -1e-300, std::f64::consts::PI]));
        store.add("a.bias", Tensor::zeros(1, 2));
        let mut buf = Vec::new();
        store.write_checkpoint(&mut buf).unwrap();
        let back = ParamStore::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, store);

        buf[0] = b'X';
        assert!(ParamStore::read_checkpoint(buf.as_slice()).is_err());
    }
}
