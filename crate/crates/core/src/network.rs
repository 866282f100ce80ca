//! Layered MLP classifier with a parameter registry.
//!
//! Each affine, batch-norm and head layer owns a dense trainable layer index
//! `0..N`. Registry order is layer order, then `weight`/`bias` (or
//! `gamma`/`beta`) within a layer; every per-layer view follows that order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
const SNAPSHOT_MAGIC: &[u8; 8] = b"PALMNET1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Affine,
    Relu,
    BatchNorm,
    ClassifierHead,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub width: usize,
    /// `None` for layers without parameters (ReLU).
    pub layer_index: Option<usize>,
}

/// Adam first/second moments for one slot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// One trainable tensor and its adaptation state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub layer_index: usize,
    pub name: &'static str,
    pub tensor: Tensor,
    pub frozen: bool,
    /// Elementwise effective learning rate; all zeros while frozen.
    pub lr: Vec<f64>,
    /// Domain-level sensitivity. `None` until the slot is first selected.
    pub sensitivity_ema: Option<Vec<f64>>,
    pub adam: AdamMoments,
}

impl ParamSlot {
    fn new(layer_index: usize, name: &'static str, tensor: Tensor) -> Self {
        let n = tensor.len();
        Self {
            layer_index,
            name,
            tensor,
            frozen: false,
            lr: vec![0.0; n],
            sensitivity_ema: None,
            adam: AdamMoments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.tensor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensor.is_empty()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.lr.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn set_uniform_lr(&mut self, lr: f64) {
        self.frozen = false;
        self.lr.iter_mut().for_each(|v| *v = lr);
    }

    /// Clears rates, sensitivity history and optimizer moments.
    pub fn reset_adaptation_state(&mut self) {
        let n = self.len();
        self.frozen = false;
        self.lr = vec![0.0; n];
        self.sensitivity_ema = None;
        self.adam = AdamMoments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        };
    }

    pub fn grad(&self) -> Result<&[f64]> {
        self.tensor.grad().ok_or_else(|| Error::MissingGradient {
            layer: self.layer_index,
            name: self.name.to_string(),
        })
    }
}

/// How batch-norm layers pick their statistics during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Running statistics (inference on the source model).
    Running,
    /// Current-batch statistics; running statistics are left alone.
    Batch,
    /// Current-batch statistics; the caller folds them into the running
    /// statistics with [`Network::update_running_stats`].
    Train,
}

#[derive(Clone, Debug, PartialEq)]
struct RunningStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Affine { weight: usize, bias: usize },
    BatchNorm { gamma: usize, beta: usize, stats: usize },
    Relu,
}

/// Output of [`Network::forward`].
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// Per batch-norm layer, present for `Batch`/`Train` modes.
    pub batch_stats: Vec<BatchStats>,
}

/// Parameter values and running statistics, without optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSnapshot {
    params: Vec<Vec<f64>>,
    running: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug)]
pub struct Network {
    input_dim: usize,
    hidden: Vec<usize>,
    classes: usize,
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    slots: Vec<ParamSlot>,
    running: Vec<RunningStats>,
}

/// Builds `input -> [affine -> batch-norm -> relu]* -> head` with seeded
/// uniform initialization in `±1/sqrt(fan_in)`.
pub fn build_mlp(input_dim: usize, hidden_widths: &[usize], classes: usize, seed: u64) -> Result<Network> {
    if classes < 2 {
        return Err(Error::InvalidNetwork(format!("need at least 2 classes, got {classes}")));
    }
    if input_dim == 0 || hidden_widths.contains(&0) {
        return Err(Error::InvalidNetwork("all widths must be >= 1".into()));
    }
    let mut rng = seed::rng(seed);
    let mut uniform = |shape: Vec<usize>, fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor::new(shape, values).expect("finite init")
    };

    let mut specs = Vec::new();
    let mut layers = Vec::new();
    let mut slots = Vec::new();
    let mut running = Vec::new();
    let mut layer_index = 0;
    let mut fan_in = input_dim;

    for &width in hidden_widths {
        slots.push(ParamSlot::new(layer_index, "weight", uniform(vec![fan_in, width], fan_in)));
        slots.push(ParamSlot::new(layer_index, "bias", uniform(vec![width], fan_in)));
        layers.push(Layer::Affine {
            weight: slots.len() - 2,
            bias: slots.len() - 1,
        });
        specs.push(LayerSpec {
            kind: LayerKind::Affine,
            width,
            layer_index: Some(layer_index),
        });
        layer_index += 1;

        slots.push(ParamSlot::new(layer_index, "gamma", Tensor::new(vec![width], vec![1.0; width])?));
        slots.push(ParamSlot::new(layer_index, "beta", Tensor::zeros(vec![width])));
        running.push(RunningStats {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        });
        layers.push(Layer::BatchNorm {
            gamma: slots.len() - 2,
            beta: slots.len() - 1,
            stats: running.len() - 1,
        });
        specs.push(LayerSpec {
            kind: LayerKind::BatchNorm,
            width,
            layer_index: Some(layer_index),
        });
        layer_index += 1;

        layers.push(Layer::Relu);
        specs.push(LayerSpec {
            kind: LayerKind::Relu,
            width,
            layer_index: None,
        });
        fan_in = width;
    }

    slots.push(ParamSlot::new(layer_index, "weight", uniform(vec![fan_in, classes], fan_in)));
    slots.push(ParamSlot::new(layer_index, "bias", uniform(vec![classes], fan_in)));
    layers.push(Layer::Affine {
        weight: slots.len() - 2,
        bias: slots.len() - 1,
    });
    specs.push(LayerSpec {
        kind: LayerKind::ClassifierHead,
        width: classes,
        layer_index: Some(layer_index),
    });

    Ok(Network {
        input_dim,
        hidden: hidden_widths.to_vec(),
        classes,
        specs,
        layers,
        slots,
        running,
    })
}

impl Network {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layer_specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    /// Number of trainable layers `N`.
    pub fn trainable_layers(&self) -> usize {
        self.specs.iter().filter(|s| s.layer_index.is_some()).count()
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [ParamSlot] {
        &mut self.slots
    }

    pub fn slot(&self, layer_index: usize, name: &str) -> Option<&ParamSlot> {
        self.slots
            .iter()
            .find(|s| s.layer_index == layer_index && s.name == name)
    }

    /// Layer indices of the batch-norm layers.
    pub fn batch_norm_layers(&self) -> Vec<usize> {
        self.specs
            .iter()
            .filter(|s| s.kind == LayerKind::BatchNorm)
            .filter_map(|s| s.layer_index)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.slots.iter().map(ParamSlot::len).sum()
    }

    /// Records a forward pass of `x` (`batch x input_dim`) on `tape`.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, mode: BnMode) -> Result<ForwardPass> {
        match x.dims2() {
            Some((_, d)) if d == self.input_dim => {}
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "network input",
                    lhs: x.shape().to_vec(),
                    rhs: vec![0, self.input_dim],
                })
            }
        }
        let mut h = tape.input(x.clone());
        let mut batch_stats = Vec::new();
        for layer in &self.layers {
            h = match *layer {
                Layer::Affine { weight, bias } => {
                    let w = tape.param(weight, &self.slots[weight].tensor);
                    let b = tape.param(bias, &self.slots[bias].tensor);
                    let z = tape.matmul(h, w)?;
                    tape.add_bias(z, b)?
                }
                Layer::BatchNorm { gamma, beta, stats } => {
                    let g = tape.param(gamma, &self.slots[gamma].tensor);
                    let b = tape.param(beta, &self.slots[beta].tensor);
                    match mode {
                        BnMode::Running => {
                            let rs = &self.running[stats];
                            tape.batch_norm_fixed(h, g, b, &rs.mean, &rs.var)?
                        }
                        BnMode::Batch | BnMode::Train => {
                            let (y, st) = tape.batch_norm(h, g, b)?;
                            batch_stats.push(st);
                            y
                        }
                    }
                }
                Layer::Relu => tape.relu(h)?,
            };
        }
        Ok(ForwardPass { logits: h, batch_stats })
    }

    /// Inference-only forward; returns the logits tensor.
    pub fn logits(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, x, mode)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Folds batch statistics into the running statistics (momentum 0.1,
    /// unbiased variance).
    pub fn update_running_stats(&mut self, stats: &[BatchStats], batch_size: usize) {
        let correction = if batch_size > 1 {
            batch_size as f64 / (batch_size as f64 - 1.0)
        } else {
            1.0
        };
        for (rs, st) in self.running.iter_mut().zip(stats) {
            for (r, m) in rs.mean.iter_mut().zip(&st.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, v) in rs.var.iter_mut().zip(&st.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * correction;
            }
        }
    }

    /// Backpropagates `root` and accumulates into every slot's gradient.
    /// Slots the root does not depend on end up with an all-zero gradient.
    pub fn backward(&mut self, tape: &Tape, root: Var) -> Result<()> {
        let grads = tape.backward(root)?;
        for slot in &mut self.slots {
            slot.tensor.ensure_grad();
        }
        // A slot registered on the tape more than once contributes a single
        // summed gradient, so repeated calls accumulate exactly.
        let mut summed: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (id, g) in grads.params() {
            if id >= self.slots.len() {
                return Err(Error::InvalidNetwork(format!("tape refers to unknown parameter slot {id}")));
            }
            match summed.get_mut(&id) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    summed.insert(id, g.to_vec());
                }
            }
        }
        for (id, g) in summed {
            self.slots[id].tensor.accumulate_grad(&g);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for slot in &mut self.slots {
            slot.tensor.clear_grad();
        }
    }

    /// Flat gradient per trainable layer, concatenated in registry order.
    pub fn per_layer_grad_view(&self) -> Result<BTreeMap<usize, Vec<f64>>> {
        let mut view: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for slot in &self.slots {
            view.entry(slot.layer_index).or_default().extend_from_slice(slot.grad()?);
        }
        Ok(view)
    }

    pub fn reset_adaptation_state(&mut self) {
        self.slots.iter_mut().for_each(ParamSlot::reset_adaptation_state);
    }

    pub fn freeze_all(&mut self) {
        self.slots.iter_mut().for_each(ParamSlot::freeze);
    }

    /// Unfreezes `layers` at a uniform rate and freezes the rest. A zero rate
    /// freezes everything, so not even optimizer moments move.
    pub fn train_only(&mut self, layers: &[usize], lr: f64) {
        for slot in &mut self.slots {
            if lr > 0.0 && layers.contains(&slot.layer_index) {
                slot.set_uniform_lr(lr);
            } else {
                slot.freeze();
            }
        }
    }

    pub fn snapshot(&self) -> NetworkSnapshot {
        NetworkSnapshot {
            params: self.slots.iter().map(|s| s.tensor.values().to_vec()).collect(),
            running: self
                .running
                .iter()
                .map(|r| (r.mean.clone(), r.var.clone()))
                .collect(),
        }
    }

    pub fn restore(&mut self, snapshot: &NetworkSnapshot) -> Result<()> {
        let compatible = snapshot.params.len() == self.slots.len()
            && snapshot.running.len() == self.running.len()
            && snapshot
                .params
                .iter()
                .zip(&self.slots)
                .all(|(p, s)| p.len() == s.len())
            && snapshot
                .running
                .iter()
                .zip(&self.running)
                .all(|((m, v), r)| m.len() == r.mean.len() && v.len() == r.var.len());
        if !compatible {
            return Err(Error::Snapshot("snapshot does not match network architecture".into()));
        }
        for (slot, values) in self.slots.iter_mut().zip(&snapshot.params) {
            slot.tensor.values_mut().copy_from_slice(values);
        }
        for (r, (m, v)) in self.running.iter_mut().zip(&snapshot.running) {
            r.mean.clone_from(m);
            r.var.clone_from(v);
        }
        Ok(())
    }

    /// Writes the `PALMNET1` binary format: magic, architecture, then every
    /// slot in registry order (layer index, name, shape, values) and the
    /// batch-norm running statistics. All integers are `u32` and all values
    /// `f64`, little-endian.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        let put_u32 = |w: &mut W, v: usize| -> Result<()> {
            let v = u32::try_from(v).map_err(|_| Error::Snapshot(format!("{v} does not fit in u32")))?;
            w.write_all(&v.to_le_bytes())?;
            Ok(())
        };
        let put_f64s = |w: &mut W, vs: &[f64]| -> Result<()> {
            for v in vs {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        w.write_all(SNAPSHOT_MAGIC)?;
        put_u32(&mut w, self.input_dim)?;
        put_u32(&mut w, self.classes)?;
        put_u32(&mut w, self.hidden.len())?;
        for &h in &self.hidden {
            put_u32(&mut w, h)?;
        }
        put_u32(&mut w, self.slots.len())?;
        for slot in &self.slots {
            put_u32(&mut w, slot.layer_index)?;
            put_u32(&mut w, slot.name.len())?;
            w.write_all(slot.name.as_bytes())?;
            put_u32(&mut w, slot.tensor.shape().len())?;
            for &d in slot.tensor.shape() {
                put_u32(&mut w, d)?;
            }
            put_f64s(&mut w, slot.tensor.values())?;
        }
        put_u32(&mut w, self.running.len())?;
        for r in &self.running {
            put_u32(&mut w, r.mean.len())?;
            put_f64s(&mut w, &r.mean)?;
            put_f64s(&mut w, &r.var)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Network> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::Snapshot("bad magic; not a PALMNET1 file".into()));
        }
        let get_u32 = |r: &mut R| -> Result<usize> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let get_f64s = |r: &mut R, n: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b)?;
                out.push(f64::from_le_bytes(b));
            }
            Ok(out)
        };
        let input_dim = get_u32(&mut r)?;
        let classes = get_u32(&mut r)?;
        let n_hidden = get_u32(&mut r)?;
        let hidden = (0..n_hidden).map(|_| get_u32(&mut r)).collect::<Result<Vec<_>>>()?;
        let mut net = build_mlp(input_dim, &hidden, classes, 0)?;

        let n_slots = get_u32(&mut r)?;
        if n_slots != net.slots.len() {
            return Err(Error::Snapshot(format!(
                "expected {} slots, found {n_slots}",
                net.slots.len()
            )));
        }
        for slot in &mut net.slots {
            let layer = get_u32(&mut r)?;
            let name_len = get_u32(&mut r)?;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let ndim = get_u32(&mut r)?;
            let shape = (0..ndim).map(|_| get_u32(&mut r)).collect::<Result<Vec<_>>>()?;
            if layer != slot.layer_index || name != slot.name.as_bytes() || shape != slot.tensor.shape() {
                return Err(Error::Snapshot(format!(
                    "slot mismatch at layer {} ({})",
                    slot.layer_index, slot.name
                )));
            }
            let values = get_f64s(&mut r, slot.len())?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Snapshot("non-finite parameter value".into()));
            }
            slot.tensor.values_mut().copy_from_slice(&values);
        }
        let n_bn = get_u32(&mut r)?;
        if n_bn != net.running.len() {
            return Err(Error::Snapshot("batch-norm count mismatch".into()));
        }
        for rs in &mut net.running {
            let width = get_u32(&mut r)?;
            if width != rs.mean.len() {
                return Err(Error::Snapshot("batch-norm width mismatch".into()));
            }
            rs.mean = get_f64s(&mut r, width)?;
            rs.var = get_f64s(&mut r, width)?;
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_snapshot(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Network> {
        let file = std::fs::File::open(path)?;
        Self::read_snapshot(std::io::BufReader::new(file))
    }
}

/// Row-wise argmax.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let cols = logits.dims2().map(|(_, c)| c).unwrap_or(logits.len());
    logits
        .values()
        .chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::softmax;

    fn batch(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = seed::rng(seed);
        let v = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::matrix(rows, cols, v).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_mlp(2, &[8, 8], 3, 7).unwrap();
        let b = build_mlp(2, &[8, 8], 3, 7).unwrap();
        assert_eq!(a.slots(), b.slots());
    }

    #[test]
    fn logistic_regression_has_one_trainable_layer() {
        let net = build_mlp(2, &[], 2, 0).unwrap();
        assert_eq!(net.trainable_layers(), 1);
        assert_eq!(net.layer_specs()[0].kind, LayerKind::ClassifierHead);
    }

    #[test]
    fn default_architecture_has_seven_trainable_layers() {
        let net = build_mlp(8, &[32, 32, 32], 5, 0).unwrap();
        assert_eq!(net.trainable_layers(), 7);
        assert_eq!(net.batch_norm_layers(), vec![1, 3, 5]);
        let indices: Vec<_> = net.layer_specs().iter().filter_map(|s| s.layer_index).collect();
        assert_eq!(indices, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_widths() {
        assert!(build_mlp(2, &[4], 1, 0).is_err());
        assert!(build_mlp(2, &[0], 3, 0).is_err());
        assert!(build_mlp(0, &[], 3, 0).is_err());
    }

    #[test]
    fn forward_shape_and_softmax_rows() {
        let net = build_mlp(4, &[16, 16, 16], 5, 1).unwrap();
        for mode in [BnMode::Running, BnMode::Batch] {
            let logits = net.logits(&batch(32, 4, 2), mode).unwrap();
            assert_eq!(logits.shape(), &[32, 5]);
            let p = softmax(logits.values(), 5);
            for row in p.chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn grad_view_requires_backward() {
        let net = build_mlp(2, &[3], 2, 0).unwrap();
        assert!(matches!(net.per_layer_grad_view(), Err(Error::MissingGradient { .. })));
    }

    #[test]
    fn grad_view_of_single_layer_with_unit_grads() {
        // 2 inputs, 2 classes: 4 weights + 2 biases.
        let mut net = build_mlp(2, &[], 2, 0).unwrap();
        for slot in net.slots_mut() {
            let n = slot.len();
            slot.tensor.accumulate_grad(&vec![1.0; n]);
        }
        let view = net.per_layer_grad_view().unwrap();
        assert_eq!(view.len(), 1);
        assert_eq!(view[&0].len(), 6);
        assert_eq!(view[&0].iter().sum::<f64>(), 6.0);
    }

    #[test]
    fn unreachable_layers_get_zero_grads() {
        let mut net = build_mlp(2, &[3], 2, 0).unwrap();
        let mut tape = Tape::new();
        // Only the first affine weight is read.
        let w = tape.param(0, &net.slots()[0].tensor);
        let s = tape.sum(w).unwrap();
        net.backward(&tape, s).unwrap();
        let view = net.per_layer_grad_view().unwrap();
        assert_eq!(view.keys().copied().collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(view[&1].iter().all(|&g| g == 0.0));
        assert!(view[&2].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_twice_doubles_grads() {
        let mut net = build_mlp(3, &[4], 3, 5).unwrap();
        let x = batch(6, 3, 9);
        let mut tape = Tape::new();
        let pass = net.forward(&mut tape, &x, BnMode::Batch).unwrap();
        let ls = tape.log_softmax(pass.logits).unwrap();
        let loss = tape.mean(ls).unwrap();
        net.backward(&tape, loss).unwrap();
        let once: Vec<Vec<f64>> = net.slots().iter().map(|s| s.grad().unwrap().to_vec()).collect();
        net.backward(&tape, loss).unwrap();
        for (slot, g) in net.slots().iter().zip(&once) {
            let doubled: Vec<f64> = g.iter().map(|v| 2.0 * v).collect();
            assert_eq!(slot.grad().unwrap(), doubled.as_slice());
        }
    }

    #[test]
    fn snapshot_restore_is_bitwise() {
        let mut net = build_mlp(4, &[8, 8], 3, 3).unwrap();
        let x = batch(10, 4, 4);
        let snap = net.snapshot();
        let before = net.logits(&x, BnMode::Running).unwrap();
        for slot in net.slots_mut() {
            slot.tensor.values_mut().iter_mut().for_each(|v| *v += 0.5);
        }
        net.restore(&snap).unwrap();
        assert_eq!(net.logits(&x, BnMode::Running).unwrap(), before);
    }

    #[test]
    fn snapshot_file_round_trips() {
        let mut net = build_mlp(4, &[8, 6], 3, 11).unwrap();
        let mut tape = Tape::new();
        let pass = net.forward(&mut tape, &batch(12, 4, 1), BnMode::Train).unwrap();
        net.update_running_stats(&pass.batch_stats, 12);

        let mut bytes = Vec::new();
        net.write_snapshot(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], b"PALMNET1");
        let loaded = Network::read_snapshot(bytes.as_slice()).unwrap();
        assert_eq!(loaded.snapshot(), net.snapshot());

        bytes[0] = b'X';
        assert!(Network::read_snapshot(bytes.as_slice()).is_err());
    }

    #[test]
    fn argmax_picks_first_maximum() {
        let t = Tensor::matrix(2, 3, vec![0.0, 2.0, 2.0, -1.0, -3.0, -2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0]);
    }
}
