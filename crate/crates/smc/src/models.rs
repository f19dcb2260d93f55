//! Desk-scale classifier architectures: an MLP and a small two-block CNN.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::data::{normalize_batch, Dataset};
use crate::rng::{self, DOMAIN_INIT};
use crate::tensor::{Elem, NodeId, ParameterSet, Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error("dataset has {dataset} classes, model expects {model}")]
    ClassMismatch { dataset: usize, model: usize },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {reason}")]
    BadCheckpoint {
        path: std::path::PathBuf,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp,
    SmallCnn,
}

/// Architecture tag, input shape, class count and hidden widths.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    /// `(channels, height, width)`.
    pub input: (usize, usize, usize),
    pub classes: usize,
    /// MLP hidden widths; the CNN ignores this and uses its fixed head.
    pub hidden: Vec<usize>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let (c, h, w) = self.input;
        if self.classes < 2 {
            return Err(ModelError::InvalidSpec(format!(
                "class count {} below 2",
                self.classes
            )));
        }
        if c == 0 || h == 0 || w == 0 {
            return Err(ModelError::InvalidSpec(format!(
                "degenerate input shape {:?}",
                self.input
            )));
        }
        if self.hidden.iter().any(|&v| v == 0) {
            return Err(ModelError::InvalidSpec("hidden width of 0".to_string()));
        }
        if self.arch == Arch::Mlp && self.hidden.len() > 8 {
            return Err(ModelError::InvalidSpec(format!(
                "{} hidden layers exceeds the supported 8",
                self.hidden.len()
            )));
        }
        if self.arch == Arch::SmallCnn && (h / 2 / 2 == 0 || w / 2 / 2 == 0) {
            return Err(ModelError::InvalidSpec(format!(
                "input {h}x{w} too small for two pooling stages"
            )));
        }
        Ok(())
    }
}

const CNN_C1: usize = 32;
const CNN_C2: usize = 64;
const CNN_FC: usize = 128;
const KERNEL: usize = 3;
const PAD: usize = 1;

/// An immutable architecture description plus its parameter layout. Forward
/// is a pure function of `(params, input)`.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
}

struct LayerDef {
    name: &'static str,
    /// `(out, in)` for affine weights, `(oc, ic, kh, kw)` for conv kernels.
    weight_shape: Vec<usize>,
    bias_len: usize,
    fan_in: usize,
}

impl Model {
    fn layers(&self) -> Vec<LayerDef> {
        let (c, h, w) = self.spec.input;
        match self.spec.arch {
            Arch::Mlp => {
                let mut defs = Vec::new();
                let mut inputs = c * h * w;
                let names: &[&str] = &["fc1", "fc2", "fc3", "fc4", "fc5", "fc6", "fc7", "fc8"];
                for (i, &width) in self.spec.hidden.iter().enumerate() {
                    defs.push(LayerDef {
                        name: names[i],
                        weight_shape: vec![width, inputs],
                        bias_len: width,
                        fan_in: inputs,
                    });
                    inputs = width;
                }
                defs.push(LayerDef {
                    name: "out",
                    weight_shape: vec![self.spec.classes, inputs],
                    bias_len: self.spec.classes,
                    fan_in: inputs,
                });
                defs
            }
            Arch::SmallCnn => {
                let flat = CNN_C2 * (h / 2 / 2) * (w / 2 / 2);
                vec![
                    LayerDef {
                        name: "conv1",
                        weight_shape: vec![CNN_C1, c, KERNEL, KERNEL],
                        bias_len: CNN_C1,
                        fan_in: c * KERNEL * KERNEL,
                    },
                    LayerDef {
                        name: "conv2",
                        weight_shape: vec![CNN_C2, CNN_C1, KERNEL, KERNEL],
                        bias_len: CNN_C2,
                        fan_in: CNN_C1 * KERNEL * KERNEL,
                    },
                    LayerDef {
                        name: "fc1",
                        weight_shape: vec![CNN_FC, flat],
                        bias_len: CNN_FC,
                        fan_in: flat,
                    },
                    LayerDef {
                        name: "out",
                        weight_shape: vec![self.spec.classes, CNN_FC],
                        bias_len: self.spec.classes,
                        fan_in: CNN_FC,
                    },
                ]
            }
        }
    }

    /// Registers all parameters as trainable leaves, in layout order.
    pub fn register_params<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        params: &ParameterSet<E>,
    ) -> Result<Vec<NodeId>, TensorError> {
        params.values().map(|(_, v)| tape.leaf(v.clone())).collect()
    }

    /// Builds logits `(n, K)` from the param leaves of [`Self::register_params`].
    pub fn forward<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        param_ids: &[NodeId],
        input: NodeId,
    ) -> Result<NodeId, TensorError> {
        match self.spec.arch {
            Arch::Mlp => {
                let mut x = tape.flatten(input)?;
                let layers = self.spec.hidden.len() + 1;
                for l in 0..layers {
                    x = tape.affine(x, param_ids[2 * l], param_ids[2 * l + 1])?;
                    if l + 1 < layers {
                        x = tape.relu(x)?;
                    }
                }
                Ok(x)
            }
            Arch::SmallCnn => {
                let c1 = tape.conv2d(input, param_ids[0], PAD)?;
                let c1 = tape.bias_channel(c1, param_ids[1])?;
                let c1 = tape.relu(c1)?;
                let p1 = tape.maxpool2(c1)?;
                let c2 = tape.conv2d(p1, param_ids[2], PAD)?;
                let c2 = tape.bias_channel(c2, param_ids[3])?;
                let c2 = tape.relu(c2)?;
                let p2 = tape.maxpool2(c2)?;
                let flat = tape.flatten(p2)?;
                let h = tape.affine(flat, param_ids[4], param_ids[5])?;
                let h = tape.relu(h)?;
                tape.affine(h, param_ids[6], param_ids[7])
            }
        }
    }

    /// Logits of a raw input tensor at fixed parameters, without tracing.
    pub fn logits<E: Elem>(
        &self,
        params: &ParameterSet<E>,
        input: Tensor<E>,
    ) -> Result<Tensor<E>, TensorError> {
        let mut tape = Tape::inference();
        let ids = self.register_params(&mut tape, params)?;
        let x = tape.constant(input)?;
        let out = self.forward(&mut tape, &ids, x)?;
        Ok(tape.value(out).clone())
    }
}

/// Builds a model and its seeded parameters: fan-in-scaled uniform (He-style)
/// weights, zero biases, fully determined by `seed`.
pub fn build<E: Elem>(spec: &ModelSpec, seed: u64) -> Result<(Model, ParameterSet<E>), ModelError> {
    spec.validate()?;
    let model = Model { spec: spec.clone() };
    let mut params = ParameterSet::new();
    let mut stream = rng::stream(seed, DOMAIN_INIT, 0, 0);
    for layer in model.layers() {
        let bound = (6.0 / layer.fan_in as f64).sqrt();
        let numel: usize = layer.weight_shape.iter().product();
        let data: Vec<E> = (0..numel)
            .map(|_| E::from_f64((rng::uniform_f64(&mut stream) * 2.0 - 1.0) * bound))
            .collect();
        params.insert(
            &format!("{}.weight", layer.name),
            Tensor::from_vec(&layer.weight_shape, data)?,
        )?;
        params.insert(
            &format!("{}.bias", layer.name),
            Tensor::zeros(&[layer.bias_len]),
        )?;
    }
    Ok((model, params))
}

/// Top-1 accuracy over a split: normalization only, argmax ties broken by the
/// lowest class index.
pub fn evaluate_top1<E: Elem>(
    model: &Model,
    params: &ParameterSet<E>,
    dataset: &Dataset,
) -> Result<f64, ModelError> {
    if dataset.is_empty() {
        return Err(ModelError::EmptySplit);
    }
    if dataset.classes > model.spec.classes {
        return Err(ModelError::ClassMismatch {
            dataset: dataset.classes,
            model: model.spec.classes,
        });
    }
    const EVAL_BATCH: usize = 250;
    let mut correct = 0usize;
    let indices: Vec<u32> = (0..dataset.len() as u32).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let input = normalize_batch::<E>(dataset, chunk);
        let logits = model.logits(params, input)?;
        for (row, &index) in (0..chunk.len()).zip(chunk) {
            if argmax(logits.row(row)) == dataset.label(index as usize) as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Index of the row maximum; ties go to the lowest index.
pub fn argmax<E: Elem>(row: &[E]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const CHECKPOINT_VERSION: u8 = 1;

/// Writes named tensors as `version | count | {name, shape, f64-le payload}`.
pub fn save_checkpoint<E: Elem>(params: &ParameterSet<E>, path: &Path) -> Result<(), ModelError> {
    let mut bytes = vec![CHECKPOINT_VERSION];
    bytes.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.values() {
        bytes.extend_from_slice(&(name.len() as u16).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            bytes.extend_from_slice(&v.to_f64().to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a checkpoint back as named 64-bit tensors with fresh momentum.
pub fn load_checkpoint(path: &Path) -> Result<ParameterSet<f64>, ModelError> {
    let bad = |reason: &str| ModelError::BadCheckpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut file = fs::File::open(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;

    struct Cursor<'a> {
        bytes: &'a [u8],
        pos: usize,
    }
    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize) -> Option<&'a [u8]> {
            let s = self.bytes.get(self.pos..self.pos + n)?;
            self.pos += n;
            Some(s)
        }
    }
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    let eof = "unexpected end of file";
    if cur.take(1).ok_or_else(|| bad(eof))?[0] != CHECKPOINT_VERSION {
        return Err(bad("unsupported format version"));
    }
    let count = u32::from_le_bytes(cur.take(4).ok_or_else(|| bad(eof))?.try_into().unwrap());
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let name_len =
            u16::from_le_bytes(cur.take(2).ok_or_else(|| bad(eof))?.try_into().unwrap()) as usize;
        let name = String::from_utf8(cur.take(name_len).ok_or_else(|| bad(eof))?.to_vec())
            .map_err(|_| bad("parameter name is not UTF-8"))?;
        let ndim = cur.take(1).ok_or_else(|| bad(eof))?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(
                u32::from_le_bytes(cur.take(4).ok_or_else(|| bad(eof))?.try_into().unwrap())
                    as usize,
            );
        }
        let numel: usize = shape.iter().product();
        let payload = cur.take(numel * 8).ok_or_else(|| bad(eof))?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params
            .insert(&name, Tensor::from_vec(&shape, data)?)
            .map_err(|_| bad("duplicate parameter name"))?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn cifar_spec(arch: Arch) -> ModelSpec {
        ModelSpec {
            arch,
            input: (3, 32, 32),
            classes: 10,
            hidden: vec![64],
        }
    }

    #[test]
    fn mlp_logit_shape() {
        let (model, params) = build::<f64>(&cifar_spec(Arch::Mlp), 0).unwrap();
        let input = Tensor::zeros(&[5, 3, 32, 32]);
        let logits = model.logits(&params, input).unwrap();
        assert_eq!(logits.shape(), &[5, 10]);
    }

    #[test]
    fn cnn_logit_shape_any_batch() {
        let (model, params) = build::<f64>(&cifar_spec(Arch::SmallCnn), 0).unwrap();
        for n in [1usize, 3] {
            let input = Tensor::zeros(&[n, 3, 32, 32]);
            let logits = model.logits(&params, input).unwrap();
            assert_eq!(logits.shape(), &[n, 10]);
        }
    }

    #[test]
    fn zero_input_zeroed_final_layer_gives_uniform_rows() {
        let (model, mut params) = build::<f64>(&cifar_spec(Arch::Mlp), 3).unwrap();
        for name in ["out.weight", "out.bias"] {
            let t = params.get_mut(name).unwrap();
            let shape = t.shape().to_vec();
            *t = Tensor::zeros(&shape);
        }
        let logits = model.logits(&params, Tensor::zeros(&[4, 3, 32, 32])).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        // Zero logits soften to exactly uniform rows.
    }

    #[test]
    fn same_seed_bit_identical_params() {
        let (_, a) = build::<f64>(&cifar_spec(Arch::SmallCnn), 11).unwrap();
        let (_, b) = build::<f64>(&cifar_spec(Arch::SmallCnn), 11).unwrap();
        for ((_, x), (_, y)) in a.values().zip(b.values()) {
            assert_eq!(x, y);
        }
        let (_, c) = build::<f64>(&cifar_spec(Arch::SmallCnn), 12).unwrap();
        assert_ne!(a.get("conv1.weight"), c.get("conv1.weight"));
    }

    #[test]
    fn forward_is_pure() {
        let (model, params) = build::<f64>(&cifar_spec(Arch::SmallCnn), 5).unwrap();
        let input = Tensor::from_f64_slice(
            &[2, 3, 32, 32],
            &(0..2 * 3 * 32 * 32)
                .map(|v| ((v % 37) as f64) / 19.0 - 1.0)
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let a = model.logits(&params, input.clone()).unwrap();
        let b = model.logits(&params, input).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = cifar_spec(Arch::Mlp);
        spec.classes = 1;
        assert!(build::<f64>(&spec, 0).is_err());
        let mut spec = cifar_spec(Arch::SmallCnn);
        spec.input = (3, 3, 3);
        assert!(build::<f64>(&spec, 0).is_err());
        let mut spec = cifar_spec(Arch::Mlp);
        spec.hidden = vec![0];
        assert!(build::<f64>(&spec, 0).is_err());
    }

    #[test]
    fn evaluate_counts_hand_fixture() {
        // A linear model on 1x1x1 inputs: logit_k = w_k * x. With w = (1, -1)
        // positive pixels predict class 0.
        let spec = ModelSpec {
            arch: Arch::Mlp,
            input: (1, 1, 1),
            classes: 2,
            hidden: vec![],
        };
        let (model, mut params) = build::<f64>(&spec, 0).unwrap();
        *params.get_mut("out.weight").unwrap() =
            Tensor::from_vec(&[2, 1], vec![1.0, -1.0]).unwrap();
        *params.get_mut("out.bias").unwrap() = Tensor::zeros(&[2]);
        // Pixels 200,210,220 (class 0 after normalization > 0) and 10,20 (class 1),
        // labels right for 3 of 5.
        let mut ds = Dataset::new(
            Split::Val,
            2,
            (1, 1, 1),
            vec![200, 210, 220, 10, 20],
            vec![0, 0, 1, 1, 0],
        )
        .unwrap();
        ds.set_normalization(crate::data::Normalization {
            mean: vec![0.5],
            std: vec![0.25],
        });
        let acc = evaluate_top1(&model, &params, &ds).unwrap();
        assert!((acc - 0.6).abs() < 1e-12);
    }

    #[test]
    fn evaluate_tie_breaks_to_lowest_class() {
        let spec = ModelSpec {
            arch: Arch::Mlp,
            input: (1, 1, 1),
            classes: 3,
            hidden: vec![],
        };
        let (model, mut params) = build::<f64>(&spec, 0).unwrap();
        // All-zero weights: every logit ties at 0, argmax must return class 0.
        *params.get_mut("out.weight").unwrap() = Tensor::zeros(&[3, 1]);
        let ds = Dataset::new(Split::Val, 3, (1, 1, 1), vec![7, 80], vec![0, 2]).unwrap();
        let acc = evaluate_top1(&model, &params, &ds).unwrap();
        assert!((acc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_split_rejected() {
        let (model, params) = build::<f64>(&cifar_spec(Arch::Mlp), 0).unwrap();
        let ds = Dataset::new(Split::Val, 10, (3, 32, 32), vec![], vec![]).unwrap();
        assert!(matches!(
            evaluate_top1(&model, &params, &ds),
            Err(ModelError::EmptySplit)
        ));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (_, params) = build::<f64>(&cifar_spec(Arch::SmallCnn), 21).unwrap();
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(params.len(), loaded.len());
        for ((na, ta), (nb, tb)) in params.values().zip(loaded.values()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }
        // Version byte is the first byte on disk.
        assert_eq!(std::fs::read(&path).unwrap()[0], 1);
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, [9u8, 0, 0, 0, 0]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::BadCheckpoint { .. })
        ));
    }
}
