//! The client/server network: a small convolutional feature extractor
//! producing a penultimate embedding, plus a linear classifier head.
//!
//! One architecture serves the personalized, local, and global models; they
//! differ only in their weights.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::{Image, Sample};
use crate::error::{Error, Result};
use crate::numerics::{argmax, NodeId, Tape, Tensor};

/// Network shape: two conv+ReLU+2x2-mean-pool stages, a dense ReLU
/// embedding layer, and a dense classifier.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub kernel_size: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl ArchConfig {
    /// Desk-scale default for square grayscale inputs.
    pub fn desk(image_size: usize, num_classes: usize) -> Self {
        ArchConfig {
            in_channels: 1,
            height: image_size,
            width: image_size,
            conv1_channels: 12,
            conv2_channels: 24,
            kernel_size: 3,
            embed_dim: 32,
            num_classes,
        }
    }

    fn stage_dims(&self) -> Result<(usize, usize)> {
        let k = self.kernel_size;
        let shrink = |h: usize, w: usize| -> Option<(usize, usize)> {
            let (h, w) = (h.checked_sub(k - 1)?, w.checked_sub(k - 1)?);
            let (h, w) = (h / 2, w / 2);
            if h == 0 || w == 0 {
                None
            } else {
                Some((h, w))
            }
        };
        shrink(self.height, self.width)
            .and_then(|(h, w)| shrink(h, w))
            .ok_or_else(|| Error::invalid("input too small for two conv/pool stages"))
    }

    /// Flattened feature count entering the first dense layer.
    pub fn flat_dim(&self) -> Result<usize> {
        let (h, w) = self.stage_dims()?;
        Ok(self.conv2_channels * h * w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if self.embed_dim == 0 || self.conv1_channels == 0 || self.conv2_channels == 0 {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if self.kernel_size < 1 {
            return Err(Error::invalid("kernel_size must be positive"));
        }
        self.flat_dim().map(|_| ())
    }
}

/// Ordered named parameter tensors of one model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    /// Seed used at initialization; carried as provenance metadata.
    pub seed: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Embedding and logits of one input.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub embedding: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Node handles for one forward pass recorded on a tape.
pub struct ModelGraph {
    pub params: Vec<NodeId>,
    pub embedding: NodeId,
    pub logits: NodeId,
}

/// Seeded He-normal initialization; biases start at zero.
pub fn init(seed: u64, arch: &ArchConfig) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = arch.kernel_size;
    let flat = arch.flat_dim()?;
    let mut names: Vec<String> = Vec::new();
    let mut tensors: Vec<Tensor> = Vec::new();
    let weight = |shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng| -> Tensor {
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::new(shape, data).expect("init tensor")
    };
    let push = |names: &mut Vec<String>, tensors: &mut Vec<Tensor>, name: &str, t: Tensor| {
        names.push(name.to_string());
        tensors.push(t);
    };
    push(
        &mut names,
        &mut tensors,
        "conv1.weight",
        weight(
            vec![arch.conv1_channels, arch.in_channels, k, k],
            arch.in_channels * k * k,
            &mut rng,
        ),
    );
    push(&mut names, &mut tensors, "conv1.bias", Tensor::zeros(vec![arch.conv1_channels]));
    push(
        &mut names,
        &mut tensors,
        "conv2.weight",
        weight(
            vec![arch.conv2_channels, arch.conv1_channels, k, k],
            arch.conv1_channels * k * k,
            &mut rng,
        ),
    );
    push(&mut names, &mut tensors, "conv2.bias", Tensor::zeros(vec![arch.conv2_channels]));
    push(
        &mut names,
        &mut tensors,
        "fc1.weight",
        weight(vec![flat, arch.embed_dim], flat, &mut rng),
    );
    push(&mut names, &mut tensors, "fc1.bias", Tensor::zeros(vec![arch.embed_dim]));
    push(
        &mut names,
        &mut tensors,
        "fc2.weight",
        weight(vec![arch.embed_dim, arch.num_classes], arch.embed_dim, &mut rng),
    );
    push(&mut names, &mut tensors, "fc2.bias", Tensor::zeros(vec![arch.num_classes]));
    Ok(ModelParams {
        arch: arch.clone(),
        seed,
        names,
        tensors,
    })
}

impl ModelParams {
    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.tensors[i])
    }

    /// Replace all tensors, e.g. with an aggregate. Shapes must match.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::invalid("tensor count mismatch"));
        }
        for (new, old) in tensors.iter().zip(self.tensors.iter()) {
            if new.shape() != old.shape() {
                return Err(Error::ShapeMismatch {
                    expected: old.shape().to_vec(),
                    got: new.shape().to_vec(),
                });
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.arch == other.arch
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(other.tensors.iter())
                .all(|(a, b)| a.bit_eq(b))
    }
}

/// Pack images into a [B, C, H, W] tensor.
pub fn batch_tensor(arch: &ArchConfig, images: &[&Image]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::EmptyInput("image batch"));
    }
    let (c, h, w) = (arch.in_channels, arch.height, arch.width);
    let mut data = vec![0.0; images.len() * c * h * w];
    for (b, img) in images.iter().enumerate() {
        if img.height != h || img.width != w || img.channels != c {
            return Err(Error::ShapeMismatch {
                expected: vec![c, h, w],
                got: vec![img.channels, img.height, img.width],
            });
        }
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    data[((b * c + ch) * h + r) * w + col] = img.get(r, col, ch);
                }
            }
        }
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

/// Register this model's tensors on a tape, in declaration order.
pub fn register_params(tape: &mut Tape, params: &ModelParams) -> Vec<NodeId> {
    params.tensors.iter().map(|t| tape.param(t.clone())).collect()
}

/// Record the forward pass for a batch already on the tape. `param_ids`
/// must come from [`register_params`] for the same architecture.
pub fn forward_graph(
    tape: &mut Tape,
    arch: &ArchConfig,
    param_ids: &[NodeId],
    images: NodeId,
) -> Result<(NodeId, NodeId)> {
    let batch = tape.value(images).shape()[0];
    let h = tape.conv2d(images, param_ids[0], param_ids[1])?;
    let h = tape.relu(h)?;
    let h = tape.mean_pool2(h)?;
    let h = tape.conv2d(h, param_ids[2], param_ids[3])?;
    let h = tape.relu(h)?;
    let h = tape.mean_pool2(h)?;
    let h = tape.reshape(h, vec![batch, arch.flat_dim()?])?;
    let h = tape.matmul(h, param_ids[4])?;
    let h = tape.add_row_bias(h, param_ids[5])?;
    let embedding = tape.relu(h)?;
    let logits = tape.matmul(embedding, param_ids[6])?;
    let logits = tape.add_row_bias(logits, param_ids[7])?;
    Ok((embedding, logits))
}

/// Forward a batch of images on a fresh section of the tape.
pub fn forward_batch(tape: &mut Tape, params: &ModelParams, images: &[&Image]) -> Result<ModelGraph> {
    let batch = batch_tensor(&params.arch, images)?;
    let images_node = tape.constant(batch);
    let param_ids = register_params(tape, params);
    let (embedding, logits) = forward_graph(tape, &params.arch, &param_ids, images_node)?;
    Ok(ModelGraph {
        params: param_ids,
        embedding,
        logits,
    })
}

/// Forward one image; used for inspection and per-sample evaluation.
pub fn forward(params: &ModelParams, image: &Image) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let graph = forward_batch(&mut tape, params, &[image])?;
    Ok(ForwardOutput {
        embedding: tape.value(graph.embedding).row(0).to_vec(),
        logits: tape.value(graph.logits).row(0).to_vec(),
    })
}

/// Embeddings of many images, computed without gradient bookkeeping
/// beyond the throwaway tape.
pub fn embeddings(params: &ModelParams, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let mut tape = Tape::new();
        let graph = forward_batch(&mut tape, params, chunk)?;
        let emb = tape.value(graph.embedding);
        for i in 0..chunk.len() {
            out.push(emb.row(i).to_vec());
        }
    }
    Ok(out)
}

/// Fraction of (image, label) pairs whose argmax logit matches the label.
pub fn accuracy_pairs<'a>(params: &ModelParams, pairs: &[(&'a Image, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("evaluation samples"));
    }
    let mut correct = 0usize;
    for chunk in pairs.chunks(64) {
        let images: Vec<&Image> = chunk.iter().map(|(im, _)| *im).collect();
        let mut tape = Tape::new();
        let graph = forward_batch(&mut tape, params, &images)?;
        let logits = tape.value(graph.logits);
        for (i, &(_, y)) in chunk.iter().enumerate() {
            if argmax(logits.row(i)) == y {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

/// Accuracy over dataset samples, on original or pixelized images.
pub fn accuracy(params: &ModelParams, samples: &[Sample], use_pixelized: bool) -> Result<f64> {
    let pairs: Vec<(&Image, usize)> = samples
        .iter()
        .map(|s| {
            if use_pixelized {
                s.z.as_ref()
                    .map(|z| (z, s.y))
                    .ok_or(Error::invalid("sample has no pixelized image"))
            } else {
                Ok((&s.x, s.y))
            }
        })
        .collect::<Result<_>>()?;
    accuracy_pairs(params, &pairs)
}

const MAGIC: &[u8; 8] = b"CDFLMDL1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: ArchConfig,
    seed: u64,
}

/// Length-prefixed named-tensor binary with a JSON header.
pub fn serialize(params: &ModelParams) -> Vec<u8> {
    let header = serde_json::to_vec(&CheckpointHeader {
        arch: params.arch.clone(),
        seed: params.seed,
    })
    .expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, tensor) in params.names.iter().zip(params.tensors.iter()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptCheckpoint("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let header_len = r.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::CorruptCheckpoint(format!("bad header: {e}")))?;
    header
        .arch
        .validate()
        .map_err(|e| Error::CorruptCheckpoint(format!("bad arch: {e}")))?;
    let count = r.u32()? as usize;
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::CorruptCheckpoint("bad tensor name".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        names.push(name);
        tensors.push(
            Tensor::new(shape, data)
                .map_err(|e| Error::CorruptCheckpoint(format!("bad tensor: {e}")))?,
        );
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    let params = ModelParams {
        arch: header.arch,
        seed: header.seed,
        names,
        tensors,
    };
    if params.tensors.len() != 8 {
        return Err(Error::CorruptCheckpoint("wrong tensor count".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth_generate;

    fn desk() -> ArchConfig {
        ArchConfig::desk(16, 4)
    }

    #[test]
    fn parameter_count_matches_hand_sum() {
        let arch = desk();
        let p = init(0, &arch).unwrap();
        // conv1: 12*1*3*3 + 12; conv2: 24*12*3*3 + 24; fc1: 96*32 + 32;
        // fc2: 32*4 + 4.
        let flat = arch.flat_dim().unwrap();
        assert_eq!(flat, 24 * 2 * 2);
        let hand = (12 * 1 * 3 * 3 + 12)
            + (24 * 12 * 3 * 3 + 24)
            + (flat * 32 + 32)
            + (32 * 4 + 4);
        assert_eq!(p.parameter_count(), hand);
        assert_eq!(hand, 5972);
    }

    #[test]
    fn shapes_of_forward_output() {
        let ds = synth_generate(4, 2, 16, 0.05, 3).unwrap();
        let p = init(1, &desk()).unwrap();
        let out = forward(&p, &ds.samples[0].x).unwrap();
        assert_eq!(out.embedding.len(), 32);
        assert_eq!(out.logits.len(), 4);
        assert!(out.logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_weight_network_gives_uniform_softmax() {
        let mut p = init(1, &desk()).unwrap();
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let ds = synth_generate(4, 1, 16, 0.05, 3).unwrap();
        let out = forward(&p, &ds.samples[0].x).unwrap();
        assert!(out.logits.iter().all(|&v| v == 0.0));
        let probs = crate::numerics::softmax(&out.logits);
        assert!(probs.iter().all(|&p| (p - 0.25).abs() < 1e-12));
    }

    #[test]
    fn init_is_deterministic_and_roundtrips() {
        let a = init(7, &desk()).unwrap();
        let b = init(7, &desk()).unwrap();
        assert!(a.bit_eq(&b));
        let bytes = serialize(&a);
        let back = deserialize(&bytes).unwrap();
        assert!(a.bit_eq(&back));
        assert_eq!(back.seed, 7);
        assert_eq!(serialize(&back), bytes);
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let p = init(7, &desk()).unwrap();
        let mut bytes = serialize(&p);
        bytes.truncate(bytes.len() - 3);
        assert!(deserialize(&bytes).is_err());
        let mut garbage = serialize(&p);
        garbage[0] = b'X';
        assert!(deserialize(&garbage).is_err());
        assert!(deserialize(&[]).is_err());
    }

    /// Solve a k x k linear system by Gaussian elimination (test oracle).
    fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
        let k = a.len();
        for col in 0..k {
            let pivot = (col..k)
                .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
                .unwrap();
            a.swap(col, pivot);
            b.swap(col, pivot);
            let diag = a[col][col];
            for j in 0..k {
                a[col][j] /= diag;
                b[col][j] /= diag;
            }
            for i in 0..k {
                if i != col {
                    let f = a[i][col];
                    for j in 0..k {
                        a[i][j] -= f * a[col][j];
                        b[i][j] -= f * b[col][j];
                    }
                }
            }
        }
        b
    }

    #[test]
    fn accuracy_of_hardwired_and_constant_predictors() {
        let ds = synth_generate(4, 5, 16, 0.0, 3).unwrap();
        let p = init(2, &desk()).unwrap();

        // Hard-wire the classifier to the true labels: with zero noise there
        // are four distinct images; pick fc2 = E^T (E E^T)^{-1} so that
        // logits are exactly one-hot per class.
        let mut embeddings = Vec::new();
        for class in 0..4 {
            let s = ds.samples.iter().find(|s| s.y == class).unwrap();
            embeddings.push(forward(&p, &s.x).unwrap().embedding);
        }
        let gram: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                (0..4)
                    .map(|j| {
                        embeddings[i]
                            .iter()
                            .zip(embeddings[j].iter())
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect()
            })
            .collect();
        let identity: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let coef = solve(gram, identity); // (E E^T)^{-1}
        let mut perfect = p.clone();
        {
            let w = perfect.tensor_mut("fc2.weight").unwrap();
            for d in 0..32 {
                for k in 0..4 {
                    let v: f64 = (0..4).map(|i| embeddings[i][d] * coef[i][k]).sum();
                    w.data_mut()[d * 4 + k] = v;
                }
            }
            for v in perfect.tensor_mut("fc2.bias").unwrap().data_mut() {
                *v = 0.0;
            }
        }
        assert_eq!(accuracy(&perfect, &ds.samples, false).unwrap(), 1.0);

        // Constant predictor: zero out fc2 so logits are all equal and
        // argmax ties break to class 0 -> accuracy = 1/4 on balanced data.
        let mut constant = p.clone();
        for name in ["fc2.weight", "fc2.bias"] {
            for v in constant.tensor_mut(name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        let acc = accuracy(&constant, &ds.samples, false).unwrap();
        assert!((acc - 0.25).abs() < 1e-12);

        // Independent counting oracle for an arbitrary net.
        let mut correct = 0usize;
        for s in &ds.samples {
            let out = forward(&p, &s.x).unwrap();
            let mut best = 0;
            for (i, &v) in out.logits.iter().enumerate() {
                if v > out.logits[best] {
                    best = i;
                }
            }
            if best == s.y {
                correct += 1;
            }
        }
        let expect = correct as f64 / ds.samples.len() as f64;
        assert_eq!(accuracy(&p, &ds.samples, false).unwrap(), expect);
    }

    /// Straight-line reimplementation of the forward pass: plain loops over
    /// the raw tensors, no tape. Oracle for the golden-value test.
    fn straight_line_forward(p: &ModelParams, img: &crate::dataio::Image) -> (Vec<f64>, Vec<f64>) {
        let arch = &p.arch;
        let k = arch.kernel_size;
        let conv = |input: &[Vec<Vec<f64>>], w: &Tensor, b: &Tensor| -> Vec<Vec<Vec<f64>>> {
            let cin = input.len();
            let (h, wd) = (input[0].len(), input[0][0].len());
            let cout = w.shape()[0];
            let (oh, ow) = (h - k + 1, wd - k + 1);
            let mut out = vec![vec![vec![0.0; ow]; oh]; cout];
            for co in 0..cout {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    acc += input[ci][i + ki][j + kj]
                                        * w.data()[((co * cin + ci) * k + ki) * k + kj];
                                }
                            }
                        }
                        out[co][i][j] = acc;
                    }
                }
            }
            out
        };
        let relu3 = |x: &mut Vec<Vec<Vec<f64>>>| {
            for c in x.iter_mut() {
                for r in c.iter_mut() {
                    for v in r.iter_mut() {
                        *v = v.max(0.0);
                    }
                }
            }
        };
        let pool = |x: &[Vec<Vec<f64>>]| -> Vec<Vec<Vec<f64>>> {
            x.iter()
                .map(|c| {
                    let (oh, ow) = (c.len() / 2, c[0].len() / 2);
                    (0..oh)
                        .map(|i| {
                            (0..ow)
                                .map(|j| {
                                    (c[2 * i][2 * j]
                                        + c[2 * i][2 * j + 1]
                                        + c[2 * i + 1][2 * j]
                                        + c[2 * i + 1][2 * j + 1])
                                        / 4.0
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        };
        let mut x: Vec<Vec<Vec<f64>>> = (0..arch.in_channels)
            .map(|ch| {
                (0..arch.height)
                    .map(|r| (0..arch.width).map(|c| img.get(r, c, ch)).collect())
                    .collect()
            })
            .collect();
        let mut h = conv(&x, p.tensor("conv1.weight").unwrap(), p.tensor("conv1.bias").unwrap());
        relu3(&mut h);
        x = pool(&h);
        let mut h = conv(&x, p.tensor("conv2.weight").unwrap(), p.tensor("conv2.bias").unwrap());
        relu3(&mut h);
        let pooled = pool(&h);
        let flat: Vec<f64> = pooled
            .iter()
            .flat_map(|c| c.iter().flat_map(|r| r.iter().cloned()))
            .collect();
        let dense = |v: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
            let (rows, cols) = (w.shape()[0], w.shape()[1]);
            (0..cols)
                .map(|j| {
                    b.data()[j] + (0..rows).map(|i| v[i] * w.data()[i * cols + j]).sum::<f64>()
                })
                .collect()
        };
        let emb: Vec<f64> = dense(&flat, p.tensor("fc1.weight").unwrap(), p.tensor("fc1.bias").unwrap())
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let logits = dense(&emb, p.tensor("fc2.weight").unwrap(), p.tensor("fc2.bias").unwrap());
        (emb, logits)
    }

    #[test]
    fn golden_forward_matches_straight_line_oracle() {
        let p = init(0, &desk()).unwrap();
        let ds = synth_generate(4, 1, 16, 0.05, 123).unwrap();
        let img = &ds.samples[2].x;
        let out = forward(&p, img).unwrap();
        let (oracle_emb, oracle_logits) = straight_line_forward(&p, img);
        for (a, b) in out.embedding.iter().zip(oracle_emb.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in out.logits.iter().zip(oracle_logits.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Frozen golden values recorded from the oracle.
        let golden_emb_head = [0.0, 0.0, 0.0, 1.5587226495249784];
        let golden_logits = [
            -0.49862864677486185,
            1.2178576799258072,
            -0.5800121919276876,
            -0.5660466671756121,
        ];
        for (a, g) in out.embedding.iter().zip(golden_emb_head.iter()) {
            assert!((a - g).abs() < 1e-12, "embedding drifted from golden");
        }
        for (a, g) in out.logits.iter().zip(golden_logits.iter()) {
            assert!((a - g).abs() < 1e-12, "logits drifted from golden");
        }
    }

    #[test]
    fn empty_sample_list_rejected() {
        let p = init(2, &desk()).unwrap();
        assert!(accuracy(&p, &[], false).is_err());
    }

    #[test]
    fn final_layer_is_parameter_linear() {
        let ds = synth_generate(4, 1, 16, 0.05, 8).unwrap();
        let p = init(3, &desk()).unwrap();
        let base = forward(&p, &ds.samples[0].x).unwrap();
        let mut scaled = p.clone();
        for name in ["fc2.weight", "fc2.bias"] {
            for v in scaled.tensor_mut(name).unwrap().data_mut() {
                *v *= 3.0;
            }
        }
        let out = forward(&scaled, &ds.samples[0].x).unwrap();
        for (a, b) in base.logits.iter().zip(out.logits.iter()) {
            assert!((3.0 * a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn argmax_invariant_to_constant_logit_shift() {
        let ds = synth_generate(4, 3, 16, 0.1, 12).unwrap();
        let p = init(4, &desk()).unwrap();
        for s in &ds.samples {
            let out = forward(&p, &s.x).unwrap();
            let shifted: Vec<f64> = out.logits.iter().map(|v| v + 123.456).collect();
            assert_eq!(argmax(&out.logits), argmax(&shifted));
        }
    }
}
