use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{stream_rng, Batch, Dataset, Split};
use crate::error::{Error, Result};
use crate::mask::{MaskLayout, Segment, Ticket};
use crate::tensor::{Graph, Tensor, Var};

const BN_EPS: f64 = 1e-5;

/// Desk-scale architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    /// in → 3 → out; twelve maskable weights on 2-D, two-class data.
    #[serde(rename = "tiny-mlp")]
    TinyMlp,
    #[serde(rename = "mlp-2x256")]
    Mlp2x256,
    /// Two conv layers and two dense layers.
    #[serde(rename = "lenet-conv4")]
    LenetConv4,
    /// Conv stem, three residual blocks with batch norm, global pooling.
    #[serde(rename = "resnet-tiny")]
    ResnetTiny,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::TinyMlp, Arch::Mlp2x256, Arch::LenetConv4, Arch::ResnetTiny];

    pub fn id(&self) -> &'static str {
        match self {
            Arch::TinyMlp => "tiny-mlp",
            Arch::Mlp2x256 => "mlp-2x256",
            Arch::LenetConv4 => "lenet-conv4",
            Arch::ResnetTiny => "resnet-tiny",
        }
    }

    pub fn needs_images(&self) -> bool {
        matches!(self, Arch::LenetConv4 | Arch::ResnetTiny)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .iter()
            .find(|a| a.id() == s)
            .copied()
            .ok_or_else(|| Error::UnknownArch(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamInfo {
    /// Only dense and conv weights are maskable; biases and batch-norm
    /// affine parameters never are.
    pub fn maskable(&self) -> bool {
        self.kind == ParamKind::Weight
    }
}

/// Layer specs refer to parameters by index into [`ModelState::params`].
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense { weight: usize, bias: usize },
    Conv { weight: usize, bias: Option<usize>, stride: usize, pad: usize },
    BatchNorm { scale: usize, shift: usize },
    Relu,
    AvgPool(usize),
    GlobalAvgPool,
    Flatten,
    /// `relu(body(x) + x)`.
    Residual(Vec<Layer>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub arch: Arch,
    pub seed: u64,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<Layer>,
    pub params: Vec<Tensor>,
    pub info: Vec<ParamInfo>,
}

/// Values from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub logits: Tensor,
    /// Post-ReLU activations in execution order (empty unless captured).
    pub features: Vec<Tensor>,
    /// Mean cross-entropy.
    pub loss: f64,
}

/// How maskable weights are scaled in a forward pass.
#[derive(Clone, Copy)]
pub enum Overlay<'a, 'g> {
    None,
    /// Flat values of length `d` (binary or soft).
    Values(&'a [f64]),
    /// One node per layout segment.
    Vars(&'a [Var<'g>]),
}

/// Nodes from a forward pass recorded on a graph.
pub struct GraphPass<'g> {
    /// Raw parameter nodes, in model order.
    pub params: Vec<Var<'g>>,
    /// Effective (overlaid) maskable weights, one per layout segment.
    pub effective: Vec<Var<'g>>,
    pub logits: Var<'g>,
    pub features: Vec<Var<'g>>,
    pub loss: Var<'g>,
}

/// Mean cross-entropy through the stable log-softmax path.
pub fn cross_entropy<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let (b, c) = (shape[0], shape[1]);
    let mut onehot = vec![0.0; b * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![y],
            });
        }
        onehot[i * c + y] = 1.0;
    }
    let onehot = logits.graph().constant(Tensor::new(vec![b, c], onehot)?);
    logits.log_softmax()?.mul(onehot)?.sum()?.scale(-1.0 / b as f64)
}

struct Builder<R> {
    rng: R,
    params: Vec<Tensor>,
    info: Vec<ParamInfo>,
}

impl<R: Rng> Builder<R> {
    fn push(&mut self, name: String, t: Tensor, kind: ParamKind) -> usize {
        self.info.push(ParamInfo {
            name,
            shape: t.shape().to_vec(),
            kind,
        });
        self.params.push(t);
        self.params.len() - 1
    }

    /// He-normal weights, `std = sqrt(2 / fan_in)`.
    fn kaiming(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * self.rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Layer {
        let w = self.kaiming(&[fan_in, fan_out], fan_in);
        let weight = self.push(format!("{name}.weight"), w, ParamKind::Weight);
        let bias = self.push(format!("{name}.bias"), Tensor::zeros(&[fan_out]), ParamKind::Bias);
        Layer::Dense { weight, bias }
    }

    fn conv(&mut self, name: &str, in_c: usize, out_c: usize, k: usize, pad: usize, with_bias: bool) -> Layer {
        let w = self.kaiming(&[out_c, in_c, k, k], in_c * k * k);
        let weight = self.push(format!("{name}.weight"), w, ParamKind::Weight);
        let bias = with_bias
            .then(|| self.push(format!("{name}.bias"), Tensor::zeros(&[out_c]), ParamKind::Bias));
        Layer::Conv {
            weight,
            bias,
            stride: 1,
            pad,
        }
    }

    fn batch_norm(&mut self, name: &str, c: usize) -> Layer {
        let scale = self.push(format!("{name}.scale"), Tensor::ones(&[c]), ParamKind::BnScale);
        let shift = self.push(format!("{name}.shift"), Tensor::zeros(&[c]), ParamKind::BnShift);
        Layer::BatchNorm { scale, shift }
    }
}

impl ModelState {
    /// Deterministic initialization for `arch` on samples of `input_shape`.
    pub fn build(arch: Arch, input_shape: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        let mut b = Builder {
            rng: stream_rng(seed, 0x1417),
            params: Vec::new(),
            info: Vec::new(),
        };
        let flat: usize = input_shape.iter().product();
        let layers = match arch {
            Arch::TinyMlp => vec![
                Layer::Flatten,
                b.dense("fc1", flat, 3),
                Layer::Relu,
                b.dense("fc2", 3, num_classes),
            ],
            Arch::Mlp2x256 => vec![
                Layer::Flatten,
                b.dense("fc1", flat, 256),
                Layer::Relu,
                b.dense("fc2", 256, 256),
                Layer::Relu,
                b.dense("fc3", 256, num_classes),
            ],
            Arch::LenetConv4 => {
                let (c, h, w) = image_dims(arch, input_shape)?;
                let pooled = (h / 2 / 2) * (w / 2 / 2);
                if pooled == 0 {
                    return Err(Error::Config(format!("{arch} needs images of at least 4x4")));
                }
                vec![
                    b.conv("conv1", c, 16, 3, 1, true),
                    Layer::Relu,
                    Layer::AvgPool(2),
                    b.conv("conv2", 16, 32, 3, 1, true),
                    Layer::Relu,
                    Layer::AvgPool(2),
                    Layer::Flatten,
                    b.dense("fc1", 32 * pooled, 64),
                    Layer::Relu,
                    b.dense("fc2", 64, num_classes),
                ]
            }
            Arch::ResnetTiny => {
                let (c, _, _) = image_dims(arch, input_shape)?;
                let width = 16;
                let mut layers = vec![
                    b.conv("stem", c, width, 3, 1, false),
                    b.batch_norm("stem.bn", width),
                    Layer::Relu,
                ];
                for i in 0..3 {
                    let body = vec![
                        b.conv(&format!("block{i}.conv1"), width, width, 3, 1, false),
                        b.batch_norm(&format!("block{i}.bn1"), width),
                        Layer::Relu,
                        b.conv(&format!("block{i}.conv2"), width, width, 3, 1, false),
                        b.batch_norm(&format!("block{i}.bn2"), width),
                    ];
                    layers.push(Layer::Residual(body));
                }
                layers.push(Layer::GlobalAvgPool);
                layers.push(b.dense("fc", width, num_classes));
                layers
            }
        };
        Ok(ModelState {
            arch,
            seed,
            input_shape: input_shape.to_vec(),
            num_classes,
            layers,
            params: b.params,
            info: b.info,
        })
    }

    /// Builds `arch` sized for `data`.
    pub fn for_dataset(arch: Arch, data: &Dataset, seed: u64) -> Result<Self> {
        Self::build(arch, &data.sample_shape, data.num_classes, seed)
    }

    /// Indices of maskable parameters, in layout order.
    pub fn maskable_params(&self) -> Vec<usize> {
        (0..self.info.len()).filter(|&i| self.info[i].maskable()).collect()
    }

    pub fn layout(&self) -> MaskLayout {
        MaskLayout {
            arch: self.arch.id().to_string(),
            segments: self
                .maskable_params()
                .into_iter()
                .map(|i| Segment {
                    name: self.info[i].name.clone(),
                    len: self.params[i].numel(),
                })
                .collect(),
        }
    }

    /// Number of maskable weights.
    pub fn d(&self) -> usize {
        self.maskable_params().iter().map(|&i| self.params[i].numel()).sum()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Maskable weights concatenated in layout order.
    pub fn maskable_flat(&self) -> Vec<f64> {
        self.maskable_params()
            .into_iter()
            .flat_map(|i| self.params[i].data().to_vec())
            .collect()
    }

    pub fn set_maskable_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.d() {
            return Err(Error::OverlayLength {
                expected: self.d(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for i in self.maskable_params() {
            let n = self.params[i].numel();
            self.params[i].data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// All parameters concatenated in model order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().to_vec()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::OverlayLength {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.numel();
            p.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Zeroes every maskable entry the ticket prunes.
    pub fn apply_mask(&mut self, ticket: &Ticket) -> Result<()> {
        let flat = self.maskable_flat();
        if ticket.d() != flat.len() {
            return Err(Error::OverlayLength {
                expected: flat.len(),
                got: ticket.d(),
            });
        }
        let masked: Vec<f64> = flat
            .iter()
            .zip(&ticket.mask)
            .map(|(w, &m)| if m { *w } else { 0.0 })
            .collect();
        self.set_maskable_flat(&masked)
    }

    /// Records a forward pass on `graph`. Parameters are tracked leaves when
    /// `track_params` is set and constants otherwise.
    pub fn forward_graph<'g>(
        &self,
        graph: &'g Graph,
        batch: &Batch,
        overlay: Overlay<'_, 'g>,
        track_params: bool,
    ) -> Result<GraphPass<'g>> {
        let params: Vec<Var<'g>> = self
            .params
            .iter()
            .map(|p| {
                if track_params {
                    graph.param(p.clone())
                } else {
                    graph.constant(p.clone())
                }
            })
            .collect();
        let maskable = self.maskable_params();
        let d = self.d();
        match overlay {
            Overlay::Values(v) if v.len() != d => {
                return Err(Error::OverlayLength {
                    expected: d,
                    got: v.len(),
                })
            }
            Overlay::Vars(v) if v.len() != maskable.len() => {
                return Err(Error::OverlayLength {
                    expected: maskable.len(),
                    got: v.len(),
                })
            }
            _ => {}
        }
        let mut eff = params.clone();
        let mut offset = 0;
        for (seg, &pi) in maskable.iter().enumerate() {
            let shape = self.params[pi].shape().to_vec();
            let n = self.params[pi].numel();
            eff[pi] = match overlay {
                Overlay::None => params[pi],
                Overlay::Values(v) => {
                    let m = graph.constant(Tensor::new(shape, v[offset..offset + n].to_vec())?);
                    params[pi].mul(m)?
                }
                Overlay::Vars(v) => {
                    let got = v[seg].value().numel();
                    if got != n {
                        return Err(Error::OverlayLength { expected: n, got });
                    }
                    params[pi].mul(v[seg].reshape(&shape)?)?
                }
            };
            offset += n;
        }

        let mut x = graph.constant(batch.x.clone());
        let expected_rank = self.input_shape.len() + 1;
        if x.shape().len() != expected_rank || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape {
                op: "forward",
                lhs: x.shape(),
                rhs: self.input_shape.clone(),
            });
        }
        let mut features = Vec::new();
        x = apply_layers(&self.layers, x, &eff, &mut features)?;
        let loss = cross_entropy(x, &batch.y)?;
        Ok(GraphPass {
            effective: maskable.iter().map(|&i| eff[i]).collect(),
            params,
            logits: x,
            features,
            loss,
        })
    }

    /// Value-only forward pass. `overlay`, if given, multiplies the maskable
    /// weights entrywise.
    pub fn forward(&self, batch: &Batch, overlay: Option<&[f64]>, capture_features: bool) -> Result<ForwardTrace> {
        let graph = Graph::new();
        let ov = overlay.map_or(Overlay::None, Overlay::Values);
        let pass = self.forward_graph(&graph, batch, ov, false)?;
        Ok(ForwardTrace {
            logits: (*pass.logits.value()).clone(),
            features: if capture_features {
                pass.features.iter().map(|f| (*f.value()).clone()).collect()
            } else {
                Vec::new()
            },
            loss: pass.loss.item(),
        })
    }

    /// Mean loss and accuracy over `split`, evaluated in chunks.
    pub fn evaluate(&self, data: &Dataset, split: &Split, overlay: Option<&[f64]>) -> Result<Evaluation> {
        let (mut loss, mut correct, mut n) = (0.0, 0usize, 0usize);
        for batch in data.chunks(split, 500) {
            let trace = self.forward(&batch, overlay, false)?;
            let b = batch.y.len();
            loss += trace.loss * b as f64;
            correct += count_correct(&trace.logits, &batch.y);
            n += b;
        }
        Ok(Evaluation {
            loss: loss / n.max(1) as f64,
            accuracy: correct as f64 / n.max(1) as f64,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
            best == y
        })
        .count()
}

fn image_dims(arch: Arch, input_shape: &[usize]) -> Result<(usize, usize, usize)> {
    match input_shape {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::Config(format!(
            "{arch} needs [channels, height, width] samples, got {input_shape:?}"
        ))),
    }
}

fn channel_view(x: &Var<'_>) -> Vec<usize> {
    let s = x.shape();
    let mut v = vec![1; s.len()];
    v[1] = s[1];
    v
}

fn apply_layers<'g>(layers: &[Layer], mut x: Var<'g>, eff: &[Var<'g>], features: &mut Vec<Var<'g>>) -> Result<Var<'g>> {
    for layer in layers {
        x = match layer {
            Layer::Dense { weight, bias } => x.matmul(eff[*weight])?.add(eff[*bias])?,
            Layer::Conv {
                weight,
                bias,
                stride,
                pad,
            } => {
                let y = x.conv2d(eff[*weight], *stride, *pad)?;
                match bias {
                    Some(b) => {
                        let view = channel_view(&y);
                        y.add(eff[*b].reshape(&view)?)?
                    }
                    None => y,
                }
            }
            Layer::BatchNorm { scale, shift } => {
                // Current-batch statistics only; no running averages.
                let view = channel_view(&x);
                let mean = x.mean_to(&view)?;
                let var = x.var_to(&view)?;
                let xhat = x.sub(mean)?.div(var.add_scalar(BN_EPS)?.sqrt()?)?;
                xhat.mul(eff[*scale].reshape(&view)?)?
                    .add(eff[*shift].reshape(&view)?)?
            }
            Layer::Relu => {
                let y = x.relu()?;
                features.push(y);
                y
            }
            Layer::AvgPool(k) => x.avg_pool2d(*k)?,
            Layer::GlobalAvgPool => {
                let s = x.shape();
                x.mean_to(&[s[0], s[1], 1, 1])?.reshape(&[s[0], s[1]])?
            }
            Layer::Flatten => {
                let s = x.shape();
                x.reshape(&[s[0], s[1..].iter().product()])?
            }
            Layer::Residual(body) => {
                let y = apply_layers(body, x, eff, features)?;
                let out = y.add(x)?.relu()?;
                features.push(out);
                out
            }
        };
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_blobs, BlobSpec};

    fn image_batch(b: usize, seed: u64) -> Batch {
        let mut rng = stream_rng(seed, 5);
        let x: Vec<f64> = (0..b * 64).map(|_| rng.sample(StandardNormal)).collect();
        Batch {
            x: Tensor::new(vec![b, 1, 8, 8], x).unwrap(),
            y: (0..b).map(|i| i % 4).collect(),
        }
    }

    #[test]
    fn mlp_maskable_count() {
        let m = ModelState::build(Arch::Mlp2x256, &[784], 10, 0).unwrap();
        assert_eq!(m.d(), 784 * 256 + 256 * 256 + 256 * 10);
        assert_eq!(m.layout().d(), m.d());
        let tiny = ModelState::build(Arch::TinyMlp, &[2], 2, 0).unwrap();
        assert_eq!(tiny.d(), 12);
    }

    #[test]
    fn build_is_deterministic() {
        let a = ModelState::build(Arch::LenetConv4, &[1, 8, 8], 4, 11).unwrap();
        let b = ModelState::build(Arch::LenetConv4, &[1, 8, 8], 4, 11).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        let c = ModelState::build(Arch::LenetConv4, &[1, 8, 8], 4, 12).unwrap();
        assert_ne!(a.flat_params(), c.flat_params());
    }

    #[test]
    fn resnet_tiny_structure() {
        let m = ModelState::build(Arch::ResnetTiny, &[1, 8, 8], 4, 0).unwrap();
        assert!(m.layers.iter().any(|l| matches!(l, Layer::Residual(_))));
        assert!(m.info.iter().any(|p| p.kind == ParamKind::BnScale));
        assert!(m.num_params() <= 100_000);
        assert!(m.info.iter().filter(|p| p.maskable()).all(|p| p.kind == ParamKind::Weight));
    }

    #[test]
    fn unknown_arch_rejected() {
        assert!(matches!("vgg-16".parse::<Arch>(), Err(Error::UnknownArch(_))));
        assert_eq!("resnet-tiny".parse::<Arch>().unwrap(), Arch::ResnetTiny);
    }

    #[test]
    fn ones_overlay_is_identity() {
        for arch in [Arch::Mlp2x256, Arch::LenetConv4, Arch::ResnetTiny] {
            let input: &[usize] = if arch.needs_images() { &[1, 8, 8] } else { &[64] };
            let m = ModelState::build(arch, input, 4, 3).unwrap();
            let mut batch = image_batch(6, 1);
            if !arch.needs_images() {
                batch.x = batch.x.reshape(&[6, 64]).unwrap();
            }
            let plain = m.forward(&batch, None, true).unwrap();
            let ones = vec![1.0; m.d()];
            let overlaid = m.forward(&batch, Some(&ones), true).unwrap();
            assert_eq!(plain, overlaid);
        }
    }

    #[test]
    fn zero_overlay_gives_naive_network() {
        let data = synthetic_blobs(&BlobSpec::new(4, 20, 100, 0)).unwrap();
        let m = ModelState::for_dataset(Arch::Mlp2x256, &data, 0).unwrap();
        let batch = data.full_batch(&data.train);
        let zeros = vec![0.0; m.d()];
        let t = m.forward(&batch, Some(&zeros), false).unwrap();
        assert!(t.logits.data().iter().all(|&v| v == 0.0));
        assert!((t.loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn masked_overlay_equals_zeroed_weights_exactly() {
        for arch in [Arch::Mlp2x256, Arch::LenetConv4, Arch::ResnetTiny] {
            let input: &[usize] = if arch.needs_images() { &[1, 8, 8] } else { &[64] };
            let m = ModelState::build(arch, input, 4, 9).unwrap();
            let mut batch = image_batch(5, 2);
            if !arch.needs_images() {
                batch.x = batch.x.reshape(&[5, 64]).unwrap();
            }
            let mut rng = stream_rng(4, 4);
            let mask: Vec<bool> = (0..m.d()).map(|_| rng.gen_bool(0.3)).collect();
            let ticket = Ticket::new(mask, m.layout(), 0.3, "random").unwrap();
            let via_overlay = m.forward(&batch, Some(&ticket.as_overlay()), true).unwrap();
            let mut zeroed = m.clone();
            zeroed.apply_mask(&ticket).unwrap();
            let direct = zeroed.forward(&batch, None, true).unwrap();
            assert_eq!(via_overlay.logits, direct.logits);
            assert_eq!(via_overlay.loss.to_bits(), direct.loss.to_bits());
        }
    }

    #[test]
    fn overlay_length_checked() {
        let m = ModelState::build(Arch::TinyMlp, &[2], 2, 0).unwrap();
        let batch = Batch {
            x: Tensor::zeros(&[1, 2]),
            y: vec![0],
        };
        assert!(matches!(
            m.forward(&batch, Some(&[1.0; 11]), false),
            Err(Error::OverlayLength { expected: 12, got: 11 })
        ));
    }

    #[test]
    fn batch_norm_is_permutation_equivariant() {
        let m = ModelState::build(Arch::ResnetTiny, &[1, 8, 8], 4, 5).unwrap();
        let batch = image_batch(6, 7);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut px = Vec::new();
        for &i in &perm {
            px.extend_from_slice(&batch.x.data()[i * 64..(i + 1) * 64]);
        }
        let permuted = Batch {
            x: Tensor::new(vec![6, 1, 8, 8], px).unwrap(),
            y: perm.iter().map(|&i| batch.y[i]).collect(),
        };
        let a = m.forward(&batch, None, false).unwrap();
        let b = m.forward(&permuted, None, false).unwrap();
        for (row, &i) in perm.iter().enumerate() {
            for c in 0..4 {
                let diff = a.logits.data()[i * 4 + c] - b.logits.data()[row * 4 + c];
                assert!(diff.abs() < 1e-9);
            }
        }
    }
}
