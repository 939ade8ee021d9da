//! The segmentation network: a resolution-preserving stack of 3x3
//! convolutions with ReLU and a 3x3 classification head.
//!
//! Student and teacher share [`Architecture`] and differ only in their
//! [`Params`].

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::numerics::{softmax_channel_values, Graph, Real, Tensor, Var};
use crate::seeds;

pub const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 32, 16];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub num_classes: usize,
}

impl Architecture {
    pub fn new(in_channels: usize, widths: &[usize], num_classes: usize) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config(format!("hidden widths must be non-empty and positive, got {widths:?}")));
        }
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        if in_channels == 0 {
            return Err(Error::Config("input channel count must be positive".into()));
        }
        Ok(Architecture { in_channels, widths: widths.to_vec(), num_classes })
    }

    /// `(name, in, out)` for every convolution, head last.
    fn layers(&self) -> Vec<(String, usize, usize)> {
        let mut cin = self.in_channels;
        let mut out = Vec::new();
        for (i, &w) in self.widths.iter().enumerate() {
            out.push((format!("conv{i}"), cin, w));
            cin = w;
        }
        out.push(("head".to_string(), cin, self.num_classes));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(|(_, cin, cout)| cin * cout * 9 + cout).sum()
    }
}

/// Named parameter tensors in a fixed order: `convK.weight`, `convK.bias`,
/// ..., `head.weight`, `head.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub arch: Architecture,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Params<T> {
    /// He-scaled normal weights, zero biases.
    pub fn init(seed: u64, arch: Architecture) -> Self {
        let mut rng = seeds::rng(&[seed, 0x1417]);
        let mut tensors = Vec::new();
        for (name, cin, cout) in arch.layers() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let weights = (0..cout * cin * 9).map(|_| T::of(normal.sample(&mut rng))).collect();
            tensors.push((format!("{name}.weight"), Tensor::from_vec(&[cout, cin, 3, 3], weights).expect("sized")));
            tensors.push((format!("{name}.bias"), Tensor::zeros(&[cout])));
        }
        Params { arch, tensors }
    }

    pub fn zeros(arch: Architecture) -> Self {
        let tensors = arch
            .layers()
            .into_iter()
            .flat_map(|(name, cin, cout)| {
                [
                    (format!("{name}.weight"), Tensor::zeros(&[cout, cin, 3, 3])),
                    (format!("{name}.bias"), Tensor::zeros(&[cout])),
                ]
            })
            .collect();
        Params { arch, tensors }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Whether tensor `index` belongs to the classification head.
    pub fn is_head(&self, index: usize) -> bool {
        self.tensors[index].0.starts_with("head.")
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params { arch: self.arch.clone(), tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }

    /// Adds every tensor to `graph` as a trainable leaf.
    pub fn register(&self, graph: &mut Graph<T>) -> Vec<Var> {
        self.tensors.iter().map(|(_, t)| graph.param(t.clone())).collect()
    }

    /// Logits `[N, C, H, W]` for images `[N, in_channels, H, W]`.
    pub fn forward(&self, graph: &mut Graph<T>, vars: &[Var], images: Var) -> Result<Var> {
        let shape = graph.value(images).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.arch.in_channels {
            return Err(Error::Shape(format!("model expects [N, {}, H, W] images, got {shape:?}", self.arch.in_channels)));
        }
        if shape[2] < 8 || shape[3] < 8 {
            return Err(Error::Shape(format!("images must be at least 8x8, got {}x{}", shape[2], shape[3])));
        }
        let mut x = images;
        let hidden = self.arch.widths.len();
        for layer in 0..=hidden {
            x = graph.conv2d(x, vars[2 * layer], vars[2 * layer + 1])?;
            if layer < hidden {
                x = graph.relu(x);
            }
        }
        Ok(x)
    }

    /// Logits without recording any gradient state.
    pub fn infer(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut graph = Graph::no_grad();
        let vars = self.register(&mut graph);
        let input = graph.constant(images.clone());
        let out = self.forward(&mut graph, &vars, input)?;
        Ok(graph.value(out).clone())
    }

    /// Per-pixel argmax of the channel softmax.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<LabelMap>> {
        Ok(argmax_labels(&softmax_channel_values(&self.infer(images)?)))
    }
}

/// Per-pixel argmax over channels; ties go to the lowest class index.
pub fn argmax_labels<T: Real>(scores: &Tensor<T>) -> Vec<LabelMap> {
    let [n, c, h, w] = scores.dims4();
    let hw = h * w;
    (0..n)
        .map(|i| {
            let data = (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for ch in 1..c {
                        if scores.data()[(i * c + ch) * hw + p] > scores.data()[(i * c + best) * hw + p] {
                            best = ch;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap::from_vec(h, w, data).expect("sized")
        })
        .collect()
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MXSGCKPT";

/// Which network a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Student,
    Teacher,
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let out = self.bytes.get(self.at..self.at + n).ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

/// Little-endian checkpoint: magic, role byte, architecture, then each named
/// tensor as (name length, name, rank, dims, raw f32 values).
pub fn save_checkpoint<T: Real>(path: &Path, params: &Params<T>, role: Role) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.push(match role {
        Role::Student => 0,
        Role::Teacher => 1,
    });
    let put = |buf: &mut Vec<u8>, v: usize| buf.extend_from_slice(&(v as u32).to_le_bytes());
    put(&mut buf, params.arch.in_channels);
    put(&mut buf, params.arch.widths.len());
    params.arch.widths.iter().for_each(|&w| put(&mut buf, w));
    put(&mut buf, params.arch.num_classes);
    put(&mut buf, params.tensors.len());
    for (name, t) in &params.tensors {
        put(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put(&mut buf, t.shape().len());
        t.shape().iter().for_each(|&d| put(&mut buf, d));
        for v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(Params<T>, Role)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 9 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let role = match bytes[8] {
        0 => Role::Student,
        1 => Role::Teacher,
        r => return Err(Error::format(path, format!("unknown role marker {r}"))),
    };
    let mut r = Reader { path, bytes: &bytes, at: 9 };
    let in_channels = r.u32()?;
    let n_widths = r.u32()?;
    if n_widths > 64 {
        return Err(Error::format(path, "implausible layer count"));
    }
    let widths = (0..n_widths).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let num_classes = r.u32()?;
    let arch = Architecture::new(in_channels, &widths, num_classes).map_err(|e| Error::format(path, e.to_string()))?;
    let expected = Params::<T>::zeros(arch.clone());
    let count = r.u32()?;
    if count != expected.tensors.len() {
        return Err(Error::format(path, format!("expected {} tensors, found {count}", expected.tensors.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want) in &expected.tensors {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if &name != want_name || dims != want.shape() {
            return Err(Error::format(path, format!("tensor {name} {dims:?} does not match architecture ({want_name} {:?})", want.shape())));
        }
        let n: usize = dims.iter().product();
        let data = r.take(4 * n)?.chunks_exact(4).map(|b| T::of(f32::from_le_bytes(b.try_into().unwrap()) as f64)).collect();
        tensors.push((name, Tensor::from_vec(&dims, data)?));
    }
    if r.at != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok((Params { arch, tensors }, role))
}
