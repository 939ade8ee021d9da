use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::{BenchmarkSpec, DatasetSplit, Domain, LabelMap, Sample};

const TENSOR_MAGIC: &[u8; 8] = b"MXSGTNSR";

/// Serializes a tensor as magic, rank, dims (u32 LE) and raw f32 LE values.
pub fn write_tensor(path: &Path, tensor: &Tensor<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * tensor.numel());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m.to_string());
    if bytes.len() < 12 || &bytes[..8] != TENSOR_MAGIC {
        return Err(bad("not a tensor file (bad magic)"));
    }
    let word = |at: usize| -> Result<u32> {
        bytes.get(at..at + 4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).ok_or_else(|| bad("truncated header"))
    };
    let rank = word(8)? as usize;
    if rank > 8 {
        return Err(bad("implausible tensor rank"));
    }
    let dims = (0..rank).map(|i| word(12 + 4 * i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let start = 12 + 4 * rank;
    let count: usize = dims.iter().product();
    if bytes.len() != start + 4 * count {
        return Err(bad(&format!("expected {count} values, file holds {} bytes of data", bytes.len() - start)));
    }
    let data = bytes[start..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Tensor::from_vec(&dims, data)
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes planar `[3, H, W]` RGB in `[0, 1]` as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let hw = h * w;
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..hw {
        for c in 0..3 {
            buf.push(to_byte(image.data()[c * hw + p]));
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes raw interleaved RGB bytes as binary PPM.
pub fn write_ppm_bytes(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let mut buf = format!("P6\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(rgb);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, label: &LabelMap) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n255\n", label.width(), label.height()).into_bytes();
    buf.extend_from_slice(label.data());
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Splits a binary netpbm header into `(magic, width, height, maxval, body)`.
fn parse_netpbm<'a>(path: &Path, bytes: &'a [u8]) -> Result<(&'a [u8], usize, usize, usize, &'a [u8])> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(path, "truncated netpbm header"));
        }
        fields.push(&bytes[start..i]);
    }
    let num = |f: &[u8]| -> Result<usize> {
        std::str::from_utf8(f).ok().and_then(|s| s.parse().ok()).ok_or_else(|| Error::format(path, "malformed netpbm header"))
    };
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    Ok((fields[0], w, h, max, &bytes[(i + 1).min(bytes.len())..]))
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (magic, w, h, max, body) = parse_netpbm(path, &bytes)?;
    if magic != b"P5" || max != 255 {
        return Err(Error::format(path, "expected an 8-bit binary PGM (P5)"));
    }
    if body.len() != w * h {
        return Err(Error::format(path, format!("expected {} label bytes, found {}", w * h, body.len())));
    }
    LabelMap::from_vec(h, w, body.to_vec())
}

/// Export switches for [`save_dataset`].
#[derive(Clone, Copy, Debug, Default)]
pub struct SaveOptions {
    /// Also write labels of the unlabeled target pool.
    pub with_hidden_labels: bool,
}

const POOLS: [&str; 4] = ["source", "target_labeled", "target_unlabeled", "target_eval"];

fn pool_mut<'a>(split: &'a mut DatasetSplit, name: &str) -> &'a mut Vec<Sample> {
    match name {
        "source" => &mut split.source,
        "target_labeled" => &mut split.labeled_target,
        "target_unlabeled" => &mut split.unlabeled_target,
        _ => &mut split.eval_target,
    }
}

/// Writes the dataset directory layout with a manifest.
pub fn save_dataset(split: &DatasetSplit, spec: &BenchmarkSpec, dir: &Path, options: SaveOptions) -> Result<()> {
    let mut copy = split.clone();
    for name in POOLS {
        let pool_dir = dir.join(name);
        fs::create_dir_all(&pool_dir).map_err(|e| Error::io(&pool_dir, e))?;
        for sample in pool_mut(&mut copy, name).iter() {
            let stem = pool_dir.join(format!("{:04}", sample.id));
            write_tensor(&stem.with_extension("img"), &sample.image)?;
            write_ppm(&stem.with_extension("ppm"), &sample.image)?;
            let withheld = name == "target_unlabeled" && !options.with_hidden_labels;
            if let (Some(label), false) = (&sample.label, withheld) {
                write_pgm(&stem.with_extension("pgm"), label)?;
            }
        }
    }
    let manifest = dir.join("manifest.txt");
    let mut text = spec.manifest();
    text.push_str(&format!("with_hidden_labels = {}\n", options.with_hidden_labels));
    let mut file = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    file.write_all(text.as_bytes()).map_err(|e| Error::io(&manifest, e))
}

fn list_ids(dir: &Path) -> Result<Vec<(u32, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("img") {
            continue;
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(&path, "file name is not a numeric sample id"))?;
        out.push((id, path));
    }
    out.sort_by_key(|(id, _)| *id);
    Ok(out)
}

/// Reads a dataset directory written by [`save_dataset`].
///
/// Labels are required everywhere except `target_unlabeled/`.
pub fn load_dataset(dir: &Path) -> Result<DatasetSplit> {
    let manifest = dir.join("manifest.txt");
    if !manifest.is_file() {
        return Err(Error::format(&manifest, "dataset manifest is missing"));
    }
    let mut split = DatasetSplit::default();
    for name in POOLS {
        let domain = if name == "source" { Domain::Source } else { Domain::Target };
        let pool_dir = dir.join(name);
        let mut samples = Vec::new();
        for (id, img_path) in list_ids(&pool_dir)? {
            let image = read_tensor(&img_path)?;
            if image.shape().len() != 3 || image.shape()[0] != 3 {
                return Err(Error::format(&img_path, format!("expected a [3, H, W] image, got {:?}", image.shape())));
            }
            let label_path = img_path.with_extension("pgm");
            let label = if label_path.is_file() {
                let label = read_pgm(&label_path)?;
                if (label.height(), label.width()) != (image.shape()[1], image.shape()[2]) {
                    return Err(Error::format(&label_path, "label size differs from its image"));
                }
                Some(label)
            } else if name == "target_unlabeled" {
                None
            } else {
                return Err(Error::format(&label_path, "label file is missing"));
            };
            samples.push(Sample { image, label, domain, id });
        }
        *pool_mut(&mut split, name) = samples;
    }
    Ok(split)
}
