//! Browser demo. Every view is an RGBA strip of `size x size` tiles that the
//! page draws onto a canvas.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use mixseg::data::{render_sample, Domain, DomainSpec, LabelMap, Sample, IGNORE};
use mixseg::mixing::{compose_strategy, Pseudo, Strategy};
use mixseg::numerics::{softmax_channel_values, Tensor};
use mixseg::teacher::quality;

pub const SIZE: usize = 48;

const PALETTE: [[u8; 3]; 5] = [[0, 0, 0], [230, 25, 75], [60, 180, 75], [0, 130, 200], [255, 225, 25]];

/// Tiles laid out in a grid, row-major RGBA.
#[wasm_bindgen]
pub struct Strip {
    columns: usize,
    rows: usize,
    rgba: Vec<u8>,
    quality: f64,
}

#[wasm_bindgen]
impl Strip {
    pub fn width(&self) -> usize {
        self.columns * SIZE
    }

    pub fn height(&self) -> usize {
        self.rows * SIZE
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// Quality estimate of the view, where one applies.
    pub fn quality(&self) -> f64 {
        self.quality
    }
}

type Tile = Vec<[u8; 3]>;

fn image_tile(image: &Tensor<f32>) -> Tile {
    let n = SIZE * SIZE;
    let d = image.data();
    (0..n).map(|p| [0, 1, 2].map(|c| (d[c * n + p].clamp(0.0, 1.0) * 255.0).round() as u8)).collect()
}

fn label_tile(label: &LabelMap) -> Tile {
    label.data().iter().map(|&c| if c == IGNORE { [128; 3] } else { PALETTE[c as usize % 5] }).collect()
}

fn assemble(grid: Vec<Vec<Tile>>, quality: f64) -> Strip {
    let rows = grid.len();
    let columns = grid.iter().map(Vec::len).max().unwrap_or(0);
    let width = columns * SIZE;
    let mut rgba = vec![255u8; width * rows * SIZE * 4];
    for (r, row) in grid.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            for (p, px) in tile.iter().enumerate() {
                let (y, x) = (r * SIZE + p / SIZE, c * SIZE + p % SIZE);
                rgba[(y * width + x) * 4..][..3].copy_from_slice(px);
            }
        }
    }
    Strip { columns, rows, rgba, quality }
}

fn scene(domain: Domain, seed: u64, id: u32) -> Sample {
    let spec = match domain {
        Domain::Source => DomainSpec::source(),
        Domain::Target => DomainSpec::target(),
    };
    render_sample(&spec, domain, seed, id, SIZE)
}

/// One scene rendered in both domains: images on top, labels below.
#[wasm_bindgen]
pub fn domain_pair(seed: u32, id: u32) -> Strip {
    let (s, t) = (scene(Domain::Source, seed as u64, id), scene(Domain::Target, seed as u64, id));
    assemble(
        vec![vec![image_tile(&s.image), image_tile(&t.image)], vec![label_tile(s.truth()), label_tile(t.truth())]],
        f64::NAN,
    )
}

/// Donors, recipients and mixed outputs of one mixing unit for `strategy`
/// (0, 1 or 2). The recipients' ground truth stands in for pseudo-labels.
#[wasm_bindgen]
pub fn mix_preview(seed: u32, draw: u32, strategy: u32) -> Result<Strip, JsError> {
    mix_strip(seed, draw, strategy).map_err(|e| JsError::new(&e))
}

pub fn mix_strip(seed: u32, draw: u32, strategy: u32) -> Result<Strip, String> {
    let strategy = *Strategy::ALL.get(strategy as usize).ok_or("strategy must be 0, 1 or 2")?;
    let seed = seed as u64;
    let base = draw * 4;
    let source = scene(Domain::Source, seed, base);
    let labeled = scene(Domain::Target, seed, base + 1);
    let recipients: Vec<Sample> = (0..strategy.unlabeled_per_unit() as u32).map(|k| scene(Domain::Target, seed, base + 2 + k)).collect();
    let pseudo: Vec<Pseudo<'_>> =
        recipients.iter().map(|r| Pseudo { image: &r.image, id: r.id, label: r.truth(), quality: 1.0 }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((draw as u64) << 32));
    let mixed = compose_strategy(strategy, &source, &labeled, &pseudo, &mut rng).map_err(|e| e.to_string())?;

    let mut images = vec![image_tile(&source.image), image_tile(&labeled.image)];
    let mut labels = vec![label_tile(source.truth()), label_tile(labeled.truth())];
    for r in &recipients {
        images.push(image_tile(&r.image));
        labels.push(label_tile(r.truth()));
    }
    for m in &mixed {
        images.push(image_tile(&m.image));
        labels.push(label_tile(&m.label));
    }
    Ok(assemble(vec![images, labels], f64::NAN))
}

/// Random logits with the given spread: the max-probability heat map, and
/// in the second tile the pixels counted as confident at threshold `tau`.
#[wasm_bindgen]
pub fn quality_view(seed: u32, spread: f64, tau: f64) -> Result<Strip, JsError> {
    quality_strip(seed, spread, tau).map_err(|e| JsError::new(&e))
}

pub fn quality_strip(seed: u32, spread: f64, tau: f64) -> Result<Strip, String> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err("tau must lie in (0, 1)".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let n = SIZE * SIZE;
    // smooth blobs so neighbouring pixels agree, as a trained network's would
    let centers: Vec<(f64, f64, usize, f64)> = (0..6)
        .map(|_| (rng.random_range(0.0..SIZE as f64), rng.random_range(0.0..SIZE as f64), rng.random_range(0..5), rng.random_range(0.3..1.0)))
        .collect();
    let mut logits = vec![0.0f64; 5 * n];
    for p in 0..n {
        let (y, x) = ((p / SIZE) as f64, (p % SIZE) as f64);
        for &(cy, cx, class, gain) in &centers {
            let d2 = (y - cy).powi(2) + (x - cx).powi(2);
            logits[class * n + p] += spread * gain * (-d2 / 120.0).exp();
        }
        for c in 0..5 {
            logits[c * n + p] += rng.random_range(-0.3..0.3);
        }
    }
    let probs = softmax_channel_values(&Tensor::from_vec(&[1, 5, SIZE, SIZE], logits).map_err(|e| e.to_string())?);
    let q = quality(&probs, tau)[0];
    let top: Vec<f64> = (0..n).map(|p| (0..5).map(|c| probs.data()[c * n + p]).fold(0.0, f64::max)).collect();
    let heat: Tile = top.iter().map(|&m| [(m * 255.0) as u8, (m * 160.0) as u8, ((1.0 - m) * 200.0) as u8]).collect();
    let confident: Tile = top.iter().map(|&m| if m > tau { [255, 255, 255] } else { [40, 40, 40] }).collect();
    Ok(assemble(vec![vec![heat, confident]], q))
}
