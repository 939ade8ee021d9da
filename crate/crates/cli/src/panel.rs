use mixseg::data::{LabelMap, CLASS_NAMES, IGNORE};
use mixseg::numerics::Tensor;

pub const GUTTER: usize = 4;
pub const GUTTER_RGB: [u8; 3] = [255, 255, 255];
pub const IGNORE_RGB: [u8; 3] = [128, 128, 128];

/// Class colors, indexed by class id.
pub const PALETTE: [[u8; 3]; 5] = [[0, 0, 0], [230, 25, 75], [60, 180, 75], [0, 130, 200], [255, 225, 25]];

pub fn color(class: u8) -> [u8; 3] {
    if class == IGNORE {
        IGNORE_RGB
    } else {
        PALETTE[class as usize % PALETTE.len()]
    }
}

/// Image, truth and prediction side by side, each followed by a gutter:
/// `3 * (W + GUTTER)` wide and `H` high.
pub fn compose(image: &Tensor<f32>, truth: &LabelMap, pred: &LabelMap) -> (usize, usize, Vec<u8>) {
    let (h, w) = (truth.height(), truth.width());
    let width = 3 * (w + GUTTER);
    let mut rgb = Vec::with_capacity(width * h * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = image.data()[(c * h + y) * w + x];
                rgb.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        rgb.extend(GUTTER_RGB.repeat(GUTTER));
        for map in [truth, pred] {
            for x in 0..w {
                rgb.extend(color(map.get(y, x)));
            }
            rgb.extend(GUTTER_RGB.repeat(GUTTER));
        }
    }
    (width, h, rgb)
}

pub fn readme() -> String {
    let mut s = String::from(
        "# Panels\n\nEach `NNNN.ppm` shows one evaluation image, its ground truth and the model's prediction, \
         left to right, each followed by a 4-pixel white gutter.\n\n| class | id | RGB |\n|---|---|---|\n",
    );
    for (id, name) in CLASS_NAMES.iter().enumerate() {
        let [r, g, b] = PALETTE[id];
        s.push_str(&format!("| {name} | {id} | {r}, {g}, {b} |\n"));
    }
    s.push_str(&format!("| ignored | {IGNORE} | 128, 128, 128 |\n"));
    s
}
