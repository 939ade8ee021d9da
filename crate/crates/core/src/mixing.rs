//! ClassMix masks and the inter-/intra-domain mixing operators.
//!
//! A mask selects every pixel of a random half of the donor's classes; the
//! mixed image takes donor pixels under the mask and recipient pixels
//! elsewhere, and the mixed label does the same with the donor's ground
//! truth and the recipient's pseudo-label.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::data::{write_pgm, write_ppm, LabelMap, Sample};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Binary per-pixel paste mask, row-major `[H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl ClassMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        ClassMask { height, width, data: vec![false; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        ClassMask { height, width, data: vec![true; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    /// Mask as a 0/255 label map for visual inspection.
    pub fn to_label_map(&self) -> LabelMap {
        LabelMap::from_vec(self.height, self.width, self.data.iter().map(|&m| if m { 255 } else { 0 }).collect()).expect("sized")
    }
}

/// Random half (rounded up) of the classes present in `label`.
pub fn select_classes<R: Rng + ?Sized>(label: &LabelMap, rng: &mut R) -> Result<Vec<u8>> {
    let present = label.classes_present();
    if present.is_empty() {
        return Err(Error::Config("cannot select classes from a label map without valid pixels".into()));
    }
    if present.len() == 1 {
        log::debug!("donor label holds a single class; the whole image will be pasted");
    }
    let take = present.len().div_ceil(2);
    let mut chosen: Vec<u8> = present.choose_multiple(rng, take).copied().collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Mask of pixels whose label is one of `classes`.
pub fn build_mask(label: &LabelMap, classes: &[u8]) -> ClassMask {
    let mut member = [false; 256];
    classes.iter().for_each(|&c| member[c as usize] = true);
    ClassMask { height: label.height(), width: label.width(), data: label.data().iter().map(|&v| member[v as usize]).collect() }
}

/// Which objective a mixed sample feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    /// Source donor onto an unlabeled target image.
    Inter,
    /// Labeled target donor onto an unlabeled target image.
    Intra,
    /// Both donors pasted onto one unlabeled target image.
    Combined,
}

/// A mixed image with its mixed label and the recipient's quality weight.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub image: Tensor<f32>,
    pub label: LabelMap,
    pub quality: f64,
    pub mask: ClassMask,
    pub stream: Stream,
    pub recipient_id: u32,
}

/// `donor` where the mask is set, `recipient` elsewhere, for image and label.
pub fn mix(
    donor_img: &Tensor<f32>,
    donor_lbl: &LabelMap,
    recipient_img: &Tensor<f32>,
    recipient_lbl: &LabelMap,
    mask: &ClassMask,
) -> Result<(Tensor<f32>, LabelMap)> {
    let dims = |l: &LabelMap| (l.height(), l.width());
    let hw = (mask.height, mask.width);
    let img_hw = |t: &Tensor<f32>| (t.shape().len() == 3).then(|| (t.shape()[1], t.shape()[2]));
    if dims(donor_lbl) != hw
        || dims(recipient_lbl) != hw
        || img_hw(donor_img) != Some(hw)
        || donor_img.shape() != recipient_img.shape()
    {
        return Err(Error::Shape(format!(
            "mix: donor {:?}/{:?}, recipient {:?}/{:?}, mask {:?}",
            donor_img.shape(),
            dims(donor_lbl),
            recipient_img.shape(),
            dims(recipient_lbl),
            hw
        )));
    }
    let n = hw.0 * hw.1;
    let channels = donor_img.shape()[0];
    let mut image = recipient_img.clone();
    let mut label = recipient_lbl.clone();
    for (p, _) in mask.data.iter().enumerate().filter(|(_, &m)| m) {
        for c in 0..channels {
            image.data_mut()[c * n + p] = donor_img.data()[c * n + p];
        }
        label.data_mut()[p] = donor_lbl.data()[p];
    }
    Ok((image, label))
}

/// How inter- and intra-domain mixing share unlabeled images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Both mixes onto the same unlabeled image, two loss streams.
    #[default]
    OneXuTwoStreams,
    /// Inter-mix onto one unlabeled image, intra-mix onto another.
    TwoXuTwoStreams,
    /// Both donors pasted onto one unlabeled image, one loss stream.
    OneXuOneStream,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::OneXuTwoStreams, Strategy::TwoXuTwoStreams, Strategy::OneXuOneStream];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::OneXuTwoStreams => "one_xu_two_streams",
            Strategy::TwoXuTwoStreams => "two_xu_two_streams",
            Strategy::OneXuOneStream => "one_xu_one_stream",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Strategy::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Unlabeled images consumed per mixing unit.
    pub fn unlabeled_per_unit(self) -> usize {
        match self {
            Strategy::TwoXuTwoStreams => 2,
            _ => 1,
        }
    }
}

/// An unlabeled target image with the teacher's pseudo-label and quality.
#[derive(Clone, Copy, Debug)]
pub struct Pseudo<'a> {
    pub image: &'a Tensor<f32>,
    pub id: u32,
    pub label: &'a LabelMap,
    pub quality: f64,
}

/// Builds the mixed samples of one mixing unit.
///
/// Class selection always draws the source half first and the labeled-target
/// half second, so the random stream is the same for every strategy.
pub fn compose_strategy<R: Rng + ?Sized>(
    strategy: Strategy,
    source: &Sample,
    labeled_target: &Sample,
    unlabeled: &[Pseudo<'_>],
    rng: &mut R,
) -> Result<Vec<MixedBatch>> {
    let first = unlabeled.first().ok_or_else(|| Error::Config("mixing needs an unlabeled image".into()))?;
    let m1 = build_mask(source.truth(), &select_classes(source.truth(), rng)?);
    let m2 = build_mask(labeled_target.truth(), &select_classes(labeled_target.truth(), rng)?);

    let paste = |donor: &Sample, recipient: &Pseudo<'_>, mask: ClassMask, stream: Stream| -> Result<MixedBatch> {
        let (image, label) = mix(&donor.image, donor.truth(), recipient.image, recipient.label, &mask)?;
        Ok(MixedBatch { image, label, quality: recipient.quality, mask, stream, recipient_id: recipient.id })
    };

    match strategy {
        Strategy::OneXuTwoStreams => Ok(vec![
            paste(source, first, m1, Stream::Inter)?,
            paste(labeled_target, first, m2, Stream::Intra)?,
        ]),
        Strategy::TwoXuTwoStreams => {
            let second = unlabeled
                .get(1)
                .ok_or_else(|| Error::Config("two_xu_two_streams needs two unlabeled images per unit".into()))?;
            Ok(vec![paste(source, first, m1, Stream::Inter)?, paste(labeled_target, second, m2, Stream::Intra)?])
        }
        Strategy::OneXuOneStream => {
            // M2 overwrites M1 where both are set
            let (inter_img, inter_lbl) = mix(&source.image, source.truth(), first.image, first.label, &m1)?;
            let (image, label) = mix(&labeled_target.image, labeled_target.truth(), &inter_img, &inter_lbl, &m2)?;
            let union = ClassMask {
                height: m1.height,
                width: m1.width,
                data: m1.data.iter().zip(&m2.data).map(|(&a, &b)| a || b).collect(),
            };
            Ok(vec![MixedBatch { image, label, quality: first.quality, mask: union, stream: Stream::Combined, recipient_id: first.id }])
        }
    }
}

/// Writes `<prefix>.ppm`, `<prefix>.pgm` and `<prefix>.mask.pgm`.
pub fn dump_mixed(dir: &Path, prefix: &str, batch: &MixedBatch) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_ppm(&dir.join(format!("{prefix}.ppm")), &batch.image)?;
    write_pgm(&dir.join(format!("{prefix}.pgm")), &batch.label)?;
    write_pgm(&dir.join(format!("{prefix}.mask.pgm")), &batch.mask.to_label_map())
}
