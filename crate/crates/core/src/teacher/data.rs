use crate::error::{Error, Result};
use crate::numerics::{BBox, FeatureMap};
use crate::store::dataset::{DatasetIndex, Detection, Split};
use crate::store::read_feature_map;
use crate::synth::World;

/// One image prepared for training: detector input, VFM map, ground truth and
/// the proposal set shared by teacher and student.
#[derive(Clone, Debug, PartialEq)]
pub struct SimImage {
    pub id: String,
    pub input: FeatureMap<f64>,
    pub vfm: FeatureMap<f64>,
    pub gt: Vec<Detection>,
    pub proposals: Vec<BBox<f64>>,
    /// Ground-truth class per proposal (`num_classes` = background).
    pub targets: Vec<usize>,
    pub width: f64,
    pub height: f64,
}

/// Proposal targets: class of the best-overlapping ground-truth box when its
/// IoU reaches `iou`, background otherwise.
pub fn proposal_targets(
    proposals: &[BBox<f64>],
    gt: &[Detection],
    num_classes: usize,
    iou: f64,
) -> Vec<usize> {
    proposals
        .iter()
        .map(|p| {
            let best = gt.iter().map(|g| (g.bbox.iou(p), g.class_id)).fold(
                None::<(f64, usize)>,
                |acc, (v, c)| match acc {
                    Some((bv, _)) if bv >= v => acc,
                    _ => Some((v, c)),
                },
            );
            match best {
                Some((v, c)) if v >= iou => c,
                _ => num_classes,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub num_classes: usize,
    pub images: Vec<SimImage>,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub eval: Vec<usize>,
}

impl Corpus {
    fn positions(images: &[SimImage], ids: &[String]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                images.iter().position(|im| &im.id == id).ok_or_else(|| {
                    Error::Validation(format!("split references unknown image {id}"))
                })
            })
            .collect()
    }

    pub fn from_world(world: &World) -> Result<Self> {
        let c = world.config.num_classes;
        let images: Vec<SimImage> = world
            .images
            .iter()
            .map(|im| SimImage {
                id: im.id.clone(),
                input: im.input.clone(),
                vfm: im.vfm.clone(),
                gt: im.objects.clone(),
                targets: proposal_targets(&im.proposals, &im.objects, c, 0.5),
                proposals: im.proposals.clone(),
                width: world.config.image_width_px(),
                height: world.config.image_height_px(),
            })
            .collect();
        Ok(Self {
            num_classes: c,
            labeled: Self::positions(&images, &world.splits.labeled)?,
            unlabeled: Self::positions(&images, &world.splits.unlabeled)?,
            eval: Self::positions(&images, &world.splits.eval)?,
            images,
        })
    }

    /// Loads every image of a stored dataset; each entry needs an `input_file`.
    pub fn from_index(index: &DatasetIndex) -> Result<Self> {
        let c = index.num_classes;
        let images = index
            .images
            .iter()
            .map(|e| {
                let input_path = index.input_path(e).ok_or_else(|| {
                    Error::Validation(format!("image {} has no detector input_file", e.image_id))
                })?;
                let gt = index.annotations_of(&e.image_id).to_vec();
                let proposals = index.proposals_of(&e.image_id).to_vec();
                Ok(SimImage {
                    id: e.image_id.clone(),
                    input: read_feature_map(input_path)?,
                    vfm: read_feature_map(index.feature_path(e))?,
                    targets: proposal_targets(&proposals, &gt, c, 0.5),
                    gt,
                    proposals,
                    width: e.width as f64,
                    height: e.height as f64,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            num_classes: c,
            labeled: Self::positions(&images, index.splits.ids(Split::Labeled))?,
            unlabeled: Self::positions(&images, index.splits.ids(Split::Unlabeled))?,
            eval: Self::positions(&images, index.splits.ids(Split::Eval))?,
            images,
        })
    }

    /// Every image treated as labeled (source-domain pretraining).
    pub fn all_labeled(mut self) -> Self {
        self.labeled = (0..self.images.len()).collect();
        self.unlabeled.clear();
        self
    }

    pub fn input_channels(&self) -> usize {
        self.images.first().map_or(0, |im| im.input.channels())
    }

    pub fn vfm_channels(&self) -> usize {
        self.images.first().map_or(0, |im| im.vfm.channels())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_use_best_overlap() {
        let gt = vec![
            Detection::annotation(BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(), 1),
            Detection::annotation(BBox::new(20.0, 0.0, 30.0, 10.0).unwrap(), 0),
        ];
        let props = vec![
            BBox::new(1.0, 0.0, 10.0, 10.0).unwrap(),
            BBox::new(21.0, 1.0, 30.0, 10.0).unwrap(),
            BBox::new(40.0, 40.0, 50.0, 50.0).unwrap(),
            BBox::new(0.0, 0.0, 30.0, 10.0).unwrap(),
        ];
        assert_eq!(proposal_targets(&props, &gt, 2, 0.5), vec![1, 0, 2, 2]);
    }
}
