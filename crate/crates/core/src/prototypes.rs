//! Reference prototypes: per-class K-means centroids of VFM instance features
//! pooled from labeled boxes, plus a background class pooled from mirrored boxes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{
    roi_align_with, squared_distance, streams, BBox, FeatureMap, Rng, RoiAlignConfig,
};
use crate::scalar::Scalar;
use crate::store::dataset::{DatasetIndex, Detection, Split};
use crate::store::read_feature_map;

pub const PROTOTYPE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassPrototypes {
    pub class_id: usize,
    /// False when no labeled instance of the class was found; centroids are then empty.
    pub present: bool,
    pub centroids: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrototypeMeta {
    /// Dataset identifier: the index's content hash, or a world id.
    pub source: String,
    pub seed: u64,
    pub bins: usize,
    pub bg_iou: f64,
    pub absent_classes: Vec<usize>,
    /// Classes with fewer distinct instances than components.
    pub duplicate_centroids: Vec<usize>,
    pub skipped_boxes: usize,
    pub instances_per_class: Vec<usize>,
}

/// `P_ref`: `C` foreground classes followed by background (`class_id == C`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrototypeSet {
    pub schema_version: u32,
    pub channels: usize,
    pub components: usize,
    pub num_classes: usize,
    pub classes: Vec<ClassPrototypes>,
    pub meta: PrototypeMeta,
}

impl PrototypeSet {
    pub fn background_id(&self) -> usize {
        self.num_classes
    }

    pub fn class(&self, class_id: usize) -> Option<&ClassPrototypes> {
        self.classes.get(class_id)
    }

    pub fn background(&self) -> &ClassPrototypes {
        &self.classes[self.num_classes]
    }

    pub fn is_present(&self, class_id: usize) -> bool {
        self.classes.get(class_id).is_some_and(|c| c.present)
    }

    /// `(class_id, component, centroid)` over present classes, class-major.
    pub fn iter_centroids(&self) -> impl Iterator<Item = (usize, usize, &[f64])> {
        self.classes.iter().filter(|c| c.present).flat_map(|c| {
            c.centroids
                .iter()
                .enumerate()
                .map(move |(k, v)| (c.class_id, k, v.as_slice()))
        })
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Validation(m));
        if self.schema_version != PROTOTYPE_SCHEMA_VERSION {
            return err(format!(
                "unsupported prototype schema_version {}",
                self.schema_version
            ));
        }
        if self.channels == 0 || self.components == 0 || self.num_classes == 0 {
            return err("channels, components and num_classes must be positive".into());
        }
        if self.classes.len() != self.num_classes + 1 {
            return err(format!(
                "expected {} class entries (including background), found {}",
                self.num_classes + 1,
                self.classes.len()
            ));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.class_id != i {
                return err(format!("class entry {i} has class_id {}", c.class_id));
            }
            if !c.present {
                if !c.centroids.is_empty() || !c.counts.is_empty() {
                    return err(format!("absent class {i} carries centroids"));
                }
                continue;
            }
            if c.centroids.len() != self.components || c.counts.len() != self.components {
                return err(format!(
                    "class {i} must have {} centroids and counts",
                    self.components
                ));
            }
            for v in &c.centroids {
                if v.len() != self.channels {
                    return err(format!(
                        "class {i} centroid has {} channels, expected {}",
                        v.len(),
                        self.channels
                    ));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("class {i} centroid")));
                }
            }
        }
        if !self.background().present {
            return err("background prototypes are required".into());
        }
        Ok(())
    }
}

/// Pooled instance features, indexed by class id (`num_classes + 1` slots, background last).
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceFeatureBag {
    pub channels: usize,
    pub classes: Vec<Vec<Vec<f64>>>,
    pub skipped: usize,
}

impl InstanceFeatureBag {
    pub fn new(num_classes: usize, channels: usize) -> Self {
        Self {
            channels,
            classes: vec![Vec::new(); num_classes + 1],
            skipped: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len() - 1
    }

    /// ROI-aligns `bbox` into `class`; degenerate or off-map boxes are counted and skipped.
    pub fn pool(
        &mut self,
        map: &FeatureMap<f64>,
        bbox: &BBox<f64>,
        class: usize,
        roi: RoiAlignConfig,
    ) -> Result<()> {
        if map.channels() != self.channels {
            return Err(Error::Domain(format!(
                "feature map has {} channels, bag expects {}",
                map.channels(),
                self.channels
            )));
        }
        match roi_align_with(map, bbox, roi) {
            Ok(v) => {
                self.classes[class].push(v);
                Ok(())
            }
            Err(Error::DegenerateBox(msg)) | Err(Error::Domain(msg)) => {
                log::warn!("skipping box: {msg}");
                self.skipped += 1;
                Ok(())
            }
            Err(e) => Err(e),
        }
    }
}

/// One labeled image as seen by extraction.
#[derive(Clone, Copy, Debug)]
pub struct LabeledImage<'a> {
    pub map: &'a FeatureMap<f64>,
    pub annotations: &'a [Detection],
    pub width: f64,
    pub height: f64,
}

/// Map, annotations, image width and height.
type LoadedImage<'a> = (FeatureMap<f64>, &'a [Detection], f64, f64);

fn labeled_images(index: &DatasetIndex) -> Result<Vec<LoadedImage<'_>>> {
    let entries = index.split_images(Split::Labeled);
    if entries
        .iter()
        .all(|e| index.annotations_of(&e.image_id).is_empty())
    {
        return Err(Error::Validation(
            "labeled split has no annotated image".into(),
        ));
    }
    entries
        .into_iter()
        .map(|e| {
            let map = read_feature_map::<f64>(index.feature_path(e))?;
            Ok((
                map,
                index.annotations_of(&e.image_id),
                e.width as f64,
                e.height as f64,
            ))
        })
        .collect()
}

/// Pools every ground-truth box of the labeled split from its stored VFM map.
pub fn pool_labeled_instances(index: &DatasetIndex, bins: usize) -> Result<InstanceFeatureBag> {
    let loaded = labeled_images(index)?;
    let channels = loaded[0].0.channels();
    let mut bag = InstanceFeatureBag::new(index.num_classes, channels);
    let roi = RoiAlignConfig::with_bins(bins);
    for (map, anns, _, _) in &loaded {
        for a in anns.iter() {
            bag.pool(map, &a.bbox, a.class_id, roi)?;
        }
    }
    Ok(bag)
}

/// Mirrors of each ground-truth box about the image centerlines (horizontal,
/// vertical and both), clamped to the image, minus any candidate with
/// `IoU >= iou_max` against a ground-truth box. Exact duplicates are dropped.
pub fn synthesize_background_boxes<T: Scalar>(
    gt: &[BBox<T>],
    width: T,
    height: T,
    iou_max: T,
) -> Vec<BBox<T>> {
    let mut out: Vec<BBox<T>> = Vec::new();
    for b in gt {
        let candidates = [
            (width - b.x2, b.y1, width - b.x1, b.y2),
            (b.x1, height - b.y2, b.x2, height - b.y1),
            (width - b.x2, height - b.y2, width - b.x1, height - b.y1),
        ];
        for (x1, y1, x2, y2) in candidates {
            let Some(c) = BBox::new(x1, y1, x2, y2)
                .ok()
                .and_then(|c| c.clamp_to(width, height))
            else {
                continue;
            };
            if gt.iter().any(|g| g.iou(&c) >= iou_max) || out.contains(&c) {
                continue;
            }
            out.push(c);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KMeansConfig {
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest objective wins.
    pub n_init: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-10,
            n_init: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult<T> {
    pub centroids: Vec<Vec<T>>,
    pub labels: Vec<usize>,
    pub counts: Vec<usize>,
    /// Sum of squared distances to assigned centroids.
    pub objective: T,
    /// Objective after every Lloyd iteration, then after every transfer pass,
    /// of the winning restart.
    pub trace: Vec<T>,
    pub iterations: usize,
    /// Fewer distinct centroids than `K`.
    pub duplicates: bool,
}

fn nearest<T: Scalar>(x: &[T], centroids: &[Vec<T>]) -> (usize, T) {
    let mut best = (0, squared_distance(x, &centroids[0]));
    for (k, c) in centroids.iter().enumerate().skip(1) {
        let d = squared_distance(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn objective<T: Scalar>(xs: &[Vec<T>], centroids: &[Vec<T>], labels: &[usize]) -> T {
    xs.iter().zip(labels).fold(T::zero(), |acc, (x, &l)| {
        acc + squared_distance(x, &centroids[l])
    })
}

fn kmeans_pp<T: Scalar>(xs: &[Vec<T>], k: usize, rng: &mut Rng) -> Vec<Vec<T>> {
    let mut centroids = vec![xs[rng.below(xs.len())].clone()];
    let mut d2: Vec<f64> = xs
        .iter()
        .map(|x| squared_distance(x, &centroids[0]).to_f64_lossy())
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.uniform() * total;
            let mut idx = xs.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if *w > 0.0 && r < *w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            while d2[idx] == 0.0 {
                idx -= 1;
            }
            idx
        } else {
            rng.below(xs.len())
        };
        centroids.push(xs[pick].clone());
        for (d, x) in d2.iter_mut().zip(xs) {
            *d = d.min(squared_distance(x, &centroids[centroids.len() - 1]).to_f64_lossy());
        }
    }
    centroids
}

/// Running means, so a cluster of identical points reproduces the point exactly.
fn recompute_means<T: Scalar>(
    xs: &[Vec<T>],
    labels: &[usize],
    centroids: &mut [Vec<T>],
) -> Vec<usize> {
    let dim = xs[0].len();
    let mut means = vec![vec![T::zero(); dim]; centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (x, &l) in xs.iter().zip(labels) {
        counts[l] += 1;
        let n = T::from_usize_lossy(counts[l]);
        for (m, v) in means[l].iter_mut().zip(x) {
            *m += (*v - *m) / n;
        }
    }
    for ((c, m), n) in centroids.iter_mut().zip(means).zip(&counts) {
        if *n > 0 {
            *c = m;
        }
    }
    counts
}

fn lloyd<T: Scalar>(
    xs: &[Vec<T>],
    mut centroids: Vec<Vec<T>>,
    cfg: &KMeansConfig,
) -> KMeansResult<T> {
    let k = centroids.len();
    let mut labels = vec![0usize; xs.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut counts = vec![0; k];
    for it in 0..cfg.max_iter.max(1) {
        iterations = it + 1;
        let mut changed = it == 0;
        for (x, l) in xs.iter().zip(labels.iter_mut()) {
            let (best, _) = nearest(x, &centroids);
            changed |= best != *l;
            *l = best;
        }
        let previous = centroids.clone();
        counts = recompute_means(xs, &labels, &mut centroids);
        // empty clusters: reseed at the point farthest from its centroid,
        // taken from a cluster that keeps at least one other member
        while let Some(empty) = counts.iter().position(|c| *c == 0) {
            let donor = xs
                .iter()
                .enumerate()
                .filter(|(i, _)| counts[labels[*i]] >= 2)
                .map(|(i, x)| (i, squared_distance(x, &centroids[labels[i]])))
                .fold(None::<(usize, T)>, |best, (i, d)| match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                });
            let Some((i, _)) = donor else { break };
            labels[i] = empty;
            centroids[empty] = xs[i].clone();
            counts = recompute_means(xs, &labels, &mut centroids);
            changed = true;
        }
        let current = objective(xs, &centroids, &labels);
        if let Some(&last) = trace.last() {
            let slack = T::lit(1e-9) * (T::one() + last);
            assert!(
                current <= last + slack,
                "k-means objective increased: {last:?} -> {current:?}"
            );
        }
        trace.push(current);
        let moved = previous
            .iter()
            .zip(&centroids)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(T::zero(), |m, v| m.max(v));
        if !changed || moved < T::lit(cfg.tol) {
            break;
        }
    }
    refine_transfers(
        xs,
        &mut labels,
        &mut centroids,
        &mut counts,
        &mut trace,
        cfg.max_iter,
    );
    let objective = *trace.last().expect("at least one iteration");
    let mut distinct: Vec<&Vec<T>> = Vec::new();
    for c in &centroids {
        if !distinct.contains(&c) {
            distinct.push(c);
        }
    }
    KMeansResult {
        duplicates: distinct.len() < k,
        centroids,
        labels,
        counts,
        objective,
        trace,
        iterations,
    }
}

/// Single-point transfers after Lloyd has settled: move a point to another
/// cluster whenever `n_b/(n_b+1)·|x−c_b|² < n_a/(n_a−1)·|x−c_a|²`, which lowers
/// the objective by the difference. Escapes Lloyd fixed points where one
/// reassignment plus the induced mean shift pays off. One trace entry per pass.
fn refine_transfers<T: Scalar>(
    xs: &[Vec<T>],
    labels: &mut [usize],
    centroids: &mut [Vec<T>],
    counts: &mut Vec<usize>,
    trace: &mut Vec<T>,
    max_passes: usize,
) {
    for _ in 0..max_passes {
        let mut moved = false;
        for (i, x) in xs.iter().enumerate() {
            let a = labels[i];
            if counts[a] < 2 {
                continue;
            }
            let na = T::from_usize_lossy(counts[a]);
            let out = na / (na - T::one()) * squared_distance(x, &centroids[a]);
            let mut best: Option<(usize, T)> = None;
            for (b, c) in centroids.iter().enumerate() {
                if b == a {
                    continue;
                }
                let nb = T::from_usize_lossy(counts[b]);
                let gain = out - nb / (nb + T::one()) * squared_distance(x, c);
                if gain > T::lit(1e-12) * (T::one() + out) && best.is_none_or(|(_, g)| gain > g) {
                    best = Some((b, gain));
                }
            }
            if let Some((b, _)) = best {
                labels[i] = b;
                *counts = recompute_means(xs, labels, centroids);
                moved = true;
            }
        }
        if !moved {
            break;
        }
        let current = objective(xs, centroids, labels);
        let last = *trace.last().expect("Lloyd ran");
        assert!(
            current <= last + T::lit(1e-9) * (T::one() + last),
            "transfer pass increased the objective: {last:?} -> {current:?}"
        );
        trace.push(current);
    }
}

/// K-means with k-means++ seeding and Lloyd iterations, best of `cfg.n_init` restarts.
pub fn kmeans<T: Scalar>(
    xs: &[Vec<T>],
    k: usize,
    rng: &mut Rng,
    cfg: &KMeansConfig,
) -> Result<KMeansResult<T>> {
    if xs.is_empty() {
        return Err(Error::Domain("k-means needs at least one vector".into()));
    }
    if k == 0 {
        return Err(Error::Domain("k-means needs K >= 1".into()));
    }
    let dim = xs[0].len();
    if dim == 0 || xs.iter().any(|x| x.len() != dim) {
        return Err(Error::Domain(
            "k-means vectors must share a positive dimension".into(),
        ));
    }
    if xs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input".into()));
    }
    let mut best: Option<KMeansResult<T>> = None;
    for _ in 0..cfg.n_init.max(1) {
        let init = kmeans_pp(xs, k, rng);
        let run = lloyd(xs, init, cfg);
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("n_init >= 1"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrototypeConfig {
    pub components: usize,
    pub bins: usize,
    pub bg_iou: f64,
    pub kmeans: KMeansConfig,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        Self {
            components: 4,
            bins: 7,
            bg_iou: 0.3,
            kmeans: KMeansConfig::default(),
        }
    }
}

/// Pools foreground and mirrored background instances of `images` into a bag.
pub fn pool_instances(
    images: &[LabeledImage<'_>],
    num_classes: usize,
    cfg: &PrototypeConfig,
) -> Result<InstanceFeatureBag> {
    let first = images
        .first()
        .ok_or_else(|| Error::Validation("no labeled images".into()))?;
    let mut bag = InstanceFeatureBag::new(num_classes, first.map.channels());
    let roi = RoiAlignConfig::with_bins(cfg.bins);
    for im in images {
        for a in im.annotations {
            if a.class_id >= num_classes {
                return Err(Error::Validation(format!(
                    "annotation class {} out of range",
                    a.class_id
                )));
            }
            bag.pool(im.map, &a.bbox, a.class_id, roi)?;
        }
        let gt: Vec<BBox<f64>> = im.annotations.iter().map(|a| a.bbox).collect();
        for b in synthesize_background_boxes(&gt, im.width, im.height, cfg.bg_iou) {
            bag.pool(im.map, &b, num_classes, roi)?;
        }
    }
    Ok(bag)
}

/// Clusters every class of `bag` into `cfg.components` centroids.
pub fn prototypes_from_bag(
    bag: &InstanceFeatureBag,
    cfg: &PrototypeConfig,
    seed: u64,
    source: &str,
) -> Result<PrototypeSet> {
    if cfg.components == 0 {
        return Err(Error::Validation("components must be >= 1".into()));
    }
    let num_classes = bag.num_classes();
    let base = Rng::new(seed, streams::KMEANS);
    let mut meta = PrototypeMeta {
        source: source.to_string(),
        seed,
        bins: cfg.bins,
        bg_iou: cfg.bg_iou,
        skipped_boxes: bag.skipped,
        instances_per_class: bag.classes.iter().map(Vec::len).collect(),
        ..PrototypeMeta::default()
    };
    let mut classes = Vec::with_capacity(num_classes + 1);
    for (c, xs) in bag.classes.iter().enumerate() {
        if xs.is_empty() {
            if c == num_classes {
                return Err(Error::Validation(
                    "no background instances survived the IoU filter".into(),
                ));
            }
            log::warn!("class {c} has no labeled instances; its prototypes are absent");
            meta.absent_classes.push(c);
            classes.push(ClassPrototypes {
                class_id: c,
                present: false,
                centroids: Vec::new(),
                counts: Vec::new(),
            });
            continue;
        }
        let run = kmeans(xs, cfg.components, &mut base.fork(c as u64), &cfg.kmeans)?;
        if run.duplicates {
            meta.duplicate_centroids.push(c);
        }
        classes.push(ClassPrototypes {
            class_id: c,
            present: true,
            centroids: run.centroids,
            counts: run.counts,
        });
    }
    let set = PrototypeSet {
        schema_version: PROTOTYPE_SCHEMA_VERSION,
        channels: bag.channels,
        components: cfg.components,
        num_classes,
        classes,
        meta,
    };
    set.validate()?;
    Ok(set)
}

/// In-memory extraction over already-loaded labeled images.
pub fn extract_prototypes_from(
    images: &[LabeledImage<'_>],
    num_classes: usize,
    cfg: &PrototypeConfig,
    seed: u64,
    source: &str,
) -> Result<PrototypeSet> {
    let bag = pool_instances(images, num_classes, cfg)?;
    prototypes_from_bag(&bag, cfg, seed, source)
}

/// Extraction over the labeled split of a stored dataset.
pub fn extract_prototypes(
    index: &DatasetIndex,
    cfg: &PrototypeConfig,
    seed: u64,
) -> Result<PrototypeSet> {
    let loaded = labeled_images(index)?;
    let images: Vec<LabeledImage<'_>> = loaded
        .iter()
        .map(|(map, anns, w, h)| LabeledImage {
            map,
            annotations: anns,
            width: *w,
            height: *h,
        })
        .collect();
    // content hash rather than a path, so identical datasets give identical files
    let manifest =
        serde_json::to_vec(index).map_err(|e| Error::json(index.root.join("index.json"), e))?;
    let source = format!(
        "index.json sha256:{}",
        hex::encode(Sha256::digest(&manifest))
    );
    extract_prototypes_from(&images, index.num_classes, cfg, seed, &source)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox<f64> {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn identical_vectors_collapse() {
        let xs = vec![vec![1.5, -2.0]; 6];
        let r = kmeans(
            &xs,
            3,
            &mut Rng::new(1, streams::KMEANS),
            &KMeansConfig::default(),
        )
        .unwrap();
        assert_eq!(r.objective, 0.0);
        assert!(r.duplicates);
        assert!(r.centroids.iter().all(|c| c == &xs[0]));
        assert_eq!(r.counts.iter().sum::<usize>(), 6);
    }

    #[test]
    fn separated_pairs_recovered() {
        let xs = vec![
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![10.0, 10.0],
            vec![10.0, 10.0],
        ];
        let r = kmeans(
            &xs,
            2,
            &mut Rng::new(3, streams::KMEANS),
            &KMeansConfig::default(),
        )
        .unwrap();
        assert_eq!(r.objective, 0.0);
        let mut cs = r.centroids.clone();
        cs.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(cs, vec![vec![0.0, 0.0], vec![10.0, 10.0]]);
        assert!(!r.duplicates);
    }

    #[test]
    fn kmeans_rejects_bad_input() {
        let cfg = KMeansConfig::default();
        assert!(kmeans::<f64>(&[], 2, &mut Rng::new(1, 4), &cfg).is_err());
        assert!(kmeans(&[vec![1.0]], 0, &mut Rng::new(1, 4), &cfg).is_err());
        assert!(kmeans(&[vec![1.0], vec![1.0, 2.0]], 1, &mut Rng::new(1, 4), &cfg).is_err());
    }

    #[test]
    fn centroids_are_member_means() {
        let mut rng = Rng::new(11, 0);
        let xs: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..3).map(|_| rng.normal()).collect())
            .collect();
        let r = kmeans(
            &xs,
            4,
            &mut Rng::new(2, streams::KMEANS),
            &KMeansConfig::default(),
        )
        .unwrap();
        for k in 0..4 {
            let members: Vec<&Vec<f64>> = xs
                .iter()
                .zip(&r.labels)
                .filter(|(_, l)| **l == k)
                .map(|(x, _)| x)
                .collect();
            assert_eq!(members.len(), r.counts[k]);
            for d in 0..3 {
                let mean = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
                assert!((mean - r.centroids[k][d]).abs() < 1e-9);
            }
        }
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }

    #[test]
    fn centered_box_has_no_background_mirror() {
        let gt = [b(40.0, 40.0, 60.0, 60.0)];
        assert!(synthesize_background_boxes(&gt, 100.0, 100.0, 0.3).is_empty());
    }

    #[test]
    fn corner_box_yields_three_disjoint_mirrors() {
        let gt = [b(0.0, 0.0, 10.0, 10.0)];
        let out = synthesize_background_boxes(&gt, 100.0, 100.0, 0.3);
        assert_eq!(
            out,
            vec![
                b(90.0, 0.0, 100.0, 10.0),
                b(0.0, 90.0, 10.0, 100.0),
                b(90.0, 90.0, 100.0, 100.0)
            ]
        );
        for i in 0..3 {
            assert_eq!(out[i].iou(&gt[0]), 0.0);
            for j in i + 1..3 {
                assert_eq!(out[i].iou(&out[j]), 0.0);
            }
        }
    }

    #[test]
    fn mirror_overlapping_other_gt_is_removed() {
        let gt = [b(0.0, 0.0, 10.0, 10.0), b(90.0, 0.0, 100.0, 10.0)];
        let out = synthesize_background_boxes(&gt, 100.0, 100.0, 0.3);
        assert!(out.iter().all(|c| gt.iter().all(|g| g.iou(c) < 0.3)));
        assert_eq!(out.len(), 2);
    }

    fn tiny_set() -> PrototypeSet {
        PrototypeSet {
            schema_version: PROTOTYPE_SCHEMA_VERSION,
            channels: 2,
            components: 1,
            num_classes: 1,
            classes: vec![
                ClassPrototypes {
                    class_id: 0,
                    present: true,
                    centroids: vec![vec![1.0, 0.0]],
                    counts: vec![3],
                },
                ClassPrototypes {
                    class_id: 1,
                    present: true,
                    centroids: vec![vec![0.0, 1.0]],
                    counts: vec![2],
                },
            ],
            meta: PrototypeMeta::default(),
        }
    }

    #[test]
    fn validate_catches_shape_errors() {
        assert!(tiny_set().validate().is_ok());
        let mut s = tiny_set();
        s.classes[1].present = false;
        s.classes[1].centroids.clear();
        s.classes[1].counts.clear();
        assert!(s.validate().is_err());
        let mut s = tiny_set();
        s.classes[0].centroids[0].push(0.0);
        assert!(s.validate().is_err());
        let mut s = tiny_set();
        s.classes[0].centroids[0][0] = f64::NAN;
        assert!(matches!(s.validate(), Err(Error::NonFinite(_))));
    }

    #[test]
    fn constant_map_pools_identical_vectors() {
        let map = FeatureMap::new(8, 8, 3, 4.0, vec![0.7; 192]).unwrap();
        let anns = vec![
            Detection::annotation(b(0.0, 0.0, 8.0, 8.0), 0),
            Detection::annotation(b(8.0, 12.0, 20.0, 28.0), 0),
            Detection::annotation(b(2.0, 20.0, 10.0, 30.0), 0),
        ];
        let im = LabeledImage {
            map: &map,
            annotations: &anns,
            width: 32.0,
            height: 32.0,
        };
        let bag = pool_instances(&[im], 2, &PrototypeConfig::default()).unwrap();
        assert_eq!(bag.classes[0].len(), 3);
        assert!(bag.classes[0]
            .iter()
            .all(|v| v.iter().all(|x| (x - 0.7).abs() < 1e-12)));
        let set = prototypes_from_bag(&bag, &PrototypeConfig::default(), 1, "test").unwrap();
        assert_eq!(set.meta.absent_classes, vec![1]);
        assert!(!set.is_present(1));
        assert_eq!(set.classes[0].counts.iter().sum::<usize>(), 3);
        assert!(set.meta.duplicate_centroids.contains(&0));
    }
}
