//! Deterministic synthetic feature worlds.
//!
//! Every image is a base map `X` of background texture with object boxes
//! overwritten by noisy class signatures. The stored "VFM" map is `G·X` for one
//! fixed seeded linear map `G` shared across the world; the detector input is
//! the domain-shifted `R·X + n`, with `R` a channel-mixing rotation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, dot, norm, streams, BBox, FeatureMap, Rng};
use crate::store::dataset::{DatasetIndex, Detection, ImageEntry, Splits, SCHEMA_VERSION};
use crate::store::{write_dataset, write_feature_map};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    /// Givens angle (radians) applied to random channel pairs.
    pub rotation: f64,
    pub noise_sigma: f64,
}

impl DomainShift {
    pub const NONE: DomainShift = DomainShift {
        rotation: 0.0,
        noise_sigma: 0.0,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalConfig {
    /// Corner jitter, as a fraction of box width/height.
    pub jitter_sigma: f64,
    pub negatives_per_image: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalConfig {
    pub object_amplitude: f64,
    pub object_noise: f64,
    pub background_level: f64,
    pub background_noise: f64,
    /// Sub-modes per class (multimodal class appearance).
    pub intra_class_modes: usize,
    pub intra_class_spread: f64,
}

impl Default for SignalConfig {
    fn default() -> Self {
        Self {
            object_amplitude: 1.0,
            object_noise: 0.35,
            background_level: 0.5,
            background_noise: 0.35,
            intra_class_modes: 2,
            intra_class_spread: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub num_images: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    /// Pixels per cell.
    pub stride: f64,
    pub base_channels: usize,
    pub vfm_channels: usize,
    pub num_classes: usize,
    /// Inclusive `[min, max]` objects per image.
    pub objects_per_image: [usize; 2],
    /// Inclusive `[min, max]` object side length in cells.
    pub box_size: [usize; 2],
    /// Minimum squared distance between unit class signatures; pairwise cosine is
    /// at most `1 - margin / 2` (2 = orthogonal).
    pub separation_margin: f64,
    pub domain_shift: DomainShift,
    pub labeled_fraction: f64,
    pub eval_fraction: f64,
    pub proposals: ProposalConfig,
    pub signal: SignalConfig,
    /// Seeds world structure (signatures, `G`, `R`).
    pub seed: u64,
    /// Seeds image content and splits; defaults to `seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_seed: Option<u64>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_images: 200,
            grid_height: 16,
            grid_width: 16,
            stride: 8.0,
            base_channels: 12,
            vfm_channels: 24,
            num_classes: 3,
            objects_per_image: [2, 4],
            box_size: [3, 6],
            separation_margin: 0.6,
            domain_shift: DomainShift {
                rotation: 0.7,
                noise_sigma: 0.3,
            },
            labeled_fraction: 0.05,
            eval_fraction: 0.2,
            proposals: ProposalConfig {
                jitter_sigma: 0.08,
                negatives_per_image: 6,
            },
            signal: SignalConfig::default(),
            seed: 1,
            image_seed: None,
        }
    }
}

impl WorldConfig {
    pub fn image_seed(&self) -> u64 {
        self.image_seed.unwrap_or(self.seed)
    }

    pub fn image_width_px(&self) -> f64 {
        self.grid_width as f64 * self.stride
    }

    pub fn image_height_px(&self) -> f64 {
        self.grid_height as f64 * self.stride
    }

    pub fn num_labeled(&self) -> usize {
        ((self.labeled_fraction * self.num_images as f64).round() as usize).max(1)
    }

    pub fn num_eval(&self) -> usize {
        (self.eval_fraction * self.num_images as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Validation(m));
        if self.num_images == 0 || self.grid_height == 0 || self.grid_width == 0 {
            return err("num_images and grid dimensions must be positive".into());
        }
        if self.num_classes == 0 || self.vfm_channels == 0 {
            return err("num_classes and vfm_channels must be positive".into());
        }
        if self.base_channels < self.num_classes + 2 {
            return err(format!(
                "base_channels {} must be at least num_classes + 2 = {}",
                self.base_channels,
                self.num_classes + 2
            ));
        }
        if !(self.stride.is_finite() && self.stride > 0.0) {
            return err("stride must be positive".into());
        }
        let [omin, omax] = self.objects_per_image;
        if omin == 0 || omin > omax {
            return err(format!(
                "invalid objects_per_image {:?}",
                self.objects_per_image
            ));
        }
        let [bmin, bmax] = self.box_size;
        if bmin == 0 || bmin > bmax || bmax > self.grid_height.min(self.grid_width) {
            return err(format!("invalid box_size {:?} for the grid", self.box_size));
        }
        if !(self.separation_margin > 0.0 && self.separation_margin <= 2.0) {
            return err(format!(
                "separation_margin {} outside (0, 2]",
                self.separation_margin
            ));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return err(format!(
                "labeled_fraction {} outside (0, 1]",
                self.labeled_fraction
            ));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return err(format!(
                "eval_fraction {} outside [0, 1)",
                self.eval_fraction
            ));
        }
        if self.num_labeled() + self.num_eval() > self.num_images {
            return err("labeled and eval splits exceed the number of images".into());
        }
        let s = &self.signal;
        let nonneg = [
            self.domain_shift.noise_sigma,
            self.proposals.jitter_sigma,
            s.object_amplitude,
            s.object_noise,
            s.background_level,
            s.background_noise,
            s.intra_class_spread,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0))
            || !self.domain_shift.rotation.is_finite()
        {
            return err(
                "noise, amplitude and shift parameters must be finite and non-negative".into(),
            );
        }
        if s.intra_class_modes == 0 {
            return err("intra_class_modes must be positive".into());
        }
        Ok(())
    }
}

/// Channel-mixing rotation plus additive noise.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftMap {
    channels: usize,
    matrix: Vec<f64>,
    noise_sigma: f64,
}

impl ShiftMap {
    /// Rotation by `shift.rotation` in disjoint channel pairs drawn from `rng`.
    pub fn new(channels: usize, shift: DomainShift, rng: &mut Rng) -> Self {
        let mut perm: Vec<usize> = (0..channels).collect();
        rng.shuffle(&mut perm);
        let mut matrix = vec![0.0; channels * channels];
        for i in 0..channels {
            matrix[i * channels + i] = 1.0;
        }
        let (s, c) = shift.rotation.sin_cos();
        for pair in perm.chunks_exact(2) {
            let (a, b) = (pair[0], pair[1]);
            matrix[a * channels + a] = c;
            matrix[a * channels + b] = -s;
            matrix[b * channels + a] = s;
            matrix[b * channels + b] = c;
        }
        Self {
            channels,
            matrix,
            noise_sigma: shift.noise_sigma,
        }
    }

    pub fn from_matrix(channels: usize, matrix: Vec<f64>, noise_sigma: f64) -> Result<Self> {
        if matrix.len() != channels * channels {
            return Err(Error::Domain(
                "shift matrix must be channels x channels".into(),
            ));
        }
        Ok(Self {
            channels,
            matrix,
            noise_sigma,
        })
    }

    pub fn identity(channels: usize) -> Self {
        Self::new(
            channels,
            DomainShift::NONE,
            &mut Rng::new(0, streams::SHIFT),
        )
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }
}

/// `x' = R·x + σ·n` per cell; noise drawn cell-major from `rng`.
pub fn apply_shift(
    map: &FeatureMap<f64>,
    shift: &ShiftMap,
    rng: &mut Rng,
) -> Result<FeatureMap<f64>> {
    let c = map.channels();
    if c != shift.channels {
        return Err(Error::Domain(format!(
            "shift built for {} channels applied to a {c}-channel map",
            shift.channels
        )));
    }
    let mut out = Vec::with_capacity(map.data().len());
    for cell in map.cells() {
        for row in shift.matrix.chunks_exact(c) {
            let mut v = dot(row, cell);
            if shift.noise_sigma > 0.0 {
                v += shift.noise_sigma * rng.normal();
            }
            out.push(v);
        }
    }
    FeatureMap::new(map.height(), map.width(), c, map.stride(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    pub drop_rate: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.2,
            drop_rate: 0.1,
        }
    }
}

/// Strong view: additive Gaussian noise, then whole channels zeroed with
/// probability `drop_rate`. The weak view is the map itself.
pub fn strong_augment(
    map: &FeatureMap<f64>,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> FeatureMap<f64> {
    let c = map.channels();
    let keep: Vec<bool> = (0..c).map(|_| !rng.bernoulli(cfg.drop_rate)).collect();
    let mut data = map.data().to_vec();
    if cfg.noise_sigma > 0.0 {
        for v in data.iter_mut() {
            *v += cfg.noise_sigma * rng.normal();
        }
    }
    for (i, v) in data.iter_mut().enumerate() {
        if !keep[i % c] {
            *v = 0.0;
        }
    }
    FeatureMap::new(map.height(), map.width(), c, map.stride(), data)
        .expect("augmented map stays valid")
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldImage {
    pub id: String,
    /// Unshifted base map `X`.
    pub base: FeatureMap<f64>,
    /// Detector input `R·X + n`.
    pub input: FeatureMap<f64>,
    /// Stored VFM map `G·X`.
    pub vfm: FeatureMap<f64>,
    pub objects: Vec<Detection>,
    pub proposals: Vec<BBox<f64>>,
}

#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    /// Unit class signatures in base space, `C × d0`.
    pub signatures: Vec<Vec<f64>>,
    /// Unit sub-mode signatures, `C × modes × d0`.
    pub mode_signatures: Vec<Vec<Vec<f64>>>,
    pub background_direction: Vec<f64>,
    /// `G`, row-major `d × d0`.
    pub vfm_projection: Vec<f64>,
    pub shift: ShiftMap,
    pub images: Vec<WorldImage>,
    pub splits: Splits,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn quantize(map: FeatureMap<f64>) -> FeatureMap<f64> {
    let (h, w, c, s) = (map.height(), map.width(), map.channels(), map.stride());
    let data = map.into_data().into_iter().map(round_f32).collect();
    FeatureMap::new(h, w, c, s, data).expect("quantized map stays valid")
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// Gram–Schmidt on Gaussian draws: `count` orthonormal vectors in `R^dim`.
fn orthonormal_set(count: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for b in &basis {
            let p = dot(&v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
        if norm(&v) > 1e-6 {
            basis.push(unit(v));
        }
    }
    basis
}

/// Maps an image index to its id.
pub fn image_id(index: usize) -> String {
    format!("img_{index:04}")
}

/// Split assignment by seeded shuffle: first `num_labeled` labeled, next `num_eval` eval.
pub fn draw_splits(cfg: &WorldConfig) -> Splits {
    let mut order: Vec<usize> = (0..cfg.num_images).collect();
    Rng::new(cfg.image_seed(), streams::SPLIT).shuffle(&mut order);
    let (nl, ne) = (cfg.num_labeled(), cfg.num_eval());
    let mut splits = Splits {
        labeled: order[..nl].iter().map(|i| image_id(*i)).collect(),
        eval: order[nl..nl + ne].iter().map(|i| image_id(*i)).collect(),
        unlabeled: order[nl + ne..].iter().map(|i| image_id(*i)).collect(),
    };
    splits.labeled.sort();
    splits.eval.sort();
    splits.unlabeled.sort();
    splits
}

struct Structure {
    signatures: Vec<Vec<f64>>,
    modes: Vec<Vec<Vec<f64>>>,
    background: Vec<f64>,
    projection: Vec<f64>,
    shift: ShiftMap,
}

fn build_structure(cfg: &WorldConfig) -> Result<Structure> {
    let mut rng = Rng::new(cfg.seed, streams::WORLD);
    let d0 = cfg.base_channels;
    let c = cfg.num_classes;
    let basis = orthonormal_set(c + 2, d0, &mut rng);
    let shared = &basis[c];
    let background = basis[c + 1].clone();
    let rho = 1.0 - cfg.separation_margin / 2.0;
    let signatures: Vec<Vec<f64>> = (0..c)
        .map(|k| {
            basis[k]
                .iter()
                .zip(shared)
                .map(|(e, u)| (1.0 - rho).sqrt() * e + rho.sqrt() * u)
                .collect()
        })
        .collect();
    let max_cos = 1.0 - cfg.separation_margin / 2.0;
    for i in 0..c {
        for j in i + 1..c {
            let cos = cosine_similarity(&signatures[i], &signatures[j])?;
            if cos > max_cos + 1e-9 {
                return Err(Error::Validation(format!(
                    "signatures {i} and {j} have cosine {cos} above {max_cos}"
                )));
            }
        }
    }
    let spread = cfg.signal.intra_class_spread;
    let modes = signatures
        .iter()
        .map(|s| {
            (0..cfg.signal.intra_class_modes)
                .map(|_| {
                    let r = unit((0..d0).map(|_| rng.normal()).collect());
                    unit(s.iter().zip(&r).map(|(a, b)| a + spread * b).collect())
                })
                .collect()
        })
        .collect();
    let scale = 1.0 / (d0 as f64).sqrt();
    let projection = (0..cfg.vfm_channels * d0)
        .map(|_| rng.normal() * scale)
        .collect();
    let shift = ShiftMap::new(
        d0,
        cfg.domain_shift,
        &mut Rng::new(cfg.seed, streams::SHIFT),
    );
    Ok(Structure {
        signatures,
        modes,
        background,
        projection,
        shift,
    })
}

/// `G·x` per cell.
pub fn project_map(
    map: &FeatureMap<f64>,
    projection: &[f64],
    out_channels: usize,
) -> Result<FeatureMap<f64>> {
    let c = map.channels();
    if projection.len() != out_channels * c {
        return Err(Error::Domain("projection shape mismatch".into()));
    }
    let mut out = Vec::with_capacity(map.num_cells() * out_channels);
    for cell in map.cells() {
        for row in projection.chunks_exact(c) {
            out.push(dot(row, cell));
        }
    }
    FeatureMap::new(map.height(), map.width(), out_channels, map.stride(), out)
}

fn jitter_box(gt: &BBox<f64>, sigma: f64, w_px: f64, h_px: f64, rng: &mut Rng) -> BBox<f64> {
    if sigma <= 0.0 {
        return *gt;
    }
    let (bw, bh) = (gt.width(), gt.height());
    for _ in 0..32 {
        let cand = BBox::new(
            gt.x1 + sigma * bw * rng.normal(),
            gt.y1 + sigma * bh * rng.normal(),
            gt.x2 + sigma * bw * rng.normal(),
            gt.y2 + sigma * bh * rng.normal(),
        )
        .ok()
        .and_then(|b| b.clamp_to(w_px, h_px));
        if let Some(b) = cand {
            if b.iou(gt) >= 0.55 {
                return b;
            }
        }
    }
    *gt
}

fn generate_image(cfg: &WorldConfig, st: &Structure, index: usize) -> Result<WorldImage> {
    let mut rng = Rng::new(cfg.image_seed(), streams::WORLD).fork(index as u64);
    let (gh, gw, d0) = (cfg.grid_height, cfg.grid_width, cfg.base_channels);
    let s = &cfg.signal;
    let mut data = Vec::with_capacity(gh * gw * d0);
    for _ in 0..gh * gw {
        for ch in 0..d0 {
            data.push(s.background_level * st.background[ch] + s.background_noise * rng.normal());
        }
    }
    let mut base = FeatureMap::new(gh, gw, d0, cfg.stride, data)?;

    // objects: non-overlapping cell rectangles with a one-cell gap
    let n_obj = rng.range_inclusive(cfg.objects_per_image[0], cfg.objects_per_image[1]);
    let mut rects: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut objects = Vec::new();
    for _ in 0..n_obj {
        for _attempt in 0..64 {
            let bw = rng.range_inclusive(cfg.box_size[0], cfg.box_size[1]);
            let bh = rng.range_inclusive(cfg.box_size[0], cfg.box_size[1]);
            let x = rng.below(gw - bw + 1);
            let y = rng.below(gh - bh + 1);
            let clash = rects.iter().any(|&(ox, oy, ow, oh)| {
                x < ox + ow + 1 && ox < x + bw + 1 && y < oy + oh + 1 && oy < y + bh + 1
            });
            if clash {
                continue;
            }
            let class = rng.below(cfg.num_classes);
            let mode = rng.below(s.intra_class_modes);
            let sig = &st.modes[class][mode];
            for cy in y..y + bh {
                for cx in x..x + bw {
                    for (v, sv) in base.cell_mut(cy, cx).iter_mut().zip(sig) {
                        *v = s.object_amplitude * sv + s.object_noise * rng.normal();
                    }
                }
            }
            rects.push((x, y, bw, bh));
            let st_px = cfg.stride;
            objects.push(Detection::annotation(
                BBox::new(
                    x as f64 * st_px,
                    y as f64 * st_px,
                    (x + bw) as f64 * st_px,
                    (y + bh) as f64 * st_px,
                )?,
                class,
            ));
            break;
        }
    }
    let base = quantize(base);

    let (w_px, h_px) = (cfg.image_width_px(), cfg.image_height_px());
    let mut prng = Rng::new(cfg.image_seed(), streams::PROPOSALS).fork(index as u64);
    let mut proposals: Vec<BBox<f64>> = objects
        .iter()
        .map(|o| jitter_box(&o.bbox, cfg.proposals.jitter_sigma, w_px, h_px, &mut prng))
        .collect();
    let mut negatives = 0;
    let mut attempts = 0;
    while negatives < cfg.proposals.negatives_per_image
        && attempts < 64 * cfg.proposals.negatives_per_image.max(1)
    {
        attempts += 1;
        let bw = prng.uniform_in(cfg.box_size[0] as f64, cfg.box_size[1] as f64 + 1.0) * cfg.stride;
        let bh = prng.uniform_in(cfg.box_size[0] as f64, cfg.box_size[1] as f64 + 1.0) * cfg.stride;
        let x1 = prng.uniform_in(0.0, (w_px - bw).max(0.0));
        let y1 = prng.uniform_in(0.0, (h_px - bh).max(0.0));
        let Ok(b) = BBox::new(x1, y1, (x1 + bw).min(w_px), (y1 + bh).min(h_px)) else {
            continue;
        };
        if objects.iter().all(|o| o.bbox.iou(&b) < 0.3) {
            proposals.push(b);
            negatives += 1;
        }
    }

    let mut srng = Rng::new(cfg.image_seed(), streams::SHIFT).fork(index as u64);
    let input = quantize(apply_shift(&base, &st.shift, &mut srng)?);
    let vfm = quantize(project_map(&base, &st.projection, cfg.vfm_channels)?);
    Ok(WorldImage {
        id: image_id(index),
        base,
        input,
        vfm,
        objects,
        proposals,
    })
}

impl World {
    pub fn generate(cfg: &WorldConfig) -> Result<World> {
        Self::generate_with_workers(cfg, 1)
    }

    /// Images are independent given their derived seeds, so any worker count
    /// produces the same world.
    pub fn generate_with_workers(cfg: &WorldConfig, workers: usize) -> Result<World> {
        cfg.validate()?;
        let st = build_structure(cfg)?;
        let workers = workers.clamp(1, cfg.num_images);
        let images: Vec<WorldImage> = if workers == 1 {
            (0..cfg.num_images)
                .map(|i| generate_image(cfg, &st, i))
                .collect::<Result<_>>()?
        } else {
            let chunk = cfg.num_images.div_ceil(workers);
            let st_ref = &st;
            let parts: Vec<Result<Vec<WorldImage>>> = std::thread::scope(|scope| {
                let handles: Vec<_> = (0..workers)
                    .map(|w| {
                        scope.spawn(move || {
                            (w * chunk..((w + 1) * chunk).min(cfg.num_images))
                                .map(|i| generate_image(cfg, st_ref, i))
                                .collect::<Result<Vec<_>>>()
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("worker panicked"))
                    .collect()
            });
            let mut all = Vec::with_capacity(cfg.num_images);
            for p in parts {
                all.extend(p?);
            }
            all
        };
        Ok(World {
            config: cfg.clone(),
            signatures: st.signatures,
            mode_signatures: st.modes,
            background_direction: st.background,
            vfm_projection: st.projection,
            shift: st.shift,
            images,
            splits: draw_splits(cfg),
        })
    }

    /// Class signature as it appears in VFM space, `G·s_c`.
    pub fn vfm_signature(&self, class: usize) -> Vec<f64> {
        self.project(&self.signatures[class])
    }

    pub fn vfm_background(&self) -> Vec<f64> {
        self.project(&self.background_direction)
    }

    fn project(&self, v: &[f64]) -> Vec<f64> {
        self.vfm_projection
            .chunks_exact(self.config.base_channels)
            .map(|row| dot(row, v))
            .collect()
    }

    pub fn index(&self) -> DatasetIndex {
        let cfg = &self.config;
        DatasetIndex {
            schema_version: SCHEMA_VERSION,
            num_classes: cfg.num_classes,
            images: self
                .images
                .iter()
                .map(|im| ImageEntry {
                    image_id: im.id.clone(),
                    feature_file: format!("{}.vfm.vgfm", im.id),
                    input_file: Some(format!("{}.input.vgfm", im.id)),
                    width: cfg.image_width_px().round() as u32,
                    height: cfg.image_height_px().round() as u32,
                    stride: cfg.stride,
                })
                .collect(),
            annotations: self
                .images
                .iter()
                .map(|im| (im.id.clone(), im.objects.clone()))
                .collect(),
            proposals: self
                .images
                .iter()
                .map(|im| (im.id.clone(), im.proposals.clone()))
                .collect(),
            splits: self.splits.clone(),
            root: Default::default(),
        }
    }

    /// Writes feature files, `index.json` and `world.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<DatasetIndex> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = self.index();
        index.root = dir.to_path_buf();
        for (im, entry) in self.images.iter().zip(&index.images) {
            write_feature_map(dir.join(&entry.feature_file), &im.vfm)?;
            if let Some(f) = &entry.input_file {
                write_feature_map(dir.join(f), &im.input)?;
            }
        }
        write_dataset(dir.join("index.json"), &index)?;
        let cfg_path = dir.join("world.json");
        let text =
            serde_json::to_string_pretty(&self.config).map_err(|e| Error::json(&cfg_path, e))?;
        fs::write(&cfg_path, text + "\n").map_err(|e| Error::io(&cfg_path, e))?;
        Ok(index)
    }
}

/// Generates the world for `cfg` and writes it as a dataset under `out_dir`.
pub fn generate_world(cfg: &WorldConfig, out_dir: impl AsRef<Path>) -> Result<DatasetIndex> {
    World::generate(cfg)?.write(out_dir)
}
