//! Dataset ingestion, class splits, rotation augmentation and the C-way
//! K-shot episodic sampler.
//!
//! On-disk layout: one directory per class containing PNG/JPEG images, plus a
//! UTF-8 split manifest with `[train]` / `[val]` / `[test]` headers and one
//! class name per line. Decoded images are held in memory as u8 pixels and
//! normalized to tensors at episode-assembly time.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::seq::index::sample as index_sample;
use rand::Rng;
use std::collections::HashSet;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// One decoded image: `channels * size * size` u8 values, channel-major.
#[derive(Clone, Debug)]
pub struct ImageData {
    pub pixels: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct ClassEntry {
    pub name: String,
    pub images: Vec<ImageData>,
}

#[derive(Debug)]
pub struct ClassDataset {
    pub split: Split,
    pub classes: Vec<ClassEntry>,
    pub image_size: usize,
    pub channels: usize,
}

impl ClassDataset {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    fn plane(&self) -> usize {
        self.image_size * self.image_size
    }
}

/// Class names per split, checked for pairwise disjointness.
#[derive(Debug, Default)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn names(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = SplitManifest::default();
        let mut current: Option<Split> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[train]" => current = Some(Split::Train),
                "[val]" => current = Some(Split::Val),
                "[test]" => current = Some(Split::Test),
                name => {
                    let split = current.ok_or_else(|| {
                        Error::Data(format!(
                            "manifest line {}: class '{name}' before any [split] header",
                            lineno + 1
                        ))
                    })?;
                    match split {
                        Split::Train => m.train.push(name.to_string()),
                        Split::Val => m.val.push(name.to_string()),
                        Split::Test => m.test.push(name.to_string()),
                    }
                }
            }
        }
        let mut seen = HashSet::new();
        for name in m.train.iter().chain(&m.val).chain(&m.test) {
            if !seen.insert(name.clone()) {
                return Err(Error::Data(format!(
                    "class '{name}' appears in more than one split"
                )));
            }
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

/// Decode every image of one split, resizing to `image_size` and converting
/// to `channels` (1 = luma, 3 = rgb).
pub fn load_dataset(
    root: &Path,
    manifest: &SplitManifest,
    split: Split,
    image_size: usize,
    channels: usize,
) -> Result<ClassDataset> {
    if channels != 1 && channels != 3 {
        return Err(Error::Config(format!("channels must be 1 or 3, got {channels}")));
    }
    let names = manifest.names(split);
    if names.is_empty() {
        return Err(Error::Data(format!(
            "split '{}' lists no classes in the manifest",
            split.label()
        )));
    }
    let mut classes = Vec::with_capacity(names.len());
    for name in names {
        let dir = root.join(name);
        if !dir.is_dir() {
            return Err(Error::Data(format!("missing class directory {}", dir.display())));
        }
        let mut files: Vec<_> = std::fs::read_dir(&dir)
            .map_err(|e| Error::Data(format!("cannot list {}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                    Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
                )
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!(
                "class '{name}' has no images under {}",
                dir.display()
            )));
        }
        let mut images = Vec::with_capacity(files.len());
        for f in files {
            let img = image::open(&f)
                .map_err(|e| Error::Data(format!("cannot decode {}: {e}", f.display())))?;
            images.push(decode_to_pixels(&img, image_size, channels));
        }
        classes.push(ClassEntry { name: name.clone(), images });
    }
    Ok(ClassDataset { split, classes, image_size, channels })
}

/// Decode one image file with the dataset pipeline's resize/convert rules.
pub fn load_single_image(path: &Path, image_size: usize, channels: usize) -> Result<ImageData> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?;
    Ok(decode_to_pixels(&img, image_size, channels))
}

fn decode_to_pixels(img: &image::DynamicImage, size: usize, channels: usize) -> ImageData {
    use image::imageops::FilterType;
    let resized = if img.width() as usize != size || img.height() as usize != size {
        img.resize_exact(size as u32, size as u32, FilterType::Triangle)
    } else {
        img.clone()
    };
    let mut pixels = vec![0u8; channels * size * size];
    if channels == 1 {
        let luma = resized.to_luma8();
        pixels.copy_from_slice(luma.as_raw());
    } else {
        let rgb = resized.to_rgb8();
        let raw = rgb.as_raw();
        for p in 0..size * size {
            for c in 0..3 {
                pixels[c * size * size + p] = raw[p * 3 + c];
            }
        }
    }
    ImageData { pixels }
}

/// Exact 90-degree clockwise rotation of a square channel-major image.
pub fn rotate90(img: &ImageData, size: usize, channels: usize) -> ImageData {
    let plane = size * size;
    let mut out = vec![0u8; img.pixels.len()];
    for c in 0..channels {
        let src = &img.pixels[c * plane..][..plane];
        let dst = &mut out[c * plane..][..plane];
        for y in 0..size {
            for x in 0..size {
                // (y, x) <- (size-1-x, y)
                dst[y * size + x] = src[(size - 1 - x) * size + y];
            }
        }
    }
    ImageData { pixels: out }
}

/// Replenish a dataset with 90/180/270-degree rotations: every class spawns
/// three rotated copies as new class identities, inheriting the split.
pub fn augment_rotations(ds: &ClassDataset) -> Result<ClassDataset> {
    let mut classes = Vec::with_capacity(ds.classes.len() * 4);
    for entry in &ds.classes {
        classes.push(entry.clone());
        let mut prev: Vec<ImageData> = entry.images.clone();
        for rot in [90u32, 180, 270] {
            let rotated: Vec<ImageData> = prev
                .iter()
                .map(|img| rotate90(img, ds.image_size, ds.channels))
                .collect();
            classes.push(ClassEntry {
                name: format!("{}@rot{rot}", entry.name),
                images: rotated.clone(),
            });
            prev = rotated;
        }
    }
    Ok(ClassDataset {
        split: ds.split,
        classes,
        image_size: ds.image_size,
        channels: ds.channels,
    })
}

/// One C-way K-shot task: class slots, support (slot-major, K per slot) and
/// query (slot-major) image references. No image index repeats within a class.
#[derive(Clone, Debug)]
pub struct Episode {
    pub class_ids: Vec<usize>,
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.class_ids.len()
    }

    pub fn query_slots(&self) -> Vec<usize> {
        self.query.iter().map(|&(slot, _)| slot).collect()
    }
}

/// Sample a C-way K-shot episode with `queries` query images per class,
/// classes and images drawn without replacement. Deterministic per rng state.
pub fn sample_episode<R: Rng>(
    ds: &ClassDataset,
    ways: usize,
    shots: usize,
    queries: usize,
    rng: &mut R,
) -> Result<Episode> {
    if ds.class_count() < ways {
        return Err(Error::Data(format!(
            "episode needs {ways} classes but split '{}' has {}",
            ds.split.label(),
            ds.class_count()
        )));
    }
    let need = shots + queries;
    if shots == 0 || queries == 0 {
        return Err(Error::Config("shots and queries must be positive".into()));
    }
    if let Some(short) = ds.classes.iter().find(|c| c.images.len() < need) {
        return Err(Error::Data(format!(
            "class '{}' has {} images but the task needs K + queries = {need}",
            short.name,
            short.images.len()
        )));
    }
    let class_ids: Vec<usize> = index_sample(rng, ds.class_count(), ways).into_iter().collect();
    let mut support = Vec::with_capacity(ways * shots);
    let mut query = Vec::with_capacity(ways * queries);
    for (slot, &cid) in class_ids.iter().enumerate() {
        let n_imgs = ds.classes[cid].images.len();
        let picks: Vec<usize> = index_sample(rng, n_imgs, need).into_iter().collect();
        for &p in &picks[..shots] {
            support.push((slot, p));
        }
        for &p in &picks[shots..] {
            query.push((slot, p));
        }
    }
    // regroup query slot-major (already slot-major by construction)
    Ok(Episode { class_ids, support, query })
}

/// Per-channel normalization constants applied after scaling pixels to [0,1].
#[derive(Clone, Debug)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn uniform(channels: usize) -> Self {
        Normalization { mean: vec![0.5; channels], std: vec![0.5; channels] }
    }
}

/// CUB-style training augmentation: horizontal flip (p = 0.5), rotation
/// within +-15 degrees (bilinear, zero fill), brightness/contrast/saturation
/// jitter within +-0.4. Operates on [0,1] float pixels before normalization.
#[derive(Clone, Copy, Debug)]
pub struct FlipJitter {
    pub flip_p: f64,
    pub max_rotate_deg: f64,
    pub jitter: f64,
}

impl Default for FlipJitter {
    fn default() -> Self {
        FlipJitter { flip_p: 0.5, max_rotate_deg: 15.0, jitter: 0.4 }
    }
}

/// Apply flip/rotate/color jitter to one [0,1] image in place.
pub fn flip_jitter_augment<R: Rng>(
    pixels: &mut [f64],
    size: usize,
    channels: usize,
    params: &FlipJitter,
    rng: &mut R,
) {
    let plane = size * size;
    // horizontal flip
    if rng.gen_bool(params.flip_p) {
        for c in 0..channels {
            let img = &mut pixels[c * plane..][..plane];
            for y in 0..size {
                let row = &mut img[y * size..][..size];
                row.reverse();
            }
        }
    }
    // rotation by a small angle, bilinear, zero fill
    let deg = rng.gen_range(-params.max_rotate_deg..=params.max_rotate_deg);
    if deg.abs() > 1e-9 {
        let theta = deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        let cx = (size as f64 - 1.0) / 2.0;
        let mut rotated = vec![0.0f64; pixels.len()];
        for c in 0..channels {
            let src = &pixels[c * plane..][..plane];
            let dst = &mut rotated[c * plane..][..plane];
            for y in 0..size {
                for x in 0..size {
                    let dx = x as f64 - cx;
                    let dy = y as f64 - cx;
                    let sx = cos * dx + sin * dy + cx;
                    let sy = -sin * dx + cos * dy + cx;
                    let x0 = sx.floor();
                    let y0 = sy.floor();
                    let fx = sx - x0;
                    let fy = sy - y0;
                    let mut acc = 0.0;
                    for (oy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                        for (ox, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                            let px = x0 + ox;
                            let py = y0 + oy;
                            if px >= 0.0 && py >= 0.0 && (px as usize) < size && (py as usize) < size
                            {
                                acc += wy * wx * src[py as usize * size + px as usize];
                            }
                        }
                    }
                    dst[y * size + x] = acc;
                }
            }
        }
        pixels.copy_from_slice(&rotated);
    }
    // brightness and contrast
    let b = 1.0 + rng.gen_range(-params.jitter..=params.jitter);
    let ct = 1.0 + rng.gen_range(-params.jitter..=params.jitter);
    if b != 1.0 || ct != 1.0 {
        for v in pixels.iter_mut() {
            *v = ((*v * b - 0.5) * ct + 0.5).clamp(0.0, 1.0);
        }
    }
    // saturation (rgb only): blend with per-pixel luma
    if channels == 3 {
        let s = 1.0 + rng.gen_range(-params.jitter..=params.jitter);
        if s == 1.0 {
            return;
        }
        for p in 0..plane {
            let (r, g, b) = (pixels[p], pixels[plane + p], pixels[2 * plane + p]);
            let luma = 0.299 * r + 0.587 * g + 0.114 * b;
            for c in 0..3 {
                let v = pixels[c * plane + p];
                pixels[c * plane + p] = (luma + (v - luma) * s).clamp(0.0, 1.0);
            }
        }
    }
}

/// Assemble the support and query tensors of an episode. Images are scaled to
/// [0,1], optionally jitter-augmented (training only) and then normalized.
/// Returns (support [C*K,ch,H,W], query [n,ch,H,W], query slot labels).
pub fn episode_tensors<S: Scalar, R: Rng>(
    ds: &ClassDataset,
    ep: &Episode,
    norm: &Normalization,
    jitter: Option<(&FlipJitter, &mut R)>,
    ) -> (Tensor<S>, Tensor<S>, Vec<usize>) {
    let plane = ds.plane();
    let per_image = ds.channels * plane;
    let mut jitter = jitter;
    let mut build = |refs: &[(usize, usize)]| -> Tensor<S> {
        let mut data = vec![S::zero(); refs.len() * per_image];
        for (i, &(slot, img_idx)) in refs.iter().enumerate() {
            let img = &ds.classes[ep.class_ids[slot]].images[img_idx];
            let mut f: Vec<f64> = img.pixels.iter().map(|&p| p as f64 / 255.0).collect();
            if let Some((params, rng)) = jitter.as_mut() {
                flip_jitter_augment(&mut f, ds.image_size, ds.channels, params, *rng);
            }
            let dst = &mut data[i * per_image..][..per_image];
            for c in 0..ds.channels {
                let (m, s) = (norm.mean[c], norm.std[c]);
                for p in 0..plane {
                    dst[c * plane + p] = S::from_f64((f[c * plane + p] - m) / s);
                }
            }
        }
        Tensor::from_vec(&[refs.len(), ds.channels, ds.image_size, ds.image_size], data)
    };
    let support = build(&ep.support);
    let query = build(&ep.query);
    (support, query, ep.query_slots())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    pub(crate) fn toy_dataset(classes: usize, images_per_class: usize, size: usize) -> ClassDataset {
        let mut entries = Vec::new();
        for c in 0..classes {
            let images: Vec<ImageData> = (0..images_per_class)
                .map(|i| ImageData {
                    pixels: (0..size * size).map(|p| ((c * 31 + i * 7 + p) % 256) as u8).collect(),
                })
                .collect();
            entries.push(ClassEntry { name: format!("class_{c:03}"), images });
        }
        ClassDataset { split: Split::Train, classes: entries, image_size: size, channels: 1 }
    }

    #[test]
    fn manifest_parses_and_rejects_overlap() {
        let m = SplitManifest::parse("[train]\na\nb\n[val]\nc\n[test]\nd\n").unwrap();
        assert_eq!(m.train, vec!["a", "b"]);
        assert_eq!(m.val, vec!["c"]);
        assert_eq!(m.test, vec!["d"]);

        let err = SplitManifest::parse("[train]\na\n[test]\na\n");
        assert!(err.is_err(), "overlapping splits must be rejected");
    }

    #[test]
    fn rotate90_matches_hand_permutation() {
        // 2x2 image [[1,2],[3,4]] rotated clockwise -> [[3,1],[4,2]]
        let img = ImageData { pixels: vec![1, 2, 3, 4] };
        let r = rotate90(&img, 2, 1);
        assert_eq!(r.pixels, vec![3, 1, 4, 2]);
    }

    #[test]
    fn four_rotations_return_original() {
        let img = ImageData { pixels: (0..25).collect() };
        let mut r = img.clone();
        for _ in 0..4 {
            r = rotate90(&r, 5, 1);
        }
        assert_eq!(r.pixels, img.pixels);
    }

    #[test]
    fn rotation_augmentation_quadruples_classes() {
        let ds = toy_dataset(300, 3, 4);
        let aug = augment_rotations(&ds).unwrap();
        assert_eq!(aug.class_count(), 1200);
        assert_eq!(aug.split, ds.split);
        // names stay unique
        let names: std::collections::HashSet<_> =
            aug.classes.iter().map(|c| c.name.clone()).collect();
        assert_eq!(names.len(), 1200);
    }

    #[test]
    fn episode_shapes_match_task_specs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        // miniImageNet 5-way 5-shot training: m = 25 support, n = 50 (10/class)
        let ds = toy_dataset(64, 20, 4);
        let ep = sample_episode(&ds, 5, 5, 10, &mut rng).unwrap();
        assert_eq!(ep.support.len(), 25);
        assert_eq!(ep.query.len(), 50);
        // Omniglot 20-way 5-shot: m = 100, n = 100 (5/class)
        let ep = sample_episode(&ds, 20, 5, 5, &mut rng).unwrap();
        assert_eq!(ep.support.len(), 100);
        assert_eq!(ep.query.len(), 100);
    }

    #[test]
    fn same_seed_gives_identical_episodes() {
        let ds = toy_dataset(30, 10, 4);
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let e1 = sample_episode(&ds, 5, 1, 5, &mut r1).unwrap();
        let e2 = sample_episode(&ds, 5, 1, 5, &mut r2).unwrap();
        assert_eq!(e1.class_ids, e2.class_ids);
        assert_eq!(e1.support, e2.support);
        assert_eq!(e1.query, e2.query);
    }

    #[test]
    fn infeasible_task_is_an_error() {
        let ds = toy_dataset(4, 3, 4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        assert!(sample_episode(&ds, 5, 1, 1, &mut rng).is_err(), "too few classes");
        assert!(sample_episode(&ds, 3, 2, 2, &mut rng).is_err(), "too few images per class");
    }

    #[test]
    fn episode_invariants_hold_over_many_samples() {
        let ds = toy_dataset(25, 12, 4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut histogram = vec![0usize; 25];
        let trials = 1000;
        for _ in 0..trials {
            let ep = sample_episode(&ds, 5, 2, 3, &mut rng).unwrap();
            // exact per-class counts
            for slot in 0..5 {
                assert_eq!(ep.support.iter().filter(|&&(s, _)| s == slot).count(), 2);
                assert_eq!(ep.query.iter().filter(|&&(s, _)| s == slot).count(), 3);
            }
            // support/query disjoint within each class
            for slot in 0..5 {
                let sup: HashSet<usize> = ep
                    .support
                    .iter()
                    .filter(|&&(s, _)| s == slot)
                    .map(|&(_, i)| i)
                    .collect();
                for &(s, i) in &ep.query {
                    if s == slot {
                        assert!(!sup.contains(&i), "image in both support and query");
                    }
                }
            }
            // classes distinct, labels within range
            let uniq: HashSet<usize> = ep.class_ids.iter().copied().collect();
            assert_eq!(uniq.len(), 5);
            for cid in &ep.class_ids {
                histogram[*cid] += 1;
            }
        }
        // class usage is uniform within 3 sigma of binomial(trials, 5/25)
        let p = 5.0 / 25.0;
        let mean = trials as f64 * p;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for (c, &count) in histogram.iter().enumerate() {
            assert!(
                (count as f64 - mean).abs() < 3.0 * sigma,
                "class {c} sampled {count} times, expected ~{mean:.0} +- {:.0}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn flip_jitter_identity_when_disabled_and_involutive_flip() {
        let size = 6;
        let orig: Vec<f64> = (0..36).map(|v| v as f64 / 36.0).collect();

        // p=0 flip, 0 rotation, 0 jitter -> identity
        let mut px = orig.clone();
        let params = FlipJitter { flip_p: 0.0, max_rotate_deg: 0.0, jitter: 0.0 };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        flip_jitter_augment(&mut px, size, 1, &params, &mut rng);
        assert_eq!(px, orig);

        // forced flip twice -> original
        let params = FlipJitter { flip_p: 1.0, max_rotate_deg: 0.0, jitter: 0.0 };
        let mut px = orig.clone();
        flip_jitter_augment(&mut px, size, 1, &params, &mut rng);
        assert_ne!(px, orig);
        flip_jitter_augment(&mut px, size, 1, &params, &mut rng);
        assert_eq!(px, orig);
    }

    #[test]
    fn jitter_output_stays_in_unit_range() {
        let size = 8;
        let params = FlipJitter::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for trial in 0..50 {
            let mut px: Vec<f64> = (0..3 * size * size)
                .map(|v| ((v * 37 + trial * 13) % 256) as f64 / 255.0)
                .collect();
            flip_jitter_augment(&mut px, size, 3, &params, &mut rng);
            for v in &px {
                assert!(*v >= 0.0 && *v <= 1.0, "pixel {v} out of range");
            }
        }
    }

    #[test]
    fn episode_tensors_normalize() {
        let ds = toy_dataset(3, 5, 4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let ep = sample_episode(&ds, 2, 1, 2, &mut rng).unwrap();
        let norm = Normalization::uniform(1);
        let (sup, qry, slots) = episode_tensors::<f64, rand_chacha::ChaCha8Rng>(&ds, &ep, &norm, None);
        assert_eq!(sup.shape(), &[2, 1, 4, 4]);
        assert_eq!(qry.shape(), &[4, 1, 4, 4]);
        assert_eq!(slots, vec![0, 0, 1, 1]);
        for v in sup.data().iter().chain(qry.data()) {
            assert!(*v >= -1.0 && *v <= 1.0);
        }
    }
}
