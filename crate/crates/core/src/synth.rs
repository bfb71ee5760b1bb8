//! Synthetic scenes, training prompt sets and the train/val/test split.
//!
//! Scenes are a piecewise-constant foreground/background image plus Gaussian
//! noise. Three shape profiles exercise different regimes: compact blobs,
//! annuli with a hole, and thin polylines.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{BinaryMask, Image, Label, Pixel, Prompt, PromptSet};
use crate::error::{ensure, Error, Result};

const MAX_ATTEMPTS: usize = 100;
const MIN_AREA: f64 = 0.02;
const MAX_AREA: f64 = 0.60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Blobs,
    Rings,
    Thin,
}

impl Profile {
    pub const ALL: [Profile; 3] = [Profile::Blobs, Profile::Rings, Profile::Thin];

    pub fn name(self) -> &'static str {
        match self {
            Profile::Blobs => "blobs",
            Profile::Rings => "rings",
            Profile::Thin => "thin",
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Profile::Blobs),
            "rings" => Ok(Profile::Rings),
            "thin" => Ok(Profile::Thin),
            other => Err(Error::Format(format!("unknown scene profile {other:?}"))),
        }
    }
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub profile: Profile,
    pub size: usize,
    pub foreground_mean: f64,
    pub background_mean: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(profile: Profile, seed: u64) -> Self {
        SceneSpec {
            profile,
            size: 64,
            foreground_mean: 0.7,
            background_mean: 0.3,
            noise_sigma: 0.05,
            seed,
        }
    }

    pub fn with_size(mut self, size: usize) -> Self {
        self.size = size;
        self
    }

    fn validate(&self) -> Result<()> {
        ensure!(
            self.foreground_mean != self.background_mean,
            "foreground and background means must differ"
        );
        ensure!(
            self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(),
            "noise sigma must be non-negative"
        );
        ensure!(
            (0.0..=1.0).contains(&self.foreground_mean) && (0.0..=1.0).contains(&self.background_mean),
            "region means must lie in [0, 1]"
        );
        ensure!(self.size >= crate::domain::MIN_IMAGE_SIDE, "scene size {} too small", self.size);
        Ok(())
    }
}

/// Renders a scene. Deterministic in `spec.seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<(Image, BinaryMask)> {
    generate_scene_within(spec, MIN_AREA..=MAX_AREA)
}

fn generate_scene_within(
    spec: &SceneSpec,
    area: std::ops::RangeInclusive<f64>,
) -> Result<(Image, BinaryMask)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.size;

    let mask = (0..MAX_ATTEMPTS)
        .map(|_| match spec.profile {
            Profile::Blobs => blobs(&mut rng, size),
            Profile::Rings => ring(&mut rng, size),
            Profile::Thin => polyline(&mut rng, size),
        })
        .find(|m| area.contains(&m.area_fraction()))
        .ok_or_else(|| {
            Error::Generation(format!(
                "{} scene of size {size} missed area bounds {area:?} {MAX_ATTEMPTS} times",
                spec.profile
            ))
        })?;

    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
    let values = mask
        .bits()
        .iter()
        .map(|&fg| {
            let mean = if fg { spec.foreground_mean } else { spec.background_mean };
            (mean + noise.sample(&mut rng)).clamp(0.0, 1.0)
        })
        .collect();
    Ok((Image::new(size, size, values)?, mask))
}

fn blobs(rng: &mut ChaCha8Rng, size: usize) -> BinaryMask {
    let s = size as f64;
    let count = rng.gen_range(1..=3);
    let ellipses: Vec<[f64; 5]> = (0..count)
        .map(|_| {
            [
                rng.gen_range(0.15 * s..0.85 * s),
                rng.gen_range(0.15 * s..0.85 * s),
                rng.gen_range(0.08 * s..0.25 * s),
                rng.gen_range(0.08 * s..0.25 * s),
                rng.gen_range(0.0..std::f64::consts::PI),
            ]
        })
        .collect();
    BinaryMask::from_fn(size, size, |p| {
        let (y, x) = (p.row as f64 + 0.5, p.col as f64 + 0.5);
        ellipses.iter().any(|&[cy, cx, a, b, theta]| {
            let (dy, dx) = (y - cy, x - cx);
            let (sin, cos) = theta.sin_cos();
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            (u / a).powi(2) + (v / b).powi(2) <= 1.0
        })
    })
}

fn ring(rng: &mut ChaCha8Rng, size: usize) -> BinaryMask {
    let s = size as f64;
    let cy = rng.gen_range(0.3 * s..0.7 * s);
    let cx = rng.gen_range(0.3 * s..0.7 * s);
    let outer = rng.gen_range(0.2 * s..0.4 * s);
    let inner = outer * rng.gen_range(0.45..0.75);
    BinaryMask::from_fn(size, size, |p| {
        let d = ((p.row as f64 + 0.5 - cy).powi(2) + (p.col as f64 + 0.5 - cx).powi(2)).sqrt();
        d <= outer && d >= inner
    })
}

fn polyline(rng: &mut ChaCha8Rng, size: usize) -> BinaryMask {
    let s = size as f64;
    let vertices: Vec<(f64, f64)> = (0..5)
        .map(|_| (rng.gen_range(0.1 * s..0.9 * s), rng.gen_range(0.1 * s..0.9 * s)))
        .collect();
    // 2 px wide at the default 64 px size; widened proportionally for large scenes so
    // the area floor stays reachable.
    let half_width = (size as f64 / 64.0).max(1.0);
    BinaryMask::from_fn(size, size, |p| {
        let q = (p.row as f64 + 0.5, p.col as f64 + 0.5);
        vertices.windows(2).any(|seg| segment_distance(q, seg[0], seg[1]) < half_width)
    })
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let len2 = abx * abx + aby * aby;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * abx + (p.1 - a.1) * aby) / len2).clamp(0.0, 1.0)
    };
    let (dx, dy) = (p.0 - (a.0 + t * abx), p.1 - (a.1 + t * aby));
    (dx * dx + dy * dy).sqrt()
}

/// One supervised example for the head: an image, a prompt set on it and the true mask.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub image: Image,
    pub prompts: PromptSet,
    pub gt_mask: BinaryMask,
}

/// How a training prompt set places its points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptStrategy {
    Random,
    Boundary,
    CenterBiased,
    Grid,
    Mixed,
    UncertaintySimulated,
}

impl PromptStrategy {
    pub const ALL: [PromptStrategy; 6] = [
        PromptStrategy::Random,
        PromptStrategy::Boundary,
        PromptStrategy::CenterBiased,
        PromptStrategy::Grid,
        PromptStrategy::Mixed,
        PromptStrategy::UncertaintySimulated,
    ];

    const MIXED_SOURCES: [PromptStrategy; 5] = [
        PromptStrategy::Random,
        PromptStrategy::Boundary,
        PromptStrategy::CenterBiased,
        PromptStrategy::Grid,
        PromptStrategy::UncertaintySimulated,
    ];
}

/// Pixels within this Euclidean distance of the mask boundary count as "near the boundary".
pub const BOUNDARY_BAND: f64 = 5.0;
const MIN_PROMPTS: usize = 3;
const MAX_PROMPTS: usize = 10;

struct PromptContext<'a> {
    gt: &'a BinaryMask,
    near_boundary: Vec<Pixel>,
    ambiguous: Vec<Pixel>,
    centroid: (f64, f64),
    sigma: f64,
}

impl<'a> PromptContext<'a> {
    fn new(image: &Image, gt: &'a BinaryMask) -> Self {
        let (h, w) = gt.shape();
        let boundary = boundary_pixels(gt);
        let band2 = BOUNDARY_BAND * BOUNDARY_BAND;
        let reach = BOUNDARY_BAND as isize;
        let mut is_boundary = vec![false; h * w];
        for b in &boundary {
            is_boundary[b.linear(w)] = true;
        }
        let near_boundary = (0..h * w)
            .map(|i| Pixel::from_linear(i, w))
            .filter(|&p| {
                window(p, reach, h, w).any(|q| is_boundary[q.linear(w)] && p.dist2(q) <= band2)
            })
            .collect();

        let (mut fg_sum, mut fg_n, mut bg_sum, mut bg_n) = (0.0, 0usize, 0.0, 0usize);
        let (mut cy, mut cx) = (0.0, 0.0);
        for (i, (&v, &fg)) in image.values().iter().zip(gt.bits()).enumerate() {
            if fg {
                fg_sum += v;
                fg_n += 1;
                let p = Pixel::from_linear(i, w);
                cy += p.row as f64;
                cx += p.col as f64;
            } else {
                bg_sum += v;
                bg_n += 1;
            }
        }
        let fg_mean = fg_sum / fg_n.max(1) as f64;
        let bg_mean = if bg_n == 0 { fg_mean } else { bg_sum / bg_n as f64 };
        let midpoint = 0.5 * (fg_mean + bg_mean);
        let ambiguous = image
            .values()
            .iter()
            .enumerate()
            .filter(|(_, &v)| (v - midpoint).abs() <= 0.1)
            .map(|(i, _)| Pixel::from_linear(i, w))
            .collect();

        PromptContext {
            gt,
            near_boundary,
            ambiguous,
            centroid: (cy / fg_n.max(1) as f64, cx / fg_n.max(1) as f64),
            sigma: h.max(w) as f64 / 8.0,
        }
    }

    fn random(&self, rng: &mut ChaCha8Rng) -> Pixel {
        let (h, w) = self.gt.shape();
        Pixel::new(rng.gen_range(0..h), rng.gen_range(0..w))
    }

    fn draw(&self, strategy: PromptStrategy, rng: &mut ChaCha8Rng) -> Option<Pixel> {
        let (h, w) = self.gt.shape();
        match strategy {
            PromptStrategy::Random => Some(self.random(rng)),
            PromptStrategy::Boundary => self.near_boundary.choose(rng).copied(),
            PromptStrategy::UncertaintySimulated => self.ambiguous.choose(rng).copied(),
            PromptStrategy::CenterBiased => {
                let normal = Normal::new(0.0, self.sigma).expect("positive sigma");
                (0..MAX_ATTEMPTS).find_map(|_| {
                    let r = (self.centroid.0 + normal.sample(rng)).round();
                    let c = (self.centroid.1 + normal.sample(rng)).round();
                    (r >= 0.0 && c >= 0.0 && (r as usize) < h && (c as usize) < w)
                        .then(|| Pixel::new(r as usize, c as usize))
                })
            }
            PromptStrategy::Grid | PromptStrategy::Mixed => None,
        }
    }

    fn sample_set(&self, strategy: PromptStrategy, count: usize, rng: &mut ChaCha8Rng) -> PromptSet {
        let mut picked: Vec<Pixel> = Vec::with_capacity(count);
        let mut lattice = grid_lattice(self.gt.shape(), count).into_iter();
        let mut turn = 0usize;
        let mut attempts = 0usize;
        while picked.len() < count {
            let source = match strategy {
                PromptStrategy::Mixed => {
                    let s = PromptStrategy::MIXED_SOURCES[turn % PromptStrategy::MIXED_SOURCES.len()];
                    turn += 1;
                    s
                }
                s => s,
            };
            let candidate = match source {
                PromptStrategy::Grid => lattice.next(),
                s => self.draw(s, rng),
            };
            attempts += 1;
            let p = match candidate {
                Some(p) if !picked.contains(&p) && attempts <= MAX_ATTEMPTS * count => p,
                _ => {
                    // Exhausted or unlucky: fall back to a uniform draw.
                    let mut p = self.random(rng);
                    while picked.contains(&p) {
                        p = self.random(rng);
                    }
                    p
                }
            };
            picked.push(p);
        }
        let mut set = PromptSet::new();
        for p in picked {
            set.push(Prompt::new(p, Label::from_mask(self.gt, p)))
                .expect("locations deduplicated above");
        }
        set
    }
}

fn window(p: Pixel, reach: isize, h: usize, w: usize) -> impl Iterator<Item = Pixel> {
    let (r0, c0) = (p.row as isize, p.col as isize);
    (r0 - reach..=r0 + reach).flat_map(move |r| {
        (c0 - reach..=c0 + reach).filter_map(move |c| {
            (r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w)
                .then(|| Pixel::new(r as usize, c as usize))
        })
    })
}

/// Mask pixels with at least one in-image 4-neighbour outside the mask.
pub fn boundary_pixels(mask: &BinaryMask) -> Vec<Pixel> {
    let (h, w) = mask.shape();
    mask.pixels()
        .filter(|&p| {
            neighbours4(p, h, w).any(|q| !mask.get(q))
        })
        .collect()
}

pub(crate) fn neighbours4(p: Pixel, h: usize, w: usize) -> impl Iterator<Item = Pixel> {
    let (r, c) = (p.row as isize, p.col as isize);
    [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]
        .into_iter()
        .filter(move |&(r, c)| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w)
        .map(|(r, c)| Pixel::new(r as usize, c as usize))
}

/// Evenly spaced cell centres of the smallest square lattice holding `count` points,
/// truncated to `count`.
fn grid_lattice((h, w): (usize, usize), count: usize) -> Vec<Pixel> {
    let side = (count as f64).sqrt().ceil() as usize;
    let mut points = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            let r = ((i as f64 + 0.5) * h as f64 / side as f64) as usize;
            let c = ((j as f64 + 0.5) * w as f64 / side as f64) as usize;
            points.push(Pixel::new(r.min(h - 1), c.min(w - 1)));
        }
    }
    points.truncate(count);
    points
}

/// Six prompt sets for one image, in [`PromptStrategy::ALL`] order, each holding
/// 3 to 10 prompts labelled from the ground truth.
pub fn generate_training_prompt_sets(image: &Image, gt: &BinaryMask, seed: u64) -> Result<Vec<PromptSet>> {
    ensure!(
        (image.height(), image.width()) == gt.shape(),
        "image and mask shapes differ"
    );
    ensure!(!gt.is_all_background(), "training prompts need a non-empty mask");
    let ctx = PromptContext::new(image, gt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(PromptStrategy::ALL
        .iter()
        .map(|&strategy| {
            let count = rng.gen_range(MIN_PROMPTS..=MAX_PROMPTS);
            ctx.sample_set(strategy, count, &mut rng)
        })
        .collect())
}

/// Expands scenes into training examples, one per prompt set.
pub fn training_examples(image: &Image, gt: &BinaryMask, seed: u64) -> Result<Vec<TrainingExample>> {
    Ok(generate_training_prompt_sets(image, gt, seed)?
        .into_iter()
        .map(|prompts| TrainingExample { image: image.clone(), prompts, gt_mask: gt.clone() })
        .collect())
}

pub const DEFAULT_SPLIT_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn assignment(&self, n: usize) -> Vec<SplitName> {
        let mut out = vec![SplitName::Test; n];
        for &i in &self.train {
            out[i] = SplitName::Train;
        }
        for &i in &self.val {
            out[i] = SplitName::Val;
        }
        out
    }
}

/// Seeded 70/15/15 partition of `0..n` (remainder goes to test).
pub fn split_dataset(n: usize, seed: u64) -> Result<Split> {
    ensure!(n >= 7, "need at least 7 items to split, got {n}");
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 7 / 10;
    let n_val = n * 15 / 100;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(Split { train: idx, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Counts unit edges between mask pixels and anything that is not mask
    /// (including the outside of the image).
    fn perimeter(mask: &BinaryMask) -> usize {
        let (h, w) = mask.shape();
        let mut edges = 0;
        for r in 0..h as isize {
            for c in 0..w as isize {
                if !mask.get(Pixel::new(r as usize, c as usize)) {
                    continue;
                }
                for (dr, dc) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                    let (nr, nc) = (r + dr, c + dc);
                    let outside = nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize;
                    if outside || !mask.get(Pixel::new(nr as usize, nc as usize)) {
                        edges += 1;
                    }
                }
            }
        }
        edges
    }

    #[test]
    fn scene_is_deterministic() {
        for profile in Profile::ALL {
            let spec = SceneSpec::new(profile, 7);
            assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
        }
    }

    #[test]
    fn thin_scenes_are_thin() {
        for seed in 0..100 {
            let (_, mask) = generate_scene(&SceneSpec::new(Profile::Thin, seed)).unwrap();
            let ratio = mask.count() as f64 / perimeter(&mask) as f64;
            assert!(ratio < 2.0, "seed {seed}: area/perimeter {ratio}");
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = SceneSpec::new(Profile::Blobs, 0);
        spec.foreground_mean = spec.background_mean;
        assert!(generate_scene(&spec).is_err());
        let mut spec = SceneSpec::new(Profile::Blobs, 0);
        spec.noise_sigma = -1.0;
        assert!(generate_scene(&spec).is_err());
    }

    #[test]
    fn unsatisfiable_scene_errors() {
        let spec = SceneSpec::new(Profile::Thin, 3);
        let err = generate_scene_within(&spec, 0.95..=1.0).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
    }

    #[test]
    fn prompt_sets_follow_rules() {
        for profile in Profile::ALL {
            for seed in 0..10 {
                let (image, gt) = generate_scene(&SceneSpec::new(profile, seed)).unwrap();
                let sets = generate_training_prompt_sets(&image, &gt, seed + 100).unwrap();
                assert_eq!(sets.len(), 6);
                let boundary = boundary_pixels(&gt);
                for (strategy, set) in PromptStrategy::ALL.iter().zip(&sets) {
                    assert!((3..=10).contains(&set.len()));
                    for p in set.prompts() {
                        assert_eq!(p.label, Label::from_mask(&gt, p.location));
                    }
                    if *strategy == PromptStrategy::Boundary {
                        for p in set.locations() {
                            let near = boundary.iter().any(|&b| p.dist2(b) <= 25.0);
                            assert!(near, "{p} not within 5 px of the boundary");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn empty_gt_rejected() {
        let image = Image::uniform(16, 16, 0.3).unwrap();
        assert!(generate_training_prompt_sets(&image, &BinaryMask::empty(16, 16), 0).is_err());
    }

    #[test]
    fn grid_lattice_is_even() {
        let pts = grid_lattice((64, 64), 4);
        assert_eq!(pts, vec![Pixel::new(16, 16), Pixel::new(16, 48), Pixel::new(48, 16), Pixel::new(48, 48)]);
        assert_eq!(grid_lattice((64, 64), 5).len(), 5);
    }

    #[test]
    fn split_sizes() {
        let s = split_dataset(20, 42).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (14, 3, 3));
        let s = split_dataset(100, DEFAULT_SPLIT_SEED).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
        assert_eq!(s, split_dataset(100, 42).unwrap());
        assert!(split_dataset(6, 42).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn scenes_respect_area_bounds(seed in any::<u64>(), which in 0usize..3) {
            let spec = SceneSpec::new(Profile::ALL[which], seed);
            let (image, mask) = generate_scene(&spec).unwrap();
            prop_assert_eq!((image.height(), image.width()), (64, 64));
            prop_assert_eq!(mask.shape(), (64, 64));
            prop_assert!((MIN_AREA..=MAX_AREA).contains(&mask.area_fraction()));
        }

        #[test]
        fn split_partitions(n in 7usize..300, seed in any::<u64>()) {
            let s = split_dataset(n, seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(s.train.len(), n * 7 / 10);
            prop_assert_eq!(s.val.len(), n * 15 / 100);
        }
    }
}
