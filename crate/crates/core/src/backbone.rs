//! The frozen promptable segmenter.
//!
//! [`ToyBackbone`] stands in for a large pretrained model: a fixed bank of
//! image filters plus prompt-influence channels, and a kernel-weighted vote
//! of the prompts for the mask itself. Nothing here is trained. Anything that
//! implements [`PromptableSegmenter`] can replace it.

use crate::domain::{BinaryMask, Image, Pixel, PromptSet};
use crate::error::{ensure, Result};

/// Channel count of every feature map the backbone emits.
pub const FEATURE_CHANNELS: usize = 32;

/// Prompt-count normalizer for the count channels.
const COUNT_SCALE: f64 = 15.0;
const INFLUENCE_SIGMAS: [f64; 4] = [4.0, 8.0, 16.0, 32.0];
const BLUR_SIGMAS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
const FEATURE_SIMILARITY_SIGMA: f64 = 0.1;

pub mod channel {
    pub const INTENSITY: usize = 0;
    pub const BLUR: usize = 1;
    pub const GRADIENT: usize = 5;
    pub const LOCAL_VARIANCE: usize = 7;
    pub const INCLUDE_INFLUENCE: usize = 8;
    pub const INCLUDE_SIMILAR: usize = 12;
    pub const EXCLUDE_INFLUENCE: usize = 16;
    pub const EXCLUDE_SIMILAR: usize = 20;
    pub const ROW: usize = 24;
    pub const COL: usize = 25;
    pub const INCLUDE_DISTANCE: usize = 26;
    pub const EXCLUDE_DISTANCE: usize = 27;
    pub const INCLUDE_COUNT: usize = 28;
    pub const EXCLUDE_COUNT: usize = 29;
    pub const SCORE: usize = 30;
    pub const BIAS: usize = 31;
}

/// Channel-major stack of `channels` planes, each `height * width` row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == channels * height * width,
            "feature data has {} values for {channels}x{height}x{width}",
            data.len()
        );
        ensure!(data.iter().all(|v| v.is_finite()), "feature values must be finite");
        Ok(FeatureMap { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, p: Pixel) -> f64 {
        self.plane(c)[p.linear(self.width)]
    }
}

/// Everything the backbone says about one (image, prompts) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneOutput {
    pub features: FeatureMap,
    pub mask: BinaryMask,
    pub score_map: Vec<f64>,
}

/// A frozen segmenter conditioned on point prompts. Implementations must be
/// pure: the same inputs give bit-identical outputs.
pub trait PromptableSegmenter: Send + Sync {
    fn compute_features(&self, image: &Image, prompts: &PromptSet) -> Result<FeatureMap>;

    fn predict_mask(&self, image: &Image, prompts: &PromptSet) -> Result<BackboneOutput>;

    /// Channels that depend on the image alone, never on the prompts.
    /// Downstream code may cache work on them.
    fn prompt_independent_channels(&self) -> Vec<usize> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyBackbone {
    /// Spatial reach of a prompt's vote, in pixels.
    pub sigma_spatial: f64,
    /// Intensity tolerance of a prompt's vote.
    pub sigma_intensity: f64,
    /// Vote threshold for a pixel to enter the mask.
    pub threshold: f64,
}

impl Default for ToyBackbone {
    fn default() -> Self {
        ToyBackbone { sigma_spatial: 24.0, sigma_intensity: 0.1, threshold: 0.05 }
    }
}

impl ToyBackbone {
    /// Vote weight of a prompt at `p` on pixel `q`.
    pub fn affinity(&self, image: &Image, q: Pixel, p: Pixel) -> f64 {
        let di = image.get(q) - image.get(p);
        (-q.dist2(p) / (2.0 * self.sigma_spatial * self.sigma_spatial)).exp()
            * (-di * di / (2.0 * self.sigma_intensity * self.sigma_intensity)).exp()
    }

    /// Net prompt vote at every pixel: inclusion affinities minus exclusion affinities.
    pub fn score_map_from(&self, image: &Image, inclusions: &[Pixel], exclusions: &[Pixel]) -> Vec<f64> {
        let w = image.width();
        (0..image.len())
            .map(|i| {
                let q = Pixel::from_linear(i, w);
                inclusions.iter().map(|&p| self.affinity(image, q, p)).sum::<f64>()
                    - exclusions.iter().map(|&p| self.affinity(image, q, p)).sum::<f64>()
            })
            .collect()
    }

    pub fn score_map(&self, image: &Image, prompts: &PromptSet) -> Vec<f64> {
        let inc: Vec<Pixel> = prompts.inclusions().collect();
        let exc: Vec<Pixel> = prompts.exclusions().collect();
        self.score_map_from(image, &inc, &exc)
    }

    fn check_prompts(image: &Image, prompts: &PromptSet) -> Result<()> {
        for p in prompts.locations() {
            ensure!(
                p.in_bounds(image.height(), image.width()),
                "prompt {p} outside {}x{} image",
                image.height(),
                image.width()
            );
        }
        Ok(())
    }

    fn features_with_score(&self, image: &Image, prompts: &PromptSet, score: &[f64]) -> FeatureMap {
        let (h, w) = (image.height(), image.width());
        let mut fm = FeatureMap::zeros(FEATURE_CHANNELS, h, w);
        let intensity = image.values();

        fm.plane_mut(channel::INTENSITY).copy_from_slice(intensity);
        for (k, &sigma) in BLUR_SIGMAS.iter().enumerate() {
            let blurred = gaussian_blur(intensity, h, w, sigma);
            if k < 2 {
                let grad = gradient_magnitude(&blurred, h, w);
                fm.plane_mut(channel::GRADIENT + k).copy_from_slice(&grad);
            }
            fm.plane_mut(channel::BLUR + k).copy_from_slice(&blurred);
        }
        let var = local_variance(intensity, h, w, 2);
        fm.plane_mut(channel::LOCAL_VARIANCE).copy_from_slice(&var);

        let inc: Vec<Pixel> = prompts.inclusions().collect();
        let exc: Vec<Pixel> = prompts.exclusions().collect();
        for (group, base_inf, base_sim) in [
            (&inc, channel::INCLUDE_INFLUENCE, channel::INCLUDE_SIMILAR),
            (&exc, channel::EXCLUDE_INFLUENCE, channel::EXCLUDE_SIMILAR),
        ] {
            if group.is_empty() {
                continue;
            }
            let planes = INFLUENCE_SIGMAS.len();
            let (mut influence, mut similar) = (vec![0.0; planes * h * w], vec![0.0; planes * h * w]);
            let widest = INFLUENCE_SIGMAS[planes - 1];
            for i in 0..h * w {
                let q = Pixel::from_linear(i, w);
                for &p in group.iter() {
                    let di = intensity[i] - image.get(p);
                    let sim = (-di * di / (2.0 * FEATURE_SIMILARITY_SIGMA * FEATURE_SIMILARITY_SIGMA)).exp();
                    // Each sigma is half the next, so its kernel is the fourth power of the next one's.
                    let mut spatial = (-q.dist2(p) / (2.0 * widest * widest)).exp();
                    for k in (0..planes).rev() {
                        let at = k * h * w + i;
                        influence[at] = f64::max(influence[at], spatial);
                        similar[at] = f64::max(similar[at], spatial * sim);
                        spatial = (spatial * spatial) * (spatial * spatial);
                    }
                }
            }
            for k in 0..planes {
                fm.plane_mut(base_inf + k).copy_from_slice(&influence[k * h * w..(k + 1) * h * w]);
                fm.plane_mut(base_sim + k).copy_from_slice(&similar[k * h * w..(k + 1) * h * w]);
            }
        }

        let diag = ((h * h + w * w) as f64).sqrt();
        for i in 0..h * w {
            let q = Pixel::from_linear(i, w);
            fm.plane_mut(channel::ROW)[i] = q.row as f64 / (h - 1).max(1) as f64;
            fm.plane_mut(channel::COL)[i] = q.col as f64 / (w - 1).max(1) as f64;
            for (group, ch) in [(&inc, channel::INCLUDE_DISTANCE), (&exc, channel::EXCLUDE_DISTANCE)] {
                let d = group
                    .iter()
                    .map(|&p| q.dist2(p))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt();
                fm.plane_mut(ch)[i] = (d / diag).min(1.0);
            }
        }
        fm.plane_mut(channel::INCLUDE_COUNT).fill(inc.len() as f64 / COUNT_SCALE);
        fm.plane_mut(channel::EXCLUDE_COUNT).fill(exc.len() as f64 / COUNT_SCALE);
        // Squashed so the vote stays in range however many prompts pile up.
        for (f, &v) in fm.plane_mut(channel::SCORE).iter_mut().zip(score) {
            *f = v.tanh();
        }
        fm.plane_mut(channel::BIAS).fill(1.0);
        fm
    }
}

impl PromptableSegmenter for ToyBackbone {
    fn compute_features(&self, image: &Image, prompts: &PromptSet) -> Result<FeatureMap> {
        Self::check_prompts(image, prompts)?;
        let score = self.score_map(image, prompts);
        Ok(self.features_with_score(image, prompts, &score))
    }

    fn predict_mask(&self, image: &Image, prompts: &PromptSet) -> Result<BackboneOutput> {
        Self::check_prompts(image, prompts)?;
        let score = self.score_map(image, prompts);
        let any_inclusion = prompts.inclusions().next().is_some();
        let bits = score.iter().map(|&s| any_inclusion && s > self.threshold).collect();
        let mask = BinaryMask::new(image.height(), image.width(), bits)?;
        let features = self.features_with_score(image, prompts, &score);
        Ok(BackboneOutput { features, mask, score_map: score })
    }

    fn prompt_independent_channels(&self) -> Vec<usize> {
        let mut v: Vec<usize> = (channel::INTENSITY..channel::INCLUDE_INFLUENCE).collect();
        v.extend([channel::ROW, channel::COL, channel::BIAS]);
        v
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian blur with edge replication.
fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| kv * src[r * w + clampi(c as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| kv * tmp[clampi(r as isize + k as isize - radius, h) * w + c])
                .sum();
        }
    }
    out
}

/// Central-difference gradient magnitude, one-sided at the borders.
fn gradient_magnitude(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |r: usize, c: usize| src[r * w + c];
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (r0, r1) = (r.saturating_sub(1), (r + 1).min(h - 1));
            let (c0, c1) = (c.saturating_sub(1), (c + 1).min(w - 1));
            let gy = (at(r1, c) - at(r0, c)) / (r1 - r0).max(1) as f64;
            let gx = (at(r, c1) - at(r, c0)) / (c1 - c0).max(1) as f64;
            out[r * w + c] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Variance over the in-image part of a `(2 * reach + 1)` square window.
fn local_variance(src: &[f64], h: usize, w: usize, reach: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (mut sum, mut sq, mut n) = (0.0, 0.0, 0.0);
            for rr in r.saturating_sub(reach)..=(r + reach).min(h - 1) {
                for cc in c.saturating_sub(reach)..=(c + reach).min(w - 1) {
                    let v = src[rr * w + cc];
                    sum += v;
                    sq += v * v;
                    n += 1.0;
                }
            }
            let mean = sum / n;
            out[r * w + c] = (sq / n - mean * mean).max(0.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Prompt;
    use crate::synth::{generate_scene, Profile, SceneSpec};
    use proptest::prelude::*;

    fn scene() -> Image {
        generate_scene(&SceneSpec::new(Profile::Blobs, 11)).unwrap().0
    }

    #[test]
    fn empty_prompt_channels() {
        let fm = ToyBackbone::default().compute_features(&scene(), &PromptSet::new()).unwrap();
        assert_eq!(fm.channels(), 32);
        for c in 8..24 {
            assert!(fm.plane(c).iter().all(|&v| v == 0.0), "channel {c}");
        }
        assert!(fm.plane(channel::INCLUDE_DISTANCE).iter().all(|&v| v == 1.0));
        assert!(fm.plane(channel::EXCLUDE_DISTANCE).iter().all(|&v| v == 1.0));
        assert!(fm.plane(channel::INCLUDE_COUNT).iter().all(|&v| v == 0.0));
        assert!(fm.plane(channel::SCORE).iter().all(|&v| v == 0.0));
        assert!(fm.plane(channel::BIAS).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_inclusion_kernel_peaks() {
        let q0 = Pixel::new(20, 30);
        let prompts = PromptSet::seeded([Prompt::new(q0, crate::domain::Label::Include)]).unwrap();
        let fm = ToyBackbone::default().compute_features(&scene(), &prompts).unwrap();
        assert_eq!(fm.get(channel::INCLUDE_INFLUENCE, q0), 1.0);

        let flat = Image::uniform(32, 32, 0.4).unwrap();
        let fm = ToyBackbone::default().compute_features(&flat, &prompts).unwrap();
        assert_eq!(fm.get(channel::INCLUDE_SIMILAR, q0), 1.0);
        assert_eq!(fm.get(channel::INCLUDE_DISTANCE, q0), 0.0);
        assert!(fm.plane(channel::EXCLUDE_INFLUENCE).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn no_prompts_no_mask() {
        let out = ToyBackbone::default().predict_mask(&scene(), &PromptSet::new()).unwrap();
        assert!(out.mask.is_all_background());
    }

    #[test]
    fn exclusions_alone_give_empty_mask() {
        let mut prompts = PromptSet::new();
        prompts.push(Prompt::exclude(3, 3)).unwrap();
        let out = ToyBackbone::default().predict_mask(&scene(), &prompts).unwrap();
        assert!(out.mask.is_all_background());
    }

    #[test]
    fn uniform_image_single_prompt_gives_disk() {
        let bb = ToyBackbone::default();
        // exp(-r^2 / (2 * 24^2)) = 0.05  =>  r = 24 * sqrt(2 ln 20)
        let radius = 24.0 * (2.0 * 20f64.ln()).sqrt();
        assert!((radius - 58.745_923_936).abs() < 1e-6);
        let image = Image::uniform(128, 128, 0.5).unwrap();
        let q0 = Pixel::new(10, 100);
        let mut prompts = PromptSet::new();
        prompts.push(Prompt::new(q0, crate::domain::Label::Include)).unwrap();
        let out = bb.predict_mask(&image, &prompts).unwrap();
        for i in 0..128 * 128 {
            let q = Pixel::from_linear(i, 128);
            let inside = q.dist2(q0).sqrt() < radius;
            assert_eq!(out.mask.get(q), inside, "pixel {q}");
        }
    }

    #[test]
    fn coincident_prompts_cancel() {
        let bb = ToyBackbone::default();
        let image = scene();
        let q = Pixel::new(12, 12);
        let s = bb.score_map_from(&image, &[q], &[q]);
        assert_eq!(s[q.linear(image.width())], 0.0);
        assert!(s[q.linear(image.width())] <= bb.threshold);
    }

    #[test]
    fn prompts_out_of_bounds_rejected() {
        let mut prompts = PromptSet::new();
        prompts.push(Prompt::include(70, 0)).unwrap();
        assert!(ToyBackbone::default().predict_mask(&scene(), &prompts).is_err());
    }

    #[test]
    fn blur_preserves_constants() {
        let src = vec![0.25; 12 * 9];
        for s in BLUR_SIGMAS {
            for v in gaussian_blur(&src, 12, 9, s) {
                assert!((v - 0.25).abs() < 1e-12);
            }
        }
        assert!(gradient_magnitude(&src, 12, 9).iter().all(|&g| g == 0.0));
        assert!(local_variance(&src, 12, 9, 2).iter().all(|&g| g.abs() < 1e-15));
    }

    fn arb_prompts() -> impl Strategy<Value = Vec<(usize, usize, bool)>> {
        proptest::collection::vec((0usize..64, 0usize..64, any::<bool>()), 0..6)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn backbone_is_pure_and_shaped(raw in arb_prompts()) {
            let image = scene();
            let mut prompts = PromptSet::new();
            for (r, c, inc) in raw {
                let label = if inc { crate::domain::Label::Include } else { crate::domain::Label::Exclude };
                let _ = prompts.push(Prompt::new(Pixel::new(r, c), label));
            }
            let bb = ToyBackbone::default();
            let a = bb.predict_mask(&image, &prompts).unwrap();
            let b = bb.predict_mask(&image, &prompts).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.features.channels(), 32);
            prop_assert_eq!(a.features.pixels(), 64 * 64);
            prop_assert_eq!(&a.features, &bb.compute_features(&image, &prompts).unwrap());
        }

        #[test]
        fn prompt_response_is_monotone(raw in arb_prompts(), r in 0usize..64, c in 0usize..64) {
            let image = scene();
            let bb = ToyBackbone::default();
            let inc: Vec<Pixel> = raw.iter().filter(|t| t.2).map(|t| Pixel::new(t.0, t.1)).collect();
            let exc: Vec<Pixel> = raw.iter().filter(|t| !t.2).map(|t| Pixel::new(t.0, t.1)).collect();
            let base = bb.score_map_from(&image, &inc, &exc);
            let mut more_inc = inc.clone();
            more_inc.push(Pixel::new(r, c));
            let up = bb.score_map_from(&image, &more_inc, &exc);
            let mut more_exc = exc.clone();
            more_exc.push(Pixel::new(r, c));
            let down = bb.score_map_from(&image, &inc, &more_exc);
            for i in 0..base.len() {
                prop_assert!(up[i] >= base[i]);
                prop_assert!(down[i] <= base[i]);
            }
        }
    }
}
