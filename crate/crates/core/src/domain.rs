//! Value types shared by every stage of the pipeline, plus the two pieces of
//! pixel-grid math everything else leans on: IoU and binary entropy.
//!
//! All grids are row-major; a location is an integer `(row, col)` pair.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};

/// Clamp applied to every probability before a logarithm is taken.
pub const PROB_EPS: f64 = 1e-7;

/// Smallest accepted image side.
pub const MIN_IMAGE_SIDE: usize = 8;

/// An integer pixel location. Serializes as `[row, col]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Pixel {
    pub row: usize,
    pub col: usize,
}

impl Pixel {
    pub const fn new(row: usize, col: usize) -> Self {
        Pixel { row, col }
    }

    /// Row-major linear index on a grid of the given width.
    pub fn linear(self, width: usize) -> usize {
        self.row * width + self.col
    }

    pub fn from_linear(index: usize, width: usize) -> Self {
        Pixel::new(index / width, index % width)
    }

    pub fn in_bounds(self, height: usize, width: usize) -> bool {
        self.row < height && self.col < width
    }

    pub fn dist2(self, other: Pixel) -> f64 {
        let dr = self.row as f64 - other.row as f64;
        let dc = self.col as f64 - other.col as f64;
        dr * dr + dc * dc
    }
}

impl From<[usize; 2]> for Pixel {
    fn from([row, col]: [usize; 2]) -> Self {
        Pixel { row, col }
    }
}

impl From<Pixel> for [usize; 2] {
    fn from(p: Pixel) -> Self {
        [p.row, p.col]
    }
}

impl std::fmt::Display for Pixel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

/// Grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        ensure!(
            height >= MIN_IMAGE_SIDE && width >= MIN_IMAGE_SIDE,
            "image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {height}x{width}"
        );
        ensure!(
            values.len() == height * width,
            "image has {} values for a {height}x{width} grid",
            values.len()
        );
        ensure!(
            values.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)),
            "image intensities must be finite and within [0, 1]"
        );
        Ok(Image { height, width, values })
    }

    pub fn uniform(height: usize, width: usize, value: f64) -> Result<Self> {
        Image::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, p: Pixel) -> f64 {
        self.values[p.linear(self.width)]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Foreground/background bitmap.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        ensure!(
            bits.len() == height * width,
            "mask has {} values for a {height}x{width} grid",
            bits.len()
        );
        Ok(BinaryMask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask { height, width, bits: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(Pixel) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(Pixel::from_linear(i, width))).collect();
        BinaryMask { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, p: Pixel) -> bool {
        self.bits[p.linear(self.width)]
    }

    pub fn set(&mut self, p: Pixel, value: bool) {
        let i = p.linear(self.width);
        self.bits[i] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }

    pub fn is_all_background(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Lowercase hex SHA-256 over the row-major mask bytes (one byte per pixel, 0 or 1).
    pub fn sha256(&self) -> String {
        let bytes: Vec<u8> = self.bits.iter().map(|&b| b as u8).collect();
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn pixels(&self) -> impl Iterator<Item = Pixel> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| Pixel::from_linear(i, w))
    }
}

/// Prompt polarity: a point inside (`Include`) or outside (`Exclude`) the object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Exclude,
    Include,
}

impl Label {
    pub fn bit(self) -> u8 {
        match self {
            Label::Exclude => 0,
            Label::Include => 1,
        }
    }

    pub fn from_mask(mask: &BinaryMask, p: Pixel) -> Label {
        if mask.get(p) {
            Label::Include
        } else {
            Label::Exclude
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            0 => Ok(Label::Exclude),
            1 => Ok(Label::Include),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.bit()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub location: Pixel,
    pub label: Label,
}

impl Prompt {
    pub fn new(location: Pixel, label: Label) -> Self {
        Prompt { location, label }
    }

    pub fn include(row: usize, col: usize) -> Self {
        Prompt::new(Pixel::new(row, col), Label::Include)
    }

    pub fn exclude(row: usize, col: usize) -> Self {
        Prompt::new(Pixel::new(row, col), Label::Exclude)
    }
}

/// Ordered prompt history. Locations are unique.
///
/// `iteration()` counts prompts added after construction, so a set built
/// with [`PromptSet::seeded`] starts at iteration 0 even when non-empty.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptSet {
    prompts: Vec<Prompt>,
    seeded: usize,
}

impl PromptSet {
    pub fn new() -> Self {
        PromptSet::default()
    }

    pub fn seeded(prompts: impl IntoIterator<Item = Prompt>) -> Result<Self> {
        let mut set = PromptSet::new();
        for p in prompts {
            set.push(p)?;
        }
        set.seeded = set.prompts.len();
        Ok(set)
    }

    pub fn push(&mut self, prompt: Prompt) -> Result<()> {
        ensure!(
            !self.contains(prompt.location),
            "a prompt already exists at {}",
            prompt.location
        );
        self.prompts.push(prompt);
        Ok(())
    }

    /// Like [`push`](Self::push) but also checks the location against a grid.
    pub fn push_within(&mut self, prompt: Prompt, height: usize, width: usize) -> Result<()> {
        ensure!(
            prompt.location.in_bounds(height, width),
            "prompt {} outside {height}x{width} image",
            prompt.location
        );
        self.push(prompt)
    }

    pub fn contains(&self, location: Pixel) -> bool {
        self.prompts.iter().any(|p| p.location == location)
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn iteration(&self) -> usize {
        self.prompts.len() - self.seeded
    }

    pub fn inclusions(&self) -> impl Iterator<Item = Pixel> + '_ {
        self.prompts.iter().filter(|p| p.label == Label::Include).map(|p| p.location)
    }

    pub fn exclusions(&self) -> impl Iterator<Item = Pixel> + '_ {
        self.prompts.iter().filter(|p| p.label == Label::Exclude).map(|p| p.location)
    }

    pub fn locations(&self) -> impl Iterator<Item = Pixel> + '_ {
        self.prompts.iter().map(|p| p.location)
    }
}

/// Pixelwise foreground probabilities, clamped to `[PROB_EPS, 1 - PROB_EPS]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        ensure!(
            values.len() == height * width,
            "probability map has {} values for a {height}x{width} grid",
            values.len()
        );
        ensure!(values.iter().all(|v| !v.is_nan()), "probability map contains NaN");
        let values = values.into_iter().map(clamp_prob).collect();
        Ok(ProbabilityMap { height, width, values })
    }

    pub fn constant(height: usize, width: usize, p: f64) -> Self {
        ProbabilityMap { height, width, values: vec![clamp_prob(p); height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, p: Pixel) -> f64 {
        self.values[p.linear(self.width)]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn threshold(&self, at: f64) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.values.iter().map(|&v| v > at).collect(),
        }
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Intersection over union. Two empty masks score 1.0.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "iou of {:?} and {:?} masks",
            a.shape(),
            b.shape()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Binary entropy in nats, with `p` clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub fn binary_entropy(p: f64) -> f64 {
    let p = clamp_prob(p);
    let q = 1.0 - p;
    -(p * p.ln()) - q * q.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::empty(h, w);
        for &(r, c) in on {
            m.set(Pixel::new(r, c), true);
        }
        m
    }

    #[test]
    fn iou_cases() {
        let a = mask(4, 4, &[(0, 0), (1, 1)]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = mask(4, 4, &[(3, 3)]);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        let top = mask(2, 2, &[(0, 0), (0, 1)]);
        let left = mask(2, 2, &[(0, 0), (1, 0)]);
        assert!((iou(&top, &left).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&BinaryMask::empty(3, 3), &BinaryMask::empty(3, 3)).unwrap(), 1.0);
    }

    #[test]
    fn iou_shape_mismatch() {
        let err = iou(&BinaryMask::empty(2, 3), &BinaryMask::empty(3, 2)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn entropy_values() {
        assert!((binary_entropy(0.5) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(binary_entropy(0.0) <= 2e-6);
        assert!(binary_entropy(1.0) <= 2e-6);
        // -0.9 ln 0.9 - 0.1 ln 0.1 evaluated with mpmath at 30 digits.
        assert!((binary_entropy(0.9) - 0.325_082_973_391_448_2).abs() < 1e-12);
    }

    #[test]
    fn prompt_set_rejects_duplicates() {
        let mut s = PromptSet::new();
        s.push(Prompt::include(1, 1)).unwrap();
        assert!(s.push(Prompt::exclude(1, 1)).is_err());
        assert_eq!(s.iteration(), 1);
        assert!(s.push_within(Prompt::include(9, 0), 8, 8).is_err());
    }

    #[test]
    fn seeded_prompt_set_starts_at_zero() {
        let s = PromptSet::seeded([Prompt::include(0, 0), Prompt::exclude(2, 2)]).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.iteration(), 0);
    }

    #[test]
    fn image_validation() {
        assert!(Image::uniform(7, 8, 0.5).is_err());
        assert!(Image::new(8, 8, vec![1.5; 64]).is_err());
        assert!(Image::new(8, 8, vec![f64::NAN; 64]).is_err());
        assert!(Image::uniform(8, 8, 0.5).is_ok());
    }

    #[test]
    fn label_json() {
        assert_eq!(serde_json::to_string(&Label::Include).unwrap(), "1");
        assert!(serde_json::from_str::<Label>("2").is_err());
        assert_eq!(serde_json::to_string(&Pixel::new(3, 4)).unwrap(), "[3,4]");
    }

    fn arb_mask() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            (
                proptest::collection::vec(any::<bool>(), h * w),
                proptest::collection::vec(any::<bool>(), h * w),
            )
                .prop_map(move |(a, b)| {
                    (BinaryMask::new(h, w, a).unwrap(), BinaryMask::new(h, w, b).unwrap())
                })
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_reflexive((a, b) in arb_mask()) {
            let ab = iou(&a, &b).unwrap();
            prop_assert_eq!(ab, iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn entropy_symmetric_bounded(p in 0.0f64..=1.0) {
            let h = binary_entropy(p);
            prop_assert!((h - binary_entropy(1.0 - p)).abs() < 1e-12);
            prop_assert!(h >= 0.0);
            prop_assert!(h <= std::f64::consts::LN_2 + 1e-15);
        }

        #[test]
        fn distinct_prompts_count(n in 0usize..40) {
            let mut s = PromptSet::new();
            for i in 0..n {
                s.push(Prompt::include(i / 8, i % 8)).unwrap();
            }
            prop_assert_eq!(s.iteration(), n);
        }
    }
}
