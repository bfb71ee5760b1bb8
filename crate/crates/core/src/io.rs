//! On-disk formats: PGM scenes, the dataset manifest, binary head and
//! posterior files, and score-map exports.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{GrayImage, ImageEncoder, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::acquisition::ScoreMap;
use crate::domain::{BinaryMask, Image};
use crate::error::{Error, Result};
use crate::head::{Architecture, HeadParams, LaplacePosterior};
use crate::synth::{
    generate_scene, split_dataset, training_examples, Profile, SceneSpec, SplitName, TrainingExample, DEFAULT_SPLIT_SEED,
};

pub const HEAD_MAGIC: &[u8; 4] = b"BHD1";
pub const POSTERIOR_MAGIC: &[u8; 4] = b"BLP1";
pub const MANIFEST_FILE: &str = "manifest.json";

fn encode_pgm(width: usize, height: usize, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(bytes, width as u32, height as u32, image::ExtendedColorType::L8)?;
    Ok(out)
}

fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Pnm)?.to_luma8())
}

fn quantize(image: &Image) -> Vec<u8> {
    image.values().iter().map(|v| (v * 255.0).round() as u8).collect()
}

/// 8-bit binary PGM, `round(255 * intensity)`.
pub fn image_to_pgm(image: &Image) -> Result<Vec<u8>> {
    encode_pgm(image.width(), image.height(), &quantize(image))
}

/// 8-bit binary PGM with values 0 and 255.
pub fn mask_to_pgm(mask: &BinaryMask) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode_pgm(mask.width(), mask.height(), &bytes)
}

pub fn image_from_pgm(bytes: &[u8]) -> Result<Image> {
    let g = decode_pgm(bytes)?;
    let values = g.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
    Image::new(g.height() as usize, g.width() as usize, values)
}

/// Rejects anything other than 0 and 255.
pub fn mask_from_pgm(bytes: &[u8]) -> Result<BinaryMask> {
    let g = decode_pgm(bytes)?;
    let bits = g
        .as_raw()
        .iter()
        .map(|&v| match v {
            0 => Ok(false),
            255 => Ok(true),
            other => Err(Error::Format(format!("mask value {other} is neither 0 nor 255"))),
        })
        .collect::<Result<Vec<_>>>()?;
    BinaryMask::new(g.height() as usize, g.width() as usize, bits)
}

pub fn read_image(path: &Path) -> Result<Image> {
    image_from_pgm(&fs::read(path)?)
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    mask_from_pgm(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    /// Scene profile the item was generated from; reports are grouped by it.
    pub dataset: String,
    /// Relative to the manifest's directory.
    pub image_path: String,
    pub mask_path: String,
    pub split: SplitName,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub items: Vec<ManifestItem>,
}

/// A dataset directory: its manifest plus the directory paths resolve against.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

/// A loaded scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub dataset: String,
    pub split: SplitName,
    pub image: Image,
    pub gt: BinaryMask,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let text = fs::read_to_string(root.join(MANIFEST_FILE))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        Ok(Dataset { root: root.to_path_buf(), manifest })
    }

    pub fn item(&self, id: &str) -> Option<&ManifestItem> {
        self.manifest.items.iter().find(|i| i.id == id)
    }

    /// Distinct dataset names, sorted.
    pub fn dataset_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.manifest.items.iter().map(|i| i.dataset.clone()).collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn load(&self, item: &ManifestItem) -> Result<Scene> {
        Ok(Scene {
            id: item.id.clone(),
            dataset: item.dataset.clone(),
            split: item.split,
            image: read_image(&self.root.join(&item.image_path))?,
            gt: read_mask(&self.root.join(&item.mask_path))?,
        })
    }

    /// Every scene in manifest order, optionally restricted to one split.
    pub fn scenes(&self, split: Option<SplitName>) -> Result<Vec<Scene>> {
        self.manifest
            .items
            .iter()
            .filter(|i| split.map_or(true, |s| i.split == s))
            .map(|i| self.load(i))
            .collect()
    }

    /// Prompted training examples from the train split and the val split.
    /// Every scene's prompt sets are drawn with `seed`.
    pub fn training_sets(&self, seed: u64) -> Result<(Vec<TrainingExample>, Vec<TrainingExample>)> {
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for scene in self.scenes(None)? {
            match scene.split {
                SplitName::Train => train.extend(training_examples(&scene.image, &scene.gt, seed)?),
                SplitName::Val => val.extend(training_examples(&scene.image, &scene.gt, seed)?),
                SplitName::Test => {}
            }
        }
        Ok((train, val))
    }
}

/// Seed of the `index`-th scene of `profile` in a generated dataset.
pub fn scene_seed(seed: u64, profile: Profile, index: usize) -> u64 {
    let p = Profile::ALL.iter().position(|&x| x == profile).expect("known profile") as u64;
    seed.wrapping_mul(1_000_003).wrapping_add(p * 100_000 + index as u64)
}

/// Generates `scenes` scenes per profile into `root` (PGM files plus manifest)
/// and assigns a seeded 70/15/15 split over all of them.
pub fn write_dataset(root: &Path, profiles: &[Profile], scenes: usize, seed: u64, size: usize) -> Result<Manifest> {
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("masks"))?;
    let mut items = Vec::new();
    for &profile in profiles {
        for i in 0..scenes {
            let spec = SceneSpec::new(profile, scene_seed(seed, profile, i)).with_size(size);
            let (image, mask) = generate_scene(&spec)?;
            let id = format!("{}-{i:04}", profile.name());
            let image_path = format!("images/{id}.pgm");
            let mask_path = format!("masks/{id}.pgm");
            fs::write(root.join(&image_path), image_to_pgm(&image)?)?;
            fs::write(root.join(&mask_path), mask_to_pgm(&mask)?)?;
            items.push(ManifestItem { id, dataset: profile.name().to_string(), image_path, mask_path, split: SplitName::Test });
        }
    }
    if items.len() >= 7 {
        let split = split_dataset(items.len(), DEFAULT_SPLIT_SEED)?;
        let assignment = split.assignment(items.len());
        for (item, s) in items.iter_mut().zip(assignment) {
            item.split = s;
        }
    }
    let manifest = Manifest { items };
    fs::write(root.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::Format(format!("truncated file: {e}")))?;
    Ok(buf)
}

fn f32_le(v: f64) -> [u8; 4] {
    (v.clamp(f64::from(f32::MIN), f64::from(f32::MAX)) as f32).to_le_bytes()
}

/// `BHD1`, layer count, channel counts, parameter count, parameters as f32 (little-endian).
pub fn write_head(params: &HeadParams, out: &mut impl Write) -> Result<()> {
    let arch = params.architecture();
    out.write_all(HEAD_MAGIC)?;
    out.write_all(&(arch.layers() as u32).to_le_bytes())?;
    for &c in arch.channels() {
        out.write_all(&(c as u32).to_le_bytes())?;
    }
    out.write_all(&(params.len() as u64).to_le_bytes())?;
    for &v in params.values() {
        out.write_all(&f32_le(v))?;
    }
    Ok(())
}

pub fn read_head(input: &mut impl Read) -> Result<HeadParams> {
    if &read_exact::<4>(input)? != HEAD_MAGIC {
        return Err(Error::Format("not a head file (bad magic)".into()));
    }
    let layers = u32::from_le_bytes(read_exact(input)?) as usize;
    if layers == 0 || layers > 64 {
        return Err(Error::Format(format!("implausible layer count {layers}")));
    }
    let channels = (0..=layers)
        .map(|_| Ok(u32::from_le_bytes(read_exact(input)?) as usize))
        .collect::<Result<Vec<_>>>()?;
    let arch = Architecture::from_channels(channels).map_err(|e| Error::Format(e.to_string()))?;
    let count = u64::from_le_bytes(read_exact(input)?) as usize;
    if count != arch.param_count() {
        return Err(Error::Format(format!("{count} parameters stored, architecture needs {}", arch.param_count())));
    }
    let values = (0..count)
        .map(|_| Ok(f64::from(f32::from_le_bytes(read_exact(input)?))))
        .collect::<Result<Vec<_>>>()?;
    HeadParams::new(arch, values).map_err(|e| Error::Format(e.to_string()))
}

/// A head file followed by `BLP1`, the subset size (u64) and the precisions as f32.
pub fn write_posterior(posterior: &LaplacePosterior, out: &mut impl Write) -> Result<()> {
    write_head(&posterior.mean, out)?;
    out.write_all(POSTERIOR_MAGIC)?;
    out.write_all(&(posterior.subset_size as u64).to_le_bytes())?;
    for &p in &posterior.precision {
        out.write_all(&f32_le(p))?;
    }
    Ok(())
}

pub fn read_posterior(input: &mut impl Read) -> Result<LaplacePosterior> {
    let mean = read_head(input)?;
    if &read_exact::<4>(input)? != POSTERIOR_MAGIC {
        return Err(Error::Format("missing posterior section".into()));
    }
    let subset = u64::from_le_bytes(read_exact(input)?) as usize;
    let precision = (0..mean.len())
        .map(|_| Ok(f64::from(f32::from_le_bytes(read_exact(input)?))))
        .collect::<Result<Vec<_>>>()?;
    LaplacePosterior::new(mean, precision, subset).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_head(params: &HeadParams, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_head(params, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_head(path: &Path) -> Result<HeadParams> {
    read_head(&mut Cursor::new(fs::read(path)?))
}

pub fn save_posterior(posterior: &LaplacePosterior, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_posterior(posterior, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_posterior(path: &Path) -> Result<LaplacePosterior> {
    read_posterior(&mut Cursor::new(fs::read(path)?))
}

/// Header of an exported score grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreGridHeader {
    pub height: usize,
    pub width: usize,
    pub kind: String,
    pub max_value: f64,
}

/// Header plus row-major f32 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreGrid {
    #[serde(flatten)]
    pub header: ScoreGridHeader,
    pub values: Vec<f32>,
}

impl ScoreGrid {
    pub fn from_scores(scores: &ScoreMap) -> Self {
        ScoreGrid {
            header: ScoreGridHeader {
                height: scores.height(),
                width: scores.width(),
                kind: scores.kind().name().to_string(),
                max_value: scores.max_value(),
            },
            values: scores.values().iter().map(|&v| v as f32).collect(),
        }
    }

    /// Little-endian f32 bytes of the values.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

fn gray_png(bytes: &[u8], height: usize, width: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out).write_image(
        bytes,
        width as u32,
        height as u32,
        image::ExtendedColorType::L8,
    )?;
    Ok(out)
}

/// 8-bit grayscale PNG of the scores scaled by their maximum (all black when the maximum is 0).
pub fn heatmap_png(scores: &ScoreMap) -> Result<Vec<u8>> {
    let max = scores.max_value();
    let bytes: Vec<u8> = scores
        .values()
        .iter()
        .map(|&v| if max > 0.0 { (255.0 * v / max).round() as u8 } else { 0 })
        .collect();
    gray_png(&bytes, scores.height(), scores.width())
}

pub fn image_png(image: &Image) -> Result<Vec<u8>> {
    gray_png(&quantize(image), image.height(), image.width())
}

/// Foreground white, background black.
pub fn mask_png(mask: &BinaryMask) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    gray_png(&bytes, mask.height(), mask.width())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::ScoreKind;
    use crate::domain::Pixel;

    #[test]
    fn pgm_round_trip() {
        let image = Image::new(8, 9, (0..72).map(|i| i as f64 / 71.0).collect()).unwrap();
        let bytes = image_to_pgm(&image).unwrap();
        assert!(bytes.starts_with(b"P5"));
        let back = image_from_pgm(&bytes).unwrap();
        assert_eq!((back.height(), back.width()), (8, 9));
        for (a, b) in image.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let mask = BinaryMask::from_fn(8, 9, |p| p.row > p.col);
        assert_eq!(mask_from_pgm(&mask_to_pgm(&mask).unwrap()).unwrap(), mask);
    }

    #[test]
    fn mask_rejects_gray_levels() {
        let bytes = encode_pgm(8, 8, &[128; 64]).unwrap();
        assert!(matches!(mask_from_pgm(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn head_and_posterior_round_trip() {
        let arch = Architecture::new(32, &[3, 2]).unwrap();
        let params = HeadParams::init(arch, 4);
        let mut buf = Vec::new();
        write_head(&params, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"BHD1");
        assert_eq!(buf.len(), 4 + 4 + 4 * 4 + 8 + 4 * params.len());
        let back = read_head(&mut Cursor::new(&buf)).unwrap();
        assert_eq!(back.architecture(), params.architecture());
        for (a, b) in back.values().iter().zip(params.values()) {
            assert_eq!(*a, f64::from(*b as f32));
        }

        let post = LaplacePosterior::new(back.clone(), vec![2.5; back.len()], 17).unwrap();
        let mut buf = Vec::new();
        write_posterior(&post, &mut buf).unwrap();
        let again = read_posterior(&mut Cursor::new(&buf)).unwrap();
        assert_eq!(again, post);
        assert!(read_posterior(&mut Cursor::new(&buf[..buf.len() - 2])).is_err());
        assert!(read_head(&mut Cursor::new(b"XXXX")).is_err());
    }

    #[test]
    fn point_mass_precision_survives_f32() {
        let mean = HeadParams::init(Architecture::new(32, &[2]).unwrap(), 0);
        let mut buf = Vec::new();
        write_posterior(&LaplacePosterior::point_mass(mean), &mut buf).unwrap();
        assert!(read_posterior(&mut Cursor::new(&buf)).unwrap().precision.iter().all(|&p| p >= 1e29));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(dir.path(), &[Profile::Blobs, Profile::Thin], 4, 1, 32).unwrap();
        assert_eq!(manifest.items.len(), 8);
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.manifest, manifest);
        assert_eq!(ds.dataset_names(), ["blobs", "thin"]);
        let scenes = ds.scenes(None).unwrap();
        assert_eq!(scenes.len(), 8);
        assert!(scenes.iter().all(|s| s.image.height() == 32 && !s.gt.is_all_background()));
        let train = ds.scenes(Some(SplitName::Train)).unwrap().len();
        assert_eq!(train, 5);
    }

    #[test]
    fn heatmap_and_grid() {
        let mut v = vec![0.0; 64];
        v[9] = 0.5;
        v[10] = 0.25;
        let s = ScoreMap::new(8, 8, v, ScoreKind::MutualInformation).unwrap();
        let png = heatmap_png(&s).unwrap();
        let img = image::load_from_memory(&png).unwrap().to_luma8();
        assert_eq!(img.get_pixel(1, 1).0[0], 255);
        assert_eq!(img.get_pixel(2, 1).0[0], 128);
        let grid = ScoreGrid::from_scores(&s);
        assert_eq!(grid.header.max_value, 0.5);
        assert_eq!(grid.header.kind, "mutual_information");
        assert_eq!(grid.to_le_bytes().len(), 256);
        let _ = Pixel::new(0, 0);
    }
}
