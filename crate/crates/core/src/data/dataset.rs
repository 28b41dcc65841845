use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::catalog::{DefectKind, CATALOG_VERSION, CLASS_NAMES};
use super::synth::{self, StampedDefect};
use super::{pnm, DataError, Sample};
use crate::mask::Mask;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

/// Minimum total defect area of a defective test sample; strictly above the
/// default image-level threshold of 20 pixels.
const TEST_MIN_DEFECT_AREA: usize = 21;
/// Every defective test sample has at least one component this large.
const TEST_MIN_COMPONENT: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    pub train_samples: usize,
    /// Fraction of training cells that also carry a black spot, which is
    /// relabelled as background in the training mask.
    pub train_black_spot_fraction: f64,
    /// Upper bound on additional base defects per training cell.
    pub train_max_extra_defects: usize,
    pub support_black_spot: usize,
    pub support_bad_soldering: usize,
    pub test_defective: usize,
    pub test_defect_free: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            train_samples: 200,
            train_black_spot_fraction: 0.0,
            train_max_extra_defects: 2,
            support_black_spot: 4,
            support_bad_soldering: 2,
            test_defective: 60,
            test_defect_free: 60,
        }
    }
}

impl DatasetConfig {
    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if self.height < synth::MIN_SIDE || self.width < synth::MIN_SIDE {
            return bad("cells must be at least 32x32");
        }
        if self.train_samples < DefectKind::BASE.len() {
            return bad("train_samples must cover every base class at least once");
        }
        if self.support_black_spot == 0 || self.support_bad_soldering == 0 {
            return bad("each imprint event needs at least one support sample");
        }
        if self.test_defective < DefectKind::ALL.len() {
            return bad("test_defective must cover every defect class at least once");
        }
        if self.test_defect_free == 0 {
            return bad("test split needs defect-free samples");
        }
        if !(0.0..=1.0).contains(&self.train_black_spot_fraction) {
            return bad("train_black_spot_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    /// Stable hash of the generating config and seed.
    pub fn hash(&self, seed: u64) -> String {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(serde_json::to_vec(self).expect("config serializes"));
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub ids: Vec<String>,
    pub visible_classes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportEvent {
    pub event: u32,
    /// Class imprinted by this event.
    pub class: String,
    pub ids: Vec<String>,
    pub visible_classes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub format_version: u32,
    pub catalog_version: u32,
    pub class_catalog: Vec<String>,
    pub seed: u64,
    pub config: DatasetConfig,
    pub config_hash: String,
    pub train: SplitEntry,
    pub support: Vec<SupportEvent>,
    pub test: SplitEntry,
}

impl SplitManifest {
    pub fn all_ids(&self) -> impl Iterator<Item = &String> {
        self.train
            .ids
            .iter()
            .chain(self.support.iter().flat_map(|e| &e.ids))
            .chain(&self.test.ids)
    }

    /// Checks split disjointness and catalog agreement.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.class_catalog != CLASS_NAMES {
            return Err(DataError::Manifest(format!(
                "class catalog {:?} does not match this build's {:?}",
                self.class_catalog, CLASS_NAMES
            )));
        }
        let mut seen = HashSet::new();
        for id in self.all_ids() {
            if !seen.insert(id) {
                return Err(DataError::Manifest(format!("sample `{id}` appears in more than one split")));
            }
            if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
                return Err(DataError::Manifest(format!("invalid sample id `{id}`")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: SplitManifest,
    pub train: Vec<Sample>,
    /// One entry per imprint event, in event order.
    pub support: Vec<Vec<Sample>>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn support_event(&self, event: u32) -> Option<(&SupportEvent, &[Sample])> {
        let idx = self.manifest.support.iter().position(|e| e.event == event)?;
        Some((&self.manifest.support[idx], &self.support[idx]))
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(self.support.iter().flatten()).chain(&self.test)
    }
}

/// Per-sample seed derived from the dataset seed and the sample id.
pub fn sample_seed(base_seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base_seed.to_le_bytes());
    h.update(id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Snaps the image to the 8-bit grid so in-memory and on-disk samples agree.
fn quantized(image: Tensor) -> Tensor {
    image.map(|v| quantize(v) as f32 / 255.0)
}

struct Cell {
    image: Tensor,
    mask: Mask,
    defects: Vec<StampedDefect>,
}

fn cell(seed: u64, config: &DatasetConfig) -> Result<(Cell, rand_chacha::ChaCha8Rng), DataError> {
    let mut rng = synth::rng_from(seed);
    let image = synth::gen_background(rng.gen(), config.height, config.width)?;
    let mask = Mask::background(config.height, config.width);
    Ok((
        Cell {
            image,
            mask,
            defects: Vec::new(),
        },
        rng,
    ))
}

impl Cell {
    fn stamp(&mut self, rng: &mut rand_chacha::ChaCha8Rng, kind: DefectKind) -> Result<(), DataError> {
        let d = synth::stamp_with(rng, &mut self.image, &mut self.mask, kind)?;
        self.defects.push(d);
        Ok(())
    }

    /// Extra defects are best effort: a crowded cell simply gets fewer.
    fn stamp_extra(&mut self, rng: &mut rand_chacha::ChaCha8Rng, kind: DefectKind) -> Result<(), DataError> {
        match self.stamp(rng, kind) {
            Err(DataError::Placement { .. }) => Ok(()),
            other => other,
        }
    }

    fn into_sample(self, id: String, hidden: &[DefectKind]) -> Result<Sample, DataError> {
        let mut mask = self.mask;
        for v in mask.data_mut() {
            if hidden.iter().any(|k| k.index() == *v) {
                *v = 0;
            }
        }
        Sample::new(id, quantized(self.image), mask)
    }
}

fn pick_base(rng: &mut rand_chacha::ChaCha8Rng) -> DefectKind {
    DefectKind::BASE[rng.gen_range(0..DefectKind::BASE.len())]
}

fn train_sample(seed: u64, index: usize, config: &DatasetConfig) -> Result<Sample, DataError> {
    let id = format!("train_{index:04}");
    let (mut c, mut rng) = cell(sample_seed(seed, &id), config)?;
    c.stamp(&mut rng, DefectKind::BASE[index % DefectKind::BASE.len()])?;
    for _ in 0..rng.gen_range(0..=config.train_max_extra_defects) {
        let kind = pick_base(&mut rng);
        c.stamp_extra(&mut rng, kind)?;
    }
    if rng.gen_bool(config.train_black_spot_fraction) {
        c.stamp_extra(&mut rng, DefectKind::BlackSpot)?;
    }
    c.into_sample(id, &DefectKind::NEW)
}

fn support_sample(seed: u64, event: u32, index: usize, config: &DatasetConfig) -> Result<Sample, DataError> {
    let id = format!("support{event}_{index:02}");
    let (mut c, mut rng) = cell(sample_seed(seed, &id), config)?;
    match event {
        1 => {
            c.stamp(&mut rng, DefectKind::BlackSpot)?;
            if rng.gen_bool(0.5) {
                c.stamp_extra(&mut rng, DefectKind::BlackSpot)?;
            }
        }
        _ => c.stamp(&mut rng, DefectKind::BadSoldering)?,
    }
    let kind = pick_base(&mut rng);
    c.stamp_extra(&mut rng, kind)?;
    let hidden: &[DefectKind] = if event == 1 { &[DefectKind::BadSoldering] } else { &[] };
    c.into_sample(id, hidden)
}

fn test_defective_sample(seed: u64, index: usize, config: &DatasetConfig) -> Result<Sample, DataError> {
    let id = format!("test_def_{index:03}");
    let (mut c, mut rng) = cell(sample_seed(seed, &id), config)?;
    let primary = DefectKind::ALL[index % DefectKind::ALL.len()];
    c.stamp(&mut rng, primary)?;
    if rng.gen_bool(0.3) {
        let extra = DefectKind::ALL[rng.gen_range(0..DefectKind::ALL.len())];
        c.stamp_extra(&mut rng, extra)?;
    }
    let mut guard = 0;
    loop {
        let total: usize = c.defects.iter().map(|d| d.pixels.len()).sum();
        let largest = c.defects.iter().map(|d| d.pixels.len()).max().unwrap_or(0);
        if total >= TEST_MIN_DEFECT_AREA && largest >= TEST_MIN_COMPONENT {
            break;
        }
        guard += 1;
        if guard > 20 {
            return Err(DataError::Placement {
                kind: primary,
                attempts: guard,
            });
        }
        c.stamp(&mut rng, primary)?;
    }
    c.into_sample(id, &[])
}

fn visible(hidden: &[DefectKind]) -> Vec<String> {
    CLASS_NAMES
        .iter()
        .enumerate()
        .filter(|(i, _)| !hidden.iter().any(|k| k.index() as usize == *i))
        .map(|(_, n)| n.to_string())
        .collect()
}

/// Generates every split. Output depends only on `config` and `seed`.
pub fn gen_dataset(config: &DatasetConfig, seed: u64) -> Result<Dataset, DataError> {
    config.validate()?;
    let train = (0..config.train_samples)
        .map(|i| train_sample(seed, i, config))
        .collect::<Result<Vec<_>, _>>()?;
    let events = [
        (1u32, DefectKind::BlackSpot, config.support_black_spot, vec![DefectKind::BadSoldering]),
        (2u32, DefectKind::BadSoldering, config.support_bad_soldering, vec![]),
    ];
    let mut support = Vec::new();
    let mut support_entries = Vec::new();
    for (event, class, count, hidden) in events {
        let samples = (0..count)
            .map(|i| support_sample(seed, event, i, config))
            .collect::<Result<Vec<_>, _>>()?;
        support_entries.push(SupportEvent {
            event,
            class: class.name().to_string(),
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            visible_classes: visible(&hidden),
        });
        support.push(samples);
    }
    let mut test = (0..config.test_defective)
        .map(|i| test_defective_sample(seed, i, config))
        .collect::<Result<Vec<_>, _>>()?;
    for i in 0..config.test_defect_free {
        let id = format!("test_ok_{i:03}");
        let (c, _) = cell(sample_seed(seed, &id), config)?;
        test.push(c.into_sample(id, &[])?);
    }
    let manifest = SplitManifest {
        format_version: MANIFEST_VERSION,
        catalog_version: CATALOG_VERSION,
        class_catalog: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        seed,
        config: config.clone(),
        config_hash: config.hash(seed),
        train: SplitEntry {
            ids: train.iter().map(|s| s.id.clone()).collect(),
            visible_classes: visible(&DefectKind::NEW),
        },
        support: support_entries,
        test: SplitEntry {
            ids: test.iter().map(|s| s.id.clone()).collect(),
            visible_classes: visible(&[]),
        },
    };
    manifest.validate()?;
    Ok(Dataset {
        manifest,
        train,
        support,
        test,
    })
}

fn pnm_err(path: &Path) -> impl FnOnce(pnm::PnmError) -> DataError + '_ {
    move |source| DataError::Pnm {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `images/<id>.pgm` and `masks/<id>.pgm` under `dir`.
pub fn write_sample(dir: &Path, sample: &Sample) -> Result<(), DataError> {
    let (h, w) = sample.mask.dims();
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let image = pnm::Raster {
        width: w,
        height: h,
        channels: 1,
        pixels: sample.image.data().iter().map(|&v| quantize(v)).collect(),
    };
    let mask = pnm::Raster {
        width: w,
        height: h,
        channels: 1,
        pixels: sample.mask.data().to_vec(),
    };
    let ip = dir.join("images").join(format!("{}.pgm", sample.id));
    pnm::write(&ip, &image).map_err(pnm_err(&ip))?;
    let mp = dir.join("masks").join(format!("{}.pgm", sample.id));
    pnm::write(&mp, &mask).map_err(pnm_err(&mp))?;
    Ok(())
}

pub fn read_sample(dir: &Path, id: &str) -> Result<Sample, DataError> {
    let ip = dir.join("images").join(format!("{id}.pgm"));
    let mp = dir.join("masks").join(format!("{id}.pgm"));
    let image = pnm::read(&ip).map_err(pnm_err(&ip))?;
    let mask = pnm::read(&mp).map_err(pnm_err(&mp))?;
    if image.channels != 1 || mask.channels != 1 {
        return Err(DataError::Manifest(format!("sample `{id}` is not grayscale")));
    }
    if (image.height, image.width) != (mask.height, mask.width) {
        return Err(DataError::DimMismatch {
            image: (image.height, image.width),
            mask: (mask.height, mask.width),
        });
    }
    let tensor = Tensor::new(
        vec![1, image.height, image.width],
        image.pixels.iter().map(|&b| b as f32 / 255.0).collect(),
    )?;
    let mask = Mask::new(mask.height, mask.width, mask.pixels).expect("dims checked");
    if mask.max_class() as usize >= CLASS_NAMES.len() {
        return Err(DataError::Manifest(format!("sample `{id}` has mask value {}", mask.max_class())));
    }
    Sample::new(id, tensor, mask)
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    for sample in dataset.samples() {
        write_sample(dir, sample)?;
    }
    let json = serde_json::to_string_pretty(&dataset.manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let raw = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: SplitManifest = serde_json::from_str(&raw).map_err(|e| DataError::Manifest(e.to_string()))?;
    manifest.validate()?;
    let read_all = |ids: &[String]| ids.iter().map(|id| read_sample(dir, id)).collect::<Result<Vec<_>, _>>();
    let train = read_all(&manifest.train.ids)?;
    let support = manifest
        .support
        .iter()
        .map(|e| read_all(&e.ids))
        .collect::<Result<Vec<_>, _>>()?;
    let test = read_all(&manifest.test.ids)?;
    Ok(Dataset {
        manifest,
        train,
        support,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DatasetConfig {
        DatasetConfig {
            train_samples: 12,
            test_defective: 10,
            test_defect_free: 4,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn sample_seed_is_stable() {
        assert_eq!(sample_seed(1, "a"), sample_seed(1, "a"));
        assert_ne!(sample_seed(1, "a"), sample_seed(2, "a"));
        assert_ne!(sample_seed(1, "a"), sample_seed(1, "b"));
    }

    #[test]
    fn regeneration_is_identical() {
        let a = gen_dataset(&tiny(), 42).unwrap();
        let b = gen_dataset(&a.manifest.config, a.manifest.seed).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_hides_new_classes_and_support_keeps_base() {
        let d = gen_dataset(&tiny(), 3).unwrap();
        for s in &d.train {
            assert!(s.mask.data().iter().all(|&v| v < DefectKind::BlackSpot.index()));
        }
        let (_, event1) = d.support_event(1).unwrap();
        assert_eq!(event1.len(), 4);
        for s in event1 {
            assert!(s.mask.count_class(DefectKind::BlackSpot.index()) > 0);
            assert_eq!(s.mask.count_class(DefectKind::BadSoldering.index()), 0);
        }
        let (_, event2) = d.support_event(2).unwrap();
        assert!(event2.iter().all(|s| s.mask.count_class(DefectKind::BadSoldering.index()) > 0));
    }

    #[test]
    fn defect_free_test_masks_are_empty() {
        let d = gen_dataset(&tiny(), 5).unwrap();
        let free: Vec<_> = d.test.iter().filter(|s| s.id.starts_with("test_ok")).collect();
        assert_eq!(free.len(), 4);
        assert!(free.iter().all(|s| s.mask.count_foreground() == 0));
        for s in d.test.iter().filter(|s| s.id.starts_with("test_def")) {
            assert!(s.mask.count_foreground() > 20);
        }
    }

    #[test]
    fn rejects_inconsistent_config() {
        let cfg = DatasetConfig {
            test_defect_free: 0,
            ..tiny()
        };
        assert!(matches!(gen_dataset(&cfg, 0), Err(DataError::Config(_))));
    }

    #[test]
    fn overlapping_splits_rejected() {
        let mut d = gen_dataset(&tiny(), 1).unwrap();
        let dup = d.manifest.train.ids[0].clone();
        d.manifest.test.ids.push(dup);
        assert!(matches!(d.manifest.validate(), Err(DataError::Manifest(_))));
    }
}
