//! Dataset directories: `manifest.json`, `images/{id}.png`,
//! `masks/{id}.png` and `poses.csv`.

use std::fs;
use std::path::Path;

use ftvp_core::synth::{
    class_frequencies, Camera, ClassSet, DriveConfig, GenConfig, GridConfig, Pose, SceneSample, SynthConfig,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, IoContext, Result};
use crate::png;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub id: u8,
    pub name: String,
    pub rgb: [u8; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub image_sha256: String,
    pub mask_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub classes: ClassSet,
    pub palette: Vec<PaletteEntry>,
    pub camera: Camera,
    pub grid: GridConfig,
    pub gen: GenConfig,
    /// Present when the samples are consecutive frames of one drive.
    pub drive: Option<DriveConfig>,
    /// Pixel share of each class over all masks.
    pub class_frequencies: Vec<f64>,
    pub samples: Vec<SampleRecord>,
}

impl Manifest {
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig { classes: self.classes, camera: self.camera, grid: self.grid, gen: self.gen.clone() }
    }

    pub fn num_classes(&self) -> usize {
        self.palette.len()
    }

    pub fn colors(&self) -> Vec<[u8; 3]> {
        self.palette.iter().map(|p| p.rgb).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<SceneSample>,
}

#[derive(Serialize, Deserialize)]
struct PoseRow {
    id: String,
    x: f64,
    y: f64,
    yaw: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn palette_of(classes: ClassSet) -> Vec<PaletteEntry> {
    classes
        .names()
        .iter()
        .zip(classes.palette())
        .enumerate()
        .map(|(i, (n, &rgb))| PaletteEntry { id: i as u8, name: n.to_string(), rgb })
        .collect()
}

/// Write `samples` under `dir`, which is created if needed.
pub fn export_dataset(
    samples: &[SceneSample],
    cfg: &SynthConfig,
    seed: u64,
    drive: Option<&DriveConfig>,
    dir: &Path,
) -> Result<Manifest> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).at(&p)?;
    }
    let k = cfg.classes.count();
    let mut records = Vec::with_capacity(samples.len());
    let poses_path = dir.join("poses.csv");
    let mut poses =
        csv::Writer::from_path(&poses_path).map_err(|e| AppError::data(format!("{}: {e}", poses_path.display())))?;
    for s in samples {
        s.mask.check_classes(k)?;
        let image = format!("images/{}.png", s.id);
        let mask = format!("masks/{}.png", s.id);
        let ib = png::encode_rgb(&s.image)?;
        let mb = png::encode_mask(&s.mask)?;
        fs::write(dir.join(&image), &ib).at(&dir.join(&image))?;
        fs::write(dir.join(&mask), &mb).at(&dir.join(&mask))?;
        poses
            .serialize(PoseRow { id: s.id.clone(), x: s.pose.x, y: s.pose.y, yaw: s.pose.yaw })
            .map_err(|e| AppError::data(format!("poses.csv: {e}")))?;
        records.push(SampleRecord {
            id: s.id.clone(),
            image,
            mask,
            image_sha256: sha256_hex(&ib),
            mask_sha256: sha256_hex(&mb),
        });
    }
    poses.flush().at(&poses_path)?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        seed,
        classes: cfg.classes,
        palette: palette_of(cfg.classes),
        camera: cfg.camera,
        grid: cfg.grid,
        gen: cfg.gen.clone(),
        drive: drive.cloned(),
        class_frequencies: class_frequencies(samples.iter().map(|s| &s.mask), k),
        samples: records,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| AppError::data(e.to_string()))?;
    fs::write(&path, json + "\n").at(&path)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).at(&path)?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| AppError::data(format!("{}: {e}", path.display())))?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(AppError::data(format!(
            "{}: schema version {} is not {SCHEMA_VERSION}",
            path.display(),
            m.schema_version
        )));
    }
    if m.palette.is_empty() || m.palette.iter().enumerate().any(|(i, p)| p.id as usize != i) {
        return Err(AppError::data(format!("{}: palette ids must be 0..{}", path.display(), m.palette.len())));
    }
    Ok(m)
}

/// Load and verify every sample listed in the manifest.
pub fn import_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let k = manifest.num_classes();
    let poses_path = dir.join("poses.csv");
    let mut reader =
        csv::Reader::from_path(&poses_path).map_err(|e| AppError::data(format!("{}: {e}", poses_path.display())))?;
    let rows: Vec<PoseRow> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| AppError::data(format!("{}: {e}", poses_path.display())))?;
    let poses: std::collections::HashMap<String, Pose> =
        rows.into_iter().map(|r| (r.id, Pose::new(r.x, r.y, r.yaw))).collect();
    let side = manifest.camera.image_size;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for rec in &manifest.samples {
        let fail = |what: String| AppError::data(format!("sample {}: {what}", rec.id));
        let ib = fs::read(dir.join(&rec.image)).map_err(|e| fail(format!("{}: {e}", rec.image)))?;
        let mb = fs::read(dir.join(&rec.mask)).map_err(|e| fail(format!("{}: {e}", rec.mask)))?;
        if sha256_hex(&ib) != rec.image_sha256 {
            return Err(fail(format!("checksum mismatch in {}", rec.image)));
        }
        if sha256_hex(&mb) != rec.mask_sha256 {
            return Err(fail(format!("checksum mismatch in {}", rec.mask)));
        }
        let image = png::decode_rgb(&ib).map_err(|e| fail(e.to_string()))?;
        let mask = png::decode_mask(&mb).map_err(|e| fail(e.to_string()))?;
        if (image.width(), image.height()) != (side, side) {
            return Err(fail(format!("image is {}x{}, camera says {side}", image.width(), image.height())));
        }
        if (mask.width(), mask.height()) != (manifest.grid.side, manifest.grid.side) {
            return Err(fail(format!("mask is {}x{}, grid says {}", mask.width(), mask.height(), manifest.grid.side)));
        }
        mask.check_classes(k).map_err(|e| fail(e.to_string()))?;
        let pose = *poses.get(&rec.id).ok_or_else(|| fail("missing from poses.csv".into()))?;
        samples.push(SceneSample { id: rec.id.clone(), image, mask, pose });
    }
    let recount = class_frequencies(samples.iter().map(|s| &s.mask), k);
    let drift = recount.iter().zip(&manifest.class_frequencies).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if recount.len() != manifest.class_frequencies.len() || drift > 1e-12 {
        return Err(AppError::data("manifest class frequencies disagree with the masks"));
    }
    Ok(Dataset { manifest, samples })
}
