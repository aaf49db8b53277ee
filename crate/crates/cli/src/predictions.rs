//! On-disk per-image scores and anomaly maps.
//!
//! ```text
//! <dir>/predictions.json   evaluation settings
//! <dir>/scores.csv         one row per image
//! <dir>/maps/<name>.map    anomaly map (framed f32)
//! <dir>/heatmaps/<name>.png
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use dinomaly_core::data::{PreprocessSpec, SampleRecord, Split};
use dinomaly_core::metrics::AuproConfig;
use dinomaly_core::scoring::{read_map, write_heatmap, write_map};
use dinomaly_core::trainer::{eval_mask, Prediction};
use dinomaly_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const META_FILE: &str = "predictions.json";
pub const SCORES_FILE: &str = "scores.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMeta {
    pub eval_size: (usize, usize),
    pub top_fraction: f64,
    pub preprocess: PreprocessSpec,
    pub aupro: AuproConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScoreRow {
    id: String,
    class_name: String,
    defect: String,
    label: u8,
    image_score: f64,
    map_file: String,
    image_path: String,
    mask_path: String,
}

/// File stem for a sample id, safe on every filesystem.
pub fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

pub fn write_predictions(dir: &Path, meta: &PredictionMeta, preds: &[Prediction], heatmaps: bool) -> Result<()> {
    for sub in ["maps", "heatmaps"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(&meta_path, e))?;
    let mut w = csv::Writer::from_path(dir.join(SCORES_FILE))?;
    for p in preds {
        let stem = file_stem(&p.sample.id);
        let map_file = format!("maps/{stem}.map");
        write_map(&dir.join(&map_file), &p.map)?;
        if heatmaps {
            write_heatmap(&dir.join("heatmaps").join(format!("{stem}.png")), &p.map)?;
        }
        w.serialize(ScoreRow {
            id: p.sample.id.clone(),
            class_name: p.sample.class_name.clone(),
            defect: p.sample.defect.clone(),
            label: p.sample.label,
            image_score: p.image_score,
            map_file,
            image_path: p.sample.image_path.display().to_string(),
            mask_path: p
                .sample
                .mask_path
                .as_ref()
                .map(|m| m.display().to_string())
                .unwrap_or_default(),
        })?;
    }
    w.flush().map_err(|e| Error::io(dir.join(SCORES_FILE), e))
}

/// Files a prediction directory must contain.
pub fn expected_files(dir: &Path) -> Vec<PathBuf> {
    vec![dir.join(META_FILE), dir.join(SCORES_FILE)]
}

pub fn require_files(files: &[PathBuf]) -> Result<()> {
    let missing: Vec<String> = files.iter().filter(|p| !p.is_file()).map(|p| p.display().to_string()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::data(format!("missing artifacts: {}", missing.join(", "))))
    }
}

/// Reads dumped predictions back, rebuilding ground-truth masks from the
/// recorded mask paths with the recorded geometry.
pub fn read_predictions(dir: &Path) -> Result<(PredictionMeta, Vec<Prediction>)> {
    require_files(&expected_files(dir))?;
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: PredictionMeta = serde_json::from_str(&text)?;
    let mut rdr = csv::Reader::from_path(dir.join(SCORES_FILE))?;
    let mut preds = Vec::new();
    for row in rdr.deserialize::<ScoreRow>() {
        let row = row?;
        let sample = SampleRecord {
            id: row.id,
            class_name: row.class_name,
            split: Split::Test,
            defect: row.defect,
            label: row.label,
            image_path: PathBuf::from(row.image_path),
            mask_path: (!row.mask_path.is_empty()).then(|| PathBuf::from(row.mask_path)),
        };
        let map = read_map(&dir.join(&row.map_file))?;
        if map.shape() != meta.eval_size {
            return Err(Error::data_at(
                dir.join(&row.map_file),
                format!("map is {:?}, expected {:?}", map.shape(), meta.eval_size),
            ));
        }
        let mask = eval_mask(&sample, &meta.preprocess, meta.eval_size)?;
        preds.push(Prediction {
            sample,
            image_score: row.image_score,
            map,
            mask,
        });
    }
    Ok((meta, preds))
}
