//! On-disk formats: dataset manifests, prediction and pseudo-label files,
//! training checkpoints and newline-delimited run logs.
//!
//! Checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! b"SRCK" | u32 format version | u64 header length | JSON header
//! | params | Adam first moment | Adam second moment | [best params]
//! ```
//!
//! Each blob is `n_params` f64 values in the backbone's flat order
//! (layer1_weights row-major, layer1_bias, layer2_weights row-major,
//! layer2_bias).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{AdamConfig, AdamState, BackboneConfig, BackboneParams};
use crate::error::{Error, Result};
use crate::geometry::LandmarkSet;
use crate::grid::Grid;
use crate::pipeline::{BestSnapshot, Dataset, LogRecord, Phase, Stage, TrainConfig, TrainState, UnlabeledSample};
use crate::regulation::{Branch, PseudoLabel};
use crate::synth::{GeneratorSpec, Sample};

pub const FORMAT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"SRCK";

pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_pretty(value)?)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------- datasets

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    /// Relative to the manifest's directory.
    pub image_path: String,
    pub landmarks: Option<Vec<[f64; 2]>>,
    pub spacing_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub spec: Option<GeneratorSpec>,
    pub samples: Vec<ManifestSample>,
}

/// Images and annotations as loaded from a manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSample {
    pub image: Grid,
    pub landmarks: Option<LandmarkSet>,
    pub spacing_mm: f64,
}

/// Writes `samples` as `<dir>/<name>.json` with images under `<dir>/<name>/`.
pub fn write_dataset(dir: &Path, name: &str, spec: Option<&GeneratorSpec>, samples: &[Sample]) -> Result<PathBuf> {
    let image_dir = dir.join(name);
    fs::create_dir_all(&image_dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("{name}/{i:06}.bin");
        s.image.save(&dir.join(&rel))?;
        entries.push(ManifestSample {
            image_path: rel,
            landmarks: Some(s.landmarks.coords().to_vec()),
            spacing_mm: s.landmarks.spacing_mm(),
        });
    }
    let manifest = DatasetManifest { version: FORMAT_VERSION, spec: spec.cloned(), samples: entries };
    let path = dir.join(format!("{name}.json"));
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn read_dataset(path: &Path) -> Result<Vec<LoadedSample>> {
    let manifest: DatasetManifest = read_json(path)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset manifest version {}", manifest.version)));
    }
    let root = path.parent().unwrap_or_else(|| Path::new("."));
    manifest
        .samples
        .into_iter()
        .map(|s| {
            let image = Grid::load(&root.join(&s.image_path))?;
            let landmarks = s.landmarks.map(|c| LandmarkSet::new(c, s.spacing_mm)).transpose()?;
            Ok(LoadedSample { image, landmarks, spacing_mm: s.spacing_mm })
        })
        .collect()
}

pub fn read_labeled(path: &Path) -> Result<Vec<Sample>> {
    read_dataset(path)?
        .into_iter()
        .enumerate()
        .map(|(i, s)| match s.landmarks {
            Some(landmarks) => Ok(Sample { image: s.image, landmarks }),
            None => Err(Error::Format(format!("{}: sample {i} has no landmarks", path.display()))),
        })
        .collect()
}

/// Unlabeled images; landmarks in the manifest are kept only as the
/// diagnostic reference and are dropped unless every sample has them.
pub fn read_unlabeled(path: &Path) -> Result<(Vec<UnlabeledSample>, Vec<LandmarkSet>)> {
    let loaded = read_dataset(path)?;
    let truth: Option<Vec<LandmarkSet>> = loaded.iter().map(|s| s.landmarks.clone()).collect();
    let images = loaded.into_iter().map(|s| UnlabeledSample { image: s.image, spacing_mm: s.spacing_mm }).collect();
    Ok((images, truth.unwrap_or_default()))
}

pub fn load_training_data(labeled: &Path, unlabeled: Option<&Path>, held_out: Option<&Path>) -> Result<Dataset> {
    let (unlabeled, unlabeled_truth) = match unlabeled {
        Some(p) => read_unlabeled(p)?,
        None => (Vec::new(), Vec::new()),
    };
    let data = Dataset {
        labeled: read_labeled(labeled)?,
        unlabeled,
        unlabeled_truth,
        held_out: held_out.map(read_labeled).transpose()?.unwrap_or_default(),
    };
    data.validate()?;
    Ok(data)
}

// ---------------------------------------------------------------- predictions & pseudo labels

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub coords: Vec<[f64; 2]>,
    pub spacing_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionsFile {
    pub version: u32,
    pub predictions: Vec<PredictionRecord>,
}

impl PredictionsFile {
    pub fn landmark_sets(&self) -> Result<Vec<LandmarkSet>> {
        self.predictions.iter().map(|p| LandmarkSet::new(p.coords.clone(), p.spacing_mm)).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegulationSummary {
    pub adjusted: usize,
    pub raw_with_exclusions: usize,
    pub fully_excluded: usize,
}

impl RegulationSummary {
    pub fn of(labels: &[PseudoLabel]) -> Self {
        let mut s = Self::default();
        for l in labels {
            match l.branch {
                Branch::Adjusted => s.adjusted += 1,
                Branch::RawWithExclusions => s.raw_with_exclusions += 1,
            }
            if l.n_valid() == 0 {
                s.fully_excluded += 1;
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelFile {
    pub version: u32,
    pub z_mm: f64,
    pub summary: RegulationSummary,
    pub labels: Vec<PseudoLabel>,
}

// ---------------------------------------------------------------- checkpoints

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestHeader {
    pub mre_mm: f64,
    pub phase: Phase,
    pub epoch: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub tool_version: String,
    pub backbone: BackboneConfig,
    pub adam: AdamConfig,
    pub config: TrainConfig,
    pub stage: Stage,
    pub epoch: u32,
    pub step: u64,
    pub adam_step: u64,
    pub seed: u64,
    pub n_params: usize,
    pub best: Option<BestHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

fn push_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(config: &TrainConfig, state: &TrainState) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        backbone: *state.params.config(),
        adam: state.adam.config,
        config: config.clone(),
        stage: state.stage,
        epoch: state.epoch,
        step: state.step,
        adam_step: state.adam.step_count,
        seed: state.seed,
        n_params: state.params.values().len(),
        best: state.best.as_ref().map(|b| BestHeader { mre_mm: b.mre_mm, phase: b.phase, epoch: b.epoch }),
    };
    let json = serde_json::to_vec(&header)?;
    let blobs = 3 + usize::from(state.best.is_some());
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * blobs * header.n_params);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    push_f64s(&mut buf, state.params.values());
    push_f64s(&mut buf, &state.adam.first_moment);
    push_f64s(&mut buf, &state.adam.second_moment);
    if let Some(best) = &state.best {
        push_f64s(&mut buf, &best.params);
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body_start = 16usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..body_start]).map_err(|e| bad(&e.to_string()))?;
    let n = header.n_params;
    if n != header.backbone.n_params() {
        return Err(bad("parameter count disagrees with backbone configuration"));
    }
    let blobs = 3 + usize::from(header.best.is_some());
    let body = &bytes[body_start..];
    if body.len() != 8 * n * blobs {
        return Err(bad(&format!("expected {} payload bytes, found {}", 8 * n * blobs, body.len())));
    }
    let blob = |k: usize| -> Vec<f64> {
        body[8 * n * k..8 * n * (k + 1)].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
    };
    let params = BackboneParams::from_values(header.backbone, blob(0))?;
    let mut adam = AdamState::new(header.adam, n)?;
    adam.first_moment = blob(1);
    adam.second_moment = blob(2);
    adam.step_count = header.adam_step;
    let best = header
        .best
        .map(|b| BestSnapshot { params: blob(3), mre_mm: b.mre_mm, phase: b.phase, epoch: b.epoch });
    Ok(Checkpoint {
        config: header.config,
        state: TrainState { params, adam, stage: header.stage, epoch: header.epoch, step: header.step, seed: header.seed, best },
    })
}

/// Written through a temporary file so an interrupted write never leaves a
/// truncated checkpoint behind.
pub fn save_checkpoint(path: &Path, config: &TrainConfig, state: &TrainState) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(config, state)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

// ---------------------------------------------------------------- run logs & manifests

pub fn append_log_records(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_log_records(path: &Path) -> Result<Vec<LogRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Everything needed to reproduce a command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config: Option<TrainConfig>,
    pub inputs: Vec<String>,
    pub output_dir: String,
    pub parameters: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, output_dir: &Path) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: None,
            config: None,
            inputs: Vec::new(),
            output_dir: output_dir.display().to_string(),
            parameters: serde_json::Value::Null,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{Ablation, RunLog};

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let cfg = TrainConfig { hidden: 4, ..TrainConfig::desk(5, Ablation::Full) };
        let mut state = TrainState::new(3, &cfg).unwrap();
        state.adam.first_moment.iter_mut().enumerate().for_each(|(i, m)| *m = i as f64 * 1e-3);
        state.adam.step_count = 7;
        state.step = 7;
        state.epoch = 2;
        state.best = Some(BestSnapshot { params: state.params.values().to_vec(), mre_mm: 1.25, phase: Phase::Finetune, epoch: 1 });
        let bytes = encode_checkpoint(&cfg, &state).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.state, state);
        assert_eq!(back.config, cfg);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let cfg = TrainConfig { hidden: 4, ..TrainConfig::desk(5, Ablation::Full) };
        let state = TrainState::new(3, &cfg).unwrap();
        let mut bytes = encode_checkpoint(&cfg, &state).unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode_checkpoint(b"nope"), Err(Error::Format(_))));
    }

    #[test]
    fn dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GeneratorSpec::default_with_seed(2);
        let samples = crate::synth::generate(&spec, 3).unwrap();
        let path = write_dataset(dir.path(), "train", Some(&spec), &samples).unwrap();
        let back = read_labeled(&path).unwrap();
        assert_eq!(back, samples);
        let manifest: DatasetManifest = read_json(&path).unwrap();
        assert_eq!(manifest.spec.unwrap(), spec);
    }

    #[test]
    fn log_records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.ndjson");
        let mut log = RunLog::default();
        log.records.push(LogRecord { stage: Phase::SelfTrain, epoch: 3, loss: 0.5, mre_mm: Some(1.0), pseudo_label_error_mm: None, skipped_samples: Some(0) });
        append_log_records(&path, &log.records).unwrap();
        append_log_records(&path, &log.records).unwrap();
        let back = read_log_records(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], log.records[0]);
        let line = fs::read_to_string(&path).unwrap();
        assert!(line.starts_with(r#"{"stage":"self-train","epoch":3"#));
    }

    #[test]
    fn malformed_predictions_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        fs::write(&path, r#"{"version": 1, "predictions": [{"coords": "x"}]}"#).unwrap();
        assert!(matches!(read_json::<PredictionsFile>(&path), Err(Error::Format(_))));
    }
}
