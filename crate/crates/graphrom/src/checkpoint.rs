//! Self-describing checkpoint files for pooling levels and trained models.
//!
//! Both kinds share one container: a fixed magic, a format version, a kind
//! tag, then a JSON body (exact f64 round-trips are guaranteed by the
//! serializer's shortest-representation floats and round-trip-exact
//! parsing). Levels are saved once and reused by every training run; model
//! checkpoints store the configuration, all parameter tensors, the fitted
//! scalers, and a reference to the levels file they were trained against.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array1;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::coarsen::{PoolingLevel, RetentionProfile};
use crate::error::{Error, Result};
use crate::gcn::GcnLayer;
use crate::model::{Model, ModelConfig, ModelGeometry};
use crate::mwls::MwlsParams;
use crate::training::Scalers;

const MAGIC: &[u8; 4] = b"GROM";
pub const FORMAT_VERSION: u32 = 1;

const KIND_LEVELS: u8 = 1;
const KIND_MODEL: u8 = 2;

fn kind_name(kind: u8) -> &'static str {
    match kind {
        KIND_LEVELS => "levels",
        KIND_MODEL => "model",
        _ => "unknown",
    }
}

/// Health report stored alongside the pooling levels: sizes, connectivity,
/// and the interpolation round-trip error on an affine probe field (which
/// both directions must reproduce up to solver tolerance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelsDiagnostics {
    /// Node counts fine/mid/coarse.
    pub level_sizes: [usize; 3],
    /// Non-zeros of the mid and coarse graph adjacencies.
    pub graph_nnz: [usize; 2],
    /// Interpolation rows per basis level (quadratic, linear, constant),
    /// pooling then unpooling, level 1 then level 2.
    pub fallback_counts: [(usize, usize, usize); 4],
    /// Max absolute error of down-down-up-up on an affine probe field.
    pub affine_round_trip_error: f64,
}

/// Two pooling levels plus the settings that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelsCheckpoint {
    pub ratios: [f64; 2],
    pub seed: u64,
    pub profile: RetentionProfile,
    pub mwls: MwlsParams,
    pub levels: [PoolingLevel; 2],
    pub diagnostics: LevelsDiagnostics,
}

impl LevelsCheckpoint {
    /// Bundle freshly built levels, computing the diagnostics block from
    /// the fine-mesh coordinates.
    pub fn new(
        ratios: [f64; 2],
        seed: u64,
        profile: RetentionProfile,
        mwls: MwlsParams,
        levels: [PoolingLevel; 2],
        fine_coords: &[[f64; 3]],
    ) -> Result<Self> {
        let diagnostics = levels_diagnostics(&levels, fine_coords)?;
        let checkpoint = Self { ratios, seed, profile, mwls, levels, diagnostics };
        checkpoint.validate()?;
        Ok(checkpoint)
    }

    /// Structural consistency: the levels chain, and each interpolation
    /// operator's shape matches the level sizes.
    pub fn validate(&self) -> Result<()> {
        let [first, second] = &self.levels;
        if second.fine_n != first.coarse_n {
            return Err(Error::ShapeMismatch(format!(
                "level 2 starts from {} nodes but level 1 retains {}",
                second.fine_n, first.coarse_n
            )));
        }
        for (name, level) in [("level 1", first), ("level 2", second)] {
            if level.selected.len() != level.coarse_n
                || level.down.n_dest() != level.coarse_n
                || level.down.n_source() != level.fine_n
                || level.up.n_dest() != level.fine_n
                || level.up.n_source() != level.coarse_n
                || level.coarse_graph.n_nodes() != level.coarse_n
            {
                return Err(Error::ShapeMismatch(format!(
                    "{name} bookkeeping is inconsistent with its operators"
                )));
            }
            if level.selected.windows(2).any(|w| w[0] >= w[1])
                || level.selected.last().is_some_and(|&i| i >= level.fine_n)
            {
                return Err(Error::InvalidArgument(format!(
                    "{name} selected indices are not strictly increasing in range"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        write_checkpoint(path.as_ref(), KIND_LEVELS, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let checkpoint: Self = read_checkpoint(path.as_ref(), KIND_LEVELS)?;
        checkpoint.validate()?;
        Ok(checkpoint)
    }
}

/// Compute the diagnostics block for a freshly built level pair.
pub fn levels_diagnostics(
    levels: &[PoolingLevel; 2],
    fine_coords: &[[f64; 3]],
) -> Result<LevelsDiagnostics> {
    if fine_coords.len() != levels[0].fine_n {
        return Err(Error::ShapeMismatch(format!(
            "{} fine coordinates for a level built on {} nodes",
            fine_coords.len(),
            levels[0].fine_n
        )));
    }
    let probe: Array1<f64> = fine_coords
        .iter()
        .map(|p| 1.0 + 2.0 * p[0] - 3.0 * p[1] + 0.5 * p[2])
        .collect();
    let mid = levels[0].down.apply_vec(&probe.view())?;
    let coarse = levels[1].down.apply_vec(&mid.view())?;
    let mid_back = levels[1].up.apply_vec(&coarse.view())?;
    let fine_back = levels[0].up.apply_vec(&mid_back.view())?;
    let affine_round_trip_error = probe
        .iter()
        .zip(fine_back.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(LevelsDiagnostics {
        level_sizes: [levels[0].fine_n, levels[0].coarse_n, levels[1].coarse_n],
        graph_nnz: [levels[0].coarse_graph.nnz(), levels[1].coarse_graph.nnz()],
        fallback_counts: [
            levels[0].down.fallback_counts(),
            levels[0].up.fallback_counts(),
            levels[1].down.fallback_counts(),
            levels[1].up.fallback_counts(),
        ],
        affine_round_trip_error,
    })
}

/// Pointer from a model checkpoint to the levels it was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelsRef {
    /// File name (or path) of the levels checkpoint.
    pub file: String,
    /// Expected fine/mid/coarse node counts, revalidated on load.
    pub level_sizes: [usize; 3],
}

/// A trained model: configuration, every parameter tensor, the scalers it
/// normalizes with, and the levels it requires.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub layers: Vec<GcnLayer>,
    pub scalers: Scalers,
    pub levels_ref: LevelsRef,
}

impl ModelCheckpoint {
    pub fn from_model(model: &Model, scalers: &Scalers, levels_file: impl Into<String>) -> Self {
        Self {
            config: model.config.clone(),
            layers: model.layers.clone(),
            scalers: scalers.clone(),
            levels_ref: LevelsRef {
                file: levels_file.into(),
                level_sizes: [
                    model.geometry.n_fine(),
                    model.geometry.n_mid(),
                    model.geometry.n_coarse(),
                ],
            },
        }
    }

    /// Reject non-finite parameters and scaler bounds before they can reach
    /// a file.
    pub fn validate(&self) -> Result<()> {
        for (idx, layer) in self.layers.iter().enumerate() {
            layer
                .validate()
                .map_err(|e| Error::InvalidArgument(format!("layer {idx}: {e}")))?;
        }
        for scaler in self.scalers.inputs.iter().chain(&self.scalers.targets) {
            if !scaler.min.is_finite() || !scaler.max.is_finite() {
                return Err(Error::NonFinite("scaler bounds".into()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        write_checkpoint(path.as_ref(), KIND_MODEL, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let checkpoint: Self = read_checkpoint(path.as_ref(), KIND_MODEL)?;
        checkpoint.validate()?;
        Ok(checkpoint)
    }

    /// Reattach the stored parameters to a pooling geometry, which must
    /// match the referenced levels' sizes.
    pub fn into_model(self, geometry: Arc<ModelGeometry>) -> Result<(Model, Scalers)> {
        let actual = [geometry.n_fine(), geometry.n_mid(), geometry.n_coarse()];
        if actual != self.levels_ref.level_sizes {
            return Err(Error::ShapeMismatch(format!(
                "geometry sizes {:?} do not match the levels this model was trained with \
                 ({:?} from {})",
                actual, self.levels_ref.level_sizes, self.levels_ref.file
            )));
        }
        let model = Model::from_parts(self.config, geometry, self.layers)?;
        Ok((model, self.scalers))
    }
}

fn write_checkpoint(path: &Path, kind: u8, body: &impl Serialize) -> Result<()> {
    let json = serde_json::to_vec(body)
        .map_err(|e| Error::Checkpoint { path: path.into(), msg: format!("encode: {e}") })?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    out.write_all(MAGIC).map_err(io)?;
    out.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(io)?;
    out.write_u8(kind).map_err(io)?;
    out.write_all(&json).map_err(io)?;
    out.flush().map_err(io)
}

fn read_checkpoint<T: DeserializeOwned>(path: &Path, expected_kind: u8) -> Result<T> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = std::io::BufReader::new(file);
    let bad = |msg: String| Error::Checkpoint { path: path.into(), msg };
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| bad("file too short for a checkpoint header".into()))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let version = input
        .read_u32::<LittleEndian>()
        .map_err(|_| bad("truncated header".into()))?;
    if version != FORMAT_VERSION {
        return Err(bad(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let kind = input.read_u8().map_err(|_| bad("truncated header".into()))?;
    if kind != expected_kind {
        return Err(bad(format!(
            "this is a {} checkpoint, expected {}",
            kind_name(kind),
            kind_name(expected_kind)
        )));
    }
    let mut json = Vec::new();
    input.read_to_end(&mut json).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&json).map_err(|e| bad(format!("decode: {e}")))
}
