//! Versioned JSON documents for every artifact the planner reads or writes.
//!
//! Each file is one JSON object with a `format` field of the form
//! `mosaic/<kind>` and an integer `version`, followed by the kind's fields.

use crate::cluster::ClusterSpec;
use crate::graph::ModelGraph;
use crate::interference::{ColocationSample, InterferenceModel};
use crate::plan::DeploymentPlan;
use crate::profiler::WorkloadSet;
use crate::sim::SimulationReport;
use crate::solver::SolveTrace;
use crate::surface::{ScalingSurface, SurfaceError, SurfacePoint};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
const FORMAT_PREFIX: &str = "mosaic/";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{context}: {source}")]
    Parse { context: String, source: serde_json::Error },
    #[error("{context}: expected format `mosaic/{expected}`, found `{found}`")]
    WrongFormat { context: String, expected: &'static str, found: String },
    #[error("{context}: unsupported version {found} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion { context: String, found: u32 },
    #[error(transparent)]
    Surface(#[from] SurfaceError),
}

/// A payload type with a fixed document kind.
pub trait Document: Serialize + DeserializeOwned {
    const KIND: &'static str;
}

#[derive(Serialize)]
struct EnvelopeOut<'a, T> {
    format: String,
    version: u32,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Deserialize)]
struct EnvelopeIn<T> {
    #[serde(flatten)]
    body: T,
}

/// Pretty-printed document text, newline-terminated.
pub fn to_string<T: Document>(value: &T) -> String {
    let env = EnvelopeOut { format: format!("{FORMAT_PREFIX}{}", T::KIND), version: FORMAT_VERSION, body: value };
    let mut s = serde_json::to_string_pretty(&env).expect("documents serialize");
    s.push('\n');
    s
}

/// Parses a document, checking its kind and version first.
pub fn from_str<T: Document>(text: &str, context: &str) -> Result<T, IoError> {
    let parse = |source| IoError::Parse { context: context.to_string(), source };
    let header: Header = serde_json::from_str(text).map_err(parse)?;
    if header.format.strip_prefix(FORMAT_PREFIX) != Some(T::KIND) {
        return Err(IoError::WrongFormat { context: context.to_string(), expected: T::KIND, found: header.format });
    }
    if header.version != FORMAT_VERSION {
        return Err(IoError::UnsupportedVersion { context: context.to_string(), found: header.version });
    }
    let env: EnvelopeIn<T> = serde_json::from_str(text).map_err(parse)?;
    Ok(env.body)
}

pub fn save<T: Document>(path: &Path, value: &T) -> Result<(), IoError> {
    std::fs::write(path, to_string(value)).map_err(|source| IoError::Io { path: path.to_path_buf(), source })
}

pub fn load<T: Document>(path: &Path) -> Result<T, IoError> {
    let text = std::fs::read_to_string(path).map_err(|source| IoError::Io { path: path.to_path_buf(), source })?;
    from_str(&text, &path.display().to_string())
}

/// One module's surface as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceRecord {
    pub module_id: String,
    pub points: Vec<SurfacePoint>,
}

impl From<&ScalingSurface> for SurfaceRecord {
    fn from(s: &ScalingSurface) -> Self {
        SurfaceRecord { module_id: s.module_id().to_string(), points: s.points().to_vec() }
    }
}

/// Scaling surfaces plus colocation samples, as produced by profiling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSet {
    pub surfaces: Vec<SurfaceRecord>,
    #[serde(default)]
    pub samples: Vec<ColocationSample>,
}

impl ProfileSet {
    pub fn new(surfaces: &[ScalingSurface], samples: Vec<ColocationSample>) -> Self {
        ProfileSet { surfaces: surfaces.iter().map(SurfaceRecord::from).collect(), samples }
    }

    /// Validated surfaces.
    pub fn scaling_surfaces(&self) -> Result<Vec<ScalingSurface>, IoError> {
        self.surfaces
            .iter()
            .map(|r| ScalingSurface::from_points(r.module_id.clone(), r.points.clone()).map_err(IoError::from))
            .collect()
    }
}

/// Fitted contention models with their diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterferenceFile {
    /// The model planning uses.
    pub model: InterferenceModel,
    /// Additive-only fit on the same samples, kept for comparison.
    #[serde(default)]
    pub additive_only: Option<InterferenceModel>,
    /// Whether a module counts itself among its GPU's residents.
    #[serde(default = "default_include_self")]
    pub include_self: bool,
}

fn default_include_self() -> bool {
    true
}

impl InterferenceFile {
    pub fn single(model: InterferenceModel) -> Self {
        InterferenceFile { model, additive_only: None, include_self: true }
    }
}

impl Document for ModelGraph {
    const KIND: &'static str = "model";
}
impl Document for ClusterSpec {
    const KIND: &'static str = "cluster";
}
impl Document for WorkloadSet {
    const KIND: &'static str = "workloads";
}
impl Document for ProfileSet {
    const KIND: &'static str = "profiles";
}
impl Document for InterferenceFile {
    const KIND: &'static str = "interference";
}
impl Document for DeploymentPlan {
    const KIND: &'static str = "plan";
}
impl Document for SolveTrace {
    const KIND: &'static str = "trace";
}
impl Document for SimulationReport {
    const KIND: &'static str = "report";
}
