//! Built-in multimodal workload presets.
//!
//! Per-sample forward TFLOPs and compute intensities follow published module
//! measurements where available; the remaining modules are sized to match
//! their architecture class. A training iteration is forward plus backward
//! (3x forward) over a global batch of 256 samples.

use crate::interference::InterferenceModel;
use crate::profiler::{MemoryModel, ModuleWorkload, WorkloadSet};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

pub const GLOBAL_BATCH: f64 = 256.0;
const TRAIN_FLOP_FACTOR: f64 = 3.0;

/// Contention coefficients used as the synthetic world's ground truth.
pub fn default_ground_truth() -> InterferenceModel {
    InterferenceModel::new(0.02, 0.25, 0.8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    Clip,
    Qwen3Vl,
    ImageBind,
    UnifiedIo2,
    OfaSys,
}

impl Preset {
    pub const ALL: [Preset; 5] =
        [Preset::Clip, Preset::Qwen3Vl, Preset::ImageBind, Preset::UnifiedIo2, Preset::OfaSys];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Clip => "clip",
            Preset::Qwen3Vl => "qwen3vl",
            Preset::ImageBind => "imagebind",
            Preset::UnifiedIo2 => "unifiedio2",
            Preset::OfaSys => "ofasys",
        }
    }

    /// Range of selectable encoder counts, for presets that allow trimming.
    pub fn encoder_range(self) -> Option<(usize, usize)> {
        match self {
            Preset::ImageBind => Some((1, 6)),
            Preset::OfaSys => Some((1, 9)),
            _ => None,
        }
    }

    /// The full preset.
    pub fn workloads(self) -> WorkloadSet {
        self.with_encoders(None).expect("default encoder count is valid")
    }

    /// The preset with only the first `encoders` encoders kept.
    pub fn with_encoders(self, encoders: Option<usize>) -> Result<WorkloadSet, PresetError> {
        let (encs, sink): (Vec<Row>, Row) = match self {
            Preset::Clip => {
                let set = build(
                    &[
                        row("vision", 2.00, 40.0, 0.63, 0.6),
                        row("text", 0.15, 15.0, 0.12, 0.4),
                        row("alignment", 0.01, 4.0, 0.002, 0.2),
                    ],
                    &[("vision", "alignment"), ("text", "alignment")],
                );
                return self.no_trim(encoders, set);
            }
            Preset::Qwen3Vl => {
                let set = build(
                    &[
                        row("llm", 22.27, 145.2, 7.6, 0.9),
                        row("vision", 2.58, 82.4, 0.6, 0.7),
                        row("text", 0.15, 2.1, 0.6, 0.2),
                    ],
                    &[("vision", "llm"), ("text", "llm")],
                );
                return self.no_trim(encoders, set);
            }
            Preset::UnifiedIo2 => {
                let set = build(
                    &[
                        row("llm", 16.70, 110.5, 3.0, 0.85),
                        row("vision", 1.48, 24.6, 0.09, 0.5),
                        row("audio", 1.06, 21.8, 0.09, 0.5),
                        row("text", 0.10, 4.5, 0.1, 0.2),
                    ],
                    &[("vision", "llm"), ("audio", "llm"), ("text", "llm")],
                );
                return self.no_trim(encoders, set);
            }
            Preset::ImageBind => (
                vec![
                    row("vision", 4.17, 35.2, 0.63, 0.6),
                    row("audio", 2.09, 22.8, 0.09, 0.5),
                    row("text", 1.04, 20.5, 0.35, 0.5),
                    row("depth", 1.04, 18.0, 0.09, 0.5),
                    row("thermal", 1.04, 17.5, 0.09, 0.5),
                    row("imu", 0.26, 9.0, 0.03, 0.3),
                ],
                row("alignment", 0.02, 4.0, 0.01, 0.2),
            ),
            Preset::OfaSys => (
                vec![
                    row("vision", 1.35, 18.2, 0.16, 0.5),
                    row("text", 0.72, 12.5, 0.08, 0.4),
                    row("audio", 0.95, 14.8, 0.12, 0.4),
                    row("video", 2.10, 24.0, 0.20, 0.6),
                    row("speech", 0.85, 13.5, 0.10, 0.4),
                    row("box", 0.08, 3.0, 0.01, 0.2),
                    row("structure", 0.15, 5.5, 0.02, 0.2),
                    row("motion", 0.40, 10.5, 0.05, 0.3),
                    row("action", 0.10, 4.0, 0.01, 0.2),
                ],
                row("llm", 4.80, 41.6, 0.7, 0.7),
            ),
        };
        let (lo, hi) = self.encoder_range().unwrap();
        let n = encoders.unwrap_or(hi);
        if n < lo || n > hi {
            return Err(PresetError::EncoderCount { preset: self.name(), requested: n, min: lo, max: hi });
        }
        let mut rows: Vec<Row> = encs.into_iter().take(n).collect();
        let edges: Vec<(&str, &str)> = rows.iter().map(|r| (r.id, sink.id)).collect();
        rows.push(sink);
        Ok(build(&rows, &edges))
    }

    fn no_trim(self, encoders: Option<usize>, set: WorkloadSet) -> Result<WorkloadSet, PresetError> {
        match encoders {
            None => Ok(set),
            Some(n) if n + 1 == set.modules.len() => Ok(set),
            Some(n) => Err(PresetError::EncoderCount {
                preset: self.name(),
                requested: n,
                min: set.modules.len() - 1,
                max: set.modules.len() - 1,
            }),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PresetError {
    #[error("unknown preset `{0}` (expected clip, qwen3vl, imagebind, unifiedio2 or ofasys)")]
    Unknown(String),
    #[error("preset {preset} supports {min}..={max} encoders, not {requested}")]
    EncoderCount { preset: &'static str, requested: usize, min: usize, max: usize },
}

impl FromStr for Preset {
    type Err = PresetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| PresetError::Unknown(s.to_string()))
    }
}

struct Row {
    id: &'static str,
    tflops: f64,
    ci: f64,
    params_b: f64,
    knee: f64,
}

fn row(id: &'static str, tflops: f64, ci: f64, params_b: f64, knee: f64) -> Row {
    Row { id, tflops, ci, params_b, knee }
}

fn build(rows: &[Row], edges: &[(&str, &str)]) -> WorkloadSet {
    let modules = rows
        .iter()
        .map(|r| {
            let flops = r.tflops * 1e12 * TRAIN_FLOP_FACTOR * GLOBAL_BATCH;
            let params = r.params_b * 1e9;
            ModuleWorkload {
                id: r.id.to_string(),
                name: r.id.to_string(),
                flops_per_iter: flops,
                bytes_per_iter: flops / r.ci,
                gradient_bytes: 2.0 * params,
                sm_efficiency_knee: r.knee,
                memory_model: MemoryModel { base: (2e9 + 2e9 * r.tflops).min(20e9), per_quota: 1e9 },
                memory_base: 6.0 * params,
                target_ci: Some(r.ci),
            }
        })
        .collect();
    WorkloadSet {
        modules,
        edges: edges.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Dag;

    #[test]
    fn presets_are_valid_dags() {
        for p in Preset::ALL {
            let set = p.workloads();
            set.validate().unwrap();
            Dag::new(&set.graph()).unwrap();
        }
    }

    #[test]
    fn module_counts() {
        assert_eq!(Preset::Clip.workloads().modules.len(), 3);
        assert_eq!(Preset::Qwen3Vl.workloads().modules.len(), 3);
        assert_eq!(Preset::ImageBind.workloads().modules.len(), 7);
        assert_eq!(Preset::OfaSys.workloads().modules.len(), 10);
        assert_eq!(Preset::OfaSys.with_encoders(Some(3)).unwrap().modules.len(), 4);
        assert!(Preset::OfaSys.with_encoders(Some(10)).is_err());
        assert!(Preset::Clip.with_encoders(Some(5)).is_err());
        assert!("mystery".parse::<Preset>().is_err());
        assert_eq!("OFASys".parse::<Preset>().unwrap(), Preset::OfaSys);
    }

    #[test]
    fn qwen_intensities_match_published_values() {
        let set = Preset::Qwen3Vl.workloads();
        let ci = |id: &str| set.get(id).unwrap().compute_intensity();
        assert!((ci("text") - 2.1).abs() < 1e-9);
        assert!((ci("vision") - 82.4).abs() < 1e-9);
        assert!((ci("llm") - 145.2).abs() < 1e-9);
        let llm = set.get("llm").unwrap();
        assert!((llm.flops_per_iter / (TRAIN_FLOP_FACTOR * GLOBAL_BATCH) - 22.27e12).abs() < 1e3);
    }
}
