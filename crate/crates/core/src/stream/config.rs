use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::gaussian::{DynamicClassSet, SceneInit};
use crate::raster::{GridConfig, SplatParams};
use crate::refine::{OracleParams, RefinerConfig};
use crate::sim::VisibilityParams;
use crate::taxonomy;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorKind {
    Oracle,
    Gradient,
}

impl std::str::FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "gradient" => Ok(Self::Gradient),
            _ => Err(Error::InvalidArgument(format!("unknown operator {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub disable_ego_alignment: bool,
    pub disable_dynamics: bool,
    pub disable_completion: bool,
}

/// Phased history-drop schedule: phase `k` runs `durations[k]` sequences
/// of `lengths[k]` frames with drop probability decaying linearly from
/// `p_max` to zero in the final phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub lengths: Vec<usize>,
    pub durations: Vec<usize>,
    pub p_max: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            lengths: vec![5, 10, 20, 30, 38],
            durations: vec![5, 5, 5, 5, 20],
            p_max: 0.5,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() || self.lengths.len() != self.durations.len() {
            return Err(Error::InvalidArgument(
                "schedule needs matching, non-empty lengths and durations".into(),
            ));
        }
        if self.lengths.contains(&0) || self.lengths.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidArgument(
                "sequence lengths must be positive and non-decreasing".into(),
            ));
        }
        if self.durations.contains(&0) {
            return Err(Error::InvalidArgument("phase durations must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_max) {
            return Err(Error::InvalidArgument(format!("p_max {} outside [0, 1]", self.p_max)));
        }
        Ok(())
    }

    /// Phase of a global iteration; iterations past the end stay in the
    /// final phase.
    pub fn phase(&self, iteration: usize) -> usize {
        let mut end = 0;
        for (k, &d) in self.durations.iter().enumerate() {
            end += d;
            if iteration < end {
                return k;
            }
        }
        self.durations.len() - 1
    }

    pub fn phase_p(&self, phase: usize) -> f64 {
        let last = self.lengths.len() - 1;
        if phase >= last {
            return 0.0;
        }
        self.p_max * (last - phase) as f64 / last as f64
    }

    pub fn sequence_length(&self, iteration: usize) -> usize {
        self.lengths[self.phase(iteration)]
    }

    pub fn total_iterations(&self) -> usize {
        self.durations.iter().sum()
    }
}

/// Drop probability at a global iteration of the schedule.
pub fn schedule_p(iteration: usize, schedule: &Schedule) -> f64 {
    schedule.phase_p(schedule.phase(iteration))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub num_gaussians: usize,
    /// Perception grid; its extent is the perception range.
    pub grid: GridConfig,
    pub splat: SplatParams,
    pub refiner: RefinerConfig,
    pub init: SceneInit,
    pub visibility: VisibilityParams,
    pub oracle: OracleParams,
    pub operator: OperatorKind,
    /// Probability of discarding the carried state before a frame.
    pub drop_probability: f64,
    pub schedule: Schedule,
    pub ablation: Ablation,
    pub dynamic_classes: Vec<u8>,
    /// Seeds initialization, completion and history drops.
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            num_gaussians: 12_800,
            grid: GridConfig::new([100, 100, 16], Vector3::new(-25.0, -25.0, -2.0), 0.5)
                .expect("default grid is valid"),
            splat: SplatParams::default(),
            refiner: RefinerConfig::default(),
            init: SceneInit::default(),
            visibility: VisibilityParams::default(),
            oracle: OracleParams::default(),
            operator: OperatorKind::Oracle,
            drop_probability: 0.0,
            schedule: Schedule::default(),
            ablation: Ablation::default(),
            dynamic_classes: taxonomy::DEFAULT_DYNAMIC.to_vec(),
            seed: 0,
        }
    }
}

impl StreamConfig {
    /// Small range and budget sized for the gradient operator on one core.
    pub fn compact() -> Self {
        Self {
            num_gaussians: 1_200,
            grid: GridConfig::new([40, 40, 8], Vector3::new(-10.0, -10.0, -2.0), 0.5)
                .expect("compact grid is valid"),
            init: SceneInit {
                scale_min: 0.25,
                scale_max: 0.6,
            },
            visibility: VisibilityParams {
                azimuth_rays: 180,
                elevation_rays: 16,
                max_range: 15.0,
                ..VisibilityParams::default()
            },
            refiner: RefinerConfig {
                n_e: 2,
                n_r: 1,
                steps_per_layer: 4,
                ..RefinerConfig::default()
            },
            operator: OperatorKind::Gradient,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "compact" => Ok(Self::compact()),
            _ => Err(Error::InvalidArgument(format!("unknown preset {name:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.splat.validate()?;
        self.refiner.validate()?;
        self.init.validate()?;
        self.visibility.validate()?;
        self.oracle.validate()?;
        self.schedule.validate()?;
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(Error::InvalidArgument(format!(
                "drop probability {} outside [0, 1]",
                self.drop_probability
            )));
        }
        DynamicClassSet::from_labels(&self.dynamic_classes)?;
        Ok(())
    }

    pub fn dynamic_set(&self) -> Result<DynamicClassSet> {
        if self.ablation.disable_dynamics {
            return Ok(DynamicClassSet::empty());
        }
        DynamicClassSet::from_labels(&self.dynamic_classes)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("config serialization: {e}")))
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::malformed(path, e.to_string()))?;
        cfg.validate().map_err(|e| Error::malformed(path, e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_phases_follow_cumulative_durations() {
        let s = Schedule::default();
        let edges = [5, 10, 15, 20];
        let expect = [0.5, 0.375, 0.25, 0.125, 0.0];
        for it in 0..60 {
            let phase = edges.iter().filter(|&&e| it >= e).count();
            assert_eq!(s.phase(it), phase, "iteration {it}");
            assert_eq!(schedule_p(it, &s), expect[phase]);
            assert_eq!(s.sequence_length(it), s.lengths[phase]);
        }
        assert_eq!(s.total_iterations(), 40);
        assert_eq!(schedule_p(0, &s), s.p_max);
        assert_eq!(schedule_p(39, &s), 0.0);
    }

    #[test]
    fn schedule_p_is_non_increasing() {
        let s = Schedule {
            lengths: vec![1, 2, 2, 9],
            durations: vec![3, 1, 4, 2],
            p_max: 0.9,
        };
        s.validate().unwrap();
        let ps: Vec<f64> = (0..12).map(|i| schedule_p(i, &s)).collect();
        assert!(ps.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(ps[0], 0.9);
        assert_eq!(*ps.last().unwrap(), 0.0);
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        let mut s = Schedule::default();
        s.lengths = vec![5, 4, 20, 30, 38];
        assert!(s.validate().is_err());
        s = Schedule::default();
        s.p_max = 1.5;
        assert!(s.validate().is_err());
        s = Schedule::default();
        s.durations.pop();
        assert!(s.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        for cfg in [StreamConfig::default(), StreamConfig::compact()] {
            let text = cfg.to_toml().unwrap();
            let back = StreamConfig::from_toml(&text, Path::new("mem.toml")).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = StreamConfig::from_toml("num_gaussians = 64\n[refiner]\nn_e = 2\n", Path::new("p.toml")).unwrap();
        assert_eq!(cfg.num_gaussians, 64);
        assert_eq!(cfg.refiner.n_e, 2);
        assert_eq!(cfg.refiner.steps_per_layer, 8);
    }

    #[test]
    fn malformed_config_is_reported() {
        let err = StreamConfig::from_toml("drop_probability = 3.0\n", Path::new("bad.toml")).unwrap_err();
        assert!(matches!(err, Error::Malformed { .. }));
        let err = StreamConfig::from_toml("num_gaussians = \"x\"\n", Path::new("bad.toml")).unwrap_err();
        assert!(matches!(err, Error::Malformed { .. }));
    }
}
