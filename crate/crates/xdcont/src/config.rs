//! Run configuration for the `xdcont` binary: one JSON document selecting
//! the model, domain, mesh resolution, coefficients, continuation settings
//! and the study to execute. Unknown keys are rejected, every section
//! defaults to the reference setup, and validation reports the offending
//! section by name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::continuation::ContinuationSettings;
use crate::error::{Error, Result};
use crate::experiments::{DiagramOptions, SweepConfig};
use crate::fem::FemWorkspace;
use crate::mesh::{build_interval_mesh_at, build_rectangle_mesh, DomainSpec, Mesh};
use crate::models::{ModelKind, Params};

/// The scripted study `run` executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    /// Homogeneous branch only, with event detection.
    SingleBranch,
    /// Homogeneous branch plus switched branches at its leading branch
    /// points (and optionally one secondary switch); see `diagram`.
    FullDiagram,
    /// Closed-form linearized tables; no continuation.
    Turing,
    /// Relaxation-rate convergence ladder; see `sweep`.
    SweepEps,
}

/// Node counts. `ny` only applies to rectangles; when omitted it is chosen
/// to match the x spacing, so the reference 1x4 domain at nx = 26 gets
/// ny = 101.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshSpec {
    pub nx: usize,
    pub ny: Option<usize>,
}

impl Default for MeshSpec {
    fn default() -> Self {
        MeshSpec { nx: 26, ny: None }
    }
}

/// Sweep-specific fields, layered over the shared sections when
/// `study = sweep-eps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Relaxation ladder, deduplicated and run in descending order.
    pub eps_values: Vec<f64>,
    /// Number of reference bifurcation slots tracked across the ladder.
    pub n_events: usize,
    /// Worker threads for the ladder members (results are thread-count
    /// independent).
    pub threads: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        let d = SweepConfig::d_study();
        SweepSection { eps_values: d.eps_values, n_events: d.n_events, threads: d.threads }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelKind,
    pub domain: DomainSpec,
    pub mesh: MeshSpec,
    pub params: Params,
    pub continuation: ContinuationSettings,
    pub study: Study,
    pub output_dir: PathBuf,
    /// Extra switching knobs, read when `study = full-diagram`.
    pub diagram: DiagramOptions,
    /// Ladder description, read when `study = sweep-eps`.
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelKind::Cross,
            domain: DomainSpec::interval(1.0),
            mesh: MeshSpec::default(),
            params: Params::table1(),
            continuation: ContinuationSettings::default(),
            study: Study::SingleBranch,
            output_dir: PathBuf::from("out"),
            diagram: DiagramOptions::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let at = |section: &str| {
            let section = section.to_string();
            move |e: Error| Error::config(section, e.to_string())
        };
        self.domain.validate().map_err(at("domain"))?;
        self.params.validate(self.model).map_err(at("params"))?;
        self.continuation.validate().map_err(at("continuation"))?;
        if self.mesh.nx < 2 {
            return Err(Error::config("mesh.nx", format!("need at least 2 nodes, got {}", self.mesh.nx)));
        }
        if let Some(ny) = self.mesh.ny {
            if ny < 2 {
                return Err(Error::config("mesh.ny", format!("need at least 2 nodes, got {ny}")));
            }
        }
        if self.study == Study::SweepEps {
            self.to_sweep_config().validate().map_err(at("sweep"))?;
        }
        if self.study == Study::FullDiagram && self.diagram.n_primary == 0 {
            return Err(Error::config("diagram.n_primary", "a diagram needs at least one switch"));
        }
        Ok(())
    }

    /// `ny` to use: the configured one, or for rectangles the count that
    /// reproduces the x spacing (rounded).
    pub fn resolved_ny(&self) -> Option<usize> {
        match self.domain {
            DomainSpec::Interval { .. } => None,
            DomainSpec::Rectangle { lx, ly, .. } => Some(self.mesh.ny.unwrap_or_else(|| {
                let hx = lx / (self.mesh.nx - 1) as f64;
                ((ly / hx).round() as usize + 1).max(2)
            })),
        }
    }

    pub fn build_mesh(&self) -> Result<(Mesh, FemWorkspace)> {
        let mesh = match self.domain {
            DomainSpec::Interval { lx, offset } => {
                build_interval_mesh_at(lx, offset.unwrap_or(0.0), self.mesh.nx)
            }
            DomainSpec::Rectangle { .. } => {
                build_rectangle_mesh(self.domain, self.mesh.nx, self.resolved_ny().unwrap())
            }
        }?;
        let ws = FemWorkspace::new(&mesh);
        Ok((mesh, ws))
    }

    /// Assembles the ladder configuration from the shared sections plus the
    /// sweep section.
    pub fn to_sweep_config(&self) -> SweepConfig {
        SweepConfig {
            params: self.params,
            domain: self.domain,
            n_nodes: self.mesh.nx,
            eps_values: self.sweep.eps_values.clone(),
            settings: self.continuation,
            n_events: self.sweep.n_events,
            threads: self.sweep.threads,
        }
    }
}

/// Reads, defaults and validates a config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Writes the fully resolved config (all defaults applied) next to the run
/// artifacts, so a run directory is self-describing.
pub fn save_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_yields_the_reference_setup() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.model, ModelKind::Cross);
        assert_eq!(cfg.params, Params::table1());
        assert_eq!(cfg.mesh.nx, 26);
        assert_eq!(cfg.study, Study::SingleBranch);
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_key_name() {
        let err = serde_json::from_str::<RunConfig>(r#"{"paramz": {}}"#).unwrap_err();
        assert!(err.to_string().contains("paramz"), "{err}");
        let err = serde_json::from_str::<RunConfig>(r#"{"params": {"r3": 1.0}}"#).unwrap_err();
        assert!(err.to_string().contains("r3"), "{err}");
    }

    #[test]
    fn rectangle_ny_defaults_to_matching_spacing() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"domain": {"kind": "rectangle", "lx": 1.0, "ly": 4.0}, "mesh": {"nx": 26}}"#,
        )
        .unwrap();
        assert_eq!(cfg.resolved_ny(), Some(101));
        let (mesh, _) = cfg.build_mesh().unwrap();
        assert_eq!(mesh.node_count(), 26 * 101);
        assert_eq!(mesh.element_count(), 2 * 25 * 100);
    }

    #[test]
    fn invalid_eps_is_reported_as_a_params_error() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"model": "fast", "params": {"eps": -1.0}}"#).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(matches!(&err, Error::Config { path, .. } if path == "params"), "{err}");
    }

    #[test]
    fn round_trips_through_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let mut cfg = RunConfig::default();
        cfg.study = Study::FullDiagram;
        cfg.continuation.param_min = 3e-3;
        save_config(&path, &cfg).unwrap();
        let back = load_config(&path).unwrap();
        assert_eq!(back, cfg);
    }
}
