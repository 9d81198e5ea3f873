//! Pipeline configuration: one TOML document, every tunable defaulted,
//! unknown keys rejected. All randomness derives from the top-level `seed`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotate::{BaseWidths, ObstacleConfig};
use crate::error::{Error, Result};
use crate::evaluate::LossWeights;
use crate::exec::Execution;
use crate::fuse::FuseConfig;
use crate::geometry::RansacConfig;
use crate::mesh::MeshConfig;
use crate::plan::CostTable;
use crate::sim::{OracleConfig, RunSpec, WorldSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    /// Nearest-neighbour depth fill radius in pixels.
    pub densify_radius: usize,
    pub ransac: RansacConfig,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            densify_radius: 8,
            ransac: RansacConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotateConfig {
    pub widths: BaseWidths,
    pub obstacles: ObstacleConfig,
    /// Height of the pose origin above the ground; subtracted to get the
    /// ego ground trajectory.
    pub ego_base_height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapConfig {
    /// Margin in meters added around the pose trajectory to size the map.
    pub margin: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self { margin: 30.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub costs: CostTable,
    /// Gaussian smoothing width in cells; 0 disables smoothing.
    pub sigma: f64,
    /// Start and goal in world meters. When absent the planner uses the
    /// first and last ego pose.
    pub start: Option<[f64; 2]>,
    pub goal: Option<[f64; 2]>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            costs: CostTable::default(),
            sigma: 1.0,
            start: None,
            goal: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub weights: LossWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; 0 means one per logical core.
    pub workers: usize,
    pub execution: Execution,
    pub world: WorldSpec,
    pub run: RunSpec,
    pub oracle: OracleConfig,
    pub geometry: GeometryConfig,
    pub annotate: AnnotateConfig,
    pub fuse: FuseConfig,
    pub map: MapConfig,
    pub mesh: MeshConfig,
    pub plan: PlanConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string() + &span_hint(text, e.span())))?;
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&crate::io::read_text(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Replaces the seed and propagates it to every seeded stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.apply_seed();
    }

    fn apply_seed(&mut self) {
        self.world.seed = self.seed;
        self.geometry.ransac.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("fuse.resolution", self.fuse.resolution),
            ("fuse.ground_band", self.fuse.ground_band),
            ("annotate.widths.pedestrian", self.annotate.widths.pedestrian),
            ("annotate.widths.vehicle", self.annotate.widths.vehicle),
            ("annotate.widths.ego", self.annotate.widths.ego),
            ("mesh.max_edge_cells", self.mesh.max_edge_cells),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.fuse.eps > 0.0 && self.fuse.eps < 0.5) {
            return Err(Error::Config(format!("fuse.eps must lie in (0, 0.5), got {}", self.fuse.eps)));
        }
        if !(self.map.margin >= 0.0 && self.map.margin.is_finite()) {
            return Err(Error::Config("map.margin must be finite and >= 0".into()));
        }
        if !(self.plan.sigma >= 0.0 && self.plan.sigma.is_finite()) {
            return Err(Error::Config("plan.sigma must be finite and >= 0".into()));
        }
        if !(self.mesh.lambda > 0.0 && self.mesh.mu < -self.mesh.lambda) {
            return Err(Error::Config("mesh smoothing needs lambda > 0 and mu < -lambda".into()));
        }
        self.plan.costs.validate()?;
        self.eval.weights.validate()?;
        self.oracle.validate()?;
        self.world.validate()?;
        self.run.validate()
    }
}

fn span_hint(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) => format!(" (line {})", text[..r.start.min(text.len())].matches('\n').count() + 1),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::SurfaceClass;
    use crate::plan::TraversalCost;

    #[test]
    fn empty_document_gives_documented_defaults() {
        let cfg = PipelineConfig::from_toml("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.annotate.obstacles.height_threshold, 0.20);
        assert_eq!(cfg.annotate.widths.pedestrian, 0.5);
        assert_eq!(cfg.annotate.widths.vehicle, 2.0);
        assert_eq!(cfg.fuse.resolution, 0.25);
        assert_eq!((cfg.mesh.lambda, cfg.mesh.mu, cfg.mesh.iterations), (0.5, -0.53, 10));
        assert_eq!(cfg.eval.weights.crossing, 5.0);
        assert_eq!(cfg.plan.costs.cost(SurfaceClass::Road).unwrap(), 100.0);
        assert_eq!(cfg.geometry.densify_radius, 8);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in ["colour = 1", "[fuse]\nresolutoin = 0.5", "[world]\nseed = 3", "[geometry.ransac]\nseed = 1"] {
            assert!(matches!(PipelineConfig::from_toml(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn effective_config_round_trips() {
        let mut cfg = PipelineConfig::from_toml(
            "seed = 42\nworkers = 2\nexecution = \"sequential\"\n[fuse]\neps = 1e-4\n[plan]\nsigma = 2.5\nstart = [1.0, -2.0]\n[plan.costs]\nunknown = 50\nroad = 200\npedestrian = 1\ncrossing = 10\nobstacle = \"impassable\"\n",
        )
        .unwrap();
        assert_eq!(cfg.world.seed, 42);
        assert_eq!(cfg.geometry.ransac.seed, 42);
        assert_eq!(cfg.plan.costs.0[&SurfaceClass::Obstacle], TraversalCost::Impassable);
        let text = cfg.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
        cfg.set_seed(7);
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        let defaults = PipelineConfig::default().to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&defaults).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn partial_cost_table_is_an_error() {
        let err = PipelineConfig::from_toml("[plan.costs]\nroad = 20\n").unwrap_err();
        assert!(matches!(err, Error::MissingClassCost(_)));
    }

    #[test]
    fn invalid_values_are_reported() {
        assert!(PipelineConfig::from_toml("[mesh]\nmu = -0.1").is_err());
        assert!(PipelineConfig::from_toml("[oracle]\naccuracy = 0.1").is_err());
        assert!(PipelineConfig::from_toml("[world]\nroad_width = 30.0").is_err());
        let e = PipelineConfig::from_toml("seed = \"x\"").unwrap_err();
        assert!(e.to_string().contains("line 1"), "{e}");
    }
}
