//! Experiment configuration (TOML). Every field has a default so a config file
//! only lists what it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DyadError, Result};
use crate::lattice::Grid;
use crate::measures::{generate, LatticeMeasure, MeasureSpec};
use crate::operators::{DiscretizedOperator, KernelSpec, TruncationSpec, DEFAULT_MATRIX_BUDGET};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeConfig {
    pub n: usize,
    pub depth: u32,
    /// root corner; zeros when omitted
    pub origin: Option<Vec<f64>>,
    pub side: f64,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        LatticeConfig { n: 1, depth: 9, origin: None, side: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasureConfig {
    pub sigma: String,
    pub omega: String,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        MeasureConfig { sigma: "lebesgue".into(), omega: "lebesgue".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorConfig {
    pub kernel: String,
    /// inner truncation radius in finest-cell sides
    pub delta_cells: f64,
    /// outer radius in physical units; twice the root diameter when omitted
    pub r: Option<f64>,
    pub smooth: bool,
    pub budget: usize,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        OperatorConfig { kernel: "hilbert".into(), delta_cells: 4.0, r: None, smooth: true, budget: DEFAULT_MATRIX_BUDGET }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// sampled cubes; 0 means every cube down to `max_level`
    pub cubes: usize,
    pub max_level: u32,
    pub random_subsets: usize,
    pub polys: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { cubes: 0, max_level: 4, random_subsets: 2, polys: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamConfig {
    pub kappa: usize,
    /// fractional order for the good-λ suite (the kernel carries its own α)
    pub alpha: f64,
    pub gamma: f64,
    pub tau: u32,
    /// `random` or `constant`
    pub test_function: String,
    pub goodness_r: u32,
    pub goodness_epsilon: f64,
}

impl Default for ParamConfig {
    fn default() -> Self {
        ParamConfig {
            kappa: 2,
            alpha: 0.5,
            gamma: 4.0,
            tau: 3,
            test_function: "random".into(),
            goodness_r: 4,
            goodness_epsilon: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CeilingConfig {
    /// theorem-level bounded ratios
    pub t1: f64,
    /// lemma diagnostics
    pub lemma: f64,
}

impl Default for CeilingConfig {
    fn default() -> Self {
        CeilingConfig { t1: 100.0, lemma: 10.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("dyadlab-out") }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub id: String,
    pub seed: u64,
    pub lattice: LatticeConfig,
    pub measures: MeasureConfig,
    pub operator: OperatorConfig,
    pub samplers: SamplerConfig,
    pub params: ParamConfig,
    pub ceilings: CeilingConfig,
    pub output: OutputConfig,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| DyadError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        MeasureSpec::parse(&self.measures.sigma)?;
        MeasureSpec::parse(&self.measures.omega)?;
        KernelSpec::parse(&self.operator.kernel, self.lattice.n)?;
        self.grid()?;
        if self.seed > i64::MAX as u64 {
            return Err(DyadError::BadParameter(format!("seed {} does not fit a TOML integer", self.seed)));
        }
        if self.params.kappa == 0 {
            return Err(DyadError::BadParameter("kappa must be >= 1".into()));
        }
        if self.params.test_function != "random" && self.params.test_function != "constant" {
            return Err(DyadError::BadParameter(format!("unknown test_function '{}'", self.params.test_function)));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        let l = &self.lattice;
        let origin = l.origin.clone().unwrap_or_else(|| vec![0.0; l.n]);
        Grid::new(l.n, l.depth, &origin, l.side)
    }

    pub fn kernel(&self) -> Result<KernelSpec> {
        KernelSpec::parse(&self.operator.kernel, self.lattice.n)
    }

    pub fn truncation(&self, grid: &Grid) -> TruncationSpec {
        let o = &self.operator;
        let r = o.r.unwrap_or(2.0 * grid.side() * (grid.n() as f64).sqrt());
        TruncationSpec { delta: o.delta_cells * grid.cell_side(), r, smooth: o.smooth }
    }
}

/// A spec materialized: lattice, both measures and the operator pair.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub spec: ExperimentSpec,
    pub grid: Grid,
    pub sigma: LatticeMeasure,
    pub omega: LatticeMeasure,
    pub kernel: KernelSpec,
    pub truncation: TruncationSpec,
}

impl Experiment {
    pub fn new(spec: &ExperimentSpec) -> Result<Self> {
        spec.validate()?;
        let grid = spec.grid()?;
        let sigma = generate(&MeasureSpec::parse(&spec.measures.sigma)?, &grid)?;
        let omega = generate(&MeasureSpec::parse(&spec.measures.omega)?, &grid)?;
        Ok(Experiment {
            kernel: spec.kernel()?,
            truncation: spec.truncation(&grid),
            spec: spec.clone(),
            grid,
            sigma,
            omega,
        })
    }

    /// `T_σ`
    pub fn operator(&self) -> Result<DiscretizedOperator> {
        DiscretizedOperator::build(&self.kernel, &self.truncation, &self.sigma, self.spec.operator.budget)
    }

    /// The same experiment with ω multiplied by `factor`.
    pub fn with_scaled_omega(&self, factor: f64) -> Result<Self> {
        Ok(Experiment { omega: self.omega.scaled(factor)?, ..self.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let spec = ExperimentSpec::default();
        assert_eq!(ExperimentSpec::from_toml(&spec.to_toml()).unwrap(), spec);
    }

    #[test]
    fn partial_file_and_unknown_keys() {
        let s = ExperimentSpec::from_toml("seed = 7\n[lattice]\ndepth = 6\n").unwrap();
        assert_eq!((s.seed, s.lattice.depth, s.lattice.n), (7, 6, 1));
        assert!(ExperimentSpec::from_toml("[lattice]\ndepht = 6\n").is_err());
    }
}
