use std::path::{Path, PathBuf};

use hyperloc::model::{HamiltonianModel, ModelSpec};
use hyperloc::phase::ScenarioConfig;
use hyperloc::{Error, Result};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One run: every knob lives here, flags only pick the file and output.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Relative to the config file unless absolute; `--out` overrides.
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    pub model: ModelSpec,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub spectral: SpectralBox,
    pub sweep: Sweep,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub lattice: LatticeCfg,
    #[serde(default)]
    pub flow: FlowCfg,
    #[serde(default)]
    pub phase: PhaseCfg,
    #[serde(default)]
    pub transition: TransitionCfg,
    #[serde(default)]
    pub verify: VerifyCfg,
    #[serde(default)]
    pub fbi: FbiCfg,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralBox {
    pub c0: f64,
    pub c1: f64,
    pub nu: f64,
}

impl Default for SpectralBox {
    fn default() -> Self {
        SpectralBox {
            c0: 1.0,
            c1: 2.0,
            nu: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub h: Vec<f64>,
    /// Spectral points in units of h, as [re, im] pairs.
    #[serde(default = "default_z")]
    pub z_over_h: Vec<[f64; 2]>,
}

fn default_z() -> Vec<[f64; 2]> {
    vec![[0.0, 0.0]]
}

impl Sweep {
    /// (h, z) pairs, h-major.
    pub fn points(&self) -> Vec<(f64, Complex64)> {
        let mut out = Vec::new();
        for &h in &self.h {
            for z in &self.z_over_h {
                out.push((h, Complex64::new(z[0], z[1]) * h));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub flow: f64,
    pub eikonal: f64,
    pub oracle: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            flow: 1e-10,
            eikonal: 1e-8,
            oracle: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeCfg {
    pub bound: f64,
}

impl Default for LatticeCfg {
    fn default() -> Self {
        LatticeCfg { bound: 0.2 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowCfg {
    /// Start position; defaults to rho_- of the scenario.
    #[serde(default)]
    pub x: Option<Vec<f64>>,
    /// Start momentum; omitted means lift x to Lambda_-.
    #[serde(default)]
    pub xi: Option<Vec<f64>>,
    #[serde(default)]
    pub t_end: Option<f64>,
    #[serde(default)]
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseCfg {
    /// Defaults to xi'_- of the scenario.
    #[serde(default)]
    pub eta: Option<Vec<f64>>,
    #[serde(default)]
    pub t_max: Option<f64>,
    #[serde(default)]
    pub n_t: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionCfg {
    /// Explicit (x, y') targets.
    #[serde(default)]
    pub targets: Vec<TargetPair>,
    /// Extra pairs drawn with the run seed: x in the outgoing box, y' in
    /// the eta box.
    #[serde(default)]
    pub random_targets: usize,
    /// Box for random x (half width, centered at 0); defaults to half the
    /// chart radius.
    #[serde(default)]
    pub x_box: Option<f64>,
    /// J(z) is applied to u_0 = exp(i phi_-(eps, y')/h) g(y'), g Gaussian of
    /// this width around x'_- (d > 1), sampled on this many nodes per axis.
    #[serde(default = "default_width")]
    pub cauchy_width: f64,
    #[serde(default = "default_nodes")]
    pub cauchy_nodes: usize,
}

impl Default for TransitionCfg {
    fn default() -> Self {
        TransitionCfg {
            targets: Vec::new(),
            random_targets: 0,
            x_box: None,
            cauchy_width: default_width(),
            cauchy_nodes: default_nodes(),
        }
    }
}

fn default_width() -> f64 {
    0.02
}

fn default_nodes() -> usize {
    41
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetPair {
    pub x: Vec<f64>,
    #[serde(default)]
    pub y_prime: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyCfg {
    pub matching_radius: f64,
    pub x_target: f64,
    pub resonance_count: usize,
    pub resonance_grid: usize,
    pub tube: f64,
    pub window: f64,
}

impl Default for VerifyCfg {
    fn default() -> Self {
        VerifyCfg {
            matching_radius: 4.0,
            x_target: -2.0,
            resonance_count: 5,
            resonance_grid: 2000,
            tube: 0.15,
            window: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FbiCfg {
    /// GridFunction CSV; relative to the config file. Without it a
    /// coherent state at (center_x, center_xi) is transformed.
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub center_x: Vec<f64>,
    #[serde(default)]
    pub center_xi: Vec<f64>,
    pub x_range: [f64; 2],
    pub xi_range: [f64; 2],
    pub nodes: usize,
    #[serde(default)]
    pub regions: Vec<RegionCfg>,
}

impl Default for FbiCfg {
    fn default() -> Self {
        FbiCfg {
            input: None,
            center_x: Vec::new(),
            center_xi: Vec::new(),
            x_range: [-1.0, 1.0],
            xi_range: [-1.0, 1.0],
            nodes: 41,
            regions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegionCfg {
    Ball {
        name: String,
        center: Vec<f64>,
        radius: f64,
    },
    /// Tube around Lambda_- and/or Lambda_+ over the chart box.
    Tube {
        name: String,
        thickness: f64,
        #[serde(default = "both")]
        manifolds: Vec<String>,
        #[serde(default)]
        x_max: Option<f64>,
        #[serde(default)]
        complement: bool,
    },
}

fn both() -> Vec<String> {
    vec!["minus".into(), "plus".into()]
}

/// Parsed config plus what every report needs to cite it.
pub struct Loaded {
    pub cfg: RunConfig,
    pub hash: String,
    pub base_dir: PathBuf,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::validation("config", e.message().to_string()))?;
    cfg.validate()?;
    let hash = Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { cfg, hash, base_dir })
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(field, format!("must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, l) in self.model.lambdas.iter().enumerate() {
            positive(&format!("model.lambdas[{k}]"), *l)?;
        }
        if self.sweep.h.is_empty() {
            return Err(Error::validation("sweep.h", "must be nonempty"));
        }
        if self.sweep.z_over_h.is_empty() {
            return Err(Error::validation("sweep.z_over_h", "must be nonempty"));
        }
        for (k, h) in self.sweep.h.iter().enumerate() {
            positive(&format!("sweep.h[{k}]"), *h)?;
        }
        positive("spectral.c0", self.spectral.c0)?;
        positive("spectral.c1", self.spectral.c1)?;
        positive("spectral.nu", self.spectral.nu)?;
        positive("tolerances.flow", self.tolerances.flow)?;
        positive("tolerances.eikonal", self.tolerances.eikonal)?;
        positive("tolerances.oracle", self.tolerances.oracle)?;
        positive("lattice.bound", self.lattice.bound)?;
        positive("verify.matching_radius", self.verify.matching_radius)?;
        positive("verify.tube", self.verify.tube)?;
        positive("verify.window", self.verify.window)?;
        positive("transition.cauchy_width", self.transition.cauchy_width)?;
        if self.fbi.nodes < 2 {
            return Err(Error::validation("fbi.nodes", "need at least 2"));
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<HamiltonianModel> {
        self.model.build()
    }
}
