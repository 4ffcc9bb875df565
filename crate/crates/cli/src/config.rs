use serde::{Deserialize, Serialize};

use selfcon::densities::NormKind;
use selfcon::maps::{CircleMap, CouplingKernel, TrigTerm, Wave};
use selfcon::optimal_coupling::{ConvexConstraint, GradientPath};
use selfcon::self_consistent::{OperatorPath, SelfConsistentModel, SolverOptions, SystemClass};
use selfcon::transfer_ops::NoiseProfile;
use selfcon::{Error, Result};

/// JSON schema of [`ExperimentConfig`].
pub const SCHEMA: &str = include_str!("../schema/experiment.schema.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    FixedPoint,
    SweepDelta,
    ConvergeRate,
    Response,
    FdResponse,
    OptimalCoupling,
    Simulate,
    ContractionReport,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::FixedPoint => "fixed-point",
            Command::SweepDelta => "sweep-delta",
            Command::ConvergeRate => "converge-rate",
            Command::Response => "response",
            Command::FdResponse => "fd-response",
            Command::OptimalCoupling => "optimal-coupling",
            Command::Simulate => "simulate",
            Command::ContractionReport => "contraction-report",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Command,
    pub model: ModelSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub params: ParamsSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub class: SystemClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<MapSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling: Option<CouplingSpec>,
    /// Second population (two-population class only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map2: Option<MapSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling2: Option<CouplingSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    #[serde(default)]
    pub delta: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub deltas: Vec<f64>,
    pub n: usize,
    #[serde(default)]
    pub path: OperatorPath,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MapSpec {
    Doubling,
    LinearExpanding { k: u32 },
    PerturbedDoubling { eps: f64 },
    Tent,
}

impl MapSpec {
    pub fn build(&self) -> Result<CircleMap<f64>> {
        match self {
            MapSpec::Doubling => Ok(CircleMap::doubling()),
            MapSpec::LinearExpanding { k } => CircleMap::linear_expanding(*k),
            MapSpec::PerturbedDoubling { eps } => CircleMap::perturbed_doubling(*eps),
            MapSpec::Tent => Ok(CircleMap::tent()),
        }
    }
}

/// One term `coeff · X_x(x) · Y_y(y)`; wave labels are `k` for
/// `cos(2πk·)`, `-k` for `sin(2πk·)` and `0` for the constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FourierTerm {
    pub coeff: f64,
    pub x: i64,
    pub y: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CouplingSpec {
    SineDifference,
    Product { offset: f64, amplitude: f64 },
    Fourier { terms: Vec<FourierTerm> },
}

impl CouplingSpec {
    pub fn build(&self) -> Result<CouplingKernel<f64>> {
        match self {
            CouplingSpec::SineDifference => Ok(CouplingKernel::sine_difference()),
            CouplingSpec::Product { offset, amplitude } => Ok(CouplingKernel::product(*offset, *amplitude)),
            CouplingSpec::Fourier { terms } => {
                if terms.is_empty() {
                    return Err(Error::Config("fourier coupling needs at least one term".into()));
                }
                let terms = terms
                    .iter()
                    .map(|t| TrigTerm { coeff: t.coeff, x: Wave::from_signed_index(t.x), y: Wave::from_signed_index(t.y) })
                    .collect();
                Ok(CouplingKernel::from_terms("fourier", terms))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseSpec {
    Gaussian { sigma: f64 },
    TruncatedGaussian { sigma: f64 },
    Uniform { half_width: f64 },
    Triangular { half_width: f64 },
}

impl NoiseSpec {
    pub fn build(&self) -> Result<NoiseProfile<f64>> {
        match self {
            NoiseSpec::Gaussian { sigma } => NoiseProfile::gaussian(*sigma),
            NoiseSpec::TruncatedGaussian { sigma } => NoiseProfile::truncated_gaussian(*sigma),
            NoiseSpec::Uniform { half_width } => NoiseProfile::uniform(*half_width),
            NoiseSpec::Triangular { half_width } => NoiseProfile::triangular(*half_width),
        }
    }
}

fn required<'a, T>(v: &'a Option<T>, what: &str, class: SystemClass) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::Config(format!("model.{what} is required for the {class:?} class")))
}

impl ModelSpec {
    /// The model at coupling strength `delta`.
    pub fn build_at(&self, delta: f64) -> Result<SelfConsistentModel<f64>> {
        let class = self.class;
        let model = match class {
            SystemClass::Expanding => SelfConsistentModel::expanding(
                required(&self.map, "map", class)?.build()?,
                required(&self.coupling, "coupling", class)?.build()?,
                delta,
                self.n,
            )?,
            SystemClass::AdditiveNoiseCircle => SelfConsistentModel::additive_noise_circle(
                required(&self.map, "map", class)?.build()?,
                required(&self.coupling, "coupling", class)?.build()?,
                required(&self.noise, "noise", class)?.build()?,
                delta,
                self.n,
            )?,
            SystemClass::ReflectingKernelInterval => {
                if !matches!(self.map, None | Some(MapSpec::Tent)) || self.coupling.is_some() {
                    return Err(Error::Config("the reflecting interval class uses the tent map and no coupling kernel".into()));
                }
                SelfConsistentModel::reflecting_tent(required(&self.noise, "noise", class)?.build()?, delta, self.n)?
            }
            SystemClass::TwoPopulation => {
                let w = required(&self.weights, "weights", class)?;
                SelfConsistentModel::two_population(
                    (required(&self.map, "map", class)?.build()?, required(&self.map2, "map2", class)?.build()?),
                    (
                        required(&self.coupling, "coupling", class)?.build()?,
                        required(&self.coupling2, "coupling2", class)?.build()?,
                    ),
                    (w[0], w[1]),
                    delta,
                    self.n,
                )?
            }
        };
        Ok(model.with_path(self.path))
    }

    pub fn build(&self) -> Result<SelfConsistentModel<f64>> {
        self.build_at(self.delta)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMethod {
    #[default]
    Picard,
    Outer,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default)]
    pub method: SolverMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub damping: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_tol: Option<f64>,
}

impl SolverSpec {
    pub fn options(&self) -> SolverOptions<f64> {
        let mut o = match self.method {
            SolverMethod::Picard => SolverOptions::picard_default(),
            SolverMethod::Outer => SolverOptions::outer_default(),
        };
        if let Some(t) = self.tol {
            o.tol = t;
        }
        if let Some(m) = self.max_iter {
            o.max_iter = m;
        }
        if let Some(t) = self.inner_tol {
            o.inner_tol = t;
        }
        o.damping_fallback = self.damping;
        o
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directory: Option<String>,
    #[serde(default = "yes")]
    pub plots: bool,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec { directory: None, plots: true, seed: 0 }
    }
}

/// Command-specific settings; every field has a default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSpec {
    /// Iterations for decay curves (default 30).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strong_norm: Option<NormKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weak_norm: Option<NormKind>,
    /// Observable as a wave label (`1` is `cos 2πx`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observable_wave: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimization: Option<OptimizationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particles: Option<ParticleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contraction: Option<ContractionSpec>,
}

impl ParamsSpec {
    pub fn strong(&self) -> NormKind {
        self.strong_norm.unwrap_or(NormKind::W11)
    }

    pub fn weak(&self) -> NormKind {
        self.weak_norm.unwrap_or(NormKind::L1)
    }

    pub fn observable(&self) -> Wave {
        Wave::from_signed_index(self.observable_wave.unwrap_or(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizationSpec {
    #[serde(default = "default_degree")]
    pub degree: u32,
    /// Metric weight exponent; defaults by system class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponent: Option<f64>,
    pub constraint: ConvexConstraint<f64>,
    #[serde(default)]
    pub gradient_path: GradientPath,
    #[serde(default = "default_certificate")]
    pub certificate_samples: usize,
}

fn default_degree() -> u32 {
    8
}

fn default_certificate() -> usize {
    selfcon::optimal_coupling::CERTIFICATE_SAMPLES
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleSpec {
    pub agents: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    /// Steps averaged after the burn-in.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
}

fn default_burn_in() -> usize {
    selfcon::particle_sim::DEFAULT_BURN_IN
}

fn default_samples() -> usize {
    50
}

fn default_bins() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractionSpec {
    #[serde(default = "default_n1_max")]
    pub n1_max: u32,
    #[serde(default = "default_one")]
    pub q: f64,
    #[serde(default = "default_one")]
    pub c: f64,
    #[serde(default = "default_ly_samples")]
    pub ly_samples: usize,
    /// Upper end of the scan for the critical coupling strength.
    #[serde(default = "default_delta_max")]
    pub delta_max: f64,
}

impl Default for ContractionSpec {
    fn default() -> Self {
        ContractionSpec {
            n1_max: default_n1_max(),
            q: 1.0,
            c: 1.0,
            ly_samples: default_ly_samples(),
            delta_max: default_delta_max(),
        }
    }
}

fn default_n1_max() -> u32 {
    10
}

fn default_one() -> f64 {
    1.0
}

fn default_ly_samples() -> usize {
    60
}

fn default_delta_max() -> f64 {
    1.0
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks that do not need to build the model.
    pub fn validate(&self) -> Result<()> {
        let needs_deltas = matches!(self.command, Command::SweepDelta | Command::FdResponse);
        if needs_deltas && self.model.deltas.is_empty() {
            return Err(Error::Config(format!("{} needs model.deltas", self.command.name())));
        }
        if self.command == Command::OptimalCoupling && self.params.optimization.is_none() {
            return Err(Error::Config("optimal-coupling needs params.optimization".into()));
        }
        if self.command == Command::Simulate && self.params.particles.is_none() {
            return Err(Error::Config("simulate needs params.particles".into()));
        }
        if self.model.deltas.iter().chain([&self.model.delta]).any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::Config("coupling strengths must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "command": "fixed-point",
        "model": {"class": "expanding", "map": {"name": "doubling"},
                  "coupling": {"kind": "product", "offset": 1.0, "amplitude": 0.1}, "n": 64}
    }"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.command, Command::FixedPoint);
        assert_eq!(c.model.delta, 0.0);
        assert_eq!(c.solver.method, SolverMethod::Picard);
        assert!(c.output.plots);
        c.model.build().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let bad = MINIMAL.replace("\"n\": 64", "\"n\": 64, \"cells\": 3");
        assert!(matches!(ExperimentConfig::parse(&bad), Err(Error::Parse(_))));
        let bad = MINIMAL.replace("doubling", "squaring");
        assert!(ExperimentConfig::parse(&bad).is_err());
    }

    #[test]
    fn round_trip_is_lossless() {
        let text = r#"{
            "command": "optimal-coupling",
            "model": {"class": "additive-noise-circle", "map": {"name": "perturbed-doubling", "eps": 0.1},
                      "coupling": {"kind": "fourier", "terms": [{"coeff": 0.5, "x": -1, "y": 0}]},
                      "noise": {"kind": "gaussian", "sigma": 0.1}, "delta": 0.0, "deltas": [0.01], "n": 128,
                      "path": "interpolated"},
            "solver": {"method": "outer", "tol": 1e-9, "max_iter": 50, "damping": 0.5, "inner_tol": 1e-13},
            "output": {"directory": "out", "plots": false, "seed": 17},
            "params": {"steps": 12, "strong_norm": "w11", "weak_norm": "l1", "observable_wave": -2,
                       "optimization": {"degree": 3, "exponent": 1.5,
                                        "constraint": {"kind": "ball-intersect-box", "radius": 1.0,
                                                       "lower": [-1.0], "upper": [1.0]},
                                        "gradient_path": "per-mode", "certificate_samples": 100},
                       "particles": {"agents": 10, "burn_in": 1, "samples": 2, "bins": 8},
                       "contraction": {"n1_max": 3, "q": 2.0, "c": 0.5, "ly_samples": 50, "delta_max": 0.5}}
        }"#;
        let c = ExperimentConfig::parse(text).unwrap();
        let again = ExperimentConfig::parse(&c.to_json()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.to_json(), again.to_json());
    }

    #[test]
    fn command_requirements() {
        let sweep = MINIMAL.replace("fixed-point", "sweep-delta");
        assert!(matches!(ExperimentConfig::parse(&sweep), Err(Error::Config(_))));
        let neg = MINIMAL.replace("\"n\": 64", "\"n\": 64, \"delta\": -0.1");
        assert!(ExperimentConfig::parse(&neg).is_err());
    }

    #[test]
    fn class_requirements() {
        let text = MINIMAL.replace("\"expanding\"", "\"additive-noise-circle\"");
        let c = ExperimentConfig::parse(&text).unwrap();
        assert!(matches!(c.model.build(), Err(Error::Config(_))));
    }

    #[test]
    fn schema_names_every_command_and_class() {
        let schema: serde_json::Value = serde_json::from_str(SCHEMA).unwrap();
        let commands = schema["properties"]["command"]["enum"].as_array().unwrap();
        for c in [
            Command::FixedPoint,
            Command::SweepDelta,
            Command::ConvergeRate,
            Command::Response,
            Command::FdResponse,
            Command::OptimalCoupling,
            Command::Simulate,
            Command::ContractionReport,
        ] {
            assert!(commands.iter().any(|v| v == c.name()), "{}", c.name());
            assert_eq!(serde_json::to_value(c).unwrap(), c.name());
        }
        let classes = schema["$defs"]["model"]["properties"]["class"]["enum"].as_array().unwrap();
        assert_eq!(classes.len(), 4);
        for class in classes {
            serde_json::from_value::<SystemClass>(class.clone()).unwrap();
        }
    }
}
