use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use backbone_recon::camera::CameraRig;
use backbone_recon::curve::{read_points_csv, CurveParams, SegmentGrid};
use backbone_recon::epipolar::{WarmStartConfig, WarmStartPoints};
use backbone_recon::eval::{ExperimentConfig, RunReport, Scenario};
use backbone_recon::icp::SolverConfig;
use backbone_recon::raster::BinaryImage;
use backbone_recon::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Numeric,
    Io,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Config,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind {
            Kind::Config => crate::commands::EXIT_CONFIG,
            Kind::Numeric => crate::commands::EXIT_NUMERIC,
            Kind::Io => crate::commands::EXIT_IO,
        }
    }

    /// Attaches a path to the message.
    pub fn at(self, path: &Path) -> Self {
        Self {
            kind: self.kind,
            message: format!("{}: {}", path.display(), self.message),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Io(_) => Kind::Io,
            Error::Config(_) | Error::Parse(_) | Error::Json(_) | Error::Domain(_) => Kind::Config,
            _ => Kind::Numeric,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self {
            kind: Kind::Io,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::config(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn with_path<T, E: Into<CliError>>(r: Result<T, E>, path: &Path) -> CliResult<T> {
    r.map_err(|e| e.into().at(path))
}

fn read_text(path: &Path) -> CliResult<String> {
    with_path(std::fs::read_to_string(path), path)
}

pub fn load_scenario(scenario: Option<&Path>, calib: Option<&Path>) -> CliResult<Scenario> {
    let mut s = match scenario {
        Some(p) => with_path(Scenario::from_json(&read_text(p)?), p)?,
        None => Scenario::standard(),
    };
    if let Some(p) = calib {
        s.rig = with_path(CameraRig::from_json(&read_text(p)?), p)?;
    }
    s.validate()?;
    Ok(s)
}

pub fn load_solver(path: Option<&Path>) -> CliResult<SolverConfig> {
    match path {
        Some(p) => with_path(SolverConfig::from_json(&read_text(p)?), p),
        None => Ok(SolverConfig::default()),
    }
}

pub fn load_warmstart_config(path: Option<&Path>) -> CliResult<WarmStartConfig> {
    match path {
        Some(p) => with_path(serde_json::from_str(&read_text(p)?), p),
        None => Ok(WarmStartConfig::default()),
    }
}

pub fn load_experiment(path: Option<&Path>) -> CliResult<ExperimentConfig> {
    match path {
        Some(p) => with_path(serde_json::from_str(&read_text(p)?), p),
        None => Ok(ExperimentConfig::default()),
    }
}

pub fn load_images(paths: &[PathBuf]) -> CliResult<Vec<BinaryImage>> {
    paths.iter().map(|p| with_path(BinaryImage::read_pgm(p), p)).collect()
}

pub fn load_points(path: &Path) -> CliResult<(Vec<f64>, Vec<Vector3<f64>>)> {
    let f = with_path(File::open(path), path)?;
    with_path(read_points_csv(BufReader::new(f)), path)
}

pub fn load_warmstart_points(path: &Path) -> CliResult<WarmStartPoints> {
    let f = with_path(File::open(path), path)?;
    with_path(WarmStartPoints::read_csv(BufReader::new(f)), path)
}

pub fn load_report(path: &Path) -> CliResult<RunReport> {
    with_path(serde_json::from_str(&read_text(path)?), path)
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    with_path(std::fs::create_dir_all(path), path)
}

/// Creates `path` and hands a buffered writer to `body`.
pub fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> Result<(), Error>) -> CliResult<()> {
    let f = with_path(File::create(path), path)?;
    let mut w = BufWriter::new(f);
    with_path(body(&mut w), path)?;
    with_path(w.flush(), path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    write_file(path, |w| Ok(w.write_all(text.as_bytes())?))
}

/// Fitted curve as written to `theta.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThetaFile {
    /// Curvature coefficients per segment, `[x(4), y(4)]` each, 1/mm and 1/mm^2.
    pub theta: Vec<f64>,
    pub boundaries: Vec<f64>,
    pub base_position: [f64; 3],
    /// Row-major base rotation.
    pub base_orientation: [[f64; 3]; 3],
    #[serde(flatten)]
    pub run: serde_json::Value,
}

impl ThetaFile {
    pub fn new(params: &CurveParams, grid: &SegmentGrid, run: serde_json::Value) -> Self {
        let r = params.base_orientation;
        Self {
            theta: params.theta.clone(),
            boundaries: grid.boundaries().to_vec(),
            base_position: params.base_position.into(),
            base_orientation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
            run,
        }
    }
}
