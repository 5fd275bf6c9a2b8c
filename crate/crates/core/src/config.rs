//! Run configuration: built-in profiles, file layering and dotted overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{NlctfError, Result};
use crate::geometry::FanBeamGeometry;
use crate::metrics::BasisSet;
use crate::recon::ReconConfig;
use crate::sim::{Ellipse, Material, PhantomSpec, SpectrumModel};

const DESK: &str = include_str!("../profiles/desk.toml");
const PAPER_SIM: &str = include_str!("../profiles/paper-sim.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Desk,
    PaperSim,
}

impl Profile {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::Desk),
            "paper-sim" => Ok(Self::PaperSim),
            other => Err(NlctfError::Config(format!(
                "profile: unknown profile {other:?} (expected desk or paper-sim)"
            ))),
        }
    }

    pub fn source(self) -> &'static str {
        match self {
            Self::Desk => DESK,
            Self::PaperSim => PAPER_SIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSection {
    pub materials: Vec<Material>,
    #[serde(default)]
    pub shapes: Vec<Ellipse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default = "yes")]
    pub noise: bool,
}

fn yes() -> bool {
    true
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self { noise: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: default_dir() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub geometry: FanBeamGeometry,
    pub spectrum: SpectrumModel,
    pub phantom: PhantomSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub recon: ReconConfig,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfig {
    pub fn profile(p: Profile) -> Result<Self> {
        Self::from_table(parse_table(p.source(), "profile")?)
    }

    pub fn from_table(table: Table) -> Result<Self> {
        let cfg: Self = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| NlctfError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            materials: self.phantom.materials.clone(),
            shapes: self.phantom.shapes.clone(),
            n_w: self.geometry.n_w,
            n_h: self.geometry.n_h,
            pixel_size: self.geometry.pixel_size,
        }
    }

    pub fn basis(&self) -> BasisSet {
        BasisSet {
            names: self.phantom.materials.iter().map(|m| m.name.clone()).collect(),
            signatures: self.phantom.materials.iter().map(|m| m.mu.clone()).collect(),
        }
    }

    /// Check every section before any compute starts.
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate().map_err(|e| e.context("geometry"))?;
        self.spectrum.validate()?;
        self.phantom_spec().validate().map_err(|e| e.context("phantom"))?;
        let s = self.spectrum.n_bins();
        if self.phantom_spec().n_bins() != s {
            return Err(NlctfError::Config(format!(
                "phantom.materials: {} bins per material, spectrum has {s}",
                self.phantom_spec().n_bins()
            )));
        }
        self.recon.validate()?;
        let p = &self.recon.patch;
        if p.patch_h > self.geometry.n_h || p.patch_w > self.geometry.n_w {
            return Err(NlctfError::Config("recon.patch: patch larger than the image".into()));
        }
        Ok(())
    }
}

/// Parse TOML text into a table; `what` names the source in errors.
pub fn parse_table(text: &str, what: &str) -> Result<Table> {
    text.parse::<Table>()
        .map_err(|e| NlctfError::Config(format!("{what}: {}", e.message())))
}

/// Recursively merge `over` into `base`; tables merge, everything else
/// (arrays included) is replaced.
pub fn deep_merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => deep_merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Apply one `dotted.key=value` override. The value is read as TOML when
/// possible (numbers, booleans, arrays, quoted strings) and as a bare
/// string otherwise.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| NlctfError::Config(format!("--set {assignment:?}: expected key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(NlctfError::Config(format!("--set {assignment:?}: empty key segment")));
    }
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => {
                return Err(NlctfError::Config(format!("--set {key}: {part} is not a table")));
            }
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Layered configuration: profile (explicit, or `desk` when no file is
/// given), then the config file, then `--set` overrides, then `--seed`.
pub fn load(
    config_path: Option<&Path>,
    profile: Option<Profile>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut table = match (profile, config_path) {
        (Some(p), _) => parse_table(p.source(), "profile")?,
        (None, None) => parse_table(Profile::Desk.source(), "profile")?,
        (None, Some(_)) => Table::new(),
    };
    if let Some(path) = config_path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NlctfError::Config(format!("config {}: {e}", path.display())))?;
        deep_merge(&mut table, parse_table(&text, &path.display().to_string())?);
    }
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(s) = seed {
        table.insert("seed".into(), Value::Integer(s as i64));
    }
    RunConfig::from_table(table)
}
