//! Run configuration: a line-based `key = value` format with `[section]`
//! headers.
//!
//! ```text
//! [run]
//! out = runs/cardiac
//! realizations = 5
//! seed = 1
//!
//! [phantom]
//! kind = cardiac
//!
//! [method tnn]
//! algorithm = fppg_tnn_patch
//! lambda = auto
//! lambda_grid = 1, 10, 100
//! patch = 8x8x*
//! span = 4x4x*
//! ```
//!
//! `#` starts a comment. Method sections carry a label, and every method
//! needs a distinct one. A `*` in a patch or span takes the full frame count.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use fppg::kinetics::{BloodVolume, FitOptions, FrameSchedule};
use fppg::recon::{Algorithm, ReconConfig};
use fppg::regularizers::PatchSettings;
use fppg::simulate::{BrainSpec, CardiacSpec, NoiseSpec, PhantomSpec};
use fppg::{Dims, Geometry};

/// A configuration problem, located by line (0 when not tied to one line)
/// and field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(line: usize, field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            line,
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, self.field.is_empty()) {
            (0, true) => write!(f, "{}", self.message),
            (0, false) => write!(f, "{}: {}", self.field, self.message),
            (l, true) => write!(f, "line {l}: {}", self.message),
            (l, false) => write!(f, "line {l}: {}: {}", self.field, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

type CResult<T> = Result<T, ConfigError>;

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
    used: bool,
}

/// One `[name label]` block with its entries.
#[derive(Debug, Clone)]
struct Section {
    name: String,
    label: Option<String>,
    line: usize,
    entries: BTreeMap<String, Entry>,
}

impl Section {
    fn qualified(&self, key: &str) -> String {
        match &self.label {
            Some(l) => format!("{}.{l}.{key}", self.name),
            None => format!("{}.{key}", self.name),
        }
    }

    fn raw(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.get_mut(key).map(|e| {
            e.used = true;
            (e.value.clone(), e.line)
        })
    }

    fn get<T: FromStr>(&mut self, key: &str) -> CResult<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some((v, line)) => v.parse::<T>().map(Some).map_err(|e| {
                ConfigError::new(line, self.qualified(key), format!("cannot parse '{v}': {e}"))
            }),
        }
    }

    fn get_or<T: FromStr>(&mut self, key: &str, default: T) -> CResult<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn get_with<T>(
        &mut self,
        key: &str,
        parse: impl FnOnce(&str) -> Result<T, String>,
    ) -> CResult<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some((v, line)) => parse(&v)
                .map(Some)
                .map_err(|e| ConfigError::new(line, self.qualified(key), e)),
        }
    }

    fn error(&self, key: &str, message: impl Into<String>) -> ConfigError {
        let line = self.entries.get(key).map_or(self.line, |e| e.line);
        ConfigError::new(line, self.qualified(key), message)
    }

    fn reject_unused(&self) -> CResult<()> {
        match self.entries.iter().find(|(_, e)| !e.used) {
            Some((k, e)) => Err(ConfigError::new(e.line, self.qualified(k), "unknown key")),
            None => Ok(()),
        }
    }
}

fn parse_sections(text: &str) -> CResult<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(inner) = body.strip_prefix('[') {
            let inner = inner
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::new(line, "", "unterminated section header"))?;
            let mut words = inner.split_whitespace();
            let name = words
                .next()
                .ok_or_else(|| ConfigError::new(line, "", "empty section header"))?
                .to_ascii_lowercase();
            let label = words.next().map(str::to_owned);
            if words.next().is_some() {
                return Err(ConfigError::new(line, name, "section header has extra words"));
            }
            sections.push(Section {
                name,
                label,
                line,
                entries: BTreeMap::new(),
            });
            continue;
        }
        let (key, value) = body
            .split_once('=')
            .ok_or_else(|| ConfigError::new(line, "", format!("expected 'key = value', got '{body}'")))?;
        let key = key.trim().to_ascii_lowercase();
        if key.is_empty() {
            return Err(ConfigError::new(line, "", "empty key"));
        }
        let section = sections
            .last_mut()
            .ok_or_else(|| ConfigError::new(line, key.clone(), "key outside any section"))?;
        if section.entries.contains_key(&key) {
            return Err(ConfigError::new(line, section.qualified(&key), "duplicate key"));
        }
        section.entries.insert(
            key,
            Entry {
                value: value.trim().to_owned(),
                line,
                used: false,
            },
        );
    }
    Ok(sections)
}

/// A value given either explicitly or chosen by the sweep stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tunable {
    Fixed(f64),
    Auto,
}

impl Tunable {
    pub fn is_auto(self) -> bool {
        self == Self::Auto
    }
}

impl FromStr for Tunable {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Self::Auto);
        }
        s.parse::<f64>()
            .map(Self::Fixed)
            .map_err(|_| format!("expected a number or 'auto', got '{s}'"))
    }
}

/// Frame gating for OSEM: `bins` phases over a `cycle`-frame period.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gating {
    pub bins: usize,
    pub cycle: usize,
}

/// One reconstruction method to compare.
#[derive(Debug, Clone, PartialEq)]
pub struct Method {
    pub name: String,
    /// `lambda_ref` is taken from `lambda` when that is fixed.
    pub recon: ReconConfig,
    pub lambda: Tunable,
    /// Starting grid for the lambda sweep.
    pub lambda_grid: Vec<f64>,
    /// OSEM post-filter FWHM in mm.
    pub fwhm: Tunable,
    /// Candidate FWHMs for the sweep: `0, step, ..., max`.
    pub fwhm_max: f64,
    pub fwhm_step: f64,
    /// OSEM: pick the best iteration up to `recon.iterations` in the sweep.
    pub tune_iterations: bool,
    pub gating: Option<Gating>,
}

impl Method {
    pub fn needs_tuning(&self) -> bool {
        self.lambda.is_auto() || self.fwhm.is_auto() || self.tune_iterations
    }

    pub fn fwhm_candidates(&self) -> Vec<f64> {
        let n = (self.fwhm_max / self.fwhm_step + 1e-9).floor() as usize;
        (0..=n).map(|i| i as f64 * self.fwhm_step).collect()
    }
}

/// Lambda refinement rules.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    /// Offset added to the base seed for the tuning realization.
    pub seed_offset: u64,
    /// Stop once neighbouring grid points differ by at most this factor.
    pub refine_ratio: f64,
    /// Stop once a refinement round improves SSIM by less than this (0
    /// disables the rule).
    pub ssim_tol: f64,
    pub max_rounds: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seed_offset: 1_000_000,
            refine_ratio: 1.1,
            ssim_tol: 0.0,
            max_rounds: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    /// Left-ventricle region growing (cardiac phantoms only).
    pub lv: bool,
    pub lv_thresholds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub enabled: bool,
    pub options: FitOptions,
    pub blood: BloodVolume,
    /// Methods whose images are fitted (all when empty).
    pub methods: Vec<String>,
}

/// Everything a pipeline run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub out: PathBuf,
    pub realizations: usize,
    pub seed: u64,
    /// Worker threads (0 leaves the choice to the runtime).
    pub threads: usize,
    pub phantom: PhantomSpec,
    /// Noise model; `rng_seed` is replaced per realization.
    pub noise: NoiseSpec,
    pub geometry: Geometry,
    pub methods: Vec<Method>,
    pub sweep: SweepConfig,
    pub analysis: AnalysisConfig,
    pub fit: FitConfig,
}

impl RunConfig {
    pub fn frames(&self) -> usize {
        match &self.phantom {
            PhantomSpec::CardiacLung(c) => c.frames,
            PhantomSpec::Brain(b) => b.schedule.len(),
        }
    }

    pub fn is_cardiac(&self) -> bool {
        matches!(self.phantom, PhantomSpec::CardiacLung(_))
    }

    pub fn method(&self, name: &str) -> Option<&Method> {
        self.methods.iter().find(|m| m.name == name)
    }

    /// Noise seed of realization `r`.
    pub fn realization_seed(&self, r: usize) -> u64 {
        self.seed.wrapping_add(r as u64)
    }

    pub fn tuning_seed(&self) -> u64 {
        self.seed.wrapping_add(self.sweep.seed_offset)
    }

    pub fn needs_sweep(&self) -> bool {
        self.methods.iter().any(Method::needs_tuning)
    }

    pub fn fitted_methods(&self) -> Vec<&Method> {
        if !self.fit.enabled {
            return Vec::new();
        }
        self.methods
            .iter()
            .filter(|m| self.fit.methods.is_empty() || self.fit.methods.contains(&m.name))
            .collect()
    }
}

impl FromStr for RunConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> CResult<Self> {
        parse_run_config(text)
    }
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got '{s}'")),
    }
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| format!("'{}' is not a number", v.trim()))
        })
        .collect()
}

/// `a:b` (step 1) or `a:b:step`, inclusive, or a comma list.
fn parse_range(s: &str) -> Result<Vec<f64>, String> {
    if !s.contains(':') {
        return parse_list(s);
    }
    let parts = parse_list(&s.replace(':', ","))?;
    let (a, b, step) = match parts[..] {
        [a, b] => (a, b, 1.0),
        [a, b, st] => (a, b, st),
        _ => return Err(format!("expected 'start:stop[:step]', got '{s}'")),
    };
    if !(step > 0.0) || b < a {
        return Err(format!("empty range '{s}'"));
    }
    let n = ((b - a) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| a + i as f64 * step).collect())
}

/// `RxCxF`, where `F` may be `*` for all frames.
fn parse_dims(s: &str, frames: usize) -> Result<Dims, String> {
    let parts: Vec<&str> = s.split(['x', 'X']).map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected RxCxF, got '{s}'"));
    }
    let num = |p: &str| -> Result<usize, String> {
        if p == "*" {
            return Ok(frames);
        }
        p.parse::<usize>()
            .map_err(|_| format!("'{p}' is not a positive integer"))
    };
    Ok(Dims::new(num(parts[0])?, num(parts[1])?, num(parts[2])?))
}

/// `brain`, `N x S` for N uniform frames of S seconds, or comma-separated
/// runs of that form.
fn parse_schedule(s: &str) -> Result<FrameSchedule, String> {
    if s.eq_ignore_ascii_case("brain") {
        return Ok(FrameSchedule::brain());
    }
    let runs = s
        .split(',')
        .map(|run| {
            let (n, sec) = run
                .split_once(['x', 'X'])
                .ok_or_else(|| format!("expected 'count x seconds', got '{}'", run.trim()))?;
            let n = n.trim().parse::<usize>().map_err(|e| e.to_string())?;
            let sec = sec.trim().parse::<f64>().map_err(|e| e.to_string())?;
            Ok((n, sec))
        })
        .collect::<Result<Vec<_>, String>>()?;
    FrameSchedule::from_runs(&runs).map_err(|e| e.to_string())
}

fn take(sections: &mut Vec<Section>, name: &str) -> CResult<Option<Section>> {
    let found: Vec<usize> = (0..sections.len())
        .filter(|&i| sections[i].name == name)
        .collect();
    match found[..] {
        [] => Ok(None),
        [i] => {
            let s = sections.remove(i);
            if s.label.is_some() {
                return Err(ConfigError::new(s.line, name, "this section takes no label"));
            }
            Ok(Some(s))
        }
        [_, j, ..] => Err(ConfigError::new(
            sections[j].line,
            name,
            "section appears more than once",
        )),
    }
}

fn empty_section(name: &str) -> Section {
    Section {
        name: name.into(),
        label: None,
        line: 0,
        entries: BTreeMap::new(),
    }
}

fn parse_phantom(s: &mut Section) -> CResult<PhantomSpec> {
    let kind: String = s.get_or("kind", "cardiac".to_string())?;
    let spec = match kind.to_ascii_lowercase().as_str() {
        "cardiac" | "cardiac_lung" => {
            let d = CardiacSpec::default();
            PhantomSpec::CardiacLung(CardiacSpec {
                side: s.get_or("side", d.side)?,
                frames: s.get_or("frames", d.frames)?,
                fov_mm: s.get_or("fov_mm", d.fov_mm)?,
                frame_seconds: s.get_or("frame_seconds", d.frame_seconds)?,
                cardiac_frames: s.get_or("cardiac_frames", d.cardiac_frames)?,
                breathing_frames: s.get_or("breathing_frames", d.breathing_frames)?,
                lv_radius_mm: s.get_or("lv_radius_mm", d.lv_radius_mm)?,
                lv_area_amplitude: s.get_or("lv_area_amplitude", d.lv_area_amplitude)?,
                myocardium_mm: s.get_or("myocardium_mm", d.myocardium_mm)?,
                liver_shift_mm: s.get_or("liver_shift_mm", d.liver_shift_mm)?,
                supersample: s.get_or("supersample", d.supersample)?,
                activity: d.activity,
            })
        }
        "brain" => {
            let d = BrainSpec::default();
            PhantomSpec::Brain(BrainSpec {
                side: s.get_or("side", d.side)?,
                fov_mm: s.get_or("fov_mm", d.fov_mm)?,
                schedule: s.get_with("schedule", parse_schedule)?.unwrap_or(d.schedule),
                supersample: s.get_or("supersample", d.supersample)?,
                ..d
            })
        }
        other => {
            return Err(s.error(
                "kind",
                format!("unknown phantom '{other}' (expected cardiac or brain)"),
            ))
        }
    };
    spec.validate().map_err(|e| s.error("kind", e.to_string()))?;
    Ok(spec)
}

fn parse_method(mut s: Section, frames: usize) -> CResult<Method> {
    let name = s.label.clone().unwrap_or_default();
    let algorithm: Algorithm = match s.raw("algorithm") {
        Some((v, line)) => v
            .parse()
            .map_err(|e: fppg::Error| ConfigError::new(line, s.qualified("algorithm"), e.to_string()))?,
        None => return Err(s.error("algorithm", "missing")),
    };
    let d = ReconConfig::default();
    let default_iters = if algorithm.is_fppg() { 300 } else { 20 };
    let lambda: Tunable = s
        .get_with("lambda", |v| v.parse())?
        .unwrap_or(Tunable::Fixed(0.0));
    let fwhm: Tunable = s
        .get_with("fwhm", |v| v.parse())?
        .unwrap_or(Tunable::Fixed(0.0));
    let patch = s
        .get_with("patch", |v| parse_dims(v, frames))?
        .unwrap_or(d.patch.patch);
    let span = s
        .get_with("span", |v| parse_dims(v, frames))?
        .unwrap_or(d.patch.span);
    let mut settings = PatchSettings::new(patch, span);
    settings.pad = s.get_with("pad", parse_bool)?.unwrap_or(true);
    let recon = ReconConfig {
        algorithm,
        lambda_ref: match lambda {
            Tunable::Fixed(v) => v,
            Tunable::Auto => 0.0,
        },
        beta: s.get_or("beta", d.beta)?,
        iterations: s.get_or("iterations", default_iters)?,
        subsets: s.get_or("subsets", d.subsets)?,
        patch: settings,
        rotation: s.get_with("rotation", parse_bool)?.unwrap_or(false),
        eps_fraction: s.get_or("eps_fraction", d.eps_fraction)?,
        postfilter_fwhm: match fwhm {
            Tunable::Fixed(v) => v,
            Tunable::Auto => 0.0,
        },
        rng_seed: 0,
        freeze_mu: s.get_with("freeze_mu", parse_bool)?.unwrap_or(false),
        early_stop: s.get("early_stop")?,
        monitor_every: s.get_or("monitor_every", 10)?,
    };
    let gating = match (s.get::<usize>("gate_bins")?, s.get::<usize>("gate_cycle")?) {
        (None, None) => None,
        (Some(bins), Some(cycle)) => Some(Gating { bins, cycle }),
        _ => return Err(s.error("gate_bins", "gate_bins and gate_cycle go together")),
    };
    let method = Method {
        recon,
        lambda,
        lambda_grid: s.get_with("lambda_grid", parse_list)?.unwrap_or_default(),
        fwhm,
        fwhm_max: s.get_or("fwhm_max", 30.0)?,
        fwhm_step: s.get_or("fwhm_step", 0.5)?,
        tune_iterations: s.get_with("tune_iterations", parse_bool)?.unwrap_or(false),
        gating,
        name,
    };
    check_method(&method, &s)?;
    s.reject_unused()?;
    Ok(method)
}

fn check_method(m: &Method, s: &Section) -> CResult<()> {
    let fppg = m.recon.algorithm.is_fppg();
    if m.name.is_empty() || !m.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(ConfigError::new(
            s.line,
            "method",
            "method sections need a label of letters, digits, '_' or '-'",
        ));
    }
    if fppg {
        if m.gating.is_some() {
            return Err(s.error("gate_bins", "gating applies to OSEM only"));
        }
        if m.fwhm != Tunable::Fixed(0.0) {
            return Err(s.error("fwhm", "post-filtering applies to OSEM only"));
        }
        if m.tune_iterations {
            return Err(s.error("tune_iterations", "iteration tuning applies to OSEM only"));
        }
        if m.lambda.is_auto() {
            if m.lambda_grid.is_empty() {
                return Err(s.error("lambda_grid", "lambda = auto needs a starting grid"));
            }
            if m.lambda_grid.iter().any(|&v| !(v > 0.0)) {
                return Err(s.error("lambda_grid", "grid values must be positive"));
            }
        }
    } else {
        if m.lambda != Tunable::Fixed(0.0) {
            return Err(s.error("lambda", "OSEM takes no penalty weight"));
        }
        if m.fwhm.is_auto() && !(m.fwhm_step > 0.0 && m.fwhm_max >= 0.0) {
            return Err(s.error("fwhm_step", "need fwhm_step > 0 and fwhm_max >= 0"));
        }
    }
    if let Some(g) = m.gating {
        if g.bins == 0 || g.cycle == 0 || g.cycle % g.bins != 0 {
            return Err(s.error("gate_bins", "gate_bins must divide gate_cycle"));
        }
    }
    Ok(())
}

fn parse_run_config(text: &str) -> CResult<RunConfig> {
    let mut sections = parse_sections(text)?;
    let mut run = take(&mut sections, "run")?.unwrap_or_else(|| empty_section("run"));
    let mut phantom_s = take(&mut sections, "phantom")?.unwrap_or_else(|| empty_section("phantom"));
    let mut noise_s = take(&mut sections, "noise")?.unwrap_or_else(|| empty_section("noise"));
    let mut geo_s = take(&mut sections, "geometry")?.unwrap_or_else(|| empty_section("geometry"));
    let mut sweep_s = take(&mut sections, "sweep")?.unwrap_or_else(|| empty_section("sweep"));
    let mut analysis_s = take(&mut sections, "analysis")?.unwrap_or_else(|| empty_section("analysis"));
    let mut fit_s = take(&mut sections, "fit")?.unwrap_or_else(|| empty_section("fit"));

    let out: String = run.get_or("out", "fppg-out".to_string())?;
    let realizations: usize = run.get_or("realizations", 1)?;
    if realizations == 0 {
        return Err(run.error("realizations", "must be at least 1"));
    }
    let seed: u64 = run.get_or("seed", 0)?;
    let threads: usize = run.get_or("threads", 0)?;

    let phantom = parse_phantom(&mut phantom_s)?;
    let (frames, side, fov) = match &phantom {
        PhantomSpec::CardiacLung(c) => (c.frames, c.side, c.fov_mm),
        PhantomSpec::Brain(b) => (b.schedule.len(), b.side, b.fov_mm),
    };

    let nd = match phantom {
        PhantomSpec::CardiacLung(_) => NoiseSpec::cardiac(0),
        PhantomSpec::Brain(_) => NoiseSpec::brain(0),
    };
    let noise = NoiseSpec {
        mean_counts_per_frame: noise_s.get_or("counts", nd.mean_counts_per_frame)?,
        scatter_fraction: noise_s.get_or("scatter_fraction", nd.scatter_fraction)?,
        random_fraction: noise_s.get_or("random_fraction", nd.random_fraction)?,
        rng_seed: 0,
    };
    noise
        .validate()
        .map_err(|e| noise_s.error("scatter_fraction", e.to_string()))?;
    if !(noise.mean_counts_per_frame > 0.0) {
        return Err(noise_s.error("counts", "must be positive"));
    }

    let geometry = Geometry::new(
        side,
        geo_s.get_or("radial", Geometry::min_radial(side))?,
        geo_s.get_or("angles", 72)?,
        geo_s.get_or("fov_mm", fov)?,
    )
    .map_err(|e| geo_s.error("radial", e.to_string()))?;

    let mut methods: Vec<Method> = Vec::new();
    for s in sections.drain(..) {
        if s.name != "method" {
            return Err(ConfigError::new(s.line, s.name, "unknown section"));
        }
        let line = s.line;
        let m = parse_method(s, frames)?;
        if methods.iter().any(|o| o.name == m.name) {
            return Err(ConfigError::new(line, format!("method.{}", m.name), "duplicate method"));
        }
        m.recon
            .validate(geometry.n_angles)
            .map_err(|e| ConfigError::new(line, format!("method.{}", m.name), e.to_string()))?;
        if let Some(g) = m.gating {
            if frames % g.cycle != 0 {
                return Err(ConfigError::new(
                    line,
                    format!("method.{}.gate_cycle", m.name),
                    format!("cycle of {} frames does not divide {frames} frames", g.cycle),
                ));
            }
        }
        methods.push(m);
    }
    if methods.is_empty() {
        return Err(ConfigError::new(0, "method", "at least one [method NAME] section is required"));
    }

    let sd = SweepConfig::default();
    let sweep = SweepConfig {
        seed_offset: sweep_s.get_or("seed_offset", sd.seed_offset)?,
        refine_ratio: sweep_s.get_or("refine_ratio", sd.refine_ratio)?,
        ssim_tol: sweep_s.get_or("ssim_tol", sd.ssim_tol)?,
        max_rounds: sweep_s.get_or("max_rounds", sd.max_rounds)?,
    };
    if !(sweep.refine_ratio > 1.0) {
        return Err(sweep_s.error("refine_ratio", "must exceed 1"));
    }

    let cardiac = matches!(phantom, PhantomSpec::CardiacLung(_));
    let analysis = AnalysisConfig {
        lv: analysis_s.get_with("lv", parse_bool)?.unwrap_or(cardiac),
        lv_thresholds: analysis_s
            .get_with("lv_thresholds", parse_range)?
            .unwrap_or_else(|| (1..=30).map(f64::from).collect()),
    };
    if analysis.lv && !cardiac {
        return Err(analysis_s.error("lv", "LV analysis needs the cardiac phantom"));
    }

    let fd = FitOptions::default();
    let blood = match fit_s.raw("blood") {
        None => BloodVolume::Fractional,
        Some((v, line)) => match v.to_ascii_lowercase().as_str() {
            "fractional" => BloodVolume::Fractional,
            "additive" => BloodVolume::Additive,
            _ => {
                return Err(ConfigError::new(
                    line,
                    "fit.blood",
                    format!("expected fractional or additive, got '{v}'"),
                ))
            }
        },
    };
    let fit = FitConfig {
        enabled: fit_s.get_with("enabled", parse_bool)?.unwrap_or(!cardiac),
        options: FitOptions {
            upper: fit_s.get_or("upper", fd.upper)?,
            max_iterations: fit_s.get_or("max_iterations", fd.max_iterations)?,
            tolerance: fit_s.get_or("tolerance", fd.tolerance)?,
            initial_damping: fit_s.get_or("initial_damping", fd.initial_damping)?,
        },
        blood,
        methods: fit_s
            .get_with("methods", |v| {
                Ok(v.split(',').map(|m| m.trim().to_owned()).filter(|m| !m.is_empty()).collect())
            })?
            .unwrap_or_default(),
    };
    if fit.enabled && cardiac {
        return Err(fit_s.error("enabled", "kinetic fitting needs the brain phantom"));
    }
    for m in &fit.methods {
        if !methods.iter().any(|x| &x.name == m) {
            return Err(fit_s.error("methods", format!("no method named '{m}'")));
        }
    }

    for s in [&run, &phantom_s, &noise_s, &geo_s, &sweep_s, &analysis_s, &fit_s] {
        s.reject_unused()?;
    }

    Ok(RunConfig {
        out: PathBuf::from(out),
        realizations,
        seed,
        threads,
        phantom,
        noise,
        geometry,
        methods,
        sweep,
        analysis,
        fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "
[run]
realizations = 2
[phantom]
kind = cardiac
side = 16
frames = 4
cardiac_frames = 2
breathing_frames = 4
[method osem]
algorithm = osem
iterations = 2
subsets = 4
";

    #[test]
    fn minimal_parses() {
        let c: RunConfig = MINIMAL.parse().unwrap();
        assert_eq!(c.realizations, 2);
        assert_eq!(c.methods.len(), 1);
        assert_eq!(c.methods[0].recon.subsets, 4);
        assert!(c.analysis.lv);
        assert!(!c.fit.enabled);
    }

    #[test]
    fn unknown_key_names_line_and_field() {
        let text = format!("{MINIMAL}bogus = 3\n");
        let e = text.parse::<RunConfig>().unwrap_err();
        assert_eq!(e.field, "method.osem.bogus");
        assert_eq!(e.line, text.lines().count());
    }

    #[test]
    fn bad_number_is_located() {
        let e = MINIMAL.replace("side = 16", "side = sixteen").parse::<RunConfig>().unwrap_err();
        assert_eq!(e.field, "phantom.side");
        assert_eq!(e.line, 6);
    }

    #[test]
    fn star_takes_all_frames() {
        assert_eq!(parse_dims("8x8x*", 60).unwrap(), Dims::new(8, 8, 60));
        assert!(parse_dims("8x8", 60).is_err());
    }

    #[test]
    fn ranges() {
        assert_eq!(parse_range("1:3").unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(parse_range("0:1:0.5").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(parse_range("2, 4").unwrap(), vec![2.0, 4.0]);
        assert!(parse_range("3:1").is_err());
    }

    #[test]
    fn schedules() {
        assert_eq!(parse_schedule("brain").unwrap().len(), 28);
        let s = parse_schedule("2 x 5, 1x10").unwrap();
        assert_eq!(s.durations(), &[5.0, 5.0, 10.0]);
    }
}
