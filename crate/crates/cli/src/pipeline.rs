//! Stages of an experiment run and the artifacts they exchange.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use fppg::analysis::{self, aggregate, line_profile, region_grow_lv};
use fppg::kinetics::{parametric_images_with, KineticParams};
use fppg::recon::{
    gated_bin, gated_rebin, gaussian_postfilter, mlem_osem_iterates, FppgSolver,
    ReconConfig, Trace,
};
use fppg::simulate::{
    attenuated_projector, brain_labels, cardiac_labels, simulate_sinograms, BrainSpec,
    CardiacSpec, NoiseSpec, PhantomSpec,
};
use fppg::{Dims, DynTensor, Projector};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::artifacts::{load_tensor, num, opt, save_tensor, write_text, Layout, Table};
use crate::config::{Method, RunConfig, Tunable};
use crate::error::{CliError, Result};
use crate::sweep::refine_lambda;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Simulate,
    Sweep,
    Recon,
    Analyze,
    Fit,
    Report,
    All,
}

impl Stage {
    pub const ORDER: [Stage; 6] = [
        Stage::Simulate,
        Stage::Sweep,
        Stage::Recon,
        Stage::Analyze,
        Stage::Fit,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::Sweep => "sweep",
            Self::Recon => "recon",
            Self::Analyze => "analyze",
            Self::Fit => "fit",
            Self::Report => "report",
            Self::All => "all",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ORDER
            .into_iter()
            .chain([Self::All])
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                format!("unknown stage '{s}' (simulate, sweep, recon, analyze, fit, report, all)")
            })
    }
}

/// Command-line values that replace config entries.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Overrides {
    pub realizations: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> std::result::Result<(), crate::config::ConfigError> {
        if let Some(r) = self.realizations {
            if r == 0 {
                return Err(crate::config::ConfigError {
                    line: 0,
                    field: "--realizations".into(),
                    message: "must be at least 1".into(),
                });
            }
            cfg.realizations = r;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        Ok(())
    }

    /// Canonical text appended to the config before hashing.
    fn canonical(&self) -> String {
        let mut s = String::new();
        if let Some(r) = self.realizations {
            s.push_str(&format!("# override realizations = {r}\n"));
        }
        if let Some(v) = self.seed {
            s.push_str(&format!("# override seed = {v}\n"));
        }
        if let Some(o) = &self.out {
            s.push_str(&format!("# override out = {}\n", o.display()));
        }
        if let Some(t) = self.threads {
            s.push_str(&format!("# override threads = {t}\n"));
        }
        s
    }
}

/// Measured data of one realization.
#[derive(Debug, Clone)]
pub struct Measured {
    pub g: DynTensor,
    pub gamma: DynTensor,
    pub frame_scale: Vec<f64>,
}

/// Phantom artifacts shared by all stages after `simulate`.
#[derive(Debug, Clone)]
pub struct PhantomData {
    pub truth: DynTensor,
    pub labels: DynTensor,
    pub mu_map: DynTensor,
    /// SSIM dynamic range, the maximum of the truth.
    pub range: f64,
}

/// Tuned settings of one method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tuned {
    pub lambda: f64,
    pub iterations: usize,
    pub fwhm: f64,
    pub ssim: f64,
}

/// Wall time per stage of one invocation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub stages: Vec<(Stage, f64)>,
}

/// A configured run bound to its output tree.
#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: RunConfig,
    text: String,
    hash: String,
    layout: Layout,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Pipeline {
    pub fn from_text(text: &str, overrides: &Overrides) -> Result<Self> {
        let mut cfg: RunConfig = text.parse()?;
        overrides.apply(&mut cfg)?;
        let mut effective = text.to_owned();
        if !effective.ends_with('\n') {
            effective.push('\n');
        }
        effective.push_str(&overrides.canonical());
        let hash = sha256_hex(effective.as_bytes());
        let layout = Layout::new(cfg.out.clone());
        Ok(Self {
            cfg,
            text: effective,
            hash,
            layout,
        })
    }

    pub fn from_path(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_owned(),
            source: e,
        })?;
        Self::from_text(&text, overrides)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    /// Runs one stage, or all of them in order, inside a pool of the
    /// configured size, then updates the manifest.
    pub fn run(&self, stage: Stage) -> Result<RunSummary> {
        let body = || -> Result<RunSummary> {
            let stages: Vec<Stage> = match stage {
                Stage::All => Stage::ORDER
                    .into_iter()
                    .filter(|s| match s {
                        Stage::Sweep => self.cfg.needs_sweep(),
                        Stage::Fit => self.cfg.fit.enabled,
                        _ => true,
                    })
                    .collect(),
                s => vec![s],
            };
            let mut summary = RunSummary::default();
            let mut failure = None;
            for s in stages {
                let t = Instant::now();
                let res = match s {
                    Stage::Simulate => self.simulate(),
                    Stage::Sweep => self.sweep(),
                    Stage::Recon => self.recon(),
                    Stage::Analyze => self.analyze(),
                    Stage::Fit => self.fit(),
                    Stage::Report => self.report(),
                    Stage::All => unreachable!(),
                };
                summary.stages.push((s, t.elapsed().as_secs_f64()));
                if let Err(e) = res {
                    failure = Some(e);
                    break;
                }
            }
            self.write_manifest(&summary)?;
            match failure {
                Some(e) => Err(e),
                None => Ok(summary),
            }
        };
        if self.cfg.threads == 0 {
            return body();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.threads)
            .build()
            .map_err(|e| CliError::Io {
                path: self.layout.root().to_owned(),
                source: std::io::Error::other(e.to_string()),
            })?;
        pool.install(body)
    }

    fn write_manifest(&self, summary: &RunSummary) -> Result<()> {
        let path = self.layout.manifest();
        // keep timings of stages run by earlier invocations of this config
        let mut timings: BTreeMap<String, String> = BTreeMap::new();
        if let Ok(old) = std::fs::read_to_string(&path) {
            let same = old
                .lines()
                .any(|l| l.trim() == format!("config_sha256 = {}", self.hash));
            if same {
                for l in old.lines() {
                    if let Some((k, v)) = l.split_once(" = ") {
                        if k.starts_with("stage.") {
                            timings.insert(k.to_owned(), v.to_owned());
                        }
                    }
                }
            }
        }
        for (s, secs) in &summary.stages {
            timings.insert(format!("stage.{s}.seconds"), format!("{secs:.3}"));
        }
        let c = &self.cfg;
        let seeds: Vec<String> = (0..c.realizations)
            .map(|r| c.realization_seed(r).to_string())
            .collect();
        let mut m = String::new();
        m.push_str(&format!("fppg_version = {}\n", env!("CARGO_PKG_VERSION")));
        m.push_str(&format!("config_sha256 = {}\n", self.hash));
        m.push_str(&format!("base_seed = {}\n", c.seed));
        m.push_str(&format!("realizations = {}\n", c.realizations));
        m.push_str(&format!("realization_seeds = {}\n", seeds.join(", ")));
        if c.needs_sweep() {
            m.push_str(&format!("tuning_seed = {}\n", c.tuning_seed()));
        }
        m.push_str(&format!(
            "threads = {}\n",
            if c.threads == 0 {
                rayon::current_num_threads()
            } else {
                c.threads
            }
        ));
        for (k, v) in timings {
            m.push_str(&format!("{k} = {v}\n"));
        }
        write_text(&self.layout.config_copy(), &self.text)?;
        write_text(&path, &m)
    }

    // ---- shared inputs ----

    fn cardiac(&self) -> Option<&CardiacSpec> {
        match &self.cfg.phantom {
            PhantomSpec::CardiacLung(c) => Some(c),
            PhantomSpec::Brain(_) => None,
        }
    }

    fn brain(&self) -> Option<&BrainSpec> {
        match &self.cfg.phantom {
            PhantomSpec::Brain(b) => Some(b),
            PhantomSpec::CardiacLung(_) => None,
        }
    }

    fn pixel_mm(&self) -> f64 {
        match &self.cfg.phantom {
            PhantomSpec::CardiacLung(c) => c.pixel_mm(),
            PhantomSpec::Brain(b) => b.pixel_mm(),
        }
    }

    fn durations(&self) -> Result<Vec<f64>> {
        let s = self
            .cfg
            .phantom
            .schedule()
            .map_err(|e| CliError::numerical("frame schedule", e))?;
        Ok(s.durations().to_vec())
    }

    pub fn phantom_data(&self) -> Result<PhantomData> {
        let l = &self.layout;
        let truth = load_tensor(&l.phantom("truth.dtn"), "simulate")?;
        let labels = load_tensor(&l.phantom("labels.dtn"), "simulate")?;
        let mu_map = load_tensor(&l.phantom("mu_map.dtn"), "simulate")?;
        let range = truth.max();
        Ok(PhantomData {
            truth,
            labels,
            mu_map,
            range,
        })
    }

    pub fn projector(&self, ph: &PhantomData) -> Result<Projector> {
        attenuated_projector(self.cfg.geometry.clone(), &ph.mu_map)
            .map_err(|e| CliError::numerical("projector", e))
    }

    fn save_measured(&self, dir: &Path, m: &Measured) -> Result<()> {
        save_tensor(&dir.join("g.dtn"), &m.g)?;
        save_tensor(&dir.join("gamma.dtn"), &m.gamma)?;
        let mut t = Table::new(&["frame", "frame_scale"]);
        for (k, s) in m.frame_scale.iter().enumerate() {
            t.push(vec![k.to_string(), num(*s)]);
        }
        t.save(&dir.join("scale.csv"))
    }

    fn load_measured(&self, dir: &Path, stage: &'static str) -> Result<Measured> {
        let g = load_tensor(&dir.join("g.dtn"), stage)?;
        let gamma = load_tensor(&dir.join("gamma.dtn"), stage)?;
        let path = dir.join("scale.csv");
        let frame_scale = Table::load(&path, stage)?.floats("frame_scale", &path)?;
        Ok(Measured {
            g,
            gamma,
            frame_scale,
        })
    }

    fn simulate_one(&self, ph: &PhantomData, proj: &Projector, seed: u64) -> Result<Measured> {
        let noise = NoiseSpec {
            rng_seed: seed,
            ..self.cfg.noise
        };
        let s = simulate_sinograms(&ph.truth, proj, &self.durations()?, &noise)
            .map_err(|e| CliError::numerical(format!("simulation with seed {seed}"), e))?;
        Ok(Measured {
            g: s.g,
            gamma: s.gamma,
            frame_scale: s.frame_scale,
        })
    }

    // ---- stages ----

    /// Phantom, attenuation map and one sinogram stack per realization.
    pub fn simulate(&self) -> Result<()> {
        let phantom = self
            .cfg
            .phantom
            .generate()
            .map_err(|e| CliError::numerical("phantom", e))?;
        let l = &self.layout;
        save_tensor(&l.phantom("truth.dtn"), &phantom.truth)?;
        save_tensor(&l.phantom("labels.dtn"), &phantom.labels)?;
        save_tensor(&l.phantom("mu_map.dtn"), &phantom.mu_map)?;
        let mut regions = Table::new(&["label", "name"]);
        for (i, n) in phantom.region_names.iter().enumerate() {
            regions.push(vec![i.to_string(), n.to_string()]);
        }
        regions.save(&l.phantom("regions.csv"))?;
        let ph = self.phantom_data()?;
        let proj = self.projector(&ph)?;
        (0..self.cfg.realizations)
            .into_par_iter()
            .map(|r| {
                let m = self.simulate_one(&ph, &proj, self.cfg.realization_seed(r))?;
                self.save_measured(&l.realization(r), &m)
            })
            .collect::<Result<Vec<()>>>()?;
        Ok(())
    }

    /// Reconstruction settings of `m`, with tuned values filled in.
    pub fn effective_recon(&self, m: &Method, tuned: Option<&Tuned>) -> Result<ReconConfig> {
        let mut rc = m.recon.clone();
        if m.needs_tuning() {
            let t = tuned.ok_or_else(|| CliError::MissingInput {
                path: self.layout.tuning(),
                stage: "sweep",
            })?;
            if m.lambda.is_auto() {
                rc.lambda_ref = t.lambda;
            }
            if m.fwhm.is_auto() {
                rc.postfilter_fwhm = t.fwhm;
            }
            if m.tune_iterations {
                rc.iterations = t.iterations;
            }
        }
        Ok(rc)
    }

    pub fn load_tuning(&self) -> Result<BTreeMap<String, Tuned>> {
        let mut out = BTreeMap::new();
        if !self.cfg.needs_sweep() {
            return Ok(out);
        }
        let path = self.layout.tuning();
        let t = Table::load(&path, "sweep")?;
        let lam = t.floats("lambda", &path)?;
        let it = t.floats("iterations", &path)?;
        let fw = t.floats("fwhm_mm", &path)?;
        let ss = t.floats("ssim", &path)?;
        let mc = t.column("method").unwrap_or(0);
        for (i, row) in t.rows.iter().enumerate() {
            out.insert(
                row[mc].clone(),
                Tuned {
                    lambda: lam[i],
                    iterations: it[i] as usize,
                    fwhm: fw[i],
                    ssim: ss[i],
                },
            );
        }
        for m in self.cfg.methods.iter().filter(|m| m.needs_tuning()) {
            if !out.contains_key(&m.name) {
                return Err(CliError::MissingInput {
                    path: path.clone(),
                    stage: "sweep",
                });
            }
        }
        Ok(out)
    }

    /// Tunes every method marked `auto` on a separate realization.
    pub fn sweep(&self) -> Result<()> {
        let ph = self.phantom_data()?;
        let proj = self.projector(&ph)?;
        let meas = self.simulate_one(&ph, &proj, self.cfg.tuning_seed())?;
        self.save_measured(&self.layout.tune(), &meas)?;
        let mut tuning = Table::new(&["method", "lambda", "iterations", "fwhm_mm", "ssim", "rrmse"]);
        for m in self.cfg.methods.iter().filter(|m| m.needs_tuning()) {
            let (t, rrmse) = if m.recon.algorithm.is_fppg() {
                self.sweep_fppg(m, &proj, &meas, &ph)?
            } else {
                self.sweep_osem(m, &proj, &meas, &ph)?
            };
            tuning.push(vec![
                m.name.clone(),
                num(t.lambda),
                t.iterations.to_string(),
                num(t.fwhm),
                num(t.ssim),
                num(rrmse),
            ]);
        }
        tuning.save(&self.layout.tuning())
    }

    fn score(&self, act: &DynTensor, ph: &PhantomData) -> fppg::Result<(f64, f64)> {
        Ok((
            analysis::ssim(act, &ph.truth, ph.range)?,
            analysis::rrmse(act, &ph.truth)?,
        ))
    }

    fn sweep_fppg(
        &self,
        m: &Method,
        proj: &Projector,
        meas: &Measured,
        ph: &PhantomData,
    ) -> Result<(Tuned, f64)> {
        let outcome = refine_lambda(&m.lambda_grid, &self.cfg.sweep, |lambdas| {
            lambdas
                .par_iter()
                .map(|&lambda| {
                    let rc = ReconConfig {
                        lambda_ref: lambda,
                        ..m.recon.clone()
                    };
                    let (act, _) = reconstruct(m, &rc, proj, meas, self.pixel_mm())
                        .map_err(|e| CliError::numerical(format!("sweep {} lambda {lambda}", m.name), e))?;
                    self.score(&act, ph)
                        .map_err(|e| CliError::numerical(format!("sweep {}", m.name), e))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut t = Table::new(&["round", "lambda", "ssim", "rrmse"]);
        for p in &outcome.points {
            t.push(vec![p.round.to_string(), num(p.lambda), num(p.ssim), num(p.rrmse)]);
        }
        t.save(&self.layout.sweep(&m.name))?;
        let b = outcome.best();
        Ok((
            Tuned {
                lambda: b.lambda,
                iterations: m.recon.iterations,
                fwhm: 0.0,
                ssim: b.ssim,
            },
            b.rrmse,
        ))
    }

    fn sweep_osem(
        &self,
        m: &Method,
        proj: &Projector,
        meas: &Measured,
        ph: &PhantomData,
    ) -> Result<(Tuned, f64)> {
        let widths = match m.fwhm {
            Tunable::Auto => m.fwhm_candidates(),
            Tunable::Fixed(w) => vec![w],
        };
        let last = m.recon.iterations;
        let mut rows: Vec<(usize, f64, f64, f64)> = Vec::new();
        let mut failure = None;
        let rc = ReconConfig {
            postfilter_fwhm: 0.0,
            ..m.recon.clone()
        };
        osem_iterates(m, &rc, proj, meas, |k, act| {
            if failure.is_some() || (!m.tune_iterations && k != last) {
                return;
            }
            let scored: Vec<fppg::Result<(f64, f64)>> = widths
                .par_iter()
                .map(|&w| self.score(&gaussian_postfilter(act, w, self.pixel_mm()), ph))
                .collect();
            for (&w, s) in widths.iter().zip(scored) {
                match s {
                    Ok((ssim, rrmse)) => rows.push((k, w, ssim, rrmse)),
                    Err(e) => failure = Some(e),
                }
            }
        })
        .map_err(|e| CliError::numerical(format!("sweep {}", m.name), e))?;
        if let Some(e) = failure {
            return Err(CliError::numerical(format!("sweep {}", m.name), e));
        }
        let mut t = Table::new(&["iteration", "fwhm_mm", "ssim", "rrmse"]);
        let mut best = 0;
        for (i, r) in rows.iter().enumerate() {
            t.push(vec![r.0.to_string(), num(r.1), num(r.2), num(r.3)]);
            if r.2 > rows[best].2 {
                best = i;
            }
        }
        t.save(&self.layout.sweep(&m.name))?;
        let (k, w, ssim, rrmse) = rows[best];
        Ok((
            Tuned {
                lambda: 0.0,
                iterations: k,
                fwhm: w,
                ssim,
            },
            rrmse,
        ))
    }

    /// Reconstructs every realization with every method. Failed tasks are
    /// reported together after the rest have been written.
    pub fn recon(&self) -> Result<()> {
        let ph = self.phantom_data()?;
        let proj = self.projector(&ph)?;
        let tuning = self.load_tuning()?;
        let configs: Vec<(usize, ReconConfig)> = self
            .cfg
            .methods
            .iter()
            .enumerate()
            .map(|(i, m)| Ok((i, self.effective_recon(m, tuning.get(&m.name))?)))
            .collect::<Result<_>>()?;
        let measured: Vec<Measured> = (0..self.cfg.realizations)
            .map(|r| self.load_measured(&self.layout.realization(r), "simulate"))
            .collect::<Result<_>>()?;
        let tasks: Vec<(usize, usize)> = (0..self.cfg.realizations)
            .flat_map(|r| (0..configs.len()).map(move |i| (r, i)))
            .collect();
        let results: Vec<Result<()>> = tasks
            .par_iter()
            .map(|&(r, i)| {
                let m = &self.cfg.methods[i];
                let (act, trace) = reconstruct(m, &configs[i].1, &proj, &measured[r], self.pixel_mm())
                    .map_err(|e| CliError::numerical(format!("realization {r}, method {}", m.name), e))?;
                if let Some(tr) = trace {
                    trace_table(&tr).save(&self.layout.trace(r, &m.name))?;
                }
                save_tensor(&self.layout.recon(r, &m.name), &act)
            })
            .collect();
        collect_failures(results)
    }

    fn lv_truth(&self, ph: &PhantomData) -> Vec<Vec<bool>> {
        ph.labels
            .frames()
            .map(|f| {
                f.iter()
                    .map(|&l| l == cardiac_labels::LV_CAVITY as f64)
                    .collect()
            })
            .collect()
    }

    /// Image metrics, LV curves (cardiac) and lesion profiles (brain).
    pub fn analyze(&self) -> Result<()> {
        let ph = self.phantom_data()?;
        let lv_truth = self.lv_truth(&ph);
        let results: Vec<Result<()>> = (0..self.cfg.realizations)
            .into_par_iter()
            .map(|r| self.analyze_one(r, &ph, &lv_truth))
            .collect();
        collect_failures(results)
    }

    fn analyze_one(&self, r: usize, ph: &PhantomData, lv_truth: &[Vec<bool>]) -> Result<()> {
        let mut metrics = Table::new(&[
            "method",
            "rrmse",
            "ssim",
            "lv_area_fraction",
            "lv_threshold",
            "lv_misclassified",
        ]);
        let mut frames = Table::new(&["method", "frame", "rrmse", "ssim"]);
        let mut lv = Table::new(&["method", "frame", "area_px", "true_area_px", "misclassified"]);
        let mut profiles = Table::new(&["method", "lesion", "sample", "offset_mm", "value", "truth"]);
        let d = ph.truth.dims();
        for m in &self.cfg.methods {
            let act = load_tensor(&self.layout.recon(r, &m.name), "recon")?;
            act.check_dims(d, "reconstruction")
                .map_err(|e| CliError::numerical(&m.name, e))?;
            let rep = analysis::metric_report(&act, &ph.truth, r)
                .map_err(|e| CliError::numerical(format!("metrics of {}", m.name), e))?;
            for k in 0..d.frames {
                frames.push(vec![
                    m.name.clone(),
                    k.to_string(),
                    num(rep.rrmse_frames[k]),
                    num(rep.ssim_frames[k]),
                ]);
            }
            let mut lv_cols = vec![String::new(); 3];
            if self.cfg.analysis.lv {
                let spec = self.cardiac().expect("lv needs the cardiac phantom");
                let res = region_grow_lv(&act, spec.lv_seed(), &self.cfg.analysis.lv_thresholds, lv_truth)
                    .map_err(|e| CliError::numerical(format!("LV of {}", m.name), e))?;
                let mis = res.misclassified.iter().sum::<usize>() as f64 / d.frames as f64;
                lv_cols = vec![
                    num(res.area_fraction(lv_truth)),
                    num(res.threshold_used),
                    num(mis),
                ];
                for k in 0..d.frames {
                    lv.push(vec![
                        m.name.clone(),
                        k.to_string(),
                        res.volume_curve[k].to_string(),
                        lv_truth[k].iter().filter(|&&b| b).count().to_string(),
                        res.misclassified[k].to_string(),
                    ]);
                }
            }
            if let Some(spec) = self.brain() {
                self.lesion_profiles(spec, &m.name, &act, ph, &mut profiles)?;
            }
            let mut row = vec![m.name.clone(), num(rep.rrmse), num(rep.ssim)];
            row.extend(lv_cols);
            metrics.push(row);
        }
        let dir = self.layout.realization(r);
        metrics.save(&dir.join("metrics.csv"))?;
        frames.save(&dir.join("frames.csv"))?;
        if self.cfg.analysis.lv {
            lv.save(&dir.join("lv.csv"))?;
        }
        if self.brain().is_some() {
            profiles.save(&dir.join("profiles.csv"))?;
        }
        Ok(())
    }

    /// Horizontal profiles through the largest and smallest lesions in the
    /// last frame, two diameters either side of the centre.
    fn lesion_profiles(
        &self,
        spec: &BrainSpec,
        method: &str,
        act: &DynTensor,
        ph: &PhantomData,
        table: &mut Table,
    ) -> Result<()> {
        let d = act.dims();
        let k = d.frames - 1;
        let pix = spec.pixel_mm();
        let centres = spec.lesion_centres();
        let half = spec.side as f64 / 2.0;
        for idx in [0usize, 2] {
            let (x, y) = centres[idx];
            let reach = 2.0 * spec.lesion_diameters_mm[idx];
            // pixel (i, j) has centre x = (j + 0.5 - half) * pix, y = (half - i - 0.5) * pix
            let row = (half - 0.5 - y / pix).clamp(0.0, (d.rows - 1) as f64);
            let c0 = ((x - reach) / pix + half - 0.5).clamp(0.0, (d.cols - 1) as f64);
            let c1 = ((x + reach) / pix + half - 0.5).clamp(0.0, (d.cols - 1) as f64);
            let samples = 41;
            let run = |f: &[f64]| line_profile(f, d.rows, d.cols, (row, c0), (row, c1), samples);
            let vals = run(act.frame(k)).map_err(|e| CliError::numerical("line profile", e))?;
            let truth = run(ph.truth.frame(k)).map_err(|e| CliError::numerical("line profile", e))?;
            for s in 0..samples {
                let col = c0 + (c1 - c0) * s as f64 / (samples - 1) as f64;
                table.push(vec![
                    method.to_owned(),
                    brain_labels::NAMES[brain_labels::LESION_LARGE as usize + idx].to_owned(),
                    s.to_string(),
                    num((col + 0.5 - half) * pix - x),
                    num(vals[s]),
                    num(truth[s]),
                ]);
            }
        }
        Ok(())
    }

    /// Voxel-wise kinetic fits and regional bias against the true rates.
    pub fn fit(&self) -> Result<()> {
        let spec = match self.brain() {
            Some(b) => b.clone(),
            None => return Ok(()),
        };
        let ph = self.phantom_data()?;
        let labels = ph.labels.frame(0).to_vec();
        let mask: Vec<bool> = labels.iter().map(|&l| l > 0.0).collect();
        let methods = self.cfg.fitted_methods();
        let results: Vec<Result<()>> = (0..self.cfg.realizations)
            .map(|r| -> Result<()> {
                let mut table = Table::new(&["method", "region", "param", "true", "mean", "bias"]);
                for m in &methods {
                    let act = load_tensor(&self.layout.recon(r, &m.name), "recon")?;
                    let maps = parametric_images_with(
                        &act,
                        &spec.input,
                        &spec.schedule,
                        &mask,
                        &self.cfg.fit.options,
                        self.cfg.fit.blood,
                    )
                    .map_err(|e| CliError::numerical(format!("fit of {} in realization {r}", m.name), e))?;
                    for (name, map) in maps.named() {
                        save_tensor(&self.layout.map(r, &m.name, name), map)?;
                    }
                    save_tensor(&self.layout.map(r, &m.name, "failures"), &maps.failures)?;
                    for label in 1..brain_labels::NAMES.len() {
                        let region: Vec<usize> = (0..labels.len())
                            .filter(|&v| labels[v] == label as f64)
                            .collect();
                        if region.is_empty() {
                            continue;
                        }
                        let truth = spec.kinetics[label];
                        for (name, map) in maps.named() {
                            let t = true_param(&truth, name);
                            let mean = region.iter().map(|&v| map.as_slice()[v]).sum::<f64>()
                                / region.len() as f64;
                            let bias = if t != 0.0 { (mean - t) / t } else { f64::NAN };
                            table.push(vec![
                                m.name.clone(),
                                brain_labels::NAMES[label].to_owned(),
                                name.to_owned(),
                                num(t),
                                num(mean),
                                num(bias),
                            ]);
                        }
                    }
                }
                table.save(&self.layout.realization(r).join("kinetics.csv"))
            })
            .collect();
        collect_failures(results)
    }

    /// Aggregates per-realization tables into mean, SE and 95% CI.
    pub fn report(&self) -> Result<()> {
        let n = self.cfg.realizations;
        let names: Vec<&str> = self.cfg.methods.iter().map(|m| m.name.as_str()).collect();
        let metric_names = ["rrmse", "ssim", "lv_area_fraction", "lv_misclassified"];
        // values[method][metric] over realizations
        let mut values: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for r in 0..n {
            let path = self.layout.realization(r).join("metrics.csv");
            let t = Table::load(&path, "analyze")?;
            let mc = t.column("method").unwrap_or(0);
            for metric in metric_names {
                let col = t.floats(metric, &path)?;
                for (row, v) in t.rows.iter().zip(col) {
                    values
                        .entry((row[mc].clone(), metric.to_owned()))
                        .or_default()
                        .push(v);
                }
            }
        }
        let mut report = Table::new(&["method", "metric", "n", "mean", "sd", "se", "ci_low", "ci_high"]);
        for name in &names {
            for metric in metric_names {
                let v = match values.get(&(name.to_string(), metric.to_owned())) {
                    Some(v) if v.iter().all(|x| x.is_finite()) => v,
                    _ => continue,
                };
                report.push(summary_row(&[name, metric], v));
            }
        }
        report.save(&self.layout.report("report.csv"))?;

        let mut pairs = Table::new(&[
            "method_a", "method_b", "metric", "n", "mean_diff", "sd", "se", "ci_low", "ci_high",
        ]);
        for (i, a) in names.iter().enumerate() {
            for b in &names[i + 1..] {
                for metric in metric_names {
                    let (va, vb) = match (
                        values.get(&(a.to_string(), metric.to_owned())),
                        values.get(&(b.to_string(), metric.to_owned())),
                    ) {
                        (Some(x), Some(y)) if x.iter().chain(y).all(|v| v.is_finite()) => (x, y),
                        _ => continue,
                    };
                    let diffs: Vec<f64> = va.iter().zip(vb).map(|(x, y)| x - y).collect();
                    let mut row = vec![a.to_string(), b.to_string()];
                    let s = summary_row(&[metric], &diffs);
                    row.extend(s);
                    pairs.push(row);
                }
            }
        }
        pairs.save(&self.layout.report("paired.csv"))?;

        if self.cfg.fit.enabled {
            self.report_kinetics()?;
        }
        Ok(())
    }

    fn report_kinetics(&self) -> Result<()> {
        // per (method, param, region) the bias of each realization; region
        // "mean_abs" holds the mean absolute bias over regions
        let mut values: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
        let mut order: Vec<(String, String, String)> = Vec::new();
        for r in 0..self.cfg.realizations {
            let path = self.layout.realization(r).join("kinetics.csv");
            let t = Table::load(&path, "fit")?;
            let bias = t.floats("bias", &path)?;
            let (mc, rc, pc) = (
                t.column("method").unwrap_or(0),
                t.column("region").unwrap_or(1),
                t.column("param").unwrap_or(2),
            );
            let mut abs: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
            for (row, b) in t.rows.iter().zip(bias) {
                let key = (row[mc].clone(), row[pc].clone(), row[rc].clone());
                if r == 0 {
                    order.push(key.clone());
                }
                values.entry(key).or_default().push(b);
                if b.is_finite() {
                    let e = abs.entry((row[mc].clone(), row[pc].clone())).or_insert((0.0, 0));
                    e.0 += b.abs();
                    e.1 += 1;
                }
            }
            for ((m, p), (s, c)) in abs {
                let key = (m, p, "mean_abs".to_owned());
                if r == 0 {
                    order.push(key.clone());
                }
                values.entry(key).or_default().push(s / c as f64);
            }
        }
        let mut t = Table::new(&[
            "method", "param", "region", "n", "mean", "sd", "se", "ci_low", "ci_high",
        ]);
        order.sort();
        for key in order {
            let v = &values[&key];
            if v.iter().all(|x| x.is_finite()) {
                t.push(summary_row(&[&key.0, &key.1, &key.2], v));
            }
        }
        t.save(&self.layout.report("report_kinetics.csv"))
    }
}

fn true_param(p: &KineticParams, name: &str) -> f64 {
    match name {
        "K1" => p.k1,
        "k2" => p.k2,
        "k3" => p.k3,
        "k4" => p.k4,
        "Va" => p.va,
        "Ki" => p.ki(),
        _ => f64::NAN,
    }
}

/// `prefix..., n, mean, sd, se, ci_low, ci_high`; the spread columns stay
/// empty for a single value.
fn summary_row(prefix: &[&str], v: &[f64]) -> Vec<String> {
    let mut row: Vec<String> = prefix.iter().map(|s| s.to_string()).collect();
    row.push(v.len().to_string());
    match aggregate(v) {
        Ok(s) => row.extend([s.mean, s.sd, s.se, s.ci_low, s.ci_high].map(num)),
        Err(_) => {
            row.push(num(v.iter().sum::<f64>() / v.len().max(1) as f64));
            row.extend(std::iter::repeat(String::new()).take(4));
        }
    }
    row
}

fn collect_failures(results: Vec<Result<()>>) -> Result<()> {
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(()) => {}
            Err(e @ (CliError::Config(_) | CliError::MissingInput { .. })) => return Err(e),
            Err(e) => failures.push(e.to_string()),
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Partial { failures })
    }
}

fn trace_table(tr: &Trace) -> Table {
    let mut t = Table::new(&[
        "iteration",
        "fidelity",
        "penalty",
        "objective",
        "rel_change",
        "dual_residual",
        "mu",
    ]);
    for r in &tr.rows {
        t.push(vec![
            r.iteration.to_string(),
            num(r.fidelity),
            opt(r.penalty),
            opt(r.objective),
            num(r.rel_change),
            opt(r.dual_residual),
            num(r.mu),
        ]);
    }
    t
}

fn to_activity(f: &DynTensor, scale: &[f64]) -> DynTensor {
    let mut out = f.clone();
    for (k, fr) in out.frames_mut().enumerate() {
        let s = scale[k];
        fr.iter_mut()
            .for_each(|v| *v = if s > 0.0 { *v / s } else { 0.0 });
    }
    out
}

/// Sums of `scale` over the frames of each gate.
fn gated_scale(scale: &[f64], bins: usize, cycle: usize) -> Vec<f64> {
    let mut out = vec![0.0; bins];
    for (k, s) in scale.iter().enumerate() {
        out[gated_bin(k, bins, cycle)] += s;
    }
    out
}

/// Copies each gate image to every frame of that gate.
fn expand_gates(gates: &DynTensor, frames: usize, bins: usize, cycle: usize) -> DynTensor {
    let d = gates.dims();
    let mut out = DynTensor::zeros(Dims::new(d.rows, d.cols, frames));
    for k in 0..frames {
        out.frame_mut(k)
            .copy_from_slice(gates.frame(gated_bin(k, bins, cycle)));
    }
    out
}

/// Runs OSEM (gated when configured), handing the activity image of every
/// iteration to `on_iter` before post-filtering.
fn osem_iterates(
    m: &Method,
    rc: &ReconConfig,
    proj: &Projector,
    meas: &Measured,
    mut on_iter: impl FnMut(usize, &DynTensor),
) -> fppg::Result<DynTensor> {
    let frames = meas.g.dims().frames;
    match m.gating {
        None => {
            let f = mlem_osem_iterates(proj, &meas.g, &meas.gamma, rc, |k, f| {
                on_iter(k, &to_activity(f, &meas.frame_scale))
            })?;
            Ok(to_activity(&f, &meas.frame_scale))
        }
        Some(gt) => {
            let g = gated_rebin(&meas.g, gt.bins, gt.cycle)?;
            let gamma = gated_rebin(&meas.gamma, gt.bins, gt.cycle)?;
            let scale = gated_scale(&meas.frame_scale, gt.bins, gt.cycle);
            let f = mlem_osem_iterates(proj, &g, &gamma, rc, |k, f| {
                on_iter(k, &expand_gates(&to_activity(f, &scale), frames, gt.bins, gt.cycle))
            })?;
            Ok(expand_gates(&to_activity(&f, &scale), frames, gt.bins, gt.cycle))
        }
    }
}

/// One reconstruction in activity units, post-filtered for OSEM. The trace
/// is returned for FPPG methods.
pub fn reconstruct(
    m: &Method,
    rc: &ReconConfig,
    proj: &Projector,
    meas: &Measured,
    pixel_mm: f64,
) -> fppg::Result<(DynTensor, Option<Trace>)> {
    if rc.algorithm.is_fppg() {
        let (f, trace) = FppgSolver::new(proj, &meas.g, &meas.gamma, rc)?.run()?;
        return Ok((to_activity(&f, &meas.frame_scale), Some(trace)));
    }
    let act = osem_iterates(m, rc, proj, meas, |_, _| {})?;
    Ok((gaussian_postfilter(&act, rc.postfilter_fwhm, pixel_mm), None))
}
