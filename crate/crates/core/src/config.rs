//! Plain-text configuration: `[section]` headers and `key = value` lines,
//! `#` comments. Every field has a default; unknown sections or keys are
//! errors so typos never pass silently. `echo()` serializes the full
//! effective config in canonical order, which together with the seeds is
//! enough to regenerate any output bit-exactly.

use crate::error::{Error, Result};
use crate::learner::LearnerKind;
use crate::sampler::SamplerKind;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct DataConfig {
    pub d_raw: usize,
    pub d: usize,
    pub base_classes: usize,
    pub new_classes: usize,
    pub shots: usize,
    pub eval_shots: usize,
    pub noise_scale: f64,
    pub outlier_frac: f64,
    pub outlier_scale: f64,
    pub align_target: f64,
    pub align_steps: usize,
    pub align_lr: f64,
    pub domain_shift: f64,
    pub domain_noise: f64,
    pub cross_targets: usize,
    pub domain_targets: usize,
    pub vocab_seed: u64,
    pub encoder_seed: u64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct LearnerConfig {
    pub kind: LearnerKind,
    pub m: usize,
    pub lr: f64,
    pub epochs: usize,
    /// 0 means automatic: 32, or 4 for the conditional learner.
    pub batch: usize,
    pub seed: u64,
}

impl LearnerConfig {
    pub fn effective_batch(&self) -> usize {
        if self.batch != 0 {
            return self.batch;
        }
        match self.kind {
            LearnerKind::Conditional => 4,
            _ => 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OverfitConfig {
    pub iters: usize,
    pub inner_lr: f64,
}

#[derive(Debug, Clone)]
pub struct DiffusionConfig {
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub layers: usize,
    pub heads: usize,
    pub beta_loss: f64,
    pub lr: f64,
    pub grad_clip: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SamplerSection {
    pub kind: SamplerKind,
    pub nfe: usize,
    pub seed: u64,
    pub teacher_nfe: usize,
    pub student_steps: usize,
    pub distill_evals: usize,
    pub distill_samples: usize,
}

#[derive(Debug, Clone)]
pub struct PathsConfig {
    pub out_dir: String,
}

#[derive(Debug, Clone)]
pub struct Config {
    pub data: DataConfig,
    pub learner: LearnerConfig,
    pub overfit: OverfitConfig,
    pub diffusion: DiffusionConfig,
    pub sampler: SamplerSection,
    pub paths: PathsConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            data: DataConfig {
                d_raw: 32,
                d: 64,
                base_classes: 10,
                new_classes: 10,
                shots: 16,
                eval_shots: 16,
                noise_scale: 0.7,
                outlier_frac: 0.08,
                outlier_scale: 8.0,
                align_target: 0.55,
                align_steps: 200,
                align_lr: 0.3,
                domain_shift: 0.25,
                domain_noise: 0.15,
                cross_targets: 2,
                domain_targets: 2,
                vocab_seed: 11,
                encoder_seed: 13,
                seed: 7,
            },
            learner: LearnerConfig {
                kind: LearnerKind::Static,
                m: 4,
                lr: 0.0035,
                epochs: 50,
                batch: 0,
                seed: 17,
            },
            overfit: OverfitConfig { iters: 5, inner_lr: 0.1 },
            diffusion: DiffusionConfig {
                t_steps: 100,
                beta_start: 1e-4,
                beta_end: 0.02,
                layers: 12,
                heads: 16,
                beta_loss: 1.0,
                lr: 0.005,
                grad_clip: 500.0,
                epochs: 50,
                batch: 32,
                seed: 23,
            },
            sampler: SamplerSection {
                kind: SamplerKind::Dpm2,
                nfe: 5,
                seed: 29,
                teacher_nfe: 50,
                student_steps: 5,
                distill_evals: 240,
                distill_samples: 16,
            },
            paths: PathsConfig { out_dir: "runs".into() },
        }
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config { line, detail: format!("bad value {v:?} for {key}") })
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or(Error::Config {
                    line: line_no,
                    detail: format!("malformed section header {line:?}"),
                })?;
                section = name.trim().to_string();
                match section.as_str() {
                    "data" | "learner" | "overfit" | "diffusion" | "sampler" | "paths" => {}
                    other => {
                        return Err(Error::Config {
                            line: line_no,
                            detail: format!("unknown section [{other}]"),
                        })
                    }
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::Config {
                line: line_no,
                detail: format!("expected key = value, got {line:?}"),
            })?;
            let (key, v) = (key.trim(), value.trim());
            cfg.apply(line_no, &section, key, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Invalid { what: format!("cannot read config {}: {e}", path.display()) })?;
        Config::parse(&text)
    }

    fn apply(&mut self, line: usize, section: &str, key: &str, v: &str) -> Result<()> {
        match (section, key) {
            ("data", "d_raw") => self.data.d_raw = parse_num(line, key, v)?,
            ("data", "d") => self.data.d = parse_num(line, key, v)?,
            ("data", "base_classes") => self.data.base_classes = parse_num(line, key, v)?,
            ("data", "new_classes") => self.data.new_classes = parse_num(line, key, v)?,
            ("data", "shots") => self.data.shots = parse_num(line, key, v)?,
            ("data", "eval_shots") => self.data.eval_shots = parse_num(line, key, v)?,
            ("data", "noise_scale") => self.data.noise_scale = parse_num(line, key, v)?,
            ("data", "outlier_frac") => self.data.outlier_frac = parse_num(line, key, v)?,
            ("data", "outlier_scale") => self.data.outlier_scale = parse_num(line, key, v)?,
            ("data", "align_target") => self.data.align_target = parse_num(line, key, v)?,
            ("data", "align_steps") => self.data.align_steps = parse_num(line, key, v)?,
            ("data", "align_lr") => self.data.align_lr = parse_num(line, key, v)?,
            ("data", "domain_shift") => self.data.domain_shift = parse_num(line, key, v)?,
            ("data", "domain_noise") => self.data.domain_noise = parse_num(line, key, v)?,
            ("data", "cross_targets") => self.data.cross_targets = parse_num(line, key, v)?,
            ("data", "domain_targets") => self.data.domain_targets = parse_num(line, key, v)?,
            ("data", "vocab_seed") => self.data.vocab_seed = parse_num(line, key, v)?,
            ("data", "encoder_seed") => self.data.encoder_seed = parse_num(line, key, v)?,
            ("data", "seed") => self.data.seed = parse_num(line, key, v)?,
            ("learner", "kind") => {
                self.learner.kind = match v {
                    "static" => LearnerKind::Static,
                    "conditional" => LearnerKind::Conditional,
                    "visual" => LearnerKind::Visual,
                    other => {
                        return Err(Error::Config {
                            line,
                            detail: format!("unknown learner kind {other:?}"),
                        })
                    }
                }
            }
            ("learner", "m") => self.learner.m = parse_num(line, key, v)?,
            ("learner", "lr") => self.learner.lr = parse_num(line, key, v)?,
            ("learner", "epochs") => self.learner.epochs = parse_num(line, key, v)?,
            ("learner", "batch") => self.learner.batch = parse_num(line, key, v)?,
            ("learner", "seed") => self.learner.seed = parse_num(line, key, v)?,
            ("overfit", "iters") => self.overfit.iters = parse_num(line, key, v)?,
            ("overfit", "inner_lr") => self.overfit.inner_lr = parse_num(line, key, v)?,
            ("diffusion", "t_steps") => self.diffusion.t_steps = parse_num(line, key, v)?,
            ("diffusion", "beta_start") => self.diffusion.beta_start = parse_num(line, key, v)?,
            ("diffusion", "beta_end") => self.diffusion.beta_end = parse_num(line, key, v)?,
            ("diffusion", "layers") => self.diffusion.layers = parse_num(line, key, v)?,
            ("diffusion", "heads") => self.diffusion.heads = parse_num(line, key, v)?,
            ("diffusion", "beta_loss") => self.diffusion.beta_loss = parse_num(line, key, v)?,
            ("diffusion", "lr") => self.diffusion.lr = parse_num(line, key, v)?,
            ("diffusion", "grad_clip") => self.diffusion.grad_clip = parse_num(line, key, v)?,
            ("diffusion", "epochs") => self.diffusion.epochs = parse_num(line, key, v)?,
            ("diffusion", "batch") => self.diffusion.batch = parse_num(line, key, v)?,
            ("diffusion", "seed") => self.diffusion.seed = parse_num(line, key, v)?,
            ("sampler", "kind") => self.sampler.kind = SamplerKind::parse(v).map_err(|_| Error::Config {
                line,
                detail: format!("unknown sampler kind {v:?}"),
            })?,
            ("sampler", "nfe") => self.sampler.nfe = parse_num(line, key, v)?,
            ("sampler", "seed") => self.sampler.seed = parse_num(line, key, v)?,
            ("sampler", "teacher_nfe") => self.sampler.teacher_nfe = parse_num(line, key, v)?,
            ("sampler", "student_steps") => self.sampler.student_steps = parse_num(line, key, v)?,
            ("sampler", "distill_evals") => self.sampler.distill_evals = parse_num(line, key, v)?,
            ("sampler", "distill_samples") => self.sampler.distill_samples = parse_num(line, key, v)?,
            ("paths", "out_dir") => self.paths.out_dir = v.to_string(),
            ("", k) => {
                return Err(Error::Config { line, detail: format!("key {k:?} before any [section]") })
            }
            (s, k) => {
                return Err(Error::Config { line, detail: format!("unknown key {k:?} in [{s}]") })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.base_classes < 2 || self.data.new_classes < 2 {
            return Err(Error::Invalid { what: "need at least 2 base and 2 new classes".into() });
        }
        if self.data.d % 2 != 0 {
            return Err(Error::Invalid { what: format!("embedding dim {} must be even", self.data.d) });
        }
        if self.diffusion.heads == 0 || self.data.d % self.diffusion.heads != 0 {
            return Err(Error::Invalid {
                what: format!("{} heads do not divide d={}", self.diffusion.heads, self.data.d),
            });
        }
        if !(self.diffusion.beta_start > 0.0
            && self.diffusion.beta_start <= self.diffusion.beta_end
            && self.diffusion.beta_end < 1.0)
        {
            return Err(Error::Invalid { what: "beta range outside 0 < start <= end < 1".into() });
        }
        Ok(())
    }

    /// Canonical serialization of every effective setting.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let d = &self.data;
        writeln!(s, "[data]").unwrap();
        writeln!(s, "d_raw = {}", d.d_raw).unwrap();
        writeln!(s, "d = {}", d.d).unwrap();
        writeln!(s, "base_classes = {}", d.base_classes).unwrap();
        writeln!(s, "new_classes = {}", d.new_classes).unwrap();
        writeln!(s, "shots = {}", d.shots).unwrap();
        writeln!(s, "eval_shots = {}", d.eval_shots).unwrap();
        writeln!(s, "noise_scale = {}", d.noise_scale).unwrap();
        writeln!(s, "outlier_frac = {}", d.outlier_frac).unwrap();
        writeln!(s, "outlier_scale = {}", d.outlier_scale).unwrap();
        writeln!(s, "align_target = {}", d.align_target).unwrap();
        writeln!(s, "align_steps = {}", d.align_steps).unwrap();
        writeln!(s, "align_lr = {}", d.align_lr).unwrap();
        writeln!(s, "domain_shift = {}", d.domain_shift).unwrap();
        writeln!(s, "domain_noise = {}", d.domain_noise).unwrap();
        writeln!(s, "cross_targets = {}", d.cross_targets).unwrap();
        writeln!(s, "domain_targets = {}", d.domain_targets).unwrap();
        writeln!(s, "vocab_seed = {}", d.vocab_seed).unwrap();
        writeln!(s, "encoder_seed = {}", d.encoder_seed).unwrap();
        writeln!(s, "seed = {}", d.seed).unwrap();
        let l = &self.learner;
        writeln!(s, "\n[learner]").unwrap();
        writeln!(s, "kind = {}", l.kind.as_str()).unwrap();
        writeln!(s, "m = {}", l.m).unwrap();
        writeln!(s, "lr = {}", l.lr).unwrap();
        writeln!(s, "epochs = {}", l.epochs).unwrap();
        writeln!(s, "batch = {}", l.batch).unwrap();
        writeln!(s, "seed = {}", l.seed).unwrap();
        let o = &self.overfit;
        writeln!(s, "\n[overfit]").unwrap();
        writeln!(s, "iters = {}", o.iters).unwrap();
        writeln!(s, "inner_lr = {}", o.inner_lr).unwrap();
        let f = &self.diffusion;
        writeln!(s, "\n[diffusion]").unwrap();
        writeln!(s, "t_steps = {}", f.t_steps).unwrap();
        writeln!(s, "beta_start = {}", f.beta_start).unwrap();
        writeln!(s, "beta_end = {}", f.beta_end).unwrap();
        writeln!(s, "layers = {}", f.layers).unwrap();
        writeln!(s, "heads = {}", f.heads).unwrap();
        writeln!(s, "beta_loss = {}", f.beta_loss).unwrap();
        writeln!(s, "lr = {}", f.lr).unwrap();
        writeln!(s, "grad_clip = {}", f.grad_clip).unwrap();
        writeln!(s, "epochs = {}", f.epochs).unwrap();
        writeln!(s, "batch = {}", f.batch).unwrap();
        writeln!(s, "seed = {}", f.seed).unwrap();
        let sp = &self.sampler;
        writeln!(s, "\n[sampler]").unwrap();
        writeln!(s, "kind = {}", sp.kind.as_str()).unwrap();
        writeln!(s, "nfe = {}", sp.nfe).unwrap();
        writeln!(s, "seed = {}", sp.seed).unwrap();
        writeln!(s, "teacher_nfe = {}", sp.teacher_nfe).unwrap();
        writeln!(s, "student_steps = {}", sp.student_steps).unwrap();
        writeln!(s, "distill_evals = {}", sp.distill_evals).unwrap();
        writeln!(s, "distill_samples = {}", sp.distill_samples).unwrap();
        writeln!(s, "\n[paths]").unwrap();
        writeln!(s, "out_dir = {}", self.paths.out_dir).unwrap();
        s
    }
}
