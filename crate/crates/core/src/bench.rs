//! Synthetic generalization benchmark: Gaussian class clusters in raw
//! feature space whose means are aligned (imperfectly, by construction) with
//! the frozen text features of their class embeddings, evaluated under
//! three protocols: base-to-new, cross-dataset, and domain shift. Metrics
//! include per-split accuracy and the harmonic mean.

use crate::clip::{ClassVocabulary, Surrogate, DEFAULT_TEMPERATURE};
use crate::config::Config;
use crate::dit::{train_prompt_diffusion, DiffTrainConfig, DiffusionTransformer, DitConfig, DitDenoiser};
use crate::error::{Error, Result};
use crate::learner::{eval_baseline, train_baseline, LearnerKind, LearnerState, MetaNet, Sample};
use crate::overfit::{overfit_dataset, OverfitRecord};
use crate::rng::{mix, substream};
use crate::sampler::{sample_prompts, SamplerConfig, SamplerKind};
use crate::schedule::NoiseSchedule;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;
use std::time::Instant;

/// Spread of the raw-space cluster means.
const CLUSTER_STD: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    BaseToNew,
    CrossDataset,
    DomainGen,
}

impl Protocol {
    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::BaseToNew => "base_to_new",
            Protocol::CrossDataset => "cross_dataset",
            Protocol::DomainGen => "domain_gen",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "base_to_new" => Ok(Protocol::BaseToNew),
            "cross_dataset" => Ok(Protocol::CrossDataset),
            "domain_gen" => Ok(Protocol::DomainGen),
            other => Err(Error::Invalid { what: format!("unknown protocol {other:?}") }),
        }
    }
}

pub struct SyntheticDataset {
    pub name: String,
    pub base_ids: Vec<usize>,
    pub new_ids: Vec<usize>,
    /// Base-class training samples; class_index points into base_ids.
    pub train: Vec<Sample>,
    pub eval_base: Vec<Sample>,
    /// class_index points into new_ids.
    pub eval_new: Vec<Sample>,
    /// Generator ground truth: (global id, raw-space mean).
    pub class_means: Vec<(usize, Tensor)>,
}

/// Text feature of a class embedding under an all-zero prompt context; the
/// anchor the generator aligns image clusters against.
fn zero_context_feature(surrogate: &Surrogate, vocab_seed: u64, id: usize, m: usize, d: usize) -> Result<Tensor> {
    let v = ClassVocabulary::from_dictionary(vocab_seed, &[id], d, DEFAULT_TEMPERATURE)?;
    let mut tape = Tape::new();
    let zero = tape.constant(Tensor::zeros(vec![m, d]));
    let feats = surrogate.text_features(&mut tape, zero, &v)?;
    Ok(tape.value(feats[0]).detached())
}

/// Steepest-ascend a raw vector until its image embedding reaches the target
/// cosine against the class text feature (or the step budget runs out).
/// Steps use the normalized gradient with a fixed raw-space length, so
/// progress does not depend on the local gradient scale.
fn align_mean(
    surrogate: &Surrogate,
    target: &Tensor,
    start: Tensor,
    align_target: f64,
    steps: usize,
    step_len: f64,
) -> Result<Tensor> {
    let mut mu = start;
    for _ in 0..steps {
        let mut tape = Tape::new();
        let mvar = tape.param(&mu.detached().with_requires_grad());
        let ivars = surrogate.image.bind(&mut tape);
        let emb = surrogate.image.encode(&mut tape, &ivars, mvar, None)?;
        let tvar = tape.constant(target.clone());
        let cos = tape.cos_sim(emb, tvar)?;
        if tape.value(cos).item() >= align_target {
            break;
        }
        let loss = tape.mul_scalar(cos, -1.0)?;
        tape.backward(loss)?;
        let g = tape.grad(mvar).ok_or(Error::MissingGrad { name: "cluster mean".into() })?;
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < 1e-12 {
            break;
        }
        let next: Vec<f64> =
            mu.data().iter().zip(g).map(|(m, gi)| m - step_len * gi / gnorm).collect();
        mu = Tensor::new(mu.shape().to_vec(), next)?;
    }
    Ok(mu.detached())
}

/// Gaussian class clusters in raw space, deterministic per seed. Base and
/// new classes take disjoint global id ranges starting at `id_offset`.
pub fn generate_dataset(
    cfg: &Config,
    surrogate: &Surrogate,
    name: &str,
    id_offset: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    let d = &cfg.data;
    if d.base_classes < 2 || d.new_classes < 2 {
        return Err(Error::Invalid { what: "need at least 2 base and 2 new classes".into() });
    }
    let base_ids: Vec<usize> = (0..d.base_classes).map(|k| id_offset + k).collect();
    let new_ids: Vec<usize> = (0..d.new_classes).map(|k| id_offset + d.base_classes + k).collect();

    let mut class_means = Vec::new();
    for &id in base_ids.iter().chain(&new_ids) {
        let target = zero_context_feature(surrogate, d.vocab_seed, id, cfg.learner.m, d.d)?;
        let start = Tensor::randn(vec![d.d_raw], CLUSTER_STD, &mut substream(seed, 0x900 + id as u64));
        let mu = align_mean(surrogate, &target, start, d.align_target, d.align_steps, d.align_lr)?;
        class_means.push((id, mu));
    }

    if d.noise_scale <= 0.0 {
        return Err(Error::Invalid { what: "degenerate covariance: noise_scale must be positive".into() });
    }

    let mean_of = |id: usize| -> &Tensor {
        &class_means.iter().find(|(i, _)| *i == id).unwrap().1
    };
    let mut next_id = 0u64;
    let mut draw_split = |ids: &[usize], count: usize, label: u64| -> Vec<Sample> {
        let mut out = Vec::with_capacity(ids.len() * count);
        for (ci, &id) in ids.iter().enumerate() {
            let mut rng = substream(seed, 0x5000 + label * 1000 + id as u64);
            for _ in 0..count {
                // contamination mixture: a small fraction of samples carries
                // a much wider (still isotropic) spread
                use rand::Rng;
                let wide: f64 = rng.gen::<f64>();
                let std = if wide < d.outlier_frac { d.noise_scale * d.outlier_scale } else { d.noise_scale };
                let noise = Tensor::randn(vec![d.d_raw], std, &mut rng);
                let raw: Vec<f64> = mean_of(id)
                    .data()
                    .iter()
                    .zip(noise.data())
                    .map(|(m, n)| m + n)
                    .collect();
                out.push(Sample { id: next_id, raw: Tensor::new(vec![d.d_raw], raw).unwrap(), class_index: ci });
                next_id += 1;
            }
        }
        out
    };

    let train = draw_split(&base_ids, d.shots, 0);
    let eval_base = draw_split(&base_ids, d.eval_shots, 1);
    let eval_new = draw_split(&new_ids, d.eval_shots, 2);

    Ok(SyntheticDataset {
        name: name.to_string(),
        base_ids,
        new_ids,
        train,
        eval_base,
        eval_new,
        class_means,
    })
}

/// Seeded affine domain shift plus additive noise on the raw features.
pub fn apply_domain_shift(
    ds: &SyntheticDataset,
    shift: f64,
    noise: f64,
    seed: u64,
    name: &str,
) -> Result<SyntheticDataset> {
    let d_raw = ds.eval_base[0].raw.numel();
    let mut rng = substream(seed, 0xd0);
    let a = Tensor::randn(vec![d_raw, d_raw], shift / (d_raw as f64).sqrt(), &mut rng);
    let b = Tensor::randn(vec![d_raw], shift, &mut rng);
    let transform = |samples: &[Sample], label: u64| -> Vec<Sample> {
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut out = vec![0.0; d_raw];
                for r in 0..d_raw {
                    let mut acc = s.raw.data()[r] + b.data()[r];
                    for c in 0..d_raw {
                        acc += a.data()[r * d_raw + c] * s.raw.data()[c];
                    }
                    out[r] = acc;
                }
                let mut nrng = substream(seed, 0xd1 + label * 100_000 + i as u64);
                for v in out.iter_mut() {
                    use rand_distr::Distribution;
                    let z: f64 = rand_distr::StandardNormal.sample(&mut nrng);
                    *v += noise * z;
                }
                Sample { id: s.id, raw: Tensor::new(vec![d_raw], out).unwrap(), class_index: s.class_index }
            })
            .collect()
    };
    Ok(SyntheticDataset {
        name: name.to_string(),
        base_ids: ds.base_ids.clone(),
        new_ids: ds.new_ids.clone(),
        train: Vec::new(),
        eval_base: transform(&ds.eval_base, 0),
        eval_new: transform(&ds.eval_new, 1),
        class_means: ds.class_means.clone(),
    })
}

/// Bayes-optimal classifier on the raw features, from the generator's
/// ground truth. All classes share the same isotropic contamination-mixture
/// noise, whose density is radially decreasing, so the likelihood-ratio rule
/// reduces to nearest class mean (piecewise-linear boundaries).
pub fn bayes_accuracy(ds: &SyntheticDataset) -> f64 {
    let score = |samples: &[Sample], ids: &[usize]| -> (usize, usize) {
        let mut correct = 0;
        for s in samples {
            let mut best = (f64::INFINITY, 0usize);
            for (ci, &id) in ids.iter().enumerate() {
                let mu = &ds.class_means.iter().find(|(i, _)| *i == id).unwrap().1;
                let dist: f64 =
                    s.raw.data().iter().zip(mu.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.0 {
                    best = (dist, ci);
                }
            }
            if best.1 == s.class_index {
                correct += 1;
            }
        }
        (correct, samples.len())
    };
    let (cb, nb) = score(&ds.eval_base, &ds.base_ids);
    let (cn, nn) = score(&ds.eval_new, &ds.new_ids);
    100.0 * (cb + cn) as f64 / (nb + nn) as f64
}

/// H = 2 * base * new / (base + new); zero inputs collapse to 0 with a
/// warning instead of dividing by zero.
pub fn harmonic_mean(base_acc: f64, new_acc: f64) -> f64 {
    if base_acc <= 0.0 || new_acc <= 0.0 {
        eprintln!("warning: harmonic mean of non-positive accuracy ({base_acc}, {new_acc}) -> 0");
        return 0.0;
    }
    2.0 * base_acc * new_acc / (base_acc + new_acc)
}

// ---------------------------------------------------------------------------
// Trained method bundle

pub struct TrainedMethod {
    pub learner: LearnerState,
    pub records: Vec<OverfitRecord>,
    pub model: DiffusionTransformer,
    pub meta: MetaNet,
    pub schedule: NoiseSchedule,
    pub curve: Vec<crate::dit::CurvePoint>,
    pub baseline_secs: f64,
    pub overfit_secs: f64,
    pub diffusion_secs: f64,
}

pub fn dit_config_from(cfg: &Config) -> DitConfig {
    DitConfig {
        layers: cfg.diffusion.layers,
        width: cfg.data.d,
        heads: cfg.diffusion.heads,
        m: cfg.learner.m,
        t_max: cfg.diffusion.t_steps,
    }
}

/// Full training pipeline for one seed: baseline prompts, per-sample
/// overfits, then the diffusion transformer.
pub fn train_method(
    cfg: &Config,
    surrogate: &Surrogate,
    ds: &SyntheticDataset,
    run_seed: u64,
) -> Result<TrainedMethod> {
    let vocab = ClassVocabulary::from_dictionary(
        cfg.data.vocab_seed,
        &ds.base_ids,
        cfg.data.d,
        DEFAULT_TEMPERATURE,
    )?;
    let mut learner = LearnerState::new(
        cfg.learner.kind,
        cfg.learner.m,
        cfg.data.d,
        mix(cfg.learner.seed, run_seed),
    )?;

    let t0 = Instant::now();
    train_baseline(
        &mut learner,
        surrogate,
        &vocab,
        &ds.train,
        cfg.learner.epochs,
        cfg.learner.lr,
        cfg.learner.effective_batch(),
        mix(cfg.learner.seed, run_seed.wrapping_add(1)),
    )?;
    let baseline_secs = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let records =
        overfit_dataset(&learner, surrogate, &vocab, &ds.train, cfg.overfit.iters, cfg.overfit.inner_lr)?;
    let overfit_secs = t1.elapsed().as_secs_f64();

    let schedule =
        NoiseSchedule::linear(cfg.diffusion.t_steps, cfg.diffusion.beta_start, cfg.diffusion.beta_end)?;
    let mut model = DiffusionTransformer::new(dit_config_from(cfg), mix(cfg.diffusion.seed, run_seed))?;
    // one shared conditioning net: reuse the baseline's when it has one
    let mut meta = match &learner.meta_net {
        Some(m) => m.clone(),
        None => MetaNet::new(cfg.data.d, mix(cfg.diffusion.seed, run_seed.wrapping_add(2))),
    };
    let t2 = Instant::now();
    let report = train_prompt_diffusion(
        &mut model,
        &mut meta,
        surrogate,
        &vocab,
        learner.kind,
        &ds.train,
        &records,
        &schedule,
        DiffTrainConfig {
            epochs: cfg.diffusion.epochs,
            batch: cfg.diffusion.batch,
            lr: cfg.diffusion.lr,
            beta: cfg.diffusion.beta_loss,
            grad_clip: cfg.diffusion.grad_clip,
            seed: mix(cfg.diffusion.seed, run_seed.wrapping_add(3)),
        },
    )?;
    let diffusion_secs = t2.elapsed().as_secs_f64();

    Ok(TrainedMethod {
        learner,
        records,
        model,
        meta,
        schedule,
        curve: report.curve,
        baseline_secs,
        overfit_secs,
        diffusion_secs,
    })
}

pub struct DiffusionEval {
    pub accuracy: f64,
    pub nfe_per_sample: usize,
    pub secs: f64,
}

/// Classify every sample with prompts generated from noise, conditioned on
/// the sample's image feature. Noise is seeded per (global seed, sample id).
#[allow(clippy::too_many_arguments)]
pub fn eval_diffusion(
    trained: &TrainedMethod,
    surrogate: &Surrogate,
    vocab: &ClassVocabulary,
    samples: &[Sample],
    sampler_cfg: &SamplerConfig,
    global_seed: u64,
) -> Result<DiffusionEval> {
    if samples.is_empty() {
        return Err(Error::Invalid { what: "empty evaluation set".into() });
    }
    let t0 = Instant::now();
    let denoiser = DitDenoiser::new(&trained.model);
    let shape = (trained.model.cfg().m, trained.model.cfg().width);
    let mut correct = 0usize;
    let mut nfe_seen: Option<usize> = None;
    for s in samples {
        let emb = surrogate.image.embed(&s.raw)?;
        let pi = trained.meta.infer(&emb)?;
        let mut rng = substream(global_seed, s.id);
        let out = sample_prompts(&denoiser, &pi, shape, sampler_cfg, &trained.schedule, &mut rng)?;
        match nfe_seen {
            None => nfe_seen = Some(out.nfe),
            Some(n) => {
                if n != out.nfe {
                    return Err(Error::Invalid {
                        what: format!("inconsistent NFE across samples: {n} vs {}", out.nfe),
                    });
                }
            }
        }
        let mut tape = Tape::new();
        let probs = match trained.learner.kind {
            LearnerKind::Visual => {
                let raw = tape.constant(s.raw.clone());
                let p = tape.constant(out.v0);
                surrogate.classify_visual(&mut tape, raw, p, vocab)?
            }
            _ => {
                let e = tape.constant(emb);
                let p = tape.constant(out.v0);
                surrogate.classify(&mut tape, e, p, vocab)?
            }
        };
        let pred = tape
            .value(probs)
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if pred == s.class_index {
            correct += 1;
        }
    }
    Ok(DiffusionEval {
        accuracy: 100.0 * correct as f64 / samples.len() as f64,
        nfe_per_sample: nfe_seen.unwrap(),
        secs: t0.elapsed().as_secs_f64(),
    })
}

/// Resolve the sampler config, distilling AMED step scalars on training
/// images when required.
pub fn resolve_sampler(
    cfg: &Config,
    trained: &TrainedMethod,
    surrogate: &Surrogate,
    ds: &SyntheticDataset,
    run_seed: u64,
) -> Result<SamplerConfig> {
    let mut sc = SamplerConfig::new(cfg.sampler.kind, cfg.sampler.nfe);
    if cfg.sampler.kind == SamplerKind::Amed {
        let n = cfg.sampler.distill_samples.min(ds.train.len()).max(1);
        let mut contexts = Vec::with_capacity(n);
        for s in ds.train.iter().take(n) {
            let emb = surrogate.image.embed(&s.raw)?;
            contexts.push(trained.meta.infer(&emb)?);
        }
        let steps = cfg.sampler.nfe / 2;
        if steps == 0 {
            return Err(Error::Invalid { what: format!("NFE {} too small for amed", cfg.sampler.nfe) });
        }
        let den = DitDenoiser::new(&trained.model);
        let out = crate::sampler::distill_amed(
            &den,
            &contexts,
            (trained.model.cfg().m, trained.model.cfg().width),
            &trained.schedule,
            cfg.sampler.teacher_nfe,
            steps,
            mix(cfg.sampler.seed, run_seed),
            cfg.sampler.distill_evals,
        )?;
        sc.amed = Some(out.params);
    }
    Ok(sc)
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub method: &'static str,
    pub base_acc: f64,
    pub new_acc: f64,
    pub h: f64,
    pub per_target: Vec<(String, f64)>,
    pub nfe: usize,
    pub train_secs: f64,
    pub eval_secs: f64,
}

impl MethodOutcome {
    fn mean_of(items: &[&MethodOutcome]) -> MethodOutcome {
        let n = items.len() as f64;
        let base = items.iter().map(|m| m.base_acc).sum::<f64>() / n;
        let new = items.iter().map(|m| m.new_acc).sum::<f64>() / n;
        let mut per_target: Vec<(String, f64)> = Vec::new();
        if let Some(first) = items.first() {
            for (k, _) in &first.per_target {
                let v = items
                    .iter()
                    .map(|m| m.per_target.iter().find(|(n2, _)| n2 == k).map(|(_, v)| *v).unwrap_or(0.0))
                    .sum::<f64>()
                    / n;
                per_target.push((k.clone(), v));
            }
        }
        MethodOutcome {
            method: items[0].method,
            base_acc: base,
            new_acc: new,
            h: harmonic_mean(base, new),
            per_target,
            nfe: items[0].nfe,
            train_secs: items.iter().map(|m| m.train_secs).sum::<f64>() / n,
            eval_secs: items.iter().map(|m| m.eval_secs).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub baseline: MethodOutcome,
    pub diffusion: MethodOutcome,
}

pub struct BenchmarkReport {
    pub protocol: Protocol,
    pub per_seed: Vec<SeedOutcome>,
    pub mean_baseline: MethodOutcome,
    pub mean_diffusion: MethodOutcome,
    pub config_echo: String,
    pub wall_secs: f64,
}

impl BenchmarkReport {
    /// Deterministic machine-readable rows; wall-clock lives in `summary()`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("protocol,method,seed,base_acc,new_acc,h,nfe");
        let targets: Vec<String> =
            self.mean_baseline.per_target.iter().map(|(k, _)| k.clone()).collect();
        for t in &targets {
            s.push_str(&format!(",{t}"));
        }
        s.push('\n');
        let mut row = |seed: &str, m: &MethodOutcome| {
            s.push_str(&format!(
                "{},{},{},{:.4},{:.4},{:.4},{}",
                self.protocol.as_str(),
                m.method,
                seed,
                m.base_acc,
                m.new_acc,
                m.h,
                m.nfe
            ));
            for t in &targets {
                let v = m.per_target.iter().find(|(k, _)| k == t).map(|(_, v)| *v).unwrap_or(0.0);
                s.push_str(&format!(",{v:.4}"));
            }
            s.push('\n');
        };
        for so in &self.per_seed {
            row(&so.seed.to_string(), &so.baseline);
            row(&so.seed.to_string(), &so.diffusion);
        }
        row("mean", &self.mean_baseline);
        row("mean", &self.mean_diffusion);
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("protocol: {}\n", self.protocol.as_str()));
        s.push_str(&format!("seeds: {:?}\n", self.per_seed.iter().map(|x| x.seed).collect::<Vec<_>>()));
        for m in [&self.mean_baseline, &self.mean_diffusion] {
            s.push_str(&format!(
                "{:<10} base {:6.2}  new {:6.2}  H {:6.2}  nfe {}  (train {:.1}s eval {:.1}s)\n",
                m.method, m.base_acc, m.new_acc, m.h, m.nfe, m.train_secs, m.eval_secs
            ));
            for (k, v) in &m.per_target {
                s.push_str(&format!("    target {k}: {v:.2}\n"));
            }
        }
        s.push_str(&format!(
            "H gain (diffusion - baseline): {:+.2}\n",
            self.mean_diffusion.h - self.mean_baseline.h
        ));
        s.push_str(&format!("total wall: {:.1}s\n", self.wall_secs));
        s
    }
}

fn vocab_for(cfg: &Config, ids: &[usize]) -> Result<ClassVocabulary> {
    ClassVocabulary::from_dictionary(cfg.data.vocab_seed, ids, cfg.data.d, DEFAULT_TEMPERATURE)
}

/// Leak check: no training sample id or class id may appear in the new-class
/// evaluation material.
fn assert_no_leak(ds: &SyntheticDataset) -> Result<()> {
    for id in &ds.new_ids {
        if ds.base_ids.contains(id) {
            return Err(Error::Invalid { what: format!("class id {id} in both base and new") });
        }
    }
    let max_train = ds.train.iter().map(|s| s.id).max().unwrap_or(0);
    for s in &ds.eval_new {
        if s.id <= max_train {
            return Err(Error::Invalid { what: format!("eval-new sample id {} overlaps train", s.id) });
        }
    }
    Ok(())
}

/// Run one protocol end to end for every seed, with both methods on
/// identical generated data.
pub fn run_protocol(cfg: &Config, protocol: Protocol, seeds: &[u64]) -> Result<BenchmarkReport> {
    if seeds.is_empty() {
        return Err(Error::Invalid { what: "need at least one seed".into() });
    }
    let wall0 = Instant::now();
    let surrogate = Surrogate::new(cfg.data.d_raw, cfg.data.d, cfg.learner.m, cfg.data.encoder_seed);
    let mut per_seed = Vec::with_capacity(seeds.len());

    for &seed in seeds {
        let data_seed = mix(cfg.data.seed, seed);
        let ds = generate_dataset(cfg, &surrogate, "synth", 0, data_seed)?;
        assert_no_leak(&ds)?;
        let vb = vocab_for(cfg, &ds.base_ids)?;
        let vn = vocab_for(cfg, &ds.new_ids)?;

        let trained = train_method(cfg, &surrogate, &ds, seed)?;
        let sampler_cfg = resolve_sampler(cfg, &trained, &surrogate, &ds, seed)?;
        let eval_seed = mix(cfg.sampler.seed, seed);

        // targets beyond the source split, per protocol
        let mut targets: Vec<(String, SyntheticDataset)> = Vec::new();
        match protocol {
            Protocol::BaseToNew => {}
            Protocol::CrossDataset => {
                for k in 0..cfg.data.cross_targets {
                    let name = format!("target{k}");
                    let tds = generate_dataset(
                        cfg,
                        &surrogate,
                        &name,
                        1000 * (k + 1),
                        mix(data_seed, 0xc0 + k as u64),
                    )?;
                    targets.push((name, tds));
                }
            }
            Protocol::DomainGen => {
                for k in 0..cfg.data.domain_targets {
                    let name = format!("shift{k}");
                    let tds = apply_domain_shift(
                        &ds,
                        cfg.data.domain_shift,
                        cfg.data.domain_noise,
                        mix(data_seed, 0xe0 + k as u64),
                        &name,
                    )?;
                    targets.push((name, tds));
                }
            }
        }

        // baseline
        let tb0 = Instant::now();
        let base_acc = eval_baseline(&trained.learner, &surrogate, &vb, &ds.eval_base)?;
        let new_acc = eval_baseline(&trained.learner, &surrogate, &vn, &ds.eval_new)?;
        let mut baseline_targets = Vec::new();
        for (name, tds) in &targets {
            let tvb = vocab_for(cfg, &tds.base_ids)?;
            let acc = eval_baseline(&trained.learner, &surrogate, &tvb, &tds.eval_base)?;
            baseline_targets.push((name.clone(), acc));
        }
        let baseline = MethodOutcome {
            method: "baseline",
            base_acc,
            new_acc,
            h: harmonic_mean(base_acc, new_acc),
            per_target: baseline_targets,
            nfe: 0,
            train_secs: trained.baseline_secs,
            eval_secs: tb0.elapsed().as_secs_f64(),
        };

        // baseline + prompt diffusion
        let td0 = Instant::now();
        let dbase = eval_diffusion(&trained, &surrogate, &vb, &ds.eval_base, &sampler_cfg, eval_seed)?;
        let dnew = eval_diffusion(&trained, &surrogate, &vn, &ds.eval_new, &sampler_cfg, eval_seed)?;
        let mut diffusion_targets = Vec::new();
        for (name, tds) in &targets {
            let tvb = vocab_for(cfg, &tds.base_ids)?;
            let acc =
                eval_diffusion(&trained, &surrogate, &tvb, &tds.eval_base, &sampler_cfg, eval_seed)?;
            diffusion_targets.push((name.clone(), acc.accuracy));
        }
        let diffusion = MethodOutcome {
            method: "diffusion",
            base_acc: dbase.accuracy,
            new_acc: dnew.accuracy,
            h: harmonic_mean(dbase.accuracy, dnew.accuracy),
            per_target: diffusion_targets,
            nfe: dbase.nfe_per_sample,
            train_secs: trained.overfit_secs + trained.diffusion_secs,
            eval_secs: td0.elapsed().as_secs_f64(),
        };

        per_seed.push(SeedOutcome { seed, baseline, diffusion });
    }

    let mean_baseline = MethodOutcome::mean_of(&per_seed.iter().map(|s| &s.baseline).collect::<Vec<_>>());
    let mean_diffusion = MethodOutcome::mean_of(&per_seed.iter().map(|s| &s.diffusion).collect::<Vec<_>>());
    Ok(BenchmarkReport {
        protocol,
        per_seed,
        mean_baseline,
        mean_diffusion,
        config_echo: cfg.echo(),
        wall_secs: wall0.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Ablations

pub struct AblationRow {
    pub value: usize,
    pub base_acc: f64,
    pub new_acc: f64,
    pub h: f64,
    pub nfe: usize,
}

pub struct AblationTable {
    pub axis: &'static str,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},base_acc,new_acc,h,nfe\n", self.axis);
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{}\n",
                r.value, r.base_acc, r.new_acc, r.h, r.nfe
            ));
        }
        s
    }
}

/// NFE sweep: training does not depend on the sampler, so train once per
/// seed and re-evaluate per budget.
pub fn ablate_nfe(cfg: &Config, values: &[usize], seeds: &[u64]) -> Result<AblationTable> {
    if values.is_empty() {
        return Err(Error::Invalid { what: "empty ablation values".into() });
    }
    let surrogate = Surrogate::new(cfg.data.d_raw, cfg.data.d, cfg.learner.m, cfg.data.encoder_seed);
    let mut acc: Vec<(f64, f64, usize)> = vec![(0.0, 0.0, 0); values.len()];
    for &seed in seeds {
        let data_seed = mix(cfg.data.seed, seed);
        let ds = generate_dataset(cfg, &surrogate, "synth", 0, data_seed)?;
        let vb = vocab_for(cfg, &ds.base_ids)?;
        let vn = vocab_for(cfg, &ds.new_ids)?;
        let trained = train_method(cfg, &surrogate, &ds, seed)?;
        for (i, &nfe) in values.iter().enumerate() {
            let mut c = cfg.clone();
            c.sampler.nfe = nfe;
            let sc = resolve_sampler(&c, &trained, &surrogate, &ds, seed)?;
            let eval_seed = mix(cfg.sampler.seed, seed);
            let b = eval_diffusion(&trained, &surrogate, &vb, &ds.eval_base, &sc, eval_seed)?;
            let n = eval_diffusion(&trained, &surrogate, &vn, &ds.eval_new, &sc, eval_seed)?;
            acc[i].0 += b.accuracy;
            acc[i].1 += n.accuracy;
            acc[i].2 = b.nfe_per_sample;
        }
    }
    let n = seeds.len() as f64;
    let rows = values
        .iter()
        .zip(acc)
        .map(|(&v, (b, nw, nfe))| AblationRow {
            value: v,
            base_acc: b / n,
            new_acc: nw / n,
            h: harmonic_mean(b / n, nw / n),
            nfe,
        })
        .collect();
    Ok(AblationTable { axis: "nfe", rows })
}

/// Overfit-iteration sweep: the diffusion targets change, so each value
/// retrains the whole method.
pub fn ablate_overfit(cfg: &Config, values: &[usize], seeds: &[u64]) -> Result<AblationTable> {
    if values.is_empty() {
        return Err(Error::Invalid { what: "empty ablation values".into() });
    }
    let mut rows = Vec::with_capacity(values.len());
    for &iters in values {
        let mut c = cfg.clone();
        c.overfit.iters = iters;
        let report = run_protocol(&c, Protocol::BaseToNew, seeds)?;
        rows.push(AblationRow {
            value: iters,
            base_acc: report.mean_diffusion.base_acc,
            new_acc: report.mean_diffusion.new_acc,
            h: report.mean_diffusion.h,
            nfe: report.mean_diffusion.nfe,
        });
    }
    Ok(AblationTable { axis: "overfit_iters", rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.data.d_raw = 12;
        cfg.data.d = 16;
        cfg.data.base_classes = 3;
        cfg.data.new_classes = 3;
        cfg.data.shots = 4;
        cfg.data.eval_shots = 4;
        cfg.data.align_steps = 60;
        cfg.learner.epochs = 10;
        cfg.diffusion.layers = 2;
        cfg.diffusion.heads = 2;
        cfg.diffusion.epochs = 6;
        cfg.diffusion.batch = 6;
        cfg.sampler.nfe = 3;
        cfg
    }

    #[test]
    fn harmonic_mean_paper_rows() {
        assert!((harmonic_mean(80.47, 71.69) - 75.83).abs() < 0.01);
        assert!((harmonic_mean(84.26, 76.10) - 79.97).abs() < 0.01);
    }

    #[test]
    fn harmonic_mean_identities() {
        for &x in &[1.0, 33.3, 99.9] {
            assert!((harmonic_mean(x, x) - x).abs() < 1e-12);
        }
        assert_eq!(harmonic_mean(0.0, 50.0), 0.0);
        // always between min and max
        for i in 0..50u64 {
            use rand::Rng;
            let mut rng = substream(9000, i);
            let a: f64 = rng.gen_range(1.0..100.0);
            let b: f64 = rng.gen_range(1.0..100.0);
            let h = harmonic_mean(a, b);
            assert!(h >= a.min(b) - 1e-12 && h <= a.max(b) + 1e-12);
        }
    }

    #[test]
    fn dataset_counts_match_spec() {
        let mut cfg = Config::default();
        cfg.data.d_raw = 12;
        cfg.data.d = 16;
        cfg.data.align_steps = 5; // counting only; alignment not needed
        let s = Surrogate::new(12, 16, cfg.learner.m, cfg.data.encoder_seed);
        let ds = generate_dataset(&cfg, &s, "synth", 0, 1).unwrap();
        assert_eq!(ds.train.len(), 160);
        assert_eq!(ds.eval_base.len() + ds.eval_new.len(), 320);
        assert_no_leak(&ds).unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = tiny_cfg();
        let s = Surrogate::new(12, 16, cfg.learner.m, cfg.data.encoder_seed);
        let a = generate_dataset(&cfg, &s, "synth", 0, 5).unwrap();
        let b = generate_dataset(&cfg, &s, "synth", 0, 5).unwrap();
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.raw.data(), y.raw.data());
        }
        let c = generate_dataset(&cfg, &s, "synth", 0, 6).unwrap();
        assert_ne!(a.train[0].raw.data(), c.train[0].raw.data());
    }

    #[test]
    fn identity_domain_transform_preserves_samples() {
        let cfg = tiny_cfg();
        let s = Surrogate::new(12, 16, cfg.learner.m, cfg.data.encoder_seed);
        let ds = generate_dataset(&cfg, &s, "synth", 0, 7).unwrap();
        let same = apply_domain_shift(&ds, 0.0, 0.0, 99, "id").unwrap();
        for (a, b) in ds.eval_base.iter().zip(&same.eval_base) {
            for (x, y) in a.raw.data().iter().zip(b.raw.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let shifted = apply_domain_shift(&ds, 0.3, 0.2, 99, "sh").unwrap();
        assert_ne!(ds.eval_base[0].raw.data(), shifted.eval_base[0].raw.data());
    }

    #[test]
    fn bayes_oracle_is_strong_on_generated_data() {
        let cfg = tiny_cfg();
        let s = Surrogate::new(12, 16, cfg.learner.m, cfg.data.encoder_seed);
        let ds = generate_dataset(&cfg, &s, "synth", 0, 8).unwrap();
        let acc = bayes_accuracy(&ds);
        assert!(acc >= 85.0, "bayes {acc}");
    }
}
