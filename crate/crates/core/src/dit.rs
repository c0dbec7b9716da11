//! The diffusion transformer over prompt space: GPT-2-style pre-norm blocks
//! with learned positional embeddings over [time token, condition token,
//! M noisy prompt tokens]; the model predicts the clean prompts (x0
//! parameterization). Also the training losses: the x0 reconstruction term
//! and the combined objective (CE on diffused prompts + beta * L_diff).

use crate::clip::{prompt_ce_loss, ClassVocabulary, Surrogate};
use crate::error::{Error, Result};
use crate::learner::{LearnerKind, MetaNet, Sample};
use crate::nn::{self, BlockVars};
use crate::rng::substream;
use crate::sampler::DenoiseModel;
use crate::schedule::NoiseSchedule;
use crate::tensor::sgd::sgd_step;
use crate::tensor::tape::{Tape, VarId};
use crate::tensor::Tensor;
use rand::Rng;
use std::cell::RefCell;

#[derive(Debug, Clone, Copy)]
pub struct DitConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    /// Prompt token count M; the model sees M+2 tokens.
    pub m: usize,
    pub t_max: usize,
}

impl DitConfig {
    pub fn tokens(&self) -> usize {
        self.m + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.width % 2 != 0 {
            return Err(Error::Invalid { what: format!("width {} must be even", self.width) });
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Invalid {
                what: format!("{} heads do not divide width {}", self.heads, self.width),
            });
        }
        if self.layers == 0 || self.m == 0 || self.t_max == 0 {
            return Err(Error::Invalid { what: "layers, m, t_max must be positive".into() });
        }
        Ok(())
    }
}

/// Frequency encoding of the timestep: [sin(2^k pi t/T), cos(2^k pi t/T)]
/// for k = 0..d/2-1. Deterministic in t and distinct across t in 1..=T.
pub fn time_embedding(t: usize, t_max: usize, d: usize) -> Tensor {
    let frac = t as f64 / t_max as f64;
    let mut v = Vec::with_capacity(d);
    for k in 0..d / 2 {
        let arg = (2f64).powi(k as i32) * std::f64::consts::PI * frac;
        v.push(arg.sin());
        v.push(arg.cos());
    }
    Tensor::new(vec![d], v).unwrap()
}

struct DitBlock {
    ln1_g: Tensor,
    ln1_b: Tensor,
    qkv_w: Tensor,
    qkv_b: Tensor,
    proj_w: Tensor,
    proj_b: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    ff1_w: Tensor,
    ff1_b: Tensor,
    ff2_w: Tensor,
    ff2_b: Tensor,
}

impl DitBlock {
    fn new(d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let ff = 4 * d;
        let w = |shape: Vec<usize>, rng: &mut rand_chacha::ChaCha8Rng| {
            Tensor::randn(shape, 0.02, rng).with_requires_grad()
        };
        DitBlock {
            ln1_g: Tensor::new(vec![d], vec![1.0; d]).unwrap().with_requires_grad(),
            ln1_b: Tensor::zeros(vec![d]).with_requires_grad(),
            qkv_w: w(vec![d, 3 * d], rng),
            qkv_b: Tensor::zeros(vec![3 * d]).with_requires_grad(),
            proj_w: w(vec![d, d], rng),
            proj_b: Tensor::zeros(vec![d]).with_requires_grad(),
            ln2_g: Tensor::new(vec![d], vec![1.0; d]).unwrap().with_requires_grad(),
            ln2_b: Tensor::zeros(vec![d]).with_requires_grad(),
            ff1_w: w(vec![d, ff], rng),
            ff1_b: Tensor::zeros(vec![ff]).with_requires_grad(),
            ff2_w: w(vec![ff, d], rng),
            ff2_b: Tensor::zeros(vec![d]).with_requires_grad(),
        }
    }
}

pub struct DiffusionTransformer {
    cfg: DitConfig,
    pos: Tensor,
    time_w: Tensor,
    time_b: Tensor,
    in_w: Tensor,
    in_b: Tensor,
    blocks: Vec<DitBlock>,
    lnf_g: Tensor,
    lnf_b: Tensor,
    out_w: Tensor,
    out_b: Tensor,
}

pub struct DitVars {
    pos: VarId,
    time_w: VarId,
    time_b: VarId,
    in_w: VarId,
    in_b: VarId,
    blocks: Vec<BlockVars>,
    lnf_g: VarId,
    lnf_b: VarId,
    out_w: VarId,
    out_b: VarId,
    flat: Vec<VarId>,
}

impl DitVars {
    pub fn flat(&self) -> &[VarId] {
        &self.flat
    }
}

impl DiffusionTransformer {
    pub fn new(cfg: DitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let mut rng = substream(seed, 0xd17);
        let w = |shape: Vec<usize>, rng: &mut rand_chacha::ChaCha8Rng| {
            Tensor::randn(shape, 0.02, rng).with_requires_grad()
        };
        Ok(DiffusionTransformer {
            cfg,
            pos: w(vec![cfg.tokens(), d], &mut rng),
            time_w: w(vec![d, d], &mut rng),
            time_b: Tensor::zeros(vec![d]).with_requires_grad(),
            in_w: w(vec![d, d], &mut rng),
            in_b: Tensor::zeros(vec![d]).with_requires_grad(),
            blocks: (0..cfg.layers).map(|_| DitBlock::new(d, &mut rng)).collect(),
            lnf_g: Tensor::new(vec![d], vec![1.0; d]).unwrap().with_requires_grad(),
            lnf_b: Tensor::zeros(vec![d]).with_requires_grad(),
            out_w: w(vec![d, d], &mut rng),
            out_b: Tensor::zeros(vec![d]).with_requires_grad(),
        })
    }

    pub fn cfg(&self) -> &DitConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("dit/pos".into(), &self.pos),
            ("dit/time_w".into(), &self.time_w),
            ("dit/time_b".into(), &self.time_b),
            ("dit/in_w".into(), &self.in_w),
            ("dit/in_b".into(), &self.in_b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in [
                ("ln1_g", &b.ln1_g),
                ("ln1_b", &b.ln1_b),
                ("qkv_w", &b.qkv_w),
                ("qkv_b", &b.qkv_b),
                ("proj_w", &b.proj_w),
                ("proj_b", &b.proj_b),
                ("ln2_g", &b.ln2_g),
                ("ln2_b", &b.ln2_b),
                ("ff1_w", &b.ff1_w),
                ("ff1_b", &b.ff1_b),
                ("ff2_w", &b.ff2_w),
                ("ff2_b", &b.ff2_b),
            ] {
                out.push((format!("dit/b{i:02}/{n}"), t));
            }
        }
        out.push(("dit/lnf_g".into(), &self.lnf_g));
        out.push(("dit/lnf_b".into(), &self.lnf_b));
        out.push(("dit/out_w".into(), &self.out_w));
        out.push(("dit/out_b".into(), &self.out_b));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("dit/pos".into(), &mut self.pos),
            ("dit/time_w".into(), &mut self.time_w),
            ("dit/time_b".into(), &mut self.time_b),
            ("dit/in_w".into(), &mut self.in_w),
            ("dit/in_b".into(), &mut self.in_b),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (n, t) in [
                ("ln1_g", &mut b.ln1_g),
                ("ln1_b", &mut b.ln1_b),
                ("qkv_w", &mut b.qkv_w),
                ("qkv_b", &mut b.qkv_b),
                ("proj_w", &mut b.proj_w),
                ("proj_b", &mut b.proj_b),
                ("ln2_g", &mut b.ln2_g),
                ("ln2_b", &mut b.ln2_b),
                ("ff1_w", &mut b.ff1_w),
                ("ff1_b", &mut b.ff1_b),
                ("ff2_w", &mut b.ff2_w),
                ("ff2_b", &mut b.ff2_b),
            ] {
                out.push((format!("dit/b{i:02}/{n}"), t));
            }
        }
        out.push(("dit/lnf_g".into(), &mut self.lnf_g));
        out.push(("dit/lnf_b".into(), &mut self.lnf_b));
        out.push(("dit/out_w".into(), &mut self.out_w));
        out.push(("dit/out_b".into(), &mut self.out_b));
        out
    }

    pub fn to_named_tensors(&self) -> Vec<(String, Tensor)> {
        self.named_params().into_iter().map(|(n, t)| (n, t.detached())).collect()
    }

    pub fn load_named_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        for (name, p) in self.named_params_mut() {
            let found = tensors.iter().find(|(n, _)| *n == name).ok_or_else(|| Error::Checkpoint {
                detail: format!("missing tensor {name:?}"),
                offset: None,
            })?;
            if found.1.shape() != p.shape() {
                return Err(Error::Checkpoint {
                    detail: format!("{name}: shape {:?} vs {:?}", found.1.shape(), p.shape()),
                    offset: None,
                });
            }
            *p = found.1.detached().with_requires_grad();
        }
        Ok(())
    }

    /// Bind all parameters onto a tape, trainable or frozen, in
    /// `named_params` order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DitVars {
        let mut flat = Vec::new();
        let bindv = |t: &Tensor, tape: &mut Tape, flat: &mut Vec<VarId>| {
            let id = if trainable { tape.param(t) } else { tape.constant(t.clone()) };
            flat.push(id);
            id
        };
        let pos = bindv(&self.pos, tape, &mut flat);
        let time_w = bindv(&self.time_w, tape, &mut flat);
        let time_b = bindv(&self.time_b, tape, &mut flat);
        let in_w = bindv(&self.in_w, tape, &mut flat);
        let in_b = bindv(&self.in_b, tape, &mut flat);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            blocks.push(BlockVars {
                ln1_g: bindv(&b.ln1_g, tape, &mut flat),
                ln1_b: bindv(&b.ln1_b, tape, &mut flat),
                qkv_w: bindv(&b.qkv_w, tape, &mut flat),
                qkv_b: bindv(&b.qkv_b, tape, &mut flat),
                proj_w: bindv(&b.proj_w, tape, &mut flat),
                proj_b: bindv(&b.proj_b, tape, &mut flat),
                ln2_g: bindv(&b.ln2_g, tape, &mut flat),
                ln2_b: bindv(&b.ln2_b, tape, &mut flat),
                ff1_w: bindv(&b.ff1_w, tape, &mut flat),
                ff1_b: bindv(&b.ff1_b, tape, &mut flat),
                ff2_w: bindv(&b.ff2_w, tape, &mut flat),
                ff2_b: bindv(&b.ff2_b, tape, &mut flat),
            });
        }
        let lnf_g = bindv(&self.lnf_g, tape, &mut flat);
        let lnf_b = bindv(&self.lnf_b, tape, &mut flat);
        let out_w = bindv(&self.out_w, tape, &mut flat);
        let out_b = bindv(&self.out_b, tape, &mut flat);
        DitVars { pos, time_w, time_b, in_w, in_b, blocks, lnf_g, lnf_b, out_w, out_b, flat }
    }

    /// Pull gradients off the tape into the parameter buffers, in order.
    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &DitVars) -> Result<()> {
        let grads: Vec<Option<Vec<f64>>> =
            vars.flat.iter().map(|&id| tape.grad(id).map(|g| g.to_vec())).collect();
        for ((_, p), g) in self.named_params_mut().into_iter().zip(grads) {
            if let Some(g) = g {
                p.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    /// Denoiser forward: predicted clean prompts, same M x d shape as the
    /// noisy input.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &DitVars,
        noisy: VarId,
        pi: VarId,
        t: usize,
    ) -> Result<VarId> {
        let (m, d) = (self.cfg.m, self.cfg.width);
        if t == 0 || t > self.cfg.t_max {
            return Err(Error::Invalid { what: format!("timestep {t} outside 1..={}", self.cfg.t_max) });
        }
        if tape.value(noisy).shape() != [m, d] {
            return Err(Error::Shape {
                op: "dit_forward",
                detail: format!("noisy {:?}, expected [{m}, {d}]", tape.value(noisy).shape()),
            });
        }
        if tape.value(pi).shape() != [d] {
            return Err(Error::Shape {
                op: "dit_forward",
                detail: format!("pi {:?}, expected [{d}]", tape.value(pi).shape()),
            });
        }
        let freq = tape.constant(time_embedding(t, self.cfg.t_max, d));
        let freq_row = tape.reshape(freq, vec![1, d])?;
        let time_tok = nn::linear(tape, freq_row, vars.time_w, vars.time_b)?;

        let pi_row = tape.reshape(pi, vec![1, d])?;
        let base = tape.concat(&[pi_row, noisy], 0)?;
        let proj = nn::linear(tape, base, vars.in_w, vars.in_b)?;

        let tokens = tape.concat(&[time_tok, proj], 0)?;
        let mut x = tape.add(tokens, vars.pos)?;
        for b in &vars.blocks {
            x = nn::block(tape, x, b, self.cfg.heads)?;
        }
        let h = tape.layer_norm(x)?;
        let h = tape.mul_rows(h, vars.lnf_g)?;
        let h = tape.add_rows(h, vars.lnf_b)?;
        let out_tokens = tape.slice(h, 0, 2, m)?;
        nn::linear(tape, out_tokens, vars.out_w, vars.out_b)
    }
}

/// Frozen-model denoiser with a reusable tape; parameters are bound once and
/// the op suffix is truncated after every call.
pub struct DitDenoiser<'m> {
    model: &'m DiffusionTransformer,
    state: RefCell<(Tape, DitVars, usize)>,
}

impl<'m> DitDenoiser<'m> {
    pub fn new(model: &'m DiffusionTransformer) -> Self {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let mark = tape.mark();
        DitDenoiser { model, state: RefCell::new((tape, vars, mark)) }
    }
}

impl DenoiseModel for DitDenoiser<'_> {
    fn predict_x0(&self, noisy: &Tensor, pi: &Tensor, t: usize) -> Result<Tensor> {
        let mut guard = self.state.borrow_mut();
        let (tape, vars, mark) = &mut *guard;
        tape.truncate(*mark);
        let n = tape.constant(noisy.clone());
        let p = tape.constant(pi.clone());
        let out = self.model.forward(tape, vars, n, p, t)?;
        Ok(tape.value(out).detached())
    }
}

// ---------------------------------------------------------------------------
// Losses

/// x0-prediction reconstruction term: squared L2 over all M x d entries
/// (sum convention) between V* and the model output on the noised input.
/// Returns (loss, prediction).
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss(
    tape: &mut Tape,
    model: &DiffusionTransformer,
    vars: &DitVars,
    v_star: &Tensor,
    pi: VarId,
    t: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<(VarId, VarId)> {
    let noisy_t = schedule.forward_noise(v_star, t, eps)?;
    let noisy = tape.constant(noisy_t);
    let pred = model.forward(tape, vars, noisy, pi, t)?;
    let vs = tape.constant(v_star.detached());
    let diff = tape.sub(vs, pred)?;
    let sq = tape.mul_elem(diff, diff)?;
    let loss = tape.sum(sq)?;
    Ok((loss, pred))
}

pub struct LossParts {
    pub total: VarId,
    pub ce: VarId,
    pub l_diff: VarId,
}

/// Combined objective for one sample: CE of the classifier fed with the
/// one-pass diffused prompts, plus beta times the reconstruction term.
#[allow(clippy::too_many_arguments)]
pub fn final_loss_sample(
    tape: &mut Tape,
    model: &DiffusionTransformer,
    vars: &DitVars,
    meta: (&MetaNet, &crate::learner::MetaNetVars),
    surrogate: &Surrogate,
    vocab: &ClassVocabulary,
    kind: LearnerKind,
    sample: &Sample,
    img_emb: &Tensor,
    v_star: &Tensor,
    t: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
    beta: f64,
) -> Result<LossParts> {
    if beta < 0.0 {
        return Err(Error::Invalid { what: format!("loss weight beta {beta}") });
    }
    let emb = tape.constant(img_emb.clone());
    let pi = meta.0.forward(tape, meta.1, emb)?;
    let (l_diff, pred) = diffusion_loss(tape, model, vars, v_star, pi, t, eps, schedule)?;
    let probs = match kind {
        LearnerKind::Visual => {
            let raw = tape.constant(sample.raw.clone());
            surrogate.classify_visual(tape, raw, pred, vocab)?
        }
        // the diffused prompt is applied directly; the condition already
        // entered through pi
        _ => {
            let emb2 = tape.constant(img_emb.clone());
            surrogate.classify(tape, emb2, pred, vocab)?
        }
    };
    let ce = prompt_ce_loss(tape, probs, sample.class_index)?;
    let weighted = tape.mul_scalar(l_diff, beta)?;
    let total = tape.add(ce, weighted)?;
    Ok(LossParts { total, ce, l_diff })
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy)]
pub struct DiffTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct CurvePoint {
    pub step: usize,
    pub ce: f64,
    pub l_diff: f64,
    pub total: f64,
}

pub struct DiffTrainReport {
    pub curve: Vec<CurvePoint>,
}

/// Train the diffusion transformer (and the Meta-Net) on overfitted prompt
/// targets with the combined objective. Encoders and the V* records stay
/// untouched.
#[allow(clippy::too_many_arguments)]
pub fn train_prompt_diffusion(
    model: &mut DiffusionTransformer,
    meta_net: &mut MetaNet,
    surrogate: &Surrogate,
    vocab: &ClassVocabulary,
    kind: LearnerKind,
    dataset: &[Sample],
    records: &[crate::overfit::OverfitRecord],
    schedule: &NoiseSchedule,
    cfg: DiffTrainConfig,
) -> Result<DiffTrainReport> {
    if dataset.is_empty() {
        return Err(Error::Invalid { what: "empty training dataset".into() });
    }
    if cfg.batch == 0 {
        return Err(Error::Invalid { what: "batch size zero".into() });
    }
    // every sample must have its overfitted target
    let mut v_stars: Vec<&Tensor> = Vec::with_capacity(dataset.len());
    for s in dataset {
        let rec = records.iter().find(|r| r.sample_id == s.id).ok_or_else(|| Error::Invalid {
            what: format!("no overfit record for sample {}", s.id),
        })?;
        v_stars.push(&rec.v_star);
    }
    let img_embs: Vec<Tensor> =
        dataset.iter().map(|s| surrogate.image.embed(&s.raw)).collect::<Result<Vec<_>>>()?;

    let t_max = schedule.t_max();
    let m = model.cfg.m;
    let d = model.cfg.width;
    let mut draw = substream(cfg.seed, 0xd1ff);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut curve = Vec::new();
    let mut initial_total: Option<f64> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut substream(cfg.seed, 0x5431 + epoch as u64));
        for chunk in order.chunks(cfg.batch) {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let mvars = meta_net.bind(&mut tape, true);
            let mut totals = Vec::with_capacity(chunk.len());
            let (mut ce_sum, mut ld_sum) = (0.0, 0.0);
            for &i in chunk {
                let t = draw.gen_range(1..=t_max);
                let eps = Tensor::randn(vec![m, d], 1.0, &mut draw);
                let parts = final_loss_sample(
                    &mut tape,
                    model,
                    &vars,
                    (meta_net, &mvars),
                    surrogate,
                    vocab,
                    kind,
                    &dataset[i],
                    &img_embs[i],
                    v_stars[i],
                    t,
                    &eps,
                    schedule,
                    cfg.beta,
                )?;
                ce_sum += tape.value(parts.ce).item();
                ld_sum += tape.value(parts.l_diff).item();
                totals.push(parts.total);
            }
            let cat = tape.concat(&totals, 0)?;
            let total = tape.sum(cat)?;
            let mean = tape.mul_scalar(total, 1.0 / chunk.len() as f64)?;
            let mean_val = tape.value(mean).item();

            let init = *initial_total.get_or_insert(mean_val);
            if !mean_val.is_finite() || (init > 0.0 && mean_val > 1e3 * init) {
                return Err(Error::Training {
                    detail: format!(
                        "diffusion training diverged at step {step}: loss {mean_val:.3e} (initial {init:.3e})"
                    ),
                });
            }

            tape.backward(mean)?;
            model.accumulate_grads(&tape, &vars)?;
            {
                let grads: Vec<Option<Vec<f64>>> = [mvars.w1, mvars.b1, mvars.w2, mvars.b2]
                    .iter()
                    .map(|&v| tape.grad(v).map(|g| g.to_vec()))
                    .collect();
                for ((_, p), g) in meta_net.named_params_mut().into_iter().zip(grads) {
                    if let Some(g) = g {
                        p.accumulate_grad(&g)?;
                    }
                }
            }
            let mut params: Vec<(String, &mut Tensor)> = model.named_params_mut();
            params.extend(meta_net.named_params_mut().into_iter().map(|(n, t)| (n.to_string(), t)));
            if cfg.grad_clip > 0.0 {
                let total: f64 = params
                    .iter()
                    .map(|(_, p)| p.grad().map(|g| g.iter().map(|v| v * v).sum::<f64>()).unwrap_or(0.0))
                    .sum();
                let norm = total.sqrt();
                if std::env::var("DIFF_GRAD_DEBUG").is_ok() && step % 25 == 0 {
                    eprintln!("step {step}: grad norm {norm:.1}");
                }
                if norm > cfg.grad_clip {
                    let scale = cfg.grad_clip / norm;
                    for (_, p) in params.iter_mut() {
                        p.scale_grad(scale);
                    }
                }
            }
            sgd_step(params.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)), cfg.lr)?;

            curve.push(CurvePoint {
                step,
                ce: ce_sum / chunk.len() as f64,
                l_diff: ld_sum / chunk.len() as f64,
                total: mean_val,
            });
            step += 1;
        }
    }
    Ok(DiffTrainReport { curve })
}

fn shuffle(order: &mut [usize], rng: &mut rand_chacha::ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}
