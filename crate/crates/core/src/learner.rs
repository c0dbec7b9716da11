//! Baseline prompt learners the diffusion plugin attaches to: static
//! textual context vectors, conditional context vectors shifted by a
//! Meta-Net token, and visual prompt tokens. All of them optimize the
//! classifier's cross-entropy with plain SGD while the encoders stay
//! frozen.

use crate::clip::{prompt_ce_loss, ClassVocabulary, Surrogate};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::sgd::sgd_step;
use crate::tensor::tape::{Tape, VarId};
use crate::tensor::Tensor;

pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Textual,
    Visual,
}

/// M learnable context vectors in embedding space.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub values: Tensor,
    pub modality: Modality,
}

impl PromptSet {
    pub fn m(&self) -> usize {
        self.values.rows()
    }

    pub fn d(&self) -> usize {
        self.values.cols()
    }
}

/// Prompt initialization: normal(0, 0.02), deterministic per seed.
pub fn init_prompts(m: usize, d: usize, seed: u64) -> Result<PromptSet> {
    if m == 0 || d == 0 {
        return Err(Error::Invalid { what: format!("prompt dims ({m}, {d})") });
    }
    let values = Tensor::randn(vec![m, d], PROMPT_INIT_STD, &mut substream(seed, 0x9a0)).with_requires_grad();
    Ok(PromptSet { values, modality: Modality::Textual })
}

/// Lightweight conditioning network: image embedding (d) -> condition token
/// pi (d), hidden width d/4.
#[derive(Debug, Clone)]
pub struct MetaNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub struct MetaNetVars {
    pub w1: VarId,
    pub b1: VarId,
    pub w2: VarId,
    pub b2: VarId,
}

impl MetaNet {
    pub fn new(d: usize, seed: u64) -> Self {
        let h = (d / 4).max(1);
        let mut rng = substream(seed, 0x3e7a);
        MetaNet {
            w1: Tensor::randn(vec![d, h], 1.0 / (d as f64).sqrt(), &mut rng).with_requires_grad(),
            b1: Tensor::zeros(vec![h]).with_requires_grad(),
            w2: Tensor::randn(vec![h, d], 1.0 / (h as f64).sqrt(), &mut rng).with_requires_grad(),
            b2: Tensor::zeros(vec![d]).with_requires_grad(),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MetaNetVars {
        let mut bindv = |t: &Tensor| if trainable { tape.param(t) } else { tape.constant(t.clone()) };
        MetaNetVars { w1: bindv(&self.w1), b1: bindv(&self.b1), w2: bindv(&self.w2), b2: bindv(&self.b2) }
    }

    /// pi = W2 gelu(W1 x + b1) + b2 for a rank-1 image embedding.
    pub fn forward(&self, tape: &mut Tape, vars: &MetaNetVars, img_emb: VarId) -> Result<VarId> {
        let d = self.w1.rows();
        let x = tape.reshape(img_emb, vec![1, d])?;
        let h = tape.matmul(x, vars.w1)?;
        let h = tape.add_rows(h, vars.b1)?;
        let h = tape.gelu(h)?;
        let o = tape.matmul(h, vars.w2)?;
        let o = tape.add_rows(o, vars.b2)?;
        tape.reshape(o, vec![self.w2.cols()])
    }

    /// Plain forward outside any training graph.
    pub fn infer(&self, img_emb: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let e = tape.constant(img_emb.clone());
        let pi = self.forward(&mut tape, &vars, e)?;
        Ok(tape.value(pi).detached())
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("meta/w1", &self.w1), ("meta/b1", &self.b1), ("meta/w2", &self.w2), ("meta/b2", &self.b2)]
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("meta/w1", &mut self.w1),
            ("meta/b1", &mut self.b1),
            ("meta/w2", &mut self.w2),
            ("meta/b2", &mut self.b2),
        ]
    }
}

/// Shift every context vector by the condition token: v_m + pi.
pub fn condition_prompts(tape: &mut Tape, prompts: VarId, pi: VarId) -> Result<VarId> {
    tape.add_rows(prompts, pi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LearnerKind {
    Static,
    Conditional,
    Visual,
}

impl LearnerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LearnerKind::Static => "static",
            LearnerKind::Conditional => "conditional",
            LearnerKind::Visual => "visual",
        }
    }
}

pub struct LearnerState {
    pub kind: LearnerKind,
    pub prompts: PromptSet,
    pub meta_net: Option<MetaNet>,
}

impl LearnerState {
    pub fn new(kind: LearnerKind, m: usize, d: usize, seed: u64) -> Result<Self> {
        let mut prompts = init_prompts(m, d, seed)?;
        if kind == LearnerKind::Visual {
            prompts.modality = Modality::Visual;
        }
        let meta_net = match kind {
            LearnerKind::Conditional => Some(MetaNet::new(d, seed.wrapping_add(1))),
            _ => None,
        };
        Ok(LearnerState { kind, prompts, meta_net })
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.meta_net.is_some()) {
            (LearnerKind::Conditional, false) => {
                Err(Error::Invalid { what: "conditional learner requires a meta net".into() })
            }
            (LearnerKind::Static, true) | (LearnerKind::Visual, true) => {
                Err(Error::Invalid { what: "only the conditional learner carries a meta net".into() })
            }
            _ => Ok(()),
        }
    }
}

/// One labeled sample: raw feature vector plus its index into the training
/// vocabulary.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: u64,
    pub raw: Tensor,
    pub class_index: usize,
}

/// Per-sample CE graph for any learner kind. `prompts` is the learner's
/// prompt matrix already on the tape; for conditional learners the Meta-Net
/// shift is applied inside.
#[allow(clippy::too_many_arguments)]
pub fn sample_ce(
    tape: &mut Tape,
    surrogate: &Surrogate,
    vocab: &ClassVocabulary,
    kind: LearnerKind,
    prompts: VarId,
    meta: Option<(&MetaNet, &MetaNetVars)>,
    sample: &Sample,
    img_emb: Option<&Tensor>,
) -> Result<VarId> {
    match kind {
        LearnerKind::Static => {
            let emb = img_emb.ok_or(Error::Invalid { what: "missing image embedding".into() })?;
            let e = tape.constant(emb.clone());
            let probs = surrogate.classify(tape, e, prompts, vocab)?;
            prompt_ce_loss(tape, probs, sample.class_index)
        }
        LearnerKind::Conditional => {
            let emb = img_emb.ok_or(Error::Invalid { what: "missing image embedding".into() })?;
            let (mn, mv) = meta.ok_or(Error::Invalid { what: "conditional learner requires a meta net".into() })?;
            let e = tape.constant(emb.clone());
            let pi = mn.forward(tape, mv, e)?;
            let shifted = condition_prompts(tape, prompts, pi)?;
            let e2 = tape.constant(emb.clone());
            let probs = surrogate.classify(tape, e2, shifted, vocab)?;
            prompt_ce_loss(tape, probs, sample.class_index)
        }
        LearnerKind::Visual => {
            let raw = tape.constant(sample.raw.clone());
            let probs = surrogate.classify_visual(tape, raw, prompts, vocab)?;
            prompt_ce_loss(tape, probs, sample.class_index)
        }
    }
}

pub struct TrainReport {
    /// Mean CE per epoch.
    pub loss_curve: Vec<f64>,
}

/// SGD on the prompt CE over base-class samples. Encoders are untouched;
/// only prompts (and the Meta-Net, if present) receive updates.
pub fn train_baseline(
    learner: &mut LearnerState,
    surrogate: &Surrogate,
    vocab: &ClassVocabulary,
    dataset: &[Sample],
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<TrainReport> {
    learner.validate()?;
    if dataset.is_empty() {
        return Err(Error::Invalid { what: "empty training dataset".into() });
    }
    if batch == 0 {
        return Err(Error::Invalid { what: "batch size zero".into() });
    }

    // frozen image path: embeddings never change for textual learners
    let img_embs: Option<Vec<Tensor>> = match learner.kind {
        LearnerKind::Visual => None,
        _ => Some(
            dataset.iter().map(|s| surrogate.image.embed(&s.raw)).collect::<Result<Vec<_>>>()?,
        ),
    };

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut curve = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        shuffle(&mut order, &mut substream(seed, 0xe90c + epoch as u64));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let mut tape = Tape::new();
            let pvar = tape.param(&learner.prompts.values);
            let mvars = learner.meta_net.as_ref().map(|m| m.bind(&mut tape, true));

            // static prompts share one set of class features per batch
            let shared_feats = match learner.kind {
                LearnerKind::Static => Some(surrogate.text_features(&mut tape, pvar, vocab)?),
                _ => None,
            };

            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &dataset[i];
                let ce = match &shared_feats {
                    Some(feats) => {
                        let emb = tape.constant(img_embs.as_ref().unwrap()[i].clone());
                        let probs = surrogate.probs_from_features(&mut tape, feats, emb, vocab)?;
                        prompt_ce_loss(&mut tape, probs, s.class_index)?
                    }
                    None => sample_ce(
                        &mut tape,
                        surrogate,
                        vocab,
                        learner.kind,
                        pvar,
                        learner.meta_net.as_ref().map(|m| (m, mvars.as_ref().unwrap())),
                        s,
                        img_embs.as_ref().map(|e| &e[i]),
                    )?,
                };
                losses.push(ce);
            }
            let total = tape.concat(&losses, 0)?;
            let total = tape.sum(total)?;
            let mean = tape.mul_scalar(total, 1.0 / chunk.len() as f64)?;
            let loss_val = tape.value(mean).item();
            if !loss_val.is_finite() {
                return Err(Error::Training {
                    detail: format!("non-finite CE at epoch {epoch} (batch of {})", chunk.len()),
                });
            }
            epoch_loss += loss_val * chunk.len() as f64;

            tape.backward(mean)?;
            if let Some(g) = tape.grad(pvar) {
                learner.prompts.values.accumulate_grad(g)?;
            }
            if let (Some(mn), Some(mv)) = (learner.meta_net.as_mut(), mvars.as_ref()) {
                let grads: Vec<Vec<f64>> = [mv.w1, mv.b1, mv.w2, mv.b2]
                    .iter()
                    .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default())
                    .collect();
                for ((_, p), g) in mn.named_params_mut().into_iter().zip(&grads) {
                    if !g.is_empty() {
                        p.accumulate_grad(g)?;
                    }
                }
            }

            let mut params: Vec<(&str, &mut Tensor)> = vec![("prompts", &mut learner.prompts.values)];
            if let Some(mn) = learner.meta_net.as_mut() {
                params.extend(mn.named_params_mut());
            }
            sgd_step(params, lr)?;
        }
        curve.push(epoch_loss / dataset.len() as f64);
    }
    Ok(TrainReport { loss_curve: curve })
}

fn shuffle(order: &mut [usize], rng: &mut rand_chacha::ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Argmax classification accuracy (percent) of a learner on labeled samples.
pub fn eval_baseline(
    learner: &LearnerState,
    surrogate: &Surrogate,
    vocab: &ClassVocabulary,
    samples: &[Sample],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Invalid { what: "empty evaluation set".into() });
    }
    let mut correct = 0usize;
    // static text features can be shared across samples
    let static_feats: Option<(Tape, Vec<VarId>)> = match learner.kind {
        LearnerKind::Static => {
            let mut tape = Tape::new();
            let p = tape.constant(learner.prompts.values.clone());
            let feats = surrogate.text_features(&mut tape, p, vocab)?;
            Some((tape, feats))
        }
        _ => None,
    };
    for s in samples {
        let probs = match learner.kind {
            LearnerKind::Static => {
                let (tape0, feats) = static_feats.as_ref().unwrap();
                let feat_vals: Vec<Tensor> =
                    feats.iter().map(|&f| tape0.value(f).detached()).collect();
                let emb = surrogate.image.embed(&s.raw)?;
                let mut tape = Tape::new();
                let e = tape.constant(emb);
                let fv: Vec<VarId> = feat_vals.into_iter().map(|t| tape.constant(t)).collect();
                let pr = surrogate.probs_from_features(&mut tape, &fv, e, vocab)?;
                tape.value(pr).detached()
            }
            LearnerKind::Conditional => {
                let emb = surrogate.image.embed(&s.raw)?;
                let mn = learner.meta_net.as_ref().unwrap();
                let mut tape = Tape::new();
                let mv = mn.bind(&mut tape, false);
                let e = tape.constant(emb);
                let pi = mn.forward(&mut tape, &mv, e)?;
                let p = tape.constant(learner.prompts.values.clone());
                let shifted = condition_prompts(&mut tape, p, pi)?;
                let pr = surrogate.classify(&mut tape, e, shifted, vocab)?;
                tape.value(pr).detached()
            }
            LearnerKind::Visual => {
                let mut tape = Tape::new();
                let raw = tape.constant(s.raw.clone());
                let p = tape.constant(learner.prompts.values.clone());
                let pr = surrogate.classify_visual(&mut tape, raw, p, vocab)?;
                tape.value(pr).detached()
            }
        };
        let pred = probs
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
    Ok(100.0 * correct as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::DEFAULT_TEMPERATURE;
    use crate::rng::seeded;

    const D_RAW: usize = 12;
    const D: usize = 16;
    const M: usize = 4;

    fn harness() -> (Surrogate, ClassVocabulary) {
        let s = Surrogate::new(D_RAW, D, M, 99);
        let ids: Vec<usize> = (0..3).collect();
        let v = ClassVocabulary::from_dictionary(5, &ids, D, DEFAULT_TEMPERATURE).unwrap();
        (s, v)
    }

    #[test]
    fn init_prompts_is_deterministic_and_shaped() {
        let a = init_prompts(4, 64, 17).unwrap();
        let b = init_prompts(4, 64, 17).unwrap();
        assert_eq!(a.values.data(), b.values.data());
        assert_eq!(a.values.shape(), &[4, 64]);
        assert_ne!(a.values.data(), init_prompts(4, 64, 18).unwrap().values.data());
    }

    #[test]
    fn init_prompts_empirical_std_matches() {
        // 10^5 entries: sample std within 5% of 0.02
        let p = init_prompts(1000, 100, 3).unwrap();
        let n = p.values.numel() as f64;
        let mean: f64 = p.values.data().iter().sum::<f64>() / n;
        let var: f64 = p.values.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        assert!((std - PROMPT_INIT_STD).abs() / PROMPT_INIT_STD < 0.05, "std {std}");
    }

    #[test]
    fn zero_dims_are_rejected() {
        assert!(init_prompts(0, 8, 1).is_err());
        assert!(init_prompts(4, 0, 1).is_err());
    }

    #[test]
    fn conditioning_with_zero_pi_is_identity() {
        let p = init_prompts(M, D, 7).unwrap();
        let mut tape = Tape::new();
        let pv = tape.constant(p.values.clone());
        let pi = tape.constant(Tensor::zeros(vec![D]));
        let out = condition_prompts(&mut tape, pv, pi).unwrap();
        assert_eq!(tape.value(out).data(), p.values.data());
    }

    #[test]
    fn conditioning_is_additive_per_token() {
        let p = init_prompts(M, D, 8).unwrap();
        let pi = Tensor::randn(vec![D], 0.5, &mut seeded(9));
        let run = |scale: f64| {
            let mut tape = Tape::new();
            let pv = tape.constant(p.values.clone());
            let scaled =
                Tensor::new(vec![D], pi.data().iter().map(|v| v * scale).collect()).unwrap();
            let pis = tape.constant(scaled);
            let out = condition_prompts(&mut tape, pv, pis).unwrap();
            tape.value(out).detached()
        };
        let one = run(1.0);
        let two = run(2.0);
        for m in 0..M {
            for j in 0..D {
                let idx = m * D + j;
                let expect = p.values.data()[idx] + 2.0 * pi.data()[j];
                assert!((two.data()[idx] - expect).abs() < 1e-15);
                assert!((one.data()[idx] - (p.values.data()[idx] + pi.data()[j])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn meta_net_receives_gradients() {
        let (s, v) = harness();
        let mut learner = LearnerState::new(LearnerKind::Conditional, M, D, 21).unwrap();
        let sample = Sample {
            id: 0,
            raw: Tensor::randn(vec![D_RAW], 1.0, &mut seeded(22)),
            class_index: 1,
        };
        let emb = s.image.embed(&sample.raw).unwrap();
        let mut tape = Tape::new();
        let pv = tape.param(&learner.prompts.values);
        let mn = learner.meta_net.as_ref().unwrap();
        let mv = mn.bind(&mut tape, true);
        let ce = sample_ce(&mut tape, &s, &v, LearnerKind::Conditional, pv, Some((mn, &mv)), &sample, Some(&emb))
            .unwrap();
        tape.backward(ce).unwrap();
        let g = tape.grad(mv.w1).expect("meta net w1 grad");
        assert!(g.iter().any(|&x| x != 0.0));
        learner.meta_net.as_mut().unwrap().w1.accumulate_grad(g).unwrap();
    }

    #[test]
    fn learner_state_invariants() {
        let mut st = LearnerState::new(LearnerKind::Static, M, D, 1).unwrap();
        st.validate().unwrap();
        st.meta_net = Some(MetaNet::new(D, 2));
        assert!(st.validate().is_err());
        let mut cond = LearnerState::new(LearnerKind::Conditional, M, D, 3).unwrap();
        cond.validate().unwrap();
        cond.meta_net = None;
        assert!(cond.validate().is_err());
    }

    #[test]
    fn single_class_training_drives_ce_to_zero() {
        let s = Surrogate::new(D_RAW, D, M, 99);
        let v = ClassVocabulary::from_dictionary(5, &[0], D, DEFAULT_TEMPERATURE).unwrap();
        let mut learner = LearnerState::new(LearnerKind::Static, M, D, 30).unwrap();
        let data: Vec<Sample> = (0..4)
            .map(|i| Sample {
                id: i,
                raw: Tensor::randn(vec![D_RAW], 1.0, &mut seeded(31 + i)),
                class_index: 0,
            })
            .collect();
        let report = train_baseline(&mut learner, &s, &v, &data, 50, 0.0035, 4, 77).unwrap();
        let last = *report.loss_curve.last().unwrap();
        assert!(last < 1e-6, "single-class CE should collapse, got {last}");
    }

    #[test]
    fn encoders_are_bit_identical_after_training() {
        let (s, v) = harness();
        let before = s.checksum();
        let mut learner = LearnerState::new(LearnerKind::Conditional, M, D, 41).unwrap();
        let data: Vec<Sample> = (0..6)
            .map(|i| Sample {
                id: i,
                raw: Tensor::randn(vec![D_RAW], 1.0, &mut seeded(42 + i)),
                class_index: (i % 3) as usize,
            })
            .collect();
        train_baseline(&mut learner, &s, &v, &data, 3, 0.01, 4, 5).unwrap();
        assert_eq!(before, s.checksum());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let (s, v) = harness();
        let mut learner = LearnerState::new(LearnerKind::Static, M, D, 50).unwrap();
        assert!(train_baseline(&mut learner, &s, &v, &[], 1, 0.1, 4, 1).is_err());
    }

    #[test]
    fn visual_and_textual_prompts_share_shape() {
        let t = LearnerState::new(LearnerKind::Static, M, D, 60).unwrap();
        let v = LearnerState::new(LearnerKind::Visual, M, D, 60).unwrap();
        assert_eq!(t.prompts.values.shape(), v.prompts.values.shape());
        assert_eq!(v.prompts.modality, Modality::Visual);
    }

    #[test]
    fn visual_learner_trains_end_to_end() {
        let s = Surrogate::new(D_RAW, D, M, 99);
        let v = ClassVocabulary::from_dictionary(5, &[0, 1], D, DEFAULT_TEMPERATURE).unwrap();
        let mut learner = LearnerState::new(LearnerKind::Visual, M, D, 70).unwrap();
        let data: Vec<Sample> = (0..8)
            .map(|i| Sample {
                id: i,
                raw: Tensor::randn(vec![D_RAW], 1.0, &mut seeded(71 + (i % 2))),
                class_index: (i % 2) as usize,
            })
            .collect();
        let report = train_baseline(&mut learner, &s, &v, &data, 20, 0.05, 4, 7).unwrap();
        assert!(report.loss_curve.last().unwrap() < report.loss_curve.first().unwrap());
    }
}
