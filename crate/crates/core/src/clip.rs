//! Frozen stand-ins for a dual-encoder classifier: a seeded 2-layer
//! perceptron image encoder, a seeded 2-layer transformer text encoder, and
//! the cosine-similarity softmax classifier over class embeddings.
//!
//! The encoders are never trained; gradients still flow through them into
//! prompts (and the Meta-Net) during prompt learning.

use crate::error::{Error, Result};
use crate::nn::{self, BlockVars};
use crate::rng::substream;
use crate::tensor::tape::{Tape, VarId};
use crate::tensor::{params_checksum, Tensor};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const CE_PROB_EPS: f64 = 1e-12;

// ---------------------------------------------------------------------------

pub struct FrozenImageEncoder {
    d_raw: usize,
    d: usize,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

pub struct ImageEncVars {
    w1: VarId,
    b1: VarId,
    w2: VarId,
    b2: VarId,
}

impl FrozenImageEncoder {
    pub fn new(d_raw: usize, d: usize, seed: u64) -> Self {
        let mut rng = substream(seed, 0xa11ce);
        FrozenImageEncoder {
            d_raw,
            d,
            w1: Tensor::randn(vec![d_raw, d], 1.0 / (d_raw as f64).sqrt(), &mut rng),
            b1: Tensor::randn(vec![d], 0.02, &mut rng),
            w2: Tensor::randn(vec![d, d], 1.0 / (d as f64).sqrt(), &mut rng),
            b2: Tensor::randn(vec![d], 0.02, &mut rng),
        }
    }

    pub fn d_raw(&self) -> usize {
        self.d_raw
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn bind(&self, tape: &mut Tape) -> ImageEncVars {
        ImageEncVars {
            w1: tape.constant(self.w1.clone()),
            b1: tape.constant(self.b1.clone()),
            w2: tape.constant(self.w2.clone()),
            b2: tape.constant(self.b2.clone()),
        }
    }

    /// Encode one raw feature vector (rank-1, d_raw). Visual prompt tokens,
    /// when given (M x d), join the hidden token before the second layer and
    /// are mean-pooled with it. Output is L2-normalized, rank-1 d.
    pub fn encode(
        &self,
        tape: &mut Tape,
        vars: &ImageEncVars,
        raw: VarId,
        visual_prompts: Option<VarId>,
    ) -> Result<VarId> {
        if tape.value(raw).shape() != [self.d_raw] {
            return Err(Error::Shape {
                op: "image_encode",
                detail: format!("raw {:?}, expected [{}]", tape.value(raw).shape(), self.d_raw),
            });
        }
        let x = tape.reshape(raw, vec![1, self.d_raw])?;
        let h = nn::linear(tape, x, vars.w1, vars.b1)?;
        let t0 = tape.gelu(h)?;
        let tokens = match visual_prompts {
            Some(vp) => {
                if tape.value(vp).cols() != self.d {
                    return Err(Error::Shape {
                        op: "image_encode",
                        detail: format!("visual prompts {:?}", tape.value(vp).shape()),
                    });
                }
                tape.concat(&[vp, t0], 0)?
            }
            None => t0,
        };
        let h2 = nn::linear(tape, tokens, vars.w2, vars.b2)?;
        let h2 = tape.gelu(h2)?;
        let pooled = nn::mean_rows(tape, h2)?;
        tape.l2_normalize(pooled)
    }

    /// Plain forward without prompts; convenience for dataset pipelines.
    pub fn embed(&self, raw: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let r = tape.constant(raw.clone());
        let out = self.encode(&mut tape, &vars, r, None)?;
        Ok(tape.value(out).detached())
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("img/w1", &self.w1), ("img/b1", &self.b1), ("img/w2", &self.w2), ("img/b2", &self.b2)]
    }

    pub fn checksum(&self) -> u64 {
        params_checksum(self.named_params())
    }
}

// ---------------------------------------------------------------------------

struct FrozenBlock {
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

impl FrozenBlock {
    fn new(d: usize, ff: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        FrozenBlock {
            ln1_g: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
            ln1_b: Tensor::zeros(vec![d]),
            qkv_w: Tensor::randn(vec![d, 3 * d], s, rng),
            qkv_b: Tensor::randn(vec![3 * d], 0.02, rng),
            proj_w: Tensor::randn(vec![d, d], s, rng),
            proj_b: Tensor::randn(vec![d], 0.02, rng),
            ln2_g: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
            ln2_b: Tensor::zeros(vec![d]),
            ff1_w: Tensor::randn(vec![d, ff], s, rng),
            ff1_b: Tensor::randn(vec![ff], 0.02, rng),
            ff2_w: Tensor::randn(vec![ff, d], 1.0 / (ff as f64).sqrt(), rng),
            ff2_b: Tensor::randn(vec![d], 0.02, rng),
        }
    }

    fn bind(&self, tape: &mut Tape) -> BlockVars {
        BlockVars {
            ln1_g: tape.constant(self.ln1_g.clone()),
            ln1_b: tape.constant(self.ln1_b.clone()),
            qkv_w: tape.constant(self.qkv_w.clone()),
            qkv_b: tape.constant(self.qkv_b.clone()),
            proj_w: tape.constant(self.proj_w.clone()),
            proj_b: tape.constant(self.proj_b.clone()),
            ln2_g: tape.constant(self.ln2_g.clone()),
            ln2_b: tape.constant(self.ln2_b.clone()),
            ff1_w: tape.constant(self.ff1_w.clone()),
            ff1_b: tape.constant(self.ff1_b.clone()),
            ff2_w: tape.constant(self.ff2_w.clone()),
            ff2_b: tape.constant(self.ff2_b.clone()),
        }
    }

    fn named(&self, idx: usize) -> Vec<(String, &Tensor)> {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("qkv_w", &self.qkv_w),
            ("qkv_b", &self.qkv_b),
            ("proj_w", &self.proj_w),
            ("proj_b", &self.proj_b),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("ff1_w", &self.ff1_w),
            ("ff1_b", &self.ff1_b),
            ("ff2_w", &self.ff2_w),
            ("ff2_b", &self.ff2_b),
        ]
        .into_iter()
        .map(|(n, t)| (format!("txt/b{idx}/{n}"), t))
        .collect()
    }
}

/// 2-layer transformer over exactly M+1 tokens (prompts plus one class
/// token); last-token pooling, L2-normalized output.
pub struct FrozenTextEncoder {
    d: usize,
    heads: usize,
    tokens: usize,
    pos: Tensor,
    blocks: Vec<FrozenBlock>,
}

pub struct TextEncVars {
    pos: VarId,
    blocks: Vec<BlockVars>,
}

impl FrozenTextEncoder {
    pub fn new(d: usize, m: usize, seed: u64) -> Self {
        let mut rng = substream(seed, 0x7e47);
        let tokens = m + 1;
        let pos = Tensor::randn(vec![tokens, d], 0.1, &mut rng);
        let blocks = (0..2).map(|_| FrozenBlock::new(d, 2 * d, &mut rng)).collect();
        FrozenTextEncoder { d, heads: 4, tokens, pos, blocks }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// M: prompt token count this encoder accepts.
    pub fn m(&self) -> usize {
        self.tokens - 1
    }

    pub fn bind(&self, tape: &mut Tape) -> TextEncVars {
        TextEncVars {
            pos: tape.constant(self.pos.clone()),
            blocks: self.blocks.iter().map(|b| b.bind(tape)).collect(),
        }
    }

    /// Token matrix must be exactly (M+1) x d.
    pub fn encode(&self, tape: &mut Tape, vars: &TextEncVars, tokens: VarId) -> Result<VarId> {
        let shape = tape.value(tokens).shape();
        if shape != [self.tokens, self.d] {
            return Err(Error::Shape {
                op: "text_encode",
                detail: format!("tokens {:?}, expected [{}, {}]", shape, self.tokens, self.d),
            });
        }
        let mut x = tape.add(tokens, vars.pos)?;
        for b in &vars.blocks {
            x = nn::block(tape, x, b, self.heads)?;
        }
        let last = tape.slice(x, 0, self.tokens - 1, 1)?;
        let flat = tape.reshape(last, vec![self.d])?;
        tape.l2_normalize(flat)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("txt/pos".to_string(), &self.pos)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named(i));
        }
        out
    }

    pub fn checksum(&self) -> u64 {
        params_checksum(self.named_params().iter().map(|(n, t)| (n.as_str(), *t)))
    }
}

// ---------------------------------------------------------------------------

/// Fixed class embeddings drawn from a shared seeded dictionary, plus the
/// softmax temperature. Base and new classes use disjoint id ranges, so new
/// classes are embeddings the training phase never saw.
#[derive(Clone)]
pub struct ClassVocabulary {
    ids: Vec<usize>,
    embeddings: Vec<Tensor>,
    temperature: f64,
}

impl ClassVocabulary {
    pub fn from_dictionary(vocab_seed: u64, ids: &[usize], d: usize, temperature: f64) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Invalid { what: "vocabulary with zero classes".into() });
        }
        if temperature <= 0.0 {
            return Err(Error::Invalid { what: format!("temperature {temperature}") });
        }
        let embeddings = ids
            .iter()
            .map(|&id| {
                Tensor::randn(vec![1, d], 1.0 / (d as f64).sqrt(), &mut substream(vocab_seed, id as u64))
            })
            .collect();
        Ok(ClassVocabulary { ids: ids.to_vec(), embeddings, temperature })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn embedding(&self, index: usize) -> &Tensor {
        &self.embeddings[index]
    }

    /// Position of a global class id within this vocabulary.
    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.ids.iter().position(|&i| i == id)
    }
}

// ---------------------------------------------------------------------------

/// Encoder pair; the classifier of the frozen backbone.
pub struct Surrogate {
    pub image: FrozenImageEncoder,
    pub text: FrozenTextEncoder,
}

impl Surrogate {
    pub fn new(d_raw: usize, d: usize, m: usize, encoder_seed: u64) -> Self {
        Surrogate {
            image: FrozenImageEncoder::new(d_raw, d, encoder_seed),
            text: FrozenTextEncoder::new(d, m, encoder_seed.wrapping_add(1)),
        }
    }

    pub fn checksum(&self) -> u64 {
        self.image.checksum() ^ self.text.checksum().rotate_left(17)
    }

    /// Per-class text features for one prompt matrix: g_T([v_1..v_M, c_i]).
    pub fn text_features(
        &self,
        tape: &mut Tape,
        prompts: VarId,
        vocab: &ClassVocabulary,
    ) -> Result<Vec<VarId>> {
        if vocab.is_empty() {
            return Err(Error::Invalid { what: "classify with zero classes".into() });
        }
        let m = self.text.m();
        if tape.value(prompts).shape() != [m, self.text.d()] {
            return Err(Error::Shape {
                op: "text_features",
                detail: format!("prompts {:?}, expected [{m}, {}]", tape.value(prompts).shape(), self.text.d()),
            });
        }
        let vars = self.text.bind(tape);
        let mut feats = Vec::with_capacity(vocab.len());
        for k in 0..vocab.len() {
            let c = tape.constant(vocab.embedding(k).clone());
            let toks = tape.concat(&[prompts, c], 0)?;
            feats.push(self.text.encode(tape, &vars, toks)?);
        }
        Ok(feats)
    }

    /// Softmax over cosine similarities divided by the temperature.
    pub fn probs_from_features(
        &self,
        tape: &mut Tape,
        features: &[VarId],
        image_emb: VarId,
        vocab: &ClassVocabulary,
    ) -> Result<VarId> {
        let mut logits = Vec::with_capacity(features.len());
        for &f in features {
            let sim = tape.cos_sim(f, image_emb)?;
            logits.push(tape.mul_scalar(sim, 1.0 / vocab.temperature())?);
        }
        let logit_vec = tape.concat(&logits, 0)?;
        tape.softmax(logit_vec)
    }

    /// Classification probabilities for one image embedding under one prompt
    /// matrix (textual prompting path).
    pub fn classify(
        &self,
        tape: &mut Tape,
        image_emb: VarId,
        prompts: VarId,
        vocab: &ClassVocabulary,
    ) -> Result<VarId> {
        let feats = self.text_features(tape, prompts, vocab)?;
        self.probs_from_features(tape, &feats, image_emb, vocab)
    }

    /// Visual prompting path: prompts enter the image encoder; the text side
    /// uses a fixed zero context.
    pub fn classify_visual(
        &self,
        tape: &mut Tape,
        raw: VarId,
        visual_prompts: VarId,
        vocab: &ClassVocabulary,
    ) -> Result<VarId> {
        let img_vars = self.image.bind(tape);
        let emb = self.image.encode(tape, &img_vars, raw, Some(visual_prompts))?;
        let zero = tape.constant(Tensor::zeros(vec![self.text.m(), self.text.d()]));
        let feats = self.text_features(tape, zero, vocab)?;
        self.probs_from_features(tape, &feats, emb, vocab)
    }
}

/// Negative log-likelihood of the labeled class given a probability vector.
/// Probabilities below 1e-12 are clamped (with a warning) before the log.
pub fn prompt_ce_loss(tape: &mut Tape, probs: VarId, label: usize) -> Result<VarId> {
    let k = tape.value(probs).numel();
    if label >= k {
        return Err(Error::Invalid { what: format!("label {label} out of range for {k} classes") });
    }
    let p = tape.pick(probs, label)?;
    if tape.value(p).item() < CE_PROB_EPS {
        eprintln!("warning: class probability {:.3e} clamped to {CE_PROB_EPS:.0e}", tape.value(p).item());
    }
    let clamped = tape.clamp_min(p, CE_PROB_EPS)?;
    let lp = tape.ln(clamped)?;
    tape.mul_scalar(lp, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::gradcheck::{max_grad_err, FD_STEP};

    const D_RAW: usize = 12;
    const D: usize = 16;
    const M: usize = 4;

    fn surrogate() -> Surrogate {
        Surrogate::new(D_RAW, D, M, 99)
    }

    fn vocab(k: usize) -> ClassVocabulary {
        let ids: Vec<usize> = (0..k).collect();
        ClassVocabulary::from_dictionary(5, &ids, D, DEFAULT_TEMPERATURE).unwrap()
    }

    #[test]
    fn identical_class_embeddings_give_uniform_probs() {
        let s = surrogate();
        // same id repeated -> identical embeddings -> equal similarities
        let v = ClassVocabulary::from_dictionary(5, &[3, 3, 3, 3], D, 0.07).unwrap();
        let mut tape = Tape::new();
        let emb = s.image.embed(&Tensor::randn(vec![D_RAW], 1.0, &mut seeded(1))).unwrap();
        let e = tape.constant(emb);
        let p = tape.constant(Tensor::randn(vec![M, D], 0.02, &mut seeded(2)));
        let probs = s.classify(&mut tape, e, p, &v).unwrap();
        for &pv in tape.value(probs).data() {
            assert!((pv - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn probs_sum_to_one() {
        let s = surrogate();
        let v = vocab(7);
        let mut tape = Tape::new();
        let emb = s.image.embed(&Tensor::randn(vec![D_RAW], 1.0, &mut seeded(3))).unwrap();
        let e = tape.constant(emb);
        let p = tape.constant(Tensor::randn(vec![M, D], 0.02, &mut seeded(4)));
        let probs = s.classify(&mut tape, e, p, &v).unwrap();
        let sum: f64 = tape.value(probs).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(tape.value(probs).data().iter().all(|&x| x > 0.0));
    }

    #[test]
    fn two_class_unit_logit_gap_gives_textbook_probs() {
        // engineered similarities/tau = (1, 0): p = (0.7311, 0.2689)
        let s = surrogate();
        let mut tape = Tape::new();
        let mut img = vec![0.0; D];
        img[0] = 1.0;
        let mut c1 = vec![0.0; D];
        c1[1] = 1.0;
        let e = tape.constant(Tensor::new(vec![D], img.clone()).unwrap());
        let f0 = tape.constant(Tensor::new(vec![D], img).unwrap()); // cos = 1
        let f1 = tape.constant(Tensor::new(vec![D], c1).unwrap()); // cos = 0
        let v = ClassVocabulary::from_dictionary(5, &[0, 1], D, 1.0).unwrap();
        let probs = s.probs_from_features(&mut tape, &[f0, f1], e, &v).unwrap();
        let got = tape.value(probs).data();
        let expect = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((got[0] - expect).abs() < 1e-12);
        assert!((got[0] - 0.7311).abs() < 5e-5);
        assert!((got[1] - 0.2689).abs() < 5e-5);
    }

    #[test]
    fn permuting_classes_permutes_probs() {
        let s = surrogate();
        let ids: Vec<usize> = vec![0, 1, 2, 3, 4];
        let perm: Vec<usize> = vec![3, 0, 4, 1, 2];
        let va = ClassVocabulary::from_dictionary(5, &ids, D, 0.07).unwrap();
        let vb = ClassVocabulary::from_dictionary(5, &perm, D, 0.07).unwrap();
        let emb = s.image.embed(&Tensor::randn(vec![D_RAW], 1.0, &mut seeded(6))).unwrap();
        let prompts = Tensor::randn(vec![M, D], 0.02, &mut seeded(7));

        let run = |v: &ClassVocabulary| {
            let mut tape = Tape::new();
            let e = tape.constant(emb.clone());
            let p = tape.constant(prompts.clone());
            let probs = s.classify(&mut tape, e, p, v).unwrap();
            tape.value(probs).data().to_vec()
        };
        let pa = run(&va);
        let pb = run(&vb);
        for (bi, &orig_id) in perm.iter().enumerate() {
            assert!((pb[bi] - pa[orig_id]).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_invariant_to_image_embedding_rescale() {
        let s = surrogate();
        let v = vocab(4);
        let emb = s.image.embed(&Tensor::randn(vec![D_RAW], 1.0, &mut seeded(8))).unwrap();
        let scaled = Tensor::new(vec![D], emb.data().iter().map(|x| 5.0 * x).collect()).unwrap();
        let prompts = Tensor::randn(vec![M, D], 0.02, &mut seeded(9));
        let run = |e: &Tensor| {
            let mut tape = Tape::new();
            let ev = tape.constant(e.clone());
            let p = tape.constant(prompts.clone());
            let probs = s.classify(&mut tape, ev, p, &v).unwrap();
            tape.value(probs).data().to_vec()
        };
        let a = run(&emb);
        let b = run(&scaled);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_is_invariant_to_temperature() {
        let s = surrogate();
        let emb = s.image.embed(&Tensor::randn(vec![D_RAW], 1.0, &mut seeded(10))).unwrap();
        let prompts = Tensor::randn(vec![M, D], 0.02, &mut seeded(11));
        let argmax = |tau: f64| {
            let ids: Vec<usize> = (0..6).collect();
            let v = ClassVocabulary::from_dictionary(5, &ids, D, tau).unwrap();
            let mut tape = Tape::new();
            let e = tape.constant(emb.clone());
            let p = tape.constant(prompts.clone());
            let probs = s.classify(&mut tape, e, p, &v).unwrap();
            tape.value(probs)
                .data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let a = argmax(0.07);
        assert_eq!(a, argmax(1.0));
        assert_eq!(a, argmax(0.01));
    }

    #[test]
    fn ce_loss_textbook_values() {
        let mut tape = Tape::new();
        let sure = tape.constant(Tensor::new(vec![3], vec![1.0, 0.0, 0.0]).unwrap());
        let loss = prompt_ce_loss(&mut tape, sure, 0).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);

        let uniform = tape.constant(Tensor::new(vec![10], vec![0.1; 10]).unwrap());
        let loss = prompt_ce_loss(&mut tape, uniform, 4).unwrap();
        assert!((tape.value(loss).item() - 10.0f64.ln()).abs() < 1e-12);
        assert!((tape.value(loss).item() - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn ce_loss_clamps_zero_probability() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        let loss = prompt_ce_loss(&mut tape, p, 1).unwrap();
        assert!((tape.value(loss).item() - (-CE_PROB_EPS.ln())).abs() < 1e-9);
    }

    #[test]
    fn prompt_gradients_through_classify_match_finite_differences() {
        let s = surrogate();
        let v = vocab(3);
        let emb = s.image.embed(&Tensor::randn(vec![D_RAW], 1.0, &mut seeded(12))).unwrap();
        let prompts = Tensor::randn(vec![M, D], 0.05, &mut seeded(13));
        let err = max_grad_err(
            &|tape, ids| {
                let e = tape.constant(emb.clone());
                let probs = s.classify(tape, e, ids[0], &v)?;
                prompt_ce_loss(tape, probs, 1)
            },
            &[prompts],
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "classify grad err {err:.3e}");
    }

    #[test]
    fn visual_path_matches_prompt_shape_contract() {
        let s = surrogate();
        let v = vocab(4);
        let mut tape = Tape::new();
        let raw = tape.constant(Tensor::randn(vec![D_RAW], 1.0, &mut seeded(14)));
        let vp = tape.constant(Tensor::randn(vec![M, D], 0.02, &mut seeded(15)));
        let probs = s.classify_visual(&mut tape, raw, vp, &v).unwrap();
        assert_eq!(tape.value(probs).numel(), 4);
        let sum: f64 = tape.value(probs).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_vocabulary_is_rejected() {
        assert!(ClassVocabulary::from_dictionary(5, &[], D, 0.07).is_err());
    }

    #[test]
    fn wrong_token_count_is_rejected() {
        let s = surrogate();
        let v = vocab(2);
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::randn(vec![D], 1.0, &mut seeded(16)));
        let bad = tape.constant(Tensor::randn(vec![M + 1, D], 0.02, &mut seeded(17)));
        assert!(s.classify(&mut tape, e, bad, &v).is_err());
    }

    #[test]
    fn encoder_checksums_are_stable() {
        let a = surrogate();
        let b = surrogate();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), Surrogate::new(D_RAW, D, M, 100).checksum());
    }
}
