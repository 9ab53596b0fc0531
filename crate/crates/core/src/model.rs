//! Toy sequence-to-frames predictor: token embedding, gated tanh recurrent
//! encoder, content dot-product attention and a gated recurrent decoder that
//! consumes the previous frame and the attention context.
//!
//! Encoder step: `z = σ(x Wz + h Uz + bz)`, `c = tanh(x Wc + h Uc + bc)`,
//! `h ← h + z ⊙ (c − h)`. The decoder cell is the same with input
//! `[y_prev, ctx]`, where `ctx = softmax(s Wq Hᵀ) H` uses the previous decoder
//! state `s`. Each output frame is `[s, ctx] Wo + bo`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{invalid_config, invalid_input, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    pub encoder: usize,
    pub decoder: usize,
    pub n_mels: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            vocab: 16,
            embed: 16,
            encoder: 32,
            decoder: 64,
            n_mels: 80,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let all = [self.vocab, self.embed, self.encoder, self.decoder, self.n_mels];
        if all.iter().any(|&d| d == 0) {
            return Err(invalid_config!("model dimensions must be positive: {self:?}"));
        }
        Ok(())
    }
}

/// Parameter tensors in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum Param {
    Embedding,
    EncInGate,
    EncStateGate,
    EncGateBias,
    EncInCand,
    EncStateCand,
    EncCandBias,
    Query,
    DecInGate,
    DecStateGate,
    DecGateBias,
    DecInCand,
    DecStateCand,
    DecCandBias,
    OutWeight,
    OutBias,
}

impl Param {
    pub const ALL: [Param; 16] = [
        Param::Embedding,
        Param::EncInGate,
        Param::EncStateGate,
        Param::EncGateBias,
        Param::EncInCand,
        Param::EncStateCand,
        Param::EncCandBias,
        Param::Query,
        Param::DecInGate,
        Param::DecStateGate,
        Param::DecGateBias,
        Param::DecInCand,
        Param::DecStateCand,
        Param::DecCandBias,
        Param::OutWeight,
        Param::OutBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Param::Embedding => "embedding",
            Param::EncInGate => "enc.in_gate",
            Param::EncStateGate => "enc.state_gate",
            Param::EncGateBias => "enc.gate_bias",
            Param::EncInCand => "enc.in_cand",
            Param::EncStateCand => "enc.state_cand",
            Param::EncCandBias => "enc.cand_bias",
            Param::Query => "attn.query",
            Param::DecInGate => "dec.in_gate",
            Param::DecStateGate => "dec.state_gate",
            Param::DecGateBias => "dec.gate_bias",
            Param::DecInCand => "dec.in_cand",
            Param::DecStateCand => "dec.state_cand",
            Param::DecCandBias => "dec.cand_bias",
            Param::OutWeight => "out.weight",
            Param::OutBias => "out.bias",
        }
    }

    fn is_bias(self) -> bool {
        matches!(
            self,
            Param::EncGateBias | Param::EncCandBias | Param::DecGateBias | Param::DecCandBias | Param::OutBias
        )
    }

    pub fn shape(self, d: &ModelDims) -> (usize, usize) {
        let dec_in = d.n_mels + d.encoder;
        match self {
            Param::Embedding => (d.vocab, d.embed),
            Param::EncInGate | Param::EncInCand => (d.embed, d.encoder),
            Param::EncStateGate | Param::EncStateCand => (d.encoder, d.encoder),
            Param::EncGateBias | Param::EncCandBias => (1, d.encoder),
            Param::Query => (d.decoder, d.encoder),
            Param::DecInGate | Param::DecInCand => (dec_in, d.decoder),
            Param::DecStateGate | Param::DecStateCand => (d.decoder, d.decoder),
            Param::DecGateBias | Param::DecCandBias => (1, d.decoder),
            Param::OutWeight => (d.decoder + d.encoder, d.n_mels),
            Param::OutBias => (1, d.n_mels),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub tensors: Vec<Matrix<f64>>,
}

impl ModelParams {
    /// Uniform Glorot weights, unit-range embeddings, zero biases.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = Param::ALL
            .iter()
            .map(|&p| {
                let (r, c) = p.shape(&dims);
                if p.is_bias() {
                    Matrix::zeros(r, c)
                } else {
                    let bound = if p == Param::Embedding {
                        1.0
                    } else {
                        (6.0 / (r + c) as f64).sqrt()
                    };
                    Matrix::from_fn(r, c, |_, _| rng.gen_range(-bound..bound))
                }
            })
            .collect();
        Ok(Self { dims, tensors })
    }

    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let tensors = Param::ALL
            .iter()
            .map(|&p| {
                let (r, c) = p.shape(&dims);
                Matrix::zeros(r, c)
            })
            .collect();
        Ok(Self { dims, tensors })
    }

    /// Rebuilds from named tensors, checking shapes against `dims`.
    pub fn from_tensors(dims: ModelDims, tensors: Vec<Matrix<f64>>) -> Result<Self> {
        dims.validate()?;
        if tensors.len() != Param::ALL.len() {
            return Err(invalid_input!("expected {} tensors, got {}", Param::ALL.len(), tensors.len()));
        }
        for (&p, t) in Param::ALL.iter().zip(&tensors) {
            if t.shape() != p.shape(&dims) {
                return Err(invalid_input!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name(),
                    t.shape(),
                    p.shape(&dims)
                ));
            }
            if !t.is_finite() {
                return Err(invalid_input!("tensor {} is not finite", p.name()));
            }
        }
        Ok(Self { dims, tensors })
    }

    pub fn get(&self, p: Param) -> &Matrix<f64> {
        &self.tensors[p as usize]
    }

    pub fn get_mut(&mut self, p: Param) -> &mut Matrix<f64> {
        &mut self.tensors[p as usize]
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(invalid_input!("token sequence is empty"));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.dims.vocab) {
            return Err(invalid_input!("token {t} outside vocabulary of {}", self.dims.vocab));
        }
        Ok(())
    }

    fn check_teacher(&self, teacher: &Matrix<f64>) -> Result<()> {
        if teacher.rows() == 0 {
            return Err(invalid_input!("teacher mel has zero frames"));
        }
        if teacher.cols() != self.dims.n_mels {
            return Err(invalid_input!(
                "teacher mel has {} channels, model predicts {}",
                teacher.cols(),
                self.dims.n_mels
            ));
        }
        Ok(())
    }

    /// Teacher-forced prediction: one frame per teacher frame, each step
    /// conditioned on the previous teacher frame (zeros before the first).
    pub fn forward_teacher(&self, tokens: &[usize], teacher: &Matrix<f64>) -> Result<Matrix<f64>> {
        self.check_tokens(tokens)?;
        self.check_teacher(teacher)?;
        let enc = self.encode(tokens);
        let mut dec = DecoderState::new(&self.dims);
        let mut out = Matrix::zeros(teacher.rows(), self.dims.n_mels);
        let go = vec![0.0; self.dims.n_mels];
        for t in 0..teacher.rows() {
            let prev = if t == 0 { &go[..] } else { teacher.row(t - 1) };
            let frame = self.decode_step(&enc, &mut dec, prev);
            out.row_mut(t).copy_from_slice(&frame);
        }
        Ok(out)
    }

    /// Autoregressive prediction of exactly `frames` frames.
    pub fn forward_free(&self, tokens: &[usize], frames: usize) -> Result<Matrix<f64>> {
        self.check_tokens(tokens)?;
        if frames == 0 {
            return Err(invalid_input!("frame cap is zero: nothing to generate"));
        }
        let enc = self.encode(tokens);
        let mut dec = DecoderState::new(&self.dims);
        let mut out = Matrix::zeros(frames, self.dims.n_mels);
        let mut prev = vec![0.0; self.dims.n_mels];
        for t in 0..frames {
            prev = self.decode_step(&enc, &mut dec, &prev);
            out.row_mut(t).copy_from_slice(&prev);
        }
        Ok(out)
    }

    fn encode(&self, tokens: &[usize]) -> Matrix<f64> {
        let d = &self.dims;
        let emb = self.get(Param::Embedding);
        let mut h = vec![0.0; d.encoder];
        let mut states = Matrix::zeros(tokens.len(), d.encoder);
        for (t, &tok) in tokens.iter().enumerate() {
            let x = emb.row(tok);
            h = gated_cell(
                x,
                &h,
                [self.get(Param::EncInGate), self.get(Param::EncStateGate), self.get(Param::EncGateBias)],
                [self.get(Param::EncInCand), self.get(Param::EncStateCand), self.get(Param::EncCandBias)],
            );
            states.row_mut(t).copy_from_slice(&h);
        }
        states
    }

    fn decode_step(&self, enc: &Matrix<f64>, dec: &mut DecoderState, prev: &[f64]) -> Vec<f64> {
        let ctx = attend(&dec.state, self.get(Param::Query), enc);
        let mut input = prev.to_vec();
        input.extend_from_slice(&ctx);
        dec.state = gated_cell(
            &input,
            &dec.state,
            [self.get(Param::DecInGate), self.get(Param::DecStateGate), self.get(Param::DecGateBias)],
            [self.get(Param::DecInCand), self.get(Param::DecStateCand), self.get(Param::DecCandBias)],
        );
        let mut feat = dec.state.clone();
        feat.extend_from_slice(&ctx);
        let mut y = vec_mat(&feat, self.get(Param::OutWeight));
        for (v, b) in y.iter_mut().zip(self.get(Param::OutBias).as_slice()) {
            *v += b;
        }
        y
    }
}

struct DecoderState {
    state: Vec<f64>,
}

impl DecoderState {
    fn new(d: &ModelDims) -> Self {
        Self {
            state: vec![0.0; d.decoder],
        }
    }
}

fn vec_mat(x: &[f64], w: &Matrix<f64>) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (xi, row) in x.iter().zip(w.iter_rows()) {
        if *xi != 0.0 {
            for (o, wv) in out.iter_mut().zip(row) {
                *o += xi * wv;
            }
        }
    }
    out
}

fn gated_cell(x: &[f64], h: &[f64], gate: [&Matrix<f64>; 3], cand: [&Matrix<f64>; 3]) -> Vec<f64> {
    let pre = |w: [&Matrix<f64>; 3]| {
        let mut a = vec_mat(x, w[0]);
        let b = vec_mat(h, w[1]);
        for ((a, b), c) in a.iter_mut().zip(&b).zip(w[2].as_slice()) {
            *a += b + c;
        }
        a
    };
    let z = pre(gate);
    let c = pre(cand);
    h.iter()
        .zip(&z)
        .zip(&c)
        .map(|((&h, &z), &c)| {
            let (z, c) = (sigmoid(z), c.tanh());
            h + z * (c - h)
        })
        .collect()
}

fn attend(state: &[f64], query: &Matrix<f64>, enc: &Matrix<f64>) -> Vec<f64> {
    let q = vec_mat(state, query);
    let scores: Vec<f64> = enc.iter_rows().map(|h| h.iter().zip(&q).map(|(a, b)| a * b).sum()).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    let mut ctx = vec![0.0; enc.cols()];
    for (w, h) in exp.iter().zip(enc.iter_rows()) {
        for (c, v) in ctx.iter_mut().zip(h) {
            *c += w / total * v;
        }
    }
    ctx
}

/// Parameters placed on a tape, in [`Param::ALL`] order.
pub struct TapedParams {
    pub vars: Vec<Var>,
}

impl TapedParams {
    pub fn inputs(tape: &mut Tape, params: &ModelParams) -> Self {
        Self {
            vars: params.tensors.iter().map(|t| tape.input(t.clone())).collect(),
        }
    }

    fn get(&self, p: Param) -> Var {
        self.vars[p as usize]
    }
}

fn taped_cell(tape: &mut Tape, x: Var, h: Var, gate: [Var; 3], cand: [Var; 3]) -> Result<Var> {
    let pre = |tape: &mut Tape, w: [Var; 3]| -> Result<Var> {
        let a = tape.matmul(x, w[0])?;
        let b = tape.matmul(h, w[1])?;
        let s = tape.add(a, b)?;
        tape.add(s, w[2])
    };
    let zp = pre(tape, gate)?;
    let cp = pre(tape, cand)?;
    let z = tape.sigmoid(zp)?;
    let c = tape.tanh(cp)?;
    let diff = tape.sub(c, h)?;
    let step = tape.mul(z, diff)?;
    tape.add(h, step)
}

/// Teacher-forced forward on a tape; returns a `frames × n_mels` node.
pub fn forward_teacher_taped(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &TapedParams,
    tokens: &[usize],
    teacher: &Matrix<f64>,
) -> Result<Var> {
    params.check_tokens(tokens)?;
    params.check_teacher(teacher)?;
    let d = params.dims;
    let p = |q: Param| vars.get(q);

    let mut h = tape.constant(Matrix::zeros(1, d.encoder));
    let mut states = Vec::with_capacity(tokens.len());
    for &tok in tokens {
        let x = tape.row(p(Param::Embedding), tok)?;
        h = taped_cell(
            tape,
            x,
            h,
            [p(Param::EncInGate), p(Param::EncStateGate), p(Param::EncGateBias)],
            [p(Param::EncInCand), p(Param::EncStateCand), p(Param::EncCandBias)],
        )?;
        states.push(h);
    }
    let enc = tape.stack_rows(&states)?;
    let enc_t = tape.transpose(enc)?;

    let mut s = tape.constant(Matrix::zeros(1, d.decoder));
    let teacher_var = tape.constant(teacher.clone());
    let go = tape.constant(Matrix::zeros(1, d.n_mels));
    let mut frames = Vec::with_capacity(teacher.rows());
    for t in 0..teacher.rows() {
        let prev = if t == 0 { go } else { tape.row(teacher_var, t - 1)? };
        let q = tape.matmul(s, p(Param::Query))?;
        let scores = tape.matmul(q, enc_t)?;
        let weights = tape.softmax(scores)?;
        let ctx = tape.matmul(weights, enc)?;
        let input = tape.concat_cols(&[prev, ctx])?;
        s = taped_cell(
            tape,
            input,
            s,
            [p(Param::DecInGate), p(Param::DecStateGate), p(Param::DecGateBias)],
            [p(Param::DecInCand), p(Param::DecStateCand), p(Param::DecCandBias)],
        )?;
        let feat = tape.concat_cols(&[s, ctx])?;
        let lin = tape.matmul(feat, p(Param::OutWeight))?;
        frames.push(tape.add(lin, p(Param::OutBias))?);
    }
    tape.stack_rows(&frames)
}
