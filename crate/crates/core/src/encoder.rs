//! Token encoders for the two modalities and the joint attention layer.
//!
//! Each modality has a linear token projection into a shared `d_embed`
//! space. A sample's embedding is the mean of its projected tokens, passed
//! through a shared output projection and scaled to unit length. The token
//! projection carries no bias, so `encode(c·tokens) == encode(tokens)` for
//! every `c > 0`.
//!
//! Attention runs over the concatenated `M + L` projected tokens of a pair:
//! `softmax(Q Kᵀ / √d_attn)` with `Q = H W_q`, `K = H W_k`.

use bacl_numerics::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::synthdata::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    X,
    Y,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::X => Modality::Y,
            Modality::Y => Modality::X,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::X => "x",
            Modality::Y => "y",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderDims {
    pub d_latent: usize,
    pub d_embed: usize,
    pub d_attn: usize,
    pub m_tokens: usize,
    pub l_tokens: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            d_latent: 16,
            d_embed: 32,
            d_attn: 16,
            m_tokens: 8,
            l_tokens: 8,
        }
    }
}

impl EncoderDims {
    pub fn tokens(&self, modality: Modality) -> usize {
        match modality {
            Modality::X => self.m_tokens,
            Modality::Y => self.l_tokens,
        }
    }

    /// Length of the joint token sequence.
    pub fn joint_tokens(&self) -> usize {
        self.m_tokens + self.l_tokens
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    /// `d_latent × d_embed` token projection for modality X.
    pub proj_x: Tensor,
    pub proj_y: Tensor,
    /// Shared `d_embed × d_embed` output projection.
    pub output: Tensor,
    /// `d_embed × d_attn` attention query weights.
    pub query: Tensor,
    pub key: Tensor,
}

fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("gaussian draws are finite")
}

impl EncoderParams {
    pub fn init<R: Rng>(dims: EncoderDims, rng: &mut R) -> Self {
        let proj_std = (1.0 / dims.d_latent as f64).sqrt();
        let embed_std = (1.0 / dims.d_embed as f64).sqrt();
        Self {
            dims,
            proj_x: gaussian(rng, dims.d_latent, dims.d_embed, proj_std),
            proj_y: gaussian(rng, dims.d_latent, dims.d_embed, proj_std),
            output: gaussian(rng, dims.d_embed, dims.d_embed, embed_std),
            query: gaussian(rng, dims.d_embed, dims.d_attn, embed_std),
            key: gaussian(rng, dims.d_embed, dims.d_attn, embed_std),
        }
    }

    pub fn from_tensors(dims: EncoderDims, tensors: [Tensor; 5]) -> Result<Self> {
        let [proj_x, proj_y, output, query, key] = tensors;
        let expect = |t: &Tensor, r: usize, c: usize, name: &str| -> Result<()> {
            if t.shape() != [r, c] {
                return Err(Error::config(format!(
                    "{name} has shape {:?}, expected [{r}, {c}]",
                    t.shape()
                )));
            }
            Ok(())
        };
        expect(&proj_x, dims.d_latent, dims.d_embed, "proj_x")?;
        expect(&proj_y, dims.d_latent, dims.d_embed, "proj_y")?;
        expect(&output, dims.d_embed, dims.d_embed, "output")?;
        expect(&query, dims.d_embed, dims.d_attn, "query")?;
        expect(&key, dims.d_embed, dims.d_attn, "key")?;
        for i in 0..dims.d_embed {
            if output.row(i).iter().all(|&v| v == 0.0) {
                return Err(Error::config(format!("output projection row {i} is zero")));
            }
        }
        Ok(Self {
            dims,
            proj_x,
            proj_y,
            output,
            query,
            key,
        })
    }

    pub fn tensors(&self) -> [&Tensor; 5] {
        [&self.proj_x, &self.proj_y, &self.output, &self.query, &self.key]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.proj_x,
            &mut self.proj_y,
            &mut self.output,
            &mut self.query,
            &mut self.key,
        ]
    }

    pub fn projection(&self, modality: Modality) -> &Tensor {
        match modality {
            Modality::X => &self.proj_x,
            Modality::Y => &self.proj_y,
        }
    }

    /// Places every weight on `tape` as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            proj_x: tape.param(self.proj_x.clone()),
            proj_y: tape.param(self.proj_y.clone()),
            output: tape.param(self.output.clone()),
            query: tape.param(self.query.clone()),
            key: tape.param(self.key.clone()),
        }
    }

    /// Same as [`register`](Self::register) but as constants.
    pub fn register_frozen(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            proj_x: tape.constant(self.proj_x.clone()),
            proj_y: tape.constant(self.proj_y.clone()),
            output: tape.constant(self.output.clone()),
            query: tape.constant(self.query.clone()),
            key: tape.constant(self.key.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub proj_x: Var,
    pub proj_y: Var,
    pub output: Var,
    pub query: Var,
    pub key: Var,
}

impl EncoderVars {
    pub fn all(&self) -> [Var; 5] {
        [self.proj_x, self.proj_y, self.output, self.query, self.key]
    }

    fn projection(&self, modality: Modality) -> Var {
        match modality {
            Modality::X => self.proj_x,
            Modality::Y => self.proj_y,
        }
    }
}

/// Tape handles for a stack of encoded samples.
#[derive(Clone, Copy, Debug)]
pub struct EncodedStack {
    /// Projected tokens, `(S·T) × d_embed`.
    pub states: Var,
    /// Unit embeddings, `S × d_embed`.
    pub embeddings: Var,
}

/// Encodes `S` samples whose token matrices are stacked into `tokens`
/// (`(S·T) × d_latent`, `T = tokens_per_sample`).
pub fn encode_on_tape(
    tape: &mut Tape,
    vars: &EncoderVars,
    tokens: Var,
    tokens_per_sample: usize,
    modality: Modality,
) -> Result<EncodedStack> {
    let states = tape.matmul(tokens, vars.projection(modality))?;
    let pooled = tape.pool_rows(states, tokens_per_sample)?;
    let out = tape.matmul(pooled, vars.output)?;
    let embeddings = tape.normalize_rows(out)?;
    Ok(EncodedStack { states, embeddings })
}

/// Joint-sequence attention map for one pair of projected token matrices.
pub fn attention_on_tape(tape: &mut Tape, vars: &EncoderVars, x_states: Var, y_states: Var, d_attn: usize) -> Result<Var> {
    let joint = tape.concat_rows(&[x_states, y_states])?;
    let q = tape.matmul(joint, vars.query)?;
    let k = tape.matmul(joint, vars.key)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d_attn as f64).sqrt())?;
    Ok(tape.softmax_rows(scaled)?)
}

/// Stacks token matrices vertically.
pub fn stack_tokens<'a>(mats: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for m in mats {
        let (r, c) = m.dims2()?;
        if *cols.get_or_insert(c) != c {
            return Err(Error::LengthMismatch {
                op: "stack_tokens",
                left: cols.unwrap_or(0),
                right: c,
            });
        }
        data.extend_from_slice(m.data());
        rows += r;
    }
    Ok(Tensor::new(vec![rows, cols.unwrap_or(0)], data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    /// Unit-norm vector of length `d_embed`.
    pub vector: Vec<f64>,
    /// Projected tokens kept for attention.
    pub token_states: Tensor,
}

fn check_tokens(params: &EncoderParams, tokens: &Tensor, modality: Modality) -> Result<()> {
    let (r, c) = tokens.dims2()?;
    let want = params.dims.tokens(modality);
    if r != want || c != params.dims.d_latent {
        return Err(Error::config(format!(
            "modality {} expects {want}×{} tokens, got {r}×{c}",
            modality.as_str(),
            params.dims.d_latent
        )));
    }
    Ok(())
}

pub fn encode_tokens(params: &EncoderParams, tokens: &Tensor, modality: Modality) -> Result<Embedding> {
    check_tokens(params, tokens, modality)?;
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let t = tape.constant(tokens.clone());
    let enc = encode_on_tape(&mut tape, &vars, t, tokens.rows(), modality)?;
    Ok(Embedding {
        vector: tape.value(enc.embeddings)?.data().to_vec(),
        token_states: tape.value(enc.states)?.clone(),
    })
}

pub fn encode(params: &EncoderParams, sample: &Sample, modality: Modality) -> Result<Embedding> {
    encode_tokens(params, sample.tokens(modality), modality)
}

/// Unit embeddings of every sample, one row per sample in input order.
pub fn encode_all(params: &EncoderParams, samples: &[Sample], modality: Modality) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::Empty("sample list"));
    }
    for s in samples {
        check_tokens(params, s.tokens(modality), modality)?;
    }
    let stacked = stack_tokens(samples.iter().map(|s| s.tokens(modality)))?;
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let t = tape.constant(stacked);
    let enc = encode_on_tape(&mut tape, &vars, t, params.dims.tokens(modality), modality)?;
    Ok(tape.value(enc.embeddings)?.clone())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of two unit embeddings.
pub fn similarity(a: &Embedding, b: &Embedding) -> f64 {
    dot(&a.vector, &b.vector)
}

/// Row-softmaxed `N × N` attention map for the pair `(x_tokens, y_tokens)`.
pub fn cross_attention(params: &EncoderParams, x_tokens: &Tensor, y_tokens: &Tensor) -> Result<Tensor> {
    check_tokens(params, x_tokens, Modality::X)?;
    check_tokens(params, y_tokens, Modality::Y)?;
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let xt = tape.constant(x_tokens.clone());
    let yt = tape.constant(y_tokens.clone());
    let xs = tape.matmul(xt, vars.proj_x)?;
    let ys = tape.matmul(yt, vars.proj_y)?;
    let a = attention_on_tape(&mut tape, &vars, xs, ys, params.dims.d_attn)?;
    Ok(tape.value(a)?.clone())
}

fn pair_similarity(params: &EncoderParams, x: &Tensor, y: &Tensor) -> Result<f64> {
    let ex = encode_tokens(params, x, Modality::X)?;
    let ey = encode_tokens(params, y, Modality::Y)?;
    Ok(similarity(&ex, &ey))
}

/// `|Δs| / (‖Δx‖ + ‖Δy‖)` for one perturbation; either side may be left
/// unperturbed.
pub fn lipschitz_ratio(
    params: &EncoderParams,
    x: &Tensor,
    y: &Tensor,
    dx: Option<&Tensor>,
    dy: Option<&Tensor>,
) -> Result<f64> {
    let shifted = |base: &Tensor, d: Option<&Tensor>| -> Result<(Tensor, f64)> {
        match d {
            Some(d) => Ok((base.zip_map(d, "perturb", |a, b| a + b)?, d.norm())),
            None => Ok((base.clone(), 0.0)),
        }
    };
    let (x2, nx) = shifted(x, dx)?;
    let (y2, ny) = shifted(y, dy)?;
    if nx + ny == 0.0 {
        return Err(Error::config("lipschitz probe needs a nonzero perturbation"));
    }
    let s0 = pair_similarity(params, x, y)?;
    let s1 = pair_similarity(params, &x2, &y2)?;
    Ok((s1 - s0).abs() / (nx + ny))
}

/// Random token matrix whose mean token has unit norm.
fn probe_tokens<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let t = gaussian(rng, rows, cols, 1.0);
    let mut mean = vec![0.0; cols];
    for i in 0..rows {
        for (m, v) in mean.iter_mut().zip(t.row(i)) {
            *m += v / rows as f64;
        }
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    t.map(|v| v / norm).expect("finite")
}

fn scaled_direction<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor {
    let d = gaussian(rng, rows, cols, 1.0);
    let norm = d.norm();
    d.map(|v| v * scale / norm).expect("finite")
}

/// Empirical Lipschitz estimate of the pair similarity: the largest
/// `|Δs| / (‖Δx‖ + ‖Δy‖)` over `n_probes` random base pairs, each perturbed
/// on both sides by Frobenius norm `perturb_scale`. The probe stream is a
/// pure function of `seed`, so growing `n_probes` only extends the maximum.
pub fn lipschitz_probe(params: &EncoderParams, n_probes: usize, perturb_scale: f64, seed: u64) -> Result<f64> {
    if n_probes == 0 {
        return Err(Error::config("n_probes must be at least 1"));
    }
    if perturb_scale <= 0.0 || !perturb_scale.is_finite() {
        return Err(Error::config("perturb_scale must be positive"));
    }
    let d = params.dims;
    let mut best: f64 = 0.0;
    for p in 0..n_probes {
        let mut rng = seed::indexed_stream(seed, "lipschitz", p as u64);
        let x = probe_tokens(&mut rng, d.m_tokens, d.d_latent);
        let y = probe_tokens(&mut rng, d.l_tokens, d.d_latent);
        let dx = scaled_direction(&mut rng, d.m_tokens, d.d_latent, perturb_scale);
        let dy = scaled_direction(&mut rng, d.l_tokens, d.d_latent, perturb_scale);
        best = best.max(lipschitz_ratio(params, &x, &y, Some(&dx), Some(&dy))?);
    }
    Ok(best)
}
