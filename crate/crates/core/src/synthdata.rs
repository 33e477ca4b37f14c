//! Synthetic paired corpora with planted ambiguous siblings.
//!
//! A corpus lives in a fixed random "world": two orthogonal mixing matrices
//! `Q_x`, `Q_y` that turn latent token vectors into observed tokens of each
//! modality. Every pair draws a concept made of `L` content slots plus one
//! pair-level code vector shared by all its tokens:
//!
//! ```text
//! latent_j = [a_j ; g]            a_j ∈ R^(d_latent - code_dims), g ∈ R^code_dims
//! y_j      = Q_y latent_j + σ·noise
//! x_i      = Q_x latent_slot(i) + σ·noise,   slot(i) = i·L / M
//! ```
//!
//! An ambiguous sibling copies a concept, keeps its code, and replaces the
//! content of `k` slots. `k` is the largest value (found by bisection over a
//! nested replacement order) for which both directional similarity gaps
//! under the reference encoder stay within `epsilon_gen`. The reference
//! encoder projects tokens with `Q_x`, `Q_y`, recovering latent means; it is
//! fixed by the world seed and independent of any trained model.
//!
//! Roughly `n_pairs·ρ/2` siblings are drawn, so that about a `ρ` fraction of
//! all anchors (bases and siblings together) has a partner inside the
//! generation margin.

use bacl_numerics::Tensor;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderDims, EncoderParams, Modality};
use crate::error::{Error, Result};
use crate::seed;

pub const MAX_SIBLING_ATTEMPTS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_pairs: usize,
    pub d_latent: usize,
    pub m_tokens: usize,
    pub l_tokens: usize,
    pub rho: f64,
    pub epsilon_gen: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Width of the pair-level code shared by a concept and its siblings.
    #[serde(default = "default_code_dims")]
    pub code_dims: usize,
    /// Standard deviation of the shared code entries.
    #[serde(default = "default_code_scale")]
    pub code_scale: f64,
    /// Upper end of the bisection over the number of replaced slots.
    #[serde(default = "default_max_mismatch")]
    pub max_mismatch: usize,
}

fn default_code_dims() -> usize {
    12
}

fn default_code_scale() -> f64 {
    2.0
}

fn default_max_mismatch() -> usize {
    2
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_pairs: 2000,
            d_latent: 16,
            m_tokens: 8,
            l_tokens: 8,
            rho: 0.3,
            epsilon_gen: 0.1,
            noise_sigma: 0.1,
            seed: 0,
            code_dims: default_code_dims(),
            code_scale: default_code_scale(),
            max_mismatch: default_max_mismatch(),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::config(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        if !(self.epsilon_gen > 0.0) || !self.epsilon_gen.is_finite() {
            return Err(Error::config(format!("epsilon_gen must be positive, got {}", self.epsilon_gen)));
        }
        if self.m_tokens == 0 || self.l_tokens == 0 {
            return Err(Error::config("m_tokens and l_tokens must be at least 1"));
        }
        if self.n_pairs == 0 {
            return Err(Error::config("n_pairs must be at least 1"));
        }
        if self.code_dims >= self.d_latent {
            return Err(Error::config(format!(
                "code_dims ({}) must be smaller than d_latent ({})",
                self.code_dims, self.d_latent
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::config("noise_sigma must be a nonnegative number"));
        }
        if self.max_mismatch == 0 || self.max_mismatch > self.l_tokens {
            return Err(Error::config(format!(
                "max_mismatch must lie in [1, l_tokens = {}], got {}",
                self.l_tokens, self.max_mismatch
            )));
        }
        if !(self.code_scale >= 0.0) || !self.code_scale.is_finite() {
            return Err(Error::config("code_scale must be a nonnegative number"));
        }
        Ok(())
    }

    pub fn content_dims(&self) -> usize {
        self.d_latent - self.code_dims
    }

    /// Number of siblings drawn for this spec.
    pub fn n_siblings(&self) -> usize {
        let n = (self.n_pairs as f64 * self.rho / 2.0).round() as usize;
        n.min(self.n_pairs / 2)
    }

    pub fn with_n_pairs(&self, n_pairs: usize) -> Self {
        Self {
            n_pairs,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    fn label(self) -> &'static str {
        match self {
            Split::Train => "split/train",
            Split::Heldout => "split/heldout",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Heldout => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Heldout),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// `M × d_latent`.
    pub x_tokens: Tensor,
    /// `L × d_latent`.
    pub y_tokens: Tensor,
    /// Y-token positions whose content deviates from the sibling's source
    /// concept, ascending. Empty for samples that are not siblings.
    pub mismatch_mask: Vec<usize>,
    pub sibling_of: Option<usize>,
}

impl Sample {
    pub fn tokens(&self, modality: Modality) -> &Tensor {
        match modality {
            Modality::X => &self.x_tokens,
            Modality::Y => &self.y_tokens,
        }
    }

    /// Mismatch positions in the joint `M + L` token sequence.
    pub fn joint_mask(&self) -> Vec<usize> {
        let m = self.x_tokens.rows();
        self.mismatch_mask.iter().map(|&j| m + j).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Unordered sibling relation: for each sample, the ids it was planted
    /// next to (its source, or the siblings drawn from it).
    pub fn sibling_partners(&self) -> Vec<Vec<usize>> {
        let mut partners = vec![Vec::new(); self.samples.len()];
        for s in &self.samples {
            if let Some(src) = s.sibling_of {
                partners[s.id].push(src);
                partners[src].push(s.id);
            }
        }
        partners
    }

    /// Joint-sequence token positions where `a` and `b` differ by
    /// construction, when one was planted as the other's sibling. `swapped`
    /// names the modality whose tokens come from `b` in the negative pair
    /// `(x_a, y_b)` or `(x_b, y_a)`.
    pub fn planted_positions(&self, a: usize, b: usize, swapped: Modality) -> Option<Vec<usize>> {
        let (sa, sb) = (self.samples.get(a)?, self.samples.get(b)?);
        let mask = if sa.sibling_of == Some(b) {
            &sa.mismatch_mask
        } else if sb.sibling_of == Some(a) {
            &sb.mismatch_mask
        } else {
            return None;
        };
        let (m, l) = (self.spec.m_tokens, self.spec.l_tokens);
        Some(match swapped {
            Modality::Y => mask.iter().map(|&j| m + j).collect(),
            Modality::X => (0..m).filter(|&i| mask.binary_search(&x_slot(i, m, l)).is_ok()).collect(),
        })
    }

    pub fn encoder_dims(&self, d_embed: usize, d_attn: usize) -> EncoderDims {
        EncoderDims {
            d_latent: self.spec.d_latent,
            d_embed,
            d_attn,
            m_tokens: self.spec.m_tokens,
            l_tokens: self.spec.l_tokens,
        }
    }
}

/// The fixed mixing and reference encoder shared by every split of a seed.
#[derive(Clone, Debug)]
pub struct World {
    pub mix_x: Tensor,
    pub mix_y: Tensor,
    pub reference: EncoderParams,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian columns.
pub fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
        for _ in 0..2 {
            for c in &cols {
                let p = encoder::dot(&v, c);
                for (vi, ci) in v.iter_mut().zip(c) {
                    *vi -= p * ci;
                }
            }
        }
        let norm = encoder::dot(&v, &v).sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        cols.push(v);
    }
    Tensor::from_fn(n, n, |i, j| cols[j][i]).expect("finite")
}

impl World {
    pub fn new(spec: &CorpusSpec) -> Self {
        let mut rng = seed::stream(spec.seed, "world");
        let d = spec.d_latent;
        let mix_x = random_orthogonal(d, &mut rng);
        let mix_y = random_orthogonal(d, &mut rng);
        let dims = EncoderDims {
            d_latent: d,
            d_embed: d,
            d_attn: d,
            m_tokens: spec.m_tokens,
            l_tokens: spec.l_tokens,
        };
        let reference = EncoderParams {
            dims,
            proj_x: mix_x.clone(),
            proj_y: mix_y.clone(),
            output: Tensor::identity(d),
            query: Tensor::identity(d),
            key: Tensor::identity(d),
        };
        Self { mix_x, mix_y, reference }
    }
}

/// A pair's latent concept: `L` content slots and one shared code.
#[derive(Clone, Debug)]
struct Concept {
    content: Vec<Vec<f64>>,
    code: Vec<f64>,
}

impl Concept {
    fn draw(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Self {
        let content = (0..spec.l_tokens)
            .map(|_| (0..spec.content_dims()).map(|_| standard_normal(rng)).collect())
            .collect();
        let code = (0..spec.code_dims)
            .map(|_| spec.code_scale * standard_normal(rng))
            .collect();
        Self { content, code }
    }

    fn latent(&self, slot: usize) -> Vec<f64> {
        let mut v = self.content[slot].clone();
        v.extend_from_slice(&self.code);
        v
    }
}

/// Gaussian noise for one pair's tokens, drawn once so sibling candidates
/// of different `k` share it.
struct TokenNoise {
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
}

impl TokenNoise {
    fn draw(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut rows = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..spec.d_latent).map(|_| spec.noise_sigma * standard_normal(rng)).collect())
                .collect()
        };
        let x = rows(spec.m_tokens);
        let y = rows(spec.l_tokens);
        Self { x, y }
    }
}

/// Content slot shown by X token `i`.
pub fn x_slot(i: usize, m: usize, l: usize) -> usize {
    i * l / m
}

/// `row = Q · latent + noise` for each token.
fn mix_tokens(mix: &Tensor, latents: impl Iterator<Item = Vec<f64>>, noise: &[Vec<f64>]) -> Tensor {
    let d = mix.rows();
    let mut data = Vec::with_capacity(noise.len() * d);
    for (lat, nz) in latents.zip(noise) {
        for r in 0..d {
            let mut v = nz[r];
            for c in 0..d {
                v += mix.at(r, c) * lat[c];
            }
            data.push(v);
        }
    }
    Tensor::new(vec![noise.len(), d], data).expect("finite tokens")
}

fn render(spec: &CorpusSpec, world: &World, concept: &Concept, noise: &TokenNoise) -> (Tensor, Tensor) {
    let (m, l) = (spec.m_tokens, spec.l_tokens);
    let x = mix_tokens(&world.mix_x, (0..m).map(|i| concept.latent(x_slot(i, m, l))), &noise.x);
    let y = mix_tokens(&world.mix_y, (0..l).map(|j| concept.latent(j)), &noise.y);
    (x, y)
}

/// Both directional gaps `|s(x_a, y_b) − s(x_a, y_a)|` and
/// `|s(x_b, y_a) − s(x_b, y_b)|` under the reference encoder.
fn reference_gaps(world: &World, a: (&Tensor, &Tensor), b: (&Tensor, &Tensor)) -> Result<(f64, f64)> {
    let r = &world.reference;
    let xa = encoder::encode_tokens(r, a.0, Modality::X)?;
    let ya = encoder::encode_tokens(r, a.1, Modality::Y)?;
    let xb = encoder::encode_tokens(r, b.0, Modality::X)?;
    let yb = encoder::encode_tokens(r, b.1, Modality::Y)?;
    let g1 = (encoder::similarity(&xa, &yb) - encoder::similarity(&xa, &ya)).abs();
    let g2 = (encoder::similarity(&xb, &ya) - encoder::similarity(&xb, &yb)).abs();
    Ok((g1, g2))
}

fn split_root(spec: &CorpusSpec, split: Split) -> u64 {
    seed::derive(spec.seed, split.label())
}

struct Drawn {
    concept: Concept,
    x: Tensor,
    y: Tensor,
}

fn draw_sibling(
    spec: &CorpusSpec,
    world: &World,
    base: &Drawn,
    base_id: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let l = spec.l_tokens;
    for _ in 0..MAX_SIBLING_ATTEMPTS {
        let mut order: Vec<usize> = (0..l).collect();
        order.shuffle(rng);
        let replacement = Concept::draw(spec, rng).content;
        let noise = TokenNoise::draw(spec, rng);
        let build = |k: usize| -> (Concept, Tensor, Tensor) {
            let mut c = base.concept.clone();
            for &slot in &order[..k] {
                c.content[slot] = replacement[slot].clone();
            }
            let (x, y) = render(spec, world, &c, &noise);
            (c, x, y)
        };
        let feasible = |k: usize| -> Result<bool> {
            let (_, x, y) = build(k);
            let (g1, g2) = reference_gaps(world, (&base.x, &base.y), (&x, &y))?;
            Ok(g1 <= spec.epsilon_gen && g2 <= spec.epsilon_gen)
        };
        if !feasible(1)? {
            continue;
        }
        let (mut lo, mut hi) = (1, spec.max_mismatch);
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            if feasible(mid)? {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        let (_, x, y) = build(lo);
        let mut mask = order[..lo].to_vec();
        mask.sort_unstable();
        return Ok((x, y, mask));
    }
    Err(Error::Infeasible {
        anchor: base_id,
        attempts: MAX_SIBLING_ATTEMPTS,
        epsilon_gen: spec.epsilon_gen,
    })
}

pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    generate_split(spec, Split::Train)
}

/// Draws a corpus for `split`. Splits of one seed share the world (mixing
/// and reference encoder) but use disjoint sample streams.
pub fn generate_split(spec: &CorpusSpec, split: Split) -> Result<Corpus> {
    spec.validate()?;
    let world = World::new(spec);
    let root = split_root(spec, split);
    let n_sib = spec.n_siblings();
    let n_base = spec.n_pairs - n_sib;

    let bases: Vec<Drawn> = (0..n_base)
        .into_par_iter()
        .map(|b| {
            let mut rng = seed::indexed_stream(root, "pair", b as u64);
            let concept = Concept::draw(spec, &mut rng);
            let noise = TokenNoise::draw(spec, &mut rng);
            let (x, y) = render(spec, &world, &concept, &noise);
            Drawn { concept, x, y }
        })
        .collect();

    // Sources are tried in a shuffled order; a base whose sibling search is
    // infeasible is skipped in favour of the next one.
    let mut order: Vec<usize> = (0..n_base).collect();
    order.shuffle(&mut seed::stream(root, "sibling-sources"));
    let mut siblings: Vec<(usize, Tensor, Tensor, Vec<usize>)> = Vec::with_capacity(n_sib);
    let mut next = 0;
    let mut last_err = None;
    while siblings.len() < n_sib && next < order.len() {
        let end = (next + n_sib - siblings.len()).min(order.len());
        let drawn: Vec<Result<(usize, Tensor, Tensor, Vec<usize>)>> = (next..end)
            .into_par_iter()
            .map(|p| {
                let b = order[p];
                let mut rng = seed::indexed_stream(root, "sibling", p as u64);
                let (x, y, mask) = draw_sibling(spec, &world, &bases[b], b, &mut rng)?;
                Ok((b, x, y, mask))
            })
            .collect();
        for d in drawn {
            match d {
                Ok(v) => siblings.push(v),
                Err(e @ Error::Infeasible { .. }) => last_err = Some(e),
                Err(e) => return Err(e),
            }
        }
        next = end;
    }
    if siblings.len() < n_sib {
        return Err(last_err.expect("a shortfall implies a failed draw"));
    }

    let mut samples: Vec<Sample> = bases
        .into_iter()
        .enumerate()
        .map(|(id, d)| Sample {
            id,
            x_tokens: d.x,
            y_tokens: d.y,
            mismatch_mask: Vec::new(),
            sibling_of: None,
        })
        .collect();
    for (s, (b, x, y, mask)) in siblings.into_iter().enumerate() {
        samples.push(Sample {
            id: n_base + s,
            x_tokens: x,
            y_tokens: y,
            mismatch_mask: mask,
            sibling_of: Some(b),
        });
    }
    Ok(Corpus {
        spec: spec.clone(),
        split,
        samples,
    })
}

/// Full `n × n` similarity matrix `S[i][j] = s(x_i, y_j)`.
pub fn similarity_matrix(corpus: &Corpus, params: &EncoderParams) -> Result<Tensor> {
    let ex = encoder::encode_all(params, &corpus.samples, Modality::X)?;
    let ey = encoder::encode_all(params, &corpus.samples, Modality::Y)?;
    Ok(ex.matmul(&ey.transpose()?)?)
}

/// Fraction of anchors `x_i` with at least one `j ≠ i` such that
/// `|s(x_i, y_j) − s(x_i, y_i)| ≤ ε`.
pub fn empirical_rho(corpus: &Corpus, params: &EncoderParams, epsilon: f64) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let s = similarity_matrix(corpus, params)?;
    Ok(rho_from_similarities(&s, epsilon))
}

pub fn rho_from_similarities(s: &Tensor, epsilon: f64) -> f64 {
    let n = s.rows();
    let hits = (0..n)
        .filter(|&i| {
            let pos = s.at(i, i);
            (0..n).any(|j| j != i && (s.at(i, j) - pos).abs() <= epsilon)
        })
        .count();
    hits as f64 / n as f64
}

/// Fraction of anchors whose planted partner lies within `ε` of the anchor's
/// positive similarity under `params`.
pub fn planted_fraction(corpus: &Corpus, params: &EncoderParams, epsilon: f64) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let s = similarity_matrix(corpus, params)?;
    let partners = corpus.sibling_partners();
    let hits = partners
        .iter()
        .enumerate()
        .filter(|(i, ps)| ps.iter().any(|&j| (s.at(*i, j) - s.at(*i, *i)).abs() <= epsilon))
        .count();
    Ok(hits as f64 / corpus.len() as f64)
}
