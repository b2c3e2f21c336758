//! The toy autoregressive softmax policy standing in for the LLM.
//!
//! Architecture: the hidden state is the mean over all prefix rows
//! (soft-prompt rows followed by token embeddings), mapped through a linear
//! output layer:
//!
//! ```text
//! h      = mean([soft_prompt; embed[context]])     (zero vector if empty)
//! logits = out_map . h + out_bias
//! ```
//!
//! There are no positional features, so soft-prompt information enters the
//! same way at every step and permuting soft-prompt rows never changes a
//! logit. Log-probabilities are exact sums of per-step log-softmax terms;
//! sampling is ancestral with EOS forced at the length budget.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{response_well_formed, Token};
use crate::error::{Error, Result};
use crate::num::log_softmax_into;
use crate::tensor::{axpy, dot, Matrix};

/// Parameters of the policy: token embeddings, output projection and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    /// `vocab_size x d` token embedding table.
    pub embed: Matrix,
    /// `vocab_size x d` output projection.
    pub out_map: Matrix,
    /// Per-token logit bias.
    pub out_bias: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(vocab_size: usize, d: usize) -> Self {
        PolicyParams {
            embed: Matrix::zeros(vocab_size, d),
            out_map: Matrix::zeros(vocab_size, d),
            out_bias: vec![0.0; vocab_size],
        }
    }

    /// Random init: embedding and projection entries uniform on
    /// `[-scale, scale]`, bias zero.
    pub fn seeded(vocab_size: usize, d: usize, scale: f64, rng: &mut impl Rng) -> Self {
        PolicyParams {
            embed: Matrix::uniform(vocab_size, d, scale, rng),
            out_map: Matrix::uniform(vocab_size, d, scale, rng),
            out_bias: vec![0.0; vocab_size],
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.rows()
    }

    pub fn dim(&self) -> usize {
        self.embed.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_map.rows() != self.embed.rows() || self.out_bias.len() != self.embed.rows() {
            return Err(Error::Validation {
                field: "out_map",
                message: "row counts of embed, out_map and out_bias must agree".into(),
            });
        }
        if self.out_map.cols() != self.embed.cols() {
            return Err(Error::Validation {
                field: "out_map",
                message: "embed and out_map widths must agree".into(),
            });
        }
        if !self.embed.all_finite() || !self.out_map.all_finite() {
            return Err(Error::Validation {
                field: "embed",
                message: "non-finite parameter entry".into(),
            });
        }
        if self.out_bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation {
                field: "out_bias",
                message: "non-finite parameter entry".into(),
            });
        }
        Ok(())
    }
}

/// Learned rows prepended to the input embedding sequence. May be empty,
/// in which case the policy is unconditioned.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPrompt {
    pub rows: Matrix,
}

impl SoftPrompt {
    pub fn empty(d: usize) -> Self {
        SoftPrompt {
            rows: Matrix::zeros(0, d),
        }
    }

    pub fn from_rows(rows: Matrix) -> Self {
        SoftPrompt { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Gradient accumulator mirroring [`PolicyParams`].
#[derive(Clone, Debug)]
pub struct PolicyGrad {
    pub embed: Matrix,
    pub out_map: Matrix,
    pub out_bias: Vec<f64>,
}

impl PolicyGrad {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        PolicyGrad {
            embed: Matrix::zeros(params.embed.rows(), params.embed.cols()),
            out_map: Matrix::zeros(params.out_map.rows(), params.out_map.cols()),
            out_bias: vec![0.0; params.out_bias.len()],
        }
    }
}

/// Running sum of prefix rows; the hidden state is `sum / count`.
struct Prefix {
    sum: Vec<f64>,
    count: usize,
}

impl Prefix {
    fn new(params: &PolicyParams, soft_prompt: &SoftPrompt, context: &[Token]) -> Self {
        let d = params.dim();
        debug_assert!(
            soft_prompt.is_empty() || soft_prompt.rows.cols() == d,
            "soft prompt width must equal the policy dimension"
        );
        let mut sum = vec![0.0; d];
        for r in 0..soft_prompt.len() {
            axpy(1.0, soft_prompt.rows.row(r), &mut sum);
        }
        for t in context {
            axpy(1.0, params.embed.row(t.0 as usize), &mut sum);
        }
        Prefix {
            sum,
            count: soft_prompt.len() + context.len(),
        }
    }

    fn push(&mut self, params: &PolicyParams, token: Token) {
        axpy(1.0, params.embed.row(token.0 as usize), &mut self.sum);
        self.count += 1;
    }

    fn hidden_into(&self, h: &mut [f64]) {
        if self.count == 0 {
            h.fill(0.0);
        } else {
            let inv = 1.0 / self.count as f64;
            for (hi, si) in h.iter_mut().zip(&self.sum) {
                *hi = si * inv;
            }
        }
    }
}

fn logits_from_hidden(params: &PolicyParams, h: &[f64], logits: &mut [f64]) {
    for (v, logit) in logits.iter_mut().enumerate() {
        *logit = params.out_bias[v] + dot(params.out_map.row(v), h);
    }
}

/// Next-token logits for the given prefix. Deterministic.
pub fn next_token_logits(
    params: &PolicyParams,
    soft_prompt: &SoftPrompt,
    context: &[Token],
) -> Vec<f64> {
    let prefix = Prefix::new(params, soft_prompt, context);
    let mut h = vec![0.0; params.dim()];
    let mut logits = vec![0.0; params.vocab_size()];
    prefix.hidden_into(&mut h);
    logits_from_hidden(params, &h, &mut logits);
    logits
}

fn check_response(response: &[Token]) -> Result<()> {
    if !response_well_formed(response) {
        return Err(Error::domain(
            "response must end with EOS and contain EOS nowhere earlier",
        ));
    }
    Ok(())
}

/// Exact log-probability `sum_t log softmax(logits_t)[y_t]` of a response
/// given a prompt and soft prompt. Always `<= 0`.
pub fn logprob_sequence(
    params: &PolicyParams,
    soft_prompt: &SoftPrompt,
    prompt: &[Token],
    response: &[Token],
) -> Result<f64> {
    check_response(response)?;
    let mut prefix = Prefix::new(params, soft_prompt, prompt);
    let vocab = params.vocab_size();
    let mut h = vec![0.0; params.dim()];
    let mut logits = vec![0.0; vocab];
    let mut logprobs = vec![0.0; vocab];
    let mut total = 0.0;
    for (i, &tok) in response.iter().enumerate() {
        prefix.hidden_into(&mut h);
        logits_from_hidden(params, &h, &mut logits);
        log_softmax_into(&logits, &mut logprobs);
        total += logprobs[tok.0 as usize];
        if i + 1 < response.len() {
            prefix.push(params, tok);
        }
    }
    Ok(total)
}

/// Like [`logprob_sequence`], additionally accumulating `scale` times the
/// gradient into `grad` (and, when given, `soft_grad` for the soft-prompt
/// rows). Returns the unscaled log-probability.
pub fn logprob_sequence_grad(
    params: &PolicyParams,
    soft_prompt: &SoftPrompt,
    prompt: &[Token],
    response: &[Token],
    scale: f64,
    grad: &mut PolicyGrad,
    soft_grad: Option<&mut Matrix>,
) -> Result<f64> {
    check_response(response)?;
    let vocab = params.vocab_size();
    let d = params.dim();
    let mut prefix = Prefix::new(params, soft_prompt, prompt);
    let mut h = vec![0.0; d];
    let mut logits = vec![0.0; vocab];
    let mut logprobs = vec![0.0; vocab];
    let mut total = 0.0;
    // Per-step gradient w.r.t. the running row sum; empty marks steps with
    // no prefix rows (the hidden state is constant zero there).
    let mut sum_grads: Vec<Vec<f64>> = Vec::with_capacity(response.len());

    for (i, &tok) in response.iter().enumerate() {
        prefix.hidden_into(&mut h);
        logits_from_hidden(params, &h, &mut logits);
        log_softmax_into(&logits, &mut logprobs);
        let target = tok.0 as usize;
        total += logprobs[target];

        // d logp / d logits = onehot(target) - softmax(logits)
        let mut g_hidden = vec![0.0; d];
        for (v, lp) in logprobs.iter().enumerate() {
            let delta = (v == target) as u64 as f64 - lp.exp();
            let scaled = scale * delta;
            grad.out_bias[v] += scaled;
            if prefix.count > 0 {
                axpy(scaled, &h, grad.out_map.row_mut(v));
            }
            axpy(scaled, params.out_map.row(v), &mut g_hidden);
        }
        if prefix.count > 0 {
            let inv = 1.0 / prefix.count as f64;
            for g in g_hidden.iter_mut() {
                *g *= inv;
            }
            sum_grads.push(g_hidden);
        } else {
            sum_grads.push(Vec::new());
        }

        if i + 1 < response.len() {
            prefix.push(params, tok);
        }
    }

    // Each prefix row receives the summed per-step gradients of the steps it
    // participates in: response token y_t in steps > t, soft-prompt and
    // prompt rows in every step.
    let mut acc = vec![0.0; d];
    for (t, &tok) in response.iter().enumerate().rev() {
        axpy(1.0, &acc, grad.embed.row_mut(tok.0 as usize));
        if !sum_grads[t].is_empty() {
            axpy(1.0, &sum_grads[t], &mut acc);
        }
    }
    for t in prompt {
        axpy(1.0, &acc, grad.embed.row_mut(t.0 as usize));
    }
    if let Some(sg) = soft_grad {
        debug_assert_eq!(sg.rows(), soft_prompt.len());
        for r in 0..sg.rows() {
            axpy(1.0, &acc, sg.row_mut(r));
        }
    }
    Ok(total)
}

fn categorical_draw(probs: &[f64], coin: f64) -> Token {
    let mut acc = 0.0;
    for (v, p) in probs.iter().enumerate() {
        acc += p;
        if coin < acc {
            return Token(v as u32);
        }
    }
    Token(probs.len() as u32 - 1)
}

/// Ancestral sampling until EOS, with EOS forced once `max_len - 1` non-EOS
/// tokens have been emitted. The result always satisfies the response
/// invariants and is deterministic given the RNG state.
pub fn sample_response_with(
    params: &PolicyParams,
    soft_prompt: &SoftPrompt,
    prompt: &[Token],
    max_len: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<Token> {
    assert!(max_len >= 1, "max_len must be at least 1");
    let vocab = params.vocab_size();
    let mut prefix = Prefix::new(params, soft_prompt, prompt);
    let mut h = vec![0.0; params.dim()];
    let mut logits = vec![0.0; vocab];
    let mut probs = vec![0.0; vocab];
    let mut response = Vec::new();
    loop {
        if response.len() == max_len - 1 {
            response.push(Token::EOS);
            return response;
        }
        prefix.hidden_into(&mut h);
        logits_from_hidden(params, &h, &mut logits);
        crate::num::softmax_into(&logits, &mut probs);
        let tok = categorical_draw(&probs, rng.random::<f64>());
        response.push(tok);
        if tok.is_eos() {
            return response;
        }
        prefix.push(params, tok);
    }
}

/// [`sample_response_with`] seeded from a single integer.
pub fn sample_response(
    params: &PolicyParams,
    soft_prompt: &SoftPrompt,
    prompt: &[Token],
    max_len: usize,
    rng_seed: u64,
) -> Vec<Token> {
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    sample_response_with(params, soft_prompt, prompt, max_len, &mut rng)
}

/// Exact per-step next-token KL(pi || pi_ref) summed along the greedy
/// trajectory of `params`, up to `horizon` steps or until the greedy token
/// is EOS. Both policies see the same soft prompt and token context; each
/// embeds the context with its own table.
pub fn kl_to_reference(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    soft_prompt: &SoftPrompt,
    prompt: &[Token],
    horizon: usize,
) -> f64 {
    assert_eq!(
        params.vocab_size(),
        ref_params.vocab_size(),
        "policies must share a vocabulary"
    );
    assert_eq!(params.dim(), ref_params.dim(), "policies must share a width");
    let vocab = params.vocab_size();
    let mut pi = Prefix::new(params, soft_prompt, prompt);
    let mut rf = Prefix::new(ref_params, soft_prompt, prompt);
    let mut h = vec![0.0; params.dim()];
    let mut logits = vec![0.0; vocab];
    let mut lp = vec![0.0; vocab];
    let mut lq = vec![0.0; vocab];
    let mut kl = 0.0;
    for _ in 0..horizon {
        pi.hidden_into(&mut h);
        logits_from_hidden(params, &h, &mut logits);
        log_softmax_into(&logits, &mut lp);
        rf.hidden_into(&mut h);
        logits_from_hidden(ref_params, &h, &mut logits);
        log_softmax_into(&logits, &mut lq);
        for v in 0..vocab {
            kl += lp[v].exp() * (lp[v] - lq[v]);
        }
        // Greedy token of pi, lowest index on ties.
        let mut best = 0;
        for v in 1..vocab {
            if lp[v] > lp[best] {
                best = v;
            }
        }
        let tok = Token(best as u32);
        if tok.is_eos() {
            break;
        }
        pi.push(params, tok);
        rf.push(ref_params, tok);
    }
    kl
}

#[derive(Serialize, Deserialize)]
struct PolicyHeader {
    vocab_size: usize,
    d: usize,
}

fn write_row(writer: &mut impl Write, row: &[f64], path: &Path) -> Result<()> {
    let mut line = String::new();
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            line.push(' ');
        }
        line.push_str(&format!("{v}"));
    }
    writeln!(writer, "{line}").map_err(|e| Error::io(path, e))
}

fn parse_row(line: &str, expected: usize, line_no: usize) -> Result<Vec<f64>> {
    let values: std::result::Result<Vec<f64>, _> =
        line.split_whitespace().map(str::parse::<f64>).collect();
    let values = values.map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    if values.len() != expected {
        return Err(Error::Parse {
            line: line_no,
            message: format!("expected {expected} values, found {}", values.len()),
        });
    }
    Ok(values)
}

/// Writes a policy checkpoint: a JSON header line followed by row-major
/// decimal text for embed, out_map and out_bias.
pub fn save_policy(params: &PolicyParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    params.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    let header = PolicyHeader {
        vocab_size: params.vocab_size(),
        d: params.dim(),
    };
    writeln!(writer, "{}", serde_json::to_string(&header).expect("header json"))
        .map_err(|e| Error::io(path, e))?;
    for r in 0..params.embed.rows() {
        write_row(&mut writer, params.embed.row(r), path)?;
    }
    for r in 0..params.out_map.rows() {
        write_row(&mut writer, params.out_map.row(r), path)?;
    }
    write_row(&mut writer, &params.out_bias, path)?;
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn load_policy(path: impl AsRef<Path>) -> Result<PolicyParams> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = Vec::new();
    for line in reader.lines() {
        lines.push(line.map_err(|e| Error::io(path, e))?);
    }
    if lines.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "missing checkpoint header".into(),
        });
    }
    let header: PolicyHeader = serde_json::from_str(&lines[0]).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let expected_lines = 1 + 2 * header.vocab_size + 1;
    if lines.len() != expected_lines {
        return Err(Error::Parse {
            line: lines.len(),
            message: format!("expected {expected_lines} lines, found {}", lines.len()),
        });
    }
    let mut embed = Vec::with_capacity(header.vocab_size * header.d);
    let mut out_map = Vec::with_capacity(header.vocab_size * header.d);
    for r in 0..header.vocab_size {
        embed.extend(parse_row(&lines[1 + r], header.d, 2 + r)?);
    }
    for r in 0..header.vocab_size {
        out_map.extend(parse_row(&lines[1 + header.vocab_size + r], header.d, 2 + header.vocab_size + r)?);
    }
    let out_bias = parse_row(&lines[expected_lines - 1], header.vocab_size, expected_lines)?;
    let params = PolicyParams {
        embed: Matrix::from_vec(header.vocab_size, header.d, embed),
        out_map: Matrix::from_vec(header.vocab_size, header.d, out_map),
        out_bias,
    };
    params.validate()?;
    Ok(params)
}
