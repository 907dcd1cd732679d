//! Micro patch-token transformer with a shallow domain head, a deep semantic
//! head, cosine prototype banks and the mutual-information critic.
//!
//! Activations are batched: a batch of `B` samples with `P` patches is laid
//! out as `[B, P + 1, D]` tokens (CLS first). Every block is pre-norm
//! attention followed by a GELU MLP, both with residual connections.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var, NORM_FLOOR};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub patch_count: usize,
    pub input_dim: usize,
    pub token_dim: usize,
    pub head_count: usize,
    /// Hidden width of each block MLP, as a multiple of `token_dim`.
    pub mlp_ratio: usize,
    /// Output width of each projection head.
    pub proj_dim: usize,
    pub critic_hidden: usize,
    /// 1-based block whose CLS output feeds the domain head.
    pub domain_tap_layer: usize,
    /// 1-based block feeding the semantic head; `None` means the last block.
    pub semantic_tap_layer: Option<usize>,
    pub k_s: usize,
    pub k_d: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            patch_count: 16,
            input_dim: 8,
            token_dim: 32,
            head_count: 4,
            mlp_ratio: 2,
            proj_dim: 16,
            critic_hidden: 32,
            domain_tap_layer: 1,
            semantic_tap_layer: None,
            k_s: 10,
            k_d: 2,
        }
    }
}

impl EncoderConfig {
    pub fn semantic_tap(&self) -> usize {
        self.semantic_tap_layer.unwrap_or(self.num_layers)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("patch_count", self.patch_count),
            ("input_dim", self.input_dim),
            ("token_dim", self.token_dim),
            ("head_count", self.head_count),
            ("mlp_ratio", self.mlp_ratio),
            ("proj_dim", self.proj_dim),
            ("critic_hidden", self.critic_hidden),
            ("k_s", self.k_s),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder.{name} must be positive")));
        }
        if self.token_dim % self.head_count != 0 {
            return Err(Error::Config(format!(
                "encoder.head_count {} does not divide token_dim {}",
                self.head_count, self.token_dim
            )));
        }
        let m = self.num_layers;
        for (name, tap) in [("domain_tap_layer", self.domain_tap_layer), ("semantic_tap_layer", self.semantic_tap())] {
            if tap == 0 || tap > m {
                return Err(Error::Config(format!("encoder.{name} = {tap} outside [1, {m}]")));
            }
        }
        if self.k_d < 2 {
            return Err(Error::Config(format!("encoder.k_d must be >= 2, got {}", self.k_d)));
        }
        Ok(())
    }
}

/// A named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// All learnable state: embedding, blocks, heads, prototypes and critic.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub config: EncoderConfig,
    pub params: Vec<Param>,
}

/// Which prototype bank to score against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bank {
    Semantic,
    Domain,
}

impl Bank {
    fn param(self) -> &'static str {
        match self {
            Bank::Semantic => "proto_s",
            Bank::Domain => "proto_d",
        }
    }
}

/// Per-sample outputs of a forward pass, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs {
    pub z_d: Vec<f64>,
    pub z_s: Vec<f64>,
    /// Normalized CLS feature at the semantic tap (the last block by default).
    pub z_hat: Vec<f64>,
    /// Normalized CLS feature at the domain tap.
    pub z_hat_d: Vec<f64>,
    pub attn_cls: Vec<f64>,
}

/// Batched forward outputs on a tape.
pub struct Features<'t> {
    /// `[B, proj_dim]`, unit rows.
    pub z_d: Var<'t>,
    /// `[B, proj_dim]`, unit rows.
    pub z_s: Var<'t>,
    /// `[B, token_dim]`, unit rows.
    pub z_hat: Var<'t>,
    /// `[B, token_dim]`, unit rows.
    pub z_hat_d: Var<'t>,
    /// Head-averaged CLS-to-patch attention of the last block, renormalized
    /// over patches; one row of length `P` per sample.
    pub attn_cls: Vec<Vec<f64>>,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

fn normalize_rows(t: &mut Tensor) {
    for i in 0..t.rows() {
        let row = t.row_mut(i);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        row.iter_mut().for_each(|v| *v /= n);
    }
}

impl EncoderState {
    /// Deterministic initialization: Gaussian weights scaled by `1/sqrt(fan_in)`,
    /// zero biases, unit layer-norm gains, unit-norm random prototypes.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.token_dim;
        let hidden = config.mlp_ratio * d;
        let mut params = Vec::new();
        let mut push = |name: String, value: Tensor| params.push(Param { name, value });
        let fan = |n: usize| 1.0 / (n as f64).sqrt();

        push("embed.weight".into(), gaussian(&mut rng, &[config.input_dim, d], fan(config.input_dim)));
        push("embed.bias".into(), Tensor::zeros(&[d]));
        push("embed.pos".into(), gaussian(&mut rng, &[config.patch_count, d], fan(d)));
        push("embed.cls".into(), gaussian(&mut rng, &[1, d], fan(d)));
        for b in 1..=config.num_layers {
            let p = format!("block{b}");
            push(format!("{p}.ln1.gain"), Tensor::full(&[d], 1.0));
            push(format!("{p}.ln1.bias"), Tensor::zeros(&[d]));
            push(format!("{p}.attn.qkv.weight"), gaussian(&mut rng, &[d, 3 * d], fan(d)));
            // no key bias: it shifts every score of a query equally, so softmax ignores it
            push(format!("{p}.attn.qv.bias"), Tensor::zeros(&[2 * d]));
            push(format!("{p}.attn.out.weight"), gaussian(&mut rng, &[d, d], fan(d)));
            push(format!("{p}.attn.out.bias"), Tensor::zeros(&[d]));
            push(format!("{p}.ln2.gain"), Tensor::full(&[d], 1.0));
            push(format!("{p}.ln2.bias"), Tensor::zeros(&[d]));
            push(format!("{p}.mlp.fc1.weight"), gaussian(&mut rng, &[d, hidden], fan(d)));
            push(format!("{p}.mlp.fc1.bias"), Tensor::zeros(&[hidden]));
            push(format!("{p}.mlp.fc2.weight"), gaussian(&mut rng, &[hidden, d], fan(hidden)));
            push(format!("{p}.mlp.fc2.bias"), Tensor::zeros(&[d]));
        }
        for head in ["head_d", "head_s"] {
            push(format!("{head}.fc1.weight"), gaussian(&mut rng, &[d, d], fan(d)));
            push(format!("{head}.fc1.bias"), Tensor::zeros(&[d]));
            push(format!("{head}.fc2.weight"), gaussian(&mut rng, &[d, config.proj_dim], fan(d)));
            push(format!("{head}.fc2.bias"), Tensor::zeros(&[config.proj_dim]));
        }
        for (name, k) in [("proto_s", config.k_s), ("proto_d", config.k_d)] {
            let mut w = gaussian(&mut rng, &[k, d], 1.0);
            normalize_rows(&mut w);
            push(name.into(), w);
        }
        let c = config.critic_hidden;
        push("critic.fc1.weight".into(), gaussian(&mut rng, &[2 * config.proj_dim, c], fan(2 * config.proj_dim)));
        push("critic.fc1.bias".into(), Tensor::zeros(&[c]));
        push("critic.fc2.weight".into(), gaussian(&mut rng, &[c, 1], fan(c)));
        push("critic.fc2.bias".into(), Tensor::zeros(&[1]));
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Parameter count of tensors whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Re-projects every prototype row onto the unit sphere.
    pub fn renormalize_prototypes(&mut self) {
        for p in &mut self.params {
            if p.name == "proto_s" || p.name == "proto_d" {
                normalize_rows(&mut p.value);
            }
        }
    }

    /// All parameters back to back, in declaration order.
    pub fn flatten(&self) -> Tensor {
        let data = self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect();
        Tensor::from_vec(data)
    }

    /// Inverse of [`EncoderState::flatten`].
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(Error::shape("unflatten", &[self.num_parameters()], &[flat.len()]));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Places parameters on `tape`, tracked or not.
    pub fn bind<'t>(&self, tape: &'t Tape, tracked: bool) -> Bound<'t> {
        let vars = self
            .params
            .iter()
            .map(|p| if tracked { tape.leaf(&p.value) } else { tape.constant(&p.value) })
            .collect();
        Bound::new(self, tape, vars)
    }

    /// Binds parameters as slices of one flat vector (see [`EncoderState::flatten`]).
    pub fn bind_flat<'t>(&self, tape: &'t Tape, flat: Var<'t>) -> Result<Bound<'t>> {
        let mut offset = 0;
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let n = p.value.numel();
            vars.push(flat.slice(0, offset, offset + n)?.reshape(p.value.shape())?);
            offset += n;
        }
        Ok(Bound::new(self, tape, vars))
    }

    /// Single-sample convenience forward over raw patches `[P, input_dim]`.
    pub fn forward_sample(&self, patches: &Tensor) -> Result<ForwardOutputs> {
        let mut outs = self.forward_batch(std::slice::from_ref(patches))?;
        Ok(outs.pop().expect("one sample in, one out"))
    }

    /// Inference over a list of raw patch matrices.
    pub fn forward_batch(&self, samples: &[Tensor]) -> Result<Vec<ForwardOutputs>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let x = stack_patches(&tape, samples, &self.config)?;
        let feats = bound.forward(bound.embed(x)?)?;
        let (zd, zs, zh, zhd) = (feats.z_d.value(), feats.z_s.value(), feats.z_hat.value(), feats.z_hat_d.value());
        let (p, d) = (self.config.proj_dim, self.config.token_dim);
        Ok((0..samples.len())
            .map(|i| ForwardOutputs {
                z_d: zd[i * p..(i + 1) * p].to_vec(),
                z_s: zs[i * p..(i + 1) * p].to_vec(),
                z_hat: zh[i * d..(i + 1) * d].to_vec(),
                z_hat_d: zhd[i * d..(i + 1) * d].to_vec(),
                attn_cls: feats.attn_cls[i].clone(),
            })
            .collect())
    }

    /// Writes the textual checkpoint format (see `docs/formats.md`).
    pub fn to_text(&self) -> Result<String> {
        let mut out = String::from("hilo-encoder 1\n");
        writeln!(out, "config {}", serde_json::to_string(&self.config)?).expect("string write");
        for p in &self.params {
            let dims: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
            writeln!(out, "param {} {} {}", p.name, dims.len(), dims.join(" ")).expect("string write");
            let vals: Vec<String> = p.value.data().iter().map(f64::to_string).collect();
            writeln!(out, "{}", vals.join(" ")).expect("string write");
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("unexpected end of checkpoint, expected {what}"),
            })
        };
        let (ln, header) = next("header")?;
        if header.trim() != "hilo-encoder 1" {
            return Err(Error::Parse { line: ln + 1, msg: format!("bad header {header:?}") });
        }
        let (ln, cfg) = next("config")?;
        let cfg = cfg.strip_prefix("config ").ok_or_else(|| Error::Parse { line: ln + 1, msg: "expected config line".into() })?;
        let config: EncoderConfig = serde_json::from_str(cfg)?;
        let mut state = Self::init(&config, 0)?;
        for p in &mut state.params {
            let (ln, head) = next("param header")?;
            let fields: Vec<&str> = head.split_whitespace().collect();
            let bad = |msg: String| Error::Parse { line: ln + 1, msg };
            if fields.len() < 3 || fields[0] != "param" || fields[1] != p.name {
                return Err(bad(format!("expected param {}, got {head:?}", p.name)));
            }
            let ndim: usize = fields[2].parse().map_err(|_| bad("bad rank".into()))?;
            let dims: Vec<usize> = fields[3..]
                .iter()
                .map(|f| f.parse().map_err(|_| bad(format!("bad dimension {f:?}"))))
                .collect::<Result<_>>()?;
            if dims.len() != ndim || dims != p.value.shape() {
                return Err(bad(format!("shape {dims:?} does not match {:?}", p.value.shape())));
            }
            let (ln, vals) = next("param values")?;
            let vals: Vec<f64> = vals
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| Error::Parse { line: ln + 1, msg: format!("bad value {v:?}") }))
                .collect::<Result<_>>()?;
            p.value = Tensor::new(dims, vals).map_err(|e| Error::Parse { line: ln + 1, msg: e.to_string() })?;
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Stacks raw patch matrices into a `[B, P, input_dim]` constant.
pub fn stack_patches<'t>(tape: &'t Tape, samples: &[Tensor], config: &EncoderConfig) -> Result<Var<'t>> {
    let (p, dim) = (config.patch_count, config.input_dim);
    let mut data = Vec::with_capacity(samples.len() * p * dim);
    for s in samples {
        if s.shape() != [p, dim] {
            return Err(Error::invalid(format!(
                "expected patches of shape [{p}, {dim}], got {:?}",
                s.shape()
            )));
        }
        data.extend_from_slice(s.data());
    }
    tape.constant_from(&[samples.len(), p, dim], data)
}

/// Encoder parameters placed on a tape.
pub struct Bound<'t> {
    tape: &'t Tape,
    config: EncoderConfig,
    vars: Vec<Var<'t>>,
    index: HashMap<String, usize>,
}

impl<'t> Bound<'t> {
    fn new(state: &EncoderState, tape: &'t Tape, vars: Vec<Var<'t>>) -> Self {
        let index = state.params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Self {
            tape,
            config: state.config.clone(),
            vars,
            index,
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Parameter handles in declaration order.
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Var<'t> {
        self.vars[self.index[name]]
    }

    /// Puts a gradient-reversal node between every critic parameter and its
    /// uses, so a single backward pass descends the loss for the encoder and
    /// ascends it for the critic. Forward values are unchanged.
    pub fn reverse_critic(&mut self) {
        let mut ids: Vec<usize> = self
            .index
            .iter()
            .filter(|(name, _)| name.starts_with("critic."))
            .map(|(_, &i)| i)
            .collect();
        ids.sort_unstable();
        for i in ids {
            self.vars[i] = self.vars[i].grad_reverse();
        }
    }

    fn linear(&self, x: Var<'t>, prefix: &str) -> Result<Var<'t>> {
        x.matmul(self.get(&format!("{prefix}.weight")))?
            .add_row(self.get(&format!("{prefix}.bias")))
    }

    fn norm(&self, x: Var<'t>, prefix: &str) -> Result<Var<'t>> {
        x.layer_norm(LN_EPS)
            .mul_row(self.get(&format!("{prefix}.gain")))?
            .add_row(self.get(&format!("{prefix}.bias")))
    }

    /// Patch embedding: `[B, P, input_dim]` to `[B, P + 1, D]` with CLS first.
    pub fn embed(&self, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let (p, dim, d) = (self.config.patch_count, self.config.input_dim, self.config.token_dim);
        if shape.len() != 3 || shape[1] != p || shape[2] != dim {
            return Err(Error::invalid(format!(
                "embed expects [B, {p}, {dim}] patches, got {shape:?}"
            )));
        }
        let b = shape[0];
        let tokens = self.linear(x.reshape(&[b * p, dim])?, "embed")?;
        let pos = self.get("embed.pos").reshape(&[p * d])?;
        let tokens = tokens.reshape(&[b, p * d])?.add_row(pos)?.reshape(&[b, p, d])?;
        let cls = self.get("embed.cls").index_select(&vec![0; b])?.reshape(&[b, 1, d])?;
        Var::concat(&[cls, tokens], 1)
    }

    /// Runs all blocks over embedded tokens `[B, P + 1, D]`.
    pub fn forward(&self, tokens: Var<'t>) -> Result<Features<'t>> {
        let c = &self.config;
        let (t, d, h) = (c.patch_count + 1, c.token_dim, c.head_count);
        let shape = tokens.shape();
        if shape.len() != 3 || shape[1] != t || shape[2] != d {
            return Err(Error::invalid(format!("forward expects [B, {t}, {d}] tokens, got {shape:?}")));
        }
        let b = shape[0];
        let dh = d / h;
        let cls_rows: Vec<usize> = (0..b).map(|i| i * t).collect();
        let mut x = tokens.reshape(&[b * t, d])?;
        let mut taps = Vec::with_capacity(c.num_layers);
        let mut last_attn = None;
        for layer in 1..=c.num_layers {
            let p = format!("block{layer}");
            let hn = self.norm(x, &format!("{p}.ln1"))?;
            let qv_bias = self.get(&format!("{p}.attn.qv.bias"));
            let bias = Var::concat(
                &[
                    qv_bias.slice(0, 0, d)?,
                    self.tape.constant_from(&[d], vec![0.0; d])?,
                    qv_bias.slice(0, d, 2 * d)?,
                ],
                0,
            )?;
            let qkv = hn.matmul(self.get(&format!("{p}.attn.qkv.weight")))?.add_row(bias)?;
            let split_heads = |k: usize| -> Result<Var<'t>> {
                qkv.slice(1, k * d, (k + 1) * d)?
                    .reshape(&[b, t, h, dh])?
                    .permute(&[0, 2, 1, 3])?
                    .reshape(&[b * h, t, dh])
            };
            let (q, k, v) = (split_heads(0)?, split_heads(1)?, split_heads(2)?);
            let attn = q.bmm_nt(k)?.scale(1.0 / (dh as f64).sqrt()).softmax(1.0)?;
            let ctx = attn
                .bmm(v)?
                .reshape(&[b, h, t, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b * t, d])?;
            x = x.add(self.linear(ctx, &format!("{p}.attn.out"))?)?;
            let hn = self.norm(x, &format!("{p}.ln2"))?;
            let mlp = self.linear(self.linear(hn, &format!("{p}.mlp.fc1"))?.gelu(), &format!("{p}.mlp.fc2"))?;
            x = x.add(mlp)?;
            if x.value().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("activation after block {layer}")));
            }
            taps.push(x.index_select(&cls_rows)?);
            last_attn = Some(attn);
        }
        let attn = last_attn.expect("at least one block").value();
        let attn_cls = (0..b)
            .map(|i| {
                let mut s = vec![0.0; t - 1];
                for head in 0..h {
                    let row = &attn[((i * h + head) * t) * t..((i * h + head) * t + 1) * t];
                    s.iter_mut().zip(&row[1..]).for_each(|(a, r)| *a += r);
                }
                let z: f64 = s.iter().sum();
                s.iter_mut().for_each(|a| *a /= z);
                s
            })
            .collect();
        let cls_d = taps[c.domain_tap_layer - 1];
        let cls_s = taps[c.semantic_tap() - 1];
        Ok(Features {
            z_d: self.head(cls_d, "head_d")?,
            z_s: self.head(cls_s, "head_s")?,
            z_hat: cls_s.l2_normalize(NORM_FLOOR),
            z_hat_d: cls_d.l2_normalize(NORM_FLOOR),
            attn_cls,
        })
    }

    fn head(&self, x: Var<'t>, prefix: &str) -> Result<Var<'t>> {
        let h = self.linear(x, &format!("{prefix}.fc1"))?.gelu();
        Ok(self.linear(h, &format!("{prefix}.fc2"))?.l2_normalize(NORM_FLOOR))
    }

    /// Dot products of unit features `[B, D]` with a prototype bank: `[B, k]`.
    pub fn prototype_scores(&self, features: Var<'t>, bank: Bank) -> Result<Var<'t>> {
        features.matmul_nt(self.get(bank.param()))
    }

    /// Critic on aligned pairs: row `i` scores `[z_d_i ; z_s_i]`. Returns `[N]`.
    pub fn critic_pairs(&self, z_d: Var<'t>, z_s: Var<'t>) -> Result<Var<'t>> {
        let n = z_d.shape()[0];
        let x = Var::concat(&[z_d, z_s], 1)?;
        let h = self.linear(x, "critic.fc1")?.gelu();
        self.linear(h, "critic.fc2")?.reshape(&[n])
    }

    /// Critic on every pairing: entry `(i, j)` scores `[z_d_i ; z_s_j]`. Returns `[n, n]`.
    ///
    /// The first layer is split across the concatenation so the `n^2` pairs
    /// cost one addition each instead of one matmul row each.
    pub fn critic_grid(&self, z_d: Var<'t>, z_s: Var<'t>) -> Result<Var<'t>> {
        let n = z_d.shape()[0];
        let p = self.config.proj_dim;
        let w1 = self.get("critic.fc1.weight");
        let a = z_d.matmul(w1.slice(0, 0, p)?)?;
        let s = z_s.matmul(w1.slice(0, p, 2 * p)?)?;
        let rows: Vec<usize> = (0..n * n).map(|ij| ij / n).collect();
        let cols: Vec<usize> = (0..n * n).map(|ij| ij % n).collect();
        let h = a
            .index_select(&rows)?
            .add(s.index_select(&cols)?)?
            .add_row(self.get("critic.fc1.bias"))?
            .gelu();
        self.linear(h, "critic.fc2")?.reshape(&[n, n])
    }
}

/// `softmax(feature · w / tau)` over a prototype bank given as rows.
pub fn cosine_logits(feature: &[f64], prototypes: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    let dots: Vec<f64> = prototypes
        .iter()
        .map(|w| {
            if w.len() != feature.len() {
                return Err(Error::shape("cosine_logits", &[feature.len()], &[w.len()]));
            }
            Ok(w.iter().zip(feature).map(|(a, b)| a * b).sum::<f64>() / tau)
        })
        .collect::<Result<_>>()?;
    let mx = dots.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = dots.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}
