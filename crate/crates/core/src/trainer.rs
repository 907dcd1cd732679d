//! Training loop for the SimGCD baseline and HiLo, with the ablation switches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::bounds::{confidence_term, domain_errors, proxy_a_distance, thm_bounds, BoundReport, BoundsConfig};
use crate::clustering::{cluster_acc, ss_kmeans, AccReport};
use crate::curriculum::{draw_batch, partition_domains, sample_weights, CurriculumConfig, DomainPartition};
use crate::encoder::{cosine_logits, stack_patches, Bank, Bound, EncoderConfig, EncoderState, ForwardOutputs};
use crate::error::{Error, Result};
use crate::losses::{hilo_total, mi_js_value, one_hot, simgcd_loss, teacher_targets, HeadInputs, LossBundle, LossConfig};
use crate::patchmix::{make_mixed_views, mix_tokens, smooth_label, MixSpec, PatchMixConfig};
use crate::synthdata::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Simgcd,
    Hilo,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Simgcd => "simgcd",
            Mode::Hilo => "hilo",
        }
    }
}

/// Ablation switches of HiLo mode. The `*_only` component flags keep a single
/// component; the `no_*` flags then remove components from what is left.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    pub no_mi: bool,
    pub no_curriculum: bool,
    pub no_patchmix: bool,
    /// Both heads read the last block.
    pub deep_only: bool,
    /// Both heads read the first block.
    pub shallow_only: bool,
    pub patchmix_only: bool,
    /// Domain head and MI term only.
    pub mi_only: bool,
    pub curriculum_only: bool,
}

impl Ablations {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    /// Named presets: `hilo`, `simgcd` and one per flag.
    pub fn preset(name: &str) -> Option<(Mode, Ablations)> {
        let mut a = Ablations::default();
        match name {
            "simgcd" => return Some((Mode::Simgcd, a)),
            "hilo" => {}
            "no_mi" => a.no_mi = true,
            "no_curriculum" => a.no_curriculum = true,
            "no_patchmix" => a.no_patchmix = true,
            "deep_only" => a.deep_only = true,
            "shallow_only" => a.shallow_only = true,
            "patchmix_only" => a.patchmix_only = true,
            "mi_only" => a.mi_only = true,
            "curriculum_only" => a.curriculum_only = true,
            _ => return None,
        }
        Some((Mode::Hilo, a))
    }

    /// Rows of the component ablation table, in order.
    pub const TABLE3: [&'static str; 7] = [
        "simgcd",
        "patchmix_only",
        "mi_only",
        "curriculum_only",
        "hilo",
        "deep_only",
        "shallow_only",
    ];

    /// Full HiLo with one component removed at a time.
    pub const LEAVE_ONE_OUT: [&'static str; 3] = ["no_mi", "no_curriculum", "no_patchmix"];
}

/// Which parts of the objective and sampler are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Components {
    pub mi: bool,
    pub domain_head: bool,
    pub patchmix: bool,
    pub curriculum: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub ablations: Ablations,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub eval_every: usize,
    /// View noise standard deviation as a multiple of the data's standard deviation.
    pub jitter: f64,
    /// Probability of zeroing each patch of a view.
    pub patch_mask: f64,
    /// Lloyd iterations of the per-batch domain pseudo-labelling.
    pub domain_kmeans_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Hilo,
            ablations: Ablations::default(),
            epochs: 60,
            batch_size: 64,
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            eval_every: 10,
            jitter: 0.05,
            patch_mask: 0.1,
            domain_kmeans_iters: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        let a = &self.ablations;
        if self.mode == Mode::Simgcd && !a.is_empty() {
            return bad("ablation flags apply to hilo mode only");
        }
        if a.deep_only && a.shallow_only {
            return bad("deep_only and shallow_only are mutually exclusive");
        }
        if [a.patchmix_only, a.mi_only, a.curriculum_only].iter().filter(|&&f| f).count() > 1 {
            return bad("at most one of patchmix_only, mi_only, curriculum_only may be set");
        }
        if self.epochs == 0 || self.batch_size < 2 {
            return bad("train.epochs must be >= 1 and train.batch_size >= 2");
        }
        if self.eval_every == 0 || self.epochs % self.eval_every != 0 {
            return bad("train.eval_every must be positive and divide train.epochs");
        }
        if !(self.lr0 >= 0.0 && (0.0..1.0).contains(&self.momentum) && self.weight_decay >= 0.0) {
            return bad("need lr0 >= 0, momentum in [0, 1) and weight_decay >= 0");
        }
        if !(self.jitter >= 0.0 && (0.0..1.0).contains(&self.patch_mask)) {
            return bad("need jitter >= 0 and patch_mask in [0, 1)");
        }
        Ok(())
    }

    pub fn components(&self) -> Components {
        if self.mode == Mode::Simgcd {
            return Components {
                mi: false,
                domain_head: false,
                patchmix: false,
                curriculum: false,
            };
        }
        let a = &self.ablations;
        let only = a.patchmix_only || a.mi_only || a.curriculum_only;
        let keep = |flag: bool| !only || flag;
        Components {
            mi: keep(a.mi_only) && !a.no_mi,
            domain_head: keep(a.mi_only) && !a.no_mi,
            patchmix: keep(a.patchmix_only) && !a.no_patchmix,
            curriculum: keep(a.curriculum_only) && !a.no_curriculum,
        }
    }

    /// The encoder layout this run trains: the tap layers follow `deep_only`
    /// and `shallow_only`.
    pub fn encoder_config(&self, base: &EncoderConfig) -> EncoderConfig {
        let mut cfg = base.clone();
        if self.ablations.deep_only {
            cfg.domain_tap_layer = cfg.num_layers;
            cfg.semantic_tap_layer = Some(cfg.num_layers);
        } else if self.ablations.shallow_only {
            cfg.domain_tap_layer = 1;
            cfg.semantic_tap_layer = Some(1);
        }
        cfg
    }

    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// `lr0 · ½(1 + cos(π t / T))` for 0-based epoch `t`.
pub fn cosine_lr(lr0: f64, t: usize, epochs: usize) -> f64 {
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / epochs as f64).cos())
}

/// SGD with heavy-ball momentum and coupled weight decay:
/// `v ← μv + g + λw`, `w ← w − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: f64,
    pub buffers: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(state: &EncoderState, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            lr: 0.0,
            buffers: state.params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    /// `grads[i]` is the gradient of parameter `i`, `None` when it did not
    /// take part in the loss.
    pub fn step(&mut self, state: &mut EncoderState, grads: &[Option<Vec<f64>>], lr: f64) -> Result<()> {
        if grads.len() != state.params.len() {
            return Err(Error::shape("Sgd::step", &[state.params.len()], &[grads.len()]));
        }
        self.lr = lr;
        for ((p, buf), g) in state.params.iter_mut().zip(&mut self.buffers).zip(grads) {
            let w = p.value.data_mut();
            if let Some(g) = g {
                if g.len() != w.len() {
                    return Err(Error::shape("Sgd::step gradient", &[w.len()], &[g.len()]));
                }
            }
            for j in 0..w.len() {
                let gj = g.as_ref().map_or(0.0, |g| g[j]);
                buf[j] = self.momentum * buf[j] + gj + self.weight_decay * w[j];
                w[j] -= lr * buf[j];
            }
        }
        Ok(())
    }
}

/// Everything that defines one batch's loss apart from the parameters.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    /// Augmented raw patches of the two views.
    pub views: [Vec<Tensor>; 2],
    /// Class of each labelled member, `None` for unlabelled ones.
    pub labels: Vec<Option<usize>>,
    pub mix: Option<[Vec<MixSpec>; 2]>,
    /// Domain pseudo-label of every member (labelled ones are 0).
    pub domain_labels: Option<Vec<usize>>,
    /// Fixed semantic teacher targets, one per row; computed from the current
    /// scores when absent.
    pub teacher: Option<Vec<Vec<f64>>>,
}

fn smoothed_rows(labels: &[Option<usize>], alpha: &[f64], k: usize, class: impl Fn(usize) -> usize) -> Result<Vec<Option<Vec<f64>>>> {
    let n = labels.len();
    (0..2 * n)
        .map(|i| labels[i % n].map(|c| smooth_label(&one_hot(class(c), k), alpha[i])).transpose())
        .collect()
}

/// Builds the loss of one batch on `bound`'s tape.
pub fn batch_loss<'t>(
    bound: &Bound<'t>,
    plan: &BatchPlan,
    mode: Mode,
    comps: Components,
    cfg: &LossConfig,
) -> Result<(Var<'t>, LossBundle)> {
    let n = plan.labels.len();
    if plan.views[0].len() != n || plan.views[1].len() != n {
        return Err(Error::invalid("both views need one entry per batch member"));
    }
    let tape = bound.tape();
    let enc = bound.config().clone();
    let all: Vec<Tensor> = plan.views.iter().flatten().cloned().collect();
    let mut tokens = bound.embed(stack_patches(tape, &all, &enc)?)?;
    let alpha: Vec<f64> = match &plan.mix {
        Some(m) => m.iter().flatten().map(|s| s.alpha).collect(),
        None => vec![1.0; 2 * n],
    };
    if let Some(m) = &plan.mix {
        let partners: Vec<usize> = m[0]
            .iter()
            .map(|s| s.partner)
            .chain(m[1].iter().map(|s| s.partner + n))
            .collect();
        let betas: Vec<Vec<f64>> = m.iter().flatten().map(|s| s.beta.clone()).collect();
        tokens = mix_tokens(tokens, &partners, &betas)?;
    }
    let f = bound.forward(tokens)?;

    let sem_logits = bound.prototype_scores(f.z_hat, Bank::Semantic)?;
    let teacher = match &plan.teacher {
        Some(t) => t.clone(),
        None => teacher_targets(&sem_logits.value(), enc.k_s, cfg.tau_t)?,
    };
    let semantic = HeadInputs {
        z: f.z_s,
        logits: sem_logits,
        alpha: alpha.clone(),
        groups: plan.labels.clone(),
        targets: teacher,
        sup_targets: smoothed_rows(&plan.labels, &alpha, enc.k_s, |c| c)?,
    };
    if mode == Mode::Simgcd {
        return simgcd_loss(&semantic, cfg);
    }

    let domain = match (&plan.domain_labels, comps.domain_head && cfg.domain_weight > 0.0) {
        (Some(dl), true) => {
            if dl.len() != n {
                return Err(Error::shape("domain labels", &[n], &[dl.len()]));
            }
            let groups: Vec<Option<usize>> = plan.labels.iter().map(|l| l.map(|_| 0)).collect();
            let sup = smoothed_rows(&groups, &alpha, enc.k_d, |_| 0)?;
            let targets = (0..2 * n)
                .map(|i| sup[i].clone().unwrap_or_else(|| one_hot(dl[i % n], enc.k_d)))
                .collect();
            Some(HeadInputs {
                z: f.z_d,
                logits: bound.prototype_scores(f.z_hat_d, Bank::Domain)?,
                alpha,
                groups,
                targets,
                sup_targets: sup,
            })
        }
        _ => None,
    };
    let grid = if comps.mi {
        Some(bound.critic_grid(f.z_d.slice(0, 0, n)?, f.z_s.slice(0, 0, n)?)?)
    } else {
        None
    };
    hilo_total(&semantic, domain.as_ref(), grid, cfg)
}

/// Noise plus patch masking: each patch is zeroed with probability `mask`,
/// otherwise every value gets Gaussian noise of standard deviation `sigma`.
pub fn augment<R: Rng + ?Sized>(patches: &Tensor, sigma: f64, mask: f64, rng: &mut R) -> Tensor {
    let mut out = patches.clone();
    for r in 0..out.rows() {
        let drop = mask > 0.0 && rng.gen_bool(mask);
        for v in out.row_mut(r) {
            if drop {
                *v = 0.0;
            } else {
                let z: f64 = StandardNormal.sample(rng);
                *v += sigma * z;
            }
        }
    }
    out
}

/// Seed for the deterministic clustering calls, mixed from the run seed and
/// a position so that it never touches the sampling streams.
fn derived_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 33;
    x = x.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    x ^ (x >> 33)
}

/// Batched inference over the whole dataset.
pub fn forward_all(state: &EncoderState, dataset: &Dataset) -> Result<Vec<ForwardOutputs>> {
    let mut outs = Vec::with_capacity(dataset.len());
    for chunk in dataset.samples.chunks(256) {
        let patches: Vec<Tensor> = chunk.iter().map(|s| s.patches.clone()).collect();
        outs.extend(state.forward_batch(&patches)?);
    }
    Ok(outs)
}

/// Loss statistics of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean of every component over the epoch's batches.
    pub mean: LossBundle,
    pub batch_totals: Vec<f64>,
    /// Predicted unseen-domain share of the unlabelled pool, when the curriculum is active.
    pub unseen_share: Option<f64>,
}

/// Accuracy per domain and the bound report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Unlabelled samples of the seen domain.
    pub seen: AccReport,
    /// Unlabelled samples of every other domain.
    pub unseen: AccReport,
    /// All unlabelled samples.
    pub unlabelled: AccReport,
    pub labelled_acc: f64,
    pub bounds: BoundReport,
}

/// Semantic predictions: argmax over the semantic prototypes.
pub fn predict(state: &EncoderState, outs: &[ForwardOutputs]) -> Result<Vec<usize>> {
    let protos = bank_rows(state, "proto_s")?;
    outs.iter().map(|o| Ok(argmax(&cosine_logits(&o.z_hat, &protos, 1.0)?))).collect()
}

fn bank_rows(state: &EncoderState, name: &str) -> Result<Vec<Vec<f64>>> {
    let w = state.param(name).ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
    Ok((0..w.rows()).map(|i| w.row(i).to_vec()).collect())
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Evaluates `state`: per-domain clustering accuracy of the semantic head on
/// the unlabelled samples, and the bounds from the domain head and critic.
pub fn evaluate(state: &EncoderState, dataset: &Dataset, bounds_cfg: &BoundsConfig) -> Result<EvalReport> {
    let outs = forward_all(state, dataset)?;
    let pred = predict(state, &outs)?;
    let old = &dataset.old_classes;
    let acc_on = |keep: &dyn Fn(usize) -> bool| -> Result<AccReport> {
        let idx: Vec<usize> = (0..dataset.len()).filter(|&i| keep(i)).collect();
        let truth: Vec<usize> = idx.iter().map(|&i| dataset.samples[i].class_id).collect();
        let p: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
        cluster_acc(&truth, &p, old)
    };
    let s = &dataset.samples;
    let seen = acc_on(&|i| !s[i].labelled && s[i].domain_id == 0)?;
    let unseen = acc_on(&|i| !s[i].labelled && s[i].domain_id > 0)?;
    let unlabelled = acc_on(&|i| !s[i].labelled)?;
    let labelled = acc_on(&|i| s[i].labelled)?;

    let protos_d = bank_rows(state, "proto_d")?;
    let predicted_b: Vec<bool> = outs
        .iter()
        .map(|o| Ok(argmax(&cosine_logits(&o.z_hat_d, &protos_d, 1.0)?) != 0))
        .collect::<Result<_>>()?;
    let is_b: Vec<bool> = s.iter().map(|x| x.domain_id > 0).collect();
    let (err_a, err_b) = domain_errors(&predicted_b, &is_b)?;
    let d_hat = proxy_a_distance(err_a, err_b)?;
    let m_b = is_b.iter().filter(|&&b| b).count();
    let vc_dim = bounds_cfg.vc_dim.unwrap_or_else(|| state.count_with_prefix("head_d."));
    let confidence = confidence_term(vc_dim, dataset.len() - m_b, m_b, bounds_cfg.delta)?;

    // critic grid over an evenly spaced subset of the unlabelled samples
    let pool: Vec<usize> = (0..dataset.len()).filter(|&i| !s[i].labelled).collect();
    let step = pool.len().div_ceil(256).max(1);
    let subset: Vec<usize> = pool.iter().copied().step_by(step).collect();
    let mi = mi_estimate(state, &subset.iter().map(|&i| &outs[i]).collect::<Vec<_>>())?;

    let bounds = thm_bounds(
        1.0 - labelled.acc_all,
        1.0 - unlabelled.acc_all,
        d_hat,
        confidence,
        vc_dim,
        mi,
        bounds_cfg,
    )?;
    Ok(EvalReport {
        seen,
        unseen,
        unlabelled,
        labelled_acc: labelled.acc_all,
        bounds,
    })
}

/// JS estimate of the critic on the given forward outputs.
pub fn mi_estimate(state: &EncoderState, outs: &[&ForwardOutputs]) -> Result<f64> {
    let n = outs.len();
    let p = state.config.proj_dim;
    let tape = Tape::new();
    let bound = state.bind(&tape, false);
    let zd = tape.constant_from(&[n, p], outs.iter().flat_map(|o| o.z_d.iter().copied()).collect())?;
    let zs = tape.constant_from(&[n, p], outs.iter().flat_map(|o| o.z_s.iter().copied()).collect())?;
    let grid = bound.critic_grid(zd, zs)?;
    mi_js_value(&grid.value(), n)
}

/// One training run: parameters, optimizer and the two random streams.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub patchmix: PatchMixConfig,
    pub curriculum: CurriculumConfig,
    pub state: EncoderState,
    pub optimizer: Sgd,
    pub seed: u64,
    rng: ChaCha8Rng,
    mix_rng: ChaCha8Rng,
    data_scale: f64,
}

impl Trainer {
    /// Parameters come from `seed`; batch sampling and augmentation use one
    /// stream of it and PatchMix draws a separate one, so switching PatchMix
    /// off leaves every other draw unchanged.
    pub fn new(
        dataset: &Dataset,
        encoder: &EncoderConfig,
        train: TrainConfig,
        loss: LossConfig,
        patchmix: PatchMixConfig,
        curriculum: CurriculumConfig,
        seed: u64,
    ) -> Result<Self> {
        train.validate()?;
        loss.validate()?;
        patchmix.validate()?;
        curriculum.validate(train.epochs)?;
        let enc = train.encoder_config(encoder);
        if enc.patch_count != dataset.patch_count || enc.input_dim != dataset.input_dim {
            return Err(Error::Config(format!(
                "encoder expects [{}, {}] patches but the dataset has [{}, {}]",
                enc.patch_count, enc.input_dim, dataset.patch_count, dataset.input_dim
            )));
        }
        if dataset.labelled_flags().iter().all(|&l| !l) {
            return Err(Error::invalid("dataset has no labelled samples"));
        }
        let state = EncoderState::init(&enc, seed)?;
        let optimizer = Sgd::new(&state, train.momentum, train.weight_decay);
        let stream = |id: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(id);
            r
        };
        Ok(Self {
            train,
            loss,
            patchmix,
            curriculum,
            state,
            optimizer,
            seed,
            rng: stream(1),
            mix_rng: stream(2),
            data_scale: dataset.value_std(),
        })
    }

    pub fn components(&self) -> Components {
        self.train.components()
    }

    fn uses_domain_labels(&self) -> bool {
        self.components().domain_head && self.loss.domain_weight > 0.0
    }

    /// Sampling weights of epoch `t`.
    pub fn epoch_weights(&self, dataset: &Dataset, t: usize) -> Result<(Vec<f64>, Option<DomainPartition>)> {
        let labelled = dataset.labelled_flags();
        if !self.components().curriculum {
            return Ok((vec![1.0; dataset.len()], None));
        }
        let z_d: Vec<Vec<f64>> = forward_all(&self.state, dataset)?.into_iter().map(|o| o.z_d).collect();
        let partition = partition_domains(&z_d, &labelled, &self.curriculum, derived_seed(self.seed, t as u64, u64::MAX))?;
        let w = sample_weights(&labelled, &partition, t, &self.curriculum);
        Ok((w, Some(partition)))
    }

    /// Draws the members of a batch and builds its plan.
    pub fn plan_batch(&mut self, dataset: &Dataset, weights: &[f64], t: usize, b: usize) -> Result<BatchPlan> {
        let idx = draw_batch(weights, self.train.batch_size, &mut self.rng)?;
        let sigma = self.train.jitter * self.data_scale;
        let mut views: [Vec<Tensor>; 2] = [Vec::new(), Vec::new()];
        for view in &mut views {
            for &i in &idx {
                view.push(augment(&dataset.samples[i].patches, sigma, self.train.patch_mask, &mut self.rng));
            }
        }
        let members: Vec<_> = idx.iter().map(|&i| &dataset.samples[i]).collect();
        let labels: Vec<Option<usize>> = members.iter().map(|s| s.labelled.then_some(s.class_id)).collect();
        let labelled: Vec<bool> = labels.iter().map(Option::is_some).collect();
        let comps = self.components();
        let mix_active = comps.patchmix && labelled.iter().any(|&l| !l);
        let clean = if mix_active || self.uses_domain_labels() {
            let patches: Vec<Tensor> = members.iter().map(|s| s.patches.clone()).collect();
            Some(self.state.forward_batch(&patches)?)
        } else {
            None
        };
        let mix = match (&clean, mix_active) {
            (Some(outs), true) => {
                let attn: Vec<Vec<f64>> = outs.iter().map(|o| o.attn_cls.clone()).collect();
                Some(make_mixed_views(&labelled, &attn, &self.patchmix, &mut self.mix_rng)?)
            }
            _ => None,
        };
        let domain_labels = match (&clean, self.uses_domain_labels()) {
            (Some(outs), true) => {
                let points: Vec<Vec<f64>> = outs.iter().map(|o| o.z_d.clone()).collect();
                let forced: Vec<Option<usize>> = labelled.iter().map(|&l| l.then_some(0)).collect();
                let k = self.state.config.k_d.min(points.len());
                let seed = derived_seed(self.seed, t as u64, b as u64);
                Some(ss_kmeans(&points, k, &forced, self.train.domain_kmeans_iters, 1e-9, seed)?.assignments)
            }
            _ => None,
        };
        Ok(BatchPlan {
            views,
            labels,
            mix,
            domain_labels,
            teacher: None,
        })
    }

    /// One optimizer step on `plan` at learning rate `lr`.
    pub fn step(&mut self, plan: &BatchPlan, lr: f64) -> Result<LossBundle> {
        let comps = self.components();
        let tape = Tape::new();
        let mut bound = self.state.bind(&tape, true);
        let leaves: Vec<Var> = bound.vars().to_vec();
        if comps.mi {
            bound.reverse_critic();
        }
        let (loss, bundle) = batch_loss(&bound, plan, self.train.mode, comps, &self.loss)?;
        if !bundle.is_finite() {
            return Err(Error::NonFinite(format!("loss components {bundle:?}")));
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Option<Vec<f64>>> = leaves.iter().map(|v| grads.get(v).map(<[f64]>::to_vec)).collect();
        self.optimizer.step(&mut self.state, &g, lr)?;
        if lr > 0.0 {
            self.state.renormalize_prototypes();
        }
        Ok(bundle)
    }

    /// Trains epoch `t` (0-based).
    pub fn train_epoch(&mut self, dataset: &Dataset, t: usize) -> Result<EpochStats> {
        let lr = cosine_lr(self.train.lr0, t, self.train.epochs);
        let (weights, partition) = self.epoch_weights(dataset, t)?;
        let batches = self.train.batches_per_epoch(dataset.len());
        let mut sum = LossBundle::default();
        let mut totals = Vec::with_capacity(batches);
        for b in 0..batches {
            let plan = self.plan_batch(dataset, &weights, t, b)?;
            let bundle = self
                .step(&plan, lr)
                .map_err(|e| Error::NonFinite(format!("epoch {t}, batch {b}: {e}")))?;
            totals.push(bundle.total);
            accumulate(&mut sum, &bundle, 1.0 / batches as f64);
        }
        let unseen_share = partition.map(|p| p.unseen.len() as f64 / (p.seen.len() + p.unseen.len()).max(1) as f64);
        Ok(EpochStats {
            epoch: t,
            lr,
            mean: sum,
            batch_totals: totals,
            unseen_share,
        })
    }
}

fn accumulate(sum: &mut LossBundle, b: &LossBundle, w: f64) {
    sum.rep_s += w * b.rep_s;
    sum.cls_s += w * b.cls_s;
    sum.rep_d += w * b.rep_d;
    sum.cls_d += w * b.cls_d;
    sum.l_s += w * b.l_s;
    sum.l_d += w * b.l_d;
    sum.l_m += w * b.l_m;
    sum.delta_s += w * b.delta_s;
    sum.delta_d += w * b.delta_d;
    sum.total += w * b.total;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, program};
    use crate::synthdata::{generate, TaskConfig};

    fn tiny_task() -> TaskConfig {
        TaskConfig {
            num_classes: 4,
            num_old: 2,
            samples_per_class: 8,
            patch_count: 4,
            input_dim: 3,
            ..TaskConfig::default()
        }
    }

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            patch_count: 4,
            input_dim: 3,
            token_dim: 8,
            head_count: 2,
            proj_dim: 4,
            critic_hidden: 4,
            k_s: 4,
            ..EncoderConfig::default()
        }
    }

    fn tiny_train(mode: Mode, ablations: Ablations) -> TrainConfig {
        TrainConfig {
            mode,
            ablations,
            epochs: 4,
            batch_size: 8,
            eval_every: 2,
            ..TrainConfig::default()
        }
    }

    fn trainer(mode: Mode, ablations: Ablations, loss: LossConfig, seed: u64) -> (Dataset, Trainer) {
        let data = generate(&tiny_task()).unwrap();
        let curriculum = CurriculumConfig {
            switch_epoch: 1,
            r_prime: 1.0,
            ..CurriculumConfig::default()
        };
        let t = Trainer::new(
            &data,
            &tiny_encoder(),
            tiny_train(mode, ablations),
            loss,
            PatchMixConfig::default(),
            curriculum,
            seed,
        )
        .unwrap();
        (data, t)
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0.05, 0, 60), 0.05);
        assert!((cosine_lr(0.05, 30, 60) - 0.025).abs() < 1e-15);
        assert!(cosine_lr(0.05, 60, 60).abs() < 1e-15);
    }

    #[test]
    fn components_follow_flags() {
        let hilo = |a: Ablations| TrainConfig { ablations: a, ..TrainConfig::default() }.components();
        let all = Components {
            mi: true,
            domain_head: true,
            patchmix: true,
            curriculum: true,
        };
        assert_eq!(hilo(Ablations::default()), all);
        let pm = hilo(Ablations::preset("patchmix_only").unwrap().1);
        assert_eq!(pm, Components { mi: false, domain_head: false, patchmix: true, curriculum: false });
        let mi = hilo(Ablations::preset("mi_only").unwrap().1);
        assert_eq!(mi, Components { mi: true, domain_head: true, patchmix: false, curriculum: false });
        let cur = hilo(Ablations::preset("curriculum_only").unwrap().1);
        assert_eq!(cur, Components { mi: false, domain_head: false, patchmix: false, curriculum: true });
        assert_eq!(hilo(Ablations::preset("no_patchmix").unwrap().1), Components { patchmix: false, ..all });
        assert_eq!(hilo(Ablations::preset("deep_only").unwrap().1), all);

        let base = EncoderConfig::default();
        let deep = TrainConfig { ablations: Ablations { deep_only: true, ..Ablations::default() }, ..TrainConfig::default() };
        let c = deep.encoder_config(&base);
        assert_eq!((c.domain_tap_layer, c.semantic_tap()), (4, 4));
        let shallow = TrainConfig { ablations: Ablations { shallow_only: true, ..Ablations::default() }, ..TrainConfig::default() };
        let c = shallow.encoder_config(&base);
        assert_eq!((c.domain_tap_layer, c.semantic_tap()), (1, 1));
    }

    #[test]
    fn inconsistent_flags_rejected() {
        let both = Ablations {
            deep_only: true,
            shallow_only: true,
            ..Ablations::default()
        };
        assert!(TrainConfig { ablations: both, ..TrainConfig::default() }.validate().is_err());
        let two_only = Ablations {
            mi_only: true,
            patchmix_only: true,
            ..Ablations::default()
        };
        assert!(TrainConfig { ablations: two_only, ..TrainConfig::default() }.validate().is_err());
        let simgcd_flags = TrainConfig {
            mode: Mode::Simgcd,
            ablations: Ablations { no_mi: true, ..Ablations::default() },
            ..TrainConfig::default()
        };
        assert!(simgcd_flags.validate().is_err());
        assert!(TrainConfig { eval_every: 7, ..TrainConfig::default() }.validate().is_err());
        assert!(Ablations::preset("everything").is_none());
    }

    #[test]
    fn sgd_matches_hand_update() {
        let (_, mut t) = trainer(Mode::Simgcd, Ablations::default(), LossConfig::default(), 0);
        let before = t.state.clone();
        let grads: Vec<Option<Vec<f64>>> = t.state.params.iter().map(|p| Some(vec![1.0; p.value.numel()])).collect();
        t.optimizer.step(&mut t.state, &grads, 0.1).unwrap();
        t.optimizer.step(&mut t.state, &grads, 0.1).unwrap();
        let w0 = before.params[0].value.data()[0];
        let wd = t.optimizer.weight_decay;
        let v1 = 1.0 + wd * w0;
        let w1 = w0 - 0.1 * v1;
        let v2 = 0.9 * v1 + 1.0 + wd * w1;
        assert!((t.state.params[0].value.data()[0] - (w1 - 0.1 * v2)).abs() < 1e-15);

        let mut frozen = before.clone();
        Sgd::new(&before, 0.9, 1e-4).step(&mut frozen, &grads, 0.0).unwrap();
        assert_eq!(frozen, before);
    }

    #[test]
    fn zero_lr_epoch_keeps_parameters() {
        let (data, mut t) = trainer(Mode::Hilo, Ablations::default(), LossConfig::default(), 3);
        t.train.lr0 = 0.0;
        let before = t.state.clone();
        t.train_epoch(&data, 0).unwrap();
        assert_eq!(t.state, before);
    }

    #[test]
    fn epochs_are_reproducible() {
        let run = || {
            let (data, mut t) = trainer(Mode::Hilo, Ablations::default(), LossConfig::default(), 5);
            let s0 = t.train_epoch(&data, 0).unwrap();
            let s1 = t.train_epoch(&data, 1).unwrap();
            let s2 = t.train_epoch(&data, 2).unwrap();
            (s0, s1, s2, t.state)
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0, b.0);
        assert_eq!(a.2, b.2);
        assert_eq!(a.3, b.3);
        assert!(a.2.mean.is_finite());
        assert!(a.2.unseen_share.is_some());
        assert!(a.2.mean.l_m != 0.0 && a.2.mean.l_d != 0.0);
    }

    #[test]
    fn prototypes_stay_unit_norm() {
        let (data, mut t) = trainer(Mode::Hilo, Ablations::default(), LossConfig::default(), 2);
        t.train_epoch(&data, 0).unwrap();
        for name in ["proto_s", "proto_d"] {
            let w = t.state.param(name).unwrap();
            for i in 0..w.rows() {
                let n: f64 = w.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reduced_hilo_equals_simgcd() {
        let off = Ablations {
            no_mi: true,
            no_curriculum: true,
            no_patchmix: true,
            ..Ablations::default()
        };
        let zero_d = LossConfig {
            domain_weight: 0.0,
            ..LossConfig::default()
        };
        let (data, mut a) = trainer(Mode::Simgcd, Ablations::default(), LossConfig::default(), 9);
        let (_, mut b) = trainer(Mode::Hilo, off, zero_d, 9);
        for t in 0..2 {
            let sa = a.train_epoch(&data, t).unwrap();
            let sb = b.train_epoch(&data, t).unwrap();
            for (x, y) in sa.batch_totals.iter().zip(&sb.batch_totals) {
                assert!((x - y).abs() < 1e-10, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn unlabelled_labels_are_never_read() {
        let (data, mut a) = trainer(Mode::Simgcd, Ablations::default(), LossConfig::default(), 4);
        let mut shuffled = data.clone();
        let unl: Vec<usize> = (0..data.len()).filter(|&i| !data.samples[i].labelled).collect();
        for (k, &i) in unl.iter().enumerate() {
            shuffled.samples[i].class_id = data.samples[unl[(k + 7) % unl.len()]].class_id;
        }
        let (_, mut b) = trainer(Mode::Simgcd, Ablations::default(), LossConfig::default(), 4);
        assert_eq!(a.train_epoch(&data, 0).unwrap(), b.train_epoch(&shuffled, 0).unwrap());
    }

    #[test]
    fn full_objective_passes_grad_check() {
        let (data, mut t) = trainer(Mode::Hilo, Ablations::default(), LossConfig::default(), 11);
        t.train.batch_size = 4;
        let weights = vec![1.0; data.len()];
        let mut plan = t.plan_batch(&data, &weights, 0, 0).unwrap();
        assert!(plan.mix.is_some() && plan.domain_labels.is_some());
        let tape = Tape::new();
        let bound = t.state.bind(&tape, false);
        let enc = t.state.config.clone();
        let all: Vec<Tensor> = plan.views.iter().flatten().cloned().collect();
        let mut tokens = bound.embed(stack_patches(&tape, &all, &enc).unwrap()).unwrap();
        let m = plan.mix.as_ref().unwrap();
        let partners: Vec<usize> = m[0].iter().map(|s| s.partner).chain(m[1].iter().map(|s| s.partner + 4)).collect();
        let betas: Vec<Vec<f64>> = m.iter().flatten().map(|s| s.beta.clone()).collect();
        tokens = mix_tokens(tokens, &partners, &betas).unwrap();
        let f = bound.forward(tokens).unwrap();
        let logits = bound.prototype_scores(f.z_hat, Bank::Semantic).unwrap();
        plan.teacher = Some(teacher_targets(&logits.value(), enc.k_s, 0.07).unwrap());

        let state = t.state.clone();
        let comps = t.components();
        let loss = LossConfig::default();
        let f = program(|tape, flat| {
            let bound = state.bind_flat(tape, flat)?;
            Ok(batch_loss(&bound, &plan, Mode::Hilo, comps, &loss)?.0)
        });
        let r = grad_check(f, &t.state.flatten(), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-3, "{} at {}", r.max_rel_error, r.worst_index);
    }

    #[test]
    fn evaluation_is_repeatable_and_bounded() {
        let (data, t) = trainer(Mode::Hilo, Ablations::default(), LossConfig::default(), 1);
        let a = evaluate(&t.state, &data, &BoundsConfig::default()).unwrap();
        let b = evaluate(&t.state, &data, &BoundsConfig::default()).unwrap();
        assert_eq!(a, b);
        for r in [&a.seen, &a.unseen, &a.unlabelled] {
            assert!(r.acc_all >= 1.0 / 4.0 - 1e-12 && r.acc_all <= 1.0);
        }
        assert!(a.bounds.is_finite());
        assert!((0.0..=2.0).contains(&a.bounds.d_hat));
    }

    #[test]
    fn oracle_prototypes_classify_separable_data() {
        let task = TaskConfig {
            class_separation: 60.0,
            jitter: 0.1,
            ..tiny_task()
        };
        let data = generate(&task).unwrap();
        let mut state = EncoderState::init(&tiny_encoder(), 0).unwrap();
        let outs = forward_all(&state, &data).unwrap();
        let k = 4;
        let d = state.config.token_dim;
        let mut means = vec![vec![0.0; d]; k];
        for (o, s) in outs.iter().zip(&data.samples) {
            if s.domain_id == 0 {
                means[s.class_id].iter_mut().zip(&o.z_hat).for_each(|(m, v)| *m += v);
            }
        }
        let w = state.param_mut("proto_s").unwrap();
        for (c, m) in means.iter().enumerate() {
            w.row_mut(c).copy_from_slice(m);
        }
        state.renormalize_prototypes();
        let r = evaluate(&state, &data, &BoundsConfig::default()).unwrap();
        assert_eq!(r.seen.acc_all, 1.0);
    }
}
