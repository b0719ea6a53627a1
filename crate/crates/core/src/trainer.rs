//! Primal-dual training: primal networks/variables descend the Lagrangian
//! while the multiplier network or scalars ascend it.
//!
//! Three instances live here: per-user bandwidth `Ŵ(α)` with a multiplier
//! network `v̂(α)`, joint bandwidth and power with scalar multipliers, and
//! water-filling. A supervised bandwidth regressor is included for
//! comparison.
//!
//! Bandwidth enters every objective divided by `bw_scale` (1 MHz by
//! default), which only rescales the multipliers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::{initial_bandwidth_guess, PowerMode};
use crate::channel::{derive_seed, draw_road_distance, normalize_alpha, normalize_gain, pathloss_gain, FadingSampler, SystemConfig};
use crate::error::{check_dim, Error, Result};
use crate::nn::{Activation, Direction, Gradients, LrSchedule, Mlp, NetworkCheckpoint};
use crate::qos::{QosTarget, RateModel};

fn widths(input: usize, hidden_layers: usize, hidden_width: usize, output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend(std::iter::repeat(hidden_width).take(hidden_layers));
    w.push(output);
    w
}

fn guard(value: f64, t: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Diverged(t))
    }
}

/// Large-scale gain of a user dropped uniformly on the road.
fn draw_alpha<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> f64 {
    pathloss_gain(draw_road_distance(cfg, rng), cfg).expect("cell distances are positive")
}

// ---------------------------------------------------------------------------
// Single-user bandwidth
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SingleUserOptions {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub batch: usize,
    pub iterations: u64,
    pub schedule_w: LrSchedule,
    pub schedule_v: LrSchedule,
    pub bw_scale: f64,
    pub dual_scale: f64,
    /// Iterations between trace records.
    pub trace_every: u64,
}

impl Default for SingleUserOptions {
    fn default() -> Self {
        let lr = LrSchedule {
            base: 0.5,
            decay_rate: 1e-4,
        };
        Self {
            hidden_layers: 6,
            hidden_width: 16,
            batch: 100,
            iterations: 10_000,
            schedule_w: lr,
            schedule_v: lr,
            bw_scale: 1e6,
            dual_scale: 1.0,
            trace_every: 100,
        }
    }
}

/// A network mapping `α` to a bandwidth in Hz: `bw_scale · N(ᾱ)` with `ᾱ`
/// the normalized large-scale gain.
#[derive(Clone, Debug, PartialEq)]
pub struct BandwidthNet {
    pub net: Mlp,
    pub bw_scale: f64,
    cfg: SystemConfig,
}

impl BandwidthNet {
    pub fn new(net: Mlp, bw_scale: f64, cfg: &SystemConfig) -> Result<Self> {
        check_dim("bandwidth net input", 1, net.input_dim())?;
        check_dim("bandwidth net output", 1, net.output_dim())?;
        Ok(Self {
            net,
            bw_scale,
            cfg: cfg.clone(),
        })
    }

    fn features(&self, alphas: &[f64]) -> Vec<f64> {
        alphas.iter().map(|&a| normalize_alpha(a, &self.cfg)).collect()
    }

    pub fn bandwidth(&self, alpha: f64) -> Result<f64> {
        Ok(self.bandwidths(&[alpha])?[0])
    }

    pub fn bandwidths(&self, alphas: &[f64]) -> Result<Vec<f64>> {
        let trace = self.net.forward_batch(&self.features(alphas), alphas.len())?;
        Ok(trace.output().iter().map(|y| y * self.bw_scale).collect())
    }
}

/// Trained single-user pair `(Ŵ, v̂)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleUserPolicy {
    pub bandwidth: BandwidthNet,
    pub multiplier: Mlp,
    pub dual_scale: f64,
    pub target: QosTarget,
}

impl SingleUserPolicy {
    pub fn new_random(cfg: &SystemConfig, opts: &SingleUserOptions, seed: u64) -> Result<Self> {
        let shape = widths(1, opts.hidden_layers, opts.hidden_width, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 10, 0));
        let w_net = Mlp::new(&shape, Activation::Tanh, Activation::Softplus, &mut rng)?;
        let v_net = Mlp::new(&shape, Activation::Tanh, Activation::Softplus, &mut rng)?;
        Ok(Self {
            bandwidth: BandwidthNet::new(w_net, opts.bw_scale, cfg)?,
            multiplier: v_net,
            dual_scale: opts.dual_scale,
            target: QosTarget::for_user(cfg, 0)?,
        })
    }

    pub fn multiplier_at(&self, alpha: f64) -> Result<f64> {
        let x = normalize_alpha(alpha, &self.bandwidth.cfg);
        Ok(self.dual_scale * self.multiplier.forward(&[x])?[0])
    }
}

/// Batch Lagrangian and its parameter gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleUserGrads {
    pub loss: f64,
    pub w_grads: Gradients,
    pub v_grads: Gradients,
    pub mean_gap: f64,
    pub mean_w: f64,
}

/// `L̂₁ = (1/N) Σ [Ŵ/bw_scale + v̂(e^{-ϑŝ} − e^{-ϑB^E})]` over paired
/// `(α_n, g_n)` with its gradients w.r.t. both networks.
pub fn single_user_loss_grads(
    policy: &SingleUserPolicy,
    model: &RateModel,
    cfg: &SystemConfig,
    alphas: &[f64],
    gains: &[f64],
) -> Result<SingleUserGrads> {
    check_dim("single-user gains", alphas.len(), gains.len())?;
    let n = alphas.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let x = policy.bandwidth.features(alphas);
    let tw = policy.bandwidth.net.forward_batch(&x, n)?;
    let tv = policy.multiplier.forward_batch(&x, n)?;
    let bw = policy.bandwidth.bw_scale;
    let theta = policy.target.theta;
    let te = policy.target.target_exp();
    let p0 = cfg.power_density();
    let inv_n = 1.0 / n as f64;
    let mut cot_w = vec![0.0; n];
    let mut cot_v = vec![0.0; n];
    let (mut loss, mut gap_sum, mut w_sum) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let w = tw.output()[i] * bw;
        let v = tv.output()[i] * policy.dual_scale;
        let s = model.rate_density(w, p0, alphas[i], gains[i]);
        let e = (-theta * s).exp();
        let ds_dw = if s > 0.0 {
            model.rate_dw_density(w, p0, alphas[i], gains[i])?
        } else {
            0.0
        };
        loss += inv_n * (w / bw + v * (e - te));
        cot_w[i] = inv_n * (1.0 - v * theta * ds_dw * bw * e);
        cot_v[i] = inv_n * policy.dual_scale * (e - te);
        gap_sum += e - te;
        w_sum += w;
    }
    let mut w_grads = Gradients::zeros_like(&policy.bandwidth.net);
    policy.bandwidth.net.backward_batch(&tw, &cot_w, &mut w_grads)?;
    let mut v_grads = Gradients::zeros_like(&policy.multiplier);
    policy.multiplier.backward_batch(&tv, &cot_v, &mut v_grads)?;
    Ok(SingleUserGrads {
        loss,
        w_grads,
        v_grads,
        mean_gap: gap_sum * inv_n,
        mean_w: w_sum * inv_n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: u64,
    pub loss: f64,
    pub mean_gap: f64,
    pub mean_w_hz: f64,
}

#[derive(Clone, Debug)]
pub struct SingleUserRun {
    pub policy: SingleUserPolicy,
    pub trace: Vec<TracePoint>,
}

/// Each iteration drops `batch` users uniformly on the road with one
/// fading realization each; `Ŵ` descends and `v̂` ascends.
pub fn train_single_user_bandwidth(cfg: &SystemConfig, opts: &SingleUserOptions, seed: u64) -> Result<SingleUserRun> {
    cfg.validate()?;
    let mut policy = SingleUserPolicy::new_random(cfg, opts, seed)?;
    let model = RateModel::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 11, 0));
    let mut fading = FadingSampler::new(cfg, derive_seed(seed, 12, 0));
    let mut alphas = vec![0.0; opts.batch];
    let mut gains = vec![0.0; opts.batch];
    let mut trace = Vec::new();
    for t in 0..opts.iterations {
        alphas.iter_mut().for_each(|a| *a = draw_alpha(cfg, &mut rng));
        fading.fill(&mut gains);
        let g = single_user_loss_grads(&policy, &model, cfg, &alphas, &gains)?;
        guard(g.loss, t)?;
        policy
            .bandwidth
            .net
            .sgd_step(&g.w_grads, &opts.schedule_w, t, Direction::Descent)?;
        policy
            .multiplier
            .sgd_step(&g.v_grads, &opts.schedule_v, t, Direction::Ascent)?;
        if opts.trace_every > 0 && t % opts.trace_every == 0 {
            trace.push(TracePoint {
                iteration: t,
                loss: g.loss,
                mean_gap: g.mean_gap,
                mean_w_hz: g.mean_w,
            });
        }
    }
    Ok(SingleUserRun { policy, trace })
}

// ---------------------------------------------------------------------------
// Supervised bandwidth regression
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SupervisedRun {
    pub net: BandwidthNet,
    /// Training-set MSE (in `bw_scale` units) after each epoch.
    pub epoch_mse: Vec<f64>,
}

/// Mean-squared error on `(ᾱ, W*/bw_scale)` pairs, minibatches drawn from
/// `labels` with the same architecture and schedule as the unsupervised
/// `Ŵ` network.
pub fn train_supervised_bandwidth(
    cfg: &SystemConfig,
    labels: &[(f64, f64)],
    opts: &SingleUserOptions,
    seed: u64,
) -> Result<SupervisedRun> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no labels".into()));
    }
    let shape = widths(1, opts.hidden_layers, opts.hidden_width, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 10, 0));
    let net = Mlp::new(&shape, Activation::Tanh, Activation::Softplus, &mut rng)?;
    let mut model = BandwidthNet::new(net, opts.bw_scale, cfg)?;
    let mut pick = ChaCha8Rng::seed_from_u64(derive_seed(seed, 13, 0));
    let feats: Vec<f64> = labels.iter().map(|&(a, _)| normalize_alpha(a, cfg)).collect();
    let targets: Vec<f64> = labels.iter().map(|&(_, w)| w / opts.bw_scale).collect();
    let epoch_len = (labels.len() / opts.batch.max(1)).max(1) as u64;
    let mut epoch_mse = Vec::new();
    let mut x = vec![0.0; opts.batch];
    let mut y = vec![0.0; opts.batch];
    let mut cot = vec![0.0; opts.batch];
    for t in 0..opts.iterations {
        for i in 0..opts.batch {
            let j = pick.gen_range(0..labels.len());
            x[i] = feats[j];
            y[i] = targets[j];
        }
        let tr = model.net.forward_batch(&x, opts.batch)?;
        let mut mse = 0.0;
        for i in 0..opts.batch {
            let r = tr.output()[i] - y[i];
            mse += r * r / opts.batch as f64;
            cot[i] = 2.0 * r / opts.batch as f64;
        }
        guard(mse, t)?;
        let mut grads = Gradients::zeros_like(&model.net);
        model.net.backward_batch(&tr, &cot, &mut grads)?;
        model.net.sgd_step(&grads, &opts.schedule_w, t, Direction::Descent)?;
        if (t + 1) % epoch_len == 0 {
            let all = model.net.forward_batch(&feats, feats.len())?;
            let full = all
                .output()
                .iter()
                .zip(&targets)
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
                / feats.len() as f64;
            epoch_mse.push(full);
        }
    }
    Ok(SupervisedRun { net: model, epoch_mse })
}

// ---------------------------------------------------------------------------
// Joint bandwidth and power
// ---------------------------------------------------------------------------

/// Where each slot's training batch comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// The `N_b` most recent slots; one new realization enters per slot.
    Sliding,
    /// `N_b` fresh realizations every slot.
    Fresh,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointOptions {
    pub hidden_layers: usize,
    pub batch: usize,
    pub iters_per_slot: u64,
    pub batch_mode: BatchMode,
    pub schedule_p: LrSchedule,
    pub schedule_w: LrSchedule,
    pub schedule_lambda: LrSchedule,
    pub bw_scale: f64,
    pub max_slots: u64,
    pub validation_draws: usize,
    pub zeta_tol: f64,
    pub xi_tol: f64,
    /// Slots between convergence checks.
    pub check_every: u64,
    /// Stop at the first slot meeting the convergence rule.
    pub stop_on_convergence: bool,
}

impl Default for JointOptions {
    fn default() -> Self {
        let lr = LrSchedule {
            base: 1.0,
            decay_rate: 0.1,
        };
        Self {
            hidden_layers: 2,
            batch: 100,
            iters_per_slot: 10,
            batch_mode: BatchMode::Sliding,
            schedule_p: lr,
            schedule_w: LrSchedule { base: 0.1, ..lr },
            schedule_lambda: lr,
            bw_scale: 1e6,
            max_slots: 1000,
            validation_draws: 10_000,
            zeta_tol: 0.01,
            xi_tol: 0.01,
            check_every: 1,
            stop_on_convergence: false,
        }
    }
}

/// Power network, per-user bandwidths (Hz) and multipliers.
#[derive(Clone, Debug, PartialEq)]
pub struct JointState {
    pub net: Mlp,
    pub w: Vec<f64>,
    pub lambda: Vec<f64>,
    pub alphas: Vec<f64>,
    pub targets: Vec<QosTarget>,
    pub t: u64,
    pub seed: u64,
    pub bw_scale: f64,
}

/// JSON checkpoint of a [`JointState`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointCheckpoint {
    pub network: NetworkCheckpoint,
    pub w_hz: Vec<f64>,
    pub lambda: Vec<f64>,
    pub alphas: Vec<f64>,
    pub t: u64,
    pub seed: u64,
    pub bw_scale: f64,
    pub config_hash: String,
}

impl JointState {
    /// Glorot-initialized network, `λ = 1` and the Shannon-heuristic `W_k`.
    pub fn new_random(cfg: &SystemConfig, alphas: &[f64], opts: &JointOptions, seed: u64) -> Result<Self> {
        let k = alphas.len();
        if k == 0 {
            return Err(Error::InvalidArgument("need at least one user".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 20, 0));
        let net = Mlp::new(
            &widths(k, opts.hidden_layers, k, k),
            Activation::Tanh,
            Activation::ScaledSoftmax { scale: cfg.p_max_w },
            &mut rng,
        )?;
        let targets = (0..k).map(|i| QosTarget::for_user(cfg, i)).collect::<Result<Vec<_>>>()?;
        let p_each = PowerMode::Total(cfg.p_max_w / k as f64);
        let w = alphas
            .iter()
            .zip(&targets)
            .map(|(&a, t)| initial_bandwidth_guess(a, p_each, cfg, t))
            .collect();
        Ok(Self {
            net,
            w,
            lambda: vec![1.0; k],
            alphas: alphas.to_vec(),
            targets,
            t: 0,
            seed,
            bw_scale: opts.bw_scale,
        })
    }

    pub fn users(&self) -> usize {
        self.alphas.len()
    }

    pub fn sum_w(&self) -> f64 {
        self.w.iter().sum()
    }

    fn features(&self, gains: &[f64], cfg: &SystemConfig) -> Vec<f64> {
        gains.iter().map(|&g| normalize_gain(g, cfg)).collect()
    }

    /// `P̂(g)` for one realization.
    pub fn powers(&self, gains: &[f64], cfg: &SystemConfig) -> Result<Vec<f64>> {
        check_dim("joint policy gains", self.users(), gains.len())?;
        self.net.forward(&self.features(gains, cfg))
    }

    /// `P̂` for a row-major `n × K` batch.
    pub fn powers_batch(&self, gains: &[f64], cfg: &SystemConfig) -> Result<Vec<f64>> {
        let k = self.users();
        let trace = self.net.forward_batch(&self.features(gains, cfg), gains.len() / k.max(1))?;
        Ok(trace.output().to_vec())
    }

    /// Moves users to new large-scale gains, keeping everything learned.
    pub fn relocate(&mut self, alphas: &[f64]) -> Result<()> {
        check_dim("relocated users", self.users(), alphas.len())?;
        self.alphas = alphas.to_vec();
        Ok(())
    }

    pub fn to_checkpoint(&self, cfg: &SystemConfig) -> JointCheckpoint {
        JointCheckpoint {
            network: self.net.to_checkpoint(),
            w_hz: self.w.clone(),
            lambda: self.lambda.clone(),
            alphas: self.alphas.clone(),
            t: self.t,
            seed: self.seed,
            bw_scale: self.bw_scale,
            config_hash: cfg.hash(),
        }
    }

    pub fn from_checkpoint(ckpt: &JointCheckpoint, cfg: &SystemConfig) -> Result<Self> {
        if ckpt.config_hash != cfg.hash() {
            return Err(Error::Config("checkpoint was trained under a different configuration".into()));
        }
        let net = Mlp::from_checkpoint(&ckpt.network)?;
        let k = ckpt.alphas.len();
        check_dim("checkpoint network input", k, net.input_dim())?;
        check_dim("checkpoint bandwidths", k, ckpt.w_hz.len())?;
        check_dim("checkpoint multipliers", k, ckpt.lambda.len())?;
        let targets = (0..k).map(|i| QosTarget::for_user(cfg, i)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            net,
            w: ckpt.w_hz.clone(),
            lambda: ckpt.lambda.clone(),
            alphas: ckpt.alphas.clone(),
            targets,
            t: ckpt.t,
            seed: ckpt.seed,
            bw_scale: ckpt.bw_scale,
        })
    }

    pub fn to_json(&self, cfg: &SystemConfig) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint(cfg))?)
    }

    pub fn from_json(text: &str, cfg: &SystemConfig) -> Result<Self> {
        Self::from_checkpoint(&serde_json::from_str(text)?, cfg)
    }
}

/// Batch-mean Lagrangian of the joint problem and its gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct JointGrads {
    pub loss: f64,
    pub net: Gradients,
    /// `∂L̂/∂(W_k/bw_scale)`.
    pub dw: Vec<f64>,
    /// `∂L̂/∂λ_k`, the per-user batch `qos_gap`.
    pub gap: Vec<f64>,
    /// Per-user `(E{e^{ϑ(B^E−ŝ)}} − 1)^+`.
    pub violation: Vec<f64>,
}

/// `L̂₂ = (1/N) Σ_n Σ_k [W_k/bw_scale + λ_k(e^{-ϑŝ_k} − e^{-ϑB^E})]` over a
/// row-major `N × K` gain batch.
pub fn joint_loss_grads(state: &JointState, model: &RateModel, cfg: &SystemConfig, gains: &[f64]) -> Result<JointGrads> {
    let k = state.users();
    if gains.is_empty() || gains.len() % k != 0 {
        return Err(Error::Dimension {
            what: "joint gain batch",
            expected: k * (gains.len() / k).max(1),
            got: gains.len(),
        });
    }
    let n = gains.len() / k;
    let trace = state.net.forward_batch(&state.features(gains, cfg), n)?;
    let p = trace.output();
    let bw = state.bw_scale;
    let inv_n = 1.0 / n as f64;
    let mut cot = vec![0.0; n * k];
    let mut dw = vec![0.0; k];
    let mut e_sum = vec![0.0; k];
    for row in 0..n {
        for j in 0..k {
            let idx = row * k + j;
            let (w, a, g, pw) = (state.w[j], state.alphas[j], gains[idx], p[idx]);
            let theta = state.targets[j].theta;
            let s = model.rate(w, pw, a, g);
            let e = (-theta * s).exp();
            e_sum[j] += e;
            if s > 0.0 && w > 0.0 {
                let lam_e = state.lambda[j] * theta * e;
                cot[idx] = -inv_n * lam_e * model.rate_dp(w, pw, a, g)?;
                dw[j] -= inv_n * lam_e * model.rate_dw(w, pw, a, g)? * bw;
            }
        }
    }
    let mut loss = 0.0;
    let mut gap = vec![0.0; k];
    let mut violation = vec![0.0; k];
    for j in 0..k {
        let te = state.targets[j].target_exp();
        let mean_e = e_sum[j] * inv_n;
        dw[j] += 1.0;
        gap[j] = mean_e - te;
        violation[j] = (mean_e / te - 1.0).max(0.0);
        loss += state.w[j] / bw + state.lambda[j] * gap[j];
    }
    let mut net = Gradients::zeros_like(&state.net);
    state.net.backward_batch(&trace, &cot, &mut net)?;
    Ok(JointGrads {
        loss,
        net,
        dw,
        gap,
        violation,
    })
}

/// One simultaneous primal-descent / dual-ascent step at `state.t`.
pub fn joint_step(state: &mut JointState, model: &RateModel, cfg: &SystemConfig, gains: &[f64], opts: &JointOptions) -> Result<JointGrads> {
    let t = state.t;
    let g = joint_loss_grads(state, model, cfg, gains)?;
    guard(g.loss, t)?;
    state.net.sgd_step(&g.net, &opts.schedule_p, t, Direction::Descent)?;
    let lr_w = opts.schedule_w.rate(t) * state.bw_scale;
    let lr_l = opts.schedule_lambda.rate(t);
    for j in 0..state.users() {
        state.w[j] = (state.w[j] - lr_w * g.dw[j]).max(0.0);
        state.lambda[j] = (state.lambda[j] + lr_l * g.gap[j]).max(0.0);
    }
    state.t += 1;
    Ok(g)
}

/// Convergence diagnostics on a held-out batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub slot: u64,
    /// `‖E∇_ω L̂‖₁ + Σ_k |E ∂L̂/∂W_k| + Σ_k |E ∂L̂/∂λ_k|`.
    pub zeta: f64,
    /// Mean over users of the positive QoS violation.
    pub xi: f64,
    pub sum_w: f64,
    pub per_user_gap: Vec<f64>,
}

impl Diagnostics {
    pub fn converged(&self, opts: &JointOptions) -> bool {
        self.zeta < opts.zeta_tol && self.xi < opts.xi_tol
    }
}

pub fn compute_diagnostics(
    state: &JointState,
    model: &RateModel,
    cfg: &SystemConfig,
    validation: &[f64],
    slot: u64,
) -> Result<Diagnostics> {
    let g = joint_loss_grads(state, model, cfg, validation)?;
    let zeta = g.net.l1_norm() + g.dw.iter().map(|d| d.abs()).sum::<f64>() + g.gap.iter().map(|d| d.abs()).sum::<f64>();
    let xi = g.violation.iter().sum::<f64>() / state.users() as f64;
    Ok(Diagnostics {
        slot,
        zeta,
        xi,
        sum_w: state.sum_w(),
        per_user_gap: g.gap,
    })
}

/// How the joint learner starts.
#[derive(Clone, Debug)]
pub enum JointInit {
    Random,
    Checkpoint(Box<JointState>),
}

#[derive(Clone, Debug)]
pub struct JointRun {
    pub state: JointState,
    pub diagnostics: Vec<Diagnostics>,
    /// First slot (1-based) meeting the convergence rule.
    pub converged_slot: Option<u64>,
}

impl JointRun {
    /// `Err(Infeasible)` if the learned total bandwidth exceeds `W_max`.
    pub fn check_feasible(&self, cfg: &SystemConfig) -> Result<()> {
        let required = self.state.sum_w();
        if required > cfg.w_max_hz {
            Err(Error::Infeasible {
                required,
                w_max: cfg.w_max_hz,
            })
        } else {
            Ok(())
        }
    }
}

/// Ring buffer of the most recent `N_b` fading rows.
struct SlotBatch {
    rows: Vec<f64>,
    k: usize,
    next: usize,
    mode: BatchMode,
}

impl SlotBatch {
    fn new(k: usize, n: usize, mode: BatchMode, sampler: &mut FadingSampler) -> Self {
        let mut rows = vec![0.0; n * k];
        sampler.fill(&mut rows);
        Self { rows, k, next: 0, mode }
    }

    fn advance(&mut self, sampler: &mut FadingSampler) {
        match self.mode {
            BatchMode::Fresh => sampler.fill(&mut self.rows),
            BatchMode::Sliding => {
                let k = self.k;
                sampler.fill(&mut self.rows[self.next * k..(self.next + 1) * k]);
                self.next = (self.next + 1) % (self.rows.len() / k);
            }
        }
    }
}

/// Slot-by-slot training of `(ω_P, W, λ)` for users with large-scale gains
/// `alphas`. The batch window starts full (the preceding `N_b` slots are
/// observed before training begins).
pub fn train_joint_bw_power(
    cfg: &SystemConfig,
    alphas: &[f64],
    opts: &JointOptions,
    seed: u64,
    init: JointInit,
) -> Result<JointRun> {
    cfg.validate()?;
    let model = RateModel::new(cfg)?;
    let mut state = match init {
        JointInit::Random => JointState::new_random(cfg, alphas, opts, seed)?,
        JointInit::Checkpoint(s) => {
            let mut s = *s;
            s.relocate(alphas)?;
            s
        }
    };
    let k = state.users();
    let validation = {
        let mut v = FadingSampler::new(cfg, derive_seed(seed, 21, 0));
        let mut rows = vec![0.0; opts.validation_draws.max(1) * k];
        v.fill(&mut rows);
        rows
    };
    let mut sampler = FadingSampler::new(cfg, derive_seed(seed, 22, 0));
    let mut batch = SlotBatch::new(k, opts.batch.max(1), opts.batch_mode, &mut sampler);
    let mut diagnostics = Vec::new();
    let mut converged_slot = None;
    for slot in 1..=opts.max_slots {
        batch.advance(&mut sampler);
        for _ in 0..opts.iters_per_slot {
            joint_step(&mut state, &model, cfg, &batch.rows, opts)?;
        }
        if opts.check_every > 0 && slot % opts.check_every == 0 {
            let d = compute_diagnostics(&state, &model, cfg, &validation, slot)?;
            let ok = d.converged(opts);
            diagnostics.push(d);
            if ok && converged_slot.is_none() {
                converged_slot = Some(slot);
                if opts.stop_on_convergence {
                    break;
                }
            }
        }
    }
    Ok(JointRun {
        state,
        diagnostics,
        converged_slot,
    })
}

// ---------------------------------------------------------------------------
// Pre-training and fine-tuning under mobility
// ---------------------------------------------------------------------------

/// Users on a straight road at `road_offset_m` from the base station, all
/// moving in the same direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MobilityScenario {
    pub road_offset_m: f64,
    pub velocity_mps: f64,
    pub epoch_s: f64,
}

impl Default for MobilityScenario {
    fn default() -> Self {
        Self {
            road_offset_m: 50.0,
            velocity_mps: 20.0,
            epoch_s: 0.1,
        }
    }
}

impl MobilityScenario {
    /// Road coordinates of `k` users placed uniformly on the in-cell
    /// stretch of road.
    pub fn drop_users<R: Rng + ?Sized>(&self, k: usize, cfg: &SystemConfig, rng: &mut R) -> Vec<f64> {
        let half = (cfg.cell_max_dist_m.powi(2) - self.road_offset_m.powi(2)).max(0.0).sqrt();
        (0..k).map(|_| rng.gen_range(-half..=half)).collect()
    }

    /// Positions after one epoch.
    pub fn advance(&self, positions: &[f64]) -> Vec<f64> {
        positions.iter().map(|x| x + self.velocity_mps * self.epoch_s).collect()
    }

    /// Large-scale gains at road positions; distances are clamped to the
    /// cell.
    pub fn alphas(&self, positions: &[f64], cfg: &SystemConfig) -> Vec<f64> {
        positions
            .iter()
            .map(|x| {
                let d = (x * x + self.road_offset_m * self.road_offset_m)
                    .sqrt()
                    .clamp(cfg.cell_min_dist_m, cfg.cell_max_dist_m);
                pathloss_gain(d, cfg).expect("clamped to a positive range")
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotCount {
    pub slots: u64,
    /// The slot cap was hit before convergence.
    pub censored: bool,
}

impl SlotCount {
    fn from_run(run: &JointRun, cap: u64) -> Self {
        match run.converged_slot {
            Some(s) => Self { slots: s, censored: false },
            None => Self { slots: cap, censored: true },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvergenceOptions {
    pub joint: JointOptions,
    /// Slot cap for the offline pre-training phase.
    pub pretrain_slots: u64,
    /// Iteration count the fine-tuning schedule resumes from.
    pub finetune_t: u64,
}

impl Default for ConvergenceOptions {
    fn default() -> Self {
        Self {
            joint: JointOptions {
                batch_mode: BatchMode::Fresh,
                schedule_p: LrSchedule {
                    base: 10.0,
                    decay_rate: 0.1,
                },
                stop_on_convergence: true,
                ..JointOptions::default()
            },
            pretrain_slots: 1500,
            finetune_t: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedConvergence {
    pub random_init: SlotCount,
    pub pretrained: SlotCount,
    pub pretrain_converged: bool,
}

/// One paired trial: users are dropped, a policy is pre-trained at the
/// initial positions, the users move for one epoch, and the slots needed
/// to converge at the new positions are counted from a random start and
/// from the pre-trained checkpoint.
pub fn pretrain_finetune_run(
    cfg: &SystemConfig,
    k: usize,
    scenario: &MobilityScenario,
    opts: &ConvergenceOptions,
    seed: u64,
) -> Result<PairedConvergence> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 30, 0));
    let before = scenario.drop_users(k, cfg, &mut rng);
    let after = scenario.advance(&before);
    let alphas0 = scenario.alphas(&before, cfg);
    let alphas1 = scenario.alphas(&after, cfg);
    let pre_opts = JointOptions {
        max_slots: opts.pretrain_slots,
        stop_on_convergence: false,
        ..opts.joint
    };
    let pre = train_joint_bw_power(cfg, &alphas0, &pre_opts, derive_seed(seed, 31, 0), JointInit::Random)?;
    let mut ckpt = pre.state;
    ckpt.t = opts.finetune_t;
    // Both arms see the same post-move channels and validation batch.
    let arm_seed = derive_seed(seed, 32, 0);
    let cap = opts.joint.max_slots;
    let fresh = train_joint_bw_power(cfg, &alphas1, &opts.joint, arm_seed, JointInit::Random)?;
    let tuned = train_joint_bw_power(cfg, &alphas1, &opts.joint, arm_seed, JointInit::Checkpoint(Box::new(ckpt)))?;
    Ok(PairedConvergence {
        random_init: SlotCount::from_run(&fresh, cap),
        pretrained: SlotCount::from_run(&tuned, cap),
        pretrain_converged: pre.converged_slot.is_some(),
    })
}

// ---------------------------------------------------------------------------
// Water-filling
// ---------------------------------------------------------------------------

/// Single-link average-power problem: maximize `E{W log2(1+αgP(g)/(N₀W))}`
/// subject to `E{P(g)} ≤ P_ave`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaterFillingProblem {
    pub alpha: f64,
    pub w: f64,
    pub n0: f64,
    pub p_ave: f64,
}

impl WaterFillingProblem {
    /// `αP_ave/(N₀W)`, the mean-power SNR per unit gain.
    pub fn snr_scale(&self) -> f64 {
        self.alpha * self.p_ave / (self.n0 * self.w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WaterFillingOptions {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub batch: usize,
    pub iterations: u64,
    pub schedule_p: LrSchedule,
    pub schedule_lambda: LrSchedule,
}

impl Default for WaterFillingOptions {
    fn default() -> Self {
        Self {
            hidden_layers: 2,
            hidden_width: 16,
            batch: 100,
            iterations: 20_000,
            schedule_p: LrSchedule {
                base: 0.5,
                decay_rate: 1e-2,
            },
            schedule_lambda: LrSchedule {
                base: 0.05,
                decay_rate: 1e-2,
            },
        }
    }
}

/// `P̂(g) = P_ave · N(g/ḡ)` with a Softplus output, plus the multiplier of
/// the average-power constraint.
#[derive(Clone, Debug, PartialEq)]
pub struct WaterFillingPolicy {
    pub net: Mlp,
    pub lambda: f64,
    pub problem: WaterFillingProblem,
    mean_gain: f64,
}

impl WaterFillingPolicy {
    pub fn power(&self, g: f64) -> Result<f64> {
        Ok(self.net.forward(&[g / self.mean_gain])?[0] * self.problem.p_ave)
    }

    pub fn powers(&self, gains: &[f64]) -> Result<Vec<f64>> {
        let x: Vec<f64> = gains.iter().map(|g| g / self.mean_gain).collect();
        let tr = self.net.forward_batch(&x, x.len())?;
        Ok(tr.output().iter().map(|p| p * self.problem.p_ave).collect())
    }
}

#[derive(Clone, Debug)]
pub struct WaterFillingRun {
    pub policy: WaterFillingPolicy,
    pub trace: Vec<TracePoint>,
}

/// Loss per sample (power in units of `P_ave`, rate in bit/s/Hz):
/// `−log2(1 + c·g·p) + λ(p − 1)`.
pub fn train_water_filling(
    cfg: &SystemConfig,
    problem: &WaterFillingProblem,
    opts: &WaterFillingOptions,
    seed: u64,
) -> Result<WaterFillingRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 40, 0));
    let shape = widths(1, opts.hidden_layers, opts.hidden_width, 1);
    let net = Mlp::new(&shape, Activation::Tanh, Activation::Softplus, &mut rng)?;
    let mean_gain = cfg.mean_fading_gain();
    let mut policy = WaterFillingPolicy {
        net,
        lambda: 1.0,
        problem: *problem,
        mean_gain,
    };
    let c = problem.snr_scale();
    let mut sampler = FadingSampler::new(cfg, derive_seed(seed, 41, 0));
    let n = opts.batch.max(1);
    let inv_n = 1.0 / n as f64;
    let mut gains = vec![0.0; n];
    let mut cot = vec![0.0; n];
    let mut trace = Vec::new();
    for t in 0..opts.iterations {
        sampler.fill(&mut gains);
        let x: Vec<f64> = gains.iter().map(|g| g / mean_gain).collect();
        let tr = policy.net.forward_batch(&x, n)?;
        let (mut rate, mut mean_p) = (0.0, 0.0);
        for i in 0..n {
            let p = tr.output()[i];
            let snr = c * gains[i];
            rate += inv_n * (snr * p).ln_1p() / std::f64::consts::LN_2;
            mean_p += inv_n * p;
            cot[i] = inv_n * (policy.lambda - snr / ((1.0 + snr * p) * std::f64::consts::LN_2));
        }
        let loss = guard(-rate + policy.lambda * (mean_p - 1.0), t)?;
        let mut grads = Gradients::zeros_like(&policy.net);
        policy.net.backward_batch(&tr, &cot, &mut grads)?;
        policy.net.sgd_step(&grads, &opts.schedule_p, t, Direction::Descent)?;
        policy.lambda = (policy.lambda + opts.schedule_lambda.rate(t) * (mean_p - 1.0)).max(0.0);
        if t % 100 == 0 {
            trace.push(TracePoint {
                iteration: t,
                loss,
                mean_gap: mean_p - 1.0,
                mean_w_hz: problem.w,
            });
        }
    }
    Ok(WaterFillingRun { policy, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::sample_fading;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_single_opts() -> SingleUserOptions {
        SingleUserOptions {
            hidden_layers: 2,
            hidden_width: 4,
            batch: 8,
            iterations: 50,
            ..SingleUserOptions::default()
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn probe_indices(n: usize, count: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| rng.gen_range(0..n)).collect()
    }

    fn single_batch(cfg: &SystemConfig, n: usize) -> (Vec<f64>, Vec<f64>) {
        let alphas = (0..n).map(|i| pathloss_gain(60.0 + 20.0 * i as f64, cfg).unwrap()).collect();
        (alphas, sample_fading(1, n, cfg, 4))
    }

    #[test]
    fn single_user_gradients_match_finite_differences() {
        let cfg = SystemConfig::default();
        let model = RateModel::new(&cfg).unwrap();
        let policy = SingleUserPolicy::new_random(&cfg, &small_single_opts(), 3).unwrap();
        let (alphas, gains) = single_batch(&cfg, 8);
        for (&a, &g) in alphas.iter().zip(&gains) {
            let w = policy.bandwidth.bandwidth(a).unwrap();
            assert!(model.rate_density(w, cfg.power_density(), a, g) > 0.0);
        }
        let base = single_user_loss_grads(&policy, &model, &cfg, &alphas, &gains).unwrap();
        let loss = |p: &SingleUserPolicy| single_user_loss_grads(p, &model, &cfg, &alphas, &gains).unwrap().loss;
        let gw = base.w_grads.to_flat();
        for i in probe_indices(gw.len(), 10, 1) {
            let h = 1e-6;
            let mut up = policy.clone();
            let mut dn = policy.clone();
            let x = policy.bandwidth.net.param(i);
            up.bandwidth.net.set_param(i, x + h);
            dn.bandwidth.net.set_param(i, x - h);
            let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
            assert!(rel_err(gw[i], fd) <= 1e-4, "W param {i}: {} vs {fd}", gw[i]);
        }
        let gv = base.v_grads.to_flat();
        for i in probe_indices(gv.len(), 10, 2) {
            let h = 1e-6;
            let mut up = policy.clone();
            let mut dn = policy.clone();
            let x = policy.multiplier.param(i);
            up.multiplier.set_param(i, x + h);
            dn.multiplier.set_param(i, x - h);
            let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
            assert!(rel_err(gv[i], fd) <= 1e-4, "v param {i}: {} vs {fd}", gv[i]);
        }
    }

    fn joint_fixture(k: usize, n: usize) -> (SystemConfig, RateModel, JointState, Vec<f64>) {
        let cfg = SystemConfig::default();
        let model = RateModel::new(&cfg).unwrap();
        let alphas: Vec<f64> = (0..k).map(|i| pathloss_gain(80.0 + 50.0 * i as f64, &cfg).unwrap()).collect();
        let mut state = JointState::new_random(&cfg, &alphas, &JointOptions::default(), 9).unwrap();
        state.lambda = (0..k).map(|i| 0.5 + 0.25 * i as f64).collect();
        (cfg.clone(), model, state, sample_fading(k, n, &cfg, 8))
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        let (cfg, model, state, gains) = joint_fixture(3, 20);
        let p = state.powers_batch(&gains, &cfg).unwrap();
        for (i, &g) in gains.iter().enumerate() {
            let j = i % 3;
            assert!(model.rate(state.w[j], p[i], state.alphas[j], g) > 0.0);
        }
        let base = joint_loss_grads(&state, &model, &cfg, &gains).unwrap();
        let loss = |s: &JointState| joint_loss_grads(s, &model, &cfg, &gains).unwrap().loss;
        let gn = base.net.to_flat();
        for i in probe_indices(gn.len(), 14, 3) {
            let h = 1e-6;
            let mut up = state.clone();
            let mut dn = state.clone();
            let x = state.net.param(i);
            up.net.set_param(i, x + h);
            dn.net.set_param(i, x - h);
            let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
            assert!(rel_err(gn[i], fd) <= 1e-4, "net param {i}: {} vs {fd}", gn[i]);
        }
        for j in 0..3 {
            let h = 1.0;
            let mut up = state.clone();
            let mut dn = state.clone();
            up.w[j] += h;
            dn.w[j] -= h;
            let fd = (loss(&up) - loss(&dn)) / (2.0 * h) * state.bw_scale;
            assert!(rel_err(base.dw[j], fd) <= 1e-4, "W_{j}: {} vs {fd}", base.dw[j]);
            let mut up = state.clone();
            let mut dn = state.clone();
            up.lambda[j] += 1e-4;
            dn.lambda[j] -= 1e-4;
            let fd = (loss(&up) - loss(&dn)) / 2e-4;
            assert!(rel_err(base.gap[j], fd) <= 1e-6, "lambda_{j}: {} vs {fd}", base.gap[j]);
        }
    }

    #[test]
    fn multiplier_rises_when_constraint_is_violated() {
        let (cfg, model, mut state, gains) = joint_fixture(3, 50);
        state.w = vec![2e4; 3];
        let before = state.lambda.clone();
        let g = joint_step(&mut state, &model, &cfg, &gains, &JointOptions::default()).unwrap();
        for j in 0..3 {
            assert!(g.gap[j] > 0.0);
            assert!(state.lambda[j] >= before[j]);
        }
    }

    #[test]
    fn multiplier_projected_at_zero() {
        let (cfg, model, mut state, gains) = joint_fixture(2, 50);
        state.w = vec![5e6; 2];
        state.lambda = vec![1e-3; 2];
        let g = joint_step(&mut state, &model, &cfg, &gains, &JointOptions::default()).unwrap();
        assert!(g.gap.iter().all(|&x| x < 0.0));
        assert_eq!(state.lambda, vec![0.0, 0.0]);
    }

    /// One user with all of `P_max`: the softmax output is constant, `W` is
    /// set to zero the batch gap and `λ` to cancel `∂L/∂W`.
    #[test]
    fn zeta_vanishes_at_a_stationary_point() {
        let (cfg, model, mut state, gains) = joint_fixture(1, 64);
        let alpha = state.alphas[0];
        let theta = state.targets[0].theta;
        let te = state.targets[0].target_exp();
        let gap = |w: f64| gains.iter().map(|&g| (-theta * model.rate(w, cfg.p_max_w, alpha, g)).exp()).sum::<f64>() / gains.len() as f64 - te;
        let (mut lo, mut hi) = (5e4, 5e6);
        assert!(gap(lo) > 0.0 && gap(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if gap(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let w = 0.5 * (lo + hi);
        let slope = gains
            .iter()
            .map(|&g| {
                let s = model.rate(w, cfg.p_max_w, alpha, g);
                theta * model.rate_dw(w, cfg.p_max_w, alpha, g).unwrap() * state.bw_scale * (-theta * s).exp()
            })
            .sum::<f64>()
            / gains.len() as f64;
        state.w = vec![w];
        state.lambda = vec![1.0 / slope];
        let d = compute_diagnostics(&state, &model, &cfg, &gains, 1).unwrap();
        assert!(d.zeta < 1e-9, "zeta {}", d.zeta);
        assert_eq!(d.xi, 0.0);
    }

    #[test]
    fn xi_on_a_hand_computed_batch() {
        let (cfg, model, mut state, _) = joint_fixture(1, 1);
        let gains = [0.5, 2.0, 9.0];
        state.w = vec![3e4];
        let t = state.targets[0];
        let expect = gains
            .iter()
            .map(|&g| (t.theta * (t.eb - model.rate(3e4, cfg.p_max_w, state.alphas[0], g))).exp())
            .sum::<f64>()
            / 3.0
            - 1.0;
        let d = compute_diagnostics(&state, &model, &cfg, &gains, 1).unwrap();
        assert!(expect > 0.0);
        assert!((d.xi - expect).abs() <= 1e-12 * expect.max(1.0), "{} vs {expect}", d.xi);
        state.w = vec![5e6];
        assert_eq!(compute_diagnostics(&state, &model, &cfg, &gains, 1).unwrap().xi, 0.0);
    }

    #[test]
    fn joint_checkpoint_round_trip() {
        let (cfg, _, mut state, _) = joint_fixture(4, 1);
        state.t = 1234;
        let text = state.to_json(&cfg).unwrap();
        assert_eq!(JointState::from_json(&text, &cfg).unwrap(), state);
        let other = SystemConfig {
            p_max_w: 10.0,
            ..cfg.clone()
        };
        assert!(matches!(JointState::from_json(&text, &other), Err(Error::Config(_))));
    }

    #[test]
    fn joint_training_is_deterministic() {
        let cfg = SystemConfig::default();
        let alphas = [pathloss_gain(120.0, &cfg).unwrap(), pathloss_gain(220.0, &cfg).unwrap()];
        let opts = JointOptions {
            max_slots: 5,
            validation_draws: 100,
            ..JointOptions::default()
        };
        let a = train_joint_bw_power(&cfg, &alphas, &opts, 17, JointInit::Random).unwrap();
        let b = train_joint_bw_power(&cfg, &alphas, &opts, 17, JointInit::Random).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.diagnostics, b.diagnostics);
        let c = train_joint_bw_power(&cfg, &alphas, &opts, 18, JointInit::Random).unwrap();
        assert_ne!(a.state.w, c.state.w);
    }

    #[test]
    fn single_user_training_is_deterministic_and_feasible() {
        let cfg = SystemConfig::default();
        let a = train_single_user_bandwidth(&cfg, &small_single_opts(), 5).unwrap();
        let b = train_single_user_bandwidth(&cfg, &small_single_opts(), 5).unwrap();
        assert_eq!(a.policy, b.policy);
        for d in [50.0, 150.0, 250.0] {
            let alpha = pathloss_gain(d, &cfg).unwrap();
            assert!(a.policy.multiplier_at(alpha).unwrap() >= 0.0);
            assert!(a.policy.bandwidth.bandwidth(alpha).unwrap() >= 0.0);
        }
    }

    #[test]
    fn supervised_mse_decreases() {
        let cfg = SystemConfig::default();
        let labels: Vec<(f64, f64)> = (0..200)
            .map(|i| {
                let d = 50.0 + i as f64;
                (pathloss_gain(d, &cfg).unwrap(), 1e5 + 800.0 * i as f64)
            })
            .collect();
        let opts = SingleUserOptions {
            iterations: 400,
            batch: 20,
            ..small_single_opts()
        };
        let run = train_supervised_bandwidth(&cfg, &labels, &opts, 2).unwrap();
        let first = run.epoch_mse[0];
        let last = *run.epoch_mse.last().unwrap();
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn road_drop_stays_in_cell() {
        let cfg = SystemConfig::default();
        let sc = MobilityScenario::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pos = sc.drop_users(500, &cfg, &mut rng);
        for &x in &pos {
            let d = x.hypot(sc.road_offset_m);
            assert!(d >= sc.road_offset_m - 1e-9 && d <= cfg.cell_max_dist_m + 1e-9);
        }
        let moved = sc.advance(&pos);
        assert!((moved[0] - pos[0] - sc.velocity_mps * sc.epoch_s).abs() < 1e-12);
        assert_eq!(sc.alphas(&moved, &cfg).len(), 500);
    }

    #[test]
    fn water_filling_policy_spends_the_budget() {
        let mut cfg = SystemConfig::default();
        cfg.fading_kind = crate::channel::FadingKind::Exponential;
        let alpha = pathloss_gain(250.0, &cfg).unwrap();
        let w = 1e6;
        let problem = WaterFillingProblem {
            alpha,
            w,
            n0: cfg.n0_w_per_hz,
            p_ave: cfg.n0_w_per_hz * w / alpha,
        };
        assert!((problem.snr_scale() - 1.0).abs() < 1e-12);
        let opts = WaterFillingOptions {
            iterations: 3000,
            ..WaterFillingOptions::default()
        };
        let run = train_water_filling(&cfg, &problem, &opts, 3).unwrap();
        let g = sample_fading(1, 20_000, &cfg, 6);
        let p = run.policy.powers(&g).unwrap();
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        assert!((mean / problem.p_ave - 1.0).abs() < 0.1, "mean power ratio {}", mean / problem.p_ave);
        assert!(p.iter().all(|&x| x >= 0.0));
        assert!(run.policy.lambda >= 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn joint_steps_keep_dual_and_primal_feasible(
            dists in proptest::collection::vec(50.0f64..250.0, 1..5),
            seed in 0u64..1000,
            w0 in 1e3f64..2e6,
            lam0 in 0.0f64..5.0,
        ) {
            let cfg = SystemConfig::default();
            let model = RateModel::new(&cfg).unwrap();
            let alphas: Vec<f64> = dists.iter().map(|&d| pathloss_gain(d, &cfg).unwrap()).collect();
            let k = alphas.len();
            let opts = JointOptions::default();
            let mut state = JointState::new_random(&cfg, &alphas, &opts, seed).unwrap();
            state.w = vec![w0; k];
            state.lambda = vec![lam0; k];
            let gains = sample_fading(k, 32, &cfg, seed);
            for _ in 0..5 {
                let before = state.lambda.clone();
                let g = joint_step(&mut state, &model, &cfg, &gains, &opts).unwrap();
                for j in 0..k {
                    prop_assert!(state.lambda[j] >= 0.0);
                    prop_assert!(state.w[j] >= 0.0);
                    if g.gap[j] > 0.0 {
                        prop_assert!(state.lambda[j] >= before[j]);
                    }
                }
            }
            let p = state.powers_batch(&gains, &cfg).unwrap();
            for row in p.chunks(k) {
                prop_assert!(row.iter().all(|&x| x >= 0.0));
                let total: f64 = row.iter().sum();
                prop_assert!((total - cfg.p_max_w).abs() <= 1e-9 * cfg.p_max_w);
            }
        }
    }
}
