"""Training objectives for the seven methods and the shared training loop."""

from __future__ import annotations

import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import ClassVar

import numpy as np

from . import datagen, nets, ot, selection
from . import diffcore as dc
from .config import TOL, ConfigError, NumericError
from .records import CheckpointScore, RunRecord, hp_key
from .selection import ScorerKind

log = logging.getLogger(__name__)

# ------------------------------------------------------------------ configs


@dataclass(frozen=True)
class MethodConfig:
    name: ClassVar[str] = ""
    sampler: ClassVar[str] = "uniform"
    needs_disc: ClassVar[bool] = False
    needs_critic: ClassVar[bool] = False
    grid_fields: ClassVar[tuple] = ()

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "a_low":
                continue
            if v < 0 or (f.name in self.grid_fields and v <= 0):
                raise ConfigError(f"{self.name}: {f.name} must be positive, got {v}")

    def hp(self):
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name in self.grid_fields}


@dataclass(frozen=True)
class SourceOnly(MethodConfig):
    name: ClassVar[str] = "source_only"


@dataclass(frozen=True)
class Pada(MethodConfig):
    name: ClassVar[str] = "pada"
    needs_disc: ClassVar[bool] = True
    grid_fields: ClassVar[tuple] = ("lam",)
    lam: float = 0.5


@dataclass(frozen=True)
class Safn(MethodConfig):
    name: ClassVar[str] = "safn"
    grid_fields: ClassVar[tuple] = ("lam", "delta_r")
    lam: float = 0.005
    delta_r: float = 0.1


@dataclass(frozen=True)
class Ba3us(MethodConfig):
    name: ClassVar[str] = "ba3us"
    needs_disc: ClassVar[bool] = True
    grid_fields: ClassVar[tuple] = ("lambda_wce", "lambda_ent")
    lambda_wce: float = 5.0
    lambda_ent: float = 0.05
    adv_weight: float = 1.0


@dataclass(frozen=True)
class Ar(MethodConfig):
    name: ClassVar[str] = "ar"
    needs_critic: ClassVar[bool] = True
    grid_fields: ClassVar[tuple] = ("rho0", "a_up", "lambda_ent")
    rho0: float = 2.5
    a_up: float = 5.0
    lambda_ent: float = 0.1
    align_weight: float = 0.1
    gp_weight: float = 10.0

    @property
    def a_low(self):
        return -self.a_up


@dataclass(frozen=True)
class Jumbot(MethodConfig):
    name: ClassVar[str] = "jumbot"
    sampler: ClassVar[str] = "stratified"
    grid_fields: ClassVar[tuple] = ("tau", "eta1", "eta2", "eta3")
    tau: float = 0.01
    eta1: float = 0.0001
    eta2: float = 0.5
    eta3: float = 10.0


@dataclass(frozen=True)
class Mpot(MethodConfig):
    name: ClassVar[str] = "mpot"
    sampler: ClassVar[str] = "stratified"
    grid_fields: ClassVar[tuple] = ("eps", "eta1", "eta2", "m")
    eps: float = 0.5
    eta1: float = 0.01
    eta2: float = 10.0
    m: float = 0.3

    def __post_init__(self):
        super().__post_init__()
        if not 0 < self.m <= 1:
            raise ConfigError("mpot mass fraction m must lie in (0, 1]")


METHODS = {c.name: c for c in (SourceOnly, Pada, Safn, Ba3us, Ar, Jumbot, Mpot)}


def make_method(name, **hp):
    try:
        cls = METHODS[name]
    except KeyError:
        raise ConfigError(f"unknown method {name!r}; choose from {sorted(METHODS)}") from None
    hp = dict(hp)
    hp.pop("a_low", None)
    try:
        return cls(**hp)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from None


# --------------------------------------------------------------- loss parts


def onehot(y, k):
    out = np.zeros((len(y), k))
    out[np.arange(len(y)), y] = 1.0
    return out


def entropy_term(logits):
    """Mean prediction entropy ``-sum p log p`` of a batch of logits."""
    ls = dc.log_softmax(logits)
    return dc.scale(dc.mean(dc.tsum(dc.mul(dc.exp(ls), ls), axis=1)), -1.0)


def weighted_ce_mean(logits, y_onehot, w):
    """``mean_i w_i * CE_i``, normalized by the batch size rather than the weight sum.

    Solved source weights can zero out most of a batch; dividing by the batch
    size keeps such batches from acting as a one-sample gradient step.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.sum() <= 0:
        return dc.scale(dc.tsum(logits), 0.0)
    return dc.scale(dc.softmax_cross_entropy(logits, y_onehot, w), w.sum() / len(w))


def domain_adversarial(bundle, z_src, z_tgt, coeff, w_src=None):
    """Discriminator BCE through gradient reversal; source label 1, target 0."""
    z = dc.grad_reverse(dc.concat_rows([z_src, z_tgt]), coeff)
    ns, nt = z_src.shape[0], z_tgt.shape[0]
    t = np.concatenate([np.ones(ns), np.zeros(nt)])
    w = np.concatenate([np.ones(ns) if w_src is None else np.asarray(w_src), np.ones(nt)])
    return dc.bce_with_logits(nets.discriminator_logits(bundle, z), t, w)


def loss_source_only(bundle, xs, ys):
    return dc.softmax_cross_entropy(nets.forward_logits(bundle, xs), onehot(ys, bundle.dims.k_source))


def pada_class_weights(target_probs):
    """Column mean of target predictions, divided by its largest entry."""
    p = np.asarray(target_probs, dtype=np.float64)
    gamma = p.mean(axis=0)
    top = gamma.max()
    if top <= 0:
        raise NumericError("class weights: mean target prediction is all zero")
    return gamma / top


def loss_pada(bundle, xs, ys, xt, gamma, lam, grl):
    k = bundle.dims.k_source
    zs, zt = nets.forward_features(bundle, xs), nets.forward_features(bundle, xt)
    w = np.asarray(gamma)[ys]
    ce = dc.softmax_cross_entropy(nets.classify(bundle, zs), onehot(ys, k), w)
    if lam == 0:
        return ce
    return ce + dc.scale(domain_adversarial(bundle, zs, zt, grl, w), lam)


def loss_safn(bundle, xs, ys, xt, lam, delta_r):
    zs, zt = nets.forward_features(bundle, xs), nets.forward_features(bundle, xt)
    ce = dc.softmax_cross_entropy(nets.classify(bundle, zs), onehot(ys, bundle.dims.k_source))
    norms = dc.row_l2_norm(dc.concat_rows([zs, zt]))
    goal = dc.stop_gradient(norms) + delta_r
    return ce + dc.scale(dc.mean(dc.square(goal - norms)), lam)


def n_augment(batch_t, it, total):
    """Number of source samples mixed into the target batch; reaches 0 at the end."""
    if total <= 0:
        return 0
    return int(math.ceil(batch_t * max(0.0, 1.0 - it / total)))


def complement_entropy(logits, y_onehot):
    """Mean over rows of ``sum_{k != y} q_k log q_k`` with ``q = p / (1 - p_y)``."""
    p = dc.row_softmax(logits)
    mask = 1.0 - y_onehot
    p_y = dc.tsum(dc.mul(p, y_onehot), axis=1, keepdims=True)
    denom = dc.clamp(1.0 - p_y, TOL.prob_clamp, None)
    q = dc.div(dc.mul(p, mask), denom)
    qlogq = dc.mul(dc.mul(q, dc.log(dc.clamp(q, TOL.prob_clamp, None))), mask)
    return dc.mean(dc.tsum(qlogq, axis=1))


def loss_ba3us(bundle, xs, ys, xt, x_aug, gamma, cfg, it, total, grl):
    k = bundle.dims.k_source
    yo = onehot(ys, k)
    zs, zt = nets.forward_features(bundle, xs), nets.forward_features(bundle, xt)
    logits_s, logits_t = nets.classify(bundle, zs), nets.classify(bundle, zt)
    loss = dc.softmax_cross_entropy(logits_s, yo, np.asarray(gamma)[ys])
    if cfg.adv_weight:
        z_tb = zt if x_aug is None or len(x_aug) == 0 else \
            dc.concat_rows([zt, nets.forward_features(bundle, x_aug)])
        loss = loss + dc.scale(domain_adversarial(bundle, zs, z_tb, grl), cfg.adv_weight)
    wce = cfg.lambda_wce * (it / total if total else 1.0)
    if wce:
        loss = loss + dc.scale(complement_entropy(logits_s, yo), wce)
    if cfg.lambda_ent:
        loss = loss + dc.scale(entropy_term(logits_t), cfg.lambda_ent)
    return loss


# ----------------------------------------------------------------------- AR


def _project_capped_simplex(v, total):
    """Euclidean projection onto ``{w >= 0, sum w = total}``."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    ks = np.arange(1, v.size + 1)
    rho = np.flatnonzero(u - css / ks > 0)[-1]
    return np.maximum(v - css[rho] / (rho + 1), 0.0)


def _project_ball(v, radius):
    d = v - 1.0
    nrm = np.linalg.norm(d)
    return v if nrm <= radius else 1.0 + d * (radius / nrm)


def _project_feasible(v, radius, iters=5000, tol=1e-13):
    """Dykstra's alternating projections onto (scaled simplex) and (ball around 1)."""
    n = v.size
    x, p, q = v.copy(), np.zeros(n), np.zeros(n)
    for _ in range(iters):
        y = _project_ball(x + p, radius)
        p = x + p - y
        x_new = _project_capped_simplex(y + q, float(n))
        q = y + q - x_new
        if np.max(np.abs(x_new - x)) < tol:
            return x_new
        x = x_new
    return x


def ar_solve_weights(phi, rho0, tol=TOL.ar_weight_tol, max_iter=2000):
    """Minimize ``sum w_i phi_i`` over ``w >= 0, mean w = 1, |w - 1|^2 <= rho0^2 n``.

    Projected gradient with a fixed step; the projection onto the feasible set
    is computed by Dykstra's alternating projections. Falls back to uniform
    weights if the iterates do not settle.
    """
    phi = np.asarray(phi, dtype=np.float64)
    n = phi.size
    if n < 2:
        raise ConfigError("need at least 2 source samples to solve weights")
    radius = rho0 * math.sqrt(n)
    if radius == 0:
        return np.ones(n)
    g = phi - phi.mean()
    gn = np.linalg.norm(g)
    if gn == 0:
        return np.ones(n)
    step = radius / gn
    w = np.ones(n)
    for _ in range(max_iter):
        w_new = _project_feasible(w - step * g, radius)
        if np.max(np.abs(w_new - w)) < tol:
            return w_new
        w = w_new
    log.warning("source weight solver did not converge; using uniform weights")
    return np.ones(n)


def loss_ar(bundle, xs, ys, xt, w, cfg, rng, coeff=1.0):
    """Classifier and critic losses for adversarial reweighting.

    The critic maximizes ``mean_s w phi(z_s) - mean_t phi(z_t)`` (minus a
    gradient penalty on interpolated features); the network minimizes the same
    gap (scaled by the warm-up ``coeff``) plus the ``w``-weighted source loss
    and target entropy.
    """
    k = bundle.dims.k_source
    w = np.asarray(w, dtype=np.float64)
    zs, zt = nets.forward_features(bundle, xs), nets.forward_features(bundle, xt)
    logits_s, logits_t = nets.classify(bundle, zs), nets.classify(bundle, zt)
    wt = dc.Tensor(w[:, None] / len(w))

    def gap(a, b):
        return dc.tsum(dc.mul(wt, nets.critic(bundle, a, cfg.a_low, cfg.a_up))) - \
            dc.mean(nets.critic(bundle, b, cfg.a_low, cfg.a_up))

    zs_d, zt_d = dc.stop_gradient(zs), dc.stop_gradient(zt)
    critic_loss = dc.scale(gap(zs_d, zt_d), -1.0)
    if cfg.gp_weight:
        m = min(zs.shape[0], zt.shape[0])
        alpha = rng.uniform(size=(m, 1))
        inter = alpha * zs_d.data[:m] + (1 - alpha) * zt_d.data[:m]
        gp = nets.critic_input_grad_norm_penalty(bundle, inter, cfg.a_low, cfg.a_up)
        critic_loss = critic_loss + dc.scale(gp, cfg.gp_weight)

    cls_loss = weighted_ce_mean(logits_s, onehot(ys, k), w)
    if cfg.align_weight and coeff:
        cls_loss = cls_loss + dc.scale(gap(zs, zt), cfg.align_weight * coeff)
    if cfg.lambda_ent:
        cls_loss = cls_loss + dc.scale(entropy_term(logits_t), cfg.lambda_ent)
    return cls_loss, critic_loss


# ----------------------------------------------------------------------- OT


def jumbot_cost(zs, ys_onehot, zt, logits_t, eta1, eta2):
    """``eta1 |z_s_i - z_t_j|^2 + eta2 * CE(y_s_i, softmax(logits_t_j))`` as an n x m tensor."""
    zs, zt = dc.as_tensor(zs), dc.as_tensor(zt)
    sq_s = dc.tsum(dc.square(zs), axis=1, keepdims=True)
    sq_t = dc.transpose(dc.tsum(dc.square(zt), axis=1, keepdims=True))
    dist = dc.clamp(sq_s + sq_t - dc.scale(dc.matmul(zs, dc.transpose(zt)), 2.0), 0.0, None)
    ce = dc.scale(dc.matmul(dc.Tensor(ys_onehot), dc.transpose(dc.log_softmax(logits_t))), -1.0)
    return dc.scale(dist, eta1) + dc.scale(ce, eta2)


def ot_alignment(cost, plan):
    """``<plan, cost>`` with the plan treated as a constant."""
    return dc.tsum(dc.mul(dc.Tensor(plan), cost))


def _ot_loss(bundle, xs, ys, xt, eta1, eta2, solve):
    k = bundle.dims.k_source
    yo = onehot(ys, k)
    zs, zt = nets.forward_features(bundle, xs), nets.forward_features(bundle, xt)
    logits_s, logits_t = nets.classify(bundle, zs), nets.classify(bundle, zt)
    ce = dc.softmax_cross_entropy(logits_s, yo)
    if eta1 == 0 and eta2 == 0:
        return ce, None
    cost = jumbot_cost(zs, yo, zt, logits_t, eta1, eta2)
    n, m = cost.shape
    plan = solve(cost.data, np.full(n, 1.0 / n), np.full(m, 1.0 / m))
    return ce + ot_alignment(cost, plan.pi), plan


def loss_jumbot(bundle, xs, ys, xt, cfg, max_iter=TOL.ot_train_max_iter, tol=TOL.ot_train_tol):
    return _ot_loss(bundle, xs, ys, xt, cfg.eta1, cfg.eta2,
                    lambda C, a, b: ot.sinkhorn_uot(C, a, b, cfg.tau, cfg.eta3, max_iter, tol))


def loss_mpot(bundle, xs, ys, xt, cfg, max_iter=TOL.ot_train_max_iter, tol=TOL.ot_train_tol):
    return _ot_loss(bundle, xs, ys, xt, cfg.eta1, cfg.eta2,
                    lambda C, a, b: ot.partial_ot_entropic(C, a, b, cfg.m, cfg.eps, max_iter, tol))


# ------------------------------------------------------------ training loop


@dataclass
class TrainConfig:
    total_iters: int = 5000
    batch_size: int = 36
    sampler: str | None = None
    eval_interval: int = 500
    seed: int = 2020
    schedule: dc.ScheduleConfig = field(default_factory=dc.ScheduleConfig)
    class_weight_interval: int = 500
    ar_weight_interval: int = 100
    hidden: tuple = (128, 128)
    snd_temperature: float = 0.05
    dev_max_iter: int = 4000
    task: str = "synthetic"

    def __post_init__(self):
        if self.total_iters < 0 or self.eval_interval < 1:
            raise ConfigError("total_iters must be >= 0 and eval_interval >= 1")
        if self.total_iters % self.eval_interval:
            raise ConfigError("eval_interval must divide total_iters")
        if self.sampler not in (None, "uniform", "stratified"):
            raise ConfigError(f"unknown sampler {self.sampler!r}")


def run_rng(seed, method, hp):
    """Sampling stream keyed on (seed, method, hyper-parameters)."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(hp_key(method, hp).encode())]))


def evaluate_checkpoint(bundle, data, it, scorers, seed, train_cfg):
    logits_t = nets.forward_logits_np(bundle, data.target.features)
    tgt_acc = selection.accuracy(logits_t, data.target.labels)
    src_acc = selection.score_s_acc(bundle, data.source_val)
    scores = {}
    for kind in scorers:
        kind = ScorerKind(kind)
        if kind is ScorerKind.S_ACC:
            v = src_acc
        elif kind is ScorerKind.ENT:
            v = selection.mean_entropy(logits_t)
        elif kind is ScorerKind.SND:
            v = selection.snd_from_features(nets.embed(bundle, data.target.features),
                                            train_cfg.snd_temperature)
        elif kind is ScorerKind.DEV:
            disc = selection.train_domain_discriminator(
                nets.embed(bundle, data.source_train.features),
                nets.embed(bundle, data.target.features), seed * 100_003 + it,
                max_iter=train_cfg.dev_max_iter)
            v = selection.score_dev(bundle, data.source_val, data.target, disc)
        elif kind is ScorerKind.ORACLE:
            v = tgt_acc
        else:
            v = selection.score_labeled_subset(bundle, data.target, data.subsets[kind.value])
        scores[kind.value] = float(v)
    return CheckpointScore(it, scores, float(tgt_acc), float(src_acc))


def train_run(method, train_cfg, data, scorers=selection.ALL_SCORERS):
    """Train one (method, hyper-parameters, seed) configuration and score its checkpoints."""
    t0 = time.perf_counter()
    cfg = train_cfg
    rec = RunRecord(method.name, method.hp(), cfg.seed, cfg.task)
    k = data.k_source
    dims = nets.NetDims(data.source_train.dim, k, tuple(cfg.hidden))
    bundle = nets.init_bundle(dims, cfg.seed, method.needs_disc, method.needs_critic)
    rng = run_rng(cfg.seed, method.name, method.hp())
    state = dc.OptimState(lr_multiplier=dict(bundle.lr_mult))
    src, tgt = data.source_train, data.target
    sampler = cfg.sampler or method.sampler
    draw = datagen.sample_stratified_batch if sampler == "stratified" else datagen.sample_uniform_batch
    bs = min(cfg.batch_size, len(src), len(tgt))
    gamma = np.ones(k)
    w_src = np.ones(len(src))
    critic_params = bundle.group("critic")
    main_params = {n: p for n, p in bundle.params.items() if n not in critic_params}
    ot_misses = 0
    total = cfg.total_iters

    try:
        # candidates are the snapshots taken during training; the untrained
        # network is scored only when there is no training at all
        if total == 0:
            rec.checkpoints.append(evaluate_checkpoint(bundle, data, 0, scorers, cfg.seed, cfg))
        for it in range(total):
            lr = dc.lr_at(it, cfg.schedule)
            grl = dc.grl_coeff(it, total)
            if method.name in ("pada", "ba3us") and it % cfg.class_weight_interval == 0 and it > 0:
                gamma = pada_class_weights(nets.predict_proba(bundle, tgt.features))
            if method.name == "ar" and it % cfg.ar_weight_interval == 0 and it > 0:
                with dc.no_grad():
                    phi = nets.critic(bundle, nets.forward_features(bundle, src.features),
                                      method.a_low, method.a_up).data.ravel()
                w_src = ar_solve_weights(phi, method.rho0)
            si = draw(src, bs, rng)
            ti = datagen.sample_uniform_batch(tgt, bs, rng)
            xs, ys, xt = src.features[si], src.labels[si], tgt.features[ti]
            bundle.zero_grad()

            if method.name == "source_only":
                loss = loss_source_only(bundle, xs, ys)
            elif method.name == "pada":
                loss = loss_pada(bundle, xs, ys, xt, gamma, method.lam, grl)
            elif method.name == "safn":
                loss = loss_safn(bundle, xs, ys, xt, method.lam, method.delta_r)
            elif method.name == "ba3us":
                na = n_augment(bs, it, total)
                x_aug = src.features[rng.choice(len(src), size=na, replace=False)] if na else None
                loss = loss_ba3us(bundle, xs, ys, xt, x_aug, gamma, method, it, total, grl)
            elif method.name == "ar":
                loss, critic_loss = loss_ar(bundle, xs, ys, xt, w_src[si], method, rng, grl)
                _check_finite(critic_loss)
                dc.backward(critic_loss)
                critic_grads = {n: p.grad for n, p in critic_params.items()}
                bundle.zero_grad()
            else:
                fn = loss_jumbot if method.name == "jumbot" else loss_mpot
                loss, plan = fn(bundle, xs, ys, xt, method)
                if plan is not None and not plan.converged:
                    ot_misses += 1
            _check_finite(loss)
            dc.backward(loss)
            dc.sgd_nesterov_step(main_params, lr, state)
            if method.needs_critic:
                # both graphs were built with the pre-update critic
                for n, p in critic_params.items():
                    p.grad = critic_grads[n]
                dc.sgd_nesterov_step(critic_params, lr, state)
            if (it + 1) % cfg.eval_interval == 0:
                rec.checkpoints.append(
                    evaluate_checkpoint(bundle, data, it + 1, scorers, cfg.seed, cfg))
    except NumericError as exc:
        rec.status = "failed"
        rec.error = str(exc)
        log.warning("run %s seed %d failed: %s", rec.hp_key(), cfg.seed, exc)
    if ot_misses:
        log.warning("%s: %d transport plans hit the iteration cap", rec.hp_key(), ot_misses)
    rec.wall_time = time.perf_counter() - t0
    rec.bundle = bundle
    return rec


def _check_finite(loss):
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite loss")


def method_to_dict(method):
    return {"method": method.name, **asdict(method)}
