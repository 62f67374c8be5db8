"""Model-selection scorers and checkpoint / hyper-parameter selection."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from . import nets
from .config import TOL, ConfigError
from .diffcore import _log_softmax_np

log = logging.getLogger(__name__)


class ScorerKind(str, enum.Enum):
    S_ACC = "S_ACC"
    ENT = "ENT"
    DEV = "DEV"
    SND = "SND"
    ORACLE = "ORACLE"
    ONE_SHOT = "ONE_SHOT"
    RND_50 = "RND_50"
    RND_100 = "RND_100"

    @property
    def higher_better(self):
        return self not in (ScorerKind.ENT, ScorerKind.DEV)

    @property
    def uses_target_labels(self):
        return self in (ScorerKind.ORACLE, ScorerKind.ONE_SHOT, ScorerKind.RND_50,
                        ScorerKind.RND_100)


ALL_SCORERS = tuple(ScorerKind)
UNSUPERVISED = tuple(k for k in ScorerKind if not k.uses_target_labels)
FILTERED_METHODS = ("jumbot", "mpot", "ba3us")


# ------------------------------------------------------------------ scorers


def accuracy(logits, labels):
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def score_s_acc(bundle, src_val):
    return accuracy(nets.forward_logits_np(bundle, src_val.features), src_val.labels)


def mean_entropy(logits):
    ls = _log_softmax_np(np.asarray(logits, dtype=np.float64))
    return float(-(np.exp(ls) * ls).sum(axis=1).mean())


def score_ent(bundle, target):
    return mean_entropy(nets.forward_logits_np(bundle, target.features))


def snd_from_features(feats, temperature=0.05, block_size=64):
    """Mean row entropy of the temperature-scaled neighbour softmax (self excluded).

    Rows are processed in blocks so memory is ``block_size x n``.
    """
    z = np.asarray(feats, dtype=np.float64)
    n = z.shape[0]
    if n < 2:
        raise ConfigError("SND needs at least two samples")
    nrm = np.linalg.norm(z, axis=1, keepdims=True)
    z = z / np.where(nrm > 0, nrm, 1.0)
    total = 0.0
    for start in range(0, n, block_size):
        stop = min(start + block_size, n)
        s = (z[start:stop] @ z.T) / temperature
        s[np.arange(stop - start), np.arange(start, stop)] = -np.inf
        ls = _log_softmax_np(s)
        p = np.exp(ls)
        total += float(-(p * np.where(p > 0, ls, 0.0)).sum())
    return total / n


def score_snd(bundle, target, temperature=0.05):
    return snd_from_features(nets.embed(bundle, target.features), temperature)


def score_labeled_subset(bundle, target, subset_indices):
    idx = np.asarray(subset_indices, dtype=np.int64)
    if idx.size == 0:
        raise ConfigError("labeled subset is empty")
    return accuracy(nets.forward_logits_np(bundle, target.features[idx]), target.labels[idx])


# ------------------------------------------------------------------- DEV


@dataclass
class DomainDiscriminatorModel:
    weight: np.ndarray
    bias: float
    mean: np.ndarray
    std: np.ndarray
    decay: float
    test_accuracy: float
    n_source: int
    n_target: int

    def margin(self, feats):
        x = (np.asarray(feats) - self.mean) / self.std
        return x @ self.weight + self.bias

    def prob_target(self, feats):
        m = self.margin(feats)
        return np.exp(-np.logaddexp(0.0, -m))


def _pegasos(x, y, decay, max_iter):
    """Full-batch Pegasos subgradient descent for ``decay/2 |w|^2 + mean hinge``."""
    n, d = x.shape
    xb = np.hstack([x, np.ones((n, 1))])
    w = np.zeros(d + 1)
    radius = 1.0 / np.sqrt(decay)
    for t in range(1, max_iter + 1):
        active = y * (xb @ w) < 1.0
        sub = decay * w - (y[active] @ xb[active]) / n
        w_new = w - sub / (decay * t)
        nw = np.linalg.norm(w_new)
        if nw > radius:
            w_new *= radius / nw
        if np.linalg.norm(w_new - w) <= 1e-9 * max(np.linalg.norm(w_new), 1e-12):
            w = w_new
            break
        w = w_new
    return w[:d], float(w[d])


def train_domain_discriminator(src_feats, tgt_feats, seed, cap=3000, max_iter=4000,
                               decays=None):
    """Linear max-margin source/target classifier, best of 5 decays on a held-out 20%."""
    src = np.asarray(src_feats, dtype=np.float64)
    tgt = np.asarray(tgt_feats, dtype=np.float64)
    if len(src) == 0 or len(tgt) == 0:
        raise ConfigError("discriminator needs samples from both domains")
    rng = np.random.default_rng(seed)
    src = src[rng.permutation(len(src))[:min(cap, len(src))]]
    tgt = tgt[rng.permutation(len(tgt))[:min(cap, len(tgt))]]
    x = np.vstack([src, tgt])
    y = np.concatenate([-np.ones(len(src)), np.ones(len(tgt))])
    perm = rng.permutation(len(x))
    k = int(round(0.8 * len(x)))
    tr, te = perm[:k], perm[k:]
    if te.size == 0 or np.unique(y[tr]).size < 2:
        raise ConfigError("degenerate discriminator split: need both domains in training")
    mu = x[tr].mean(axis=0)
    sd = x[tr].std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    xs = (x - mu) / sd
    best = None
    for decay in (np.logspace(-2, 4, 5) if decays is None else decays):
        w, b = _pegasos(xs[tr], y[tr], float(decay), max_iter)
        acc = float(np.mean(np.sign(xs[te] @ w + b + 1e-300) == y[te]))
        if best is None or acc > best.test_accuracy:
            best = DomainDiscriminatorModel(w, b, mu, sd, float(decay), acc,
                                            int(np.sum(y[tr] < 0)), int(np.sum(y[tr] > 0)))
    return best


def dev_risk(weights, losses):
    """Control-variate importance-weighted risk.

    ``L = w * loss``; ``eta = -Cov(L, w) / Var(w)`` (0 when ``Var(w)`` is
    negligible); the estimate is ``mean(L) + eta * mean(w) - eta``.
    """
    w = np.asarray(weights, dtype=np.float64)
    L = w * np.asarray(losses, dtype=np.float64)
    var_w = float(np.var(w, ddof=1)) if w.size > 1 else 0.0
    if var_w < TOL.var_floor:
        eta = 0.0
    else:
        eta = -float(np.cov(np.vstack([L, w]))[0, 1]) / var_w
    return float(L.mean() + eta * w.mean() - eta)


def score_dev(bundle, src_val, target, disc):
    feats = nets.embed(bundle, src_val.features)
    pred = np.argmax(nets.forward_logits_np(bundle, src_val.features), axis=1)
    err = (pred != src_val.labels).astype(np.float64)
    d = np.clip(disc.prob_target(feats), 1e-12, 1 - 1e-12)
    w = (disc.n_source / disc.n_target) * d / (1.0 - d)
    return dev_risk(w, err)


# ------------------------------------------------------------------ selection


def _best_index(values, higher_better):
    vals = np.asarray(values, dtype=np.float64)
    target = vals.max() if higher_better else vals.min()
    return int(np.flatnonzero(vals == target)[0])


def checkpoint_value(ckpt, kind):
    kind = ScorerKind(kind)
    if kind is ScorerKind.ORACLE:
        return ckpt.target_acc
    return ckpt.scores[kind.value]


def select_checkpoint(record, kind, higher_better=None):
    """Iteration of the best checkpoint under ``kind``; ties go to the earliest."""
    kind = ScorerKind(kind)
    if not record.checkpoints:
        raise ConfigError("record has no checkpoints")
    hb = kind.higher_better if higher_better is None else higher_better
    i = _best_index([checkpoint_value(c, kind) for c in record.checkpoints], hb)
    return record.checkpoints[i].iteration


def checkpoint_at(record, iteration):
    for c in record.checkpoints:
        if c.iteration == iteration:
            return c
    raise KeyError(iteration)


def source_accuracy_floor(source_only_acc, fraction=0.9):
    return fraction * source_only_acc


def select_hyperparams(final_records, kind, source_acc_floor=None):
    """Best record by its end-of-training score after the low-source-accuracy filter.

    The floor applies only to ``FILTERED_METHODS``; failed runs are never
    eligible. Returns the winning record (its ``hp`` is the chosen config).
    """
    kind = ScorerKind(kind)
    methods = {r.method for r in final_records}
    if len(methods) > 1:
        raise ConfigError(f"records mix methods {sorted(methods)}")
    pool = [r for r in final_records if r.ok]
    if source_acc_floor is not None:
        pool = [r for r in pool
                if r.method not in FILTERED_METHODS or r.final.src_val_acc >= source_acc_floor]
    if not pool:
        raise ConfigError("every run was filtered out; expand the grid or lower the floor")
    i = _best_index([checkpoint_value(r.final, kind) for r in pool], kind.higher_better)
    return pool[i]
