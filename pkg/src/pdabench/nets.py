"""Backbone MLP, 256-d linear bottleneck, linear classifier and the two adversaries."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .config import TOL, ConfigError, FormatError

CKPT_MAGIC = b"PDAC"
CKPT_VERSION = 1


@dataclass(frozen=True)
class NetDims:
    d_in: int
    k_source: int
    hidden: tuple = (128, 128)
    bottleneck: int = 256
    adv_hidden: int = 64


def _linear(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=(fan_out,))
    return dc.Tensor(w, requires_grad=True), dc.Tensor(b, requires_grad=True)


@dataclass
class ModelBundle:
    """Named parameters plus their lr multiplier (1 for backbone, 10 for new heads)."""

    dims: NetDims
    params: dict = field(default_factory=dict)
    lr_mult: dict = field(default_factory=dict)

    def add(self, prefix, rng, fan_in, fan_out, mult):
        w, b = _linear(rng, fan_in, fan_out)
        for suffix, t in (("w", w), ("b", b)):
            name = f"{prefix}.{suffix}"
            self.params[name] = t
            self.lr_mult[name] = mult

    def group(self, prefix):
        return {k: v for k, v in self.params.items() if k.split(".")[0].startswith(prefix)}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def snapshot(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def restore(self, snap):
        for k, v in snap.items():
            self.params[k].data = v.copy()


def init_bundle(dims, seed, with_discriminator=False, with_critic=False):
    rng = np.random.default_rng(seed)
    b = ModelBundle(dims)
    fan = dims.d_in
    for i, h in enumerate(dims.hidden):
        b.add(f"backbone{i}", rng, fan, h, 1.0)
        fan = h
    b.add("bottleneck", rng, fan, dims.bottleneck, 10.0)
    b.add("classifier", rng, dims.bottleneck, dims.k_source, 10.0)
    if with_discriminator:
        b.add("disc0", rng, dims.bottleneck, dims.adv_hidden, 10.0)
        b.add("disc1", rng, dims.adv_hidden, 1, 10.0)
    if with_critic:
        # base rate: the gradient-penalized critic diverges at the 10x head rate
        b.add("critic0", rng, dims.bottleneck, dims.adv_hidden, 1.0)
        b.add("critic1", rng, dims.adv_hidden, 1, 1.0)
    return b


def _dense(b, prefix, x):
    return dc.matmul(x, b.params[f"{prefix}.w"]) + b.params[f"{prefix}.b"]


def forward_features(b, x):
    x = dc.as_tensor(x)
    if x.shape[1] != b.dims.d_in:
        raise ConfigError(f"input dim {x.shape[1]} != network input dim {b.dims.d_in}")
    h = x
    for i in range(len(b.dims.hidden)):
        h = dc.relu(_dense(b, f"backbone{i}", h))
    return _dense(b, "bottleneck", h)


def classify(b, z):
    return _dense(b, "classifier", z)


def forward_logits(b, x):
    return classify(b, forward_features(b, x))


def discriminator_logits(b, z):
    """Pre-sigmoid score; sigmoid of it is P(domain = source)."""
    return _dense(b, "disc1", dc.relu(_dense(b, "disc0", z)))


def discriminator_prob(b, z):
    """P(domain = source), kept inside the open unit interval (training uses the logits)."""
    return dc.clamp(dc.sigmoid(discriminator_logits(b, z)), TOL.prob_clamp, 1.0 - TOL.prob_clamp)


def critic(b, z, a_low, a_up):
    return dc.clamp(_dense(b, "critic1", dc.relu(_dense(b, "critic0", z))), a_low, a_up)


def critic_input_grad_norm_penalty(b, z, a_low, a_up):
    """Mean of ``(||d critic / d z||_2 - 1)^2`` over rows of the constant input ``z``.

    The input gradient of a one-hidden-layer relu critic is
    ``W0 (mask * w1)`` with a piecewise-constant relu mask, so the penalty is a
    first-order function of the critic weights and needs no double backprop.
    Rows whose output is clamped have zero input gradient.
    """
    zd = dc.as_tensor(z).data
    w0, b0 = b.params["critic0.w"], b.params["critic0.b"]
    w1, b1 = b.params["critic1.w"], b.params["critic1.b"]
    pre = zd @ w0.data + b0.data
    mask = (pre > 0).astype(np.float64)
    raw = np.maximum(pre, 0) @ w1.data + b1.data
    inside = ((raw >= a_low) & (raw <= a_up)).astype(np.float64)
    gate = dc.Tensor(mask * inside)
    g = dc.matmul(dc.mul(gate, dc.transpose(w1)), dc.transpose(w0))
    return dc.mean(dc.square(dc.row_l2_norm(g) - 1.0))


def forward_logits_np(b, x):
    with dc.no_grad():
        return forward_logits(b, x).data


def predict_proba(b, x):
    with dc.no_grad():
        return dc._softmax_np(forward_logits(b, x).data)


def embed(b, x):
    with dc.no_grad():
        return forward_features(b, x).data


# --------------------------------------------------------------- checkpoints


def save_checkpoint(b, path, meta=None):
    path = Path(path)
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(b.params))]
    for name in sorted(b.params):
        arr = b.params[name].data
        nb = name.encode()
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack("<BI", int(b.lr_mult[name]), arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    path.write_bytes(b"".join(chunks))
    side = {"dims": {"d_in": b.dims.d_in, "k_source": b.dims.k_source,
                     "hidden": list(b.dims.hidden), "bottleneck": b.dims.bottleneck,
                     "adv_hidden": b.dims.adv_hidden}, **(meta or {})}
    path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True))


def load_checkpoint(path):
    path = Path(path)
    raw = path.read_bytes()

    def need(off, k):
        if off + k > len(raw):
            raise FormatError(f"{path}: truncated at byte offset {len(raw)}, need {off + k}")

    need(0, 12)
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at byte offset 0")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    off = 12
    side = json.loads(path.with_suffix(".json").read_text())
    dd = side["dims"]
    dims = NetDims(dd["d_in"], dd["k_source"], tuple(dd["hidden"]), dd["bottleneck"],
                   dd["adv_hidden"])
    b = ModelBundle(dims)
    for _ in range(count):
        need(off, 4)
        (ln,) = struct.unpack_from("<I", raw, off)
        off += 4
        need(off, ln + 5)
        name = raw[off:off + ln].decode()
        off += ln
        mult, ndim = struct.unpack_from("<BI", raw, off)
        off += 5
        need(off, 4 * ndim)
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        need(off, 8 * size)
        data = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
        b.params[name] = dc.Tensor(data, requires_grad=True)
        b.lr_mult[name] = float(mult)
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes at byte offset {off}")
    return b, side
