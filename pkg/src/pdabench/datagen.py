"""Synthetic partial-shift data, source splits, batch samplers and embedding files."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, FormatError

log = logging.getLogger(__name__)

EMBED_MAGIC = b"PDAE"
EMBED_VERSION = 1
_HEADER = struct.Struct("<4sIIIIB")


@dataclass
class LabeledSet:
    features: np.ndarray
    labels: np.ndarray
    domain: str
    k_universe: int
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ConfigError("a labeled set needs an n x d feature matrix with n >= 1")
        if self.labels.shape != (self.features.shape[0],):
            raise ConfigError("labels must have one entry per feature row")
        if np.any(self.labels < 0) or np.any(self.labels >= self.k_universe):
            raise ConfigError("labels must lie in [0, k_universe)")
        if not np.all(np.isfinite(self.features)):
            raise ConfigError("features contain NaN or Inf")
        if self.domain not in ("source", "target"):
            raise ConfigError(f"domain must be 'source' or 'target', got {self.domain!r}")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledSet(self.features[idx], self.labels[idx], self.domain, self.k_universe,
                          list(self.class_names))


@dataclass(frozen=True)
class PartialShiftSpec:
    d: int = 16
    k_source: int = 10
    k_target: int = 6
    n_per_class_source: int = 60
    n_per_class_target: int = 50
    class_sep: float = 2.0
    rotation: float = 0.9
    translation: float = 0.75
    jitter: float = 0.15
    noise: float = 0.4
    warp: float = 0.0

    def validate(self):
        if self.k_target >= self.k_source:
            raise ConfigError("partial shift needs k_target < k_source")
        if self.k_target < 1 or self.d < 2:
            raise ConfigError("need k_target >= 1 and d >= 2")
        if self.n_per_class_source < 1 or self.n_per_class_target < 1:
            raise ConfigError("per-class counts must be >= 1")
        if self.noise <= 0:
            raise ConfigError("noise sigma must be > 0")


def _rotation(d, angle, rng):
    """Rotation by ``angle`` inside d/2 random orthogonal planes."""
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    c, s = np.cos(angle), np.sin(angle)
    r = np.eye(d)
    for k in range(0, d - 1, 2):
        r[k:k + 2, k:k + 2] = [[c, -s], [s, c]]
    return q @ r @ q.T


def gen_partial_blobs(spec, seed):
    """Gaussian class clusters for the source; a rotated, shifted subset of them for the target.

    Target classes are exactly ``0 .. k_target - 1``. Each target cluster mean
    gets the shared rotation and translation plus its own jitter; ``warp`` adds
    a smooth ``tanh`` bend to the transformed target points.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    d, ks, kt = spec.d, spec.k_source, spec.k_target
    means = rng.standard_normal((ks, d))
    means *= spec.class_sep / np.linalg.norm(means, axis=1, keepdims=True).mean()

    ns = spec.n_per_class_source
    ys = np.repeat(np.arange(ks), ns)
    xs = means[ys] + spec.noise * rng.standard_normal((ys.size, d))

    rot = _rotation(d, spec.rotation, rng)
    shift = rng.standard_normal(d)
    shift *= spec.translation / np.linalg.norm(shift)
    jit = spec.jitter * rng.standard_normal((kt, d))
    nt = spec.n_per_class_target
    yt = np.repeat(np.arange(kt), nt)
    xt = (means[yt] + jit[yt] + spec.noise * rng.standard_normal((yt.size, d))) @ rot.T + shift
    if spec.warp:
        bend = rng.standard_normal((d, d)) / np.sqrt(d)
        xt = xt + spec.warp * np.tanh(xt @ bend)

    names = [f"class_{k:02d}" for k in range(ks)]
    return (LabeledSet(xs, ys, "source", ks, names), LabeledSet(xt, yt, "target", ks, names))


@dataclass
class SplitIndices:
    train: np.ndarray
    val: np.ndarray


def split_source(lset, ratio=0.8, seed=0):
    """Stratified shuffle split; classes with fewer than 2 samples go wholly to train."""
    n = len(lset)
    if n < 5:
        raise ConfigError("split_source needs at least 5 samples")
    rng = np.random.default_rng(seed)
    train, val = [], []
    for c in np.unique(lset.labels):
        idx = np.flatnonzero(lset.labels == c)
        idx = idx[rng.permutation(idx.size)]
        if idx.size < 2:
            log.warning("class %d has %d sample(s); assigned to train", c, idx.size)
            train.extend(idx)
            continue
        k = min(max(int(round(ratio * idx.size)), 1), idx.size - 1)
        train.extend(idx[:k])
        val.extend(idx[k:])
    return SplitIndices(np.sort(np.array(train, dtype=np.int64)),
                        np.sort(np.array(val, dtype=np.int64)))


def sample_uniform_batch(lset, batch_size, rng):
    """``batch_size`` distinct indices drawn uniformly."""
    n = len(lset)
    if batch_size > n or batch_size < 1:
        raise ConfigError(f"batch size {batch_size} not in [1, {n}]")
    return rng.choice(n, size=batch_size, replace=False)


def sample_stratified_batch(lset, batch_size, rng):
    """Class-balanced batch: per-class counts differ by at most one.

    Classes are visited in ascending label order; the first ``B mod K`` classes
    get the extra sample. Within a class samples are drawn without replacement
    (with replacement only if the class is smaller than its quota).
    """
    classes = np.unique(lset.labels)
    k = classes.size
    if batch_size < k:
        raise ConfigError(f"stratified batch of {batch_size} cannot cover {k} classes")
    base, extra = divmod(batch_size, k)
    out = []
    for j, c in enumerate(classes):
        q = base + (1 if j < extra else 0)
        idx = np.flatnonzero(lset.labels == c)
        out.append(rng.choice(idx, size=q, replace=q > idx.size))
    return np.concatenate(out)


# --------------------------------------------------------------- file format


def save_embeddings(lset, path, provenance="", has_labels=True):
    path = Path(path)
    n, d = lset.features.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EMBED_MAGIC, EMBED_VERSION, n, d, lset.k_universe, int(has_labels)))
        fh.write(lset.features.astype("<f4").tobytes())
        if has_labels:
            fh.write(lset.labels.astype("<i4").tobytes())
    manifest = {"domain": lset.domain, "class_names": list(lset.class_names),
                "provenance": provenance}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_embeddings(path, domain=None):
    """Read a ``PDAE`` file; f32 features are promoted to f64."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header at byte offset {len(raw)}, "
                          f"expected {_HEADER.size} bytes")
    magic, version, n, d, k, has_labels = _HEADER.unpack_from(raw, 0)
    if magic != EMBED_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != EMBED_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    if n == 0 or d == 0:
        raise FormatError(f"{path}: empty set (n={n}, d={d}) at byte offset 8")
    expected = _HEADER.size + 4 * n * d + (4 * n if has_labels else 0)
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)} "
                          f"(mismatch at byte offset {min(len(raw), expected)})")
    off = _HEADER.size
    feats = np.frombuffer(raw, dtype="<f4", count=n * d, offset=off).reshape(n, d).astype(np.float64)
    off += 4 * n * d
    if has_labels:
        labels = np.frombuffer(raw, dtype="<i4", count=n, offset=off).astype(np.int64)
    else:
        labels = np.zeros(n, dtype=np.int64)
    manifest = {}
    mpath = path.with_suffix(".json")
    if mpath.exists():
        manifest = json.loads(mpath.read_text())
    dom = domain or manifest.get("domain", "source")
    try:
        return LabeledSet(feats, labels, dom, k, manifest.get("class_names", []))
    except ConfigError as exc:
        raise FormatError(f"{path}: {exc}") from None


# ---------------------------------------------------------- labeled subsets


def pick_labeled_subset(target, mode, seed, k=None):
    """Indices of a small labeled target subset: ``one_shot`` or ``rnd`` (k random)."""
    rng = np.random.default_rng(seed)
    if mode == "one_shot":
        out = []
        for c in np.unique(target.labels):
            idx = np.flatnonzero(target.labels == c)
            out.append(int(rng.choice(idx)))
        return sorted(out)
    if mode == "rnd":
        if k is None or k < 1 or k > len(target):
            raise ConfigError(f"rnd subset size {k} not in [1, {len(target)}]")
        return sorted(int(i) for i in rng.choice(len(target), size=k, replace=False))
    raise ConfigError(f"unknown subset mode {mode!r}")


@dataclass
class DomainData:
    """Everything a run needs: source train/val, target and persisted labeled subsets."""

    source_train: LabeledSet
    source_val: LabeledSet
    target: LabeledSet
    subsets: dict

    @property
    def k_source(self):
        return self.source_train.k_universe


SUBSET_SIZES = {"ONE_SHOT": None, "RND_50": 50, "RND_100": 100}


def make_subsets(target, seed):
    subsets = {"ONE_SHOT": pick_labeled_subset(target, "one_shot", seed)}
    for name, k in (("RND_50", 50), ("RND_100", 100)):
        subsets[name] = pick_labeled_subset(target, "rnd", seed, min(k, len(target)))
    return subsets


def prepare(source, target, seed, ratio=0.8):
    split = split_source(source, ratio, seed)
    return DomainData(source.subset(split.train), source.subset(split.val), target,
                      make_subsets(target, seed))


def write_dataset(out_dir, source, target, seeds, meta=None):
    """Persist a dataset directory: two embedding files plus the split and subsets per seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prov = json.dumps(meta or {}, sort_keys=True)
    save_embeddings(source, out / "source.pdae", provenance=prov)
    save_embeddings(target, out / "target.pdae", provenance=prov)
    splits, subsets = {}, {}
    for seed in seeds:
        split = split_source(source, 0.8, seed)
        splits[str(seed)] = {"train": split.train.tolist(), "val": split.val.tolist()}
        subsets[str(seed)] = make_subsets(target, seed)
    (out / "split.json").write_text(json.dumps(splits, sort_keys=True))
    (out / "subsets.json").write_text(json.dumps(subsets, sort_keys=True))
    (out / "dataset.json").write_text(json.dumps(meta or {}, indent=2, sort_keys=True))
    return out


def read_domains(path):
    path = Path(path)
    return load_embeddings(path / "source.pdae", "source"), load_embeddings(path / "target.pdae", "target")


def read_dataset(path, seed):
    """Run inputs for ``seed``: the persisted split and subsets if present, else derived afresh."""
    path = Path(path)
    source, target = read_domains(path)
    split_file, subset_file = path / "split.json", path / "subsets.json"
    if not (split_file.exists() and subset_file.exists()):
        return prepare(source, target, seed)
    splits = json.loads(split_file.read_text())
    subsets = json.loads(subset_file.read_text())
    if str(seed) not in splits or str(seed) not in subsets:
        log.info("seed %s not persisted in %s; deriving split and subsets", seed, path)
        return prepare(source, target, seed)
    sp = splits[str(seed)]
    return DomainData(source.subset(sp["train"]), source.subset(sp["val"]), target,
                      subsets[str(seed)])


def spec_to_dict(spec):
    return asdict(spec)
