"""Multi-site data model: synthetic heterogeneous sites, volume-to-mosaic
preprocessing, per-example normalization, and episodic support/target
sampling.

Sites play the role of tasks: each carries its own class-conditional
distributions, perturbed away from a shared base by a site-specific random
affine transform whose magnitude scales with the heterogeneity knob.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .models import Batch, SpecError
from .tensor import ShapeError, Tensor, read_named_array, write_named_array


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


ROLES = ("meta_train", "meta_val", "meta_test", "zero_shot")


class ConstantInputError(ValueError):
    """Per-example variance is zero; the scan is degenerate."""


class EpisodeError(ValueError):
    """A site cannot supply the requested support/target examples."""


@dataclass
class SiteDataset:
    """All examples from one acquisition site."""

    site_id: int
    features: np.ndarray
    labels: np.ndarray
    site_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.labels.ndim != 1 or self.labels.shape[0] != self.features.shape[0]:
            raise ShapeError(
                f"site {self.site_id}: {self.labels.shape[0] if self.labels.ndim else '?'} labels "
                f"for features {self.features.shape}"
            )
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"site {self.site_id}: non-finite features")

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class SiteTable:
    """Sites plus their role split.

    ``meta_train`` and ``meta_val`` share the same site ids (the validation
    role draws from each site's reserved validation slice of examples), while
    ``meta_test`` and ``zero_shot`` sites are disjoint from them and from each
    other.
    """

    sites: list[SiteDataset]
    roles: dict[str, list[int]]
    val_fraction: float = 0.5

    def __post_init__(self):
        self._by_id = {s.site_id: s for s in self.sites}
        if len(self._by_id) != len(self.sites):
            raise ValueError("duplicate site ids")
        for role in ROLES:
            self.roles.setdefault(role, [])
        train, val = set(self.roles["meta_train"]), set(self.roles["meta_val"])
        test, zero = set(self.roles["meta_test"]), set(self.roles["zero_shot"])
        if val and val != train:
            raise ValueError("meta_val must reuse the meta_train site ids")
        groups = [train, test, zero]
        for i, a in enumerate(groups):
            for b in groups[i + 1:]:
                if a & b:
                    raise ValueError(f"role site lists overlap: {sorted(a & b)}")
        if train | test | zero != set(self._by_id):
            raise ValueError("every site id must appear in exactly one role group")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")

    def site(self, site_id: int) -> SiteDataset:
        return self._by_id[site_id]

    def role_sites(self, role: str) -> list[int]:
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}, expected one of {ROLES}")
        return list(self.roles[role])

    def pool_indices(self, site_id: int, role: str) -> np.ndarray:
        """Example indices a role may draw from within one site."""
        site = self.site(site_id)
        if role in ("meta_test", "zero_shot"):
            return np.arange(site.n)
        cut = site.n - int(round(site.n * self.val_fraction))
        if role == "meta_train":
            return np.arange(cut)
        return np.arange(cut, site.n)

    def feature_shape(self) -> tuple[int, ...]:
        return tuple(self.sites[0].features.shape[1:])


@dataclass
class Episode:
    """One adaptation unit: a support set and a disjoint target set."""

    site_ids: list[int]
    support: Batch
    target: Batch
    support_indices: dict[int, np.ndarray] = field(default_factory=dict)
    target_indices: dict[int, np.ndarray] = field(default_factory=dict)


def _smooth_volume(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    coarse = rng.normal(size=(4, 4, 4))
    return resize_trilinear(coarse, shape)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def synth_generate(
    n_sites: int,
    n_per_site: int,
    heterogeneity: float,
    seed: int,
    feature_shape: tuple[int, ...] = (32,),
    split: tuple[int, int, int] | None = None,
    val_fraction: float = 0.5,
    shared_sep: float = 1.3,
    site_sep: float = 2.0,
    cov_jitter: float = 0.3,
) -> SiteTable:
    """Synthesize a heterogeneous multi-site binary-classification table.

    Every site separates its two classes along ``shared_sep * u + site_sep *
    w_i``: ``u`` is one shared direction and ``w_i`` is a site direction in
    the orthogonal complement, rotated away from a common anchor by an angle
    that grows with ``heterogeneity`` (fully decorrelated site directions at
    1). The per-site affine also mixes the noise, ``x = m + (I + h * jitter *
    G_i) z``, so covariances shift with the means. At ``heterogeneity == 0``
    every site has identical generation parameters; per-site Bayes difficulty
    is roughly constant in ``heterogeneity``, while any single pooled decision
    rule can only capture the shared component. Rank-3 feature shapes produce
    smooth synthetic volumes instead (class templates plus a per-site offset
    template), suitable for exercising the mosaic pipeline.
    """
    if n_sites < 2:
        raise SpecError(f"need at least 2 sites, got {n_sites}")
    if n_per_site < 8:
        raise SpecError(f"need at least 8 examples per site, got {n_per_site}")
    if heterogeneity < 0:
        raise SpecError(f"heterogeneity must be non-negative, got {heterogeneity}")
    feature_shape = tuple(int(x) for x in feature_shape)
    if len(feature_shape) not in (1, 3):
        raise SpecError(f"feature shape must be rank 1 or 3, got {feature_shape}")

    if split is None:
        n_zero = 1 if n_sites >= 3 else 0
        n_test = max(1, int(round(n_sites * 7 / 38)))
        split = (n_sites - n_test - n_zero, n_test, n_zero)
    n_train, n_test, n_zero = (int(x) for x in split)
    if min(n_train, n_test) < 1 or n_zero < 0 or n_train + n_test + n_zero != n_sites:
        raise SpecError(f"split {split} does not partition {n_sites} sites")

    rng = np.random.default_rng(seed)
    h = float(heterogeneity)
    volumetric = len(feature_shape) == 3
    if volumetric:
        base0 = _smooth_volume(rng, feature_shape)
        base1 = base0 + shared_sep * _smooth_volume(rng, feature_shape)
    else:
        d = feature_shape[0]
        if d < 3:
            raise SpecError(f"flat feature spaces need at least 3 dims, got {d}")
        u = _unit(rng.normal(size=d))
        anchor = rng.normal(size=d)
        anchor = _unit(anchor - (anchor @ u) * u)  # shared anchor for w_i at h=0

    n1 = n_per_site // 2
    n0 = n_per_site - n1
    labels = np.zeros(n_per_site)
    labels[1::2] = 1.0  # interleave classes so any contiguous slice stays balanced
    if n1 < n0:
        labels[-1] = 0.0

    sites = []
    for sid in range(n_sites):
        if volumetric:
            site_offset = h * site_sep * _smooth_volume(rng, feature_shape)
            meta = {"site_offset_norm": float(np.linalg.norm(site_offset))}
            feats = np.empty((n_per_site, *feature_shape))
            for i, y in enumerate(labels):
                template = base1 if y else base0
                feats[i] = template + site_offset + 0.5 * rng.normal(size=feature_shape)
        else:
            fresh = rng.normal(size=d)
            fresh = _unit(fresh - (fresh @ u) * u)
            w = _unit((1.0 - h) * anchor + h * fresh)
            mix = np.eye(d) + h * cov_jitter * rng.normal(size=(d, d)) / np.sqrt(d)
            mean1 = 0.5 * (shared_sep * u + site_sep * w)
            mean0 = -mean1
            meta = {"site_direction": w, "noise_mix": mix, "class_means": (mean0, mean1)}
            feats = np.empty((n_per_site, d))
            for i, y in enumerate(labels):
                center = mean1 if y else mean0
                feats[i] = center + mix @ rng.normal(size=d)
        sites.append(SiteDataset(sid, feats, labels.copy(), meta))

    ids = list(range(n_sites))
    roles = {
        "meta_train": ids[:n_train],
        "meta_val": ids[:n_train],
        "meta_test": ids[n_train:n_train + n_test],
        "zero_shot": ids[n_train + n_test:],
    }
    return SiteTable(sites, roles, val_fraction=val_fraction)


def zscore(features: np.ndarray) -> np.ndarray:
    """Normalize each example to zero mean and unit (population) std over its
    own elements.

    Rank-1 input is treated as a single example; for higher ranks the leading
    axis indexes examples.
    """
    x = _as_array(features)
    single = x.ndim == 1
    batch = x[None] if single else x
    flat = batch.reshape(batch.shape[0], -1)
    mean = flat.mean(axis=1, keepdims=True)
    std = flat.std(axis=1, keepdims=True)
    if np.any(std == 0.0):
        bad = int(np.argmax(std[:, 0] == 0.0))
        raise ConstantInputError(f"example {bad} has zero variance")
    out = ((flat - mean) / std).reshape(batch.shape)
    return out[0] if single else out


def _interp_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic linear interpolation matrix mapping n_in -> n_out samples.

    Endpoints align (source position i*(n_in-1)/(n_out-1)), so resizing to the
    same length is the identity and constants are preserved.
    """
    w = np.zeros((n_out, n_in))
    if n_out == 1:
        w[0, 0] = 1.0
        return w
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(pos.astype(np.int64), n_in - 2) if n_in > 1 else np.zeros(n_out, dtype=np.int64)
    frac = pos - lo
    rows = np.arange(n_out)
    w[rows, lo] = 1.0 - frac
    w[rows, np.minimum(lo + 1, n_in - 1)] += frac
    return w


def _resize_axis(x: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    w = _interp_weights(x.shape[axis], n_out)
    moved = np.moveaxis(x, axis, 0)
    out = np.tensordot(w, moved, axes=(1, 0))
    return np.moveaxis(out, 0, axis)


def resize_trilinear(volume: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    out = np.asarray(volume, dtype=np.float64)
    for axis, n_out in enumerate(shape):
        out = _resize_axis(out, axis, n_out)
    return out


def resize_bilinear(image: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    out = np.asarray(image, dtype=np.float64)
    for axis, n_out in enumerate(shape):
        out = _resize_axis(out, axis, n_out)
    return out


MOSAIC_GRID = 91
MOSAIC_SLICE_STEP = 5
MOSAIC_DOWNSAMPLE = 0.25


def mosaic_preprocess(volume: np.ndarray) -> np.ndarray:
    """Flatten a 3-D scan into a fixed-size 2-D mosaic.

    Steps: trilinear resize to 91^3; for each of the three orientations keep
    every fifth slice (19 slices); lay each orientation's slices out as one
    91x1729 row and stack the three rows; bilinear-downsample by 0.25 with
    floored output extents, yielding 68x432.
    """
    vol = _as_array(volume)
    if vol.ndim != 3:
        raise ShapeError(f"mosaic_preprocess expects a rank-3 volume, got {vol.shape}")
    if min(vol.shape) < 2:
        raise ShapeError(f"volume extents must all be >= 2, got {vol.shape}")
    if not np.all(np.isfinite(vol)):
        raise ValueError("volume holds non-finite values")

    cube = resize_trilinear(vol, (MOSAIC_GRID, MOSAIC_GRID, MOSAIC_GRID))
    picks = np.arange(0, MOSAIC_GRID, MOSAIC_SLICE_STEP)
    rows = []
    for axis in range(3):
        slices = [np.take(cube, i, axis=axis) for i in picks]
        rows.append(np.concatenate(slices, axis=1))
    mosaic = np.concatenate(rows, axis=0)
    out_h = int(mosaic.shape[0] * MOSAIC_DOWNSAMPLE)
    out_w = int(mosaic.shape[1] * MOSAIC_DOWNSAMPLE)
    return resize_bilinear(mosaic, (out_h, out_w))


def balanced_support_indices(
    pool: np.ndarray, labels: np.ndarray, k: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw k support indices, alternating classes as evenly as parity allows."""
    by_class = [rng.permutation(pool[labels[pool] == c]).tolist() for c in (0.0, 1.0)]
    picked: list[int] = []
    want = 0
    for _ in range(k):
        take_from = want if by_class[want] else 1 - want
        picked.append(by_class[take_from].pop())
        want = 1 - want
    return np.asarray(picked, dtype=np.int64)


def sample_episode(
    table: SiteTable,
    role: str,
    n_sites: int,
    k_support: int,
    t_target: int,
    rng: np.random.Generator,
) -> Episode:
    """Sample one episode: sites uniformly without replacement from the role
    list, then a class-balanced support set and a disjoint target set within
    each site."""
    candidates = table.role_sites(role)
    if len(candidates) < n_sites:
        raise EpisodeError(f"role {role!r} has {len(candidates)} sites, need {n_sites}")
    order = rng.permutation(len(candidates))[:n_sites]
    chosen = [candidates[i] for i in order]

    feats, labs = [], []
    tfeats, tlabs = [], []
    support_idx: dict[int, np.ndarray] = {}
    target_idx: dict[int, np.ndarray] = {}
    for sid in chosen:
        site = table.site(sid)
        pool = table.pool_indices(sid, role)
        if pool.size < k_support + t_target:
            raise EpisodeError(
                f"site {sid}: pool of {pool.size} examples cannot supply "
                f"{k_support} support + {t_target} target"
            )
        sup = balanced_support_indices(pool, site.labels, k_support, rng)
        remaining = np.setdiff1d(pool, sup)
        if remaining.size == t_target:
            tgt = remaining
        else:
            tgt = rng.permutation(remaining)[:t_target]
        support_idx[sid] = np.sort(sup)
        target_idx[sid] = np.sort(tgt)
        feats.append(site.features[support_idx[sid]])
        labs.append(site.labels[support_idx[sid]])
        tfeats.append(site.features[target_idx[sid]])
        tlabs.append(site.labels[target_idx[sid]])

    support = Batch.from_arrays(np.concatenate(feats), np.concatenate(labs))
    target = Batch.from_arrays(np.concatenate(tfeats), np.concatenate(tlabs))
    return Episode(chosen, support, target, support_idx, target_idx)


# ---------------------------------------------------------------------------
# dataset file: header record (version, site count, role lists, per-site
# example counts, feature shape, val fraction) followed by per-site tensors

_DATASET_MAGIC = b"SMDS"
_DATASET_VERSION = 1


def save_table(path: str, table: SiteTable) -> None:
    header = {
        "version": _DATASET_VERSION,
        "n_sites": len(table.sites),
        "roles": {role: list(map(int, ids)) for role, ids in table.roles.items()},
        "site_ids": [int(s.site_id) for s in table.sites],
        "examples_per_site": [s.n for s in table.sites],
        "feature_shape": list(table.feature_shape()),
        "val_fraction": table.val_fraction,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_DATASET_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for s in table.sites:
            write_named_array(fh, f"site{s.site_id}/features", s.features)
            write_named_array(fh, f"site{s.site_id}/labels", s.labels)


def load_table(path: str) -> SiteTable:
    with open(path, "rb") as fh:
        if fh.read(4) != _DATASET_MAGIC:
            raise ValueError(f"{path} is not a dataset file")
        blob_len = struct.unpack("<Q", fh.read(8))[0]
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        if header["version"] != _DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {header['version']}")
        sites = []
        for sid in header["site_ids"]:
            fname, feats = read_named_array(fh)
            lname, labels = read_named_array(fh)
            if fname != f"site{sid}/features" or lname != f"site{sid}/labels":
                raise ValueError(f"dataset records out of order near site {sid}")
            sites.append(SiteDataset(sid, feats, labels, {"source": path}))
    roles = {role: list(ids) for role, ids in header["roles"].items()}
    return SiteTable(sites, roles, val_fraction=header["val_fraction"])
