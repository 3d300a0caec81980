"""Evaluation protocols and baselines: few-shot meta-testing of the top-5
checkpoints, zero-shot scoring, supervised transfer/scratch baselines, and
the episode-size random search.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .data import EpisodeError, SiteTable, balanced_support_indices
from .meta import (
    CheckpointEntry,
    CheckpointRing,
    MetaConfig,
    adapt,
    batch_loss,
    cosine_lr,
    meta_train,
    predict_probs,
)
from .metrics import DegenerateLabelsError, balanced_accuracy, roc_auc
from .models import Batch, ModelSpec, init_params
from .tensor import NonFiniteError, ParamSet, grad, write_paramset


class SearchExhaustedError(RuntimeError):
    """Every random-search trial failed."""


@dataclass
class EvalReport:
    """Outcome of one evaluation protocol, pooled and per site."""

    protocol: str
    per_site: list[dict]
    pooled_auc: float
    balanced_acc: float
    n_examples: int
    config_hash: str
    seed: int
    zero_shot_auc: float | None = None
    scores: list[float] = field(default_factory=list)
    labels: list[int] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.per_site and sum(e["n"] for e in self.per_site) != self.n_examples:
            raise ValueError("per-site example counts must sum to the pooled count")
        if not 0.0 <= self.pooled_auc <= 1.0 or not 0.0 <= self.balanced_acc <= 1.0:
            raise ValueError("metrics must lie in [0, 1]")

    def to_json_dict(self) -> dict:
        out = dataclasses.asdict(self)
        return out

    @classmethod
    def from_json_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d.pop("timestamp", None)
        return cls(**d)

    def csv_rows(self) -> list[str]:
        rows = [
            f"{self.protocol},site{e['site_id']},{e['auc']:.10g},{e['n']}"
            for e in self.per_site
        ]
        rows.append(f"{self.protocol},pooled,{self.pooled_auc:.10g},{self.n_examples}")
        return rows


def config_fingerprint(config: MetaConfig) -> str:
    return hashlib.sha256(config.to_json().encode("utf-8")).hexdigest()[:16]


def paramset_digest(params: ParamSet) -> str:
    buf = io.BytesIO()
    write_paramset(buf, params)
    return hashlib.sha256(buf.getvalue()).hexdigest()


@dataclass(frozen=True)
class SearchSpace:
    """Episode-size grid for the hyperparameter random search."""

    n_sites_choices: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    k_support_choices: tuple[int, ...] = (10, 12, 15, 18, 20)
    t_target_choices: tuple[int, ...] = (2, 5, 8, 10)
    n_trials: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.n_trials < 1:
            raise ValueError(f"n_trials must be >= 1, got {self.n_trials}")


def _site_support_split(
    table: SiteTable, site_id: int, k: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    site = table.site(site_id)
    pool = np.arange(site.n)
    if site.n < k + 1:
        raise EpisodeError(f"site {site_id}: {site.n} examples cannot supply {k} support + holdout")
    support = balanced_support_indices(pool, site.labels, k, rng)
    heldout = rng.permutation(np.setdiff1d(pool, support))
    return np.sort(support), heldout


def finetune_few_shot(
    ring: CheckpointRing,
    table: SiteTable,
    config: MetaConfig,
    rng: np.random.Generator,
) -> EvalReport:
    """Fine-tune every recorded checkpoint per meta-test site on ``k_support``
    examples using the learned inner-loop rule, score the disjoint held-out
    remainder of each site in full, and report the checkpoint that wins on the
    pooled first held-out chunk (the fine-tuning validation episodes)."""
    if not len(ring):
        raise ValueError("checkpoint ring is empty")
    test_sites = table.role_sites("meta_test")
    if not test_sites:
        raise ValueError("meta_test role is empty")

    splits = {sid: _site_support_split(table, sid, config.k_support, rng) for sid in test_sites}
    site_scores: list[dict[int, np.ndarray]] = []
    selection: list[float] = []
    for entry in ring.entries:
        spec, lr_table = entry.spec, entry.lr_table()
        per_site: dict[int, np.ndarray] = {}
        val_scores, val_labels = [], []
        for sid in test_sites:
            site = table.site(sid)
            support_idx, heldout_idx = splits[sid]
            support = Batch.from_arrays(site.features[support_idx], site.labels[support_idx])
            adapted = adapt(spec, entry.param_set(), support, lr_table, config.inner_steps)
            probs = predict_probs(spec, adapted, Batch.from_arrays(
                site.features[heldout_idx], site.labels[heldout_idx]))
            per_site[sid] = probs
            chunk = min(config.t_target, len(heldout_idx))
            val_scores.extend(probs[:chunk].tolist())
            val_labels.extend(site.labels[heldout_idx[:chunk]].tolist())
        site_scores.append(per_site)
        selection.append(roc_auc(val_scores, val_labels))

    best_i = int(np.argmax(selection))  # ties keep the higher-ranked checkpoint
    best = site_scores[best_i]
    per_site_rows, pooled_s, pooled_y = [], [], []
    for sid in test_sites:
        probs = best[sid]
        labels = table.site(sid).labels[splits[sid][1]]
        per_site_rows.append({
            "site_id": int(sid),
            "auc": roc_auc(probs, labels),
            "n": int(len(probs)),
        })
        pooled_s.extend(probs.tolist())
        pooled_y.extend(labels.tolist())

    return EvalReport(
        protocol="few_shot_meta_test",
        per_site=per_site_rows,
        pooled_auc=roc_auc(pooled_s, pooled_y),
        balanced_acc=balanced_accuracy(pooled_s, pooled_y),
        n_examples=len(pooled_s),
        config_hash=config_fingerprint(config),
        seed=config.seed,
        scores=[float(x) for x in pooled_s],
        labels=[int(x) for x in pooled_y],
        metadata={
            "n_checkpoints": len(ring),
            "selection_auc": [float(x) for x in selection],
            "selected_checkpoint": best_i,
        },
    )


def zero_shot_eval(checkpoint: CheckpointEntry, table: SiteTable) -> EvalReport:
    """Score the single zero-shot site with forward passes only; the
    checkpoint's parameters are provably untouched (digest equality)."""
    zero_sites = table.role_sites("zero_shot")
    if len(zero_sites) != 1:
        raise ValueError(f"zero_shot role must hold exactly one site, got {len(zero_sites)}")
    sid = zero_sites[0]
    site = table.site(sid)
    params = checkpoint.param_set()
    digest_before = paramset_digest(params)
    probs = predict_probs(checkpoint.spec, params, Batch.from_arrays(site.features, site.labels))
    digest_after = paramset_digest(params)
    if digest_before != digest_after:
        raise RuntimeError("zero-shot evaluation mutated parameters")
    auc = roc_auc(probs, site.labels)
    return EvalReport(
        protocol="zero_shot",
        per_site=[{"site_id": int(sid), "auc": auc, "n": site.n}],
        pooled_auc=auc,
        balanced_acc=balanced_accuracy(probs, site.labels),
        n_examples=site.n,
        config_hash=config_fingerprint(checkpoint.config),
        seed=checkpoint.config.seed,
        scores=[float(x) for x in probs],
        labels=[int(x) for x in site.labels],
        metadata={"param_digest": digest_before},
    )


def _fit_supervised(
    spec: ModelSpec,
    params: ParamSet,
    features: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int,
    weight_decay: float,
    rng: np.random.Generator,
    val: tuple[np.ndarray, np.ndarray] | None = None,
    patience: int | None = None,
) -> ParamSet:
    """Minibatch Adam with decoupled weight decay and a cosine schedule;
    optional early stopping on validation ROC-AUC."""
    n = len(labels)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = {name: np.zeros(t.shape) for name, t in params.items()}
    v = {name: np.zeros(t.shape) for name, t in params.items()}
    t_step = 0
    best_auc, best_params, stale = -np.inf, params, 0
    for epoch in range(epochs):
        lr_now = cosine_lr(lr, epoch, epochs)
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            batch = Batch.from_arrays(features[idx], labels[idx])
            grads = grad(batch_loss(spec, params, batch), params)
            t_step += 1
            pairs = []
            for name, theta in params.items():
                g = grads[name].data
                m[name] = beta1 * m[name] + (1.0 - beta1) * g
                v[name] = beta2 * v[name] + (1.0 - beta2) * g * g
                m_hat = m[name] / (1.0 - beta1 ** t_step)
                v_hat = v[name] / (1.0 - beta2 ** t_step)
                pairs.append((name, theta.data - lr_now * (m_hat / (np.sqrt(v_hat) + eps))
                              - lr_now * weight_decay * theta.data))
            params = ParamSet.from_arrays(pairs, tracked=True)
        if val is not None and patience is not None:
            probs = predict_probs(spec, params, Batch.from_arrays(*val))
            auc = roc_auc(probs, val[1])
            if auc > best_auc:
                best_auc, best_params, stale = auc, params, 0
            else:
                stale += 1
                if stale >= patience:
                    return best_params
    return best_params if val is not None and patience is not None else params


def _pool_role_examples(table: SiteTable, role: str) -> tuple[np.ndarray, np.ndarray]:
    feats, labs = [], []
    for sid in table.role_sites(role):
        site = table.site(sid)
        idx = table.pool_indices(sid, role)
        feats.append(site.features[idx])
        labs.append(site.labels[idx])
    return np.concatenate(feats), np.concatenate(labs)


def _baseline_eval(
    spec: ModelSpec,
    params: ParamSet,
    table: SiteTable,
    sites: list[int],
    splits: dict[int, tuple[np.ndarray, np.ndarray]],
) -> tuple[list[dict], list[float], list[float]]:
    per_site_rows, pooled_s, pooled_y = [], [], []
    for sid in sites:
        site = table.site(sid)
        heldout = splits[sid][1]
        probs = predict_probs(spec, params, Batch.from_arrays(
            site.features[heldout], site.labels[heldout]))
        labels = site.labels[heldout]
        per_site_rows.append({"site_id": int(sid), "auc": roc_auc(probs, labels), "n": int(len(probs))})
        pooled_s.extend(probs.tolist())
        pooled_y.extend(labels.tolist())
    return per_site_rows, pooled_s, pooled_y


SCRATCH_LR = 3e-4
FINETUNE_LR = 1e-4
BASELINE_BATCH = 16


def transfer_baseline(
    table: SiteTable,
    spec: ModelSpec,
    config: MetaConfig,
    pretrain_epochs: int | None = None,
    finetune_epochs: int = 25,
    n_finetune_sites: int = 3,
    pretrained: bool = True,
    protocol: str = "transfer",
) -> EvalReport:
    """Supervised baseline: pool the meta-train sites into one pre-training
    run, fine-tune on ``k_support`` examples per site from the first
    ``n_finetune_sites`` meta-test sites, and evaluate the held-out remainder
    per site. Also reports zero-shot performance on the zero-shot site (the
    pre-trained model for the transfer variant, the fine-tuned one from
    scratch)."""
    rng = np.random.default_rng(config.seed)
    params = init_params(spec, config.seed)
    if pretrained:
        if not table.role_sites("meta_train"):
            raise ValueError("meta_train role is empty")
        train_x, train_y = _pool_role_examples(table, "meta_train")
        val_x, val_y = _pool_role_examples(table, "meta_val")
        params = _fit_supervised(
            spec, params, train_x, train_y,
            epochs=pretrain_epochs if pretrain_epochs is not None else config.max_epochs,
            lr=SCRATCH_LR, batch_size=BASELINE_BATCH, weight_decay=config.weight_decay,
            rng=rng, val=(val_x, val_y), patience=config.early_stop_patience,
        )
    pretrain_snapshot = params

    test_sites = table.role_sites("meta_test")[:n_finetune_sites]
    if len(test_sites) < n_finetune_sites:
        raise ValueError(f"need {n_finetune_sites} meta-test sites, got {len(test_sites)}")
    splits = {sid: _site_support_split(table, sid, config.k_support, rng) for sid in test_sites}
    sup_x = np.concatenate([table.site(sid).features[splits[sid][0]] for sid in test_sites])
    sup_y = np.concatenate([table.site(sid).labels[splits[sid][0]] for sid in test_sites])
    if finetune_epochs > 0:
        params = _fit_supervised(
            spec, params, sup_x, sup_y, epochs=finetune_epochs,
            lr=FINETUNE_LR if pretrained else SCRATCH_LR,
            batch_size=BASELINE_BATCH, weight_decay=config.weight_decay, rng=rng,
        )

    per_site_rows, pooled_s, pooled_y = _baseline_eval(spec, params, table, test_sites, splits)

    zero_auc = None
    zero_sites = table.role_sites("zero_shot")
    if len(zero_sites) == 1:
        site = table.site(zero_sites[0])
        zero_model = pretrain_snapshot if pretrained else params
        zero_probs = predict_probs(spec, zero_model, Batch.from_arrays(site.features, site.labels))
        zero_auc = roc_auc(zero_probs, site.labels)

    return EvalReport(
        protocol=protocol,
        per_site=per_site_rows,
        pooled_auc=roc_auc(pooled_s, pooled_y),
        balanced_acc=balanced_accuracy(pooled_s, pooled_y),
        n_examples=len(pooled_s),
        config_hash=config_fingerprint(config),
        seed=config.seed,
        zero_shot_auc=zero_auc,
        scores=[float(x) for x in pooled_s],
        labels=[int(x) for x in pooled_y],
        metadata={"pretrained": pretrained, "finetune_sites": [int(s) for s in test_sites]},
    )


def scratch_baseline(
    table: SiteTable,
    spec: ModelSpec,
    config: MetaConfig,
    finetune_epochs: int = 25,
    n_finetune_sites: int = 3,
) -> EvalReport:
    """Stage-2 of the transfer baseline from random initialization."""
    if config.k_support < 1:
        raise ValueError("k_support must be >= 1")
    return transfer_baseline(
        table, spec, config,
        finetune_epochs=finetune_epochs, n_finetune_sites=n_finetune_sites,
        pretrained=False, protocol="scratch",
    )


def random_search(
    space: SearchSpace,
    table: SiteTable,
    spec: ModelSpec,
    base_config: MetaConfig,
) -> tuple[MetaConfig, list[dict]]:
    """Uniformly sample episode sizes from the search grid, run an abbreviated
    meta-training per trial, and rank trials by final validation AUC (ties go
    to the earlier trial). Failed trials are logged, not fatal."""
    rng = np.random.default_rng(space.seed)
    short_epochs = max(1, base_config.max_epochs // 5)
    trial_log: list[dict] = []
    best_auc, best_config, best_trial = -np.inf, None, -1
    for i in range(space.n_trials):
        candidate = replace(
            base_config,
            n_sites_per_episode=int(rng.choice(space.n_sites_choices)),
            k_support=int(rng.choice(space.k_support_choices)),
            t_target=int(rng.choice(space.t_target_choices)),
            max_epochs=short_epochs,
            early_stop_patience=min(base_config.early_stop_patience, short_epochs),
            msl_anneal_epochs=min(base_config.msl_anneal_epochs, short_epochs),
        )
        row = {
            "trial": i,
            "n_sites_per_episode": candidate.n_sites_per_episode,
            "k_support": candidate.k_support,
            "t_target": candidate.t_target,
        }
        try:
            _, log = meta_train(table, spec, candidate)
            if not log:
                raise EpisodeError("no epoch completed")
            auc = log[-1].val_auc
        except (EpisodeError, NonFiniteError, ValueError) as exc:
            row.update(status="failed", val_auc=None, error=str(exc))
            trial_log.append(row)
            continue
        row.update(status="ok", val_auc=float(auc), error=None)
        trial_log.append(row)
        if auc > best_auc:
            best_auc, best_config, best_trial = auc, candidate, i
    if best_config is None:
        raise SearchExhaustedError(f"all {space.n_trials} trials failed")
    return replace(best_config, max_epochs=base_config.max_epochs,
                   early_stop_patience=base_config.early_stop_patience,
                   msl_anneal_epochs=base_config.msl_anneal_epochs), trial_log
