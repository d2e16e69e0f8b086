"""Group-lasso channel selection over the first conv layer.

The channel group for input channel c is w[:, c, :, :] across all filters:
penalizing its l2 norm pushes uninformative spectral channels to zero, after
which the surviving channels are ranked by norm, masked, and the model is
retrained from scratch on the reduced tensor. The selection layer lives in the
global block, so one selection is shared by every client.
"""

from dataclasses import dataclass, replace
import json

import numpy as np

from fedlith import layout, nn
from fedlith.errors import ConfigurationError, DataIOError

GROUP_EPS = 1e-8   # below this a group is treated as pruned (zero subgradient)

# candidate channel counts tried by the knee rule (filtered to <= C)
DEFAULT_CANDIDATES = (4, 8, 10, 12, 16, 20, 26, 32)
KNEE_TOLERANCE = 0.005  # smallest k within 0.5% accuracy of the full model


def group_norms(first_layer_weights: np.ndarray) -> np.ndarray:
    """Per-channel l2 norm over all filters' slices; weights (F, C, kh, kw)."""
    w = np.asarray(first_layer_weights, dtype=np.float64)
    if w.ndim != 4:
        raise ConfigurationError("expected 4-d conv weights (F, C, kh, kw)")
    return np.sqrt(np.sum(w * w, axis=(0, 2, 3)))


def group_lasso_grad(first_layer_weights: np.ndarray, lam: float,
                     eps: float = GROUP_EPS) -> np.ndarray:
    """Subgradient lam * w_c / ||w_c||, zero for groups already at the origin."""
    if lam < 0:
        raise ConfigurationError("group lasso strength must be nonnegative")
    w = np.asarray(first_layer_weights, dtype=np.float64)
    if lam == 0.0:
        return np.zeros_like(w)
    norms = group_norms(w)
    scale = np.where(norms > eps, lam / np.maximum(norms, eps), 0.0)
    return w * scale[None, :, None, None]


def select_topk(norms: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest norms, ties broken toward lower channel index."""
    norms = np.asarray(norms)
    if not 1 <= k <= norms.size:
        raise ConfigurationError(f"k={k} out of range [1, {norms.size}]")
    order = np.argsort(-norms, kind="stable")[:k]
    return np.sort(order.astype(np.int64))


@dataclass
class ChannelMask:
    selected: np.ndarray

    def __post_init__(self):
        sel = np.asarray(self.selected, dtype=np.int64)
        if sel.size == 0 or np.any(np.diff(sel) <= 0) or sel.min() < 0:
            raise ConfigurationError("mask must be a nonempty sorted unique index set")
        self.selected = sel

    @property
    def k(self) -> int:
        return int(self.selected.size)


def save_mask(mask: ChannelMask, norms: np.ndarray, path: str) -> None:
    doc = {"selected": mask.selected.tolist(),
           "norms": [float(x) for x in norms],
           "k": mask.k}
    try:
        with open(path, "w") as f:
            json.dump(doc, f, sort_keys=True, indent=1)
    except OSError as e:
        raise DataIOError(f"cannot write mask to {path}: {e}") from e


def load_mask(path: str) -> ChannelMask:
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as e:
        raise DataIOError(f"cannot read mask from {path}: {e}") from e
    return ChannelMask(np.asarray(doc["selected"], dtype=np.int64))


def apply_mask(ds: layout.Dataset, mask: ChannelMask) -> layout.Dataset:
    """Dataset restricted to the selected spectral channels."""
    if mask.selected.max() >= ds.features.shape[-1]:
        raise ConfigurationError("mask references channels beyond the tensor")
    meta = dict(ds.meta)
    meta["channels"] = mask.k
    return layout.Dataset(np.ascontiguousarray(ds.features[..., mask.selected]),
                          ds.labels, ds.families, ds.rasters, meta)


def _train_once(cfg, train_ds, test_ds, channels, lambda_gl):
    """One centralized (or federated) training pass; returns (result, model).

    The penalized pass runs plain SGD so the subgradient shrinkage is not
    distorted by per-coordinate step rescaling; mask retrains use the
    experiment optimizer.
    """
    from fedlith import engine

    federated = bool(getattr(cfg, "selection_federated", False))
    algo = "hflla" if federated else "centralized"
    n_clients = cfg.n_clients if federated else 1
    penalized = lambda_gl > 0.0
    sel_cfg = replace(
        cfg, algorithm=algo, n_clients=n_clients,
        rounds=cfg.selection_rounds,
        eta=cfg.selection_eta if penalized else cfg.eta,
        optimizer="sgd" if penalized else cfg.optimizer,
        mode="sync", lambda_gl=lambda_gl, diagnostics=False,
    ).validate()
    model = nn.model_preset(cfg.model_preset, channels=channels,
                            grid=train_ds.meta.get("grid", layout.GRID))
    rng_train = np.random.default_rng(cfg.seed + 101)
    rng_test = np.random.default_rng(cfg.seed + 202)
    if federated:
        tr = layout.partition_noniid(train_ds, n_clients, cfg.skew, rng_train)
        te = layout.partition_noniid(test_ds, n_clients, cfg.skew, rng_test)
    else:
        tr = [layout.Shard(0, np.arange(len(train_ds)))]
        te = [layout.Shard(0, np.arange(len(test_ds)))]
    res = engine.run_training(sel_cfg, train_ds, test_ds, model, tr, te)
    return res, model


def run_selection_pipeline(cfg, train_ds, test_ds):
    """Train with the group penalty, rank channels, mask, retrain from scratch.

    Returns (ChannelMask, report). The report carries the norms, the candidate
    accuracies behind the knee choice, and the conv-layer compute ratio.
    """
    c_full = train_ds.features.shape[-1]
    lam_sel = getattr(cfg, "selection_lambda_gl", 1e-3)
    res, model = _train_once(cfg, train_ds, test_ds, c_full, lam_sel)
    if res.aborted:
        raise ConfigurationError(f"selection training aborted: {res.error}")
    values = res.clients[0].values
    norms = group_norms(model.first_conv_weights(values))

    full_res, full_model = _train_once(cfg, train_ds, test_ds, c_full, 0.0)
    acc_full = full_res.final_metrics["acc"]

    fixed_k = int(getattr(cfg, "selection_k", 0))
    if fixed_k:
        candidates = [fixed_k]
    else:
        candidates = sorted({k for k in DEFAULT_CANDIDATES if k < c_full} | {c_full})
    tried = []
    for k in candidates:
        mask_k = ChannelMask(select_topk(norms, k))
        res_k, _ = _train_once(cfg, apply_mask(train_ds, mask_k),
                               apply_mask(test_ds, mask_k), k, 0.0)
        tried.append({"k": k, "acc": res_k.final_metrics["acc"]})
    if fixed_k:
        chosen = tried[0]
    else:
        chosen = next((t for t in tried if acc_full - t["acc"] <= KNEE_TOLERANCE),
                      tried[-1])
    mask = ChannelMask(select_topk(norms, chosen["k"]))

    flops_full = full_model.flops_per_sample()
    masked_model = nn.model_preset(cfg.model_preset, channels=mask.k,
                                   grid=train_ds.meta.get("grid", layout.GRID))
    flops_masked = masked_model.flops_per_sample()
    conv_name = full_model.first_conv
    report = {
        "norms": [float(x) for x in norms],
        "k": mask.k,
        "selected": mask.selected.tolist(),
        "lambda_gl": lam_sel,
        "candidates": tried,
        "acc_full": acc_full,
        "acc_masked": chosen["acc"],
        "conv_flops_ratio": flops_masked[conv_name] / flops_full[conv_name],
        "mode": "federated" if getattr(cfg, "selection_federated", False) else "centralized",
    }
    return mask, report


def sweep_lambda(cfg, train_ds, test_ds, lambdas):
    """Norm profiles for a grid of penalty strengths (the lambda sweep hook)."""
    out = []
    c_full = train_ds.features.shape[-1]
    for lam in lambdas:
        res, model = _train_once(cfg, train_ds, test_ds, c_full, lam)
        norms = group_norms(model.first_conv_weights(res.clients[0].values))
        out.append({"lambda_gl": float(lam), "norms": [float(x) for x in norms]})
    return out
