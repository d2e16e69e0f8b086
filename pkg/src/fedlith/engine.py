"""Federated round state machine: HFL-LA, FedAvg, FedProx, local, centralized.

One round is broadcast -> client updates -> aggregation -> evaluation. Client
updates are pure functions of (state, incoming weights, plan) and may run on a
thread pool; every reduction iterates in ascending client id, so results are
independent of scheduling and worker count. Aggregation is exact: weighted
means are evaluated in rational arithmetic per coordinate and rounded once.

The server only ever sees ClientResponse objects, which carry the global
parameter block and the shard size -- never samples or local-block values.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
import hashlib

import numpy as np

from fedlith import nn
from fedlith.diagnostics import consensus_error
from fedlith.errors import (ConfigurationError, NumericError, ProtocolError,
                            UndefinedMetricError)
from fedlith.features import group_lasso_grad
from fedlith.metrics import confusion_from_logits, tpr, fpr, accuracy

ALGORITHMS = ("hflla", "fedavg", "fedprox", "local", "centralized")
FEDERATED = ("hflla", "fedavg", "fedprox")


@dataclass
class RoundPlan:
    """Per-round schedule: update mode, responder threshold and step counts."""

    mode: str = "sync"            # sync | async
    k_responders: int = 0         # used in async mode; 1 <= K <= N
    e_local: int = 50
    e_global: int = 150
    eta: float = 0.001
    batch: int = 32               # 0 means full shard in natural order

    def validate(self, n_clients: int) -> None:
        if self.mode not in ("sync", "async"):
            raise ConfigurationError(f"mode must be sync or async, got {self.mode!r}")
        if self.mode == "async" and not 1 <= self.k_responders <= n_clients:
            raise ConfigurationError(
                f"k_responders={self.k_responders} out of range [1, {n_clients}]"
            )
        if self.e_local < 0 or self.e_global < 0:
            raise ConfigurationError("step counts must be nonnegative")
        if self.eta <= 0:
            raise ConfigurationError("eta must be positive")
        if self.batch < 0:
            raise ConfigurationError("batch must be nonnegative")


@dataclass
class ClientState:
    """Per-client training state; local block values survive across rounds."""

    k: int
    features: np.ndarray
    labels: np.ndarray
    test_features: np.ndarray
    test_labels: np.ndarray
    values: np.ndarray                    # full parameter vector
    rng: np.random.Generator
    adam: nn.AdamState | None = None
    w_cache: np.ndarray | None = None     # last received global block
    conv_cols: np.ndarray | None = None   # precomputed first-conv patches

    @property
    def n(self) -> int:
        return len(self.labels)


@dataclass
class ClientResponse:
    """The only message type a client may send upstream."""

    client_id: int
    global_values: np.ndarray
    n_k: int


@dataclass
class ServerState:
    w_g: np.ndarray
    t: int
    rounds: int
    n_k: np.ndarray                       # registry of shard sizes

    @property
    def p_k(self) -> np.ndarray:
        return self.n_k / self.n_k.sum()


def exact_weighted_mean(vectors, weights) -> np.ndarray:
    """sum_k (w_k / sum w) * v_k in rational arithmetic, rounded once."""
    weights = [int(w) for w in weights]
    total = sum(weights)
    if total <= 0:
        raise ConfigurationError("aggregation weights must sum to a positive value")
    cols = np.stack(vectors, axis=0)
    out = np.empty(cols.shape[1])
    for j in range(cols.shape[1]):
        acc = Fraction(0)
        for w, v in zip(weights, cols[:, j]):
            acc += w * Fraction(float(v))
        out[j] = float(acc / total)
    return out


def aggregate_sync(server: ServerState, responses) -> np.ndarray:
    """Eq-style full participation: p_k-weighted mean of global blocks."""
    n = server.n_k.size
    got = {r.client_id for r in responses}
    if got != set(range(n)):
        raise ProtocolError(f"sync aggregation missing clients {sorted(set(range(n)) - got)}")
    ordered = sorted(responses, key=lambda r: r.client_id)
    return exact_weighted_mean([r.global_values for r in ordered],
                               [r.n_k for r in ordered])


def aggregate_async_firstk(server: ServerState, responses, k: int) -> np.ndarray:
    """First-K responders, weights renormalized to n_k / n_K over S_t.

    ``responses`` must be ordered by arrival; stragglers are ignored for the
    round (their local work persists on the client).
    """
    if len(responses) < k:
        raise ProtocolError(f"only {len(responses)} responders, need {k}")
    first = sorted(responses[:k], key=lambda r: r.client_id)
    return exact_weighted_mean([r.global_values for r in first],
                               [r.n_k for r in first])


def _draw_batch(client: ClientState, batch: int) -> np.ndarray:
    if batch == 0 or batch >= client.n:
        return np.arange(client.n)
    return client.rng.integers(0, client.n, size=batch)


def _gl_spec(model, lam_gl):
    """Precomputed handle for the first-conv group-lasso contribution."""
    if lam_gl <= 0.0 or model.first_conv is None:
        return None
    layer = next(l for l in model.layers if l.get("name") == model.first_conv)
    f = layer["filters"]
    kh, kw = layer["kernel"]
    c = model.input_shape[2]
    sl = model.slices[model.first_conv]
    wsl = slice(sl.start, sl.start + f * c * kh * kw)
    blocks = {"full", "global" if model.first_conv in model.global_layers else "local"}
    return wsl, (f, c, kh, kw), lam_gl, blocks


def _steps(model, client, plan, steps, block, *, optimizer, lam, anchor=None,
           mu=0.0, fixed_idx=None, grad_norms=None, trace=None, gl=None):
    """Run `steps` gradient iterations restricted to `block`."""
    part = model.partition
    idx = part.indices(block)
    if idx.size == 0 or steps == 0:
        return
    apply_gl = gl is not None and block in gl[3]
    pv = nn.ParamVector(client.values, part)
    first_loss = last_loss = None
    for _ in range(steps):
        b_idx = fixed_idx if fixed_idx is not None else _draw_batch(client, plan.batch)
        if client.conv_cols is not None:
            batch = nn.Batch(None, client.labels[b_idx],
                             conv_cols=client.conv_cols[b_idx])
        else:
            batch = nn.Batch(client.features[b_idx], client.labels[b_idx])
        loss, grad = nn.loss_and_gradient(model, pv, batch, block)
        if first_loss is None:
            first_loss = loss
        last_loss = loss
        if lam > 0.0:
            grad[idx] += lam * pv.values[idx]
        if mu > 0.0:
            grad[idx] += mu * (pv.values[idx] - anchor[idx])
        if apply_gl:
            wsl, shape, lam_gl, _ = gl
            grad[wsl] += group_lasso_grad(pv.values[wsl].reshape(shape), lam_gl).ravel()
        if grad_norms is not None:
            grad_norms.append(float(np.linalg.norm(grad)))
        if optimizer == "sgd":
            pv = nn.sgd_step(pv, grad, plan.eta)
        else:
            client.adam, pv = nn.adam_step(client.adam, pv, grad, plan.eta,
                                           indices=idx)
    client.values = pv.values
    if trace is not None:
        trace.append((block, first_loss, last_loss))


def client_update_hflla(client: ClientState, w_g: np.ndarray, plan: RoundPlan,
                        model: nn.ModelSpec, *, optimizer="sgd", lam=0.0,
                        fixed_batch_inner=False, grad_norms=None,
                        trace=None, gl=None) -> ClientResponse:
    """Two-phase update: E_l local-block steps at fixed w_g, then E full steps.

    The client keeps its updated local block and returns only the global one.
    """
    part = model.partition
    client.values[part.global_indices] = w_g
    client.w_cache = w_g.copy()
    fixed_idx = _draw_batch(client, plan.batch) if fixed_batch_inner else None
    _steps(model, client, plan, plan.e_local, "local", optimizer=optimizer,
           lam=lam, fixed_idx=fixed_idx, grad_norms=grad_norms, trace=trace, gl=gl)
    _steps(model, client, plan, plan.e_global, "full", optimizer=optimizer,
           lam=lam, fixed_idx=fixed_idx, grad_norms=grad_norms, trace=trace, gl=gl)
    return ClientResponse(client.k, client.values[part.global_indices].copy(), client.n)


def client_update_fedavg(client: ClientState, w: np.ndarray, plan: RoundPlan,
                         model: nn.ModelSpec, *, optimizer="sgd", lam=0.0,
                         fixed_batch_inner=False, grad_norms=None,
                         trace=None, gl=None) -> ClientResponse:
    """Single-phase full-model update over e_local + e_global steps."""
    part = model.partition
    client.values[part.global_indices] = w
    client.w_cache = w.copy()
    fixed_idx = _draw_batch(client, plan.batch) if fixed_batch_inner else None
    _steps(model, client, plan, plan.e_local + plan.e_global, "full",
           optimizer=optimizer, lam=lam, fixed_idx=fixed_idx,
           grad_norms=grad_norms, trace=trace, gl=gl)
    return ClientResponse(client.k, client.values[part.global_indices].copy(), client.n)


def client_update_fedprox(client: ClientState, w: np.ndarray, plan: RoundPlan,
                          model: nn.ModelSpec, mu: float, *, optimizer="sgd",
                          lam=0.0, fixed_batch_inner=False, grad_norms=None,
                          trace=None, gl=None) -> ClientResponse:
    """FedAvg plus a proximal pull mu * (w - w_round_start) on the gradient."""
    if mu < 0:
        raise ConfigurationError("mu must be nonnegative")
    part = model.partition
    client.values[part.global_indices] = w
    client.w_cache = w.copy()
    anchor = client.values.copy()
    fixed_idx = _draw_batch(client, plan.batch) if fixed_batch_inner else None
    _steps(model, client, plan, plan.e_local + plan.e_global, "full",
           optimizer=optimizer, lam=lam, anchor=anchor, mu=mu,
           fixed_idx=fixed_idx, grad_norms=grad_norms, trace=trace, gl=gl)
    return ClientResponse(client.k, client.values[part.global_indices].copy(), client.n)


def evaluate_model(model, values, features, labels, chunk=512):
    """Confusion counts of argmax predictions over an evaluation split."""
    part = model.partition
    pv = nn.ParamVector(values, part)
    logits = np.empty((len(labels), 2))
    for lo in range(0, len(labels), chunk):
        batch = nn.Batch(features[lo:lo + chunk], labels[lo:lo + chunk])
        _, out = nn.forward(model, pv, batch)
        logits[lo:lo + len(batch.labels)] = out
    return confusion_from_logits(logits, labels)


def full_shard_loss_grad(model, values, features, labels, chunk=512):
    """Deterministic full-shard loss and gradient (sample-size weighted)."""
    part = model.partition
    pv = nn.ParamVector(values, part)
    total = len(labels)
    loss = 0.0
    grad = np.zeros(model.param_count)
    for lo in range(0, total, chunk):
        batch = nn.Batch(features[lo:lo + chunk], labels[lo:lo + chunk])
        l, g = nn.loss_and_gradient(model, pv, batch, "full")
        w = len(batch.labels) / total
        loss += l * w
        grad += g * w
    return loss, grad


def _metric_or_none(fn, counts):
    try:
        return fn(counts)
    except UndefinedMetricError:
        return None


def _mean_defined(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class RunResult:
    history: list
    final_metrics: dict
    server: ServerState | None
    clients: list
    aborted: bool = False
    error: str = ""


def run_training(cfg, train_ds, test_ds, model: nn.ModelSpec,
                 train_shards, test_shards) -> RunResult:
    """Execute cfg.rounds federated rounds and log one RoundLog per round."""
    algo = cfg.algorithm
    if algo not in ALGORITHMS:
        raise ConfigurationError(f"unknown algorithm {algo!r}")
    plan = RoundPlan(cfg.mode, cfg.k_responders, cfg.e_local, cfg.e_global,
                     cfg.eta, cfg.batch)
    n_clients = len(train_shards)
    plan.validate(n_clients)
    if cfg.selection not in ("first_k", "random_k"):
        raise ConfigurationError(f"selection must be first_k or random_k")

    root = np.random.SeedSequence(cfg.seed)
    init_ss, server_ss, *client_ss = root.spawn(2 + n_clients)
    params0 = model.init_params(np.random.default_rng(init_ss))
    part = model.partition
    g_idx, l_idx = part.global_indices, part.local_indices

    clients = []
    for k in range(n_clients):
        tr, te = train_shards[k], test_shards[k]
        clients.append(ClientState(
            k=k,
            features=np.ascontiguousarray(train_ds.features[tr.indices]),
            labels=train_ds.labels[tr.indices],
            test_features=np.ascontiguousarray(test_ds.features[te.indices]),
            test_labels=test_ds.labels[te.indices],
            values=params0.values.copy(),
            rng=np.random.default_rng(client_ss[k]),
            adam=nn.AdamState.zeros(model.param_count) if cfg.optimizer == "adam" else None,
        ))
    server = ServerState(params0.values[g_idx].copy(), 0, cfg.rounds,
                         np.array([c.n for c in clients], dtype=np.int64))
    server_rng = np.random.default_rng(server_ss)

    diag = bool(cfg.diagnostics) and cfg.optimizer == "sgd" and algo == "hflla"
    collect_norms = diag
    gl = _gl_spec(model, getattr(cfg, "lambda_gl", 0.0))
    prev_probe = [None] * n_clients   # (values, full_grad) pairs for L secants

    def update_one(client):
        norms = [] if collect_norms else None
        trace = [] if diag else None
        kwargs = dict(optimizer=cfg.optimizer, lam=cfg.lambda_l2,
                      fixed_batch_inner=cfg.fixed_batch_inner,
                      grad_norms=norms, trace=trace, gl=gl)
        if algo == "hflla":
            resp = client_update_hflla(client, server.w_g, plan, model, **kwargs)
        elif algo == "fedprox":
            resp = client_update_fedprox(client, server.w_g, plan, model,
                                         cfg.mu_prox, **kwargs)
        elif algo in ("fedavg", "centralized"):
            resp = client_update_fedavg(client, server.w_g, plan, model, **kwargs)
        else:  # local: full-model steps, no upload
            fixed_idx = _draw_batch(client, plan.batch) if cfg.fixed_batch_inner else None
            _steps(model, client, plan, plan.e_local + plan.e_global, "full",
                   optimizer=cfg.optimizer, lam=cfg.lambda_l2,
                   fixed_idx=fixed_idx, grad_norms=norms, trace=trace, gl=gl)
            resp = None
        return resp, norms, trace

    workers = cfg.workers if cfg.workers else min(n_clients, 4)
    history = []
    aborted, error = False, ""

    init_probe = {}
    if diag:
        losses0, sqs0 = [], []
        for c in clients:
            l0, grad0 = full_shard_loss_grad(model, c.values, c.features, c.labels)
            losses0.append(l0)
            sqs0.append(float(grad0 @ grad0))
        init_probe = {
            "init_mean_loss": float(np.mean(losses0)),
            "init_mean_sq_grad_norm": float(np.mean(sqs0)),
        }

    for t in range(cfg.rounds):
        row = {"round": t, "algorithm": algo, "mode": plan.mode}
        if t == 0:
            row.update(init_probe)
        if plan.mode == "async":
            z = server_rng.standard_normal(n_clients)
            latencies = np.exp(cfg.latency_mu + cfg.latency_sigma * z)
        else:
            latencies = None
        if cfg.selection == "random_k" and plan.mode == "async":
            chosen = np.sort(server_rng.choice(n_clients, plan.k_responders,
                                               replace=False))
        else:
            chosen = np.arange(n_clients)

        active = [clients[k] for k in chosen]
        results = {}
        failures = {}

        def run_client(c):
            try:
                return c.k, update_one(c), None
            except NumericError as e:
                return c.k, None, e

        if workers > 1 and len(active) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                for k, res, err in pool.map(run_client, active):
                    if err is None:
                        results[k] = res
                    else:
                        failures[k] = err
        else:
            for c in active:
                k, res, err = run_client(c)
                if err is None:
                    results[k] = res
                else:
                    failures[k] = err

        if failures and plan.mode == "sync" and algo in FEDERATED:
            aborted = True
            error = f"client {min(failures)} failed: {failures[min(failures)]}"
            break
        if failures and algo not in FEDERATED:
            aborted = True
            error = f"client {min(failures)} failed: {failures[min(failures)]}"
            break

        all_norms = []
        responses = []
        traces = []
        for k in sorted(results):
            resp, norms, trace = results[k]
            if norms:
                all_norms.append(max(norms))
            if trace:
                traces.append(trace)
            if resp is not None:
                responses.append(resp)
        if traces:
            # per-phase first/last batch losses, averaged over clients
            phases = {}
            for trace in traces:
                for block, first, last in trace:
                    phases.setdefault(block, []).append((first, last))
            row["phase_trace"] = {
                block: [float(np.mean([p[0] for p in pairs])),
                        float(np.mean([p[1] for p in pairs]))]
                for block, pairs in phases.items()
            }

        if algo in FEDERATED:
            pre_agg = {r.client_id: r.global_values for r in responses}
            if plan.mode == "async":
                if cfg.selection == "first_k":
                    by_id = {r.client_id: r for r in responses}
                    order = np.lexsort((np.arange(n_clients), latencies))
                    arrived = [by_id[int(c)] for c in order if int(c) in by_id]
                else:
                    arrived = responses
                try:
                    new_wg = aggregate_async_firstk(server, arrived, plan.k_responders)
                    s_t = sorted(r.client_id for r in arrived[:plan.k_responders])
                except ProtocolError:
                    new_wg = server.w_g
                    s_t = []
                row["s_t"] = [int(i) for i in s_t]
                row["latencies"] = [round(float(x), 9) for x in latencies]
            else:
                new_wg = aggregate_sync(server, responses)
                row["s_t"] = sorted(int(r.client_id) for r in responses)
            server.w_g = new_wg
            # broadcast: every client gets the new global block
            for c in clients:
                c.values[g_idx] = server.w_g
                c.w_cache = server.w_g.copy()
            if diag and len(pre_agg) >= 2:
                per_k, cmax = consensus_error([pre_agg[k] for k in sorted(pre_agg)])
                row["consensus_per_k"] = [float(x) for x in per_k]
                row["consensus_max"] = float(cmax)
        elif algo == "centralized":
            server.w_g = responses[0].global_values if responses else server.w_g
        server.t = t + 1

        # per-client evaluation on the post-broadcast model
        per_client = []
        for c in clients:
            counts = evaluate_model(model, c.values, c.test_features, c.test_labels)
            per_client.append({
                "tpr": _metric_or_none(tpr, counts),
                "fpr": _metric_or_none(fpr, counts),
                "acc": _metric_or_none(accuracy, counts),
                "n_test": int(counts.total),
            })
        row["clients"] = per_client
        row["mean_tpr"] = _mean_defined([m["tpr"] for m in per_client])
        row["mean_fpr"] = _mean_defined([m["fpr"] for m in per_client])
        row["mean_acc"] = _mean_defined([m["acc"] for m in per_client])

        if diag:
            losses, sq_norms, secants, sig_probes = [], [], [], []
            for c in clients:
                loss, grad = full_shard_loss_grad(model, c.values, c.features, c.labels)
                losses.append(loss)
                sq_norms.append(float(grad @ grad))
                if prev_probe[c.k] is not None:
                    pw, pg = prev_probe[c.k]
                    dw = float(np.linalg.norm(c.values - pw))
                    if dw > 1e-12:
                        secants.append(float(np.linalg.norm(grad - pg)) / dw)
                prev_probe[c.k] = (c.values.copy(), grad)
                pv = nn.ParamVector(c.values, part)
                devs = []
                for _ in range(3):
                    b_idx = _draw_batch(c, plan.batch)
                    _, g = nn.loss_and_gradient(
                        model, pv, nn.Batch(c.features[b_idx], c.labels[b_idx]), "full")
                    devs.append(float(np.sum((g - grad) ** 2)))
                sig_probes.append(float(np.mean(devs)))
            row["mean_loss"] = float(np.mean(losses))
            row["mean_sq_grad_norm"] = float(np.mean(sq_norms))
            row["secant_max"] = max(secants) if secants else None
            row["sigma2_probe"] = max(sig_probes) if sig_probes else 0.0
            row["g_max_step"] = max(all_norms) if all_norms else 0.0
        row["w_g_digest"] = _digest(server.w_g)
        history.append(row)

    final = history[-1] if history else {}
    final_metrics = {
        "algorithm": algo,
        "n_clients": n_clients,
        "mode": plan.mode,
        "tpr": final.get("mean_tpr"),
        "fpr": final.get("mean_fpr"),
        "acc": final.get("mean_acc"),
    }
    return RunResult(history, final_metrics, server, clients, aborted, error)


def _digest(vec: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(vec).tobytes()).hexdigest()[:16]
