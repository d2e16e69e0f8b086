"""Experiment configuration: validation, presets, TOML/JSON loading."""

from dataclasses import dataclass, asdict, fields, replace
import json
import os

from fedlith.errors import ConfigurationError

try:
    import tomllib  # py311+
except ImportError:
    import tomli as tomllib


@dataclass
class ExperimentConfig:
    # federated schedule
    algorithm: str = "hflla"
    n_clients: int = 4
    mode: str = "sync"
    k_responders: int = 0
    rounds: int = 30
    eta: float = 0.001
    e_local: int = 50
    e_global: int = 150
    batch: int = 32
    skew: float = 1.0
    seed: int = 0
    mu_prox: float = 0.01
    selection: str = "first_k"
    latency_mu: float = 0.0
    latency_sigma: float = 0.5
    optimizer: str = "adam"
    lambda_l2: float = 1e-5
    lambda_gl: float = 0.0
    fixed_batch_inner: bool = False
    diagnostics: bool = True
    workers: int = 0
    # feature-selection pipeline
    selection_rounds: int = 12
    selection_eta: float = 0.02
    selection_federated: bool = False
    selection_k: int = 0          # 0 selects k by the accuracy-knee rule
    selection_lambda_gl: float = 1e-3
    # model
    model_preset: str = "desk"
    model_json: str = ""
    feature_mask: str = ""
    # dataset
    families: int = 4
    train_hotspots: int = 120
    train_nonhotspots: int = 1710
    test_hotspots: int = 252
    test_nonhotspots: int = 1350
    # io
    dataset_dir: str = ""
    output_dir: str = ""

    def validate(self) -> "ExperimentConfig":
        from fedlith.engine import ALGORITHMS

        checks = [
            (self.algorithm in ALGORITHMS, "algorithm", f"must be one of {ALGORITHMS}"),
            (self.n_clients >= 1, "n_clients", "must be >= 1"),
            (self.mode in ("sync", "async"), "mode", "must be sync or async"),
            (self.mode == "sync" or 1 <= self.k_responders <= self.n_clients,
             "k_responders", f"must be in [1, {self.n_clients}] in async mode"),
            (self.rounds >= 0, "rounds", "must be >= 0"),
            (self.eta > 0, "eta", "must be positive"),
            (self.e_local >= 0, "e_local", "must be >= 0"),
            (self.e_global >= 0, "e_global", "must be >= 0"),
            (self.batch >= 0, "batch", "must be >= 0 (0 selects full-shard batches)"),
            (0.0 <= self.skew <= 1.0, "skew", "must be in [0, 1]"),
            (self.mu_prox >= 0, "mu_prox", "must be >= 0"),
            (self.selection in ("first_k", "random_k"), "selection",
             "must be first_k or random_k"),
            (self.latency_sigma >= 0, "latency.sigma", "must be >= 0"),
            (self.optimizer in ("sgd", "adam"), "optimizer", "must be sgd or adam"),
            (self.lambda_l2 >= 0, "lambda_l2", "must be >= 0"),
            (self.workers >= 0, "workers", "must be >= 0"),
            (self.families >= 1, "families", "must be >= 1"),
            (min(self.train_hotspots, self.train_nonhotspots,
                 self.test_hotspots, self.test_nonhotspots) >= 0,
             "dataset sizes", "must be >= 0"),
        ]
        for ok, key, msg in checks:
            if not ok:
                raise ConfigurationError(f"config key {key!r} {msg}")
        if self.algorithm == "centralized" and self.n_clients != 1:
            raise ConfigurationError(
                "config key 'n_clients' must be 1 for centralized runs"
            )
        return self


# hyperparameters lifted straight from the experiment section (paper-scale)
# and a 1/10-size variant that keeps the ratios (desk)
PRESETS = {
    "paper-scale": dict(rounds=50, eta=0.001, batch=64, e_local=500, e_global=1500,
                        train_hotspots=1204, train_nonhotspots=17096,
                        test_hotspots=2524, test_nonhotspots=13503),
    "desk": dict(rounds=30, eta=0.001, batch=32, e_local=50, e_global=150,
                 train_hotspots=120, train_nonhotspots=1710,
                 test_hotspots=252, test_nonhotspots=1350),
}


def apply_preset(cfg: ExperimentConfig, preset: str) -> ExperimentConfig:
    if preset not in PRESETS:
        raise ConfigurationError(
            f"unknown preset {preset!r}; choose from {sorted(PRESETS)}"
        )
    return replace(cfg, **PRESETS[preset])


_FIELD_NAMES = {f.name for f in fields(ExperimentConfig)}


def _flatten(doc: dict) -> dict:
    """Accept latency.{mu,sigma} either nested or flat."""
    out = {}
    for key, val in doc.items():
        if key == "latency" and isinstance(val, dict):
            for sub, v in val.items():
                out[f"latency_{sub}"] = v
        else:
            out[key] = val
    return out


def load_config(path: str, overrides: dict | None = None) -> ExperimentConfig:
    """Read a TOML or JSON config file; unknown keys are rejected by name."""
    with open(path, "rb") as f:
        if path.endswith(".json"):
            doc = json.load(f)
        else:
            doc = tomllib.load(f)
    doc = _flatten(doc)
    preset = doc.pop("preset", None)
    unknown = sorted(set(doc) - _FIELD_NAMES)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {unknown}")
    cfg = ExperimentConfig()
    if preset:
        cfg = apply_preset(cfg, preset)
    cfg = replace(cfg, **doc)
    if overrides:
        cfg = replace(cfg, **overrides)
    seed_env = os.environ.get("FEDLITH_SEED")
    if seed_env is not None:
        try:
            cfg = replace(cfg, seed=int(seed_env))
        except ValueError:
            raise ConfigurationError(f"FEDLITH_SEED must be an integer, got {seed_env!r}")
    return cfg.validate()


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)
