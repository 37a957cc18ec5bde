"""Synchronous federated-learning simulation.

One round: sample clients, train each from the same global snapshot, collect
``(delta, n_k, oui)`` reports, weight them, apply the weighted update and
evaluate on the test subset.  Every random draw comes from a named
counter-based stream (see :mod:`fedoui.rng`), so a run is fully determined
by its config and is identical whether clients train serially or in threads.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
import numpy as np

from . import nn
from .aggregation import METHODS, ClientReport, aggregate, compute_weights
from .beta import DEGENERATE, BetaParams, beta_median, regularized_incomplete_beta
from .data import load_cifar10, subset, synthetic_blobs
from .exceptions import ConfigError, InputError, NumericError
from .oui import oui
from .rng import stream

log = logging.getLogger(__name__)

PARTITIONS = ("dirichlet", "iid")
NOISE_MODELS = ("none", "label_noise")
DATASETS = ("cifar10", "synthetic", "memory")


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class ExperimentConfig:
    method: str = "fedavg"
    n_clients: int = 20
    clients_per_round: int = 5
    rounds: int = 60
    local_epochs: int = 1
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    probe_batch_size: int = 32
    eps: float = 1e-3
    fedprox_mu: float = 0.01
    partition: str = "dirichlet"
    concentration: float = 0.1
    noise: str = "none"
    noisy_fraction: float = 0.3
    flip_prob: float = 0.5
    train_subset: int = 3000
    test_subset: int = 1000
    seed: int = 0
    dataset: str = "cifar10"
    n_classes: int = 10
    image_side: int = 32
    channels: int = 3
    synthetic_spread: float = 1.0
    conv1_channels: int = 32
    conv2_channels: int = 64
    hidden_units: int = 128
    eval_batch_size: int = 100

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, d):
        """Build from a flat mapping, coercing scalar types; unknown keys are errors."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in dict(d).items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}", key)
            kwargs[key] = _coerce(key, value, known[key].type)
        return cls(**kwargs)

    def to_dict(self):
        return asdict(self)

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return ExperimentConfig.from_dict(d)

    def validate(self):
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(f"{key}: {msg}", key)

        need(self.method in METHODS, "method", f"unknown method {self.method!r}, expected one of {METHODS}")
        need(self.partition in PARTITIONS, "partition", f"expected one of {PARTITIONS}")
        need(self.noise in NOISE_MODELS, "noise", f"expected one of {NOISE_MODELS}")
        need(self.dataset in DATASETS, "dataset", f"expected one of {DATASETS}")
        for key in ("n_clients", "clients_per_round", "local_epochs", "batch_size", "n_classes",
                    "image_side", "channels", "conv1_channels", "conv2_channels", "hidden_units",
                    "eval_batch_size", "train_subset", "test_subset"):
            need(getattr(self, key) >= 1, key, "must be positive")
        need(self.rounds >= 0, "rounds", "must be >= 0")
        need(self.probe_batch_size >= 2, "probe_batch_size", "must be >= 2")
        need(self.clients_per_round <= self.n_clients, "clients_per_round", "must not exceed n_clients")
        need(self.concentration > 0, "concentration", "must be positive")
        need(self.eps > 0, "eps", "must be positive")
        need(self.lr >= 0, "lr", "must be >= 0")
        need(0 <= self.momentum < 1, "momentum", "must lie in [0, 1)")
        need(self.fedprox_mu >= 0, "fedprox_mu", "must be >= 0")
        need(0 <= self.noisy_fraction <= 1, "noisy_fraction", "must lie in [0, 1]")
        need(0 <= self.flip_prob <= 1, "flip_prob", "must lie in [0, 1]")
        need(self.synthetic_spread >= 0, "synthetic_spread", "must be >= 0")
        need(0 <= self.seed < 2 ** 64, "seed", "must be an unsigned 64-bit integer")
        need(self.image_side % 4 == 0, "image_side", "must be divisible by 4")
        need(self.train_subset >= self.n_clients * self.probe_batch_size, "train_subset",
             "too small to give every client a full probe batch")
        if self.dataset == "cifar10":
            need(self.image_side == 32 and self.channels == 3 and self.n_classes == 10, "dataset",
                 "cifar10 requires image_side=32, channels=3, n_classes=10")


def _coerce(key, value, typ):
    typ = {"int": int, "float": float, "str": str}.get(typ, typ) if isinstance(typ, str) else typ
    try:
        if typ is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if typ is float:
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if typ is str:
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {typ.__name__}", key) from None
    return value


# ---------------------------------------------------------------------------
# Partitioning and noise


def _shuffle_each(assignment, rng):
    return [rng.permutation(a) for a in assignment]


def repair_partition(assignment, min_size):
    """Move samples one at a time from the largest client to the smallest
    until every client holds at least ``min_size`` samples."""
    lists = [list(a) for a in assignment]
    total = sum(len(a) for a in lists)
    if total < min_size * len(lists):
        raise InputError(f"{total} samples cannot give {len(lists)} clients {min_size} each")
    while True:
        sizes = [len(a) for a in lists]
        small = int(np.argmin(sizes))
        if sizes[small] >= min_size:
            break
        large = int(np.argmax(sizes))
        lists[small].append(lists[large].pop())
    return [np.array(a, dtype=np.int64) for a in lists]


def dirichlet_partition(labels, n_clients, concentration, rng, min_size=0):
    """Split each class across clients with proportions ~ Dirichlet(concentration).

    Each client's index list is shuffled once at the end; the first
    ``probe_batch_size`` entries form its probe batch.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if n_clients < 1:
        raise InputError("n_clients must be >= 1")
    if concentration <= 0:
        raise InputError("concentration must be positive")
    buckets = [[] for _ in range(n_clients)]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        props = rng.dirichlet(np.full(n_clients, float(concentration)))
        cuts = (np.cumsum(props) * len(idx)).astype(np.int64)[:-1]
        for k, part in enumerate(np.split(idx, cuts)):
            buckets[k].extend(part.tolist())
    assignment = repair_partition([np.array(b, dtype=np.int64) for b in buckets], min_size)
    return _shuffle_each(assignment, rng)


def iid_partition(n_samples, n_clients, rng, min_size=0):
    parts = np.array_split(rng.permutation(n_samples), n_clients)
    return _shuffle_each(repair_partition(parts, min_size), rng)


def noisy_client_ids(n_clients, fraction, rng):
    count = math.ceil(round(fraction * n_clients, 9))
    return np.sort(rng.choice(n_clients, size=count, replace=False))


def inject_label_noise(dataset, partition, fraction, flip_prob, rng):
    """Symmetric label noise on a seeded subset of clients.

    ``ceil(fraction * n_clients)`` clients are chosen; each of their training
    labels is replaced with probability ``flip_prob`` by a uniformly drawn
    *different* class.  Returns ``(noisy_dataset, noisy_client_ids)``.
    """
    if not (0 <= fraction <= 1 and 0 <= flip_prob <= 1):
        raise InputError("fraction and flip_prob must lie in [0, 1]")
    ids = noisy_client_ids(len(partition), fraction, rng)
    labels = dataset.labels.copy()
    k = dataset.n_classes
    for cid in ids:
        idx = partition[cid]
        flip = rng.random(len(idx)) < flip_prob
        offsets = rng.integers(1, k, size=len(idx))
        labels[idx[flip]] = (labels[idx[flip]] + offsets[flip]) % k
    return dataset.with_labels(labels), ids


def sample_clients(n_clients, clients_per_round, rng):
    """Uniform sample without replacement, returned in ascending id order."""
    if not 1 <= clients_per_round <= n_clients:
        raise InputError("need 1 <= clients_per_round <= n_clients")
    return np.sort(rng.choice(n_clients, size=clients_per_round, replace=False))


# ---------------------------------------------------------------------------
# Clients


@dataclass
class ClientShard:
    client_id: int
    images: np.ndarray
    labels: np.ndarray
    probe: np.ndarray

    def __len__(self):
        return len(self.labels)


def local_train(spec, global_params, shard, config, rng):
    """Local SGD with momentum (fresh velocity) from ``global_params``.

    With ``method == "fedprox"`` the gradient of ``mu/2 ||theta - theta_global||^2``
    is added at every step.  OUI is measured on the shard's probe batch with
    the trained parameters.
    """
    n = len(shard)
    if n == 0:
        raise InputError(f"client {shard.client_id}: empty shard")
    prox = config.fedprox_mu if config.method == "fedprox" else 0.0
    params = global_params
    velocity = global_params.zeros_like()
    loss_sum = 0.0
    seen = 0
    for _ in range(config.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            y = shard.labels[idx]
            logits, cache = nn.forward(spec, params, shard.images[idx])
            loss_sum += nn.cross_entropy_loss(logits, y) * len(idx)
            seen += len(idx)
            grads = nn.backward(spec, params, cache, y)
            if prox:
                grads = grads + prox * (params - global_params)
            params, velocity = nn.sgd_momentum_step(params, grads, velocity, config.lr, config.momentum)
    value = oui(nn.penultimate_preactivations(spec, params, shard.probe))
    return ClientReport(shard.client_id, params - global_params, n, value, loss_sum / seen)


# ---------------------------------------------------------------------------
# Rounds


@dataclass
class RoundRecord:
    round: int
    selected: list
    oui_values: list
    beta_fit: object
    scores: list
    weights: list
    test_accuracy: float
    mean_train_loss: float

    @property
    def degenerate(self):
        return self.beta_fit is DEGENERATE

    def to_dict(self):
        fit = None if self.degenerate else {"alpha": self.beta_fit.alpha, "beta": self.beta_fit.beta}
        return {
            "round": self.round,
            "selected": list(self.selected),
            "oui_values": list(self.oui_values),
            "beta_fit": fit,
            "degenerate_fit": self.degenerate,
            "scores": list(self.scores),
            "weights": list(self.weights),
            "test_accuracy": self.test_accuracy,
            "mean_train_loss": self.mean_train_loss,
        }

    @classmethod
    def from_dict(cls, d):
        fit = d.get("beta_fit")
        return cls(
            round=d["round"], selected=d["selected"], oui_values=d["oui_values"],
            beta_fit=DEGENERATE if fit is None else BetaParams(fit["alpha"], fit["beta"]),
            scores=d["scores"], weights=d["weights"], test_accuracy=d["test_accuracy"],
            mean_train_loss=d["mean_train_loss"],
        )


@dataclass
class ExperimentState:
    spec: nn.ModelSpec
    params: nn.ModelParams
    shards: list
    test_images: np.ndarray
    test_labels: np.ndarray
    round: int = 0


def evaluate(spec, params, images, labels, batch_size=100):
    if len(labels) == 0:
        return float("nan")
    pred = nn.predict_logits(spec, params, images, batch_size).argmax(axis=1)
    return float(np.mean(pred == labels))


def run_round(state, config, executor=None):
    """Advance ``state`` by one round; returns ``(new_state, record)``."""
    t = state.round + 1
    selected = sample_clients(config.n_clients, config.clients_per_round, stream(config.seed, "sample", t))

    def train(cid):
        return local_train(state.spec, state.params, state.shards[cid], config,
                           stream(config.seed, "train", t, int(cid)))

    try:
        if executor is None:
            reports = [train(c) for c in selected]
        else:
            reports = list(executor.map(train, selected))
        reports.sort(key=lambda r: r.client_id)
        weights, fit, scores = compute_weights(config.method, reports, config.eps)
        new_params = aggregate(state.params, reports, weights)
        acc = evaluate(state.spec, new_params, state.test_images, state.test_labels, config.eval_batch_size)
    except NumericError as exc:
        raise NumericError(f"round {t}: {exc}") from exc
    n = np.array([r.n_k for r in reports], dtype=np.float64)
    record = RoundRecord(
        round=t,
        selected=[int(r.client_id) for r in reports],
        oui_values=[float(r.oui) for r in reports],
        beta_fit=fit,
        scores=[float(s) for s in scores],
        weights=[float(w) for w in weights],
        test_accuracy=acc,
        mean_train_loss=float(np.dot(n, [r.train_loss for r in reports]) / n.sum()),
    )
    new_state = ExperimentState(state.spec, new_params, state.shards, state.test_images,
                                state.test_labels, t)
    return new_state, record


# ---------------------------------------------------------------------------
# Experiments


def summary_metrics(records):
    """Final, best and normalized trapezoidal AUC of per-round test accuracy."""
    acc = np.array([r.test_accuracy if isinstance(r, RoundRecord) else r for r in records], dtype=np.float64)
    if acc.size == 0:
        raise InputError("summary needs at least one round")
    auc = float(acc[0]) if acc.size == 1 else float(np.trapezoid(acc) / (acc.size - 1))
    return {"final": float(acc[-1]), "best": float(acc.max()), "auc": auc}


@dataclass
class ExperimentLog:
    config: dict
    records: list
    summary: dict
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return {"config": self.config, "meta": self.meta, "summary": self.summary,
                "records": [r.to_dict() for r in self.records]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["config"], [RoundRecord.from_dict(r) for r in d["records"]], d["summary"],
                   d.get("meta", {}))


def model_spec_for(config):
    return nn.cnn_spec(config.channels, config.image_side, config.n_classes,
                       config.conv1_channels, config.conv2_channels, config.hidden_units)


def load_datasets(config, data_dir=None):
    """Train/test subsets for ``config`` (CIFAR-10 from disk, or synthetic)."""
    if config.dataset == "memory":
        raise ConfigError("dataset 'memory' requires datasets to be passed in", "dataset")
    if config.dataset == "cifar10":
        train, test = load_cifar10(data_dir)
        return (subset(train, config.train_subset, stream(config.seed, "data", 0)),
                subset(test, config.test_subset, stream(config.seed, "data", 1)))
    total = config.train_subset + config.test_subset
    per_class = math.ceil(total / config.n_classes)
    pool = synthetic_blobs(config.n_classes, per_class, config.image_side, config.channels,
                           config.synthetic_spread, stream(config.seed, "data", 0))
    perm = stream(config.seed, "data", 1).permutation(len(pool))
    return pool.take(perm[:config.train_subset]), pool.take(perm[config.train_subset:total])


def setup_experiment(config, data_dir=None, datasets=None):
    """Data, partition, noise, model init.  Returns ``(state, meta)``.

    ``datasets`` optionally supplies ``(train, test)`` directly, bypassing
    :func:`load_datasets`.
    """
    train, test = datasets if datasets is not None else load_datasets(config, data_dir)
    prng = stream(config.seed, "partition")
    if config.partition == "dirichlet":
        partition = dirichlet_partition(train.labels, config.n_clients, config.concentration, prng,
                                        config.probe_batch_size)
    else:
        partition = iid_partition(len(train), config.n_clients, prng, config.probe_batch_size)
    noisy = np.zeros(0, dtype=np.int64)
    if config.noise == "label_noise":
        train, noisy = inject_label_noise(train, partition, config.noisy_fraction, config.flip_prob,
                                          stream(config.seed, "noise"))
    spec = model_spec_for(config)
    params = nn.init_params(spec, stream(config.seed, "init"))
    images = train.images
    shards = [ClientShard(k, images[idx], train.labels[idx], images[idx[:config.probe_batch_size]])
              for k, idx in enumerate(partition)]
    meta = {
        "partition_sizes": [len(p) for p in partition],
        "noisy_clients": [int(c) for c in noisy],
        "probe_indices": [[int(i) for i in p[:config.probe_batch_size]] for p in partition],
    }
    return ExperimentState(spec, params, shards, test.images, test.labels), meta


def run_experiment(config, data_dir=None, n_jobs=1, callback=None, datasets=None):
    """Run ``config.rounds`` rounds and summarize.

    ``n_jobs > 1`` trains the clients of a round in a thread pool; the
    result is identical to serial execution.  ``callback(record)`` is called
    after each round.
    """
    state, meta = setup_experiment(config, data_dir, datasets)
    records = []
    executor = ThreadPoolExecutor(n_jobs) if n_jobs > 1 else None
    try:
        for _ in range(config.rounds):
            state, record = run_round(state, config, executor)
            records.append(record)
            _log_round(config, record)
            if callback is not None:
                callback(record)
    finally:
        if executor is not None:
            executor.shutdown()
    summary = summary_metrics(records) if records else {"final": None, "best": None, "auc": None}
    result = ExperimentLog(config.to_dict(), records, summary, meta)
    result.final_params = state.params
    result.spec = state.spec
    return result


def _log_round(config, record):
    if record.degenerate:
        fit = "degenerate"
    else:
        fit = f"alpha={record.beta_fit.alpha:.2f} beta={record.beta_fit.beta:.2f}"
    log.info("%s round %d acc=%.4f loss=%.4f oui_mean=%.4f %s", config.method, record.round,
             record.test_accuracy, record.mean_train_loss, float(np.mean(record.oui_values)), fit)


def round_checks(record, sample_counts):
    """Median diagnostic used by ``inspect-round``.

    Per-sample FedOUI weights are ``w_k / n_k ~ eps + s_k``, so the client
    with the largest per-sample weight should be the one whose OUI is nearest
    the fitted median.  "Nearest" is measured two ways, recomputed from the
    logged fit:

    * ``probability``: smallest ``|F(o) - 1/2|`` (the scale the score uses)
    * ``oui``: smallest ``|o - median|``; can differ from the above when the
      fitted Beta is skewed and two clients sit on opposite sides

    Returns ``None`` for a degenerate round, else a dict with ``median`` and
    booleans ``probability`` and ``oui``.
    """
    if record.degenerate:
        return None
    fit = record.beta_fit
    median = beta_median(fit)
    per_sample = np.array(record.weights) / np.asarray(sample_counts, dtype=np.float64)
    top = np.flatnonzero(np.isclose(per_sample, per_sample.max(), rtol=1e-12, atol=0.0))
    oui_dist = np.abs(np.array(record.oui_values) - median)
    cdf_dist = np.abs(np.array([regularized_incomplete_beta(o, fit) for o in record.oui_values]) - 0.5)
    near_oui = np.flatnonzero(oui_dist == oui_dist.min())
    near_cdf = np.flatnonzero(np.isclose(cdf_dist, cdf_dist.min(), rtol=0.0, atol=1e-12))
    return {
        "median": median,
        "probability": bool(set(top) & set(near_cdf)),
        "oui": bool(set(top) & set(near_oui)),
    }
