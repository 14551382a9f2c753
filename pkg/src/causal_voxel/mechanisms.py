"""Conditional-affine causal mechanisms and their maximum-likelihood training.

A mechanism generates its target from parents and a standard-normal noise:

    v = mu(pa) + sigma(pa) * u,   sigma = exp(log_sigma)

where (mu, log_sigma) come from a small dense network. Inputs and targets
are z-scored with statistics frozen from the training split; all public
values are in native units. Training minimizes the mean Gaussian negative
log-likelihood per mechanism with Adam, early-stopping on validation NLL.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .nets import AdamOptimizer, DenseNet, Standardizer

__all__ = [
    "ConditionalAffineMechanism",
    "TrainConfig",
    "TrainingHistory",
    "TrainingDiverged",
    "train_mechanisms",
    "linear_gaussian_mechanism",
    "eval_loglik_table",
    "LogLikTable",
    "save_mechanisms",
    "load_mechanisms",
    "mechanisms_to_dict",
    "mechanisms_from_dict",
]

MODEL_FORMAT_VERSION = 1
LOG_2PI = float(np.log(2.0 * np.pi))


class TrainingDiverged(FloatingPointError):
    """Raised when the training loss stops being finite."""


class ConditionalAffineMechanism:
    """v = mu(pa) + exp(log_sigma(pa)) * u with (mu, log_sigma) from a dense net."""

    kind = "conditional_affine"

    def __init__(self, target: str, parent_names, net: DenseNet,
                 x_stats: Standardizer | None = None,
                 y_stats: Standardizer | None = None):
        self.target = target
        self.parent_names = list(parent_names)
        if net.layer_sizes[0] != len(self.parent_names) or net.layer_sizes[-1] != 2:
            raise ValueError(
                f"mechanism {target!r}: net must map {len(self.parent_names)} parents "
                f"to (mu, log_sigma), got layer sizes {net.layer_sizes}"
            )
        self.net = net
        self.x_stats = x_stats or Standardizer.identity(len(self.parent_names))
        self.y_stats = y_stats or Standardizer.identity(1)

    @property
    def arity(self) -> int:
        return len(self.parent_names)

    def _check_parents(self, pa: np.ndarray) -> np.ndarray:
        pa = np.atleast_2d(np.asarray(pa, dtype=float))
        if pa.shape[1] != self.arity:
            raise ValueError(
                f"mechanism {self.target!r} expects {self.arity} parent values, "
                f"got {pa.shape[1]}"
            )
        return pa

    def location_scale(self, pa: np.ndarray):
        """Native-unit (mu, sigma) arrays for a batch of parent vectors."""
        pa = self._check_parents(pa)
        out = self.net.forward(self.x_stats.transform(pa))
        mu = self.y_stats.inverse(out[:, :1])[:, 0]
        sigma = float(self.y_stats.scale[0]) * np.exp(out[:, 1])
        return mu, sigma

    def forward(self, pa, u):
        mu, sigma = self.location_scale(pa)
        return mu + sigma * np.asarray(u, dtype=float)

    def abduct(self, pa, v):
        """Exact inverse of :meth:`forward`: u = (v - mu) / sigma."""
        mu, sigma = self.location_scale(pa)
        return (np.asarray(v, dtype=float) - mu) / sigma

    def log_likelihood(self, pa, v):
        """Gaussian log-density of native-unit observations, elementwise."""
        mu, sigma = self.location_scale(pa)
        z = (np.asarray(v, dtype=float) - mu) / sigma
        ll = -0.5 * LOG_2PI - np.log(sigma) - 0.5 * z * z
        if not np.all(np.isfinite(ll)):
            raise TrainingDiverged(f"non-finite log-likelihood for {self.target!r}")
        return ll

    def nll_and_grads(self, pa_std: np.ndarray, v_std: np.ndarray):
        """Mean standardized-space NLL and its parameter gradient.

        Native and standardized NLL differ by the constant log of the target
        scale, so gradients agree. Returns (nll, flat gradient vector).
        """
        n = pa_std.shape[0]
        out, acts = self.net.forward_cached(pa_std)
        mu, log_sigma = out[:, 0], out[:, 1]
        inv_var = np.exp(-2.0 * log_sigma)
        resid = v_std - mu
        nll = float(np.mean(0.5 * LOG_2PI + log_sigma + 0.5 * resid * resid * inv_var))
        grad_out = np.empty_like(out)
        grad_out[:, 0] = -resid * inv_var / n
        grad_out[:, 1] = (1.0 - resid * resid * inv_var) / n
        w_grads, b_grads, _ = self.net.backward(acts, grad_out)
        return nll, self.net.flatten_grads(w_grads, b_grads)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "target": self.target,
            "parents": self.parent_names,
            "net": self.net.to_dict(),
            "x_stats": self.x_stats.to_dict(),
            "y_stats": self.y_stats.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionalAffineMechanism":
        return cls(
            d["target"],
            d["parents"],
            DenseNet.from_dict(d["net"]),
            x_stats=Standardizer.from_dict(d["x_stats"]),
            y_stats=Standardizer.from_dict(d["y_stats"]),
        )


def linear_gaussian_mechanism(target: str, parent_names, coeffs, intercept: float,
                              sigma: float) -> ConditionalAffineMechanism:
    """Exact closed-form linear-Gaussian mechanism: v = c.pa + b + sigma*u.

    Represented as a conditional-affine mechanism whose net has no hidden
    layers, so it doubles as ground truth for recovery tests.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    net = DenseNet([len(parent_names), 2], seed=0)
    net.weights[0] = np.column_stack([coeffs, np.zeros_like(coeffs)])
    net.biases[0] = np.array([float(intercept), float(np.log(sigma))])
    return ConditionalAffineMechanism(target, parent_names, net)


@dataclass
class TrainConfig:
    """Shared optimizer settings for per-mechanism MLE training."""

    learning_rate: float = 1e-3
    epochs: int = 500
    batch_size: int = 256
    seed: int = 0
    patience: int = 50
    val_fraction: float = 0.15
    hidden: tuple = (32, 32)
    lr_decay: float = 0.01  # cosine floor as a fraction of the base rate

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch size must be positive")
        if not 0.0 < self.learning_rate < 1.0:
            raise ValueError("learning rate must lie in (0, 1)")

    def rate_at(self, epoch: int) -> float:
        """Cosine decay from the base rate to its floor across the epoch budget."""
        floor = self.lr_decay * self.learning_rate
        cos = 0.5 * (1.0 + np.cos(np.pi * epoch / max(1, self.epochs - 1)))
        return floor + (self.learning_rate - floor) * cos


@dataclass
class TrainingHistory:
    """Per-epoch train/validation NLL, per mechanism."""

    train_nll: dict = field(default_factory=dict)
    val_nll: dict = field(default_factory=dict)
    best_epoch: dict = field(default_factory=dict)

    def to_rows(self):
        rows = []
        for name in self.train_nll:
            for epoch, (t, v) in enumerate(zip(self.train_nll[name], self.val_nll[name])):
                rows.append({"mechanism": name, "epoch": epoch, "train_nll": t, "val_nll": v})
        return rows


def _mechanism_seed(base_seed: int, target: str) -> np.random.SeedSequence:
    # seeded from the target name so training one mechanism never perturbs
    # another's randomness (Eq.-style per-variable factorization is structural)
    return np.random.SeedSequence([int(base_seed)] + [b for b in target.encode("utf-8")])


def train_affine_mechanism(target: str, parent_names, pa: np.ndarray, v: np.ndarray,
                           config: TrainConfig):
    """Fit one conditional-affine mechanism by minibatch Adam on the NLL.

    The network carries a linear skip path initialized at the closed-form
    least-squares solution with a silent tanh trunk, so training starts at
    the nested linear-Gaussian MLE and only has to learn departures from it.
    Returns (mechanism at the best validation epoch, train history, val
    history, best epoch).
    """
    pa = np.atleast_2d(np.asarray(pa, dtype=float))
    v = np.asarray(v, dtype=float)
    rng = np.random.default_rng(_mechanism_seed(config.seed, target))

    n = pa.shape[0]
    n_val = max(1, int(round(config.val_fraction * n)))
    perm = rng.permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    x_stats = Standardizer.fit(pa[train_idx])
    y_stats = Standardizer.fit(v[train_idx, None])
    pa_std = x_stats.transform(pa)
    v_std = y_stats.transform(v[:, None])[:, 0]

    layer_sizes = [len(parent_names), *config.hidden, 2]
    net = DenseNet(layer_sizes, seed=rng.integers(2**32), skip=True)
    net.weights[-1] = np.zeros_like(net.weights[-1])
    if np.all(np.isfinite(pa_std)) and np.all(np.isfinite(v_std)):
        design = np.column_stack([pa_std[train_idx], np.ones(train_idx.size)])
        coef, *_ = np.linalg.lstsq(design, v_std[train_idx], rcond=None)
        residual_std = max(float((v_std[train_idx] - design @ coef).std()), 1e-6)
        net.skip[:, 0] = coef[:-1]
        net.biases[-1][0] = coef[-1]
        net.biases[-1][1] = np.log(residual_std)
    mech = ConditionalAffineMechanism(target, parent_names, net, x_stats, y_stats)

    opt = AdamOptimizer(net.get_params().size, lr=config.learning_rate)
    train_hist, val_hist = [], []
    best_val, best_params, best_epoch = np.inf, net.get_params(), -1
    stale = 0
    xt, yt = pa_std[train_idx], v_std[train_idx]
    xv, yv = pa_std[val_idx], v_std[val_idx]

    for epoch in range(config.epochs):
        opt.lr = config.rate_at(epoch)
        order = rng.permutation(train_idx.size)
        epoch_nll = 0.0
        for start in range(0, order.size, config.batch_size):
            batch = order[start : start + config.batch_size]
            nll, grads = mech.nll_and_grads(xt[batch], yt[batch])
            if not np.isfinite(nll):
                raise TrainingDiverged(
                    f"NaN loss training {target!r} at epoch {epoch} "
                    f"(lr={config.learning_rate})"
                )
            net.set_params(opt.step(net.get_params(), grads))
            epoch_nll += nll * batch.size
        net.assert_finite()
        val_nll, _ = mech.nll_and_grads(xv, yv)
        train_hist.append(epoch_nll / order.size)
        val_hist.append(val_nll)
        if val_nll < best_val - 1e-12:
            best_val, best_params, best_epoch, stale = val_nll, net.get_params(), epoch, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    net.set_params(best_params)
    return mech, train_hist, val_hist, best_epoch


def train_mechanisms(columns: dict, graph, config: TrainConfig,
                     mechanism_factory=None):
    """Train one mechanism per non-root graph variable from column data.

    ``columns`` maps variable names to equal-length float arrays; rows must
    be complete. ``mechanism_factory`` defaults to the conditional-affine
    trainer and exists so the flow baseline can reuse the same driver.
    Returns (mechanism dict, :class:`TrainingHistory`).
    """
    factory = mechanism_factory or train_affine_mechanism
    lengths = {k: len(np.asarray(c)) for k, c in columns.items()}
    if len(set(lengths.values())) > 1:
        raise ValueError(f"ragged columns: {lengths}")
    missing = [n for n in graph.names() if n not in columns]
    if missing:
        raise ValueError(f"dataset missing columns for {missing}")

    mechanisms = {}
    history = TrainingHistory()
    for name in graph.order:
        parents = graph.parents(name)
        if not parents:
            continue
        pa = np.column_stack([np.asarray(columns[p], dtype=float) for p in parents])
        v = np.asarray(columns[name], dtype=float)
        mech, tr, va, best = factory(name, parents, pa, v, config)
        mechanisms[name] = mech
        history.train_nll[name] = tr
        history.val_nll[name] = va
        history.best_epoch[name] = best
    return mechanisms, history


VARIABLE_LABELS = {"b": "Brain volume", "v": "Ventricle volume",
                   "g": "GM volume", "m": "Score"}


@dataclass
class LogLikTable:
    """Per-variable average log-likelihood, one row per mechanism set.

    Columns carry readable labels (Brain volume, Ventricle volume, GM
    volume, Score) for the default variable names.
    """

    variables: list
    rows: list  # (method name, {variable: mean log-likelihood})

    def label(self, variable: str) -> str:
        return VARIABLE_LABELS.get(variable, variable)

    def to_csv(self) -> str:
        lines = ["method," + ",".join(self.label(v) for v in self.variables)]
        for name, values in self.rows:
            lines.append(name + "," + ",".join(f"{values[v]:.6f}" for v in self.variables))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        width = max(len(r[0]) for r in self.rows) + 2
        header = " " * width + "  ".join(f"{self.label(v):>16s}" for v in self.variables)
        lines = [header]
        for name, values in self.rows:
            lines.append(
                f"{name:<{width}s}" + "  ".join(f"{values[v]:16.3f}" for v in self.variables)
            )
        return "\n".join(lines) + "\n"


def eval_loglik_table(named_sets: dict, columns: dict, variables=None) -> LogLikTable:
    """Average held-out log-likelihood per variable for each mechanism set."""
    sets = list(named_sets.items())
    if variables is None:
        variables = sorted(sets[0][1].keys()) if sets else []
        for name, mechs in sets:
            if sorted(mechs.keys()) != list(variables):
                raise ValueError(
                    f"mechanism set {name!r} covers {sorted(mechs.keys())}, "
                    f"expected {list(variables)}"
                )
    rows = []
    for name, mechs in sets:
        values = {}
        for var in variables:
            mech = mechs[var]
            pa = np.column_stack([np.asarray(columns[p], dtype=float)
                                  for p in mech.parent_names])
            values[var] = float(np.mean(mech.log_likelihood(pa, columns[var])))
        rows.append((name, values))
    return LogLikTable(variables=list(variables), rows=rows)


# -- model files ------------------------------------------------------------

def mechanisms_to_dict(mechanisms: dict, graph=None, seed=None, metadata=None) -> dict:
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "graph": graph.to_dict() if graph is not None else None,
        "seed": seed,
        "metadata": metadata or {},
        "mechanisms": {name: m.to_dict() for name, m in sorted(mechanisms.items())},
    }


def mechanisms_from_dict(d: dict):
    from .flows import MonotoneFlowMechanism  # local import avoids a cycle

    if d.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format_version {d.get('format_version')!r}")
    loaders = {
        "conditional_affine": ConditionalAffineMechanism.from_dict,
        "monotone_flow": MonotoneFlowMechanism.from_dict,
    }
    mechanisms = {}
    for name, md in d["mechanisms"].items():
        mechanisms[name] = loaders[md["kind"]](md)
    graph = None
    if d.get("graph"):
        from .scm import CausalGraph

        graph = CausalGraph.from_dict(d["graph"])
    return mechanisms, graph


def save_mechanisms(path, mechanisms: dict, graph=None, seed=None, metadata=None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(mechanisms_to_dict(mechanisms, graph, seed, metadata), f, indent=1)
        f.write("\n")


def load_mechanisms(path):
    with open(path, "r", encoding="utf-8") as f:
        return mechanisms_from_dict(json.load(f))
