"""Monotone normalizing-flow mechanism: a conditional rational-quadratic
spline (K bins on [-B, B], linear unit-slope tails) applied to a
standard-normal base, the flexible baseline the conditional-affine
mechanisms are compared against.

The normalizing map g sends standardized data to base space, so the
log-likelihood is log N(g(v)) + log g'(v). Training gradients with respect
to the conditioner network are exact: the spline is evaluated on
forward-mode dual arrays carrying Jacobians w.r.t. the raw spline
parameters, which are then chained through the network's backprop.
"""

from __future__ import annotations

import numpy as np

from .mechanisms import LOG_2PI, TrainingDiverged
from .nets import AdamOptimizer, DenseNet, Standardizer

__all__ = ["MonotoneFlowMechanism", "train_flow_mechanism", "DualArray"]

MIN_BIN_FRACTION = 1e-3
MIN_DERIVATIVE = 1e-4


class DualArray:
    """Forward-mode batch: values (n, m) with Jacobian (n, m, p).

    Supports just enough arithmetic for the spline pipeline. Operations with
    plain numbers or ndarrays treat them as constants.
    """

    __array_priority__ = 100
    __array_ufunc__ = None  # force mixed ndarray ops through our __r*__ methods

    def __init__(self, val: np.ndarray, jac: np.ndarray):
        self.val = np.asarray(val, dtype=float)
        self.jac = np.asarray(jac, dtype=float)

    @classmethod
    def seed(cls, val: np.ndarray) -> "DualArray":
        """Identity-Jacobian seed: each column differentiates w.r.t. itself."""
        val = np.asarray(val, dtype=float)
        n, p = val.shape
        jac = np.broadcast_to(np.eye(p), (n, p, p)).copy()
        return cls(val, jac)

    @classmethod
    def constant(cls, val, p: int) -> "DualArray":
        val = np.asarray(val, dtype=float)
        return cls(val, np.zeros(val.shape + (p,)))

    def _coerce(self, other):
        if isinstance(other, DualArray):
            return other.val, other.jac
        return np.asarray(other, dtype=float), 0.0

    def __add__(self, other):
        v, j = self._coerce(other)
        return DualArray(self.val + v, self.jac + j)

    __radd__ = __add__

    def __sub__(self, other):
        v, j = self._coerce(other)
        return DualArray(self.val - v, self.jac - j)

    def __rsub__(self, other):
        v, j = self._coerce(other)
        return DualArray(v - self.val, j - self.jac)

    def __mul__(self, other):
        v, j = self._coerce(other)
        jac = self.jac * np.expand_dims(v, -1) if np.ndim(v) else self.jac * v
        if isinstance(other, DualArray):
            jac = jac + j * np.expand_dims(self.val, -1)
        return DualArray(self.val * v, jac)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, DualArray):
            return self * other.reciprocal()
        v = np.asarray(other, dtype=float)
        inv = 1.0 / v
        jac = self.jac * (np.expand_dims(inv, -1) if np.ndim(inv) else inv)
        return DualArray(self.val * inv, jac)

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def __neg__(self):
        return DualArray(-self.val, -self.jac)

    def reciprocal(self):
        inv = 1.0 / self.val
        return DualArray(inv, -np.expand_dims(inv * inv, -1) * self.jac)

    def exp(self):
        e = np.exp(self.val)
        return DualArray(e, np.expand_dims(e, -1) * self.jac)

    def log(self):
        return DualArray(np.log(self.val), np.expand_dims(1.0 / self.val, -1) * self.jac)

    def square(self):
        return self * self

    def cumsum1(self):
        return DualArray(np.cumsum(self.val, axis=1), np.cumsum(self.jac, axis=1))

    def sum1(self):
        return DualArray(self.val.sum(axis=1, keepdims=True),
                         self.jac.sum(axis=1, keepdims=True))

    def take_bins(self, idx: np.ndarray) -> "DualArray":
        """Per-row gather along axis 1; result keeps a singleton column."""
        i = idx[:, None]
        val = np.take_along_axis(self.val, i, axis=1)
        jac = np.take_along_axis(self.jac, i[..., None], axis=1)
        return DualArray(val, jac)

    def column(self, i) -> "DualArray":
        return DualArray(self.val[:, i], self.jac[:, i, :])


# generic helpers so the spline math runs identically on ndarrays and duals

def _exp(x):
    return x.exp() if isinstance(x, DualArray) else np.exp(x)


def _log(x):
    return x.log() if isinstance(x, DualArray) else np.log(x)


def _softplus(x):
    if isinstance(x, DualArray):
        val = np.logaddexp(0.0, x.val)
        sig = 1.0 / (1.0 + np.exp(-x.val))
        return DualArray(val, np.expand_dims(sig, -1) * x.jac)
    return np.logaddexp(0.0, x)


def _softmax1(x):
    shift = x.val.max(axis=1, keepdims=True) if isinstance(x, DualArray) else x.max(axis=1, keepdims=True)
    e = _exp(x - shift)  # softmax is shift-invariant; treating the max as constant is exact
    return e / (e.sum1() if isinstance(e, DualArray) else e.sum(axis=1, keepdims=True))


def _cumsum1(x):
    return x.cumsum1() if isinstance(x, DualArray) else np.cumsum(x, axis=1)


def _take_bins(x, idx):
    if isinstance(x, DualArray):
        return x.take_bins(idx)
    return np.take_along_axis(x, idx[:, None], axis=1)


def _square(x):
    return x.square() if isinstance(x, DualArray) else x * x


def _hstack(parts):
    if any(isinstance(p, DualArray) for p in parts):
        p_dim = next(p.jac.shape[-1] for p in parts if isinstance(p, DualArray))
        parts = [p if isinstance(p, DualArray) else DualArray.constant(p, p_dim) for p in parts]
        return DualArray(np.concatenate([p.val for p in parts], axis=1),
                         np.concatenate([p.jac for p in parts], axis=1))
    return np.concatenate(parts, axis=1)


class SplineParams:
    """Knot positions, heights and derivatives decoded from raw conditioner output."""

    def __init__(self, raw, n_bins: int, bound: float):
        k = n_bins
        if isinstance(raw, DualArray):
            rw, rh, rd = raw.column(slice(0, k)), raw.column(slice(k, 2 * k)), raw.column(slice(2 * k, 3 * k - 1))
            n = raw.val.shape[0]
            p = raw.jac.shape[-1]
            ones = DualArray.constant(np.ones((n, 1)), p)
        else:
            raw = np.atleast_2d(np.asarray(raw, dtype=float))
            rw, rh, rd = raw[:, :k], raw[:, k : 2 * k], raw[:, 2 * k : 3 * k - 1]
            n = raw.shape[0]
            ones = np.ones((n, 1))
        span = 2.0 * bound
        self.widths = (_softmax1(rw) * (1.0 - k * MIN_BIN_FRACTION) + MIN_BIN_FRACTION) * span
        self.heights = (_softmax1(rh) * (1.0 - k * MIN_BIN_FRACTION) + MIN_BIN_FRACTION) * span
        self.x_knots = _hstack([ones * 0.0 - bound, _cumsum1(self.widths) - bound])
        self.y_knots = _hstack([ones * 0.0 - bound, _cumsum1(self.heights) - bound])
        # unit boundary derivatives keep the linear tails C1-continuous
        self.derivs = _hstack([ones, _softplus(rd) + MIN_DERIVATIVE, ones])
        self.bound = bound
        self.n_bins = k

    @staticmethod
    def raw_dim(n_bins: int) -> int:
        return 3 * n_bins - 1

    def _vals(self, x):
        return x.val if isinstance(x, DualArray) else x

    def bin_index(self, v: np.ndarray, knots: np.ndarray) -> np.ndarray:
        idx = (knots <= v[:, None]).sum(axis=1) - 1
        return np.clip(idx, 0, self.n_bins - 1)

    def normalize(self, v: np.ndarray):
        """g(v) and g'(v) for standardized inputs v (plain or dual params).

        Outside [-bound, bound] the map is the identity with slope 1.
        """
        v = np.asarray(v, dtype=float)
        inside = np.abs(v) < self.bound
        v_in = np.where(inside, v, 0.0)
        idx = self.bin_index(v_in, self._vals(self.x_knots)[:, : self.n_bins + 1])

        w_k = _take_bins(self.widths, idx)
        h_k = _take_bins(self.heights, idx)
        x_k = _take_bins(self.x_knots, idx)
        y_k = _take_bins(self.y_knots, idx)
        d_k = _take_bins(self.derivs, idx)
        d_k1 = _take_bins(self.derivs, idx + 1)

        col = v_in[:, None]
        xi = (col - x_k) / w_k  # mixed ops defer to DualArray via __array_priority__
        s_k = h_k / w_k
        one_m = 1.0 - xi
        xi_om = xi * one_m
        denom = s_k + (d_k1 + d_k - 2.0 * s_k) * xi_om
        g = y_k + h_k * (s_k * _square(xi) + d_k * xi_om) / denom
        gp = _square(s_k) * (d_k1 * _square(xi) + 2.0 * s_k * xi_om + d_k * _square(one_m)) / _square(denom)

        if isinstance(g, DualArray):
            g_val = np.where(inside, g.val[:, 0], v)
            gp_val = np.where(inside, gp.val[:, 0], 1.0)
            mask = inside[:, None].astype(float)
            return (DualArray(g_val, g.jac[:, 0, :] * mask),
                    DualArray(gp_val, gp.jac[:, 0, :] * mask))
        return np.where(inside, g[:, 0], v), np.where(inside, gp[:, 0], 1.0)

    def generate(self, u: np.ndarray) -> np.ndarray:
        """Analytic inverse g^{-1}(u): base samples to standardized data."""
        u = np.asarray(u, dtype=float)
        inside = np.abs(u) < self.bound
        u_in = np.where(inside, u, 0.0)
        idx = self.bin_index(u_in, self._vals(self.y_knots)[:, : self.n_bins + 1])

        w_k = _take_bins(self.widths, idx)[:, 0]
        h_k = _take_bins(self.heights, idx)[:, 0]
        x_k = _take_bins(self.x_knots, idx)[:, 0]
        y_k = _take_bins(self.y_knots, idx)[:, 0]
        d_k = _take_bins(self.derivs, idx)[:, 0]
        d_k1 = _take_bins(self.derivs, idx + 1)[:, 0]
        s_k = h_k / w_k

        dy = u_in - y_k
        two_s = d_k1 + d_k - 2.0 * s_k
        a = h_k * (s_k - d_k) + dy * two_s
        b = h_k * d_k - dy * two_s
        c = -s_k * dy
        # numerically stable quadratic root in [0, 1]
        disc = np.maximum(b * b - 4.0 * a * c, 0.0)
        xi = 2.0 * c / (-b - np.sqrt(disc))
        xi = np.clip(xi, 0.0, 1.0)
        return np.where(inside, x_k + xi * w_k, u)


class MonotoneFlowMechanism:
    """Strictly monotone conditional flow with the mechanism interface.

    forward(pa, u) generates data from base noise; abduct(pa, v) is the exact
    analytic inverse; log_likelihood adds the change-of-variables term.
    """

    kind = "monotone_flow"

    def __init__(self, target: str, parent_names, net: DenseNet, n_bins: int = 8,
                 bound: float = 4.0, x_stats: Standardizer | None = None,
                 y_stats: Standardizer | None = None):
        self.target = target
        self.parent_names = list(parent_names)
        expected = SplineParams.raw_dim(n_bins)
        if net.layer_sizes[0] != len(self.parent_names) or net.layer_sizes[-1] != expected:
            raise ValueError(
                f"flow {target!r}: net must map {len(self.parent_names)} parents to "
                f"{expected} spline parameters, got {net.layer_sizes}"
            )
        if n_bins < 2 or bound <= 0:
            raise ValueError("invalid spline configuration")
        self.net = net
        self.n_bins = n_bins
        self.bound = float(bound)
        self.x_stats = x_stats or Standardizer.identity(len(self.parent_names))
        self.y_stats = y_stats or Standardizer.identity(1)

    @property
    def arity(self) -> int:
        return len(self.parent_names)

    def _params(self, pa, dual: bool = False) -> SplineParams:
        pa = np.atleast_2d(np.asarray(pa, dtype=float))
        if pa.shape[1] != self.arity:
            raise ValueError(
                f"flow {self.target!r} expects {self.arity} parent values, got {pa.shape[1]}"
            )
        raw = self.net.forward(self.x_stats.transform(pa))
        return SplineParams(DualArray.seed(raw) if dual else raw, self.n_bins, self.bound)

    def forward(self, pa, u):
        params = self._params(pa)
        v_std = params.generate(np.asarray(u, dtype=float))
        return self.y_stats.inverse(v_std[:, None])[:, 0]

    def abduct(self, pa, v):
        params = self._params(pa)
        v_std = self.y_stats.transform(np.asarray(v, dtype=float)[:, None])[:, 0]
        g, _ = params.normalize(v_std)
        return g

    def forward_with_logdet(self, pa, u):
        """Generate data from base noise; logdet is d(native v)/du."""
        params = self._params(pa)
        v_std = params.generate(np.asarray(u, dtype=float))
        _, gp = params.normalize(v_std)
        logdet = float(np.log(self.y_stats.scale[0])) - np.log(gp)
        return self.y_stats.inverse(v_std[:, None])[:, 0], logdet

    def inverse_with_logdet(self, pa, v):
        """Normalize data to base noise; logdet is du/d(native v)."""
        params = self._params(pa)
        v_std = self.y_stats.transform(np.asarray(v, dtype=float)[:, None])[:, 0]
        g, gp = params.normalize(v_std)
        return g, np.log(gp) - float(np.log(self.y_stats.scale[0]))

    def log_likelihood(self, pa, v):
        u, logdet = self.inverse_with_logdet(pa, v)
        ll = -0.5 * LOG_2PI - 0.5 * u * u + logdet
        if not np.all(np.isfinite(ll)):
            raise TrainingDiverged(f"non-finite log-likelihood for {self.target!r}")
        return ll

    def nll_and_grads(self, pa_std: np.ndarray, v_std: np.ndarray):
        """Mean NLL and exact parameter gradient via dual-array forward mode."""
        n = pa_std.shape[0]
        raw, acts = self.net.forward_cached(pa_std)
        params = SplineParams(DualArray.seed(raw), self.n_bins, self.bound)
        g, gp = params.normalize(v_std)
        nll = float(np.mean(0.5 * LOG_2PI + 0.5 * g.val**2 - np.log(gp.val)))
        # d(nll)/d(raw spline params), then chain through the conditioner net
        grad_raw = (g.val[:, None] * g.jac - gp.jac / gp.val[:, None]) / n
        w_grads, b_grads, _ = self.net.backward(acts, grad_raw)
        return nll, self.net.flatten_grads(w_grads, b_grads)

    def check_monotone(self, pa, grid_points: int = 1000) -> bool:
        """Numeric monotonicity check of the normalizing map on a grid."""
        grid = np.linspace(-self.bound, self.bound, grid_points)
        raw = self.net.forward(self.x_stats.transform(np.atleast_2d(pa)[:1]))
        tiled = SplineParams(np.repeat(raw, grid_points, axis=0), self.n_bins, self.bound)
        _, gp = tiled.normalize(grid)
        return bool(np.all(gp > 0.0))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "target": self.target,
            "parents": self.parent_names,
            "net": self.net.to_dict(),
            "n_bins": self.n_bins,
            "bound": self.bound,
            "x_stats": self.x_stats.to_dict(),
            "y_stats": self.y_stats.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MonotoneFlowMechanism":
        return cls(
            d["target"], d["parents"], DenseNet.from_dict(d["net"]),
            n_bins=int(d["n_bins"]), bound=float(d["bound"]),
            x_stats=Standardizer.from_dict(d["x_stats"]),
            y_stats=Standardizer.from_dict(d["y_stats"]),
        )


def identity_initialized_flow(target: str, parent_names, hidden=(32, 32), n_bins: int = 8,
                              bound: float = 4.0, seed: int = 0) -> MonotoneFlowMechanism:
    """Flow whose spline starts as the identity map (uniform bins, unit slopes)."""
    out_dim = SplineParams.raw_dim(n_bins)
    net = DenseNet([len(parent_names), *hidden, out_dim], seed=seed)
    net.weights[-1] = np.zeros_like(net.weights[-1])
    bias = np.zeros(out_dim)
    # softplus(x) + MIN_DERIVATIVE = 1  =>  x = log(exp(1 - MIN_DERIVATIVE) - 1)
    bias[2 * n_bins :] = np.log(np.expm1(1.0 - MIN_DERIVATIVE))
    net.biases[-1] = bias
    return MonotoneFlowMechanism(target, parent_names, net, n_bins=n_bins, bound=bound)


def train_flow_mechanism(target: str, parent_names, pa: np.ndarray, v: np.ndarray,
                         config, n_bins: int = 8, bound: float = 4.0):
    """MLE training of the spline flow; same driver contract as the affine trainer."""
    from .mechanisms import _mechanism_seed

    pa = np.atleast_2d(np.asarray(pa, dtype=float))
    v = np.asarray(v, dtype=float)
    rng = np.random.default_rng(_mechanism_seed(config.seed, "flow:" + target))

    n = pa.shape[0]
    n_val = max(1, int(round(config.val_fraction * n)))
    perm = rng.permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    x_stats = Standardizer.fit(pa[train_idx])
    y_stats = Standardizer.fit(v[train_idx, None])
    mech = identity_initialized_flow(target, parent_names, hidden=config.hidden,
                                     n_bins=n_bins, bound=bound,
                                     seed=int(rng.integers(2**32)))
    mech.x_stats = x_stats
    mech.y_stats = y_stats

    pa_std = x_stats.transform(pa)
    v_std = y_stats.transform(v[:, None])[:, 0]
    xt, yt = pa_std[train_idx], v_std[train_idx]
    xv, yv = pa_std[val_idx], v_std[val_idx]

    net = mech.net
    opt = AdamOptimizer(net.get_params().size, lr=config.learning_rate)
    train_hist, val_hist = [], []
    best_val, best_params, best_epoch = np.inf, net.get_params(), -1
    stale = 0
    for epoch in range(config.epochs):
        opt.lr = config.rate_at(epoch)
        order = rng.permutation(train_idx.size)
        epoch_nll = 0.0
        for start in range(0, order.size, config.batch_size):
            batch = order[start : start + config.batch_size]
            nll, grads = mech.nll_and_grads(xt[batch], yt[batch])
            if not np.isfinite(nll):
                raise TrainingDiverged(
                    f"NaN loss training flow {target!r} at epoch {epoch} "
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
