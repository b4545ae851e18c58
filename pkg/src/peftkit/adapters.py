"""Adapted linear layers: plain low-rank (LoRA), column-normalized (DoRA), and
Frobenius-normalized magnitude/direction (MAP).

Every layer computes ``y = x @ W_eff`` with ``x`` of shape (batch, n) and a
frozen base ``W`` of shape (n, m):

* LoRA: ``W_eff = W + s * A @ B``
* DoRA: ``W_eff = V * (mags / col_norms(V))`` with ``V = W + s * A @ B``
* MAP:  ``W_eff = alpha * W / ||W||_F + beta * A @ B / ||A @ B||_F``

``s = lora_alpha / r`` is the usual low-rank scaling; it is not used on the MAP
path because the Frobenius normalization cancels it exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Protocol

import numpy as np

from . import linalg
from .errors import (
    DegenerateUpdate,
    DimensionError,
    NormUnderflow,
    NormUnderflowWarning,
    ZeroBase,
    ZeroColumn,
)
from .linalg import Rng

EPS_NORM = 1e-12


class Kind(str, Enum):
    LORA = "lora"
    DORA = "dora"
    MAP = "map"

    @classmethod
    def parse(cls, value) -> "Kind":
        if isinstance(value, cls):
            return value
        aliases = {"plainlora": "lora", "plain_lora": "lora"}
        key = str(value).strip().lower()
        return cls(aliases.get(key, key))


@dataclass(frozen=True)
class FrozenBase:
    w: np.ndarray
    w_fnorm: float

    @classmethod
    def from_weight(cls, w) -> "FrozenBase":
        w = linalg.as_matrix(w, "base weight").copy()
        fnorm = linalg.frob_norm(w)
        if not fnorm > 0:
            raise ZeroBase("base weight has zero Frobenius norm")
        w.flags.writeable = False
        return cls(w, fnorm)

    @property
    def shape(self) -> tuple[int, int]:
        return self.w.shape


class DeltaProvider(Protocol):
    """What the MAP combination needs from an update ``dW``.

    Only :class:`LowRankFactors` is provided; other parameterizations of the
    update can plug into the same slot.
    """

    def apply(self, x: np.ndarray) -> np.ndarray: ...
    def frob_norm(self) -> float: ...
    def materialize(self) -> np.ndarray: ...
    def vjp(self, d_delta: np.ndarray) -> dict[str, np.ndarray]: ...


@dataclass
class LowRankFactors:
    a: np.ndarray
    b: np.ndarray
    scaling: float

    def __post_init__(self):
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[1] != self.b.shape[0]:
            raise DimensionError("low-rank factors", self.a.shape, self.b.shape)
        if not self.scaling > 0:
            raise ValueError(f"scaling must be positive, got {self.scaling}")

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x @ self.a) @ self.b

    def frob_norm(self) -> float:
        return linalg.lowrank_frob_norm(self.a, self.b)

    def materialize(self) -> np.ndarray:
        return self.a @ self.b

    def vjp(self, d_delta: np.ndarray) -> dict[str, np.ndarray]:
        return {"a": d_delta @ self.b.T, "b": self.a.T @ d_delta}


@dataclass
class MapParams:
    # 0-d arrays so optimizers can update them in place
    alpha: np.ndarray
    beta: np.ndarray

    @classmethod
    def create(cls, alpha: float, beta: float) -> "MapParams":
        return cls(np.array(float(alpha)), np.array(float(beta)))


@dataclass
class DoraParams:
    mags: np.ndarray


@dataclass
class AdapterState:
    kind: Kind
    base: FrozenBase
    factors: LowRankFactors
    map_params: Optional[MapParams] = None
    dora_params: Optional[DoraParams] = None
    dropout_p: float = 0.0

    def __post_init__(self):
        self.kind = Kind.parse(self.kind)
        n, m = self.base.shape
        r = self.factors.rank
        if self.factors.a.shape != (n, r) or self.factors.b.shape != (r, m):
            raise DimensionError("adapter factors vs base", self.base.shape,
                                 self.factors.a.shape, self.factors.b.shape)
        if not 1 <= r <= min(n, m):
            raise ValueError(f"rank {r} must lie in [1, min(n, m) = {min(n, m)}]")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if (self.map_params is not None) != (self.kind is Kind.MAP):
            raise ValueError("map_params must be present exactly for MAP adapters")
        if (self.dora_params is not None) != (self.kind is Kind.DORA):
            raise ValueError("dora_params must be present exactly for DoRA adapters")
        if self.dora_params is not None and self.dora_params.mags.shape != (m,):
            raise DimensionError("DoRA magnitudes", self.dora_params.mags.shape, (m,))

    @property
    def n(self) -> int:
        return self.base.shape[0]

    @property
    def m(self) -> int:
        return self.base.shape[1]

    @property
    def r(self) -> int:
        return self.factors.rank

    def params(self) -> dict[str, np.ndarray]:
        """Trainable arrays keyed by name; the arrays are live, not copies."""
        out = {"a": self.factors.a, "b": self.factors.b}
        if self.map_params is not None:
            out["alpha"] = self.map_params.alpha
            out["beta"] = self.map_params.beta
        if self.dora_params is not None:
            out["mags"] = self.dora_params.mags
        return out

    def trainable_count(self) -> int:
        return sum(int(p.size) for p in self.params().values())


@dataclass
class GradBundle:
    d_a: np.ndarray
    d_b: np.ndarray
    d_x: np.ndarray
    d_alpha: Optional[float] = None
    d_beta: Optional[float] = None
    d_mags: Optional[np.ndarray] = None

    def as_dict(self) -> dict[str, np.ndarray]:
        """Gradients keyed like :meth:`AdapterState.params` (d_x excluded)."""
        out = {"a": self.d_a, "b": self.d_b}
        if self.d_alpha is not None:
            out["alpha"] = np.array(self.d_alpha)
            out["beta"] = np.array(self.d_beta)
        if self.d_mags is not None:
            out["mags"] = self.d_mags
        return out


@dataclass
class _Cache:
    x: np.ndarray
    xd: np.ndarray  # x after dropout (x itself when dropout is off)
    mask: Optional[np.ndarray]
    xa: np.ndarray  # xd @ A
    extra: dict = field(default_factory=dict)


def param_count(kind, n: int, m: int, r: int) -> int:
    kind = Kind.parse(kind)
    base = r * (n + m)
    if kind is Kind.LORA:
        return base
    if kind is Kind.DORA:
        return base + m
    return base + 2


def init_adapter(
    kind,
    rng: Rng,
    base: FrozenBase,
    r: int,
    lora_alpha: Optional[float] = None,
    beta_init: float = 1.0,
    b_init_std: float = 1e-3,
    dropout_p: float = 0.0,
) -> AdapterState:
    """Build a freshly initialized adapter around ``base``.

    ``lora_alpha`` defaults to ``2 * r``. A is Kaiming-normal in every kind.
    LoRA and DoRA start with ``B = 0``. MAP cannot (its update direction
    would be 0/0), so B is drawn from N(0, b_init_std^2) and alpha starts at
    ``||W||_F``, which makes the initial weight differ from W by exactly
    ``|beta_init|`` in Frobenius norm.
    """
    kind = Kind.parse(kind)
    if not isinstance(base, FrozenBase):
        base = FrozenBase.from_weight(base)
    n, m = base.shape
    if not 1 <= r <= min(n, m):
        raise ValueError(f"rank {r} must lie in [1, min(n, m) = {min(n, m)}]")
    if lora_alpha is None:
        lora_alpha = 2.0 * r
    scaling = float(lora_alpha) / r

    a = linalg.kaiming_init(rng, n, r)
    map_params = dora_params = None
    if kind is Kind.MAP:
        for _ in range(2):
            b = linalg.gaussian_init(rng, r, m, b_init_std)
            if linalg.lowrank_frob_norm(a, b) > EPS_NORM:
                break
        else:
            raise DegenerateUpdate(
                f"initial update A @ B has Frobenius norm <= {EPS_NORM} "
                f"(b_init_std={b_init_std}) after one resample")
        map_params = MapParams.create(base.w_fnorm, beta_init)
    else:
        b = np.zeros((r, m))
    factors = LowRankFactors(a, b, scaling)
    if kind is Kind.DORA:
        dora_params = DoraParams(linalg.col_norms(base.w + scaling * (a @ b)))
    return AdapterState(kind, base, factors, map_params, dora_params, dropout_p)


def _prepare_input(x, state: AdapterState, rng: Optional[Rng]):
    if x.ndim != 2 or x.shape[1] != state.n:
        raise DimensionError("adapter input", x.shape, (None, state.n))
    mask = None
    if rng is not None and state.dropout_p > 0:
        keep = rng.uniform(x.size).reshape(x.shape) >= state.dropout_p
        mask = keep / (1.0 - state.dropout_p)
    xd = x if mask is None else x * mask
    return xd, mask, xd @ state.factors.a


def _check_grad(g_y: np.ndarray, cache: _Cache, state: AdapterState):
    expected = (cache.x.shape[0], state.m)
    if g_y.shape != expected:
        raise DimensionError("output gradient", g_y.shape, expected)


def _input_grad(base_part: np.ndarray, adapter_part: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return base_part + adapter_part
    return base_part + adapter_part * mask


# -- LoRA ---------------------------------------------------------------------

def lora_forward(x: np.ndarray, state: AdapterState, rng: Optional[Rng] = None):
    _require(state, Kind.LORA)
    xd, mask, xa = _prepare_input(x, state, rng)
    f = state.factors
    y = x @ state.base.w + f.scaling * (xa @ f.b)
    return linalg.check_finite(y, "lora_forward"), _Cache(x, xd, mask, xa)


def lora_backward(g_y: np.ndarray, cache: _Cache, state: AdapterState) -> GradBundle:
    _require(state, Kind.LORA)
    _check_grad(g_y, cache, state)
    f = state.factors
    s = f.scaling
    gb = g_y @ f.b.T
    d_a = s * (cache.xd.T @ gb)
    d_b = s * (cache.xa.T @ g_y)
    d_x = _input_grad(g_y @ state.base.w.T, s * (gb @ f.a.T), cache.mask)
    return GradBundle(d_a, d_b, d_x)


# -- MAP ----------------------------------------------------------------------

def _update_norm(state: AdapterState) -> tuple[float, bool]:
    raw = state.factors.frob_norm()
    if raw <= EPS_NORM:
        warnings.warn(f"||A @ B||_F = {raw:.3e} clamped to {EPS_NORM}", NormUnderflowWarning,
                      stacklevel=3)
        return EPS_NORM, True
    return raw, False


def map_forward(x: np.ndarray, state: AdapterState, rng: Optional[Rng] = None):
    _require(state, Kind.MAP)
    xd, mask, xa = _prepare_input(x, state, rng)
    c_delta, clamped = _update_norm(state)
    mp = state.map_params
    xw = x @ state.base.w
    y = (float(mp.alpha) / state.base.w_fnorm) * xw + (float(mp.beta) / c_delta) * (xa @ state.factors.b)
    cache = _Cache(x, xd, mask, xa, {"xw": xw, "c_delta": c_delta, "clamped": clamped})
    return linalg.check_finite(y, "map_forward"), cache


def map_backward(g_y: np.ndarray, cache: _Cache, state: AdapterState) -> GradBundle:
    """Exact gradient of ``sum(g_y * y)``.

    With U = AB / c and G = xd^T g_y the update gradient is
    ``dDelta = (beta / c) (G - <G, U> U)``, orthogonal to U. It is pushed
    through the factors without forming any n x m matrix:
    G B^T = xd^T (g_y B^T) and A^T G = (xd A)^T g_y.
    """
    _require(state, Kind.MAP)
    _check_grad(g_y, cache, state)
    if cache.extra["clamped"]:
        raise NormUnderflow("update norm was clamped in forward; direction gradient is undefined")
    f = state.factors
    mp = state.map_params
    c = cache.extra["c_delta"]
    alpha, beta = float(mp.alpha), float(mp.beta)

    d_alpha = linalg.frob_inner(g_y, cache.extra["xw"]) / state.base.w_fnorm
    q = g_y @ f.b.T
    g_dot_delta = float(np.dot(np.ravel(cache.xa), np.ravel(q)))  # <G, A B>
    d_beta = g_dot_delta / c
    coef = beta / c
    proj = g_dot_delta / (c * c)
    d_a = coef * (cache.xd.T @ q - proj * (f.a @ (f.b @ f.b.T)))
    d_b = coef * (cache.xa.T @ g_y - proj * ((f.a.T @ f.a) @ f.b))
    d_x = _input_grad((alpha / state.base.w_fnorm) * (g_y @ state.base.w.T), coef * (q @ f.a.T),
                      cache.mask)
    return GradBundle(d_a, d_b, d_x, d_alpha=d_alpha, d_beta=d_beta)


def map_delta_grad(g_y: np.ndarray, cache: _Cache, state: AdapterState) -> np.ndarray:
    """Dense gradient with respect to the update matrix A @ B (diagnostics only)."""
    c = cache.extra["c_delta"]
    u = state.factors.materialize() / c
    g = cache.xd.T @ g_y
    return (float(state.map_params.beta) / c) * (g - linalg.frob_inner(g, u) * u)


def map_vector_form(w: np.ndarray, delta: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    """Flatten-normalize-combine, then reshape back to the matrix shape."""
    wv = np.ravel(w)
    dv = np.ravel(delta)
    out = alpha * wv / np.linalg.norm(wv) + beta * dv / np.linalg.norm(dv)
    return out.reshape(w.shape)


def map_materialize(state: AdapterState) -> np.ndarray:
    _require(state, Kind.MAP)
    c_delta, _ = _update_norm(state)
    mp = state.map_params
    return ((float(mp.alpha) / state.base.w_fnorm) * state.base.w
            + (float(mp.beta) / c_delta) * state.factors.materialize())


# -- DoRA ---------------------------------------------------------------------

def _dora_direction(state: AdapterState):
    f = state.factors
    v = state.base.w + f.scaling * f.materialize()
    norms = linalg.col_norms(v)
    small = np.flatnonzero(norms <= EPS_NORM)
    if small.size:
        raise ZeroColumn(small.tolist())
    return v, norms


def dora_forward(x: np.ndarray, state: AdapterState, rng: Optional[Rng] = None):
    _require(state, Kind.DORA)
    v, norms = _dora_direction(state)
    xd, mask, xa = _prepare_input(x, state, rng)
    f = state.factors
    col_scale = state.dora_params.mags / norms
    z = x @ state.base.w + f.scaling * (xa @ f.b)  # x @ V when dropout is off
    y = z * col_scale
    cache = _Cache(x, xd, mask, xa, {"v": v, "norms": norms, "col_scale": col_scale, "z": z})
    return linalg.check_finite(y, "dora_forward"), cache


def _dora_grads(g_y: np.ndarray, cache: _Cache, state: AdapterState):
    e = cache.extra
    norms = e["norms"]
    mags = state.dora_params.mags
    gk = g_y * e["col_scale"]
    per_col = np.einsum("ij,ij->j", g_y, e["z"])
    d_mags = per_col / norms
    # direct path through V minus the path through its column norms
    d_v = cache.xd.T @ gk - e["v"] * (mags * per_col / norms ** 3)
    return gk, d_mags, d_v


def dora_direction_grad(g_y: np.ndarray, cache: _Cache, state: AdapterState) -> np.ndarray:
    """Gradient with respect to V = W + s A B, including flow through the norms."""
    return _dora_grads(g_y, cache, state)[2]


def dora_backward(g_y: np.ndarray, cache: _Cache, state: AdapterState) -> GradBundle:
    _require(state, Kind.DORA)
    _check_grad(g_y, cache, state)
    f = state.factors
    s = f.scaling
    gk, d_mags, d_v = _dora_grads(g_y, cache, state)
    d_a = s * (d_v @ f.b.T)
    d_b = s * (f.a.T @ d_v)
    d_x = _input_grad(gk @ state.base.w.T, s * ((gk @ f.b.T) @ f.a.T), cache.mask)
    return GradBundle(d_a, d_b, d_x, d_mags=d_mags)


def dora_materialize(state: AdapterState) -> np.ndarray:
    _require(state, Kind.DORA)
    v, norms = _dora_direction(state)
    return v * (state.dora_params.mags / norms)


# -- dispatch -----------------------------------------------------------------

def merge(state: AdapterState) -> np.ndarray:
    """Dense effective weight: ``forward(x) == x @ merge(state)`` with dropout off."""
    if state.kind is Kind.LORA:
        f = state.factors
        return state.base.w + f.scaling * f.materialize()
    if state.kind is Kind.DORA:
        return dora_materialize(state)
    return map_materialize(state)


_FORWARD = {Kind.LORA: lora_forward, Kind.DORA: dora_forward, Kind.MAP: map_forward}
_BACKWARD = {Kind.LORA: lora_backward, Kind.DORA: dora_backward, Kind.MAP: map_backward}


def forward(x: np.ndarray, state: AdapterState, rng: Optional[Rng] = None):
    """Kind-dispatched forward; dropout is applied only when ``rng`` is given."""
    return _FORWARD[state.kind](x, state, rng)


def backward(g_y: np.ndarray, cache: _Cache, state: AdapterState) -> GradBundle:
    return _BACKWARD[state.kind](g_y, cache, state)


def _require(state: AdapterState, kind: Kind):
    if state.kind is not kind:
        raise ValueError(f"expected a {kind.value} adapter, got {state.kind.value}")
