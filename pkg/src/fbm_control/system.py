"""System specification, TOML presets, assumption validators and control policies."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import numpy as np
import sympy as sp

try:  # pragma: no cover - depends on interpreter version
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .expr import ExpressionError, Field, time_function, zeta_policy
from .fbm import config_hash
from .lie import MatrixFamily, ScalarFunction, verify_nilpotent


class ConfigError(ValueError):
    """Malformed configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class AssumptionError(ValueError):
    def __init__(self, check: str, message: str):
        super().__init__(f"{check}: {message}")
        self.check = check


@dataclass
class SystemSpec:
    name: str
    n: int
    d: int
    k1: int
    k2: int
    horizon: float
    hurst: float
    x0: np.ndarray
    b: Field
    sigma: list[Field]
    h: Field
    D: Callable[[float], np.ndarray]
    f: Field
    phi: Field
    A: MatrixFamily
    C: MatrixFamily
    params: dict = field(default_factory=dict)
    control: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def m1(self) -> int:
        return self.A.count

    @property
    def m2(self) -> int:
        return self.C.count

    def config_hash(self) -> str:
        return config_hash(self.raw)

    def D_inv(self, t: float) -> np.ndarray:
        return np.linalg.inv(self.D(t))

    def sigma_value(self, t, x, u) -> np.ndarray:
        """``(S, n, k1)`` with column ``r`` the r-th noise field."""
        return np.stack([s.value(t, x, u) for s in self.sigma], axis=-1)


def _require(table: dict, key: str, prefix: str = ""):
    if key not in table:
        raise ConfigError(prefix + key, "missing required entry")
    return table[key]


def _family(table: dict | None, size: int, key: str, params: dict) -> MatrixFamily:
    if not table or not table.get("generators"):
        return MatrixFamily.zero(size)
    gens = table["generators"]
    nil = table.get("nilpotency")
    if not isinstance(nil, int) or nil < 1:
        raise ConfigError(f"{key}.nilpotency", "must be a positive integer")
    positions: list[tuple[int, int]] = []
    parsed = []
    for j, mat in enumerate(gens):
        if len(mat) != size or any(len(row) != size for row in mat):
            raise ConfigError(f"{key}.generators[{j}]", f"must be a {size}x{size} matrix")
        entries = {}
        for a, row in enumerate(mat):
            for b, text in enumerate(row):
                k = f"{key}.generators[{j}][{a}][{b}]"
                try:
                    expr, value, deriv, const = time_function(text, k, params)
                except ExpressionError as exc:
                    raise ConfigError(exc.key, exc.detail) from None
                if expr != 0:
                    entries[(a, b)] = ScalarFunction(value, deriv, str(expr), const)
                    if (a, b) not in positions:
                        positions.append((a, b))
        parsed.append(entries)
    basis = np.zeros((max(len(positions), 1), size, size))
    for k, (a, b) in enumerate(positions):
        basis[k, a, b] = 1.0
    coeffs = [[entries.get(pos) for pos in positions] or [None] for entries in parsed]
    return MatrixFamily(basis, coeffs, nil)


def _fields(texts, key, n, d, params, count=None) -> Field:
    if not isinstance(texts, list):
        raise ConfigError(key, "expected a list of expressions")
    if count is not None and len(texts) != count:
        raise ConfigError(key, f"expected {count} expressions, got {len(texts)}")
    try:
        return Field.from_strings(texts, key, n, d, params)
    except ExpressionError as exc:
        raise ConfigError(exc.key, exc.detail) from None


def build_system(cfg: dict) -> SystemSpec:
    cfg = copy.deepcopy(cfg)
    dims = _require(cfg, "dimensions")
    n = _require(dims, "state", "dimensions.")
    d = _require(dims, "control", "dimensions.")
    k1 = _require(dims, "noise", "dimensions.")
    k2 = _require(dims, "observation", "dimensions.")
    for key, val in (("state", n), ("control", d), ("noise", k1), ("observation", k2)):
        if not isinstance(val, int) or val < 1:
            raise ConfigError(f"dimensions.{key}", "must be a positive integer")
    model = _require(cfg, "model")
    params = {k: float(v) for k, v in cfg.get("params", {}).items()}
    horizon = float(model.get("horizon", 1.0))
    if horizon <= 0:
        raise ConfigError("model.horizon", "must be positive")
    hurst = float(_require(model, "hurst", "model."))
    if not (1 / 3 < hurst < 1) or hurst == 0.5:
        raise ConfigError("model.hurst", "must lie in (1/3, 1) and differ from 1/2")
    x0 = np.asarray(model.get("x0", [0.0] * n), dtype=float)
    if x0.shape != (n,):
        raise ConfigError("model.x0", f"expected {n} entries")
    coef = _require(cfg, "coefficients")
    b = _fields(_require(coef, "b", "coefficients."), "coefficients.b", n, d, params, n)
    sig = _require(coef, "sigma", "coefficients.")
    if not isinstance(sig, list) or len(sig) != k1:
        raise ConfigError("coefficients.sigma", f"expected {k1} noise columns")
    sigma = [_fields(col, f"coefficients.sigma[{r}]", n, d, params, n) for r, col in enumerate(sig)]
    h = _fields(_require(coef, "h", "coefficients."), "coefficients.h", n, d, params, k2)
    phi = _fields([_require(coef, "Phi", "coefficients.")], "coefficients.Phi", n, d, params)
    if phi.depends_on_u:
        raise ConfigError("coefficients.Phi", "terminal cost may not depend on the control")
    f = _fields([_require(coef, "f", "coefficients.")], "coefficients.f", n, d, params)
    d_texts = coef.get("D", [["1" if i == j else "0" for j in range(k2)] for i in range(k2)])
    if len(d_texts) != k2 or any(len(row) != k2 for row in d_texts):
        raise ConfigError("coefficients.D", f"must be a {k2}x{k2} matrix")
    d_fns = []
    for i, row in enumerate(d_texts):
        for j, text in enumerate(row):
            try:
                d_fns.append(time_function(text, f"coefficients.D[{i}][{j}]", params)[1])
            except ExpressionError as exc:
                raise ConfigError(exc.key, exc.detail) from None

    def d_matrix(t, fns=tuple(d_fns)):
        return np.array([float(fn(t)) for fn in fns]).reshape(k2, k2)

    A = _family(cfg.get("A"), n, "A", params)
    C = _family(cfg.get("C"), k2, "C", params)
    control = cfg.get("control", {})
    return SystemSpec(cfg.get("name", "system"), n, d, k1, k2, horizon, hurst, x0, b, sigma, h,
                      d_matrix, f, phi, A, C, params, control, cfg.get("simulation", {}), cfg)


def preset_names() -> list[str]:
    folder = resources.files("fbm_control") / "presets"
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".toml"))


def load_config(source: str | Path) -> dict:
    """Read a TOML file, or a bundled preset when ``source`` names one."""
    path = Path(source)
    if path.suffix == ".toml" and path.exists():
        text = path.read_text()
    elif str(source) in preset_names():
        text = (resources.files("fbm_control") / "presets" / f"{source}.toml").read_text()
    else:
        raise ConfigError("config", f"no such file or preset '{source}'")
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"invalid TOML: {exc}") from None


def load_system(source: str | Path, overrides: dict | None = None) -> SystemSpec:
    cfg = load_config(source)
    for dotted, value in (overrides or {}).items():
        node = cfg
        *head, last = dotted.split(".")
        for part in head:
            node = node.setdefault(part, {})
        node[last] = value
    return build_system(cfg)


def check_assumptions(spec: SystemSpec, samples: int = 64, seed: int = 0) -> dict:
    """Sampled checks of the standing assumptions; raises :class:`AssumptionError`.

    Covers invertibility of ``D``, nilpotency of both generator families and
    finiteness of the coefficient derivatives on random arguments.
    """
    rng = np.random.default_rng(seed)
    times = rng.uniform(0, spec.horizon, samples)
    dets = np.array([np.linalg.det(spec.D(t)) for t in times])
    if np.min(np.abs(dets)) < 1e-10:
        raise AssumptionError("D-invertible", f"min |det D| = {np.min(np.abs(dets)):.3g}")
    inv_norm = max(np.linalg.norm(spec.D_inv(t), 2) for t in times)
    report = {"D_min_abs_det": float(np.min(np.abs(dets))), "D_inv_norm": float(inv_norm)}
    for label, fam in (("A", spec.A), ("C", spec.C)):
        if fam.count:
            nil = verify_nilpotent(fam, horizon=spec.horizon, seed=seed)
            if not nil.ok:
                raise AssumptionError(f"{label}-nilpotent", f"defect {nil.defect:.3g}")
            report[f"{label}_nilpotency_defect"] = nil.defect
    x = rng.normal(size=(samples, spec.n)) * 3
    u = rng.normal(size=(samples, spec.d)) * 3
    t0 = float(times[0])
    for label, fld in [("b", spec.b), ("h", spec.h), ("f", spec.f), ("Phi", spec.phi)] + \
            [(f"sigma[{r}]", s) for r, s in enumerate(spec.sigma)]:
        for part in (fld.value, fld.jac, fld.hess):
            vals = part(t0, x, u)
            if not np.all(np.isfinite(vals)):
                raise AssumptionError("finite-coefficients", f"{label} is not finite")
    hv = spec.h.value(t0, x * 10, u)
    report["h_sampled_max"] = float(np.abs(hv).max())
    return report


# --- control policies -----------------------------------------------------------


class Policy:
    """Control law evaluated on the simulation grid.

    ``__call__(i, t, zeta_hist)`` sees only the observation history
    ``zeta_hist`` of shape ``(S, i + 1, k2)`` and returns ``(S, d)``.
    """

    d: int

    def __call__(self, i: int, t: float, zeta_hist: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class ConstantPolicy(Policy):
    def __init__(self, value):
        self.value = np.atleast_1d(np.asarray(value, dtype=float))
        self.d = self.value.size

    def __call__(self, i, t, zeta_hist):
        return np.broadcast_to(self.value, (zeta_hist.shape[0], self.d)).copy()


class OpenLoopPolicy(Policy):
    """Deterministic control given on a time grid, linearly interpolated."""

    def __init__(self, times, values):
        self.times = np.asarray(times, dtype=float)
        self.values = np.asarray(values, dtype=float).reshape(len(self.times), -1)
        self.d = self.values.shape[1]

    def at(self, t):
        return np.array([np.interp(t, self.times, self.values[:, j]) for j in range(self.d)])

    def __call__(self, i, t, zeta_hist):
        return np.broadcast_to(self.at(t), (zeta_hist.shape[0], self.d)).copy()


class ObservationPolicy(Policy):
    """``u_t = g(t, zeta_t)``."""

    def __init__(self, law, d):
        self.law = law
        self.d = d

    def __call__(self, i, t, zeta_hist):
        return self.law(t, zeta_hist[:, -1])


class ShiftedPolicy(Policy):
    def __init__(self, base: Policy, shift):
        self.base = base
        self.shift = np.atleast_1d(np.asarray(shift, dtype=float))
        self.d = base.d

    def __call__(self, i, t, zeta_hist):
        return self.base(i, t, zeta_hist) + self.shift


class SpikedPolicy(Policy):
    """Equal to ``value`` on ``[start, start + width)`` and to ``base`` elsewhere."""

    def __init__(self, base: Policy, value, start: float, width: float):
        self.base = base
        self.value = np.atleast_1d(np.asarray(value, dtype=float))
        self.start = start
        self.width = width
        self.d = base.d

    def active(self, t: float) -> bool:
        return self.start - 1e-12 <= t < self.start + self.width - 1e-12

    def __call__(self, i, t, zeta_hist):
        if self.active(t):
            return np.broadcast_to(self.value, (zeta_hist.shape[0], self.d)).copy()
        return self.base(i, t, zeta_hist)


def spike_control(base: Policy, value, start: float, width: float) -> SpikedPolicy:
    if width < 0 or start < 0:
        raise ValueError(f"spike [{start}, {start + width}] is not a valid interval")
    return SpikedPolicy(base, value, start, width)


def policy_from_expression(spec: SystemSpec, text, key: str = "control.expression") -> Policy:
    try:
        return ObservationPolicy(zeta_policy(text, key, spec.d, spec.k2, spec.params), spec.d)
    except ExpressionError as exc:
        raise ConfigError(exc.key, exc.detail) from None


def dump_json(obj: Any) -> str:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if isinstance(o, sp.Basic):
            return str(o)
        raise TypeError(type(o).__name__)

    return json.dumps(obj, indent=2, sort_keys=True, default=default)
