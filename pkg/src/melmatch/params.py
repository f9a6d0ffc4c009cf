"""Tied error-model parameters: edit, modulation, tempo-change, pitch and rhythm tables.

Every table is a 2-D array ``(n_contexts, n_bins)``; row ``c`` is the
distribution shared by all states assigned to context ``c``. Bin layouts:

* edit:          ``[Same, Join^2..Join^L, Elab^2..Elab^M]``
* modulation:    delta K in ``-5..+6``  (index = delta + 5)
* tempo_change:  delta S in ``-4..+4``  (index = delta + 4)
* pitch_error:   delta P in ``-5..+6``  (index = delta + 5)
* rhythm_error:  delta R in ``-(q-1)..+(q-1)`` (index = delta + q - 1)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

K_VALUES = np.arange(-5, 7)
S_VALUES = np.arange(-4, 5)
N_K = 12
N_S = 9
K_OFFSET = 5
S_OFFSET = 4

COMPONENTS = ("edit", "modulation", "tempo_change", "pitch_error", "rhythm_error")
VARIANTS = ("full", "restricted", "local", "cumulative")


def wrap_pitch(delta):
    """Map a pitch-class difference into -5..+6."""
    return (np.asarray(delta) + 5) % 12 - 5


def discrete_normal(values, sigma: float, mean: float = 0.0) -> np.ndarray:
    """Normal density sampled at ``values`` and normalized to sum 1."""
    v = np.asarray(values, dtype=float)
    if sigma <= 0:
        out = (v == mean).astype(float)
    else:
        out = np.exp(-((v - mean) ** 2) / (2.0 * sigma**2))
    return out / out.sum()


def impulse(n_bins: int, zero_index: int) -> np.ndarray:
    out = np.zeros(n_bins)
    out[zero_index] = 1.0
    return out


@dataclass(frozen=True)
class ContextMap:
    """Assigns each edit state of a target model to a context per component.

    The default puts every state in context 0 for all five components.
    Subclasses override :meth:`assign` for richer tying schemes.
    """

    def assign(self, model) -> dict[str, np.ndarray]:
        zeros = np.zeros(model.n_edit, dtype=np.int64)
        return {c: zeros for c in COMPONENTS}


@dataclass(frozen=True, eq=False)
class ErrorModelParams:
    edit: np.ndarray
    modulation: np.ndarray
    tempo_change: np.ndarray
    pitch_error: np.ndarray
    rhythm_error: np.ndarray
    init_tempo_sigma: float = 1.5
    L: int = 2
    M: int = 2
    q: int = 29
    context_map: ContextMap = field(default_factory=ContextMap)

    def __post_init__(self):
        for name in COMPONENTS:
            arr = np.array(getattr(self, name), dtype=float)
            if arr.ndim == 1:
                arr = arr[None, :]
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        self.validate()

    # -- shape helpers
    @property
    def n_edit_classes(self) -> int:
        return 1 + (self.L - 1) + (self.M - 1)

    def expected_bins(self) -> dict[str, int]:
        return {
            "edit": self.n_edit_classes,
            "modulation": N_K,
            "tempo_change": N_S,
            "pitch_error": 12,
            "rhythm_error": 2 * self.q - 1,
        }

    @property
    def r_offset(self) -> int:
        return self.q - 1

    def validate(self, tol: float = 1e-9) -> None:
        if self.L < 1 or self.M < 1:
            raise ValueError("L and M must be >= 1")
        if self.q < 2:
            raise ValueError("q must be >= 2")
        if not self.init_tempo_sigma > 0:
            raise ValueError("init_tempo_sigma must be positive")
        for name, n in self.expected_bins().items():
            arr = getattr(self, name)
            if arr.shape[1] != n:
                raise ValueError(f"{name}: expected {n} bins, got {arr.shape[1]}")
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: probabilities must be finite and >= 0")
            sums = arr.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > tol):
                raise ValueError(f"{name}: rows must sum to 1 (got {sums})")

    def replace(self, **changes) -> "ErrorModelParams":
        return replace(self, **changes)

    def tables(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in COMPONENTS}

    # -- fixed initial distributions
    def initial_tempo(self) -> np.ndarray:
        return discrete_normal(S_VALUES, self.init_tempo_sigma)

    @staticmethod
    def initial_transposition() -> np.ndarray:
        return np.full(N_K, 1.0 / N_K)

    # -- derived per-context transition tables
    def modulation_matrices(self) -> np.ndarray:
        """``MK[c, k, k2]`` = P^K_c(wrap(K[k2] - K[k]))."""
        diff = wrap_pitch(K_VALUES[None, :] - K_VALUES[:, None]) + K_OFFSET
        return self.modulation[:, diff]

    def tempo_matrices(self) -> np.ndarray:
        """``MS[c, s, s2]`` = P^S_c(S[s2] - S[s]) renormalized over in-range targets."""
        diff = S_VALUES[None, :] - S_VALUES[:, None]
        valid = np.abs(diff) <= 4
        idx = np.clip(diff + S_OFFSET, 0, N_S - 1)
        raw = np.where(valid[None], self.tempo_change[:, idx], 0.0)
        z = raw.sum(axis=2, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(z > 0, raw / z, 0.0)

    def tempo_ghost_weights(self) -> np.ndarray:
        """``G[c, s, d]`` = P^S_c(d) / Z_{c,s} for tempo changes that leave the range.

        Used by EM to account for renormalized (truncated) rows.
        """
        deltas = np.arange(-4, 5)
        dest = S_VALUES[:, None] + deltas[None, :]
        invalid = (dest < -4) | (dest > 4)
        diff = S_VALUES[None, :] - S_VALUES[:, None]
        idx = np.clip(diff + S_OFFSET, 0, N_S - 1)
        z = np.where(np.abs(diff) <= 4, self.tempo_change[:, idx], 0.0).sum(axis=2)
        with np.errstate(invalid="ignore", divide="ignore"):
            g = np.where(invalid[None], self.tempo_change[:, None, :], 0.0) / z[:, :, None]
        return np.nan_to_num(g)

    # -- serialization
    def to_json_dict(self) -> dict:
        out = {}
        for name in COMPONENTS:
            arr = getattr(self, name)
            out[name] = arr[0].tolist() if arr.shape[0] == 1 else arr.tolist()
        out.update(init_tempo_sigma=self.init_tempo_sigma, L=self.L, M=self.M, q=self.q)
        return out

    @classmethod
    def from_json_dict(cls, d: dict) -> "ErrorModelParams":
        missing = [k for k in COMPONENTS if k not in d]
        if missing:
            raise ValueError(f"parameter file missing keys: {missing}")
        tables = {}
        for name in COMPONENTS:
            arr = np.asarray(d[name], dtype=float)
            arr = arr[None, :] if arr.ndim == 1 else arr
            # file values are validated loosely then renormalized exactly
            sums = arr.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > 1e-6):
                raise ValueError(f"{name}: rows must sum to 1 +/- 1e-6 (got {sums})")
            tables[name] = arr / sums[:, None]
        return cls(
            **tables,
            init_tempo_sigma=float(d.get("init_tempo_sigma", 1.5)),
            L=int(d.get("L", 2)),
            M=int(d.get("M", 2)),
            q=int(d.get("q", 29)),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "ErrorModelParams":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def edit_distribution(p_same: float, p_join, p_elab) -> np.ndarray:
    p = np.concatenate([[p_same], np.atleast_1d(p_join), np.atleast_1d(p_elab)]).astype(float)
    return p / p.sum()


def default_params(
    L: int = 2,
    M: int = 2,
    q: int = 29,
    sigma: float = 1.0,
    init_tempo_sigma: float = 1.5,
    edit=None,
) -> ErrorModelParams:
    """Starting parameters: discrete normals centered on "no error"/"no change"."""
    if edit is None:
        if (L, M) == (2, 2):
            edit = [0.95, 0.03, 0.02]
        else:
            rest = (L - 1) + (M - 1)
            edit = [0.95] + [0.05 / rest] * rest if rest else [1.0]
    return ErrorModelParams(
        edit=np.asarray(edit, dtype=float),
        modulation=discrete_normal(K_VALUES, sigma),
        tempo_change=discrete_normal(S_VALUES, sigma),
        pitch_error=discrete_normal(K_VALUES, sigma),
        rhythm_error=discrete_normal(np.arange(-(q - 1), q), sigma),
        init_tempo_sigma=init_tempo_sigma,
        L=L,
        M=M,
        q=q,
    )


def _restrict(table: np.ndarray, values: np.ndarray, max_abs: int) -> np.ndarray:
    keep = np.abs(values) <= max_abs
    out = np.where(keep[None, :], table, 0.0)
    return out / out.sum(axis=1, keepdims=True)


def apply_variant(params: ErrorModelParams, variant: str) -> ErrorModelParams:
    """Transform a parameter template into one of the model configurations.

    Bins set to zero here stay zero through training (EM never revives them).

    * ``full``: unchanged.
    * ``restricted``: modulation limited to +/-1 semitone, tempo change to
      +/-2 bins (about +/-40%).
    * ``local``: modulation and tempo change pinned to "no change".
    * ``cumulative``: pitch and rhythm error pinned to "no error".
    """
    if variant == "full":
        return params
    if variant == "restricted":
        return params.replace(
            modulation=_restrict(params.modulation, K_VALUES, 1),
            tempo_change=_restrict(params.tempo_change, S_VALUES, 2),
        )
    if variant == "local":
        nk, ns = params.modulation.shape[0], params.tempo_change.shape[0]
        return params.replace(
            modulation=np.tile(impulse(N_K, K_OFFSET), (nk, 1)),
            tempo_change=np.tile(impulse(N_S, S_OFFSET), (ns, 1)),
        )
    if variant == "cumulative":
        nr = params.rhythm_error.shape[0]
        return params.replace(
            pitch_error=np.tile(impulse(12, K_OFFSET), (params.pitch_error.shape[0], 1)),
            rhythm_error=np.tile(impulse(2 * params.q - 1, params.q - 1), (nr, 1)),
        )
    raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
