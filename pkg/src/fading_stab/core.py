"""Domain types for a linear plant controlled across a block-fading AWGN channel.

All types are frozen dataclasses; numeric fields are stored as read-only
numpy arrays and validated on construction.  ``validate_problem`` re-runs
every check and collects the violations instead of stopping at the first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

__all__ = [
    "ValidationError",
    "DivisibilityError",
    "StochasticityError",
    "ReducibleChainError",
    "DegenerateChannelError",
    "DimensionMismatch",
    "ConvergenceError",
    "InfeasibleError",
    "Violation",
    "Plant",
    "Channel",
    "FadingProcess",
    "PowerPolicy",
    "Problem",
    "validate_problem",
    "problem_from_dict",
    "problem_to_dict",
    "policy_from_dict",
]

STOCHASTIC_TOL = 1e-12
POSITIVE_ENTRY_TOL = 1e-15


class ValidationError(ValueError):
    """Raised when a structural assumption on the problem data is violated.

    ``violations`` holds every problem found, not only the first one.
    """

    def __init__(self, violations: Sequence["Violation"] | str):
        if isinstance(violations, str):
            violations = [Violation(type(self), violations)]
        self.violations = list(violations)
        super().__init__("; ".join(v.message for v in self.violations))


class DivisibilityError(ValidationError):
    pass


class StochasticityError(ValidationError):
    pass


class ReducibleChainError(ValidationError):
    pass


class DegenerateChannelError(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class ConvergenceError(RuntimeError):
    """An iterative method ran out of budget; ``incumbent`` is the best result so far."""

    def __init__(self, message: str, incumbent: Any = None):
        super().__init__(message)
        self.incumbent = incumbent


class InfeasibleError(RuntimeError):
    pass


@dataclass(frozen=True)
class Violation:
    error: type
    message: str


def _frozen(values: Any, ndim: int = 1) -> np.ndarray:
    arr = np.array(values, dtype=float, ndmin=ndim)
    arr.setflags(write=False)
    return arr


def _raise_first(violations: list[Violation]) -> None:
    if violations:
        raise violations[0].error(violations)


def _finite(name: str, arr: np.ndarray) -> list[Violation]:
    if not np.all(np.isfinite(arr)):
        return [Violation(ValidationError, f"{name} contains NaN or infinite values")]
    return []


@dataclass(frozen=True)
class Plant:
    """Jordan-form plant described by its eigenvalue magnitudes.

    Parameters
    ----------
    eigenvalues : sequence of float
        Magnitudes ``|lambda_1| .. |lambda_l|``, each strictly greater than one.
    jordan_blocks : sequence of int, optional
        Jordan block sizes, summing to ``l``.  Defaults to a diagonal ``A``.
    init_mean, init_var : sequence of float, optional
        Per-component mean and variance of the initial state.  Defaults to
        zero mean and unit variance.
    """

    eigenvalues: np.ndarray
    jordan_blocks: tuple[int, ...] = ()
    init_mean: np.ndarray | None = None
    init_var: np.ndarray | None = None

    def __post_init__(self):
        lam = _frozen(self.eigenvalues)
        object.__setattr__(self, "eigenvalues", lam)
        l = lam.size
        blocks = tuple(int(b) for b in self.jordan_blocks) or (1,) * l
        object.__setattr__(self, "jordan_blocks", blocks)
        mean = np.zeros(l) if self.init_mean is None else self.init_mean
        var = np.ones(l) if self.init_var is None else self.init_var
        object.__setattr__(self, "init_mean", _frozen(mean))
        object.__setattr__(self, "init_var", _frozen(var))
        _raise_first(self.violations())

    def violations(self) -> list[Violation]:
        out = []
        lam = self.eigenvalues
        out += _finite("eigenvalues", lam)
        out += _finite("init_mean", self.init_mean)
        out += _finite("init_var", self.init_var)
        if lam.ndim != 1 or lam.size < 1:
            out.append(Violation(ValidationError, "plant needs at least one eigenvalue"))
            return out
        if np.any(lam <= 1.0):
            out.append(Violation(ValidationError, "every eigenvalue magnitude must exceed 1"))
        if any(b < 1 for b in self.jordan_blocks) or sum(self.jordan_blocks) != lam.size:
            out.append(Violation(DimensionMismatch,
                                 f"jordan blocks {self.jordan_blocks} do not partition l={lam.size}"))
        elif np.all(np.isfinite(lam)):
            start = 0
            for b in self.jordan_blocks:
                if np.ptp(lam[start:start + b]) > 0:
                    out.append(Violation(ValidationError,
                                         "eigenvalue magnitudes must be equal within a Jordan block"))
                start += b
        if self.init_mean.shape != lam.shape or self.init_var.shape != lam.shape:
            out.append(Violation(DimensionMismatch, "initial-state statistics must have length l"))
        elif np.any(self.init_var <= 0):
            out.append(Violation(ValidationError, "initial-state variances must be positive"))
        return out

    @property
    def dim(self) -> int:
        return int(self.eigenvalues.size)

    @property
    def log_magnitudes(self) -> np.ndarray:
        return np.log(self.eigenvalues)

    def matrix(self) -> np.ndarray:
        """Real Jordan-form ``A`` with positive eigenvalues."""
        A = np.diag(np.asarray(self.eigenvalues, dtype=float))
        start = 0
        for b in self.jordan_blocks:
            for i in range(start, start + b - 1):
                A[i, i + 1] = 1.0
            start += b
        return A

    def with_eigenvalues(self, eigenvalues) -> "Plant":
        return Plant(eigenvalues, self.jordan_blocks, self.init_mean, self.init_var)


@dataclass(frozen=True)
class Channel:
    """Block-fading AWGN channel ``Y = g X + W`` with ``W ~ N(0, noise_var)``.

    ``gains`` are amplitude gains; formulas use their squares.
    """

    gains: np.ndarray
    noise_var: float
    block_len: int

    def __post_init__(self):
        object.__setattr__(self, "gains", _frozen(self.gains))
        object.__setattr__(self, "noise_var", float(self.noise_var))
        bl = self.block_len
        if isinstance(bl, float) and bl.is_integer():
            bl = int(bl)
        object.__setattr__(self, "block_len", bl)
        _raise_first(self.violations())

    def violations(self) -> list[Violation]:
        out = _finite("gains", self.gains)
        g = self.gains
        if g.ndim != 1 or g.size < 1:
            out.append(Violation(ValidationError, "channel needs at least one gain"))
            return out
        if not math.isfinite(self.noise_var) or self.noise_var <= 0:
            out.append(Violation(ValidationError, "noise variance must be positive and finite"))
        if not isinstance(self.block_len, (int, np.integer)) or isinstance(self.block_len, bool) \
                or self.block_len <= 1:
            out.append(Violation(ValidationError, "block length must be an integer > 1"))
        if np.any(g < 0):
            out.append(Violation(ValidationError, "gains must be nonnegative"))
        if np.all(g == 0):
            out.append(Violation(DegenerateChannelError, "all channel gains are zero"))
        if np.unique(g).size != g.size:
            out.append(Violation(ValidationError, "channel gains must be distinct"))
        return out

    @property
    def num_states(self) -> int:
        return int(self.gains.size)

    @property
    def gains_sq(self) -> np.ndarray:
        return self.gains ** 2


@dataclass(frozen=True)
class FadingProcess:
    """Channel-state process across blocks: i.i.d. or a Markov chain.

    Build with :meth:`iid` or :meth:`markov`.  For the i.i.d. case
    ``transition_matrix`` is the rank-one matrix whose rows all equal the
    state distribution.
    """

    kind: str
    data: np.ndarray = field(repr=False)

    @classmethod
    def iid(cls, probabilities) -> "FadingProcess":
        return cls("iid", probabilities)

    @classmethod
    def markov(cls, transition) -> "FadingProcess":
        return cls("markov", transition)

    def __post_init__(self):
        if self.kind not in ("iid", "markov"):
            raise ValidationError(f"unknown fading kind {self.kind!r}")
        object.__setattr__(self, "data", _frozen(self.data, 1 if self.kind == "iid" else 2))
        _raise_first(self.violations())

    def violations(self) -> list[Violation]:
        out = _finite(self.kind, self.data)
        if out:
            return out
        d = self.data
        if self.kind == "iid":
            if d.ndim != 1 or d.size < 1:
                return [Violation(DimensionMismatch, "i.i.d. probabilities must be a nonempty vector")]
            if np.any(d < 0) or abs(d.sum() - 1.0) > STOCHASTIC_TOL:
                out.append(Violation(StochasticityError,
                                     "i.i.d. probabilities must be nonnegative and sum to 1"))
            return out
        if d.ndim != 2 or d.shape[0] != d.shape[1] or d.shape[0] < 1:
            return [Violation(DimensionMismatch, "transition matrix must be square")]
        if np.any(d < 0) or np.any(np.abs(d.sum(axis=1) - 1.0) > STOCHASTIC_TOL):
            out.append(Violation(StochasticityError,
                                 "transition matrix rows must be nonnegative and sum to 1"))
        ncomp, _ = connected_components(d > POSITIVE_ENTRY_TOL, directed=True, connection="strong")
        if ncomp > 1:
            out.append(Violation(ReducibleChainError,
                                 f"transition matrix is reducible ({ncomp} communicating classes)"))
        return out

    @property
    def num_states(self) -> int:
        return int(self.data.shape[0])

    @property
    def is_iid(self) -> bool:
        return self.kind == "iid"

    @property
    def transition_matrix(self) -> np.ndarray:
        if self.is_iid:
            return np.tile(self.data, (self.data.size, 1))
        return np.array(self.data)


@dataclass(frozen=True)
class PowerPolicy:
    """Transmit power per channel state, and per TDMA slot for vector plants.

    ``per_state[s]`` is the block-average power used in state ``s``.  When
    ``per_slot`` (shape ``m x l``) is given and ``per_state`` is omitted, the
    latter is the slot average.
    """

    per_state: np.ndarray | None = None
    per_slot: np.ndarray | None = None

    def __post_init__(self):
        if self.per_state is None and self.per_slot is None:
            raise ValidationError("a power policy needs per_state or per_slot powers")
        if self.per_slot is not None:
            slots = _frozen(self.per_slot, 2)
            object.__setattr__(self, "per_slot", slots)
            if self.per_state is None:
                object.__setattr__(self, "per_state", slots.mean(axis=1))
        object.__setattr__(self, "per_state", _frozen(self.per_state))
        _raise_first(self.violations())

    def violations(self) -> list[Violation]:
        out = _finite("per_state", self.per_state)
        if self.per_slot is not None:
            out += _finite("per_slot", self.per_slot)
            if self.per_slot.shape[0] != self.per_state.size:
                out.append(Violation(DimensionMismatch, "per_slot rows must match per_state"))
            elif np.any(self.per_slot < 0):
                out.append(Violation(ValidationError, "slot powers must be nonnegative"))
        if np.any(self.per_state < 0):
            out.append(Violation(ValidationError, "powers must be nonnegative"))
        return out

    @property
    def num_states(self) -> int:
        return int(self.per_state.size)

    def slot_powers(self, dim: int) -> np.ndarray:
        """Powers as an ``m x l`` array; scalar policies broadcast over slots."""
        if self.per_slot is not None:
            if self.per_slot.shape[1] != dim:
                raise DimensionMismatch(f"policy has {self.per_slot.shape[1]} slots, plant has {dim}")
            return np.array(self.per_slot)
        if dim != 1:
            raise DimensionMismatch("vector plants need per-slot powers")
        return np.array(self.per_state)[:, None]

    def scaled(self, factor: float) -> "PowerPolicy":
        if self.per_slot is not None:
            return PowerPolicy(per_slot=self.per_slot * factor)
        return PowerPolicy(self.per_state * factor)


@dataclass(frozen=True)
class Problem:
    plant: Plant
    channel: Channel
    fading: FadingProcess

    def __post_init__(self):
        _raise_first(self.violations())

    def violations(self) -> list[Violation]:
        out = []
        if self.channel.num_states != self.fading.num_states:
            out.append(Violation(DimensionMismatch,
                                 f"{self.channel.num_states} gains but "
                                 f"{self.fading.num_states} fading states"))
        if self.channel.block_len % self.plant.dim != 0:
            out.append(Violation(DivisibilityError,
                                 f"block length {self.channel.block_len} is not a multiple "
                                 f"of the plant dimension {self.plant.dim}"))
        return out

    @property
    def dim(self) -> int:
        return self.plant.dim

    @property
    def num_states(self) -> int:
        return self.channel.num_states

    def replace(self, **changes) -> "Problem":
        """Copy with ``plant``, ``channel`` or ``fading`` swapped out."""
        kw = dict(plant=self.plant, channel=self.channel, fading=self.fading)
        kw.update(changes)
        return Problem(**kw)


def validate_problem(p: Problem) -> Problem:
    """Return ``p`` unchanged if every invariant holds.

    Raises the error class of the first violation found; the exception's
    ``violations`` attribute lists all of them.
    """
    violations = (p.plant.violations() + p.channel.violations()
                  + p.fading.violations() + p.violations())
    _raise_first(violations)
    return p


def problem_from_dict(d: dict) -> Problem:
    """Build a :class:`Problem` from the JSON problem schema.

    Constructor errors (wrong structure, bad values) surface as
    :class:`ValidationError` subclasses.
    """
    try:
        pl, ch, fd = d["plant"], d["channel"], d["fading"]
        plant = Plant(pl["eigenvalues"], tuple(pl.get("jordan_blocks", ())),
                      pl.get("init_mean"), pl.get("init_var"))
        channel = Channel(ch["gains"], ch["noise_var"], ch["block_len"])
        if ("iid" in fd) == ("markov" in fd):
            raise ValidationError("fading must have exactly one of 'iid' or 'markov'")
        fading = FadingProcess.iid(fd["iid"]) if "iid" in fd else FadingProcess.markov(fd["markov"])
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed problem description: {exc!r}") from exc
    except ValueError as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"malformed problem description: {exc}") from exc
    return validate_problem(Problem(plant, channel, fading))


def problem_to_dict(p: Problem) -> dict:
    fd = p.fading
    return {
        "plant": {
            "eigenvalues": p.plant.eigenvalues.tolist(),
            "jordan_blocks": list(p.plant.jordan_blocks),
            "init_mean": p.plant.init_mean.tolist(),
            "init_var": p.plant.init_var.tolist(),
        },
        "channel": {
            "gains": p.channel.gains.tolist(),
            "noise_var": p.channel.noise_var,
            "block_len": int(p.channel.block_len),
        },
        "fading": {fd.kind: fd.data.tolist()},
    }


def policy_from_dict(d: dict) -> PowerPolicy:
    try:
        return PowerPolicy(d.get("per_state"), d.get("per_slot"))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"malformed power policy: {exc}") from exc
