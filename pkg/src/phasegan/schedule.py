"""Interleaved ORIGINAL/SEMANTIC training plans.

A plan is built from (n, s, y, l, base_lr): s chunks of y SEMANTIC epochs
are injected into n total epochs, leaving n - s*y ORIGINAL epochs split
across s+1 chunks with ORIGINAL bookends. SEMANTIC epochs run at
base_lr / l, ORIGINAL epochs at base_lr. The five published n=100, y=10
sequences are kept as an exact preset table; the even-split rule covers
everything else.
"""

from dataclasses import dataclass
from typing import Iterator

from .errors import ConfigError, ScheduleError

ORIGINAL = "ORIGINAL"
SEMANTIC = "SEMANTIC"

# ratio name -> exact epoch sequence, alternating O,S,O,...
PRESET_SEQUENCES = {
    "100:0": (100,),
    "90:10": (45, 10, 45),
    "80:20": (30, 10, 20, 10, 30),
    "70:30": (20, 10, 15, 10, 15, 10, 20),
    "60:40": (15, 10, 10, 10, 10, 10, 10, 10, 15),
}


@dataclass(frozen=True)
class ScheduleSpec:
    n: int
    s: int
    y: int
    l: float = 1.0
    base_lr: float = 0.002

    def __post_init__(self):
        if self.n <= 0 or self.y <= 0 or self.s < 0:
            raise ScheduleError(f"invalid schedule spec {self}")
        if self.s * self.y >= self.n:
            raise ScheduleError(
                f"semantic epochs s*y = {self.s * self.y} must stay below n = {self.n}"
            )
        if self.l < 1:
            raise ScheduleError(f"lr divisor must be >= 1, got {self.l}")
        if self.base_lr <= 0:
            raise ScheduleError(f"base learning rate must be positive, got {self.base_lr}")


@dataclass(frozen=True)
class Phase:
    kind: str
    epochs: int
    lr: float


@dataclass(frozen=True)
class PhasePlan:
    phases: tuple

    @property
    def total_epochs(self):
        return sum(p.epochs for p in self.phases)

    def epochs_of(self, kind):
        return sum(p.epochs for p in self.phases if p.kind == kind)


def ratio(spec: ScheduleSpec):
    """(original epochs, semantic epochs) = (n - s*y, s*y)."""
    return spec.n - spec.s * spec.y, spec.s * spec.y


def semantic_lr(spec: ScheduleSpec) -> float:
    """Learning rate for SEMANTIC phases: base_lr / l."""
    if spec.l <= 0:
        raise ScheduleError(f"lr divisor must be positive, got {spec.l}")
    return spec.base_lr / spec.l


def _plan_from_sequence(seq, base_lr, lr_sem):
    phases = []
    for i, epochs in enumerate(seq):
        if i % 2 == 0:
            phases.append(Phase(ORIGINAL, epochs, base_lr))
        else:
            phases.append(Phase(SEMANTIC, epochs, lr_sem))
    return PhasePlan(tuple(phases))


def preset_plan(name, base_lr=0.002, l=1.0) -> PhasePlan:
    """One of the five published n=100, y=10 sequences by ratio name."""
    if name not in PRESET_SEQUENCES:
        known = ", ".join(sorted(PRESET_SEQUENCES))
        raise ConfigError(f"unknown preset '{name}' (known: {known})")
    if l < 1:
        raise ScheduleError(f"lr divisor must be >= 1, got {l}")
    if base_lr <= 0:
        raise ScheduleError(f"base learning rate must be positive, got {base_lr}")
    return _plan_from_sequence(PRESET_SEQUENCES[name], base_lr, base_lr / l)


def build_plan(spec: ScheduleSpec) -> PhasePlan:
    """Interleave s SEMANTIC chunks of y epochs between s+1 ORIGINAL chunks.

    The preset table is consulted first so the published sequences are
    reproduced exactly; otherwise the n - s*y ORIGINAL epochs are split
    as evenly as possible with the remainder handed out symmetrically
    from the ends inward.
    """
    orig, sem = ratio(spec)
    lr_sem = semantic_lr(spec)
    if spec.n == 100 and spec.y == 10:
        name = f"{orig}:{sem}"
        if name in PRESET_SEQUENCES:
            return preset_plan(name, spec.base_lr, spec.l)
    if spec.s == 0:
        return PhasePlan((Phase(ORIGINAL, spec.n, spec.base_lr),))
    chunks = spec.s + 1
    if orig < chunks:
        raise ScheduleError(
            f"{orig} original epochs cannot fill {chunks} interleaved chunks"
        )
    sizes = [orig // chunks] * chunks
    # hand the remainder out from the ends inward: 0, k-1, 1, k-2, ...
    order = []
    lo, hi = 0, chunks - 1
    while lo <= hi:
        order.append(lo)
        if hi != lo:
            order.append(hi)
        lo, hi = lo + 1, hi - 1
    for pos in order[: orig % chunks]:
        sizes[pos] += 1
    seq = []
    for i, size in enumerate(sizes):
        seq.append(size)
        if i < spec.s:
            seq.append(spec.y)
    return _plan_from_sequence(seq, spec.base_lr, lr_sem)


def epoch_cursor(plan: PhasePlan) -> Iterator[tuple]:
    """Yield (epoch index, kind, lr) for every epoch, phases in order."""
    epoch = 0
    for phase in plan.phases:
        for _ in range(phase.epochs):
            yield epoch, phase.kind, phase.lr
            epoch += 1


def serialize_plan(plan: PhasePlan) -> str:
    return ",".join(f"{p.kind}:{p.epochs}:{p.lr!r}" for p in plan.phases)


def parse_plan(text: str) -> PhasePlan:
    phases = []
    for entry in text.split(","):
        try:
            kind, epochs, lr = entry.split(":")
            if kind not in (ORIGINAL, SEMANTIC):
                raise ValueError(kind)
            phases.append(Phase(kind, int(epochs), float(lr)))
        except ValueError as e:
            raise ConfigError(f"bad plan entry '{entry}'") from e
    return PhasePlan(tuple(phases))
