"""Sample filtering: per-sample labels over the 6*(N+1) output space.

Label layout: indices 0..5 are the six main expressions; expression ``e``
owns the subclass block ``6 + e*N .. 6 + e*N + N - 1``. All mapping between
indices and expressions goes through :func:`group_of` / :func:`group_members`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import BookkeepingError, LabelError, NumericError

NUM_EXPRESSIONS = 6


def num_labels(n_sub: int) -> int:
    return NUM_EXPRESSIONS * (n_sub + 1)


def group_of(label: int, n_sub: int) -> int:
    """Main expression owning ``label``."""
    label = int(label)
    if not 0 <= label < num_labels(n_sub):
        raise LabelError(f"label {label} outside [0, {num_labels(n_sub)}) for N={n_sub}")
    if label < NUM_EXPRESSIONS:
        return label
    return (label - NUM_EXPRESSIONS) // n_sub


def group_members(expression: int, n_sub: int) -> list[int]:
    """Main class first, then its subclass slots in order."""
    if not 0 <= expression < NUM_EXPRESSIONS:
        raise LabelError(f"expression {expression} outside [0, {NUM_EXPRESSIONS})")
    start = NUM_EXPRESSIONS + expression * n_sub
    return [expression] + list(range(start, start + n_sub))


def group_map(n_sub: int) -> np.ndarray:
    """Vector mapping every label index to its expression."""
    return np.array([group_of(i, n_sub) for i in range(num_labels(n_sub))], dtype=np.int64)


@dataclass
class LabelState:
    sample_id: str
    original_main: int
    current_label: int = -1
    relabel_history: list[tuple[int, int, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not 0 <= self.original_main < NUM_EXPRESSIONS:
            raise LabelError(f"{self.sample_id}: expression {self.original_main} outside 0..5")
        if self.current_label < 0:
            self.current_label = self.original_main

    @property
    def is_subclass(self) -> bool:
        return self.current_label >= NUM_EXPRESSIONS


@dataclass(frozen=True)
class RelabelEvent:
    epoch: int
    sample_id: str
    old: int
    new: int
    p_max: float
    p_gt: float


def _top_two(values: np.ndarray, indices: list[int]) -> tuple[int, int | None]:
    # stable sort on -p keeps the lowest index first among ties
    order = sorted(indices, key=lambda i: (-values[i], i))
    return order[0], (order[1] if len(order) > 1 else None)


def relabel(probs, state: LabelState, delta: float, n_sub: int) -> int:
    """New label for one sample given its predicted probabilities.

    Fires when the largest probability over every output exceeds the current
    label's probability by more than ``delta``; the replacement is the most
    likely label inside the annotated expression's group, or the runner-up
    when the most likely one is already the current label. With ``N = 0`` the
    group has no runner-up and the label stays put.
    """
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    if p.size != num_labels(n_sub):
        raise LabelError(f"expected {num_labels(n_sub)} probabilities, got {p.size}")
    if not np.all(np.isfinite(p)) or p.min() < 0.0 or abs(p.sum() - 1.0) > 1e-6:
        raise NumericError(f"{state.sample_id}: probabilities are not normalized (sum {p.sum():.9g})")
    cur = state.current_label
    if group_of(cur, n_sub) != state.original_main:
        raise LabelError(f"{state.sample_id}: label {cur} left expression {state.original_main}")
    if p.max() - p[cur] <= delta:
        return cur
    first, second = _top_two(p, group_members(state.original_main, n_sub))
    if first != cur:
        return first
    return cur if second is None else second


@dataclass
class FilterResult:
    states: dict[str, LabelState]
    count: int
    events: list[RelabelEvent]


def apply_filter_epoch(
    states: Mapping[str, LabelState] | Iterable[LabelState],
    probs: Mapping[str, np.ndarray],
    delta: float,
    epoch: int,
    start_epoch: int,
    n_sub: int,
) -> FilterResult:
    """Apply :func:`relabel` to every sample once ``epoch >= start_epoch``; states are updated in place."""
    if epoch < 1:
        raise ValueError("epoch counter starts at 1")
    if not isinstance(states, Mapping):
        states = {s.sample_id: s for s in states}
    states = dict(states)
    events: list[RelabelEvent] = []
    if epoch < start_epoch:
        return FilterResult(states, 0, events)
    missing = [sid for sid in states if sid not in probs]
    if missing:
        raise BookkeepingError(f"no probabilities for {len(missing)} sample(s), e.g. {missing[0]!r}")
    for sid, state in states.items():
        p = np.asarray(probs[sid], dtype=np.float64)
        new = relabel(p, state, delta, n_sub)
        if new != state.current_label:
            old = state.current_label
            events.append(RelabelEvent(epoch, sid, old, new, float(p.max()), float(p[old])))
            state.relabel_history.append((epoch, old, new))
            state.current_label = new
    return FilterResult(states, len(events), events)


def merge_predictions(logits, n_sub: int):
    """Argmax over all outputs (lowest index on ties), mapped to its expression.

    Accepts one logit vector or a ``[B, 6(N+1)]`` batch.
    """
    z = np.asarray(getattr(logits, "data", logits), dtype=np.float64)
    if z.shape[-1] != num_labels(n_sub):
        raise LabelError(f"expected {num_labels(n_sub)} logits, got {z.shape[-1]}")
    idx = np.argmax(z, axis=-1)
    mapped = group_map(n_sub)[idx]
    return int(mapped) if np.ndim(mapped) == 0 else mapped


class RelabelLog:
    """Append-only text log, one whitespace-separated line per relabel event."""

    HEADER = "# epoch sample_id old_label new_label p_max p_gt\n"

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.exists():
            self.path.write_text(self.HEADER)

    def append(self, events: Iterable[RelabelEvent]) -> None:
        with open(self.path, "a") as fh:
            for e in events:
                fh.write(f"{e.epoch} {e.sample_id} {e.old} {e.new} {e.p_max:.6f} {e.p_gt:.6f}\n")

    @staticmethod
    def read(path: str | Path) -> list[RelabelEvent]:
        events = []
        for line in Path(path).read_text().splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            epoch, sid, old, new, pmax, pgt = line.split()
            events.append(RelabelEvent(int(epoch), sid, int(old), int(new), float(pmax), float(pgt)))
        return events
