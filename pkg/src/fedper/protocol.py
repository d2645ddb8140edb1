"""Rolling test -> validation -> train session schedule and early stopping."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field


@dataclass(frozen=True)
class Assignment:
    train_sessions: frozenset = frozenset()
    val_session: int | None = None
    test_session: int | None = None

    def roles(self) -> list[tuple[str, int]]:
        out = [("train", s) for s in sorted(self.train_sessions)]
        if self.val_session is not None:
            out.append(("val", self.val_session))
        if self.test_session is not None:
            out.append(("test", self.test_session))
        return out


@dataclass(frozen=True)
class ProtocolStep:
    """One step of the schedule; a step either tests or trains, never both."""

    step_index: int
    kind: str  # "test" | "train"
    assignments: dict = field(default_factory=dict)  # client_id -> Assignment

    @property
    def clients(self) -> list[str]:
        return list(self.assignments)


def build_schedule(clients) -> list[ProtocolStep]:
    """Steps ``2j-1`` test session ``j``; steps ``2j`` train on sessions ``< j``
    and validate on ``j``. A client only takes part in the steps whose session
    it holds. A single-session client is tested once in step 1 and never
    adapted.
    """
    sessions = {c.client_id: sorted(c.session_indices) for c in clients}
    last = max((max(s) for s in sessions.values() if s), default=0)
    steps = []
    for j in range(1, max(last, 1) + 1):
        test, train = {}, {}
        for cid, have in sessions.items():
            if len(have) == 1 and j == 1:
                test[cid] = Assignment(test_session=have[0])
                continue
            if len(have) < 2 or j not in have:
                continue
            past = frozenset(s for s in have if s < j)
            if not past:
                continue
            test[cid] = Assignment(test_session=j)
            train[cid] = Assignment(train_sessions=past, val_session=j)
        if test:
            steps.append(ProtocolStep(2 * j - 1, "test", test))
        if train:
            steps.append(ProtocolStep(2 * j, "train", train))
    return steps


def schedule_rows(schedule) -> list[tuple[int, str, str, int]]:
    rows = []
    for step in schedule:
        for cid, a in step.assignments.items():
            rows.extend((step.step_index, cid, role, s) for role, s in a.roles())
    return rows


def schedule_csv(schedule) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "client", "role", "session"])
    w.writerows(schedule_rows(schedule))
    return buf.getvalue()


class LossHistory:
    """Append-only list of per-epoch losses."""

    def __init__(self, values=()):
        self._values = [float(v) for v in values]

    def append(self, value: float) -> None:
        self._values.append(float(value))

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def __getitem__(self, i):
        return self._values[i]

    @property
    def values(self) -> tuple[float, ...]:
        return tuple(self._values)


def early_stop(history, patience: int = 5) -> bool:
    """True when none of the last ``patience`` losses beats the earlier minimum."""
    if patience < 1:
        raise ValueError("patience must be >= 1")
    values = list(history)
    if len(values) <= patience:
        return False
    best_before = min(values[:-patience])
    return not any(v < best_before for v in values[-patience:])
