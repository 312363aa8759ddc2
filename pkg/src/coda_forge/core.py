"""Factored state/action specs, transitions and datasets."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

TAGS = ("real", "coda", "mocoda", "dyna", "rand")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class FactorSpec:
    """Ordered state and action factors, each spanning `dim` contiguous dims.

    `bounds` lists one (lo, hi) pair per state dim followed by one per action dim.
    """

    state_factors: tuple[tuple[str, int], ...]
    action_factors: tuple[tuple[str, int], ...]
    bounds: tuple[tuple[float, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "state_factors", tuple((str(n), int(d)) for n, d in self.state_factors))
        object.__setattr__(self, "action_factors", tuple((str(n), int(d)) for n, d in self.action_factors))
        object.__setattr__(self, "bounds", tuple((float(lo), float(hi)) for lo, hi in self.bounds))
        if self.state_dim < 1:
            raise ValueError("need at least one state dim")
        if any(d < 1 for _, d in self.state_factors + self.action_factors):
            raise ValueError("factor dims must be positive")
        names = [n for n, _ in self.state_factors + self.action_factors]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate factor names: {names}")
        if len(self.bounds) != self.state_dim + self.action_dim:
            raise ValueError(
                f"expected {self.state_dim + self.action_dim} bounds, got {len(self.bounds)}")
        for lo, hi in self.bounds:
            # lo == hi is tolerated so degenerate (constant) dims can be expressed
            if not (lo <= hi):
                raise ValueError(f"bad bound ({lo}, {hi})")

    @property
    def n_state_factors(self) -> int:
        return len(self.state_factors)

    @property
    def n_action_factors(self) -> int:
        return len(self.action_factors)

    @property
    def n_factors(self) -> int:
        return self.n_state_factors + self.n_action_factors

    @property
    def state_dim(self) -> int:
        return sum(d for _, d in self.state_factors)

    @property
    def action_dim(self) -> int:
        return sum(d for _, d in self.action_factors)

    @property
    def sa_dim(self) -> int:
        return self.state_dim + self.action_dim

    @property
    def row_width(self) -> int:
        return 2 * self.state_dim + self.action_dim + 1

    @property
    def state_bounds(self) -> np.ndarray:
        return np.array(self.bounds[: self.state_dim])

    @property
    def action_bounds(self) -> np.ndarray:
        return np.array(self.bounds[self.state_dim:]).reshape(-1, 2)

    def factor_dims(self, factor: int) -> list[int]:
        """Dims of factor `factor` inside the concatenated (s, a) vector."""
        sizes = [d for _, d in self.state_factors + self.action_factors]
        start = sum(sizes[:factor])
        return list(range(start, start + sizes[factor]))

    def factor_of_dim(self) -> np.ndarray:
        """Map each (s, a) dim to its factor index."""
        out = []
        for f, (_, d) in enumerate(self.state_factors + self.action_factors):
            out.extend([f] * d)
        return np.array(out, dtype=int)

    def to_json(self) -> str:
        return json.dumps({
            "state_factors": [list(f) for f in self.state_factors],
            "action_factors": [list(f) for f in self.action_factors],
            "bounds": [list(b) for b in self.bounds],
        })

    @classmethod
    def from_json(cls, text: str) -> "FactorSpec":
        d = json.loads(text)
        return cls(tuple(map(tuple, d["state_factors"])), tuple(map(tuple, d["action_factors"])),
                   tuple(map(tuple, d["bounds"])))

    @classmethod
    def scalar(cls, state_names: Sequence[str], action_names: Sequence[str],
               bounds: Sequence[tuple[float, float]]) -> "FactorSpec":
        """Spec where every factor is one-dimensional."""
        return cls(tuple((n, 1) for n in state_names), tuple((n, 1) for n in action_names),
                   tuple(bounds))


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    r: float = math.nan

    def replace(self, **kw) -> "Transition":
        d = dict(s=self.s, a=self.a, s_next=self.s_next, r=self.r)
        d.update(kw)
        return Transition(**d)


@dataclass(frozen=True)
class Dataset:
    """Immutable column store of transitions with one provenance tag per row."""

    spec: FactorSpec
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    r: np.ndarray
    tags: tuple[str, ...] = field(default=())

    def __post_init__(self):
        n = len(self.r)
        s = np.array(self.s, dtype=float).reshape(n, self.spec.state_dim)
        a = np.array(self.a, dtype=float).reshape(n, self.spec.action_dim)
        sp = np.array(self.s_next, dtype=float).reshape(n, self.spec.state_dim)
        r = np.array(self.r, dtype=float).reshape(n)
        tags = tuple(self.tags) if self.tags else ("real",) * n
        if len(tags) != n:
            raise DatasetError(f"{len(tags)} tags for {n} transitions")
        bad = set(tags) - set(TAGS)
        if bad:
            raise DatasetError(f"unknown tags {sorted(bad)}")
        for arr in (s, a, sp, r):
            arr.flags.writeable = False
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "s_next", sp)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "tags", tags)

    def __len__(self) -> int:
        return len(self.r)

    def __getitem__(self, i: int) -> Transition:
        return Transition(self.s[i], self.a[i], self.s_next[i], float(self.r[i]))

    def __iter__(self) -> Iterator[Transition]:
        for i in range(len(self)):
            yield self[i]

    @property
    def sa(self) -> np.ndarray:
        return np.concatenate([self.s, self.a], axis=1)

    @property
    def tag_array(self) -> np.ndarray:
        return np.array(self.tags)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.spec, self.s[idx], self.a[idx], self.s_next[idx], self.r[idx],
                       tuple(self.tags[i] for i in idx))

    def with_rewards(self, r: np.ndarray) -> "Dataset":
        return Dataset(self.spec, self.s, self.a, self.s_next, r, self.tags)

    def tag_counts(self) -> dict[str, int]:
        out = {t: 0 for t in TAGS}
        for t in self.tags:
            out[t] += 1
        return {t: c for t, c in out.items() if c}

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.spec == other.spec and self.tags == other.tags
                and all(np.array_equal(x, y) for x, y in
                        ((self.s, other.s), (self.a, other.a), (self.s_next, other.s_next),
                         (self.r, other.r))))

    __hash__ = None


def from_arrays(spec: FactorSpec, s, a, s_next, r=None, tag: str = "real") -> Dataset:
    n = len(s)
    r = np.full(n, np.nan) if r is None else r
    return Dataset(spec, s, a, s_next, r, (tag,) * n)


def concat(parts: Sequence[Dataset]) -> Dataset:
    spec = parts[0].spec
    if any(p.spec != spec for p in parts):
        raise DatasetError("cannot concatenate datasets with different specs")
    return Dataset(spec, np.concatenate([p.s for p in parts]), np.concatenate([p.a for p in parts]),
                   np.concatenate([p.s_next for p in parts]), np.concatenate([p.r for p in parts]),
                   tuple(t for p in parts for t in p.tags))


def make_dataset(spec: FactorSpec, rows: Iterable[Sequence[float]]) -> Dataset:
    """Build a real-tagged dataset from flat rows ``s + a + s_next + [r]``."""
    width = spec.row_width
    out = []
    for i, row in enumerate(rows):
        row = np.asarray(row, dtype=float).ravel()
        if row.shape[0] != width:
            raise DatasetError(f"row {i}: expected {width} entries, got {row.shape[0]}")
        if not np.all(np.isfinite(row)):
            raise DatasetError(f"row {i}: non-finite entry")
        out.append(row)
    arr = np.array(out).reshape(len(out), width)
    n, m = spec.state_dim, spec.action_dim
    return Dataset(spec, arr[:, :n], arr[:, n:n + m], arr[:, n + m:2 * n + m], arr[:, -1])


def split_train_val(ds: Dataset, val_count: int, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 < val_count < len(ds):
        raise DatasetError(f"val_count must be in (0, {len(ds)}), got {val_count}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    val = np.sort(perm[:val_count])
    train = np.sort(perm[val_count:])
    return ds.subset(train), ds.subset(val)


# -- serialization -----------------------------------------------------------

def _fmt(x: float) -> str:
    if not math.isfinite(x):
        raise DatasetError(f"cannot serialize non-finite value {x}")
    return format(float(x), ".17g")


def _vec(v) -> str:
    return "[" + ", ".join(_fmt(x) for x in v) + "]"


def dumps_jsonl(ds: Dataset) -> str:
    lines = []
    for i in range(len(ds)):
        lines.append('{"s": %s, "a": %s, "s_next": %s, "r": %s, "tag": "%s"}' % (
            _vec(ds.s[i]), _vec(ds.a[i]), _vec(ds.s_next[i]), _fmt(ds.r[i]), ds.tags[i]))
    return "\n".join(lines) + ("\n" if lines else "")


def loads_jsonl(spec: FactorSpec, text: str) -> Dataset:
    s, a, sp, r, tags = [], [], [], [], []
    for lineno, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        d = json.loads(line)
        if len(d["s"]) != spec.state_dim or len(d["a"]) != spec.action_dim \
                or len(d["s_next"]) != spec.state_dim:
            raise DatasetError(f"line {lineno}: dimension mismatch")
        s.append(d["s"]), a.append(d["a"]), sp.append(d["s_next"]), r.append(d["r"])
        tags.append(d.get("tag", "real"))
    return Dataset(spec, np.array(s, dtype=float), np.array(a, dtype=float),
                   np.array(sp, dtype=float), np.array(r, dtype=float), tuple(tags))


def save_jsonl(ds: Dataset, path) -> None:
    Path(path).write_text(dumps_jsonl(ds))


def load_jsonl(spec: FactorSpec, path) -> Dataset:
    return loads_jsonl(spec, Path(path).read_text())


def dumps_csv(ds: Dataset) -> str:
    n, m = ds.spec.state_dim, ds.spec.action_dim
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"s{i}" for i in range(n)] + [f"a{i}" for i in range(m)]
               + [f"sp{i}" for i in range(n)] + ["r", "tag"])
    for i in range(len(ds)):
        w.writerow([_fmt(x) for x in ds.s[i]] + [_fmt(x) for x in ds.a[i]]
                   + [_fmt(x) for x in ds.s_next[i]] + [_fmt(ds.r[i]), ds.tags[i]])
    return buf.getvalue()
