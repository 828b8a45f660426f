"""Chamfer reports, fidelity, consistency and the visible-ratio sweep.

A *completer* is any callable mapping an ``(N, 3)`` partial cloud to its
completed ``(M, 3)`` cloud; :class:`~pcomplete.model.CompletionModel`
instances qualify, and so do trivial baselines used in tests.
"""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import losses
from .data import SamplePair, occlude, random_viewpoint
from .errors import StateError
from .geom import NNIndex, as_points

log = logging.getLogger(__name__)

Completer = Callable[[np.ndarray], np.ndarray]

# table scaling used when printing, never inside the math
SCALE = {"cdt": 1e4, "cdp": 1e3}
# bumped whenever a report CSV gains, loses or reorders columns
CSV_SCHEMA = 1


def chamfer(P, Q, variant: str = "cdp") -> float:
    with ad.no_grad():
        return float(losses.CHAMFER[variant](np.asarray(P, dtype=np.float64),
                                             np.asarray(Q, dtype=np.float64)).data)


@dataclass
class MetricReport:
    variant: str
    per_category: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    fingerprint: str = ""
    per_sample: list = field(default_factory=list)  # (category, instance_id, frame_id, value)

    @property
    def overall(self) -> float:
        """Mean of per-category means."""
        return float(np.mean(list(self.per_category.values()))) if self.per_category else float("nan")

    @property
    def count(self) -> int:
        return sum(self.counts.values())

    @property
    def scale(self) -> float:
        return SCALE.get(self.variant, 1.0)

    def rows(self):
        for cat in sorted(self.per_category):
            yield cat, self.counts[cat], self.per_category[cat]
        yield "average", self.count, self.overall

    def format(self) -> str:
        exp = {1e4: "1e-4", 1e3: "1e-3"}.get(self.scale)
        unit = f" (x{exp})" if exp else ""
        lines = [f"{self.variant}{unit}"]
        lines += [f"  {cat:<12} {v * self.scale:10.4f}  n={n}" for cat, n, v in self.rows()]
        return "\n".join(lines)

    def to_csv(self, path):
        """Columns: category, count, value, scaled (value * table scale), variant, fingerprint, schema."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["category", "count", "value", "scaled", "variant", "fingerprint", "schema"])
            for cat, n, v in self.rows():
                w.writerow([cat, n, repr(v), repr(v * self.scale), self.variant, self.fingerprint, CSV_SCHEMA])


def fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def eval_cd(completer: Completer, pairs: Sequence[SamplePair], variant: str = "cdp",
            config_fingerprint: str = "") -> MetricReport:
    """Per-category Chamfer distance between completions and ground truth."""
    if variant not in losses.CHAMFER:
        raise ValueError(f"variant must be one of {sorted(losses.CHAMFER)}")
    values = defaultdict(list)
    report = MetricReport(variant, fingerprint=config_fingerprint)
    for p in pairs:
        out = as_points(completer(p.partial))
        if len(out) != len(p.complete):
            raise StateError(f"output resolution {len(out)} != ground-truth resolution {len(p.complete)}")
        v = chamfer(out, p.complete, variant)
        values[p.category].append(v)
        report.per_sample.append((p.category, p.instance_id, p.frame_id, v))
    report.per_category = {c: float(np.mean(v)) for c, v in values.items()}
    report.counts = {c: len(v) for c, v in values.items()}
    return report


def fidelity(inp, out) -> float:
    """Mean distance (not squared) from each input point to the nearest output point."""
    inp, out = as_points(inp), as_points(out)
    _, d2 = NNIndex(out).query(inp)
    return float(np.mean(np.sqrt(d2)))


def consistency(completions: Iterable[tuple], variant: str = "cdp", pairing: str = "adjacent") -> float:
    """Mean over instances of the mean Chamfer distance between frames.

    ``completions`` yields ``(instance_id, frame_id, cloud)``. ``pairing`` is
    ``"adjacent"`` (frame f with f+1) or ``"all"`` (every unordered pair).
    Instances with a single frame are skipped with a warning.
    """
    if pairing not in ("adjacent", "all"):
        raise ValueError(f"pairing must be 'adjacent' or 'all', got {pairing!r}")
    groups = defaultdict(list)
    for inst, frame, cloud in completions:
        groups[inst].append((frame, as_points(cloud)))
    per_instance = []
    for inst in sorted(groups):
        frames = sorted(groups[inst], key=lambda fc: fc[0])
        if len(frames) < 2:
            log.warning("instance %s has a single frame; skipped", inst)
            continue
        if pairing == "adjacent":
            pairs = zip(frames[:-1], frames[1:])
        else:
            pairs = itertools.combinations(frames, 2)
        d = [chamfer(a[1], b[1], variant) for a, b in pairs]
        per_instance.append(np.mean(d))
    if not per_instance:
        raise ValueError("consistency needs at least one instance with two or more frames")
    return float(np.mean(per_instance))


DEFAULT_RATIOS = (0.2, 0.4, 0.6, 0.8)


@dataclass
class SweepRow:
    visible_ratio: float
    mean_cd: float
    count: int
    variant: str = "cdp"

    @property
    def scaled(self):
        return self.mean_cd * SCALE.get(self.variant, 1.0)


def robustness_sweep(completer: Completer, shapes: Sequence, ratios: Sequence[float] = DEFAULT_RATIOS,
                     seed: int = 0, variant: str = "cdp", views_per_shape: int = 1) -> list[SweepRow]:
    """Complete each shape seen at each visible ratio; mean Chamfer distance per ratio.

    ``shapes`` holds complete clouds (arrays or SamplePairs). Viewpoints are
    seeded per shape and reused across ratios, so rows differ only in ratio.
    """
    clouds = [s.complete if isinstance(s, SamplePair) else as_points(s) for s in shapes]
    views = [[random_viewpoint(np.random.default_rng([seed, i, v])) for v in range(views_per_shape)]
             for i in range(len(clouds))]
    rows = []
    for r in ratios:
        vals = [chamfer(completer(occlude(c, r, vp)), c, variant)
                for c, vps in zip(clouds, views) for vp in vps]
        rows.append(SweepRow(float(r), float(np.mean(vals)), len(vals), variant))
    return rows


def write_sweep_csv(path, rows: Sequence[SweepRow]):
    """Columns: visible_ratio, count, mean_cd, scaled, variant, schema."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["visible_ratio", "count", "mean_cd", "scaled", "variant", "schema"])
        for r in rows:
            w.writerow([repr(r.visible_ratio), r.count, repr(r.mean_cd), repr(r.scaled), r.variant, CSV_SCHEMA])


def oracle_completer(pairs: Sequence[SamplePair]) -> Completer:
    """Look up the ground truth for a partial (by content); handy as a reference model."""
    table = {np.asarray(p.partial, dtype=np.float64).tobytes(): p.complete for p in pairs}

    def complete(partial):
        return table[np.asarray(partial, dtype=np.float64).tobytes()]

    return complete


def duplicate_completer(resolution: int) -> Completer:
    """Return the partial input itself, cycled up to ``resolution`` points."""
    def complete(partial):
        partial = as_points(partial)
        return partial[np.arange(resolution) % len(partial)]

    return complete
