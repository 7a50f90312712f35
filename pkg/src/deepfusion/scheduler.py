"""Profile-driven kernel selection with a persistent tuning cache.

Before inference, every candidate :class:`KernelConfig` is timed on the
target shape, checked against the four-kernel reference, and the fastest
correct one is recorded per (shape, fingerprint). Later runs with the same
key read the cache instead of profiling again.
"""

from __future__ import annotations

import json
import logging
import os
import platform
import tempfile
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from filelock import FileLock

from . import fused as _fused
from .fused import KernelConfig, LoopOrder, TileConfig
from .tensor import Matrix, MlpShape
from .variants import MlpWeights, VariantTag, run_four_kernel

log = logging.getLogger(__name__)

CACHE_FORMAT_VERSION = 1
CORRECTNESS_TOL = 1e-10

Runner = Callable[[Matrix, MlpWeights], Matrix]


class SchedulerError(RuntimeError):
    pass


class CacheFormatError(ValueError):
    """The tuning cache could not be parsed."""


class CacheVersionError(ValueError):
    """The tuning cache was written by an incompatible format version."""


def default_candidates(shape: MlpShape) -> list[KernelConfig]:
    """Four-kernel, two-kernel, and a clamped grid of fused tilings."""
    out = [KernelConfig(VariantTag.FOUR_KERNEL), KernelConfig(VariantTag.TWO_KERNEL)]
    seen: set[TileConfig] = set()
    for order in (LoopOrder.ROW_MAJOR, LoopOrder.COLUMN_MAJOR):
        for tm in (1, shape.batch):
            for tn in (32, 128, shape.d_ff):
                for tk in (32, shape.d_model):
                    tile = TileConfig(tm, tn, tk, order).clamp(shape)
                    if tile not in seen:
                        seen.add(tile)
                        out.append(KernelConfig(VariantTag.FUSED, tile))
    return out


def fused_candidates(shape: MlpShape) -> list[KernelConfig]:
    return [c for c in default_candidates(shape) if c.variant is VariantTag.FUSED]


def default_fingerprint() -> str:
    cpu = platform.processor() or platform.machine()
    return f"{platform.system()}-{cpu}-cpus{os.cpu_count()}-py{platform.python_version()}-numpy{np.__version__}"


@dataclass
class BenchmarkResult:
    config_label: str
    variant: VariantTag
    samples_ns: list[int]
    warmup_runs: int
    measured_runs: int
    error: str | None = None

    def __post_init__(self) -> None:
        self.variant = VariantTag(self.variant)
        if self.error is None and len(self.samples_ns) != self.measured_runs:
            raise ValueError("samples_ns must hold one entry per measured run")

    @property
    def median_ns(self) -> int:
        return lower_median(self.samples_ns)

    @property
    def qualified(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return {
            "config_label": self.config_label,
            "variant": self.variant.value,
            "samples_ns": list(self.samples_ns),
            "median_ns": self.median_ns if self.samples_ns else None,
            "warmup_runs": self.warmup_runs,
            "measured_runs": self.measured_runs,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "BenchmarkResult":
        res = cls(d["config_label"], VariantTag(d["variant"]), [int(s) for s in d["samples_ns"]],
                  int(d["warmup_runs"]), int(d["measured_runs"]), d.get("error"))
        if d.get("median_ns") is not None and res.samples_ns and d["median_ns"] != res.median_ns:
            raise ValueError(f"median_ns {d['median_ns']} disagrees with samples for {res.config_label}")
        return res


def lower_median(samples: Sequence[int]) -> int:
    if not samples:
        raise ValueError("median of no samples")
    ordered = sorted(samples)
    return ordered[(len(ordered) - 1) // 2]


@dataclass
class ScheduleEntry:
    shape: MlpShape
    fingerprint: str
    chosen: str
    all_results: list[BenchmarkResult]
    created_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def to_dict(self) -> dict:
        return {
            "shape": {"batch": self.shape.batch, "d_model": self.shape.d_model, "d_ff": self.shape.d_ff},
            "fingerprint": self.fingerprint,
            "chosen": self.chosen,
            "created_at": self.created_at,
            "all_results": [r.to_dict() for r in self.all_results],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScheduleEntry":
        s = d["shape"]
        return cls(
            MlpShape(int(s["batch"]), int(s["d_model"]), int(s["d_ff"])),
            str(d["fingerprint"]),
            str(d["chosen"]),
            [BenchmarkResult.from_dict(r) for r in d["all_results"]],
            str(d["created_at"]),
        )


# -- profiling ----------------------------------------------------------------

def _default_runner(config: KernelConfig) -> Runner:
    return lambda x, w: _fused.run_mlp(config, x, w)


def profile(candidates: Iterable[KernelConfig], shape: MlpShape, warmup: int = 1, runs: int = 4,
            seed: int = 0, *, runners: Mapping[str, Runner] | None = None,
            weights: MlpWeights | None = None) -> list[BenchmarkResult]:
    """Time each candidate on one seeded instance shared by all of them.

    ``runners`` overrides how a given label executes (used to plug in
    instrumented or deliberately faulty kernels). A candidate whose output
    deviates from the four-kernel reference by more than 1e-10 is
    disqualified: its result carries ``error`` and no samples.
    """
    if warmup < 1:
        raise ValueError("warmup must be >= 1")
    if runs < 3:
        raise ValueError("runs must be >= 3")
    rng = np.random.default_rng(seed)
    w = weights if weights is not None else MlpWeights.random(shape, rng, scale=shape.d_model ** -0.5)
    x = Matrix.random(shape.batch, shape.d_model, rng)
    reference = run_four_kernel(x, w).values
    runners = runners or {}

    results = []
    for cand in candidates:
        run = runners.get(cand.label) or _default_runner(cand)
        try:
            for _ in range(warmup):
                out = run(x, w)
            err = float(np.max(np.abs(out.values - reference)))
            if not err <= CORRECTNESS_TOL:
                raise SchedulerError(f"output deviates from reference by {err:.3e} (> {CORRECTNESS_TOL:g})")
            samples = []
            for _ in range(runs):
                t0 = time.perf_counter_ns()
                run(x, w)
                samples.append(time.perf_counter_ns() - t0)
        except Exception as exc:  # noqa: BLE001 - any failure disqualifies the candidate
            log.warning("candidate %s disqualified: %s", cand.label, exc)
            results.append(BenchmarkResult(cand.label, cand.variant, [], warmup, runs, f"{type(exc).__name__}: {exc}"))
            continue
        results.append(BenchmarkResult(cand.label, cand.variant, samples, warmup, runs))
    return results


def select(results: Sequence[BenchmarkResult], shape: MlpShape, fingerprint: str = "") -> ScheduleEntry:
    """Fastest qualified candidate by median; ties go to deeper fusion, then label."""
    qualified = [r for r in results if r.qualified]
    if not qualified:
        raise SchedulerError("every candidate was disqualified; nothing to select")
    best = min(qualified, key=lambda r: (r.median_ns, -r.variant.fusion_depth, r.config_label))
    return ScheduleEntry(shape, fingerprint, best.config_label, list(results))


# -- cache file ---------------------------------------------------------------

def _key(shape: MlpShape, fingerprint: str) -> tuple[int, int, int, str]:
    return (shape.batch, shape.d_model, shape.d_ff, fingerprint)


def _load_entries(path: Path) -> list[ScheduleEntry]:
    if not path.exists():
        return []
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CacheFormatError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CacheFormatError(f"{path}: missing field 'format_version'")
    version = doc["format_version"]
    if version != CACHE_FORMAT_VERSION:
        raise CacheVersionError(
            f"{path}: format_version {version!r} is not supported (this build reads version {CACHE_FORMAT_VERSION})"
        )
    entries = []
    for i, raw in enumerate(doc.get("entries", [])):
        try:
            entries.append(ScheduleEntry.from_dict(raw))
        except (KeyError, TypeError, ValueError) as exc:
            raise CacheFormatError(f"{path}: entries[{i}]: bad or missing field {exc}") from None
    return entries


def _lock_for(path: Path) -> FileLock:
    return FileLock(str(path) + ".lock")


def cache_store(entry: ScheduleEntry, path: str | os.PathLike) -> None:
    """Insert or replace the entry for (shape, fingerprint). The file is
    rewritten atomically under an exclusive lock."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with _lock_for(path):
        entries = [e for e in _load_entries(path) if _key(e.shape, e.fingerprint) != _key(entry.shape, entry.fingerprint)]
        entries.append(entry)
        doc = {"format_version": CACHE_FORMAT_VERSION, "entries": [e.to_dict() for e in entries]}
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(doc, fh, indent=2)
                fh.write("\n")
            os.replace(tmp, path)
        except BaseException:
            os.unlink(tmp)
            raise


def cache_lookup(shape: MlpShape, fingerprint: str, path: str | os.PathLike) -> ScheduleEntry | None:
    # replace-on-write means readers never need the lock
    for entry in _load_entries(Path(path)):
        if _key(entry.shape, entry.fingerprint) == _key(shape, fingerprint):
            return entry
    return None


class Scheduler:
    """Cache-first tuning. ``profile_calls`` counts real profiling passes."""

    def __init__(self, cache_path: str | os.PathLike | None = None, fingerprint: str | None = None, *,
                 warmup: int = 1, runs: int = 4, seed: int = 0,
                 runners: Mapping[str, Runner] | None = None):
        self.cache_path = Path(cache_path) if cache_path is not None else None
        self.fingerprint = fingerprint if fingerprint is not None else default_fingerprint()
        self.warmup = warmup
        self.runs = runs
        self.seed = seed
        self.runners = dict(runners or {})
        self.profile_calls = 0
        self.last_was_cache_hit = False

    def tune(self, shape: MlpShape, candidates: Sequence[KernelConfig] | None = None,
             fingerprint: str | None = None) -> ScheduleEntry:
        fp = self.fingerprint if fingerprint is None else fingerprint
        if self.cache_path is not None:
            hit = cache_lookup(shape, fp, self.cache_path)
            if hit is not None:
                self.last_was_cache_hit = True
                return hit
        self.last_was_cache_hit = False
        cands = list(candidates) if candidates is not None else default_candidates(shape)
        self.profile_calls += 1
        results = profile(cands, shape, self.warmup, self.runs, self.seed, runners=self.runners)
        entry = select(results, shape, fp)
        if self.cache_path is not None:
            cache_store(entry, self.cache_path)
        return entry

    @staticmethod
    def resolve(entry: ScheduleEntry, candidates: Sequence[KernelConfig]) -> KernelConfig:
        for c in candidates:
            if c.label == entry.chosen:
                return c
        raise SchedulerError(f"cached choice {entry.chosen!r} is not among the candidates")
