"""Placement search: exhaustive baseline and the mask-shrinking optimized variant.

Candidates are always enumerated in canonical order (top-left row-major,
then scale ascending, then angle ascending) and the best candidate is the
first one reaching the maximum wrong-label confidence, so serial and
pooled evaluation return identical results.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

from . import imaging
from .classifier import ClassLabel, Oracle, Verdict
from .errors import (
    BaselineMisclassifiedError,
    CandidateEvaluationError,
    ConfigError,
    EmptyMaskError,
    NoFeasiblePlacementError,
    OracleError,
    ParameterError,
    SnowballError,
)
from .imaging import Raster
from .mask import BinaryMask, default_stride, placeable_centers, shrink_mask, valid_placements


@dataclass(frozen=True)
class Patch:
    """An occluder image; symmetric ones set ``rotatable=False`` to skip angles."""

    image: Raster
    rotatable: bool = True
    name: str = ""

    def __post_init__(self):
        if self.image.channels != 4:
            object.__setattr__(self, "image", imaging.as_rgba(self.image))


@dataclass(frozen=True)
class Placement:
    """Top-left corner plus the transform applied to the patch image.

    ``scale`` is the absolute factor handed to ``transform_patch``;
    ``width``/``height`` are the resulting footprint.
    """

    x: int
    y: int
    scale: float
    angle: float
    width: int
    height: int

    @property
    def center(self) -> tuple[int, int]:
        return self.x + self.width // 2, self.y + self.height // 2

    def to_json(self) -> dict:
        return {"x": self.x, "y": self.y, "scale": self.scale, "angle": self.angle,
                "width": self.width, "height": self.height}

    @classmethod
    def from_json(cls, d: dict) -> "Placement":
        return cls(int(d["x"]), int(d["y"]), float(d["scale"]), float(d["angle"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class SearchConfig:
    size_ratio: float = 0.35
    scales: tuple[float, ...] = (1.0,)
    angles: tuple[float, ...] = (0, 90, 180, 270)
    stride: int | None = None
    shrink_fraction: float = 1.0
    selective_angles: bool = True
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(sorted(float(s) for s in self.scales)))
        object.__setattr__(self, "angles", tuple(sorted({float(a) for a in self.angles})))
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ConfigError("scales must be a non-empty list of positive numbers")
        if not self.angles or any(not 0 <= a < 360 for a in self.angles):
            raise ConfigError("angles must be a non-empty list within [0, 360)")
        if not 0 < self.size_ratio <= 1:
            raise ConfigError(f"size_ratio must lie in (0, 1], got {self.size_ratio}")
        if not 0 < self.shrink_fraction <= 1:
            raise ConfigError(f"shrink_fraction must lie in (0, 1], got {self.shrink_fraction}")
        if self.stride is not None and self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


@dataclass(frozen=True)
class CandidateScore:
    placement: Placement
    verdict: Verdict
    adversarial: bool

    @property
    def score(self) -> float:
        """Wrong-label confidence; correctly classified candidates never win."""
        return self.verdict.confidence if self.adversarial else -math.inf


@dataclass
class AttackResult:
    success: bool
    best: CandidateScore | None
    adversarial_image: Raster | None
    evaluations: int
    elapsed: float
    true_label: ClassLabel | None = None
    anchor: tuple[int, int] | None = None
    search_area: int = 0
    error: str | None = None
    patch_name: str = ""
    scores: list[CandidateScore] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        if self.success != (self.best is not None and self.best.adversarial):
            raise ValueError("success must hold exactly when an adversarial best candidate exists")

    def to_json(self) -> dict:
        best = None
        if self.best is not None:
            best = {"placement": self.best.placement.to_json(), "verdict": self.best.verdict.to_json(),
                    "adversarial": self.best.adversarial}
        return {
            "success": self.success,
            "best": best,
            "evaluations": self.evaluations,
            "elapsed": self.elapsed,
            "true_label": None if self.true_label is None else {"id": self.true_label.id, "name": self.true_label.name},
            "anchor": None if self.anchor is None else list(self.anchor),
            "search_area": self.search_area,
            "error": self.error,
            "patch": self.patch_name,
        }

    @classmethod
    def from_json(cls, d: dict, adversarial_image: Raster | None = None) -> "AttackResult":
        best = None
        if d.get("best") is not None:
            b = d["best"]
            best = CandidateScore(Placement.from_json(b["placement"]), Verdict.from_json(b["verdict"]),
                                  bool(b["adversarial"]))
        tl = d.get("true_label")
        return cls(
            success=bool(d["success"]),
            best=best,
            adversarial_image=adversarial_image,
            evaluations=int(d["evaluations"]),
            elapsed=float(d["elapsed"]),
            true_label=None if tl is None else ClassLabel(int(tl["id"]), str(tl["name"])),
            anchor=None if d.get("anchor") is None else tuple(d["anchor"]),
            search_area=int(d.get("search_area", 0)),
            error=d.get("error"),
            patch_name=d.get("patch", ""),
        )


def patch_base_size(mask: BinaryMask, size_ratio: float) -> int:
    """Square side proportional to the root of the perturbable area."""
    if not 0 < size_ratio <= 1:
        raise ParameterError(f"size_ratio must lie in (0, 1], got {size_ratio}")
    area = mask.valid_area()
    if area == 0:
        raise EmptyMaskError("mask has no perturbable pixel")
    return max(1, int(math.floor(size_ratio * math.sqrt(area) + 0.5)))


def _as_patch(patch) -> Patch:
    return patch if isinstance(patch, Patch) else Patch(patch)


def _label_id(label) -> int | None:
    if label is None:
        return None
    return label.id if isinstance(label, ClassLabel) else int(label)


def evaluate_candidate(sign: Raster, patch, placement: Placement, oracle: Oracle,
                       true_label, transformed: Raster | None = None) -> CandidateScore:
    """Render the placement and ask the oracle; bounds are checked before any query."""
    image = render(sign, patch, placement, transformed)
    try:
        verdict = oracle.classify(image)
    except OracleError as exc:
        raise CandidateEvaluationError(placement, exc) from exc
    return CandidateScore(placement, verdict, verdict.label.id != _label_id(true_label))


def render(sign: Raster, patch, placement: Placement, transformed: Raster | None = None) -> Raster:
    """The adversarial image for ``placement``, rebuilt from its inputs alone."""
    if transformed is None:
        transformed = imaging.transform_patch(_as_patch(patch).image, placement.scale, placement.angle)
    return imaging.composite(imaging.as_rgb(sign), transformed, placement.x, placement.y)


def _enumerate(mask: BinaryMask, patch: Patch, cfg: SearchConfig, side: int,
               angles: Sequence[float]) -> list[tuple[Placement, Raster]]:
    stride = cfg.stride or default_stride(side)
    base = side / max(patch.image.width, patch.image.height)
    if not patch.rotatable:
        angles = (0.0,)
    keyed = []
    order = 0
    for s in cfg.scales:
        for a in sorted(set(angles)):
            try:
                t = imaging.transform_patch(patch.image, base * s, a)
            except ParameterError:
                continue
            if t.width <= mask.width and t.height <= mask.height:
                for x, y in valid_placements(mask, t.width, t.height, stride):
                    keyed.append(((y, x, order), Placement(x, y, base * s, a, t.width, t.height), t))
            order += 1
    keyed.sort(key=lambda item: item[0])
    return [(p, t) for _, p, t in keyed]


def _transform_sizes(patch: Patch, cfg: SearchConfig, side: int, angles: Sequence[float]):
    base = side / max(patch.image.width, patch.image.height)
    if not patch.rotatable:
        angles = (0.0,)
    sizes = set()
    for s in cfg.scales:
        w, h = imaging.scaled_size(patch.image.width, patch.image.height, base * s)
        if w < 1 or h < 1:
            continue
        for a in angles:
            sizes.add(imaging.rotated_size(w, h, a))
    return sizes


def _run(sign: Raster, search_mask: BinaryMask, patch: Patch, oracle: Oracle, cfg: SearchConfig,
         true_label: ClassLabel, side: int, angles: Sequence[float], anchor=None) -> AttackResult:
    sign = imaging.as_rgb(sign)
    candidates = _enumerate(search_mask, patch, cfg, side, angles)
    if not candidates:
        raise NoFeasiblePlacementError(
            f"no feasible placement for patch {patch.name or '?'} in a mask of area {search_mask.valid_area()}"
        )

    def score(item):
        placement, transformed = item
        return evaluate_candidate(sign, patch, placement, oracle, true_label, transformed)

    start = time.perf_counter()
    if cfg.workers > 1 and not getattr(oracle, "serial_only", False):
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            scores = list(pool.map(score, candidates))
    else:
        scores = [score(c) for c in candidates]
    elapsed = time.perf_counter() - start

    best = None
    for s in scores:
        if s.adversarial and (best is None or s.score > best.score):
            best = s
    image = None
    if best is not None:
        index = next(i for i, s in enumerate(scores) if s is best)
        image = render(sign, patch, best.placement, candidates[index][1])
    return AttackResult(
        success=best is not None,
        best=best,
        adversarial_image=image,
        evaluations=len(scores),
        elapsed=elapsed,
        true_label=true_label,
        anchor=anchor,
        search_area=search_mask.valid_area(),
        patch_name=patch.name,
        scores=scores,
    )


def clean_label(sign: Raster, oracle: Oracle, true_label=None) -> ClassLabel:
    """Classify the untouched sign; abort if it already disagrees with ``true_label``."""
    verdict = oracle.classify(imaging.as_rgb(sign))
    expected = _label_id(true_label)
    if expected is not None and verdict.label.id != expected:
        raise BaselineMisclassifiedError(
            f"clean sign classified as {verdict.label.name} ({verdict.label.id}), expected id {expected}"
        )
    if isinstance(true_label, ClassLabel):
        return true_label
    return verdict.label


def baseline_search(sign: Raster, mask: BinaryMask, patch, oracle: Oracle, cfg: SearchConfig | None = None,
                    true_label=None) -> AttackResult:
    """Score every feasible placement on the full mask and keep the strongest misclassification.

    ``true_label`` (id or :class:`ClassLabel`) defaults to the oracle's
    answer on the clean sign.  ``evaluations`` counts candidate queries
    only, not the clean-sign check.
    """
    cfg = cfg or SearchConfig()
    patch = _as_patch(patch)
    label = clean_label(sign, oracle, true_label)
    side = patch_base_size(mask, cfg.size_ratio)
    return _run(sign, mask, patch, oracle, cfg, label, side, cfg.angles)


def anchor_for(first: AttackResult | None, mask: BinaryMask) -> tuple[int, int]:
    """Center of the first patch's winning placement, or the mask centroid if it failed."""
    if first is not None and first.success:
        return first.best.placement.center
    return mask.centroid()


def refine_angles(cfg: SearchConfig, first: AttackResult | None) -> tuple[float, ...]:
    if cfg.shrink_fraction >= 1 or not cfg.selective_angles or first is None or not first.success:
        return cfg.angles
    return tuple(sorted({0.0, float(first.best.placement.angle)}))


def refined_search(sign: Raster, mask: BinaryMask, patch, oracle: Oracle, cfg: SearchConfig,
                   true_label: ClassLabel, anchor: tuple[int, int],
                   angles: Sequence[float] | None = None) -> AttackResult:
    """Search one follow-up patch inside the shrunk window around ``anchor``.

    The shrink applies to the part of the mask that can host this patch's
    center, so ``shrink_fraction`` governs the candidate count directly.
    """
    patch = _as_patch(patch)
    angles = cfg.angles if angles is None else tuple(angles)
    side = patch_base_size(mask, cfg.size_ratio)
    if cfg.shrink_fraction >= 1:
        return _run(sign, mask, patch, oracle, cfg, true_label, side, angles)
    hostable = placeable_centers(mask, _transform_sizes(patch, cfg, side, angles))
    region = shrink_mask(hostable, anchor, cfg.shrink_fraction)
    return _run(sign, region, patch, oracle, cfg, true_label, side, angles, anchor)


def _failed(patch: Patch, exc: Exception, true_label, anchor) -> AttackResult:
    return AttackResult(False, None, None, 0, 0.0, true_label=true_label, anchor=anchor,
                        error=f"{type(exc).__name__}: {exc}", patch_name=patch.name)


def optimized_search(sign: Raster, mask: BinaryMask, patches: Sequence, oracle: Oracle,
                     cfg: SearchConfig | None = None, true_label=None) -> list[AttackResult]:
    """Full-mask search for ``patches[0]``, then shrunk-window searches for the rest.

    A patch whose search raises is reported with ``error`` set and zero
    evaluations; the remaining patches still run.
    """
    cfg = cfg or SearchConfig()
    patches = [_as_patch(p) for p in patches]
    if not patches:
        raise ParameterError("optimized_search needs at least one patch")
    label = clean_label(sign, oracle, true_label)
    side = patch_base_size(mask, cfg.size_ratio)

    results: list[AttackResult] = []
    try:
        first = _run(sign, mask, patches[0], oracle, cfg, label, side, cfg.angles)
    except SnowballError as exc:
        first = None
        results.append(_failed(patches[0], exc, label, None))
    else:
        results.append(first)

    anchor = anchor_for(first, mask)
    if first is not None and cfg.shrink_fraction < 1:
        first.anchor = anchor
    angles = refine_angles(cfg, first)
    for patch in patches[1:]:
        try:
            results.append(refined_search(sign, mask, patch, oracle, cfg, label, anchor, angles))
        except SnowballError as exc:
            results.append(_failed(patch, exc, label, anchor))
    return results


def with_fraction(cfg: SearchConfig, fraction: float) -> SearchConfig:
    return replace(cfg, shrink_fraction=fraction)
