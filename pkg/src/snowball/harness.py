"""Experiment runner, report tables, and deterministic stub oracles.

A run is described by a JSON manifest (see README).  Results land in
``<output_dir>/<sign>/<patch>/<fraction>/`` as ``result.json`` plus
``adversarial.png`` on success, which makes reruns resumable and lets
``emit_tables`` rebuild every report from disk.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import imaging
from . import search as snow
from .classifier import ClassLabel, CNNClassifier, RemoteClassifier, Verdict
from .errors import BaselineMisclassifiedError, ConfigError, ManifestError, SnowballError
from .imaging import Raster
from .mask import BinaryMask, MaskParams, generate_mask, read_mask, write_mask

log = logging.getLogger(__name__)

ENDPOINT_ENV = "SNOWBALL_CLASSIFIER_URL"
DEFAULT_SCHEDULE = (1.0, 0.75, 0.5, 0.25)
FAILURE = "-"
ERRORED = "error"


# --------------------------------------------------------------------------
# Stub oracles
# --------------------------------------------------------------------------

QUADRANT_LABELS = (
    ClassLabel(0, "top-left"),
    ClassLabel(1, "top-right"),
    ClassLabel(2, "bottom-left"),
    ClassLabel(3, "bottom-right"),
)


def quadrant_means(img: Raster) -> np.ndarray:
    """Mean RGB intensity of the TL, TR, BL, BR quadrants (split at h//2, w//2)."""
    values = imaging.as_rgb(img).data.astype(np.float64).mean(axis=2)
    h2, w2 = img.height // 2, img.width // 2
    parts = (values[:h2, :w2], values[:h2, w2:], values[h2:, :w2], values[h2:, w2:])
    return np.array([p.mean() if p.size else 0.0 for p in parts])


class QuadrantBrightnessOracle:
    """Label = brightest quadrant; confidence = its share of the summed quadrant means."""

    serial_only = False
    labels = list(QUADRANT_LABELS)

    def classify(self, img: Raster) -> Verdict:
        means = quadrant_means(img)
        total = means.sum()
        probs = np.full(4, 0.25) if total == 0 else means / total
        return Verdict.from_probabilities(probs, QUADRANT_LABELS)


class MeanThresholdOracle:
    """Two classes, ``dark`` and ``bright``, split at a mean-intensity threshold."""

    serial_only = False
    labels = [ClassLabel(0, "dark"), ClassLabel(1, "bright")]

    def __init__(self, threshold: float = 127.5):
        self.threshold = float(threshold)

    def classify(self, img: Raster) -> Verdict:
        mean = imaging.as_rgb(img).data.astype(np.float64).mean()
        bright = min(1.0, max(0.0, 0.5 + (mean - self.threshold) / 510.0))
        return Verdict.from_probabilities([1.0 - bright, bright], self.labels)


class FixedVerdictOracle:
    serial_only = False

    def __init__(self, verdict: Verdict):
        self.verdict = verdict
        self.labels = [verdict.label]

    def classify(self, img: Raster) -> Verdict:
        return self.verdict


def stub_classifier(rule_spec) -> Any:
    """Build a stub oracle from a rule name or ``{"rule": ..., **params}``.

    Rules: ``quadrant`` (quadrant-brightness), ``mean-threshold``
    (``threshold``), ``fixed`` (``label_id``, ``label_name``, ``confidence``).
    """
    spec = {"rule": rule_spec} if isinstance(rule_spec, str) else dict(rule_spec)
    rule = spec.pop("rule", None)
    if rule in ("quadrant", "quadrant-brightness"):
        return QuadrantBrightnessOracle()
    if rule == "mean-threshold":
        return MeanThresholdOracle(spec.get("threshold", 127.5))
    if rule in ("fixed", "fixed-verdict"):
        label = ClassLabel(int(spec.get("label_id", 0)), str(spec.get("label_name", "fixed")))
        return FixedVerdictOracle(Verdict(label, float(spec.get("confidence", 1.0))))
    raise ConfigError(f"unknown stub rule {rule!r}; expected quadrant, mean-threshold or fixed")


def build_oracle(spec: dict, base_dir: Path | None = None):
    """Instantiate the classifier described by a manifest ``classifier`` block.

    The ``SNOWBALL_CLASSIFIER_URL`` environment variable overrides the
    endpoint of a remote classifier.
    """
    base_dir = base_dir or Path.cwd()
    kind = spec.get("kind", "stub")
    if kind == "stub":
        return stub_classifier(spec.get("rule", "quadrant") if "params" not in spec
                               else {"rule": spec.get("rule"), **spec["params"]})
    if kind == "builtin":
        weights = base_dir / spec["weights"]
        classes = base_dir / spec["classes"] if spec.get("classes") else None
        shape = tuple(spec.get("input_shape", (32, 32, 3)))
        return CNNClassifier.from_files(weights, classes, shape)
    if kind == "remote":
        endpoint = os.environ.get(ENDPOINT_ENV) or spec.get("endpoint")
        if not endpoint:
            raise ConfigError(f"remote classifier needs an endpoint or ${ENDPOINT_ENV}")
        return RemoteClassifier(endpoint, timeout=float(spec.get("timeout", 10.0)),
                                retries=int(spec.get("retries", 2)))
    raise ConfigError(f"unknown classifier kind {kind!r}")


# --------------------------------------------------------------------------
# Manifest
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SignEntry:
    name: str
    image: Path
    mask: Path | None = None
    true_label: int | str | None = None


@dataclass(frozen=True)
class PatchEntry:
    name: str
    image: Path
    rotatable: bool = True


@dataclass(frozen=True)
class ExperimentManifest:
    signs: tuple[SignEntry, ...]
    patches: tuple[PatchEntry, ...]
    classifier: dict
    search: snow.SearchConfig = snow.SearchConfig()
    schedule: tuple[float, ...] = DEFAULT_SCHEDULE
    output_dir: Path = Path("results")
    mask_params: MaskParams = MaskParams()
    seed: int = 0
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)

    def __post_init__(self):
        if not self.signs:
            raise ManifestError("manifest lists no signs")
        if not self.patches:
            raise ManifestError("manifest lists no patches")
        for kind, entries in (("sign", self.signs), ("patch", self.patches)):
            names = [e.name for e in entries]
            if len(set(names)) != len(names):
                raise ManifestError(f"duplicate {kind} names: {names}")
        paths = [e.image for e in self.signs] + [e.image for e in self.patches]
        if len(set(paths)) != len(paths):
            raise ManifestError("sign and patch image paths must be distinct")
        if not self.schedule or any(not 0 < f <= 1 for f in self.schedule):
            raise ManifestError(f"schedule fractions must lie in (0, 1], got {self.schedule}")
        schedule = tuple(dict.fromkeys(float(f) for f in self.schedule))
        if 1.0 not in schedule:
            schedule = (1.0,) + schedule
        object.__setattr__(self, "schedule", schedule)
        if self.workers < 1:
            raise ManifestError("workers must be >= 1")


def parse_manifest(data: dict, base_dir: Path | None = None) -> ExperimentManifest:
    base_dir = Path(base_dir or Path.cwd())
    try:
        signs = tuple(
            SignEntry(
                name=s.get("name") or Path(s["image"]).stem,
                image=base_dir / s["image"],
                mask=base_dir / s["mask"] if s.get("mask") else None,
                true_label=s.get("true_label"),
            )
            for s in data.get("signs", [])
        )
        patches = tuple(
            PatchEntry(
                name=p.get("name") or Path(p["image"]).stem,
                image=base_dir / p["image"],
                rotatable=bool(p.get("rotatable", True)),
            )
            for p in data.get("patches", [])
        )
        search = snow.SearchConfig(**data.get("search", {}))
        mask_params = MaskParams(**data.get("mask_params", {}))
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"malformed manifest: {exc}") from exc
    classifier = dict(data.get("classifier", {"kind": "stub", "rule": "quadrant"}))
    for key in ("weights", "classes"):
        if classifier.get(key):
            classifier[key] = str(base_dir / classifier[key])
    kwargs = {}
    if "workers" in data:
        kwargs["workers"] = int(data["workers"])
    return ExperimentManifest(
        signs=signs,
        patches=patches,
        classifier=classifier,
        search=search,
        schedule=tuple(data.get("schedule", DEFAULT_SCHEDULE)),
        output_dir=base_dir / data.get("output_dir", "results"),
        mask_params=mask_params,
        seed=int(data.get("seed", 0)),
        **kwargs,
    )


def load_manifest(path) -> ExperimentManifest:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return parse_manifest(data, path.parent)


# --------------------------------------------------------------------------
# Running
# --------------------------------------------------------------------------

def fraction_key(fraction: float) -> str:
    return f"{fraction:.2f}"


@dataclass
class Cell:
    sign: str
    patch: str
    fraction: float
    result: snow.AttackResult | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None and self.result is not None and self.result.error is None

    @property
    def failure_text(self) -> str | None:
        if self.error:
            return self.error
        if self.result is not None:
            return self.result.error
        return "missing"


@dataclass
class ExperimentResults:
    signs: list[str]
    patches: list[str]
    schedule: list[float]
    cells: dict[tuple[str, str, str], Cell]
    output_dir: Path | None = None
    seed: int = 0

    def cell(self, sign: str, patch: str, fraction: float) -> Cell:
        return self.cells.get((sign, patch, fraction_key(fraction))) or Cell(sign, patch, fraction, error="missing")


def _cell_dir(out: Path, sign: str, patch: str, fraction: float) -> Path:
    return out / sign / patch / fraction_key(fraction)


def _write_cell(out: Path, cell: Cell, seed: int) -> None:
    d = _cell_dir(out, cell.sign, cell.patch, cell.fraction)
    d.mkdir(parents=True, exist_ok=True)
    payload = {"sign": cell.sign, "patch": cell.patch, "fraction": cell.fraction, "seed": seed,
               "status": "ok" if cell.ok else "error", "error": cell.failure_text if not cell.ok else None,
               "result": None if cell.result is None else cell.result.to_json()}
    png = d / "adversarial.png"
    if cell.result is not None and cell.result.adversarial_image is not None:
        imaging.write_png(cell.result.adversarial_image, png)
    elif png.exists():
        png.unlink()
    tmp = d / "result.json.tmp"
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    tmp.replace(d / "result.json")


def _read_cell(out: Path, sign: str, patch: str, fraction: float, load_image: bool = True) -> Cell | None:
    """A stored cell if it exists and validates; ``None`` means it must be (re)computed."""
    d = _cell_dir(out, sign, patch, fraction)
    try:
        payload = json.loads((d / "result.json").read_text(encoding="utf-8"))
    except (OSError, ValueError):
        return None
    if (payload.get("sign"), payload.get("patch"), fraction_key(float(payload.get("fraction", -1)))) != \
            (sign, patch, fraction_key(fraction)):
        return None
    try:
        result = None if payload.get("result") is None else snow.AttackResult.from_json(payload["result"])
    except (KeyError, TypeError, ValueError):
        return None
    if payload.get("status") != "ok" or result is None:
        return Cell(sign, patch, fraction, result, error=payload.get("error") or "error")
    if result.success:
        png = d / "adversarial.png"
        if not png.exists():
            return None
        if load_image:
            try:
                result.adversarial_image = imaging.read_png(png)
            except (OSError, ValueError):
                return None
    return Cell(sign, patch, fraction, result)


def _resolve_label(entry: SignEntry, oracle, sign: Raster):
    """Manifest true label as an id, a :class:`ClassLabel`, or ``None`` (use the clean verdict)."""
    tl = entry.true_label
    if tl is None or isinstance(tl, int):
        return tl
    labels = getattr(oracle, "labels", None)
    if labels:
        for lab in labels:
            if lab.name == tl:
                return lab
        raise ManifestError(f"sign {entry.name}: unknown true label {tl!r}")
    clean = oracle.classify(imaging.as_rgb(sign))
    if clean.label.name != tl:
        raise BaselineMisclassifiedError(f"clean sign classified as {clean.label.name}, expected {tl}")
    return clean.label


def _run_group(manifest: ExperimentManifest, out: Path, oracle, entry: SignEntry, sign: Raster,
               mask: BinaryMask, patches: dict[str, snow.Patch | str], fraction: float,
               resume: bool) -> list[Cell]:
    cfg = snow.with_fraction(manifest.search, fraction)
    names = [p.name for p in manifest.patches]
    cells: list[Cell] = []
    label = snow.clean_label(sign, oracle, _resolve_label(entry, oracle, sign))

    def compute(name: str, fn) -> Cell:
        if resume:
            cached = _read_cell(out, entry.name, name, fraction)
            if cached is not None and cached.error is None:
                return cached
        patch = patches[name]
        if isinstance(patch, str):
            cell = Cell(entry.name, name, fraction, error=patch)
        else:
            try:
                cell = Cell(entry.name, name, fraction, fn(patch))
            except SnowballError as exc:
                cell = Cell(entry.name, name, fraction, error=f"{type(exc).__name__}: {exc}")
        _write_cell(out, cell, manifest.seed)
        return cell

    first = compute(names[0], lambda p: snow.baseline_search(sign, mask, p, oracle, cfg, label))
    cells.append(first)
    first_result = first.result if first.ok else None
    anchor = snow.anchor_for(first_result, mask)
    angles = snow.refine_angles(cfg, first_result)
    for name in names[1:]:
        cells.append(compute(name, lambda p: snow.refined_search(sign, mask, p, oracle, cfg, label, anchor, angles)))
    return cells


def _load_patches(manifest: ExperimentManifest) -> dict[str, snow.Patch | str]:
    loaded: dict[str, snow.Patch | str] = {}
    for p in manifest.patches:
        try:
            loaded[p.name] = snow.Patch(imaging.as_rgba(imaging.read_png(p.image)), p.rotatable, p.name)
        except (OSError, ValueError, SnowballError) as exc:
            loaded[p.name] = f"unreadable patch {p.image}: {exc}"
    return loaded


def _prepare_sign(manifest: ExperimentManifest, entry: SignEntry, out: Path):
    sign = imaging.as_rgb(imaging.read_png(entry.image))
    if entry.mask is not None:
        mask = read_mask(entry.mask)
        if (mask.width, mask.height) != (sign.width, sign.height):
            raise ManifestError(f"mask {entry.mask} does not match sign {entry.image} dimensions")
    else:
        mask = generate_mask(sign, manifest.mask_params)
    write_mask(mask, out / entry.name / "mask.png")
    return sign, mask


def _manifest_summary(manifest: ExperimentManifest) -> dict:
    cfg = manifest.search
    return {
        "signs": [e.name for e in manifest.signs],
        "patches": [e.name for e in manifest.patches],
        "schedule": list(manifest.schedule),
        "seed": manifest.seed,
        "search": {"size_ratio": cfg.size_ratio, "scales": list(cfg.scales), "angles": list(cfg.angles),
                   "stride": cfg.stride, "selective_angles": cfg.selective_angles},
        "classifier": {k: v for k, v in manifest.classifier.items() if k != "endpoint"},
    }


def run_experiment(manifest: ExperimentManifest, resume: bool = True) -> ExperimentResults:
    """Run every sign x patch x schedule-fraction cell; errors stay inside their cells."""
    out = Path(manifest.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.json").write_text(json.dumps(_manifest_summary(manifest), indent=2, sort_keys=True),
                                         encoding="utf-8")
    oracle = build_oracle(manifest.classifier, None)
    patches = _load_patches(manifest)

    groups = []
    failed: list[Cell] = []
    for entry in manifest.signs:
        try:
            sign, mask = _prepare_sign(manifest, entry, out)
        except (OSError, ValueError, SnowballError) as exc:
            msg = f"{type(exc).__name__}: {exc}"
            failed += [Cell(entry.name, p.name, f, error=msg) for f in manifest.schedule for p in manifest.patches]
            continue
        groups += [(entry, sign, mask, f) for f in manifest.schedule]

    def work(group) -> list[Cell]:
        entry, sign, mask, fraction = group
        try:
            return _run_group(manifest, out, oracle, entry, sign, mask, patches, fraction, resume)
        except SnowballError as exc:
            msg = f"{type(exc).__name__}: {exc}"
            cells = [Cell(entry.name, p.name, fraction, error=msg) for p in manifest.patches]
            for c in cells:
                _write_cell(out, c, manifest.seed)
            return cells

    workers = 1 if getattr(oracle, "serial_only", False) else manifest.workers
    if workers > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(work, groups))
    else:
        batches = [work(g) for g in groups]

    for c in failed:
        _write_cell(out, c, manifest.seed)
    cells = {(c.sign, c.patch, fraction_key(c.fraction)): c for batch in batches for c in batch}
    cells.update({(c.sign, c.patch, fraction_key(c.fraction)): c for c in failed})
    return ExperimentResults(
        signs=[e.name for e in manifest.signs],
        patches=[p.name for p in manifest.patches],
        schedule=list(manifest.schedule),
        cells=cells,
        output_dir=out,
        seed=manifest.seed,
    )


def load_results(results_dir) -> ExperimentResults:
    out = Path(results_dir)
    summary = json.loads((out / "experiment.json").read_text(encoding="utf-8"))
    cells = {}
    for sign in summary["signs"]:
        for patch in summary["patches"]:
            for f in summary["schedule"]:
                cell = _read_cell(out, sign, patch, f, load_image=False)
                if cell is not None:
                    cells[(sign, patch, fraction_key(f))] = cell
    return ExperimentResults(summary["signs"], summary["patches"], [float(f) for f in summary["schedule"]],
                             cells, out, int(summary.get("seed", 0)))


# --------------------------------------------------------------------------
# Report formatting
# --------------------------------------------------------------------------

def round_half_away(value: float) -> int:
    return int(math.copysign(math.floor(abs(value) + 0.5), value))


def percent_delta(t: float, t_base: float) -> int:
    return round_half_away(100.0 * (t - t_base) / t_base)


def format_delta(t: float, t_base: float) -> str:
    d = percent_delta(t, t_base)
    return f"({'+' if d >= 0 else '-'}{abs(d)}%)"


def format_timing(t: float, t_base: float | None = None) -> str:
    """``"5110 (-9%)"`` style cell; the delta is dropped without a usable baseline."""
    text = str(round_half_away(t))
    if t_base is None or t_base <= 0:
        return text
    return f"{text} {format_delta(t, t_base)}"


def format_confidence(confidence: float) -> str:
    """Probability as a percent with two decimals, rounded half-up."""
    value = Decimal(repr(float(confidence))) * 100
    return str(value.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def _confidence_text(cell: Cell) -> str:
    if not cell.ok:
        return ERRORED
    r = cell.result
    return format_confidence(r.best.verdict.confidence) if r.success else FAILURE


def _label_text(cell: Cell) -> str:
    if not cell.ok:
        return ERRORED
    r = cell.result
    return r.best.verdict.label.name if r.success else FAILURE


def _timing_text(cell: Cell, base: Cell | None) -> str:
    if not cell.ok:
        return ERRORED
    base_t = base.result.elapsed if base is not None and base.ok else None
    return format_timing(cell.result.elapsed, base_t)


def _evaluation_text(cell: Cell, base: Cell | None) -> str:
    if not cell.ok:
        return ERRORED
    base_n = base.result.evaluations if base is not None and base.ok else None
    return format_timing(cell.result.evaluations, base_n)


def build_tables(results: ExperimentResults) -> dict[str, list[list[str]]]:
    """Tables keyed by file stem, each a header row followed by one row per sign."""
    header = ["Adversarial Image"] + list(results.patches)
    base = min(results.schedule, key=lambda f: abs(f - 1.0))

    def table(fn, fraction, with_base=False):
        rows = [header]
        for s in results.signs:
            row = [s]
            for p in results.patches:
                cell = results.cell(s, p, fraction)
                row.append(fn(cell, results.cell(s, p, base)) if with_base else fn(cell))
            rows.append(row)
        return rows

    tables = {
        "confidence": table(_confidence_text, base),
        "labels": table(_label_text, base),
    }
    for f in results.schedule:
        tables[f"timing_{fraction_key(f)}"] = table(
            (lambda c, b: _timing_text(c, None)) if f == base else _timing_text, f, with_base=True)
    return tables


def evaluation_tables(results: ExperimentResults) -> dict[str, list[list[str]]]:
    header = ["Adversarial Image"] + list(results.patches)
    base = min(results.schedule, key=lambda f: abs(f - 1.0))
    out = {}
    for f in results.schedule:
        rows = [header]
        for s in results.signs:
            rows.append([s] + [_evaluation_text(results.cell(s, p, f), None if f == base else results.cell(s, p, base))
                               for p in results.patches])
        out[f"evaluations_{fraction_key(f)}"] = rows
    return out


def _markdown(rows: list[list[str]]) -> str:
    lines = ["| " + " | ".join(rows[0]) + " |", "|" + "---|" * len(rows[0])]
    lines += ["| " + " | ".join(r) + " |" for r in rows[1:]]
    return "\n".join(lines)


_TITLES = {
    "confidence": "Confidence (%) of the adversarial images (- = no misclassifying placement)",
    "labels": "Predicted labels of the adversarial images",
}


def emit_tables(results: ExperimentResults, out_dir=None) -> list[Path]:
    """Write one CSV per table plus a combined ``report.md``; returns the CSV paths."""
    out = Path(out_dir or results.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tables = build_tables(results)
    paths = []
    for stem, rows in tables.items():
        path = out / f"{stem}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerows(rows)
        paths.append(path)

    sections = ["# Snowball attack report", ""]
    for stem, rows in tables.items():
        if stem.startswith("timing_"):
            f = stem.split("_", 1)[1]
            title = (f"Search time (s) at {float(f) * 100:.0f}% of the mask area"
                     + ("" if float(f) == 1.0 else "; lower value and negative % are better"))
        else:
            title = _TITLES[stem]
        sections += [f"## {title}", "", _markdown(rows), ""]
    for stem, rows in evaluation_tables(results).items():
        f = stem.split("_", 1)[1]
        sections += [f"## Oracle queries at {float(f) * 100:.0f}% of the mask area", "", _markdown(rows), ""]
    errors = [(k, c.failure_text) for k, c in sorted(results.cells.items()) if not c.ok]
    if errors:
        sections += ["## Errored cells", ""] + [f"- {s}/{p}/{f}: {msg}" for (s, p, f), msg in errors] + [""]
    (out / "report.md").write_text("\n".join(sections), encoding="utf-8")
    return paths
