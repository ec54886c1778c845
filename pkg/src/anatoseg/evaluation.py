"""Dice scoring, anatomy-violation metrics, split evaluation and the ablation harness."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .diffops import ShapeError
from .synthdata import SampleCache, SampleRecord, load_manifest, read_mask, write_mask
from .taxonomy import LEVELS, PropositionMatrix, Relation, TaxonomyGraph, infer_matrix, load_taxonomy, write_taxonomy

ARMS = ("full", "no-anatomy-loss", "no-token")


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """100 * 2|P & G| / (|P| + |G|); two empty masks score 100."""
    p, g = np.asarray(pred) > 0.5, np.asarray(gt) > 0.5
    if p.shape != g.shape:
        raise ShapeError(f"mask shape mismatch: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 100.0
    return 100.0 * 2 * int((p & g).sum()) / denom


def _index(key, names: Sequence[str]) -> int:
    return names.index(key) if isinstance(key, str) else int(key)


def violation_metrics(preds: Mapping, matrix: PropositionMatrix) -> dict[tuple[str, int, int], float]:
    """Leak for every superset pair and overlap for every exclusive pair.

    Keys are ``("leak", i, j)`` with i containing j, and ``("overlap", i, j)``
    with i < j.  Classes missing from ``preds`` are skipped.
    """
    masks = {_index(k, matrix.names): np.asarray(v) > 0.5 for k, v in preds.items()}
    shapes = {m.shape for m in masks.values()}
    if len(shapes) > 1:
        raise ShapeError(f"prediction masks differ in shape: {sorted(shapes)}")
    out = {}
    for i in sorted(masks):
        for j in sorted(masks):
            if i == j:
                continue
            code = matrix.cells[i, j]
            if code == Relation.SUPERSET:
                pj = masks[j]
                out[("leak", i, j)] = float((pj & ~masks[i]).sum()) / max(int(pj.sum()), 1)
            elif code == Relation.EXCLUSIVE and i < j:
                inter = int((masks[i] & masks[j]).sum())
                out[("overlap", i, j)] = inter / max(min(int(masks[i].sum()), int(masks[j].sum())), 1)
    return out


def summarize_violations(values: Sequence[dict]) -> tuple[dict, float, float]:
    """Average per-pair metrics over groups; return (per pair, mean leak, mean overlap)."""
    acc: dict = {}
    for v in values:
        for k, x in v.items():
            acc.setdefault(k, []).append(x)
    per_pair = {k: float(np.mean(x)) for k, x in sorted(acc.items())}
    leaks = [x for k, x in per_pair.items() if k[0] == "leak"]
    overlaps = [x for k, x in per_pair.items() if k[0] == "overlap"]
    return per_pair, float(np.mean(leaks)) if leaks else 0.0, float(np.mean(overlaps)) if overlaps else 0.0


def pair_label(key: tuple[str, int, int], names: Sequence[str]) -> str:
    kind, i, j = key
    sep = ">" if kind == "leak" else "|"
    return f"{kind}:{names[i]}{sep}{names[j]}"


# ---------------------------------------------------------------------------
# reports

def fingerprint(config: Mapping, taxonomy: TaxonomyGraph) -> str:
    blob = json.dumps({k: config[k] for k in sorted(config)}, sort_keys=True) + write_taxonomy(taxonomy)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class EvalReport:
    per_class: dict[str, float]
    per_level: dict[str, float]
    mean_dice: float
    violations: dict[str, float]
    mean_leak: float
    mean_overlap: float
    fingerprint: str
    seed: int
    split: str = "test"

    def to_dict(self) -> dict:
        r = lambda x: round(float(x), 6)
        return {
            "split": self.split,
            "seed": self.seed,
            "fingerprint": self.fingerprint,
            "mean_dice": r(self.mean_dice),
            "per_class_dice": {k: r(v) for k, v in self.per_class.items()},
            "per_level_dice": {k: r(v) for k, v in self.per_level.items()},
            "mean_leak": r(self.mean_leak),
            "mean_overlap": r(self.mean_overlap),
            "violations": {k: r(v) for k, v in sorted(self.violations.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "key", "value"])
        for k, v in self.per_class.items():
            w.writerow(["dice", k, f"{v:.6f}"])
        for k, v in self.per_level.items():
            w.writerow(["level_dice", k, f"{v:.6f}"])
        w.writerow(["mean_dice", "all", f"{self.mean_dice:.6f}"])
        for k, v in sorted(self.violations.items()):
            w.writerow(["violation", k, f"{v:.6f}"])
        w.writerow(["mean_leak", "all", f"{self.mean_leak:.6f}"])
        w.writerow(["mean_overlap", "all", f"{self.mean_overlap:.6f}"])
        return buf.getvalue()

    def write(self, out_dir: str | Path, stem: str = "eval") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_json(), encoding="utf-8")
        (out / f"{stem}.csv").write_text(self.to_csv(), encoding="utf-8")


def level_means(per_class: Mapping[str, float], taxonomy: TaxonomyGraph) -> dict[str, float]:
    out = {}
    for level in LEVELS:
        vals = [per_class[c.name] for c in taxonomy.classes if c.level == level and c.name in per_class]
        if vals:
            out[level] = float(np.mean(vals))
    return out


def evaluate(bundle, data_root: str | Path, split: str = "test", records: Sequence[SampleRecord] | None = None,
             dump_dir: str | Path | None = None) -> EvalReport:
    """Score a model on one split.

    Dice uses each record's own image and scale.  Violations use, for every
    scene and scale, one image with all classes predicted at that scale.
    """
    taxonomy = bundle.taxonomy
    matrix = infer_matrix(taxonomy)
    cache = SampleCache(data_root)
    records = [r for r in (records if records is not None else load_manifest(data_root)) if r.split == split]
    if not records:
        raise ValueError(f"no records in split {split!r}")
    dices: dict[int, list[float]] = {}
    groups: dict[tuple[int, int], SampleRecord] = {}
    for rec in records:
        pred = bundle.predict_mask(cache.image(rec)[None], [rec.class_id], [rec.scale_id])[0]
        dices.setdefault(rec.class_id, []).append(dice_score(pred, cache.mask(rec)))
        groups.setdefault((rec.scene, rec.scale_id), rec)
        if dump_dir is not None:
            d = Path(dump_dir)
            d.mkdir(parents=True, exist_ok=True)
            write_mask(d / Path(rec.image).name, pred)
    viol = []
    all_ids = list(range(taxonomy.n))
    for (_, scale), rec in sorted(groups.items()):
        img = np.repeat(cache.image(rec)[None], taxonomy.n, axis=0)
        masks = bundle.predict_mask(img, all_ids, [scale] * taxonomy.n)
        viol.append(violation_metrics(dict(enumerate(masks)), matrix))
    per_pair, mean_leak, mean_overlap = summarize_violations(viol)
    per_class = {taxonomy.names[c]: float(np.mean(v)) for c, v in sorted(dices.items())}
    cfg = bundle.config.to_mapping()
    return EvalReport(
        per_class=per_class,
        per_level=level_means(per_class, taxonomy),
        mean_dice=float(np.mean(list(per_class.values()))),
        violations={pair_label(k, taxonomy.names): v for k, v in per_pair.items()},
        mean_leak=mean_leak,
        mean_overlap=mean_overlap,
        fingerprint=fingerprint(cfg, taxonomy),
        seed=bundle.config.seed,
        split=split,
    )


# ---------------------------------------------------------------------------
# anatomy QC on mask directories

def check_anatomy(mask_dir: str | Path, taxonomy: TaxonomyGraph | None = None) -> dict:
    """Violation report for ``<dir>/<group>/<class>.png`` (or class PNGs directly in ``dir``)."""
    taxonomy = taxonomy or load_taxonomy()
    matrix = infer_matrix(taxonomy)
    root = Path(mask_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"no such directory: {root}")
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if any(root.glob("*.png")):
        dirs = [root] + dirs
    groups = {}
    for d in dirs:
        masks = {c.name: read_mask(d / f"{c.name}.png") for c in taxonomy.classes if (d / f"{c.name}.png").exists()}
        if masks:
            v = violation_metrics(masks, matrix)
            groups[d.name if d != root else "."] = {pair_label(k, taxonomy.names): round(x, 6) for k, x in v.items()}
    if not groups:
        raise ValueError(f"no class masks found under {root}")
    worst = max((x for g in groups.values() for x in g.values()), default=0.0)
    return {"groups": groups, "n_groups": len(groups), "max_violation": worst}


# ---------------------------------------------------------------------------
# tiled inference

def predict_tiled(bundle, image: np.ndarray, class_id: int, scale_id: int, tile: int = 128) -> np.ndarray:
    """Binary mask for a (3, H, W) image using non-overlapping tiles, zero-padded at the border."""
    if image.ndim != 3:
        raise ShapeError("image must be (3, H, W)")
    _, h, w = image.shape
    ph, pw = -h % tile, -w % tile
    padded = np.pad(image, ((0, 0), (0, ph), (0, pw)))
    out = np.zeros(padded.shape[1:], np.uint8)
    for r in range(0, padded.shape[1], tile):
        for c in range(0, padded.shape[2], tile):
            crop = padded[None, :, r:r + tile, c:c + tile]
            out[r:r + tile, c:c + tile] = bundle.predict_mask(crop, [class_id], [scale_id])[0]
    return out[:h, :w]


# ---------------------------------------------------------------------------
# ablation

def arm_config(base, arm: str, seed: int):
    if arm == "full":
        return replace(base, seed=seed)
    if arm == "no-anatomy-loss":
        return replace(base, seed=seed, lambda_hats=0.0)
    if arm == "no-token":
        return replace(base, seed=seed, conditioning="onehot")
    raise ValueError(f"unknown arm {arm!r}; expected one of {ARMS}")


@dataclass
class AblationResult:
    rows: list[dict] = field(default_factory=list)

    def summary(self) -> dict[str, dict]:
        out = {}
        for arm in dict.fromkeys(r["arm"] for r in self.rows):
            ok = [r for r in self.rows if r["arm"] == arm and r["status"] == "ok"]
            stats = {"n_ok": len(ok), "n_failed": sum(r["arm"] == arm for r in self.rows) - len(ok)}
            keys = [k for k in (ok[0] if ok else {}) if isinstance(ok[0][k], float)]
            for k in keys:
                vals = np.array([r[k] for r in ok])
                stats[k] = (float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0)
            out[arm] = stats
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        keys = list(dict.fromkeys(k for r in self.rows for k in r))
        w = csv.DictWriter(buf, keys, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
        buf.write("\n")
        w2 = csv.writer(buf, lineterminator="\n")
        w2.writerow(["arm", "metric", "mean", "sd"])
        for arm, stats in self.summary().items():
            for k, v in stats.items():
                if isinstance(v, tuple):
                    w2.writerow([arm, k, f"{v[0]:.6f}", f"{v[1]:.6f}"])
        return buf.getvalue()


def run_ablation(data_root: str | Path, base_cfg, seeds: Sequence[int] = (0, 1, 2), arms: Sequence[str] = ARMS,
                 taxonomy: TaxonomyGraph | None = None, out_dir: str | Path | None = None) -> AblationResult:
    """Train every arm on every seed and score it on the test split; failed runs stay in the table."""
    from .training import TrainingError, train

    if len(seeds) < 3:
        raise ValueError("the ablation needs at least 3 seeds")
    taxonomy = taxonomy or load_taxonomy()
    result = AblationResult()
    for arm in arms:
        for seed in seeds:
            cfg = arm_config(base_cfg, arm, seed)
            run_dir = Path(out_dir) / f"{arm}_seed{seed}" if out_dir is not None else None
            row = {"arm": arm, "seed": seed, "status": "ok"}
            try:
                bundle, res = train(data_root, cfg, taxonomy, run_dir)
                rep = evaluate(bundle, data_root, "test")
            except TrainingError as exc:
                row["status"] = f"failed: {exc}"
                result.rows.append(row)
                continue
            row["mean_dice"] = rep.mean_dice
            for level in LEVELS:
                if level in rep.per_level:
                    row[f"dice_{level}"] = rep.per_level[level]
            row["mean_leak"] = rep.mean_leak
            row["mean_overlap"] = rep.mean_overlap
            row["best_epoch"] = res["best_epoch"]
            result.rows.append(row)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.csv").write_text(result.to_csv(), encoding="utf-8")
    return result
