"""Dice, Hausdorff distance and report aggregation.

Empty-set policy: Dice of two empty masks is 1; Hausdorff with either set
empty is undefined (``None``) and excluded from means.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

_CROSS = ndimage.generate_binary_structure(2, 1)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    return p, g


def dice(pred, gt) -> float:
    p, g = _pair(pred, gt)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels removed by one 4-connected erosion (outside the image counts as background)."""
    m = np.asarray(mask, dtype=bool)
    return m & ~ndimage.binary_erosion(m, structure=_CROSS, border_value=0)


def directed_distances(a: np.ndarray, b: np.ndarray, spacing: float = 1.0) -> np.ndarray:
    """Distance from every boundary pixel of ``a`` to the nearest boundary pixel of ``b``."""
    ba, bb = boundary(a), boundary(b)
    field_ = ndimage.distance_transform_edt(~bb)
    return field_[ba] * spacing


def hausdorff(pred, gt, percentile: float = 100.0, spacing: float = 1.0) -> float | None:
    """Symmetric boundary Hausdorff distance in pixels (times ``spacing``).

    ``percentile=100`` is the max distance; smaller values give e.g. HD95
    over the pooled directed distances.
    """
    p, g = _pair(pred, gt)
    if not p.any() or not g.any():
        return None
    d_pg = directed_distances(p, g, spacing)
    d_gp = directed_distances(g, p, spacing)
    if percentile >= 100:
        return float(max(d_pg.max(), d_gp.max()))
    return float(np.percentile(np.concatenate([d_pg, d_gp]), percentile))


@dataclass
class MetricRow:
    method: str
    stage: int
    domain_id: int
    category: int
    dice: float
    hd: float | None
    n: int = 1
    n_hd_undefined: int = 0


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class MetricsReport:
    rows: list[MetricRow]
    category_dice: dict[int, float] = field(default_factory=dict)
    category_hd: dict[int, float | None] = field(default_factory=dict)
    mean_dice: float = 0.0
    mean_hd: float | None = None
    hd_undefined: int = 0

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "category_dice": {str(k): v for k, v in self.category_dice.items()},
            "category_hd": {str(k): v for k, v in self.category_hd.items()},
            "mean_dice": self.mean_dice,
            "mean_hd": self.mean_hd,
            "hd_undefined": self.hd_undefined,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            rows=[MetricRow(**r) for r in d["rows"]],
            category_dice={int(k): v for k, v in d["category_dice"].items()},
            category_hd={int(k): v for k, v in d["category_hd"].items()},
            mean_dice=d["mean_dice"],
            mean_hd=d["mean_hd"],
            hd_undefined=d["hd_undefined"],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def dice_of(self, categories) -> float:
        return float(np.mean([self.category_dice[c] for c in categories]))


def aggregate(rows: list[MetricRow]) -> MetricsReport:
    """Per-category means across domains, then the grand mean across categories."""
    if not rows:
        raise ValueError("cannot aggregate an empty list of rows")
    cats = sorted({r.category for r in rows})
    cat_dice = {c: _mean([r.dice for r in rows if r.category == c]) for c in cats}
    cat_hd = {c: _mean([r.hd for r in rows if r.category == c]) for c in cats}
    return MetricsReport(
        rows=list(rows),
        category_dice=cat_dice,
        category_hd=cat_hd,
        mean_dice=_mean(cat_dice.values()),
        mean_hd=_mean(cat_hd.values()),
        hd_undefined=sum(r.n_hd_undefined for r in rows),
    )


def score_masks(pred: np.ndarray, gt: np.ndarray, domain_ids: np.ndarray, categories, method: str = "",
                stage: int = 0, percentile: float = 100.0, spacing: float = 1.0) -> MetricsReport:
    """Per-(domain, category) rows from per-sample Dice/HD, then aggregated.

    ``pred`` and ``gt`` are category-id maps [N, H, W].
    """
    rows = []
    for d in sorted(int(x) for x in np.unique(domain_ids)):
        idx = np.flatnonzero(domain_ids == d)
        for c in categories:
            dices, hds = [], []
            for i in idx:
                p, g = pred[i] == c, gt[i] == c
                dices.append(dice(p, g))
                hds.append(hausdorff(p, g, percentile, spacing))
            undefined = sum(h is None for h in hds)
            rows.append(MetricRow(method, stage, d, int(c), float(np.mean(dices)), _mean(hds),
                                  len(idx), undefined))
    return aggregate(rows)
