"""Turn an annotation time budget into image counts per label format."""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import asdict, dataclass, field

from .weak_labels import AnnotationCost, WeakKind

LABEL_KINDS = ("polygon", "tight", "loose", "coarse", "tag")
WEAK_KINDS = LABEL_KINDS[1:]


class PolicyKind(str, enum.Enum):
    STRONG = "strong"
    EQUAL_TIME = "equal_time"
    EQUAL_NUMBER = "equal_number"
    MIXED_FRACTION = "mixed_fraction"

    @classmethod
    def parse(cls, value) -> PolicyKind:
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "_")
        aliases = {"equaltime": "equal_time", "equalnumber": "equal_number", "mixedfraction": "mixed_fraction"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(
                f"unknown policy {value!r}; expected one of {[k.value for k in cls]}"
            ) from None


@dataclass(frozen=True)
class AnnotationPolicy:
    kind: PolicyKind
    poly_fraction: float | None = None
    weak_kind: WeakKind | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind.parse(self.kind))
        if self.kind is PolicyKind.MIXED_FRACTION:
            if self.poly_fraction is None or not 0.0 < self.poly_fraction < 1.0:
                raise ValueError("mixed_fraction needs poly_fraction in (0, 1)")
            if self.weak_kind is None:
                raise ValueError("mixed_fraction needs a weak_kind")
            object.__setattr__(self, "weak_kind", WeakKind.parse(self.weak_kind))


@dataclass
class Allocation:
    polygon: int = 0
    tight: int = 0
    loose: int = 0
    coarse: int = 0
    tag: int = 0
    total_cost: float = 0.0
    # set when the budget could not buy what the policy asked for
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        for k in LABEL_KINDS:
            if getattr(self, k) < 0:
                raise ValueError(f"negative count for {k}")

    def counts(self) -> dict[str, int]:
        return {k: getattr(self, k) for k in LABEL_KINDS}

    @property
    def n_images(self) -> int:
        return sum(self.counts().values())

    def to_json(self) -> dict:
        return asdict(self)


def estimate_cost(allocation: Allocation, costs: AnnotationCost = AnnotationCost()) -> float:
    unit = costs.as_dict()
    return float(sum(n * unit[k] for k, n in allocation.counts().items()))


def _buy(amount: float, unit: float) -> int:
    return max(0, math.floor(amount / unit))


def plan(
    policy: AnnotationPolicy,
    budget: float,
    costs: AnnotationCost = AnnotationCost(),
    strong_base: int = 0,
) -> Allocation:
    """Allocate ``budget`` seconds according to ``policy``.

    Counts are floored. EqualTime and EqualNumber first buy ``strong_base``
    polygon images and spend the rest on weak labels. If the budget cannot
    cover the base, it all goes to polygons and a warning is set. The
    MixedFraction remainder is ``(1 - poly_fraction) * budget``, so any
    rounding slack on the polygon side stays unspent.
    """
    if not budget > 0:
        raise ValueError("budget must be positive")
    if strong_base < 0:
        raise ValueError("strong_base must be non-negative")
    unit = costs.as_dict()
    alloc = Allocation()

    if policy.kind is PolicyKind.STRONG:
        alloc.polygon = _buy(budget, unit["polygon"])
        if alloc.polygon == 0:
            alloc.warnings.append("budget is below the cost of one polygon image")
    elif policy.kind is PolicyKind.MIXED_FRACTION:
        poly_share = policy.poly_fraction * budget
        alloc.polygon = _buy(poly_share, unit["polygon"])
        kind = policy.weak_kind.value
        # budget - share is exact where (1 - f) * budget picks up rounding dust
        setattr(alloc, kind, _buy(budget - poly_share, unit[kind]))
    else:
        alloc.polygon = min(strong_base, _buy(budget, unit["polygon"]))
        remaining = budget - strong_base * unit["polygon"]
        if remaining < 0:
            # weak labels only start once the polygon base is paid for, which
            # keeps every count monotone in the budget
            alloc.warnings.append(f"budget covers only {alloc.polygon} of {strong_base} polygon images")
            remaining = 0.0
        if policy.kind is PolicyKind.EQUAL_TIME:
            for k in WEAK_KINDS:
                setattr(alloc, k, _buy(remaining / len(WEAK_KINDS), unit[k]))
        else:
            n = _buy(remaining, sum(unit[k] for k in WEAK_KINDS))
            for k in WEAK_KINDS:
                setattr(alloc, k, n)
    alloc.total_cost = estimate_cost(alloc, costs)
    return alloc


def cost_table(rows: list[tuple[str, Allocation]], costs: AnnotationCost = AnnotationCost()) -> str:
    """CSV with one row per policy: counts per format, total images and seconds."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["policy", *LABEL_KINDS, "images", "cost_s", "allocation"])
    for name, a in rows:
        mix = "+".join(str(getattr(a, k)) for k in LABEL_KINDS if getattr(a, k))
        w.writerow([name, *a.counts().values(), a.n_images, f"{estimate_cost(a, costs):.1f}", mix or "0"])
    return buf.getvalue()
