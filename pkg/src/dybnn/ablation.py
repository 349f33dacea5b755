"""Static vs. dynamic activation ablation over several seeds.

Each (variant, seed) pair is trained with the same protocol and data; the
final test top-1 of every run is appended to a JSON results file as soon as
the run finishes, so an interrupted ablation resumes where it stopped.

The verdict asks for two things: mean accuracy ordered
``static <= dynamic-sign-only <= dynamic``, and the fully dynamic mean ahead
of the static mean by more than the pooled standard deviation of those two
groups (sample standard deviations, equal group sizes).
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import load_config
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

VARIANTS = ("static", "dynamic-sign-only", "dynamic")


@dataclass(frozen=True)
class AblationSettings:
    backbone: str = "cifar"
    seeds: tuple = (0, 1, 2, 3, 4)
    variants: tuple = VARIANTS
    train: dict = field(default_factory=dict)
    train_limit: int | None = None
    test_limit: int | None = None

    def train_config(self, seed) -> TrainConfig:
        return TrainConfig.from_dict({**self.train, "seed": seed})

    def to_dict(self):
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["variants"] = list(self.variants)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "seeds": tuple(d["seeds"]), "variants": tuple(d["variants"])})


def _load(path):
    if path and Path(path).exists():
        return json.loads(Path(path).read_text())
    return None


def run_ablation(settings: AblationSettings, train_data, test_data, results_path=None):
    """Train every (variant, seed) pair; returns the results document."""
    doc = _load(results_path)
    if doc is None or doc["settings"] != settings.to_dict():
        doc = {"settings": settings.to_dict(), "runs": []}
    done = {(r["variant"], r["seed"]) for r in doc["runs"]}
    if settings.train_limit:
        train_data = train_data.subset(settings.train_limit)
    if settings.test_limit:
        test_data = test_data.subset(settings.test_limit)
    for seed in settings.seeds:
        for variant in settings.variants:
            if (variant, seed) in done:
                continue
            cfg = load_config(f"{settings.backbone}-{variant}")
            start = time.time()
            _, metrics = train(cfg, train_data, test_data, settings.train_config(seed))
            final = [r for r in metrics.records if r["split"] == "test"][-1]
            run = {"variant": variant, "seed": seed, "top1": final["top1"], "loss": final["loss"],
                   "seconds": round(time.time() - start, 1), "records": metrics.records}
            doc["runs"].append(run)
            log.info("%s seed=%d top1=%.4f (%.0fs)", variant, seed, final["top1"], run["seconds"])
            if results_path:
                Path(results_path).write_text(json.dumps(doc, indent=1))
    return doc


@dataclass
class AblationSummary:
    means: dict
    stds: dict
    counts: dict
    pooled_std: float
    margin: float
    ordered: bool
    margin_ok: bool

    @property
    def passed(self) -> bool:
        return self.ordered and self.margin_ok

    def lines(self):
        out = [f"{v:<18} n={self.counts[v]}  mean={self.means[v]:.4f}  std={self.stds[v]:.4f}"
               for v in self.means]
        out.append(f"dynamic - static = {self.margin:+.4f}, pooled std = {self.pooled_std:.4f}")
        out.append(f"ordered={self.ordered} margin_ok={self.margin_ok}")
        return out


def summarize(doc) -> AblationSummary:
    variants = doc["settings"]["variants"]
    acc = {v: np.array([r["top1"] for r in doc["runs"] if r["variant"] == v]) for v in variants}
    means = {v: float(a.mean()) if a.size else float("nan") for v, a in acc.items()}
    stds = {v: float(a.std(ddof=1)) if a.size > 1 else float("nan") for v, a in acc.items()}
    pooled = float(np.sqrt((stds["static"] ** 2 + stds["dynamic"] ** 2) / 2))
    margin = means["dynamic"] - means["static"]
    ordered = means["static"] <= means["dynamic-sign-only"] <= means["dynamic"]
    return AblationSummary(means, stds, {v: int(a.size) for v, a in acc.items()}, pooled, margin,
                           bool(ordered), bool(margin > pooled))
