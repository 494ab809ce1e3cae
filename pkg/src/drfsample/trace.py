"""Per-step and per-iteration run records."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def latent_stats(z) -> dict:
    z = np.asarray(z)
    return {
        "z_mean": float(np.mean(z)),
        "z_std": float(np.std(z)),
        "z_norm": float(np.linalg.norm(z.ravel())),
    }


@dataclass
class RunTrace:
    """Ordered list of flat JSON-serialisable records.

    Step records carry ``"kind": "step"``; DRF iteration records carry
    ``"kind": "drf_iter"`` and are interleaved at the step that produced them.
    """

    records: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, kind, **fields):
        rec = {"kind": kind, **fields}
        self.records.append(rec)
        return rec

    def of_kind(self, kind):
        return [r for r in self.records if r["kind"] == kind]

    def extend(self, other: "RunTrace"):
        self.records.extend(other.records)

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, RunTrace):
            return NotImplemented
        return self.to_jsonl() == other.to_jsonl() and self.meta == other.meta

    def to_jsonl(self) -> str:
        """JSON lines; a leading ``"kind": "meta"`` record holds :attr:`meta` when set."""
        head = [{"kind": "meta", **self.meta}] if self.meta else []
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in head + self.records)

    def write_jsonl(self, path):
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read_jsonl(cls, path):
        records = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        meta = {}
        if records and records[0]["kind"] == "meta":
            meta = records.pop(0)
            meta.pop("kind")
        return cls(records=records, meta=meta)

    def write_summary_csv(self, path):
        """One row per step: latent statistics plus DRF iteration aggregates."""
        iters = {}
        for r in self.of_kind("drf_iter"):
            iters.setdefault(r["step"], []).append(r)
        cols = ["step", "t", "t_prev", "z_mean", "z_std", "z_norm",
                "drf_iters", "L_app_first", "L_app_last", "L_drf_last"]
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in self.of_kind("step"):
                it = iters.get(r["step"], [])
                w.writerow({
                    "step": r["step"], "t": r["t"], "t_prev": r["t_prev"],
                    "z_mean": r["z_mean"], "z_std": r["z_std"], "z_norm": r["z_norm"],
                    "drf_iters": len(it),
                    "L_app_first": it[0]["L_app"] if it else "",
                    "L_app_last": it[-1]["L_app"] if it else "",
                    "L_drf_last": it[-1]["L_drf"] if it else "",
                })
