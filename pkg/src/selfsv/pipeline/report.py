"""Experiment report: per-iteration and per-system EER/minDCF, raw and
ZT-normalized, with the configuration and seeds that produced them."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import List, Optional

from ..core import SCORE_FORMAT
from ..metrics import rel_delta

COLUMNS = ("kind", "system", "iteration", "network", "eer_raw", "eer_zt", "mindcf_raw",
           "mindcf_zt")


@dataclass(frozen=True)
class ReportRow:
    kind: str  # baseline | stage1 | stage2 | fusion-member | fusion
    system: str
    iteration: int
    network: str
    eer_raw: float
    eer_zt: float
    mindcf_raw: float
    mindcf_zt: float


@dataclass
class ExperimentReport:
    rows: List[ReportRow] = field(default_factory=list)
    meta: List[tuple] = field(default_factory=list)  # (key, value) strings

    def add(self, row: ReportRow) -> None:
        self.rows.append(row)

    def find(self, kind: str, iteration: Optional[int] = None, network: Optional[str] = None):
        return [r for r in self.rows if r.kind == kind
                and (iteration is None or r.iteration == iteration)
                and (network is None or r.network == network)]

    def eer_series(self, network: str, normed: bool = False) -> List[float]:
        """Iteration-ordered EER of one network, iteration 0 (stage 1) first."""
        rows = self.find("stage1") + self.find("stage2", network=network)
        rows.sort(key=lambda r: r.iteration)
        return [r.eer_zt if normed else r.eer_raw for r in rows]

    def to_tsv(self) -> str:
        out = [f"# {k} = {v}" for k, v in self.meta]
        out.append("\t".join(COLUMNS))
        for r in self.rows:
            vals = []
            for f in fields(ReportRow):
                v = getattr(r, f.name)
                vals.append(format(v, SCORE_FORMAT) if isinstance(v, float) else str(v))
            out.append("\t".join(vals))
        return "\n".join(out) + "\n"

    @classmethod
    def from_tsv(cls, text: str) -> "ExperimentReport":
        report = cls()
        header_seen = False
        for line in text.splitlines():
            if line.startswith("# "):
                key, _, value = line[2:].partition(" = ")
                report.meta.append((key, value))
            elif not header_seen:
                if tuple(line.split("\t")) != COLUMNS:
                    raise ValueError("report TSV header mismatch")
                header_seen = True
            elif line:
                c = line.split("\t")
                report.rows.append(ReportRow(c[0], c[1], int(c[2]), c[3], float(c[4]),
                                             float(c[5]), float(c[6]), float(c[7])))
        return report

    def to_text(self) -> str:
        """Human-readable tables (EER in percent)."""
        lines = ["Iterative clustering (EER %)",
                 f"{'system':<12}{'iter':>5}{'EER':>9}{'EER zt':>9}{'minDCF':>9}"
                 f"{'minDCF zt':>11}{'delta %':>9}"]
        prev = {}
        for r in self.rows:
            if r.kind not in ("baseline", "stage1", "stage2"):
                continue
            key = r.network or "-"
            delta = ""
            if r.kind == "stage2":
                base = prev.get(key, prev.get("-"))
                if base:
                    delta = f"{rel_delta(base, r.eer_raw):.1f}"
            if r.kind == "stage1":
                prev = {"-": r.eer_raw}
            elif r.kind == "stage2":
                prev[key] = r.eer_raw
            lines.append(f"{r.system:<12}{r.iteration:>5}{100 * r.eer_raw:>9.3f}"
                         f"{100 * r.eer_zt:>9.3f}{r.mindcf_raw:>9.4f}{r.mindcf_zt:>11.4f}"
                         f"{delta:>9}")
        fusion = [r for r in self.rows if r.kind in ("fusion-member", "fusion")]
        if fusion:
            lines += ["", "Fusion (EER %)", f"{'system':<14}{'EER':>9}{'EER zt':>9}"]
            for r in fusion:
                name = "fusion" if r.kind == "fusion" else r.system
                lines.append(f"{name:<14}{100 * r.eer_raw:>9.3f}{100 * r.eer_zt:>9.3f}")
        if self.meta:
            lines += ["", "Settings"] + [f"  {k} = {v}" for k, v in self.meta]
        return "\n".join(lines) + "\n"
