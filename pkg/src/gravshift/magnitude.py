"""Translate a coefficient and two cross-sectional SDs into an explained share.

A one-SD difference in the annualized regressor moves the annualized
outcome by ``sd_x * coefficient * scale`` per year.  Both that effect and the
outcome SD are multiplied by the outcome-period length, and their ratio is
the explained share.  Amounts are in percent throughout.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field


class MagnitudeError(ValueError):
    pass


@dataclass(frozen=True)
class MagnitudeInput:
    coefficient: float
    sd_x: float
    sd_y: float
    years_x: int = 6
    years_y: int = 6
    scale: float = 1.0

    def __post_init__(self) -> None:
        if not (self.sd_x > 0 and self.sd_y > 0):
            raise MagnitudeError(f"standard deviations must be positive (sd_x={self.sd_x}, sd_y={self.sd_y})")
        if self.years_x < 1 or self.years_y < 1:
            raise MagnitudeError("horizons must be at least one year")


@dataclass(frozen=True)
class MagnitudeResult:
    effect_per_year: float
    cumulative_effect: float
    cumulative_sd: float
    share_pct: float
    direction: str

    def sentence(self, years_y: int) -> str:
        verb = "rise" if self.direction == "rise" else "drop"
        return (f"a one-SD difference in the regressor makes the outcome {verb} "
                f"{abs(self.effect_per_year):.3f}% per year, {abs(self.cumulative_effect):.3f}% over "
                f"{years_y} years, against an outcome SD of {self.cumulative_sd:.3f}%: "
                f"{self.share_pct:.2f}% explained")


def explained_share(inp: MagnitudeInput) -> MagnitudeResult:
    """Share (in percent, unsigned) of one outcome SD explained by one regressor SD."""
    per_year = inp.sd_x * inp.coefficient * inp.scale
    cumulative = per_year * inp.years_y
    cum_sd = inp.sd_y * inp.years_y
    share = 100.0 * abs(cumulative) / cum_sd
    return MagnitudeResult(per_year, cumulative, cum_sd, share, "drop" if per_year < 0 else "rise")


@dataclass(frozen=True)
class Discrepancy:
    quantity: str
    printed: float
    recomputed: float


def audit(result: MagnitudeResult, printed: dict[str, float], rel_tol: float = 0.02,
          abs_tol: float = 0.0015) -> list[Discrepancy]:
    """Compare printed intermediate values against the recomputed chain.

    ``printed`` may hold ``effect_per_year``, ``cumulative_effect``,
    ``cumulative_sd`` and ``share_pct``; signs are ignored.  A value is
    flagged when it differs by more than both tolerances.
    """
    out = []
    for key, value in printed.items():
        ref = getattr(result, key, None)
        if ref is None:
            raise MagnitudeError(f"unknown chain quantity {key!r}")
        diff = abs(abs(value) - abs(ref))
        if diff > abs_tol and diff > rel_tol * abs(ref):
            out.append(Discrepancy(key, value, ref))
    return out


@dataclass
class PairReport:
    boom: MagnitudeResult
    bust: MagnitudeResult
    boom_input: MagnitudeInput
    bust_input: MagnitudeInput
    flags: list[Discrepancy] = field(default_factory=list)

    def sentences(self) -> list[str]:
        return [f"boom: {self.boom.sentence(self.boom_input.years_y)}",
                f"bust: {self.bust.sentence(self.bust_input.years_y)}"]

    def to_json(self) -> str:
        return json.dumps(asdict(self) | {"sentences": self.sentences()}, indent=2, sort_keys=True)


def boom_bust_pair(boom: MagnitudeInput, bust: MagnitudeInput, printed_boom: dict[str, float] | None = None,
                   printed_bust: dict[str, float] | None = None) -> PairReport:
    """Explained shares for a boom and a bust window, with optional audit of
    printed intermediate values (flagged values are recomputed, never copied)."""
    rb, rs = explained_share(boom), explained_share(bust)
    flags = []
    if printed_boom:
        flags += [Discrepancy(f"boom.{d.quantity}", d.printed, d.recomputed) for d in audit(rb, printed_boom)]
    if printed_bust:
        flags += [Discrepancy(f"bust.{d.quantity}", d.printed, d.recomputed) for d in audit(rs, printed_bust)]
    return PairReport(rb, rs, boom, bust, flags)
