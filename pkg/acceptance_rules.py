"""
Acceptance rules evaluated over the tables of an experiment output directory
"""
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple
import logging
import math

import numpy as np

from exceptions import DataError
from field_io import read_table
from models import AcceptanceReport, RuleResult, SweepConfig

logger = logging.getLogger(__name__)

SEVERITY_WEIGHTS = {"error": 10, "warning": 5, "info": 2}


class AcceptanceRule:
    """One trend or threshold check"""

    def __init__(self, rule_id: str, name: str, description: str, severity: str = "error", table: str = "sweep"):
        self.rule_id = rule_id
        self.name = name
        self.description = description
        self.severity = severity  # "error", "warning", "info"
        self.table = table

    def to_dict(self) -> Dict[str, str]:
        return {
            "rule_id": self.rule_id,
            "name": self.name,
            "description": self.description,
            "severity": self.severity,
            "table": self.table,
        }


ACCEPTANCE_RULES = [
    # Reconstruction quality
    AcceptanceRule(
        rule_id="AR001",
        name="Multimodal Beats Unimodal",
        description="At every observed fraction, the noiseless-aux multimodal mean disorientation is strictly below every unimodal model's.",
        severity="error",
    ),
    AcceptanceRule(
        rule_id="AR002",
        name="Large Gap At 2 Percent",
        description="At the fraction closest to 2%, the best unimodal mean disorientation is at least twice the multimodal one.",
        severity="error",
    ),

    # Noise robustness
    AcceptanceRule(
        rule_id="AR003",
        name="Noise Robustness",
        description="At the fraction closest to 2%, the multimodal error at sigma = 0.05 is within 20% of the sigma = 0 error.",
        severity="warning",
    ),
    AcceptanceRule(
        rule_id="AR004",
        name="Error Nondecreasing In Noise",
        description="Multimodal error does not decrease from one sigma to the next by more than two paired standard errors.",
        severity="warning",
    ),

    # Generative quality
    AcceptanceRule(
        rule_id="AR005",
        name="Generated Modalities Consistent",
        description="Median relative l2 error between f(generated main) and generated aux is below the configured threshold.",
        severity="error",
        table="consistency",
    ),

    # Uncertainty
    AcceptanceRule(
        rule_id="AR006",
        name="Uncertainty Shrinks With Observations",
        description="The std of reconstruction error over posterior samples is lower at the largest fraction than at the smallest in at least 80% of observation sets.",
        severity="warning",
        table="uncertainty",
    ),
]

TABLE_FILES = {
    "sweep": "sweep_trials.csv",
    "consistency": "consistency.csv",
    "uncertainty": "uncertainty.csv",
}


def get_all_rules() -> List[Dict[str, str]]:
    """Get all acceptance rules as dictionaries"""
    return [rule.to_dict() for rule in ACCEPTANCE_RULES]


def get_rules_by_severity(severity: str) -> List[Dict[str, str]]:
    """Get acceptance rules filtered by severity"""
    return [rule.to_dict() for rule in ACCEPTANCE_RULES if rule.severity == severity]


# ---------------------------------------------------------------------------
# Sweep helpers
# ---------------------------------------------------------------------------

SweepValues = Dict[Tuple[str, float, float], Dict[int, float]]


def _sweep_values(rows: List[Dict[str, str]]) -> SweepValues:
    """(model, fraction, sigma) -> {trial: value}"""
    values: SweepValues = {}
    for row in rows:
        if row["metric"] != "disorientation_mean":
            continue
        key = (row["model"], float(row["fraction"]), float(row["sigma"]))
        values.setdefault(key, {})[int(row["trial"])] = float(row["value"])
    return values


def _mean(values: SweepValues, model: str, fraction: float, sigma: float) -> Optional[float]:
    trials = values.get((model, fraction, sigma))
    return float(np.mean(list(trials.values()))) if trials else None


def _axes(values: SweepValues) -> Tuple[List[float], List[float], List[str]]:
    fractions = sorted({key[1] for key in values})
    sigmas = sorted({key[2] for key in values})
    unimodal = sorted({key[0] for key in values if key[0].startswith("unimodal")})
    return fractions, sigmas, unimodal


def _closest(options: List[float], target: float) -> float:
    return min(options, key=lambda value: abs(value - target))


def _check_beats_unimodal(values: SweepValues, sweep: SweepConfig) -> Tuple[bool, str]:
    fractions, sigmas, unimodal = _axes(values)
    if not unimodal:
        raise DataError("no unimodal rows in the sweep table")
    sigma0 = sigmas[0]
    passed, details = True, []
    for fraction in fractions:
        multi = _mean(values, "multimodal", fraction, sigma0)
        uni = [_mean(values, label, fraction, sigma0) for label in unimodal]
        ok = multi is not None and all(u is not None and multi < u for u in uni)
        passed &= ok
        details.append(f"{fraction:g}: multimodal {multi:.3f} vs unimodal min {min(u for u in uni if u is not None):.3f}")
    return passed, "; ".join(details)


def _check_gap(values: SweepValues, sweep: SweepConfig) -> Tuple[bool, str]:
    fractions, sigmas, unimodal = _axes(values)
    if not unimodal:
        raise DataError("no unimodal rows in the sweep table")
    fraction = _closest(fractions, 0.02)
    multi = _mean(values, "multimodal", fraction, sigmas[0])
    best_uni = min(_mean(values, label, fraction, sigmas[0]) for label in unimodal)
    ratio = best_uni / multi if multi else math.inf
    return ratio >= 2.0, f"fraction {fraction:g}: unimodal/multimodal ratio {ratio:.2f}"


def _check_noise_robustness(values: SweepValues, sweep: SweepConfig) -> Tuple[bool, str]:
    fractions, sigmas, _ = _axes(values)
    if len(sigmas) < 2:
        raise DataError("the sweep table holds a single sigma")
    fraction = _closest(fractions, 0.02)
    sigma = _closest(sigmas[1:], 0.05)
    clean = _mean(values, "multimodal", fraction, sigmas[0])
    noisy = _mean(values, "multimodal", fraction, sigma)
    return noisy <= 1.2 * clean, f"fraction {fraction:g}: sigma {sigma:g} error {noisy:.3f} vs clean {clean:.3f}"


def _check_nondecreasing(values: SweepValues, sweep: SweepConfig) -> Tuple[bool, str]:
    fractions, sigmas, _ = _axes(values)
    if len(sigmas) < 2:
        raise DataError("the sweep table holds a single sigma")
    passed, details = True, []
    for fraction in fractions:
        for low, high in zip(sigmas[:-1], sigmas[1:]):
            a = values.get(("multimodal", fraction, low), {})
            b = values.get(("multimodal", fraction, high), {})
            trials = sorted(set(a) & set(b))
            if not trials:
                continue
            diffs = np.array([b[t] - a[t] for t in trials])
            stderr = float(np.std(diffs, ddof=1) / np.sqrt(diffs.size)) if diffs.size > 1 else 0.0
            ok = float(diffs.mean()) >= -2.0 * stderr
            passed &= ok
            if not ok:
                details.append(f"{fraction:g}: sigma {low:g}->{high:g} change {diffs.mean():.3f} (se {stderr:.3f})")
    return passed, "; ".join(details) or "error nondecreasing in sigma at every fraction"


def _check_consistency(rows: List[Dict[str, str]], sweep: SweepConfig) -> Tuple[bool, str]:
    errors = [float(row["relative_l2"]) for row in rows]
    if not errors:
        raise DataError("the consistency table is empty")
    median = float(np.median(errors))
    return median < sweep.consistency_threshold, f"median {median:.4f} over {len(errors)} samples"


def _check_uncertainty(rows: List[Dict[str, str]], sweep: SweepConfig) -> Tuple[bool, str]:
    by_seed: Dict[int, Dict[float, float]] = {}
    for row in rows:
        by_seed.setdefault(int(row["observation_seed"]), {})[float(row["fraction"])] = float(row["std_error"])
    if not by_seed:
        raise DataError("the uncertainty table is empty")
    shrinking = 0
    for stds in by_seed.values():
        fractions = sorted(stds)
        if len(fractions) >= 2 and stds[fractions[-1]] < stds[fractions[0]]:
            shrinking += 1
    needed = math.ceil(0.8 * len(by_seed))
    return shrinking >= needed, f"{shrinking} of {len(by_seed)} observation sets shrink (need {needed})"


_SWEEP_CHECKS: Dict[str, Callable[[SweepValues, SweepConfig], Tuple[bool, str]]] = {
    "AR001": _check_beats_unimodal,
    "AR002": _check_gap,
    "AR003": _check_noise_robustness,
    "AR004": _check_nondecreasing,
}
_TABLE_CHECKS: Dict[str, Callable[[List[Dict[str, str]], SweepConfig], Tuple[bool, str]]] = {
    "AR005": _check_consistency,
    "AR006": _check_uncertainty,
}


def grade_for(score: float) -> str:
    if score >= 90:
        return "A"
    elif score >= 80:
        return "B"
    elif score >= 70:
        return "C"
    elif score >= 60:
        return "D"
    return "F"


def evaluate_output_dir(directory: Path, sweep: SweepConfig) -> AcceptanceReport:
    """
    Evaluate every rule whose input table exists in directory/tables.

    Args:
        directory: Experiment output directory
        sweep: Thresholds of the experiment

    Returns:
        AcceptanceReport; rules without data are listed as skipped
    """
    tables_dir = Path(directory) / "tables"
    tables: Dict[str, List[Dict[str, str]]] = {}
    for name, filename in TABLE_FILES.items():
        path = tables_dir / filename
        if path.exists():
            _, tables[name] = read_table(path)
    sweep_values = _sweep_values(tables["sweep"]) if "sweep" in tables else None

    results: List[RuleResult] = []
    skipped: List[str] = []
    for rule in ACCEPTANCE_RULES:
        if rule.table not in tables:
            skipped.append(rule.rule_id)
            continue
        try:
            if rule.rule_id in _SWEEP_CHECKS:
                passed, details = _SWEEP_CHECKS[rule.rule_id](sweep_values, sweep)
            else:
                passed, details = _TABLE_CHECKS[rule.rule_id](tables[rule.table], sweep)
        except (DataError, KeyError, TypeError, ValueError) as e:
            logger.warning(f"Skipping {rule.rule_id}: {e}")
            skipped.append(rule.rule_id)
            continue
        results.append(
            RuleResult(
                rule_id=rule.rule_id,
                rule_name=rule.name,
                severity=rule.severity,
                description=rule.description,
                details=details,
                passed=bool(passed),
            )
        )

    rules_passed = sum(1 for r in results if r.passed)
    if results:
        max_score = sum(SEVERITY_WEIGHTS.get(r.severity, 1) for r in results)
        actual_score = sum(SEVERITY_WEIGHTS.get(r.severity, 1) for r in results if r.passed)
        overall_score = actual_score / max_score * 100
    else:
        overall_score = 100.0
    grade = grade_for(overall_score)
    return AcceptanceReport(
        overall_score=overall_score,
        total_rules_checked=len(results),
        rules_passed=rules_passed,
        rules_failed=len(results) - rules_passed,
        rules_skipped=skipped,
        results=results,
        grade=grade,
        success=all(r.passed for r in results if r.severity == "error"),
        message=f"Acceptance evaluation completed with grade {grade}",
    )
