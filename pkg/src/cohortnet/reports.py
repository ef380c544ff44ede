"""Interpretability report emitters.

Every emitter writes newline-delimited structured records (plus a plain-text
cohort table) and renders a matplotlib figure alongside, so reports can be
consumed both programmatically and visually.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .exploitation import CalibrationReport
from .pool import CohortPool

COHORT_TABLE_COLUMNS = ("Cohort", "Frequency", "Patients", "Pos-Rate",
                        "Cohort Pattern")


def _write_ndjson(path: Path, rows):
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row))
            f.write("\n")


def emit_cohort_table(pool: CohortPool, feature_names, out_dir: str | Path,
                      max_rows: int | None = None) -> Path:
    """Human-readable cohort table plus a tab-delimited twin and a figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cohorts = sorted(pool.cohorts, key=lambda c: (-c.frequency, c.cohort_id))
    if max_rows is not None:
        cohorts = cohorts[:max_rows]
    rows = [
        (f"#{c.cohort_id}", str(c.frequency), str(c.patients),
         f"{100 * c.pos_rate:.1f}%", c.pattern_label(feature_names))
        for c in cohorts
    ]
    widths = [max(len(col), *(len(r[j]) for r in rows)) if rows else len(col)
              for j, col in enumerate(COHORT_TABLE_COLUMNS)]
    txt = out_dir / "cohort_table.txt"
    with open(txt, "w") as f:
        f.write("  ".join(c.ljust(w) for c, w in
                          zip(COHORT_TABLE_COLUMNS, widths)).rstrip() + "\n")
        for r in rows:
            f.write("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() + "\n")
    with open(out_dir / "cohort_table.tsv", "w") as f:
        f.write("\t".join(COHORT_TABLE_COLUMNS) + "\n")
        for r in rows:
            f.write("\t".join(r) + "\n")

    if cohorts:
        top = cohorts[:20]
        fig, ax = plt.subplots(figsize=(8, max(2.5, 0.35 * len(top))))
        labels = [c.pattern_label(feature_names) for c in top]
        ax.barh(range(len(top)), [c.frequency for c in top], color="#4878a8")
        ax.set_yticks(range(len(top)), labels, fontsize=7)
        ax.invert_yaxis()
        ax.set_xlabel("occurrences")
        ax.set_title("Most frequent cohorts")
        fig.tight_layout()
        fig.savefig(out_dir / "cohort_frequencies.png", dpi=120)
        plt.close(fig)
    return txt


@dataclass
class StateReport:
    feature: int
    state_mean_raw: np.ndarray            # (k+1,)
    state_counts: np.ndarray              # (k+1,)
    transitions: np.ndarray               # (k+1, k+1) consecutive-step counts
    coexistence: dict                     # other feature -> (k+1, k_j+1) counts


def build_state_report(models, states: np.ndarray) -> list[StateReport]:
    """states: (N, T, F) for the split being reported."""
    N, T, F = states.shape
    reports = []
    for i, model in enumerate(models):
        k1 = model.k + 1
        trans = np.zeros((k1, k1), dtype=np.int64)
        src = states[:, :-1, i].ravel()
        dst = states[:, 1:, i].ravel()
        np.add.at(trans, (src, dst), 1)
        coexist = {}
        for j, mj in enumerate(models):
            if j == i:
                continue
            mat = np.zeros((k1, mj.k + 1), dtype=np.int64)
            np.add.at(mat, (states[:, :, i].ravel(), states[:, :, j].ravel()), 1)
            coexist[j] = mat
        reports.append(StateReport(
            feature=i,
            state_mean_raw=model.state_mean_raw if model.state_mean_raw is not None
            else np.zeros(k1),
            state_counts=model.state_counts if model.state_counts is not None
            else np.zeros(k1, dtype=np.int64),
            transitions=trans,
            coexistence=coexist,
        ))
    return reports


def emit_state_report(models, states: np.ndarray, feature_names,
                      out_dir: str | Path) -> list[StateReport]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = build_state_report(models, states)
    _write_ndjson(out_dir / "state_report.ndjson", (
        {
            "feature": feature_names[r.feature],
            "state_mean_raw": np.asarray(r.state_mean_raw).tolist(),
            "state_counts": np.asarray(r.state_counts).tolist(),
            "transitions": r.transitions.tolist(),
            "coexistence": {feature_names[j]: m.tolist()
                            for j, m in r.coexistence.items()},
        }
        for r in reports
    ))

    F = len(reports)
    fig, axes = plt.subplots(2, F, figsize=(3.2 * F, 6), squeeze=False)
    for i, r in enumerate(reports):
        ax = axes[0][i]
        k1 = len(r.state_counts)
        ax.bar(range(k1), r.state_mean_raw, color="#4878a8")
        ax.set_title(f"{feature_names[i]}: state means", fontsize=9)
        ax.set_xticks(range(k1), [f"S{s}" for s in range(k1)], fontsize=7)
        ax = axes[1][i]
        row_sums = r.transitions.sum(axis=1, keepdims=True)
        norm = np.divide(r.transitions, row_sums, where=row_sums > 0,
                         out=np.zeros_like(r.transitions, dtype=float))
        im = ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
        ax.set_title("transitions", fontsize=9)
        ax.set_xlabel("to state", fontsize=8)
        ax.set_ylabel("from state", fontsize=8)
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(out_dir / "state_report.png", dpi=120)
    plt.close(fig)
    return reports


def emit_attention_report(alpha: np.ndarray, feature_names,
                          out_dir: str | Path, patient_id: str):
    """alpha: (T, F, F) one patient's interaction attention."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    T, F, _ = alpha.shape
    _write_ndjson(out_dir / f"attention_{patient_id}.ndjson", (
        {
            "patient": patient_id,
            "feature": feature_names[i],
            "time": t,
            "weights": {feature_names[j]: alpha[t, i, j] for j in range(F)
                        if j != i},
        }
        for i in range(F) for t in range(T)
    ))
    fig, axes = plt.subplots(1, F, figsize=(2.6 * F, 3), squeeze=False)
    for i in range(F):
        ax = axes[0][i]
        im = ax.imshow(alpha[:, i, :], cmap="Purples", vmin=0, vmax=1,
                       aspect="auto")
        ax.set_title(f"attention of {feature_names[i]}", fontsize=8)
        ax.set_xticks(range(F), feature_names, fontsize=6, rotation=45)
        ax.set_ylabel("time step", fontsize=8)
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(out_dir / f"attention_{patient_id}.png", dpi=120)
    plt.close(fig)


def emit_calibration_report(report: CalibrationReport, pool: CohortPool,
                            feature_names, out_dir: str | Path,
                            patient_id: str) -> Path:
    """Per-patient decomposition: base vs calibrated probability, feature
    scores, and one row per matched cohort."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [{
        "patient": patient_id,
        "kind": "summary",
        "base_logit": report.base_logit,
        "base_probability": report.base_probability,
        "calibration_score": report.z,
        "probability": report.probability,
    }]
    F = len(report.feature_scores)
    for i in range(F):
        rows.append({
            "patient": patient_id,
            "kind": "feature",
            "feature": feature_names[i],
            "score": report.feature_scores[i],
            "matched_cohorts": int(report.bitmaps[i].sum()),
        })
        for cs in report.cohort_scores[i]:
            c = pool.by_anchor[i][cs.local_id]
            rows.append({
                "patient": patient_id,
                "kind": "cohort",
                "feature": feature_names[i],
                "cohort": c.cohort_id,
                "pattern": c.pattern_label(feature_names),
                "attention": cs.beta,
                "score": cs.score,
                "frequency": c.frequency,
                "patients": c.patients,
                "pos_rate": c.pos_rate,
            })
    path = out_dir / f"calibration_{patient_id}.ndjson"
    _write_ndjson(path, rows)

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.bar(["base", "calibrated"],
            [report.base_probability, report.probability],
            color=["#999999", "#c05050"])
    ax1.set_ylim(0, 1)
    ax1.set_ylabel("predicted risk")
    ax1.set_title(f"patient {patient_id}")
    colors = ["#c05050" if s > 0 else "#4878a8" for s in report.feature_scores]
    ax2.barh(range(F), report.feature_scores, color=colors)
    ax2.set_yticks(range(F), feature_names, fontsize=8)
    ax2.axvline(0.0, color="black", lw=0.8)
    ax2.set_title("feature-level calibration scores", fontsize=9)
    fig.tight_layout()
    fig.savefig(out_dir / f"calibration_{patient_id}.png", dpi=120)
    plt.close(fig)
    return path
