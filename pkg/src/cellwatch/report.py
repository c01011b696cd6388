"""Result-table assembly: one row per model x input x dataset variant.

Rows carry (model, input type, upsampled, augmented, ROC-AUC, PR-AUC)
plus the raw curve point lists. The table is written twice: a JSON file
for machines and an aligned text table for people, both with rows in a
fixed canonical order so identical results give identical bytes. The
transformer/fusion combination appears as an explicit "unsupported" line
rather than silently missing.
"""

import json
from pathlib import Path

from .models import FAMILY_NAMES, VIT_FUSION_MESSAGE

REPORT_SCHEMA_VERSION = 1

_FAMILY_ORDER = {"cnn": 0, "resnet": 1, "vit": 2}
_INPUT_ORDER = {"optical": 0, "infrared": 1, "fusion": 2}


def row_key(row):
    return (
        _FAMILY_ORDER.get(row["family"], 99),
        int(bool(row["upsampled"])),
        _INPUT_ORDER.get(row["input_type"], 99),
    )


def sort_rows(rows):
    return sorted(rows, key=row_key)


def format_table(rows):
    """Aligned text table; the ViT/fusion cell is marked unsupported."""
    header = ("Model", "Input", "Upsampled", "Augmented", "ROC-AUC", "PR-AUC")
    body = []
    for r in sort_rows(rows):
        body.append(
            (
                r.get("model", FAMILY_NAMES.get(r["family"], r["family"])),
                r["input_type"],
                "yes" if r["upsampled"] else "no",
                "yes" if r["augmented"] else "no",
                f"{r['roc_auc']:.3f}",
                f"{r['pr_auc']:.3f}",
            )
        )
    body.append((FAMILY_NAMES["vit"], "fusion", "-", "-", "unsupported", "unsupported"))
    widths = [max(len(header[i]), *(len(b[i]) for b in body)) for i in range(len(header))]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip(),
        "  ".join("-" * w for w in widths),
    ]
    for b in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(b, widths)).rstrip())
    return "\n".join(lines) + "\n"


def report_payload(rows):
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "rows": sort_rows(rows),
        "unsupported": [
            {
                "family": "vit",
                "input_type": "fusion",
                "reason": VIT_FUSION_MESSAGE,
            }
        ],
    }


def write_report(out_dir, rows):
    """Write report.json and report.txt; returns their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jpath = out_dir / "report.json"
    with open(jpath, "w") as f:
        json.dump(report_payload(rows), f, indent=2, sort_keys=True)
        f.write("\n")
    tpath = out_dir / "report.txt"
    with open(tpath, "w") as f:
        f.write(format_table(rows))
    return jpath, tpath


def load_report(path):
    with open(path) as f:
        payload = json.load(f)
    if payload.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema in {path}")
    return payload
