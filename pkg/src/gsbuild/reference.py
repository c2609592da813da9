"""Published reference figures for the full-scale corpus build.

These describe the original build on a single V100 over a 100 h Thai subset
and on the complete crawl. None of them is reachable at desk scale; they are
printed next to local measurements so the two can be compared by eye.
"""

# refined TRAIN hours after the last refinement iteration
TARGET_HOURS = {"th": 10262.0, "id": 5714.0, "vi": 6039.0}

# Thai GigaSpeech 2 DEV CER (%) after each refinement iteration
THAI_DEV_CER = (12.14, 10.97, 10.50, 10.45)

# Thai DEV CER (%) for the iteration 2 -> 3 step, with and without relabeling
THAI_ABLATION_DEV_CER = {"relabel": 10.47, "no_relabel": 10.77}

# wall time (s) and RTF per stage on the 100 h subset
STAGE_REFERENCE = {
    "transcribe": (19 * 3600 + 42 * 60 + 13, 1.97e-1),
    "align": (3 * 3600 + 27 * 60 + 29, 3.46e-2),
    "filter": (3, 8.00e-6),
    "segment": (6 * 60 + 58, 1.16e-3),
    "refine": (40 * 60 + 48, 6.80e-3),
}


def reference_table() -> str:
    rows = ["published reference (100 h Thai subset, one V100):"]
    for stage, (wall, rtf) in STAGE_REFERENCE.items():
        rows.append(f"  {stage:<12} {wall:>9d}s {rtf:>10.2e}")
    return "\n".join(rows)
