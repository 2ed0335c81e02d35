"""Markdown tables from metrics JSON, laid out like the published result tables."""
from __future__ import annotations

import json
import math
from pathlib import Path

ARMS = ("no_generator", "generator_pretrain_only", "genco")
ARM_TITLES = {"no_generator": "No Generator (MoCo)",
              "generator_pretrain_only": "Generator with Pre-training",
              "genco": "GenCo"}


def _pct(x) -> str:
    if x is None or not math.isfinite(x):
        return "n/a"
    return f"{100 * x:.2f}"


def _shot_label(k: int) -> str:
    return f"{k} shot" if k == 1 else f"{k} shots"


def render_ablation(doc: dict) -> str:
    """Shots as rows, the three arms as columns."""
    lines = ["| Shots \\ Modules | " + " | ".join(ARM_TITLES[a] for a in ARMS) + " |",
             "|---|" + "---|" * len(ARMS)]
    for k in doc["shots"]:
        cells = []
        for a in ARMS:
            c = doc["cells"][a][str(k)]
            cells.append(f"{_pct(c['mean'])} ± {_pct(c['std'])}")
        lines.append(f"| {_shot_label(k)} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def render_fewshot(docs: list[dict]) -> str:
    """Models as rows, shot counts as columns, mean ± std over trials (in %)."""
    metric = "mIoU" if docs[0]["task"] == "segmentation" else "Accuracy"
    shots = sorted({d["k_shot"] for d in docs}, reverse=True)
    rows: dict[str, dict[int, dict]] = {}
    for d in docs:
        rows.setdefault(d.get("model", "model"), {})[d["k_shot"]] = d
    head = [f"{metric} {_shot_label(k)} (%)" for k in shots]
    lines = ["| Model \\ Shots | " + " | ".join(head) + " |", "|---|" + "---|" * len(shots)]
    for name in sorted(rows):
        cells = []
        for k in shots:
            d = rows[name].get(k)
            cells.append(f"{_pct(d['mean'])} ± {_pct(d['std'])}" if d else "")
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    out = "\n".join(lines) + "\n"
    seg = [d for d in docs if d.get("per_class")]
    if seg:
        out += "\nPer-class IoU (%)\n\n"
        n = max(len(d["per_class"]) for d in seg)
        out += "| Model | Shots | " + " | ".join(f"class {c}" for c in range(n)) + " |\n"
        out += "|---|---|" + "---|" * n + "\n"
        for d in sorted(seg, key=lambda d: (d.get("model", ""), -d["k_shot"])):
            cells = [_pct(v) for v in d["per_class"]] + [""] * (n - len(d["per_class"]))
            out += f"| {d.get('model', 'model')} | {d['k_shot']} | " + " | ".join(cells) + " |\n"
    return out


def render(docs: list[dict]) -> str:
    parts = []
    ablations = [d for d in docs if d.get("task") == "ablation"]
    for d in ablations:
        parts.append(render_ablation(d))
    for task in ("classification", "segmentation"):
        group = [d for d in docs if d.get("task") == task]
        if group:
            parts.append(render_fewshot(group))
    if not parts:
        raise ValueError("no renderable metrics (expected task classification, segmentation or ablation)")
    return "\n".join(parts)


def render_files(paths) -> str:
    docs = []
    for p in paths:
        doc = json.loads(Path(p).read_text())
        if "task" not in doc:
            raise ValueError(f"{p}: not a metrics document (no 'task' field)")
        docs.append(doc)
    return render(docs)
