"""Markdown summary of a run directory.

The report only reads what upstream commands wrote (rank, diffmap,
classify, train, synthesize) and renders it in a fixed order, so rerunning
on an unchanged directory yields byte-identical output.
"""
from __future__ import annotations

import csv
import json
import os
from pathlib import Path

from .runlog import file_sha256

EMPTY_NOTICE = "**Empty report:** no command outputs were found in this directory."
GALLERY_LIMIT = 12


def _rel(path: Path, base: Path) -> str:
    return Path(os.path.relpath(path, base)).as_posix()


def _fmt(v, digits=4) -> str:
    if v is None or v == "":
        return "missing"
    try:
        return f"{float(v):.{digits}f}"
    except (TypeError, ValueError):
        return str(v)


def _table(header, rows) -> list[str]:
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return out + [""]


def _read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _ranking_section(path: Path, base: Path) -> list[str]:
    doc = json.loads(path.read_text())
    names = doc["sequence_names"]
    lines = [f"### Sequence ranking: `{_rel(path.parent, base)}`", "",
             f"{doc['n_studies']} studies, diagonal {doc['diagonal_policy']}, "
             f"LPIPS backend `{doc['lpips_backend']}`.", ""]
    rows = [[n, _fmt(doc["c_t"][i]), doc["rank_t"][i], _fmt(doc["c_d"][i]), doc["rank_d"][i]]
            for i, n in enumerate(names)]
    lines += _table(["sequence", "C_t", "rank C_t", "C_d", "rank C_d"], rows)
    lines += ["Adjacency A (rows: source, columns: target):", ""]
    lines += _table(["", *names], [[n, *(_fmt(v) for v in doc["adjacency"][i])]
                                   for i, n in enumerate(names)])
    for fig in ("adjacency.png", "centrality.png"):
        if (path.parent / fig).is_file():
            lines += [f"![{fig[:-4]}]({_rel(path.parent / fig, base)})", ""]
    return lines


def _curve_section(path: Path, base: Path) -> list[str]:
    lines = [f"### Classification curves: `{_rel(path.parent, base)}`", ""]
    rows = [[r["variant"], r["target"], r["sample_size"], _fmt(r["mean_accuracy"]),
             _fmt(r["std_accuracy"]), r["n_seeds"]] for r in _read_csv(path)]
    lines += _table(["variant", "target", "training subjects", "mean acc", "std", "seeds"], rows)
    deltas = path.parent / "deltas.csv"
    if deltas.is_file():
        lines += ["Accuracy gain from the differentiation-map channels:", ""]
        lines += _table(["target", "training subjects", "delta"],
                        [[r["target"], r["sample_size"], _fmt(r["delta"])] for r in _read_csv(deltas)])
    if (path.parent / "curve.png").is_file():
        lines += [f"![accuracy curve]({_rel(path.parent / 'curve.png', base)})", ""]
    return lines


def _train_section(path: Path, base: Path, fig_dir: Path) -> list[str]:
    from .plotting import plot_loss_log

    rows = _read_csv(path)
    lines = [f"### Training: `{_rel(path.parent, base)}`", ""]
    if not rows:
        return lines + ["No steps logged.", ""]
    lines += _table(["steps", "first loss", "last loss", "min loss"],
                    [[rows[-1]["step"], _fmt(rows[0]["loss_total"]), _fmt(rows[-1]["loss_total"]),
                      _fmt(min(float(r["loss_total"]) for r in rows))]])
    tag = _rel(path.parent, base).replace("/", "_").strip("._") or "run"
    fig = plot_loss_log(path, fig_dir / f"loss_{tag}.png")
    return lines + [f"![training loss]({_rel(fig, base)})", ""]


def _gallery_section(path: Path, base: Path) -> list[str]:
    doc = json.loads(path.read_text())
    maps = doc["maps"]
    lines = [f"### Differentiation maps: `{_rel(path.parent, base)}`", "",
             f"{len(maps)} maps; showing up to {GALLERY_LIMIT}.", ""]
    lines += _table(["subject", "sequence", "sources", "mean M_d"],
                    [[m["subject_id"], m["sequence"], m["sources"], _fmt(m["mean"])] for m in maps])
    for m in maps[:GALLERY_LIMIT]:
        lines.append(f"![{m['subject_id']} {m['sequence']}]({_rel(path.parent / m['overlay'], base)})")
    return lines + [""]


def _hash_section(run_dir: Path, base: Path) -> list[str]:
    recorded = []
    for path in sorted(run_dir.rglob("*.json")):
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError):
            continue
        if isinstance(doc, dict) and "checkpoint_sha256" in doc:
            recorded.append((_rel(path, base), doc.get("command", ""), doc["checkpoint_sha256"]))
    found = {file_sha256(p): _rel(p, base) for p in sorted(run_dir.rglob("*.pt"))}
    if not recorded and not found:
        return []
    lines = ["## Checkpoints", ""]
    if recorded:
        lines += _table(["output", "command", "checkpoint sha256", "matches"],
                        [[f"`{o}`", c, f"`{h}`", f"`{found[h]}`" if h in found else "not in this directory"]
                         for o, c, h in recorded])
    if found:
        lines += _table(["checkpoint", "sha256"], [[f"`{p}`", f"`{h}`"] for h, p in sorted(found.items(), key=lambda kv: kv[1])])
    return lines


def render_report(run_dir, out_path) -> str:
    run_dir, out_path = Path(run_dir), Path(out_path)
    base = out_path.parent
    fig_dir = base / "report_figures"
    sections: list[str] = []
    for path in sorted(run_dir.rglob("ranking.json")):
        sections += _ranking_section(path, base)
    for path in sorted(run_dir.rglob("curve.csv")):
        sections += _curve_section(path, base)
    for path in sorted(run_dir.rglob("train_log.csv")):
        sections += _train_section(path, base, fig_dir)
    for path in sorted(run_dir.rglob("diffmaps.json")):
        sections += _gallery_section(path, base)
    hashes = _hash_section(run_dir, base)
    lines = [f"# Run report: `{run_dir.name}`", ""]
    if not sections and not hashes:
        lines += [EMPTY_NOTICE, ""]
    else:
        if sections:
            lines += ["## Results", "", *sections]
        lines += hashes
    return "\n".join(lines).rstrip() + "\n"


def build_report(run_dir, out=None) -> Path:
    """Write ``report.md`` (default: inside ``run_dir``) and return its path."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        from .errors import DataError

        raise DataError(f"run directory {run_dir} does not exist")
    out_path = Path(out) if out else run_dir / "report.md"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(render_report(run_dir, out_path))
    return out_path
