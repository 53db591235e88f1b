"""Command-line entry point: ``seq2seq-mri <command> ...``.

Exit codes: 0 success, 2 usage error, 3 config error, 4 data error,
5 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .downstream import ExperimentSpec
from .errors import ConfigError, DataError, Seq2SeqError

log = logging.getLogger("seq2seq_mri")

COMMANDS = ("gen-toy", "train", "synthesize", "rank", "diffmap", "classify", "report", "selftest")


def _write_json(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=_json_default))
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def _write_resolved_args(out, args):
    """Persist the fully resolved flags of a flag-driven command."""
    doc = {k: v for k, v in vars(args).items() if k != "func"}
    return _write_json(Path(out) / "resolved_config.json", doc)


def _nan_to_none(m):
    return [[None if not np.isfinite(v) else float(v) for v in row] for row in np.asarray(m, float)]


# ---------------------------------------------------------------- gen-toy

def default_split(n: int) -> tuple[int, int, int]:
    """The 9000/1000/10000 proportions, rounded, for any ``n``."""
    train, val = round(0.45 * n), round(0.05 * n)
    return train, val, n - train - val


def cmd_gen_toy(args) -> int:
    from .toy.sim import generate_dataset

    split = tuple(int(s) for s in args.split.split(",")) if args.split else default_split(args.n)
    out = Path(args.out)
    manifest = generate_dataset(args.n, args.seed, split, out)
    _write_resolved_args(out, argparse.Namespace(**vars(args), resolved_split=list(split)))
    print(f"wrote {len(manifest['studies'])} subjects to {out / 'manifest.json'}")
    return 0


# ---------------------------------------------------------------- train

def cmd_train(args) -> int:
    from .trainer import TrainConfig, train

    doc = cfgmod.load_yaml(args.config)
    cfgmod.apply_overrides(doc, args.set)
    if args.out:
        doc["out_dir"] = args.out
    doc["deterministic"] = cfgmod.deterministic_from_env(doc.get("deterministic", True))
    cfg = TrainConfig.from_dict(doc)
    res = train(cfg, resume_from=args.resume)
    print(f"trained {res.steps} steps; last checkpoint {res.last}")
    return 0


# ---------------------------------------------------------------- synthesize

def cmd_synthesize(args) -> int:
    from .generator.translate import translate
    from .runlog import file_sha256
    from .trainer import load_generator
    from .volume_io import Series4D, load_series, load_volume, normalize_image, save_volume

    g = load_generator(args.checkpoint)
    if len(args.input) > 1:
        x = load_series(args.input)
    else:
        try:
            x = load_volume(args.input[0])
        except Seq2SeqError:
            x = load_series(args.input[0])
    x = normalize_image(x)
    y = translate(g, x, args.source_seq, args.target_seq, args.frames)
    out = Path(args.out)
    if isinstance(y, Series4D):
        stem, suffix = _split_suffix(out)
        paths = [save_volume(f, out.with_name(f"{stem}_t{k}{suffix}")) for k, f in enumerate(y.frames)]
    else:
        paths = [save_volume(y, out)]
    _write_json(out.parent / f"{_split_suffix(out)[0]}.json", {
        "command": "synthesize", "checkpoint_sha256": file_sha256(args.checkpoint),
        "input": args.input, "source_seq": args.source_seq, "target_seq": args.target_seq,
        "frames": args.frames, "outputs": [str(p) for p in paths],
    })
    print("\n".join(str(p) for p in paths))
    return 0


def _split_suffix(path: Path) -> tuple[str, str]:
    name = path.name
    for suf in (".nii.gz", ".nii", ".npy", ".png"):
        if name.endswith(suf):
            return name[: -len(suf)], suf
    return path.stem, path.suffix


# ---------------------------------------------------------------- rank

def _load_eval_studies(args):
    from .trainer import load_split
    from .volume_io import read_manifest

    manifest = read_manifest(args.data)
    split = None if args.split == "all" else args.split
    studies = load_split(manifest, split, args.max_subjects)
    if not studies:
        raise DataError(f"no studies in split {args.split!r} of {args.data}")
    return manifest, studies


def cmd_rank(args) -> int:
    from .diffrep import build_adjacency, centrality
    from .metrics import LpipsLike
    from .plotting import plot_centrality, plot_matrix
    from .runlog import file_sha256
    from .trainer import load_generator

    g = load_generator(args.checkpoint)
    manifest, studies = _load_eval_studies(args)
    names = manifest.get("sequence_names") or [f"seq{i}" for i in range(g.n_sequences)]
    per_study = []
    adj = build_adjacency(g, studies, g.n_sequences, args.diagonal, LpipsLike(args.lpips_backend),
                          per_study=per_study)
    rep = centrality(adj)
    out = Path(args.out)
    _write_resolved_args(out, args)
    ckpt_hash = file_sha256(args.checkpoint)

    with (out / "centrality.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence", "c_t", "rank_t", "c_d", "rank_d", "checkpoint_sha256"])
        for i, name in enumerate(names):
            w.writerow([name, repr(float(rep.c_t[i])), int(rep.rank_t[i]),
                        repr(float(rep.c_d[i])), int(rep.rank_d[i]), ckpt_hash])
    mats = {"raw_psnr": adj.psnr, "raw_ssim": adj.ssim, "raw_lpips": adj.lpips,
            "norm_psnr": adj.normalized["psnr"], "norm_ssim": adj.normalized["ssim"],
            "norm_lpips": adj.normalized["lpips"], "adjacency": adj.a}
    for key, m in mats.items():
        with (out / f"{key}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source\\target", *names])
            for i, name in enumerate(names):
                w.writerow([name, *("" if not np.isfinite(v) else repr(float(v)) for v in m[i])])
    with (out / "per_study.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "source", "target", "psnr", "ssim", "lpips"])
        w.writerows(per_study)
    _write_json(out / "ranking.json", {
        "command": "rank", "checkpoint_sha256": ckpt_hash, "sequence_names": names,
        "diagonal_policy": adj.diagonal_policy, "n_studies": len(studies),
        "lpips_backend": args.lpips_backend, "pair_counts": adj.counts,
        **{k: _nan_to_none(m) for k, m in mats.items()},
        "c_t": rep.c_t, "c_d": rep.c_d, "rank_t": rep.rank_t, "rank_d": rep.rank_d,
    })
    plot_matrix(adj.a, names, out / "adjacency.png", "adjacency A")
    plot_centrality(rep.c_t, rep.c_d, names, out / "centrality.png")
    print(f"ranked {len(names)} sequences over {len(studies)} studies -> {out / 'centrality.csv'}")
    return 0


# ---------------------------------------------------------------- diffmap

def cmd_diffmap(args) -> int:
    from .diffrep import diff_map
    from .runlog import file_sha256
    from .trainer import load_generator
    from .volume_io import frames_of, save_overlay

    g = load_generator(args.checkpoint)
    manifest, studies = _load_eval_studies(args)
    if args.subjects:
        wanted = set(args.subjects.split(","))
        studies = [s for s in studies if s.subject_id in wanted]
    names = manifest.get("sequence_names") or [f"seq{i}" for i in range(g.n_sequences)]
    out = Path(args.out)
    _write_resolved_args(out, args)
    ckpt_hash = file_sha256(args.checkpoint)
    index = []
    for st in studies:
        for i in st.available:
            if len(st.available) < 2:
                continue
            dm = diff_map(g, st, i)
            base = frames_of(st.sequences[i])[0].data
            m = dm.map if dm.map.ndim == base.ndim else dm.map[0]
            stem = out / st.subject_id / f"{names[i]}"
            stem.parent.mkdir(parents=True, exist_ok=True)
            np.save(f"{stem}_md.npy", dm.map.astype(np.float32))
            if base.ndim == 3:
                k = base.shape[0] // 2
                base, m = base[k], m[k]
            save_overlay(base, m, f"{stem}_overlay.png")
            index.append({"subject_id": st.subject_id, "sequence": names[i],
                          "map": f"{st.subject_id}/{names[i]}_md.npy",
                          "overlay": f"{st.subject_id}/{names[i]}_overlay.png",
                          "sources": dm.source_counts, "mean": float(dm.map.mean())})
    _write_json(out / "diffmaps.json", {"command": "diffmap", "checkpoint_sha256": ckpt_hash,
                                        "maps": index})
    print(f"wrote {len(index)} differentiation maps to {out}")
    return 0


# ---------------------------------------------------------------- classify

@dataclass
class ClassifyData:
    manifest: str = ""
    checkpoint: str | None = None
    train_split: str = "train"
    test_split: str = "test"
    max_test_subjects: int | None = None


@dataclass
class ClassifyConfig:
    out_dir: str = "runs/classify"
    data: ClassifyData = field(default_factory=ClassifyData)
    experiment: ExperimentSpec = field(default_factory=ExperimentSpec)


def load_toy_arrays(manifest, split, limit=None):
    """``(pairs (N, 2, H, W), labels (N, 2), subject ids)`` of one split."""
    from .volume_io import load_study

    entries = [e for e in manifest["studies"] if e.get("split") == split][:limit]
    pairs, labels, ids = [], [], []
    for e in entries:
        st = load_study(e, manifest)
        pairs.append(np.stack([st.sequences[0].data, st.sequences[1].data]))
        labels.append([e["labels"]["label1"], e["labels"]["label2"]])
        ids.append(e["subject_id"])
    return np.stack(pairs).astype(np.float32), np.asarray(labels, dtype=np.int64), ids


def run_classification(cfg: ClassifyConfig, progress=None) -> dict:
    from .downstream import accuracy_curve, batch_diff_maps, build_inputs, md_scale
    from .runlog import file_sha256
    from .trainer import load_checkpoint, load_generator
    from .volume_io import read_manifest

    spec = cfg.experiment
    manifest = read_manifest(cfg.data.manifest)
    n_train = max(spec.sample_sizes)
    x_tr, y_tr, _ = load_toy_arrays(manifest, cfg.data.train_split, n_train)
    x_te, y_te, _ = load_toy_arrays(manifest, cfg.data.test_split, cfg.data.max_test_subjects)
    inputs = {"baseline": (build_inputs(x_tr, "baseline"), build_inputs(x_te, "baseline"))}
    provenance = {}
    if "baseline_plus_md" in spec.variants:
        if not cfg.data.checkpoint:
            raise ConfigError("baseline_plus_md needs data.checkpoint (a trained generator)")
        gen_split = load_checkpoint(cfg.data.checkpoint)["train_config"]["data"]["train_split"]
        if gen_split == cfg.data.test_split:
            raise ConfigError("the generator was trained on the classifier's test split")
        g = load_generator(cfg.data.checkpoint)
        m_tr, m_te = batch_diff_maps(g, x_tr), batch_diff_maps(g, x_te)
        scale = md_scale(m_tr)
        inputs["baseline_plus_md"] = (build_inputs(x_tr, "baseline_plus_md", m_tr, scale),
                                      build_inputs(x_te, "baseline_plus_md", m_te, scale))
        provenance = {"checkpoint_sha256": file_sha256(cfg.data.checkpoint), "md_scale": scale,
                      "generator_train_split": gen_split}
    out = Path(cfg.out_dir)
    points = accuracy_curve(spec, inputs, y_tr, y_te, out, progress)
    _write_json(out / "classify.json", {"command": "classify", **provenance,
                                        "n_train_available": len(x_tr), "n_test": len(x_te),
                                        "n_seeds": len(spec.seeds)})
    return {"points": points, **provenance}


def cmd_classify(args) -> int:
    doc = cfgmod.load_yaml(args.spec)
    cfgmod.apply_overrides(doc, args.set)
    if args.out:
        doc["out_dir"] = args.out
    cfg = cfgmod.from_dict(ClassifyConfig, doc)
    cfgmod.save_yaml(cfgmod.to_dict(cfg), Path(cfg.out_dir) / "resolved_config.yaml")
    run_classification(cfg, progress=lambda v, n, s, acc: log.info("%s n=%d seed=%d acc=%s", v, n, s, acc))
    print(f"classification curves written to {cfg.out_dir}")
    return 0


# ---------------------------------------------------------------- report / selftest

def cmd_report(args) -> int:
    from .report import build_report

    path = build_report(args.run_dir, args.out)
    print(path)
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest(verbose=True) else 5


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seq2seq-mri", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="command")

    s = sub.add_parser("gen-toy", help="generate the simulated two-sequence dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--split", help="train,val,test counts (default 45%%/5%%/50%%)")
    s.set_defaults(func=cmd_gen_toy)

    s = sub.add_parser("train", help="train a generator from a YAML config")
    s.add_argument("--config", required=True)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. train.steps=100")
    s.add_argument("--out")
    s.add_argument("--resume", help="checkpoint to resume from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("synthesize", help="translate one image to another sequence")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, nargs="+", help="one file, or one file per frame")
    s.add_argument("--source-seq", type=int, required=True)
    s.add_argument("--target-seq", type=int, required=True)
    s.add_argument("--frames", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synthesize)

    for name, func, helptext in (("rank", cmd_rank, "sequence importance ranking"),
                                 ("diffmap", cmd_diffmap, "per-pixel differentiation maps")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data", required=True, help="manifest.json or its directory")
        s.add_argument("--out", required=True)
        s.add_argument("--split", default="test", help="split name or 'all'")
        s.add_argument("--max-subjects", type=int)
        if name == "rank":
            s.add_argument("--diagonal", choices=("exclude", "include"), default="exclude")
            s.add_argument("--lpips-backend", default="auto",
                           choices=("auto", "lpips", "vgg19", "random"))
        else:
            s.add_argument("--subjects", help="comma-separated subject ids")
        s.set_defaults(func=func)

    s = sub.add_parser("classify", help="toy classification with/without M_d channels")
    s.add_argument("--spec", required=True, help="YAML experiment config")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--out")
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("report", help="summarize a run directory as Markdown")
    s.add_argument("run_dir")
    s.add_argument("--out", help="report path (default RUN_DIR/report.md)")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("selftest", help="fast invariant checks")
    s.set_defaults(func=cmd_selftest)
    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except Seq2SeqError as e:
        _report_error(e, e.exit_code)
        return e.exit_code
    except (FileNotFoundError, PermissionError) as e:
        _report_error(e, DataError.exit_code)
        return DataError.exit_code
    except Exception as e:  # noqa: BLE001 - top-level boundary
        log.debug("unhandled error", exc_info=True)
        _report_error(e, 5)
        return 5


def _report_error(e: Exception, code: int):
    print(json.dumps({"error": type(e).__name__, "message": str(e), "exit_code": code}), file=sys.stderr)


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
