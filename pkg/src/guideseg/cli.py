"""Command-line interface.

Exit codes: 0 success, 1 validation or configuration error, 2 runtime error.
Errors are also written to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from .airc import QTable
from .errors import FormatError, GuidesegError, ValidationError
from .geometry import BinaryMask
from .guidelines import HashEmbedder, build_index, load_corpus
from .io import read_jsonl, write_atomic, write_json, write_jsonl
from .metrics import CostLedger, ImagePair, evaluate, ledger_summary

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def _read_json(path: str | Path) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ValidationError(f"no such file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON: {exc}") from exc


def _sim_config(path: str | None):
    from .sim.episode import SimConfig

    return SimConfig.from_dict(_read_json(path)) if path else SimConfig()


def cmd_index(args: argparse.Namespace) -> int:
    index = build_index(load_corpus(args.corpus), HashEmbedder(args.dim))
    index.save(args.out)
    print(json.dumps({"guidelines": len(index), "dim": index.dim, "out": str(args.out)}))
    return EXIT_OK


def _inputs(path: Path, suffixes: Sequence[str]) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in suffixes)
        if not files:
            raise ValidationError(f"{path} contains no inputs ({', '.join(suffixes)})")
        return files
    if not path.exists():
        raise ValidationError(f"no such input: {path}")
    return [path]


def cmd_run(args: argparse.Namespace) -> int:
    from .pipeline import RunConfig, run_image

    config = RunConfig.load(args.config) if args.config else RunConfig()
    table = QTable.load(args.qtable) if args.qtable and Path(args.qtable).exists() else None
    if args.qtable and table is None and config.airc_mode == "greedy":
        raise ValidationError(f"no such Q-table: {args.qtable}")
    out = Path(args.out)
    if config.backend == "simulated":
        from .sim.doubles import SimImage
        from .sim.scene import SyntheticScene

        handles = [(p.stem, SimImage(SyntheticScene.load(p), config.error_model, config.seed))
                   for p in _inputs(Path(args.image), (".json",))]
    else:
        handles = [(p.stem, str(p)) for p in _inputs(Path(args.image), (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"))]

    from .pipeline import make_policy

    policy = make_policy(config, table)
    ledger = CostLedger(config.prices)
    traces = []
    for stem, handle in handles:
        mask, trace = run_image(handle, config, policy=policy, ledger=CostLedger(config.prices))
        write_json(out / "masks" / f"{stem}.json", mask.to_rle())
        for e in trace.ledger.entries:
            ledger.record(e.role, e.input_tokens, e.output_tokens, e.latency_ms, e.ok)
        traces.append({"name": stem, **trace.to_dict()})
    write_jsonl(out / "traces.jsonl", traces)
    summary = {**ledger_summary(ledger), "images": len(handles), "cost_per_image_usd": [t["cost"]["cost_usd"] for t in traces]}
    write_json(out / "cost.json", summary)
    if config.airc_mode == "train" and args.qtable:
        policy.table.save(args.qtable)
    print(json.dumps({"images": len(handles), "out": str(out), "cost_usd": summary["cost_usd"]}))
    return EXIT_OK


def cmd_sim_train(args: argparse.Namespace) -> int:
    from .sim.episode import train_controller

    cfg = _sim_config(args.config)
    episodes = args.episodes if args.episodes is not None else cfg.episodes
    if episodes < 1:
        raise ValidationError("--episodes must be >= 1")
    result = train_controller(episodes, cfg.error_model, cfg.bounds, cfg.seed, cfg.density_mix, keep_traces=True)
    result.table.save(args.qtable)
    rows = [
        {"episode": i, "return": r, "cumulative": c, **t.to_dict()}
        for i, (r, c, t) in enumerate(zip(result.episode_returns, result.cumulative, result.traces))
    ]
    trace_path = Path(args.trace) if args.trace else Path(args.qtable).with_suffix(".episodes.jsonl")
    write_jsonl(trace_path, rows)
    summary = {"episodes": episodes, "qtable": str(args.qtable), "trace": str(trace_path)}
    print(json.dumps({**summary, "cumulative_reward": result.cumulative[-1]}))
    return EXIT_OK


def cmd_sim_ablate(args: argparse.Namespace) -> int:
    from .sim.episode import ablate_policies

    cfg = _sim_config(args.config)
    table = QTable.load(args.qtable)
    n = args.scenes if args.scenes is not None else cfg.ablation_scenes
    report = ablate_policies(table, cfg.error_model, n, cfg.seed, cfg.bounds, args.fixed_k, cfg.density_mix)
    out = Path(args.out)
    write_json(out / "ablation.json", report.to_dict())
    write_atomic(out / "ablation.csv", report.to_csv())
    print(json.dumps({"ratio": report.ratio, "extra_pass_fraction": report.adaptive.extra_pass_fraction}))
    return EXIT_OK


def cmd_sim_scenes(args: argparse.Namespace) -> int:
    from .sim.episode import scene_stream

    cfg = _sim_config(args.config)
    out = Path(args.out)
    for i, (scene, _) in enumerate(scene_stream(cfg.seed, args.n, cfg.density_mix)):
        scene.save(out / "scenes" / f"scene_{i:04d}.json")
        write_json(out / "gt" / f"scene_{i:04d}.json", scene.gt_mask().to_rle())
    print(json.dumps({"scenes": args.n, "out": str(out)}))
    return EXIT_OK


def _load_mask(path: Path) -> BinaryMask:
    try:
        return BinaryMask.from_rle(_read_json(path))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: not an RLE mask: {exc}") from exc


def cmd_eval(args: argparse.Namespace) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise ValidationError(f"not a directory: {d}")
    names = sorted(p.name for p in gt_dir.glob("*.json"))
    if not names:
        raise ValidationError(f"{gt_dir} has no masks")
    missing = [n for n in names if not (pred_dir / n).exists()]
    if missing:
        raise ValidationError(f"predictions missing for: {', '.join(missing[:5])}")
    pairs = [ImagePair(_load_mask(pred_dir / n), _load_mask(gt_dir / n), Path(n).stem) for n in names]
    report = evaluate(pairs)
    out = Path(args.out)
    write_json(out, report.to_dict())
    write_atomic(out.with_suffix(".csv"), report.to_csv())
    print(json.dumps(report.summary()))
    return EXIT_OK


def _csv(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def cmd_report(args: argparse.Namespace) -> int:
    src, out = Path(args.traces), Path(args.out)
    files = _inputs(src, (".jsonl",))
    episodes, runs = [], []
    for f in files:
        for row in read_jsonl(f):
            if "ledger" in row:
                runs.append(row)
            elif "steps" in row:
                episodes.append(row)
    if not episodes and not runs:
        raise ValidationError(f"no episode or run traces under {src}")
    summary: dict[str, Any] = {"episodes": len(episodes), "runs": len(runs)}

    if episodes:
        cum, rows = 0.0, []
        for i, e in enumerate(episodes):
            r = e.get("return", sum(s["reward"] or 0.0 for s in e["steps"]))
            cum += r
            rows.append((i, r, cum))
        write_atomic(out / "cumulative_reward.csv", _csv(("episode", "return", "cumulative"), rows))
        by_d: dict[str, list[float]] = {}
        for e in episodes:
            by_d.setdefault(e["density"], []).append(e["issues_resolved"])
        dens_rows = [(d, len(v), sum(v) / len(v)) for d, v in sorted(by_d.items())]
        write_atomic(out / "issues_by_density.csv", _csv(("density", "crops", "mean_issues_resolved"), dens_rows))
        summary["final_cumulative_reward"] = cum
        summary["issues_resolved_by_density"] = {d: m for d, _, m in dens_rows}

    if runs:
        costs = [r["cost"]["cost_usd"] for r in runs]
        edges = [0.0, 0.0044, 0.0066, 0.0088, 0.011, 0.0132, 0.0154, float("inf")]
        counts = [sum(1 for c in costs if lo <= c < hi) for lo, hi in zip(edges, edges[1:])]
        hist = [(lo, hi if hi != float("inf") else "", n) for lo, hi, n in zip(edges, edges[1:], counts)]
        write_atomic(out / "cost_histogram.csv", _csv(("cost_from_usd", "cost_to_usd", "images"), hist))
        summary["mean_cost_usd"] = sum(costs) / len(costs)
    write_json(out / "report.json", summary)
    print(json.dumps(summary))
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise ValidationError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="guideseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("index", help="embed a guideline corpus and save the index")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dim", type=int, default=64)
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("run", help="segment images (or simulated scene files)")
    s.add_argument("--image", required=True, help="file or directory")
    s.add_argument("--config")
    s.add_argument("--qtable")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_run)

    sim = sub.add_parser("simulate", help="simulated environment").add_subparsers(dest="sim_command", required=True)
    s = sim.add_parser("train", help="train the iteration controller")
    s.add_argument("--config")
    s.add_argument("--episodes", type=int)
    s.add_argument("--qtable", required=True)
    s.add_argument("--trace", help="episode trace JSON-lines (default: next to the Q-table)")
    s.set_defaults(func=cmd_sim_train)
    s = sim.add_parser("ablate", help="compare the trained controller with a fixed pass count")
    s.add_argument("--config")
    s.add_argument("--qtable", required=True)
    s.add_argument("--scenes", type=int)
    s.add_argument("--fixed-k", type=int, default=2)
    s.add_argument("--out", default=".")
    s.set_defaults(func=cmd_sim_ablate)
    s = sim.add_parser("scenes", help="write simulated scene fixtures and their ground-truth masks")
    s.add_argument("--config")
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sim_scenes)

    s = sub.add_parser("eval", help="score predicted masks against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="plot data from episode and run traces")
    s.add_argument("--traces", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def _fail(exc: BaseException, code: int) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, stream=sys.stderr)
        return args.func(args)
    except (ValidationError, FormatError) as exc:
        return _fail(exc, EXIT_VALIDATION)
    except GuidesegError as exc:
        return _fail(exc, EXIT_RUNTIME)
    except OSError as exc:
        return _fail(exc, EXIT_RUNTIME)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
