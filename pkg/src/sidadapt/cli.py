"""Command-line workflow: prepare -> split -> train -> evaluate / embed -> report.

Every command takes explicit flags only, writes its outputs via temp files
and ``os.replace``, and exits 0 on success and 1 on failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from ._io import atomic_write_text, read_json, write_json

log = logging.getLogger("sidadapt")

METHOD_NAMES = {"baseline": "CRNN", "mmd": "CRNN-MMD", "revgrad": "CRNN-RevGrad", "can": "CRNN-CAN"}


class CommandError(RuntimeError):
    pass


# prepare -------------------------------------------------------------------

def _prepare_track(record, fcfg, cache_dir) -> dict:
    """Fill the cache for one track; returns counts or the failure message."""
    from .dataset import window_plan
    from .features import cache_path, decode_audio, extract_window, probe_duration, write_cached

    out = {"track": list(record.key), "path": record.audio_path, "written": 0, "skipped": 0}
    try:
        if record.duration is None:
            record = dataclasses.replace(record, duration=probe_duration(record.audio_path))
        specs = window_plan(record, fcfg.window_seconds, fcfg.window_hop_seconds)
        missing = [s for s in specs if not cache_path(cache_dir, s.track, s.start, fcfg).is_file()]
        out["skipped"] = len(specs) - len(missing)
        if missing:
            audio = decode_audio(record.audio_path, fcfg.sample_rate)
            for spec in missing:
                write_cached(cache_dir, extract_window(audio, spec, fcfg), fcfg)
                out["written"] += 1
    except (OSError, ValueError, RuntimeError) as exc:
        out["error"] = f"{type(exc).__name__}: {exc}"
    return out


def cmd_prepare(args) -> int:
    from .config import load_config
    from .dataset import load_manifest

    fcfg = load_config(args.config).features
    manifest = load_manifest(args.manifest)
    cache_dir = Path(args.out)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_prepare_track, manifest.entries,
                                    [fcfg] * len(manifest.entries), [cache_dir] * len(manifest.entries)))
    else:
        results = [_prepare_track(r, fcfg, cache_dir) for r in manifest.entries]
    failures = [{k: r[k] for k in ("track", "path", "error")} for r in results if "error" in r]
    report = {
        "config_hash": fcfg.digest(),
        "cache_dir": str(cache_dir / fcfg.digest()),
        "tracks": len(results),
        "windows_written": sum(r["written"] for r in results),
        "windows_skipped": sum(r["skipped"] for r in results),
        "failures": failures,
    }
    write_json(cache_dir / "prepare_report.json", report)
    for f in failures:
        log.warning("failed %s: %s", f["path"], f["error"])
    print(f"prepared {len(results) - len(failures)}/{len(results)} tracks: "
          f"{report['windows_written']} windows written, {report['windows_skipped']} up to date, "
          f"{len(failures)} failures (see {cache_dir / 'prepare_report.json'})")
    return 1 if results and len(failures) == len(results) else 0


# split ---------------------------------------------------------------------

def cmd_split(args) -> int:
    from .dataset import album_split, load_manifest, save_split

    counts = tuple(int(c) for c in args.counts.split(","))
    if len(counts) != 3:
        raise CommandError(f"--counts needs three comma-separated integers, got {args.counts!r}")
    split = album_split(load_manifest(args.manifest), counts, args.seed)
    save_split(args.out, split)
    n = {p: sum(len(v) for v in split.albums(p).values()) for p in ("train", "val", "test")}
    print(f"wrote {args.out}: {n['train']} train, {n['val']} val, {n['test']} test albums")
    return 0


# train ---------------------------------------------------------------------

def cmd_train(args) -> int:
    from .config import load_config
    from .trainer import train

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.out_dir is not None:
        cfg = cfg.replace(paths=dataclasses.replace(cfg.paths, out_dir=args.out_dir))
    rec = train(cfg)
    print(json.dumps({"variant": rec.variant, "seed": rec.seed, "best_epoch": rec.best_epoch,
                      "best_checkpoint": rec.best_checkpoint, "checkpoint_id": rec.best_checkpoint_id,
                      "val": _scores(rec.val), "test": _scores(rec.test)}, indent=2))
    return 0


def _scores(d):
    if d is None:
        return None
    return {"window_macro_f1": d["window_macro_f1"], "song_macro_f1": d["song_macro_f1"]}


# evaluate / embed ----------------------------------------------------------

def _checkpoint_windows(args):
    """Model, manifest and cached windows for a checkpoint written by ``train``."""
    from .backbone import load_checkpoint
    from .config import TrainConfig, from_dict
    from .dataset import load_manifest
    from .features import load_cache

    model, meta = load_checkpoint(args.checkpoint)
    if "config" not in meta:
        raise CommandError(f"{args.checkpoint} carries no training config; was it written by `train`?")
    cfg = from_dict(TrainConfig, meta["config"])
    manifest_path = args.manifest or cfg.paths.manifest
    cache = args.cache or cfg.paths.cache
    if manifest_path is None or cache is None:
        raise CommandError("the checkpoint config has no manifest/cache paths; pass --manifest and --cache")
    manifest = load_manifest(manifest_path)
    if len(manifest.artists) != model.cfg.num_classes:
        raise CommandError(f"manifest has {len(manifest.artists)} artists, "
                           f"checkpoint predicts {model.cfg.num_classes} classes")
    return model, cfg, manifest, load_cache(cache, cfg.features)


def _partition_data(windows, manifest, split):
    from .trainer import _stack

    known = {r.key for r in manifest.entries}
    parts = {}
    for w in windows:
        if w.spec.track not in known:
            continue
        part = split.partition_of(w.spec.track[0], w.spec.track[1])
        if part is not None:
            ws, ys = parts.setdefault(part, ([], []))
            ws.append(w)
            ys.append(manifest.artist_index(w.spec.track[0]))
    return {p: _stack(*parts[p]) for p in ("train", "val", "test") if p in parts}


def cmd_evaluate(args) -> int:
    from .dataset import load_split
    from .trainer import evaluate_split

    model, cfg, manifest, windows = _checkpoint_windows(args)
    data = _partition_data(windows, manifest, load_split(args.split))
    if not data:
        raise CommandError("no cached windows fall into any partition of the split")
    result = {"checkpoint": str(args.checkpoint), "split": str(args.split), "partitions": {}}
    for part, split in data.items():
        rep = evaluate_split(model, split, cfg.seed)
        result["partitions"][part] = rep.to_dict()
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        atomic_write_text(args.out, text + "\n")
    print(text)
    return 0


def cmd_embed(args) -> int:
    from .backbone import infer
    from .dataset import load_split
    from .evaluation import plot_embedding_dump, write_embedding_dump

    model, cfg, manifest, windows = _checkpoint_windows(args)
    split_path = args.split or cfg.paths.split
    if split_path is None:
        raise CommandError("the checkpoint config has no split path; pass --split")
    data = _partition_data(windows, manifest, load_split(split_path))
    target_parts = ("test",) if cfg.target_domain == "test" else ("val", "test")
    embs, labels, preds, domains = [], [], [], []
    for domain, parts in (("source", ("train",)), ("target", target_parts)):
        for part in parts:
            if part not in data:
                continue
            e, p = infer(model, data[part].x)
            embs.extend(e)
            labels.extend(data[part].y.tolist())
            preds.extend(p.argmax(1).tolist())
            domains.extend([domain] * len(e))
    if not embs:
        raise CommandError("no source or target windows to embed")
    n = write_embedding_dump(args.out, embs, labels, preds, domains)
    print(f"wrote {n} embeddings to {args.out}")
    if args.plot:
        print(f"wrote t-SNE scatter to {plot_embedding_dump(args.out, args.plot, seed=cfg.seed)}")
    return 0


# report --------------------------------------------------------------------

def collect_runs(runs_dir) -> dict:
    """Test-domain reports from every ``run.json`` under ``runs_dir``, grouped by variant.

    Identical runs (same variant, seed and best weights) are counted once.
    """
    from .evaluation import EvalReport

    groups, seen = {}, set()
    for path in sorted(Path(runs_dir).rglob("run.json")):
        run = read_json(path)
        if not run.get("test"):
            continue
        key = (run["variant"], run["seed"], run.get("best_checkpoint_id"))
        if key in seen:
            continue
        seen.add(key)
        rep = EvalReport.from_dict(run["test"])
        rep.seed = run["seed"]
        groups.setdefault(run["variant"], []).append(rep)
    return groups


def summarize(groups: dict) -> dict:
    from .evaluation import average_runs

    order = [v for v in METHOD_NAMES if v in groups] + sorted(set(groups) - set(METHOD_NAMES))
    return {v: {"method": METHOD_NAMES.get(v, v), **average_runs(groups[v])} for v in order}


def summary_markdown(summary: dict) -> str:
    lines = ["| Method | F1/best | F1/avg | window F1/best | window F1/avg | runs |",
             "|---|---|---|---|---|---|"]
    for s in summary.values():
        lines.append(f"| {s['method']} | {s['f1_best']:.3f} | {s['f1_avg']:.3f} | "
                     f"{s['window_f1_best']:.3f} | {s['window_f1_avg']:.3f} | {s['runs']} |")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    runs = Path(args.runs)
    if not runs.is_dir():
        raise FileNotFoundError(f"runs directory not found: {runs}")
    groups = collect_runs(runs)
    if not groups:
        raise CommandError(f"no run.json with test results under {runs}; run `train` first")
    summary = summarize(groups)
    out = Path(args.out) if args.out else runs
    write_json(out / "summary.json", summary)
    table = summary_markdown(summary)
    atomic_write_text(out / "summary.md", table)
    print(table, end="")
    return 0


# entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sidadapt", description=__doc__.splitlines()[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--verbose", "-v", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("prepare", help="decode audio and fill the feature cache")
    s.add_argument("--manifest", required=True, help="track manifest (TSV)")
    s.add_argument("--out", required=True, help="feature cache directory")
    s.add_argument("--config", required=True, help="config JSON; its `features` section is used")
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default 1)")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("split", help="assign albums to train/val/test")
    s.add_argument("--manifest", required=True, help="track manifest (TSV)")
    s.add_argument("--seed", type=int, required=True, help="split seed")
    s.add_argument("--out", required=True, help="output split JSON")
    s.add_argument("--counts", default="4,1,1", help="train,val,test albums per artist (default 4,1,1)")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="run one configured experiment")
    s.add_argument("--config", required=True, help="config JSON")
    s.add_argument("--seed", type=int, default=None, help="override the config seed")
    s.add_argument("--out-dir", default=None, help="override paths.out_dir")
    s.set_defaults(func=cmd_train)

    for name, helptext in (("evaluate", "macro-F1 per split partition"),
                           ("embed", "dump embeddings of source and target windows")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True, help="checkpoint written by `train`")
        if name == "evaluate":
            s.add_argument("--split", required=True, help="split JSON")
            s.add_argument("--out", default=None, help="also write the JSON report here")
        else:
            s.add_argument("--out", required=True, help="output dump (TSV)")
            s.add_argument("--split", default=None, help="split JSON (default: from the checkpoint config)")
            s.add_argument("--plot", default=None, help="also render a t-SNE scatter to this image")
        s.add_argument("--manifest", default=None, help="manifest (default: from the checkpoint config)")
        s.add_argument("--cache", default=None, help="feature cache (default: from the checkpoint config)")
        s.set_defaults(func=cmd_evaluate if name == "evaluate" else cmd_embed)

    s = sub.add_parser("report", help="aggregate runs into F1/best and F1/avg per method")
    s.add_argument("--runs", required=True, help="directory searched recursively for run.json")
    s.add_argument("--out", default=None, help="where to write summary.json/.md (default: --runs)")
    s.set_defaults(func=cmd_report)

    # the top-level help lists every command's flags
    lines = ["command flags:"]
    for name, sp in sub.choices.items():
        flags = [a.option_strings[-1] if a.required else f"[{a.option_strings[-1]}]"
                 for a in sp._actions if a.option_strings and a.dest != "help"]
        lines.append(f"  {name:<9} {' '.join(flags)}")
    p.epilog = "\n".join(lines)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
