"""Command-line entry point: train, eval, compare, replay and region-store transfer.

Exit codes: 0 success, 2 config error, 3 training failure, 4 missing artifacts.
Set ``DLE_LOG_LEVEL`` to error, warn, info or debug.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import re
import shutil
import sys
from pathlib import Path

from .dqn import CURVE_COLUMNS, TrainConfig, TrainingDiverged, save_checkpoint, write_curve
from .evaluation import (
    build_report,
    format_table,
    mean_return,
    read_logs,
    run_episodes,
    write_logs,
)
from .graph import RegionalStore, build_regional_store
from .policies import PolicyKind, load_policy, make_policy, regime
from .render import curves_svg, frame_svg
from .sim import ACTIONS, RegionSpec

logger = logging.getLogger("dle")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_MISSING = 4

RUN_CONFIG_VERSION = 1
_NAME_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest(obj) -> str:
    return hashlib.sha256(_canonical(obj).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- config


def load_run_config(path) -> dict:
    """Read a run config and resolve its region files.

    Returns a snapshot dict with region specs inlined, ready to be frozen
    into a run directory. Problems are reported field by field.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    errors = []
    if raw.get("schema_version") != RUN_CONFIG_VERSION:
        errors.append(f"schema_version: expected {RUN_CONFIG_VERSION}, got {raw.get('schema_version')!r}")
    name = raw.get("name", "")
    if not isinstance(name, str) or not _NAME_RE.match(name):
        errors.append(f"name: {name!r} is not filesystem-safe")
    kind = raw.get("policy_kind")
    try:
        kind = PolicyKind(kind).value
    except ValueError:
        errors.append(f"policy_kind: {kind!r} not one of {[k.value for k in PolicyKind]}")
    regions = {}
    for ref in raw.get("region_files", []):
        rpath = (path.parent / ref).resolve()
        try:
            spec = RegionSpec.load(rpath)
        except FileNotFoundError:
            errors.append(f"region_files: {ref} does not exist")
            continue
        except (KeyError, ValueError, TypeError) as exc:
            errors.append(f"region_files: {ref} invalid ({exc})")
            continue
        regions[spec.region_id] = spec.to_dict()
    if not raw.get("region_files"):
        errors.append("region_files: at least one region is required")
    try:
        train = TrainConfig.from_dict(raw.get("train", {})).to_dict()
    except (TypeError, ValueError) as exc:
        errors.append(f"train: {exc}")
        train = None
    ev = raw.get("eval", {})
    if not isinstance(ev.get("episodes", 100), int) or ev.get("episodes", 100) < 1:
        errors.append("eval.episodes: must be a positive integer")
    store = raw.get("store", {})
    if errors:
        raise ConfigError("; ".join(errors))
    return {
        "schema_version": RUN_CONFIG_VERSION,
        "name": name,
        "policy_kind": kind,
        "regions": {str(k): v for k, v in sorted(regions.items())},
        "train": train,
        "eval": {"episodes": int(ev.get("episodes", 100)), "seed": int(ev.get("seed", 1000))},
        "store": {"episodes": int(store.get("episodes", 100)), "seed": int(store.get("seed", 10_000))},
    }


def region_hashes(snapshot: dict) -> dict:
    return {rid: digest(spec) for rid, spec in snapshot["regions"].items()}


# ---------------------------------------------------------------- verbs


def cmd_train(config_path, out=None, seed=None, episodes=None) -> Path:
    snap = load_run_config(config_path)
    if seed is not None:
        snap["train"]["seed"] = seed
    if episodes is not None:
        snap["train"]["episodes"] = episodes
    cfg = TrainConfig.from_dict(snap["train"])
    regions = {int(k): RegionSpec.from_dict(v) for k, v in snap["regions"].items()}
    kind = PolicyKind(snap["policy_kind"])
    wanted = regime(kind).training_regions(regions)
    regions = {rid: regions[rid] for rid in wanted if rid in regions}
    if set(regions) != set(wanted):
        raise ConfigError(f"policy_kind {kind.value} needs regions {wanted}")
    snap["regions"] = {str(k): snap["regions"][str(k)] for k in sorted(regions)}
    run_dir = Path(out) if out else Path("runs") / snap["name"]
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg_hash = digest(snap)
    (run_dir / "run_config.json").write_text(json.dumps(snap, indent=1, sort_keys=True))
    (run_dir / "config_hash.txt").write_text(cfg_hash + "\n")
    stores = None
    if regime(kind).local_info:
        stores = {rid: build_regional_store(r, snap["store"]["episodes"], snap["store"]["seed"])
                  for rid, r in regions.items()}
    handle = make_policy(kind, cfg, regions, stores,
                         progress=lambda ep, row: logger.info("episode %d region %d return %.3f",
                                                              ep, row["region_id"], row["episode_return"]))
    ckpt = save_checkpoint(handle.result, run_dir / "checkpoint")
    manifest = json.loads((ckpt / "manifest.json").read_text())
    manifest["config_hash"] = cfg_hash
    manifest["region_hashes"] = region_hashes(snap)
    (ckpt / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    write_curve(handle.result.curve, run_dir / "curve.csv")
    (run_dir / "curve.svg").write_text(curves_svg(
        {kind.value: [r["episode_return"] for r in handle.result.curve]}))
    return run_dir


def _checkpoint_dir(path) -> Path:
    path = Path(path)
    if (path / "checkpoint" / "manifest.json").exists():
        return path / "checkpoint"
    if (path / "manifest.json").exists():
        return path
    raise MissingArtifact(f"no checkpoint manifest under {path}")


def cmd_eval(checkpoint, region_paths, episodes=100, seed=1000, out=None, reference=None) -> dict:
    """Evaluate a checkpoint on one or more regions and write a MetricsReport.

    With ``reference`` (a GM run or checkpoint), its per-region mean returns
    are the optimal returns for APR. A GM checkpoint without a reference is
    self-referenced, giving an APR of exactly 1.
    """
    ckpt = _checkpoint_dir(checkpoint)
    run_dir = ckpt.parent if ckpt.name == "checkpoint" else ckpt
    out_dir = Path(out) if out else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    policy = load_policy(ckpt)
    manifest = json.loads((ckpt / "manifest.json").read_text())
    regions = {}
    for p in region_paths:
        try:
            spec = RegionSpec.load(p)
        except FileNotFoundError:
            raise MissingArtifact(f"region file {p} not found") from None
        regions[spec.region_id] = spec
    stores = policy.result.stores or None
    notes = []
    logs_by_region = {}
    for rid, spec in sorted(regions.items()):
        if rid not in policy.result.training_regions:
            msg = f"cross-region evaluation: {policy.kind.value} trained on {policy.result.training_regions}, tested on {rid}"
            logger.warning(msg)
            notes.append(msg)
        if policy.result.router and rid not in policy.result.router:
            raise MissingArtifact(f"GM has no expert for region {rid}")
        logs_by_region[rid] = run_episodes(policy, spec, episodes, seed, stores)
    optimal = None
    if reference is not None:
        ref = load_policy(_checkpoint_dir(reference))
        optimal = {rid: mean_return(run_episodes(ref, spec, episodes, seed, ref.result.stores or None,
                                                 record=False))
                   for rid, spec in regions.items()}
    elif policy.kind is PolicyKind.GM:
        optimal = {rid: mean_return(logs) for rid, logs in logs_by_region.items()}
        notes.append("self-referenced: GM experts define the optimal returns")
    hashes = {str(spec.region_id): digest(spec.to_dict()) for spec in regions.values()}
    report = build_report(policy.kind.value, policy.result.training_regions, logs_by_region, optimal,
                          notes, manifest.get("config_hash", ""))
    data = report.to_dict()
    data["region_hashes"] = hashes
    (out_dir / "eval_metrics.json").write_text(json.dumps(data, indent=1, sort_keys=True))
    log_path = out_dir / "episodes.jsonl"
    if log_path.exists():
        log_path.unlink()
    # one call keeps episode indices unique across regions
    write_logs([log for rid in sorted(logs_by_region) for log in logs_by_region[rid]], log_path)
    print(format_table(report.table_rows()))
    return data


_POLICY_ORDER = {k.value: i for i, k in enumerate(
    (PolicyKind.GM, PolicyKind.LM1, PolicyKind.LM2, PolicyKind.LM12, PolicyKind.DLE))}


def cmd_compare(run_dirs, out=None) -> list:
    """Table of APR and collision rate per (policy, test region).

    APR uses the GM run's per-region mean returns as optimal when a GM run
    is among the inputs; GM itself is therefore 1.00.
    """
    if len(run_dirs) < 2:
        raise ConfigError("comparison needs at least 2 run directories")
    loaded, skipped = [], []
    for d in run_dirs:
        p = Path(d) / "eval_metrics.json"
        if not p.exists():
            skipped.append(str(d))
            continue
        loaded.append((Path(d), json.loads(p.read_text())))
    for s in skipped:
        print(f"missing eval artifacts, skipped: {s}", file=sys.stderr)
    if len(loaded) < 2:
        raise MissingArtifact(f"fewer than 2 runs with eval results (skipped: {skipped})")
    seen = {}
    for d, data in loaded:
        for rid, h in data.get("region_hashes", {}).items():
            if rid in seen and seen[rid][1] != h:
                raise ConfigError(f"region {rid} specs differ: {seen[rid][0]} has hash {seen[rid][1]}, {d} has hash {h}")
            seen.setdefault(rid, (d, h))
    optimal = None
    for _d, data in loaded:
        if data["policy"] == PolicyKind.GM.value:
            optimal = {r["region_id"]: r["mean_return"] for r in data["regions"]}
    rows = []
    for d, data in loaded:
        train = "&".join(str(r) for r in data["training_regions"])
        for r in data["regions"]:
            ratio = None
            if optimal is not None and r["region_id"] in optimal and optimal[r["region_id"]] != 0:
                ratio = r["mean_return"] / optimal[r["region_id"]]
            rc = r["n_collisions"] / r["n_episodes"]
            rows.append({"policy": data["policy"], "training": train, "test": r["region_id"],
                         "apr": ratio, "collision_rate": rc, "mean_return": r["mean_return"],
                         "run_dir": str(d)})
    rows.sort(key=lambda r: (_POLICY_ORDER.get(r["policy"], 99), r["test"]))
    out_dir = Path(out) if out else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "compare.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    table = format_table([(r["policy"], r["training"], r["test"],
                           "-" if r["apr"] is None else f"{r['apr']:.2f}",
                           f"{100 * r['collision_rate']:.0f}%") for r in rows])
    (out_dir / "compare.txt").write_text(table + "\n")
    print(table)
    series = {}
    for d, data in loaded:
        curve = Path(d) / "curve.csv"
        if curve.exists():
            with open(curve) as fh:
                series[data["policy"]] = [float(r["episode_return"]) for r in csv.DictReader(fh)]
    if series:
        n = max(len(v) for v in series.values())
        with open(out_dir / "curves.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            labels = sorted(series)
            w.writerow(["episode", *labels])
            for i in range(n):
                w.writerow([i, *(series[l][i] if i < len(series[l]) else "" for l in labels)])
        (out_dir / "curves.svg").write_text(curves_svg(series))
    return rows


TRACE_COLUMNS = ("step", "time_s", "x_m", "y_m", "s_m", "lateral_m", "speed_mps", "heading_rad",
                 "lane", "action", "reward")


def cmd_replay(log_path, out, episode: int = 0, region_path=None) -> Path:
    """One SVG frame per decision step plus a trace CSV for one logged episode."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    errors = []
    try:
        logs = read_logs(log_path)
        log = logs[episode].steps
    except FileNotFoundError:
        raise MissingArtifact(f"episode log {log_path} not found") from None
    except (ValueError, KeyError, IndexError, json.JSONDecodeError) as exc:
        errors.append(f"log unreadable as a whole: {exc}")
        log = _partial_log(log_path, episode, errors)
    lanes = []
    if region_path is not None:
        spec = RegionSpec.load(region_path)
        lanes = [(l.points, l.width) for l in spec.geometry.lanes]
    rows = []
    for k, rec in enumerate(log):
        st = rec.get("state")
        if st is None:
            errors.append(f"step {k}: no state summary")
            continue
        colliding = set()
        if k == len(log) - 1:
            for pair in rec.get("events", {}).get("collisions", []):
                colliding.update(pair)
        frame_lanes = lanes or _lanes_from_agents(st)
        # a colliding last step is drawn after the step, where the contact is
        shown = rec["next_state"] if colliding and rec.get("next_state") else st
        (out / f"frame_{k:04d}.svg").write_text(
            frame_svg(shown, frame_lanes, colliding, title=f"step {k} {rec.get('action_name', '')}"))
        ego = next(a for a in st["agents"] if a[0] == 0)
        rows.append([k, st["time_s"], ego[1], ego[2], st["ego_s_m"], st["ego_d_m"], st["ego_speed_mps"],
                     st["ego_heading_rad"], st["ego_lane"], rec.get("action_name", ACTIONS[rec["action"]]),
                     rec["reward"]])
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        w.writerows(rows)
    if errors:
        (out / "errors.json").write_text(json.dumps(errors, indent=1))
    return out


def _partial_log(path, episode, errors) -> list:
    steps = []
    for n, line in enumerate(Path(path).read_text().splitlines()):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            errors.append(f"line {n + 1}: not JSON")
            continue
        if rec.get("episode") == episode and "action" in rec and "reward" in rec:
            steps.append(rec)
    return steps


def _lanes_from_agents(summary) -> list:
    ys = sorted({round(a[2], 1) for a in summary["agents"]})
    xs = [a[1] for a in summary["agents"]]
    return [([(min(xs) - 50, y), (max(xs) + 150, y)], 3.5) for y in ys]


def cmd_export_region_store(region_path, out, episodes=100, seed=10_000, checkpoint=None) -> Path:
    """Build a regional store from simulated statistics, optionally with a trained road encoder."""
    try:
        spec = RegionSpec.load(region_path)
    except FileNotFoundError:
        raise MissingArtifact(f"region file {region_path} not found") from None
    store = build_regional_store(spec, episodes, seed)
    if checkpoint is not None:
        policy = load_policy(_checkpoint_dir(checkpoint))
        learner = policy.learners[0]
        store.road_encoder = learner.enc.road_encoder_dict()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    store.save(out)
    return out


def cmd_import_region_store(store_path, checkpoint) -> Path:
    """Attach a regional store to a checkpoint so DLE uses it for that region."""
    ckpt = _checkpoint_dir(checkpoint)
    try:
        store = RegionalStore.load(store_path)
    except FileNotFoundError:
        raise MissingArtifact(f"store file {store_path} not found") from None
    target = ckpt / f"region{store.region_id}_store.json"
    shutil.copyfile(store_path, target)
    manifest = json.loads((ckpt / "manifest.json").read_text())
    if store.region_id not in manifest["training_regions"]:
        manifest["training_regions"] = sorted(manifest["training_regions"] + [store.region_id])
        logger.warning("store for untrained region %d imported", store.region_id)
    (ckpt / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return target


# ---------------------------------------------------------------- argparse


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dle", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)
    t = sub.add_parser("train", help="train a policy from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--episodes", type=int)
    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--region", action="append", required=True, help="region JSON (repeatable)")
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=1000)
    e.add_argument("--out")
    e.add_argument("--reference", help="GM run used as the optimal returns")
    c = sub.add_parser("compare", help="compare evaluated run directories")
    c.add_argument("runs", nargs="+")
    c.add_argument("--out")
    r = sub.add_parser("replay", help="render a logged episode")
    r.add_argument("log")
    r.add_argument("--out", required=True)
    r.add_argument("--episodes", type=int, default=0, help="episode index inside the log")
    r.add_argument("--region")
    x = sub.add_parser("export-region-store", help="build and write a regional store")
    x.add_argument("--region", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--episodes", type=int, default=100)
    x.add_argument("--seed", type=int, default=10_000)
    x.add_argument("--checkpoint")
    i = sub.add_parser("import-region-store", help="attach a regional store to a checkpoint")
    i.add_argument("--region", required=True, help="store JSON")
    i.add_argument("--checkpoint", required=True)
    return p


_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def main(argv=None) -> int:
    level = os.environ.get("DLE_LOG_LEVEL", "warn").lower()
    logging.basicConfig(level=_LEVELS.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.verb == "train":
            print(cmd_train(args.config, args.out, args.seed, args.episodes))
        elif args.verb == "eval":
            cmd_eval(args.checkpoint, args.region, args.episodes, args.seed, args.out, args.reference)
        elif args.verb == "compare":
            cmd_compare(args.runs, args.out)
        elif args.verb == "replay":
            print(cmd_replay(args.log, args.out, args.episodes, args.region))
        elif args.verb == "export-region-store":
            print(cmd_export_region_store(args.region, args.out, args.episodes, args.seed, args.checkpoint))
        elif args.verb == "import-region-store":
            print(cmd_import_region_store(args.region, args.checkpoint))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
