"""Train, evaluate, compare and replay all five policy kinds in a few minutes.

Episode counts are cut far below the shipped configs so the whole pipeline
runs on a laptop; the resulting numbers show the plumbing, not converged
policies. Use ``reproduce_matrix.py`` for the full-length comparison.

    python demos/quickstart.py [workdir]
"""

import json
import shutil
import sys
from pathlib import Path

from dle.cli import main

ROOT = Path(__file__).resolve().parents[1]
EPISODES = 40
EVAL_EPISODES = 10


def prepare(work: Path) -> dict:
    shutil.copytree(ROOT / "configs" / "regions", work / "regions", dirs_exist_ok=True)
    (work / "runs").mkdir(exist_ok=True)
    configs = {}
    for src in sorted((ROOT / "configs" / "runs").glob("*.json")):
        cfg = json.loads(src.read_text())
        cfg["train"]["episodes"] = EPISODES
        cfg["train"]["eps_decay_steps"] = EPISODES * 15
        cfg["store"]["episodes"] = 10
        path = work / "runs" / src.name
        path.write_text(json.dumps(cfg, indent=1))
        configs[cfg["name"]] = path
    return configs


def run(work: Path) -> None:
    configs = prepare(work)
    regions = [str(work / "regions" / "region1.json"), str(work / "regions" / "region2.json")]
    region_args = [a for r in regions for a in ("--region", r)]

    # GM first so the other runs can use it as the reference
    order = ["gm"] + sorted(n for n in configs if n != "gm")
    for name in order:
        out = work / "out" / name
        print(f"training {name}")
        assert main(["train", "--config", str(configs[name]), "--out", str(out)]) == 0
        extra = [] if name == "gm" else ["--reference", str(work / "out" / "gm")]
        assert main(["eval", "--checkpoint", str(out), "--episodes", str(EVAL_EPISODES),
                     *region_args, *extra]) == 0

    print("\ncomparison (APR relative to GM, collision rate)")
    main(["compare", *(str(work / "out" / n) for n in order), "--out", str(work / "compare")])

    # render the first region-two episode of the DLE run
    frames = work / "replay_dle"
    main(["replay", str(work / "out" / "dle" / "episodes.jsonl"), "--out", str(frames),
          "--episodes", str(EVAL_EPISODES)])
    print(f"\nreplay frames in {frames}")


if __name__ == "__main__":
    work = Path(sys.argv[1] if len(sys.argv) > 1 else "quickstart_out")
    work.mkdir(parents=True, exist_ok=True)
    run(work)
