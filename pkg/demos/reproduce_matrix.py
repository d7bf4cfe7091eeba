"""Full five-policy comparison over several seeds (about 25 minutes per seed).

Each seed trains GM, LM1, LM2, LM12 and DLE with the desk-scale settings,
evaluates 100 episodes per region and prints mean return, collision rate and
APR per policy. Results are appended as JSON lines to ``matrix.jsonl``.

    python demos/reproduce_matrix.py [n_seeds]
"""

import json
import sys

from dle.experiment import KINDS, desk_config, run_seed


def main(n_seeds: int = 5):
    with open("matrix.jsonl", "a") as fh:
        for seed in range(n_seeds):
            res = run_seed(seed, desk_config(seed))
            fh.write(json.dumps(res.to_dict()) + "\n")
            fh.flush()
            print(f"seed {seed}")
            for kind in (k.value for k in KINDS):
                ret, col = res.returns[kind], res.collisions[kind]
                print(f"  {kind:>4}  return {ret[1]:5.2f} / {ret[2]:5.2f}"
                      f"  collisions {col[1]:.2f} / {col[2]:.2f}  APR {res.apr[kind]:.2f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 5)
