"""Minimal external scorer speaking the line protocol, for smoke tests.

    python -m srmdet.stub_scorer --uniform 0.1
    python -m srmdet.stub_scorer --oracle scenes.jsonl --noise 0.05
    python -m srmdet.stub_scorer --oracle scenes.jsonl --crash-on-scene syn000007
"""

import argparse
import json
import sys

import numpy as np


def main(argv=None):
    p = argparse.ArgumentParser(prog="srmdet.stub_scorer")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--uniform", type=float, help="every class gets this score")
    mode.add_argument("--hot-class", type=int, help="this class index scores 1.0, the rest 0")
    mode.add_argument("--oracle", help="JSONL scenes file; score from ground truth")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--crash-on-scene", help="exit with status 3 on the first request for this scene")
    p.add_argument("--garbage-on-scene", help="answer requests for this scene with a malformed line")
    args = p.parse_args(argv)

    header = json.loads(sys.stdin.readline())
    classes = header["classes"]
    n = len(classes)
    oracle = None
    if args.oracle:
        from .dataset import read_scenes
        from .scorers import OracleScorer
        oracle = OracleScorer(read_scenes(args.oracle), classes, args.noise, args.seed)

    for line in sys.stdin:
        if not line.strip():
            continue
        req = json.loads(line)
        if req["scene_id"] == args.crash_on_scene:
            sys.exit(3)
        if req["scene_id"] == args.garbage_on_scene:
            sys.stdout.write("not json\n")
            sys.stdout.flush()
            continue
        regions = np.asarray(req["regions"], dtype=float).reshape(-1, 4)
        if oracle is not None:
            scores = oracle.score(req["scene_id"], regions)
        else:
            scores = np.zeros((len(regions), n + 1))
            if args.hot_class is not None:
                scores[:, args.hot_class] = 1.0
            else:
                scores[:, :n] = args.uniform if args.uniform is not None else 0.0
            scores[:, n] = 1.0 - scores[:, :n].max(axis=1, initial=0.0)
        sys.stdout.write(json.dumps({"seq": req["seq"], "scores": scores.tolist()}) + "\n")
        sys.stdout.flush()


if __name__ == "__main__":
    main()
