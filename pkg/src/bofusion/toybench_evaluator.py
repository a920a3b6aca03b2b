"""Reference black-box evaluator speaking the JSON-lines protocol.

Runs the builtin toy task (or synthetic landscape) behind stdin/stdout so the
pipeline can be exercised against a genuinely separate process. One JSON
object per line in, one per line out, reply id echoing the request id:

    {"id": 0, "role": "trainer", "params": {"lr": 0.3}}
    {"id": 0, "ok": true, "objectives": {"loss": 0.41, "f1": 0.62},
     "convergence_step": 57}

Anything that goes wrong inside an evaluation produces {"ok": false,
"error": ...} on the same id; only unparseable input lines are answered
with a best-effort id of null. This file doubles as the template for
wiring a real trainer into the pipeline.
"""
from __future__ import annotations

import argparse
import json
import sys
import time

from .errors import BofusionError
from . import toybench


def build_evaluator(args: argparse.Namespace):
    if args.mode == "toy":
        return toybench.ToyEvaluator(
            seed=args.seed,
            n_members=args.n_members,
            dim=args.dim,
            p_pos=args.p_pos,
            separation=args.separation,
            default_steps=args.steps,
            default_batch_size=args.batch_size,
        )
    return toybench.LandscapeEvaluator.from_seed(
        args.seed,
        dim=args.dim,
        offset=args.offset,
        ruggedness=args.ruggedness,
        n_members=args.n_members,
    )


def handle_request(evaluator, request: dict, *, sleep_s: float = 0.0) -> dict:
    rid = request.get("id")
    if sleep_s > 0:
        time.sleep(sleep_s)
    role = request.get("role")
    try:
        if role == "trainer":
            params = request.get("params")
            if not isinstance(params, dict):
                return {"id": rid, "ok": False, "error": "trainer request needs a params object"}
            out = evaluator.train(params)
            return {
                "id": rid,
                "ok": True,
                "objectives": out["objectives"],
                "convergence_step": out.get("convergence_step"),
            }
        if role == "scorer":
            delta = request.get("delta")
            if not isinstance(delta, list):
                return {"id": rid, "ok": False, "error": "scorer request needs a delta array"}
            return {"id": rid, "ok": True, "objectives": evaluator.score(delta)}
        return {"id": rid, "ok": False, "error": f"unknown role {role!r}"}
    except BofusionError as exc:
        return {"id": rid, "ok": False, "error": str(exc)}
    except Exception as exc:  # keep the process alive across bad evaluations
        return {"id": rid, "ok": False, "error": f"{type(exc).__name__}: {exc}"}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="toybench-evaluator",
        description="JSON-lines trainer/scorer over the builtin toy benchmarks",
    )
    parser.add_argument("--mode", choices=("toy", "landscape"), default="toy")
    parser.add_argument("--seed", type=int, required=True)
    parser.add_argument("--n-members", type=int, default=15)
    parser.add_argument("--dim", type=int, default=None)
    parser.add_argument("--p-pos", type=float, default=0.3)
    parser.add_argument("--separation", type=float, default=2.0)
    parser.add_argument("--steps", type=int, default=200)
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--offset", type=float, default=1.0)
    parser.add_argument("--ruggedness", type=float, default=0.5)
    parser.add_argument(
        "--sleep", type=float, default=0.0,
        help="artificial per-request delay in seconds (timeout testing)",
    )
    args = parser.parse_args(argv)
    if args.dim is None:
        args.dim = 4 if args.mode == "toy" else 5

    evaluator = build_evaluator(args)
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
            if not isinstance(request, dict):
                raise ValueError("request is not an object")
        except (json.JSONDecodeError, ValueError) as exc:
            reply = {"id": None, "ok": False, "error": f"bad request line: {exc}"}
        else:
            reply = handle_request(evaluator, request, sleep_s=args.sleep)
        sys.stdout.write(json.dumps(reply, separators=(",", ":")) + "\n")
        sys.stdout.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
