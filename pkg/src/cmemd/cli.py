"""Command-line entry points: gen-data, train, eval, ot-solve, gradcheck.

Exit codes: 0 on success, 1 for invalid input (bad config, malformed
files, unknown keys), 2 for runtime or numerical failures.
"""

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

from .config import load_config, preset
from .data import generate_dataset, load_feature_file, write_feature_file
from .errors import InvalidArgument, NumericalError, ParseError, UnsupportedSize
from .evalkit import REPORT_SCHEMA_VERSION, evaluate_both
from .gradcheck import run_gradcheck
from .ot import SinkhornConfig, exact_transport, sinkhorn, transport_cost
from .train import load_data, load_model, train

log = logging.getLogger("cmemd")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
MANIFEST_SCHEMA_VERSION = 1


def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _dump(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    sys.stdout.write(text)


def resolve_config(args):
    cfg = preset(args.preset)
    if args.config:
        cfg = load_config(args.config, base=cfg)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.data.synth.seed = args.seed
    return cfg


def cmd_gen_data(args):
    cfg = resolve_config(args)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    ds = generate_dataset(cfg.data.synth)
    files = {}
    for split, batch in (("train", ds.train), ("test", ds.test)):
        path = os.path.join(out, f"{split}.csv")
        write_feature_file(path, batch)
        files[f"{split}.csv"] = _sha256(path)
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "config_hash": cfg.config_hash(),
        "seed": cfg.data.synth.seed,
        "spec": cfg.to_dict()["data"]["synth"],
        "sha256": files,
    }
    _dump(manifest, os.path.join(out, "manifest.json"))
    return EXIT_OK


def cmd_train(args):
    cfg = resolve_config(args)
    if args.epochs is not None:
        cfg.optim.epochs = args.epochs
    out = args.out or "run"
    result = train(cfg, out_dir=out)
    last = result.rows[-1]
    log.info("epoch %d: objective %.4f, modality gap %.4f, rank-1 %.3f / %.3f",
             last["epoch"], last["objective"], last["modality_gap"],
             last["rank_1_v2t"], last["rank_1_t2v"])
    return EXIT_RUNTIME if result.aborted else EXIT_OK


def cmd_eval(args):
    model, meta = load_model(args.checkpoint)
    cfg = model.cfg
    if args.config or args.seed is not None or args.preset != "default":
        requested = resolve_config(args)
        if (requested.encoder, requested.mgs.K) != (cfg.encoder, cfg.mgs.K):
            raise InvalidArgument("checkpoint shapes do not match the requested config")
        cfg = requested
    if args.test:
        test = load_feature_file(args.test)
    else:
        _, test = load_data(cfg)
    if test.features.shape[1] != cfg.encoder.input_dim:
        raise InvalidArgument(
            f"test features have {test.features.shape[1]} columns, checkpoint expects "
            f"{cfg.encoder.input_dim}")
    beta = cfg.mgs.beta if args.beta is None else args.beta
    feats = model.inference(test.features, test.modality, beta)
    reports = evaluate_both(feats, test.identity, test.modality)
    out = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config_hash": meta["config_hash"],
        "beta": beta,
        "reports": {k: r.to_dict() for k, r in reports.items()},
    }
    _dump(out, os.path.join(args.out, "eval.json") if args.out else None)
    return EXIT_OK


def parse_cost_csv(text, source="<string>"):
    """Numeric matrix from comma-separated rows; errors carry the line number."""
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            row = [float(x) for x in line.split(",")]
        except ValueError:
            raise ParseError(f"{source}: non-numeric entry in {line!r}", lineno) from None
        if rows and len(row) != len(rows[0]):
            raise ParseError(f"{source}: expected {len(rows[0])} columns, found {len(row)}", lineno)
        rows.append(row)
    if not rows:
        raise ParseError(f"{source}: no rows", 1)
    return np.array(rows)


def _weights(raw, name):
    if raw is None:
        return None
    try:
        return np.array([float(x) for x in raw.split(",")])
    except ValueError:
        raise InvalidArgument(f"--{name} must be comma-separated numbers") from None


def cmd_ot_solve(args):
    with open(args.cost, encoding="utf-8") as fh:
        cost = parse_cost_csv(fh.read(), args.cost)
    v, t = _weights(args.row_marginal, "row-marginal"), _weights(args.col_marginal, "col-marginal")
    cfg = SinkhornConfig(epsilon=args.epsilon, max_iterations=args.max_iterations,
                         tolerance=args.tolerance)
    plan = sinkhorn(cost, v, t, cfg)
    out = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "plan": plan.plan.tolist(),
        "cost": transport_cost(plan, cost),
        "iterations": plan.iterations,
        "converged": plan.converged,
        "marginal_violation": plan.marginal_violation,
    }
    if args.exact:
        exact = exact_transport(cost, v, t)
        out["exact_plan"] = exact.plan.tolist()
        out["exact_cost"] = transport_cost(exact, cost)
    _dump(out)
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = resolve_config(args)
    report = run_gradcheck(cfg, args.num_probes)
    if args.num_probes <= 0:
        print("warning: no probes requested, nothing was checked")
    for line in report.lines():
        print(line)
    print("PASS" if report.passed else "FAIL")
    return EXIT_OK if report.passed else EXIT_RUNTIME


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file layered over the preset")
    common.add_argument("--preset", default="default", help="default, mixed-noise, regdb-profile or sysu-profile")
    common.add_argument("--seed", type=int, help="overrides both the run and the data seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cmemd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic train/test feature files")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train and write metrics + checkpoint")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="retrieval report for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--test", help="feature CSV; defaults to the checkpoint's own test split")
    p.add_argument("--beta", type=float, help="part/global fusion weight")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ot-solve", parents=[common], help="entropic OT on a cost CSV")
    p.add_argument("cost")
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--max-iterations", type=int, default=1000)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--row-marginal")
    p.add_argument("--col-marginal")
    p.add_argument("--exact", action="store_true", help="also solve the unregularized problem")
    p.set_defaults(func=cmd_ot_solve)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--num-probes", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InvalidArgument, UnsupportedSize, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
