"""Command-line entry point.

Commands run in-process by default; `--server URL` forwards the same
request to a running service instance instead, so scripted use and the
HTTP deployment stay interchangeable.
"""

import argparse
import sys

from . import config as cfgmod
from .errors import (CheckpointMismatchError, ConfigError, DivergenceError,
                     EmptyBatchError, FormatError, IoError, ShapeError)

_DOMAIN_ERRORS = (ConfigError, ShapeError, FormatError, EmptyBatchError,
                  DivergenceError, CheckpointMismatchError, IoError)


def _add_common(p):
    p.add_argument("--config", metavar="PATH", help="flat key=value config file")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument("--out", default=None, help="override the output directory")
    p.add_argument("--variant", default=None, metavar="SPEC",
                   help="override variant flags, e.g. upsampler=srm,context=crm")
    p.add_argument("--server", default=None, metavar="URL",
                   help="send the command to a running service instead")


def build_parser():
    parser = argparse.ArgumentParser(prog="srfseg",
                                     description="offset-refined segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a variant per config")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out scenes")
    _add_common(p)
    p.add_argument("--checkpoint", metavar="PATH", help="checkpoint to evaluate")
    p.add_argument("--oracle", action="store_true",
                   help="score ground truth against itself (pipeline identity check)")
    p.add_argument("--dump-predictions", action="store_true",
                   help="write input PPMs and predicted PGMs next to the report")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--targets", default=None,
                   help="comma-separated subset of registered targets")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", default=None, metavar="TARGET",
                   help="fault-injection hook: corrupt one target's gradient")
    p.add_argument("--server", default=None, metavar="URL")

    p = sub.add_parser("ablate", help="train and compare the four decoder variants")
    _add_common(p)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


def _config_from(args):
    return cfgmod.resolve(path=args.config, seed=args.seed, out=args.out,
                          variant=args.variant)


def _request_body(args):
    body = {"seed": args.seed, "out": args.out, "variant": args.variant}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            body["config_text"] = fh.read()
    return body


def _post(server, path, body):
    import httpx

    r = httpx.post(server.rstrip("/") + path, json=body, timeout=None)
    if r.status_code != 200:
        try:
            detail = r.json().get("detail", r.text)
        except ValueError:
            detail = r.text
        raise RuntimeError(f"server returned {r.status_code}: {detail}")
    return r.json()


def _cmd_train(args):
    if args.server:
        res = _post(args.server, "/train", _request_body(args))
        print(f"checkpoint: {res['checkpoint']}")
        print(f"metrics: {res['metrics_csv']}")
        return 0
    from .train import run_train

    checkpoint = run_train(_config_from(args))
    print(f"checkpoint: {checkpoint}")
    return 0


def _cmd_eval(args):
    if args.server:
        body = _request_body(args)
        body.update({"checkpoint": args.checkpoint, "oracle": args.oracle,
                     "dump": args.dump_predictions})
        res = _post(args.server, "/eval", body)
        for c, v in enumerate(res["per_class"]):
            print(f"class_{c}_iou,{'nan' if v is None else v}")
        print(f"miou,{res['miou']}")
        print(f"boundary_f_tol1,{res['boundary_f_tol1']}")
        print(f"boundary_f_tol3,{res['boundary_f_tol3']}")
        return 0
    from .train import run_eval

    run_eval(_config_from(args), checkpoint=args.checkpoint, oracle=args.oracle,
             dump=args.dump_predictions)
    return 0


def _cmd_gradcheck(args):
    targets = args.targets.split(",") if args.targets else None
    if args.server:
        res = _post(args.server, "/gradcheck",
                    {"targets": targets, "seed": args.seed, "corrupt": args.corrupt})
        rows = [(r["target"], r["max_rel_error"], r["passed"]) for r in res["rows"]]
    else:
        from .gradsuite import run_suite

        rows = run_suite(names=targets, seed=args.seed, corrupt=args.corrupt)
    if not rows:
        print(f"no registered targets match {args.targets!r}", file=sys.stderr)
        return 2
    from .gradsuite import format_rows

    print(format_rows(rows))
    return 0 if all(ok for _, _, ok in rows) else 1


def _cmd_ablate(args):
    if args.server:
        res = _post(args.server, "/ablate", _request_body(args))
        print(res["table_text"], end="")
        print(f"csv: {res['csv']}")
        return 0
    from .train import run_ablate

    result = run_ablate(_config_from(args))
    print(f"csv: {result['csv']}")
    return 0


def _cmd_serve(args):
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return 0


_HANDLERS = {"train": _cmd_train, "eval": _cmd_eval, "gradcheck": _cmd_gradcheck,
             "ablate": _cmd_ablate, "serve": _cmd_serve}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except _DOMAIN_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except RuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
