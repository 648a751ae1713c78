"""Operator CLI: a thin client over the service's request/response models.

Each subcommand assembles the same pydantic request the HTTP endpoint takes,
then either dispatches it in-process or POSTs it to `--server URL`. A JSON
config file (`--config`) provides defaults; explicit flags win.

Exit codes: 0 ok, 1 usage/config, 2 data/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from pydantic import ValidationError

from .errors import ConfigError, DataError, FormatError, NumericError, SamplingError, ShapeError
from .service.models import ParamsRequest, RunConfig, SynthRequest

USAGE_EXIT, DATA_EXIT, NUMERIC_EXIT = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _add_common(p):
    p.add_argument("--config", help="JSON config file mirroring RunConfig fields (flags win)")
    p.add_argument("--server", help="dispatch to a running fewseg service at this base URL")


def _add_decoder_flags(p):
    p.add_argument("--d", type=int, help="decoder hidden channels (default 96)")
    p.add_argument("--gn-groups", type=int)
    p.add_argument("--num-dscm", type=int)
    p.add_argument("--dscm-repeats", type=int)
    p.add_argument("--support-stride", type=int, choices=(1, 2))
    p.add_argument("--fusion", choices=("early", "late"))
    p.add_argument("--m", type=int, help="first backbone layer used (1 = all 12 layers)")
    p.add_argument("--use-text", dest="use_text", action="store_const", const=True)
    p.add_argument("--no-use-text", dest="use_text", action="store_const", const=False)


def _add_run_flags(p):
    _add_common(p)
    _add_decoder_flags(p)
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--fold", type=int)
    p.add_argument("--dataset-style", choices=("pascal", "coco", "synthetic"))
    p.add_argument("--k", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "test"))


def build_parser():
    parser = _Parser(prog="fewseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic feature store")
    _add_common(p)
    p.add_argument("--out")
    p.add_argument("--n-classes", type=int)
    p.add_argument("--images-per-class", type=int)
    p.add_argument("--seed", type=int)

    for name, help_text in (
        ("train", "train the decoder on a fold"),
        ("eval", "evaluate K-shot mIoU over test episodes"),
        ("predict", "write one episode's K-shot mask (PGM + tensor)"),
        ("viz", "export per-layer averaged activation maps"),
    ):
        _add_run_flags(sub.add_parser(name, help=help_text))

    p = sub.add_parser("params", help="report the learnable parameter count")
    _add_common(p)
    _add_decoder_flags(p)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8750)
    return parser


def _build_request(args, model_cls):
    file_cfg = {}
    if args.config:
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except FileNotFoundError:
            raise FormatError(f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            raise FormatError(f"config file is not valid JSON: {exc}")
    fields = set(model_cls.model_fields)
    data = {k: v for k, v in file_cfg.items() if k in fields}
    data.update({k: v for k, v in vars(args).items() if k in fields and v is not None})
    return model_cls(**data)


_COMMANDS = {
    "synth": (SynthRequest, "run_synth", "/synth"),
    "train": (RunConfig, "run_train", "/train"),
    "eval": (RunConfig, "run_eval", "/eval"),
    "predict": (RunConfig, "run_predict", "/predict"),
    "viz": (RunConfig, "run_viz", "/viz"),
    "params": (ParamsRequest, "run_params", "/params"),
}

_HTTP_EXITS = {400: USAGE_EXIT, 409: DATA_EXIT, 422: DATA_EXIT, 500: NUMERIC_EXIT}


def _dispatch_http(server, path, request, transport=None):
    import httpx

    with httpx.Client(base_url=server, timeout=None, transport=transport) as client:
        resp = client.post(path, json=request.model_dump())
    if resp.status_code != 200:
        print(f"error: service returned {resp.status_code}: {resp.text}", file=sys.stderr)
        raise SystemExit(_HTTP_EXITS.get(resp.status_code, NUMERIC_EXIT))
    return resp.json()


def main(argv=None, transport=None):
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        import uvicorn

        uvicorn.run("fewseg.service.app:app", host=args.host, port=args.port)
        return 0
    model_cls, runner_name, path = _COMMANDS[args.command]
    try:
        request = _build_request(args, model_cls)
        if args.server:
            result = _dispatch_http(args.server, path, request, transport=transport)
        else:
            from . import runs

            result = getattr(runs, runner_name)(request).model_dump()
    except ValidationError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (DataError, FormatError, ShapeError, SamplingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return NUMERIC_EXIT
    print(json.dumps(result, indent=1, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
