"""Command-line client for the simulation service.

All subcommands go through the HTTP API: against a remote server when
--server is given, otherwise against the application in-process (same
filesystem, no daemon needed). Configs are YAML or JSON documents matching
the RunConfig schema; --set key=value overrides nest with dots.

Exit codes: 0 ok, 1 config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
from pathlib import Path

import httpx
import yaml


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="toklink", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", default=None, help="YAML/JSON run config (defaults apply if omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. --set channel.p_target=0.2")
        p.add_argument("--server", default=None, help="base URL of a running service (default: in-process)")
        return p

    add_run_command("train-codec", "synthesize a corpus, fit RVQ codebooks, write codec artifacts")
    add_run_command("train-predictor", "fit the count-model predictor on a token corpus")
    add_run_command("simulate", "run the end-to-end pipeline (one row per channel grid point)")
    add_run_command("sweep", "run the Cartesian sweep grid and aggregate one report")

    p = sub.add_parser("report", help="merge and print existing report.json files")
    p.add_argument("paths", nargs="+", help="report.json files to merge")
    p.add_argument("--server", default=None)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)
    return parser


def _load_config(path: str | None, overrides: list[str]) -> dict:
    doc = {}
    if path is not None:
        text = Path(path).read_text()
        doc = yaml.safe_load(text) or {}
        if not isinstance(doc, dict):
            raise ValueError(f"config root must be a mapping, got {type(doc).__name__}")
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not KEY=VALUE")
        key, raw = item.split("=", 1)
        node = doc
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError(f"override {key!r} walks through a non-mapping")
        node[parts[-1]] = yaml.safe_load(raw)
    return doc


def _post(server: str | None, path: str, payload: dict) -> dict:
    if server is not None:
        with httpx.Client(base_url=server, timeout=600.0) as client:
            resp = client.post(path, json=payload)
    else:
        from .service import app

        async def go():
            # surface app crashes as HTTP 500s, same as a remote server would
            transport = httpx.ASGITransport(app=app, raise_app_exceptions=False)
            async with httpx.AsyncClient(transport=transport, base_url="http://toklink") as client:
                return await client.post(path, json=payload)

        resp = asyncio.run(go())
    if resp.status_code >= 400:
        detail = resp.json().get("detail", resp.text) if resp.headers.get("content-type", "").startswith("application/json") else resp.text
        code = 1 if resp.status_code in (400, 422) else 2
        raise _HttpFailure(code, f"HTTP {resp.status_code}: {detail}")
    return resp.json()


class _HttpFailure(Exception):
    def __init__(self, exit_code: int, message: str):
        super().__init__(message)
        self.exit_code = exit_code


def _print_files(files: dict) -> None:
    for name, path in sorted(files.items()):
        print(f"{name}: {path}")


def _run_command(args) -> int:
    if args.command == "serve":
        import uvicorn

        from .service import app
        uvicorn.run(app, host=args.host, port=args.port)
        return 0

    if args.command == "report":
        result = _post(args.server, "/report", {"paths": args.paths})
        print(result["table"])
        return 0

    cfg = _load_config(args.config, args.overrides)
    if args.command == "train-codec":
        result = _post(args.server, "/codec/train", cfg)
        print("depth  residual_mse")
        for depth, energy in enumerate(result["residual_energies"], start=1):
            print(f"{depth:>5}  {energy:.6f}")
        _print_files({k: v for k, v in result.items() if k.endswith("_path")})
        return 0
    if args.command == "train-predictor":
        result = _post(args.server, "/predictor/train", cfg)
        print(f"model: {result['model_path']} ({result['contexts']} contexts, "
              f"{result['corpus_frames']} frames, vocab {result['vocab']})")
        return 0
    if args.command in ("simulate", "sweep"):
        endpoint = "/simulate" if args.command == "simulate" else "/sweep"
        result = _post(args.server, endpoint, cfg)
        from .pipeline import render_table
        print(render_table(result["rows"]))
        _print_files(result["files"])
        return 0
    raise AssertionError(f"unhandled command {args.command}")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _run_command(args)
    except _HttpFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except httpx.HTTPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # unexpected runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
