"""Thin command-line client for the estimation service.

Every subcommand builds a request, sends it to the service (by default the
bundled app, spoken to in-process over ASGI; ``--server`` targets a running
instance instead), writes the returned artifacts, and prints a one-line
summary.  Exit codes: 0 success, 1 computation failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import asyncio
import json
import os
import sys
from pathlib import Path

import httpx

USAGE_ERROR = 2
COMPUTE_ERROR = 1


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class ServiceClient:
    """POSTs to a remote server or to the in-process app over ASGI."""

    def __init__(self, server: str | None = None, timeout: float = 3600.0):
        self.server = server
        self.timeout = timeout

    def post(self, path: str, payload: dict):
        if self.server:
            try:
                resp = httpx.post(self.server.rstrip("/") + path, json=payload, timeout=self.timeout)
            except httpx.HTTPError as exc:
                raise CliError(f"cannot reach server: {exc}", COMPUTE_ERROR)
            return resp.status_code, resp
        from .service.app import app

        async def _run():
            transport = httpx.ASGITransport(app=app)
            async with httpx.AsyncClient(
                transport=transport, base_url="http://roacert", timeout=self.timeout
            ) as client:
                return await client.post(path, json=payload)

        resp = asyncio.run(_run())
        return resp.status_code, resp


def check(status: int, resp) -> None:
    if status == 200:
        return
    try:
        detail = resp.json().get("detail")
    except Exception:
        detail = resp.text
    if status == 422:
        raise CliError(f"invalid request: {detail}", USAGE_ERROR)
    if isinstance(detail, dict):
        raise CliError(f"[{detail.get('stage', '?')}] {detail.get('message', detail)}", COMPUTE_ERROR)
    raise CliError(str(detail), COMPUTE_ERROR)


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {path}", USAGE_ERROR)
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"config is not valid JSON: {exc}", USAGE_ERROR)


def resolve(args, config: dict, key: str, default=None):
    """Precedence: explicit flag > ROA_SEED (seed only) > config file > default."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key == "seed" and "ROA_SEED" in os.environ:
        return int(os.environ["ROA_SEED"])
    if key in config:
        return config[key]
    return default


def system_payload(args, config: dict) -> dict:
    name = resolve(args, config, "system")
    if name is None:
        raise CliError("no system given (use --system lqr|mpc|path.json)", USAGE_ERROR)
    if name in ("lqr", "mpc"):
        payload = {"builtin": name}
        if name == "mpc":
            alpha = resolve(args, config, "alpha")
            if alpha is not None:
                payload["alpha"] = float(alpha)
            payload["r_iters"] = int(resolve(args, config, "r_iters", 25))
        return payload
    p = Path(name)
    if not p.exists():
        raise CliError(f"system file not found: {name}", USAGE_ERROR)
    return {"document": json.loads(p.read_text())}


def box_payload(args, config: dict):
    box = resolve(args, config, "box")
    if box is None:
        return None
    if isinstance(box, (int, float)):
        raise CliError("box must be [[lower...],[upper...]] or {lower, upper}", USAGE_ERROR)
    if isinstance(box, str):
        box = json.loads(box)
    if isinstance(box, list):
        return {"lower": box[0], "upper": box[1]}
    return box


def write_artifact(directory: str, name: str, content: str) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(content)
    return path


def dump(obj: dict) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def embed_config(doc: dict, args, config: dict, keys: list) -> dict:
    """Attach the exact resolved parameters that produced an artifact."""
    doc = dict(doc)
    doc["config"] = {k: resolve(args, config, k) for k in keys if resolve(args, config, k) is not None}
    return doc


def cmd_cert(args) -> int:
    config = load_config(args.config)
    client = ServiceClient(resolve(args, config, "server"))
    payload = {
        "system": system_payload(args, config),
        "p": int(resolve(args, config, "p", 25)),
        "iota": float(resolve(args, config, "iota", 1e-6)),
    }
    status, resp = client.post("/cert", payload)
    check(status, resp)
    cert = resp.json()
    out = resolve(args, config, "out", "artifacts")
    doc = embed_config(cert, args, config, ["system", "p", "iota", "alpha", "r_iters"])
    path = write_artifact(out, "certificate.json", dump(doc))
    print(
        f"p_tilde={cert['p_tilde']} r_iota={cert['r_iota']:.6g} "
        f"c_p={cert['c_p']:.6g} (p={cert['p']}, iota={cert['iota']:.6g}) -> {path}"
    )
    return 0


def cmd_estimate(args) -> int:
    config = load_config(args.config)
    client = ServiceClient(resolve(args, config, "server"))
    payload = {
        "system": system_payload(args, config),
        "p": int(resolve(args, config, "p", 25)),
        "iota": float(resolve(args, config, "iota", 1e-6)),
        "N1": int(resolve(args, config, "n1", 100)),
        "N2": int(resolve(args, config, "n2", 200)),
        "q": int(resolve(args, config, "q", 2)),
        "seed": int(resolve(args, config, "seed", 0)),
        "mode": resolve(args, config, "mode", "dd-lp"),
    }
    box = box_payload(args, config)
    if box is not None:
        payload["box"] = box
    cert_path = resolve(args, config, "cert")
    if cert_path is not None:
        cert_doc = json.loads(Path(cert_path).read_text())
        cert_doc.pop("config", None)
        payload["cert"] = cert_doc
        payload.pop("p")
    status, resp = client.post("/estimate", payload)
    check(status, resp)
    body = resp.json()
    out = resolve(args, config, "out", "artifacts")
    doc = embed_config(
        body["estimate"], args, config,
        ["system", "p", "iota", "n1", "n2", "q", "seed", "mode", "box", "alpha", "r_iters"],
    )
    path = write_artifact(out, "estimate.json", dump(doc))
    print(f"{body['summary']} -> {path}")
    return 0


def _load_estimate(path_str: str) -> dict:
    p = Path(path_str)
    if not p.exists():
        raise CliError(f"estimate file not found: {path_str}", USAGE_ERROR)
    doc = json.loads(p.read_text())
    doc.pop("config", None)
    return doc


def cmd_audit(args) -> int:
    config = load_config(args.config)
    client = ServiceClient(resolve(args, config, "server"))
    payload = {
        "system": system_payload(args, config),
        "estimate": _load_estimate(args.estimate),
        "M": int(resolve(args, config, "m", 10_000)),
        "seed": int(resolve(args, config, "seed", 0)),
        "runs": int(resolve(args, config, "runs", 1)),
        "workers": int(resolve(args, config, "workers", 1)),
    }
    box = box_payload(args, config)
    if box is not None:
        payload["box"] = box
    status, resp = client.post("/audit", payload)
    check(status, resp)
    body = resp.json()
    out = resolve(args, config, "out", "artifacts")
    doc = embed_config(body["report"], args, config, ["system", "m", "seed", "runs", "box"])
    jpath = write_artifact(out, "audit.json", dump(doc))
    write_artifact(out, "audit.txt", body["table"])
    rep = body["report"]
    print(
        f"fp_rate={rep['fp_rate']:.6g} fn_rate={rep['fn_rate']:.6g} "
        f"(M={rep['M']}, runs={payload['runs']}) -> {jpath}"
    )
    return 0


def cmd_complexity(args) -> int:
    config = load_config(args.config)
    client = ServiceClient(resolve(args, config, "server"))
    payload = {
        "delta": float(resolve(args, config, "delta", 1e-6)),
        "n": int(resolve(args, config, "n", 2)),
        "q": int(resolve(args, config, "q", 2)),
    }
    eps = resolve(args, config, "epsilon")
    N = resolve(args, config, "n_samples")
    if eps is not None:
        payload["epsilon"] = float(eps)
    elif N is not None:
        payload["N"] = int(N)
    else:
        raise CliError("give --epsilon or --n-samples", USAGE_ERROR)
    status, resp = client.post("/complexity", payload)
    check(status, resp)
    body = resp.json()
    for name in ("shape_stage", "level_stage"):
        row = body[name]
        parts = [f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()]
        print(f"{name.replace('_', ' ')}: " + " ".join(parts))
    return 0


def cmd_grid(args) -> int:
    config = load_config(args.config)
    client = ServiceClient(resolve(args, config, "server"))
    payload = {
        "system": system_payload(args, config),
        "resolution": int(resolve(args, config, "resolution", 400)),
        "iota": float(resolve(args, config, "iota", 1e-6)),
    }
    if args.estimate is not None:
        payload["estimate"] = _load_estimate(args.estimate)
    else:
        payload["p"] = int(resolve(args, config, "p", 25))
    box = box_payload(args, config)
    if box is not None:
        payload["box"] = box
    status, resp = client.post("/grid", payload)
    check(status, resp)
    out_path = Path(resolve(args, config, "out", "grid.csv"))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(resp.text)
    print(f"{payload['resolution']}x{payload['resolution']} lattice -> {out_path}")
    return 0


def cmd_sweep(args) -> int:
    config = load_config(args.config)
    client = ServiceClient(resolve(args, config, "server"))
    n1_list = resolve(args, config, "n1_list", "100,250,500,1000")
    if isinstance(n1_list, str):
        n1_list = [int(s) for s in n1_list.split(",") if s]
    payload = {
        "system": system_payload(args, config),
        "p": int(resolve(args, config, "p", 25)),
        "iota": float(resolve(args, config, "iota", 1e-6)),
        "N1_list": n1_list,
        "q": int(resolve(args, config, "q", 2)),
        "M": int(resolve(args, config, "m", 10_000)),
        "runs": int(resolve(args, config, "runs", 10)),
        "seed": int(resolve(args, config, "seed", 0)),
        "mode": resolve(args, config, "mode", "dd-lp"),
        "workers": int(resolve(args, config, "workers", 1)),
    }
    box = box_payload(args, config)
    if box is not None:
        payload["box"] = box
    status, resp = client.post("/sweep", payload)
    check(status, resp)
    body = resp.json()
    out = resolve(args, config, "out", "artifacts")
    doc = embed_config(
        {"rows": body["rows"]}, args, config,
        ["system", "p", "iota", "n1_list", "q", "m", "runs", "seed", "mode", "box"],
    )
    jpath = write_artifact(out, "sweep.json", dump(doc))
    write_artifact(out, "sweep.txt", body["table"])
    print(body["table"], end="")
    print(f"-> {jpath}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roa",
        description="Probabilistic region-of-attraction estimation (thin service client)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--server", help="URL of a running service (default: in-process)")
        p.add_argument("--system", help="lqr, mpc, or path to a system JSON document")
        p.add_argument("--alpha", type=float, help="MPC step size")
        p.add_argument("--r-iters", dest="r_iters", type=int, help="MPC solver iterations")
        p.add_argument("--out", help="output directory or file")

    p = sub.add_parser("cert", help="compute the finite-time membership certificate")
    common(p)
    p.add_argument("--p", type=int, help="simulation horizon (default 25)")
    p.add_argument("--iota", type=float, help="invariance slack (default 1e-6)")
    p.set_defaults(func=cmd_cert)

    p = sub.add_parser("estimate", help="draw pools, fit the polynomial, set the level")
    common(p)
    p.add_argument("--p", type=int)
    p.add_argument("--iota", type=float)
    p.add_argument("--cert", help="certificate JSON produced by `roa cert`")
    p.add_argument("--n1", type=int, help="stable / unstable-fit pool size")
    p.add_argument("--n2", type=int, help="level pool size")
    p.add_argument("--q", type=int, help="Gram basis degree (polynomial degree 2q)")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["dd-lp", "full-psd"])
    p.add_argument("--box", help="JSON [[lower...],[upper...]]")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("audit", help="Monte-Carlo accuracy of an estimate")
    common(p)
    p.add_argument("estimate", help="estimate JSON produced by `roa estimate`")
    p.add_argument("--m", type=int, help="evaluation points per run (default 10000)")
    p.add_argument("--runs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--box", help="JSON [[lower...],[upper...]]")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("complexity", help="scenario sample-complexity quotes")
    common(p)
    p.add_argument("--epsilon", type=float, help="target accuracy")
    p.add_argument("--n-samples", dest="n_samples", type=int, help="available samples N")
    p.add_argument("--delta", type=float, help="reliability (default 1e-6)")
    p.add_argument("--n", type=int, help="state dimension (default 2)")
    p.add_argument("--q", type=int, help="basis degree (default 2)")
    p.set_defaults(func=cmd_complexity)

    p = sub.add_parser("grid", help="export a lattice CSV for plotting")
    common(p)
    p.add_argument("--estimate", help="estimate JSON; omit for truth labels only")
    p.add_argument("--p", type=int)
    p.add_argument("--iota", type=float)
    p.add_argument("--resolution", type=int, help="lattice points per axis (default 400)")
    p.add_argument("--box", help="JSON [[lower...],[upper...]]")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("sweep", help="sample-size sweep with aggregated audits")
    common(p)
    p.add_argument("--p", type=int)
    p.add_argument("--iota", type=float)
    p.add_argument("--n1-list", dest="n1_list", help="comma-separated N1 values")
    p.add_argument("--q", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["dd-lp", "full-psd"])
    p.add_argument("--workers", type=int)
    p.add_argument("--box", help="JSON [[lower...],[upper...]]")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("serve", help="run the service under uvicorn")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE_ERROR if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return COMPUTE_ERROR


if __name__ == "__main__":
    sys.exit(main())
