"""Service CLI: serve the API or record fixture archives."""

from __future__ import annotations

import argparse
import sys


def cmd_serve(args):
    import uvicorn

    from .app import create_app

    uvicorn.run(
        create_app(seed=args.seed, t_max=args.t_max),
        host=args.host,
        port=args.port,
        log_level="info",
    )
    return 0


def cmd_record(args):
    import numpy as np
    from PIL import Image

    from .app import create_app
    from .fixtures import record_fixtures

    class LocalTransport:
        """In-process transport: record without standing up a socket."""

        def __init__(self, app):
            from fastapi.testclient import TestClient

            self.client = TestClient(app)

        def send(self, op, payload):
            if op == "health":
                resp = self.client.get("/v1/health")
            else:
                resp = self.client.post(f"/v1/{op}", json={"op": op, "payload": payload})
            resp.raise_for_status()
            doc = resp.json()
            return doc.get("payload", doc)

    images = []
    for path in args.images:
        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        images.append(arr)
    if not images:  # deterministic synthetic image so recording needs no assets
        v, u = np.meshgrid(np.linspace(0, 1, 32), np.linspace(0, 1, 32), indexing="ij")
        images.append(np.stack([u, v, 0.5 + 0.3 * np.sin(6 * u)], axis=-1).astype(np.float32))
    transport = LocalTransport(create_app(seed=args.seed, t_max=args.t_max))
    digest = record_fixtures(transport, images, args.out, seed=args.seed)
    print(f"recorded {len(images)} image exchange(s) -> {args.out}")
    print(f"archive digest: {digest}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="prior-service")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8484)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--t-max", type=int, default=1000)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("record", help="record a replay fixture archive")
    p.add_argument("--out", required=True)
    p.add_argument("--images", nargs="*", default=[])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--t-max", type=int, default=1000)
    p.set_defaults(fn=cmd_record)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
