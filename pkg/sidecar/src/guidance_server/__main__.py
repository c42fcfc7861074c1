"""CLI entry point: python -m guidance_server [options]."""

import argparse

import uvicorn

from .app import create_app
from .config import DEFAULT_MODEL, PROCEDURAL_MODEL, ServerConfig


def main(argv=None):
    p = argparse.ArgumentParser(
        prog="guidance-server",
        description="serve diffusion generate/score over HTTP+JSON")
    p.add_argument("--model", default=DEFAULT_MODEL,
                   help="control checkpoint identifier; light-conditioned "
                        "weights drop in here, %r runs the self-contained "
                        "engine" % PROCEDURAL_MODEL)
    p.add_argument("--device", default="cpu")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--max-concurrent", type=int, default=2)
    p.add_argument("--distilled-encoder", action="store_true",
                   help="swap in the fast approximate encoder")
    args = p.parse_args(argv)
    config = ServerConfig(model=args.model, device=args.device,
                          port=args.port, max_concurrent=args.max_concurrent,
                          distilled_encoder=args.distilled_encoder)
    try:
        app = create_app(config)
    except ValueError as exc:
        p.error(str(exc))
    uvicorn.run(app, host=args.host, port=config.port)


if __name__ == "__main__":
    main()
