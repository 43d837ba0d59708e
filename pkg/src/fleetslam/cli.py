"""Command-line entry points: server, agent, eval, audit."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


def _cmd_server(args):
    from .server import Server, ServerConfig, parse_config

    config = parse_config(args.config) if args.config else ServerConfig()
    if args.port is not None:
        config.port = args.port
    if args.command_port is not None:
        config.command_port = args.command_port
    server = Server(config).start()
    print(f"listening on {config.host}:{config.port} "
          f"(commands on {config.command_port})", flush=True)
    if args.ports_file:
        Path(args.ports_file).write_text(json.dumps(
            {"port": config.port, "command_port": config.command_port}))
    try:
        server.wait()
    except KeyboardInterrupt:
        server.stop()
    return 0


def _cmd_agent(args):
    from .agentsim import AgentSession, SceneConfig

    with open(args.config) as f:
        scene = json.load(f)
    if args.seed is not None:
        scene["seed"] = args.seed
    config = SceneConfig.from_dict(scene)
    host, port = args.server.rsplit(":", 1)
    session = AgentSession(
        config,
        agent_index=args.agent_index if args.agent_index is not None else args.agent_id,
        server_addr=(host, int(port)),
        agent_id=args.agent_id,
        out_dir=args.out,
        realtime_rate=args.realtime_rate,
        linger=args.linger,
    )
    log = session.run()
    print(json.dumps({"agent": args.agent_id,
                      "keyframes": len(session.stream.keyframes),
                      "batches": log.get("batches_sent", 0)}))
    return 0


def _cmd_eval_ate(args):
    from .evaluate import ate_rmse, read_tum, scale_error

    est = read_tum(args.est)
    gt = read_tum(args.gt)
    out = {"ate_rmse_m": ate_rmse(est, gt)}
    if args.with_scale:
        out["scale_error_pct"] = scale_error(est, gt)
    print(json.dumps(out))
    return 0


def _cmd_eval_run(args):
    from .evaluate import run_experiment

    result = run_experiment(args.scenario, args.out)
    print(f"report written to {result['csv']}")
    return 0


def _cmd_audit(args):
    from .mapstore import load_checkpoint

    smap = load_checkpoint(args.checkpoint)
    problems = smap.audit()
    print(json.dumps({"map": smap.map_id, "counts": smap.counts(),
                      "problems": problems}, indent=2))
    return 0 if not problems else 1


def main(argv=None):
    parser = argparse.ArgumentParser(prog="fleetslam",
                                     description="collaborative VI-SLAM back-end")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("server", help="run the map server")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--port", type=int)
    p.add_argument("--command-port", type=int)
    p.add_argument("--ports-file", help="write bound ports as JSON (for orchestration)")
    p.set_defaults(func=_cmd_server)

    p = sub.add_parser("agent", help="run one simulated agent")
    p.add_argument("--config", required=True, help="scene config JSON")
    p.add_argument("--server", required=True, help="host:port")
    p.add_argument("--agent-id", type=int, required=True)
    p.add_argument("--agent-index", type=int, help="trajectory index in the scene")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory for trajectories and session log")
    p.add_argument("--realtime-rate", type=float, default=0.0,
                   help="0 = as fast as possible, 1 = wall-clock speed")
    p.add_argument("--linger", type=float, default=2.0,
                   help="seconds to keep listening for drift poses at the end")
    p.set_defaults(func=_cmd_agent)

    p = sub.add_parser("eval", help="trajectory metrics and experiments")
    esub = p.add_subparsers(dest="eval_command", required=True)
    pe = esub.add_parser("ate", help="ATE/scale between two TUM files")
    pe.add_argument("--est", required=True)
    pe.add_argument("--gt", required=True)
    pe.add_argument("--with-scale", action="store_true")
    pe.set_defaults(func=_cmd_eval_ate)
    pr = esub.add_parser("run", help="run a scenario end to end")
    pr.add_argument("--scenario", required=True)
    pr.add_argument("--out")
    pr.set_defaults(func=_cmd_eval_run)

    p = sub.add_parser("audit", help="integrity-check a map checkpoint")
    p.add_argument("checkpoint")
    p.set_defaults(func=_cmd_audit)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
