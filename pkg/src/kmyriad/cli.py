"""kmyriad command line: pretrain, diversity, jumpstart, heatmap.

Exit codes: 0 success, 2 configuration or usage error, 3 numeric abort,
4 I/O error (including a corrupted checkpoint).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import seeding
from .config import RunConfig
from .envs import ParallelTrajectory, ReplicaSet, TerrainSpec, occupancy_grid, reset_all, rollout
from .errors import ChecksumError, ConfigError, ContractError, KMyriadError, NonFiniteError, TerrainError
from .jumpstart import GoalTask, PpoConfig, evaluate_heads, jumpstart_train
from .policy import MultiHeadPolicy, SingleHeadActor
from .store import CurveWriter, load_checkpoint, save_checkpoint, write_grid
from .train import FULL_STATE, XY, TrainConfig, assign, measure_diversity, train

log = logging.getLogger("kmyriad")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _resolve(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    flags = {
        "seeds": ["run.seeds"], "out": ["run.out"], "terrain": ["terrain.variant"],
        "epochs": ["train.epochs"], "heads": ["train.heads"],
        "envs": ["train.envs", "heatmap.envs"], "k": ["train.k", "diversity.k"],
        "horizon": ["train.horizon", "ppo.horizon", "diversity.horizon", "heatmap.horizon",
                    "task.eval_horizon"],
        "bins": ["heatmap.bins"],
    }
    for flag, keys in flags.items():
        value = getattr(args, flag, None)
        if value is not None:
            for key in keys:
                cfg.set(key, str(value))
    return cfg


def _terrain(cfg: RunConfig) -> TerrainSpec:
    try:
        return TerrainSpec.preset(cfg["terrain"]["variant"], cfg["terrain"]["half_width"])
    except (TerrainError, KeyError, ValueError) as exc:
        raise ConfigError(f"terrain: {exc}") from None


def _train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg["train"]
    projections = {"xy": XY, "full": FULL_STATE}
    if t["projection"] not in projections:
        raise ConfigError(f"train.projection must be one of {sorted(projections)}")
    try:
        return TrainConfig(
            epochs=t["epochs"], lr=t["lr"], milestones=t["milestones"], decay=t["decay"],
            k=t["k"], envs=t["envs"], heads=t["heads"], horizon=t["horizon"],
            seeds=cfg["run"]["seeds"], projection=projections[t["projection"]],
            max_grad_norm=t["max_grad_norm"], terrain=_terrain(cfg))
    except ContractError as exc:
        raise ConfigError(str(exc)) from None


def _ppo_config(cfg: RunConfig, pretrained: bool) -> PpoConfig:
    given = {k: v for k, v in cfg["ppo"].items() if v is not None}
    updates = given.pop("updates", None)
    try:
        ppo = PpoConfig.pretrained(**given) if pretrained else PpoConfig.no_pretrain(**given)
    except ContractError as exc:
        raise ConfigError(str(exc)) from None
    return ppo.with_updates(updates) if updates is not None else ppo


def cmd_pretrain(args) -> int:
    cfg = _resolve(args)
    tc = _train_config(cfg)
    out = Path(cfg["run"]["out"])
    cfg.write(out)
    curve = CurveWriter(out / "pretrain_curve.csv", "pretrain")
    status = EXIT_OK
    for seed in tc.seeds:
        result = train(tc, seed, callback=lambda e, h, lr, s=seed: curve.append(e, h, lr, s))
        save_checkpoint(result.policy, out / f"policy_seed{seed}.kmyr")
        if result.last_trajectory is not None:
            for h in range(tc.heads):
                grid = occupancy_grid(result.last_trajectory, cfg["heatmap"]["bins"],
                                      tc.terrain.half_width, heads=h)
                write_grid(grid, tc.terrain.half_width, out / f"heatmap_seed{seed}_head{h}.grid")
        if result.aborted:
            log.error("seed %d aborted at %s", seed, result.aborted)
            status = EXIT_NUMERIC
        else:
            print(f"seed {seed}: {len(result.entropy)} epochs, checkpoint written")
    return status


def cmd_diversity(args) -> int:
    cfg = _resolve(args)
    policy = load_checkpoint(args.checkpoint)
    if policy.n_heads < 2:
        raise ContractError(f"{args.checkpoint} has a single head; diversity compares at least two")
    d = cfg["diversity"]
    per_head_rollouts = max(1, d["rollouts"] // policy.n_heads)
    mean_kl, per_head, n = measure_diversity(
        policy, per_head_rollouts, d["horizon"], d["seed"], d["k"], _terrain(cfg), stride=d["stride"])
    out = Path(cfg["run"]["out"])
    cfg.write(out)
    table = CurveWriter(out / "diversity.csv", "diversity")
    for h, kl in enumerate(per_head):
        table.append(h, kl, d["k"], n)
    table.append("mean", mean_kl, d["k"], n)
    print(f"mean KL {mean_kl:.4f} nats over {policy.n_heads} heads")
    return EXIT_OK


def cmd_jumpstart(args) -> int:
    cfg = _resolve(args)
    if args.random == bool(args.checkpoint):
        raise ConfigError("give exactly one of --checkpoint or --random")
    terrain = _terrain(cfg)
    t = cfg["task"]
    out = Path(cfg["run"]["out"])
    source = None if args.random else load_checkpoint(args.checkpoint)
    ppo = _ppo_config(cfg, pretrained=source is not None)
    cfg.write(out)
    curve = CurveWriter(out / "jumpstart_curve.csv", "jumpstart")
    for seed in cfg["run"]["seeds"]:
        task = GoalTask.sample(seed, terrain, (t["r_min"], t["r_max"]), t["radius"])
        report = [f"seed {seed}", f"goal {task.goal[0]!r} {task.goal[1]!r} radius {task.radius!r}"]
        if source is None:
            kind = "random"
            actor = SingleHeadActor(seed=seeding.child_seed(seed, seeding.INIT, 3))
        elif source.n_heads == 1:
            kind = "single"
            actor = source.to_single_head(0)
        else:
            kind = "selected"
            rates, best = evaluate_heads(source, task, t["eval_rollouts"], seed, t["eval_horizon"])
            actor = source.to_single_head(best)
            report.append("head rates " + ",".join(repr(float(r)) for r in rates))
            report.append(f"selected head {best}")
        if actor.state_dim != 4 or actor.action_dim != 2:
            raise ContractError("checkpoint dimensions do not match the point-mass environment")
        result = jumpstart_train(task, actor, ppo, seed,
                                 callback=lambda n, s, sd=seed, k=kind: curve.append(n, s, sd, k))
        report.append(f"init {kind}")
        report.append(f"first rollout with success >= 0.5: {result.first_reaching(0.5)}")
        (out / f"jumpstart_report_seed{seed}.txt").write_text("\n".join(report) + "\n")
        print("; ".join(report))
        if any(i.aborted for i in result.infos):
            return EXIT_NUMERIC
    return EXIT_OK


def cmd_heatmap(args) -> int:
    cfg = _resolve(args)
    hm = cfg["heatmap"]
    terrain = _terrain(cfg)
    if bool(args.checkpoint) == bool(args.trajectory):
        raise ConfigError("give exactly one of --checkpoint or --trajectory")
    if args.trajectory:
        traj = ParallelTrajectory.load(args.trajectory)
    else:
        policy: MultiHeadPolicy = load_checkpoint(args.checkpoint)
        heads = assign(hm["envs"], policy.n_heads)
        start = reset_all(ReplicaSet.create(hm["envs"], terrain),
                          seeding.child_seed(hm["seed"], seeding.EVAL, 4))
        traj = rollout(start, policy, heads, hm["horizon"],
                       seeding.child_seed(hm["seed"], seeding.EVAL, 5))
    out = Path(cfg["run"]["out"])
    cfg.write(out)
    for h in np.unique(traj.heads):
        grid = occupancy_grid(traj, hm["bins"], terrain.half_width, heads=h)
        write_grid(grid, terrain.half_width, out / f"heatmap_head{h}.grid")
    print(f"wrote {np.unique(traj.heads).size} grid(s) to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kmyriad", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat section.key = value file")
        p.add_argument("--seeds", help="comma-separated seed list")
        p.add_argument("--out", help="output directory")
        p.add_argument("--terrain", choices=["empty", "corridor", "maze"])
        p.add_argument("--horizon", type=int)
        return p

    p = common(sub.add_parser("pretrain", help="reward-free multi-head pretraining"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--envs", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--bins", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = common(sub.add_parser("diversity", help="mean KL between the heads of a checkpoint"))
    p.add_argument("checkpoint")
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_diversity)

    p = common(sub.add_parser("jumpstart", help="PPO on a sparse goal from a checkpoint or scratch"))
    p.add_argument("--checkpoint")
    p.add_argument("--random", action="store_true")
    p.set_defaults(func=cmd_jumpstart)

    p = common(sub.add_parser("heatmap", help="occupancy grids per head"))
    p.add_argument("--checkpoint")
    p.add_argument("--trajectory", help=".npz trajectory file")
    p.add_argument("--envs", type=int)
    p.add_argument("--bins", type=int)
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ChecksumError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteError, KMyriadError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
