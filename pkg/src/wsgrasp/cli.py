"""Command-line entry point.

Settings resolve as: built-in defaults, then `--config FILE` (key = value),
then explicit flags. Exit codes: 0 success, 2 usage, 3 data/format,
4 numeric.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from .encoder import load_autoencoder, save_autoencoder, train_autoencoder
from .errors import FormatError, GraspError, UsageError
from .geom3d import RigidTransform, load_cloud_csv, load_obj, sample_surface, save_cloud_csv, serialize_obj
from .grippers import get_gripper
from .ik import IkEnv, evaluate_policy, ik_oracle, load_agent
from .pipeline import (PipelineConfig, PlannerModels, TargetSampler, build_dataset, footprint_report,
                       gripper_feature, load_object, object_cloud, plan_grasp, random_pose, run_trials,
                       save_policy, train_policy, workspace_targets, write_trials_csv)
from .pssn import Pssn, PssnDataset, eval_topk, random_scorer, train_pssn
from .quality import FrictionModel, force_closure_oracle, gqs_details
from .workspace import sample_workspace, save_workspace

log = logging.getLogger("wsgrasp")


def _out(args, name: str) -> str:
    os.makedirs(args.cfg.out, exist_ok=True)
    return os.path.join(args.cfg.out, name)


def _write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------- commands

def cmd_gen_object(args) -> None:
    cfg = args.cfg
    mesh = load_object(cfg)
    rng = np.random.default_rng(cfg.seed)
    pose = random_pose(rng, cfg.pose_r_min, cfg.pose_r_max) if args.random_pose else RigidTransform()
    cloud = object_cloud(mesh, cfg.M, pose, cfg.seed, cfg.cull)
    with open(_out(args, "object.obj"), "w") as fh:
        fh.write(serialize_obj(mesh))
    save_cloud_csv(cloud, _out(args, "cloud.csv"))
    print(f"object: {len(mesh.faces)} faces, area {mesh.area():.6g} m^2; cloud: {len(cloud)} points")


def cmd_sample_workspace(args) -> None:
    g = get_gripper(args.cfg.gripper)
    ws = sample_workspace(g, args.cfg.L, args.cfg.seed, args.strategy)
    path = _out(args, f"workspace_{g.name}.wsm")
    save_workspace(ws, path)
    print(f"{g.name}: L={ws.L} N={ws.N} -> {path}")


def cmd_train_encoder(args) -> None:
    cfg = args.cfg
    grippers = [get_gripper(n) for n in args.grippers]
    run = train_autoencoder(grippers, L=cfg.ae_L, epochs=cfg.ae_epochs, seed=cfg.seed)
    save_autoencoder(_out(args, "encoder.tnn"), run.encoder, run.decoder)
    _write_csv(_out(args, "encoder_loss.csv"), ["epoch", "loss"],
               [(i + 1, repr(v)) for i, v in enumerate(run.losses)])
    best = min(run.losses)
    print(f"epoch-1 loss {run.losses[0]:.6g}, best {best:.6g} ({100 * best / run.losses[0]:.2f}%)")


def cmd_gen_dataset(args) -> None:
    cfg = args.cfg
    g = get_gripper(cfg.gripper)
    ws = sample_workspace(g, cfg.L, cfg.seed)
    ds = build_dataset(g, ws, poses=cfg.poses, M=cfg.M, n_sets=cfg.n_sets, seed=cfg.seed,
                       friction=FrictionModel(mu=cfg.mu), reach_tol=cfg.reach_tol)
    path = _out(args, "dataset.jsonl")
    ds.save(path)
    print(f"{len(ds)} records, {sum(len(r.sets) for r in ds.records)} contact sets -> {path}")


def _features(args, encoder_path: str) -> dict[str, np.ndarray]:
    if not encoder_path or not os.path.isfile(encoder_path):
        raise UsageError(f"missing encoder checkpoint {encoder_path!r}")
    enc, _ = load_autoencoder(encoder_path)
    g = get_gripper(args.cfg.gripper)
    return {g.name: gripper_feature(enc, g, args.cfg.ae_L, args.cfg.seed)}


def _dataset(path: str) -> PssnDataset:
    if not os.path.isfile(path):
        raise UsageError(f"missing dataset {path}")
    return PssnDataset.load(path)


def cmd_train_pssn(args) -> None:
    cfg = args.cfg
    ds = _dataset(args.dataset)
    train, test = ds.split(args.test_fraction, cfg.seed)
    feats = _features(args, cfg.encoder_ckpt)
    res = train_pssn(train, feats, epochs=cfg.pssn_epochs, seed=cfg.seed, tol=cfg.tol)
    res.model.save(_out(args, "pssn.tnn"), {"gripper": cfg.gripper})
    rows = [(s + 1, e + 1, repr(v)) for s, curve in enumerate(res.losses) for e, v in enumerate(curve)]
    _write_csv(_out(args, "pssn_loss.csv"), ["stage", "epoch", "loss"], rows)
    _print_topk("test", eval_topk(res.model, test, feats, cfg.tol))


def _print_topk(label: str, acc: list[dict]) -> None:
    for s, a in enumerate(acc, start=1):
        print(f"{label} stage {s}: top1 {a['top1']:.1f}% top10 {a['top10']:.1f}%")


def cmd_eval_pssn(args) -> None:
    cfg = args.cfg
    ds = _dataset(args.dataset)
    if args.split:
        _, ds = ds.split(args.test_fraction, cfg.seed)
    if args.random:
        acc = eval_topk(None, ds, tol=cfg.tol, scorer=random_scorer(cfg.seed))
    else:
        if not cfg.pssn_ckpt or not os.path.isfile(cfg.pssn_ckpt):
            raise UsageError(f"missing PSSN checkpoint {cfg.pssn_ckpt!r}")
        model, _ = Pssn.load(cfg.pssn_ckpt)
        acc = eval_topk(model, ds, _features(args, cfg.encoder_ckpt), cfg.tol)
    print("stage,top1,top10")
    for s, a in enumerate(acc, start=1):
        print(f"{s},{a['top1']:.2f},{a['top10']:.2f}")


def cmd_train_ik(args) -> None:
    cfg = args.cfg
    g = get_gripper(cfg.gripper)
    agent, run, sampler = train_policy(g, cfg.sac_epochs, cfg.seed, cfg.L, cfg.sac_her, cfg.sac_train_steps)
    path = _out(args, f"sac_{g.name}.tnn")
    save_policy(path, agent, g, sampler, cfg.seed)
    _write_csv(_out(args, f"ik_curve_{g.name}.csv"), ["epoch", "mean_error_m"],
               [(i + 1, repr(v)) for i, v in enumerate(run.curve)])
    print(f"{g.name}: final epoch mean error {1000 * run.curve[-1]:.2f} mm -> {path}")


def cmd_eval_ik(args) -> None:
    cfg = args.cfg
    path = args.checkpoint or cfg.sac_ckpt
    if not path or not os.path.isfile(path):
        raise UsageError(f"missing policy checkpoint {path!r}")
    agent, meta = load_agent(path)
    g = get_gripper(meta["gripper"])
    sampler = TargetSampler(g, int(meta.get("ws_L", cfg.L)), int(meta.get("ws_seed", cfg.seed)))
    targets = workspace_targets(sampler, args.targets, cfg.seed + 1000)
    errs = evaluate_policy(agent, IkEnv(g, sampler), targets)
    rows = []
    for i, (t, e) in enumerate(zip(targets, errs)):
        row = [i, repr(float(e.mean())), repr(float(e.max()))]
        if args.oracle:
            row.append(repr(ik_oracle(g, t, seed=cfg.seed + i)[1]))
        rows.append(row)
    header = ["target", "mean_error_m", "max_error_m"] + (["oracle_residual_m"] if args.oracle else [])
    _write_csv(_out(args, f"ik_eval_{g.name}.csv"), header, rows)
    print(f"{g.name}: mean final per-finger error {1000 * errs.mean():.3f} mm over {len(targets)} targets")


def cmd_score_gqs(args) -> None:
    cfg = args.cfg
    try:
        contacts = load_cloud_csv(args.contacts)
    except OSError as exc:
        raise UsageError(str(exc)) from None
    mesh = load_obj(args.obj)
    dense = sample_surface(mesh, 20000, cfg.seed)
    normals = contacts.normals
    if normals is None:
        normals = dense.normals[dense.tree.query(contacts.points)[1]]
    origin = dense.centroid()
    d = gqs_details(contacts.points, origin, cfg.eps)
    fc = force_closure_oracle(contacts.points, normals, FrictionModel(mu=cfg.mu), origin)
    print(f"gqs {d.score:.6f} (raw {d.raw:.6f}, lambda0 {d.lambda0:.6g})")
    print(f"force closure: {'yes' if fc else 'no'}")


def _planner(args) -> PlannerModels:
    return PlannerModels.load(args.cfg)


def cmd_plan_grasp(args) -> None:
    cfg = args.cfg
    models = _planner(args)
    if args.cloud:
        cloud = load_cloud_csv(args.cloud)
    else:
        rng = np.random.default_rng(cfg.seed)
        cloud = object_cloud(load_object(cfg), cfg.M, random_pose(rng, cfg.pose_r_min, cfg.pose_r_max),
                             cfg.seed, cfg.cull)
    plan = plan_grasp(models, cloud, cfg)
    if plan.contacts is None:
        print(f"planning failed: {plan.reason}")
        return
    print(f"contacts {list(plan.contacts.indices)} gqs {plan.gqs:.4f} force closure {plan.oracle}")
    print("joints " + " ".join(f"{v:.6f}" for v in plan.joints))
    print("residuals_m " + " ".join(f"{v:.6f}" for v in plan.residuals))
    print(f"success {plan.success}" + (f" ({plan.reason})" if plan.reason else ""))


def cmd_run_trials(args) -> None:
    cfg = args.cfg
    rows = run_trials(_planner(args), cfg)
    path = _out(args, "trials.csv")
    s = write_trials_csv(rows, path)
    print(f"{s['n']} trials, success rate {100 * s['success_rate']:.1f}%, mean gqs {s['mean_gqs']:.4f} -> {path}")


def cmd_footprint(args) -> None:
    g = get_gripper(args.cfg.gripper)
    for line in footprint_report(g.n_fingers, args.cfg.L, args.modes, args.points).lines():
        print(line)


# ---------------------------------------------------------------- parser

OVERRIDES = {
    "gripper": str, "object": str, "M": int, "L": int, "poses": int, "n_sets": int, "tol": float,
    "eps": float, "mu": float, "trials": int, "beam": int, "encoder_ckpt": str, "pssn_ckpt": str,
    "sac_ckpt": str, "ae_epochs": int, "sac_epochs": int, "sac_her": int,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    for key, kind in OVERRIDES.items():
        common.add_argument("--" + key.replace("_", "-"), dest=key, type=kind, default=None)
    common.add_argument("--dims", type=float, nargs="+", help="primitive dimensions (m)")
    common.add_argument("--pssn-epochs", type=int, nargs="+")

    p = argparse.ArgumentParser(prog="wsgrasp",
                                description="Workspace-feature grasp planning for multi-finger grippers.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=func)
        return sp

    sp = add("gen-object", cmd_gen_object, "write a primitive mesh and its sampled cloud")
    sp.add_argument("--random-pose", action="store_true")
    sp = add("sample-workspace", cmd_sample_workspace, "sample and save a fingertip workspace")
    sp.add_argument("--strategy", choices=("uniform-joint", "grid"), default="uniform-joint")
    sp = add("train-encoder", cmd_train_encoder, "train the workspace autoencoder")
    sp.add_argument("--grippers", nargs="+", default=["jaw2", "tri3", "fivebar3"])
    add("gen-dataset", cmd_gen_dataset, "generate ground-truth contact sets on posed primitives")
    for name, func, help_ in (("train-pssn", cmd_train_pssn, "train the staged contact selector"),
                              ("eval-pssn", cmd_eval_pssn, "Top1/Top10 accuracy per stage")):
        sp = add(name, func, help_)
        sp.add_argument("--dataset", required=True)
        sp.add_argument("--test-fraction", type=float, default=0.2)
        if name == "eval-pssn":
            sp.add_argument("--random", action="store_true", help="score with a random baseline")
            sp.add_argument("--split", action="store_true", help="evaluate the held-out split only")
    add("train-ik", cmd_train_ik, "train the SAC fingertip policy")
    sp = add("eval-ik", cmd_eval_ik, "evaluate a policy on workspace targets")
    sp.add_argument("--checkpoint")
    sp.add_argument("--targets", type=int, default=100)
    sp.add_argument("--oracle", action="store_true", help="also report the optimizer residual")
    sp = add("score-gqs", cmd_score_gqs, "grasp quality score and force-closure verdict")
    sp.add_argument("--contacts", required=True)
    sp.add_argument("--obj", required=True)
    sp = add("plan-grasp", cmd_plan_grasp, "plan one grasp with trained models")
    sp.add_argument("--cloud", help="object cloud CSV (default: configured object at a random pose)")
    add("run-trials", cmd_run_trials, "randomized-pose trials over the built-in primitives")
    sp = add("footprint-report", cmd_footprint, "input size: workspace vs multi-mode clouds")
    sp.add_argument("--modes", type=int, default=32)
    sp.add_argument("--points", type=int, default=2048)
    return p


def resolve_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    updates = {k: getattr(args, k) for k in OVERRIDES if getattr(args, k, None) is not None}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["out"] = args.out
    if args.dims:
        updates["object_dims"] = tuple(args.dims)
    if args.pssn_epochs:
        updates["pssn_epochs"] = tuple(args.pssn_epochs)
    values = {**cfg.__dict__, **updates}
    return PipelineConfig(**values).validate()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.cfg = resolve_config(args)
        args.func(args)
    except GraspError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return UsageError.exit_code
    except (UnicodeDecodeError, KeyError) as exc:
        print(f"error: malformed input: {exc}", file=sys.stderr)
        return FormatError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
