"""Command-line entry points for collection, training, and evaluation runs.

Each subcommand takes --seed, --config <json>, --out <path>, and
--profile {desk,paper}; JSON keys mirror the config dataclass field names.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os

import numpy as np

from . import baselines, data, downstream, envs, harness, model as model_mod, pretrain
from .pretrain import TrainConfig, _stream


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        return json.load(f)


def _policy_from_config(env: str, spec: dict) -> data.PolicySpec:
    kind = spec.get("kind", "random")
    if kind == "random":
        return data.RandomPolicy()
    if kind == "expert":
        return data.ExpertPolicy(spec["task"], float(spec.get("noise_std", 0.0)))
    if kind == "near_expert":
        return data.ExpertPolicy(spec["task"], float(spec.get("noise_std", 0.2)))
    raise ValueError(f"unknown policy kind {kind!r}")


def _cmd_collect(args) -> int:
    cfg = _load_config(args.config)
    env = cfg["env"]
    n = int(cfg.get("n_episodes", 100))
    ep_len = int(cfg.get("ep_len", data.EPISODE_LEN))
    if cfg.get("policy", {}).get("kind") == "mixed":
        d = data.collect_mixed(env, n, ep_len, args.seed)
    else:
        policy = _policy_from_config(env, cfg.get("policy", {}))
        d = data.collect(env, policy, n, ep_len, args.seed)
    data.write_dataset(d, args.out)
    return 0


def _model_config(env: str, profile: str, overrides: dict) -> model_mod.ModelConfig:
    builder = {"desk": model_mod.desk_model_config,
               "paper": model_mod.paper_model_config}[profile]
    return builder(env, **overrides)


def _train_config(profile: str, seed: int, overrides: dict) -> TrainConfig:
    base = TrainConfig() if profile == "desk" else pretrain.paper_train_config()
    merged = dict(dataclasses.asdict(base))
    merged.update(overrides)
    merged["seed"] = seed
    if isinstance(merged.get("ratio_set"), list):
        merged["ratio_set"] = tuple(merged["ratio_set"])
    if isinstance(merged.get("adam_betas"), list):
        merged["adam_betas"] = tuple(merged["adam_betas"])
    return TrainConfig(**merged)


def _cmd_pretrain(args) -> int:
    cfg = _load_config(args.config)
    dataset = data.read_dataset(cfg["dataset"])
    model_cfg = _model_config(dataset.env, args.profile, cfg.get("model", {}))
    train_cfg = _train_config(args.profile, args.seed, cfg.get("train", {}))
    pretrain.pretrain(model_cfg, dataset, train_cfg, out_dir=args.out)
    return 0


def _cmd_train_baseline(args) -> int:
    cfg = _load_config(args.config)
    dataset = data.read_dataset(cfg["dataset"])
    kind = cfg["kind"]
    train_cfg = _train_config(args.profile, args.seed, cfg.get("train", {}))
    overrides = cfg.get("model", {})
    if kind in ("gpt", "goal_gpt"):
        builder = {"desk": baselines.desk_gpt_config,
                   "paper": baselines.paper_gpt_config}[args.profile]
        model_cfg = builder(dataset.env, **overrides)
    elif kind == "goal_mlp":
        builder = {"desk": baselines.desk_mlp_config,
                   "paper": baselines.paper_mlp_config}[args.profile]
        if isinstance(overrides.get("hidden_sizes"), list):
            overrides = dict(overrides, hidden_sizes=tuple(overrides["hidden_sizes"]))
        model_cfg = builder(dataset.env, **overrides)
    else:
        raise ValueError(f"unknown baseline kind {kind!r}")
    trainer = {"gpt": baselines.train_gpt, "goal_gpt": baselines.train_goal_gpt,
               "goal_mlp": baselines.train_goal_mlp}[kind]
    kwargs = {}
    if kind == "goal_mlp" and "pair_window" in cfg:
        kwargs["pair_window"] = int(cfg["pair_window"])
    trainer(dataset, train_cfg, model_cfg=model_cfg, out_dir=args.out, **kwargs)
    return 0


def _load_method(spec: dict) -> harness.MethodSpec:
    kind = spec["kind"]
    model = None
    ckpt_step = 0
    if kind == "masked":
        model, extra = model_mod.load_model(spec["ckpt"])
        ckpt_step = int(extra.get("step", 0))
    elif kind in ("goal_mlp", "goal_gpt"):
        model, extra = baselines.load_baseline(spec["ckpt"])
        ckpt_step = int(extra.get("step", 0))
    elif kind != "random":
        raise ValueError(f"unknown method kind {kind!r}")
    return harness.MethodSpec(name=spec["name"], kind=kind, model=model,
                              modes=tuple(spec.get("modes", ("closed",))),
                              foresight=bool(spec.get("foresight", True)),
                              ckpt_step=ckpt_step)


def _goal_eval(args, multi: bool) -> int:
    cfg = _load_config(args.config)
    env = cfg["env"]
    methods = [_load_method(m) for m in cfg["methods"]]
    seeds = [int(s) for s in cfg.get("seeds", [args.seed])]
    n = int(cfg.get("n_queries", 100 if multi else 300))
    tasks = tuple(cfg["tasks"]) if "tasks" in cfg else None
    querysets = {}
    for seed in seeds:
        valset = harness.build_valset(env, seed,
                                      int(cfg.get("episodes_per_task", 60)),
                                      tasks=tasks)
        if multi:
            querysets[seed] = harness.build_multi_goal_queries(valset, n,
                                                               _stream(seed, 10))
        else:
            querysets[seed] = harness.build_single_goal_queries(valset, n,
                                                                _stream(seed, 9))
    records = harness.run_goal_eval(env, methods, querysets)
    harness.write_records(records, args.out)
    return 0


def _cmd_prompt(args) -> int:
    cfg = _load_config(args.config)
    env, task = cfg["env"], cfg["task"]
    model, extra = model_mod.load_model(cfg["ckpt"])
    valset = data.collect_near_expert(task, 201 + args.seed,
                                      int(cfg.get("episodes", 40)))
    records = []
    for horizon in cfg.get("horizons", [20]):
        records += harness.prompt_eval(model, env, task, valset, args.seed,
                                       int(horizon), k=int(cfg.get("k", 5)),
                                       n_prompts=int(cfg.get("n_prompts", 20)),
                                       mode=cfg.get("mode", "closed"),
                                       ckpt_step=int(extra.get("step", 0)))
    harness.write_records(records, args.out)
    return 0


def _cmd_finetune_rl(args) -> int:
    cfg = _load_config(args.config)
    dataset = data.read_dataset(cfg["dataset"])
    pretrained, _ = model_mod.load_model(cfg["ckpt"])
    rl_overrides = dict(cfg.get("rl", {}))
    rl_overrides["seed"] = args.seed
    rl_cfg = downstream.RlConfig(**rl_overrides)
    result = downstream.rl_finetune(pretrained, dataset, cfg["task"], rl_cfg,
                                    int(cfg.get("n_grad_steps", 1000)),
                                    init=cfg.get("init", "pretrained"))
    downstream.write_return_curve(
        [(p.step, args.seed, p.eval_return) for p in result.curve], args.out)
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    kind, env = cfg["kind"], cfg["env"]
    seeds = [int(s) for s in cfg.get("seeds", [args.seed])]
    dataset = data.read_dataset(cfg["dataset"]) if "dataset" in cfg else None
    models = None
    if "ckpts" in cfg:
        models = {int(s): model_mod.load_model(p)[0]
                  for s, p in cfg["ckpts"].items()}
    valsets = None
    if kind in ("ratio", "foresight"):
        per_task = int(cfg.get("episodes_per_task", 60))
        tasks = tuple(cfg["tasks"]) if "tasks" in cfg else None
        valsets = {s: harness.build_valset(env, s, per_task, tasks=tasks)
                   for s in seeds}
    elif kind == "horizon":
        valsets = {s: data.collect_near_expert(cfg["task"], 201 + s,
                                               int(cfg.get("episodes", 40)))
                   for s in seeds}
    records = harness.run_ablation(
        kind, env, seeds, dataset=dataset,
        n_steps=int(cfg.get("n_steps", 1500)),
        n_queries=int(cfg.get("n_queries", 100)),
        models=models, valsets=valsets, task=cfg.get("task"),
        horizons=tuple(cfg.get("horizons", (20, 40, 60))),
        n_prompts=int(cfg.get("n_prompts", 20)),
        masked_steps=cfg.get("masked_steps"))
    harness.write_records(records, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajmask",
        description="Trajectory masked-autoencoder lab: data, training, eval.")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "collect": _cmd_collect,
        "pretrain": _cmd_pretrain,
        "train-baseline": _cmd_train_baseline,
        "eval-goal": lambda a: _goal_eval(a, multi=False),
        "eval-multigoal": lambda a: _goal_eval(a, multi=True),
        "prompt": _cmd_prompt,
        "finetune-rl": _cmd_finetune_rl,
        "ablate": _cmd_ablate,
    }
    for name, fn in commands.items():
        p = sub.add_parser(name)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--out", type=str, required=True)
        p.add_argument("--profile", choices=("desk", "paper"), default="desk")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
