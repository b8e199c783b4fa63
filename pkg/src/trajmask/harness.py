"""Experiment drivers: query sampling, evaluations, ablations, CSV emission.

Every comparison shares one query set per seed across methods, and every CSV
rerun with fixed seeds is byte-identical. Aggregations use the population
(1/N) standard deviation, noted in the CSV comment header written by
aggregate_records callers.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import baselines, data, downstream, envs, masking, model as model_mod, pretrain
from .downstream import GoalQuery
from .pretrain import TrainConfig, _stream

CSV_HEADER = ("method,env,task,seed,query_id,goal_index,mode,foresight,"
              "metric_name,metric_value,ckpt_step")


@dataclasses.dataclass(frozen=True)
class EvalRecord:
    method: str
    env: str
    task: str
    seed: int
    query_id: int
    goal_index: int
    mode: str | None       # "open" / "closed" / None when not applicable
    foresight: bool | None
    metric_name: str
    metric_value: float
    ckpt_step: int


def _field(value) -> str:
    if value is None:
        return "na"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _sort_key(r: EvalRecord):
    # Primary order (method, seed, query_id, goal_index); remaining fields
    # break ties so the file order is total and reruns are byte-identical.
    return (r.method, r.seed, r.query_id, r.goal_index, _field(r.mode),
            _field(r.foresight), r.metric_name, r.ckpt_step)


def write_records(records: list[EvalRecord], path: str) -> None:
    rows = sorted(records, key=_sort_key)
    with open(path, "w") as f:
        f.write(CSV_HEADER + "\n")
        for r in rows:
            f.write(",".join([r.method, r.env, r.task, str(r.seed),
                              str(r.query_id), str(r.goal_index), _field(r.mode),
                              _field(r.foresight), r.metric_name,
                              repr(float(r.metric_value)), str(r.ckpt_step)]) + "\n")


def read_records(path: str) -> list[EvalRecord]:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"bad header in {path}")
    out = []
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != 11:
            raise ValueError(f"bad row: {line!r}")
        mode = None if parts[6] == "na" else parts[6]
        foresight = None if parts[7] == "na" else parts[7] == "true"
        out.append(EvalRecord(parts[0], parts[1], parts[2], int(parts[3]),
                              int(parts[4]), int(parts[5]), mode, foresight,
                              parts[8], float(parts[9]), int(parts[10])))
    return out


def mean_std(values) -> tuple[float, float]:
    """Mean and population (1/N) standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=0))


def aggregate_records(records: list[EvalRecord],
                      keys=("method", "task", "mode", "goal_index"),
                      metric: str | None = None) -> dict[tuple, tuple[float, float, int]]:
    """Group metric values; returns {key_tuple: (mean, population std, n)}."""
    groups: dict[tuple, list[float]] = {}
    for r in records:
        if metric is not None and r.metric_name != metric:
            continue
        key = tuple(getattr(r, k) for k in keys)
        groups.setdefault(key, []).append(r.metric_value)
    return {k: (*mean_std(v), len(v)) for k, v in sorted(groups.items(),
                                                         key=lambda kv: str(kv[0]))}


# ---------------------------------------------------------------------------
# Query sampling from validation trajectories.

@dataclasses.dataclass
class QuerySet:
    env: str
    queries: list[GoalQuery]


def build_single_goal_queries(valset: data.Dataset, n: int,
                              rng: np.random.Generator) -> QuerySet:
    """Start plus one future state of the same trajectory; budget is offset+3."""
    queries = []
    for _ in range(n):
        while True:
            ep = valset.episodes[int(rng.integers(valset.n_episodes))]
            start = int(rng.integers(valset.ep_len))
            offset = int(rng.integers(15, 20))
            if start + offset < valset.ep_len:
                break
        queries.append(GoalQuery(
            start=ep.states[start].astype(np.float64),
            goals=((ep.states[start + offset].astype(np.float64), offset + 3),)))
    return QuerySet(env=valset.env, queries=queries)


def build_multi_goal_queries(valset: data.Dataset, n: int,
                             rng: np.random.Generator) -> QuerySet:
    """Five goals at strictly increasing offsets in [12, 60); budgets offset+5."""
    queries = []
    for _ in range(n):
        while True:
            ep = valset.episodes[int(rng.integers(valset.n_episodes))]
            start = int(rng.integers(valset.ep_len))
            offsets = np.sort(rng.choice(np.arange(12, 60), size=5, replace=False))
            if start + int(offsets[-1]) < valset.ep_len:
                break
        queries.append(GoalQuery(
            start=ep.states[start].astype(np.float64),
            goals=tuple((ep.states[start + int(o)].astype(np.float64), int(o) + 5)
                        for o in offsets)))
    return QuerySet(env=valset.env, queries=queries)


def build_valset(env: str, eval_seed: int, episodes_per_task: int = 60,
                 ep_len: int = data.EPISODE_LEN,
                 tasks: tuple[str, ...] | None = None) -> data.Dataset:
    """Fresh near-expert validation data, one unseen collection seed per task.

    tasks narrows collection to a subset; collection seeds stay keyed by the
    task's index in the environment spec so a subset reuses the same seeds.
    """
    spec = envs.env_spec(env)
    chosen = spec.tasks if tasks is None else tuple(tasks)
    for t in chosen:
        if t not in spec.tasks:
            raise ValueError(f"unknown task {t!r} for env {env!r}")
    parts = [data.collect_near_expert(task, 101 + 10 * eval_seed
                                      + spec.tasks.index(task),
                                      episodes_per_task, ep_len)
             for task in chosen]
    return data.concat_datasets(parts)


# ---------------------------------------------------------------------------
# Goal-reaching evaluation.

@dataclasses.dataclass
class MethodSpec:
    name: str
    kind: str                       # masked | goal_mlp | goal_gpt | random
    model: object | None = None
    modes: tuple[str, ...] = ("closed",)
    foresight: bool = True
    ckpt_step: int = 0


def _random_distances(env: str, query: GoalQuery, rng: np.random.Generator):
    da = envs.env_spec(env).action_dim
    acts = rng.uniform(-1.0, 1.0, size=(query.budgets[-1], da))
    rollout = downstream._run(env, query.start, query.budgets[-1],
                              lambda t, s: acts[t])
    return downstream.goal_distances(rollout.states, query.goals)


def _check_method(env: str, m: MethodSpec) -> None:
    if m.kind == "random":
        return
    if m.model is None:
        raise ValueError(f"method {m.name!r} has no model")
    cfg = m.model.cfg
    spec = envs.env_spec(env)
    if (cfg.state_dim, cfg.action_dim) != (spec.state_dim, spec.action_dim):
        raise ValueError(f"method {m.name!r} dims do not match {env}")


def run_goal_eval(env: str, methods: list[MethodSpec],
                  querysets: dict[int, QuerySet]) -> list[EvalRecord]:
    """Evaluate every method x mode on the same per-seed query sets.

    Methods with checkpoints must share one gradient-step budget; mismatched
    ckpt_step values are rejected so comparisons stay budget-matched.
    """
    for m in methods:
        _check_method(env, m)
    steps = {m.ckpt_step for m in methods if m.kind != "random" and m.ckpt_step > 0}
    if len(steps) > 1:
        raise ValueError(f"methods trained with different step budgets: {steps}")

    records = []
    for m in methods:
        for seed in sorted(querysets):
            qs = querysets[seed]
            if qs.env != env:
                raise ValueError("query set env does not match")
            for qid, query in enumerate(qs.queries):
                for mode in m.modes:
                    if m.kind == "masked":
                        _, dists = downstream.reach_goals(
                            m.model, env, query, mode=mode, foresight=m.foresight)
                        foresight = m.foresight
                    elif m.kind in ("goal_mlp", "goal_gpt"):
                        _, dists = baselines.baseline_reach(m.model, env, query,
                                                            mode=mode)
                        foresight = None
                    elif m.kind == "random":
                        dists = _random_distances(env, query,
                                                  _stream(seed, 7, qid))
                        foresight = None
                    else:
                        raise ValueError(f"unknown method kind {m.kind!r}")
                    for gi, dist in enumerate(dists):
                        records.append(EvalRecord(
                            method=m.name, env=env, task="all", seed=seed,
                            query_id=qid, goal_index=gi, mode=mode,
                            foresight=foresight, metric_name="goal_distance",
                            metric_value=dist, ckpt_step=m.ckpt_step))
    return records


# ---------------------------------------------------------------------------
# Prompting evaluation.

def expert_reference_return(env: str, task: str, start: np.ndarray,
                            horizon: int) -> float:
    """Return of the noise-free scripted expert over the same horizon."""
    s = envs.set_state(env, np.asarray(start, dtype=np.float64))
    total = 0.0
    for _ in range(horizon):
        a = np.clip(envs.expert_action(task, s, 0.0), -1.0, 1.0)
        s = envs.env_step(env, s, a)
        total += envs.task_reward(task, s, a)
    return total


def prompt_eval(model, env: str, task: str, valset: data.Dataset, seed: int,
                horizon: int, k: int = 5, n_prompts: int = 20,
                mode: str = "closed", method: str = "maskdp",
                ckpt_step: int = 0) -> list[EvalRecord]:
    """Continue expert prompts; records model and expert returns per prompt."""
    records = []
    for i in range(n_prompts):
        rng = _stream(seed, 8, i)
        ep = valset.episodes[int(rng.integers(valset.n_episodes))]
        start = int(rng.integers(valset.ep_len - k))
        ps = ep.states[start:start + k].astype(np.float64)
        pa = ep.actions[start:start + k].astype(np.float64)
        rollout, ret = downstream.prompt_rollout(model, env, ps, pa, task,
                                                 horizon, mode=mode)
        expert = expert_reference_return(env, task, rollout.states[0], horizon)
        common = dict(env=env, task=task, seed=seed, query_id=i, goal_index=0,
                      mode=mode, foresight=None, ckpt_step=ckpt_step)
        records.append(EvalRecord(method=method,
                                  metric_name=f"prompt_return_h{horizon}",
                                  metric_value=ret, **common))
        records.append(EvalRecord(method="expert",
                                  metric_name=f"expert_return_h{horizon}",
                                  metric_value=expert, **common))
    return records


# ---------------------------------------------------------------------------
# Ablations.

ABLATION_RATIO_VARIANTS = (("fixed_0.15", (0.15,)), ("fixed_0.55", (0.55,)),
                           ("fixed_0.95", (0.95,)), ("mixed", masking.DEFAULT_RATIOS))


def _curve_records(result: pretrain.TrainResult, method: str, env: str,
                   seed: int) -> list[EvalRecord]:
    common = dict(method=method, env=env, task="all", seed=seed, query_id=0,
                  goal_index=0, mode=None, foresight=None)
    rows = [EvalRecord(metric_name="holdout_target_variance",
                       metric_value=result.holdout_target_variance,
                       ckpt_step=0, **common)]
    for row in result.loss_log:
        rows.append(EvalRecord(metric_name="holdout_total_mse",
                               metric_value=row.holdout_total_mse,
                               ckpt_step=row.step, **common))
        rows.append(EvalRecord(metric_name="holdout_masked_mse",
                               metric_value=row.holdout_masked_mse,
                               ckpt_step=row.step, **common))
    return rows


def run_ablation(kind: str, env: str, seeds, dataset: data.Dataset | None = None,
                 n_steps: int = 1500, n_queries: int = 100,
                 models: dict[int, object] | None = None,
                 valsets: dict[int, data.Dataset] | None = None,
                 task: str | None = None, horizons=(20, 40, 60),
                 n_prompts: int = 20, reuse_total: dict[int, pretrain.TrainResult] | None = None,
                 masked_steps: int | None = None) -> list[EvalRecord]:
    """One ablation family; see the per-kind branches for their inputs.

    ratio and loss_mode and scale pretrain from `dataset`; foresight and
    horizon deploy existing `models` on per-seed `valsets`.
    """
    records: list[EvalRecord] = []
    if kind == "ratio":
        for seed in seeds:
            qs = build_single_goal_queries(valsets[seed], n_queries, _stream(seed, 9))
            for label, ratios in ABLATION_RATIO_VARIANTS:
                cfg = TrainConfig(seed=seed, n_steps=n_steps, ratio_set=ratios)
                result = pretrain.pretrain(model_mod.desk_model_config(env),
                                           dataset, cfg)
                method = MethodSpec(name=f"ratio_{label}", kind="masked",
                                    model=result.model, modes=("closed",),
                                    ckpt_step=n_steps)
                records += run_goal_eval(env, [method], {seed: qs})
    elif kind == "loss_mode":
        for seed in seeds:
            if reuse_total is not None and seed in reuse_total:
                total = reuse_total[seed]
                total_steps = total.loss_log[-1].step
            else:
                total = pretrain.pretrain(model_mod.desk_model_config(env), dataset,
                                          TrainConfig(seed=seed, n_steps=n_steps,
                                                      loss_mode="total"))
                total_steps = n_steps
            masked = pretrain.pretrain(
                model_mod.desk_model_config(env), dataset,
                TrainConfig(seed=seed, n_steps=masked_steps or total_steps,
                            loss_mode="masked"))
            records += _curve_records(total, "loss_total", env, seed)
            records += _curve_records(masked, "loss_masked", env, seed)
    elif kind == "scale":
        for seed in seeds:
            for label, layers in (("scale_small", 2), ("scale_large", 4)):
                result = pretrain.pretrain(
                    model_mod.desk_model_config(env, n_encoder_layers=layers),
                    dataset, TrainConfig(seed=seed, n_steps=n_steps))
                records += _curve_records(result, label, env, seed)
    elif kind == "foresight":
        for seed in seeds:
            qs = build_multi_goal_queries(valsets[seed], n_queries, _stream(seed, 10))
            for label, flag in (("foresight_on", True), ("foresight_off", False)):
                method = MethodSpec(name=label, kind="masked", model=models[seed],
                                    modes=("closed",), foresight=flag)
                records += run_goal_eval(env, [method], {seed: qs})
    elif kind == "horizon":
        for seed in seeds:
            for horizon in horizons:
                records += prompt_eval(models[seed], env, task, valsets[seed],
                                       seed, horizon, n_prompts=n_prompts)
    else:
        raise ValueError(f"unknown ablation kind {kind!r}")
    return records
