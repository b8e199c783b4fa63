"""End-to-end acceptance gates: exactness, oracle agreement, and trends.

One test per gate, ordered cheap to expensive. Later gates train real models
on the CPU desk profile and share datasets, pretrained models, and validation
sets through lazily built module-level caches, so expect roughly ninety
minutes of wall time for the full file. Every randomized comparison is
seeded; reruns are deterministic.

Two dataset families back the trend gates. Pretraining-quality gates (sanity,
loss mode) use near-expert data pooled over all three pointmass tasks, whose
target variance gives the MSE bars headroom. Deployment gates (goal reaching,
ratio ablation, foresight, prompting) pretrain on single-task run_east data
and evaluate on run_east validation sets, so that action inference from
states is well posed: pooled tasks map one state to several expert actions,
which a small squared-error model averages into useless in-between plans.
"""

import numpy as np
import pytest
import torch

import oracle_transformer as oracle
from trajmask import baselines, data, downstream, envs, harness, masking, model, pretrain
from trajmask.downstream import RlConfig
from trajmask.pretrain import TrainConfig, _stream

SEEDS = (0, 1, 2)
TASKS = ("run_east", "run_west", "reach_center")
PRETRAIN_STEPS = 5000
RATIO_STEPS = 1500
LOSSMODE_STEPS = 3000
RL_STEPS = 600
RL_EVAL_EVERY = 10

_CACHE: dict = {}


def near_expert_pool() -> data.Dataset:
    if "pool" not in _CACHE:
        parts = [data.collect_near_expert(t, seed=i) for i, t in enumerate(TASKS)]
        _CACHE["pool"] = data.concat_datasets(parts)
    return _CACHE["pool"]


def run_east_data() -> data.Dataset:
    if "east" not in _CACHE:
        _CACHE["east"] = data.collect_near_expert("run_east", seed=0)
    return _CACHE["east"]


def pretrained_pool(seed: int) -> pretrain.TrainResult:
    key = ("pt_pool", seed)
    if key not in _CACHE:
        _CACHE[key] = pretrain.pretrain(model.desk_model_config("pointmass"),
                                        near_expert_pool(),
                                        TrainConfig(seed=seed,
                                                    n_steps=PRETRAIN_STEPS))
    return _CACHE[key]


def pretrained(seed: int) -> pretrain.TrainResult:
    key = ("pt", seed)
    if key not in _CACHE:
        _CACHE[key] = pretrain.pretrain(model.desk_model_config("pointmass"),
                                        run_east_data(),
                                        TrainConfig(seed=seed,
                                                    n_steps=PRETRAIN_STEPS))
    return _CACHE[key]


def goal_mlp(seed: int) -> baselines.BaselineResult:
    key = ("mlp", seed)
    if key not in _CACHE:
        _CACHE[key] = baselines.train_goal_mlp(
            run_east_data(), TrainConfig(seed=seed, n_steps=PRETRAIN_STEPS))
    return _CACHE[key]


def valset(seed: int) -> data.Dataset:
    key = ("val", seed)
    if key not in _CACHE:
        _CACHE[key] = harness.build_valset("pointmass", seed,
                                           tasks=("run_east",))
    return _CACHE[key]


def mixed_setup() -> tuple[data.Dataset, model.MaskedSeqModel]:
    if "mixed" not in _CACHE:
        d = data.collect_mixed("pointmass")
        res = pretrain.pretrain(model.desk_model_config("pointmass"), d,
                                TrainConfig(seed=0, n_steps=PRETRAIN_STEPS))
        _CACHE["mixed"] = (d, res.model)
    return _CACHE["mixed"]


def method_mean(records, name, metric="goal_distance"):
    vals = [r.metric_value for r in records if r.method == name
            and r.metric_name == metric]
    assert vals, f"no rows for {name}"
    return float(np.mean(vals))


# ---------------------------------------------------------------------------

def test_exactness_suite(tmp_path):
    """Bit- and byte-exact invariants across the stack, all closed-form."""
    tiny = model.ModelConfig(state_dim=4, action_dim=2, hidden_dim=8, n_heads=1,
                             n_encoder_layers=1, n_decoder_layers=1,
                             train_context_len=4)
    m = model.init_model(tiny, 0)
    rng = np.random.default_rng(0)

    # masked slots cannot influence the output, even when filled with garbage
    s = torch.tensor(rng.standard_normal((2, 4, 4)), dtype=torch.float32)
    a = torch.tensor(rng.standard_normal((2, 4, 2)), dtype=torch.float32)
    sv = torch.tensor([[True, False, True, False]] * 2)
    av = torch.tensor([[False, True, False, True]] * 2)
    with torch.no_grad():
        ps, pa = m.forward_masked_batch(s, a, sv, av)
        garbled_s = torch.where(sv.unsqueeze(-1), s, torch.full((), torch.nan))
        garbled_a = torch.where(av.unsqueeze(-1), a, torch.full((), 1e30))
        ps2, pa2 = m.forward_masked_batch(garbled_s, garbled_a, sv, av)
    assert torch.equal(ps, ps2) and torch.equal(pa, pa2)

    # causal features of earlier tokens ignore perturbations of later tokens
    with torch.no_grad():
        feats = m.forward_causal_batch(s, a)
        s_pert = s.clone()
        s_pert[:, 2:] += 1.0
        feats2 = m.forward_causal_batch(s_pert, a)
    assert torch.equal(feats[:, :4], feats2[:, :4])

    # dataset and checkpoint files rewrite byte for byte
    d = data.collect("pointmass", data.RandomPolicy(), 3, ep_len=8, seed=1)
    p1, p2 = str(tmp_path / "d1.mdp1"), str(tmp_path / "d2.mdp1")
    data.write_dataset(d, p1)
    data.write_dataset(data.read_dataset(p1), p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()
    c1, c2 = str(tmp_path / "m1.ckpt"), str(tmp_path / "m2.ckpt")
    model.save_model(m, c1, extra={"step": 7})
    loaded, extra = model.load_model(c1)
    assert extra["step"] == 7
    model.save_model(loaded, c2, extra={"step": 7})
    assert open(c1, "rb").read() == open(c2, "rb").read()

    # mask counts use round-half-up of ratio * length
    assert masking.round_half_up(0.15 * 10) == 2
    assert masking.round_half_up(0.35 * 4) == 1
    assert masking.round_half_up(0.95 * 4) == 4
    spec = masking.sample_mask_spec(10, ratio_set=(0.55,),
                                    rng=np.random.default_rng(0))
    assert spec.n_masked_states == 6 and spec.n_masked_actions == 6

    # goal and prompt masks expose exactly the contracted slots
    g = masking.goal_mask(6, [2, 5])
    assert g.state_visible.tolist() == [True, False, True, False, False, True]
    assert not g.action_visible.any()
    p = masking.prompt_mask(2, 5)
    assert p.state_visible.tolist() == [True, True, False, False, False]
    assert np.array_equal(p.state_visible, p.action_visible)

    # goal distance is the min L2 over states visited within the budget
    states = np.zeros((3, 4))
    states[1, 0], states[2, 0] = 1.0, 2.0
    goal = np.zeros(4)
    goal[0] = 1.5
    assert downstream.goal_distances(states, [(goal, 3)]) == [0.5]

    # bootstrapped twin-critic target arithmetic
    assert abs(downstream.td_target(1.0, 0.99, 2.0) - 2.98) < 1e-12


def test_numerical_oracle_suite():
    """Torch forward/backward agree with a from-scratch numpy reference."""
    rng = np.random.default_rng(42)
    shapes = [(8, 1, 1, 1, 3), (8, 2, 1, 2, 4), (12, 2, 2, 1, 4),
              (16, 4, 2, 2, 5), (12, 1, 1, 1, 4)]
    for ci, (h, heads, enc, dec, ctx) in enumerate(shapes):
        cfg = model.ModelConfig(state_dim=3, action_dim=2, hidden_dim=h,
                                n_heads=heads, n_encoder_layers=enc,
                                n_decoder_layers=dec, train_context_len=ctx)
        m = model.init_model(cfg, 100 + ci).double()
        params = {k: v.detach().numpy().astype(np.float64)
                  for k, v in m.state_dict().items()}
        # one config exercises lengths beyond the training context
        L = ctx + 2 if ci == 3 else ctx
        s = rng.standard_normal((L, 3))
        a = rng.standard_normal((L, 2))
        sv = rng.random(L) < 0.6
        av = rng.random(L) < 0.6
        sv[0] = True

        rec = m.forward_masked(s, a, masking.MaskSpec(sv, av))
        os_, oa = oracle.masked_forward(params, heads, enc, dec, ctx, s, a, sv, av)
        np.testing.assert_allclose(rec.pred_states, os_, atol=1e-6)
        np.testing.assert_allclose(rec.pred_actions, oa, atol=1e-6)

        feats = m.forward_causal(s, a)
        ofeats = oracle.causal_forward(params, heads, enc, dec, ctx, s, a)
        np.testing.assert_allclose(feats.detach().numpy(), ofeats, atol=1e-6)

        # central finite differences on the training loss, double precision
        bs = torch.tensor(rng.standard_normal((2, ctx, 3)))
        ba = torch.tensor(rng.standard_normal((2, ctx, 2)))
        bsv = torch.tensor(rng.random((2, ctx)) < 0.5)
        bav = torch.tensor(rng.random((2, ctx)) < 0.5)
        bsv[:, 0] = True
        _, grads = model.loss_and_grads(m, bs, ba, bsv, bav, mode="total")

        def loss_at():
            with torch.no_grad():
                ps, pa = m.forward_masked_batch(bs, ba, bsv, bav)
                return model.batch_loss(ps, pa, bs, ba, bsv, bav,
                                        mode="total").item()

        names = list(grads)
        eps = 1e-5
        for _ in range(20):
            name = names[int(rng.integers(len(names)))]
            flat = dict(m.named_parameters())[name].detach().view(-1)
            i = int(rng.integers(flat.numel()))
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
            up = loss_at()
            with torch.no_grad():
                flat[i] = orig - eps
            down = loss_at()
            with torch.no_grad():
                flat[i] = orig
            fd = (up - down) / (2 * eps)
            analytic = grads[name].view(-1)[i].item()
            assert abs(analytic - fd) / max(1.0, abs(fd)) < 1e-3, (ci, name, i)


def test_pretraining_sanity(tmp_path):
    """Desk pretrain fits held-out data well below variance; reruns identical."""
    run = pretrained_pool(0)
    threshold = 0.1 * run.holdout_target_variance
    mse = run.final_holdout_total_mse
    assert mse < threshold, f"holdout {mse:.5f} vs {threshold:.5f}"

    # same-seed reruns are byte-identical (checked at a shorter length)
    cfg = TrainConfig(seed=0, n_steps=200)
    runs = [pretrain.pretrain(model.desk_model_config("pointmass"),
                              near_expert_pool(), cfg) for _ in range(2)]
    assert np.array_equal(runs[0].sampled_episodes, runs[1].sampled_episodes)
    assert [repr(r.__dict__) for r in runs[0].loss_log] == \
           [repr(r.__dict__) for r in runs[1].loss_log]
    paths = []
    for i, r in enumerate(runs):
        path = str(tmp_path / f"rerun{i}.ckpt")
        model.save_model(r.model, path)
        paths.append(path)
    assert open(paths[0], "rb").read() == open(paths[1], "rb").read()


def test_goal_reaching_trends():
    """Closed-loop beats open-loop, both crush random, and closed-loop
    matches or beats the goal-conditioned MLP on multi-goal queries."""
    single, multi = [], []
    multi_wins = 0
    for seed in SEEDS:
        m = pretrained(seed).model
        qs = harness.build_single_goal_queries(valset(seed), 300, _stream(seed, 9))
        methods = [
            harness.MethodSpec(name="mask_closed", kind="masked", model=m,
                               modes=("closed",), ckpt_step=PRETRAIN_STEPS),
            harness.MethodSpec(name="mask_open", kind="masked", model=m,
                               modes=("open",), ckpt_step=PRETRAIN_STEPS),
            harness.MethodSpec(name="random", kind="random"),
        ]
        single += harness.run_goal_eval("pointmass", methods, {seed: qs})

        mq = harness.build_multi_goal_queries(valset(seed), 100, _stream(seed, 10))
        mmethods = [
            harness.MethodSpec(name="maskdp", kind="masked", model=m,
                               modes=("closed",), ckpt_step=PRETRAIN_STEPS),
            harness.MethodSpec(name="goal_mlp", kind="goal_mlp",
                               model=goal_mlp(seed).model,
                               modes=("closed",), ckpt_step=PRETRAIN_STEPS),
        ]
        recs = harness.run_goal_eval("pointmass", mmethods, {seed: mq})
        multi += recs
        if method_mean(recs, "maskdp") <= method_mean(recs, "goal_mlp"):
            multi_wins += 1

    closed = method_mean(single, "mask_closed")
    open_ = method_mean(single, "mask_open")
    rand = method_mean(single, "random")
    assert closed <= open_, f"closed {closed:.4f} vs open {open_:.4f}"
    assert rand >= 3 * closed, f"random {rand:.4f} vs closed {closed:.4f}"
    assert rand >= 3 * open_, f"random {rand:.4f} vs open {open_:.4f}"
    assert multi_wins >= 2, f"multi-goal wins {multi_wins}/3"


def test_mask_ratio_ablation_trend():
    """Mixed-ratio pretraining reaches goals at least as well as any fixed
    ratio, and 0.55 beats the BERT-style 0.15."""
    records = harness.run_ablation(
        "ratio", "pointmass", SEEDS, dataset=run_east_data(),
        n_steps=RATIO_STEPS, n_queries=300,
        valsets={s: valset(s) for s in SEEDS})
    means = {}
    for seed in SEEDS:
        for label in ("mixed", "fixed_0.15", "fixed_0.55", "fixed_0.95"):
            rows = [r.metric_value for r in records
                    if r.method == f"ratio_{label}" and r.seed == seed]
            means[(seed, label)] = float(np.mean(rows))
    for fixed in ("fixed_0.15", "fixed_0.55", "fixed_0.95"):
        wins = sum(means[(s, "mixed")] <= means[(s, fixed)] for s in SEEDS)
        assert wins >= 2, f"mixed vs {fixed}: wins {wins}/3 {means}"
    mid_wins = sum(means[(s, "fixed_0.55")] <= means[(s, "fixed_0.15")]
                   for s in SEEDS)
    assert mid_wins >= 2, f"0.55 vs 0.15: wins {mid_wins}/3 {means}"


def _crossing_step(records, method, seed, cap):
    """First logged step whose held-out MSE beats the variance bar, or inf.

    Steps beyond `cap` are ignored so runs of different lengths compare on
    the same grid.
    """
    var = [r.metric_value for r in records
           if r.method == method and r.seed == seed
           and r.metric_name == "holdout_target_variance"]
    threshold = 0.1 * var[0]
    curve = sorted((r.ckpt_step, r.metric_value) for r in records
                   if r.method == method and r.seed == seed
                   and r.metric_name == "holdout_total_mse")
    for step, mse in curve:
        if step > cap:
            break
        if mse < threshold:
            return step
    return np.inf


def test_loss_mode_trend():
    """Training on all slots reaches the held-out MSE bar no later than
    training on masked slots only."""
    records = harness.run_ablation(
        "loss_mode", "pointmass", SEEDS, dataset=near_expert_pool(),
        reuse_total={0: pretrained_pool(0)},
        n_steps=LOSSMODE_STEPS, masked_steps=LOSSMODE_STEPS)
    wins = 0
    details = []
    for seed in SEEDS:
        t = _crossing_step(records, "loss_total", seed, LOSSMODE_STEPS)
        k = _crossing_step(records, "loss_masked", seed, LOSSMODE_STEPS)
        details.append((seed, t, k))
        wins += t <= k
    # the comparison is vacuous unless the faster mode actually crosses
    assert any(np.isfinite(t) for _, t, _ in details), details
    assert wins >= 2, f"crossings (seed, total, masked): {details}"


def test_foresight_trend():
    """Seeing all future goals helps multi-goal closed-loop reaching."""
    records = harness.run_ablation(
        "foresight", "pointmass", SEEDS,
        models={s: pretrained(s).model for s in SEEDS},
        valsets={s: valset(s) for s in SEEDS}, n_queries=100)
    wins = 0
    means = {}
    for seed in SEEDS:
        on = np.mean([r.metric_value for r in records
                      if r.method == "foresight_on" and r.seed == seed])
        off = np.mean([r.metric_value for r in records
                       if r.method == "foresight_off" and r.seed == seed])
        means[seed] = (round(float(on), 4), round(float(off), 4))
        wins += on <= off
    assert wins >= 2, f"foresight wins {wins}/3, (on, off) by seed: {means}"


def test_offline_rl_trend():
    """Finetuning the pretrained backbone crosses 80% of the task return
    ceiling in fewer gradient steps than the same run from scratch."""
    dataset, backbone = mixed_setup()
    threshold = 0.8 * envs.TASK_RETURN_CEILINGS["run_east"]
    wins = 0
    details = []
    for seed in SEEDS:
        cfg = RlConfig(seed=seed, eval_every=RL_EVAL_EVERY)
        crossings = {}
        for init in ("pretrained", "scratch"):
            res = downstream.rl_finetune(backbone, dataset, "run_east", cfg,
                                         RL_STEPS, init=init)
            crossings[init] = downstream.steps_to_threshold(res.curve, threshold)
        pre, scr = crossings["pretrained"], crossings["scratch"]
        details.append((seed, pre, scr))
        wins += pre is not None and (scr is None or pre < scr)
    assert wins >= 2, f"crossings (seed, pretrained, scratch): {details}"


def test_prompting(tmp_path):
    """Short expert prompts steer the model to near-expert returns, and
    horizons beyond the training context still run and get logged."""
    model_means, expert_means = [], []
    all_records = []
    for seed in SEEDS:
        prompts = data.collect_near_expert("run_east", 201 + seed, 40)
        recs = harness.prompt_eval(pretrained(seed).model, "pointmass",
                                   "run_east", prompts, seed=seed, horizon=20,
                                   k=5, n_prompts=20)
        all_records += recs
        model_means.append(method_mean(recs, "maskdp", "prompt_return_h20"))
        expert_means.append(method_mean(recs, "expert", "expert_return_h20"))
    med_model = float(np.median(model_means))
    med_expert = float(np.median(expert_means))
    assert med_model >= 0.8 * med_expert, (
        f"prompt {med_model:.2f} vs expert {med_expert:.2f}")

    # a horizon past the training context runs and lands in the log
    prompts = data.collect_near_expert("run_east", 201, 40)
    long_recs = harness.prompt_eval(pretrained(0).model, "pointmass",
                                    "run_east", prompts, seed=0, horizon=60,
                                    k=5, n_prompts=3)
    all_records += long_recs
    path = str(tmp_path / "prompt.csv")
    harness.write_records(all_records, path)
    back = harness.read_records(path)
    names = {r.metric_name for r in back}
    assert {"prompt_return_h20", "prompt_return_h60"} <= names
    assert all(np.isfinite(r.metric_value) for r in back)
