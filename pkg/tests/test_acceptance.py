"""Acceptance criteria 1-10.

Each test prints a single ``criterion N PASS|FAIL ...`` line (collected again in
the terminal summary by conftest.py) and then asserts the criterion.
"""
import math
import time

import numpy as np
import pytest

from invcast import cli
from invcast import diffengine as de
from invcast import forecast as fc
from invcast import inventory as inv
from invcast import objectives as obj
from invcast import trainloop as tl
from invcast.diffengine import Tape
from invcast.experiment import ExperimentSpec, train_objective
from invcast.inventory import CostParams
from invcast.panel import synth_seasonal

from fdcheck import numeric_grad, rel_error
from oracles import mask_sigma_oracle

RESULTS = []


def record(n, ok, detail):
    line = f"criterion {n} {'PASS' if ok else 'FAIL'} {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# -- 1 --------------------------------------------------------------------


def test_criterion_01_closed_form_equals_recursion():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for case in range(100):
        n = int(rng.integers(1, 6))
        t_len = int(rng.integers(2, 51))
        lead = (1, 3, 5)[case % 3]
        alpha = (0.5, 0.8)[(case // 3) % 2]
        d = rng.uniform(0, 30, size=(n, t_len))
        f = rng.uniform(0, 30, size=(n, t_len, lead))
        params = CostParams(alpha_s=alpha, lead_time=lead)
        a = inv.closed_form_trace(f, d, params).numpy()
        b = inv.simulate_recursive(f, d, params)
        for x, y in ((a.orders, b.orders), (a.net_inventory, b.net_inventory),
                     (a.inventory_position, b.inventory_position), (a.wip, b.wip)):
            worst = max(worst, float(np.max(np.abs(x - y))))
    elapsed = time.perf_counter() - start
    record(1, worst <= 1e-9 and elapsed < 5.0,
           f"closed form vs recursion: max|diff|={worst:.2e} (<=1e-9), {elapsed:.2f}s (<5s)")


# -- 2 --------------------------------------------------------------------


def test_criterion_02_sigma_running_sums_equal_mask_oracle():
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(50):
        t_len = int(rng.integers(1, 21))
        k = int(rng.integers(1, 6))
        n = int(rng.integers(1, 4))
        f = rng.normal(10, 4, size=(n, t_len, k))
        d = rng.uniform(0, 20, size=(n, t_len))
        worst = max(worst, float(np.max(np.abs(inv.forecast_error_std(f, d)
                                               - mask_sigma_oracle(f, d)))))
    record(2, worst <= 1e-9, f"sigma_e running sums vs 4-D mask: max|diff|={worst:.2e} (<=1e-9)")


# -- 3 --------------------------------------------------------------------


def _kink_free(*nets, margin=1e-3):
    return all(np.min(np.abs(x)) > margin for x in nets)


def _tc_forecast_instance(rng, alpha):
    n, t_len, lead = 2, 12, 3
    params = CostParams(float(rng.uniform(0.5, 3)), float(rng.uniform(0.5, 3)),
                        float(rng.uniform(0.001, 0.05)), alpha, lead)
    while True:
        d = rng.uniform(0, 20, size=(n, t_len))
        f = rng.normal(10, 4, size=(n, t_len, lead))
        if _kink_free(inv.closed_form_trace(f, d, params).numpy().net_inventory):
            return f, d, params


def _grad_pair(fn, x):
    tape = Tape()
    leaf = tape.leaf(x)
    tape.backward(fn(leaf))
    return leaf.grad, numeric_grad(lambda v: de.value_of(fn(v)), x, h=1e-4)


def _beta_instance(rng):
    period, lead, horizon = 4, 2, 4
    panel = synth_seasonal(2, 30, period, 40, 10, 0.1, 4, seed=int(rng.integers(1 << 30)))
    cfg = tl.TrainConfig(objective="tc", costs=CostParams(1.0, float(rng.uniform(1, 5)), 0.01,
                                                          0.5, lead),
                         horizon=horizon, period=period, window=period)
    origins = np.arange(period - 1, 30 - horizon - 1)
    beta0 = float(rng.uniform(0.8, 1.2))
    model = fc.SeasonalScaler(period)

    def nets(beta):
        f = model.forecast_batch(panel.values, origins, horizon, {"beta": np.array(beta)})
        lf, ld = tl._local_system(f, panel.values, origins, lead)
        return inv.closed_form_trace(lf, ld, cfg.costs).numpy().net_inventory

    return model, panel, cfg, origins, beta0, nets


def test_criterion_03_gradient_suite():
    rng = np.random.default_rng(303)
    start = time.perf_counter()
    worst = {"dTC/df": 0.0, "dRRMS/df": 0.0, "dTC/dbeta": 0.0}
    instances = 0
    while instances < 20:
        alpha = (0.5, 0.8)[instances % 2]
        f, d, params = _tc_forecast_instance(rng, alpha)
        naive = obj.cost_breakdown(
            inv.closed_form_trace(f + rng.normal(0, 3, size=f.shape), d, params).numpy(), params)

        def tc(x):
            tr = inv.closed_form_trace(x, d, params)
            return de.mean(obj.total_cost(obj.cost_breakdown(tr, params)))

        def rr(x):
            tr = inv.closed_form_trace(x, d, params)
            return de.mean(obj.rrms(obj.cost_breakdown(tr, params), naive))

        for key, fn in (("dTC/df", tc), ("dRRMS/df", rr)):
            got, want = _grad_pair(fn, f)
            worst[key] = max(worst[key], rel_error(got, want))

        model, panel, cfg, origins, beta0, nets = _beta_instance(rng)
        h = 1e-4
        if not _kink_free(nets(beta0 - h), nets(beta0), nets(beta0 + h), margin=0.0) or \
                not np.array_equal(np.sign(nets(beta0 - h)), np.sign(nets(beta0 + h))):
            continue  # the difference would straddle a relu kink
        got, want = _grad_pair(
            lambda b: tl.double_rollout_loss(model, panel.values, cfg, origins, {"beta": b}),
            np.array(beta0))
        worst["dTC/dbeta"] = max(worst["dTC/dbeta"], rel_error(got, want))
        instances += 1
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-4 and elapsed < 30.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(3, ok, f"gradients vs central differences on {instances} instances: {detail} "
                  f"(<=1e-4), {elapsed:.1f}s (<30s)")


# -- 4 --------------------------------------------------------------------


def test_criterion_04_median_service_level_zero_safety_stock():
    rng = np.random.default_rng(404)
    nonzero = 0
    for _ in range(20):
        f = rng.normal(10, 5, size=(3, 25, 3))
        d = rng.uniform(0, 20, size=(3, 25))
        params = CostParams(alpha_s=0.5, lead_time=3)
        for tr in (inv.closed_form_trace(f, d, params), inv.simulate_recursive(f, d, params)):
            nonzero += int(np.count_nonzero(de.value_of(tr.safety_stock)))
    record(4, nonzero == 0 and inv.inv_norm_cdf(0.5) == 0.0,
           f"alpha_s=0.5 gives ss_t == 0 exactly ({nonzero} non-zero entries)")


# -- 5 --------------------------------------------------------------------


def test_criterion_05_naive_fixed_point():
    panel = synth_seasonal(5, 60, 12, 100, 30, 0.2, 10, seed=5, cutoffs=(30, 45))
    costs = CostParams(2.0, 7.0, 1e-3, 0.5, 6)
    cfg = tl.TrainConfig(objective="tc", costs=costs)
    ft, _ = tl.roll_forward(fc.NaiveSeasonal(12), panel, cfg, 30, 60)
    m = tl.evaluate_forecasts(ft, panel, costs, 45, 60)
    gap = abs(m["RRMS"] - math.sqrt(0.75))
    record(5, gap <= 1e-9, f"naive RRMS against itself = {m['RRMS']:.12f}, |gap|={gap:.1e}")


# -- 6 and 7: desk-scale training on one synthetic panel ------------------

DESK_SPEC = dict(model="seasonal_scaler", lead_time=6, horizon=12, window=24, period=12,
                 service_level=0.5, lr=(0.01,), steps_per_update=5, init_steps=100, seed=1,
                 mode="local")
DESK_CV = 1e-5


@pytest.fixture(scope="module")
def desk():
    panel = synth_seasonal(20, 120, 12, 100, 30, 0.2, 10, seed=1, cutoffs=(60, 90))
    spec = ExperimentSpec(**DESK_SPEC)
    runs, timing = {}, {}
    for key, (objective, ch, cs) in {"mse": ("mse", 1.0, 1.0), "tc_1_10": ("tc", 1.0, 10.0),
                                     "tc_10_1": ("tc", 10.0, 1.0),
                                     "tc_1_1": ("tc", 1.0, 1.0)}.items():
        t = time.perf_counter()
        costs = CostParams(ch, cs, DESK_CV, 0.5, 6)
        runs[key] = train_objective(spec, panel, objective, costs, 0.01)
        timing[key] = time.perf_counter() - t
    return panel, runs, timing


@pytest.mark.slow
def test_criterion_06_beta_follows_cost_ratio(desk):
    panel, runs, timing = desk
    beta_low = float(np.mean(runs["tc_1_10"][1]))   # c_h / c_s = 0.1
    beta_high = float(np.mean(runs["tc_10_1"][1]))  # c_h / c_s = 10
    elapsed = timing["tc_1_10"] + timing["tc_10_1"]
    gap = beta_low - beta_high
    record(6, gap >= 0.05 and elapsed < 300,
           f"beta(ratio 0.1)={beta_low:.3f} - beta(ratio 10)={beta_high:.3f} = {gap:.3f} "
           f"(>=0.05), {elapsed:.0f}s (<300s)")


@pytest.mark.slow
def test_criterion_07_tc_training_beats_mse_training(desk):
    panel, runs, timing = desk
    mse_ft = runs["mse"][0]
    parts, ok = [], True
    for key, ch, cs, required in (("tc_1_10", 1.0, 10.0, True), ("tc_10_1", 10.0, 1.0, True),
                                  ("tc_1_1", 1.0, 1.0, False)):
        costs = CostParams(ch, cs, DESK_CV, 0.5, 6)
        tc_tc = tl.evaluate_forecasts(runs[key][0], panel, costs, 90, 120)["TC"]
        tc_mse = tl.evaluate_forecasts(mse_ft, panel, costs, 90, 120)["TC"]
        gain = 100.0 * (tc_mse - tc_tc) / tc_mse
        if required:
            ok &= gain >= 5.0
        parts.append(f"({ch:g},{cs:g}) {tc_mse:.1f}->{tc_tc:.1f} {gain:+.1f}%"
                     + ("" if required else " [informational]"))
    elapsed = sum(timing.values())
    ok &= elapsed < 600
    record(7, ok, "test TC mse-trained -> tc-trained: " + ", ".join(parts)
                  + f"; >=5% required on unbalanced cells, {elapsed:.0f}s (<600s)")


# -- 8 --------------------------------------------------------------------


def test_criterion_08_metric_unit_values():
    mse = float(obj.mse(np.array([[[2.0], [2.0]]]), np.array([[0.0, 1.0, 2.0]])))
    smape = float(obj.smape(np.array([[[3.0]]]), np.array([[0.0, 5.0]])))
    i = np.array([[1.0, -2.0, 3.0]])
    cb = obj.CostBreakdown(obj.holding_cost(i, 1.0), obj.stockout_cost(i, 2.0),
                           obj.order_variance_cost(np.array([[4.0, 6.0]]), 0.1))
    tc = float(cb.total[0])
    ok = mse == 0.5 and smape == 0.5 and abs(tc - 2.7667) <= 1e-3
    record(8, ok, f"MSE={mse}, sMAPE term={smape}, TC={tc:.4f} (2.7667 +- 1e-3)")


# -- 9 --------------------------------------------------------------------


def _leak_runs(model_factory, config, panel, t0, t1, probes):
    base, _ = tl.roll_forward(model_factory(), panel, config, t0, t1)
    rng = np.random.default_rng(9)
    changed = 0
    for t in probes:
        vals = panel.values.copy()
        vals[:, t + 1 :] = rng.uniform(0, 1000, size=vals[:, t + 1 :].shape)
        ft, _ = tl.roll_forward(model_factory(), panel.with_values(vals), config, t0, t1)
        j = t - t0
        changed += ft.values[:, : j + 1].tobytes() != base.values[:, : j + 1].tobytes()
    return changed


def test_criterion_09_leakage_audit():
    panel = synth_seasonal(3, 44, 6, 50, 15, 0.2, 5, seed=9, cutoffs=(24, 34))
    costs = CostParams(1.0, 4.0, 1e-4, 0.8, 2)
    scaler_cfg = tl.TrainConfig(objective="tc", costs=costs, horizon=4, period=6, window=6,
                                steps_per_update=2, batch_size=6)
    single_cfg = tl.TrainConfig(objective="rrms", costs=costs, horizon=2, period=6, window=6,
                                steps_per_update=2, rollout="single")
    lstm_cfg = tl.TrainConfig(objective="tc", costs=costs, horizon=3, period=6, window=6,
                              steps_per_update=1, batch_size=4)
    probes = range(24, 44)
    changed = _leak_runs(lambda: fc.SeasonalScaler(6), scaler_cfg, panel, 24, 44, probes)
    changed += _leak_runs(lambda: fc.SeasonalScaler(6), single_cfg, panel, 24, 44, probes)
    changed += _leak_runs(lambda: fc.RecurrentEncoderDecoder(window=6, hidden=3, seed=2),
                          lstm_cfg, panel, 24, 32, (24, 27, 31))
    record(9, changed == 0,
           f"future-demand perturbation altered {changed} earlier forecast blocks "
           f"(43 probes over scaler double/single rollout and recurrent model)")


# -- 10 -------------------------------------------------------------------


def test_criterion_10_run_determinism(tmp_path):
    args = ["run", "--synth-n", "4", "--synth-t", "60", "--period", "6", "--lead-time", "2",
            "--horizon", "4", "--init-steps", "10", "--steps-per-update", "2",
            "--objectives", "mse,tc,rrms", "--ch", "1,10", "--cs", "1,10", "--cv", "1e-5",
            "--seed", "3"]
    codes = [cli.main(args + ["--out", str(tmp_path / name)]) for name in ("a", "b")]
    a, b = tmp_path / "a", tmp_path / "b"
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    same = files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file()) and all(
        (a / f).read_bytes() == (b / f).read_bytes() for f in files)
    record(10, codes == [0, 0] and same,
           f"two runs with seed 3: exit codes {codes}, {len(files)} output files "
           f"{'byte-identical' if same else 'DIFFER'}")
