"""Pools, retrieval metrics, plan execution, stats, probes, PCA."""

import numpy as np
import pytest

from embedplan import evaluate as ev
from embedplan.errors import ConstantInput, DegenerateVariance, MissingModel
from embedplan.embed import EmbeddingTable
from embedplan.model import init_model
from embedplan.world import Trajectory

from conftest import RiggedModel, synthetic_bundle

# Nine per-domain Hit@5 gaps between the transition-level and problem-level
# splits, as published for the mid-size encoder; interpolation values from
# the same table, extrapolation reconstructed as interp - gap.
PUBLISHED_INTERP = [100.0, 98.2, 99.9, 99.4, 99.9, 98.6, 99.6, 99.7, 99.9]
PUBLISHED_GAPS = [58.4, 73.4, 63.3, 44.2, 25.5, 35.9, 55.0, 50.5, 59.9]
PUBLISHED_EXTRAP = [i - g for i, g in zip(PUBLISHED_INTERP, PUBLISHED_GAPS)]


@pytest.fixture(scope="module")
def synth():
    return synthetic_bundle(n_states=400, n_queries=800, seed=3)


@pytest.fixture(scope="module")
def synth_model(synth):
    return init_model("mlp", synth.table.dim, synth.table.dim, seed=1)


# --- pools ------------------------------------------------------------------------

def test_pool_size_128_when_enough_states(synth):
    t = synth.transitions[synth.order[0]]
    pool = ev.build_pool(t, "uniform_domain", synth, ev.query_rng(0, t.tid, "pool"))
    assert pool.effective_size == 128
    assert len(set(pool.candidates)) == 128
    assert pool.candidates.count(pool.gt) == 1
    assert not pool.underfull


def test_pool_underfull_within_problem():
    bundle = synthetic_bundle(n_states=40, n_queries=10, seed=4)
    t = bundle.transitions[bundle.order[0]]
    pool = ev.build_pool(t, "within_problem", bundle,
                         ev.query_rng(0, t.tid, "pool"))
    assert pool.effective_size == 40
    assert pool.underfull


def test_pool_ground_truth_exactly_once_fuzz(synth):
    for i, tid in enumerate(synth.order[:1000]):
        t = synth.transitions[tid]
        pool = ev.build_pool(t, "uniform_domain", synth,
                             ev.query_rng(i, tid, "pool"))
        assert pool.candidates.count(pool.gt) == 1
        assert len(set(pool.candidates)) == len(pool.candidates)


def test_pool_deterministic_per_seed(synth):
    t = synth.transitions[synth.order[5]]
    a = ev.build_pool(t, "uniform_domain", synth, ev.query_rng(9, t.tid, "pool"))
    b = ev.build_pool(t, "uniform_domain", synth, ev.query_rng(9, t.tid, "pool"))
    assert a.candidates == b.candidates


# --- ranking ----------------------------------------------------------------------

def test_rank_of_ties_broken_randomly():
    scores = np.zeros(10)
    ranks = {ev._rank_of(scores, 3, ev.query_rng(s, "q", "tie"))
             for s in range(200)}
    assert len(ranks) > 5  # tied scores spread the target over many ranks


def test_hit_at_k_equals_pool_size_always_true(synth, synth_model):
    t = synth.transitions[synth.order[0]]
    pool = ev.build_pool(t, "uniform_domain", synth, ev.query_rng(0, t.tid, "pool"))
    assert ev.hit_at_k(synth_model, t, pool, synth.table, pool.effective_size,
                       ev.query_rng(0, t.tid, "tie"))


def test_hit_monotone_in_k(synth, synth_model):
    rates, _ = ev.evaluate_hits(synth_model, synth, synth.order[:300],
                                "uniform_domain", seed=0)
    assert rates[1] <= rates[5] <= rates[10]


def test_eval_never_mutates_model_or_table(synth, synth_model):
    table_sum_before = synth.table.checksum()
    params_before = synth_model.param_vector().flatten().copy()
    ev.evaluate_hits(synth_model, synth, synth.order[:50], "uniform_domain",
                     seed=0)
    ev.evaluate_action_acc(synth_model, synth, synth.order[:30], seed=0)
    assert synth.table.checksum() == table_sum_before
    assert np.array_equal(synth_model.param_vector().flatten(), params_before)


def test_eval_same_seed_reproduces_every_outcome(synth, synth_model):
    a = ev.evaluate_hits(synth_model, synth, synth.order[:200],
                         "uniform_domain", seed=9)
    b = ev.evaluate_hits(synth_model, synth, synth.order[:200],
                         "uniform_domain", seed=9)
    assert a == b
    # tie-broken ranks are reproducible too
    scores = np.zeros(12)
    r1 = ev._rank_of(scores, 4, ev.query_rng(3, "q", "tie"))
    r2 = ev._rank_of(scores, 4, ev.query_rng(3, "q", "tie"))
    assert r1 == r2


def test_action_acc_monotone_and_chance(synth, synth_model):
    accs = ev.evaluate_action_acc(synth_model, synth, synth.order[:400], seed=0)
    assert accs[1] <= accs[5] <= accs[10]
    # 40 exchangeable synthetic actions: Acc@1 ~ 1/40
    assert abs(accs[1] - 1 / 40) < 0.035


def test_action_acc_k_equals_action_count(synth, synth_model):
    t = synth.transitions[synth.order[0]]
    n_actions = len(synth.all_actions(t.domain, t.problem))
    assert ev.action_acc_at_k(synth_model, t, synth, n_actions,
                              ev.query_rng(0, t.tid, "tie"))


# --- plan execution ----------------------------------------------------------------

def _mini_plan_bundle():
    bundle = synthetic_bundle(n_states=200, n_queries=0, seed=8)
    from embedplan.world import Transition
    states = [10, 11, 12, 13, 14]
    for step in range(4):
        t = Transition(domain="synth", problem="p0", plan_id=0, step=step,
                       s=states[step], a=f"(op{step})", s_next=states[step + 1],
                       s_text="", a_text=f"(op{step})", s_next_text="")
        bundle.transitions[t.tid] = t
        bundle.order.append(t.tid)
    traj = Trajectory(domain="synth", problem="p0", plan_id=0,
                      states=states, actions=[f"(op{s})" for s in range(4)])
    return bundle, traj


def test_plan_execute_definition():
    bundle, traj = _mini_plan_bundle()
    model = init_model("mlp", bundle.table.dim, bundle.table.dim, seed=0)
    mean, exact = ev.plan_execute(model, traj, bundle, "uniform_domain",
                                  k=5, seed=0)
    assert 0.0 <= mean <= 1.0
    assert exact == (mean == 1.0)
    # k = pool size: every step hits
    mean2, exact2 = ev.plan_execute(model, traj, bundle, "uniform_domain",
                                    k=128, seed=0)
    assert (mean2, exact2) == (1.0, True)


def test_plan_execute_empty_plan():
    bundle, _ = _mini_plan_bundle()
    traj = Trajectory(domain="synth", problem="p0", plan_id=1,
                      states=[10], actions=[])
    model = init_model("mlp", bundle.table.dim, bundle.table.dim, seed=0)
    assert ev.plan_execute(model, traj, bundle, "uniform_domain") == (1.0, True)


def test_plan_execute_one_step_hit():
    bundle, _ = _mini_plan_bundle()
    t = bundle.transitions["synth/p0/0/0"]
    traj = Trajectory(domain="synth", problem="p0", plan_id=0,
                      states=[t.s, t.s_next], actions=[t.a])
    # prediction equals the ground truth's direction: step 0 always hits
    rigged = RiggedModel(bundle.table, [t], hits={0})
    assert ev.plan_execute(rigged, traj, bundle, "uniform_domain",
                           k=5, seed=0) == (1.0, True)


def test_exact_le_mean_aggregate(synth, synth_model):
    bundle, traj = _mini_plan_bundle()
    means, exacts = [], []
    for seed in range(20):
        m, e = ev.plan_execute(synth_model, traj, bundle, "uniform_domain",
                               k=5, seed=seed)
        means.append(m)
        exacts.append(1.0 if e else 0.0)
    assert np.mean(exacts) <= np.mean(means) + 1e-12


# --- cross-domain matrix -------------------------------------------------------------

def test_cross_domain_matrix_two_domains():
    models = {"a": "model_a", "b": "model_b"}
    calls = []

    def eval_fn(model, tgt):
        calls.append((model, tgt))
        return {"model_a": 0.2, "model_b": 0.4}[model]

    m = ev.cross_domain_matrix(models, ["a", "b"], eval_fn)
    assert set(m["cells"]) == {("a", "b"), ("b", "a")}
    assert m["mean"] == pytest.approx(0.3)
    assert m["row_means"]["a"] == pytest.approx(0.2)
    assert m["col_means"]["a"] == pytest.approx(0.4)


def test_cross_domain_matrix_missing_model():
    with pytest.raises(MissingModel):
        ev.cross_domain_matrix({"a": object()}, ["a", "b"], lambda m, t: 0.0)


def test_untrained_matrix_near_chance():
    # two exchangeable synthetic domains: every off-diagonal cell of an
    # untrained-model matrix sits at the 5/128 chance level
    bundles = {d: synthetic_bundle(n_states=400, n_queries=700, seed=s)
               for d, s in (("a", 1), ("b", 2))}
    models = {d: init_model("mlp", 64, 64, seed=s)
              for d, s in (("a", 10), ("b", 20))}

    def eval_fn(model, tgt):
        bundle = bundles[tgt]
        rates, _ = ev.evaluate_hits(model, bundle, bundle.order,
                                    "uniform_domain", seed=5)
        return rates[5]

    m = ev.cross_domain_matrix(models, ["a", "b"], eval_fn)
    for cell in m["cells"].values():
        assert abs(cell - 5 / 128) < 0.025  # ~3 sigma at n=700


def test_matrix_csv_layout(tmp_path):
    m = ev.cross_domain_matrix({"a": "x", "b": "y"},
                               ["a", "b"], lambda mo, t: 0.125)
    path = tmp_path / "matrix.csv"
    ev.write_matrix_csv(m, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "train\\test,a,b,mean"
    assert lines[1].startswith("a,,0.125")  # blank diagonal


# --- statistics ------------------------------------------------------------------------

def test_stats_identical_series_paired():
    out = ev.stats_compare([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], paired=True)
    assert out["t"] == 0.0 and out["cohen_d"] == 0.0 and out["p"] == 1.0


def test_stats_constant_offset_zero_variance():
    with pytest.raises(DegenerateVariance):
        ev.stats_compare([2.0, 2.0, 2.0], [1.0, 1.0, 1.0], paired=True)


def test_stats_published_interp_extrap_pairs():
    out = ev.stats_compare(PUBLISHED_INTERP, PUBLISHED_EXTRAP, paired=True)
    assert out["t"] == pytest.approx(10.58, abs=0.01)
    assert out["df"] == 8
    assert out["cohen_d"] == pytest.approx(5.25, abs=0.02)
    assert out["p"] < 1e-4
    lo, hi = out["ci95"]
    assert lo < out["mean_diff"] < hi


def test_stats_paired_t_matches_scipy():
    from scipy import stats as sps
    rng = np.random.default_rng(0)
    a = rng.normal(size=12)
    b = rng.normal(size=12)
    ours = ev.stats_compare(a, b, paired=True)
    ref = sps.ttest_rel(a, b)
    assert ours["t"] == pytest.approx(ref.statistic, rel=1e-12)
    assert ours["p"] == pytest.approx(ref.pvalue, rel=1e-9)
    ours2 = ev.stats_compare(a, b, paired=False)
    ref2 = sps.ttest_ind(a, b)
    assert ours2["t"] == pytest.approx(ref2.statistic, rel=1e-12)
    assert ours2["p"] == pytest.approx(ref2.pvalue, rel=1e-9)


# --- LDA probe ---------------------------------------------------------------------------

def test_lda_constant_costs_error(synth):
    ids = [str(i) for i in range(10)]
    with pytest.raises(ConstantInput):
        ev.lda_probe(ids, ids[::-1], [3.0] * 10, [10.0] * 10, synth.table)


def test_lda_synthetic_affine_distance_high_r():
    # unit vectors placed so cosine distance to the anchor is affine in cost:
    # theta_i = arccos(1 - c * cost_i)
    n, dim = 40, 16
    entries = {}
    for i in range(n):
        theta = np.arccos(1.0 - 0.02 * i)
        v = np.zeros(dim)
        v[0], v[1] = np.cos(theta), np.sin(theta)
        entries[f"s{i}"] = v.astype(np.float32)
    entries["goal"] = entries["s0"]
    table = EmbeddingTable(dim=dim, entries=entries)
    costs = list(range(n))
    lengths = [17.0] * n
    out = ev.lda_probe([f"s{i}" for i in range(n)], ["goal"] * n, costs,
                       lengths, table)
    assert out["pearson_r"] > 0.99
    assert out["partial_r_controlling_length"] == pytest.approx(
        out["pearson_r"])


def test_lda_shuffled_costs_near_zero(synth):
    rng = np.random.default_rng(0)
    n = 1000
    ids_s = [str(rng.integers(0, 400)) for _ in range(n)]
    ids_g = [str(rng.integers(0, 400)) for _ in range(n)]
    costs = rng.permutation(n).astype(float)
    lengths = rng.normal(10, 2, size=n)
    out = ev.lda_probe(ids_s, ids_g, costs, lengths, synth.table)
    assert abs(out["pearson_r"]) < 0.1


# --- PCA export -----------------------------------------------------------------------------

def test_pca_identical_vectors_map_to_origin():
    vecs = {"a": np.ones(8), "b": np.ones(8)}
    rows = ev.pca_export(vecs, [("a", "s", "p"), ("b", "s_next", "p")])
    assert rows[0]["pc1"] == 0.0 and rows[0]["pc2"] == 0.0
    assert rows[1]["pc1"] == 0.0 and rows[1]["pc2"] == 0.0


def test_pca_variance_ordering_and_reconstruction():
    rng = np.random.default_rng(0)
    base = rng.normal(size=(60, 10))
    base[:, 0] *= 6.0   # dominant direction
    vecs = {str(i): base[i] for i in range(60)}
    rows = ev.pca_export(vecs, [(str(i), "s", "p") for i in range(60)])
    pc1 = np.array([r["pc1"] for r in rows])
    pc2 = np.array([r["pc2"] for r in rows])
    assert pc1.var() >= pc2.var()
    # 2-PC reconstruction beats 1-PC reconstruction
    x = base - base.mean(axis=0)
    cov = x.T @ x / 60
    evals, evecs = np.linalg.eigh(cov)
    top2 = evecs[:, np.argsort(evals)[::-1][:2]]
    err2 = np.linalg.norm(x - (x @ top2) @ top2.T)
    err1 = np.linalg.norm(x - np.outer(x @ top2[:, 0], top2[:, 0]))
    assert err2 <= err1


def test_pca_csv_columns(tmp_path):
    vecs = {"a": np.arange(4.0), "b": np.arange(4.0)[::-1]}
    rows = ev.pca_export(vecs, [("a", "s", "p1"), ("b", "s_pred", "p2")])
    path = tmp_path / "pca.csv"
    ev.write_pca_csv(rows, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "id,kind,problem,pc1,pc2"
    assert len(lines) == 3


# --- reports ----------------------------------------------------------------------------------

def test_metric_report_monotonicity_enforced():
    with pytest.raises(AssertionError):
        ev.MetricReport(protocol="interpolation", domain="d",
                        hit={1: 0.5, 5: 0.3, 10: 0.6})
    with pytest.raises(AssertionError):
        ev.MetricReport(protocol="interpolation", domain="d",
                        hit={1: 0.1, 5: 0.3}, plan_mean5=0.4, plan_exact5=0.5)


def test_report_json_six_significant_digits(tmp_path):
    r = ev.MetricReport(protocol="interpolation", domain="d",
                        hit={1: 1 / 3, 5: 2 / 3, 10: 0.9999999},
                        n_queries=10, seeds=[42])
    path = tmp_path / "report.json"
    ev.write_report_json([r], path)
    import json
    obj = json.loads(path.read_text())[0]
    assert obj["hit@1"] == 0.333333
    assert obj["hit@10"] == 1.0
