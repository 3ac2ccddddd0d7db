import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from psvit import tensor as T
from psvit.arch import CHOICES, CellChoice, count_flops, preset, validate
from psvit.data import SyntheticSpec, generate
from psvit.nas import (
    InfeasibleBudget,
    PathSpace,
    SearchConfig,
    TrainConfig,
    Trainer,
    TrainingAborted,
    accuracy,
    evaluate_subnet,
    evolutionary_search,
    exhaustive_best,
    parse_path,
    path_str,
    rank_key,
    repair_last_layer,
    sample_path,
    supernet_template,
)
from psvit.nas.supernet import Supernet
from psvit.tensor import ContractError, Tensor

from helpers import reduced_supernet

B, S, I = CellChoice.BASIC, CellChoice.SHARED_PAIR, CellChoice.IDENTITY


@pytest.fixture(scope="module")
def data():
    return generate(SyntheticSpec(seed=7))


@pytest.fixture(scope="module")
def canonical_template():
    return supernet_template(preset("tiny16"), 6)


# ---------------------------------------------------------------------------
# supernet structure
# ---------------------------------------------------------------------------


def test_canonical_supernet_shape(canonical_template):
    assert canonical_template.num_cells == 18
    assert canonical_template.with_cells([S] * 18).depth == 36
    assert canonical_template.with_cells([I] * 18).depth == 0


def test_parameter_count_is_paths_plus_backbone():
    sn = reduced_supernet()
    backbone = sum(p.size for n, p in sn.named_parameters() if not n.startswith("cells."))
    cells = sum(c.basic.num_parameters() + sum(l.num_parameters() for l in c.pair) for st_ in sn.cells for c in st_)
    assert sn.num_parameters() == backbone + cells


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from(CHOICES), min_size=4, max_size=4))
def test_every_path_is_valid_genotype(path):
    sn = reduced_supernet()
    assert validate(sn.genotype_for(path)) == []


@settings(max_examples=12, deadline=None)
@given(st.lists(st.sampled_from(CHOICES), min_size=4, max_size=4), st.integers(0, 100))
def test_weight_inheritance(path, seed):
    sn = reduced_supernet()
    x = Tensor(np.random.default_rng(seed).normal(size=(3, 32, 32, 3)))
    with T.no_grad():
        a = sn(x, path).data
        b = sn.extract(path)(x).data
    assert np.max(np.abs(a - b)) <= 1e-12


def test_all_identity_path_is_head_only(data):
    sn = reduced_supernet()
    path = "IIII"
    xv, yv = data.val
    standalone = sn.extract(path)
    assert all(len(layers) == 0 for layers in standalone.stages)
    assert evaluate_subnet(sn, path, xv, yv) == accuracy(standalone, xv, yv)


def test_path_length_checked():
    sn = reduced_supernet()
    with pytest.raises(ContractError):
        sn(Tensor(np.zeros((1, 32, 32, 3))), "BBB")
    assert parse_path("bsi") == (B, S, I)
    assert path_str((S, I)) == "SI"


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def test_sample_path_determinism():
    a = [sample_path(np.random.default_rng(42), 18) for _ in range(3)]
    assert a[0] == a[1] == a[2]
    assert len(a[0]) == 18


def sampling_counts(n=10_000, cells=18, seed=0):
    rng = np.random.default_rng(seed)
    counts = np.zeros((cells, 3), dtype=np.int64)
    for _ in range(n):
        for c, choice in enumerate(sample_path(rng, cells)):
            counts[c, CHOICES.index(choice)] += 1
    return counts


def test_sampling_marginals_chi_square():
    counts = sampling_counts()
    per_cell = ((counts - 10_000 / 3) ** 2 / (10_000 / 3)).sum(axis=1)
    # joint test over all 18 cells (df = 36), and each cell (df = 2) with Bonferroni
    assert stats.chi2.sf(per_cell.sum(), 36) > 0.01
    assert per_cell.max() < stats.chi2.ppf(1 - 0.01 / 18, 2)
    freq = sampling_counts(30_000, 3, seed=1) / 30_000
    assert freq.min() >= 0.323 and freq.max() <= 0.343


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _cfg(**kw):
    base = dict(iterations=40, batch_size=16, lr=0.05, warmup=5)
    base.update(kw)
    return TrainConfig(**base)


def test_inactive_path_bit_unchanged(data):
    sn = reduced_supernet(1)
    xt, yt = data.train
    tr = Trainer(sn, _cfg(), np.random.default_rng(3))
    for _ in range(12):
        before = {n: p.data.copy() for n, p in sn.named_parameters()}
        buffers = {n: b.copy() for n, b in tr.optimizer.buffers.items()}
        rec = tr.step(xt, yt)
        active = sn.path_parameter_names(rec["path"])
        changed = {n for n, p in sn.named_parameters() if not np.array_equal(p.data, before[n])}
        assert changed == active
        for n in set(buffers) - active:
            assert np.array_equal(tr.optimizer.buffers[n], buffers[n])


def test_training_deterministic(data):
    xt, yt = data.train

    def run():
        tr = Trainer(reduced_supernet(2), _cfg(iterations=8), np.random.default_rng(5))
        return [(r["loss"], r["path"]) for r in tr.run(xt, yt)]

    assert run() == run()


def test_overfit_single_batch(data):
    xt, yt = data.train
    x, y = xt[:8], yt[:8]
    sn = reduced_supernet(3)
    cfg = TrainConfig(iterations=300, batch_size=8, lr=0.05, label_smoothing=0.0, warmup=0)
    tr = Trainer(sn, cfg, np.random.default_rng(0), fixed_path="BBBB")
    log = tr.run(x, y)
    assert all(r["path"] == "BBBB" for r in log)
    assert log[-1]["loss"] < 0.05


def test_nonfinite_loss_aborts(data):
    xt, yt = data.train
    sn = reduced_supernet(4)
    tr = Trainer(sn, _cfg(), np.random.default_rng(0))
    sn.head.fc.weight.data[...] = np.inf
    with pytest.raises(TrainingAborted) as info:
        tr.step(xt, yt)
    assert info.value.record["iteration"] == 0
    assert not np.isfinite(info.value.record["loss"])
    assert "path" in info.value.record


def test_untrained_fitness_is_chance(data):
    sn = reduced_supernet(5)
    for path in ("BBBB", "SIBS", "IIII"):
        f = evaluate_subnet(sn, path, data.images, data.labels)
        assert abs(f - 0.1) <= 0.08
        assert f == evaluate_subnet(sn, path, data.images, data.labels)


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------


def test_repair_last_layer():
    assert repair_last_layer((B, S, I, I)) == (B, B, I, I)
    assert repair_last_layer((S, B)) == (S, B)
    assert repair_last_layer((I, I)) == (I, I)


def test_infeasible_budget():
    space = PathSpace(reduced_supernet().genotype)
    floor = space.flops((I,) * 4)
    with pytest.raises(InfeasibleBudget):
        evolutionary_search(space, SearchConfig(floor - 1, population_size=4, topk=2), lambda p: 0.0)


def test_search_config_invariants():
    with pytest.raises(ValueError):
        SearchConfig(10, population_size=20, total_samples=10)
    with pytest.raises(ValueError):
        SearchConfig(10, population_size=5, topk=6)


def _surrogate(space, target):
    return lambda p: -abs(space.flops(p) - target)


@pytest.mark.parametrize("target_frac,budget_frac,seed", [(0.5, 0.8, 0), (0.3, 0.4, 1), (0.9, 1.0, 2), (0.7, 0.6, 3)])
def test_search_matches_exhaustive_surrogate(target_frac, budget_frac, seed):
    space = PathSpace(reduced_supernet().genotype)
    top = space.flops((S,) * 4)
    target, budget = int(target_frac * top), int(budget_frac * top)
    fit = _surrogate(space, target)
    oracle = exhaustive_best(space, fit, budget)
    cfg = SearchConfig(budget, population_size=12, max_iterations=20, total_samples=1000, topk=4, seed=seed)
    res = evolutionary_search(space, cfg, fit)
    assert res.best.key == oracle[0].key
    assert all(c.flops <= budget for c in res.state.archive.values())
    assert all(np.isfinite(c.fitness) for c in res.state.archive.values())


def test_search_properties_on_canonical_space(canonical_template):
    space = PathSpace(canonical_template)
    budget = int(1.1e9)
    fit = _surrogate(space, 1.0e9)
    cfg = SearchConfig(budget, population_size=20, max_iterations=8, total_samples=120, topk=5, seed=3)
    res = evolutionary_search(space, cfg, fit)
    assert all(c.flops <= budget for c in res.state.archive.values())
    assert len(res.state.archive) <= 120
    assert np.all(np.diff(res.state.best_history) >= 0)
    assert res.topk == sorted(res.topk, key=rank_key)
    for c in res.state.archive.values():
        assert c.path == repair_last_layer(c.path)
    again = evolutionary_search(PathSpace(canonical_template), cfg, fit)
    assert [c.key for c in again.topk] == [c.key for c in res.topk]
    assert again.state.rng_state == res.state.rng_state


def test_search_log_records(canonical_template):
    space = PathSpace(canonical_template)
    seen = []
    cfg = SearchConfig(int(1.2e9), population_size=10, max_iterations=3, total_samples=25, topk=3)
    res = evolutionary_search(space, cfg, _surrogate(space, 1e9), seen.append)
    assert seen == res.log
    assert len(seen) == len(res.state.archive) <= 25
    assert set(seen[0]) == {"path", "flops", "fitness", "iteration"}


def test_search_threads_match_single_thread():
    space = PathSpace(reduced_supernet().genotype)
    fit = _surrogate(space, 1.0e6)
    base = dict(flops_budget=int(1.5e6), population_size=8, max_iterations=5, topk=3, seed=9)
    a = evolutionary_search(space, SearchConfig(**base), fit)
    b = evolutionary_search(space, SearchConfig(**base, workers=4), fit)
    assert [c.key for c in a.topk] == [c.key for c in b.topk]


def test_search_with_inherited_accuracy(data):
    sn = reduced_supernet(6)
    xt, yt = data.train
    xv, yv = data.val
    Trainer(sn, _cfg(iterations=150, batch_size=32, warmup=20), np.random.default_rng(0)).run(xt, yt)
    space = PathSpace(sn.genotype)
    cache = {}

    def fit(p):
        key = path_str(p)
        if key not in cache:
            cache[key] = evaluate_subnet(sn, p, xv, yv)
        return cache[key]

    budget = int(0.75 * space.flops((S,) * 4))
    oracle = exhaustive_best(space, fit, budget)
    res = evolutionary_search(space, SearchConfig(budget, population_size=12, topk=4, seed=0), fit)
    assert res.best.key == oracle[0].key
    assert res.best.fitness > 0.2


def test_supernet_template_counts():
    g = supernet_template(preset("toy"), [2, 1, 1])
    assert [len(s.cells) for s in g.stages] == [2, 1, 1]
    assert isinstance(Supernet(g, np.random.default_rng(0)).num_cells, int)
    assert count_flops(g.with_cells("IIII")).total_macs == PathSpace(g).flops("IIII")
