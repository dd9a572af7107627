from dataclasses import replace

import numpy as np
import pytest
from sklearn.base import clone

from listda import autodiff as ad
from listda.data import Dataset, SyntheticSpec, generate_synthetic
from listda.experiments import list_w1, synthetic_split
from listda.metrics import RankedList, evaluate
from listda.models import ensemble_adversarial_loss, dump_checkpoint
from listda.trainer import (AdversarialRanker, ConfigError, NumericalAbort, TrainConfig,
                            build_objective, init_state, joint_step, lr_at, score_lists, train)


@pytest.fixture(scope="module")
def affine_pair():
    source, target, _ = generate_synthetic(SyntheticSpec(n_lists=64, seed=0))
    return source, target


def _batch(ds, idx, labeled=True):
    x = np.stack([ds.items()[i] for i in idx])
    return (x, np.stack([ds.lists[i].labels for i in idx])) if labeled else x


def test_learning_rate_schedule():
    cfg = TrainConfig(eta_rank=0.1, eta_ad=0.2, decay_every=10)
    assert lr_at(0, cfg) == 0.1
    assert lr_at(9, cfg) == 0.1
    assert lr_at(10, cfg) == pytest.approx(0.07)
    assert lr_at(20, cfg) == pytest.approx(0.049)
    assert lr_at(10, cfg, "ad") == pytest.approx(0.14)
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


@pytest.mark.parametrize("kwargs,field", [
    ({"lam": 0.0}, "lambda"), ({"eta_ad": -1.0}, "eta_ad"), ({"mode": "both"}, "mode"),
    ({"decay_factor": 1.5}, "decay_factor"), ({"batch_size": 0}, "batch_size"),
])
def test_config_validation_names_the_field(kwargs, field):
    with pytest.raises(ConfigError) as info:
        TrainConfig(**kwargs)
    assert info.value.field == field


def test_zero_shot_allows_any_lambda_and_mapping_parses_strings():
    assert TrainConfig(mode="zero_shot", lam=0.0).lam == 0.0
    cfg = TrainConfig.from_mapping({"lambda": "0.3", "steps": "7", "attention": "true", "mode": "item_da"})
    assert (cfg.lam, cfg.steps, cfg.attention, cfg.mode) == (0.3, 7, True, "item_da")
    assert TrainConfig.from_mapping(cfg.to_mapping()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"stepz": "3"})
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"steps": "many"})


@pytest.mark.parametrize("mode", ["item_da", "list_da"])
def test_single_backward_pass_reverses_only_the_feature_gradient(mode, affine_pair):
    source, target = affine_pair
    lam = 0.37
    cfg = TrainConfig(mode=mode, lam=lam, ensemble_size=3, hidden=8, k=6, disc_hidden=5)
    state = init_state(cfg, 8)
    sb, tb = _batch(source, range(6)), _batch(target, range(5), labeled=False)
    total, _, _, p_s, p_d = build_objective(state, sb, tb, cfg)
    joint = ad.backward(total)

    # separate passes: the ranking loss alone, then the adversarial loss without reversal
    _, rank_total, _, p_r, _ = build_objective(state, sb, tb, replace(cfg, mode="zero_shot"))
    rank = ad.backward(rank_total)
    p_a, p_da = state.scorer.bind(), [d.bind() for d in state.discriminators]
    zs, zt = state.scorer.feature_map(sb[0], p_a), state.scorer.feature_map(tb, p_a)
    adv = ad.backward(ensemble_adversarial_loss(state.discriminators, zs, zt, p_da).node)
    for name in p_s:
        expected = rank.get(p_r[name], 0.0) - lam * adv.get(p_a[name], 0.0)
        assert np.allclose(joint[p_s[name]], expected, atol=1e-10), name
    for nodes, nodes_a in zip(p_d, p_da):
        for name in nodes:
            assert np.allclose(joint[nodes[name]], adv[nodes_a[name]], atol=1e-12)


def test_zero_shot_step_leaves_discriminators_untouched(affine_pair):
    source, target = affine_pair
    state = init_state(TrainConfig(mode="list_da", hidden=8, k=6), 8)
    before = dump_checkpoint({f"d{i}": d for i, d in enumerate(state.discriminators)})
    joint_step(state, _batch(source, range(4)), _batch(target, range(4), False), TrainConfig(mode="zero_shot"))
    assert dump_checkpoint({f"d{i}": d for i, d in enumerate(state.discriminators)}) == before


def test_small_lambda_approaches_zero_shot_update(affine_pair):
    source, target = affine_pair
    sb, tb = _batch(source, range(8)), _batch(target, range(8), False)

    def updated(cfg):
        state = init_state(replace(cfg, mode="list_da"), 8)
        joint_step(state, sb, tb, cfg)
        return state.scorer.params

    base = updated(TrainConfig(mode="zero_shot"))
    gaps = []
    for lam in (1e-1, 1e-3, 1e-5):
        p = updated(TrainConfig(mode="list_da", lam=lam))
        gaps.append(max(np.abs(p[k] - base[k]).max() for k in base))
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 1e-7


def test_training_is_deterministic_and_logs_every_step(affine_pair):
    source, target = affine_pair
    cfg = TrainConfig(mode="list_da", steps=15, hidden=8, k=6, seed=3)
    a, b = train(source, target, cfg), train(source, target, cfg)
    assert dump_checkpoint(a.state.modules()) == dump_checkpoint(b.state.modules())
    assert a.log_text() == b.log_text()
    assert len(a.log_text().splitlines()) == 15
    c = train(source, target, replace(cfg, seed=4))
    assert dump_checkpoint(c.state.modules()) != dump_checkpoint(a.state.modules())


def test_target_labels_are_never_read(affine_pair):
    source, target = affine_pair
    scrambled = Dataset(tuple(RankedList(l.items, np.zeros(len(l)), l.list_id) for l in target.lists),
                        target.feature_dim, domain="target")
    cfg = TrainConfig(mode="item_da", steps=5, hidden=8, k=6)
    a, b = train(source, target, cfg), train(source, scrambled, cfg)
    assert dump_checkpoint(a.state.modules()) == dump_checkpoint(b.state.modules())


def test_alignment_modes_need_target(affine_pair):
    with pytest.raises(ConfigError):
        train(affine_pair[0], None, TrainConfig(mode="list_da", steps=1))
    with pytest.raises(ValueError):
        train(affine_pair[1].unlabeled(), None, TrainConfig(mode="zero_shot", steps=1))


def test_divergence_raises_numerical_abort(affine_pair):
    source, target = affine_pair
    cfg = TrainConfig(mode="list_da", eta_rank=1e8, eta_ad=1e8, steps=50)
    with pytest.raises(NumericalAbort) as info, np.errstate(all="ignore"):
        train(source, target, cfg)
    assert info.value.step < 50


def test_variable_length_lists_are_batched_by_length(rng):
    lists = [RankedList(rng.random((n, 3)), rng.integers(0, 3, n).astype(float) + np.eye(n)[0], str(i))
             for i, n in enumerate([3, 4, 3, 5, 4, 3] * 4)]
    ds = Dataset(tuple(lists), 3)
    result = train(ds, Dataset(ds.lists, 3, domain="target"), TrainConfig(mode="list_da", steps=4, batch_size=6))
    scores = score_lists(result.state.scorer, ds.items())
    assert [s.size for s in scores] == [len(l) for l in lists]


def test_source_only_training_reaches_high_source_ndcg():
    source, _, _ = generate_synthetic(SyntheticSpec(seed=0))
    result = train(source, None, TrainConfig(mode="zero_shot", steps=2000))
    report = evaluate(score_lists(result.state.scorer, source.items()), source.lists, ["ndcg"])
    assert report.aggregate()["ndcg"] >= 0.95


def test_list_alignment_reduces_held_out_list_distance():
    spec = SyntheticSpec(shift="listwise_correlation", n_clusters=2, n_lists=256, seed=0)
    src, tgt, held_s, held_t, _ = synthetic_split(spec, 128)
    cfg = TrainConfig(mode="list_da", steps=500)
    before = list_w1(init_state(cfg, 8).scorer, held_s, held_t)
    after = list_w1(train(src, tgt, cfg).state.scorer, held_s, held_t)
    assert after < before


class TestAdversarialRanker:
    def test_params_round_trip_and_clone(self):
        est = AdversarialRanker(lam=0.3, steps=5)
        params = est.get_params()
        assert params["lam"] == 0.3 and params["disc_activation"] == "relu"
        twin = clone(est)
        assert twin.get_params() == params
        assert twin.set_params(steps=9).steps == 9

    def test_fit_predict_transform_score(self, rng):
        x = rng.random((20, 4, 5))
        y = np.floor(3 * x[..., 0])
        y[:, 0] = np.maximum(y[:, 0], 1)
        est = AdversarialRanker(mode="list_da", steps=10, hidden=8, k=3).fit(x, y, rng.random((20, 4, 5)))
        assert est.predict(x).shape == (20, 4)
        assert est.transform(x).shape == (20, 4, 3)
        assert 0 <= est.score(x, y) <= 1
        assert est.n_features_in_ == 5 and len(est.log_) == 10
        with pytest.raises(ValueError):
            est.predict(rng.random((2, 4, 6)))

    def test_unfitted_and_bad_inputs(self, rng):
        with pytest.raises(AttributeError):
            AdversarialRanker().predict(rng.random((1, 3, 2)))
        with pytest.raises(ValueError):
            AdversarialRanker(steps=1).fit(rng.random((2, 3, 2)))
        with pytest.raises(ValueError):
            AdversarialRanker(steps=1).fit(rng.random((2, 3, 2)), -np.ones((2, 3)))
