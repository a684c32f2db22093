import numpy as np
import pytest
from sklearn.base import clone

from vlprompt.adapt import (EnsembleSpec, InContextClassifier, KNNClassifier, LinearProbe, PromptEnsemble,
                            PromptLearner, TrainConfig, ZeroShotClassifier, co_prol_train, dumps_prompt,
                            ensemble_classify, ensemble_scores, icl_random, icl_rice, init_prompt,
                            knn_classify, loads_prompt, man_prol_train, prol_classify, prol_train,
                            prompt_scores, rice_indices, robust_prol_classify, robust_prol_train,
                            rpol_ss_train, zero_shot_classify)
from vlprompt.adapt import prompts as prompts_mod
from vlprompt.adapt._common import cosine_similarity, mean_features, visual_tokens
from vlprompt.adapt.prompts import _Prompt, slot_tokens
from vlprompt.exceptions import ConfigError, DivergenceError, FrozenError, InputError
from vlprompt.selftest import _knn_reference, tiny_model
from vlprompt.synth import SupportSet, build_support, render
from vlprompt.vlm import TextSeg, VisualSeg

CLASSES = [3, 11, 20, 41]
FAST = dict(epochs=2, batch_size=4, lr=0.1)


@pytest.fixture()
def support():
    return build_support(CLASSES, seed=0, per_class=3)


def _queries(n=6, seed=50):
    return np.stack([render(CLASSES[i % 4], 32, seed + i).pixels for i in range(n)])


# ------------------------------------------------------------ KNN / zero-shot / probe

def test_knn_identical_query_k1(tiny, support):
    for i in (0, 5, 11):
        assert knn_classify(support, tiny, support.samples[i].pixels, K=1) == support.labels[i]


def test_knn_full_tie_goes_to_lowest_class(tiny):
    img = render(0, 32, 0).pixels
    est = KNNClassifier(tiny, n_neighbors=4).fit(np.stack([img] * 4), [20, 20, 7, 7])
    assert est.predict(img[None])[0] == 7


def test_knn_matches_sort_oracle(tiny):
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 5, size=40)
    pix = np.stack([render(int(c), 32, 100 + i).pixels for i, c in enumerate(labels)])
    queries = np.stack([render(int(rng.integers(0, 5)), 32, 500 + i).pixels for i in range(20)])
    est = KNNClassifier(tiny, n_neighbors=8).fit(pix, labels)
    sims = cosine_similarity(mean_features(tiny, queries), mean_features(tiny, pix))
    assert list(est.predict(queries)) == [_knn_reference(s, labels, 8) for s in sims]


def test_knn_errors(tiny):
    with pytest.raises(InputError):
        knn_classify(SupportSet([], []), tiny, render(0, 32, 0).pixels)


def test_zero_shot_is_template_classify(tiny):
    q = _queries(4)
    labels = [41, 3, 11]
    zs = ZeroShotClassifier(tiny).fit(None, labels)
    for img, pred in zip(q, zs.predict(q)):
        assert pred == tiny.classify([], img, [tiny.query_segment()], labels)
        assert pred == zero_shot_classify(tiny, img, labels[::-1])


def test_linear_probe_separable_toy():
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal(-3, 1, size=(20, 2)), rng.normal(3, 1, size=(20, 2))])
    y = np.array([4] * 20 + [9] * 20)
    probe = LinearProbe().fit(X, y)
    assert probe.score(X, y) == 1.0
    assert list(probe.classes_) == [4, 9]


def test_linear_probe_zero_iterations_predicts_lowest():
    X = np.random.default_rng(1).normal(size=(6, 3))
    probe = LinearProbe(max_iter=0).fit(X, [5, 5, 2, 2, 8, 8])
    assert not probe.coef_.any() and set(probe.predict(X)) == {2}


def test_linear_probe_missing_class(tiny, support):
    with pytest.raises(InputError):
        LinearProbe(tiny).fit(support, classes=[3, 11, 20, 41, 42])


def test_estimators_clone_and_params(tiny):
    est = PromptLearner(tiny, variant="robust", n_context=6)
    again = clone(est)
    assert again.get_params()["variant"] == "robust" and again.get_params()["n_context"] == 6


def test_unfrozen_model_is_rejected(support):
    with pytest.raises(FrozenError):
        ZeroShotClassifier(tiny_model(0)).fit(support)


# ------------------------------------------------------------ in-context learning

def test_icl_random_selection(tiny, support):
    a, b = icl_random(support, tiny, K=4, seed=3), icl_random(support, tiny, K=4, seed=3)
    assert [s.ids for s in a if isinstance(s, TextSeg)] == [s.ids for s in b if isinstance(s, TextSeg)]
    assert sum(len(s) for s in a) == 4 * (4 + 5)
    with pytest.raises(InputError):
        icl_random(support, tiny, K=13)
    est = InContextClassifier(tiny, "random", n_shots=12).fit(support)
    assert sorted(est.demonstrations(_queries(1))[0]) == list(range(12))


def test_icl_rice_picks_the_query_itself_first(tiny, support):
    est = InContextClassifier(tiny, "rice", n_shots=4, order="descending").fit(support)
    idx = est.demonstrations(support.pixels[[7]])[0]
    assert idx[0] == 7
    asc = InContextClassifier(tiny, "rice", n_shots=4).fit(support).demonstrations(support.pixels[[7]])[0]
    assert list(asc) == list(idx[::-1])
    segs = icl_rice(support, tiny, support.samples[7].pixels, K=4)
    last_vis = [s for s in segs if isinstance(s, VisualSeg)][-1].tokens
    np.testing.assert_array_equal(last_vis, visual_tokens(tiny, support.pixels[[7]])[0])


def test_rice_orthogonal_ties_take_first_indices():
    assert list(rice_indices(np.zeros(10), 4, order="descending")) == [0, 1, 2, 3]


def test_icl_scores_match_classify(tiny, support):
    est = InContextClassifier(tiny, "rice", n_shots=4).fit(support)
    q = _queries(3)
    preds = est.predict(q)
    for img, pred in zip(q, preds):
        ctx = icl_rice(support, tiny, img, K=4)
        assert pred == tiny.classify(ctx, img, [tiny.query_segment()], CLASSES)


# ------------------------------------------------------------ prompt learning

def test_zero_epochs_keeps_init(tiny, support):
    cfg = TrainConfig(epochs=0, seed=4)
    out = prol_train(tiny, support, n_context=4, n_query=2, config=cfg)
    init = init_prompt("prol", 8, 4, 2, seed=4)
    for k, v in init.arrays().items():
        np.testing.assert_array_equal(out.arrays()[k], v)
    z = init_prompt("prol", 8, 400, 8, seed=0).context[0]
    assert abs(z.mean()) < 0.05 and abs(z.std() - 1) < 0.05


def test_training_lowers_loss_and_keeps_model(tiny, support):
    before = tiny.digest()
    out = prol_train(tiny, support, n_context=4, n_query=2, config=TrainConfig(epochs=15, batch_size=4, lr=0.1))
    assert tiny.digest() == before
    assert out.loss_curve[-1] < out.loss_curve[0]
    assert len(out.loss_curve) == 15 and np.isfinite(out.final_loss)


def test_training_is_deterministic(tiny, support):
    a = prol_train(tiny, support, 4, 2, TrainConfig(**FAST))
    b = prol_train(tiny, support, 4, 2, TrainConfig(**FAST))
    assert dumps_prompt(a) == dumps_prompt(b)


def test_man_prol_uses_template_words(tiny, support):
    out = man_prol_train(tiny, support, n_context=4, config=TrainConfig(**FAST))
    assert out.query is None and out.n_learnable_tokens == 4
    emb = _Prompt(tiny, out).embeddings(slot_tokens(tiny, support.pixels[:1], out.scales)).data
    wte = tiny.params["we.wte"].data
    np.testing.assert_array_equal(emb[0, -3:], wte[tiny.tokenizer.encode("this is a")])


def test_co_prol_starts_like_prol(tiny, support):
    co = init_prompt("co_prol", 8, 4, 2, seed=1)
    plain = init_prompt("prol", 8, 4, 2, seed=1)
    vis = slot_tokens(tiny, support.pixels, (32,))
    a = _Prompt(tiny, co).last_logits(vis).data
    b = _Prompt(tiny, plain).last_logits(vis).data
    np.testing.assert_array_equal(a, b)
    before = tiny.digest()
    co_prol_train(tiny, support, 4, 2, TrainConfig(**FAST))
    assert tiny.digest() == before


def test_robust_layout_and_token_parity(tiny, support):
    r = robust_prol_train(tiny, support, n_context=4, n_query=2, config=TrainConfig(**FAST))
    p = prol_train(tiny, support, 4, 2, TrainConfig(**FAST))
    assert [len(c) for c in r.context] == [2, 2]
    assert r.n_learnable_tokens == p.n_learnable_tokens
    with pytest.raises(ConfigError):
        robust_prol_train(tiny, support, n_context=5, n_query=2)
    pred = robust_prol_classify(tiny, r, support.samples[0].pixels, CLASSES)
    assert pred in CLASSES


def test_rpol_ss_slots_are_identical(tiny, support):
    params = rpol_ss_train(tiny, support, 24, n_context=4, n_query=2, config=TrainConfig(epochs=0))
    vis = slot_tokens(tiny, support.pixels[:2], params.scales)
    assert params.scales == (24, 24, 24)
    assert vis[0].tobytes() == vis[1].tobytes() == vis[2].tobytes()


def test_divergence_reports_epoch_and_lr(tiny, support, monkeypatch):
    real = prompts_mod._loss

    def poisoned(prompt, vis, targets):
        out = real(prompt, vis, targets)
        out.data = np.array(np.nan)
        return out

    monkeypatch.setattr(prompts_mod, "_loss", poisoned)
    with pytest.raises(DivergenceError) as info:
        prol_train(tiny, support, 4, 2, TrainConfig(epochs=3, lr=0.7))
    assert info.value.epoch == 0 and info.value.lr == 0.7


def test_prompt_classify_invariances(tiny, support):
    params = prol_train(tiny, support, 4, 2, TrainConfig(**FAST))
    img = _queries(1)[0]
    assert prol_classify(tiny, params, img, [20]) == 20
    rng = np.random.default_rng(1)
    for _ in range(10):
        labels = list(rng.choice(48, size=5, replace=False))
        assert prol_classify(tiny, params, img, labels) == prol_classify(tiny, params, img, labels[::-1])


def test_prompt_round_trip(tiny, support, tmp_path):
    for fn in (prol_train, co_prol_train, robust_prol_train):
        params = fn(tiny, support, n_context=4, n_query=2, config=TrainConfig(**FAST))
        back = loads_prompt(dumps_prompt(params))
        assert dumps_prompt(back) == dumps_prompt(params)
        assert back.loss_curve == params.loss_curve and back.variant == params.variant


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=-1)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="lbfgs")
    with pytest.raises(ConfigError):
        init_prompt("prol", 8, 4, 2, scales=(16, 32))
    with pytest.raises(ConfigError):
        init_prompt("robust", 8, 4, 2, scales=(16, 24, 24))


# ------------------------------------------------------------ ensembles

def test_ensemble_of_identical_members_matches_member(tiny, support):
    est = PromptEnsemble(tiny, "SS", n_context=4, n_query=2, same_seed=True, **FAST).fit(support)
    single = PromptLearner(tiny, "prol", 4, 2, **FAST).fit(support)
    q = _queries(6)
    np.testing.assert_array_equal(est.predict(q), single.predict(q))
    spec1 = EnsembleSpec([single.params_])
    assert [ensemble_classify(tiny, spec1, img, CLASSES) for img in q] == list(single.predict(q))


def test_ensemble_averages_member_scores(tiny, support):
    est = PromptEnsemble(tiny, "SS", n_context=4, n_query=2, **FAST).fit(support)
    q = _queries(4)
    per = [prompt_scores(tiny, m, q, CLASSES) for m in est.spec_.members]
    expect = (per[0] + per[1] + per[2]) / 3
    np.testing.assert_allclose(ensemble_scores(tiny, est.spec_, q, CLASSES), expect, atol=1e-12)
    assert [m.config["seed"] for m in est.spec_.members] == [0, 1, 2]


def test_ensemble_spec_validation(tiny):
    a = init_prompt("prol", 8, 4, 2, scales=(16,))
    b = init_prompt("prol", 8, 4, 2, scales=(32,))
    with pytest.raises(ConfigError):
        EnsembleSpec([a, b], "SS")
    with pytest.raises(ConfigError):
        EnsembleSpec([a, b], "MS")
    with pytest.raises(InputError):
        EnsembleSpec([], "SS")


def test_score_reads_labels_from_samples(tiny, support):
    clf = ZeroShotClassifier(tiny).fit(support)
    samples = support.samples
    y = [s.label for s in samples]
    expected = np.mean(clf.predict([s.pixels for s in samples]) == np.array(y))
    assert clf.score(samples) == clf.score([s.pixels for s in samples], y) == expected
