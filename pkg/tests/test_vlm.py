import math

import numpy as np
import pytest

from vlprompt import tensor as T
from vlprompt.exceptions import (ConfigError, CorruptionError, FormatError, FrozenError, LengthError,
                                 OODPurityError, VocabError)
from vlprompt.nn import LMConfig, VEConfig
from vlprompt.selftest import tiny_model
from vlprompt.synth import Shift, apply_shift, render
from vlprompt.vlm import (CorpusConfig, OptConfig, SoftSeg, TextSeg, Tokenizer, VisualSeg, desk_configs,
                          dumps, load, loads, pretrain, save)


def _img(seed=0, side=16):
    return render(seed % 48, side, seed).pixels


def test_tokenizer_round_trip():
    tok = Tokenizer()
    assert len(tok) == 56
    assert tok.decode(tok.encode("this is a red_circle")) == ["this", "is", "a", "red_circle"]
    with pytest.raises(VocabError):
        tok.id("dog")


def test_assemble_lengths(tiny):
    with pytest.raises(LengthError):
        tiny.assemble([])
    assert tiny.assemble([TextSeg([4, 5, 6])]).shape == (3, 8)
    vis = VisualSeg(tiny.visual_tokens(_img()).data)
    assert tiny.assemble([vis, TextSeg([4, 5, 6])]).shape == (7, 8)
    assert tiny.assemble([SoftSeg(np.zeros((2, 8))), vis]).shape == (6, 8)


def test_assemble_overlength_lists_segments(tiny):
    with pytest.raises(LengthError, match="TextSeg"):
        tiny.assemble([TextSeg([4] * 70)])


def test_uniform_lm_scores_log_one_over_v():
    m = tiny_model(0)
    m.params["lm.head.w"].data[:] = 0.0
    m.freeze()
    score = m.score_label([m.bos_segment()], 7)
    assert abs(score - math.log(1 / 56)) < 1e-12


def test_two_token_label_is_sum_of_steps(tiny):
    prefix = [tiny.bos_segment(), VisualSeg(tiny.visual_tokens(_img()).data), tiny.query_segment()]
    label = [20, 31]
    emb = tiny.assemble(prefix + [TextSeg([20])])
    with T.no_grad():
        lp = T.log_softmax_rows(tiny.logits(emb)).data
    n = emb.shape[0]
    expect = lp[n - 2, 20] + lp[n - 1, 31]
    assert abs(tiny.score_label(prefix, label) - expect) < 1e-12
    assert tiny.score_label(prefix, label) <= tiny.score_label(prefix, [20]) <= 0


def test_score_ignores_what_follows(tiny):
    prefix = [tiny.bos_segment(), tiny.query_segment()]
    n = tiny.assemble(prefix).shape[0]
    for suffix in ([12], [12, 40, 41]):
        with T.no_grad():
            lp = T.log_softmax_rows(tiny.logits(tiny.assemble(prefix + [TextSeg([30] + suffix)]))).data
        assert lp[n - 1, 30] == tiny.score_label(prefix, [30])


def test_unknown_label_is_vocab_error(tiny):
    with pytest.raises(VocabError):
        tiny.score_label([tiny.bos_segment()], 48)
    with pytest.raises(VocabError):
        tiny.score_label([tiny.bos_segment()], [999])


def test_classify_singleton_and_permutation(tiny):
    img = _img(3)
    query = [tiny.query_segment()]
    assert tiny.classify([], img, query, [17]) == 17
    rng = np.random.default_rng(0)
    for _ in range(20):
        labels = list(rng.choice(48, size=6, replace=False))
        first = tiny.classify([], img, query, labels)
        assert tiny.classify([], img, query, labels[::-1]) == first


def test_scoring_needs_frozen_model():
    m = tiny_model(0)
    with pytest.raises(FrozenError):
        m.classify([], _img(), [m.query_segment()], [1, 2])


def test_checkpoint_round_trip(tiny, tmp_path):
    path = tmp_path / "m.vlmc"
    save(tiny, path)
    back = load(path)
    assert back.digest() == tiny.digest() and back.frozen
    assert dumps(back) == path.read_bytes()
    buf = path.read_bytes()
    assert buf[:4] == b"VLMC"


def test_checkpoint_corruption_detected(tiny):
    buf = bytearray(dumps(tiny))
    buf[200] ^= 0x01
    with pytest.raises(CorruptionError):
        loads(bytes(buf))
    with pytest.raises(FormatError):
        loads(b"XXXX" + bytes(buf[4:]))
    with pytest.raises(Exception):
        loads(bytes(buf[:100]))


def test_checkpoint_config_mismatch(tiny):
    with pytest.raises(ConfigError):
        loads(dumps(tiny), lm_cfg=LMConfig(vocab_size=56, d_model=16, n_heads=2, n_layers=1, max_seq_len=64))


def _small_run(epochs):
    tok = Tokenizer()
    lm = LMConfig(vocab_size=len(tok), d_model=8, n_layers=1, n_heads=2, max_seq_len=64)
    m = __import__("vlprompt").VLModel.create(0, lm, VEConfig(d_model=8, channels=[2, 3], kernel=3))
    before = m.digest()
    samples = [render(c, 32, i) for c in range(48) for i in range(1)]
    pretrain(m, CorpusConfig(n_per_class=1, pack_len=48), OptConfig(optimizer="adam", lr=1e-2, epochs=epochs,
                                                                   batch_size=8), samples=samples, eval_docs=4)
    return before, m


def test_pretrain_zero_epochs_is_identity():
    before, m = _small_run(0)
    assert m.digest() == before


def test_pretrain_is_deterministic():
    _, a = _small_run(1)
    _, b = _small_run(1)
    assert a.digest() == b.digest()
    assert a.meta["pretrain"]["loss"][0] < math.log(56) + 1


def test_pretrain_rejects_shifted_images():
    m = tiny_model(0)
    bad = [apply_shift(render(0, 32, 0), Shift("sketch"), 0)]
    with pytest.raises(OODPurityError):
        pretrain(m, CorpusConfig(n_per_class=1), OptConfig(epochs=1), samples=bad)


def test_pretrain_refuses_frozen_model(tiny):
    with pytest.raises(FrozenError):
        pretrain(tiny, CorpusConfig(n_per_class=1), OptConfig(epochs=0))


def test_desk_config_overrides():
    lm, ve, cc, oc = desk_configs({"opt": {"epochs": 2}, "ve": {"kernel": 3}})
    assert oc.epochs == 2 and oc.optimizer == "adam" and ve.kernel == 3 and ve.d_model == lm.d_model
    with pytest.raises(ConfigError):
        desk_configs({"model": {}})
    with pytest.raises(ConfigError):
        desk_configs({"opt": {"schedule": "step"}})
