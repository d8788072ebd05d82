import numpy as np
import pytest

import oracles
from conftest import random_model
from hstory import decoder, numerics as nx
from hstory.decoder import (CheckpointError, ModelParameters, load_checkpoint, project_features,
                            save_checkpoint, sentence_pass, story_logits, word_logits)
from hstory.numerics import Tensor


def zeroed(params):
    for t in params.tensors.values():
        t.data[...] = 0.0
    return params


# -------------------------------------------------------------- checkpoints


def test_checkpoint_layout(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, {"a": np.array([1.0, 2.0]), "b.c": np.zeros((1, 2, 1))})
    raw = p.read_bytes()
    assert raw.startswith(b"CKPT1\na 2\nb.c 1 2 1\n\n")
    assert raw[-32:] == np.array([1.0, 2.0, 0.0, 0.0], "<f8").tobytes()
    got = load_checkpoint(p)
    assert list(got) == ["a", "b.c"] and got["b.c"].shape == (1, 2, 1)


@pytest.mark.parametrize("blob,msg", [
    (b"CKPT2\n\n", "magic"),
    (b"CKPT1\na 2\n", "blank line"),
    (b"CKPT1\na x\n\n", "manifest"),
    (b"CKPT1\na 2\n\n" + bytes(8), "truncated in tensor 'a'"),
    (b"CKPT1\na 1\n\n" + bytes(9), "trailing"),
])
def test_checkpoint_errors(tmp_path, blob, msg):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(blob)
    with pytest.raises(CheckpointError, match=msg):
        load_checkpoint(p)


def test_checkpoint_rejects_names_with_whitespace(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "x.ckpt", {"a b": np.zeros(1)})


def test_model_roundtrip_and_validation(tmp_path):
    params = random_model(0)
    params.save(tmp_path / "m.ckpt")
    again = ModelParameters.load(tmp_path / "m.ckpt", params.words)
    for name, t in params.tensors.items():
        assert np.array_equal(t.data, again[name].data)
    arrays = params.state_dict()
    del arrays["attn.b"]
    with pytest.raises(CheckpointError, match="attn.b"):
        ModelParameters({n: Tensor(a) for n, a in arrays.items()}, params.words)
    arrays = params.state_dict()
    arrays["s0"] = np.zeros(3)
    with pytest.raises(CheckpointError, match="'s0' has shape"):
        ModelParameters({n: Tensor(a) for n, a in arrays.items()}, params.words)


def test_unique_parameter_names_cover_every_group():
    names = set(random_model(1).tensors)
    for group in ("proj_raw", "W_o_s", "W_o_t", "s_lstm.W_x", "w_lstm.W_z", "attn.w_score", "s0",
                  "W_out", "b_out", "word_table"):
        assert group in names


# ----------------------------------------------------------------- visuals


def test_identity_projection_with_single_location():
    params = random_model(2, dim=3, raw_dim=3)
    params.proj_raw.data[...] = np.eye(3)
    grids = np.arange(6.0).reshape(2, 1, 3)
    b = project_features(grids, params)
    assert np.array_equal(b.per_image.data, grids)


def test_zero_grids_give_zero_bundle():
    b = project_features(np.zeros((2, 3, 3)), random_model(3))
    assert not b.per_image.data.any() and not b.full_story.data.any() and not b.image_vectors.data.any()


def test_projection_means_by_hand():
    rng = np.random.default_rng(4)
    params = random_model(4)
    grids = rng.normal(size=(2, 3, 3))
    b = project_features(grids, params)
    P = params.proj_raw.data
    rows = [[oracles.matvec(grids[t, j], P) for j in range(3)] for t in range(2)]
    assert np.allclose(b.image_vectors.data, [(r[0] + r[1] + r[2]) / 3 for r in rows], rtol=0, atol=1e-12)
    full = sum(sum(r) for r in rows) / 6
    assert np.max(np.abs(b.full_story.data - full)) <= 1e-10
    assert np.max(np.abs(b.full_story.data - b.per_image.data.reshape(-1, 4).mean(axis=0))) <= 1e-10


def test_projection_dim_mismatch():
    with pytest.raises(nx.ShapeError):
        project_features(np.zeros((2, 3, 5)), random_model(5))


# ----------------------------------------------------------- sentence layer


def count_calls(monkeypatch, name):
    calls = []
    original = getattr(decoder, name)

    def wrapped(*args, **kw):
        calls.append(1)
        return original(*args, **kw)

    monkeypatch.setattr(decoder, name, wrapped)
    return calls


def test_single_image_runs_two_sentence_steps(monkeypatch):
    params = random_model(6)
    calls = count_calls(monkeypatch, "step")
    states = sentence_pass(project_features(np.ones((1, 2, 3)), params), np.zeros((1, 4)), params)
    assert len(calls) == 2 and len(states) == 1


def test_zero_parameters_keep_hidden_state_bounded():
    params = zeroed(random_model(7))
    rng = np.random.default_rng(7)
    states = sentence_pass(project_features(rng.normal(size=(3, 2, 3)), params), rng.normal(size=(3, 4)), params)
    assert all(np.all(np.abs(s.h.data) < 1) for s in states)


def test_sentence_pass_matches_two_step_oracle():
    rng = np.random.default_rng(8)
    params = random_model(8)
    grids, sv = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 4))
    states = sentence_pass(project_features(grids, params), sv, params)
    a = params.state_dict()
    s_p = {k: a[f"s_lstm.{k}"] for k in ("W_x", "W_h", "W_z", "b")}
    per_image = [[oracles.matvec(grids[t, j], a["proj_raw"]) for j in range(3)] for t in range(2)]
    img = [sum(r) / 3 for r in per_image]
    full = (img[0] + img[1]) / 2
    h = oracles.matvec(full, a["W_o_s"]) + a["b_o_s"]
    h, c = oracles.lstm_step(s_p, a["s0"], full, h, np.zeros(4))
    for t, prev in enumerate([a["s0"], sv[0]]):
        h, c = oracles.lstm_step(s_p, prev, img[t], h, c)
        assert np.max(np.abs(states[t].h.data - h)) <= 1e-10
        assert np.max(np.abs(states[t].c.data - c)) <= 1e-10


def test_sentence_vector_count_is_checked():
    params = random_model(9)
    with pytest.raises(ValueError, match="expected 2 sentence vectors"):
        sentence_pass(project_features(np.zeros((2, 1, 3)), params), np.zeros((3, 4)), params)


# --------------------------------------------------------------- word layer


def test_single_position_calls_attention_once(monkeypatch):
    params = random_model(10)
    calls = count_calls(monkeypatch, "attend")
    out = word_logits(np.zeros(4), np.ones((2, 4)), [3], params)
    assert out.shape == (1, 6) and len(calls) == 1


def test_zero_output_head_is_uniform():
    params = random_model(11)
    params.W_out.data[...] = 0.0
    params.b_out.data[...] = 0.0
    rng = np.random.default_rng(11)
    logits = word_logits(rng.normal(size=4), rng.normal(size=(3, 4)), [2, 3, 4], params)
    assert np.allclose(nx.softmax(logits).data, 1 / 6, rtol=0, atol=1e-15)


def test_word_logits_match_exhaustive_oracle():
    rng = np.random.default_rng(12)
    params = random_model(12, vocab=4, dim=3, raw_dim=2, head_scale=2.0)
    grids, sv = rng.normal(size=(1, 2, 2)), rng.normal(size=(1, 3))
    gold = np.array([[2, 3]])
    out = story_logits(grids, sv, gold, params)
    ref = oracles.story_forward(params.state_dict(), grids, sv, gold)
    assert out[0].shape == (2, 4)
    assert np.max(np.abs(out[0].data - np.array(ref[0]))) <= 1e-10


def test_story_logits_match_oracle_with_batch_dims():
    rng = np.random.default_rng(13)
    params = random_model(13, vocab=5, dim=4, raw_dim=3)
    grids, sv = rng.normal(size=(2, 3, 2, 3)), rng.normal(size=(2, 3, 4))
    gold = rng.integers(5, size=(2, 3, 4))
    out = story_logits(grids, sv, gold, params)
    for b in range(2):
        ref = oracles.story_forward(params.state_dict(), grids[b], sv[b], gold[b])
        for t in range(3):
            assert np.max(np.abs(out[t].data[b] - np.array(ref[t]))) <= 1e-10


def test_attention_rows_sum_to_one_in_the_word_layer():
    rng = np.random.default_rng(14)
    params = random_model(14)
    _, alphas = word_logits(rng.normal(size=(2, 4)), rng.normal(size=(2, 5, 4)), rng.integers(6, size=(2, 3)),
                            params, return_alphas=True)
    assert len(alphas) == 3
    for a in alphas:
        assert np.allclose(a.data.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_out_of_vocabulary_ids_are_rejected():
    params = random_model(15)
    with pytest.raises(KeyError):
        word_logits(np.zeros(4), np.zeros((2, 4)), [6], params)


def test_summed_logits_gradient_wrt_projection():
    rng = np.random.default_rng(16)
    params = random_model(16)
    grids, sv = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 4))
    gold = rng.integers(6, size=(2, 3))

    def f():
        return sum(nx.tsum(lg) for lg in story_logits(grids, sv, gold, params))

    assert nx.gradcheck(f, [params.proj_raw]) <= 1e-4


def test_causality_of_sentence_and_word_inputs():
    rng = np.random.default_rng(17)
    params = random_model(17)
    grids, sv = rng.normal(size=(3, 2, 3)), rng.normal(size=(3, 4))
    gold = rng.integers(6, size=(3, 4))
    base = [lg.data for lg in story_logits(grids, sv, gold, params)]
    sv2 = sv.copy()
    sv2[0] += 1.0
    moved = [lg.data for lg in story_logits(grids, sv2, gold, params)]
    assert np.array_equal(moved[0], base[0])
    assert not np.array_equal(moved[1], base[1]) and not np.array_equal(moved[2], base[2])
    gold2 = gold.copy()
    gold2[1, 1] = (gold2[1, 1] + 1) % 6
    moved = [lg.data for lg in story_logits(grids, sv, gold2, params)]
    assert np.array_equal(moved[0], base[0]) and np.array_equal(moved[2], base[2])
    assert np.array_equal(moved[1][:2], base[1][:2])
    assert not np.array_equal(moved[1][2], base[1][2])


def test_load_invents_sentence_names_when_missing(tmp_path):
    rng = np.random.default_rng(18)
    params = random_model(18)
    tensors = dict(params.tensors)
    tensors["sentence_table"] = Tensor(rng.normal(size=(2, 4)))
    ModelParameters(tensors, params.words, ["a b", "c"]).save(tmp_path / "m.ckpt")
    loaded = ModelParameters.load(tmp_path / "m.ckpt", params.words)
    assert loaded.sentences == ["<sentence 0>", "<sentence 1>"]
    assert ModelParameters.load(tmp_path / "m.ckpt", params.words, ["a b", "c"]).sentence_index["c"] == 1
