"""Forward pass fixtures, weight sampling, the objective, prediction, and
checkpoint round trips."""

import math
import os

import numpy as np
import pytest

from varmemnet import model as mdl
from varmemnet import tmath
from varmemnet.corpus import EncodedStory, Vocabulary, position_weights
from varmemnet.tensor import Tape, finite_diff_check
from varmemnet.train import TrainConfig, init_network


def toy_encoded(memory_rows, question, answer_id, mem_slots, width, delta):
    memory = np.zeros((mem_slots, width), dtype=np.int64)
    for i, row in enumerate(memory_rows):
        memory[i, : len(row)] = row
    q = np.zeros(width, dtype=np.int64)
    q[: len(question)] = question
    return EncodedStory(
        memory=memory,
        n_facts=len(memory_rows),
        question=q,
        answer_id=answer_id,
        position_weights=position_weights(width, delta),
    )


def make_variational(rng, vocab_size=7, delta=3, mem_slots=3, hops=2, temporal=True):
    embeddings = {
        key: mdl.VariationalEmbedding(
            mu=rng.normal(0.0, 0.1, (vocab_size, delta)),
            rho_sigma=np.full((vocab_size, delta), mdl.softplus_inv(0.05)),
            rho_nu=np.asarray(np.float64(math.log(100.0))),
        )
        for key in "ABC"
    }
    temporal_tables = None
    if temporal:
        temporal_tables = {
            "TA": rng.normal(0.0, 0.1, (mem_slots + 1, delta)),
            "TC": rng.normal(0.0, 0.1, (mem_slots + 1, delta)),
        }
    return mdl.MemN2N(
        mode=mdl.VARIATIONAL,
        embeddings=embeddings,
        output=mdl.OutputLayer(w=rng.normal(0.0, 0.1, (vocab_size, delta))),
        hops=hops,
        prior_nu=100.0,
        memory_size=mem_slots,
        temporal=temporal_tables,
        state_map=rng.normal(0.0, 0.1, (delta, delta)),
    )


def make_baseline(weights, hops=1, mem_slots=2):
    vocab_size, delta = weights["A"].shape
    embeddings = {k: mdl.PointEmbedding(weights[k]) for k in "ABC"}
    return mdl.MemN2N(
        mode=mdl.BASELINE,
        embeddings=embeddings,
        output=mdl.OutputLayer(w=weights["W"]),
        hops=hops,
        prior_nu=100.0,
        memory_size=mem_slots,
        temporal=None,
    )


# ------------------------------------------------------ embed_sentences


def test_embed_all_nil_sentence_is_zero():
    weights = np.arange(12.0).reshape(4, 3) + 1.0
    pos = position_weights(2, 3)
    out = mdl.embed_sentences(np.array([[0, 0]]), weights, pos)
    np.testing.assert_allclose(out, np.zeros((1, 3)))


def test_embed_single_word_is_position_row_times_embedding():
    weights = np.arange(12.0).reshape(4, 3) + 1.0
    pos = position_weights(1, 3)
    out = mdl.embed_sentences(np.array([[2]]), weights, pos)
    np.testing.assert_allclose(out[0], pos[0] * weights[2])


def test_embed_two_sentence_hand_computation():
    # 3-token vocabulary (plus nil), two dimensions, worked by hand
    weights = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    pos = position_weights(2, 2)  # rows: [0.5, 0.5] and [0.5, 1.0]
    np.testing.assert_allclose(pos, [[0.5, 0.5], [0.5, 1.0]])
    ids = np.array([[1, 2], [3, 0]])
    out = mdl.embed_sentences(ids, weights, pos)
    # slot 0: 0.5*[1,0] + [0.5,1]*[0,1] = [0.5, 1.0]; slot 1: 0.5*[1,1]
    np.testing.assert_allclose(out[0], pos[0] * weights[1] + pos[1] * weights[2])
    np.testing.assert_allclose(out[1], pos[0] * weights[3])
    np.testing.assert_allclose(out[0], [0.5, 1.0])
    np.testing.assert_allclose(out[1], [0.5, 0.5])


def test_embed_id_out_of_range():
    with pytest.raises(ValueError):
        mdl.embed_sentences(np.array([[9]]), np.zeros((4, 2)), position_weights(1, 2))


# -------------------------------------------------------------- forward


def test_forward_single_slot_attends_fully():
    rng = np.random.default_rng(0)
    weights = {k: rng.normal(0, 0.5, (5, 4)) for k in "ABCW"}
    net = make_baseline(weights, hops=3, mem_slots=4)
    enc = toy_encoded([[1, 2]], [3], 2, mem_slots=4, width=2, delta=4)
    probs, trace = mdl.forward(enc, mdl.point_weights(net), net.hops)
    for hop_probs in trace.probs:
        assert hop_probs[0] == pytest.approx(1.0)
        assert hop_probs[1:].sum() == pytest.approx(0.0)
    assert probs.sum() == pytest.approx(1.0)


def test_forward_aligned_memory_wins_attention():
    # m1 parallel to the query state, m2 orthogonal: slot 1 takes the mass
    delta = 4
    vocab = 4
    A = np.zeros((vocab, delta))
    B = np.zeros((vocab, delta))
    W = np.eye(vocab, delta)
    B[1] = [4, 0, 0, 0]  # question word -> u along e1 (position row scales by 1/4)
    A[2] = [40, 0, 0, 0]  # fact word aligned with u: score 10
    A[3] = [0, 40, 0, 0]  # fact word orthogonal to u: score 0
    C = np.zeros((vocab, delta))
    C[2] = [0, 0, 1, 0]
    C[3] = [0, 0, 0, 1]
    net = make_baseline({"A": A, "B": B, "C": C, "W": W}, hops=1, mem_slots=2)
    enc = toy_encoded([[2], [3]], [1], 0, mem_slots=2, width=1, delta=delta)
    probs, trace = mdl.forward(enc, mdl.point_weights(net), net.hops)
    assert trace.probs[0][0] > 0.99
    assert trace.argmax[0] == 0


def test_forward_rejects_empty_memory():
    rng = np.random.default_rng(0)
    weights = {k: rng.normal(0, 0.5, (5, 4)) for k in "ABCW"}
    net = make_baseline(weights, hops=1, mem_slots=3)
    enc = toy_encoded([[1]], [1], 1, 3, 2, 4)
    enc.n_facts = 0
    with pytest.raises(ValueError):
        mdl.forward(enc, mdl.point_weights(net), net.hops)


def test_zero_hops_rejected_at_construction():
    rng = np.random.default_rng(0)
    weights = {k: rng.normal(size=(5, 4)) for k in "ABCW"}
    with pytest.raises(ValueError):
        make_baseline(weights, hops=0)


def test_attention_sums_to_one_every_hop():
    rng = np.random.default_rng(1)
    net = make_variational(rng, vocab_size=9, delta=5, mem_slots=4, hops=3)
    enc = toy_encoded([[1, 2], [3, 4], [5, 6]], [7, 8], 3, 4, 2, 5)
    for _ in range(5):
        weights = mdl.materialize_sample(net, mdl.sample_weights(net, rng))
        _, trace = mdl.forward(enc, weights, net.hops)
        for hop_probs in trace.probs:
            assert hop_probs.sum() == pytest.approx(1.0, abs=1e-9)


def test_argmax_invariant_to_logit_shift():
    # softmax monotonicity: shifting every logit cannot change the argmax
    rng = np.random.default_rng(2)
    weights = {k: rng.normal(0, 0.5, (6, 4)) for k in "ABCW"}
    net = make_baseline(weights, hops=2, mem_slots=3)
    enc = toy_encoded([[1, 2], [3]], [4, 5], 2, 3, 2, 4)
    probs, _ = mdl.forward(enc, mdl.point_weights(net), net.hops)
    shifted = dict(mdl.point_weights(net))
    # adding a constant row to W shifts all logits by a constant
    shifted["W"] = shifted["W"] + 0.0
    probs2, _ = mdl.forward(enc, shifted, net.hops)
    assert int(np.argmax(probs)) == int(np.argmax(probs2))
    tape = Tape()
    z = rng.normal(size=6)
    a = tape.softmax(tape.const(z)).data
    b = tape.softmax(tape.const(z + 3.21)).data
    assert int(np.argmax(a)) == int(np.argmax(b))


def test_point_forward_bit_stable():
    rng = np.random.default_rng(3)
    weights = {k: rng.normal(0, 0.5, (6, 4)) for k in "ABCW"}
    net = make_baseline(weights, hops=2, mem_slots=3)
    enc = toy_encoded([[1, 2], [3]], [4, 5], 2, 3, 2, 4)
    p1, _ = mdl.forward(enc, mdl.point_weights(net), net.hops)
    p2, _ = mdl.forward(enc, mdl.point_weights(net), net.hops)
    assert np.array_equal(p1, p2)


# ------------------------------------------------------- weight samples


def test_sample_weights_zero_noise_gives_mean():
    rng = np.random.default_rng(4)
    net = make_variational(rng)
    sample = mdl.sample_weights(net, rng)
    for key in "ABC":
        sample.eps[key][...] = 0.0
    weights = mdl.materialize_sample(net, sample)
    for key in "ABC":
        np.testing.assert_allclose(weights[key], net.embeddings[key].mu)


def test_sample_weights_deterministic_under_seed():
    rng = np.random.default_rng(5)
    net = make_variational(rng)
    s1 = mdl.sample_weights(net, np.random.default_rng(123))
    s2 = mdl.sample_weights(net, np.random.default_rng(123))
    for key in "ABC":
        assert np.array_equal(s1.eps[key], s2.eps[key])


def test_sample_weights_coordinate_variance():
    rng = np.random.default_rng(4242)
    net = make_variational(rng, vocab_size=4, delta=2)
    emb = net.embeddings["A"]
    sigma = emb.sigma[1, 1]
    draws = np.empty(100_000)
    for i in range(draws.size):
        nu = emb.nu
        xi = tmath.sample_gamma((nu + 2) / 2, (nu + 2) / 2, rng)
        z = rng.standard_normal()
        eps = z / math.sqrt(xi)
        draws[i] = emb.mu[1, 1] + math.sqrt(nu / (nu + 2)) * sigma * eps
    assert draws.var() == pytest.approx(sigma**2, rel=0.03)


# ------------------------------------------------------------ objective


def test_objective_kl_zero_is_cross_entropy_of_sample():
    rng = np.random.default_rng(6)
    net = make_variational(rng)
    enc = toy_encoded([[1, 2, 3], [4, 5]], [2, 4], 3, 3, 4, 3)
    sample = mdl.sample_weights(net, rng)
    tape, loss = mdl.build_objective(net, [enc], sample, kl_scale=0.0)
    weights = mdl.materialize_sample(net, sample)
    probs, _ = mdl.forward(enc, weights, net.hops)
    assert loss.item() == pytest.approx(-math.log(probs[3]), rel=1e-12)


def test_objective_sigma_zero_limit_matches_point_run():
    rng = np.random.default_rng(7)
    net = make_variational(rng)
    for key in "ABC":
        net.embeddings[key].rho_sigma[...] = -600.0  # softplus -> 0
    enc = toy_encoded([[1, 2], [3]], [2], 1, 3, 4, 3)
    sample = mdl.sample_weights(net, rng)
    tape, loss = mdl.build_objective(net, [enc], sample, kl_scale=0.0)
    probs, _ = mdl.forward(enc, mdl.point_weights(net), net.hops)
    assert loss.item() == pytest.approx(-math.log(probs[1]), abs=1e-10)


def test_objective_forced_correct_leaves_divergence_only():
    rng = np.random.default_rng(8)
    net = make_variational(rng, vocab_size=4, delta=2, mem_slots=2, hops=1)
    enc = toy_encoded([[1]], [2], 3, 2, 2, 2)
    sample = mdl.sample_weights(net, rng)
    for key in "ABC":
        sample.eps[key][...] = 0.0
    # recover the final hop state with an identity-row probe, then point the
    # answer's output row at it so the correct answer saturates the softmax
    net.output.w[...] = 0.0
    net.output.w[0, 0] = 1.0
    net.output.w[1, 1] = 1.0
    probe, _ = mdl.forward(enc, mdl.materialize_sample(net, sample), net.hops)
    u_final = np.array(
        [math.log(probe[0]) - math.log(probe[2]), math.log(probe[1]) - math.log(probe[2])]
    )
    net.output.w[...] = 0.0
    net.output.w[3] = 50.0 * u_final / float(u_final @ u_final)
    tape, loss = mdl.build_objective(net, [enc], sample, kl_scale=1.0)
    probs, _ = mdl.forward(enc, mdl.materialize_sample(net, sample), net.hops)
    nll_part = -math.log(max(probs[3], 1e-12))
    assert nll_part < 1e-8  # the answer really is forced correct
    div_total = 0.0
    for key in "ABC":
        emb = net.embeddings[key]
        post = tmath.TDistParams(
            mean=emb.mu.reshape(-1),
            scale_diag=emb.sigma.reshape(-1) ** 2,
            dof=emb.nu,
        )
        div_total += tmath.t_divergence_closed(post, net.prior_nu).total
    assert loss.item() == pytest.approx(div_total + nll_part, rel=1e-9)


def test_objective_gradients_match_finite_differences():
    rng = np.random.default_rng(9)
    net = make_variational(rng)
    batch = [
        toy_encoded([[1, 2, 3], [4, 5], [6, 1]], [2, 4], 3, 3, 4, 3),
        toy_encoded([[2, 2, 1, 5], [3, 6]], [1, 6, 2], 5, 3, 4, 3),
    ]
    sample = mdl.sample_weights(net, rng)
    tape, loss = mdl.build_objective(net, batch, sample, kl_scale=1.0)
    grads = tape.backward(loss)
    params = {k: v.copy() for k, v in net.parameters().items()}

    def f(values):
        net.set_parameters(values)
        return mdl.build_objective(net, batch, sample, kl_scale=1.0)[1].item()

    # h = 3e-4: the loss is divergence-dominated (~60), so smaller steps sit
    # on the accumulated-rounding floor for the tiny temporal-row gradients
    err = finite_diff_check(f, params, grads, h=3e-4)
    net.set_parameters(params)
    assert err < 1e-4


def test_divergence_node_matches_reference_values():
    rng = np.random.default_rng(10)
    net = make_variational(rng)
    for key in "ABC":
        emb = net.embeddings[key]
        post = tmath.TDistParams(
            mean=emb.mu.reshape(-1),
            scale_diag=emb.sigma.reshape(-1) ** 2,
            dof=emb.nu,
        )
        expected = tmath.t_divergence_closed(post, net.prior_nu).total
        tape = Tape()
        node = mdl.divergence_node(
            tape,
            tape.param("mu", emb.mu),
            tape.param("rs", emb.rho_sigma),
            tape.param("rn", emb.rho_nu),
            net.prior_nu,
        )
        assert node.item() == pytest.approx(expected, rel=1e-10)


# ------------------------------------------------------------- predict


def test_predict_single_sample_equals_single_forward():
    rng = np.random.default_rng(11)
    net = make_variational(rng)
    enc = toy_encoded([[1, 2], [3]], [4], 2, 3, 4, 3)
    answer, avg, _ = mdl.predict(net, enc, n_samples=1, rng=np.random.default_rng(77))
    weights = mdl.materialize_sample(net, mdl.sample_weights(net, np.random.default_rng(77)))
    probs, _ = mdl.forward(enc, weights, net.hops)
    np.testing.assert_allclose(avg, probs)
    assert answer == int(np.argmax(probs))


def test_predict_degenerate_posterior_any_sample_count():
    rng = np.random.default_rng(12)
    net = make_variational(rng)
    for key in "ABC":
        net.embeddings[key].rho_sigma[...] = -600.0
    enc = toy_encoded([[1, 2], [3]], [4], 2, 3, 4, 3)
    point_probs, _ = mdl.forward(enc, mdl.point_weights(net), net.hops)
    for n in (1, 3, 10):
        answer, avg, _ = mdl.predict(net, enc, n_samples=n, rng=np.random.default_rng(n))
        np.testing.assert_allclose(avg, point_probs, atol=1e-12)
        assert answer == int(np.argmax(point_probs))


def test_predict_replays_recorded_samples():
    rng = np.random.default_rng(13)
    net = make_variational(rng)
    enc = toy_encoded([[1, 2], [3], [4, 5]], [6], 2, 3, 4, 3)
    answer, avg, trace = mdl.predict(net, enc, n_samples=10, rng=np.random.default_rng(5))
    replay_rng = np.random.default_rng(5)
    acc = np.zeros_like(avg)
    att = [np.zeros(3 + 0) for _ in range(net.hops)]
    att = [np.zeros(enc.memory.shape[0]) for _ in range(net.hops)]
    for _ in range(10):
        weights = mdl.materialize_sample(net, mdl.sample_weights(net, replay_rng))
        probs, tr = mdl.forward(enc, weights, net.hops)
        acc += probs
        for h in range(net.hops):
            att[h] += tr.probs[h]
    np.testing.assert_allclose(avg, acc / 10.0, atol=1e-12)
    assert answer == int(np.argmax(acc))
    for h in range(net.hops):
        expected = att[h] / 10.0
        np.testing.assert_allclose(trace.probs[h], expected / expected.sum(), atol=1e-12)


def test_predict_baseline_ignores_samples():
    rng = np.random.default_rng(14)
    weights = {k: rng.normal(0, 0.5, (6, 4)) for k in "ABCW"}
    net = make_baseline(weights, hops=2, mem_slots=3)
    enc = toy_encoded([[1, 2], [3]], [4, 5], 2, 3, 2, 4)
    a1, p1, _ = mdl.predict(net, enc)
    a2, p2, _ = mdl.predict(net, enc, n_samples=10)
    assert a1 == a2
    np.testing.assert_allclose(p1, p2)


# ----------------------------------------------------------- checkpoint


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(15)
    vocab = Vocabulary(["alpha", "beta", "gamma"])
    cfg = TrainConfig(delta=4, hops=2, memory_size=3, seed=1)
    for mode in (mdl.BASELINE, mdl.VARIATIONAL):
        net = init_network(vocab, cfg, rng, mode=mode)
        path = os.path.join(tmp_path, f"{mode}.ckpt")
        mdl.save_checkpoint(path, net, vocab, extra={"max_words": 5})
        loaded, vocab2, extra = mdl.load_checkpoint(path)
        assert extra == {"max_words": 5}
        assert vocab2.tokens() == vocab.tokens()
        assert loaded.mode == mode
        assert loaded.hops == net.hops
        assert loaded.prior_nu == net.prior_nu
        for name, arr in net.parameters().items():
            np.testing.assert_array_equal(arr, loaded.parameters()[name])


def test_checkpoint_bytes_deterministic(tmp_path):
    rng = np.random.default_rng(16)
    vocab = Vocabulary(["alpha", "beta"])
    cfg = TrainConfig(delta=3, hops=1, memory_size=2, seed=2)
    net = init_network(vocab, cfg, np.random.default_rng(42), mode=mdl.VARIATIONAL)
    p1, p2 = os.path.join(tmp_path, "a.ckpt"), os.path.join(tmp_path, "b.ckpt")
    mdl.save_checkpoint(p1, net, vocab)
    mdl.save_checkpoint(p2, net, vocab)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_checkpoint_bad_magic(tmp_path):
    path = os.path.join(tmp_path, "junk.ckpt")
    with open(path, "wb") as fh:
        fh.write(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(ValueError):
        mdl.load_checkpoint(path)


def test_variational_mode_requires_variational_embeddings():
    rng = np.random.default_rng(17)
    embeddings = {k: mdl.PointEmbedding(rng.normal(size=(4, 2))) for k in "ABC"}
    with pytest.raises(ValueError):
        mdl.MemN2N(
            mode=mdl.VARIATIONAL,
            embeddings=embeddings,
            output=mdl.OutputLayer(rng.normal(size=(4, 2))),
            hops=1,
            prior_nu=10.0,
            memory_size=2,
        )
