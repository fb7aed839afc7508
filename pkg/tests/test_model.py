import numpy as np
import pytest

from selrat import autodiff as ad
from selrat import data as D
from selrat import model as M


CFG = M.ModelConfig(vocab_size=30, num_classes=2, embed_dim=8, hidden_dim=6,
                    feature_dim=10)


def example(tokens, label=0, gold=None):
    return D.Example(list(tokens), label, gold)


def single_batch(tokens, label=0):
    return M.batch_of(example(tokens, label))


# --- embedding ---------------------------------------------------------------


def test_padding_token_embeds_to_zero_row():
    table = M.EmbeddingTable.init(5, 4, np.random.default_rng(0))
    out = M.embed(np.array([[D.PAD_ID]]), table)
    np.testing.assert_array_equal(out.data, np.zeros((1, 1, 4)))


def test_repeated_token_gives_identical_rows():
    table = M.EmbeddingTable.init(5, 4, np.random.default_rng(0))
    out = M.embed(np.array([[3, 3]]), table)
    assert np.array_equal(out.data[0, 0], out.data[0, 1])


def test_lookup_matches_table_rows_exactly():
    table = M.EmbeddingTable.init(5, 4, np.random.default_rng(1))
    out = M.embed(np.array([[1, 2]]), table)
    assert np.array_equal(out.data[0, 0], table.weights.data[1])
    assert np.array_equal(out.data[0, 1], table.weights.data[2])


def test_out_of_range_id_is_reported_with_position():
    table = M.EmbeddingTable.init(5, 4, np.random.default_rng(0))
    with pytest.raises(IndexError, match="id 7"):
        M.embed(np.array([[1, 7]]), table)


# --- generator ---------------------------------------------------------------


def test_zero_head_scores_half_probability_everywhere():
    gen = M.init_generator(CFG, np.random.default_rng(0))
    gen.w_head.data[:] = 0.0
    gen.b_head.data[:] = 0.0
    p, _ = M.generator_forward(single_batch([2, 3, 4]), gen)
    np.testing.assert_allclose(p.data, 0.5)


def test_default_init_starts_dense():
    cfg = M.ModelConfig(vocab_size=30, embed_dim=8, hidden_dim=6,
                        initial_selection_prob=0.8)
    gen = M.init_generator(cfg, np.random.default_rng(0))
    p, _ = M.generator_forward(single_batch([2, 3, 4]), gen)
    np.testing.assert_allclose(p.data, 0.8, atol=1e-12)


def test_padding_positions_forced_to_zero():
    gen = M.init_generator(CFG, np.random.default_rng(0))
    batch = D.make_batch([example([2, 3]), example([2, 3, 4, 5])], [0, 1])
    _, z = M.generator_forward(batch, gen)  # p = 0.5 everywhere, ties select
    assert z.data[0, 2] == 0.0 and z.data[0, 3] == 0.0
    assert (z.data[1] == 1.0).all()


def test_stochastic_masks_reproducible_by_seed():
    gen = M.init_generator(CFG, np.random.default_rng(0))
    batch = single_batch([2, 3, 4, 5, 6])
    _, a = M.generator_forward(batch, gen, stochastic=True,
                               rng=np.random.default_rng(9))
    _, b = M.generator_forward(batch, gen, stochastic=True,
                               rng=np.random.default_rng(9))
    np.testing.assert_array_equal(a.data, b.data)


def test_conditioned_generator_requires_labels():
    cfg = M.ModelConfig(vocab_size=30, embed_dim=8, hidden_dim=6,
                        class_conditioning=True)
    gen = M.init_generator(cfg, np.random.default_rng(0))
    with pytest.raises(ValueError, match="labels"):
        M.generator_forward(single_batch([2, 3]), gen)


def test_conditioned_generator_separates_labels_after_one_step():
    cfg = M.ModelConfig(vocab_size=30, embed_dim=8, hidden_dim=6,
                        class_conditioning=True)
    gen = M.init_generator(cfg, np.random.default_rng(0))
    batch = single_batch([2, 3, 4])
    # one hand-rolled gradient step so the zero head becomes label-sensitive
    p, z = M.generator_forward(batch, gen, labels=np.array([1]))
    ad.backward(ad.sum(ad.mul(p, p)))
    for t in gen.named().values():
        if t.grad is not None:
            t.data -= 0.5 * t.grad
            t.zero_grad()
    p0, _ = M.generator_forward(batch, gen, labels=np.array([0]))
    p1, _ = M.generator_forward(batch, gen, labels=np.array([1]))
    assert not np.allclose(p0.data, p1.data)


# --- classifier --------------------------------------------------------------


def test_probs_sum_to_one():
    clf = M.init_classifier(CFG, np.random.default_rng(2))
    batch = single_batch([2, 3, 4])
    _, probs = M.classifier_forward(batch, np.ones_like(batch.valid), clf)
    np.testing.assert_allclose(probs.data.sum(axis=-1), 1.0, atol=1e-9)


def test_features_are_sigmoid_bounded():
    clf = M.init_classifier(CFG, np.random.default_rng(3))
    batch = single_batch([5, 6, 7, 8])
    feat, _ = M.classifier_forward(batch, np.ones_like(batch.valid), clf)
    assert feat.data.min() >= 0.0 and feat.data.max() <= 1.0


def test_all_zero_mask_gives_input_independent_feature():
    clf = M.init_classifier(CFG, np.random.default_rng(4))
    f1, _ = M.classifier_forward(single_batch([2, 3, 4]),
                                 np.zeros((1, 3)), clf)
    f2, _ = M.classifier_forward(single_batch([9, 8, 7]),
                                 np.zeros((1, 3)), clf)
    np.testing.assert_array_equal(f1.data, f2.data)


def test_mask_length_mismatch_rejected():
    clf = M.init_classifier(CFG, np.random.default_rng(0))
    with pytest.raises(ad.ShapeError, match="classifier_forward"):
        M.classifier_forward(single_batch([2, 3, 4]), np.ones((1, 2)), clf)


@pytest.mark.parametrize("pooling", ["mean", "max"])
def test_masking_equals_zeroing_embeddings(pooling):
    # replacing unselected tokens with the padding token (whose embedding is
    # the zero row) while keeping the validity mask must give the same result
    cfg = M.ModelConfig(vocab_size=30, embed_dim=8, hidden_dim=6, pooling=pooling)
    clf = M.init_classifier(cfg, np.random.default_rng(5))
    batch = single_batch([2, 3, 4, 5])
    z = np.array([[1.0, 0.0, 1.0, 0.0]])
    feat_a, probs_a = M.classifier_forward(batch, z, clf)

    zeroed = D.make_batch([example([2, D.PAD_ID, 4, D.PAD_ID])], [0])
    zeroed.valid[:] = batch.valid
    feat_b, probs_b = M.classifier_forward(zeroed, np.ones((1, 4)), clf)
    assert np.array_equal(feat_a.data, feat_b.data)
    assert np.array_equal(probs_a.data, probs_b.data)


def test_teacher_path_equals_all_ones_path():
    clf = M.init_classifier(CFG, np.random.default_rng(6))
    batch = single_batch([2, 3, 4])
    _, probs = M.classifier_forward(batch, np.ones_like(batch.valid), clf)
    teacher_probs = M.teacher_forward(batch, clf)
    assert np.array_equal(probs.data, teacher_probs.data)


@pytest.mark.parametrize("pooling", ["mean", "max"])
def test_padded_batch_matches_per_example_forward(pooling):
    # padding must not contribute: batch of ragged examples vs one-by-one
    cfg = M.ModelConfig(vocab_size=30, embed_dim=8, hidden_dim=6, pooling=pooling)
    clf = M.init_classifier(cfg, np.random.default_rng(7))
    examples = [example([2, 3, 4, 5, 6]), example([7, 8]), example([9, 10, 11])]
    batch = D.make_batch(examples, range(3))
    feat, probs = M.classifier_forward(batch, batch.valid.copy(), clf)
    for i, e in enumerate(examples):
        single = M.batch_of(e)
        f, pr = M.classifier_forward(single, np.ones((1, len(e.tokens))), clf)
        np.testing.assert_allclose(f.data[0], feat.data[i], atol=1e-12, rtol=0)
        np.testing.assert_allclose(pr.data[0], probs.data[i], atol=1e-12, rtol=0)


# --- checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    clf = M.init_classifier(CFG, np.random.default_rng(8))
    path = tmp_path / "clf.ckpt"
    M.save_classifier(path, clf)
    again = M.load_classifier(path, CFG)
    for name, t in clf.named().items():
        assert np.array_equal(t.data, again.named()[name].data), name


def test_checkpoint_reload_preserves_forward(tmp_path):
    gen = M.init_generator(CFG, np.random.default_rng(9))
    # give the head nonzero weights so the forward is nontrivial
    gen.w_head.data[:] = np.random.default_rng(10).normal(size=gen.w_head.shape)
    path = tmp_path / "gen.ckpt"
    M.save_generator(path, gen)
    again = M.load_generator(path, CFG)
    batch = single_batch([2, 3, 4])
    p1, _ = M.generator_forward(batch, gen)
    p2, _ = M.generator_forward(batch, again)
    assert np.array_equal(p1.data, p2.data)


def test_checkpoint_rejects_other_files(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"hello world\n123\n")
    with pytest.raises(ValueError, match="not a parameter checkpoint"):
        M.load_arrays(path)
