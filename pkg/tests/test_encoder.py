import math
import random

import pytest
import torch

from crossclone.corpus import gen_synthetic
from crossclone.encoder import (
    CLS_ID,
    SEP_ID,
    UNK_ID,
    EncoderConfig,
    Vocabulary,
    build_encoder,
    cosine,
    cosine_matrix,
    encode_batch,
    encode_one,
    tokenize,
)
from crossclone.errors import ConfigError, ContractError, NumericError

from helpers import check_param_grads, reference_cosine


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary.from_programs(gen_synthetic(6, ["dA", "dB"], seed=1))


def _tiny_encoder(vocab, d_model=32, n_layers=1, dtype=torch.float64, seed=0, max_len=64):
    cfg = EncoderConfig(
        vocab_size=len(vocab), d_model=d_model, n_layers=n_layers,
        n_heads=4, max_len=max_len, dropout=0.1, seed=seed,
    )
    return build_encoder(cfg, dtype)


class TestTokenize:
    def test_framing(self, vocab):
        corpus_vocab = Vocabulary(tokens=vocab.tokens[:4] + ("1", "=", "x"))
        ids = tokenize("x = 1", corpus_vocab, max_len=16)
        assert ids[0] == CLS_ID and ids[-1] == SEP_ID
        assert ids[1:-1] == [corpus_vocab.id_of("x"), corpus_vocab.id_of("="), corpus_vocab.id_of("1")]

    def test_truncation_keeps_framing(self, vocab):
        text = " ".join("tok" for _ in range(600))
        ids = tokenize(text, vocab, max_len=512)
        assert len(ids) == 512
        assert ids[0] == CLS_ID and ids[-1] == SEP_ID

    def test_determinism(self, vocab):
        text = "while x < 10 : x += 1"
        assert tokenize(text, vocab, 64) == tokenize(text, vocab, 64)

    def test_blank_text(self, vocab):
        assert tokenize("   ", vocab, 64) == [CLS_ID, SEP_ID]

    def test_unknown_maps_to_unk(self, vocab):
        ids = tokenize("definitely_not_in_any_corpus_zzz", vocab, 64)
        assert ids == [CLS_ID, UNK_ID, SEP_ID]


class TestEncoderConfig:
    def test_head_divisibility(self):
        with pytest.raises(ConfigError):
            EncoderConfig(vocab_size=10, d_model=30, n_heads=4)

    def test_max_len_floor(self):
        with pytest.raises(ConfigError):
            EncoderConfig(vocab_size=10, max_len=4)


class TestEncode:
    def test_eval_determinism_bitwise(self, vocab):
        encoder = _tiny_encoder(vocab).eval()
        seq = tokenize("dA_x = 1", vocab, 64)
        with torch.no_grad():
            a = encode_one(encoder, seq)
            b = encode_one(encoder, seq)
        assert torch.equal(a, b)

    def test_permutation_sensitive(self, vocab):
        encoder = _tiny_encoder(vocab, seed=3).eval()
        base = [CLS_ID, 7, 9, SEP_ID]
        swapped = [CLS_ID, 9, 7, SEP_ID]
        with torch.no_grad():
            assert not torch.equal(encode_one(encoder, base), encode_one(encoder, swapped))

    def test_output_dimension(self, vocab):
        encoder = _tiny_encoder(vocab, d_model=32).eval()
        for n_tokens in (2, 5, 17):
            seq = [CLS_ID] + [5] * (n_tokens - 2) + [SEP_ID]
            with torch.no_grad():
                assert encode_one(encoder, seq).shape == (32,)

    def test_too_long_rejected(self, vocab):
        encoder = _tiny_encoder(vocab, max_len=16)
        with pytest.raises(ContractError):
            encode_batch(encoder, [[CLS_ID] + [5] * 20 + [SEP_ID]])

    def test_truncation_stable(self, vocab):
        # two texts that agree on the first max_len-2 tokens encode identically
        encoder = _tiny_encoder(vocab, max_len=16).eval()
        t1 = " ".join("1" for _ in range(30))
        t2 = " ".join("1" for _ in range(60))
        with torch.no_grad():
            a = encode_one(encoder, tokenize(t1, vocab, 16))
            b = encode_one(encoder, tokenize(t2, vocab, 16))
        assert torch.equal(a, b)

    def test_build_is_seeded(self, vocab):
        e1 = _tiny_encoder(vocab, seed=5)
        e2 = _tiny_encoder(vocab, seed=5)
        for p1, p2 in zip(e1.parameters(), e2.parameters()):
            assert torch.equal(p1, p2)


class TestCosine:
    def test_identity(self):
        v = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
        assert float(cosine(v, v)) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        a = torch.tensor([1.0, 0.0])
        b = torch.tensor([0.0, 1.0])
        assert float(cosine(a, b)) == 0.0

    def test_against_compensated_reference(self):
        rng = random.Random(5)
        for _ in range(50):
            a = [rng.uniform(-2, 2) for _ in range(8)]
            b = [rng.uniform(-2, 2) for _ in range(8)]
            got = float(cosine(torch.tensor(a, dtype=torch.float64), torch.tensor(b, dtype=torch.float64)))
            assert abs(got - reference_cosine(a, b)) < 1e-7

    def test_symmetry_and_bound(self):
        rng = torch.Generator().manual_seed(2)
        for _ in range(50):
            a = torch.randn(6, generator=rng, dtype=torch.float64)
            b = torch.randn(6, generator=rng, dtype=torch.float64)
            assert float(cosine(a, b)) == float(cosine(b, a))
            assert abs(float(cosine(a, b))) <= 1.0 + 1e-9

    def test_scale_invariance(self):
        a = torch.tensor([0.3, -1.2, 0.8], dtype=torch.float64)
        b = torch.tensor([1.1, 0.4, -0.5], dtype=torch.float64)
        assert float(cosine(2.0 * a, b)) == pytest.approx(float(cosine(a, b)), abs=1e-15)

    def test_zero_norm_rejected(self):
        with pytest.raises(NumericError):
            cosine(torch.zeros(3), torch.ones(3))

    def test_matrix_matches_pairwise(self):
        rng = torch.Generator().manual_seed(9)
        a = torch.randn(4, 8, generator=rng, dtype=torch.float64)
        b = torch.randn(5, 8, generator=rng, dtype=torch.float64)
        matrix = cosine_matrix(a, b)
        for i in range(4):
            for j in range(5):
                assert float(matrix[i, j]) == pytest.approx(float(cosine(a[i], b[j])), abs=1e-12)


class TestGradients:
    def test_cosine_of_encodings_gradcheck(self, vocab):
        encoder = _tiny_encoder(vocab, d_model=16, n_layers=1, dtype=torch.float64)
        encoder.eval()  # no dropout; the loss must be deterministic for FD
        seq_s = tokenize("dA_x = 1 + 2", vocab, 32)
        seq_t = tokenize("dB_y = 3", vocab, 32)

        def loss_fn():
            return cosine(encode_one(encoder, seq_s), encode_one(encoder, seq_t))

        checked = check_param_grads(loss_fn, encoder.parameters(), coords_per_tensor=4)
        assert checked >= 20
